//! The composite loss on a tiny score volume: ancestor-min/descendant-max
//! BCE, per-node Dice and root-level cross-entropy.

use hyciss::losses::{topics_loss_terms, LossWeights};
use hyciss::taxonomy::{Taxonomy, BACKGROUND, IGNORE};

fn main() -> hyciss::Result<()> {
    let tax = Taxonomy::from_json(
        r#"{"nodes": [
        {"id": 0, "name": "root", "parent": null},
        {"id": 1, "name": "instrument", "parent": 0},
        {"id": 2, "name": "shaft", "parent": 1},
        {"id": 3, "name": "clasper", "parent": 1},
        {"id": 4, "name": "tissue", "parent": 0}
    ]}"#,
    )?;
    println!("columns {:?}", tax.classes());
    // four pixels: shaft, an internal pseudo-label, background, ignored
    let labels = [2, 1, BACKGROUND, IGNORE];
    let good = [
        0.9, 0.9, 0.1, 0.1, //
        0.8, 0.1, 0.7, 0.1, //
        0.1, 0.1, 0.1, 0.1, //
        0.5, 0.5, 0.5, 0.5,
    ];
    let bad = [
        0.2, 0.1, 0.8, 0.7, //
        0.1, 0.1, 0.1, 0.9, //
        0.9, 0.9, 0.9, 0.9, //
        0.5, 0.5, 0.5, 0.5,
    ];
    let w = LossWeights::default();
    for (name, s) in [("good", &good), ("bad", &bad)] {
        let t = topics_loss_terms(s, &labels, &tax, &w)?;
        println!("{name}: bce {:.4} dice {:.4} ce {:.4} total {:.4}", t.bce, t.dice, t.ce, t.total(&w));
    }
    Ok(())
}
