//! Relabels background pixels from an old model's scores, by thresholded
//! descent through the hierarchy and with the leaf-only rule.

use hyciss::head::ScoreVolume;
use hyciss::pseudolabel::{pseudo_label, uniform_pseudo_label, LevelThresholds};
use hyciss::taxonomy::{Taxonomy, BACKGROUND};

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
    // columns: instrument, shaft, clasper, tissue
    let rows = [
        [0.95, 0.90, 0.20, 0.05], // confident shaft
        [0.80, 0.45, 0.40, 0.10], // sure of the instrument, unsure which part
        [0.30, 0.20, 0.10, 0.35], // nothing passes
        [0.10, 0.10, 0.10, 0.90], // tissue
    ];
    let scores = ScoreVolume::new(2, 2, 4, rows.concat())?;
    let visible = [BACKGROUND, BACKGROUND, BACKGROUND, 4];
    let th = LevelThresholds::new(vec![0.6, 0.6])?;

    let hier = pseudo_label(&scores, &visible, &tax, &th)?;
    let flat = uniform_pseudo_label(&scores, &visible, &tax)?;
    let show = |l: u32| if l == BACKGROUND { "background".to_string() } else { tax.name(l).unwrap_or("?").to_string() };
    for p in 0..4 {
        println!("pixel {p}: hierarchical {:<11} uniform {:<11}", show(hier.labels[p]), show(flat.labels[p]));
    }
    println!("{} pseudo-labelled pixels (hierarchical), {} (uniform)", hier.pseudo_count(), flat.pseudo_count());
    Ok(())
}
