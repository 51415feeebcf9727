//! Renders procedural scenes, prints one as ASCII, reports class frequencies,
//! and round-trips a dataset through disk.

use hyciss::presets;
use hyciss::synth::{self, class_frequencies, Dataset};
use hyciss::taxonomy::BACKGROUND;

fn main() -> hyciss::Result<()> {
    let spec = presets::scene_spec(presets::ENDOVIS_LIKE_12, 32, 32)?;
    let tax = spec.taxonomy()?;
    let scene = synth::render(&spec, 0, 3);
    let glyphs = b"abcdefghijklmnopqrstuvwxyz";
    let leaves = tax.leaves();
    for row in scene.labels.chunks(32) {
        let line: String = row
            .iter()
            .map(|&l| match leaves.iter().position(|&v| v == l) {
                _ if l == BACKGROUND => '.',
                Some(i) => glyphs[i % glyphs.len()] as char,
                None => '?',
            })
            .collect();
        println!("{line}");
    }
    for (i, &l) in leaves.iter().enumerate() {
        print!("{}={} ", glyphs[i] as char, tax.name(l).unwrap_or("?"));
    }
    println!();

    let scenes = synth::generate(&spec, 200, 0);
    let freq = class_frequencies(&spec, &scenes);
    let max = freq.iter().map(|f| f.1).max().unwrap_or(1) as f64;
    for (id, n) in &freq {
        println!("{:<22} {:>7} px  {:.3} of max", tax.name(*id).unwrap_or("?"), n, *n as f64 / max);
    }

    let dir = std::env::temp_dir().join("hyciss-synthetic-example");
    let data = Dataset::generate(&spec, 20, 5, 1)?;
    let manifest = synth::save_dataset(&dir, &data)?;
    let back = synth::load_dataset(&dir)?;
    println!("saved {} splits to {}; reload identical: {}", manifest.splits.len(), dir.display(), back.train == data.train);
    Ok(())
}
