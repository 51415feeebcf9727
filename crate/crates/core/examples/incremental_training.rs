//! A short incremental run on the disjoint schedule: base training, then one
//! class per step with hierarchical pseudo-labels, evaluated after each step.
//!
//! `cargo run --release --example incremental_training -- [epochs_base] [epochs_incremental]`

use hyciss::experiment::{run, ExperimentConfig};
use hyciss::model::BackboneConfig;
use hyciss::presets;
use hyciss::protocol::build_schedule;
use hyciss::synth::Dataset;

fn main() -> hyciss::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("epoch count"));
    let spec = presets::scene_spec(presets::ENDOVIS_LIKE_12, 32, 32)?;
    let data = Dataset::generate(&spec, 1500, 300, 0)?;
    let (cfg, tax) = presets::schedule(presets::DISJOINT_8_1)?;
    let schedule = build_schedule(&cfg, &presets::taxonomy(tax)?)?;

    let mut exp = ExperimentConfig::new("full");
    exp.backbone = BackboneConfig { channels: vec![3, 12, 16, 8], ..BackboneConfig::default() };
    exp.train.epochs_base = args.next().unwrap_or(2);
    exp.train.epochs_incremental = args.next().unwrap_or(1);
    exp.train.crop = Some(24);
    exp.train_per_step = 200;
    exp.val_per_step = 50;

    let out = run(&exp, &schedule, &data.train, &data.val, None, true)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:6.2}")).unwrap_or_else(|| "     -".into());
    for r in &out.reports {
        println!("step {}: base {} novel {} all {}", r.step, cell(r.miou_base), cell(r.miou_novel), cell(r.miou_all));
    }
    let audit = out.audit.expect("audit requested");
    println!("audit: {} label maps, {} pseudo-labelled pixels, {} violations", audit.batches, audit.pseudo_pixels, audit.violations.len());
    Ok(())
}
