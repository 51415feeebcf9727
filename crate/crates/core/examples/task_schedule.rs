//! Builds the incremental schedules, shows per-step label spaces, and applies
//! the background shift to a label map.

use hyciss::presets;
use hyciss::protocol::build_schedule;
use hyciss::taxonomy::BACKGROUND;

fn main() -> hyciss::Result<()> {
    for name in presets::SCHEDULE_PRESETS {
        let (cfg, tax_name) = presets::schedule(name)?;
        let tax = presets::taxonomy(tax_name)?;
        let s = build_schedule(&cfg, &tax)?;
        println!("{name}: \"{}\" over {} steps", s.name(), s.num_steps());
        for t in 1..=s.num_steps() {
            let names: Vec<&str> = s.classes(t)?.iter().filter_map(|&c| tax.name(c)).collect();
            println!("  step {t}: {names:?}");
        }
        let part = s.metric_partition();
        println!("  base {:?} novel {:?}", part.base, part.novel);
    }

    let (cfg, tax_name) = presets::schedule(presets::REFINEMENT_4_2_2_2_2_4)?;
    let s = build_schedule(&cfg, &presets::taxonomy(tax_name)?)?;
    let tax = s.final_taxonomy();
    println!("final leaves and background: {:?} bg", tax.leaves());
    let full: Vec<u32> = tax.leaves().into_iter().chain([BACKGROUND]).collect();
    for t in [1, 3, s.num_steps()] {
        let seen: Vec<String> = s
            .apply_background_shift(&full, t)?
            .into_iter()
            .map(|l| if l == BACKGROUND { "bg".into() } else { l.to_string() })
            .collect();
        println!("step {t} sees {}", seen.join(" "));
    }
    Ok(())
}
