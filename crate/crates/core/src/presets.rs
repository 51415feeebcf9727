//! Built-in taxonomies, scene specs and schedules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::protocol::{IncrementMode, ScheduleConfig, StepConfig};
use crate::synth::{LeafFamily, SceneSpec, ShapeFamily, PALETTE};
use crate::taxonomy::{NodeId, NodeRecord, Taxonomy, TaxonomyDoc};

pub const ENDOVIS_LIKE_12: &str = "endovis-like-12";
pub const REFINE_LIKE_10: &str = "refine-like-10";
pub const REFINE_LIKE_19: &str = "refine-like-19";

pub const DISJOINT_8_1: &str = "disjoint-8-1";
pub const REFINEMENT_4_2_2_2_2_4: &str = "refinement-4-2-2-2-2-4";
pub const REFINEMENT_11_4_3_2_3: &str = "refinement-11-4-3-2-3";

pub const SCENE_PRESETS: [&str; 3] = [ENDOVIS_LIKE_12, REFINE_LIKE_10, REFINE_LIKE_19];
pub const SCHEDULE_PRESETS: [&str; 3] = [DISJOINT_8_1, REFINEMENT_4_2_2_2_2_4, REFINEMENT_11_4_3_2_3];

fn doc(nodes: &[(NodeId, &str, Option<NodeId>)]) -> TaxonomyDoc {
    TaxonomyDoc { nodes: nodes.iter().map(|&(i, n, p)| NodeRecord::new(i, n, p)).collect() }
}

/// Twelve leaves, three levels: instruments and anatomy.
pub fn endovis_like_12() -> TaxonomyDoc {
    doc(&[
        (0, "root", None),
        (1, "instrument", Some(0)),
        (2, "robotic-tool", Some(1)),
        (3, "instrument-shaft", Some(2)),
        (4, "instrument-clasper", Some(2)),
        (5, "instrument-wrist", Some(2)),
        (6, "auxiliary-tool", Some(1)),
        (7, "suction-instrument", Some(6)),
        (8, "ultrasound-probe", Some(6)),
        (9, "clamp", Some(6)),
        (10, "suture", Some(1)),
        (11, "suturing-needle", Some(10)),
        (12, "thread", Some(10)),
        (13, "anatomy", Some(0)),
        (14, "kidney", Some(13)),
        (15, "kidney-parenchyma", Some(14)),
        (16, "covered-kidney", Some(14)),
        (17, "bowel", Some(13)),
        (18, "small-intestine", Some(17)),
        (19, "fat-tissue", Some(17)),
    ])
}

/// Ten final leaves reached through a 4-2-2-2-2-4 refinement.
pub fn refine_like_10() -> TaxonomyDoc {
    doc(&[
        (0, "root", None),
        (1, "instrument", Some(0)),
        (2, "tissue", Some(0)),
        (3, "accessory", Some(0)),
        (4, "organ", Some(0)),
        (5, "robotic-tool", Some(1)),
        (6, "handheld-tool", Some(1)),
        (7, "connective", Some(2)),
        (8, "bowel", Some(2)),
        (9, "shaft", Some(5)),
        (10, "clasper", Some(5)),
        (11, "kidney-parenchyma", Some(4)),
        (12, "covered-kidney", Some(4)),
        (13, "needle", Some(3)),
        (14, "thread", Some(3)),
        (15, "small-intestine", Some(8)),
        (16, "large-intestine", Some(8)),
    ])
}

/// Nineteen final leaves reached through an 11-4-3-2-3 refinement.
pub fn refine_like_19() -> TaxonomyDoc {
    doc(&[
        (0, "root", None),
        (1, "table", Some(0)),
        (2, "monitor", Some(0)),
        (3, "staff", Some(0)),
        (4, "instrument", Some(0)),
        (5, "patient", Some(0)),
        (6, "lamp", Some(0)),
        (7, "cart", Some(0)),
        (8, "drape", Some(0)),
        (9, "anesthesia-machine", Some(0)),
        (10, "cable", Some(0)),
        (11, "floor-marker", Some(0)),
        (12, "surgeon", Some(3)),
        (13, "nurse", Some(3)),
        (14, "drill", Some(4)),
        (15, "saw", Some(4)),
        (16, "torso", Some(5)),
        (17, "limb", Some(5)),
        (18, "head", Some(5)),
        (19, "head-surgeon", Some(12)),
        (20, "assistant-surgeon", Some(12)),
        (21, "instrument-tray", Some(7)),
        (22, "imaging-cart", Some(7)),
        (23, "waste-cart", Some(7)),
    ])
}

pub fn taxonomy_doc(name: &str) -> Result<TaxonomyDoc> {
    match name {
        ENDOVIS_LIKE_12 => Ok(endovis_like_12()),
        REFINE_LIKE_10 => Ok(refine_like_10()),
        REFINE_LIKE_19 => Ok(refine_like_19()),
        _ => Err(Error::Config(format!("unknown taxonomy preset {name:?}"))),
    }
}

pub fn taxonomy(name: &str) -> Result<Taxonomy> {
    Taxonomy::load(&taxonomy_doc(name)?)
}

/// Hand-tuned scene families for the 12-leaf benchmark: anatomy blobs are
/// large, instrument parts small, ribbons thin and infrequent.
fn endovis_scene(height: usize, width: usize) -> Result<SceneSpec> {
    use ShapeFamily::*;
    let fam = |leaf, shape, color: [f64; 3], size: [f64; 2], weight| LeafFamily {
        leaf,
        shape,
        color,
        jitter: 0.03,
        size,
        weight,
    };
    let robotic = PALETTE[9];
    let auxiliary = PALETTE[2];
    let suture = PALETTE[3];
    let kidney = PALETTE[0];
    let bowel = PALETTE[6];
    let families = vec![
        fam(3, Rectangle, robotic, [6.0, 9.0], 1.0),
        fam(4, Ellipse, robotic, [4.0, 6.0], 1.0),
        fam(5, Ribbon, robotic, [5.0, 8.0], 0.6),
        fam(7, Rectangle, auxiliary, [6.0, 9.0], 1.0),
        fam(8, Ellipse, auxiliary, [4.0, 6.5], 1.0),
        fam(9, Ribbon, auxiliary, [5.0, 8.0], 0.6),
        fam(11, Ellipse, suture, [3.5, 5.5], 1.0),
        fam(12, Ribbon, suture, [6.0, 9.0], 0.6),
        fam(15, Ellipse, kidney, [8.0, 12.0], 1.0),
        fam(16, Rectangle, kidney, [8.0, 12.0], 1.0),
        fam(18, Ellipse, bowel, [8.0, 12.0], 1.0),
        fam(19, Rectangle, bowel, [8.0, 12.0], 1.0),
    ];
    let spec = SceneSpec {
        name: ENDOVIS_LIKE_12.to_string(),
        height,
        width,
        objects: [2, 4],
        background: [0.16, 0.08, 0.10],
        pixel_noise: 0.03,
        texture_seed: 11,
        taxonomy: endovis_like_12(),
        families,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn scene_spec(name: &str, height: usize, width: usize) -> Result<SceneSpec> {
    match name {
        ENDOVIS_LIKE_12 => endovis_scene(height, width),
        REFINE_LIKE_10 | REFINE_LIKE_19 => SceneSpec::for_taxonomy(name, &taxonomy(name)?, height, width),
        _ => Err(Error::Config(format!("unknown scene preset {name:?}"))),
    }
}

fn plain(classes: &[NodeId]) -> StepConfig {
    StepConfig { classes: classes.to_vec(), parents: BTreeMap::new() }
}

fn refine(tax: &TaxonomyDoc, classes: &[NodeId]) -> StepConfig {
    let parents = classes
        .iter()
        .map(|&c| {
            let p = tax.nodes.iter().find(|r| r.id == c).and_then(|r| r.parent).expect("preset node");
            (c, p)
        })
        .collect();
    StepConfig { classes: classes.to_vec(), parents }
}

/// Returns the schedule config and the name of its taxonomy preset.
pub fn schedule(name: &str) -> Result<(ScheduleConfig, &'static str)> {
    match name {
        DISJOINT_8_1 => Ok((
            ScheduleConfig {
                mode: IncrementMode::Disjoint,
                steps: vec![
                    plain(&[3, 4, 7, 8, 9, 11, 12, 19]),
                    plain(&[16]),
                    plain(&[15]),
                    plain(&[5]),
                    plain(&[18]),
                ],
                seed: 0,
            },
            ENDOVIS_LIKE_12,
        )),
        REFINEMENT_4_2_2_2_2_4 => {
            let t = refine_like_10();
            Ok((
                ScheduleConfig {
                    mode: IncrementMode::Refinement,
                    steps: vec![
                        plain(&[1, 2, 3, 4]),
                        refine(&t, &[5, 6]),
                        refine(&t, &[7, 8]),
                        refine(&t, &[9, 10]),
                        refine(&t, &[11, 12]),
                        refine(&t, &[13, 14, 15, 16]),
                    ],
                    seed: 0,
                },
                REFINE_LIKE_10,
            ))
        }
        REFINEMENT_11_4_3_2_3 => {
            let t = refine_like_19();
            Ok((
                ScheduleConfig {
                    mode: IncrementMode::Refinement,
                    steps: vec![
                        plain(&(1..=11).collect::<Vec<_>>()),
                        refine(&t, &[12, 13, 14, 15]),
                        refine(&t, &[16, 17, 18]),
                        refine(&t, &[19, 20]),
                        refine(&t, &[21, 22, 23]),
                    ],
                    seed: 0,
                },
                REFINE_LIKE_19,
            ))
        }
        _ => Err(Error::Config(format!("unknown schedule preset {name:?}"))),
    }
}
