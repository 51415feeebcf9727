//! Pseudo-labels for background pixels from the frozen previous model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::ScoreVolume;
use crate::taxonomy::{NodeId, Taxonomy, BACKGROUND};

/// Uniform threshold of the leaf-only baseline.
pub const UNIFORM_THRESHOLD: f64 = 0.5;

/// Per-level confidence thresholds, indexed by depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LevelThresholds(Vec<f64>);

impl Default for LevelThresholds {
    fn default() -> Self {
        Self(vec![0.6, 0.6, 0.4])
    }
}

impl LevelThresholds {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return Err(Error::Config(format!("thresholds must lie in (0, 1): {levels:?}")));
        }
        Ok(Self(levels))
    }

    pub fn uniform(value: f64, levels: usize) -> Result<Self> {
        Self::new(vec![value; levels])
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn check_depth(&self, tax: &Taxonomy) -> Result<()> {
        if tax.num_levels() > self.0.len() {
            return Err(Error::ThresholdDepthMismatch { depth: tax.num_levels(), thresholds: self.0.len() });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for LevelThresholds {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LevelThresholds> for Vec<f64> {
    fn from(t: LevelThresholds) -> Self {
        t.0
    }
}

/// A label map after pseudo-labeling.
///
/// `labels` may hold internal nodes; the supervision builder treats their
/// strict descendants as ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<NodeId>,
    /// Pixels whose label came from the old model.
    pub pseudo: Vec<bool>,
}

impl PseudoLabels {
    pub fn pseudo_count(&self) -> usize {
        self.pseudo.iter().filter(|&&b| b).count()
    }
}

fn check_shape(old: &ScoreVolume, labels: &[NodeId], tax: &Taxonomy) -> Result<()> {
    if old.pixels() != labels.len() || old.nodes() != tax.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "scores {}x{} against {} labels and {} nodes",
            old.pixels(),
            old.nodes(),
            labels.len(),
            tax.num_classes()
        )));
    }
    Ok(())
}

fn sorted_children(tax: &Taxonomy, node: NodeId) -> Vec<NodeId> {
    let mut c = tax.children(node).to_vec();
    c.sort_unstable();
    c
}

/// Hierarchical pseudo-labeling by thresholded argmax descent on
/// descendant-max scores.
pub fn pseudo_label(
    old_scores: &ScoreVolume,
    train_label: &[NodeId],
    tax_old: &Taxonomy,
    th: &LevelThresholds,
) -> Result<PseudoLabels> {
    th.check_depth(tax_old)?;
    check_shape(old_scores, train_label, tax_old)?;
    let k = tax_old.num_classes();
    let agg = old_scores.desc_max(tax_old);
    let kids: Vec<Vec<NodeId>> = tax_old.classes().iter().map(|&v| sorted_children(tax_old, v)).collect();
    let roots = sorted_children(tax_old, tax_old.root());
    let col = |v: NodeId| tax_old.class_index(v).expect("class");

    let mut labels = train_label.to_vec();
    let mut pseudo = vec![false; labels.len()];
    for (p, label) in labels.iter_mut().enumerate() {
        if *label != BACKGROUND {
            continue;
        }
        let row = &agg[p * k..(p + 1) * k];
        let mut accepted = None;
        let mut cands: &[NodeId] = &roots;
        for &s in th.levels() {
            let Some(&first) = cands.first() else { break };
            let best = cands[1..].iter().fold(first, |b, &c| if row[col(c)] > row[col(b)] { c } else { b });
            if row[col(best)] <= s {
                break;
            }
            accepted = Some(best);
            cands = &kids[col(best)];
        }
        if let Some(node) = accepted {
            *label = node;
            pseudo[p] = true;
        }
    }
    Ok(PseudoLabels { labels, pseudo })
}

/// Leaf-only baseline: background pixels adopt the best-scoring leaf when its
/// raw sigmoid score exceeds 0.5.
pub fn uniform_pseudo_label(
    old_scores: &ScoreVolume,
    train_label: &[NodeId],
    tax_old: &Taxonomy,
) -> Result<PseudoLabels> {
    check_shape(old_scores, train_label, tax_old)?;
    let mut leaves = tax_old.leaves();
    leaves.sort_unstable();
    let cols: Vec<usize> = leaves.iter().map(|&v| tax_old.class_index(v).expect("class")).collect();
    let mut labels = train_label.to_vec();
    let mut pseudo = vec![false; labels.len()];
    for (p, label) in labels.iter_mut().enumerate() {
        if *label != BACKGROUND || leaves.is_empty() {
            continue;
        }
        let row = old_scores.pixel(p);
        let mut best = 0;
        for i in 1..cols.len() {
            if row[cols[i]] > row[cols[best]] {
                best = i;
            }
        }
        if row[cols[best]] > UNIFORM_THRESHOLD {
            *label = leaves[best];
            pseudo[p] = true;
        }
    }
    Ok(PseudoLabels { labels, pseudo })
}
