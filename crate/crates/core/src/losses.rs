//! Hierarchical composite loss over per-node sigmoid scores.
//!
//! Every function here works on flat `[pixels × nodes]` row-major buffers
//! whose columns follow [`Taxonomy::classes`]. Forward values and gradients
//! are separate functions so the autodiff tape can call them directly.
//!
//! The composite objective is
//! `α · hier_bce(anc_min, desc_max) + β · hier_dice(desc_max) + γ · hier_ce(desc_max)`,
//! where `anc_min_v` is the minimum score over the ancestor-or-self set of
//! `v` and `desc_max_v` the maximum over its descendant-or-self set.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::taxonomy::{Closures, NodeId, Taxonomy, BACKGROUND, IGNORE};

/// Probabilities inside logarithms are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]`.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 5.0, beta: 0.7, gamma: 0.3, dice_smooth: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma, self.dice_smooth]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// Dense per-pixel, per-node supervision derived from a label map.
///
/// A pixel labelled with node `u` is positive on the ancestor-or-self set of
/// `u`. When `u` is internal (a partial-depth pseudo-label) its strict
/// descendants get weight zero. Background pixels are negative everywhere;
/// [`IGNORE`] pixels carry no weight at all.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub pixels: usize,
    pub nodes: usize,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
    /// Pixels with at least one weighted node.
    pub active_pixels: usize,
    /// Per pixel, index into `root_columns` of the label's level-0 ancestor.
    pub top_class: Vec<Option<usize>>,
    /// Column indices of the root children.
    pub root_columns: Vec<usize>,
}

impl Supervision {
    pub fn from_labels(tax: &Taxonomy, labels: &[NodeId]) -> Result<Self> {
        let k = tax.num_classes();
        let p = labels.len();
        let root_columns: Vec<usize> = tax
            .root_children()
            .iter()
            .map(|&v| tax.class_index(v).expect("root child is a class"))
            .collect();
        let mut target = vec![0.0; p * k];
        let mut weight = vec![1.0; p * k];
        let mut top_class = vec![None; p];
        let mut active_pixels = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = i * k..(i + 1) * k;
            match label {
                IGNORE => weight[row].fill(0.0),
                BACKGROUND => active_pixels += 1,
                u => {
                    active_pixels += 1;
                    for a in tax.ancestors(u)? {
                        target[i * k + tax.class_index(*a).expect("class")] = 1.0;
                    }
                    for d in tax.descendants(u)? {
                        if *d != u {
                            weight[i * k + tax.class_index(*d).expect("class")] = 0.0;
                        }
                    }
                    let top = tax.top_ancestor(u)?;
                    top_class[i] = tax.root_children().iter().position(|&r| r == top);
                }
            }
        }
        Ok(Self { pixels: p, nodes: k, target, weight, active_pixels, top_class, root_columns })
    }

    pub fn labeled_pixels(&self) -> usize {
        self.top_class.iter().filter(|c| c.is_some()).count()
    }
}

// ---------------------------------------------------------------------------
// aggregation

/// Minimum over each column's closure list. Returns values and arg indices;
/// ties resolve to the first entry of the closure (lowest node id).
pub fn reduce_closures(
    scores: &[f64],
    nodes: usize,
    closures: &[Vec<usize>],
    take_max: bool,
) -> (Vec<f64>, Vec<u32>) {
    let pixels = scores.len() / nodes.max(1);
    let mut vals = vec![0.0; scores.len()];
    let mut args = vec![0u32; scores.len()];
    for p in 0..pixels {
        let row = &scores[p * nodes..(p + 1) * nodes];
        for (v, list) in closures.iter().enumerate() {
            let mut best = list[0];
            for &u in &list[1..] {
                let better = if take_max { row[u] > row[best] } else { row[u] < row[best] };
                if better {
                    best = u;
                }
            }
            vals[p * nodes + v] = row[best];
            args[p * nodes + v] = best as u32;
        }
    }
    (vals, args)
}

/// Routes an aggregate's upstream gradient back to the achieving entries.
pub fn reduce_closures_grad(args: &[u32], nodes: usize, upstream: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; upstream.len()];
    for (i, (&a, &u)) in args.iter().zip(upstream).enumerate() {
        let p = i / nodes;
        g[p * nodes + a as usize] += u;
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregates {
    pub anc_min: Vec<f64>,
    pub desc_max: Vec<f64>,
}

pub fn aggregate(scores: &[f64], nodes: usize, closures: &Closures) -> Aggregates {
    let (anc_min, _) = reduce_closures(scores, nodes, &closures.ancestors, false);
    let (desc_max, _) = reduce_closures(scores, nodes, &closures.descendants, true);
    Aggregates { anc_min, desc_max }
}

// ---------------------------------------------------------------------------
// binary term

#[inline]
fn clamp_prob(x: f64) -> (f64, bool) {
    if x < LOG_CLAMP {
        (LOG_CLAMP, true)
    } else if x > 1.0 - LOG_CLAMP {
        (1.0 - LOG_CLAMP, true)
    } else {
        (x, false)
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

/// Mean over active pixels of `Σ_v -l log(anc_min) - (1-l) log(1 - desc_max)`.
pub fn hier_bce(anc_min: &[f64], desc_max: &[f64], sup: &Supervision) -> Result<f64> {
    check_finite(anc_min, "hier_bce input")?;
    check_finite(desc_max, "hier_bce input")?;
    if sup.active_pixels == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..anc_min.len() {
        let w = sup.weight[i];
        if w == 0.0 {
            continue;
        }
        let l = sup.target[i];
        if l > 0.0 {
            total -= w * l * clamp_prob(anc_min[i]).0.ln();
        }
        if l < 1.0 {
            total -= w * (1.0 - l) * (1.0 - clamp_prob(desc_max[i]).0).ln();
        }
    }
    Ok(total / sup.active_pixels as f64)
}

/// Gradients of [`hier_bce`] with respect to `anc_min` and `desc_max`.
pub fn hier_bce_grad(anc_min: &[f64], desc_max: &[f64], sup: &Supervision) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; anc_min.len()];
    let mut gd = vec![0.0; desc_max.len()];
    if sup.active_pixels == 0 {
        return (ga, gd);
    }
    let inv = 1.0 / sup.active_pixels as f64;
    for i in 0..anc_min.len() {
        let w = sup.weight[i];
        if w == 0.0 {
            continue;
        }
        let l = sup.target[i];
        let (a, a_clamped) = clamp_prob(anc_min[i]);
        if l > 0.0 && !a_clamped {
            ga[i] = -w * l / a * inv;
        }
        let (d, d_clamped) = clamp_prob(desc_max[i]);
        if l < 1.0 && !d_clamped {
            gd[i] = w * (1.0 - l) / (1.0 - d) * inv;
        }
    }
    (ga, gd)
}

// ---------------------------------------------------------------------------
// dice term

fn dice_sums(desc_max: &[f64], sup: &Supervision, v: usize) -> (f64, f64, f64) {
    let k = sup.nodes;
    let (mut inter, mut pred_sq, mut tgt_sq) = (0.0, 0.0, 0.0);
    for p in 0..sup.pixels {
        let i = p * k + v;
        let w = sup.weight[i];
        if w == 0.0 {
            continue;
        }
        let d = desc_max[i];
        let l = sup.target[i];
        inter += w * d * l;
        pred_sq += w * d * d;
        tgt_sq += w * l * l;
    }
    (inter, pred_sq, tgt_sq)
}

/// Mean over nodes of `1 - (2Σ d·l + smooth) / (Σ d² + Σ l² + smooth)`.
pub fn hier_dice(desc_max: &[f64], sup: &Supervision, smooth: f64) -> Result<f64> {
    check_finite(desc_max, "hier_dice input")?;
    if sup.nodes == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for v in 0..sup.nodes {
        let (inter, pred_sq, tgt_sq) = dice_sums(desc_max, sup, v);
        let den = pred_sq + tgt_sq + smooth;
        if den > 0.0 {
            total += 1.0 - (2.0 * inter + smooth) / den;
        }
    }
    Ok(total / sup.nodes as f64)
}

pub fn hier_dice_grad(desc_max: &[f64], sup: &Supervision, smooth: f64) -> Vec<f64> {
    let k = sup.nodes;
    let mut g = vec![0.0; desc_max.len()];
    if k == 0 {
        return g;
    }
    for v in 0..k {
        let (inter, pred_sq, tgt_sq) = dice_sums(desc_max, sup, v);
        let num = 2.0 * inter + smooth;
        let den = pred_sq + tgt_sq + smooth;
        if den <= 0.0 {
            continue;
        }
        for p in 0..sup.pixels {
            let i = p * k + v;
            let w = sup.weight[i];
            if w == 0.0 {
                continue;
            }
            let d_num = 2.0 * w * sup.target[i];
            let d_den = 2.0 * w * desc_max[i];
            g[i] = -(d_num * den - num * d_den) / (den * den) / k as f64;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// cross-entropy term

/// Softmax cross-entropy over the root children's `desc_max` values, averaged
/// over pixels whose label has a level-0 ancestor.
pub fn hier_ce(desc_max: &[f64], sup: &Supervision) -> Result<f64> {
    check_finite(desc_max, "hier_ce input")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..sup.pixels {
        let Some(cls) = sup.top_class[p] else { continue };
        let row = &desc_max[p * sup.nodes..(p + 1) * sup.nodes];
        let lse = log_sum_exp(sup.root_columns.iter().map(|&c| row[c]));
        total += lse - row[sup.root_columns[cls]];
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(total / count as f64)
}

pub fn hier_ce_grad(desc_max: &[f64], sup: &Supervision) -> Vec<f64> {
    let mut g = vec![0.0; desc_max.len()];
    let count = sup.labeled_pixels();
    if count == 0 {
        return g;
    }
    let inv = 1.0 / count as f64;
    for p in 0..sup.pixels {
        let Some(cls) = sup.top_class[p] else { continue };
        let row = &desc_max[p * sup.nodes..(p + 1) * sup.nodes];
        let lse = log_sum_exp(sup.root_columns.iter().map(|&c| row[c]));
        for (j, &c) in sup.root_columns.iter().enumerate() {
            let soft = (row[c] - lse).exp();
            let onehot = if j == cls { 1.0 } else { 0.0 };
            g[p * sup.nodes + c] += (soft - onehot) * inv;
        }
    }
    g
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// flat baseline

/// Per-pixel target for the flat softmax baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlatTarget {
    Class(usize),
    Background,
    Ignore,
}

/// Labels for a softmax over `[background, class_0, .., class_{K-1}]` where the
/// background logit is pinned to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatSupervision {
    pub nodes: usize,
    pub targets: Vec<FlatTarget>,
}

impl FlatSupervision {
    pub fn from_labels(tax: &Taxonomy, labels: &[NodeId]) -> Result<Self> {
        let targets = labels
            .iter()
            .map(|&l| match l {
                BACKGROUND => Ok(FlatTarget::Background),
                IGNORE => Ok(FlatTarget::Ignore),
                id => tax.class_index(id).map(FlatTarget::Class).ok_or(Error::UnknownNode(id)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nodes: tax.num_classes(), targets })
    }

    fn counted(&self) -> usize {
        self.targets.iter().filter(|t| **t != FlatTarget::Ignore).count()
    }
}

pub fn flat_ce(logits: &[f64], sup: &FlatSupervision) -> Result<f64> {
    check_finite(logits, "flat_ce input")?;
    let k = sup.nodes;
    let count = sup.counted();
    if count == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in sup.targets.iter().enumerate() {
        let row = &logits[p * k..(p + 1) * k];
        let lse = log_sum_exp(std::iter::once(0.0).chain(row.iter().copied()));
        total += match t {
            FlatTarget::Class(c) => lse - row[*c],
            FlatTarget::Background => lse,
            FlatTarget::Ignore => 0.0,
        };
    }
    Ok(total / count as f64)
}

pub fn flat_ce_grad(logits: &[f64], sup: &FlatSupervision) -> Vec<f64> {
    let k = sup.nodes;
    let mut g = vec![0.0; logits.len()];
    let count = sup.counted();
    if count == 0 {
        return g;
    }
    let inv = 1.0 / count as f64;
    for (p, t) in sup.targets.iter().enumerate() {
        if *t == FlatTarget::Ignore {
            continue;
        }
        let row = &logits[p * k..(p + 1) * k];
        let lse = log_sum_exp(std::iter::once(0.0).chain(row.iter().copied()));
        for c in 0..k {
            let onehot = if *t == FlatTarget::Class(c) { 1.0 } else { 0.0 };
            g[p * k + c] = ((row[c] - lse).exp() - onehot) * inv;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// composite

/// The three weighted terms of the composite loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.bce + w.beta * self.dice + w.gamma * self.ce
    }
}

/// Evaluates every term directly from sigmoid scores, without a tape.
/// The CE term is zero when no pixel carries a class label.
pub fn topics_loss_terms(
    scores: &[f64],
    labels: &[NodeId],
    tax: &Taxonomy,
    w: &LossWeights,
) -> Result<LossTerms> {
    let sup = Supervision::from_labels(tax, labels)?;
    let agg = aggregate(scores, tax.num_classes(), &tax.index_closures());
    let bce = hier_bce(&agg.anc_min, &agg.desc_max, &sup)?;
    let dice = hier_dice(&agg.desc_max, &sup, w.dice_smooth)?;
    let ce = match hier_ce(&agg.desc_max, &sup) {
        Ok(v) => v,
        Err(Error::NoLabeledPixels) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(LossTerms { bce, dice, ce })
}

pub fn topics_loss(
    scores: &[f64],
    labels: &[NodeId],
    tax: &Taxonomy,
    w: &LossWeights,
) -> Result<f64> {
    Ok(topics_loss_terms(scores, labels, tax, w)?.total(w))
}

/// Records the weighted composite on a tape from a `[P, K]` score variable.
/// Terms with zero weight are not recorded.
pub fn record_topics_loss(
    tape: &mut Tape,
    scores: Var,
    closures: &Closures,
    sup: Arc<Supervision>,
    w: &LossWeights,
) -> Result<Var> {
    let desc = tape.reduce_closures(scores, &closures.descendants, true);
    let mut parts = Vec::new();
    if w.alpha > 0.0 {
        let anc = tape.reduce_closures(scores, &closures.ancestors, false);
        let bce = tape.hier_bce(anc, desc, sup.clone())?;
        parts.push(tape.scale(bce, w.alpha));
    }
    if w.beta > 0.0 {
        let dice = tape.hier_dice(desc, sup.clone(), w.dice_smooth)?;
        parts.push(tape.scale(dice, w.beta));
    }
    if w.gamma > 0.0 && sup.labeled_pixels() > 0 {
        let ce = tape.hier_ce(desc, sup)?;
        parts.push(tape.scale(ce, w.gamma));
    }
    let mut total = match parts.first() {
        Some(&v) => v,
        None => {
            let zero = tape.scale(scores, 0.0);
            return Ok(tape.sum(zero));
        }
    };
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(total)
}
