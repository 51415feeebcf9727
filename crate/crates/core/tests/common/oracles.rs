// Brute-force reference implementations built only from parent pointers.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hyciss::taxonomy::{NodeId, Taxonomy, BACKGROUND, IGNORE};

/// Parent-pointer view of a taxonomy; classes in column order.
pub struct Tree {
    pub parent: BTreeMap<NodeId, Option<NodeId>>,
    pub root: NodeId,
    pub classes: Vec<NodeId>,
}

impl Tree {
    pub fn new(tax: &Taxonomy) -> Self {
        let parent: BTreeMap<_, _> = tax.records().iter().map(|r| (r.id, r.parent)).collect();
        let root = parent.iter().find(|(_, p)| p.is_none()).map(|(id, _)| *id).unwrap();
        Self { parent, root, classes: tax.classes().to_vec() }
    }

    /// Chain from `v` up to, but excluding, the root.
    pub fn chain(&self, v: NodeId) -> Vec<NodeId> {
        let mut out = vec![v];
        let mut cur = v;
        while let Some(Some(p)) = self.parent.get(&cur) {
            if *p == self.root {
                break;
            }
            out.push(*p);
            cur = *p;
        }
        out
    }

    pub fn is_ancestor_or_self(&self, a: NodeId, v: NodeId) -> bool {
        self.chain(v).contains(&a)
    }

    pub fn children(&self, v: NodeId) -> Vec<NodeId> {
        self.parent.iter().filter(|(_, p)| **p == Some(v)).map(|(id, _)| *id).collect()
    }

    pub fn col(&self, v: NodeId) -> usize {
        self.classes.iter().position(|&c| c == v).unwrap()
    }

    pub fn level(&self, v: NodeId) -> usize {
        self.chain(v).len() - 1
    }
}

/// `max` of raw scores over the descendant-or-self set, per pixel and node.
pub fn desc_max(tree: &Tree, scores: &[f64]) -> Vec<f64> {
    let k = tree.classes.len();
    let mut out = vec![0.0; scores.len()];
    for p in 0..scores.len() / k {
        for (j, &v) in tree.classes.iter().enumerate() {
            out[p * k + j] = tree
                .classes
                .iter()
                .enumerate()
                .filter(|(_, &u)| tree.is_ancestor_or_self(v, u))
                .map(|(i, _)| scores[p * k + i])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// Target and weight of node `v` for a pixel labelled `label`.
fn target_weight(tree: &Tree, label: NodeId, v: NodeId) -> (f64, f64) {
    match label {
        IGNORE => (0.0, 0.0),
        BACKGROUND => (0.0, 1.0),
        u if tree.is_ancestor_or_self(v, u) => (1.0, 1.0),
        u if tree.is_ancestor_or_self(u, v) => (0.0, 0.0),
        _ => (0.0, 1.0),
    }
}

/// Per-node BCE on raw scores, summed over nodes and averaged over non-ignored pixels.
pub fn flat_bce(tree: &Tree, scores: &[f64], labels: &[NodeId]) -> f64 {
    let clamp = |x: f64| x.clamp(1e-7, 1.0 - 1e-7);
    let k = tree.classes.len();
    let mut total = 0.0;
    let mut count = 0;
    for (p, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        count += 1;
        for (j, &v) in tree.classes.iter().enumerate() {
            let s = clamp(scores[p * k + j]);
            let (t, _) = target_weight(tree, l, v);
            total += -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
        }
    }
    if count == 0 { 0.0 } else { total / count as f64 }
}

/// Soft Dice `1 - (2Σdl + s)/(Σd² + Σl² + s)` per node over `desc_max`, averaged over nodes.
pub fn dice(tree: &Tree, scores: &[f64], labels: &[NodeId], smooth: f64) -> f64 {
    let d = desc_max(tree, scores);
    let k = tree.classes.len();
    let mut total = 0.0;
    for (j, &v) in tree.classes.iter().enumerate() {
        let (mut inter, mut pd, mut pl) = (0.0, 0.0, 0.0);
        for (p, &l) in labels.iter().enumerate() {
            let (t, w) = target_weight(tree, l, v);
            if w == 0.0 {
                continue;
            }
            let x = d[p * k + j];
            inter += x * t;
            pd += x * x;
            pl += t * t;
        }
        total += 1.0 - (2.0 * inter + smooth) / (pd + pl + smooth);
    }
    total / k as f64
}

/// IoU in percent per class by explicit pixel-set intersection and union.
pub fn iou_sets(pred: &[NodeId], gt: &[NodeId], class: NodeId) -> Option<f64> {
    let keep: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != IGNORE).collect();
    let p: BTreeSet<usize> = keep.iter().copied().filter(|&i| pred[i] == class).collect();
    let g: BTreeSet<usize> = keep.iter().copied().filter(|&i| gt[i] == class).collect();
    let inter = p.intersection(&g).count();
    let union = p.union(&g).count();
    (union > 0).then(|| 100.0 * inter as f64 / union as f64)
}

/// Independent trace of the thresholded descent: returns the accepted node
/// (or `None`) and the sequence of `(node, score, threshold)` decisions.
pub fn pseudo_label_trace(
    tree: &Tree,
    agg: &[f64],
    thresholds: &[f64],
) -> (Option<NodeId>, Vec<(NodeId, f64, f64)>) {
    let mut current = tree.root;
    let mut accepted = None;
    let mut trace = Vec::new();
    for &s in thresholds {
        let mut kids = tree.children(current);
        if kids.is_empty() {
            break;
        }
        kids.sort_unstable();
        let mut best = kids[0];
        for &c in &kids {
            if agg[tree.col(c)] > agg[tree.col(best)] {
                best = c;
            }
        }
        let score = agg[tree.col(best)];
        trace.push((best, score, s));
        if !(score > s) {
            break;
        }
        accepted = Some(best);
        current = best;
    }
    (accepted, trace)
}
