//! Hyperbolic classification head over a taxonomy.
//!
//! Each class node owns one hyperplane, stored as a Euclidean offset
//! parameter (mapped into the ball with `expmap0` at use time) and an
//! orientation. Scores are per-pixel, per-node sigmoids of the signed
//! hyperplane logits.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, BallPoint, Curvature, Gyroplane, TangentVector};
use crate::losses;
use crate::taxonomy::{NodeId, Taxonomy, BACKGROUND};
use crate::tensor::Tensor;

/// Smallest orientation norm a hyperplane may have after an update.
pub const MIN_ORIENTATION_NORM: f64 = 1e-12;

/// Score at or above which a root child is considered present when decoding.
pub const DECODE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassHyperplane {
    pub node: NodeId,
    /// Tangent-space offset; the ball offset is `expmap0(offset_param)`.
    pub offset_param: Vec<f64>,
    pub orientation: Vec<f64>,
}

impl ClassHyperplane {
    pub fn gyroplane(&self, c: Curvature) -> Result<Gyroplane> {
        let offset = geometry::expmap0(&TangentVector::new(self.offset_param.clone())?, c);
        Ok(Gyroplane { offset, orientation: TangentVector::new(self.orientation.clone())? })
    }

    /// Rescales the orientation up to the minimum norm if it collapsed.
    pub fn enforce_orientation_floor(&mut self) {
        floor_orientation(&mut self.orientation);
    }
}

pub(crate) fn floor_orientation(r: &mut [f64]) {
    let n = geometry::norm_sq(r).sqrt();
    if n < MIN_ORIENTATION_NORM {
        if n == 0.0 {
            r[0] = MIN_ORIENTATION_NORM;
        } else {
            let k = MIN_ORIENTATION_NORM / n;
            r.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Per-pixel, per-node sigmoid scores, row-major `[H·W × nodes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVolume {
    height: usize,
    width: usize,
    nodes: usize,
    scores: Vec<f64>,
}

impl ScoreVolume {
    pub fn new(height: usize, width: usize, nodes: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width * nodes {
            return Err(Error::ShapeMismatch(format!(
                "score volume {height}x{width}x{nodes} with {} entries",
                scores.len()
            )));
        }
        Ok(Self { height, width, nodes, scores })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn data(&self) -> &[f64] {
        &self.scores
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.scores[p * self.nodes..(p + 1) * self.nodes]
    }

    pub fn get(&self, p: usize, v: usize) -> f64 {
        self.scores[p * self.nodes + v]
    }

    /// Descendant-max aggregated scores, same layout.
    pub fn desc_max(&self, tax: &Taxonomy) -> Vec<f64> {
        losses::reduce_closures(&self.scores, self.nodes, &tax.index_closures().descendants, true).0
    }
}

/// Splits hyperplanes into `[K, N]` offset-parameter and orientation tensors.
pub fn planes_to_tensors(planes: &[ClassHyperplane], dim: usize) -> (Tensor, Tensor) {
    let k = planes.len();
    let mut off = Vec::with_capacity(k * dim);
    let mut ori = Vec::with_capacity(k * dim);
    for p in planes {
        off.extend_from_slice(&p.offset_param);
        ori.extend_from_slice(&p.orientation);
    }
    (
        Tensor::from_vec(&[k, dim], off).expect("plane dims"),
        Tensor::from_vec(&[k, dim], ori).expect("plane dims"),
    )
}

pub fn tensors_to_planes(tax: &Taxonomy, offsets: &Tensor, orientations: &Tensor) -> Vec<ClassHyperplane> {
    tax.classes()
        .iter()
        .enumerate()
        .map(|(i, &node)| ClassHyperplane {
            node,
            offset_param: offsets.row(i).to_vec(),
            orientation: orientations.row(i).to_vec(),
        })
        .collect()
}

/// Variables produced when the head is recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub logits: Var,
    pub scores: Var,
}

/// Records `sigmoid(logit(expmap0(features), plane))` for `[P, N]` features
/// against `[K, N]` offset parameters and orientations.
pub fn record_head(
    tape: &mut Tape,
    features: Var,
    offset_params: Var,
    orientations: Var,
    c: Curvature,
) -> Result<HeadVars> {
    let points = tape.expmap0(features, c);
    let offsets = tape.expmap0(offset_params, c);
    let logits = tape.hyperplane_logits(points, offsets, orientations, c)?;
    let scores = tape.sigmoid(logits);
    Ok(HeadVars { logits, scores })
}

/// Scores for an `[H, W, N]` feature tensor.
pub fn head_forward(features: &Tensor, planes: &[ClassHyperplane], c: Curvature) -> Result<ScoreVolume> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("head expects [H, W, N] features, got {shape:?}")));
    }
    let (h, w, n) = (shape[0], shape[1], shape[2]);
    if let Some(p) = planes.iter().find(|p| p.offset_param.len() != n || p.orientation.len() != n) {
        return Err(Error::ShapeMismatch(format!("hyperplane for node {} has wrong dimension", p.node)));
    }
    let (off, ori) = planes_to_tensors(planes, n);
    let mut tape = Tape::new();
    let f = tape.input(features.clone().reshape(&[h * w, n])?);
    let o = tape.input(off);
    let r = tape.input(ori);
    let vars = record_head(&mut tape, f, o, r, c)?;
    ScoreVolume::new(h, w, planes.len(), tape.value(vars.scores).data().to_vec())
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = geometry::norm_sq(&v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Fresh hyperplanes for every class: small random offsets, random unit orientations.
pub fn init_planes<R: Rng + ?Sized>(tax: &Taxonomy, dim: usize, offset_scale: f64, rng: &mut R) -> Vec<ClassHyperplane> {
    let noise = Normal::new(0.0, offset_scale.max(0.0)).expect("finite scale");
    tax.classes()
        .iter()
        .map(|&node| ClassHyperplane {
            node,
            offset_param: (0..dim).map(|_| noise.sample(rng)).collect(),
            orientation: random_unit(dim, rng),
        })
        .collect()
}

/// Hyperplanes for `tax_new`: existing nodes are copied verbatim, refinement
/// children start at their parent's plane plus Gaussian noise of scale
/// `init_scale`, and new root children start at the origin with a random
/// unit orientation.
pub fn expand_head<R: Rng + ?Sized>(
    old: &[ClassHyperplane],
    tax_new: &Taxonomy,
    init_scale: f64,
    rng: &mut R,
) -> Result<Vec<ClassHyperplane>> {
    let dim = old
        .first()
        .map(|p| p.orientation.len())
        .ok_or_else(|| Error::Config("cannot expand an empty head".into()))?;
    let noise = Normal::new(0.0, init_scale.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut by_node: HashMap<NodeId, ClassHyperplane> =
        old.iter().map(|p| (p.node, p.clone())).collect();

    // parents before children
    let mut fresh: Vec<NodeId> =
        tax_new.classes().iter().copied().filter(|n| !by_node.contains_key(n)).collect();
    fresh.sort_by_key(|&n| (tax_new.depth(n).unwrap_or(0), n));
    for node in fresh {
        let parent = tax_new.parent(node).ok_or(Error::UnknownNode(node))?;
        let plane = if parent == tax_new.root() {
            ClassHyperplane { node, offset_param: vec![0.0; dim], orientation: random_unit(dim, rng) }
        } else {
            let base = by_node.get(&parent).ok_or(Error::UnknownParent(parent))?;
            let jitter = |v: &[f64], rng: &mut R| -> Vec<f64> {
                v.iter()
                    .map(|x| if init_scale > 0.0 { x + noise.sample(rng) } else { *x })
                    .collect()
            };
            let offset_param = jitter(&base.offset_param, rng);
            let orientation = jitter(&base.orientation, rng);
            let mut p = ClassHyperplane { node, offset_param, orientation };
            p.enforce_orientation_floor();
            p
        };
        by_node.insert(node, plane);
    }
    tax_new
        .classes()
        .iter()
        .map(|n| by_node.remove(n).ok_or(Error::UnknownNode(*n)))
        .collect()
}

/// Greedy top-down decoding into leaf labels.
///
/// At each level the child with the largest descendant-max score wins; the
/// pixel is background when the best root child scores below 0.5.
pub fn decode(scores: &ScoreVolume, tax: &Taxonomy) -> Vec<NodeId> {
    let agg = scores.desc_max(tax);
    let k = scores.nodes();
    let ordered_children = |node: NodeId| {
        let mut c: Vec<NodeId> = tax.children(node).to_vec();
        c.sort_unstable();
        c
    };
    let root_children = ordered_children(tax.root());
    let mut children_of: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for &v in tax.classes() {
        children_of.insert(v, ordered_children(v));
    }
    let col = |v: NodeId| tax.class_index(v).expect("class");
    (0..scores.pixels())
        .map(|p| {
            let row = &agg[p * k..(p + 1) * k];
            let pick = |cands: &[NodeId]| {
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if row[col(c)] > row[col(best)] {
                        best = c;
                    }
                }
                best
            };
            if root_children.is_empty() {
                return BACKGROUND;
            }
            let mut node = pick(&root_children);
            if row[col(node)] < DECODE_THRESHOLD {
                return BACKGROUND;
            }
            loop {
                let kids = &children_of[&node];
                if kids.is_empty() {
                    return node;
                }
                node = pick(kids);
            }
        })
        .collect()
}

/// Hyperplanes as geometry objects, for inspection.
pub fn gyroplanes(planes: &[ClassHyperplane], c: Curvature) -> Result<Vec<Gyroplane>> {
    planes.iter().map(|p| p.gyroplane(c)).collect()
}

/// Offset of a hyperplane as a ball point.
pub fn offset_point(plane: &ClassHyperplane, c: Curvature) -> Result<BallPoint> {
    Ok(plane.gyroplane(c)?.offset)
}
