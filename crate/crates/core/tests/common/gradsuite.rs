// Finite-difference checks shared by the gradient tests and the acceptance binary.
#![allow(dead_code)]

use std::sync::Arc;

use hyciss::autograd::{Activation, ParamStore, Tape};
use hyciss::geometry::{self, Curvature, LogitScratch};
use hyciss::gradcheck::{central_difference, check_tape, relative_error, STEP};
use hyciss::head;
use hyciss::losses::{self, FlatSupervision, LossWeights, Supervision};
use hyciss::model::{BackboneConfig, Segmenter};
use hyciss::taxonomy::{NodeId, NodeRecord, Taxonomy, TaxonomyDoc, BACKGROUND, IGNORE};
use hyciss::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GEOMETRY_TOL: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const CONFIGS: usize = 50;

#[derive(Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub configs: usize,
}

impl GradCase {
    pub fn ok(&self) -> bool {
        self.worst < self.tol
    }
}

const CURVATURES: [f64; 3] = [0.5, 1.0, 3.0];

fn curv(i: usize) -> Curvature {
    Curvature::new(CURVATURES[i % 3]).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random point with norm at most `frac / √c`.
fn ball_point(rng: &mut ChaCha8Rng, n: usize, c: Curvature, frac: f64) -> Vec<f64> {
    let v = uniform(rng, n, 1.0);
    let norm = geometry::norm_sq(&v).sqrt().max(1e-9);
    let r = rng.random_range(0.05..frac) / c.sqrt();
    v.iter().map(|x| x / norm * r).collect()
}

/// Random rooted tree with `classes` non-root nodes and depth at most `levels`.
pub fn random_taxonomy(rng: &mut ChaCha8Rng, classes: usize, levels: usize) -> Taxonomy {
    let mut depth = vec![0usize];
    let mut nodes = vec![NodeRecord::new(0, "root", None)];
    for id in 1..=classes {
        let parent = loop {
            let p = rng.random_range(0..id);
            if depth[p] < levels {
                break p;
            }
        };
        depth.push(depth[parent] + 1);
        nodes.push(NodeRecord::new(id as NodeId, format!("n{id}"), Some(parent as NodeId)));
    }
    Taxonomy::load(&TaxonomyDoc { nodes }).unwrap()
}

/// Labels drawn from all classes plus background and a few ignored pixels.
pub fn random_labels(rng: &mut ChaCha8Rng, tax: &Taxonomy, pixels: usize) -> Vec<NodeId> {
    let classes = tax.classes();
    (0..pixels)
        .map(|_| match rng.random_range(0..10) {
            0 => IGNORE,
            1 | 2 => BACKGROUND,
            _ => classes[rng.random_range(0..classes.len())],
        })
        .collect()
}

/// Worst error over `CONFIGS` configurations of a vector-valued slice kernel,
/// contracted with a random cotangent.
fn slice_case<F, V>(name: &'static str, seed: u64, mut setup: F) -> GradCase
where
    F: FnMut(&mut ChaCha8Rng, usize) -> (Vec<f64>, V),
    V: Fn(&[f64], &mut Vec<f64>) -> (f64, Vec<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..CONFIGS {
        let (x, f) = setup(&mut rng, i);
        let mut scratch = Vec::new();
        let (_, analytic) = f(&x, &mut scratch);
        let numeric = central_difference(|p| f(p, &mut scratch).0, &x, STEP);
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    GradCase { name, worst, tol: GEOMETRY_TOL, configs: CONFIGS }
}

pub fn geometry_cases() -> Vec<GradCase> {
    let n = 4;
    let mut out = Vec::new();

    out.push(slice_case("mobius_add", 11, |rng, i| {
        let c = curv(i);
        let mut x = ball_point(rng, n, c, 0.9);
        x.extend(ball_point(rng, n, c, 0.9));
        let g = uniform(rng, n, 1.0);
        (x, move |p: &[f64], _s: &mut Vec<f64>| {
            let mut z = vec![0.0; n];
            geometry::mobius_add_into(&p[..n], &p[n..], c, &mut z).unwrap();
            let mut grad = vec![0.0; 2 * n];
            let (gx, gy) = grad.split_at_mut(n);
            geometry::mobius_add_vjp(&p[..n], &p[n..], c, &g, gx, gy).unwrap();
            (geometry::dot(&g, &z), grad)
        })
    }));

    out.push(slice_case("expmap0", 12, |rng, i| {
        let c = curv(i);
        let v = ball_point(rng, n, Curvature::new(1.0).unwrap(), 1.0)
            .into_iter()
            .map(|x| x * 2.0)
            .collect::<Vec<_>>();
        let g = uniform(rng, n, 1.0);
        (v, move |p: &[f64], _s: &mut Vec<f64>| {
            let mut z = vec![0.0; n];
            geometry::expmap0_into(p, c, &mut z);
            let mut grad = vec![0.0; n];
            geometry::expmap0_vjp(p, c, &g, &mut grad);
            (geometry::dot(&g, &z), grad)
        })
    }));

    out.push(slice_case("logmap0", 13, |rng, i| {
        let c = curv(i);
        let x = ball_point(rng, n, c, 0.9);
        let g = uniform(rng, n, 1.0);
        (x, move |p: &[f64], _s: &mut Vec<f64>| {
            let mut z = vec![0.0; n];
            geometry::logmap0_into(p, c, &mut z).unwrap();
            let mut grad = vec![0.0; n];
            geometry::logmap0_vjp(p, c, &g, &mut grad).unwrap();
            (geometry::dot(&g, &z), grad)
        })
    }));

    out.push(slice_case("project", 14, |rng, i| {
        let c = curv(i);
        // half the configurations start outside the clamp radius
        let frac = if i % 2 == 0 { 0.9 } else { 2.0 };
        let mut x = ball_point(rng, n, c, frac);
        if i % 2 == 1 {
            let norm = geometry::norm_sq(&x).sqrt();
            let target = c.max_norm() * rng.random_range(1.1..2.0);
            x.iter_mut().for_each(|v| *v *= target / norm);
        }
        let g = uniform(rng, n, 1.0);
        (x, move |p: &[f64], _s: &mut Vec<f64>| {
            let y = geometry::project(p, c);
            let mut grad = vec![0.0; n];
            geometry::project_vjp(p, &g, c, &mut grad);
            (geometry::dot(&g, y.coords()), grad)
        })
    }));

    out.push(slice_case("hyperplane_logit", 15, |rng, i| {
        let c = curv(i);
        let mut x = ball_point(rng, n, c, 0.8);
        x.extend(ball_point(rng, n, c, 0.5));
        x.extend(uniform(rng, n, 1.0));
        let g = rng.random_range(-1.0..1.0);
        (x, move |p: &[f64], _s: &mut Vec<f64>| {
            let mut scratch = LogitScratch::new(n);
            let (xp, o, r) = (&p[..n], &p[n..2 * n], &p[2 * n..]);
            let l = geometry::hyperplane_logit_into(xp, o, r, c, &mut scratch).unwrap();
            let mut grad = vec![0.0; 3 * n];
            let (gx, rest) = grad.split_at_mut(n);
            let (go, gr) = rest.split_at_mut(n);
            geometry::hyperplane_logit_vjp(xp, o, r, c, g, gx, go, gr, &mut scratch).unwrap();
            (g * l, grad)
        })
    }));

    out.push(slice_case("hyperplane_logits_batch", 16, |rng, i| {
        let c = curv(i);
        let (p, k) = (3, 2);
        let mut x = Vec::new();
        for _ in 0..p {
            x.extend(ball_point(rng, n, c, 0.8));
        }
        for _ in 0..k {
            x.extend(ball_point(rng, n, c, 0.5));
        }
        x.extend(uniform(rng, k * n, 1.0));
        let g = uniform(rng, p * k, 1.0);
        (x, move |v: &[f64], _s: &mut Vec<f64>| {
            let (xs, rest) = v.split_at(p * n);
            let (o, r) = rest.split_at(k * n);
            let l = geometry::hyperplane_logits_batch(xs, o, r, n, c).unwrap();
            let mut grad = vec![0.0; v.len()];
            let (gx, rest) = grad.split_at_mut(p * n);
            let (go, gr) = rest.split_at_mut(k * n);
            geometry::hyperplane_logits_batch_vjp(xs, o, r, n, c, &g, gx, go, gr).unwrap();
            (geometry::dot(&g, &l), grad)
        })
    }));
    out
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, uniform(rng, n, scale)).unwrap()
}

/// Values at least `gap` apart so min/max selections are stable under the probe step.
fn separated(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, gap: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] > gap) {
            return v;
        }
    }
}

fn tape_case<S>(name: &'static str, seed: u64, tol: f64, mut one: S) -> GradCase
where
    S: FnMut(&mut ChaCha8Rng, usize) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..CONFIGS).map(|i| one(&mut rng, i)).fold(0.0, f64::max);
    GradCase { name, worst, tol, configs: CONFIGS }
}

fn scores_with_gap(rng: &mut ChaCha8Rng, p: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(p * k);
    for _ in 0..p {
        data.extend(separated(rng, k, 0.02, 0.98, 1e-3));
    }
    Tensor::from_vec(&[p, k], data).unwrap()
}

pub fn tape_cases() -> Vec<GradCase> {
    let mut out = Vec::new();

    out.push(tape_case("add_scale_sum", 21, OP_TOL, |rng, _| {
        let mut s = ParamStore::new();
        let a = s.insert("a", tensor(rng, &[5], 1.0));
        let b = s.insert("b", tensor(rng, &[5], 1.0));
        let k = rng.random_range(-2.0..2.0);
        check_tape(&s, |t, s| {
            let (va, vb) = (t.param(s, a), t.param(s, b));
            let sa = t.sigmoid(va);
            let sb = t.scale(vb, k);
            let y = t.add(sa, sb)?;
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }, STEP)
        .unwrap()
    }));

    out.push(tape_case("conv2d", 22, OP_TOL, |rng, _| {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let mut s = ParamStore::new();
        let x = s.insert("x", tensor(rng, &[4, 5, cin], 1.0));
        let w = s.insert("w", tensor(rng, &[3, 3, cin, cout], 0.5));
        let b = s.insert("b", tensor(rng, &[cout], 0.5));
        check_tape(&s, |t, s| {
            let (vx, vw, vb) = (t.param(s, x), t.param(s, w), t.param(s, b));
            let y = t.conv2d(vx, vw, vb)?;
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }, STEP)
        .unwrap()
    }));

    for (name, act, seed) in [("tanh", Activation::Tanh, 23u64), ("relu", Activation::Relu, 24)] {
        out.push(tape_case(name, seed, OP_TOL, |rng, _| {
            let mut s = ParamStore::new();
            // keep relu inputs away from the kink
            let data: Vec<f64> = (0..6)
                .map(|_| {
                    let v: f64 = rng.random_range(0.05..1.5);
                    if rng.random_bool(0.5) { v } else { -v }
                })
                .collect();
            let a = s.insert("a", Tensor::from_vec(&[6], data).unwrap());
            check_tape(&s, |t, s| {
                let v = t.param(s, a);
                let y = t.activation(v, act);
                let y = t.sigmoid(y);
                Ok(t.sum(y))
            }, STEP)
            .unwrap()
        }));
    }

    out.push(tape_case("sigmoid", 25, OP_TOL, |rng, _| {
        let mut s = ParamStore::new();
        let a = s.insert("a", tensor(rng, &[6], 4.0));
        check_tape(&s, |t, s| {
            let v = t.param(s, a);
            let y = t.sigmoid(v);
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }, STEP)
        .unwrap()
    }));

    out.push(tape_case("expmap0_op", 26, GEOMETRY_TOL, |rng, i| {
        let c = curv(i);
        let mut s = ParamStore::new();
        let a = s.insert("a", tensor(rng, &[3, 4], 1.0));
        check_tape(&s, |t, s| {
            let v = t.param(s, a);
            let y = t.expmap0(v, c);
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }, STEP)
        .unwrap()
    }));

    out.push(tape_case("hyperplane_logits_op", 27, GEOMETRY_TOL, |rng, i| {
        let c = curv(i);
        let mut s = ParamStore::new();
        let x = s.insert("x", tensor(rng, &[5, 4], 0.8));
        let o = s.insert("o", tensor(rng, &[3, 4], 0.4));
        let r = s.insert("r", tensor(rng, &[3, 4], 1.0));
        check_tape(&s, |t, s| {
            let (vx, vo, vr) = (t.param(s, x), t.param(s, o), t.param(s, r));
            let px = t.expmap0(vx, c);
            let po = t.expmap0(vo, c);
            let l = t.hyperplane_logits(px, po, vr, c)?;
            let y = t.sigmoid(l);
            Ok(t.sum(y))
        }, STEP)
        .unwrap()
    }));

    for (name, take_max, seed) in [("anc_min", false, 28u64), ("desc_max", true, 29)] {
        out.push(tape_case(name, seed, OP_TOL, |rng, _| {
            let tax = random_taxonomy(rng, 7, 3);
            let cl = tax.index_closures();
            let mut s = ParamStore::new();
            let a = s.insert("a", scores_with_gap(rng, 4, tax.num_classes()));
            let lists = if take_max { cl.descendants.clone() } else { cl.ancestors.clone() };
            check_tape(&s, |t, s| {
                let v = t.param(s, a);
                let y = t.reduce_closures(v, &lists, take_max);
                let y = t.sigmoid(y);
                Ok(t.sum(y))
            }, STEP)
            .unwrap()
        }));
    }

    type LossRecorder = fn(&mut Tape, hyciss::autograd::Var, hyciss::autograd::Var, Arc<Supervision>) -> hyciss::Result<hyciss::autograd::Var>;
    let terms: [(&'static str, u64, LossRecorder); 3] = [
        ("hier_bce", 30, |t, anc, desc, sup| t.hier_bce(anc, desc, sup)),
        ("hier_dice", 31, |t, _anc, desc, sup| t.hier_dice(desc, sup, 1.0)),
        ("hier_ce", 32, |t, _anc, desc, sup| t.hier_ce(desc, sup)),
    ];
    for (name, seed, term) in terms {
        out.push(tape_case(name, seed, OP_TOL, |rng, _| {
            let tax = random_taxonomy(rng, 7, 3);
            let cl = tax.index_closures();
            let p = 6;
            let labels = loop {
                let l = random_labels(rng, &tax, p);
                if l.iter().any(|&v| v != BACKGROUND && v != IGNORE) {
                    break l;
                }
            };
            let sup = Arc::new(Supervision::from_labels(&tax, &labels).unwrap());
            let mut s = ParamStore::new();
            let a = s.insert("a", scores_with_gap(rng, p, tax.num_classes()));
            check_tape(&s, |t, s| {
                let v = t.param(s, a);
                let anc = t.reduce_closures(v, &cl.ancestors, false);
                let desc = t.reduce_closures(v, &cl.descendants, true);
                term(t, anc, desc, sup.clone())
            }, STEP)
            .unwrap()
        }));
    }

    out.push(tape_case("flat_ce", 33, OP_TOL, |rng, _| {
        let tax = random_taxonomy(rng, 6, 1);
        let labels = random_labels(rng, &tax, 6);
        let sup = Arc::new(FlatSupervision::from_labels(&tax, &labels).unwrap());
        let mut s = ParamStore::new();
        let a = s.insert("a", tensor(rng, &[6, tax.num_classes()], 3.0));
        check_tape(&s, |t, s| {
            let v = t.param(s, a);
            t.flat_ce(v, sup.clone())
        }, STEP)
        .unwrap()
    }));

    out.push(tape_case("topics_loss", 34, OP_TOL, |rng, _| {
        let tax = random_taxonomy(rng, 7, 3);
        let cl = tax.index_closures();
        let labels = random_labels(rng, &tax, 6);
        let sup = Arc::new(Supervision::from_labels(&tax, &labels).unwrap());
        let mut s = ParamStore::new();
        let a = s.insert("a", tensor(rng, &[6, tax.num_classes()], 3.0));
        let sep = scores_with_gap(rng, 6, tax.num_classes());
        // logits spaced so the aggregated sigmoid scores never tie
        for (v, g) in s.value_mut(a).data_mut().iter_mut().zip(sep.data()) {
            *v = (g / (1.0 - g)).ln();
        }
        check_tape(&s, |t, s| {
            let v = t.param(s, a);
            let sc = t.sigmoid(v);
            losses::record_topics_loss(t, sc, &cl, sup.clone(), &LossWeights::default())
        }, STEP)
        .unwrap()
    }));
    out
}

pub fn head_case() -> GradCase {
    tape_case("head", 41, GEOMETRY_TOL, |rng, i| {
        let c = curv(i);
        let n = 4;
        let tax = random_taxonomy(rng, 5, 2);
        let planes = head::init_planes(&tax, n, 0.3, rng);
        let (off, ori) = head::planes_to_tensors(&planes, n);
        let mut s = ParamStore::new();
        let f = s.insert("features", tensor(rng, &[2, 3, n], 0.5));
        let o = s.insert("offsets", off);
        let r = s.insert("orientations", ori);
        check_tape(&s, |t, s| {
            let (vf, vo, vr) = (t.param(s, f), t.param(s, o), t.param(s, r));
            let hv = head::record_head(t, vf, vo, vr, c)?;
            let y = t.sigmoid(hv.scores);
            Ok(t.sum(y))
        }, STEP)
        .unwrap()
    })
}

pub fn end_to_end_case() -> GradCase {
    tape_case("image_to_topics_loss", 42, OP_TOL, |rng, i| {
        let c = curv(i);
        let tax = random_taxonomy(rng, 6, 3);
        let bb = BackboneConfig { channels: vec![3, 4, 4], kernel: 3, activation: Activation::Tanh };
        let model = Segmenter::new(bb, tax.clone(), c, rng.random()).unwrap();
        let image = tensor(rng, &[4, 4, 3], 0.5);
        let labels = random_labels(rng, &tax, 16);
        let sup = Arc::new(Supervision::from_labels(&tax, &labels).unwrap());
        let cl = tax.index_closures();
        check_tape(model.params(), |t, s| {
            let mut m = model.clone();
            *m.params_mut() = s.clone();
            let fv = m.record(t, &image)?;
            losses::record_topics_loss(t, fv.scores, &cl, sup.clone(), &LossWeights::default())
        }, STEP)
        .unwrap()
    })
}

pub fn all_cases() -> Vec<GradCase> {
    let mut v = geometry_cases();
    v.extend(tape_cases());
    v.push(head_case());
    v.push(end_to_end_case());
    v
}
