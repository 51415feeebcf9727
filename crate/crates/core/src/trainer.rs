//! Per-step optimisation: augmentation, pseudo-labels, SGD under poly decay.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, MIoUReport};
use crate::head::decode;
use crate::losses::{record_topics_loss, FlatSupervision, LossWeights, Supervision};
use crate::model::{FrozenModel, Segmenter};
use crate::protocol::{ReplayAudit, TaskSchedule, TrainSample};
use crate::pseudolabel::{pseudo_label, uniform_pseudo_label, LevelThresholds, PseudoLabels};
use crate::synth::Scene;
use crate::taxonomy::{NodeId, Taxonomy, BACKGROUND, IGNORE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelMode {
    Hierarchical,
    Uniform,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Composite hierarchical loss over the step taxonomy.
    Hierarchical,
    /// Softmax cross-entropy over the flattened leaves with a zero
    /// background logit.
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub crop: Option<usize>,
    pub flip: bool,
    /// Noise scale for hyperplanes of refined children.
    pub init_scale: f64,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
    pub pseudo_label: PseudoLabelMode,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_base: 60,
            epochs_incremental: 60,
            lr_base: 0.03,
            lr_incremental: 0.01,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
            seed: 0,
            crop: None,
            flip: true,
            init_scale: 0.01,
            grad_clip: Some(5.0),
            pseudo_label: PseudoLabelMode::Hierarchical,
            objective: Objective::Hierarchical,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs_base >= 1
            && self.epochs_incremental >= 1
            && self.lr_base > 0.0
            && self.lr_incremental > 0.0
            && self.poly_power >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.init_scale >= 0.0
            && self.crop != Some(0)
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    fn epochs(&self, t: usize) -> usize {
        if t == 1 {
            self.epochs_base
        } else {
            self.epochs_incremental
        }
    }

    fn lr(&self, t: usize) -> f64 {
        if t == 1 {
            self.lr_base
        } else {
            self.lr_incremental
        }
    }
}

pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> f64 {
    if max_iter == 0 {
        return lr0;
    }
    let frac = 1.0 - (iter.min(max_iter) as f64 / max_iter as f64);
    lr0 * frac.powf(power)
}

fn is_labeled(l: NodeId) -> bool {
    l != BACKGROUND && l != IGNORE
}

/// Random horizontal flip, then a crop window drawn uniformly among those
/// that contain at least one labelled pixel (any window if none does).
pub fn augment<R: Rng + ?Sized>(sample: &TrainSample, cfg: &TrainConfig, rng: &mut R) -> Result<TrainSample> {
    let mut out = if cfg.flip && rng.random_bool(0.5) { sample.flipped() } else { sample.clone() };
    let Some(c) = cfg.crop else { return Ok(out) };
    let (h, w) = (out.height(), out.width());
    if c > h || c > w {
        return Err(Error::Config(format!("crop {c} exceeds image {h}x{w}")));
    }
    if c == h && c == w {
        return Ok(out);
    }
    // summed-area table of labelled pixels
    let labels = out.visible_labels();
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = is_labeled(labels[y * w + x]) as u32
                + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let count = |y0: usize, x0: usize| {
        let (y1, x1) = (y0 + c, x0 + c);
        sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
    };
    let windows: Vec<(usize, usize)> = (0..=h - c).flat_map(|y| (0..=w - c).map(move |x| (y, x))).collect();
    let good: Vec<(usize, usize)> = windows.iter().copied().filter(|&(y, x)| count(y, x) > 0).collect();
    let pool = if good.is_empty() { &windows } else { &good };
    let (y0, x0) = pool[rng.random_range(0..pool.len())];
    out = out.cropped(y0, x0, c, c)?;
    Ok(out)
}

/// SGD with classical momentum and optional L2 decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self { momentum, weight_decay, velocity }
    }

    /// `v ← μv + g + λw; w ← w − lr·v` using the store's accumulated grads.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).clone();
            let wd = self.weight_decay;
            let v = &mut self.velocity[i];
            let w = store.value(id).data().to_vec();
            for ((vj, gj), wj) in v.data_mut().iter_mut().zip(g.data()).zip(&w) {
                *vj = self.momentum * *vj + gj + wd * wj;
            }
            let v = self.velocity[i].clone();
            store.value_mut(id).add_scaled(&v, -lr);
        }
    }
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
}

/// Frozen model and rule used to relabel background pixels.
#[derive(Clone, Debug)]
pub struct PseudoLabeler {
    pub model: FrozenModel,
    pub mode: PseudoLabelMode,
    pub thresholds: LevelThresholds,
}

impl PseudoLabeler {
    pub fn apply(&self, image: &Tensor, visible: &[NodeId]) -> Result<PseudoLabels> {
        let untouched = || PseudoLabels { labels: visible.to_vec(), pseudo: vec![false; visible.len()] };
        match self.mode {
            PseudoLabelMode::None => Ok(untouched()),
            PseudoLabelMode::Hierarchical => {
                let s = self.model.predict(image)?;
                pseudo_label(&s, visible, self.model.taxonomy(), &self.thresholds)
            }
            PseudoLabelMode::Uniform => {
                let s = self.model.predict(image)?;
                uniform_pseudo_label(&s, visible, self.model.taxonomy())
            }
        }
    }
}

/// Supervised label map and loss gradient of one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Gradients,
    pub labels: PseudoLabels,
}

pub fn sample_gradient(
    model: &Segmenter,
    sample: &TrainSample,
    labeler: Option<&PseudoLabeler>,
    objective: Objective,
    weights: &LossWeights,
) -> Result<SampleGrad> {
    let image = sample.image().to_tensor();
    let visible = sample.visible_labels();
    let labels = match labeler {
        Some(pl) => pl.apply(&image, visible)?,
        None => PseudoLabels { labels: visible.to_vec(), pseudo: vec![false; visible.len()] },
    };
    let mut tape = Tape::new();
    let vars = model.record(&mut tape, &image)?;
    let tax = model.taxonomy();
    let loss = match objective {
        Objective::Hierarchical => {
            let sup = Arc::new(Supervision::from_labels(tax, &labels.labels)?);
            record_topics_loss(&mut tape, vars.scores, &tax.index_closures(), sup, weights)?
        }
        Objective::Flat => {
            let sup = Arc::new(FlatSupervision::from_labels(tax, &labels.labels)?);
            tape.flat_ce(vars.logits, sup)?
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::non_finite("training loss"));
    }
    let grads = tape.backward(loss)?;
    Ok(SampleGrad { loss: value, grads, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Taxonomy the model uses at step `t` under `objective`.
pub fn model_taxonomy(schedule: &TaskSchedule, t: usize, objective: Objective) -> Result<Taxonomy> {
    let tax = schedule.taxonomy_at(t)?;
    Ok(match objective {
        Objective::Hierarchical => tax.clone(),
        Objective::Flat => tax.flattened(),
    })
}

/// Everything a step needs besides the model and its data.
pub struct StepContext<'a> {
    pub schedule: &'a TaskSchedule,
    pub config: &'a TrainConfig,
    pub weights: &'a LossWeights,
    pub thresholds: &'a LevelThresholds,
    pub audit: Option<&'a ReplayAudit>,
}

/// Trains `model` on step `t`. For `t > 1` the model is snapshotted for
/// pseudo-labels and its head expanded to the step taxonomy first.
pub fn train_step_t<R: Rng + ?Sized>(
    model: &mut Segmenter,
    ctx: &StepContext<'_>,
    t: usize,
    data: &[TrainSample],
    rng: &mut R,
) -> Result<Vec<EpochRecord>> {
    let cfg = ctx.config;
    let labeler = if t > 1 {
        let frozen = model.snapshot();
        let tax = model_taxonomy(ctx.schedule, t, cfg.objective)?;
        model.expand(&tax, cfg.init_scale, rng)?;
        Some(PseudoLabeler { model: frozen, mode: cfg.pseudo_label, thresholds: ctx.thresholds.clone() })
    } else {
        None
    };
    if let Some(pl) = &labeler {
        if pl.mode == PseudoLabelMode::Hierarchical {
            ctx.thresholds.check_depth(pl.model.taxonomy())?;
        }
    }
    if data.iter().any(|s| s.step() != t) {
        return Err(Error::Config(format!("step {t} given samples of another step")));
    }

    let epochs = cfg.epochs(t);
    let batches = data.len().div_ceil(cfg.batch_size);
    let max_iter = epochs * batches;
    let mut opt = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut iter = 0;
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let epoch_lr = poly_lr(iter, max_iter, cfg.lr(t), cfg.poly_power);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> =
                chunk.iter().map(|&i| augment(&data[i], cfg, rng)).collect::<Result<_>>()?;
            let frozen: &Segmenter = model;
            let outs: Vec<Result<SampleGrad>> = batch
                .par_iter()
                .map(|s| sample_gradient(frozen, s, labeler.as_ref(), cfg.objective, ctx.weights))
                .collect();
            let outs: Vec<SampleGrad> = outs
                .into_iter()
                .collect::<Result<_>>()
                .map_err(|e| tag_non_finite(e, t, epoch))?;
            let store = model.params_mut();
            store.zero_grad();
            let scale = 1.0 / outs.len() as f64;
            for (s, out) in batch.iter().zip(&outs) {
                store.accumulate(&out.grads, scale);
                total += out.loss;
                if let Some(audit) = ctx.audit {
                    audit.check(ctx.schedule, t, s.visible_labels(), &out.labels.labels, &out.labels.pseudo);
                }
            }
            if let Some(c) = cfg.grad_clip {
                clip_gradients(store, c);
            }
            let lr = poly_lr(iter, max_iter, cfg.lr(t), cfg.poly_power);
            opt.step(store, lr);
            model.floor_orientations();
            if !model.params().named().all(|(_, v)| v.all_finite()) {
                return Err(Error::NonFinite(format!("parameters after step {t} epoch {epoch}")));
            }
            iter += 1;
        }
        let loss = if data.is_empty() { 0.0 } else { total / data.len() as f64 };
        log.push(EpochRecord { step: t, epoch, loss, lr: epoch_lr });
    }
    Ok(log)
}

fn tag_non_finite(e: Error, t: usize, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {t} epoch {epoch}")),
        other => other,
    }
}

/// Decodes every scene and scores it against ground truth coarsened to the
/// step-`t` taxonomy.
pub fn evaluate(model: &Segmenter, schedule: &TaskSchedule, t: usize, scenes: &[&Scene]) -> Result<MIoUReport> {
    let partition = schedule.metric_partition_at(t)?;
    let mut cm = ConfusionMatrix::new(&partition.all());
    let preds: Vec<Result<Vec<NodeId>>> = scenes
        .par_iter()
        .map(|s| Ok(decode(&model.predict(&s.image.to_tensor())?, model.taxonomy())))
        .collect();
    for (s, pred) in scenes.iter().zip(preds) {
        cm.accumulate(&pred?, &schedule.eval_labels(&s.labels, t)?)?;
    }
    cm.report(&partition, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{build_schedule, IncrementMode, ScheduleConfig, StepConfig};
    use crate::synth::RgbImage;
    use crate::taxonomy::{NodeRecord, TaxonomyDoc};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn poly_values() {
        assert_eq!(poly_lr(0, 100, 0.03, 0.9), 0.03);
        assert_eq!(poly_lr(100, 100, 0.03, 0.9), 0.0);
        assert!((poly_lr(50, 100, 0.03, 0.9) - 0.03 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(50, 100, 0.03, 0.9) - 0.016077).abs() < 1e-5);
    }

    fn schedule() -> TaskSchedule {
        let tax = Taxonomy::load(&TaxonomyDoc {
            nodes: vec![NodeRecord::new(0, "root", None), NodeRecord::new(1, "a", Some(0)), NodeRecord::new(2, "b", Some(0))],
        })
        .unwrap();
        let steps = vec![
            StepConfig { classes: vec![1], parents: BTreeMap::new() },
            StepConfig { classes: vec![2], parents: BTreeMap::new() },
        ];
        build_schedule(&ScheduleConfig { mode: IncrementMode::Disjoint, steps, seed: 0 }, &tax).unwrap()
    }

    fn sample(labels: Vec<NodeId>, h: usize, w: usize) -> TrainSample {
        let data = (0..h * w * 3).map(|i| (i % 251) as u8).collect();
        let scene = Scene { image: RgbImage::new(h, w, data).unwrap(), labels };
        TrainSample::new(&scene, &schedule(), 1).unwrap()
    }

    #[test]
    fn crop_contains_labels() {
        let mut labels = vec![BACKGROUND; 64];
        labels[63] = 1;
        let s = sample(labels, 8, 8);
        let cfg = TrainConfig { crop: Some(3), ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a = augment(&s, &cfg, &mut rng).unwrap();
            assert_eq!(a.visible_labels().len(), 9);
            assert!(a.visible_labels().contains(&1));
            assert!(a.is_consistent(&schedule()));
        }
    }

    #[test]
    fn crop_fallback_and_double_flip() {
        let s = sample(vec![BACKGROUND; 16], 4, 4);
        let cfg = TrainConfig { crop: Some(2), ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &cfg, &mut rng).unwrap().visible_labels().len(), 4);
        let f = s.flipped().flipped();
        assert_eq!(f.image(), s.image());
        assert_eq!(f.visible_labels(), s.visible_labels());
    }

    #[test]
    fn sgd_momentum() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(&store, 0.9, 0.0);
        let mut g = Gradients::default();
        g.insert(id, Tensor::from_vec(&[1], vec![1.0]).unwrap());
        store.accumulate(&g, 1.0);
        opt.step(&mut store, 0.1);
        assert!((store.value(id).item() - 0.9).abs() < 1e-15);
        opt.step(&mut store, 0.1);
        assert!((store.value(id).item() - (0.9 - 0.19)).abs() < 1e-15);
    }
}
