//! Incremental task schedules and label masking.
//!
//! Images are shared across steps (overlapped setting); each step only sees
//! its own classes, everything else collapses to background.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{RgbImage, Scene};
use crate::taxonomy::{NodeId, NodeRecord, Taxonomy, BACKGROUND, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncrementMode {
    Disjoint,
    Refinement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepConfig {
    pub classes: Vec<NodeId>,
    #[serde(default)]
    pub parents: BTreeMap<NodeId, NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub mode: IncrementMode,
    pub steps: Vec<StepConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl ScheduleConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct TaskSchedule {
    mode: IncrementMode,
    name: String,
    final_tax: Taxonomy,
    steps: Vec<BTreeSet<NodeId>>,
    taxonomies: Vec<Taxonomy>,
    /// Per step, final leaf → visible class id.
    shift: Vec<HashMap<NodeId, NodeId>>,
    /// Per step, final leaf → evaluation leaf of that step's taxonomy.
    coarsen: Vec<HashMap<NodeId, NodeId>>,
    seed: u64,
}

/// `X-Y (k tasks)` when every increment has the same size, otherwise the
/// dash-joined step sizes.
pub fn schedule_name(counts: &[usize]) -> String {
    match counts {
        [] => String::new(),
        [x] => format!("{x} (offline)"),
        [x, rest @ ..] if rest.iter().all(|&c| c == rest[0]) => {
            format!("{x}-{} ({} tasks)", rest[0], rest.len())
        }
        _ => counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-"),
    }
}

fn bad_parent(class: NodeId, reason: impl Into<String>) -> Error {
    Error::BadParent { class, reason: reason.into() }
}

pub fn build_schedule(config: &ScheduleConfig, final_tax: &Taxonomy) -> Result<TaskSchedule> {
    if config.steps.is_empty() {
        return Err(Error::CountMismatch("schedule has no steps".into()));
    }
    let mut seen: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut steps = Vec::with_capacity(config.steps.len());
    for (t, step) in config.steps.iter().enumerate() {
        let mut set = BTreeSet::new();
        for &c in &step.classes {
            if !final_tax.contains(c) || c == final_tax.root() {
                return Err(Error::UnknownClassId(c));
            }
            if let Some(prev) = seen.insert(c, t + 1) {
                return Err(Error::CountMismatch(format!("class {c} appears in steps {prev} and {}", t + 1)));
            }
            set.insert(c);
        }
        for (&child, &parent) in &step.parents {
            if !set.contains(&child) {
                return Err(bad_parent(child, "parent entry for a class outside this step"));
            }
            if final_tax.parent(child) != Some(parent) {
                return Err(bad_parent(child, format!("taxonomy parent is not {parent}")));
            }
        }
        steps.push(set);
    }

    match config.mode {
        IncrementMode::Disjoint => {
            for set in &steps {
                if let Some(&c) = set.iter().find(|&&c| !final_tax.is_leaf(c)) {
                    return Err(bad_parent(c, "disjoint classes must be final leaves"));
                }
            }
        }
        IncrementMode::Refinement => {
            for (t, set) in steps.iter().enumerate() {
                for &c in set {
                    let anc = final_tax.ancestors(c)?;
                    if t == 0 {
                        if anc[1..].iter().any(|a| set.contains(a)) {
                            return Err(bad_parent(c, "base classes must not nest"));
                        }
                    } else {
                        let parent = final_tax.parent(c).ok_or(Error::UnknownNode(c))?;
                        if !matches!(seen.get(&parent), Some(&s) if s <= t) {
                            return Err(bad_parent(c, format!("parent {parent} is not an earlier class")));
                        }
                    }
                }
            }
        }
    }

    let covered: BTreeSet<NodeId> = seen.keys().copied().collect();
    let missing: Vec<NodeId> = final_tax.leaves().into_iter().filter(|l| !covered.contains(l)).collect();
    if !missing.is_empty() {
        return Err(Error::CountMismatch(format!("final leaves {missing:?} are never introduced")));
    }

    // step taxonomies grown incrementally so column order is append-only
    let mut taxonomies: Vec<Taxonomy> = Vec::with_capacity(steps.len());
    let mut cumulative = BTreeSet::new();
    for set in &steps {
        cumulative.extend(set.iter().copied());
        let target = final_tax.restrict(&cumulative)?;
        let next = match taxonomies.last() {
            None => target,
            Some(prev) => {
                let mut fresh: Vec<NodeRecord> =
                    target.records().iter().filter(|r| !prev.contains(r.id)).cloned().collect();
                fresh.sort_by_key(|r| (target.depth(r.id).unwrap_or(0), r.id));
                prev.grow(&fresh)?
            }
        };
        taxonomies.push(next);
    }

    let leaves = final_tax.leaves();
    let mut shift = Vec::with_capacity(steps.len());
    let mut coarsen = Vec::with_capacity(steps.len());
    for (set, tax) in steps.iter().zip(&taxonomies) {
        let mut s = HashMap::new();
        let mut c = HashMap::new();
        for &node in final_tax.classes() {
            if let Some(&v) = final_tax.ancestors(node)?.iter().find(|a| set.contains(a)) {
                s.insert(node, v);
            }
        }
        for &leaf in &leaves {
            let anc = final_tax.ancestors(leaf)?;
            if let Some(&v) = anc.iter().find(|&&a| tax.contains(a) && tax.is_leaf(a) && a != tax.root()) {
                c.insert(leaf, v);
            }
        }
        shift.push(s);
        coarsen.push(c);
    }

    let counts: Vec<usize> = steps.iter().map(|s| s.len()).collect();
    Ok(TaskSchedule {
        mode: config.mode,
        name: schedule_name(&counts),
        final_tax: final_tax.clone(),
        steps,
        taxonomies,
        shift,
        coarsen,
        seed: config.seed,
    })
}

impl TaskSchedule {
    pub fn mode(&self) -> IncrementMode {
        self.mode
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn final_taxonomy(&self) -> &Taxonomy {
        &self.final_tax
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps.len() {
            return Err(Error::Config(format!("step {t} outside 1..={}", self.steps.len())));
        }
        Ok(t - 1)
    }

    /// Classes introduced at step `t` (1-based).
    pub fn classes(&self, t: usize) -> Result<&BTreeSet<NodeId>> {
        Ok(&self.steps[self.idx(t)?])
    }

    /// Taxonomy known after step `t`: the ancestor closure of `C^{1:t}`.
    pub fn taxonomy_at(&self, t: usize) -> Result<&Taxonomy> {
        Ok(&self.taxonomies[self.idx(t)?])
    }

    /// Maps a label map onto what step `t` is allowed to see: each id becomes
    /// its nearest ancestor-or-self in `C^t`, or background.
    pub fn apply_background_shift(&self, full: &[NodeId], t: usize) -> Result<Vec<NodeId>> {
        let map = &self.shift[self.idx(t)?];
        full.iter()
            .map(|&f| match f {
                BACKGROUND => Ok(BACKGROUND),
                IGNORE => Ok(IGNORE),
                f if self.final_tax.contains(f) && f != self.final_tax.root() => {
                    Ok(map.get(&f).copied().unwrap_or(BACKGROUND))
                }
                f => Err(Error::UnknownClassId(f)),
            })
            .collect()
    }

    /// Ground truth coarsened to the leaves of the step-`t` taxonomy; leaves
    /// not yet introduced become background.
    pub fn eval_labels(&self, full: &[NodeId], t: usize) -> Result<Vec<NodeId>> {
        let map = &self.coarsen[self.idx(t)?];
        full.iter()
            .map(|&f| match f {
                BACKGROUND | IGNORE => Ok(f),
                f if self.final_tax.contains(f) && self.final_tax.is_leaf(f) => {
                    Ok(map.get(&f).copied().unwrap_or(BACKGROUND))
                }
                f => Err(Error::UnknownClassId(f)),
            })
            .collect()
    }

    /// Whether an image belongs to `D^t`: some pixel is visible at step `t`.
    pub fn in_step(&self, full: &[NodeId], t: usize) -> Result<bool> {
        let map = &self.shift[self.idx(t)?];
        Ok(full.iter().any(|f| map.contains_key(f)))
    }

    /// Evaluated leaves after step `t`, split into base (introduced at step
    /// 1) and novel.
    pub fn metric_partition_at(&self, t: usize) -> Result<Partition> {
        let tax = self.taxonomy_at(t)?;
        let first = &self.steps[0];
        let (base, novel) = tax.leaves().into_iter().partition(|l| first.contains(l));
        Ok(Partition { base, novel })
    }

    pub fn metric_partition(&self) -> Partition {
        self.metric_partition_at(self.steps.len()).expect("last step exists")
    }

    /// Training samples of `D^t`, at most `limit`, in pool order.
    pub fn step_samples(&self, t: usize, pool: &[Scene], limit: usize) -> Result<Vec<TrainSample>> {
        let mut out = Vec::new();
        for scene in pool {
            if out.len() == limit {
                break;
            }
            if self.in_step(&scene.labels, t)? {
                out.push(TrainSample::new(scene, self, t)?);
            }
        }
        Ok(out)
    }

    /// Validation scenes of `D^1 ∪ … ∪ D^t`, taking up to `per_step` new
    /// scenes for each step.
    pub fn eval_scenes<'a>(&self, t: usize, pool: &'a [Scene], per_step: usize) -> Result<Vec<&'a Scene>> {
        self.idx(t)?;
        let mut chosen = vec![false; pool.len()];
        for s in 1..=t {
            let mut taken = 0;
            for (i, scene) in pool.iter().enumerate() {
                if taken == per_step {
                    break;
                }
                if !chosen[i] && self.in_step(&scene.labels, s)? {
                    chosen[i] = true;
                    taken += 1;
                }
            }
        }
        Ok(pool.iter().zip(chosen).filter(|(_, c)| *c).map(|(s, _)| s).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub base: Vec<NodeId>,
    pub novel: Vec<NodeId>,
}

impl Partition {
    pub fn all(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.base.iter().chain(&self.novel).copied().collect();
        v.sort_unstable();
        v
    }
}

/// One training image of step `t`.
///
/// The full ground truth is private to this module; training code only ever
/// sees the masked map.
#[derive(Clone, Debug)]
pub struct TrainSample {
    step: usize,
    image: RgbImage,
    full: Vec<NodeId>,
    visible: Vec<NodeId>,
}

impl TrainSample {
    pub fn new(scene: &Scene, schedule: &TaskSchedule, t: usize) -> Result<Self> {
        Ok(Self {
            step: t,
            visible: schedule.apply_background_shift(&scene.labels, t)?,
            full: scene.labels.clone(),
            image: scene.image.clone(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn visible_labels(&self) -> &[NodeId] {
        &self.visible
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Whether the masked map still agrees with masking the private ground
    /// truth (augmentations must transform both identically).
    pub fn is_consistent(&self, schedule: &TaskSchedule) -> bool {
        schedule.apply_background_shift(&self.full, self.step).map(|v| v == self.visible).unwrap_or(false)
    }

    pub fn flipped(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(self.image.data.len());
        let mut full = Vec::with_capacity(h * w);
        let mut visible = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in (0..w).rev() {
                let p = y * w + x;
                data.extend_from_slice(&self.image.data[p * 3..p * 3 + 3]);
                full.push(self.full[p]);
                visible.push(self.visible[p]);
            }
        }
        Self { step: self.step, image: RgbImage { height: h, width: w, data }, full, visible }
    }

    pub fn cropped(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if y0 + ch > h || x0 + cw > w || ch == 0 || cw == 0 {
            return Err(Error::ShapeMismatch(format!("crop {ch}x{cw} at ({y0},{x0}) of {h}x{w}")));
        }
        let mut data = Vec::with_capacity(ch * cw * 3);
        let mut full = Vec::with_capacity(ch * cw);
        let mut visible = Vec::with_capacity(ch * cw);
        for y in y0..y0 + ch {
            let p = y * w + x0;
            data.extend_from_slice(&self.image.data[p * 3..(p + cw) * 3]);
            full.extend_from_slice(&self.full[p..p + cw]);
            visible.extend_from_slice(&self.visible[p..p + cw]);
        }
        Ok(Self { step: self.step, image: RgbImage { height: ch, width: cw, data }, full, visible })
    }
}

/// Records what label ids reach the loss at each step and flags any that the
/// replay-free contract forbids.
#[derive(Debug, Default)]
pub struct ReplayAudit {
    inner: Mutex<AuditLog>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditLog {
    pub batches: usize,
    pub pixels: u64,
    pub pseudo_pixels: u64,
    pub violations: Vec<String>,
}

impl ReplayAudit {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks one supervised label map. `visible` is the masked map,
    /// `supervised` what the loss consumed and `pseudo` marks pixels whose
    /// label came from the frozen model of the previous step.
    pub fn check(
        &self,
        schedule: &TaskSchedule,
        t: usize,
        visible: &[NodeId],
        supervised: &[NodeId],
        pseudo: &[bool],
    ) {
        let mut problems = Vec::new();
        let current = match schedule.classes(t) {
            Ok(c) => c,
            Err(e) => {
                self.inner.lock().expect("audit lock").violations.push(e.to_string());
                return;
            }
        };
        let old = if t > 1 { schedule.taxonomy_at(t - 1).ok() } else { None };
        let mut pseudo_count = 0u64;
        for (p, (&v, &s)) in visible.iter().zip(supervised).enumerate() {
            if v != BACKGROUND && v != IGNORE && !current.contains(&v) {
                problems.push(format!("step {t} pixel {p}: visible label {v} outside the step's classes"));
            }
            if pseudo[p] {
                pseudo_count += 1;
                let ok = v == BACKGROUND && old.is_some_and(|o| o.contains(s) && s != o.root());
                if !ok {
                    problems.push(format!("step {t} pixel {p}: pseudo-label {s} not from the previous model"));
                }
            } else if s != v {
                problems.push(format!("step {t} pixel {p}: label {s} differs from visible {v}"));
            }
        }
        let mut log = self.inner.lock().expect("audit lock");
        log.batches += 1;
        log.pixels += visible.len() as u64;
        log.pseudo_pixels += pseudo_count;
        log.violations.extend(problems.into_iter().take(16));
    }

    pub fn log(&self) -> AuditLog {
        self.inner.lock().expect("audit lock").clone()
    }
}
