//! Confusion matrices and mIoU over base/novel partitions.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Partition;
use crate::taxonomy::{NodeId, BACKGROUND, IGNORE};

/// Counts over `classes` plus a trailing background slot; rows are ground
/// truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[NodeId]) -> Self {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let index = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let n = classes.len() + 1;
        Self { classes, index, counts: vec![0; n * n] }
    }

    fn size(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn classes(&self) -> &[NodeId] {
        &self.classes
    }

    fn slot(&self, id: NodeId) -> Result<usize> {
        if id == BACKGROUND {
            return Ok(self.classes.len());
        }
        self.index.get(&id).copied().ok_or(Error::UnknownClassId(id))
    }

    pub fn get(&self, gt: NodeId, pred: NodeId) -> Result<u64> {
        Ok(self.counts[self.slot(gt)? * self.size() + self.slot(pred)?])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair. Pixels whose ground truth is
    /// [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &[NodeId], gt: &[NodeId]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!("prediction {} vs ground truth {}", pred.len(), gt.len())));
        }
        let n = self.size();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            let (r, c) = (self.slot(g)?, self.slot(p)?);
            self.counts[r * n + c] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch("confusion matrices over different classes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// IoU in percent, `None` when the class is absent from both maps.
    pub fn iou(&self, class: NodeId) -> Result<Option<f64>> {
        let k = self.slot(class)?;
        let n = self.size();
        let diag = self.counts[k * n + k];
        let row: u64 = self.counts[k * n..(k + 1) * n].iter().sum();
        let col: u64 = (0..n).map(|r| self.counts[r * n + k]).sum();
        let union = row + col - diag;
        Ok((union > 0).then(|| 100.0 * diag as f64 / union as f64))
    }

    pub fn report(&self, partition: &Partition, step: usize) -> Result<MIoUReport> {
        if partition.base.is_empty() && partition.novel.is_empty() {
            return Err(Error::EmptyPartition);
        }
        let mut per_class = BTreeMap::new();
        for &c in partition.base.iter().chain(&partition.novel) {
            per_class.insert(c, self.iou(c)?);
        }
        let mean = |ids: &[NodeId]| -> Option<f64> {
            let vals: Vec<f64> = ids.iter().filter_map(|c| per_class[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Ok(MIoUReport {
            step,
            miou_base: mean(&partition.base),
            miou_novel: mean(&partition.novel),
            miou_all: mean(&partition.all()),
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIoUReport {
    pub step: usize,
    pub per_class: BTreeMap<NodeId, Option<f64>>,
    pub miou_base: Option<f64>,
    pub miou_novel: Option<f64>,
    pub miou_all: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// `(step, miou_all)` pairs in input order.
pub fn step_curve(reports: &[MIoUReport]) -> Vec<(usize, Option<f64>)> {
    reports.iter().map(|r| (r.step, r.miou_all)).collect()
}

pub fn summary_csv(reports: &[MIoUReport]) -> String {
    let mut out = String::from("step,miou_base,miou_novel,miou_all\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{},{}", r.step, cell(r.miou_base), cell(r.miou_novel), cell(r.miou_all));
    }
    out
}

pub fn report_csv(reports: &[MIoUReport]) -> String {
    let mut out = String::from("step,class_id,iou\n");
    for r in reports {
        for (c, v) in &r.per_class {
            let _ = writeln!(out, "{},{c},{}", r.step, cell(*v));
        }
    }
    out
}

pub fn step_curve_csv(reports: &[MIoUReport]) -> String {
    let mut out = String::from("step,miou_all\n");
    for (s, v) in step_curve(reports) {
        let _ = writeln!(out, "{s},{}", cell(v));
    }
    out
}

/// Parsed row of a summary CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub step: usize,
    pub miou_base: Option<f64>,
    pub miou_novel: Option<f64>,
    pub miou_all: Option<f64>,
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut lines = text.lines();
    if lines.next() != Some("step,miou_base,miou_novel,miou_all") {
        return Err(bad("unexpected header"));
    }
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad("malformed number"))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected four columns"));
            }
            Ok(SummaryRow {
                step: f[0].parse().map_err(|_| bad("malformed step"))?,
                miou_base: parse(f[1])?,
                miou_novel: parse(f[2])?,
                miou_all: parse(f[3])?,
            })
        })
        .collect()
}
