//! Small convolutional encoder composed with the hyperbolic head.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::head::{self, ClassHyperplane, HeadVars, ScoreVolume};
use crate::taxonomy::{Taxonomy, TaxonomyDoc};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "hyciss-checkpoint/1";
const HEAD_OFFSET: &str = "head.offset";
const HEAD_ORIENTATION: &str = "head.orientation";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channel widths from the input to the feature dimension.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: vec![3, 16, 32, 8], kernel: 3, activation: Activation::Tanh }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid backbone {self:?}")));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn input_channels(&self) -> usize {
        self.channels[0]
    }

    fn layers(&self) -> usize {
        self.channels.len() - 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub scores: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    backbone: BackboneConfig,
    curvature: Curvature,
    taxonomy: Taxonomy,
    params: ParamStore,
}

impl Segmenter {
    /// Fresh model: scaled Gaussian conv weights, zero biases, random head.
    pub fn new(backbone: BackboneConfig, taxonomy: Taxonomy, curvature: Curvature, seed: u64) -> Result<Self> {
        backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = backbone.kernel;
        for l in 0..backbone.layers() {
            let (cin, cout) = (backbone.channels[l], backbone.channels[l + 1]);
            let std = (1.0 / (k * k * cin) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..k * k * cin * cout).map(|_| normal.sample(&mut rng)).collect();
            params.insert(&format!("backbone.{l}.weight"), Tensor::from_vec(&[k, k, cin, cout], w)?);
            params.insert(&format!("backbone.{l}.bias"), Tensor::zeros(&[cout]));
        }
        let planes = head::init_planes(&taxonomy, backbone.feature_dim(), 0.05, &mut rng);
        let mut model = Self { backbone, curvature, taxonomy, params };
        model.set_planes(&planes);
        Ok(model)
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("parameter {name} exists"))
    }

    pub fn planes(&self) -> Vec<ClassHyperplane> {
        head::tensors_to_planes(
            &self.taxonomy,
            self.params.value(self.id(HEAD_OFFSET)),
            self.params.value(self.id(HEAD_ORIENTATION)),
        )
    }

    fn set_planes(&mut self, planes: &[ClassHyperplane]) {
        let (off, ori) = head::planes_to_tensors(planes, self.backbone.feature_dim());
        self.params.insert(HEAD_OFFSET, off);
        self.params.insert(HEAD_ORIENTATION, ori);
    }

    /// Switches to `tax_new` (a growth of the current taxonomy), expanding
    /// the head.
    pub fn expand<R: Rng + ?Sized>(&mut self, tax_new: &Taxonomy, init_scale: f64, rng: &mut R) -> Result<()> {
        let planes = head::expand_head(&self.planes(), tax_new, init_scale, rng)?;
        self.taxonomy = tax_new.clone();
        self.set_planes(&planes);
        Ok(())
    }

    /// Rescales any collapsed hyperplane orientation back to the floor.
    pub fn floor_orientations(&mut self) {
        let id = self.id(HEAD_ORIENTATION);
        let n = self.backbone.feature_dim();
        for row in self.params.value_mut(id).data_mut().chunks_mut(n) {
            head::floor_orientation(row);
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[2] != self.backbone.input_channels() {
            return Err(Error::ShapeMismatch(format!(
                "image {s:?} for a {}-channel backbone",
                self.backbone.input_channels()
            )));
        }
        if !image.all_finite() {
            return Err(Error::non_finite("input image"));
        }
        Ok(())
    }

    /// Records the backbone on `tape`; parameters become trainable leaves.
    pub fn record_features(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let mut x = tape.input(image.clone());
        let layers = self.backbone.layers();
        for l in 0..layers {
            let w = tape.param(&self.params, self.id(&format!("backbone.{l}.weight")));
            let b = tape.param(&self.params, self.id(&format!("backbone.{l}.bias")));
            x = tape.conv2d(x, w, b)?;
            if l + 1 < layers {
                x = tape.activation(x, self.backbone.activation);
            }
        }
        Ok(x)
    }

    pub fn record(&self, tape: &mut Tape, image: &Tensor) -> Result<ForwardVars> {
        let features = self.record_features(tape, image)?;
        let off = tape.param(&self.params, self.id(HEAD_OFFSET));
        let ori = tape.param(&self.params, self.id(HEAD_ORIENTATION));
        let HeadVars { logits, scores } = head::record_head(tape, features, off, ori, self.curvature)?;
        Ok(ForwardVars { features, logits, scores })
    }

    /// `[H, W, N]` features.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.record_features(&mut tape, image)?;
        Ok(tape.value(f).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<ScoreVolume> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, image)?;
        let s = image.shape();
        ScoreVolume::new(s[0], s[1], self.taxonomy.num_classes(), tape.value(vars.scores).data().to_vec())
    }

    pub fn snapshot(&self) -> FrozenModel {
        FrozenModel(Arc::new(self.clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            curvature: self.curvature,
            backbone: self.backbone.clone(),
            taxonomy: self.taxonomy.to_doc(),
            params: self
                .params
                .named()
                .map(|(name, t)| NamedTensor { name: name.to_string(), tensor: t.clone() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unknown checkpoint format {}", ck.format)));
        }
        ck.backbone.validate()?;
        let taxonomy = Taxonomy::load_in_order(&ck.taxonomy)?;
        let mut params = ParamStore::new();
        for p in &ck.params {
            params.insert(&p.name, p.tensor.clone());
        }
        let model = Self { backbone: ck.backbone.clone(), curvature: ck.curvature, taxonomy, params };
        let template = Self::new(model.backbone.clone(), model.taxonomy.clone(), model.curvature, 0)?;
        for (name, t) in template.params.named() {
            match model.params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::ShapeMismatch(format!("checkpoint parameter {name}"))),
            }
        }
        if template.params.len() != model.params.len() {
            return Err(Error::ShapeMismatch("checkpoint has extra parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// Read-only shared copy of a model.
#[derive(Clone, Debug)]
pub struct FrozenModel(Arc<Segmenter>);

impl FrozenModel {
    pub fn model(&self) -> &Segmenter {
        &self.0
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        self.0.taxonomy()
    }

    pub fn predict(&self, image: &Tensor) -> Result<ScoreVolume> {
        self.0.predict(image)
    }

    pub fn snapshot(&self) -> FrozenModel {
        self.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub curvature: Curvature,
    pub backbone: BackboneConfig,
    pub taxonomy: TaxonomyDoc,
    pub params: Vec<NamedTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::NodeRecord;

    fn model() -> Segmenter {
        let tax = Taxonomy::load(&TaxonomyDoc {
            nodes: vec![
                NodeRecord::new(0, "root", None),
                NodeRecord::new(1, "a", Some(0)),
                NodeRecord::new(2, "b", Some(1)),
                NodeRecord::new(3, "c", Some(0)),
            ],
        })
        .unwrap();
        let cfg = BackboneConfig { channels: vec![3, 4, 4], kernel: 3, activation: Activation::Tanh };
        Segmenter::new(cfg, tax, Curvature::new(3.0).unwrap(), 1).unwrap()
    }

    #[test]
    fn zero_image_zero_features() {
        let m = model();
        let f = m.forward(&Tensor::zeros(&[5, 6, 3])).unwrap();
        assert_eq!(f.shape(), &[5, 6, 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channels() {
        assert!(matches!(model().forward(&Tensor::zeros(&[4, 4, 1])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut m = model();
        let img = Tensor::full(&[4, 4, 3], 0.2);
        let snap = m.snapshot();
        let before = snap.predict(&img).unwrap();
        let id = m.params().ids().next().unwrap();
        m.params_mut().value_mut(id).data_mut()[0] += 1.0;
        assert_eq!(snap.predict(&img).unwrap(), before);
        assert_ne!(m.predict(&img).unwrap(), before);
        assert_eq!(snap.snapshot().predict(&img).unwrap(), before);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        m.snapshot().model().save(&path).unwrap();
        let back = Segmenter::load(&path).unwrap();
        assert_eq!(back, m);
    }
}
