//! Procedural scenes of textured shapes with exact leaf masks.
//!
//! Leaves that share a non-root parent share a mean colour and differ only
//! in shape and texture, so the taxonomy mirrors visual similarity.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{NodeId, Taxonomy, TaxonomyDoc, BACKGROUND};
use crate::tensor::Tensor;

/// Minimum RGB distance between the means of non-sibling leaves.
pub const MIN_COLOR_SEPARATION: f64 = 0.1;

pub const DATASET_FORMAT: &str = "hyciss-dataset/1";
const IMAGE_MAGIC: &[u8; 4] = b"HYIM";
const LABEL_MAGIC: &[u8; 4] = b"HYLB";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Smooth filled ellipse.
    Ellipse,
    /// Rotated rectangle with stripes along its long axis.
    Rectangle,
    /// Thin bent band.
    Ribbon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafFamily {
    pub leaf: NodeId,
    pub shape: ShapeFamily,
    /// Mean RGB in [0, 1].
    pub color: [f64; 3],
    /// Per-object standard deviation around the mean colour.
    pub jitter: f64,
    /// Range of the half-extent along the long axis, in pixels.
    pub size: [f64; 2],
    /// Relative frequency with which an object is drawn from this family.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of objects per image.
    pub objects: [usize; 2],
    pub background: [f64; 3],
    pub pixel_noise: f64,
    pub texture_seed: u64,
    pub taxonomy: TaxonomyDoc,
    pub families: Vec<LeafFamily>,
}

/// 8-bit RGB image, row-major, channels last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!("{height}x{width} rgb image with {} bytes", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// `[H, W, 3]` tensor scaled to [-0.5, 0.5].
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as f64 / 255.0 - 0.5).collect();
        Tensor::from_vec(&[self.height, self.width, 3], data).expect("rgb shape")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub image: RgbImage,
    /// Final-taxonomy leaf ids or [`BACKGROUND`], one per pixel.
    pub labels: Vec<NodeId>,
}

impl SceneSpec {
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::load(&self.taxonomy)
    }

    pub fn validate(&self) -> Result<Taxonomy> {
        let tax = self.taxonomy()?;
        let bad = |reason: String| Err(Error::Config(format!("scene spec {}: {reason}", self.name)));
        if self.height == 0 || self.width == 0 {
            return bad("empty image size".into());
        }
        if self.objects[0] > self.objects[1] {
            return bad(format!("object range {:?}", self.objects));
        }
        let mut leaves = tax.leaves();
        leaves.sort_unstable();
        let mut covered: Vec<NodeId> = self.families.iter().map(|f| f.leaf).collect();
        covered.sort_unstable();
        if covered != leaves {
            return bad("families must cover every taxonomy leaf exactly once".into());
        }
        for f in &self.families {
            let ok = f.color.iter().all(|c| (0.0..=1.0).contains(c))
                && f.jitter >= 0.0
                && f.size[0] > 0.0
                && f.size[0] <= f.size[1]
                && f.weight > 0.0;
            if !ok {
                return bad(format!("family for leaf {} is malformed", f.leaf));
            }
        }
        for (i, a) in self.families.iter().enumerate() {
            for b in &self.families[i + 1..] {
                if are_siblings(&tax, a.leaf, b.leaf) {
                    continue;
                }
                if color_distance(a.color, b.color) < MIN_COLOR_SEPARATION {
                    return bad(format!("leaves {} and {} have indistinct colours", a.leaf, b.leaf));
                }
            }
        }
        Ok(tax)
    }

    /// Assigns families automatically: leaves under the same non-root parent
    /// share a palette colour and cycle through ellipse, rectangle, ribbon.
    pub fn for_taxonomy(name: &str, tax: &Taxonomy, height: usize, width: usize) -> Result<Self> {
        let mut groups: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
        let mut leaves = tax.leaves();
        leaves.sort_unstable();
        for leaf in leaves {
            let parent = tax.parent(leaf).ok_or(Error::UnknownNode(leaf))?;
            let key = if parent == tax.root() { leaf } else { parent };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(leaf),
                None => groups.push((key, vec![leaf])),
            }
        }
        if groups.len() > PALETTE.len() {
            return Err(Error::Config(format!("{} colour groups exceed the palette", groups.len())));
        }
        let mut families = Vec::new();
        for (g, (_, members)) in groups.iter().enumerate() {
            for (i, &leaf) in members.iter().enumerate() {
                let shape = [ShapeFamily::Ellipse, ShapeFamily::Rectangle, ShapeFamily::Ribbon][i % 3];
                families.push(LeafFamily {
                    leaf,
                    shape,
                    color: PALETTE[g],
                    jitter: 0.03,
                    size: default_size(shape),
                    weight: if shape == ShapeFamily::Ribbon { 0.7 } else { 1.0 },
                });
            }
        }
        let spec = Self {
            name: name.to_string(),
            height,
            width,
            objects: [2, 4],
            background: BACKGROUND_COLOR,
            pixel_noise: 0.03,
            texture_seed: 7,
            taxonomy: tax.to_doc(),
            families,
        };
        spec.validate()?;
        Ok(spec)
    }
}

const BACKGROUND_COLOR: [f64; 3] = [0.16, 0.08, 0.10];

/// Well-separated mean colours.
pub const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.65, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.75],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.35, 0.20],
    [0.90, 0.90, 0.90],
    [0.45, 0.45, 0.45],
    [0.60, 0.85, 0.45],
    [0.95, 0.55, 0.70],
];

fn default_size(shape: ShapeFamily) -> [f64; 2] {
    match shape {
        ShapeFamily::Ellipse => [5.0, 8.0],
        ShapeFamily::Rectangle => [6.0, 9.0],
        ShapeFamily::Ribbon => [6.0, 9.0],
    }
}

pub fn are_siblings(tax: &Taxonomy, a: NodeId, b: NodeId) -> bool {
    match (tax.parent(a), tax.parent(b)) {
        (Some(p), Some(q)) => p == q && p != tax.root(),
        _ => false,
    }
}

pub fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// rasterization

struct Object {
    leaf: NodeId,
    shape: ShapeFamily,
    color: [f64; 3],
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    a: f64,
    b: f64,
    bend: f64,
    phase: f64,
}

impl Object {
    fn area(&self) -> f64 {
        match self.shape {
            ShapeFamily::Ellipse => std::f64::consts::PI * self.a * self.b,
            ShapeFamily::Rectangle => 4.0 * self.a * self.b,
            ShapeFamily::Ribbon => 4.0 * self.a * self.b,
        }
    }

    /// Colour of the object at pixel centre `(y, x)`, if covered.
    fn shade(&self, y: f64, x: f64) -> Option<[f64; 3]> {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        match self.shape {
            ShapeFamily::Ellipse => {
                ((u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0).then_some(self.color)
            }
            ShapeFamily::Rectangle => (u.abs() <= self.a && v.abs() <= self.b).then(|| {
                let stripe = if ((u + self.a) / 2.0).floor() as i64 % 2 == 0 { 0.14 } else { -0.14 };
                self.color.map(|c| c + stripe)
            }),
            ShapeFamily::Ribbon => {
                let centre = self.bend * (std::f64::consts::PI * u / self.a + self.phase).sin();
                (u.abs() <= self.a && (v - centre).abs() <= self.b).then_some(self.color)
            }
        }
    }
}

fn sample_object<R: Rng>(fam: &LeafFamily, h: usize, w: usize, rng: &mut R) -> Object {
    let a = rng.random_range(fam.size[0]..=fam.size[1]);
    let b = match fam.shape {
        ShapeFamily::Ellipse => a * rng.random_range(0.6..=1.0),
        ShapeFamily::Rectangle => a * rng.random_range(0.45..=0.7),
        ShapeFamily::Ribbon => rng.random_range(0.8..=1.2),
    };
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let jitter = Normal::new(0.0, fam.jitter.max(1e-12)).expect("finite jitter");
    let color = fam.color.map(|c| c + if fam.jitter > 0.0 { jitter.sample(rng) } else { 0.0 });
    Object {
        leaf: fam.leaf,
        shape: fam.shape,
        color,
        cy: rng.random_range(0.0..h as f64),
        cx: rng.random_range(0.0..w as f64),
        cos: theta.cos(),
        sin: theta.sin(),
        a,
        b,
        bend: if fam.shape == ShapeFamily::Ribbon { rng.random_range(1.0..=3.0) } else { 0.0 },
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders image `index` of the stream defined by `seed`.
pub fn render(spec: &SceneSpec, seed: u64, index: u64) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let total: f64 = spec.families.iter().map(|f| f.weight).sum();
    let count = rng.random_range(spec.objects[0]..=spec.objects[1]);
    let mut objects: Vec<Object> = (0..count)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let fam = spec
                .families
                .iter()
                .find(|f| {
                    pick -= f.weight;
                    pick < 0.0
                })
                .unwrap_or_else(|| spec.families.last().expect("non-empty families"));
            sample_object(fam, h, w, &mut rng)
        })
        .collect();
    // larger objects lie underneath
    objects.sort_by(|a, b| b.area().total_cmp(&a.area()));

    let mut tex = ChaCha8Rng::seed_from_u64(spec.texture_seed ^ seed.rotate_left(17));
    tex.set_stream(index);
    let gy: f64 = tex.random_range(-0.04..0.04);
    let gx: f64 = tex.random_range(-0.04..0.04);
    let noise = Normal::new(0.0, spec.pixel_noise.max(1e-12)).expect("finite noise");

    let mut data = Vec::with_capacity(h * w * 3);
    let mut labels = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut color = spec.background.map(|c| c + gy * py / h as f64 * 4.0 + gx * px / w as f64 * 4.0);
            for o in &objects {
                if let Some(c) = o.shade(py, px) {
                    color = c;
                    labels[y * w + x] = o.leaf;
                }
            }
            for c in color {
                let n = if spec.pixel_noise > 0.0 { noise.sample(&mut tex) } else { 0.0 };
                data.push(to_byte(c + n));
            }
        }
    }
    Scene { image: RgbImage { height: h, width: w, data }, labels }
}

/// `n` scenes for `seed`; image `i` depends only on `(seed, i)`.
pub fn generate(spec: &SceneSpec, n: usize, seed: u64) -> Vec<Scene> {
    generate_range(spec, 0, n, seed)
}

pub fn generate_range(spec: &SceneSpec, start: u64, n: usize, seed: u64) -> Vec<Scene> {
    (0..n as u64).into_par_iter().map(|i| render(spec, seed, start + i)).collect()
}

// ---------------------------------------------------------------------------
// on-disk format

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub count: usize,
    /// FNV-1a over the split's files in index order.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub splits: Vec<SplitEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    /// Train and validation pools from disjoint index ranges of one stream.
    pub fn generate(spec: &SceneSpec, train: usize, val: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            train: generate_range(spec, 0, train, seed),
            val: generate_range(spec, train as u64, val, seed),
        })
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

fn encode_image(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for d in [img.height, img.width, 3] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&img.data);
    out
}

fn encode_labels(labels: &[NodeId], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + labels.len() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    for d in [h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn read_u32s(path: &Path, bytes: &[u8], magic: &[u8; 4], n: usize) -> Result<Vec<usize>> {
    if bytes.len() < 4 + 4 * n || &bytes[..4] != magic {
        return Err(format_err(path, "bad header"));
    }
    Ok((0..n)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect())
}

fn decode_image(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let dims = read_u32s(path, bytes, IMAGE_MAGIC, 3)?;
    if dims[2] != 3 || bytes.len() != 16 + dims[0] * dims[1] * 3 {
        return Err(format_err(path, "image size does not match header"));
    }
    RgbImage::new(dims[0], dims[1], bytes[16..].to_vec())
}

fn decode_labels(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<NodeId>)> {
    let dims = read_u32s(path, bytes, LABEL_MAGIC, 2)?;
    let n = dims[0] * dims[1];
    if bytes.len() != 12 + 4 * n {
        return Err(format_err(path, "label size does not match header"));
    }
    let labels = bytes[12..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims[0], dims[1], labels))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn save_split(dir: &Path, name: &str, scenes: &[Scene]) -> Result<SplitEntry> {
    let sub = dir.join(name);
    fs::create_dir_all(&sub)?;
    let mut fnv = Fnv::new();
    for (i, s) in scenes.iter().enumerate() {
        let img = encode_image(&s.image);
        let lbl = encode_labels(&s.labels, s.image.height, s.image.width);
        fnv.update(&img);
        fnv.update(&lbl);
        write_file(&sub.join(format!("{i:06}.img")), &img)?;
        write_file(&sub.join(format!("{i:06}.lbl")), &lbl)?;
    }
    Ok(SplitEntry { name: name.to_string(), count: scenes.len(), checksum: format!("{:016x}", fnv.0) })
}

fn load_split(dir: &Path, entry: &SplitEntry) -> Result<Vec<Scene>> {
    let sub = dir.join(&entry.name);
    let mut fnv = Fnv::new();
    let mut out = Vec::with_capacity(entry.count);
    for i in 0..entry.count {
        let ip = sub.join(format!("{i:06}.img"));
        let lp = sub.join(format!("{i:06}.lbl"));
        let ib = read_file(&ip)?;
        let lb = read_file(&lp)?;
        fnv.update(&ib);
        fnv.update(&lb);
        let image = decode_image(&ip, &ib)?;
        let (h, w, labels) = decode_labels(&lp, &lb)?;
        if (h, w) != (image.height, image.width) {
            return Err(format_err(&lp, "label and image sizes differ"));
        }
        out.push(Scene { image, labels });
    }
    if format!("{:016x}", fnv.0) != entry.checksum {
        return Err(format_err(&sub, "checksum mismatch"));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every split, then the manifest as the completion marker.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let splits = vec![save_split(dir, "train", &data.train)?, save_split(dir, "val", &data.val)?];
    let manifest = Manifest { format: DATASET_FORMAT.to_string(), seed: data.seed, spec: data.spec.clone(), splits };
    let tmp = dir.join("manifest.json.tmp");
    write_file(&tmp, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    fs::rename(&tmp, &manifest_path)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingRun(path));
    }
    let manifest: Manifest = serde_json::from_slice(&read_file(&path)?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(format_err(&path, format!("unknown format {}", manifest.format)));
    }
    manifest.spec.validate()?;
    let split = |name: &str| -> Result<Vec<Scene>> {
        let entry = manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| format_err(&path, format!("missing split {name}")))?;
        load_split(dir, entry)
    };
    Ok(Dataset { seed: manifest.seed, train: split("train")?, val: split("val")?, spec: manifest.spec })
}

/// Pixel counts per leaf over a set of scenes, in family order.
pub fn class_frequencies(spec: &SceneSpec, scenes: &[Scene]) -> Vec<(NodeId, u64)> {
    let mut counts: Vec<(NodeId, u64)> = spec.families.iter().map(|f| (f.leaf, 0)).collect();
    for s in scenes {
        for &l in &s.labels {
            if let Some(e) = counts.iter_mut().find(|(id, _)| *id == l) {
                e.1 += 1;
            }
        }
    }
    counts
}
