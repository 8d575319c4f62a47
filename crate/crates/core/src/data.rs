//! Datasets: procedural shape images, IDX files and deterministic minibatches.

use std::f32::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sftn_tensor::{Real, Tensor};
use sha2::{Digest, Sha256};

use crate::arch::Shape3;
use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, streams};

pub const IMAGE_SHAPE: Shape3 = [3, 16, 16];
pub const SFDS_MAGIC: &[u8; 4] = b"SFDS";
pub const SFDS_VERSION: u32 = 1;

/// Immutable labelled image set, identified by a content hash.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    images: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    dims: Shape3,
    id: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        dims: Shape3,
    ) -> Result<Self> {
        let sample = dims.iter().product::<usize>();
        if images.len() != labels.len() * sample {
            return Err(CoreError::Format(format!(
                "{} image values for {} samples of shape {dims:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CoreError::Format(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Format("non-finite pixel value".into()));
        }
        let id = content_hash(&images, &labels, num_classes, dims);
        Ok(Self {
            name: name.into(),
            images,
            labels,
            num_classes,
            dims,
            id,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Shape3 {
        self.dims
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.images[i * s..(i + 1) * s]
    }

    /// Stacks the given samples into an `[n, c, h, w]` tensor plus labels.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::lit(v as f64)));
        }
        let [c, h, w] = self.dims;
        let tensor =
            Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered length matches");
        (tensor, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(name, images, labels, self.num_classes, self.dims)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// Stratified split: within each class, the first `train_parts` of every
    /// `train_parts + test_parts` samples go to the training side.
    pub fn split_stratified(&self, train_parts: usize, test_parts: usize) -> Result<(Self, Self)> {
        if train_parts == 0 || test_parts == 0 {
            return Err(CoreError::InvalidArgument(
                "split parts must be positive".into(),
            ));
        }
        let period = train_parts + test_parts;
        let mut seen = vec![0usize; self.num_classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] % period < train_parts {
                train.push(i);
            } else {
                test.push(i);
            }
            seen[l] += 1;
        }
        Ok((
            self.subset(&train, format!("{}/train", self.name))?,
            self.subset(&test, format!("{}/test", self.name))?,
        ))
    }

    /// Self-describing binary export: `"SFDS" | version | n | K | c | h | w`
    /// (u32 little-endian), then `n` u32 labels and `n·c·h·w` f32 pixels.
    pub fn to_sfds_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 4 * (self.labels.len() + self.images.len()));
        out.extend_from_slice(SFDS_MAGIC);
        for v in [
            SFDS_VERSION,
            self.labels.len() as u32,
            self.num_classes as u32,
            self.dims[0] as u32,
            self.dims[1] as u32,
            self.dims[2] as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &p in &self.images {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_sfds_bytes(name: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..4] != SFDS_MAGIC {
            return Err(CoreError::Format("not an SFDS dataset".into()));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != SFDS_VERSION as usize {
            return Err(CoreError::Format(format!(
                "unsupported SFDS version {}",
                word(0)
            )));
        }
        let (n, k, dims) = (word(1), word(2), [word(3), word(4), word(5)]);
        let pixels = n * dims.iter().product::<usize>();
        let expected = 28 + 4 * n + 4 * pixels;
        if bytes.len() != expected {
            return Err(CoreError::Format(format!(
                "SFDS payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[28..];
        let labels = body[..4 * n]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let images = body[4 * n..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(name, images, labels, k, dims)
    }

    pub fn save_sfds(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_sfds_bytes())?;
        Ok(())
    }

    pub fn load_sfds(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_sfds_bytes(path.display().to_string(), &std::fs::read(path)?)
    }
}

fn content_hash(images: &[f32], labels: &[usize], k: usize, dims: Shape3) -> String {
    let mut h = Sha256::new();
    for v in [k, dims[0], dims[1], dims[2], labels.len()] {
        h.update((v as u64).to_le_bytes());
    }
    for &l in labels {
        h.update((l as u32).to_le_bytes());
    }
    for &p in images {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

// ------------------------------------------------------------ synth-vision

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    Primary,
    Transfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Texture {
    Solid,
    Stripes,
    Checker,
}

const COLORS: [[f32; 3]; 4] = [
    [0.85, 0.25, 0.2],
    [0.25, 0.8, 0.3],
    [0.25, 0.35, 0.85],
    [0.85, 0.8, 0.25],
];

type ClassDef = (ShapeKind, usize, Texture);

// Every attribute value is shared by several classes, so no single cue
// identifies a class.
const PRIMARY_CLASSES: [ClassDef; 10] = [
    (ShapeKind::Disk, 0, Texture::Solid),
    (ShapeKind::Disk, 1, Texture::Stripes),
    (ShapeKind::Square, 0, Texture::Stripes),
    (ShapeKind::Square, 2, Texture::Solid),
    (ShapeKind::Triangle, 1, Texture::Solid),
    (ShapeKind::Triangle, 0, Texture::Checker),
    (ShapeKind::Ring, 2, Texture::Stripes),
    (ShapeKind::Ring, 1, Texture::Checker),
    (ShapeKind::Cross, 2, Texture::Checker),
    (ShapeKind::Cross, 0, Texture::Solid),
];

// Disjoint from PRIMARY_CLASSES.
const TRANSFER_CLASSES: [ClassDef; 10] = [
    (ShapeKind::Diamond, 3, Texture::Solid),
    (ShapeKind::Diamond, 0, Texture::Stripes),
    (ShapeKind::Disk, 2, Texture::Checker),
    (ShapeKind::Square, 3, Texture::Checker),
    (ShapeKind::Triangle, 3, Texture::Stripes),
    (ShapeKind::Ring, 0, Texture::Solid),
    (ShapeKind::Cross, 1, Texture::Stripes),
    (ShapeKind::Disk, 3, Texture::Stripes),
    (ShapeKind::Square, 1, Texture::Checker),
    (ShapeKind::Triangle, 2, Texture::Solid),
];

/// Rendering knobs for [`gen_synth_vision_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Std of additive per-pixel Gaussian noise.
    pub pixel_noise: f32,
    /// Max per-channel deviation of the object color.
    pub color_jitter: f32,
    /// Probability of a faint distractor object.
    pub distractor_prob: f32,
    /// Max offset of the object center from the image center, in pixels.
    pub position_jitter: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            pixel_noise: 0.1,
            color_jitter: 0.15,
            distractor_prob: 0.5,
            position_jitter: 2.5,
        }
    }
}

fn signed_distance(kind: ShapeKind, x: f32, y: f32, r: f32) -> f32 {
    match kind {
        ShapeKind::Disk => (x * x + y * y).sqrt() - r,
        ShapeKind::Square => x.abs().max(y.abs()) - 0.8 * r,
        ShapeKind::Diamond => (x.abs() + y.abs()) / 2f32.sqrt() - 0.75 * r,
        ShapeKind::Ring => ((x * x + y * y).sqrt() - 0.7 * r).abs() - 0.3 * r,
        ShapeKind::Cross => {
            let bar = |a: f32, b: f32| (a.abs() - 0.3 * r).max(b.abs() - r);
            bar(x, y).min(bar(y, x))
        }
        ShapeKind::Triangle => {
            let v = [(0.0, -r), (0.9 * r, 0.75 * r), (-0.9 * r, 0.75 * r)];
            (0..3)
                .map(|i| {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % 3];
                    let (ex, ey) = (bx - ax, by - ay);
                    let len = (ex * ex + ey * ey).sqrt();
                    // outward normal for clockwise-in-screen vertex order
                    (ey * (x - ax) - ex * (y - ay)) / len
                })
                .fold(f32::NEG_INFINITY, f32::max)
        }
    }
}

fn texture_value(tex: Texture, x: f32, y: f32, angle: f32, phase: f32) -> f32 {
    match tex {
        Texture::Solid => 1.0,
        Texture::Stripes => {
            let u = x * angle.cos() + y * angle.sin();
            0.5 + 0.5 * (2.0 * PI * u / 3.0 + phase).cos()
        }
        Texture::Checker => {
            let s = (PI * x / 2.0 + phase).sin() * (PI * y / 2.0 + phase).sin();
            0.5 + 0.5 * (4.0 * s).tanh()
        }
    }
}

struct Object {
    def: ClassDef,
    cx: f32,
    cy: f32,
    radius: f32,
    color: [f32; 3],
    angle: f32,
    phase: f32,
    alpha: f32,
}

fn paint(img: &mut [f32], obj: &Object) {
    let [_, h, w] = IMAGE_SHAPE;
    for py in 0..h {
        for px in 0..w {
            let (x, y) = (px as f32 - obj.cx, py as f32 - obj.cy);
            let d = signed_distance(obj.def.0, x, y, obj.radius);
            let cover = obj.alpha / (1.0 + (d / 0.35).exp());
            if cover < 1e-4 {
                continue;
            }
            let t = 0.35 + 0.65 * texture_value(obj.def.2, x, y, obj.angle, obj.phase);
            for c in 0..3 {
                let i = (c * h + py) * w + px;
                img[i] = (1.0 - cover) * img[i] + cover * obj.color[c] * t;
            }
        }
    }
}

fn random_object(
    rng: &mut impl Rng,
    def: ClassDef,
    params: &SynthParams,
    radius: (f32, f32),
    alpha: f32,
) -> Object {
    let base = COLORS[def.1];
    let j = params.color_jitter;
    let color = base.map(|c| (c + rng.random_range(-j..=j)).clamp(0.0, 1.0));
    let pj = params.position_jitter;
    Object {
        def,
        cx: 7.5 + rng.random_range(-pj..=pj),
        cy: 7.5 + rng.random_range(-pj..=pj),
        radius: rng.random_range(radius.0..=radius.1),
        color,
        angle: rng.random_range(-0.4..=0.4f32) + if rng.random_bool(0.5) { 0.0 } else { PI / 2.0 },
        phase: rng.random_range(0.0..2.0 * PI),
        alpha,
    }
}

fn render_sample(
    rng: &mut impl Rng,
    classes: &[ClassDef],
    label: usize,
    params: &SynthParams,
) -> Vec<f32> {
    let [c, h, w] = IMAGE_SHAPE;
    let mut img = vec![0.0f32; c * h * w];
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.55));
    let (gx, gy) = (
        rng.random_range(-0.015..0.015f32),
        rng.random_range(-0.015..0.015f32),
    );
    for ch in 0..c {
        for py in 0..h {
            for px in 0..w {
                img[(ch * h + py) * w + px] =
                    bg[ch] + gx * (px as f32 - 7.5) + gy * (py as f32 - 7.5);
            }
        }
    }
    if rng.random_bool(params.distractor_prob as f64) {
        let other = classes[rng.random_range(0..classes.len())];
        let mut d = random_object(rng, other, params, (2.0, 3.0), 0.6);
        d.cx = if rng.random_bool(0.5) { 2.5 } else { 12.5 };
        d.cy = if rng.random_bool(0.5) { 2.5 } else { 12.5 };
        paint(&mut img, &d);
    }
    let obj = random_object(rng, classes[label], params, (4.0, 6.0), 1.0);
    paint(&mut img, &obj);
    if params.pixel_noise > 0.0 {
        let noise = Normal::new(0.0f32, params.pixel_noise).expect("finite std");
        for v in &mut img {
            *v += noise.sample(rng);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Procedural 10-class images with the default rendering parameters.
pub fn gen_synth_vision(task: SynthTask, n: usize, seed: u64) -> Result<Dataset> {
    gen_synth_vision_with(task, n, seed, &SynthParams::default())
}

/// Procedural 10-class images: each class is a (shape, color, texture)
/// combination, rendered with random placement, scale, color jitter,
/// background gradient, distractors and pixel noise. Labels are assigned
/// round-robin so classes are balanced within one sample.
pub fn gen_synth_vision_with(
    task: SynthTask,
    n: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Dataset> {
    let classes: &[ClassDef] = match task {
        SynthTask::Primary => &PRIMARY_CLASSES,
        SynthTask::Transfer => &TRANSFER_CLASSES,
    };
    let k = classes.len();
    if n < k {
        return Err(CoreError::InvalidArgument(format!(
            "need at least {k} samples, got {n}"
        )));
    }
    let task_stream = match task {
        SynthTask::Primary => 0,
        SynthTask::Transfer => 1,
    };
    let mut rng = stream_rng(seed, streams::DATA + 16 * task_stream);
    let mut images = Vec::with_capacity(n * IMAGE_SHAPE.iter().product::<usize>());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        images.extend(render_sample(&mut rng, classes, label, params));
        labels.push(label);
    }
    let name = format!("synth-vision/{task:?}/n{n}/s{seed}").to_lowercase();
    Dataset::new(name, images, labels, k, IMAGE_SHAPE)
}

// --------------------------------------------------------------------- IDX

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CoreError::Format(format!("{what}: truncated header")))
}

/// Bilinear resampling of one `h×w` plane (half-pixel centers, edge clamped).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    let coord = |o: usize, out_len: usize, in_len: usize| {
        let s = ((o as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5)
            .clamp(0.0, (in_len - 1) as f32);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, s - i0 as f32)
    };
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Parses an IDX image/label pair held in memory.
pub fn parse_idx(name: &str, image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(image_bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoreError::Format(format!(
            "idx images: bad magic 0x{magic:08x} (expected 0x{IDX_IMAGES_MAGIC:08x})"
        )));
    }
    let magic = be_u32(label_bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CoreError::Format(format!(
            "idx labels: bad magic 0x{magic:08x} (expected 0x{IDX_LABELS_MAGIC:08x})"
        )));
    }
    let n = be_u32(image_bytes, 4, "idx images")? as usize;
    let rows = be_u32(image_bytes, 8, "idx images")? as usize;
    let cols = be_u32(image_bytes, 12, "idx images")? as usize;
    let n_labels = be_u32(label_bytes, 4, "idx labels")? as usize;
    if n != n_labels {
        return Err(CoreError::Format(format!(
            "idx count mismatch: {n} images, {n_labels} labels"
        )));
    }
    if n == 0 {
        return Err(CoreError::EmptyDataset);
    }
    if rows == 0 || cols == 0 {
        return Err(CoreError::Format(format!(
            "idx images: degenerate size {rows}x{cols}"
        )));
    }
    let pixels = image_bytes
        .get(16..)
        .filter(|p| p.len() == n * rows * cols)
        .ok_or_else(|| {
            CoreError::Format(format!(
                "idx images: payload is not {n}x{rows}x{cols} bytes"
            ))
        })?;
    let raw_labels = label_bytes
        .get(8..)
        .filter(|p| p.len() == n)
        .ok_or_else(|| CoreError::Format(format!("idx labels: payload is not {n} bytes")))?;
    let [c, oh, ow] = IMAGE_SHAPE;
    let mut images = Vec::with_capacity(n * c * oh * ow);
    for img in pixels.chunks_exact(rows * cols) {
        let plane: Vec<f32> = img.iter().map(|&b| b as f32 / 255.0).collect();
        let resized = resize_bilinear(&plane, rows, cols, oh, ow);
        for _ in 0..c {
            images.extend_from_slice(&resized);
        }
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(name, images, labels, k, IMAGE_SHAPE)
}

/// Loads an IDX image file (magic `0x00000803`) and label file (`0x00000801`);
/// grayscale is replicated to 3 channels and resized to 16×16.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images_path.display().to_string(), &images, &labels)
}

// ----------------------------------------------------------------- batches

/// Minibatch index lists for one epoch; the order is a pure function of
/// `(shuffle_seed, epoch)` and the final partial batch is kept.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(shuffle_seed, streams::SHUFFLE + epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
