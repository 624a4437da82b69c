//! Datasets, pseudo-label assignments, file loaders, the synthetic benchmark
//! generator and the class-balanced sampler.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::ImageShape;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images N×C×H×W in `[0, 1]`, optional ground truth and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    truth: Option<Vec<usize>>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(images: Tensor, truth: Option<Vec<usize>>, splits: Vec<Split>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        let n = images.rows();
        if splits.len() != n {
            return Err(Error::invalid(format!(
                "{} split tags for {n} images",
                splits.len()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} images", t.len())));
            }
            let classes = t.iter().max().map_or(0, |m| m + 1);
            let mut seen = vec![false; classes];
            t.iter().for_each(|&c| seen[c] = true);
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::invalid(format!(
                    "ground-truth class {missing} of 0..{classes} has no samples"
                )));
            }
        }
        Ok(Dataset {
            images,
            truth,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape::new(s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn truth(&self) -> Option<&[usize]> {
        self.truth.as_deref()
    }

    pub fn num_truth_classes(&self) -> Option<usize> {
        self.truth
            .as_ref()
            .map(|t| t.iter().max().map_or(0, |m| m + 1))
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let s = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * s.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::from_vec(&[indices.len(), s.channels, s.height, s.width], data)?;
        let truth = self
            .truth
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect());
        let splits = indices.iter().map(|&i| self.splits[i]).collect();
        Dataset::new(images, truth, splits)
    }

    pub fn split(&self, split: Split) -> Result<Dataset> {
        self.subset(&self.indices_of(split))
    }

    /// Append `other`, re-tagging its samples as `Test`.
    pub fn with_test_set(self, other: Dataset) -> Result<Dataset> {
        if other.image_shape() != self.image_shape() {
            return Err(Error::invalid("train and test image shapes differ"));
        }
        let truth = match (self.truth, other.truth) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, None) => None,
            _ => return Err(Error::invalid("labels present for only one of train/test")),
        };
        let n = self.images.rows() + other.images.rows();
        let s = self.images.shape()[1..].to_vec();
        let mut data = self.images.into_data();
        data.extend(other.images.into_data());
        let mut splits = self.splits;
        splits.extend(std::iter::repeat_n(Split::Test, other.splits.len()));
        let images = Tensor::from_vec(&[n, s[0], s[1], s[2]], data)?;
        Dataset::new(images, truth, splits)
    }
}

/// Pseudo-class index per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAssignment {
    labels: Vec<usize>,
    k: usize,
    epoch_of_origin: usize,
}

impl LabelAssignment {
    pub fn new(labels: Vec<usize>, k: usize, epoch_of_origin: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for k = {k}"
            )));
        }
        Ok(LabelAssignment {
            labels,
            k,
            epoch_of_origin,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<usize> {
        self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn epoch_of_origin(&self) -> usize {
        self.epoch_of_origin
    }

    pub fn set_epoch_of_origin(&mut self, epoch: usize) {
        self.epoch_of_origin = epoch;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Members of every class, each list in ascending sample order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }
}

// ---------------------------------------------------------------------------
// IDX

const IDX_U8: u8 = 0x08;

struct IdxArray {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(0, "bad IDX magic (expected two zero bytes)"));
    }
    if bytes[2] != IDX_U8 {
        return Err(Error::format(
            2,
            format!("unsupported IDX element type 0x{:02x} (only u8)", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::format(3, "IDX file declares zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::format(
            bytes.len() as u64,
            "truncated IDX dimension table",
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if expected == 0 {
        return Err(Error::format(header as u64, "empty IDX payload"));
    }
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated IDX payload: {actual} of {expected} bytes"),
        ));
    }
    if actual > expected {
        return Err(Error::format(
            (header + expected) as u64,
            format!("{} trailing bytes after IDX payload", actual - expected),
        ));
    }
    Ok(IdxArray {
        dims,
        payload: bytes[header..].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load an IDX image file (N×H×W or N×C×H×W, u8) scaled to `[0, 1]`, with an
/// optional IDX label file (N, u8). Every sample is tagged `Train`.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let arr = parse_idx(&read(images)?)?;
    let (n, c, h, w) = match arr.dims.as_slice() {
        [n, h, w] => (*n, 1, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        d => {
            return Err(Error::format(
                3,
                format!("image IDX needs 3 or 4 dimensions, found {}", d.len()),
            ))
        }
    };
    let data = arr.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images_t = Tensor::from_vec(&[n, c, h, w], data)?;
    let truth = match labels {
        None => None,
        Some(p) => {
            let la = parse_idx(&read(p)?)?;
            if la.dims.len() != 1 {
                return Err(Error::format(3, "label IDX must be one-dimensional"));
            }
            if la.dims[0] != n {
                return Err(Error::format(
                    4,
                    format!("label file holds {} labels for {n} images", la.dims[0]),
                ));
            }
            Some(la.payload.iter().map(|&b| b as usize).collect())
        }
    };
    Dataset::new(images_t, truth, vec![Split::Train; n])
}

fn write_idx(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    bytes.extend_from_slice(&[0, 0, IDX_U8, dims.len() as u8]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX extent exceeds u32"))?;
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Quantize a pixel in `[0, 1]` to the byte IDX stores.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write images (and labels, when present and a path is given) as IDX.
pub fn save_idx(dataset: &Dataset, images: &Path, labels: Option<&Path>) -> Result<()> {
    let s = dataset.image_shape();
    let n = dataset.len();
    let payload: Vec<u8> = dataset.images.data().iter().map(|&v| quantize(v)).collect();
    if s.channels == 1 {
        write_idx(images, &[n, s.height, s.width], &payload)?;
    } else {
        write_idx(images, &[n, s.channels, s.height, s.width], &payload)?;
    }
    if let (Some(path), Some(truth)) = (labels, dataset.truth()) {
        let bytes = truth
            .iter()
            .map(|&t| u8::try_from(t).map_err(|_| Error::invalid("label exceeds 255 for IDX")))
            .collect::<Result<Vec<u8>>>()?;
        write_idx(path, &[n], &bytes)?;
    }
    Ok(())
}

/// Comma-separated rows of flattened C×H×W pixels in `[0, 1]`, optionally
/// followed by an integer label column. Blank lines and `#` comments are
/// skipped.
pub fn load_delimited(path: &Path, shape: ImageShape, has_label: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let width = shape.len() + usize::from(has_label);
    let mut data = Vec::new();
    let mut truth = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::format(
                line_offset,
                format!(
                    "line {}: {} fields, expected {width}",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        for f in &fields[..shape.len()] {
            let v: f64 = f.parse().map_err(|_| {
                Error::format(
                    line_offset,
                    format!("line {}: bad number {f:?}", lineno + 1),
                )
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::format(
                    line_offset,
                    format!("line {}: pixel {v} outside [0, 1]", lineno + 1),
                ));
            }
            data.push(v);
        }
        if has_label {
            let f = fields[shape.len()];
            let l: usize = f.parse().map_err(|_| {
                Error::format(line_offset, format!("line {}: bad label {f:?}", lineno + 1))
            })?;
            truth.push(l);
        }
    }
    let n = data.len() / shape.len().max(1);
    if n == 0 {
        return Err(Error::format(0, "no data rows"));
    }
    let images = Tensor::from_vec(&[n, shape.channels, shape.height, shape.width], data)?;
    Dataset::new(images, has_label.then_some(truth), vec![Split::Train; n])
}

// ---------------------------------------------------------------------------
// synthetic benchmark

/// Parameters of the synthetic shape benchmark.
///
/// Every class is a fixed, left-right symmetric arrangement of strokes and
/// blobs (bar, cross, ring, dot pairs, ...), rendered with gaussian falloff
/// of width `stroke_width` pixels. Per sample the pattern may be shifted by
/// up to `jitter_px` pixels and scaled by a factor in
/// `[1 - scale_jitter, 1 + scale_jitter]`; then gaussian pixel noise of
/// standard deviation `noise_sigma` is added and values are clamped to
/// `[0, 1]`. Class structure does not depend on the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub stroke_width: f64,
    pub noise_sigma: f64,
    pub jitter_px: f64,
    pub scale_jitter: f64,
    /// Fraction of every class tagged `Test`.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            per_class: 100,
            height: 16,
            width: 16,
            stroke_width: 1.0,
            noise_sigma: 0.05,
            jitter_px: 0.0,
            scale_jitter: 0.0,
            test_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 classes".into(),
            ));
        }
        if self.per_class == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::Config(
                "synthetic data needs per_class >= 1 and images of at least 4×4".into(),
            ));
        }
        if !(self.stroke_width > 0.0) || !(self.noise_sigma >= 0.0) || !(self.jitter_px >= 0.0) {
            return Err(Error::Config(
                "stroke_width must be positive; noise_sigma and jitter_px non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(
                "scale_jitter and test_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// A stroke from `a` to `b` in pattern coordinates (`[-1, 1]²`, y down).
/// A dot is a stroke with `a == b`; a ring has `radius > 0` around `a`.
#[derive(Debug, Clone, Copy)]
struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

fn seg(a: (f64, f64), b: (f64, f64)) -> Stroke {
    Stroke { a, b, radius: 0.0 }
}

fn dot(p: (f64, f64)) -> Stroke {
    seg(p, p)
}

fn ring(c: (f64, f64), radius: f64) -> Stroke {
    Stroke { a: c, b: c, radius }
}

fn class_pattern(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![seg((-0.9, 0.0), (0.9, 0.0))],
        1 => vec![seg((0.0, -0.9), (0.0, 0.9))],
        2 => vec![seg((-0.9, 0.0), (0.9, 0.0)), seg((0.0, -0.9), (0.0, 0.9))],
        3 => vec![seg((-0.8, -0.8), (0.8, 0.8)), seg((-0.8, 0.8), (0.8, -0.8))],
        4 => vec![ring((0.0, 0.0), 0.75)],
        5 => vec![
            seg((-0.8, -0.8), (0.8, -0.8)),
            seg((-0.8, 0.8), (0.8, 0.8)),
            seg((-0.8, -0.8), (-0.8, 0.8)),
            seg((0.8, -0.8), (0.8, 0.8)),
        ],
        6 => vec![dot((-0.7, 0.0)), dot((0.7, 0.0))],
        7 => vec![dot((0.0, -0.7)), dot((0.0, 0.7))],
        8 => vec![
            seg((-0.9, 0.8), (0.9, 0.8)),
            seg((-0.9, 0.8), (0.0, -0.9)),
            seg((0.9, 0.8), (0.0, -0.9)),
        ],
        9 => vec![seg((-0.9, -0.8), (0.9, -0.8)), seg((0.0, -0.8), (0.0, 0.9))],
        10 => vec![
            dot((-0.7, -0.7)),
            dot((0.7, -0.7)),
            dot((-0.7, 0.7)),
            dot((0.7, 0.7)),
        ],
        11 => vec![
            seg((-0.7, -0.9), (-0.7, 0.9)),
            seg((0.7, -0.9), (0.7, 0.9)),
            seg((-0.7, 0.0), (0.7, 0.0)),
        ],
        12 => vec![
            seg((0.0, -0.9), (0.9, 0.0)),
            seg((0.9, 0.0), (0.0, 0.9)),
            seg((0.0, 0.9), (-0.9, 0.0)),
            seg((-0.9, 0.0), (0.0, -0.9)),
        ],
        13 => vec![dot((0.0, 0.0)), ring((0.0, 0.0), 0.8)],
        _ => {
            // Beyond the hand-made set: mirrored random strokes, keyed by class.
            let mut rng = Rng::new(0x5eed_0000 + class as u64);
            let mut strokes = Vec::new();
            for _ in 0..2 {
                let a = (rng.uniform_range(-0.9, 0.0), rng.uniform_range(-0.9, 0.9));
                let b = (rng.uniform_range(-0.9, 0.9), rng.uniform_range(-0.9, 0.9));
                strokes.push(seg(a, b));
                strokes.push(seg((-a.0, a.1), (-b.0, b.1)));
            }
            strokes
        }
    }
}

fn distance_to(p: (f64, f64), s: &Stroke) -> f64 {
    if s.radius > 0.0 {
        let d = ((p.0 - s.a.0).powi(2) + (p.1 - s.a.1).powi(2)).sqrt();
        return (d - s.radius).abs();
    }
    let (vx, vy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * vx + (p.1 - s.a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (s.a.0 + t * vx, s.a.1 + t * vy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn render(spec: &SynthSpec, strokes: &[Stroke], dx: f64, dy: f64, scale: f64, out: &mut [f64]) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    // pattern coordinate 1.0 maps to this many pixels
    let radius = 0.35 * h.min(w) * scale;
    let (cx, cy) = (w / 2.0 + dx, h / 2.0 + dy);
    let inv = 1.0 / (2.0 * spec.stroke_width * spec.stroke_width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let p = (
                (x as f64 + 0.5 - cx) / radius,
                (y as f64 + 0.5 - cy) / radius,
            );
            let d = strokes
                .iter()
                .map(|s| distance_to(p, s))
                .fold(f64::INFINITY, f64::min)
                * radius;
            out[y * spec.width + x] = (-d * d * inv).exp();
        }
    }
}

/// Generate the synthetic benchmark. Sample `i` belongs to class
/// `i % classes`; within each class the last `test_fraction` of samples are
/// tagged `Test`.
pub fn synth_clusters(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.classes * spec.per_class;
    let hw = spec.height * spec.width;
    let patterns: Vec<Vec<Stroke>> = (0..spec.classes).map(class_pattern).collect();
    let train_per_class = spec.per_class
        - ((spec.per_class as f64 * spec.test_fraction).round() as usize).min(spec.per_class - 1);
    let mut rng = Rng::new(seed);
    let mut data = vec![0.0; n * hw];
    let mut truth = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for (i, img) in data.chunks_exact_mut(hw).enumerate() {
        let class = i % spec.classes;
        let dx = rng.uniform_range(-spec.jitter_px, spec.jitter_px);
        let dy = rng.uniform_range(-spec.jitter_px, spec.jitter_px);
        let scale = rng.uniform_range(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter);
        render(spec, &patterns[class], dx, dy, scale, img);
        for v in img.iter_mut() {
            let noise = rng.normal();
            if spec.noise_sigma > 0.0 {
                *v = (*v + spec.noise_sigma * noise).clamp(0.0, 1.0);
            }
        }
        truth.push(class);
        splits.push(if i / spec.classes < train_per_class {
            Split::Train
        } else {
            Split::Test
        });
    }
    let images = Tensor::from_vec(&[n, 1, spec.height, spec.width], data)?;
    Dataset::new(images, Some(truth), splits)
}

// ---------------------------------------------------------------------------
// class-balanced sampling

/// One epoch of class-balanced batches, drawn with replacement: each draw
/// picks a class uniformly, then a member of that class uniformly. The epoch
/// holds N draws in `ceil(N / batch_size)` batches (the last may be short).
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    members: Vec<Vec<usize>>,
    batch_size: usize,
    remaining: usize,
    rng: Rng,
}

impl ClassBalancedSampler {
    pub fn new(assignment: &LabelAssignment, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let members = assignment.members();
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::ContractViolation(format!(
                "class {empty} is empty; repair the assignment before sampling"
            )));
        }
        Ok(ClassBalancedSampler {
            members,
            batch_size,
            remaining: assignment.len(),
            rng,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.remaining.div_ceil(self.batch_size)
    }
}

impl Iterator for ClassBalancedSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.remaining == 0 {
            return None;
        }
        let size = self.batch_size.min(self.remaining);
        self.remaining -= size;
        let k = self.members.len();
        Some(
            (0..size)
                .map(|_| {
                    let class = &self.members[self.rng.below(k)];
                    class[self.rng.below(class.len())]
                })
                .collect(),
        )
    }
}

pub fn class_balanced_batches(
    assignment: &LabelAssignment,
    batch_size: usize,
    rng: Rng,
) -> Result<ClassBalancedSampler> {
    ClassBalancedSampler::new(assignment, batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_noise_free_classes_are_constant() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            per_class: 5,
            ..SynthSpec::default()
        };
        let ds = synth_clusters(&spec, 1).unwrap();
        let truth = ds.truth().unwrap();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                let d: f64 = ds
                    .image(i)
                    .iter()
                    .zip(ds.image(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                if truth[i] == truth[j] {
                    assert_eq!(d, 0.0);
                } else {
                    assert!(
                        d > 1.0,
                        "classes {} and {} too close: {d}",
                        truth[i],
                        truth[j]
                    );
                }
            }
        }
    }

    #[test]
    fn synth_seeds_change_noise_only() {
        let spec = SynthSpec::default();
        let a = synth_clusters(&spec, 1).unwrap();
        let b = synth_clusters(&spec, 2).unwrap();
        assert_eq!(a.truth(), b.truth());
        assert_eq!(a.splits(), b.splits());
        assert_ne!(a.images(), b.images());
        assert_eq!(a, synth_clusters(&spec, 1).unwrap());
    }

    #[test]
    fn synth_split_is_stratified() {
        let ds = synth_clusters(&SynthSpec::default(), 0).unwrap();
        let test = ds.split(Split::Test).unwrap();
        assert_eq!(test.len(), 200);
        let mut counts = [0; 10];
        test.truth().unwrap().iter().for_each(|&t| counts[t] += 1);
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn sampler_is_deterministic_and_sized() {
        let labels: Vec<usize> = (0..103).map(|i| i % 4).collect();
        let a = LabelAssignment::new(labels, 4, 0).unwrap();
        let s1: Vec<Vec<usize>> = class_balanced_batches(&a, 10, Rng::new(4))
            .unwrap()
            .collect();
        let s2: Vec<Vec<usize>> = class_balanced_batches(&a, 10, Rng::new(4))
            .unwrap()
            .collect();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 11);
        assert_eq!(s1.iter().map(Vec::len).sum::<usize>(), 103);
    }

    #[test]
    fn sampler_single_class() {
        let a = LabelAssignment::new(vec![0; 17], 1, 0).unwrap();
        for batch in class_balanced_batches(&a, 4, Rng::new(1)).unwrap() {
            assert!(batch.iter().all(|&i| i < 17));
        }
    }

    #[test]
    fn sampler_rejects_empty_class() {
        let a = LabelAssignment::new(vec![0, 0, 2], 3, 0).unwrap();
        assert!(matches!(
            class_balanced_batches(&a, 2, Rng::new(0)),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn label_assignment_validates_range() {
        assert!(LabelAssignment::new(vec![0, 3], 3, 0).is_err());
        let a = LabelAssignment::new(vec![0, 2, 2], 3, 1).unwrap();
        assert_eq!(a.counts(), vec![1, 0, 2]);
    }

    #[test]
    fn dataset_rejects_gap_in_truth() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(images, Some(vec![0, 2]), vec![Split::Train; 2]).is_err());
    }
}
