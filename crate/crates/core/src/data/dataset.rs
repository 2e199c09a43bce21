use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::substream;

const CACHE_MAGIC: &[u8; 8] = b"FDNASDS\0";
const CACHE_VERSION: u32 = 1;
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 4 {
            return Err(Error::shape("dataset", format!("features must be [N, C, H, W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::shape("dataset", format!("{} feature rows, {} labels", shape[0], labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset { features, labels, num_classes })
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.features.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        let n = self.sample_len();
        &self.features.data()[index * n..(index + 1) * n]
    }

    /// Stacks the given samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.sample_shape();
        let x = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Writes the versioned binary cache: magic, version, `N C H W`, class
    /// count, f32 features, u32 labels (all little-endian).
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let [c, h, w] = self.sample_shape();
        let mut out = Vec::with_capacity(32 + self.features.numel() * 4 + self.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for d in [self.len(), c, h, w, self.num_classes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.features.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&(*l as u32).to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0, path };
        if r.take(8)? != CACHE_MAGIC {
            return Err(r.error(0, "not a dataset cache (bad magic)"));
        }
        let version = r.u32_le()?;
        if version != CACHE_VERSION {
            return Err(r.error(8, format!("unsupported cache version {version}")));
        }
        let dims: Vec<usize> = (0..5).map(|_| r.u32_le().map(|v| v as usize)).collect::<Result<_>>()?;
        let (n, c, h, w, classes) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let numel = n * c * h * w;
        let data = (0..numel).map(|_| r.f32_le().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| r.u32_le().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after labels"));
        }
        Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn error(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.into(), offset: offset as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(self.pos, format!("truncated: needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32_le(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads an IDX image/label file pair (big-endian headers, unsigned bytes).
/// Pixels are scaled to `[0, 1]`.
pub fn load_raw_images(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let mut r = ByteReader { bytes: &img, pos: 0, path: images_path };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES {
        return Err(r.error(0, format!("bad image magic {magic:#010x}")));
    }
    let n = r.u32_be()? as usize;
    let h = r.u32_be()? as usize;
    let w = r.u32_be()? as usize;
    let pixels = r.take(n * h * w)?;
    if r.pos != img.len() {
        return Err(r.error(r.pos, "trailing bytes after pixel data"));
    }
    let data: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();

    let mut r = ByteReader { bytes: &lab, pos: 0, path: labels_path };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS {
        return Err(r.error(0, format!("bad label magic {magic:#010x}")));
    }
    let count = r.u32_be()? as usize;
    if count != n {
        return Err(r.error(4, format!("label count {count} does not match image count {n}")));
    }
    let raw = r.take(count)?;
    if r.pos != lab.len() {
        return Err(r.error(r.pos, "trailing bytes after labels"));
    }
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, classes)
}

/// Writes a single-channel dataset as an IDX pair, rounding pixels to bytes.
pub fn save_raw_images(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = data.sample_shape();
    if c != 1 {
        return Err(Error::Invalid(format!("raw image files hold one channel, dataset has {c}")));
    }
    let mut img = Vec::with_capacity(16 + data.features.numel());
    for v in [IDX_IMAGES, data.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.features.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS, data.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &data.labels {
        let b = u8::try_from(l).map_err(|_| Error::Invalid(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Settings of the procedural image generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// Scales the per-sample noise and gain jitter; 0 gives exact templates.
    pub difficulty: f64,
}

/// One template per class: two Gaussian blobs plus a sinusoidal pattern with
/// a class-specific frequency, per channel.
pub fn class_templates(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    if spec.size < 8 {
        return Err(Error::Invalid(format!("images must be at least 8x8, got {0}x{0}", spec.size)));
    }
    if spec.num_classes == 0 || spec.channels == 0 {
        return Err(Error::Invalid("need at least one class and one channel".into()));
    }
    let s = spec.size as f64;
    let mut out = Vec::with_capacity(spec.num_classes);
    for class in 0..spec.num_classes {
        let mut rng = substream(seed, "templates", &[class as u64]);
        let mut t = Vec::with_capacity(spec.channels * spec.size * spec.size);
        for _ in 0..spec.channels {
            let blobs: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85) * s,
                        rng.random_range(0.15..0.85) * s,
                        rng.random_range(0.1..0.25) * s,
                    )
                })
                .collect();
            let fx = rng.random_range(0.5..3.0);
            let fy = rng.random_range(0.5..3.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let (xf, yf) = (x as f64, y as f64);
                    let blob: f64 = blobs
                        .iter()
                        .map(|(cx, cy, r)| (-((xf - cx).powi(2) + (yf - cy).powi(2)) / (2.0 * r * r)).exp())
                        .sum();
                    let wave = (std::f64::consts::TAU * (fx * xf + fy * yf) / s + phase).sin();
                    t.push(0.6 * blob + 0.4 * wave);
                }
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Class-conditional procedural images, deterministic in `seed`. Samples are
/// class-major and values are rounded to f32 precision so the binary cache
/// round-trips exactly.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.per_class == 0 {
        return Err(Error::Invalid("per_class must be at least 1".into()));
    }
    if !(spec.difficulty >= 0.0) {
        return Err(Error::Invalid(format!("difficulty must be non-negative, got {}", spec.difficulty)));
    }
    let templates = class_templates(spec, seed)?;
    let len = templates[0].len();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = substream(seed, "samples", &[]);
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for (class, t) in templates.iter().enumerate() {
        for _ in 0..spec.per_class {
            let gain = 1.0 + spec.difficulty * rng.random_range(-0.5..0.5);
            data.extend(t.iter().map(|v| (gain * v + spec.difficulty * noise.sample(&mut rng)) as f32 as f64));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, spec.channels, spec.size, spec.size], data)?, labels, spec.num_classes)
}

/// Accuracy of assigning each sample to the nearest template (squared
/// Euclidean distance, lowest class on ties).
pub fn nearest_template_accuracy(data: &Dataset, templates: &[Vec<f64>]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let x = data.sample(i);
            let dist = |t: &Vec<f64>| x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut best = 0;
            for c in 1..templates.len() {
                if dist(&templates[c]) < dist(&templates[best]) {
                    best = c;
                }
            }
            best == data.labels[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(difficulty: f64) -> SyntheticSpec {
        SyntheticSpec { num_classes: 10, per_class: 20, channels: 1, size: 8, difficulty }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = gen_synthetic(&spec(0.5), 7).unwrap();
        let b = gen_synthetic(&spec(0.5), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(&spec(0.5), 8).unwrap());
        assert_eq!(a.label_histogram(&(0..a.len()).collect::<Vec<_>>()), vec![20; 10]);
    }

    #[test]
    fn too_small_images_rejected() {
        let mut s = spec(0.0);
        s.size = 6;
        assert!(gen_synthetic(&s, 1).is_err());
        s.size = 8;
        s.per_class = 0;
        assert!(gen_synthetic(&s, 1).is_err());
    }

    #[test]
    fn noiseless_draw_is_template_separable() {
        let s = spec(0.0);
        let data = gen_synthetic(&s, 3).unwrap();
        let templates = class_templates(&s, 3).unwrap();
        assert_eq!(nearest_template_accuracy(&data, &templates), 1.0);
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(&SyntheticSpec { channels: 2, ..spec(0.3) }, 4).unwrap();
        let path = dir.path().join("data.bin");
        data.save_cache(&path).unwrap();
        assert_eq!(Dataset::load_cache(&path).unwrap(), data);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::load_cache(&path), Err(Error::Format { .. })));
    }

    fn write_idx(dir: &Path, n_images: u32, n_labels: u32, pixels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES, n_images, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [IDX_LABELS, n_labels] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend((0..n_labels).map(|i| (i % 3) as u8));
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn raw_images_roundtrip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 0, 0, 0, 255, 17, 128, 3, 9, 200, 1, 77];
        let (ip, lp) = write_idx(dir.path(), 3, 3, &pixels);
        let data = load_raw_images(&ip, &lp).unwrap();
        assert!(data.sample(0).iter().all(|v| *v == 0.0));
        let (ip2, lp2) = (dir.path().join("img2.idx"), dir.path().join("lab2.idx"));
        save_raw_images(&data, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
        assert_eq!(fs::read(&lp).unwrap(), fs::read(&lp2).unwrap());
    }

    #[test]
    fn raw_images_reject_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), 3, 2, &[0; 12]);
        match load_raw_images(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected count mismatch, got {other:?}"),
        }
        let (ip, lp) = write_idx(dir.path(), 3, 3, &[0; 10]);
        match load_raw_images(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected truncation, got {other:?}"),
        }
    }
}
