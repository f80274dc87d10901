//! Synthetic multi-domain classification data, the FARD file format and
//! per-domain batch sampling.
//!
//! Every image has three planes. Plane 0 carries the class as a Gaussian
//! blob at a fixed per-class position, identical across domains up to the
//! domain's contrast. Planes 1 and 2 are flat "texture" planes whose level
//! mixes a per-class code with uniform noise according to the domain's
//! correlation `rho`, then gets the domain's per-plane offset and scale.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FarError, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
const BLOB_STD: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Additive offset per image plane.
    pub style_shift: [f32; IMAGE_CHANNELS],
    /// Multiplicative factor per image plane, all > 0.
    pub style_scale: [f32; IMAGE_CHANNELS],
    /// Correlation between the texture level and the class code, in [−1, 1].
    pub rho: f32,
    pub noise_std: f32,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.style_scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(FarError::config(format!(
                "domain {}: style_scale must be positive, got {:?}",
                self.domain_id, self.style_scale
            )));
        }
        if self.style_shift.iter().any(|s| !s.is_finite()) {
            return Err(FarError::config(format!(
                "domain {}: style_shift must be finite",
                self.domain_id
            )));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(FarError::config(format!(
                "domain {}: rho must lie in [-1, 1], got {}",
                self.domain_id, self.rho
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(FarError::config(format!(
                "domain {}: noise_std must be ≥ 0, got {}",
                self.domain_id, self.noise_std
            )));
        }
        Ok(())
    }

    /// Default four-domain benchmark: texture tracks the class in domains
    /// 0–2 (`rho = 0.9`) and is pure noise in domain 3.
    pub fn default_domains() -> Vec<DomainSpec> {
        let d = |id, shift, scale, rho| DomainSpec {
            domain_id: id,
            style_shift: shift,
            style_scale: scale,
            rho,
            noise_std: 0.5,
        };
        vec![
            d(0, [0.0, 0.6, -0.6], [1.0, 1.0, 1.0], 0.9),
            d(1, [0.3, -0.6, 0.6], [0.8, 1.2, 0.8], 0.9),
            d(2, [-0.3, 0.0, 0.3], [1.2, 0.8, 1.2], 0.9),
            d(3, [0.1, 0.9, 0.9], [0.9, 1.4, 1.4], 0.0),
        ]
    }
}

/// Images of one domain, optionally labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    /// `n×3×H×W`
    pub images: Tensor<f32>,
    /// Length `n`, or empty for an unlabelled set.
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub domain_id: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn without_labels(&self) -> LabeledSet {
        LabeledSet {
            labels: Vec::new(),
            ..self.clone()
        }
    }

    /// Copies the listed images into a new `k×3×H×W` tensor.
    pub fn gather_images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let stride: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.len() {
                return Err(FarError::contract(format!("sample {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    fn validate(&self) -> Result<()> {
        if self.images.rank() != 4 {
            return Err(FarError::dim(format!(
                "image tensor must be n×c×h×w, got {:?}",
                self.images.shape()
            )));
        }
        if !self.labels.is_empty() && self.labels.len() != self.len() {
            return Err(FarError::contract(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(FarError::contract(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Blob centre of each class on a ⌈√k⌉-wide grid of image cells.
pub fn class_centers(n_classes: usize, height: usize, width: usize) -> Vec<(f64, f64)> {
    let g = (n_classes as f64).sqrt().ceil() as usize;
    (0..n_classes)
        .map(|k| {
            let (r, c) = (k / g, k % g);
            (
                (r as f64 + 0.5) * height as f64 / g as f64 - 0.5,
                (c as f64 + 0.5) * width as f64 / g as f64 - 0.5,
            )
        })
        .collect()
}

/// Per-class texture code, evenly spaced on [−1, 1].
pub fn class_code(class: usize, n_classes: usize) -> f64 {
    if n_classes <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * class as f64 / (n_classes - 1) as f64
    }
}

/// Draws `n` images of one domain. Labels cycle through the classes so
/// per-class counts differ by at most one. Pure in all arguments.
pub fn generate(
    spec: &DomainSpec,
    n: usize,
    n_classes: usize,
    (height, width): (usize, usize),
    seed: u64,
) -> Result<LabeledSet> {
    spec.validate()?;
    if n_classes < 2 {
        return Err(FarError::config("need at least two classes"));
    }
    if n < n_classes {
        return Err(FarError::config(format!(
            "{n} samples cannot cover {n_classes} classes"
        )));
    }
    if height < 8 || width < 8 {
        return Err(FarError::config(format!(
            "images must be at least 8×8, got {height}×{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, spec.noise_std as f64)
        .map_err(|e| FarError::config(format!("noise distribution: {e}")))?;
    let centers = class_centers(n_classes, height, width);
    let hw = height * width;
    let rho = spec.rho as f64;
    let mix = (1.0 - rho * rho).max(0.0).sqrt();

    let mut data = Vec::with_capacity(n * IMAGE_CHANNELS * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % n_classes;
        labels.push(label);
        let (cy, cx) = centers[label];
        let u: f64 = rng.random_range(-1.0..1.0);
        let level = rho * class_code(label, n_classes) + mix * u;
        for ch in 0..IMAGE_CHANNELS {
            let shift = spec.style_shift[ch] as f64;
            let scale = spec.style_scale[ch] as f64;
            for y in 0..height {
                for x in 0..width {
                    let base = if ch == 0 {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        (-d2 / (2.0 * BLOB_STD * BLOB_STD)).exp()
                    } else {
                        level
                    };
                    let eps = if spec.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    data.push((shift + scale * base + eps) as f32);
                }
            }
        }
    }
    let images = Tensor::new(vec![n, IMAGE_CHANNELS, height, width], data)?;
    Ok(LabeledSet {
        images,
        labels,
        n_classes,
        domain_id: spec.domain_id,
    })
}

/// Benchmark geometry and domain list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub domains: Vec<DomainSpec>,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            domains: DomainSpec::default_domains(),
            n_classes: 4,
            height: 16,
            width: 16,
            train_per_domain: 512,
            test_per_domain: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl BenchmarkConfig {
    /// Seed for one domain/split, derived from the benchmark seed.
    pub fn split_seed(&self, domain_id: usize, split: Split) -> u64 {
        let tag = (domain_id as u64) << 1 | matches!(split, Split::Test) as u64;
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            ^ 0x94D0_49BB_1331_11EB
    }

    pub fn generate_split(&self, spec: &DomainSpec, split: Split) -> Result<LabeledSet> {
        let n = match split {
            Split::Train => self.train_per_domain,
            Split::Test => self.test_per_domain,
        };
        generate(
            spec,
            n,
            self.n_classes,
            (self.height, self.width),
            self.split_seed(spec.domain_id, split),
        )
    }

    pub fn build(&self) -> Result<Benchmark> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for spec in &self.domains {
            train.push(self.generate_split(spec, Split::Train)?);
            test.push(self.generate_split(spec, Split::Test)?);
        }
        Ok(Benchmark { train, test })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Vec<LabeledSet>,
    pub test: Vec<LabeledSet>,
}

/// Source/target split of a domain list.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub sources: Vec<LabeledSet>,
    pub target: LabeledSet,
}

pub fn leave_one_domain_out(domains: &[LabeledSet], held_out: usize) -> Result<DomainSplit> {
    let target = domains
        .iter()
        .find(|d| d.domain_id == held_out)
        .ok_or_else(|| FarError::contract(format!("domain {held_out} is not in the domain list")))?
        .clone();
    let sources = domains
        .iter()
        .filter(|d| d.domain_id != held_out)
        .cloned()
        .collect();
    Ok(DomainSplit { sources, target })
}

/// One block of a [`MultiDomainBatch`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchBlock {
    pub domain_id: usize,
    /// Row offset of the block inside the stacked batch.
    pub start: usize,
    /// Sample indices drawn from the domain's set.
    pub indices: Vec<usize>,
    /// `None` for the unlabelled target block.
    pub labels: Option<Vec<usize>>,
}

/// Equal-size per-domain blocks stacked into one `n×3×H×W` tensor; source
/// blocks first, the unlabelled target block (if any) last.
#[derive(Clone, Debug)]
pub struct MultiDomainBatch {
    pub images: Tensor<f32>,
    pub blocks: Vec<BatchBlock>,
    pub per_domain: usize,
}

impl MultiDomainBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source_blocks(&self) -> impl Iterator<Item = &BatchBlock> {
        self.blocks.iter().filter(|b| b.labels.is_some())
    }

    pub fn target_block(&self) -> Option<&BatchBlock> {
        self.blocks.iter().find(|b| b.labels.is_none())
    }
}

/// Without-replacement per-domain sampler. Each epoch reshuffles every
/// domain with a generator derived from `(seed, epoch)`, so any epoch can
/// be replayed without the history before it.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    seed: u64,
    per_domain: usize,
    sizes: Vec<usize>,
    orders: Vec<Vec<usize>>,
    epoch: u64,
    cursor: usize,
}

impl BatchSampler {
    /// `sizes` lists the sources first, then the target if present.
    pub fn new(sizes: Vec<usize>, per_domain: usize, seed: u64) -> Result<Self> {
        if per_domain < 2 {
            return Err(FarError::contract(format!(
                "batch per domain must be ≥ 2, got {per_domain}"
            )));
        }
        if let Some(&small) = sizes.iter().find(|&&s| s < per_domain) {
            return Err(FarError::contract(format!(
                "domain with {small} samples cannot supply {per_domain} per batch"
            )));
        }
        let mut s = Self {
            seed,
            per_domain,
            sizes,
            orders: Vec::new(),
            epoch: 0,
            cursor: 0,
        };
        s.start_epoch(0);
        Ok(s)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sizes.iter().copied().min().unwrap_or(0) / self.per_domain
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn start_epoch(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ epoch.wrapping_add(1).wrapping_mul(0xD6E8_FEB8_6659_FD93),
        );
        self.orders = self
            .sizes
            .iter()
            .map(|&n| {
                let mut order: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                order
            })
            .collect();
        self.epoch = epoch;
        self.cursor = 0;
    }

    /// Next `per_domain` indices of every domain; rolls into a fresh epoch
    /// once the current one is exhausted.
    pub fn next_indices(&mut self) -> Vec<Vec<usize>> {
        if self.cursor >= self.steps_per_epoch() {
            self.start_epoch(self.epoch + 1);
        }
        let lo = self.cursor * self.per_domain;
        self.cursor += 1;
        self.orders
            .iter()
            .map(|o| o[lo..lo + self.per_domain].to_vec())
            .collect()
    }

    /// Draws one batch. Source labels are copied; the target set's labels
    /// are never read.
    pub fn sample(&mut self, sources: &[LabeledSet], target: Option<&LabeledSet>) -> Result<MultiDomainBatch> {
        let expected = sources.len() + target.is_some() as usize;
        if expected != self.sizes.len() {
            return Err(FarError::contract(format!(
                "sampler built for {} domains, given {expected}",
                self.sizes.len()
            )));
        }
        for (set, &size) in sources.iter().chain(target).zip(&self.sizes) {
            if set.len() != size {
                return Err(FarError::contract(format!(
                    "domain {} has {} samples, sampler expects {size}",
                    set.domain_id,
                    set.len()
                )));
            }
        }
        for s in sources {
            if !s.has_labels() {
                return Err(FarError::contract(format!(
                    "source domain {} has no labels",
                    s.domain_id
                )));
            }
        }
        let picks = self.next_indices();
        let m = self.per_domain;
        let mut data = Vec::new();
        let mut blocks = Vec::new();
        let mut shape = None;
        for (b, (set, idx)) in sources.iter().chain(target).zip(picks).enumerate() {
            let imgs = set.gather_images(&idx)?;
            if *shape.get_or_insert_with(|| imgs.shape()[1..].to_vec()) != imgs.shape()[1..] {
                return Err(FarError::dim("domains disagree on image shape"));
            }
            data.extend_from_slice(imgs.data());
            let labels = (b < sources.len()).then(|| idx.iter().map(|&i| set.labels[i]).collect());
            blocks.push(BatchBlock {
                domain_id: set.domain_id,
                start: b * m,
                indices: idx,
                labels,
            });
        }
        let mut full_shape = vec![blocks.len() * m];
        full_shape.extend(shape.unwrap_or_default());
        Ok(MultiDomainBatch {
            images: Tensor::new(full_shape, data)?,
            blocks,
            per_domain: m,
        })
    }
}

const FARD_MAGIC: &[u8; 4] = b"FARD";
const FARD_VERSION: u32 = 1;
const FARD_HEADER: usize = 34;

/// Serializes a set in the FARD layout (little-endian).
pub fn encode(set: &LabeledSet) -> Result<Vec<u8>> {
    set.validate()?;
    let (n, c, h, w) = set.images.nchw()?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| FarError::contract(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(FARD_HEADER + set.images.len() * 4 + set.labels.len() * 4);
    out.extend_from_slice(FARD_MAGIC);
    out.extend_from_slice(&FARD_VERSION.to_le_bytes());
    out.push(1);
    for (v, what) in [
        (n, "n"),
        (c, "channels"),
        (h, "height"),
        (w, "width"),
        (set.n_classes, "n_classes"),
        (set.domain_id, "domain_id"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    out.push(set.has_labels() as u8);
    for v in set.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &set.labels {
        out.extend_from_slice(&to_u32(y, "label")?.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    little: bool,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| {
            FarError::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what} at byte {}", self.pos),
            )
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take::<4>(what)?;
        Ok(if self.little {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        })
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take::<4>(what)?;
        Ok(if self.little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        })
    }
}

/// Parses a FARD buffer. The endian flag at byte 8 selects little (1) or
/// big (0) endian for every multi-byte field.
pub fn decode(bytes: &[u8]) -> Result<LabeledSet> {
    if bytes.len() < 4 || &bytes[..4] != FARD_MAGIC {
        return Err(FarError::format(0, "bad magic, expected \"FARD\""));
    }
    let flag = *bytes
        .get(8)
        .ok_or_else(|| FarError::format(bytes.len() as u64, "truncated header"))?;
    let little = match flag {
        1 => true,
        0 => false,
        f => return Err(FarError::format(8, format!("unknown endian flag {f}"))),
    };
    let mut r = Reader {
        bytes,
        pos: 4,
        little,
    };
    let version = r.u32("version")?;
    if version != FARD_VERSION {
        return Err(FarError::format(4, format!("unsupported version {version}")));
    }
    r.u8("endian flag")?;
    let n = r.u32("n")? as usize;
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n_classes = r.u32("n_classes")? as usize;
    let domain_id = r.u32("domain_id")? as usize;
    let has_labels = match r.u8("has_labels")? {
        0 => false,
        1 => true,
        v => return Err(FarError::format(33, format!("has_labels must be 0 or 1, got {v}"))),
    };
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| FarError::format(9, "image dimensions overflow"))?;
    let needed = FARD_HEADER as u64 + count as u64 * 4 + if has_labels { n as u64 * 4 } else { 0 };
    if (bytes.len() as u64) < needed {
        return Err(FarError::format(
            bytes.len() as u64,
            format!("truncated payload: {} bytes, need {needed}", bytes.len()),
        ));
    }
    if (bytes.len() as u64) > needed {
        return Err(FarError::format(needed, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f32("pixel")?);
    }
    let mut labels = Vec::new();
    if has_labels {
        for _ in 0..n {
            let at = r.pos;
            let y = r.u32("label")? as usize;
            if y >= n_classes {
                return Err(FarError::format(
                    at as u64,
                    format!("label {y} out of range for {n_classes} classes"),
                ));
            }
            labels.push(y);
        }
    }
    Ok(LabeledSet {
        images: Tensor::new(vec![n, c, h, w], data)?,
        labels,
        n_classes,
        domain_id,
    })
}

pub fn save(set: &LabeledSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(set)?;
    fs::write(path.as_ref(), bytes).map_err(|e| FarError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<LabeledSet> {
    let bytes = fs::read(path.as_ref()).map_err(|e| FarError::io(path.as_ref(), e))?;
    decode(&bytes)
}
