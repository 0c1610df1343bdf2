//! Dataset ingestion, the synthetic blob-image generator and deterministic
//! mini-batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images normalized to `[0, 1]` plus optional ground-truth labels, which
/// are only ever used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor4<f32>,
    pub labels: Option<Vec<usize>>,
    /// Number of categories.
    pub k: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor4<f32>, labels: Option<Vec<usize>>, k: usize) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.shape().n {
                return config_err(format!("{} labels for {} images", l.len(), images.shape().n));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= k) {
                return config_err(format!("label {bad} out of range for k = {k}"));
            }
        }
        Ok(Self { name: name.into(), images, labels, k })
    }

    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(c, h, w)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            name: self.name.clone(),
            images: self.images.slice_batch(0, n),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            k: self.k,
        }
    }

    /// Pixel matrix, one flattened image per row.
    pub fn pixel_matrix(&self) -> crate::Matrix<f32> {
        let s = self.images.shape();
        crate::Matrix::from_vec(s.n, s.sample_len(), self.images.data().to_vec()).expect("tensor length is n·c·h·w")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated file: need {n} bytes of {what}, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32("magic number")?;
        if m != expected {
            self.pos -= 4;
            return self.fail(format!("bad magic 0x{m:08x}, expected 0x{expected:08x}"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

/// Parses an IDX image file (`u8`, three dimensions) into `(n, 1, h, w)`
/// with pixels scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor4<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let h = r.u32("row count")? as usize;
    let w = r.u32("column count")? as usize;
    let payload = r.take(n * h * w, "pixel data")?;
    r.finish()?;
    let data = payload.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor4::from_vec(Shape4::new(n, 1, h, w), data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let n = r.u32("label count")? as usize;
    let labels = r.take(n, "label data")?.iter().map(|&l| l as usize).collect();
    r.finish()?;
    Ok(labels)
}

/// Inverse of [`parse_idx_images`] for single-channel images.
pub fn encode_idx_images(images: &Tensor4<f32>) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.c != 1 {
        return config_err(format!("IDX images are single-channel, got {} channels", s.c));
    }
    let mut out = Vec::with_capacity(16 + s.len());
    for v in [IDX_IMAGES_MAGIC, s.n as u32, s.h as u32, s.w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let Ok(b) = u8::try_from(l) else {
            return config_err(format!("label {l} does not fit in a byte"));
        };
        out.push(b);
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

/// Loads an image/label IDX pair. `k` is taken as `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_file(images)?)?;
    let y = parse_idx_labels(&read_file(labels)?)?;
    if x.shape().n != y.len() {
        // Point at the count field of the label header.
        return Err(Error::Parse {
            offset: 4,
            message: format!("{} labels in {} but {} images in {}", y.len(), labels.display(), x.shape().n, images.display()),
        });
    }
    let k = y.iter().max().map_or(0, |&m| m + 1);
    let name = images.file_stem().map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, x, Some(y), k)
}

pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    std::fs::write(images, encode_idx_images(&dataset.images)?)?;
    let Some(l) = &dataset.labels else {
        return config_err("dataset has no labels to write");
    };
    std::fs::write(labels, encode_idx_labels(l)?)?;
    Ok(())
}

/// Loads the MNIST train and test splits from a directory holding the four
/// standard IDX files and concatenates them (train first).
pub fn load_mnist_dir(dir: &Path, include_train: bool, include_test: bool) -> Result<Dataset> {
    let mut parts = Vec::new();
    if include_train {
        parts.push(load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?);
    }
    if include_test {
        parts.push(load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?);
    }
    let Some(first) = parts.first() else {
        return config_err("no MNIST split selected");
    };
    let shape = first.images.shape();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in &parts {
        if p.images.shape().with_batch(0) != shape.with_batch(0) {
            return config_err("MNIST splits have different image sizes");
        }
        data.extend_from_slice(p.images.data());
        labels.extend(p.labels.iter().flatten());
    }
    let n = labels.len();
    let name = match (include_train, include_test) {
        (true, true) => "mnist",
        (true, false) => "mnist-train",
        _ => "mnist-test",
    };
    Dataset::new(name, Tensor4::from_vec(shape.with_batch(n), data)?, Some(labels), 10)
}

/// Recipe for the synthetic blobs-as-images dataset.
///
/// Cluster `j` is an axis-aligned Gaussian bump of width `sigma[j]` centered
/// at `centers[j]` (pixel coordinates, `(row, col)`). Each sample shifts its
/// bump by a uniform jitter in `[-jitter, jitter]` per axis, scales it by a
/// uniform amplitude in `[1 - amp_spread, 1]` and adds Gaussian pixel noise
/// before clamping to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub side: usize,
    pub per_cluster: usize,
    pub centers: Vec<(f64, f64)>,
    pub sigma: Vec<(f64, f64)>,
    pub jitter: f64,
    pub amp_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            side: 16,
            per_cluster: 500,
            centers: vec![(5.0, 5.0), (5.0, 10.0), (10.0, 5.0), (10.0, 10.0)],
            sigma: vec![(1.6, 1.6), (1.2, 2.4), (2.4, 1.2), (1.8, 1.8)],
            jitter: 2.5,
            amp_spread: 0.4,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Everything needed to re-render one synthetic sample bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecipe {
    pub cluster: usize,
    pub shift: (f64, f64),
    pub amplitude: f64,
    pub noise_seed: u64,
}

impl SyntheticSpec {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() || self.centers.len() != self.sigma.len() {
            return config_err("synthetic spec needs one sigma per blob center and at least one blob");
        }
        if self.side == 0 || self.per_cluster == 0 {
            return config_err("synthetic spec needs a positive image side and samples per cluster");
        }
        if !(self.jitter >= 0.0 && self.noise >= 0.0 && (0.0..1.0).contains(&self.amp_spread)) {
            return config_err("synthetic jitter and noise must be non-negative, amp_spread in [0, 1)");
        }
        let hi = (self.side - 1) as f64;
        for (j, (&(r, c), &(sr, sc))) in self.centers.iter().zip(&self.sigma).enumerate() {
            if !(sr > 0.0 && sc > 0.0) {
                return config_err(format!("blob {j}: sigma must be positive"));
            }
            for v in [r, c] {
                if v - self.jitter < 0.0 || v + self.jitter > hi {
                    return config_err(format!(
                        "blob {j} at ({r}, {c}) with jitter {} leaves the {}x{} image",
                        self.jitter, self.side, self.side
                    ));
                }
            }
        }
        Ok(())
    }

    /// Draws the per-sample recipes, cluster-major (`per_cluster` samples of
    /// cluster 0, then cluster 1, ...).
    pub fn recipes(&self) -> Vec<SampleRecipe> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.k() * self.per_cluster);
        for cluster in 0..self.k() {
            for _ in 0..self.per_cluster {
                let mut jit = || if self.jitter > 0.0 { rng.random_range(-self.jitter..=self.jitter) } else { 0.0 };
                let shift = (jit(), jit());
                let amplitude = if self.amp_spread > 0.0 { rng.random_range(1.0 - self.amp_spread..=1.0) } else { 1.0 };
                out.push(SampleRecipe { cluster, shift, amplitude, noise_seed: rng.random() });
            }
        }
        out
    }

    /// Renders one `side × side` image from its recipe.
    pub fn render(&self, recipe: &SampleRecipe) -> Vec<f32> {
        let (r0, c0) = self.centers[recipe.cluster];
        let (sr, sc) = self.sigma[recipe.cluster];
        let (r0, c0) = (r0 + recipe.shift.0, c0 + recipe.shift.1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(recipe.noise_seed);
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let mut img = Vec::with_capacity(self.side * self.side);
        for r in 0..self.side {
            for c in 0..self.side {
                let dr = (r as f64 - r0) / sr;
                let dc = (c as f64 - c0) / sc;
                let mut v = recipe.amplitude * (-0.5 * (dr * dr + dc * dc)).exp();
                if self.noise > 0.0 {
                    v += normal.sample(&mut noise_rng);
                }
                img.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        img
    }
}

/// Generates the synthetic dataset together with the recipes that produced
/// each sample.
pub fn make_synthetic_with_recipes(spec: &SyntheticSpec) -> Result<(Dataset, Vec<SampleRecipe>)> {
    spec.validate()?;
    let recipes = spec.recipes();
    let mut data = Vec::with_capacity(recipes.len() * spec.side * spec.side);
    for r in &recipes {
        data.extend(spec.render(r));
    }
    let images = Tensor4::from_vec(Shape4::new(recipes.len(), 1, spec.side, spec.side), data)?;
    let labels = recipes.iter().map(|r| r.cluster).collect();
    Ok((Dataset::new("synthetic", images, Some(labels), spec.k())?, recipes))
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    make_synthetic_with_recipes(spec).map(|(d, _)| d)
}

/// Shuffled mini-batches of `0..n`. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
