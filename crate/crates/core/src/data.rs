//! Deterministic desk-scale datasets: procedural shapes, IDX files and
//! noisy/clean pairs for denoising.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Target;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: usize = 10;
/// Std of the per-pixel noise baked into classification images.
pub const SHAPE_PIXEL_NOISE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticShapes,
    IdxPair,
    DenoisePatches,
}

/// What the targets of a dataset mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    /// Targets are the noise residual `noisy − clean`; σ is on the 0–255 scale.
    Denoising { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Labels(Vec<usize>),
    Dense(Tensor<T>),
}

/// One split: inputs `[N, C, H, W]` and matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub inputs: Tensor<T>,
    pub targets: Targets<T>,
}

impl<T: Scalar> Split<T> {
    pub fn new(inputs: Tensor<T>, targets: Targets<T>) -> Result<Self> {
        let n = inputs.dims4()?[0];
        let m = match &targets {
            Targets::Labels(l) => l.len(),
            Targets::Dense(t) => {
                if t.shape() != inputs.shape() {
                    return Err(Error::config("dense targets must match the input shape"));
                }
                n
            }
        };
        if m != n {
            return Err(Error::config(format!("{n} inputs but {m} targets")));
        }
        Ok(Split { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Target<T>)> {
        if indices.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let per: usize = self.sample_shape().iter().product();
        let gather = |src: &[T]| {
            let mut out = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                out.extend_from_slice(&src[i * per..(i + 1) * per]);
            }
            out
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::config(format!("sample index {bad} out of range")));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let x = Tensor::new(shape.clone(), gather(self.inputs.data()))?;
        let y = match &self.targets {
            Targets::Labels(l) => Target::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Dense(t) => Target::Dense(Tensor::new(shape, gather(t.data()))?),
        };
        Ok((x, y))
    }

    /// The first `m` samples (or all of them when fewer exist).
    pub fn head(&self, m: usize) -> Result<(Tensor<T>, Target<T>)> {
        let idx: Vec<usize> = (0..m.min(self.len())).collect();
        self.batch(&idx)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Dense(_) => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Split<U> {
        Split {
            inputs: self.inputs.cast(),
            targets: match &self.targets {
                Targets::Labels(l) => Targets::Labels(l.clone()),
                Targets::Dense(t) => Targets::Dense(t.cast()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub kind: DatasetKind,
    pub task: Task,
    pub seed: u64,
    pub train: Split<T>,
    pub test: Split<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn sample_shape(&self) -> [usize; 3] {
        self.train.sample_shape()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { kind: self.kind, task: self.task, seed: self.seed, train: self.train.cast(), test: self.test.cast() }
    }
}

/// A seeded permutation of `0..n`; one independent stream per epoch.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Splits `order` into consecutive batches of at most `batch_size`.
/// A trailing batch of one sample is merged into the previous batch so
/// train-mode batch norm always sees at least two samples.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

fn sample_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split);
    rng.set_stream(index as u64);
    rng
}

/// Renders one `size × size` grayscale image of `class` into `[0, 1]`.
fn render_shape(class: usize, size: usize, rng: &mut ChaCha8Rng, pixel_noise: f64) -> Vec<f64> {
    let s = size as f64;
    let bg: f64 = rng.random_range(0.0..0.5);
    let fg = (bg + rng.random_range(0.2..0.5)).min(1.0);
    let cx = s / 2.0 - 0.5 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 - 0.5 + rng.random_range(-0.12..0.12) * s;
    let r = rng.random_range(0.22..0.36) * s;
    let period = rng.random_range(3.0..5.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let line = (s / 16.0).max(1.0) * 1.2;
    let wave = |t: f64| (std::f64::consts::TAU * t / period + phase).sin() > 0.0;
    let noise = Normal::new(0.0, pixel_noise.max(0.0)).expect("finite std");
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let box_d = dx.abs().max(dy.abs());
            let on = match class {
                0 => d < r,
                1 => (d - r).abs() < line,
                2 => box_d < r,
                3 => (box_d - r).abs() < line,
                4 => wave(y as f64),
                5 => wave(x as f64),
                6 => wave((x + y) as f64 / std::f64::consts::SQRT_2),
                7 => (dx.abs() < line && dy.abs() < r) || (dy.abs() < line && dx.abs() < r),
                8 => (dx.abs() - dy.abs()).abs() < line && box_d < r,
                _ => {
                    let p = period.round();
                    (((x as f64 + phase) / p).floor() as i64 + ((y as f64 + phase) / p).floor() as i64) % 2 == 0
                }
            };
            let mut v = if on { fg } else { bg };
            if pixel_noise > 0.0 {
                v += noise.sample(rng);
            }
            img.push(v.clamp(0.0, 1.0));
        }
    }
    img
}

fn shapes_split<T: Scalar>(n: usize, size: usize, seed: u64, split: u64, pixel_noise: f64) -> Result<Split<T>> {
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES;
        let mut rng = sample_rng(seed, split, i);
        data.extend(render_shape(class, size, &mut rng, pixel_noise).into_iter().map(T::of));
        labels.push(class);
    }
    Split::new(Tensor::new(vec![n, 1, size, size], data)?, Targets::Labels(labels))
}

/// Ten procedural classes (discs, rings, squares, frames, three stripe
/// orientations, plus, X, checkerboard) with random position, size,
/// contrast and pixel noise. Labels cycle through the classes, so each
/// split is balanced to within one sample per class.
pub fn gen_shapes_dataset<T: Scalar>(n_train: usize, n_test: usize, image_size: usize, seed: u64) -> Result<Dataset<T>> {
    if n_train == 0 || n_test == 0 || image_size < 4 {
        return Err(Error::config("shapes dataset needs n_train, n_test > 0 and image_size >= 4"));
    }
    Ok(Dataset {
        kind: DatasetKind::SyntheticShapes,
        task: Task::Classification { classes: SHAPE_CLASSES },
        seed,
        train: shapes_split(n_train, image_size, seed, 0, SHAPE_PIXEL_NOISE)?,
        test: shapes_split(n_test, image_size, seed, 1, SHAPE_PIXEL_NOISE)?,
    })
}

/// Noise-free shape renderings, used as clean images for denoising.
pub fn gen_clean_patches<T: Scalar>(n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    if n_train == 0 || n_test == 0 || size < 4 {
        return Err(Error::config("patch dataset needs n_train, n_test > 0 and size >= 4"));
    }
    Ok(Dataset {
        kind: DatasetKind::DenoisePatches,
        task: Task::Classification { classes: SHAPE_CLASSES },
        seed,
        train: shapes_split(n_train, size, seed, 2, 0.0)?,
        test: shapes_split(n_test, size, seed, 3, 0.0)?,
    })
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(format!("{what}: truncated IDX header")))
}

/// Parses an IDX image file (`0x00000803`, u8 pixels) into `[N, 1, rows, cols]` in `[0, 1]`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let magic = read_be_u32(bytes, 0, "images")?;
    if magic != 0x0000_0803 {
        return Err(Error::format(format!("images: bad IDX magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, "images")? as usize;
    let rows = read_be_u32(bytes, 8, "images")? as usize;
    let cols = read_be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    if n == 0 || rows == 0 || cols == 0 || body.len() != n * rows * cols {
        return Err(Error::format(format!(
            "images: header declares {n}x{rows}x{cols} but body has {} bytes",
            body.len()
        )));
    }
    Tensor::new(vec![n, 1, rows, cols], body.iter().map(|&b| T::of(b as f64 / 255.0)).collect())
}

/// Parses an IDX label file (`0x00000801`, u8 labels).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, "labels")?;
    if magic != 0x0000_0801 {
        return Err(Error::format(format!("labels: bad IDX magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(format!("labels: header declares {n} labels but body has {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads one IDX image/label pair as a labelled split.
pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Split<T>> {
    let images = parse_idx_images::<T>(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(format!("{} images but {} labels", images.shape()[0], labels.len())));
    }
    Split::new(images, Targets::Labels(labels))
}

/// Builds a dataset from IDX train and test pairs.
pub fn load_idx_dataset<T: Scalar>(train: (&Path, &Path), test: (&Path, &Path)) -> Result<Dataset<T>> {
    let train = load_idx::<T>(train.0, train.1)?;
    let test = load_idx::<T>(test.0, test.1)?;
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::format("train and test images differ in size"));
    }
    let classes = train.labels().into_iter().chain(test.labels()).flatten().max().map_or(1, |m| m + 1);
    Ok(Dataset { kind: DatasetKind::IdxPair, task: Task::Classification { classes }, seed: 0, train, test })
}

fn noisy_split<T: Scalar>(clean: &Split<T>, sigma_unit: f64, seed: u64, split: u64) -> Result<Split<T>> {
    let per: usize = clean.sample_shape().iter().product();
    let normal = Normal::new(0.0, sigma_unit).map_err(|e| Error::config(e.to_string()))?;
    let mut noisy = clean.inputs.clone();
    let mut residual = Vec::with_capacity(noisy.len());
    for (i, img) in noisy.data_mut().chunks_mut(per).enumerate() {
        let mut rng = sample_rng(seed, 16 + split, i);
        for v in img {
            let n = if sigma_unit > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            *v += T::of(n);
            residual.push(T::of(n));
        }
    }
    let targets = Tensor::new(noisy.shape().to_vec(), residual)?;
    Split::new(noisy, Targets::Dense(targets))
}

/// Adds Gaussian noise of std `sigma / 255` to every clean image.
///
/// Inputs become the noisy images (not clipped); targets become the noise
/// residual so a network can be trained to predict it. The noise of
/// sample `i` depends only on `(seed, split, i)`.
pub fn make_noisy_pairs<T: Scalar>(clean: &Dataset<T>, sigma: f64, seed: u64) -> Result<Dataset<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("noise level must be a finite value >= 0, got {sigma}")));
    }
    let s = sigma / 255.0;
    Ok(Dataset {
        kind: DatasetKind::DenoisePatches,
        task: Task::Denoising { sigma },
        seed,
        train: noisy_split(&clean.train, s, seed, 0)?,
        test: noisy_split(&clean.test, s, seed, 1)?,
    })
}

/// Recovers the clean images of a denoising split (`noisy − residual`).
pub fn clean_images<T: Scalar>(split: &Split<T>) -> Result<Tensor<T>> {
    match &split.targets {
        Targets::Dense(r) => {
            let data = split.inputs.data().iter().zip(r.data()).map(|(&x, &n)| x - n).collect();
            Tensor::new(split.inputs.shape().to_vec(), data)
        }
        Targets::Labels(_) => Err(Error::config("split has no residual targets")),
    }
}

/// Textual dataset descriptor, e.g. `shapes:n_train=2000,size=16,seed=1`.
///
/// ```text
/// shapes[:n_train=N,n_test=N,size=S,seed=K]
/// denoise[:n_train=N,n_test=N,size=S,sigma=50,seed=K]
/// idx:train_images=P,train_labels=P,test_images=P,test_labels=P
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Shapes { n_train: usize, n_test: usize, size: usize, seed: u64 },
    Denoise { n_train: usize, n_test: usize, size: usize, sigma: f64, seed: u64 },
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

impl DataSpec {
    pub fn load<T: Scalar>(&self) -> Result<Dataset<T>> {
        match self {
            DataSpec::Shapes { n_train, n_test, size, seed } => gen_shapes_dataset(*n_train, *n_test, *size, *seed),
            DataSpec::Denoise { n_train, n_test, size, sigma, seed } => {
                let clean = gen_clean_patches::<T>(*n_train, *n_test, *size, *seed)?;
                make_noisy_pairs(&clean, *sigma, *seed)
            }
            DataSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                load_idx_dataset((train_images, train_labels), (test_images, test_labels))
            }
        }
    }
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::config(format!("data option `{part}` is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| kv.remove(key);
        fn num<N: FromStr>(v: Option<String>, key: &str, default: N) -> Result<N> {
            v.map_or(Ok(default), |v| v.parse().map_err(|_| Error::config(format!("bad value for `{key}`: {v}"))))
        }
        let spec = match kind.trim() {
            "shapes" => DataSpec::Shapes {
                n_train: num(take("n_train"), "n_train", 2000)?,
                n_test: num(take("n_test"), "n_test", 500)?,
                size: num(take("size"), "size", 16)?,
                seed: num(take("seed"), "seed", 0)?,
            },
            "denoise" => DataSpec::Denoise {
                n_train: num(take("n_train"), "n_train", 256)?,
                n_test: num(take("n_test"), "n_test", 64)?,
                size: num(take("size"), "size", 16)?,
                sigma: num(take("sigma"), "sigma", 50.0)?,
                seed: num(take("seed"), "seed", 0)?,
            },
            "idx" => {
                let mut path = |key: &str| {
                    take(key).map(PathBuf::from).ok_or_else(|| Error::config(format!("idx data needs `{key}`")))
                };
                DataSpec::Idx {
                    train_images: path("train_images")?,
                    train_labels: path("train_labels")?,
                    test_images: path("test_images")?,
                    test_labels: path("test_labels")?,
                }
            }
            other => return Err(Error::config(format!("unknown data kind `{other}` (shapes, denoise, idx)"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(format!("unknown data option `{k}` for `{}`", kind.trim())));
        }
        Ok(spec)
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Shapes { n_train, n_test, size, seed } => {
                write!(f, "shapes:n_train={n_train},n_test={n_test},size={size},seed={seed}")
            }
            DataSpec::Denoise { n_train, n_test, size, sigma, seed } => {
                write!(f, "denoise:n_train={n_train},n_test={n_test},size={size},sigma={sigma},seed={seed}")
            }
            DataSpec::Idx { train_images, train_labels, test_images, test_labels } => write!(
                f,
                "idx:train_images={},train_labels={},test_images={},test_labels={}",
                train_images.display(),
                train_labels.display(),
                test_images.display(),
                test_labels.display()
            ),
        }
    }
}
