//! Synthetic clean images, the three degradations, normalization and batching.
//!
//! Every image is a pure function of `(base_seed, index)`, so corpora can be
//! generated in parallel without affecting their contents.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Derain,
    Deblur,
    Denoise,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Derain, Task::Deblur, Task::Denoise];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Derain => "derain",
            Task::Deblur => "deblur",
            Task::Denoise => "denoise",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derain" => Ok(Task::Derain),
            "deblur" => Ok(Task::Deblur),
            "denoise" => Ok(Task::Denoise),
            other => config_err(format!(
                "unknown task `{other}` (expected derain, deblur or denoise)"
            )),
        }
    }
}

/// Degradation strengths. Zero strength is an exact identity for every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Degradation {
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Streaks per pixel.
    pub rain_density: f64,
    /// Streak direction in degrees away from vertical.
    pub rain_angle: f64,
    /// Streak length in pixels.
    pub rain_length: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            blur_sigma: 1.0,
            rain_density: 0.01,
            rain_angle: 15.0,
            rain_length: 8.0,
        }
    }
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("noise_sigma", self.noise_sigma),
            ("blur_sigma", self.blur_sigma),
            ("rain_density", self.rain_density),
            ("rain_length", self.rain_length),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return config_err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !self.rain_angle.is_finite() {
            return config_err("rain_angle must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub count: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub base_seed: u64,
    #[serde(flatten)]
    pub degradation: Degradation,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 64,
            patch_size: 32,
            channels: 1,
            base_seed: 0,
            degradation: Degradation::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return config_err("corpus count must be at least 1");
        }
        if self.patch_size == 0 {
            return config_err("patch_size must be positive");
        }
        if !matches!(self.channels, 1 | 3) {
            return config_err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        self.degradation.validate()
    }

    /// Checks that patches fit a net whose extents must be divisible by `divisor`.
    pub fn check_divisor(&self, divisor: usize) -> Result<()> {
        if self.patch_size % divisor != 0 {
            return config_err(format!(
                "patch_size {} is not divisible by {divisor}",
                self.patch_size
            ));
        }
        Ok(())
    }

    /// Seed used to degrade image `index`.
    pub fn sample_seed(&self, index: usize) -> u64 {
        self.base_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// A clean/degraded pair, both normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub task: Task,
    pub seed: u64,
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Procedural clean image `index` of `spec`, values in `[0, 1]`.
pub fn clean_image(spec: &CorpusSpec, index: usize) -> Tensor {
    let mut rng = image_rng(spec.base_seed, index as u64);
    let (c, n) = (spec.channels, spec.patch_size);
    let nf = n as f64;

    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.25..0.75)).collect();
    let (gx, gy) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));

    struct Shape {
        disc: bool,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        alpha: f64,
        color: Vec<f64>,
    }
    let shapes: Vec<Shape> = (0..rng.random_range(1..=4))
        .map(|_| Shape {
            disc: rng.random_bool(0.5),
            cx: rng.random_range(0.0..nf),
            cy: rng.random_range(0.0..nf),
            rx: rng.random_range(0.1..0.35) * nf,
            ry: rng.random_range(0.1..0.35) * nf,
            alpha: rng.random_range(0.5..1.0),
            color: (0..c).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();

    // a few low-frequency plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / nf;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            (
                freq * theta.cos(),
                freq * theta.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.01..0.05),
            )
        })
        .collect();

    let mut data = vec![0.0; c * n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * xf + ky * yf + ph).sin())
                .sum();
            for ch in 0..c {
                let mut v = base[ch] + gx * (xf / nf - 0.5) + gy * (yf / nf - 0.5);
                for s in &shapes {
                    let (dx, dy) = ((xf - s.cx) / s.rx, (yf - s.cy) / s.ry);
                    let inside = if s.disc {
                        dx * dx + dy * dy <= 1.0
                    } else {
                        dx.abs() <= 1.0 && dy.abs() <= 1.0
                    };
                    if inside {
                        v = (1.0 - s.alpha) * v + s.alpha * s.color[ch];
                    }
                }
                data[(ch * n + y) * n + x] = (v + texture).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[c, n, n], data).expect("positive patch")
}

/// All clean images of `spec`, in index order.
pub fn make_clean_corpus(spec: &CorpusSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| clean_image(spec, i)).collect())
}

/// [`make_clean_corpus`] on a dedicated pool of `threads` workers. The result
/// does not depend on the thread count.
pub fn make_clean_corpus_parallel(spec: &CorpusSpec, threads: usize) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        (0..spec.count)
            .into_par_iter()
            .map(|i| clean_image(spec, i))
            .collect()
    }))
}

fn check_unit_range(img: &Tensor, what: &str) -> Result<()> {
    if let Some((i, v)) = img
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::Range(format!(
            "{what} element {i} is {v}, outside [0, 1]"
        )));
    }
    Ok(())
}

fn planes(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => dim_err(format!("expected a [C, H, W] image, got {s:?}")),
    }
}

/// Applies `task` at the strengths in `params`; deterministic per `seed`.
pub fn degrade(clean: &Tensor, task: Task, params: &Degradation, seed: u64) -> Result<Tensor> {
    params.validate()?;
    check_unit_range(clean, "clean image")?;
    let dims = planes(clean)?;
    let mut rng = image_rng(seed, 0);
    Ok(match task {
        Task::Denoise => add_noise(clean, params.noise_sigma, &mut rng),
        Task::Deblur => gaussian_blur(clean, dims, params.blur_sigma),
        Task::Derain => add_rain(clean, dims, params, &mut rng),
    })
}

fn add_noise(clean: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if sigma == 0.0 {
        return clean.clone();
    }
    let mut out = clean.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v + sigma * z).clamp(0.0, 1.0);
    }
    out
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn gaussian_blur(clean: &Tensor, (c, h, w): (usize, usize, usize), sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return clean.clone();
    }
    let k = gaussian_kernel_1d(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let src = clean.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let p = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[p + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[p + y * w + clampi(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[p + clampi(y as isize + i as isize - r, h) * w + x])
                    .sum();
                out[p + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(clean.shape(), out).expect("same shape")
}

/// Streaks are drawn sequentially, so a higher density adds streaks on top of
/// those of a lower density with the same seed.
fn add_rain(
    clean: &Tensor,
    (c, h, w): (usize, usize, usize),
    p: &Degradation,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let count = (p.rain_density * (h * w) as f64).round() as usize;
    if count == 0 || p.rain_length == 0.0 {
        return clean.clone();
    }
    const WIDTH: f64 = 0.6;
    let theta = p.rain_angle.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let mut layer = vec![0.0; h * w];
    for _ in 0..count {
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0.0..h as f64);
        let len = p.rain_length * rng.random_range(0.6..1.0);
        let bright = rng.random_range(0.3..0.8);
        let (x1, y1) = (x0 + dx * len, y0 + dy * len);
        let pad = 3.0 * WIDTH;
        let xs = (x0.min(x1) - pad).floor().max(0.0) as usize;
        let xe = ((x0.max(x1) + pad).ceil() as usize).min(w);
        let ys = (y0.min(y1) - pad).floor().max(0.0) as usize;
        let ye = ((y0.max(y1) + pad).ceil() as usize).min(h);
        for y in ys..ye {
            for x in xs..xe {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - x0) * dx + (py - y0) * dy) / len).clamp(0.0, 1.0);
                let (qx, qy) = (x0 + t * dx * len, y0 + t * dy * len);
                let d2 = (px - qx).powi(2) + (py - qy).powi(2);
                layer[y * w + x] += bright * (-d2 / (2.0 * WIDTH * WIDTH)).exp();
            }
        }
    }
    let mut out = clean.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v + layer[i % (h * w)]).clamp(0.0, 1.0);
    }
    debug_assert_eq!(out.numel(), c * h * w);
    out
}

/// `2x - 1`, mapping `[0, 1]` onto `[-1, 1]`.
pub fn normalize(img: &Tensor) -> Result<Tensor> {
    check_unit_range(img, "image")?;
    Ok(img.map(|v| 2.0 * v - 1.0))
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &Tensor) -> Result<Tensor> {
    if let Some((i, v)) = img
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(-1.0..=1.0).contains(*v))
    {
        return Err(Error::Range(format!("element {i} is {v}, outside [-1, 1]")));
    }
    Ok(img.map(|v| (v + 1.0) / 2.0))
}

/// Clean corpus plus degraded copies for `task`, normalized to `[-1, 1]`.
pub fn make_samples(spec: &CorpusSpec, task: Task, threads: usize) -> Result<Vec<Sample>> {
    let clean = make_clean_corpus_parallel(spec, threads)?;
    clean
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            let seed = spec.sample_seed(i);
            let degraded = degrade(&img, task, &spec.degradation, seed)?;
            Ok(Sample {
                clean: normalize(&img)?,
                degraded: normalize(&degraded)?,
                task,
                seed,
            })
        })
        .collect()
}

/// Stacks the selected `[C, H, W]` images along a new leading axis.
pub fn stack_batch(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != first.shape() {
            return dim_err(format!(
                "batch mixes shapes {:?} and {:?}",
                first.shape(),
                img.shape()
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&shape, data)
}

/// Endless sequence of index batches: a fresh shuffle every epoch drawn from one
/// seeded stream, trailing partial batch dropped.
#[derive(Clone, Debug)]
pub struct BatchIter {
    len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    epoch_rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

fn check_batching(len: usize, batch_size: usize) -> Result<()> {
    if len == 0 {
        return config_err("cannot batch an empty corpus");
    }
    if batch_size == 0 {
        return config_err("batch size must be at least 1");
    }
    if batch_size > len {
        return config_err(format!("batch size {batch_size} exceeds corpus size {len}"));
    }
    Ok(())
}

pub fn batch_iter(len: usize, batch_size: usize, seed: u64) -> Result<BatchIter> {
    BatchIter::resume(len, batch_size, ChaCha8Rng::seed_from_u64(seed), 0)
}

impl BatchIter {
    /// Continues from a [`resume_point`](Self::resume_point).
    pub fn resume(
        len: usize,
        batch_size: usize,
        epoch_rng: ChaCha8Rng,
        consumed: usize,
    ) -> Result<Self> {
        check_batching(len, batch_size)?;
        if consumed > len / batch_size {
            return config_err(format!(
                "{consumed} batches consumed but an epoch has {}",
                len / batch_size
            ));
        }
        let mut it = BatchIter {
            len,
            batch_size,
            rng: epoch_rng.clone(),
            epoch_rng,
            order: Vec::new(),
            pos: 0,
        };
        it.start_epoch();
        it.pos = consumed * batch_size;
        Ok(it)
    }

    /// RNG state at the start of the current epoch and the batches drawn since.
    pub fn resume_point(&self) -> (ChaCha8Rng, usize) {
        (self.epoch_rng.clone(), self.pos / self.batch_size)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    fn start_epoch(&mut self) {
        self.epoch_rng = self.rng.clone();
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch_size > self.len {
            self.start_epoch();
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        Some(batch)
    }
}

/// Writes a `[1|3, H, W]` image in `[0, 1]` as 8-bit binary PGM or PPM.
pub fn write_pnm(path: &Path, img: &Tensor) -> Result<()> {
    check_unit_range(img, "image")?;
    let (c, h, w) = planes(img)?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return dim_err(format!("PNM needs 1 or 3 channels, got {c}")),
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push((img.at3(ch, y, x) * 255.0).round() as u8);
            }
        }
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Reads an 8-bit binary PGM/PPM into a `[C, H, W]` image in `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!(
                "{}: truncated PNM header",
                path.display()
            )));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => {
            return Err(Error::Format(format!(
                "{}: unsupported PNM magic `{m}`",
                path.display()
            )))
        }
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{}: bad header field `{s}`", path.display())))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!(
            "{}: only 8-bit PNM is supported (maxval {maxval})",
            path.display()
        )));
    }
    let payload = bytes.get(pos..pos + c * h * w).ok_or_else(|| {
        Error::Format(format!(
            "{}: expected {} pixel bytes after the header",
            path.display(),
            c * h * w
        ))
    })?;
    let mut data = vec![0.0; c * h * w];
    for (i, &b) in payload.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        data[ch * h * w + pix] = b as f64 / 255.0;
    }
    Tensor::new(&[c, h, w], data)
}
