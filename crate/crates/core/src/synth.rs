//! Synthetic fingerphotos: oriented sinusoidal ridges, a planted binary code
//! around the core, and per-session capture variation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{BoundingBox, Sample};
use crate::image::{dequantize, load_pgm, quantize, save_pgm, GrayImage, ImageError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("image size {0} is below the 64-pixel minimum")]
    Size(usize),
    #[error("verification needs at least 2 identities, got {0}")]
    TooFewIdentities(usize),
    #[error("samples_per_session must be positive")]
    NoSamples,
    #[error("capture parameter {name} = {value} is outside [{lo}, {hi}]")]
    Capture { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub const FREQUENCY_RANGE: (f64, f64) = (0.05, 0.15);
/// Side of the planted code in cells.
pub const CODE_CELLS: usize = 5;
/// Code cells are `size / CELL_DIVISOR` pixels wide.
pub const CELL_DIVISOR: f64 = 24.0;
const MIN_CODE_DISTANCE: u32 = 5;
const ORIENTATION_COEFF: f64 = 0.6;
/// Ridge flow shared by every identity.
pub const FLOW_ANGLE: f64 = 0.7;
pub const FLOW_COEFFS: [f64; 5] = [0.3, -0.2, 0.1, 0.4, -0.3];
/// Scale of each identity's drawn deviation from the shared flow; at 0,
/// identities differ in frequency, core and code only.
pub const ORIENTATION_SPREAD: f64 = 0.0;
const RIDGE_AMPLITUDE: f64 = 0.3;
const RIDGE_SHARPNESS: f64 = 2.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthIdentity {
    pub id: usize,
    /// Cycles per pixel.
    pub ridge_frequency: f64,
    pub base_angle: f64,
    /// Orientation offsets for `u, v, u², uv, v²` with `u, v` the offset
    /// from the core as a fraction of the image size.
    pub orientation_coeffs: [f64; 5],
    /// Core position as a fraction of the image side, inside `[1/3, 2/3]`.
    pub core: (f64, f64),
    /// Row-major `CODE_CELLS²` bit pattern stamped at the core.
    pub code: u32,
}

impl SynthIdentity {
    pub fn core_pixel(&self, size: usize) -> (f64, f64) {
        (self.core.0 * size as f64, self.core.1 * size as f64)
    }

    pub fn code_bit(&self, row: usize, col: usize) -> bool {
        self.code >> (row * CODE_CELLS + col) & 1 == 1
    }

    /// Unrotated code-patch box in pixel coordinates.
    pub fn patch_box(&self, size: usize) -> BoundingBox {
        let (cx, cy) = self.core_pixel(size);
        let half = CODE_CELLS as f64 * cell_size(size) / 2.0;
        BoundingBox { x0: cx - half, y0: cy - half, x1: cx + half, y1: cy + half }
    }

    /// Soft-thresholded oriented sinusoid at offset `(u, v)` from the core.
    fn ridge(&self, u: f64, v: f64, size: f64) -> f64 {
        let (un, vn) = (u / size, v / size);
        let c = &self.orientation_coeffs;
        let theta = self.base_angle + c[0] * un + c[1] * vn + c[2] * un * un + c[3] * un * vn + c[4] * vn * vn;
        let phase = 2.0 * PI * self.ridge_frequency * (u * theta.cos() + v * theta.sin());
        0.5 + RIDGE_AMPLITUDE * (RIDGE_SHARPNESS * phase.sin()).tanh() / RIDGE_SHARPNESS.tanh()
    }

    /// Noise-free pattern value at source coordinates `(x, y)`.
    fn pattern(&self, x: f64, y: f64, size: usize) -> f64 {
        let b = self.patch_box(size);
        if b.contains(x, y) {
            let cell = cell_size(size);
            let col = (((x - b.x0) / cell) as usize).min(CODE_CELLS - 1);
            let row = (((y - b.y0) / cell) as usize).min(CODE_CELLS - 1);
            return if self.code_bit(row, col) { 1.0 } else { 0.0 };
        }
        let (cx, cy) = self.core_pixel(size);
        self.ridge(x - cx, y - cy, size as f64)
    }
}

pub fn cell_size(size: usize) -> f64 {
    size as f64 / CELL_DIVISOR
}

/// Identity parameters drawn from `seed`.
pub fn generate_identity(id: usize, seed: u64) -> SynthIdentity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ridge_frequency = rng.random_range(FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1);
    let base_angle = FLOW_ANGLE + ORIENTATION_SPREAD * rng.random_range(0.0..PI);
    let orientation_coeffs =
        std::array::from_fn(|i| FLOW_COEFFS[i] + ORIENTATION_SPREAD * rng.random_range(-ORIENTATION_COEFF..=ORIENTATION_COEFF));
    let core = (rng.random_range(1.0 / 3.0..=2.0 / 3.0), rng.random_range(1.0 / 3.0..=2.0 / 3.0));
    let code = rng.random::<u32>() & ((1 << (CODE_CELLS * CODE_CELLS)) - 1);
    SynthIdentity { id, ridge_frequency, base_angle, orientation_coeffs, core, code }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptureParams {
    pub session: u8,
    /// Added to every pixel, in `[-0.2, 0.2]`.
    pub brightness: f64,
    /// Gaussian blur sigma in pixels, in `[0, 1.5]`.
    pub blur_sigma: f64,
    /// In-plane rotation about the image center, in `[-10, 10]` degrees.
    pub rotation_deg: f64,
    /// Additive Gaussian noise std, in `[0, 0.05]`.
    pub noise_std: f64,
}

impl CaptureParams {
    /// No rotation, blur, brightness change or noise.
    pub fn clean(session: u8) -> Self {
        Self { session, brightness: 0.0, blur_sigma: 0.0, rotation_deg: 0.0, noise_std: 0.0 }
    }

    /// Session 2 is brighter and blurrier on average than session 1.
    pub fn draw(session: u8, rng: &mut impl Rng) -> Self {
        let (brightness, blur) = if session == 1 { ((-0.15, 0.05), (0.0, 0.9)) } else { ((-0.05, 0.2), (0.5, 1.5)) };
        Self {
            session,
            brightness: rng.random_range(brightness.0..=brightness.1),
            blur_sigma: rng.random_range(blur.0..=blur.1),
            rotation_deg: rng.random_range(-10.0..=10.0),
            noise_std: rng.random_range(0.0..=0.05),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let checks = [
            ("brightness", self.brightness, -0.2, 0.2),
            ("blur_sigma", self.blur_sigma, 0.0, 1.5),
            ("rotation_deg", self.rotation_deg, -10.0, 10.0),
            ("noise_std", self.noise_std, 0.0, 0.05),
        ];
        for (name, value, lo, hi) in checks {
            if !(lo..=hi).contains(&value) {
                return Err(SynthError::Capture { name, value, lo, hi });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub pixels: Vec<f32>,
    /// Axis-aligned box around the rotated code patch.
    pub core_box: BoundingBox,
}

fn rotate(x: f64, y: f64, center: f64, (sin, cos): (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (x - center, y - center);
    (center + cos * dx - sin * dy, center + sin * dx + cos * dy)
}

/// Render one capture: rotation, blur, brightness and noise in that order,
/// then clamp to `[0, 1]`. `seed` drives the noise only.
pub fn render_sample(
    identity: &SynthIdentity,
    capture: &CaptureParams,
    size: usize,
    seed: u64,
) -> Result<Rendered, SynthError> {
    if size < 64 {
        return Err(SynthError::Size(size));
    }
    capture.validate()?;
    let center = size as f64 / 2.0;
    let angle = capture.rotation_deg.to_radians();
    let forward = angle.sin_cos();
    let inverse = (-angle).sin_cos();
    // 2×2 supersampling of the analytic pattern at inverse-rotated positions
    let mut img: Vec<f64> = (0..size * size)
        .map(|p| {
            let (row, col) = (p / size, p % size);
            let mut acc = 0.0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (x, y) = rotate(col as f64 + dx, row as f64 + dy, center, inverse);
                acc += identity.pattern(x, y, size);
            }
            acc / 4.0
        })
        .collect();
    if capture.blur_sigma > 0.0 {
        img = gaussian_blur(&img, size, capture.blur_sigma);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, capture.noise_std).expect("validated std");
    let pixels = img
        .iter()
        .map(|&v| {
            let n = if capture.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + capture.brightness + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    let b = identity.patch_box(size);
    let corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)].map(|(x, y)| rotate(x, y, center, forward));
    let fold = |f: fn(f64, f64) -> f64, pick: fn(&(f64, f64)) -> f64, init: f64| corners.iter().map(pick).fold(init, f);
    let core_box = BoundingBox {
        x0: fold(f64::min, |c| c.0, f64::INFINITY),
        y0: fold(f64::min, |c| c.1, f64::INFINITY),
        x1: fold(f64::max, |c| c.0, f64::NEG_INFINITY),
        y1: fold(f64::max, |c| c.1, f64::NEG_INFINITY),
    };
    Ok(Rendered { pixels, core_box })
}

/// Separable Gaussian blur with edge clamping, radius `ceil(3σ)`.
pub fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for r in 0..size {
        for c in 0..size {
            tmp[r * size + c] =
                kernel.iter().zip(-radius..).map(|(k, d)| k * img[r * size + clamp(c as isize + d)]).sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] =
                kernel.iter().zip(-radius..).map(|(k, d)| k * tmp[clamp(r as isize + d) * size + c]).sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub identities: usize,
    pub per_session: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { identities: 20, per_session: 10, size: 128, seed: 42 }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one stream, mixed from the master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |h, &p| splitmix64(h ^ splitmix64(p)))
}

const IDENTITY_STREAM: u64 = 0;
const CAPTURE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Identities `0..n` for `master`, with codes at least
/// `MIN_CODE_DISTANCE` bits apart (colliding draws are redrawn).
pub fn generate_identities(n: usize, master: u64) -> Vec<SynthIdentity> {
    let mut out: Vec<SynthIdentity> = Vec::with_capacity(n);
    for id in 0..n {
        let mut attempt = 0;
        loop {
            let candidate = generate_identity(id, derive_seed(master, &[IDENTITY_STREAM, id as u64, attempt]));
            if out.iter().all(|o| (o.code ^ candidate.code).count_ones() >= MIN_CODE_DISTANCE) {
                out.push(candidate);
                break;
            }
            attempt += 1;
        }
    }
    out
}

/// `identities × per_session × 2` samples ordered by identity, session and
/// index. Pixels are quantized to 8 bits, so they equal what a saved copy
/// loads back.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<Sample>, SynthError> {
    if config.identities < 2 {
        return Err(SynthError::TooFewIdentities(config.identities));
    }
    if config.per_session == 0 {
        return Err(SynthError::NoSamples);
    }
    if config.size < 64 {
        return Err(SynthError::Size(config.size));
    }
    let identities = generate_identities(config.identities, config.seed);
    let jobs: Vec<(usize, u8, usize)> = (0..config.identities)
        .flat_map(|id| [1u8, 2].into_iter().flat_map(move |s| (0..config.per_session).map(move |i| (id, s, i))))
        .collect();
    jobs.par_iter()
        .map(|&(id, session, index)| {
            let path = [id as u64, session as u64, index as u64];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[&[CAPTURE_STREAM][..], &path].concat()));
            let capture = CaptureParams::draw(session, &mut rng);
            let noise_seed = derive_seed(config.seed, &[&[NOISE_STREAM][..], &path].concat());
            let r = render_sample(&identities[id], &capture, config.size, noise_seed)?;
            Ok(Sample {
                identity: id,
                session: Some(session),
                index,
                size: config.size,
                pixels: r.pixels.iter().map(|&v| dequantize(quantize(v))).collect(),
                core_box: Some(r.core_box),
            })
        })
        .collect()
}

pub fn sample_filename(s: &Sample) -> String {
    format!("{:03}_{}_{:03}.pgm", s.identity, s.session.unwrap_or(0), s.index)
}

pub const MANIFEST: &str = "manifest.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

/// Write every sample as PGM plus `manifest.csv` into `dir`.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for s in samples {
        let image = GrayImage::new(s.size, s.size, s.pixels.clone())?;
        save_pgm(&image, dir.join(sample_filename(s)))?;
    }
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["filename", "identity", "session", "index", "core_x0", "core_y0", "core_x1", "core_y1"])?;
    for s in samples {
        let b = s.core_box.map(|b| [b.x0, b.y0, b.x1, b.y1].map(|v| v.to_string()));
        let b = b.unwrap_or_else(|| std::array::from_fn(|_| String::new()));
        w.write_record(
            [sample_filename(s), s.identity.to_string(), s.session.unwrap_or(0).to_string(), s.index.to_string()]
                .into_iter()
                .chain(b),
        )?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, SynthError> {
    let path = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path)?;
    let headers = r.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or(SynthError::Manifest {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let cols = [column("filename")?, column("identity")?, column("session")?];
    let index_col = headers.iter().position(|h| h == "index");
    let box_cols: Option<Vec<usize>> =
        ["core_x0", "core_y0", "core_x1", "core_y1"].iter().map(|n| headers.iter().position(|h| h == *n)).collect();
    let mut samples = Vec::new();
    for (i, record) in r.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let bad = |message: String| SynthError::Manifest { line, message };
        let field = |c: usize| record.get(c).ok_or_else(|| bad(format!("missing field {c}")));
        let filename = field(cols[0])?;
        let identity: usize = field(cols[1])?.parse().map_err(|e| bad(format!("identity: {e}")))?;
        let session: u8 = field(cols[2])?.parse().map_err(|e| bad(format!("session: {e}")))?;
        let index = match index_col {
            Some(c) => field(c)?.parse().map_err(|e| bad(format!("index: {e}")))?,
            None => i,
        };
        let core_box = match &box_cols {
            Some(c) if !field(c[0])?.is_empty() => {
                let mut v = [0.0; 4];
                for (slot, &col) in v.iter_mut().zip(c) {
                    *slot = field(col)?.parse().map_err(|e| bad(format!("core box: {e}")))?;
                }
                Some(BoundingBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] })
            }
            _ => None,
        };
        let image = load_pgm(dir.join(filename))?;
        if image.width != image.height {
            return Err(bad(format!("{filename} is {}×{}; images must be square", image.width, image.height)));
        }
        if let Some(first) = samples.first().map(|s: &Sample| s.size) {
            if image.width != first {
                return Err(bad(format!("{filename} is {} pixels wide; earlier images are {first}", image.width)));
            }
        }
        samples.push(Sample { identity, session: Some(session), index, size: image.width, pixels: image.pixels, core_box });
    }
    if samples.is_empty() {
        return Err(SynthError::Manifest { line: 1, message: "no samples listed".into() });
    }
    Ok(samples)
}

// TEMP
