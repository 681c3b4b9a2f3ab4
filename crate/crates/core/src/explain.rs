//! Saliency maps: Grad-CAM, occlusion sensitivity, LIME over a superpixel
//! grid, and gradient attribution, plus heatmap overlays.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{save_ppm, ImageError};
use crate::metrics::format_sig9;
use crate::model::{ModelError, NestNet};
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("match-score targets need a reference embedding")]
    MissingReference,
    #[error("reference embedding has zero norm")]
    DegenerateReference,
    #[error("reference has {got} values; embeddings have {expected}")]
    ReferenceLength { expected: usize, got: usize },
    #[error("class {class} is outside the model's {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("unknown layer `{name}`; available: {available}")]
    UnknownLayer { name: String, available: String },
    #[error("layer `{name}` has shape {shape:?}; Grad-CAM needs a [1, C, H, W] map")]
    NonSpatial { name: String, shape: Vec<usize> },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("patch size {patch} must be in 1..={size}")]
    PatchSize { patch: usize, size: usize },
    #[error("{rows}×{cols} segments do not fit a {height}×{width} image")]
    TooManySegments { rows: usize, cols: usize, height: usize, width: usize },
    #[error("LIME needs at least {need} samples for {segments} segments, got {got}")]
    TooFewSamples { need: usize, got: usize, segments: usize },
    #[error("LIME design matrix is singular after a retry with fresh masks")]
    Singular,
    #[error("image has {got} pixels; expected {expected}")]
    ImageSize { expected: usize, got: usize },
    #[error("target returned {got} values for {expected} images")]
    TargetArity { expected: usize, got: usize },
    #[error("saliency map contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    GradCam,
    Occlusion,
    Lime,
    Gradient,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GradCam => "grad-cam",
            Method::Occlusion => "occlusion",
            Method::Lime => "lime",
            Method::Gradient => "gradient",
        })
    }
}

/// Importance grid over a square image. Cell `(r, c)` is centred at
/// `(origin + c·pitch, origin + r·pitch)` in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub method: Method,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub origin: f64,
    pub pitch: f64,
    pub image_size: usize,
    /// What was explained, e.g. the layer and target.
    pub description: String,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// First maximal cell in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (self.origin + col as f64 * self.pitch, self.origin + row as f64 * self.pitch)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `row,col,value` lines under a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExplainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "value"])?;
        for r in 0..self.rows {
            for c in 0..self.cols {
                w.write_record([r.to_string(), c.to_string(), format_sig9(self.get(r, c))])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// A differentiable scalar built on a graph from a `[1, C, S, S]` image node.
pub trait GraphTarget<T: Scalar> {
    fn build(&self, g: &mut Graph<T>, image: NodeId) -> Result<BuiltTarget, ExplainError>;
}

pub struct BuiltTarget {
    pub value: NodeId,
    /// Intermediate maps available to Grad-CAM.
    pub layers: Vec<(String, NodeId)>,
}

/// A scalar function evaluated on a batch of `[N, 1, S, S]` images.
pub trait ImageFunction {
    fn evaluate(&self, images: &Tensor<f32>) -> Result<Vec<f64>, ExplainError>;
}

/// Wraps a per-image closure over row-major pixels as an [`ImageFunction`].
pub struct PixelFunction<F>(pub F);

impl<F: Fn(&[f32]) -> f64> ImageFunction for PixelFunction<F> {
    fn evaluate(&self, images: &Tensor<f32>) -> Result<Vec<f64>, ExplainError> {
        let per = images.shape()[1..].iter().product::<usize>().max(1);
        Ok(images.values().chunks(per).map(|p| (self.0)(p)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetMode {
    /// Softmax probability of a class.
    ClassProb(usize),
    /// Cosine similarity between the image's embedding and a reference.
    MatchScore,
}

/// The model-backed explanation target.
#[derive(Clone, Debug)]
pub struct ModelTarget<'a, T: Scalar = f32> {
    model: &'a NestNet<T>,
    class: Option<usize>,
    /// Unit-norm reference for match scores.
    reference: Option<Vec<f64>>,
}

pub fn explanation_target<'a, T: Scalar>(
    model: &'a NestNet<T>,
    mode: TargetMode,
    reference: Option<&[f32]>,
) -> Result<ModelTarget<'a, T>, ExplainError> {
    let cfg = model.config();
    match mode {
        TargetMode::ClassProb(class) => {
            if class >= cfg.num_classes {
                return Err(ExplainError::ClassOutOfRange { class, classes: cfg.num_classes });
            }
            Ok(ModelTarget { model, class: Some(class), reference: None })
        }
        TargetMode::MatchScore => {
            let r = reference.ok_or(ExplainError::MissingReference)?;
            if r.len() != cfg.embedding_dim {
                return Err(ExplainError::ReferenceLength { expected: cfg.embedding_dim, got: r.len() });
            }
            let norm = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(ExplainError::DegenerateReference);
            }
            Ok(ModelTarget { model, class: None, reference: Some(r.iter().map(|&v| v as f64 / norm).collect()) })
        }
    }
}

impl<T: Scalar> ModelTarget<'_, T> {
    pub fn describe(&self) -> String {
        match self.class {
            Some(c) => format!("class-prob {c}"),
            None => "match-score".into(),
        }
    }
}

impl<T: Scalar> GraphTarget<T> for ModelTarget<'_, T> {
    fn build(&self, g: &mut Graph<T>, image: NodeId) -> Result<BuiltTarget, ExplainError> {
        let out = self.model.forward(g, image, false)?;
        let value = match (&self.class, &self.reference) {
            (Some(c), _) => {
                let p = g.softmax(out.logits)?;
                let k = self.model.config().num_classes;
                g.weighted_sum(p, (0..k).map(|i| if i == *c { T::one() } else { T::zero() }).collect())?
            }
            (None, Some(r)) => {
                let e = g.l2_normalize(out.embedding)?;
                g.weighted_sum(e, r.iter().map(|&v| T::of(v)).collect())?
            }
            (None, None) => return Err(ExplainError::MissingReference),
        };
        Ok(BuiltTarget { value, layers: out.layers })
    }
}

impl ImageFunction for ModelTarget<'_, f32> {
    fn evaluate(&self, images: &Tensor<f32>) -> Result<Vec<f64>, ExplainError> {
        let (logits, emb) = self.model.infer(images)?;
        let cfg = self.model.config();
        match (&self.class, &self.reference) {
            (Some(c), _) => Ok(logits
                .values()
                .chunks(cfg.num_classes)
                .map(|row| {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                    let total: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                    (row[*c] as f64 - max).exp() / total
                })
                .collect()),
            (None, Some(r)) => Ok(emb
                .values()
                .chunks(cfg.embedding_dim)
                .map(|row| {
                    let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                    row.iter().zip(r).map(|(&v, &w)| v as f64 * w).sum::<f64>() / norm
                })
                .collect()),
            (None, None) => Err(ExplainError::MissingReference),
        }
    }
}

fn image_tensor<T: Scalar>(pixels: &[T], size: usize) -> Result<Tensor<T>, ExplainError> {
    if pixels.len() != size * size {
        return Err(ExplainError::ImageSize { expected: size * size, got: pixels.len() });
    }
    Ok(Tensor::new(vec![1, 1, size, size], pixels.to_vec())?)
}

/// Target value and the graph it was computed on, after the backward pass.
fn differentiate<T: Scalar>(
    target: &impl GraphTarget<T>,
    pixels: &[T],
    size: usize,
) -> Result<(Graph<T>, NodeId, BuiltTarget), ExplainError> {
    let mut g = Graph::new();
    let x = g.input(image_tensor(pixels, size)?, true);
    let built = target.build(&mut g, x)?;
    g.backward(built.value)?;
    Ok((g, x, built))
}

pub const DEFAULT_GRADCAM_LAYER: &str = "res6.relu";
pub const FIRST_CONV_LAYER: &str = "conv1.conv";

/// `ReLU(Σ_k α_k A_k)` with `α_k` the spatial mean of `∂target/∂A_k`.
pub fn grad_cam<T: Scalar>(
    target: &impl GraphTarget<T>,
    pixels: &[T],
    size: usize,
    layer: &str,
) -> Result<SaliencyMap, ExplainError> {
    let (g, _, built) = differentiate(target, pixels, size)?;
    let node = built.layers.iter().find(|(n, _)| n == layer).map(|(_, id)| *id).ok_or_else(|| {
        ExplainError::UnknownLayer {
            name: layer.into(),
            available: built.layers.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", "),
        }
    })?;
    let a = g.value(node);
    let shape = a.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(ExplainError::NonSpatial { name: layer.into(), shape });
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let hw = h * w;
    let zeros = vec![T::zero(); a.len()];
    let grad = g.grad(node).unwrap_or(&zeros);
    let mut map = vec![0.0f64; hw];
    for k in 0..c {
        let alpha = grad[k * hw..(k + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        for (m, v) in map.iter_mut().zip(&a.values()[k * hw..(k + 1) * hw]) {
            *m += alpha * v.as_f64();
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    let pitch = size as f64 / w as f64;
    Ok(SaliencyMap {
        method: Method::GradCam,
        rows: h,
        cols: w,
        values: map,
        origin: pitch / 2.0,
        pitch,
        image_size: size,
        description: format!("grad-cam {layer}"),
    })
}

/// `|∂target/∂pixel|` at input resolution.
pub fn gradient_attribution<T: Scalar>(
    target: &impl GraphTarget<T>,
    pixels: &[T],
    size: usize,
) -> Result<SaliencyMap, ExplainError> {
    let (g, x, _) = differentiate(target, pixels, size)?;
    let values = match g.grad(x) {
        Some(grad) => grad.iter().map(|v| v.as_f64().abs()).collect(),
        None => vec![0.0; size * size],
    };
    Ok(SaliencyMap {
        method: Method::Gradient,
        rows: size,
        cols: size,
        values,
        origin: 0.5,
        pitch: 1.0,
        image_size: size,
        description: "gradient".into(),
    })
}

/// Target value and its input gradient, for checking against finite differences.
pub fn value_and_gradient<T: Scalar>(
    target: &impl GraphTarget<T>,
    pixels: &[T],
    size: usize,
) -> Result<(T, Vec<T>), ExplainError> {
    let (g, x, built) = differentiate(target, pixels, size)?;
    let value = g.value(built.value).values()[0];
    Ok((value, g.grad(x).map_or_else(|| vec![T::zero(); size * size], <[T]>::to_vec)))
}

const EVAL_BATCH: usize = 16;

/// Evaluate `f` on many images in fixed-size batches.
fn evaluate_all(f: &impl ImageFunction, images: &[Vec<f32>], size: usize) -> Result<Vec<f64>, ExplainError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let values: Vec<f32> = chunk.iter().flatten().copied().collect();
        let batch = Tensor::new(vec![chunk.len(), 1, size, size], values)?;
        let v = f.evaluate(&batch)?;
        if v.len() != chunk.len() {
            return Err(ExplainError::TargetArity { expected: chunk.len(), got: v.len() });
        }
        out.extend(v);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
}

impl OcclusionConfig {
    pub const COARSE: Self = Self { patch: 32, stride: 16 };
    pub const HIGH_RES: Self = Self { patch: 8, stride: 4 };
}

/// `target(image) − target(image with the patch filled by baseline)` for
/// every patch position.
pub fn occlusion_sensitivity(
    f: &impl ImageFunction,
    pixels: &[f32],
    size: usize,
    config: OcclusionConfig,
    baseline: f32,
) -> Result<SaliencyMap, ExplainError> {
    let OcclusionConfig { patch, stride } = config;
    if stride == 0 {
        return Err(ExplainError::ZeroStride);
    }
    if patch == 0 || patch > size {
        return Err(ExplainError::PatchSize { patch, size });
    }
    if pixels.len() != size * size {
        return Err(ExplainError::ImageSize { expected: size * size, got: pixels.len() });
    }
    let n = (size - patch) / stride + 1;
    let mut images = vec![pixels.to_vec()];
    for r in 0..n {
        for c in 0..n {
            let mut img = pixels.to_vec();
            for y in r * stride..r * stride + patch {
                img[y * size + c * stride..y * size + c * stride + patch].fill(baseline);
            }
            images.push(img);
        }
    }
    let values = evaluate_all(f, &images, size)?;
    let base = values[0];
    Ok(SaliencyMap {
        method: Method::Occlusion,
        rows: n,
        cols: n,
        values: values[1..].iter().map(|v| base - v).collect(),
        origin: patch as f64 / 2.0,
        pitch: stride as f64,
        image_size: size,
        description: format!("occlusion patch {patch} stride {stride} baseline {baseline}"),
    })
}

/// Regular-grid superpixels; the last row and column absorb any remainder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Superpixelization {
    pub labels: Vec<usize>,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

pub fn superpixel_segment(
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
) -> Result<Superpixelization, ExplainError> {
    if rows == 0 || cols == 0 || rows > height || cols > width {
        return Err(ExplainError::TooManySegments { rows, cols, height, width });
    }
    let (bh, bw) = (height / rows, width / cols);
    let labels = (0..height * width)
        .map(|p| (p / width / bh).min(rows - 1) * cols + (p % width / bw).min(cols - 1))
        .collect();
    Ok(Superpixelization { labels, count: rows * cols, rows, cols, height, width })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimeExplanation {
    /// One weight per segment.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// The masks the surrogate was fitted on (`true` keeps the segment).
    pub masks: Vec<Vec<bool>>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LimeExplanation {
    pub fn to_map(&self, seg: &Superpixelization) -> SaliencyMap {
        let pitch = seg.width as f64 / seg.cols as f64;
        SaliencyMap {
            method: Method::Lime,
            rows: seg.rows,
            cols: seg.cols,
            values: self.coefficients.clone(),
            origin: pitch / 2.0,
            pitch,
            image_size: seg.width,
            description: format!("lime {}×{} segments, {} samples", seg.rows, seg.cols, self.masks.len()),
        }
    }
}

/// Exponential kernel on the number of removed segments.
pub fn lime_kernel(removed: usize, segments: usize) -> f64 {
    let width = 0.25 * segments as f64;
    (-((removed * removed) as f64) / (width * width)).exp()
}

/// LIME with random keep/drop masks (each segment kept with probability
/// 1/2), dropped segments filled with the image mean, and an unregularized
/// weighted least-squares surrogate.
pub fn lime_explain(
    f: &impl ImageFunction,
    pixels: &[f32],
    seg: &Superpixelization,
    n_samples: usize,
    seed: u64,
) -> Result<LimeExplanation, ExplainError> {
    let size = seg.width;
    if seg.height != seg.width || pixels.len() != size * size {
        return Err(ExplainError::ImageSize { expected: seg.height * seg.width, got: pixels.len() });
    }
    let k = seg.count;
    if n_samples < k + 1 {
        return Err(ExplainError::TooFewSamples { need: k + 1, got: n_samples, segments: k });
    }
    let fill = (pixels.iter().map(|&v| v as f64).sum::<f64>() / pixels.len() as f64) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..2 {
        let masks: Vec<Vec<bool>> = (0..n_samples).map(|_| (0..k).map(|_| rng.random_bool(0.5)).collect()).collect();
        let images: Vec<Vec<f32>> = masks
            .iter()
            .map(|m| pixels.iter().zip(&seg.labels).map(|(&p, &l)| if m[l] { p } else { fill }).collect())
            .collect();
        let targets = evaluate_all(f, &images, size)?;
        let weights: Vec<f64> = masks.iter().map(|m| lime_kernel(m.iter().filter(|b| !**b).count(), k)).collect();
        match weighted_least_squares(&masks, &targets, &weights) {
            Some(beta) => {
                return Ok(LimeExplanation {
                    coefficients: beta[1..].to_vec(),
                    intercept: beta[0],
                    masks,
                    targets,
                    weights,
                })
            }
            None => log::warn!("LIME design matrix is singular (attempt {}); redrawing masks", attempt + 1),
        }
    }
    Err(ExplainError::Singular)
}

/// Minimizes `Σ wᵢ (yᵢ − b − xᵢ·β)²` by QR of the row-scaled design;
/// `None` when the design is rank deficient. Returns `[b, β…]`.
pub fn weighted_least_squares(masks: &[Vec<bool>], targets: &[f64], weights: &[f64]) -> Option<Vec<f64>> {
    let n = masks.len();
    let k = masks.first().map_or(0, Vec::len) + 1;
    if n < k {
        return None;
    }
    let design = DMatrix::from_fn(n, k, |i, j| {
        let x = if j == 0 || masks[i][j - 1] { 1.0 } else { 0.0 };
        x * weights[i].sqrt()
    });
    let mut rhs = DVector::from_fn(n, |i, _| targets[i] * weights[i].sqrt());
    let qr = design.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
    let scale = diag.iter().cloned().fold(0.0, f64::max);
    if diag.iter().any(|&d| d <= scale * 1e-10) {
        return None;
    }
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, k).into_owned();
    let beta = r.solve_upper_triangular(&top)?;
    Some(beta.iter().copied().collect())
}

/// 256-entry blue → red ramp.
pub fn colormap(index: u8) -> [u8; 3] {
    [index, 0, 255 - index]
}

/// Min-max normalized overlay of `map` on a grayscale base at alpha 1/2,
/// upsampled by nearest cell centre. Returns interleaved RGB bytes.
pub fn render_heatmap(map: &SaliencyMap, base: &[f32], size: usize) -> Result<Vec<u8>, ExplainError> {
    if !map.is_finite() {
        return Err(ExplainError::NonFinite);
    }
    if base.len() != size * size {
        return Err(ExplainError::ImageSize { expected: size * size, got: base.len() });
    }
    let lo = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let constant = hi <= lo;
    if constant {
        log::warn!("{} map is constant; rendering a uniform overlay", map.method);
    }
    let scale = size as f64 / map.image_size.max(1) as f64;
    let nearest = |coord: f64, n: usize| {
        let i = ((coord / scale - map.origin) / map.pitch).round();
        i.clamp(0.0, (n - 1) as f64) as usize
    };
    let mut rgb = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let r = nearest(y as f64 + 0.5, map.rows);
        for x in 0..size {
            let c = nearest(x as f64 + 0.5, map.cols);
            let t = if constant { 0.5 } else { (map.get(r, c) - lo) / (hi - lo) };
            let color = colormap((t * 255.0).round() as u8);
            let gray = base[y * size + x].clamp(0.0, 1.0) as f64 * 255.0;
            for ch in color {
                rgb.push((0.5 * ch as f64 + 0.5 * gray).round() as u8);
            }
        }
    }
    Ok(rgb)
}

pub fn save_heatmap(map: &SaliencyMap, base: &[f32], size: usize, path: impl AsRef<Path>) -> Result<(), ExplainError> {
    let rgb = render_heatmap(map, base, size)?;
    save_ppm(size, size, &rgb, path)?;
    Ok(())
}
