//! The nested-residual fingerphoto network: three convolution blocks, six
//! serial residual blocks, a normalization head, a 128-wide embedding layer
//! and a linear classifier.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input must be [N, {channels}, {size}, {size}], got {got:?}")]
    InputShape { channels: usize, size: usize, got: Vec<usize> },
    #[error("unknown parameter or layer `{0}`")]
    UnknownName(String),
    #[error("embedding row {0} is all zeros (degenerate model)")]
    DegenerateEmbedding(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipVariant {
    Identity,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualSpec {
    pub variant: SkipVariant,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stem_kernel: usize,
    pub skip_kernel: usize,
}

impl ResidualSpec {
    pub fn new(variant: SkipVariant, in_channels: usize, out_channels: usize) -> Self {
        Self { variant, in_channels, out_channels, stem_kernel: 3, skip_kernel: 1 }
    }
}

impl fmt::Display for ResidualSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.variant {
            SkipVariant::Identity => "id",
            SkipVariant::Conv => "conv",
        };
        write!(f, "{v}/{}/{}/{}/{}", self.in_channels, self.out_channels, self.stem_kernel, self.skip_kernel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestNetConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv_block_kernels: Vec<usize>,
    pub conv_block_filters: Vec<usize>,
    pub residual_plan: Vec<ResidualSpec>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub groupnorm_groups: usize,
    pub groupnorm_eps: f64,
}

impl Default for NestNetConfig {
    fn default() -> Self {
        use SkipVariant::*;
        Self {
            input_size: 128,
            input_channels: 1,
            conv_block_kernels: vec![21, 14, 7],
            conv_block_filters: vec![32, 32, 32],
            residual_plan: vec![
                ResidualSpec::new(Identity, 32, 32),
                ResidualSpec::new(Identity, 32, 32),
                ResidualSpec::new(Conv, 32, 64),
                ResidualSpec::new(Identity, 64, 64),
                ResidualSpec::new(Conv, 64, 128),
                ResidualSpec::new(Identity, 128, 128),
            ],
            embedding_dim: 128,
            num_classes: 20,
            groupnorm_groups: 8,
            groupnorm_eps: 1e-5,
        }
    }
}

fn conv_out(size: usize, kernel: usize) -> usize {
    // padding kernel/2 on both sides, stride 1
    size + 2 * (kernel / 2) - kernel + 1
}

fn list(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl NestNetConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self { num_classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        let g = self.groupnorm_groups;
        if self.input_channels == 0 || self.embedding_dim == 0 || self.num_classes == 0 || g == 0 {
            return bad("input_channels, embedding_dim, num_classes and groupnorm_groups must be positive".into());
        }
        if !(self.groupnorm_eps > 0.0 && self.groupnorm_eps.is_finite()) {
            return bad(format!("groupnorm_eps must be positive, got {}", self.groupnorm_eps));
        }
        if self.conv_block_kernels.is_empty() || self.conv_block_kernels.len() != self.conv_block_filters.len() {
            return bad("conv_block_kernels and conv_block_filters must be non-empty and of equal length".into());
        }
        if self.conv_block_kernels.contains(&0) {
            return bad("kernel sizes must be positive".into());
        }
        if self.conv_block_kernels.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("conv_block_kernels must shrink block to block, got {:?}", self.conv_block_kernels));
        }
        if let Some(f) = self.conv_block_filters.iter().find(|f| **f == 0 || **f % g != 0) {
            return bad(format!("{f} conv filters cannot be split into {g} groups"));
        }
        let mut channels = *self.conv_block_filters.last().expect("checked non-empty");
        for (i, spec) in self.residual_plan.iter().enumerate() {
            if spec.in_channels != channels {
                return bad(format!("residual block {} expects {} input channels, previous stage has {channels}", i + 1, spec.in_channels));
            }
            if spec.variant == SkipVariant::Identity && spec.in_channels != spec.out_channels {
                return bad(format!("identity-skip block {} cannot change width {spec}", i + 1));
            }
            if spec.stem_kernel % 2 == 0 || spec.skip_kernel % 2 == 0 {
                return bad(format!("residual block {} kernels must be odd to preserve size", i + 1));
            }
            if spec.out_channels == 0 || spec.out_channels % g != 0 {
                return bad(format!("{} channels cannot be split into {g} groups", spec.out_channels));
            }
            channels = spec.out_channels;
        }
        let mut size = self.input_size;
        for &k in &self.conv_block_kernels {
            if size + 2 * (k / 2) < k {
                return bad(format!("kernel {k} does not fit a {size}×{size} feature map"));
            }
            size = conv_out(size, k) / 2;
            if size == 0 {
                return bad(format!("input_size {} is too small for the convolution blocks", self.input_size));
            }
        }
        Ok(())
    }

    /// Side of the feature maps entering the residual stage.
    pub fn feature_size(&self) -> usize {
        self.conv_block_kernels.iter().fold(self.input_size, |s, &k| conv_out(s, k) / 2)
    }

    pub fn feature_channels(&self) -> usize {
        self.residual_plan.last().map_or(*self.conv_block_filters.last().unwrap_or(&0), |r| r.out_channels)
    }

    pub fn to_kv(&self) -> String {
        let plan: Vec<String> = self.residual_plan.iter().map(|r| r.to_string()).collect();
        format!(
            "input_size = {}\ninput_channels = {}\nconv_block_kernels = {}\nconv_block_filters = {}\n\
             residual_plan = {}\nembedding_dim = {}\nnum_classes = {}\ngroupnorm_groups = {}\ngroupnorm_eps = {:e}\n",
            self.input_size,
            self.input_channels,
            list(&self.conv_block_kernels),
            list(&self.conv_block_filters),
            plan.join(","),
            self.embedding_dim,
            self.num_classes,
            self.groupnorm_groups,
            self.groupnorm_eps,
        )
    }

    /// Parse `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults.
    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| ModelError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply key/value pairs, as found in a checkpoint manifest.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v).map_err(ModelError::Config)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        self.to_kv()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: `{v}`: {e}"));
        let ints = |v: &str| v.split(',').map(|s| int(s.trim())).collect::<Result<Vec<_>, _>>();
        match key {
            "input_size" => self.input_size = int(value)?,
            "input_channels" => self.input_channels = int(value)?,
            "conv_block_kernels" => self.conv_block_kernels = ints(value)?,
            "conv_block_filters" => self.conv_block_filters = ints(value)?,
            "embedding_dim" => self.embedding_dim = int(value)?,
            "num_classes" => self.num_classes = int(value)?,
            "groupnorm_groups" => self.groupnorm_groups = int(value)?,
            "groupnorm_eps" => self.groupnorm_eps = value.parse().map_err(|e| format!("{key}: `{value}`: {e}"))?,
            "residual_plan" => {
                self.residual_plan = value
                    .split(',')
                    .map(|entry| {
                        let parts: Vec<&str> = entry.trim().split('/').collect();
                        let [variant, rest @ ..] = parts.as_slice() else { unreachable!() };
                        let variant = match *variant {
                            "id" => SkipVariant::Identity,
                            "conv" => SkipVariant::Conv,
                            other => return Err(format!("unknown skip variant `{other}`")),
                        };
                        let n: Vec<usize> = rest.iter().map(|s| int(s)).collect::<Result<_, _>>()?;
                        match n.as_slice() {
                            [i, o] => Ok(ResidualSpec::new(variant, *i, *o)),
                            [i, o, s, k] => Ok(ResidualSpec { variant, in_channels: *i, out_channels: *o, stem_kernel: *s, skip_kernel: *k }),
                            _ => Err(format!("residual entry `{entry}` must be variant/in/out[/stem/skip]")),
                        }
                    })
                    .collect::<Result<_, _>>()?
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

/// Node handles produced by one forward pass.
pub struct ForwardOutputs {
    pub input: NodeId,
    pub logits: NodeId,
    /// Raw FC-128 activations, before the classifier's ReLU.
    pub embedding: NodeId,
    /// One node per parameter, in [`NestNet::parameters`] order.
    pub params: Vec<NodeId>,
    /// Named intermediate outputs, in execution order.
    pub layers: Vec<(String, NodeId)>,
}

impl ForwardOutputs {
    pub fn layer(&self, name: &str) -> Option<NodeId> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }
}

#[derive(Clone, Debug)]
pub struct NestNet<T: Scalar = f32> {
    config: NestNetConfig,
    params: Vec<(String, Arc<Tensor<T>>)>,
    index: HashMap<String, usize>,
}

/// Parameter names and shapes in their canonical order.
fn parameter_layout(cfg: &NestNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, o: usize, i: usize, k: usize| {
        out.push((format!("{prefix}.weight"), vec![o, i, k, k]));
        out.push((format!("{prefix}.bias"), vec![o]));
    };
    let gn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize| {
        out.push((format!("{prefix}.gamma"), vec![c]));
        out.push((format!("{prefix}.beta"), vec![c]));
    };
    let mut c = cfg.input_channels;
    for (b, (&k, &f)) in cfg.conv_block_kernels.iter().zip(&cfg.conv_block_filters).enumerate() {
        conv(&mut out, &format!("conv{}.conv", b + 1), f, c, k);
        gn(&mut out, &format!("conv{}.gn", b + 1), f);
        c = f;
    }
    for (r, spec) in cfg.residual_plan.iter().enumerate() {
        let p = format!("res{}", r + 1);
        conv(&mut out, &format!("{p}.stem.conv1"), spec.out_channels, spec.in_channels, spec.stem_kernel);
        gn(&mut out, &format!("{p}.stem.gn1"), spec.out_channels);
        conv(&mut out, &format!("{p}.stem.conv2"), spec.out_channels, spec.out_channels, spec.stem_kernel);
        gn(&mut out, &format!("{p}.stem.gn2"), spec.out_channels);
        if spec.variant == SkipVariant::Conv {
            conv(&mut out, &format!("{p}.skip.conv"), spec.out_channels, spec.in_channels, spec.skip_kernel);
            gn(&mut out, &format!("{p}.skip.gn"), spec.out_channels);
        }
        c = spec.out_channels;
    }
    gn(&mut out, "head.gn", c);
    let s = cfg.feature_size();
    out.push(("embed.weight".into(), vec![cfg.embedding_dim, c * s * s]));
    out.push(("embed.bias".into(), vec![cfg.embedding_dim]));
    out.push(("classifier.weight".into(), vec![cfg.num_classes, cfg.embedding_dim]));
    out.push(("classifier.bias".into(), vec![cfg.num_classes]));
    out
}

impl NestNet<f32> {
    /// He-normal weights, zero biases and betas, unit gammas, all drawn from
    /// one seeded stream in parameter order.
    pub fn build(config: NestNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let values = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                } else if name.ends_with(".gamma") {
                    vec![1.0; len]
                } else {
                    vec![0.0; len]
                };
                (name, Arc::new(Tensor::new(shape, values).expect("layout shapes are positive")))
            })
            .collect();
        Ok(Self::assemble(config, params))
    }
}

impl<T: Scalar> NestNet<T> {
    fn assemble(config: NestNetConfig, params: Vec<(String, Arc<Tensor<T>>)>) -> Self {
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { config, params, index }
    }

    /// Rebuild from stored tensors; names and shapes must match the layout
    /// implied by `config` exactly.
    pub fn from_parameters(config: NestNetConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != tensors.len() {
            return Err(ModelError::Config(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self::assemble(config, tensors.into_iter().map(|(n, t)| (n, Arc::new(t))).collect()))
    }

    pub fn config(&self) -> &NestNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[(String, Arc<Tensor<T>>)] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.params[i].1)
    }

    /// Copy-on-write access; graphs still holding the old buffer keep it.
    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.params[i].1))
    }

    /// Copy-on-write access to every parameter, in canonical order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| Arc::make_mut(t)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NestNet<U> {
        let params = self.params.iter().map(|(n, t)| (n.clone(), Arc::new(t.cast()))).collect();
        NestNet::assemble(self.config.clone(), params)
    }

    /// Output shape of every named layer for a batch of `n`, derived from
    /// the config alone.
    pub fn layer_shapes(&self, n: usize) -> Vec<(String, Vec<usize>)> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let mut s = cfg.input_size;
        for (b, (&k, &f)) in cfg.conv_block_kernels.iter().zip(&cfg.conv_block_filters).enumerate() {
            let c = conv_out(s, k);
            out.push((format!("conv{}.conv", b + 1), vec![n, f, c, c]));
            out.push((format!("conv{}.relu", b + 1), vec![n, f, c, c]));
            s = c / 2;
            out.push((format!("conv{}.pool", b + 1), vec![n, f, s, s]));
        }
        for (r, spec) in cfg.residual_plan.iter().enumerate() {
            out.push((format!("res{}.relu", r + 1), vec![n, spec.out_channels, s, s]));
        }
        out.push(("head.gn".into(), vec![n, cfg.feature_channels(), s, s]));
        out.push(("embedding".into(), vec![n, cfg.embedding_dim]));
        out.push(("logits".into(), vec![n, cfg.num_classes]));
        out
    }

    /// Add all parameters to `graph` as leaves, trainable or constant.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|(name, t)| if trainable { graph.parameter(name, t.clone()) } else { graph.constant(name, t.clone()) })
            .collect()
    }

    fn param_node(&self, bound: &[NodeId], name: &str) -> Result<NodeId, ModelError> {
        self.index.get(name).map(|&i| bound[i]).ok_or_else(|| ModelError::UnknownName(name.to_string()))
    }

    fn conv_gn(
        &self,
        g: &mut Graph<T>,
        bound: &[NodeId],
        x: NodeId,
        conv: &str,
        gn: &str,
        kernel: usize,
    ) -> Result<NodeId, ModelError> {
        let w = self.param_node(bound, &format!("{conv}.weight"))?;
        let b = self.param_node(bound, &format!("{conv}.bias"))?;
        let y = g.conv2d(x, w, b, 1, kernel / 2)?;
        g.set_label(y, conv);
        let gamma = self.param_node(bound, &format!("{gn}.gamma"))?;
        let beta = self.param_node(bound, &format!("{gn}.beta"))?;
        let y = g.group_norm(y, self.config.groupnorm_groups, gamma, beta, self.config.groupnorm_eps)?;
        g.set_label(y, gn);
        Ok(y)
    }

    /// ReLU(stem(x) + skip(x)) for residual block `block` (0-based), using
    /// parameter nodes previously returned by [`NestNet::bind`].
    pub fn residual_block(&self, g: &mut Graph<T>, bound: &[NodeId], x: NodeId, block: usize) -> Result<NodeId, ModelError> {
        let spec = self
            .config
            .residual_plan
            .get(block)
            .ok_or_else(|| ModelError::UnknownName(format!("res{}", block + 1)))?;
        let got = g.value(x).shape();
        if got.len() != 4 || got[1] != spec.in_channels {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "residual_block",
                detail: format!("block {} expects {} input channels, got shape {got:?}", block + 1, spec.in_channels),
            }));
        }
        let p = format!("res{}", block + 1);
        let h = self.conv_gn(g, bound, x, &format!("{p}.stem.conv1"), &format!("{p}.stem.gn1"), spec.stem_kernel)?;
        let h = g.relu(h)?;
        let h = self.conv_gn(g, bound, h, &format!("{p}.stem.conv2"), &format!("{p}.stem.gn2"), spec.stem_kernel)?;
        let skip = match spec.variant {
            SkipVariant::Identity => x,
            SkipVariant::Conv => self.conv_gn(g, bound, x, &format!("{p}.skip.conv"), &format!("{p}.skip.gn"), spec.skip_kernel)?,
        };
        let y = g.add(h, skip)?;
        let y = g.relu(y)?;
        g.set_label(y, format!("{p}.relu"));
        Ok(y)
    }

    /// Run the network on `images` (shape `[N, C, S, S]`). Parameters are
    /// bound as trainable leaves when `trainable` is set, else as constants.
    pub fn forward(&self, g: &mut Graph<T>, images: NodeId, trainable: bool) -> Result<ForwardOutputs, ModelError> {
        let cfg = &self.config;
        let shape = g.value(images).shape();
        if shape.len() != 4 || shape[1] != cfg.input_channels || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
            return Err(ModelError::InputShape { channels: cfg.input_channels, size: cfg.input_size, got: shape.to_vec() });
        }
        let bound = self.bind(g, trainable);
        let mut layers = Vec::new();
        let mut x = images;
        for (b, &k) in cfg.conv_block_kernels.iter().enumerate() {
            let p = format!("conv{}", b + 1);
            let w = self.param_node(&bound, &format!("{p}.conv.weight"))?;
            let bias = self.param_node(&bound, &format!("{p}.conv.bias"))?;
            let y = g.conv2d(x, w, bias, 1, k / 2)?;
            g.set_label(y, format!("{p}.conv"));
            layers.push((format!("{p}.conv"), y));
            let gamma = self.param_node(&bound, &format!("{p}.gn.gamma"))?;
            let beta = self.param_node(&bound, &format!("{p}.gn.beta"))?;
            let y = g.group_norm(y, cfg.groupnorm_groups, gamma, beta, cfg.groupnorm_eps)?;
            g.set_label(y, format!("{p}.gn"));
            let y = g.relu(y)?;
            g.set_label(y, format!("{p}.relu"));
            layers.push((format!("{p}.relu"), y));
            x = g.max_pool2d(y, 2, 2)?;
            g.set_label(x, format!("{p}.pool"));
            layers.push((format!("{p}.pool"), x));
        }
        for block in 0..cfg.residual_plan.len() {
            x = self.residual_block(g, &bound, x, block)?;
            layers.push((format!("res{}.relu", block + 1), x));
        }
        let gamma = self.param_node(&bound, "head.gn.gamma")?;
        let beta = self.param_node(&bound, "head.gn.beta")?;
        x = g.group_norm(x, cfg.groupnorm_groups, gamma, beta, cfg.groupnorm_eps)?;
        g.set_label(x, "head.gn");
        layers.push(("head.gn".into(), x));
        let flat = g.flatten(x)?;
        let w = self.param_node(&bound, "embed.weight")?;
        let b = self.param_node(&bound, "embed.bias")?;
        let embedding = g.fully_connected(flat, w, b)?;
        g.set_label(embedding, "embedding");
        layers.push(("embedding".into(), embedding));
        let h = g.relu(embedding)?;
        let w = self.param_node(&bound, "classifier.weight")?;
        let b = self.param_node(&bound, "classifier.bias")?;
        let logits = g.fully_connected(h, w, b)?;
        g.set_label(logits, "logits");
        layers.push(("logits".into(), logits));
        Ok(ForwardOutputs { input: images, logits, embedding, params: bound, layers })
    }

    /// Logits and raw embeddings of a batch, without gradients.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::new();
        let x = g.input(images.clone(), false);
        let out = self.forward(&mut g, x, false)?;
        Ok((g.value(out.logits).clone(), g.value(out.embedding).clone()))
    }

    /// Unit-norm embeddings, one row per image.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Vec<Vec<T>>, ModelError> {
        let (_, emb) = self.infer(images)?;
        let d = self.config.embedding_dim;
        emb.values()
            .chunks(d)
            .enumerate()
            .map(|(row, v)| {
                let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(ModelError::DegenerateEmbedding(row));
                }
                Ok(v.iter().map(|x| T::of(x.as_f64() / norm)).collect())
            })
            .collect()
    }
}
