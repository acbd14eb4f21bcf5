//! A small convolutional classifier with an explicit backward pass.
//!
//! The network is a stack of `conv → ReLU → (max-pool)` blocks followed by a
//! global-average-pool and an affine head. The output of the last block is
//! the set of feature maps Grad-CAM explains. Every intermediate needed for
//! back-propagation is kept in the [`ForwardTrace`], so gradients with
//! respect to the feature maps and to every parameter can be queried after
//! the fact.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InstanceId;
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::linalg::{gemm, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    None,
    Max2,
}

/// One convolutional block: `conv(kernel, stride, padding) → ReLU → pool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_maps: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: Pool,
}

impl ConvSpec {
    pub const fn new(out_maps: usize, kernel: usize, padding: usize, pool: Pool) -> Self {
        Self {
            out_maps,
            kernel,
            stride: 1,
            padding,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv_stack: Vec<ConvSpec>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    /// 64×64×1 input, three 3×3 blocks (8, 16, 32 maps) with two pools,
    /// giving K = 32 feature maps on a 16×16 grid and a 2-class head.
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            input_channels: 1,
            conv_stack: vec![
                ConvSpec::new(8, 3, 1, Pool::Max2),
                ConvSpec::new(16, 3, 1, Pool::Max2),
                ConvSpec::new(32, 3, 1, Pool::None),
            ],
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// An 8×8 toy network with K = 2 maps on a 2×2 grid, small enough for
    /// exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input_height: 8,
            input_width: 8,
            input_channels: 1,
            conv_stack: vec![
                ConvSpec::new(3, 3, 1, Pool::Max2),
                ConvSpec::new(2, 3, 1, Pool::Max2),
            ],
            num_classes: 2,
        }
    }

    /// Number of feature maps K in the last block.
    pub fn feature_maps(&self) -> usize {
        self.conv_stack.last().map_or(0, |l| l.out_maps)
    }

    /// `(u, v)` of the feature grid.
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        let geometry = self.geometry()?;
        let last = geometry.last().expect("validated non-empty stack");
        Ok((last.out_h, last.out_w))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().map(|_| ())
    }

    pub(crate) fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.conv_stack.is_empty() {
            return Err(Error::Config("empty conv stack".into()));
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("zero-sized input".into()));
        }
        let (mut c, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.conv_stack.len());
        for (i, spec) in self.conv_stack.iter().enumerate() {
            if spec.out_maps == 0 || spec.kernel == 0 || spec.stride == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            let padded_h = h + 2 * spec.padding;
            let padded_w = w + 2 * spec.padding;
            if padded_h < spec.kernel || padded_w < spec.kernel {
                return Err(Error::Config(format!(
                    "layer {i}: kernel {} larger than padded input {padded_h}x{padded_w}",
                    spec.kernel
                )));
            }
            let conv_h = (padded_h - spec.kernel) / spec.stride + 1;
            let conv_w = (padded_w - spec.kernel) / spec.stride + 1;
            let (out_h, out_w) = match spec.pool {
                Pool::None => (conv_h, conv_w),
                Pool::Max2 => (conv_h / 2, conv_w / 2),
            };
            if out_h == 0 || out_w == 0 {
                return Err(Error::Config(format!(
                    "layer {i} pools a {conv_h}x{conv_w} map below 1x1"
                )));
            }
            out.push(LayerGeometry {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: spec.out_maps,
                conv_h,
                conv_w,
                out_h,
                out_w,
                kernel: spec.kernel,
                stride: spec.stride,
                padding: spec.padding,
                pool: spec.pool,
            });
            c = spec.out_maps;
            h = out_h;
            w = out_w;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    conv_h: usize,
    conv_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pool: Pool,
}

impl LayerGeometry {
    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn conv_len(&self) -> usize {
        self.conv_h * self.conv_w
    }
}

/// A named parameter array with its logical shape (row-major data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Weights and biases of every layer, in the order
/// `conv0.weight, conv0.bias, …, head.weight, head.bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    config: ModelConfig,
    tensors: Vec<ParamTensor>,
    seed: u64,
}

impl Parameters {
    /// Reassembles parameters from stored tensors, checking them against
    /// the shapes the config implies.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<ParamTensor>, seed: u64) -> Result<Self> {
        let expected = expected_shapes(&config)?;
        if expected.len() != tensors.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(&expected) {
            let n: usize = shape.iter().product();
            if &t.shape != shape || t.data.len() != n {
                return Err(Error::Input(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, t.shape, shape
                )));
            }
        }
        Ok(Self {
            config,
            tensors,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Head weight matrix, `num_classes × K`.
    pub fn head_weight(&self) -> &[f64] {
        &self.tensors[self.tensors.len() - 2].data
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.tensors[self.tensors.len() - 1].data
    }

    pub fn head_weight_mut(&mut self) -> &mut [f64] {
        let n = self.tensors.len();
        &mut self.tensors[n - 2].data
    }

    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        let n = self.tensors.len();
        &mut self.tensors[n - 1].data
    }

    fn conv_weight(&self, layer: usize) -> &[f64] {
        &self.tensors[2 * layer].data
    }

    fn conv_bias(&self, layer: usize) -> &[f64] {
        &self.tensors[2 * layer + 1].data
    }

    /// Reads the `i`-th scalar in flattened tensor order.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in &self.tensors {
            if index < t.data.len() {
                return t.data[index];
            }
            index -= t.data.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in &mut self.tensors {
            if index < t.data.len() {
                t.data[index] = value;
                return;
            }
            index -= t.data.len();
        }
        panic!("flat parameter index out of range")
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &Parameters) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn expected_shapes(config: &ModelConfig) -> Result<Vec<Vec<usize>>> {
    let geometry = config.geometry()?;
    let mut shapes = Vec::with_capacity(2 * geometry.len() + 2);
    for g in &geometry {
        shapes.push(vec![g.out_c, g.in_c, g.kernel, g.kernel]);
        shapes.push(vec![g.out_c]);
    }
    shapes.push(vec![config.num_classes, config.feature_maps()]);
    shapes.push(vec![config.num_classes]);
    Ok(shapes)
}

/// Gradients laid out exactly like [`Parameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in &self.tensors {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("flat gradient index out of range")
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.iter().copied())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `K` feature maps of `height × width`, map-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMaps {
    count: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMaps {
    pub fn from_vec(count: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != count * height * width {
            return Err(Error::Input(format!(
                "{count} maps of {height}x{width} need {} values, got {}",
                count * height * width,
                data.len()
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            data,
        })
    }

    pub fn from_grids(grids: &[Grid]) -> Result<Self> {
        let (height, width) = grids.first().map_or((0, 0), Grid::dims);
        let mut data = Vec::with_capacity(grids.len() * height * width);
        for g in grids {
            if g.dims() != (height, width) {
                return Err(Error::Input("feature maps of unequal size".into()));
            }
            data.extend_from_slice(g.as_slice());
        }
        Self::from_vec(grids.len(), height, width, data)
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn map(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn grid(&self, k: usize) -> Grid {
        Grid::from_vec(self.height, self.width, self.map(k).to_vec()).expect("consistent dims")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    cols: Vec<f64>,
    active: Vec<bool>,
    argmax: Option<Vec<u32>>,
}

/// Result of one forward pass, including everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    pub feature_maps: FeatureMaps,
    pub input_ref: Option<InstanceId>,
    pooled: Vec<f64>,
    cache: Vec<LayerCache>,
}

impl PartialEq for ForwardTrace {
    fn eq(&self, other: &Self) -> bool {
        self.logits == other.logits
            && self.feature_maps == other.feature_maps
            && self.input_ref == other.input_ref
    }
}

impl ForwardTrace {
    pub fn with_ref(mut self, id: InstanceId) -> Self {
        self.input_ref = Some(id);
        self
    }
}

/// Upstream gradient seeding a backward pass: `∂L/∂logits` plus optional
/// direct contributions to the feature maps and to the head weights (the
/// latter is how Grad-CAM weights route their gradient into the head).
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoint {
    pub logits: Vec<f64>,
    pub features: Option<Vec<f64>>,
    pub head_weight: Option<Vec<f64>>,
}

impl Adjoint {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        Self {
            logits,
            features: None,
            head_weight: None,
        }
    }
}

/// Conv layers draw from `U(±√(6/fan_in))` (He-uniform, suited to the ReLU
/// stack); the head draws from `U(±1/√K)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    let shapes = expected_shapes(config)?;
    let geometry = config.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, g) in geometry.iter().enumerate() {
        let bound = libm::sqrt(6.0 / g.patch_len() as f64);
        for (suffix, shape) in [("weight", &shapes[2 * i]), ("bias", &shapes[2 * i + 1])] {
            tensors.push(uniform_tensor(
                format!("conv{i}.{suffix}"),
                shape.clone(),
                bound,
                &mut rng,
            ));
        }
    }
    let bound = 1.0 / libm::sqrt(config.feature_maps() as f64);
    let n = shapes.len();
    tensors.push(uniform_tensor("head.weight".into(), shapes[n - 2].clone(), bound, &mut rng));
    tensors.push(uniform_tensor("head.bias".into(), shapes[n - 1].clone(), bound, &mut rng));
    Ok(Parameters {
        config: config.clone(),
        tensors,
        seed,
    })
}

fn uniform_tensor(name: String, shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> ParamTensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    ParamTensor { name, shape, data }
}

pub fn forward(params: &Parameters, image: &Image) -> Result<ForwardTrace> {
    let config = &params.config;
    if image.channels() != config.input_channels
        || image.height() != config.input_height
        || image.width() != config.input_width
    {
        return Err(Error::Input(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.channels(),
            image.height(),
            image.width(),
            config.input_channels,
            config.input_height,
            config.input_width
        )));
    }
    let geometry = config.geometry()?;
    let mut activation = image.as_slice().to_vec();
    let mut cache = Vec::with_capacity(geometry.len());
    for (layer, g) in geometry.iter().enumerate() {
        let cols = im2col(&activation, g);
        let mut z = vec![0.0; g.out_c * g.conv_len()];
        gemm(
            g.out_c,
            g.patch_len(),
            g.conv_len(),
            1.0,
            params.conv_weight(layer),
            Layout::Normal,
            &cols,
            Layout::Normal,
            0.0,
            &mut z,
        );
        let bias = params.conv_bias(layer);
        let mut active = vec![false; z.len()];
        for (o, chunk) in z.chunks_exact_mut(g.conv_len()).enumerate() {
            let offset = o * g.conv_len();
            for (j, v) in chunk.iter_mut().enumerate() {
                *v += bias[o];
                if *v > 0.0 {
                    active[offset + j] = true;
                } else {
                    *v = 0.0;
                }
            }
        }
        let (next, argmax) = match g.pool {
            Pool::None => (z, None),
            Pool::Max2 => {
                let (pooled, idx) = max_pool2(&z, g);
                (pooled, Some(idx))
            }
        };
        cache.push(LayerCache {
            cols,
            active,
            argmax,
        });
        activation = next;
    }
    let last = geometry.last().expect("validated non-empty stack");
    let area = (last.out_h * last.out_w) as f64;
    let k = last.out_c;
    let pooled: Vec<f64> = activation
        .chunks_exact(last.out_h * last.out_w)
        .map(|m| m.iter().sum::<f64>() / area)
        .collect();
    let weight = params.head_weight();
    let logits = params
        .head_bias()
        .iter()
        .enumerate()
        .map(|(c, b)| b + (0..k).map(|j| weight[c * k + j] * pooled[j]).sum::<f64>())
        .collect();
    Ok(ForwardTrace {
        logits,
        feature_maps: FeatureMaps::from_vec(k, last.out_h, last.out_w, activation)?,
        input_ref: None,
        pooled,
        cache,
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &Parameters, image: &Image) -> Result<(usize, Vec<f64>)> {
    let trace = forward(params, image)?;
    Ok(predict_from_logits(&trace.logits))
}

pub fn predict_from_logits(logits: &[f64]) -> (usize, Vec<f64>) {
    (argmax(logits), softmax(logits))
}

/// `∂Y^c/∂A^k_{i,j}` for every map and cell, by back-propagating a one-hot
/// logit gradient through the pooling head.
pub fn grad_wrt_features(
    params: &Parameters,
    trace: &ForwardTrace,
    class_index: usize,
) -> Result<FeatureMaps> {
    let classes = params.config.num_classes;
    if class_index >= classes {
        return Err(Error::Input(format!(
            "class {class_index} out of range for {classes} classes"
        )));
    }
    let mut seed = vec![0.0; classes];
    seed[class_index] = 1.0;
    let dpooled = head_input_grad(params, &seed);
    let (h, w) = trace.feature_maps.dims();
    let data = spread_pooled_grad(&dpooled, h * w);
    FeatureMaps::from_vec(dpooled.len(), h, w, data)
}

fn head_input_grad(params: &Parameters, dlogits: &[f64]) -> Vec<f64> {
    let k = params.config.feature_maps();
    let weight = params.head_weight();
    (0..k)
        .map(|j| {
            dlogits
                .iter()
                .enumerate()
                .map(|(c, d)| weight[c * k + j] * d)
                .sum()
        })
        .collect()
}

fn spread_pooled_grad(dpooled: &[f64], area: usize) -> Vec<f64> {
    let scale = 1.0 / area as f64;
    dpooled
        .iter()
        .flat_map(|&d| core::iter::repeat_n(d * scale, area))
        .collect()
}

/// Parameter gradients of the scalar whose upstream gradient is `adjoint`.
pub fn grad_wrt_params(params: &Parameters, trace: &ForwardTrace, adjoint: &Adjoint) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params);
    accumulate_grad(params, trace, adjoint, &mut grads)?;
    Ok(grads)
}

/// Adds the parameter gradient for `adjoint` into `grads`.
pub fn accumulate_grad(
    params: &Parameters,
    trace: &ForwardTrace,
    adjoint: &Adjoint,
    grads: &mut Gradients,
) -> Result<()> {
    let config = &params.config;
    let classes = config.num_classes;
    let k = config.feature_maps();
    if adjoint.logits.len() != classes {
        return Err(Error::Input(format!(
            "logit adjoint has {} entries, expected {classes}",
            adjoint.logits.len()
        )));
    }
    let (fh, fw) = trace.feature_maps.dims();
    let area = fh * fw;
    if let Some(f) = &adjoint.features {
        if f.len() != k * area {
            return Err(Error::Input("feature adjoint has wrong size".into()));
        }
    }
    if let Some(hw) = &adjoint.head_weight {
        if hw.len() != classes * k {
            return Err(Error::Input("head-weight adjoint has wrong size".into()));
        }
    }
    let geometry = config.geometry()?;
    let n = grads.tensors.len();

    {
        let dw = &mut grads.tensors[n - 2];
        for c in 0..classes {
            for j in 0..k {
                dw[c * k + j] += adjoint.logits[c] * trace.pooled[j];
            }
        }
        if let Some(hw) = &adjoint.head_weight {
            for (d, h) in dw.iter_mut().zip(hw) {
                *d += h;
            }
        }
    }
    for (d, g) in grads.tensors[n - 1].iter_mut().zip(&adjoint.logits) {
        *d += g;
    }

    let dpooled = head_input_grad(params, &adjoint.logits);
    let mut upstream = spread_pooled_grad(&dpooled, area);
    if let Some(f) = &adjoint.features {
        for (u, d) in upstream.iter_mut().zip(f) {
            *u += d;
        }
    }

    for (layer, g) in geometry.iter().enumerate().rev() {
        let cache = &trace.cache[layer];
        let mut dz = match &cache.argmax {
            None => upstream,
            Some(idx) => {
                let mut dz = vec![0.0; g.out_c * g.conv_len()];
                for (i, &src) in idx.iter().enumerate() {
                    dz[src as usize] += upstream[i];
                }
                dz
            }
        };
        for (d, &a) in dz.iter_mut().zip(&cache.active) {
            if !a {
                *d = 0.0;
            }
        }
        gemm(
            g.out_c,
            g.conv_len(),
            g.patch_len(),
            1.0,
            &dz,
            Layout::Normal,
            &cache.cols,
            Layout::Transposed,
            1.0,
            &mut grads.tensors[2 * layer],
        );
        for (o, chunk) in dz.chunks_exact(g.conv_len()).enumerate() {
            grads.tensors[2 * layer + 1][o] += chunk.iter().sum::<f64>();
        }
        if layer == 0 {
            break;
        }
        let mut dcols = vec![0.0; g.patch_len() * g.conv_len()];
        gemm(
            g.patch_len(),
            g.out_c,
            g.conv_len(),
            1.0,
            params.conv_weight(layer),
            Layout::Transposed,
            &dz,
            Layout::Normal,
            0.0,
            &mut dcols,
        );
        upstream = col2im(&dcols, g);
    }
    Ok(())
}

fn im2col(input: &[f64], g: &LayerGeometry) -> Vec<f64> {
    let n = g.conv_len();
    let mut cols = vec![0.0; g.patch_len() * n];
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.conv_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..][..g.in_w];
                    let dst = &mut row[oy * g.conv_w..][..g.conv_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &LayerGeometry) -> Vec<f64> {
    let n = g.conv_len();
    let mut out = vec![0.0; g.in_c * g.in_h * g.in_w];
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    for c in 0..g.in_c {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                for oy in 0..g.conv_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..][..g.in_w];
                    let src = &row[oy * g.conv_w..][..g.conv_w];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2/stride-2 max pool; records the flat source index of every output.
fn max_pool2(input: &[f64], g: &LayerGeometry) -> (Vec<f64>, Vec<u32>) {
    let (h, w) = (g.conv_h, g.conv_w);
    let mut out = Vec::with_capacity(g.out_c * g.out_h * g.out_w);
    let mut idx = Vec::with_capacity(out.capacity());
    for c in 0..g.out_c {
        let base = c * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[j] > input[best] {
                        best = j;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}
