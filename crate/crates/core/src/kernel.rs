//! Dense tensor kernel with hand-written reverse-mode gradients.
//!
//! The kernel only knows about the shapes this crate needs: a stack of
//! dense layers with an elementwise activation between them, where one
//! hidden layer may carry multiplicative Gaussian weight noise
//! `w = theta + sqrt(alpha) * theta * eps`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &[n], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// Gathers the given rows into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("cannot select zero rows".into()));
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

/// `a (n x k) * b (k x m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `a^T (k x n) * b (n x m)` where `a` is stored `n x k`.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bij) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += aip * bij;
            }
        }
    }
    out
}

/// `a (n x m) * b^T` where `b` is stored `k x m`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = arow.iter().zip(&b[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a dense network. The activation is applied after every layer
/// except the last one, which produces logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Dense layer carrying dropout variables. Must be the last hidden
    /// layer (the one feeding the output layer).
    pub metavd_layer: Option<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, metavd_layer: Option<usize>) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            metavd_layer,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec("need at least an input and an output size".into()));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!(
                "layer sizes must be positive: {:?}",
                self.layer_sizes
            )));
        }
        if let Some(idx) = self.metavd_layer {
            let n = self.num_layers();
            if n < 2 || idx != n - 2 {
                return Err(Error::InvalidSpec(format!(
                    "dropout layer index {idx} must name the last hidden layer of a {n}-layer network"
                )));
            }
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return Err(Error::InvalidSpec("leaky relu slope must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_shape(&self, layer: usize) -> [usize; 2] {
        [self.layer_sizes[layer], self.layer_sizes[layer + 1]]
    }

    /// Number of weights in the dropout layer (biases excluded).
    pub fn metavd_weight_count(&self) -> Option<usize> {
        self.metavd_layer.map(|l| self.layer_sizes[l] * self.layer_sizes[l + 1])
    }
}

/// One dense layer: `out = x W + b`, `W` stored `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor {
                shape: vec![fan_in, fan_out],
                data,
            },
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Parameters of a dense network, one entry per layer. Gradients use the
/// same type (see [`GradBundle`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
}

impl ModelParams {
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let [i, o] = spec.layer_shape(l);
                DenseLayer::he_uniform(i, o, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(spec: &MlpSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let [i, o] = spec.layer_shape(l);
                DenseLayer::zeros(i, o)
            })
            .collect();
        Self { layers }
    }

    pub fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(Error::shape(
                "layer count",
                &[spec.num_layers()],
                &[self.layers.len()],
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let shape = spec.layer_shape(l);
            if layer.weight.shape() != shape {
                return Err(Error::shape(format!("layer {l} weight"), &shape, layer.weight.shape()));
            }
            if layer.bias.shape() != [shape[1]] {
                return Err(Error::shape(format!("layer {l} bias"), &[shape[1]], layer.bias.shape()));
            }
        }
        Ok(())
    }

    pub fn check_same_structure(&self, other: &ModelParams, context: &str) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(context, &[self.layers.len()], &[other.layers.len()]));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            a.weight.check_same_shape(&b.weight, context)?;
            a.bias.check_same_shape(&b.bias, context)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every parameter tensor in a fixed order (w0, b0, w1, b1, ...).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &ModelParams, scale: f64) -> Result<ModelParams> {
        self.check_same_structure(other, "add_scaled")?;
        let mut out = self.clone();
        for (t, o) in out.tensors_mut().zip(other.tensors()) {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Deterministic seed for the weight noise of one forward call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseSeed(pub u64);

impl NoiseSeed {
    /// Standard normal draws, one per weight, in row-major order.
    pub fn sample(self, shape: &[usize]) -> Tensor {
        let mut rng = rng::rng_for(self.0, &[rng::stream::LOCAL_NOISE]);
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Noise {
    Seeded(NoiseSeed),
    /// `eps = 0`: the noisy layer reduces to its mean weights.
    Zero,
    Fixed(Tensor),
}

/// Dropout input for the noisy layer: log dropout variables shaped like
/// the layer's weight, plus the noise source.
#[derive(Clone, Debug)]
pub struct VdInput<'a> {
    pub log_alpha: &'a Tensor,
    pub noise: Noise,
}

#[derive(Clone, Debug)]
struct VdCache {
    layer: usize,
    log_alpha: Tensor,
    eps: Tensor,
    /// sqrt(alpha) per weight.
    scale: Vec<f64>,
    effective_weight: Tensor,
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct Cache {
    layer_sizes: Vec<usize>,
    fingerprint: u64,
    batch: usize,
    /// Input to each layer (activations), `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    vd: Option<VdCache>,
}

impl Cache {
    /// The weight noise sampled by the forward call, if a noisy layer ran.
    pub fn noise(&self) -> Option<&Tensor> {
        self.vd.as_ref().map(|v| &v.eps)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Gradients mirroring [`ModelParams`], plus the gradient of the dropout
/// log-variables when a noisy layer was active and the gradient with
/// respect to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub params: ModelParams,
    pub log_alpha: Option<Tensor>,
    pub input: Tensor,
}

pub fn forward(
    spec: &MlpSpec,
    params: &ModelParams,
    input: &Tensor,
    vd: Option<VdInput<'_>>,
) -> Result<(Tensor, Cache)> {
    params.check_spec(spec)?;
    if input.shape().len() != 2 || input.cols() != spec.input_dim() {
        return Err(Error::shape(
            "layer 0 input",
            &[input.shape().first().copied().unwrap_or(0), spec.input_dim()],
            input.shape(),
        ));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("forward input".into()));
    }

    let vd_cache = match vd {
        None => None,
        Some(vd) => {
            let layer = spec.metavd_layer.ok_or_else(|| {
                Error::InvalidSpec("dropout input given but spec has no dropout layer".into())
            })?;
            let theta = &params.layers[layer].weight;
            if vd.log_alpha.shape() != theta.shape() {
                return Err(Error::shape(
                    format!("layer {layer} log alpha"),
                    theta.shape(),
                    vd.log_alpha.shape(),
                ));
            }
            if !vd.log_alpha.is_finite() {
                return Err(Error::NonFinite("log alpha".into()));
            }
            let eps = match vd.noise {
                Noise::Seeded(seed) => seed.sample(theta.shape()),
                Noise::Zero => Tensor::zeros(theta.shape()),
                Noise::Fixed(t) => {
                    if t.shape() != theta.shape() {
                        return Err(Error::shape(format!("layer {layer} noise"), theta.shape(), t.shape()));
                    }
                    t
                }
            };
            let scale: Vec<f64> = vd.log_alpha.data().iter().map(|la| (0.5 * la).exp()).collect();
            let w: Vec<f64> = theta
                .data()
                .iter()
                .zip(&scale)
                .zip(eps.data())
                .map(|((&t, &s), &e)| t + s * t * e)
                .collect();
            Some(VdCache {
                layer,
                log_alpha: vd.log_alpha.clone(),
                eps,
                scale,
                effective_weight: Tensor {
                    shape: theta.shape().to_vec(),
                    data: w,
                },
            })
        }
    };

    let batch = input.rows();
    let n_layers = spec.num_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut act = input.data().to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let [fan_in, fan_out] = spec.layer_shape(l);
        let w = match &vd_cache {
            Some(v) if v.layer == l => v.effective_weight.data(),
            _ => layer.weight.data(),
        };
        let mut z = matmul(&act, w, batch, fan_in, fan_out);
        for row in z.chunks_mut(fan_out) {
            for (zi, b) in row.iter_mut().zip(layer.bias.data()) {
                *zi += b;
            }
        }
        let next = if l + 1 < n_layers {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        inputs.push(act);
        pre.push(z);
        act = next;
    }

    if act.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let logits = Tensor {
        shape: vec![batch, spec.num_classes()],
        data: act,
    };
    let cache = Cache {
        layer_sizes: spec.layer_sizes.clone(),
        fingerprint: params.fingerprint(),
        batch,
        inputs,
        pre,
        vd: vd_cache,
    };
    Ok((logits, cache))
}

pub fn backward(
    spec: &MlpSpec,
    params: &ModelParams,
    cache: &Cache,
    loss_cotangent: &Tensor,
) -> Result<GradBundle> {
    if cache.layer_sizes != spec.layer_sizes {
        return Err(Error::StaleCache(format!(
            "cache built for layers {:?}, spec has {:?}",
            cache.layer_sizes, spec.layer_sizes
        )));
    }
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache("parameters changed since forward".into()));
    }
    let expected = [cache.batch, spec.num_classes()];
    if loss_cotangent.shape() != expected {
        return Err(Error::shape("logit cotangent", &expected, loss_cotangent.shape()));
    }

    let n_layers = spec.num_layers();
    let mut grads = ModelParams::zeros_like(spec);
    let mut log_alpha_grad = None;
    let mut upstream = loss_cotangent.data().to_vec();
    for l in (0..n_layers).rev() {
        let [fan_in, fan_out] = spec.layer_shape(l);
        if l + 1 < n_layers {
            for (u, &z) in upstream.iter_mut().zip(&cache.pre[l]) {
                *u *= spec.activation.derivative(z);
            }
        }
        let dw = matmul_tn(&cache.inputs[l], &upstream, cache.batch, fan_in, fan_out);
        let mut db = vec![0.0; fan_out];
        for row in upstream.chunks(fan_out) {
            for (d, u) in db.iter_mut().zip(row) {
                *d += u;
            }
        }
        grads.layers[l].bias.data = db;

        let theta = params.layers[l].weight.data();
        match &cache.vd {
            Some(v) if v.layer == l => {
                let eps = v.eps.data();
                grads.layers[l].weight.data = dw
                    .iter()
                    .zip(&v.scale)
                    .zip(eps)
                    .map(|((&g, &s), &e)| g * (1.0 + s * e))
                    .collect();
                // d w / d log_alpha = theta * eps * 0.5 * sqrt(alpha)
                let data = dw
                    .iter()
                    .zip(theta)
                    .zip(&v.scale)
                    .zip(eps)
                    .map(|(((&g, &t), &s), &e)| g * t * e * 0.5 * s)
                    .collect();
                log_alpha_grad = Some(Tensor {
                    shape: v.log_alpha.shape().to_vec(),
                    data,
                });
                upstream = matmul_nt(&upstream, v.effective_weight.data(), cache.batch, fan_out, fan_in);
            }
            _ => {
                grads.layers[l].weight.data = dw;
                upstream = matmul_nt(&upstream, theta, cache.batch, fan_out, fan_in);
            }
        }
    }

    Ok(GradBundle {
        params: grads,
        log_alpha: log_alpha_grad,
        input: Tensor {
            shape: vec![cache.batch, spec.input_dim()],
            data: upstream,
        },
    })
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy logits",
            &[labels.len(), logits.cols()],
            logits.shape(),
        ));
    }
    let n = labels.len();
    let c = logits.cols();
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(n * c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: c,
            });
        }
        let row = logits.row(i);
        let probs = softmax(row);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        cot.extend(probs.iter().enumerate().map(|(j, &p)| {
            let onehot = if j == y { 1.0 } else { 0.0 };
            (p - onehot) / n as f64
        }));
    }
    Ok((
        loss / n as f64,
        Tensor {
            shape: vec![n, c],
            data: cot,
        },
    ))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `params - lr * grads`.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    params.add_scaled(grads, -lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(n: usize) -> (MlpSpec, ModelParams) {
        let spec = MlpSpec::new(vec![n, n], Activation::Identity, None).unwrap();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let params = ModelParams {
            layers: vec![DenseLayer {
                weight: Tensor::matrix(n, n, w).unwrap(),
                bias: Tensor::zeros(&[n]),
            }],
        };
        (spec, params)
    }

    fn small_vd_net(seed: u64) -> (MlpSpec, ModelParams, Tensor) {
        let spec = MlpSpec::new(vec![3, 4, 3, 2], Activation::LeakyRelu { slope: 0.01 }, Some(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&spec, &mut rng);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let la = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-3.0..1.0)).collect()).unwrap();
        (spec, params, la)
    }

    #[test]
    fn identity_network_passes_input_through() {
        let (spec, params) = identity_net(3);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let (logits, _) = forward(&spec, &params, &x, None).unwrap();
        assert_eq!(logits, x);
    }

    #[test]
    fn hand_computed_two_layer_net() {
        // 2-2-2, relu hidden.
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Relu, None).unwrap();
        let params = ModelParams {
            layers: vec![
                DenseLayer {
                    weight: Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
                    bias: Tensor::vector(vec![0.5, -0.25]),
                },
                DenseLayer {
                    weight: Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 3.0]).unwrap(),
                    bias: Tensor::vector(vec![0.0, 1.0]),
                },
            ],
        };
        // x = (1, 2): z1 = (1 + 4 + 0.5, -1 + 1 - 0.25) = (5.5, -0.25) -> relu (5.5, 0)
        // z2 = (5.5, 11 + 1) = (5.5, 12)
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let (logits, _) = forward(&spec, &params, &x, None).unwrap();
        assert_eq!(logits.data(), &[5.5, 12.0]);
    }

    #[test]
    fn zero_noise_matches_deterministic_forward() {
        let (spec, params, la) = small_vd_net(3);
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap();
        let (plain, _) = forward(&spec, &params, &x, None).unwrap();
        let vd = VdInput {
            log_alpha: &la,
            noise: Noise::Zero,
        };
        let (noisy, _) = forward(&spec, &params, &x, Some(vd)).unwrap();
        for (a, b) in plain.data().iter().zip(noisy.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_the_problem() {
        let (spec, params) = identity_net(3);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let err = forward(&spec, &params, &x, None).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");

        let mut bad = params.clone();
        bad.layers[0].weight.data_mut()[0] = f64::NAN;
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(forward(&spec, &bad, &x, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn vd_without_dropout_layer_is_rejected() {
        let (spec, params) = identity_net(2);
        let la = Tensor::zeros(&[2, 2]);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let vd = VdInput {
            log_alpha: &la,
            noise: Noise::Zero,
        };
        assert!(forward(&spec, &params, &x, Some(vd)).is_err());
    }

    #[test]
    fn dropout_layer_must_be_last_hidden() {
        assert!(MlpSpec::new(vec![3, 4, 3, 2], Activation::Relu, Some(0)).is_err());
        assert!(MlpSpec::new(vec![3, 4, 3, 2], Activation::Relu, Some(2)).is_err());
        assert!(MlpSpec::new(vec![3, 4, 3, 2], Activation::Relu, Some(1)).is_ok());
        assert!(MlpSpec::new(vec![3], Activation::Relu, None).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let (spec, params, la) = small_vd_net(5);
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap();
        let vd = VdInput {
            log_alpha: &la,
            noise: Noise::Seeded(NoiseSeed(9)),
        };
        let (_, cache) = forward(&spec, &params, &x, Some(vd)).unwrap();
        let g = backward(&spec, &params, &cache, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        assert!(g.log_alpha.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_alpha_gradient_vanishes_at_zero_noise() {
        let (spec, params, la) = small_vd_net(6);
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap();
        let vd = VdInput {
            log_alpha: &la,
            noise: Noise::Zero,
        };
        let (logits, cache) = forward(&spec, &params, &x, Some(vd)).unwrap();
        let (_, cot) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        let g = backward(&spec, &params, &cache, &cot).unwrap();
        assert!(g.log_alpha.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (spec, params, _) = small_vd_net(7);
        let x = Tensor::matrix(1, 3, vec![0.1, -0.4, 0.9]).unwrap();
        let (_, cache) = forward(&spec, &params, &x, None).unwrap();
        let mut moved = params.clone();
        moved.layers[0].bias.data_mut()[0] += 1.0;
        let cot = Tensor::zeros(&[1, 2]);
        assert!(matches!(backward(&spec, &moved, &cache, &cot), Err(Error::StaleCache(_))));
        let other = MlpSpec::new(vec![3, 5, 3, 2], Activation::Relu, Some(1)).unwrap();
        assert!(matches!(backward(&other, &params, &cache, &cot), Err(Error::StaleCache(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::matrix(2, 4, vec![0.3; 8]).unwrap();
        let (loss, _) = softmax_cross_entropy(&uniform, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let saturated = Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&saturated, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);

        let two = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let (loss, cot) = softmax_cross_entropy(&two, &[1]).unwrap();
        assert!((loss - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!(cot.data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let (spec, mut params) = identity_net(1);
        params.layers[0].weight.data_mut()[0] = 1.0;
        let mut grads = ModelParams::zeros_like(&spec);
        grads.layers[0].weight.data_mut()[0] = 0.5;
        let stepped = sgd_step(&params, &grads, 0.1).unwrap();
        assert!((stepped.layers[0].weight.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(sgd_step(&params, &grads, 0.0).unwrap(), params);
        stepped.check_spec(&spec).unwrap();
        assert!(sgd_step(&params, &grads, -1.0).is_err());
    }

    #[test]
    fn sgd_step_rejects_mismatched_bundle() {
        let (_, params) = identity_net(2);
        let (other_spec, _) = identity_net(3);
        let grads = ModelParams::zeros_like(&other_spec);
        assert!(sgd_step(&params, &grads, 0.1).is_err());
    }
}
