//! Server-side hypernetwork mapping a client embedding to the `log alpha`
//! of the noisy layer, plus the client embedding table.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, Activation, DenseLayer, MlpSpec, ModelParams, Tensor};
use crate::metavd::DropoutVector;

pub const HIDDEN_UNITS: usize = 200;
pub const INITIAL_LOG_ALPHA: f64 = -4.0;
const EMBEDDING_INIT_STD: f64 = 0.1;

/// `ceil(1 + num_clients / 4)`.
pub fn embedding_dim(num_clients: usize) -> usize {
    1 + num_clients.div_ceil(4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetState {
    spec: MlpSpec,
    pub psi: ModelParams,
    /// One row per registered client.
    pub embeddings: Tensor,
    /// Shape of the dropout layer's weight matrix.
    target_shape: Vec<usize>,
}

impl HypernetState {
    /// Hidden layers He-uniform, output weights zero with bias
    /// [`INITIAL_LOG_ALPHA`], embeddings `N(0, 0.1^2)`.
    pub fn init(num_clients: usize, target_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::init_with_hidden(num_clients, target_shape, HIDDEN_UNITS, rng)
    }

    pub fn init_with_hidden(
        num_clients: usize,
        target_shape: &[usize],
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k: usize = target_shape.iter().product();
        if num_clients == 0 || k == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "hypernetwork needs positive client, output and hidden counts".into(),
            ));
        }
        let dim = embedding_dim(num_clients);
        let spec = MlpSpec::new(vec![dim, hidden, hidden, k], Activation::LeakyRelu { slope: 0.01 }, None)?;
        let mut output = DenseLayer::zeros(hidden, k);
        output.bias = Tensor::filled(&[k], INITIAL_LOG_ALPHA);
        let psi = ModelParams {
            layers: vec![
                DenseLayer::he_uniform(dim, hidden, rng),
                DenseLayer::he_uniform(hidden, hidden, rng),
                output,
            ],
        };
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
        let embeddings = Tensor::matrix(num_clients, dim, (0..num_clients * dim).map(|_| normal.sample(rng)).collect())?;
        Ok(Self {
            spec,
            psi,
            embeddings,
            target_shape: target_shape.to_vec(),
        })
    }

    /// Rebuilds a state from stored parts, checking shapes.
    pub fn from_parts(psi: ModelParams, embeddings: Tensor, target_shape: Vec<usize>) -> Result<Self> {
        if psi.layers.len() != 3 {
            return Err(Error::shape("hypernetwork layers", &[3], &[psi.layers.len()]));
        }
        let sizes = vec![
            psi.layers[0].weight.shape()[0],
            psi.layers[0].weight.shape()[1],
            psi.layers[1].weight.shape()[1],
            psi.layers[2].weight.shape()[1],
        ];
        let spec = MlpSpec::new(sizes, Activation::LeakyRelu { slope: 0.01 }, None)?;
        psi.check_spec(&spec)?;
        let k: usize = target_shape.iter().product();
        if spec.num_classes() != k {
            return Err(Error::shape("hypernetwork output", &[k], &[spec.num_classes()]));
        }
        if embeddings.shape().len() != 2 || embeddings.cols() != spec.input_dim() {
            return Err(Error::shape(
                "embedding table",
                &[embeddings.rows(), spec.input_dim()],
                embeddings.shape(),
            ));
        }
        Ok(Self {
            spec,
            psi,
            embeddings,
            target_shape,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_clients(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn target_shape(&self) -> &[usize] {
        &self.target_shape
    }

    pub fn embedding(&self, client: usize) -> Result<&[f64]> {
        if client >= self.num_clients() {
            return Err(Error::UnknownClient(client));
        }
        Ok(self.embeddings.row(client))
    }

    /// Mean over all rows of the embedding table.
    pub fn mean_embedding(&self) -> Vec<f64> {
        self.mean_embedding_of(0..self.num_clients())
    }

    pub fn mean_embedding_of(&self, clients: impl IntoIterator<Item = usize>) -> Vec<f64> {
        let mut sum = vec![0.0; self.embedding_dim()];
        let mut n = 0usize;
        for c in clients {
            for (s, v) in sum.iter_mut().zip(self.embeddings.row(c)) {
                *s += v;
            }
            n += 1;
        }
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
        sum
    }

    pub fn predict_log_alpha(&self, client: usize) -> Result<DropoutVector> {
        let e = self.embedding(client)?.to_vec();
        self.predict_from_embedding(&e)
    }

    pub fn predict_from_embedding(&self, embedding: &[f64]) -> Result<DropoutVector> {
        let raw = self.raw_output(embedding)?;
        DropoutVector::new(Tensor::new(self.target_shape.clone(), raw)?)
    }

    fn raw_output(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::matrix(1, embedding.len(), embedding.to_vec())?;
        let (out, _) = kernel::forward(&self.spec, &self.psi, &x, None)?;
        Ok(out.into_data())
    }

    /// Vector-Jacobian product of the (unclamped) output at `embedding`
    /// with `delta`: gradients of `<h(e), delta>` for `psi` and `e`.
    pub fn vjp(&self, embedding: &[f64], delta: &Tensor) -> Result<(ModelParams, Vec<f64>)> {
        let k = self.spec.num_classes();
        if delta.len() != k {
            return Err(Error::shape("delta alpha", &[k], delta.shape()));
        }
        let x = Tensor::matrix(1, embedding.len(), embedding.to_vec())?;
        let (_, cache) = kernel::forward(&self.spec, &self.psi, &x, None)?;
        let cot = Tensor::matrix(1, k, delta.data().to_vec())?;
        let g = kernel::backward(&self.spec, &self.psi, &cache, &cot)?;
        Ok((g.params, g.input.into_data()))
    }

    /// `psi += eta * (1/M) * sum_m g_m * (d alpha_m / d psi)^T delta_m`
    /// over the `M` contributions `(client, delta, g)`.
    pub fn update_psi(&mut self, contributions: &[(usize, Tensor, f64)], eta: f64) -> Result<()> {
        if contributions.is_empty() {
            return Ok(());
        }
        let m = contributions.len() as f64;
        let mut total = ModelParams::zeros_like(&self.spec);
        for (client, delta, g) in contributions {
            let e = self.embedding(*client)?.to_vec();
            let (grad, _) = self.vjp(&e, delta)?;
            total = total.add_scaled(&grad, *g / m)?;
        }
        let next = self.psi.add_scaled(&total, eta)?;
        if !next.is_finite() {
            return Err(Error::NonFinite("hypernetwork parameters".into()));
        }
        self.psi = next;
        Ok(())
    }

    /// `e_m += eta * d<h(e_m), delta>/d e_m`.
    pub fn update_embedding(&mut self, client: usize, delta: &Tensor, eta: f64) -> Result<()> {
        let e = self.embedding(client)?.to_vec();
        let (_, grad) = self.vjp(&e, delta)?;
        let dim = self.embedding_dim();
        let row = &mut self.embeddings.data_mut()[client * dim..(client + 1) * dim];
        for (v, g) in row.iter_mut().zip(&grad) {
            *v += eta * g;
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of client {client}")));
        }
        Ok(())
    }
}
