//! Finite-difference checks of every analytic gradient in the crate.
//!
//! The loss used on the numeric side comes from [`oracle_forward`], a
//! plain-loop forward pass that shares no code with the kernel.

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hypernet::HypernetState;
use crate::kernel::{self, Activation, MlpSpec, ModelParams, Noise, Tensor, VdInput};
use crate::metavd::{elbo_loss_and_grads, kl_gradient, kl_term, Batch, DropoutVector, ElboConfig, KlScaling};
use crate::rng::rng_for;

/// Coarse step of the extrapolated five-point stencil. Truncation is
/// `O(h^6)`, so a step this large keeps roundoff small as well.
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor of the relative error, so that coordinates whose
/// gradient is numerically zero are compared in absolute terms. Five-point
/// roundoff on losses of order 10 is about 1e-11 absolute.
pub const REL_FLOOR: f64 = 1e-5;
/// Configurations whose hidden pre-activations come closer than this to a
/// kink are redrawn. A stencil that still flips a hidden sign (large
/// alpha amplifies the probe) discards its whole case as well.
const KINK_MARGIN: f64 = 5e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Flip the sign of the KL gradient on the analytic side.
    KlSignFlip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub cases: usize,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 100,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn five_point(h: f64, f: &mut impl FnMut(f64) -> f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

/// Richardson extrapolation of the five-point stencil at `h` and `h/2`,
/// which cancels its `h^4` term.
fn central(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let coarse = five_point(h, &mut f);
    let fine = five_point(0.5 * h, &mut f);
    (16.0 * fine - coarse) / 15.0
}

/// Pre-activations of every layer, computed with explicit loops. `noise`
/// is `(layer, log_alpha, eps)` for the noisy layer.
pub fn oracle_forward(
    spec: &MlpSpec,
    params: &ModelParams,
    x: &Tensor,
    noise: Option<(usize, &[f64], &[f64])>,
) -> Vec<Vec<Vec<f64>>> {
    let act = |z: f64| match spec.activation {
        Activation::LeakyRelu { slope } => {
            if z > 0.0 {
                z
            } else {
                slope * z
            }
        }
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
    };
    let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    let mut pre_all = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let [fan_in, fan_out] = spec.layer_shape(l);
        let mut w = layer.weight.data().to_vec();
        if let Some((nl, la, eps)) = noise {
            if nl == l {
                for k in 0..w.len() {
                    w[k] += (0.5 * la[k]).exp() * w[k] * eps[k];
                }
            }
        }
        let pre: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                (0..fan_out)
                    .map(|j| layer.bias.data()[j] + (0..fan_in).map(|i| r[i] * w[i * fan_out + j]).sum::<f64>())
                    .collect()
            })
            .collect();
        rows = if l + 1 < params.layers.len() {
            pre.iter().map(|r| r.iter().map(|&z| act(z)).collect()).collect()
        } else {
            pre.clone()
        };
        pre_all.push(pre);
    }
    pre_all
}

fn mean_nll(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

/// Which hidden pre-activations are positive.
fn hidden_signs(pre: &[Vec<Vec<f64>>]) -> Vec<bool> {
    pre[..pre.len() - 1].iter().flatten().flatten().map(|&z| z > 0.0).collect()
}

fn min_hidden_margin(pre: &[Vec<Vec<f64>>]) -> f64 {
    pre[..pre.len() - 1]
        .iter()
        .flatten()
        .flatten()
        .fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

struct Case {
    spec: MlpSpec,
    params: ModelParams,
    log_alpha: Tensor,
    eps: Tensor,
    batch: Batch,
}

fn random_case(rng: &mut impl Rng, max_params: usize) -> Case {
    let normal = Normal::new(0.0, 0.7).expect("valid std");
    loop {
        let depth = rng.random_range(1..=2);
        let mut sizes = vec![rng.random_range(1..=3)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=4));
        }
        sizes.push(rng.random_range(2..=3));
        let vd_layer = sizes.len() - 3;
        let spec = MlpSpec::new(sizes.clone(), Activation::default(), Some(vd_layer)).expect("valid spec");
        let mut params = ModelParams::zeros_like(&spec);
        if params.num_params() > max_params {
            continue;
        }
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        let shape = spec.layer_shape(vd_layer);
        let k = shape[0] * shape[1];
        let log_alpha = Tensor::new(shape.to_vec(), (0..k).map(|_| rng.random_range(-6.0..3.0)).collect())
            .expect("valid shape");
        let eps = Tensor::new(shape.to_vec(), (0..k).map(|_| rng.sample(StandardNormal)).collect())
            .expect("valid shape");
        let n = rng.random_range(1..=4);
        let features = Tensor::matrix(n, sizes[0], (0..n * sizes[0]).map(|_| rng.sample(StandardNormal)).collect())
            .expect("valid shape");
        let labels = (0..n).map(|_| rng.random_range(0..*sizes.last().unwrap())).collect();
        let case = Case {
            spec,
            params,
            log_alpha,
            eps,
            batch: Batch { features, labels },
        };
        let pre = oracle_forward(
            &case.spec,
            &case.params,
            &case.batch.features,
            Some((vd_layer, case.log_alpha.data(), case.eps.data())),
        );
        if min_hidden_margin(&pre) > KINK_MARGIN {
            return case;
        }
    }
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    coordinates: usize,
    max: f64,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            coordinates: 0,
            max: 0.0,
        }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        self.coordinates += 1;
        let e = rel_err(analytic, numeric);
        // NaN must fail the check, so compare in a way that keeps it.
        self.max = if e.is_nan() || self.max.is_nan() { f64::NAN } else { self.max.max(e) };
    }

    fn merge(&mut self, case: Tally) {
        self.cases += 1;
        self.coordinates += case.coordinates;
        self.max = if case.max.is_nan() || self.max.is_nan() { f64::NAN } else { self.max.max(case.max) };
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            cases: self.cases,
            coordinates: self.coordinates,
            max_rel_err: self.max,
            tolerance: self.tolerance,
            passed: self.max < self.tolerance,
        }
    }
}

/// Backward pass of the kernel with frozen noise against finite
/// differences of a random linear functional of the logits.
fn check_kernel(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts.seed, &[0xC0, 1]);
    let mut t = Tally::new("kernel_backward", 1e-5);
    while t.cases < opts.cases {
        let c = random_case(&mut rng, 30);
        let layer = c.spec.metavd_layer.expect("cases carry a dropout layer");
        let n = c.batch.len();
        let classes = c.spec.num_classes();
        let cot: Vec<f64> = (0..n * classes).map(|_| rng.sample(StandardNormal)).collect();
        let vd = VdInput {
            log_alpha: &c.log_alpha,
            noise: Noise::Fixed(c.eps.clone()),
        };
        let (_, cache) = kernel::forward(&c.spec, &c.params, &c.batch.features, Some(vd))?;
        let g = kernel::backward(&c.spec, &c.params, &cache, &Tensor::matrix(n, classes, cot.clone())?)?;
        let signs = hidden_signs(&oracle_forward(&c.spec, &c.params, &c.batch.features, Some((layer, c.log_alpha.data(), c.eps.data()))));
        let crossed = Cell::new(false);
        let functional = |p: &ModelParams, la: &[f64]| -> f64 {
            let pre = oracle_forward(&c.spec, p, &c.batch.features, Some((layer, la, c.eps.data())));
            if hidden_signs(&pre) != signs {
                crossed.set(true);
            }
            pre.last().unwrap().iter().flatten().zip(&cot).map(|(z, w)| z * w).sum()
        };
        let mut ct = Tally::new("kernel_backward", 1e-5);
        compare_params(&mut ct, &c.params, &g.params, |p| functional(p, c.log_alpha.data()));
        let ga = g.log_alpha.expect("noisy layer active");
        compare_vector(&mut ct, c.log_alpha.data(), ga.data(), |la| functional(&c.params, la));
        if !crossed.get() {
            t.merge(ct);
        }
    }
    Ok(t.finish())
}

fn compare_params(t: &mut Tally, params: &ModelParams, analytic: &ModelParams, f: impl Fn(&ModelParams) -> f64) {
    let flat_a = analytic.flatten();
    let probe = params;
    let mut idx = 0;
    for ti in 0..params.layers.len() * 2 {
        let len = probe.tensors().nth(ti).expect("tensor exists").len();
        for k in 0..len {
            let base = probe.tensors().nth(ti).unwrap().data()[k];
            let numeric = central(FD_STEP, |h| {
                let mut p = probe.clone();
                p.tensors_mut().nth(ti).unwrap().data_mut()[k] = base + h;
                f(&p)
            });
            t.add(flat_a[idx], numeric);
            idx += 1;
        }
    }
}

fn compare_vector(t: &mut Tally, at: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
    for k in 0..at.len() {
        let numeric = central(FD_STEP, |h| {
            let mut v = at.to_vec();
            v[k] += h;
            f(&v)
        });
        t.add(analytic[k], numeric);
    }
}

/// The client objective: mean NLL through the noisy layer plus the
/// weighted KL, both paths, frozen noise.
fn check_elbo(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts.seed, &[0xC0, 2]);
    let mut t = Tally::new("elbo_full", 1e-5);
    let mut case = 0usize;
    while t.cases < opts.cases {
        case += 1;
        let c = random_case(&mut rng, 60);
        let layer = c.spec.metavd_layer.expect("cases carry a dropout layer");
        let data_size = rng.random_range(c.batch.len()..=50);
        let cfg = ElboConfig {
            beta: rng.random_range(0.0..10.0),
            noise: Noise::Fixed(c.eps.clone()),
            data_size,
            kl_scaling: if case % 2 == 0 { KlScaling::PerSample } else { KlScaling::Unscaled },
        };
        let dv = DropoutVector::new(c.log_alpha.clone())?;
        let g = elbo_loss_and_grads(&c.spec, &c.params, &dv, &c.batch, &cfg)?;
        let mut ga = g.log_alpha.clone();
        if opts.fault == Some(Fault::KlSignFlip) {
            let w = cfg.kl_weight();
            ga = ga.zip_map(&kl_gradient(&dv), |g, k| g - 2.0 * w * k)?;
        }
        let signs = hidden_signs(&oracle_forward(&c.spec, &c.params, &c.batch.features, Some((layer, c.log_alpha.data(), c.eps.data()))));
        let crossed = Cell::new(false);
        let objective = |p: &ModelParams, la: &[f64]| -> f64 {
            let pre = oracle_forward(&c.spec, p, &c.batch.features, Some((layer, la, c.eps.data())));
            if hidden_signs(&pre) != signs {
                crossed.set(true);
            }
            let kl: f64 = la.iter().map(|&a| 0.5 * (1.0 + (-a).exp()).ln()).sum();
            mean_nll(pre.last().unwrap(), &c.batch.labels) + cfg.kl_weight() * kl
        };
        let mut ct = Tally::new("elbo_full", 1e-5);
        compare_params(&mut ct, &c.params, &g.theta, |p| objective(p, c.log_alpha.data()));
        compare_vector(&mut ct, c.log_alpha.data(), ga.data(), |la| objective(&c.params, la));
        if !crossed.get() {
            t.merge(ct);
        }
    }
    Ok(t.finish())
}

fn check_kl(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts.seed, &[0xC0, 3]);
    let mut t = Tally::new("kl_gradient", 1e-7);
    for _ in 0..opts.cases {
        let x: Vec<f64> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(-7.9..7.9)).collect();
        let dv = DropoutVector::new(Tensor::vector(x.clone()))?;
        let mut g = kl_gradient(&dv);
        if opts.fault == Some(Fault::KlSignFlip) {
            g = g.map(|v| -v);
        }
        compare_vector(&mut t, &x, g.data(), |v| {
            kl_term(&DropoutVector::new(Tensor::vector(v.to_vec())).expect("finite"))
        });
        t.cases += 1;
    }
    Ok(t.finish())
}

/// `<h_psi(e), delta>` against the hypernetwork's vector-Jacobian product,
/// for both `psi` and the embedding.
fn check_hypernet(opts: &GradcheckOptions) -> Result<(CheckResult, CheckResult)> {
    let mut rng = rng_for(opts.seed, &[0xC0, 4]);
    let mut tp = Tally::new("hypernet_psi", 1e-6);
    let mut te = Tally::new("hypernet_embedding", 1e-6);
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    while tp.cases < opts.cases {
        let clients = rng.random_range(1..=12);
        let target = [rng.random_range(1..=3), rng.random_range(1..=3)];
        let hidden = rng.random_range(2..=6);
        let mut h = HypernetState::init_with_hidden(clients, &target, hidden, &mut rng)?;
        // Random output layer: at initialisation it is zero and the
        // gradients reaching psi's hidden layers vanish.
        for t in h.psi.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        let client = rng.random_range(0..clients);
        let e = h.embedding(client)?.to_vec();
        let k = target[0] * target[1];
        let delta = Tensor::vector((0..k).map(|_| rng.sample(StandardNormal)).collect());
        let x = Tensor::matrix(1, e.len(), e.clone())?;
        if min_hidden_margin(&oracle_forward(h.spec(), &h.psi, &x, None)) < KINK_MARGIN {
            continue;
        }
        let (g_psi, g_e) = h.vjp(&e, &delta)?;
        let inner = |p: &ModelParams, emb: &[f64]| -> f64 {
            let x = Tensor::matrix(1, emb.len(), emb.to_vec()).expect("valid shape");
            let pre = oracle_forward(h.spec(), p, &x, None);
            pre.last().unwrap()[0].iter().zip(delta.data()).map(|(a, d)| a * d).sum()
        };
        compare_params(&mut tp, &h.psi, &g_psi, |p| inner(p, &e));
        compare_vector(&mut te, &e, &g_e, |emb| inner(&h.psi, emb));
        tp.cases += 1;
        te.cases += 1;
    }
    Ok((tp.finish(), te.finish()))
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (psi, emb) = check_hypernet(opts)?;
    Ok(GradcheckReport {
        seed: opts.seed,
        fault: opts.fault,
        checks: vec![check_kernel(opts)?, check_kl(opts)?, check_elbo(opts)?, psi, emb],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_forward_agrees_with_kernel() {
        let mut rng = rng_for(5, &[1]);
        for _ in 0..20 {
            let c = random_case(&mut rng, 60);
            let layer = c.spec.metavd_layer.unwrap();
            let vd = VdInput {
                log_alpha: &c.log_alpha,
                noise: Noise::Fixed(c.eps.clone()),
            };
            let (logits, _) = kernel::forward(&c.spec, &c.params, &c.batch.features, Some(vd)).unwrap();
            let pre = oracle_forward(&c.spec, &c.params, &c.batch.features, Some((layer, c.log_alpha.data(), c.eps.data())));
            for (a, b) in logits.data().iter().zip(pre.last().unwrap().iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-9) - 1e-4).abs() < 1e-15);
        assert!(rel_err(f64::NAN, 1.0).is_nan());
    }
}
