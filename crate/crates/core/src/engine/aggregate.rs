use crate::error::{Error, Result};
use crate::kernel::{MlpSpec, ModelParams};

use super::{AggregationScale, ClientUpdate};

/// Guards the precision `1 / (alpha * theta^2)` when `theta = 0`.
pub const PRECISION_EPS: f64 = 1e-8;

/// `g_m = |D_m| / sum |D|`.
pub fn data_weights(updates: &[&ClientUpdate]) -> Result<Vec<f64>> {
    let total: usize = updates.iter().map(|u| u.data_size).sum();
    if updates.iter().any(|u| u.data_size == 0) {
        return Err(Error::InvalidArgument("client update with zero data size".into()));
    }
    Ok(updates.iter().map(|u| u.data_size as f64 / total as f64).collect())
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    for u in &refs[1..] {
        u.theta_star.check_same_structure(&refs[0].theta_star, "client update")?;
    }
    Ok(refs)
}

/// Weights of the mode of a product of Gaussians with the given variances:
/// `r_m = sigma_m^-2 / sum sigma^-2`.
pub fn product_mode_weights(variances: &[f64]) -> Vec<f64> {
    // Precisions relative to the widest component: (1, 9) -> (9, 1) / 10.
    let widest = variances.iter().copied().fold(0.0, f64::max);
    let prec: Vec<f64> = variances.iter().map(|v| widest / v).collect();
    let total: f64 = prec.iter().sum();
    prec.into_iter().map(|p| p / total).collect()
}

/// Per-client aggregation weights for one coordinate:
/// `r_m = g_m / (alpha_m theta_m^2 + eps)` normalised over clients.
pub fn precision_weights(g: &[f64], alpha: &[f64], theta: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = g
        .iter()
        .zip(alpha)
        .zip(theta)
        .map(|((&g, &a), &t)| g / (a * t * t + PRECISION_EPS))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// Data-size weighted mean of all parameters, in client-id order.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let refs = sorted(updates)?;
    let g = data_weights(&refs)?;
    weighted_mean(&refs, &g)
}

fn weighted_mean(refs: &[&ClientUpdate], g: &[f64]) -> Result<ModelParams> {
    let mut out = refs[0].theta_star.clone();
    for t in out.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for (u, &gm) in refs.iter().zip(g) {
        for (acc, src) in out.tensors_mut().zip(u.theta_star.tensors()) {
            for (a, s) in acc.data_mut().iter_mut().zip(src.data()) {
                *a += gm * s;
            }
        }
    }
    Ok(out)
}

/// Precision-weighted aggregation of the dropout layer's weights, plain
/// data-weighted mean for everything else.
pub fn aggregate_metavd(
    updates: &[ClientUpdate],
    prev_theta: &ModelParams,
    spec: &MlpSpec,
    scale: AggregationScale,
) -> Result<ModelParams> {
    let refs = sorted(updates)?;
    refs[0].theta_star.check_same_structure(prev_theta, "aggregation")?;
    let layer = spec
        .metavd_layer
        .ok_or_else(|| Error::InvalidSpec("precision aggregation needs a dropout layer".into()))?;
    let g = data_weights(&refs)?;
    let mut out = weighted_mean(&refs, &g)?;

    let alphas: Vec<Vec<f64>> = refs
        .iter()
        .map(|u| {
            u.log_alpha_star
                .as_ref()
                .map(|d| d.log_alpha().data().iter().map(|la| la.exp()).collect())
                .ok_or_else(|| Error::InvalidArgument(format!("client {} sent no dropout variables", u.client_id)))
        })
        .collect::<Result<_>>()?;
    let k = out.layers[layer].weight.len();
    if let Some(bad) = alphas.iter().find(|a| a.len() != k) {
        return Err(Error::shape("returned log alpha", &[k], &[bad.len()]));
    }
    let m = refs.len();
    let extra = match scale {
        AggregationScale::Normalized => 1.0,
        AggregationScale::OneOverM => 1.0 / m as f64,
    };
    let weights = out.layers[layer].weight.data_mut();
    let mut a = vec![0.0; m];
    let mut t = vec![0.0; m];
    for (idx, w) in weights.iter_mut().enumerate() {
        for (j, u) in refs.iter().enumerate() {
            a[j] = alphas[j][idx];
            t[j] = u.theta_star.layers[layer].weight.data()[idx];
        }
        let r = precision_weights(&g, &a, &t);
        *w = extra * r.iter().zip(&t).map(|(r, t)| r * t).sum::<f64>();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Activation, DenseLayer, Tensor};
    use crate::metavd::DropoutVector;
    use proptest::prelude::*;

    fn spec() -> MlpSpec {
        MlpSpec::new(vec![1, 1, 1], Activation::Identity, Some(0)).unwrap()
    }

    fn update(id: usize, w0: f64, b0: f64, log_alpha: f64, size: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            theta_star: ModelParams {
                layers: vec![
                    DenseLayer {
                        weight: Tensor::matrix(1, 1, vec![w0]).unwrap(),
                        bias: Tensor::vector(vec![b0]),
                    },
                    DenseLayer {
                        weight: Tensor::matrix(1, 1, vec![w0 * 2.0]).unwrap(),
                        bias: Tensor::vector(vec![0.0]),
                    },
                ],
            },
            log_alpha_star: Some(DropoutVector::constant(&[1, 1], log_alpha)),
            data_size: size,
        }
    }

    #[test]
    fn fedavg_examples() {
        let a = aggregate_fedavg(&[update(0, 0.0, 0.0, 0.0, 5), update(1, 2.0, 0.0, 0.0, 5)]).unwrap();
        assert_eq!(a.layers[0].weight.data()[0], 1.0);
        let a = aggregate_fedavg(&[update(0, 0.0, 0.0, 0.0, 3), update(1, 4.0, 0.0, 0.0, 1)]).unwrap();
        assert_eq!(a.layers[0].weight.data()[0], 1.0);
        let single = update(3, 0.7, -0.2, 0.0, 9);
        assert_eq!(aggregate_fedavg(std::slice::from_ref(&single)).unwrap(), single.theta_star);
        assert!(aggregate_fedavg(&[]).is_err());
    }

    #[test]
    fn two_client_product_of_gaussians() {
        // variances alpha * theta^2 = 1 and 9 with alpha = 1
        assert_eq!(product_mode_weights(&[1.0, 9.0]), [0.9, 0.1]);
        let prev = update(0, 0.0, 0.0, 0.0, 1).theta_star;
        let agg = aggregate_metavd(
            &[update(0, 1.0, 0.0, 0.0, 4), update(1, 3.0, 0.0, 0.0, 4)],
            &prev,
            &spec(),
            AggregationScale::Normalized,
        )
        .unwrap();
        assert!((agg.layers[0].weight.data()[0] - 1.2).abs() < 1e-8);
        // the output layer has no dropout variables: plain mean of 2 and 6
        assert_eq!(agg.layers[1].weight.data()[0], 4.0);
    }

    #[test]
    fn single_client_is_identity_and_scale_option_divides() {
        let prev = update(0, 0.0, 0.0, 0.0, 1).theta_star;
        let u = update(0, 1.7, 0.3, -1.0, 5);
        let agg = aggregate_metavd(std::slice::from_ref(&u), &prev, &spec(), AggregationScale::Normalized).unwrap();
        assert!((agg.layers[0].weight.data()[0] - 1.7).abs() < 1e-12);
        let two = [update(0, 1.0, 0.0, 0.0, 1), update(1, 1.0, 0.0, 0.0, 1)];
        let agg = aggregate_metavd(&two, &prev, &spec(), AggregationScale::OneOverM).unwrap();
        assert!((agg.layers[0].weight.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_dropout_variables_rejected() {
        let prev = update(0, 0.0, 0.0, 0.0, 1).theta_star;
        let mut u = update(0, 1.0, 0.0, 0.0, 1);
        u.log_alpha_star = None;
        assert!(aggregate_metavd(&[u], &prev, &spec(), AggregationScale::Normalized).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(
            clients in proptest::collection::vec((0.01f64..1.0, -8.0f64..8.0, -3.0f64..3.0), 1..6)
        ) {
            let g: Vec<f64> = clients.iter().map(|c| c.0).collect();
            let a: Vec<f64> = clients.iter().map(|c| c.1.exp()).collect();
            let t: Vec<f64> = clients.iter().map(|c| c.2).collect();
            let r = precision_weights(&g, &a, &t);
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn larger_alpha_means_smaller_weight(
            clients in proptest::collection::vec((0.01f64..1.0, -8.0f64..7.0, 0.05f64..3.0), 2..6),
            bump in 0.01f64..1.0,
        ) {
            let g: Vec<f64> = clients.iter().map(|c| c.0).collect();
            let mut a: Vec<f64> = clients.iter().map(|c| c.1.exp()).collect();
            let t: Vec<f64> = clients.iter().map(|c| c.2).collect();
            let before = precision_weights(&g, &a, &t)[0];
            a[0] *= 1.0 + bump;
            let after = precision_weights(&g, &a, &t)[0];
            prop_assert!(after < before);
        }

        #[test]
        fn equal_alphas_reduce_to_fedavg(
            thetas in proptest::collection::vec((-3.0f64..3.0, 1usize..20), 1..5),
            log_alpha in -8.0f64..8.0,
        ) {
            // Equal alpha and equal |theta| make the precisions equal.
            let updates: Vec<ClientUpdate> = thetas
                .iter()
                .enumerate()
                .map(|(i, &(w, n))| {
                    let sign = if w < 0.0 { -1.0 } else { 1.0 };
                    update(i, sign * 0.8, w, log_alpha, n)
                })
                .collect();
            let prev = updates[0].theta_star.clone();
            let a = aggregate_metavd(&updates, &prev, &spec(), AggregationScale::Normalized).unwrap();
            let b = aggregate_fedavg(&updates).unwrap();
            for (x, y) in a.flatten().iter().zip(b.flatten()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
