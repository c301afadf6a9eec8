//! Frobenius-normalized additive perturbations.
//!
//! A tensor `W` is perturbed as `W + eps * (xi / ||xi||) * ||W||` with
//! standard-normal `xi`, so the relative Frobenius distortion is exactly
//! `eps` regardless of tensor shape or scale. Time constants are perturbed
//! with `|xi|` entries so they can only grow, keeping `tau >= 1`.

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::rng::{standard_normal, stream};
use crate::topology::{Network, NetworkKind};

use super::robustness::PerturbTarget;

fn frobenius(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Perturb a flat view of a tensor in place.
pub fn perturb_values(
    values: &mut [f64],
    epsilon: f64,
    seed: u64,
    positive_only: bool,
) -> Result<()> {
    if epsilon < 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "perturbation magnitude must be >= 0, got {epsilon}"
        )));
    }
    if epsilon == 0.0 || values.is_empty() {
        return Ok(());
    }
    let mut rng = stream(seed, "perturb", &[]);
    let mut xi: Vec<f64> = (0..values.len())
        .map(|_| standard_normal(&mut rng))
        .collect();
    if positive_only {
        for x in &mut xi {
            *x = x.abs();
        }
    }
    let xi_norm = frobenius(&xi);
    let w_norm = frobenius(values);
    if xi_norm == 0.0 {
        return Err(CoreError::InvalidArgument(
            "degenerate zero noise draw".to_string(),
        ));
    }
    let scale = epsilon * w_norm / xi_norm;
    for (v, x) in values.iter_mut().zip(xi.iter()) {
        *v += scale * x;
    }
    Ok(())
}

/// Perturbed copy of a matrix (full support).
pub fn perturbed_tensor(
    tensor: &Array2<f64>,
    epsilon: f64,
    seed: u64,
    positive_only: bool,
) -> Result<Array2<f64>> {
    let mut out = tensor.clone();
    perturb_values(out.as_slice_mut().unwrap(), epsilon, seed, positive_only)?;
    Ok(out)
}

fn perturb_recurrent(net: &mut Network, epsilon: f64, seed: u64) -> Result<()> {
    for (mi, module) in net.modules.iter_mut().enumerate() {
        let m = module.size();
        // Noise lives on the off-diagonal support; the diagonal is
        // structurally zero so the norm contract holds on the full matrix.
        let mut off: Vec<f64> = Vec::with_capacity(m * (m - 1));
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    off.push(module.recurrent[[i, j]]);
                }
            }
        }
        perturb_values(
            &mut off,
            epsilon,
            crate::rng::child_seed(seed, "recurrent", &[mi as u64]),
            false,
        )?;
        let mut it = off.into_iter();
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    module.recurrent[[i, j]] = it.next().unwrap();
                }
            }
        }
        module.zero_recurrent_diagonal();
    }
    Ok(())
}

fn perturb_feedforward(net: &mut Network, epsilon: f64, seed: u64) -> Result<()> {
    if net.kind != NetworkKind::Modular {
        return Err(CoreError::WrongArchitecture("modular"));
    }
    for (mi, module) in net.modules.iter_mut().enumerate() {
        if let Some(ff) = module.feedforward.as_mut() {
            perturb_values(
                ff.as_slice_mut().unwrap(),
                epsilon,
                crate::rng::child_seed(seed, "feedforward", &[mi as u64]),
                false,
            )?;
        }
    }
    Ok(())
}

fn perturb_tau(net: &mut Network, epsilon: f64, seed: u64) -> Result<()> {
    for (mi, module) in net.modules.iter_mut().enumerate() {
        perturb_values(
            module.tau.as_slice_mut().unwrap(),
            epsilon,
            crate::rng::child_seed(seed, "tau", &[mi as u64]),
            true,
        )?;
        // Positivity already guarantees tau >= 1; the clamp is asserted, not
        // relied upon.
        debug_assert!(module.tau.iter().all(|&t| t >= 1.0));
        module.clamp_tau();
    }
    Ok(())
}

/// Perturb one parameter group of the network in place. Every tensor gets its
/// own noise draw and its own norm scaling. `Connections` perturbs recurrent
/// weights, plus feedforward weights on modular networks.
pub fn perturb_network(
    net: &mut Network,
    target: PerturbTarget,
    epsilon: f64,
    seed: u64,
) -> Result<()> {
    match target {
        PerturbTarget::Recurrent => perturb_recurrent(net, epsilon, seed),
        PerturbTarget::Feedforward => perturb_feedforward(net, epsilon, seed),
        PerturbTarget::Tau => perturb_tau(net, epsilon, seed),
        PerturbTarget::Connections => {
            perturb_recurrent(net, epsilon, seed)?;
            if net.kind == NetworkKind::Modular {
                perturb_feedforward(net, epsilon, seed)?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ActivationConfig;
    use crate::topology::{new_network, GrowthPolicy, InitConfig};
    use ndarray::Array2;

    fn rel_distortion(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        diff / norm
    }

    #[test]
    fn zero_epsilon_is_bit_identical() {
        let t = Array2::from_shape_fn((4, 6), |(i, j)| (i * 7 + j) as f64 * 0.31 - 2.0);
        let p = perturbed_tensor(&t, 0.0, 9, false).unwrap();
        for (a, b) in t.iter().zip(p.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn distortion_equals_epsilon() {
        let t = Array2::from_shape_fn((5, 5), |(i, j)| ((i + 1) as f64).sin() + j as f64 * 0.2);
        for eps in [0.01, 0.1, 1.0, 3.0] {
            let p = perturbed_tensor(&t, eps, 4, false).unwrap();
            let d = rel_distortion(&t, &p);
            assert!(
                (d - eps).abs() <= 1e-6 * eps.max(1.0),
                "eps {eps} distortion {d}"
            );
        }
    }

    #[test]
    fn negative_epsilon_rejected() {
        let t = Array2::zeros((2, 2));
        assert!(perturbed_tensor(&t, -0.1, 0, false).is_err());
    }

    #[test]
    fn tau_perturbation_never_decreases_entries() {
        let mut net = new_network(
            crate::topology::NetworkKind::Modular,
            8,
            3,
            ActivationConfig::default(),
            InitConfig::default(),
        )
        .unwrap();
        let before = net.modules[0].tau.clone();
        perturb_network(&mut net, PerturbTarget::Tau, 0.5, 11).unwrap();
        for (b, a) in before.iter().zip(net.modules[0].tau.iter()) {
            assert!(a >= b, "tau decreased from {b} to {a}");
        }
        // Norm contract holds for the tau vector as well.
        let diff: f64 = before
            .iter()
            .zip(net.modules[0].tau.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = before.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((diff / norm - 0.5).abs() < 1e-9);
    }

    #[test]
    fn recurrent_perturbation_keeps_diagonal_zero_and_norm() {
        let mut net = new_network(
            crate::topology::NetworkKind::Modular,
            7,
            5,
            ActivationConfig::default(),
            InitConfig::default(),
        )
        .unwrap();
        net.grow(&GrowthPolicy::default(), 6).unwrap();
        let before: Vec<Array2<f64>> = net.modules.iter().map(|m| m.recurrent.clone()).collect();
        perturb_network(&mut net, PerturbTarget::Connections, 0.25, 12).unwrap();
        for (mi, module) in net.modules.iter().enumerate() {
            assert!(module.recurrent.diag().iter().all(|&d| d == 0.0));
            let d = rel_distortion(&before[mi], &module.recurrent);
            assert!((d - 0.25).abs() < 1e-9, "module {mi} distortion {d}");
        }
        net.validate().unwrap();
    }

    #[test]
    fn feedforward_target_requires_modular() {
        let mut net = new_network(
            crate::topology::NetworkKind::NonModular,
            5,
            3,
            ActivationConfig::default(),
            InitConfig::default(),
        )
        .unwrap();
        assert!(perturb_network(&mut net, PerturbTarget::Feedforward, 0.1, 0).is_err());
        // Connections on non-modular perturbs recurrent only.
        perturb_network(&mut net, PerturbTarget::Connections, 0.1, 0).unwrap();
        net.validate().unwrap();
    }
}
