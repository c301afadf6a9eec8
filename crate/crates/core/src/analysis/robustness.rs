//! Robustness curves: how many tasks survive a given perturbation level.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::parity::evaluate;
use crate::rng::child_seed;
use crate::topology::Network;

use super::perturb::perturb_network;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbTarget {
    Recurrent,
    Feedforward,
    Tau,
    /// Recurrent plus (on modular networks) feedforward weights, each with
    /// its own normalization.
    Connections,
}

impl PerturbTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbTarget::Recurrent => "recurrent",
            PerturbTarget::Feedforward => "feedforward",
            PerturbTarget::Tau => "tau",
            PerturbTarget::Connections => "connections",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub target: PerturbTarget,
    pub epsilon: f64,
    pub seed: u64,
}

/// One grid point of a robustness curve: the mean number of tasks still
/// solved above 0.9 accuracy, and per-task accuracies averaged over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessPoint {
    pub target: PerturbTarget,
    pub epsilon: f64,
    pub mean_solved: f64,
    pub per_task_accuracy: BTreeMap<usize, f64>,
}

/// Accuracy level above which a task counts as still solved.
pub const SOLVED_ACCURACY: f64 = 0.9;

/// For each spec: draw `n_repeats` independent perturbations of a fresh copy
/// of the network, evaluate every task on `n_eval` sequences, and average the
/// solved-task count and per-task accuracies.
pub fn robustness_curve(
    net: &Network,
    specs: &[PerturbationSpec],
    n_repeats: usize,
    n_eval: usize,
) -> Result<Vec<RobustnessPoint>> {
    let mut tasks: Vec<usize> = net.heads.iter().map(|h| h.task_n).collect();
    tasks.sort_unstable();
    let mut points = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut solved_sum = 0.0;
        let mut acc_sums: BTreeMap<usize, f64> = tasks.iter().map(|&n| (n, 0.0)).collect();
        for rep in 0..n_repeats {
            let mut copy = net.clone();
            perturb_network(
                &mut copy,
                spec.target,
                spec.epsilon,
                child_seed(spec.seed, "draw", &[rep as u64]),
            )?;
            let report = evaluate(
                &copy,
                &tasks,
                n_eval,
                child_seed(spec.seed, "eval", &[rep as u64]),
            )?;
            let mut solved = 0usize;
            for (&n, &acc) in &report.accuracies {
                if acc > SOLVED_ACCURACY {
                    solved += 1;
                }
                *acc_sums.get_mut(&n).unwrap() += acc;
            }
            solved_sum += solved as f64;
        }
        let inv = 1.0 / n_repeats as f64;
        points.push(RobustnessPoint {
            target: spec.target,
            epsilon: spec.epsilon,
            mean_solved: solved_sum * inv,
            per_task_accuracy: acc_sums.into_iter().map(|(n, s)| (n, s * inv)).collect(),
        });
    }
    Ok(points)
}
