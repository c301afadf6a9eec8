//! Weight-conservation statistics: variance of normalized weight changes
//! between corresponding entries of consecutive modules. Lower variance means
//! the weight class is more conserved across the curriculum.

use crate::error::{CoreError, Result};
use crate::topology::{Network, NetworkKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightClass {
    Recurrent,
    Feedforward,
}

impl WeightClass {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightClass::Recurrent => "recurrent",
            WeightClass::Feedforward => "feedforward",
        }
    }
}

/// Variance of the normalized change for one module pair and weight class.
/// `None` marks a degenerate (zero-spread) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PairVariance {
    /// 1-based module indices `(m - 1, m)`.
    pub modules: (usize, usize),
    pub class: WeightClass,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightChangeStats {
    pub pairs: Vec<PairVariance>,
}

impl WeightChangeStats {
    /// Mean variance over non-degenerate pairs of one class.
    pub fn class_mean(&self, class: WeightClass) -> Option<f64> {
        let vals: Vec<f64> = self
            .pairs
            .iter()
            .filter(|p| p.class == class)
            .filter_map(|p| p.variance)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-score both matrices by their own mean and SD, difference corresponding
/// entries, and return the population variance of the differences. `None`
/// when either side has (numerically) zero spread.
pub fn normalized_change_variance(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    if sa < 1e-12 || sb < 1e-12 {
        return None;
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (y - mb) / sb - (x - ma) / sa)
        .collect();
    let (_, sd) = mean_sd(&diffs);
    Some(sd * sd)
}

fn off_diagonal(matrix: &ndarray::Array2<f64>) -> Vec<f64> {
    let m = matrix.nrows();
    let mut out = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        for j in 0..m {
            if i != j {
                out.push(matrix[[i, j]]);
            }
        }
    }
    out
}

/// Per-pair, per-class variance of normalized weight changes across
/// consecutive modules of a modular network with at least three modules.
/// Recurrent matrices are compared on their off-diagonal support.
pub fn weight_change_variance(net: &Network) -> Result<WeightChangeStats> {
    if net.kind != NetworkKind::Modular {
        return Err(CoreError::WrongArchitecture("modular"));
    }
    if net.modules.len() < 3 {
        return Err(CoreError::InvalidArgument(format!(
            "weight-change statistics need >= 3 modules, got {}",
            net.modules.len()
        )));
    }
    let mut stats = WeightChangeStats::default();
    for m in 1..net.modules.len() {
        let prev = &net.modules[m - 1];
        let curr = &net.modules[m];
        stats.pairs.push(PairVariance {
            modules: (m, m + 1),
            class: WeightClass::Recurrent,
            variance: normalized_change_variance(
                &off_diagonal(&prev.recurrent),
                &off_diagonal(&curr.recurrent),
            ),
        });
        if let (Some(pf), Some(cf)) = (prev.feedforward.as_ref(), curr.feedforward.as_ref()) {
            stats.pairs.push(PairVariance {
                modules: (m, m + 1),
                class: WeightClass::Feedforward,
                variance: normalized_change_variance(
                    pf.as_slice().unwrap(),
                    cf.as_slice().unwrap(),
                ),
            });
        }
    }
    Ok(stats)
}
