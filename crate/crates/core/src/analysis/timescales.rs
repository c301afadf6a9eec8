//! Effective-timescale estimation.
//!
//! A neuron's activity autocorrelation during task performance is fit with
//! one- and two-timescale exponential models (each with a constant offset)
//! over lags `1..=max_lag`; the Akaike Information Criterion picks the model
//! and the slower timescale of the winner is reported. Fits of series with
//! no usable exponential structure are flagged rather than reported, and
//! flagged neurons are excluded from averages.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::stream;
use crate::topology::{Network, NetworkKind, Stepper};

/// Biased (divide-by-T) lagged autocorrelation, `AC(0) = 1`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let t = series.len();
    if t <= max_lag {
        return Err(CoreError::InvalidArgument(format!(
            "series of length {t} too short for max_lag {max_lag}"
        )));
    }
    let mean = series.iter().sum::<f64>() / t as f64;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
    if var <= 0.0 || !var.is_finite() {
        return Err(CoreError::DegenerateSeries(format!(
            "zero or non-finite variance ({var})"
        )));
    }
    let mut ac = Vec::with_capacity(max_lag + 1);
    for k in 0..=max_lag {
        let mut cov = 0.0;
        for i in 0..t - k {
            cov += (series[i] - mean) * (series[i + k] - mean);
        }
        ac.push(cov / t as f64 / var);
    }
    ac[0] = 1.0;
    Ok(ac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    Single,
    Double,
}

impl FitModel {
    pub fn as_str(self) -> &'static str {
        match self {
            FitModel::Single => "single",
            FitModel::Double => "double",
        }
    }
}

/// Result of the exponential autocorrelation fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TimescaleFit {
    pub model: FitModel,
    /// Ascending; one entry for single, two for double.
    pub timescales: Vec<f64>,
    /// Amplitudes matching `timescales`.
    pub amplitudes: Vec<f64>,
    pub offset: f64,
    pub aic_single: f64,
    pub aic_double: f64,
    /// Slower timescale of the AIC-selected model.
    pub reported_timescale: f64,
    pub r_squared: f64,
    /// Set when the fit carries no usable timescale (degenerate input,
    /// failed solve, or negligible explained structure).
    pub flagged: bool,
}

/// Floor on the mean squared residual inside the AIC. Machine-precision
/// perfect fits would otherwise make the comparison between the two models
/// depend on rounding noise; any genuine fit sits far above this.
const MSR_FLOOR: f64 = 1e-15;

fn aic(rss: f64, n: usize, params: usize) -> f64 {
    let msr = (rss / n as f64).max(MSR_FLOOR);
    n as f64 * msr.ln() + 2.0 * params as f64
}

/// Least squares of `a * exp(-k/tau) + c` over `y[k]`, k = 1..=n, with the
/// amplitude constrained to `a >= 0` (the model family is a mixture of
/// decaying exponentials; negative mixture weights are noise artifacts).
/// Returns `(a, c, rss)`.
fn single_ls(y: &[f64], tau: f64) -> Option<(f64, f64, f64)> {
    let n = y.len() as f64;
    let mut se = 0.0;
    let mut see = 0.0;
    let mut sy = 0.0;
    let mut sey = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let e = (-((i + 1) as f64) / tau).exp();
        se += e;
        see += e * e;
        sy += yi;
        sey += e * yi;
    }
    let det = see * n - se * se;
    if det.abs() < 1e-12 * (see * n).abs().max(1e-300) {
        return None;
    }
    let mut a = (sey * n - se * sy) / det;
    let mut c = (see * sy - se * sey) / det;
    if a < 0.0 {
        // Constrained optimum lies on the boundary: flat fit.
        a = 0.0;
        c = sy / n;
    }
    let mut rss = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let e = (-((i + 1) as f64) / tau).exp();
        let r = a * e + c - yi;
        rss += r * r;
    }
    (a.is_finite() && c.is_finite() && rss.is_finite()).then_some((a, c, rss))
}

/// Least squares of `a exp(-k/t1) + b exp(-k/t2) + c` with `a, b >= 0`.
/// The objective is convex in the linear parameters, so when the
/// unconstrained solution violates a sign constraint the optimum lies on the
/// boundary, which reduces to a single-exponential fit. Returns
/// `(a, b, c, rss)`.
fn double_ls(y: &[f64], t1: f64, t2: f64) -> Option<(f64, f64, f64, f64)> {
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for (i, &yi) in y.iter().enumerate() {
        let k = (i + 1) as f64;
        let b = [(-k / t1).exp(), (-k / t2).exp(), 1.0];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += b[r] * b[c];
            }
            rhs[r] += b[r] * yi;
        }
    }
    let interior = solve3(m, rhs).filter(|s| s[0] >= 0.0 && s[1] >= 0.0);
    let (a, b, c) = match interior {
        Some(s) => (s[0], s[1], s[2]),
        None => {
            let on_t1 = single_ls(y, t1).map(|(a, c, rss)| (a, 0.0, c, rss));
            let on_t2 = single_ls(y, t2).map(|(b, c, rss)| (0.0, b, c, rss));
            let best = match (on_t1, on_t2) {
                (Some(x), Some(y)) => Some(if x.3 <= y.3 { x } else { y }),
                (x, y) => x.or(y),
            }?;
            (best.0, best.1, best.2)
        }
    };
    let mut rss = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let k = (i + 1) as f64;
        let f = a * (-k / t1).exp() + b * (-k / t2).exp() + c;
        let r = f - yi;
        rss += r * r;
    }
    (a.is_finite() && b.is_finite() && c.is_finite() && rss.is_finite())
        .then_some((a, b, c, rss))
}

fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..3 {
                    m[row][k] -= f * m[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Some([b[0] / m[0][0], b[1] / m[1][1], b[2] / m[2][2]])
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| {
            let f = i as f64 / (points - 1) as f64;
            (lo.ln() + f * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}

/// Golden-section minimization of `f` over `ln tau` in `[lo, hi]`.
fn golden_min(lo: f64, hi: f64, iters: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c.exp());
    let mut fd = f(d.exp());
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d.exp());
        }
    }
    ((a + b) / 2.0).exp()
}

fn sse_or_inf(res: Option<f64>) -> f64 {
    res.unwrap_or(f64::INFINITY)
}

/// Fit the lag-1.. tail of an autocorrelation with single- and
/// double-exponential models and select by AIC.
pub fn fit_timescales(ac: &[f64]) -> Result<TimescaleFit> {
    if ac.len() < 8 {
        return Err(CoreError::InvalidArgument(format!(
            "need at least 8 autocorrelation values, got {}",
            ac.len()
        )));
    }
    if ac.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidArgument(
            "autocorrelation contains non-finite values".to_string(),
        ));
    }
    let y = &ac[1..];
    let n = y.len();
    let tau_lo = 0.3;
    let tau_hi = 3.0 * n as f64;

    // Single model: coarse grid then golden-section refinement.
    let grid = log_grid(0.5, 2.0 * n as f64, 40);
    let mut best_tau = grid[0];
    let mut best_sse = f64::INFINITY;
    for &tau in &grid {
        let sse = sse_or_inf(single_ls(y, tau).map(|(_, _, s)| s));
        if sse < best_sse {
            best_sse = sse;
            best_tau = tau;
        }
    }
    let tau_single = golden_min(
        (best_tau / 3.0).max(tau_lo),
        (best_tau * 3.0).min(tau_hi),
        48,
        |tau| sse_or_inf(single_ls(y, tau).map(|(_, _, s)| s)),
    );
    let single = single_ls(y, tau_single);
    let (sse_single, single_params) = match single {
        Some((a, c, s)) => (s, Some((a, c))),
        None => (f64::INFINITY, None),
    };

    // Double model: coarse pair grid then alternating refinement.
    let pair_grid = log_grid(0.5, 2.0 * n as f64, 18);
    let mut best = (pair_grid[0], pair_grid[1], f64::INFINITY);
    for (i, &t1) in pair_grid.iter().enumerate() {
        for &t2 in &pair_grid[i + 1..] {
            let sse = sse_or_inf(double_ls(y, t1, t2).map(|(_, _, _, s)| s));
            if sse < best.2 {
                best = (t1, t2, sse);
            }
        }
    }
    let (mut t1, mut t2) = (best.0, best.1);
    for _ in 0..6 {
        t1 = golden_min(
            (t1 / 3.0).max(tau_lo),
            (t1 * 3.0).min(tau_hi),
            32,
            |tau| sse_or_inf(double_ls(y, tau, t2).map(|(_, _, _, s)| s)),
        );
        t2 = golden_min(
            (t2 / 3.0).max(tau_lo),
            (t2 * 3.0).min(tau_hi),
            32,
            |tau| sse_or_inf(double_ls(y, t1, tau).map(|(_, _, _, s)| s)),
        );
    }
    let double = double_ls(y, t1, t2);
    let (sse_double, double_params) = match double {
        Some((a, b, c, s)) => (s, Some((a, b, c))),
        None => (f64::INFINITY, None),
    };

    let aic_single = aic(sse_single, n, 3);
    let aic_double = aic(sse_double, n, 5);

    let mean_y = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();

    let use_single = aic_single <= aic_double || double_params.is_none();
    let (model, timescales, amplitudes, offset, winner_sse) = if use_single {
        let (a, c) = single_params.ok_or_else(|| {
            CoreError::DegenerateSeries("both exponential fits failed to converge".to_string())
        })?;
        (FitModel::Single, vec![tau_single], vec![a], c, sse_single)
    } else {
        let (a, b, c) = double_params.expect("checked above");
        let (mut ts, mut amps) = (vec![t1, t2], vec![a, b]);
        if ts[0] > ts[1] {
            ts.swap(0, 1);
            amps.swap(0, 1);
        }
        (FitModel::Double, ts, amps, c, sse_double)
    };

    let r_squared = if tss > 0.0 {
        1.0 - winner_sse / tss
    } else {
        0.0
    };
    let total_amplitude: f64 = amplitudes.iter().map(|a| a.abs()).sum();
    let flagged = !r_squared.is_finite() || r_squared < 0.5 || total_amplitude < 0.02;
    // Report the slowest component that carries real weight. Components
    // below 20% of the total amplitude are noise absorbers (often nearly
    // collinear with the offset) rather than timescales of the process.
    let reported_timescale = timescales
        .iter()
        .zip(amplitudes.iter())
        .filter(|(_, a)| a.abs() >= 0.2 * total_amplitude)
        .map(|(t, _)| *t)
        .next_back()
        .unwrap_or(*timescales.last().unwrap());

    Ok(TimescaleFit {
        model,
        timescales,
        amplitudes,
        offset,
        aic_single,
        aic_double,
        reported_timescale,
        r_squared,
        flagged,
    })
}

/// Per-neuron effective timescale of one network.
#[derive(Debug, Clone)]
pub struct NeuronTimescale {
    pub module: usize,
    pub neuron: usize,
    pub trained_tau: f64,
    /// `None` when the activity series was constant (excluded before
    /// fitting).
    pub fit: Option<TimescaleFit>,
}

#[derive(Debug, Clone)]
pub struct EffectiveTimescales {
    pub neurons: Vec<NeuronTimescale>,
    /// Mean reported timescale per module over usable (unflagged) fits.
    pub module_means: Vec<Option<f64>>,
    pub network_mean: Option<f64>,
}

/// Drive the network with a fresh random bit stream, record every neuron's
/// activity for `horizon` steps (after a 1000-step burn-in), and fit each
/// autocorrelation. Flagged and constant neurons are excluded from means.
pub fn effective_timescales(
    net: &Network,
    horizon: usize,
    max_lag: usize,
    seed: u64,
) -> Result<EffectiveTimescales> {
    if horizon <= 2 * max_lag {
        return Err(CoreError::InvalidArgument(format!(
            "horizon {horizon} too short for max_lag {max_lag}"
        )));
    }
    let burn_in = 1000;
    let mut stepper = Stepper::new(net);
    let total = net.total_neurons();
    let mut series = vec![0.0f64; horizon * total];
    let mut rng = stream(seed, "drive", &[]);
    for _ in 0..burn_in {
        stepper.step(u8::from(rng.random::<bool>()));
    }
    for t in 0..horizon {
        stepper.step(u8::from(rng.random::<bool>()));
        series[t * total..(t + 1) * total].copy_from_slice(stepper.rates());
    }

    let mut neurons = Vec::with_capacity(total);
    let mut module_sums: Vec<(f64, usize)> = vec![(0.0, 0); net.modules.len()];
    let mut flat = 0usize;
    let mut buf = vec![0.0f64; horizon];
    for (mi, module) in net.modules.iter().enumerate() {
        for ni in 0..module.size() {
            for t in 0..horizon {
                buf[t] = series[t * total + flat];
            }
            let fit = match autocorrelation(&buf, max_lag) {
                Ok(ac) => Some(fit_timescales(&ac)?),
                Err(CoreError::DegenerateSeries(_)) => None,
                Err(e) => return Err(e),
            };
            if let Some(f) = fit.as_ref() {
                if !f.flagged {
                    module_sums[mi].0 += f.reported_timescale;
                    module_sums[mi].1 += 1;
                }
            }
            neurons.push(NeuronTimescale {
                module: mi,
                neuron: ni,
                trained_tau: module.tau[ni],
                fit,
            });
            flat += 1;
        }
    }
    let module_means: Vec<Option<f64>> = module_sums
        .iter()
        .map(|&(s, c)| (c > 0).then(|| s / c as f64))
        .collect();
    let usable: Vec<f64> = neurons
        .iter()
        .filter_map(|n| n.fit.as_ref())
        .filter(|f| !f.flagged)
        .map(|f| f.reported_timescale)
        .collect();
    let network_mean = (!usable.is_empty()).then(|| usable.iter().sum::<f64>() / usable.len() as f64);
    Ok(EffectiveTimescales {
        neurons,
        module_means,
        network_mean,
    })
}

/// Mean and population SD of the stored time constants, grouped per module
/// for modular networks and over the whole reservoir otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TauGroupStat {
    pub group: String,
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn trained_tau_stats(net: &Network) -> Vec<TauGroupStat> {
    match net.kind {
        NetworkKind::Modular => net
            .modules
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                let (mean, sd) = mean_sd(m.tau.iter().copied());
                TauGroupStat {
                    group: format!("module-{}", mi + 1),
                    mean,
                    sd,
                }
            })
            .collect(),
        NetworkKind::NonModular => {
            let (mean, sd) = mean_sd(net.modules[0].tau.iter().copied());
            vec![TauGroupStat {
                group: "all".to_string(),
                mean,
                sd,
            }]
        }
    }
}

/// Tau statistics across a sequence of curriculum checkpoints.
pub fn trained_timescale_summary(
    steps: &[(usize, &Network)],
) -> Vec<(usize, Vec<TauGroupStat>)> {
    steps
        .iter()
        .map(|&(n_solved, net)| (n_solved, trained_tau_stats(net)))
        .collect()
}
