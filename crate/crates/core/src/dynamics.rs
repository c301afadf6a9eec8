//! Single-neuron dynamics and per-timestep drive kernels.
//!
//! A rate neuron integrates a leaky-ReLU-rectified drive with a trainable
//! time constant:
//!
//! ```text
//! r_i(t) = (1 - 1/tau_i) * r_i(t-1) + (1/tau_i) * phi(C_i(t))
//! ```
//!
//! with `tau_i >= 1` and unit time discretization. The drive `C_i(t)` sums a
//! recurrent term over the other neurons of the same population (no
//! self-connections), an optional feedforward term from the previous module,
//! the scalar input signal, and a bias. Both the recurrent and feedforward
//! terms read the *previous* timestep's activities.

use ndarray::{Array1, Array2};

use crate::error::{CoreError, Result};

/// Time discretization of the dynamics. Fixed; the update rule assumes it.
pub const DT: f64 = 1.0;

/// Nonlinearity configuration. The time discretization is [`DT`] and is not
/// configurable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationConfig {
    /// Negative slope of the leaky ReLU, in (0, 1).
    pub alpha: f64,
}

impl ActivationConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "leaky ReLU slope must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self { alpha: 0.01 }
    }
}

/// Parameters of a single neuron: time constant, bias, and its row of the
/// input weight vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    pub tau: f64,
    pub bias: f64,
    pub input_weight: f64,
}

impl NeuronParams {
    pub fn new(tau: f64, bias: f64, input_weight: f64) -> Result<Self> {
        if !(tau >= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "tau must be >= 1, got {tau}"
            )));
        }
        Ok(Self {
            tau,
            bias,
            input_weight,
        })
    }

    /// Drive of this neuron given the summed recurrent input and the signal.
    pub fn drive(&self, recurrent_sum: f64, signal: f64) -> f64 {
        recurrent_sum + self.input_weight * signal + self.bias
    }

    /// One integration step of this neuron.
    pub fn step(&self, r_prev: f64, drive: f64, alpha: f64) -> f64 {
        neuron_update(r_prev, drive, self.tau, alpha)
    }
}

/// Leaky ReLU: identity for `x >= 0`, slope `alpha` below zero.
#[inline]
pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Derivative of [`leaky_relu`] (the `x >= 0` branch at the kink).
#[inline]
pub fn leaky_relu_grad(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        alpha
    }
}

/// One leaky-integrator step. `tau = 1` makes the neuron memoryless: the new
/// state equals the rectified drive exactly.
///
/// Panics if `tau < 1`; that violates the parameterization contract which all
/// construction, optimizer, and perturbation paths enforce.
#[inline]
pub fn neuron_update(r_prev: f64, drive: f64, tau: f64, alpha: f64) -> f64 {
    assert!(tau >= 1.0, "tau must be >= 1, got {tau}");
    let gate = DT / tau;
    (1.0 - gate) * r_prev + gate * leaky_relu(drive, alpha)
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(CoreError::ShapeMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

/// `out += W x` for a row-major matrix, excluding the diagonal term when
/// `skip_diagonal` is set (the recurrent sums run over `j != i`).
pub(crate) fn matvec_acc(w: &Array2<f64>, x: &[f64], out: &mut [f64], skip_diagonal: bool) {
    let cols = w.ncols();
    let data = w.as_slice().expect("weight matrices are standard layout");
    for (i, (row, o)) in data.chunks_exact(cols).zip(out.iter_mut()).enumerate() {
        let mut acc = 0.0;
        for (wij, xj) in row.iter().zip(x.iter()) {
            acc += wij * xj;
        }
        if skip_diagonal {
            acc -= row[i] * x[i];
        }
        *o += acc;
    }
}

/// Drive computation shared by both architectures; feedforward part optional.
pub(crate) fn drive_into(
    recurrent: &Array2<f64>,
    feedforward: Option<&Array2<f64>>,
    input: &[f64],
    bias: &[f64],
    state: &[f64],
    prev_module_state: &[f64],
    signal: f64,
    out: &mut [f64],
) {
    for ((o, wi), b) in out.iter_mut().zip(input.iter()).zip(bias.iter()) {
        *o = wi * signal + b;
    }
    matvec_acc(recurrent, state, out, true);
    if let Some(ff) = feedforward {
        matvec_acc(ff, prev_module_state, out, false);
    }
}

/// Per-neuron drive of a non-modular network:
/// `C_i = sum_{j != i} W^R_ij r_j + W^I_i S + b_i`.
pub fn nonmodular_drive(
    recurrent: &Array2<f64>,
    input: &Array1<f64>,
    bias: &Array1<f64>,
    state: &Array1<f64>,
    signal: f64,
) -> Result<Array1<f64>> {
    let m = recurrent.nrows();
    check_len("recurrent columns", m, recurrent.ncols())?;
    check_len("input weights", m, input.len())?;
    check_len("biases", m, bias.len())?;
    check_len("state", m, state.len())?;
    let mut out = vec![0.0; m];
    drive_into(
        recurrent,
        None,
        input.as_slice().unwrap(),
        bias.as_slice().unwrap(),
        state.as_slice().unwrap(),
        &[],
        signal,
        &mut out,
    );
    Ok(Array1::from_vec(out))
}

/// Per-neuron drive of one module of a modular network. Module 1 has no
/// feedforward term; later modules additionally receive
/// `sum_k W^FF_ik r^{m-1}_k` from the previous module's activities at the
/// previous timestep. Pass `feedforward` and `prev_module_state` together or
/// not at all.
pub fn modular_drive(
    recurrent: &Array2<f64>,
    feedforward: Option<&Array2<f64>>,
    input: &Array1<f64>,
    bias: &Array1<f64>,
    state: &Array1<f64>,
    prev_module_state: Option<&Array1<f64>>,
    signal: f64,
) -> Result<Array1<f64>> {
    let m = recurrent.nrows();
    check_len("recurrent columns", m, recurrent.ncols())?;
    check_len("input weights", m, input.len())?;
    check_len("biases", m, bias.len())?;
    check_len("state", m, state.len())?;
    match (feedforward, prev_module_state) {
        (None, None) => {}
        (Some(ff), Some(prev)) => {
            check_len("feedforward rows", m, ff.nrows())?;
            check_len("feedforward columns", prev.len(), ff.ncols())?;
        }
        _ => {
            return Err(CoreError::InvalidArgument(
                "feedforward weights and previous-module state must be supplied together \
                 (module 1 has neither)"
                    .to_string(),
            ));
        }
    }
    let mut out = vec![0.0; m];
    drive_into(
        recurrent,
        feedforward,
        input.as_slice().unwrap(),
        bias.as_slice().unwrap(),
        state.as_slice().unwrap(),
        prev_module_state.map_or(&[][..], |p| p.as_slice().unwrap()),
        signal,
        &mut out,
    );
    Ok(Array1::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::arr1;
    use rand::Rng;

    #[test]
    fn leaky_relu_branches() {
        assert_eq!(leaky_relu(3.0, 0.01), 3.0);
        assert_eq!(leaky_relu(0.0, 0.01), 0.0);
        assert!((leaky_relu(-2.0, 0.1) - (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn neuron_update_examples() {
        // tau = 1: no memory of the previous state.
        assert_eq!(neuron_update(5.0, 2.0, 1.0, 0.01), 2.0);
        // Fixed point on the positive branch when drive equals state.
        for x in [0.0, 0.5, 3.25] {
            let next = neuron_update(x, x, 4.0, 0.01);
            assert!((next - x).abs() < 1e-15, "x={x} next={next}");
        }
        assert!((neuron_update(0.0, 1.0, 2.0, 0.01) - 0.5).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "tau must be >= 1")]
    fn neuron_update_rejects_small_tau() {
        neuron_update(0.0, 1.0, 0.5, 0.01);
    }

    #[test]
    fn neuron_params_validation() {
        assert!(NeuronParams::new(0.9, 0.0, 0.0).is_err());
        let p = NeuronParams::new(2.0, 0.25, 1.5).unwrap();
        assert_eq!(p.drive(0.5, 1.0), 0.5 + 1.5 + 0.25);
    }

    #[test]
    fn zero_weight_drive_is_bias() {
        let r = Array2::zeros((3, 3));
        let b = arr1(&[0.1, -0.2, 0.3]);
        let c = nonmodular_drive(&r, &Array1::zeros(3), &b, &Array1::zeros(3), 1.0).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn pure_input_drive_is_all_ones() {
        let r = Array2::zeros((4, 4));
        let c = nonmodular_drive(&r, &Array1::ones(4), &Array1::zeros(4), &Array1::zeros(4), 1.0)
            .unwrap();
        assert_eq!(c, Array1::<f64>::ones(4));
    }

    /// Independent elementwise-loop oracle for the non-modular drive.
    fn loop_drive(
        r: &Array2<f64>,
        wi: &Array1<f64>,
        b: &Array1<f64>,
        state: &Array1<f64>,
        s: f64,
    ) -> Array1<f64> {
        let m = state.len();
        let mut out = Array1::zeros(m);
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                if j != i {
                    acc += r[[i, j]] * state[j];
                }
            }
            out[i] = acc + wi[i] * s + b[i];
        }
        out
    }

    #[test]
    fn nonmodular_drive_matches_loop_oracle() {
        let mut rng = stream(42, "drive-oracle", &[]);
        for _ in 0..20 {
            let m = 3;
            let r = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
            let wi = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let b = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let state = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let s = rng.random_range(0.0..1.0);
            let fast = nonmodular_drive(&r, &wi, &b, &state, s).unwrap();
            let slow = loop_drive(&r, &wi, &b, &state, s);
            for i in 0..m {
                assert!((fast[i] - slow[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modular_drive_matches_double_loop_oracle() {
        let mut rng = stream(43, "modular-oracle", &[]);
        for _ in 0..20 {
            let m = 4;
            let r = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
            let ff = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
            let wi = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let b = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let state = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let prev = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let s = rng.random_range(0.0..1.0);
            let fast =
                modular_drive(&r, Some(&ff), &wi, &b, &state, Some(&prev), s).unwrap();
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..m {
                    if j != i {
                        acc += r[[i, j]] * state[j];
                    }
                }
                for k in 0..m {
                    acc += ff[[i, k]] * prev[k];
                }
                acc += wi[i] * s + b[i];
                assert!((fast[i] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modular_with_zero_ff_reduces_to_nonmodular_bitwise() {
        let mut rng = stream(44, "reduction", &[]);
        for _ in 0..10 {
            let m = 5;
            let r = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
            let wi = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let b = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let state = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let prev = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            let zero_ff = Array2::zeros((m, m));
            let s = rng.random_range(0.0..1.0);
            let a = nonmodular_drive(&r, &wi, &b, &state, s).unwrap();
            let c = modular_drive(&r, Some(&zero_ff), &wi, &b, &state, Some(&prev), s).unwrap();
            // Bit-identical, not merely close.
            for i in 0..m {
                assert_eq!(a[i].to_bits(), c[i].to_bits());
            }
        }
    }

    #[test]
    fn identity_ff_relays_previous_module_state() {
        let m = 3;
        let prev = arr1(&[0.3, -0.7, 1.1]);
        let c = modular_drive(
            &Array2::zeros((m, m)),
            Some(&Array2::eye(m)),
            &Array1::zeros(m),
            &Array1::zeros(m),
            &Array1::zeros(m),
            Some(&prev),
            1.0,
        )
        .unwrap();
        assert_eq!(c, prev);
    }

    #[test]
    fn ff_without_prev_state_is_rejected() {
        let m = 2;
        let r = Array2::zeros((m, m));
        let ff = Array2::zeros((m, m));
        let v = Array1::zeros(m);
        assert!(modular_drive(&r, Some(&ff), &v, &v, &v, None, 0.0).is_err());
        assert!(modular_drive(&r, None, &v, &v, &v, Some(&v.clone()), 0.0).is_err());
    }

    #[test]
    fn drive_is_linear_in_state_and_signal() {
        let mut rng = stream(45, "linearity", &[]);
        let m = 4;
        let r = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
        let ff = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
        let wi = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
        let state = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
        let prev = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
        let zeros = Array1::zeros(m);
        for a in [0.5, 2.0, -3.0] {
            let scaled = modular_drive(
                &r,
                Some(&ff),
                &wi,
                &zeros,
                &(state.clone() * a),
                Some(&(prev.clone() * a)),
                a * 0.7,
            )
            .unwrap();
            let base =
                modular_drive(&r, Some(&ff), &wi, &zeros, &state, Some(&prev), 0.7).unwrap();
            for i in 0..m {
                assert!((scaled[i] - a * base[i]).abs() < 1e-10);
            }
        }
    }
}
