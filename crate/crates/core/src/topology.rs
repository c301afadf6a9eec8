//! Network construction, growth, freezing, duplication, and the forward pass.
//!
//! A non-modular network is a single recurrent reservoir with one readout
//! head per task. A modular network is an ordered chain of small recurrent
//! modules, each with its own two-unit readout head; module `m` (1-based)
//! solves task `N = m + 1` and, for `m > 1`, receives feedforward input from
//! module `m - 1`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{leaky_relu, ActivationConfig, DT};
use crate::error::{CoreError, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    NonModular,
    Modular,
}

impl NetworkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkKind::NonModular => "non-modular",
            NetworkKind::Modular => "modular",
        }
    }
}

/// Per-tensor trainability flags of one module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TensorFreeze {
    pub recurrent: bool,
    pub feedforward: bool,
    pub input: bool,
    pub bias: bool,
    pub tau: bool,
}

impl TensorFreeze {
    pub fn all() -> Self {
        Self {
            recurrent: true,
            feedforward: true,
            input: true,
            bias: true,
            tau: true,
        }
    }
}

/// Weight initialization: uniform on `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
/// for weight matrices, zero biases, tau uniform on `[tau_low, tau_high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub tau_low: f64,
    pub tau_high: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            tau_low: 1.0,
            tau_high: 3.0,
        }
    }
}

impl InitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tau_low >= 1.0 && self.tau_high >= self.tau_low) {
            return Err(CoreError::InvalidArgument(format!(
                "tau init range [{}, {}] must satisfy 1 <= low <= high",
                self.tau_low, self.tau_high
            )));
        }
        Ok(())
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Array1<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(len, |_| rng.random_range(-scale..scale))
}

/// All trainable tensors of one recurrent module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams {
    /// `M x M`, diagonal held at zero (no self-connections).
    pub recurrent: Array2<f64>,
    /// `M x M_prev`; present iff the module has a predecessor.
    pub feedforward: Option<Array2<f64>>,
    /// Input weights, one per neuron (scalar signal).
    pub input: Array1<f64>,
    pub bias: Array1<f64>,
    /// Per-neuron time constants, all `>= 1`.
    pub tau: Array1<f64>,
    pub frozen: TensorFreeze,
}

impl ModuleParams {
    pub fn size(&self) -> usize {
        self.tau.len()
    }

    fn fresh(rng: &mut ChaCha8Rng, size: usize, with_feedforward: bool, init: &InitConfig) -> Self {
        let mut recurrent = uniform_matrix(rng, size, size, size);
        recurrent.diag_mut().fill(0.0);
        let feedforward = with_feedforward.then(|| uniform_matrix(rng, size, size, size));
        let input = uniform_vector(rng, size, 1);
        let bias = Array1::zeros(size);
        let tau = Array1::from_shape_fn(size, |_| rng.random_range(init.tau_low..=init.tau_high));
        Self {
            recurrent,
            feedforward,
            input,
            bias,
            tau,
            frozen: TensorFreeze::default(),
        }
    }

    pub fn zero_recurrent_diagonal(&mut self) {
        self.recurrent.diag_mut().fill(0.0);
    }

    pub fn clamp_tau(&mut self) {
        self.tau.mapv_inplace(|t| t.max(1.0));
    }

    pub fn fully_frozen(&self) -> bool {
        let f = self.frozen;
        f.recurrent && f.input && f.bias && f.tau && (self.feedforward.is_none() || f.feedforward)
    }
}

/// A two-unit linear classifier attached to one module (or the whole
/// reservoir, which is module 0 of a non-modular network).
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutHead {
    /// `2 x M_src`.
    pub weights: Array2<f64>,
    /// Length 2.
    pub biases: Array1<f64>,
    /// The parity order this head solves.
    pub task_n: usize,
    /// Index into `Network::modules`.
    pub source_module: usize,
    pub frozen: bool,
}

impl ReadoutHead {
    fn fresh(rng: &mut ChaCha8Rng, task_n: usize, source_module: usize, src_size: usize) -> Self {
        Self {
            weights: uniform_matrix(rng, 2, src_size, src_size),
            biases: Array1::zeros(2),
            task_n,
            source_module,
            frozen: false,
        }
    }
}

/// How `grow` initializes and freezes the tensors of a new module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrowthPolicy {
    /// Copy the previous module's recurrent matrix instead of fresh init.
    pub duplicate_recurrent: bool,
    /// Copy the previous module's feedforward matrix instead of fresh init
    /// (the second module always gets a fresh one; module 1 has none).
    pub duplicate_feedforward: bool,
    pub freeze_mode: FreezeMode,
    /// Freeze the readout heads of completed tasks.
    pub freeze_old_heads: bool,
    /// Freeze the time constants of completed modules along with their
    /// connectivity.
    pub freeze_old_tau: bool,
}

impl Default for GrowthPolicy {
    fn default() -> Self {
        Self {
            duplicate_recurrent: true,
            duplicate_feedforward: true,
            freeze_mode: FreezeMode::None,
            freeze_old_heads: true,
            freeze_old_tau: true,
        }
    }
}

/// Ablation regimes: keep one connectivity class fixed after it is first
/// trained, duplicating it into every later module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeMode {
    None,
    /// New modules reuse the first trained recurrent matrix, frozen; only
    /// feedforward (plus input, bias, tau, head) trains. Deep-reservoir
    /// regime.
    Recurrent,
    /// The feedforward matrix trained between modules 1 and 2 is copied and
    /// frozen in every later module; recurrent weights train.
    Feedforward,
}

impl FreezeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FreezeMode::None => "none",
            FreezeMode::Recurrent => "recurrent",
            FreezeMode::Feedforward => "feedforward",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub kind: NetworkKind,
    pub modules: Vec<ModuleParams>,
    pub heads: Vec<ReadoutHead>,
    pub activation: ActivationConfig,
    pub init: InitConfig,
}

/// Build a one-module, one-head network for task N = 2.
pub fn new_network(
    kind: NetworkKind,
    size: usize,
    seed: u64,
    activation: ActivationConfig,
    init: InitConfig,
) -> Result<Network> {
    if size == 0 {
        return Err(CoreError::InvalidArgument(
            "network size must be positive".to_string(),
        ));
    }
    init.validate()?;
    let mut rng = stream(seed, "init", &[0]);
    let module = ModuleParams::fresh(&mut rng, size, false, &init);
    let head = ReadoutHead::fresh(&mut rng, 2, 0, size);
    Ok(Network {
        kind,
        modules: vec![module],
        heads: vec![head],
        activation,
        init,
    })
}

impl Network {
    pub fn size(&self) -> usize {
        self.modules[0].size()
    }

    pub fn total_neurons(&self) -> usize {
        self.modules.iter().map(ModuleParams::size).sum()
    }

    pub fn head_for_task(&self, task_n: usize) -> Option<(usize, &ReadoutHead)> {
        self.heads
            .iter()
            .enumerate()
            .find(|(_, h)| h.task_n == task_n)
    }

    /// Largest task any head covers.
    pub fn max_task(&self) -> usize {
        self.heads.iter().map(|h| h.task_n).max().unwrap_or(0)
    }

    /// Append a module and its head for the next task. Freezes all previous
    /// modules (and heads, per policy); the new module and head stay
    /// trainable except for tensors pinned by the freeze mode.
    pub fn grow(&mut self, policy: &GrowthPolicy, seed: u64) -> Result<()> {
        if self.kind != NetworkKind::Modular {
            return Err(CoreError::WrongArchitecture("modular"));
        }
        let size = self.size();
        let last = self.modules.len() - 1;
        let new_index = self.modules.len();
        let mut rng = stream(seed, "grow", &[new_index as u64]);

        let mut module = ModuleParams::fresh(&mut rng, size, true, &self.init);
        match policy.freeze_mode {
            FreezeMode::Recurrent => {
                module.recurrent = self.modules[last].recurrent.clone();
                module.frozen.recurrent = true;
            }
            // With frozen feedforward templates each module re-learns its
            // recurrent weights from scratch.
            FreezeMode::Feedforward => {}
            FreezeMode::None if policy.duplicate_recurrent => {
                module.recurrent = self.modules[last].recurrent.clone();
            }
            FreezeMode::None => {}
        }
        if let Some(prev_ff) = self.modules[last].feedforward.as_ref() {
            match policy.freeze_mode {
                FreezeMode::Feedforward => {
                    module.feedforward = Some(prev_ff.clone());
                    module.frozen.feedforward = true;
                }
                _ if policy.duplicate_feedforward => {
                    module.feedforward = Some(prev_ff.clone());
                }
                _ => {}
            }
        }

        for old in &mut self.modules {
            let keep_tau_trainable = !policy.freeze_old_tau && !old.frozen.tau;
            old.frozen = TensorFreeze::all();
            if keep_tau_trainable {
                old.frozen.tau = false;
            }
        }
        if policy.freeze_old_heads {
            for head in &mut self.heads {
                head.frozen = true;
            }
        }

        let head = ReadoutHead::fresh(&mut rng, new_index + 2, new_index, size);
        self.modules.push(module);
        self.heads.push(head);
        Ok(())
    }

    /// Append a readout head for the next task onto the reservoir. The
    /// reservoir and all previous heads remain trainable.
    pub fn add_head(&mut self, seed: u64) -> Result<()> {
        if self.kind != NetworkKind::NonModular {
            return Err(CoreError::WrongArchitecture("non-modular"));
        }
        let task_n = self.max_task() + 1;
        let mut rng = stream(seed, "head", &[task_n as u64]);
        let head = ReadoutHead::fresh(&mut rng, task_n, 0, self.size());
        self.heads.push(head);
        Ok(())
    }

    /// `(total, trainable)` parameter counts. Totals include frozen tensors;
    /// the recurrent diagonal is structural and never counted.
    pub fn count_parameters(&self) -> (usize, usize) {
        let mut total = 0;
        let mut trainable = 0;
        for module in &self.modules {
            let m = module.size();
            let rec = m * (m - 1);
            total += rec;
            if !module.frozen.recurrent {
                trainable += rec;
            }
            if let Some(ff) = module.feedforward.as_ref() {
                total += ff.len();
                if !module.frozen.feedforward {
                    trainable += ff.len();
                }
            }
            total += m; // input
            if !module.frozen.input {
                trainable += m;
            }
            total += m; // bias
            if !module.frozen.bias {
                trainable += m;
            }
            total += m; // tau
            if !module.frozen.tau {
                trainable += m;
            }
        }
        for head in &self.heads {
            let n = head.weights.len() + head.biases.len();
            total += n;
            if !head.frozen {
                trainable += n;
            }
        }
        (total, trainable)
    }

    /// Freeze every tensor and head.
    pub fn freeze_all(&mut self) {
        for module in &mut self.modules {
            module.frozen = TensorFreeze::all();
        }
        for head in &mut self.heads {
            head.frozen = true;
        }
    }

    /// Copy of the first `n_modules` modules and the heads reading from them.
    pub fn truncated(&self, n_modules: usize) -> Result<Network> {
        if n_modules == 0 || n_modules > self.modules.len() {
            return Err(CoreError::InvalidArgument(format!(
                "cannot truncate {}-module network to {n_modules} modules",
                self.modules.len()
            )));
        }
        Ok(Network {
            kind: self.kind,
            modules: self.modules[..n_modules].to_vec(),
            heads: self
                .heads
                .iter()
                .filter(|h| h.source_module < n_modules)
                .cloned()
                .collect(),
            activation: self.activation,
            init: self.init,
        })
    }

    /// Structural validation: shapes, zero diagonals, tau bounds, head
    /// sources, task coverage.
    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(CoreError::InvalidArgument("no modules".to_string()));
        }
        if self.kind == NetworkKind::NonModular && self.modules.len() != 1 {
            return Err(CoreError::InvalidArgument(
                "non-modular networks have exactly one module".to_string(),
            ));
        }
        let size = self.size();
        for (idx, module) in self.modules.iter().enumerate() {
            let m = module.size();
            if m != size {
                return Err(CoreError::ShapeMismatch {
                    what: format!("module {idx} size"),
                    expected: size.to_string(),
                    actual: m.to_string(),
                });
            }
            if module.recurrent.nrows() != m || module.recurrent.ncols() != m {
                return Err(CoreError::ShapeMismatch {
                    what: format!("module {idx} recurrent"),
                    expected: format!("{m}x{m}"),
                    actual: format!("{}x{}", module.recurrent.nrows(), module.recurrent.ncols()),
                });
            }
            if module.input.len() != m || module.bias.len() != m || module.tau.len() != m {
                return Err(CoreError::ShapeMismatch {
                    what: format!("module {idx} vectors"),
                    expected: m.to_string(),
                    actual: format!(
                        "{}/{}/{}",
                        module.input.len(),
                        module.bias.len(),
                        module.tau.len()
                    ),
                });
            }
            match (idx, module.feedforward.as_ref()) {
                (0, Some(_)) => {
                    return Err(CoreError::InvalidArgument(
                        "module 1 must not have feedforward weights".to_string(),
                    ));
                }
                (i, None) if i > 0 => {
                    return Err(CoreError::InvalidArgument(format!(
                        "module {} is missing feedforward weights",
                        i + 1
                    )));
                }
                (_, Some(ff)) => {
                    if ff.nrows() != m || ff.ncols() != size {
                        return Err(CoreError::ShapeMismatch {
                            what: format!("module {idx} feedforward"),
                            expected: format!("{m}x{size}"),
                            actual: format!("{}x{}", ff.nrows(), ff.ncols()),
                        });
                    }
                }
                _ => {}
            }
            if module.recurrent.diag().iter().any(|&d| d != 0.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "module {idx} has nonzero recurrent diagonal"
                )));
            }
            if module.tau.iter().any(|&t| !(t >= 1.0) || !t.is_finite()) {
                return Err(CoreError::InvalidArgument(format!(
                    "module {idx} has tau outside [1, inf)"
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for head in &self.heads {
            if head.source_module >= self.modules.len() {
                return Err(CoreError::InvalidArgument(format!(
                    "head for task {} reads from missing module {}",
                    head.task_n, head.source_module
                )));
            }
            if head.weights.nrows() != 2
                || head.weights.ncols() != self.modules[head.source_module].size()
                || head.biases.len() != 2
            {
                return Err(CoreError::ShapeMismatch {
                    what: format!("head for task {}", head.task_n),
                    expected: format!("2x{}", self.modules[head.source_module].size()),
                    actual: format!("{}x{}", head.weights.nrows(), head.weights.ncols()),
                });
            }
            if head.task_n < 2 || !seen.insert(head.task_n) {
                return Err(CoreError::InvalidArgument(format!(
                    "duplicate or invalid head task N={}",
                    head.task_n
                )));
            }
        }
        Ok(())
    }
}

/// Flat addressing of all neurons across modules (module-major).
#[derive(Debug, Clone)]
pub struct Layout {
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl Layout {
    pub fn of(net: &Network) -> Self {
        let mut offsets = Vec::with_capacity(net.modules.len());
        let mut total = 0;
        for module in &net.modules {
            offsets.push(total);
            total += module.size();
        }
        Self { offsets, total }
    }

    pub fn module_range(&self, net: &Network, m: usize) -> std::ops::Range<usize> {
        let start = self.offsets[m];
        start..start + net.modules[m].size()
    }
}

/// Streaming forward pass. All modules update from the previous timestep's
/// activities; readout heads see the current timestep's post-update state.
pub struct Stepper<'a> {
    net: &'a Network,
    layout: Layout,
    r_prev: Vec<f64>,
    r_cur: Vec<f64>,
    drive: Vec<f64>,
    act: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(net: &'a Network) -> Self {
        let layout = Layout::of(net);
        let total = layout.total;
        Self {
            net,
            layout,
            r_prev: vec![0.0; total],
            r_cur: vec![0.0; total],
            drive: vec![0.0; total],
            act: vec![0.0; total],
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Reset to the initial condition r(0) = 0.
    pub fn reset(&mut self) {
        self.r_prev.fill(0.0);
        self.r_cur.fill(0.0);
        self.drive.fill(0.0);
        self.act.fill(0.0);
    }

    /// Advance one timestep with input bit `bit`.
    pub fn step(&mut self, bit: u8) {
        let signal = f64::from(bit);
        let alpha = self.net.activation.alpha;
        let mut prev_range: Option<std::ops::Range<usize>> = None;
        for (m, module) in self.net.modules.iter().enumerate() {
            let range = self.layout.module_range(self.net, m);
            let prev_state = prev_range
                .as_ref()
                .map_or(&[][..], |r| &self.r_prev[r.clone()]);
            crate::dynamics::drive_into(
                &module.recurrent,
                module.feedforward.as_ref(),
                module.input.as_slice().unwrap(),
                module.bias.as_slice().unwrap(),
                &self.r_prev[range.clone()],
                prev_state,
                signal,
                &mut self.drive[range.clone()],
            );
            let tau = module.tau.as_slice().unwrap();
            for i in range.clone() {
                let a = leaky_relu(self.drive[i], alpha);
                self.act[i] = a;
                let gate = DT / tau[i - range.start];
                self.r_cur[i] = (1.0 - gate) * self.r_prev[i] + gate * a;
            }
            prev_range = Some(range);
        }
        std::mem::swap(&mut self.r_prev, &mut self.r_cur);
    }

    /// Post-update activities of the current timestep.
    pub fn rates(&self) -> &[f64] {
        &self.r_prev
    }

    pub fn module_rates(&self, m: usize) -> &[f64] {
        &self.r_prev[self.layout.module_range(self.net, m)]
    }

    pub(crate) fn drives(&self) -> &[f64] {
        &self.drive
    }

    pub(crate) fn acts(&self) -> &[f64] {
        &self.act
    }

    /// Two logits of head `h` at the current timestep.
    pub fn head_logits(&self, h: usize) -> [f64; 2] {
        let head = &self.net.heads[h];
        let src = self.module_rates(head.source_module);
        let w = head.weights.as_slice().unwrap();
        let m = src.len();
        let mut z = [head.biases[0], head.biases[1]];
        for (k, out) in z.iter_mut().enumerate() {
            let row = &w[k * m..(k + 1) * m];
            let mut acc = 0.0;
            for (wk, r) in row.iter().zip(src.iter()) {
                acc += wk * r;
            }
            *out += acc;
        }
        z
    }
}

/// Full record of one sequence's forward pass: per-timestep drives,
/// rectified activations, post-update rates, and per-head logits.
#[derive(Debug, Clone, Default)]
pub struct SeqRecord {
    pub len: usize,
    pub total_neurons: usize,
    pub n_heads: usize,
    pub bits: Vec<u8>,
    /// `[t * total_neurons + i]`
    pub drives: Vec<f64>,
    pub acts: Vec<f64>,
    pub rates: Vec<f64>,
    /// `[ (t * n_heads + h) * 2 + class ]`
    pub logits: Vec<f64>,
}

impl SeqRecord {
    pub fn rates_at(&self, t: usize) -> &[f64] {
        &self.rates[t * self.total_neurons..(t + 1) * self.total_neurons]
    }

    pub fn drives_at(&self, t: usize) -> &[f64] {
        &self.drives[t * self.total_neurons..(t + 1) * self.total_neurons]
    }

    pub fn acts_at(&self, t: usize) -> &[f64] {
        &self.acts[t * self.total_neurons..(t + 1) * self.total_neurons]
    }

    pub fn logits_at(&self, t: usize, h: usize) -> [f64; 2] {
        let base = (t * self.n_heads + h) * 2;
        [self.logits[base], self.logits[base + 1]]
    }
}

/// Run `net` over a bit sequence, recording the full trace.
pub fn forward(net: &Network, bits: &[u8]) -> SeqRecord {
    let mut record = SeqRecord::default();
    forward_into(net, bits, &mut record);
    record
}

/// As [`forward`], reusing the record's buffers.
pub fn forward_into(net: &Network, bits: &[u8], record: &mut SeqRecord) {
    let mut stepper = Stepper::new(net);
    let total = stepper.layout.total;
    let n_heads = net.heads.len();
    record.len = bits.len();
    record.total_neurons = total;
    record.n_heads = n_heads;
    record.bits.clear();
    record.bits.extend_from_slice(bits);
    record.drives.clear();
    record.acts.clear();
    record.rates.clear();
    record.logits.clear();
    record.drives.reserve(total * bits.len());
    record.acts.reserve(total * bits.len());
    record.rates.reserve(total * bits.len());
    record.logits.reserve(2 * n_heads * bits.len());
    for &bit in bits {
        stepper.step(bit);
        record.drives.extend_from_slice(stepper.drives());
        record.acts.extend_from_slice(stepper.acts());
        record.rates.extend_from_slice(stepper.rates());
        for h in 0..n_heads {
            let z = stepper.head_logits(h);
            record.logits.push(z[0]);
            record.logits.push(z[1]);
        }
    }
}
