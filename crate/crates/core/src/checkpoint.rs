//! Versioned checkpoint files.
//!
//! Checkpoints are JSON with an explicit `format_version`, matrices stored
//! row-major, all freeze flags, readout heads, and a config echo. Round-trips
//! are bit-exact for every parameter.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dynamics::ActivationConfig;
use crate::error::{CoreError, Result};
use crate::topology::{
    InitConfig, ModuleParams, Network, NetworkKind, ReadoutHead, TensorFreeze,
};

pub const FORMAT_VERSION: u32 = 1;

/// Run metadata carried alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub n_solved: usize,
    pub seed: u64,
    pub config_echo: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct FreezeDto {
    recurrent: bool,
    feedforward: bool,
    input: bool,
    bias: bool,
    tau: bool,
}

#[derive(Serialize, Deserialize)]
struct ModuleDto {
    size: usize,
    /// Row-major `size x size`.
    recurrent: Vec<f64>,
    /// Row-major `size x size`; absent for module 1.
    feedforward: Option<Vec<f64>>,
    input: Vec<f64>,
    bias: Vec<f64>,
    tau: Vec<f64>,
    frozen: FreezeDto,
}

#[derive(Serialize, Deserialize)]
struct HeadDto {
    task_n: usize,
    source_module: usize,
    /// Row-major `2 x size`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    kind: String,
    alpha: f64,
    tau_init: [f64; 2],
    n_solved: usize,
    seed: u64,
    config_echo: BTreeMap<String, String>,
    modules: Vec<ModuleDto>,
    heads: Vec<HeadDto>,
}

fn to_dto(net: &Network, meta: &CheckpointMeta) -> CheckpointFile {
    CheckpointFile {
        format_version: FORMAT_VERSION,
        kind: net.kind.as_str().to_string(),
        alpha: net.activation.alpha,
        tau_init: [net.init.tau_low, net.init.tau_high],
        n_solved: meta.n_solved,
        seed: meta.seed,
        config_echo: meta.config_echo.clone(),
        modules: net
            .modules
            .iter()
            .map(|m| ModuleDto {
                size: m.size(),
                recurrent: m.recurrent.iter().copied().collect(),
                feedforward: m.feedforward.as_ref().map(|f| f.iter().copied().collect()),
                input: m.input.to_vec(),
                bias: m.bias.to_vec(),
                tau: m.tau.to_vec(),
                frozen: FreezeDto {
                    recurrent: m.frozen.recurrent,
                    feedforward: m.frozen.feedforward,
                    input: m.frozen.input,
                    bias: m.frozen.bias,
                    tau: m.frozen.tau,
                },
            })
            .collect(),
        heads: net
            .heads
            .iter()
            .map(|h| HeadDto {
                task_n: h.task_n,
                source_module: h.source_module,
                weights: h.weights.iter().copied().collect(),
                biases: h.biases.to_vec(),
                frozen: h.frozen,
            })
            .collect(),
    }
}

fn corrupt(msg: impl Into<String>) -> CoreError {
    CoreError::CheckpointCorrupt(msg.into())
}

fn from_dto(file: CheckpointFile) -> Result<(Network, CheckpointMeta)> {
    if file.format_version != FORMAT_VERSION {
        return Err(CoreError::CheckpointVersion {
            found: file.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = match file.kind.as_str() {
        "modular" => NetworkKind::Modular,
        "non-modular" => NetworkKind::NonModular,
        other => return Err(corrupt(format!("unknown network kind `{other}`"))),
    };
    let mut modules = Vec::with_capacity(file.modules.len());
    for (mi, dto) in file.modules.into_iter().enumerate() {
        let m = dto.size;
        if dto.recurrent.len() != m * m {
            return Err(corrupt(format!(
                "module {mi}: recurrent has {} values, expected {}",
                dto.recurrent.len(),
                m * m
            )));
        }
        if dto.input.len() != m || dto.bias.len() != m || dto.tau.len() != m {
            return Err(corrupt(format!("module {mi}: vector length mismatch")));
        }
        let feedforward = match dto.feedforward {
            Some(v) => {
                if v.len() != m * m {
                    return Err(corrupt(format!(
                        "module {mi}: feedforward has {} values, expected {}",
                        v.len(),
                        m * m
                    )));
                }
                Some(
                    Array2::from_shape_vec((m, m), v)
                        .map_err(|e| corrupt(format!("module {mi}: {e}")))?,
                )
            }
            None => None,
        };
        modules.push(ModuleParams {
            recurrent: Array2::from_shape_vec((m, m), dto.recurrent)
                .map_err(|e| corrupt(format!("module {mi}: {e}")))?,
            feedforward,
            input: Array1::from_vec(dto.input),
            bias: Array1::from_vec(dto.bias),
            tau: Array1::from_vec(dto.tau),
            frozen: TensorFreeze {
                recurrent: dto.frozen.recurrent,
                feedforward: dto.frozen.feedforward,
                input: dto.frozen.input,
                bias: dto.frozen.bias,
                tau: dto.frozen.tau,
            },
        });
    }
    let mut heads = Vec::with_capacity(file.heads.len());
    for dto in file.heads {
        let src_size = modules
            .get(dto.source_module)
            .map(ModuleParams::size)
            .ok_or_else(|| {
                corrupt(format!(
                    "head for task {} reads from missing module {}",
                    dto.task_n, dto.source_module
                ))
            })?;
        if dto.weights.len() != 2 * src_size || dto.biases.len() != 2 {
            return Err(corrupt(format!(
                "head for task {}: weight/bias length mismatch",
                dto.task_n
            )));
        }
        heads.push(ReadoutHead {
            weights: Array2::from_shape_vec((2, src_size), dto.weights)
                .map_err(|e| corrupt(e.to_string()))?,
            biases: Array1::from_vec(dto.biases),
            task_n: dto.task_n,
            source_module: dto.source_module,
            frozen: dto.frozen,
        });
    }
    let net = Network {
        kind,
        modules,
        heads,
        activation: ActivationConfig::new(file.alpha)?,
        init: InitConfig {
            tau_low: file.tau_init[0],
            tau_high: file.tau_init[1],
        },
    };
    net.validate()?;
    Ok((
        net,
        CheckpointMeta {
            n_solved: file.n_solved,
            seed: file.seed,
            config_echo: file.config_echo,
        },
    ))
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let file = to_dto(net, meta);
    let json = serde_json::to_string(&file)
        .map_err(|e| corrupt(format!("serialization failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    from_dto(file)
}
