//! Analytic parameter, FLOP, model-size and inference-energy accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActShape, Architecture, LayerSpec};
use crate::pruning::check_rho;

pub const BYTES_PER_MB: f64 = 1_048_576.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    /// Picojoules per floating-point operation.
    pub e_flop_pj: f64,
    /// Picojoules per MB (2^20 bytes) of model read.
    pub e_access_pj_per_mb: f64,
    pub bytes_per_param: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            e_flop_pj: 2.3,
            e_access_pj_per_mb: 640.0,
            bytes_per_param: 4.0,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if [
            self.e_flop_pj,
            self.e_access_pj_per_mb,
            self.bytes_per_param,
        ]
        .iter()
        .all(|&x| x > 0.0 && x.is_finite())
        {
            Ok(())
        } else {
            Err(Error::config(
                "energy constants must be positive and finite",
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostOptions {
    /// Include bias terms in the parameter count.
    #[serde(default)]
    pub count_biases: bool,
    /// Count a multiply-add as one operation (halves every FLOP figure).
    #[serde(default)]
    pub multiply_add_as_one: bool,
}

/// Weight count: `sum K*C_in*C_out` over conv layers plus `sum N_in*N_out`
/// over dense layers (plus biases if requested).
pub fn count_params(arch: &Architecture, opts: CostOptions) -> Result<u64> {
    arch.validate()?;
    Ok(arch
        .param_layers()
        .map(|(_, l)| {
            let w: usize = l.weight_shape().unwrap().iter().product();
            let b = if opts.count_biases {
                l.bias_len().unwrap()
            } else {
                0
            };
            (w + b) as u64
        })
        .sum())
}

/// Inference FLOPs: `2*K*C_in*L_out*C_out` per conv layer and `2*N_in*N_out`
/// per dense layer; activations, pooling and flattening are free.
pub fn count_flops(arch: &Architecture, opts: CostOptions) -> Result<u64> {
    let shapes = arch.trace()?;
    let mut total = 0u64;
    for (i, layer) in arch.layers.iter().enumerate() {
        total += match (*layer, shapes[i + 1]) {
            (
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel_size,
                    ..
                },
                ActShape::Seq { len, .. },
            ) => 2 * (kernel_size * in_channels * len * out_channels) as u64,
            (LayerSpec::Dense { n_in, n_out }, _) => 2 * (n_in * n_out) as u64,
            _ => 0,
        };
    }
    Ok(if opts.multiply_add_as_one {
        total / 2
    } else {
        total
    })
}

/// `FLOPs * E_FLOP + (NP * B / 2^20) * E_access`, in picojoules.
pub fn energy(flops: f64, np: f64, consts: &EnergyConstants) -> f64 {
    flops * consts.e_flop_pj
        + np * consts.bytes_per_param / BYTES_PER_MB * consts.e_access_pj_per_mb
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    /// Parameter count; real-valued once scaled by `1 - rho`.
    pub np: f64,
    pub flops: f64,
    pub model_size_bytes: f64,
    pub energy_pj: f64,
    pub rho: f64,
    pub constants: EnergyConstants,
}

impl CostProfile {
    pub fn from_counts(np: f64, flops: f64, consts: EnergyConstants) -> Self {
        CostProfile {
            np,
            flops,
            model_size_bytes: np * consts.bytes_per_param,
            energy_pj: energy(flops, np, &consts),
            rho: 0.0,
            constants: consts,
        }
    }

    pub fn model_size_mb(&self) -> f64 {
        self.model_size_bytes / BYTES_PER_MB
    }
}

pub fn profile(
    arch: &Architecture,
    consts: EnergyConstants,
    opts: CostOptions,
) -> Result<CostProfile> {
    consts.validate()?;
    let np = count_params(arch, opts)? as f64;
    let flops = count_flops(arch, opts)? as f64;
    Ok(CostProfile::from_counts(np, flops, consts))
}

/// Scales NP and FLOPs by `1 - rho` and recomputes size and energy.
pub fn pruned_profile(base: &CostProfile, rho: f64) -> Result<CostProfile> {
    check_rho(rho)?;
    let keep = 1.0 - rho;
    let mut p = CostProfile::from_counts(keep * base.np, keep * base.flops, base.constants);
    p.rho = 1.0 - (1.0 - base.rho) * keep;
    Ok(p)
}

/// Architectures whose counts match the published per-dataset figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    TonIot,
    XIiotid,
    Idsiot2024,
}

impl DatasetPreset {
    pub const ALL: [DatasetPreset; 3] = [
        DatasetPreset::TonIot,
        DatasetPreset::XIiotid,
        DatasetPreset::Idsiot2024,
    ];

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "toniot" => Some(DatasetPreset::TonIot),
            "xiiotid" => Some(DatasetPreset::XIiotid),
            "idsiot2024" => Some(DatasetPreset::Idsiot2024),
            _ => None,
        }
    }

    /// `(features, classes)`.
    pub fn dims(self) -> (usize, usize) {
        match self {
            DatasetPreset::TonIot => (42, 10),
            DatasetPreset::XIiotid => (65, 19),
            DatasetPreset::Idsiot2024 => (85, 12),
        }
    }

    pub fn arch(self) -> Architecture {
        let (f, c) = self.dims();
        Architecture::pooled(f, c)
    }

    /// Published `(NP, FLOPs, energy pJ)`.
    pub fn published(self) -> (u64, u64, f64) {
        match self {
            DatasetPreset::TonIot => (190218, 1378560, 3171152.39),
            DatasetPreset::XIiotid => (289682, 2126976, 4892751.232),
            DatasetPreset::Idsiot2024 => (370698, 2788224, 6413819.392),
        }
    }

    pub fn options(self) -> CostOptions {
        CostOptions {
            count_biases: true,
            multiply_add_as_one: false,
        }
    }
}
