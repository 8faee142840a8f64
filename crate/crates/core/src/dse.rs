//! Design-space sweeps over the estimator: scaling knobs, the tiling cost
//! of odd-sized layers, and a faster-memory variant of the baseline chip.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{estimate, geometric_mean, weighted_mean, AnalysisError};
use crate::archconfig::TpuConfig;
use crate::workloads::{published, WorkloadSpec, PRESET_NAMES};

#[derive(Debug, Error)]
pub enum DseError {
    #[error("factor {factor} outside [{MIN_FACTOR}, {MAX_FACTOR}]")]
    FactorRange { factor: f64 },
    #[error("host fraction {0} must lie in [0, 1)")]
    HostFraction(f64),
    #[error("{gains} gains but {fractions} host fractions")]
    Length { gains: usize, fractions: usize },
    #[error("unknown knob {0:?}")]
    UnknownKnob(String),
    #[error("baseline estimate failed for {workload}: {source}")]
    Baseline {
        workload: String,
        #[source]
        source: AnalysisError,
    },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const MIN_FACTOR: f64 = 0.25;
pub const MAX_FACTOR: f64 = 4.0;

/// Host interaction time as a fraction of accelerator time, per preset.
pub const HOST_INTERACTION: [f64; 6] = [0.21, 0.76, 0.11, 0.20, 0.51, 0.14];

pub fn host_interaction(name: &str) -> Option<f64> {
    PRESET_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
        .map(|i| HOST_INTERACTION[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleKnob {
    Memory,
    Clock,
    /// Clock with accumulators scaled alongside.
    ClockPlus,
    Matrix,
    /// Matrix dimension with accumulators scaled by its square.
    MatrixPlus,
}

impl ScaleKnob {
    pub const ALL: [ScaleKnob; 5] = [
        ScaleKnob::Memory,
        ScaleKnob::Clock,
        ScaleKnob::ClockPlus,
        ScaleKnob::Matrix,
        ScaleKnob::MatrixPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScaleKnob::Memory => "memory",
            ScaleKnob::Clock => "clock",
            ScaleKnob::ClockPlus => "clock+",
            ScaleKnob::Matrix => "matrix",
            ScaleKnob::MatrixPlus => "matrix+",
        }
    }

    /// `cfg` with this knob scaled by `factor`. Factor 1 returns `cfg`
    /// unchanged.
    pub fn apply(self, cfg: &TpuConfig, factor: f64) -> Result<TpuConfig, DseError> {
        if !(MIN_FACTOR..=MAX_FACTOR).contains(&factor) {
            return Err(DseError::FactorRange { factor });
        }
        let mut c = cfg.clone();
        let scale_acc = |acc: u32, by: f64| ((f64::from(acc) * by).round() as u32).max(1);
        match self {
            ScaleKnob::Memory => c.weight_bw *= factor,
            ScaleKnob::Clock => c.clock_hz *= factor,
            ScaleKnob::ClockPlus => {
                c.clock_hz *= factor;
                c.acc_entries = scale_acc(c.acc_entries, factor);
            }
            ScaleKnob::Matrix | ScaleKnob::MatrixPlus => {
                let dim = ((f64::from(c.matrix_dim) * factor).round() as u32).max(1);
                let grow = f64::from(dim) / f64::from(c.matrix_dim);
                c.matrix_dim = dim;
                if self == ScaleKnob::MatrixPlus {
                    c.acc_entries = scale_acc(c.acc_entries, grow * grow);
                }
            }
        }
        Ok(c)
    }
}

impl fmt::Display for ScaleKnob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScaleKnob {
    type Err = DseError;

    fn from_str(s: &str) -> Result<Self, DseError> {
        match s.to_ascii_lowercase().as_str() {
            "memory" | "mem" => Ok(ScaleKnob::Memory),
            "clock" => Ok(ScaleKnob::Clock),
            "clock+" | "clock-plus" | "clockplus" => Ok(ScaleKnob::ClockPlus),
            "matrix" => Ok(ScaleKnob::Matrix),
            "matrix+" | "matrix-plus" | "matrixplus" => Ok(ScaleKnob::MatrixPlus),
            _ => Err(DseError::UnknownKnob(s.into())),
        }
    }
}

/// One (factor, workload) point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub factor: f64,
    pub workload: String,
    /// Estimated multiply-accumulates per second, or why it failed.
    pub perf: Result<f64, String>,
    /// Performance relative to the unscaled configuration.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub factor: f64,
    pub geometric: Option<f64>,
    pub weighted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub knob: ScaleKnob,
    pub factors: Vec<f64>,
    pub workloads: Vec<String>,
    pub baseline: Vec<f64>,
    /// Factor-major, workloads in input order.
    pub cells: Vec<SweepCell>,
    pub means: Vec<SweepMean>,
}

impl SweepResult {
    pub fn cell(&self, factor: f64, workload: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.factor == factor && c.workload == workload)
    }

    pub fn mean(&self, factor: f64) -> Option<&SweepMean> {
        self.means.iter().find(|m| m.factor == factor)
    }
}

/// Deployment weights for `workloads`; uniform unless all are presets.
pub fn mix_for(workloads: &[WorkloadSpec]) -> Vec<f64> {
    let shares: Option<Vec<f64>> = workloads.iter().map(|w| published(&w.name).map(|p| p.share)).collect();
    shares.unwrap_or_else(|| vec![1.0; workloads.len()])
}

fn means_of(factor: f64, speedups: &[Option<f64>], weights: &[f64]) -> SweepMean {
    let all: Option<Vec<f64>> = speedups.iter().copied().collect();
    SweepMean {
        factor,
        geometric: all.as_ref().and_then(|v| geometric_mean(v).ok()),
        weighted: all.as_ref().and_then(|v| weighted_mean(v, weights).ok()),
    }
}

/// Scales `knob` by each factor and re-estimates every workload. Cells that
/// no longer fit the scaled chip are reported, not fatal.
pub fn sweep(workloads: &[WorkloadSpec], knob: ScaleKnob, factors: &[f64], cfg: &TpuConfig) -> Result<SweepResult, DseError> {
    let cfgs = factors
        .iter()
        .map(|&f| knob.apply(cfg, f))
        .collect::<Result<Vec<_>, _>>()?;
    let baseline = workloads
        .par_iter()
        .map(|w| {
            estimate(w, cfg).map(|e| e.ops_per_s).map_err(|source| DseError::Baseline {
                workload: w.name.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..factors.len())
        .flat_map(|f| (0..workloads.len()).map(move |w| (f, w)))
        .collect();
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(fi, wi)| {
            let perf = estimate(&workloads[wi], &cfgs[fi])
                .map(|e| e.ops_per_s)
                .map_err(|e| e.to_string());
            SweepCell {
                factor: factors[fi],
                workload: workloads[wi].name.clone(),
                speedup: perf.as_ref().ok().map(|p| p / baseline[wi]),
                perf,
            }
        })
        .collect();
    let weights = mix_for(workloads);
    let means = factors
        .iter()
        .enumerate()
        .map(|(fi, &f)| {
            let row = &cells[fi * workloads.len()..(fi + 1) * workloads.len()];
            means_of(f, &row.iter().map(|c| c.speedup).collect::<Vec<_>>(), &weights)
        })
        .collect();
    Ok(SweepResult {
        knob,
        factors: factors.to_vec(),
        workloads: workloads.iter().map(|w| w.name.clone()).collect(),
        baseline,
        cells,
        means,
    })
}

pub const SWEEP_CSV_HEADER: [&str; 6] = ["knob", "factor", "workload", "perf", "speedup", "status"];

/// Writes cells, then GM and WM rows per factor.
pub fn write_sweep_csv<W: Write>(out: W, results: &[SweepResult]) -> Result<(), DseError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in results {
        for c in &r.cells {
            let (perf, status) = match &c.perf {
                Ok(p) => (format!("{p:.6e}"), "ok".to_string()),
                Err(e) => (String::new(), e.clone()),
            };
            w.write_record([r.knob.name(), &c.factor.to_string(), &c.workload, &perf, &opt(c.speedup), &status])?;
        }
        for m in &r.means {
            let f = m.factor.to_string();
            w.write_record([r.knob.name(), &f, "GM", "", &opt(m.geometric), "mean"])?;
            w.write_record([r.knob.name(), &f, "WM", "", &opt(m.weighted), "mean"])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Steps and weight-load time to cover an `n` by `m` weight matrix with
/// square tiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilingCost {
    pub steps: u64,
    pub seconds: f64,
}

pub fn tiling_cost(n: u64, m: u64, tile_dim: u64, weight_bw: f64) -> TilingCost {
    let steps = n.div_ceil(tile_dim) * m.div_ceil(tile_dim);
    TilingCost {
        steps,
        seconds: (steps * tile_dim * tile_dim) as f64 / weight_bw,
    }
}

/// Interaction fraction (relative to accelerator time) as a share of total
/// time.
pub fn time_share(fraction: f64) -> f64 {
    fraction / (1.0 + fraction)
}

/// Amdahl adjustment: a share `h` of the time does not speed up.
pub fn host_adjusted(gains: &[f64], shares: &[f64]) -> Result<Vec<f64>, DseError> {
    if gains.len() != shares.len() {
        return Err(DseError::Length {
            gains: gains.len(),
            fractions: shares.len(),
        });
    }
    gains
        .iter()
        .zip(shares)
        .map(|(&g, &h)| {
            if !(0.0..1.0).contains(&h) {
                return Err(DseError::HostFraction(h));
            }
            if h == 0.0 {
                return Ok(g);
            }
            Ok(1.0 / (h + (1.0 - h) / g))
        })
        .collect()
}

/// One hypothetical chip compared against the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimeVariant {
    pub name: String,
    pub clock_hz: f64,
    pub weight_bw: f64,
    /// Multiply-accumulates per weight byte at the knee.
    pub ridge: f64,
    pub gains: Vec<f64>,
    pub geomean: f64,
    pub weighted_mean: f64,
    pub host_gains: Vec<f64>,
    pub host_geomean: f64,
    pub host_weighted_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimeReport {
    pub workloads: Vec<String>,
    pub baseline_ridge: f64,
    pub variants: Vec<PrimeVariant>,
}

pub const PRIME_CLOCK_HZ: f64 = 1050e6;
pub const PRIME_BW_FACTOR: f64 = 5.0;

fn ridge_of(cfg: &TpuConfig) -> f64 {
    cfg.peak_macs_per_s() / cfg.weight_bw
}

/// Evaluates a faster clock, faster weight memory and both, on `workloads`
/// (presets give the host fractions; others count as zero).
pub fn tpu_prime(cfg: &TpuConfig, workloads: &[WorkloadSpec]) -> Result<PrimeReport, DseError> {
    let weights = mix_for(workloads);
    let shares: Vec<f64> = workloads
        .iter()
        .map(|w| host_interaction(&w.name).map_or(0.0, time_share))
        .collect();
    let base = workloads
        .iter()
        .map(|w| estimate(w, cfg).map(|e| e.ops_per_s))
        .collect::<Result<Vec<_>, _>>()?;
    let specs = [
        ("clock", PRIME_CLOCK_HZ, cfg.weight_bw),
        ("memory", cfg.clock_hz, cfg.weight_bw * PRIME_BW_FACTOR),
        ("clock+memory", PRIME_CLOCK_HZ, cfg.weight_bw * PRIME_BW_FACTOR),
    ];
    let variants = specs
        .iter()
        .map(|&(name, clock_hz, weight_bw)| {
            let c = TpuConfig {
                clock_hz,
                weight_bw,
                ..cfg.clone()
            };
            let gains = workloads
                .iter()
                .zip(&base)
                .map(|(w, b)| estimate(w, &c).map(|e| e.ops_per_s / b))
                .collect::<Result<Vec<_>, _>>()?;
            let host_gains = host_adjusted(&gains, &shares)?;
            Ok(PrimeVariant {
                name: name.into(),
                clock_hz,
                weight_bw,
                ridge: ridge_of(&c),
                geomean: geometric_mean(&gains)?,
                weighted_mean: weighted_mean(&gains, &weights)?,
                host_geomean: geometric_mean(&host_gains)?,
                host_weighted_mean: weighted_mean(&host_gains, &weights)?,
                gains,
                host_gains,
            })
        })
        .collect::<Result<Vec<_>, DseError>>()?;
    Ok(PrimeReport {
        workloads: workloads.iter().map(|w| w.name.clone()).collect(),
        baseline_ridge: ridge_of(cfg),
        variants,
    })
}
