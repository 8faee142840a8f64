//! Hardware descriptions: the parametric accelerator configuration and the
//! generic roofline devices (host CPU, GPU, accelerator die) used for the
//! analytical models.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Whether a multiply-accumulate counts as one operation or two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpsConvention {
    #[default]
    Macs,
    #[serde(rename = "OPS2X")]
    Ops2x,
}

impl OpsConvention {
    /// Operations per multiply-accumulate.
    pub fn ops_per_mac(self) -> f64 {
        match self {
            OpsConvention::Macs => 1.0,
            OpsConvention::Ops2x => 2.0,
        }
    }

    /// Converts a quantity expressed in `self` into `target`.
    pub fn convert(self, value: f64, target: OpsConvention) -> f64 {
        value / self.ops_per_mac() * target.ops_per_mac()
    }
}

impl fmt::Display for OpsConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpsConvention::Macs => f.write_str("MACS"),
            OpsConvention::Ops2x => f.write_str("OPS2X"),
        }
    }
}

const GIB: u64 = 1 << 30;
const MIB: u64 = 1 << 20;

/// Parametric description of the accelerator die.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpuConfig {
    /// Lanes per side of the square MAC array.
    pub matrix_dim: u32,
    pub clock_hz: f64,
    /// Weight Memory bandwidth in bytes/second.
    pub weight_bw: f64,
    pub weight_mem_bytes: u64,
    /// Unified Buffer capacity in bytes.
    pub ub_bytes: u64,
    /// Accumulator rows, each `matrix_dim` wide.
    pub acc_entries: u32,
    pub acc_width_bits: u32,
    /// Depth of the on-chip weight FIFO, in tiles. Zero disables both the
    /// FIFO staging and the shadow-tile double buffering.
    pub fifo_depth_tiles: u32,
    /// Effective host link bandwidth in bytes/second.
    pub pcie_bw: f64,
    /// Fixed startup latency added to every weight tile fetch.
    pub dram_latency_cycles: u64,
    pub idle_watts: f64,
    pub busy_watts: f64,
}

impl Default for TpuConfig {
    fn default() -> Self {
        TpuConfig {
            matrix_dim: 256,
            clock_hz: 700e6,
            weight_bw: 34e9,
            weight_mem_bytes: 8 * GIB,
            ub_bytes: 24 * MIB,
            acc_entries: 4096,
            acc_width_bits: 32,
            fifo_depth_tiles: 4,
            pcie_bw: 10e9,
            dram_latency_cycles: 0,
            idle_watts: 28.0,
            busy_watts: 40.0,
        }
    }
}

impl TpuConfig {
    /// A tiny configuration convenient for exhaustive functional tests.
    pub fn small(matrix_dim: u32) -> Self {
        let dim = u64::from(matrix_dim);
        TpuConfig {
            matrix_dim,
            weight_mem_bytes: dim * dim * 2 * 4096,
            ub_bytes: dim * 8192,
            acc_entries: (matrix_dim * 2).max(512),
            ..TpuConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.matrix_dim == 0 {
            return Err(invalid("matrix_dim", "must be positive"));
        }
        if self.matrix_dim > u32::from(u16::MAX) {
            return Err(invalid("matrix_dim", "must fit in 16 bits"));
        }
        for (field, v) in [
            ("clock_hz", self.clock_hz),
            ("weight_bw", self.weight_bw),
            ("pcie_bw", self.pcie_bw),
            ("busy_watts", self.busy_watts),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(field, format!("must be finite and positive, got {v}")));
            }
        }
        if !(self.idle_watts.is_finite() && self.idle_watts >= 0.0) {
            return Err(invalid("idle_watts", "must be finite and non-negative"));
        }
        if self.idle_watts > self.busy_watts {
            return Err(invalid("idle_watts", "exceeds busy_watts"));
        }
        if self.weight_mem_bytes < self.tile_bytes() {
            return Err(invalid("weight_mem_bytes", "smaller than one weight tile"));
        }
        if self.ub_bytes < u64::from(self.matrix_dim) {
            return Err(invalid("ub_bytes", "smaller than one buffer row"));
        }
        if self.acc_width_bits != 32 {
            return Err(invalid("acc_width_bits", "only 32-bit accumulators are modeled"));
        }
        if u64::from(self.acc_entries) < 2 * u64::from(self.matrix_dim) {
            return Err(invalid(
                "acc_entries",
                format!(
                    "{} rows cannot double-buffer a {}-row tile pass",
                    self.acc_entries, self.matrix_dim
                ),
            ));
        }
        if self.acc_entries > u32::from(u16::MAX) + 1 {
            return Err(invalid("acc_entries", "exceeds the 16-bit accumulator address space"));
        }
        if self.ub_rows() > 1 << 24 {
            return Err(invalid("ub_bytes", "exceeds the 24-bit buffer address space"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.matrix_dim as usize
    }

    /// Bytes in one 8-bit weight tile.
    pub fn tile_bytes(&self) -> u64 {
        u64::from(self.matrix_dim) * u64::from(self.matrix_dim)
    }

    /// Unified Buffer row size in bytes (one 8-bit vector of `matrix_dim`).
    pub fn ub_row_bytes(&self) -> u64 {
        u64::from(self.matrix_dim)
    }

    pub fn ub_rows(&self) -> u64 {
        self.ub_bytes / self.ub_row_bytes()
    }

    pub fn macs_per_cycle(&self) -> f64 {
        f64::from(self.matrix_dim) * f64::from(self.matrix_dim)
    }

    pub fn peak_macs_per_s(&self) -> f64 {
        self.macs_per_cycle() * self.clock_hz
    }

    /// Cycles to stream `bytes` out of Weight Memory (excluding startup latency).
    pub fn weight_fetch_cycles(&self, bytes: u64) -> u64 {
        (bytes as f64 * self.clock_hz / self.weight_bw).ceil() as u64
    }

    pub fn pcie_cycles(&self, bytes: u64) -> u64 {
        (bytes as f64 * self.clock_hz / self.pcie_bw).ceil() as u64
    }

    /// The die as a roofline device (MACS convention).
    pub fn roofline_device(&self) -> RooflineDevice {
        let mut dev = RooflineDevice::tpu();
        dev.peak_ops = self.peak_macs_per_s();
        dev.mem_bw = self.weight_bw;
        dev.die_idle_watts = self.idle_watts;
        dev.die_busy_watts = self.busy_watts;
        dev.quoted_ridge = None;
        dev
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: TpuConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A processor seen through the roofline lens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RooflineDevice {
    pub name: String,
    /// Peak throughput expressed in `ops_convention`.
    pub peak_ops: f64,
    #[serde(default)]
    pub ops_convention: OpsConvention,
    /// Bytes/second from the memory holding the weights.
    pub mem_bw: f64,
    pub dies_per_server: u32,
    pub server_idle_watts: f64,
    pub server_busy_watts: f64,
    pub die_idle_watts: f64,
    pub die_busy_watts: f64,
    /// Fraction of busy power drawn at 0%, 10%, ..., 100% offered load.
    pub proportionality_curve: [f64; 11],
    /// Ridge point as quoted in published roofline plots, kept as reference
    /// data next to the computed value.
    #[serde(default)]
    pub quoted_ridge: Option<f64>,
}

/// Which measured load sweep the proportionality curve is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadProfile {
    /// Compute-bound sweep (CNN0).
    ComputeBound,
    /// Memory-bound sweep (LSTM1).
    MemoryBound,
}

/// Builds an 11-point curve from the idle fraction at 0% and a measured point
/// at 10%, interpolating linearly up to 1.0 at full load.
fn curve_from_points(idle_frac: f64, at_10pct: f64) -> [f64; 11] {
    let mut c = [0.0; 11];
    c[0] = idle_frac.min(at_10pct);
    c[1] = at_10pct;
    for (i, v) in c.iter_mut().enumerate().skip(2) {
        *v = at_10pct + (1.0 - at_10pct) * (i as f64 - 1.0) / 9.0;
    }
    c[10] = 1.0;
    c
}

impl RooflineDevice {
    pub fn haswell() -> Self {
        Self::haswell_with(LoadProfile::ComputeBound)
    }

    pub fn haswell_with(profile: LoadProfile) -> Self {
        let at10 = match profile {
            LoadProfile::ComputeBound => 0.56,
            LoadProfile::MemoryBound => 0.47,
        };
        RooflineDevice {
            name: "haswell".into(),
            // 1.3 FP TOPS counted two ops per fused multiply-add.
            peak_ops: 1.3e12 / 2.0,
            ops_convention: OpsConvention::Macs,
            mem_bw: 51e9,
            dies_per_server: 2,
            server_idle_watts: 159.0,
            server_busy_watts: 455.0,
            die_idle_watts: 41.0,
            die_busy_watts: 145.0,
            proportionality_curve: curve_from_points(41.0 / 145.0, at10),
            quoted_ridge: Some(13.0),
        }
    }

    pub fn k80() -> Self {
        Self::k80_with(LoadProfile::ComputeBound)
    }

    pub fn k80_with(profile: LoadProfile) -> Self {
        let at10 = match profile {
            LoadProfile::ComputeBound => 0.66,
            LoadProfile::MemoryBound => 0.78,
        };
        RooflineDevice {
            name: "k80".into(),
            peak_ops: 2.8e12 / 2.0,
            ops_convention: OpsConvention::Macs,
            mem_bw: 160e9,
            dies_per_server: 8,
            server_idle_watts: 357.0,
            server_busy_watts: 991.0,
            die_idle_watts: 25.0,
            die_busy_watts: 98.0,
            proportionality_curve: curve_from_points(25.0 / 98.0, at10),
            quoted_ridge: Some(9.0),
        }
    }

    pub fn tpu() -> Self {
        Self::tpu_with(LoadProfile::ComputeBound)
    }

    pub fn tpu_with(profile: LoadProfile) -> Self {
        let at10 = match profile {
            LoadProfile::ComputeBound => 0.88,
            LoadProfile::MemoryBound => 0.94,
        };
        RooflineDevice {
            name: "tpu".into(),
            peak_ops: 65536.0 * 700e6,
            ops_convention: OpsConvention::Macs,
            mem_bw: 34e9,
            dies_per_server: 4,
            server_idle_watts: 290.0,
            server_busy_watts: 384.0,
            die_idle_watts: 28.0,
            die_busy_watts: 40.0,
            proportionality_curve: curve_from_points(28.0 / 40.0, at10),
            quoted_ridge: Some(1350.0),
        }
    }

    pub fn presets() -> Vec<RooflineDevice> {
        vec![Self::haswell(), Self::k80(), Self::tpu()]
    }

    pub fn preset(name: &str) -> Option<RooflineDevice> {
        match name.to_ascii_lowercase().as_str() {
            "haswell" | "cpu" => Some(Self::haswell()),
            "k80" | "gpu" => Some(Self::k80()),
            "tpu" => Some(Self::tpu()),
            _ => None,
        }
    }

    /// Same device with its peak re-expressed in another convention.
    pub fn in_convention(&self, conv: OpsConvention) -> RooflineDevice {
        let mut d = self.clone();
        d.peak_ops = self.ops_convention.convert(self.peak_ops, conv);
        if let Some(q) = d.quoted_ridge {
            d.quoted_ridge = Some(self.ops_convention.convert(q, conv));
        }
        d.ops_convention = conv;
        d
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.peak_ops.is_finite() && self.peak_ops > 0.0) {
            return Err(invalid("peak_ops", "must be finite and positive"));
        }
        if !(self.mem_bw.is_finite() && self.mem_bw > 0.0) {
            return Err(invalid("mem_bw", "must be finite and positive"));
        }
        if self.dies_per_server == 0 {
            return Err(invalid("dies_per_server", "must be positive"));
        }
        for (field, v) in [
            ("server_idle_watts", self.server_idle_watts),
            ("server_busy_watts", self.server_busy_watts),
            ("die_idle_watts", self.die_idle_watts),
            ("die_busy_watts", self.die_busy_watts),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be finite and non-negative"));
            }
        }
        let c = &self.proportionality_curve;
        if c.windows(2).any(|w| w[1] < w[0]) || c.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("proportionality_curve", "must be nondecreasing"));
        }
        if c[10] != 1.0 {
            return Err(invalid("proportionality_curve", "last entry must be 1.0"));
        }
        Ok(())
    }
}

/// Operations per byte at which `dev` stops being memory-bound, in the
/// device's own ops convention.
pub fn ridge_point(dev: &RooflineDevice) -> f64 {
    dev.peak_ops / dev.mem_bw
}

/// Contents of a configuration file: either one accelerator configuration or
/// a set of roofline devices (`{"devices": [...]}`).
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigFile {
    Tpu(TpuConfig),
    Devices(Vec<RooflineDevice>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceSet {
    devices: Vec<RooflineDevice>,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("devices").is_some() {
        let set: DeviceSet = serde_json::from_value(value)?;
        for d in &set.devices {
            d.validate()?;
        }
        Ok(ConfigFile::Devices(set.devices))
    } else {
        let cfg: TpuConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(ConfigFile::Tpu(cfg))
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigFile, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Loads a file that must hold a single accelerator configuration.
pub fn load_tpu_config(path: impl AsRef<Path>) -> Result<TpuConfig, ConfigError> {
    match load_config(path)? {
        ConfigFile::Tpu(cfg) => Ok(cfg),
        ConfigFile::Devices(_) => Err(invalid("devices", "expected a single accelerator config")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tpu_ridge_in_both_conventions() {
        let tpu = RooflineDevice::tpu();
        let r = ridge_point(&tpu);
        assert!((r - 1349.27).abs() < 0.01, "{r}");
        let r2 = ridge_point(&tpu.in_convention(OpsConvention::Ops2x));
        assert!((r2 - 2698.54).abs() < 0.01, "{r2}");
        assert_eq!(OpsConvention::Macs.convert(1.0, OpsConvention::Ops2x), 2.0);
    }

    #[test]
    fn unit_ridge() {
        let mut d = RooflineDevice::tpu();
        d.peak_ops = 5e9;
        d.mem_bw = 5e9;
        assert_eq!(ridge_point(&d), 1.0);
    }

    #[test]
    fn host_and_gpu_ridges_match_quoted_values_when_counting_macs() {
        let h = RooflineDevice::haswell();
        let k = RooflineDevice::k80();
        assert!((ridge_point(&h) - 12.75).abs() < 0.01);
        assert!((ridge_point(&k) - 8.75).abs() < 0.01);
        assert_eq!(h.quoted_ridge, Some(13.0));
        assert_eq!(k.quoted_ridge, Some(9.0));
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = TpuConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tile_bytes(), 64 * 1024);
        assert_eq!(cfg.weight_fetch_cycles(cfg.tile_bytes()), 1350);
        for d in RooflineDevice::presets() {
            d.validate().unwrap();
        }
    }

    #[test]
    fn parse_empty_object_gives_defaults() {
        assert_eq!(parse_config("{}").unwrap(), ConfigFile::Tpu(TpuConfig::default()));
    }

    #[test]
    fn parse_matrix_dim_override() {
        match parse_config(r#"{"matrix_dim": 512}"#).unwrap() {
            ConfigFile::Tpu(cfg) => assert_eq!(cfg.tile_bytes(), 256 * 1024),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_bandwidth_names_field() {
        let err = parse_config(r#"{"weight_bw": 0}"#).unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "weight_bw"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(matches!(
            parse_config(r#"{"matrix_dimm": 4}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn too_few_accumulators_rejected() {
        let cfg = TpuConfig {
            acc_entries: 300,
            ..TpuConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn device_set_round_trip() {
        let text = serde_json::json!({ "devices": RooflineDevice::presets() }).to_string();
        match parse_config(&text).unwrap() {
            ConfigFile::Devices(d) => assert_eq!(d, RooflineDevice::presets()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn curves_hit_measured_points() {
        assert_eq!(RooflineDevice::tpu().proportionality_curve[1], 0.88);
        assert_eq!(RooflineDevice::haswell().proportionality_curve[1], 0.56);
        assert_eq!(RooflineDevice::k80().proportionality_curve[1], 0.66);
        assert_eq!(RooflineDevice::tpu_with(LoadProfile::MemoryBound).proportionality_curve[1], 0.94);
    }
}
