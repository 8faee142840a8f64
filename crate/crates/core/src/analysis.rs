//! Analytical models: roofline bounds, a closed-form cycle estimator,
//! latency-bounded batch selection, performance per Watt and power at
//! partial load.
//!
//! Operations are multiply-accumulates throughout unless a device says
//! otherwise through its [`OpsConvention`](crate::archconfig::OpsConvention).

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archconfig::{ridge_point, RooflineDevice, TpuConfig};
use crate::lowering::{chunking, lower, useful_mac_fraction, LowerError, Lowered};
use crate::workloads::{LayerKind, WorkloadSpec};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error("no candidate batch meets the {limit_s} s latency limit")]
    NoFeasibleBatch { limit_s: f64 },
    #[error("no candidate batches given")]
    NoCandidates,
    #[error("invalid latency model: {0}")]
    InvalidModel(String),
    #[error("power must be positive, got {watts} W")]
    NonPositivePower { watts: f64 },
    #[error("utilization {0} outside [0, 1]")]
    Utilization(f64),
    #[error("mean of {0} values needs matching positive weights")]
    Mean(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------- roofline

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Memory,
    Compute,
}

/// Attainable throughput at `intensity` operations per weight byte.
pub fn attainable(dev: &RooflineDevice, intensity: f64) -> f64 {
    (intensity.max(0.0) * dev.mem_bw).min(dev.peak_ops)
}

pub fn bound_kind(dev: &RooflineDevice, intensity: f64) -> BoundKind {
    if intensity < ridge_point(dev) {
        BoundKind::Memory
    } else {
        BoundKind::Compute
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub device: String,
    pub workload: String,
    pub intensity: f64,
    pub attainable: f64,
    pub measured: Option<f64>,
    pub bound: BoundKind,
}

impl RooflinePoint {
    pub fn new(dev: &RooflineDevice, workload: &str, intensity: f64, measured: Option<f64>) -> Self {
        RooflinePoint {
            device: dev.name.clone(),
            workload: workload.into(),
            intensity,
            attainable: attainable(dev, intensity),
            measured,
            bound: bound_kind(dev, intensity),
        }
    }

    /// Whether the measured value respects the roof, with 1% slack.
    pub fn under_roof(&self) -> bool {
        self.measured.is_none_or(|m| m <= self.attainable * 1.01)
    }
}

pub const ROOFLINE_CSV_HEADER: [&str; 8] = [
    "device",
    "workload",
    "intensity",
    "attainable_ops",
    "measured_ops",
    "bound",
    "ridge",
    "quoted_ridge",
];

/// One row per point; `devices` supplies the ridge columns.
pub fn write_roofline_csv<W: Write>(out: W, points: &[RooflinePoint], devices: &[RooflineDevice]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROOFLINE_CSV_HEADER)?;
    for p in points {
        let dev = devices.iter().find(|d| d.name == p.device);
        let bound = match p.bound {
            BoundKind::Memory => "memory",
            BoundKind::Compute => "compute",
        };
        w.write_record([
            p.device.clone(),
            p.workload.clone(),
            format!("{}", p.intensity),
            format!("{}", p.attainable),
            p.measured.map(|m| format!("{m}")).unwrap_or_default(),
            bound.to_string(),
            dev.map(|d| format!("{:.1}", (ridge_point(d) * 10.0).floor() / 10.0)).unwrap_or_default(),
            dev.and_then(|d| d.quoted_ridge).map(|q| format!("{q}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// --------------------------------------------------------------- estimator

/// Closed-form performance estimate for one workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub workload: String,
    pub cycles: f64,
    pub seconds: f64,
    pub macs: f64,
    /// Multiply-accumulates per second.
    pub ops_per_s: f64,
    pub useful_mac_fraction: f64,
    /// Cycles the matrix unit spends computing.
    pub compute_cycles: f64,
    /// Cycles spent on weight tiles the array could not hide.
    pub weight_cycles: f64,
}

/// Weight stream state carried from one pass to the next. Tiles are
/// numbered globally in consumption order.
#[derive(Default)]
struct Stream {
    /// Start and compute length of the last tile.
    last: Option<(f64, f64)>,
    /// Fetch completion of the last tile.
    fetched: f64,
    /// Starts of the most recent tiles, oldest first.
    recent: VecDeque<f64>,
    /// Tiles consumed so far.
    count: usize,
    /// Fetch requests held back until `time`, from tile `index` on.
    reqs: Vec<(usize, f64)>,
}

/// One pass of `n` tiles that each compute for `compute` cycles.
struct Pass {
    n: usize,
    fetch: f64,
    shift: f64,
    compute: f64,
    depth: usize,
}

impl Pass {
    /// Start-to-start spacing when the array is the bottleneck.
    fn step(&self) -> f64 {
        if self.depth == 0 {
            self.compute + self.shift
        } else {
            self.compute.max(self.shift)
        }
    }

    /// Times the pass. Every bound on a tile start is a line in the tile
    /// index: the array line behind each constraint `(tile, time)`, the
    /// weight stream's fetch lines, and the lines on which fetches restart
    /// once a stalled tile frees its FIFO slot. Returns the pass end.
    fn run(&self, st: &mut Stream, cons: &[(usize, f64)]) -> f64 {
        let (f, s, q, depth) = (self.fetch, self.shift, self.step(), self.depth);
        let g0 = st.count;
        if depth == 0 {
            // no prefetch: each fetch waits for the previous tile to shift
            let mut t0 = st.recent.back().map_or(f, |&t| t - s + f) + s;
            if let Some((t, c)) = st.last {
                t0 = t0.max(t + c + s);
            }
            let slope = q.max(f);
            let mut t_last = t0 + (self.n - 1) as f64 * slope;
            for &(k, t) in cons.iter().filter(|c| c.0 < self.n) {
                t_last = t_last.max(t + (self.n - 1 - k) as f64 * slope);
            }
            st.recent = VecDeque::from([t_last]);
            st.last = Some((t_last, self.compute));
            st.count += self.n;
            st.reqs.clear();
            return t_last + self.compute;
        }

        // fetch lines: f_j >= t + (j - i + 1) f for j >= i (i may be negative)
        let mut lines: Vec<(f64, f64)> = vec![(0.0, st.fetched)];
        lines.extend(st.reqs.iter().map(|&(k, t)| (k as f64 - g0 as f64, t)));
        let oldest = st.count - st.recent.len();
        for i in 0..=depth.min(self.n - 1) {
            // a fetch waits for the tile depth+1 ahead of it to start
            if let Some(idx) = (g0 + i).checked_sub(depth + 1) {
                if idx >= oldest {
                    lines.push((i as f64, st.recent[idx - oldest]));
                }
            }
        }
        let natural = st.last.map(|(t, c)| t + c.max(s));
        let mut all: Vec<(f64, f64)> = natural.map(|t| (0.0, t)).into_iter().collect();
        all.extend(cons.iter().filter(|c| c.0 < self.n).map(|&(k, t)| (k as f64, t)));
        let fetched = |i: f64| {
            let mut l = f64::NEG_INFINITY;
            for &(k, t) in &lines {
                if i >= k {
                    l = l.max(t + (i - k + 1.0) * f);
                }
            }
            for &(k, t) in &all {
                if i >= k + depth as f64 + 1.0 {
                    l = l.max(t + (i - k - depth as f64) * f);
                }
            }
            l
        };
        let start = |i: f64| {
            let mut v = fetched(i) + s;
            for &(k, t) in &all {
                if i >= k {
                    v = v.max(t + (i - k) * q);
                }
            }
            v
        };
        let last = (self.n - 1) as f64;
        let t_last = start(last);
        for i in self.n.saturating_sub(depth + 1)..self.n {
            st.recent.push_back(start(i as f64));
        }
        while st.recent.len() > depth + 1 {
            st.recent.pop_front();
        }
        st.fetched = fetched(last);
        st.last = Some((t_last, self.compute));
        st.count += self.n;
        let count = st.count;
        st.reqs.retain(|r| r.0 >= count);
        t_last + self.compute
    }
}

/// Estimates run time of an already lowered workload.
pub fn estimate_lowered(ws: &WorkloadSpec, lowered: &Lowered, cfg: &TpuConfig) -> Estimate {
    let shapes = ws.shapes().expect("lowered workloads have valid shapes");
    let d = cfg.dim() as u64;
    let dim = f64::from(cfg.matrix_dim);
    let batch = u64::from(ws.batch);
    let blocks = |c: u32| u64::from(c).div_ceil(d) as usize;
    let dma = |rows: u64| cfg.pcie_cycles(rows * d) as f64;
    let last = ws.layers.len() - 1;

    // time each block of the current tensor becomes readable
    let in_rows = batch * shapes[0].pixels();
    let mut ready: Vec<f64> = (1..=blocks(shapes[0].c)).map(|b| b as f64 * dma(in_rows)).collect();
    let mut dma_free = ready.last().copied().unwrap_or(0.0);
    let mut act_free = 0.0f64;
    let depth_tiles = cfg.fifo_depth_tiles as usize;
    let mut stream = Stream::default();
    let mut matrix_end = 0.0f64;
    let (mut compute_cycles, mut weight_cycles) = (0.0, 0.0);
    let mut plans = lowered.plan.layers.iter();
    // Issue is in order through four stations, so an Activate or a queued
    // host transfer holds back the instructions a few slots behind it.
    // `floor0` bounds the next pass's first tile, `floor1` its second one
    // (or, for one-tile passes, the first tile of the pass after).
    let mut floor0 = 0.0f64;
    let mut floor1 = 0.0f64;
    let mut deferred = 0.0f64;
    // start of the last vector Activate, while no matrix layer has followed it
    let mut vec_start: Option<f64> = None;
    // the last input transfer holds back weight requests behind it
    if ready.len() >= 2 {
        stream.reqs.push((depth_tiles, dma_free - dma(in_rows)));
    }

    for (li, layer) in ws.layers.iter().enumerate() {
        let (inp, out) = (shapes[li], shapes[li + 1]);
        let mut next_ready = vec![0.0; blocks(out.c)];
        match layer.kind {
            LayerKind::Fc { .. } | LayerKind::Conv { .. } => {
                let plan = plans.next().expect("one plan per matrix layer");
                let wide = layer.weight_bits == 16;
                let slow = if wide { 2.0 } else { 1.0 };
                let out_px = out.pixels();
                let max_ex = u64::from(cfg.acc_entries) / out_px;
                let chunks = chunking(batch, max_ex.min(u64::from(u16::MAX)));
                let fetch = cfg.weight_fetch_cycles(cfg.tile_bytes() * if wide { 2 } else { 1 }) as f64
                    + cfg.dram_latency_cycles as f64;
                // a new layer's first tile sits behind the last Activate
                floor0 = floor0.max(act_free);

                for (ci, &(_, n_ex)) in chunks.iter().enumerate() {
                    let rows = n_ex * out_px;
                    let pass = Pass {
                        n: (plan.k_tiles * plan.taps) as usize,
                        fetch,
                        shift: dim,
                        compute: rows as f64 * slow,
                        depth: depth_tiles,
                    };
                    let double = 2 * rows <= u64::from(cfg.acc_entries);
                    #[allow(clippy::needless_range_loop)]
                    for n in 0..plan.n_tiles as usize {
                        let mut cons = vec![(0, floor0)];
                        if ci == 0 && n == 0 {
                            // block k of the input is first read k*taps tiles in
                            for (k, r) in ready.iter().enumerate().take(plan.k_tiles as usize) {
                                cons.push((k * plan.taps as usize, *r));
                            }
                        }
                        if !double {
                            // single accumulator region: wait for the previous drain
                            cons.push((0, act_free));
                        }
                        if pass.n >= 2 {
                            cons.push((1, floor1));
                        } else {
                            cons.push((0, deferred));
                            deferred = floor1;
                        }
                        let before = stream.last.map(|(t, c)| t + c).unwrap_or(0.0);
                        if stream.last.is_some() {
                            // requests issued after the previous Activate wait
                            // for the tile before it to finish
                            let lag = if ci == 0 && n == 0 || li == last { 0 } else { 1 };
                            stream.reqs.push((stream.count + depth_tiles + lag, before));
                            if ci == 0 && n == 0 {
                                // the layer's first request issues behind its SetConfigs
                                let gate = match layer.kind {
                                    LayerKind::Conv { .. } => act_free,
                                    _ => vec_start.unwrap_or(before),
                                };
                                stream.reqs.push(((stream.count + depth_tiles).saturating_sub(1), gate));
                            }
                        }
                        let end = pass.run(&mut stream, &cons);
                        matrix_end = end;
                        compute_cycles += pass.n as f64 * pass.compute;
                        weight_cycles += (end - before - pass.n as f64 * pass.compute).max(0.0);

                        let act_done = (end + dim).max(act_free) + rows as f64;
                        act_free = act_done;
                        if ci == 0 {
                            next_ready[n] = act_done;
                        }
                        if li == last {
                            let dma_start = dma_free.max(act_done);
                            dma_free = dma_start + dma(rows);
                            (floor0, floor1) = (act_done, dma_start);
                        } else {
                            (floor0, floor1) = (0.0, act_done);
                        }
                    }
                }
                vec_start = None;
            }
            LayerKind::Vector { .. } | LayerKind::Pool { .. } => {
                let rows = batch * inp.pixels();
                for (b, r) in ready.iter().enumerate() {
                    vec_start = Some(act_free.max(*r));
                    let done = act_free.max(*r) + rows as f64;
                    act_free = done;
                    next_ready[b] = done;
                    if li == last {
                        dma_free = dma_free.max(done) + dma(batch * out.pixels());
                    }
                }
            }
        }
        ready = next_ready;
    }

    let cycles = matrix_end.max(act_free).max(dma_free) + 1.0;
    let macs = lowered.plan.true_macs() as f64;
    let seconds = cycles / cfg.clock_hz;
    Estimate {
        workload: ws.name.clone(),
        cycles,
        seconds,
        macs,
        ops_per_s: macs / seconds,
        useful_mac_fraction: useful_mac_fraction(&lowered.plan),
        compute_cycles,
        weight_cycles,
    }
}

/// Lowers `ws` and estimates it.
pub fn estimate(ws: &WorkloadSpec, cfg: &TpuConfig) -> Result<Estimate, AnalysisError> {
    let lowered = lower(ws, cfg)?;
    Ok(estimate_lowered(ws, &lowered, cfg))
}

/// Estimated multiply-accumulates per second.
pub fn estimate_perf(ws: &WorkloadSpec, cfg: &TpuConfig) -> Result<f64, AnalysisError> {
    Ok(estimate(ws, cfg)?.ops_per_s)
}

// ----------------------------------------------------------------- latency

/// Batch latency and throughput model.
///
/// Throughput is `B / (a B + c)`. Tail latency is
/// `(d (a B + c) + g B^2) / (1 - h)`; `g` captures queueing that grows with
/// batch and is zero unless fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub a: f64,
    pub c: f64,
    pub h: f64,
    pub d: f64,
    #[serde(default)]
    pub g: f64,
}

/// One measured operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub batch: u32,
    pub latency_s: f64,
    pub ips: f64,
}

/// Measured accelerator rows for MLP0 at the 7 ms limit and unconstrained.
pub const TPU_MLP0_POINTS: [LatencyPoint; 2] = [
    LatencyPoint { batch: 200, latency_s: 7.0e-3, ips: 225_000.0 },
    LatencyPoint { batch: 250, latency_s: 10.0e-3, ips: 280_000.0 },
];

/// Host interaction share for MLP0.
pub const MLP0_HOST_SHARE: f64 = 0.21;

impl LatencyModel {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: &str| Err(AnalysisError::InvalidModel(m.into()));
        if !(self.a >= 0.0 && self.c >= 0.0 && self.g >= 0.0) {
            return bad("a, c and g must be non-negative");
        }
        if !(0.0..1.0).contains(&self.h) {
            return bad("h must lie in [0, 1)");
        }
        if self.d.is_nan() || self.d < 1.0 || !self.d.is_finite() {
            return bad("d must be at least 1");
        }
        if self.a == 0.0 && self.c == 0.0 {
            return bad("a and c cannot both be zero");
        }
        Ok(())
    }

    pub fn batch_time(&self, batch: u32) -> f64 {
        self.a * f64::from(batch) + self.c
    }

    pub fn throughput(&self, batch: u32) -> f64 {
        f64::from(batch) / self.batch_time(batch)
    }

    pub fn latency(&self, batch: u32) -> f64 {
        let b = f64::from(batch);
        (self.d * self.batch_time(batch) + self.g * b * b) / (1.0 - self.h)
    }

    /// Fits `a` and `c` to the two throughputs, then `d` and `g` to the two
    /// latencies, for a given host share `h`.
    pub fn fit(p: [LatencyPoint; 2], h: f64) -> Result<Self, AnalysisError> {
        let [p, q] = p;
        let (b1, b2) = (f64::from(p.batch), f64::from(q.batch));
        if b1 == b2 {
            return Err(AnalysisError::InvalidModel("points need distinct batches".into()));
        }
        let (t1, t2) = (b1 / p.ips, b2 / q.ips);
        let a = (t2 - t1) / (b2 - b1);
        let c = t1 - a * b1;
        let (l1, l2) = (p.latency_s * (1.0 - h), q.latency_s * (1.0 - h));
        // l = d t + g b^2
        let det = t1 * b2 * b2 - t2 * b1 * b1;
        let d = (l1 * b2 * b2 - l2 * b1 * b1) / det;
        let g = (t1 * l2 - t2 * l1) / det;
        let m = LatencyModel { a, c, h, d, g };
        m.validate()?;
        Ok(m)
    }

    pub fn tpu_mlp0() -> Self {
        Self::fit(TPU_MLP0_POINTS, MLP0_HOST_SHARE).expect("stored points fit")
    }
}

/// Picks the largest candidate batch whose modeled tail latency is within
/// `limit_s`, returning it with its throughput.
pub fn max_throughput_under_latency(model: &LatencyModel, candidates: &[u32], limit_s: f64) -> Result<(u32, f64), AnalysisError> {
    if candidates.is_empty() {
        return Err(AnalysisError::NoCandidates);
    }
    candidates
        .iter()
        .copied()
        // relative slack absorbs rounding in fitted models
        .filter(|&b| model.latency(b) <= limit_s * (1.0 + 1e-12))
        .max()
        .map(|b| (b, model.throughput(b)))
        .ok_or(AnalysisError::NoFeasibleBatch { limit_s })
}

// ------------------------------------------------------------------- power

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerMode {
    Total,
    Incremental,
}

/// Busy power charged to one die, and the part of it drawn by the host.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBasis {
    pub total_watts: f64,
    pub host_watts: f64,
}

impl PowerBasis {
    /// Per-die power of `dev` hosted by `host`. The host server is shared by
    /// the accelerator dies in it; the host itself carries no extra share.
    pub fn per_die(dev: &RooflineDevice, host: &RooflineDevice) -> Self {
        if dev.name == host.name {
            return PowerBasis {
                total_watts: host.server_busy_watts / f64::from(host.dies_per_server),
                host_watts: 0.0,
            };
        }
        let host_watts = host.server_busy_watts / f64::from(dev.dies_per_server);
        PowerBasis {
            total_watts: dev.die_busy_watts + host_watts,
            host_watts,
        }
    }

    pub fn watts(&self, mode: PowerMode) -> Result<f64, AnalysisError> {
        let w = match mode {
            PowerMode::Total => self.total_watts,
            PowerMode::Incremental => self.total_watts - self.host_watts,
        };
        if w > 0.0 && w.is_finite() {
            Ok(w)
        } else {
            Err(AnalysisError::NonPositivePower { watts: w })
        }
    }
}

/// Published per-die performance relative to the CPU die, in preset order,
/// host overhead included.
pub const RELATIVE_PERF: [(&str, [f64; 6]); 3] = [
    ("haswell", [1.0; 6]),
    ("k80", [2.5, 0.3, 0.4, 1.2, 1.6, 2.7]),
    ("tpu", [41.0, 18.5, 3.5, 1.2, 40.3, 71.0]),
];

pub fn relative_perf(device: &str) -> Option<[f64; 6]> {
    RELATIVE_PERF
        .iter()
        .find(|(d, _)| d.eq_ignore_ascii_case(device))
        .map(|(_, p)| *p)
}

/// Performance per Watt of `perf` on `dev` relative to `base_perf` on `base`.
pub fn perf_per_watt(perf: f64, dev: &PowerBasis, base_perf: f64, base: &PowerBasis, mode: PowerMode) -> Result<f64, AnalysisError> {
    Ok((perf / dev.watts(mode)?) / (base_perf / base.watts(mode)?))
}

/// Total and incremental ratios together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRatio {
    pub total: f64,
    pub incremental: f64,
}

pub fn perf_per_watt_pair(perf: f64, dev: &PowerBasis, base_perf: f64, base: &PowerBasis) -> Result<PowerRatio, AnalysisError> {
    Ok(PowerRatio {
        total: perf_per_watt(perf, dev, base_perf, base, PowerMode::Total)?,
        incremental: perf_per_watt(perf, dev, base_perf, base, PowerMode::Incremental)?,
    })
}

/// Perf/W of one device across workloads, with means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub device: String,
    pub baseline: String,
    pub workloads: Vec<String>,
    pub ratios: Vec<PowerRatio>,
    pub geomean: PowerRatio,
    pub weighted_mean: PowerRatio,
}

/// Builds a report from per-workload performance relative to the baseline
/// die (`relative_perf`), weighting the mean with `weights`.
pub fn power_report(
    dev: &RooflineDevice,
    base: &RooflineDevice,
    host: &RooflineDevice,
    workloads: &[&str],
    relative_perf: &[f64],
    weights: &[f64],
) -> Result<PowerReport, AnalysisError> {
    let (pd, pb) = (PowerBasis::per_die(dev, host), PowerBasis::per_die(base, host));
    let ratios = relative_perf
        .iter()
        .map(|&r| perf_per_watt_pair(r, &pd, 1.0, &pb))
        .collect::<Result<Vec<_>, _>>()?;
    let tot: Vec<f64> = ratios.iter().map(|r| r.total).collect();
    let inc: Vec<f64> = ratios.iter().map(|r| r.incremental).collect();
    Ok(PowerReport {
        device: dev.name.clone(),
        baseline: base.name.clone(),
        workloads: workloads.iter().map(|w| w.to_string()).collect(),
        geomean: PowerRatio {
            total: geometric_mean(&tot)?,
            incremental: geometric_mean(&inc)?,
        },
        weighted_mean: PowerRatio {
            total: weighted_mean(&tot, weights)?,
            incremental: weighted_mean(&inc, weights)?,
        },
        ratios,
    })
}

pub const POWER_CSV_HEADER: [&str; 5] = ["device", "baseline", "workload", "total_perf_per_watt", "incremental_perf_per_watt"];

pub fn write_power_csv<W: Write>(out: W, reports: &[PowerReport]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(POWER_CSV_HEADER)?;
    for r in reports {
        let rows = r
            .workloads
            .iter()
            .map(String::as_str)
            .zip(r.ratios.iter())
            .chain([("GM", &r.geomean), ("WM", &r.weighted_mean)]);
        for (name, ratio) in rows {
            w.write_record([
                r.device.as_str(),
                r.baseline.as_str(),
                name,
                &format!("{:.4}", ratio.total),
                &format!("{:.4}", ratio.incremental),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Server power per die at `utilization`, interpolated on the device's
/// load curve and scaled to its busy power.
pub fn power_at_load(dev: &RooflineDevice, utilization: f64) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&utilization) {
        return Err(AnalysisError::Utilization(utilization));
    }
    let curve = &dev.proportionality_curve;
    let x = utilization * 10.0;
    let i = (x.floor() as usize).min(9);
    let t = x - i as f64;
    let frac = if t == 0.0 {
        curve[i]
    } else {
        curve[i] + (curve[i + 1] - curve[i]) * t
    };
    Ok(frac * dev.die_busy_watts)
}

// ------------------------------------------------------------------- means

pub fn geometric_mean(values: &[f64]) -> Result<f64, AnalysisError> {
    if values.is_empty() || values.iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(AnalysisError::Mean(values.len()));
    }
    Ok((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

/// Weighted arithmetic mean; weights need not sum to one.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64, AnalysisError> {
    let total: f64 = weights.iter().sum();
    if values.is_empty() || values.len() != weights.len() || weights.iter().any(|w| *w < 0.0) || total.is_nan() || total <= 0.0 {
        return Err(AnalysisError::Mean(values.len()));
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}
