//! `tpusim`: batch front end over the simulator and its analyses.
//!
//! Exit status is 0 on success, 1 when a run or validation fails and 2 on
//! bad usage.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use tpu_sim::analysis::{
    estimate, max_throughput_under_latency, power_at_load, power_report, relative_perf, write_power_csv,
    write_roofline_csv, LatencyModel, RooflinePoint,
};
use tpu_sim::archconfig::{load_config, load_tpu_config, ConfigFile, OpsConvention, RooflineDevice, TpuConfig};
use tpu_sim::dse::{sweep, tpu_prime, write_sweep_csv, ScaleKnob};
use tpu_sim::isa::{config_hash, validate, Program};
use tpu_sim::lowering::{load, lower, lower_model};
use tpu_sim::timesim::{simulate_timed, simulate_with_state, write_counters_csv, write_timeline, PerfCounters};
use tpu_sim::workloads::{
    all_presets, make_preset, mix_weights, operational_intensity, random_input, random_quant_model, random_workload,
    reference_forward, WorkloadSpec, PRESET_NAMES,
};

#[derive(Parser)]
#[command(name = "tpusim", version, about = "Systolic-array inference accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower, execute and time workloads; writes a counter CSV.
    Simulate(SimulateArgs),
    /// Compile a workload to a program file.
    Lower(LowerArgs),
    /// Roofline points for one or more devices.
    Roofline(RooflineArgs),
    /// Scale one design knob and re-estimate the presets.
    Sweep(SweepArgs),
    /// Faster clock and weight memory variants of the baseline chip.
    TpuPrime(TpuPrimeArgs),
    /// Largest batch meeting a response-time limit.
    Latency(LatencyArgs),
    /// Performance per Watt against a baseline device, or power versus load.
    Power(PowerArgs),
    /// Compare the closed-form estimator with the timing simulator.
    ValidateModel(ValidateArgs),
    /// JSON program to binary program file.
    Encode(IoArgs),
    /// Binary program file to JSON.
    Decode(IoArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Accelerator configuration JSON (defaults to the built-in preset).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<TpuConfig> {
        match &self.config {
            Some(p) => load_tpu_config(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(TpuConfig::default()),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset names, `all`, or workload JSON files, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    workload: Vec<String>,
    #[command(flatten)]
    config: ConfigArg,
    /// Seed for synthetic weights and inputs (needed unless --timing-only).
    #[arg(long)]
    seed: Option<u64>,
    /// Skip functional execution and the oracle check.
    #[arg(long)]
    timing_only: bool,
    /// Counter CSV destination (stdout if omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Per-unit event log as JSON lines (single workload only).
    #[arg(long, value_name = "PATH")]
    timeline: Option<PathBuf>,
}

#[derive(Args)]
struct LowerArgs {
    /// Preset name or workload JSON file.
    #[arg(long)]
    workload: String,
    #[command(flatten)]
    config: ConfigArg,
    /// Binary program destination.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Plan summary as JSON.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Print a human-readable listing to stdout.
    #[arg(long)]
    listing: bool,
}

#[derive(Args)]
struct RooflineArgs {
    /// `all` or device names (haswell, k80, tpu), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    devices: Vec<String>,
    /// Device set JSON (`{"devices": [...]}`) or accelerator config.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Fill measured values for the accelerator from the timing simulator.
    #[arg(long)]
    measure: bool,
    /// Report operations as MACs or as two ops per MAC.
    #[arg(long, value_enum, default_value = "macs")]
    convention: Convention,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Macs,
    Ops2x,
}

impl From<Convention> for OpsConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Macs => OpsConvention::Macs,
            Convention::Ops2x => OpsConvention::Ops2x,
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// memory, clock, clock+, matrix, matrix+ or all.
    #[arg(long, value_delimiter = ',', default_value = "memory")]
    knob: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
    factors: Vec<f64>,
    /// Preset names, `all`, or workload JSON files, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    workload: Vec<String>,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TpuPrimeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatencyArgs {
    /// Latency model JSON (defaults to the fitted MLP0 model).
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// 99th-percentile response-time limit in milliseconds.
    #[arg(long, default_value_t = 7.0)]
    limit_ms: f64,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,100,128,150,200,250,256,300")]
    batches: Vec<u32>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PowerArgs {
    /// Devices to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "k80,tpu")]
    devices: Vec<String>,
    #[arg(long, default_value = "haswell")]
    baseline: String,
    /// Host server whose power is charged to accelerators.
    #[arg(long, default_value = "haswell")]
    host: String,
    /// Emit power per die at 0..100% load instead of perf/W.
    #[arg(long)]
    loads: bool,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Largest tolerated relative cycle disagreement.
    #[arg(long, default_value_t = 0.10)]
    tolerance: f64,
    /// Also check this many random workloads (needs --seed).
    #[arg(long, default_value_t = 0)]
    random: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IoArgs {
    /// Input file (stdin if omitted).
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output file (stdout if omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// A check ran and failed; maps to exit status 1 without an error trace.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Arguments parsed but make no sense together.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Lower(a) => lower_cmd(a),
        Command::Roofline(a) => roofline(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::TpuPrime(a) => prime(a),
        Command::Latency(a) => latency(a),
        Command::Power(a) => power(a),
        Command::ValidateModel(a) => validate_model(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
    }
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_input(input: &Option<PathBuf>) -> Result<Vec<u8>> {
    match input {
        Some(p) => fs::read(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut buf = Vec::new();
            io::stdin().read_to_end(&mut buf).context("reading stdin")?;
            Ok(buf)
        }
    }
}

/// Run metadata next to a data file, kept out of the data itself.
#[derive(Serialize)]
struct Meta<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: Option<u64>,
    seed: Option<u64>,
}

fn write_sidecar(out: &Option<PathBuf>, command: &str, cfg: Option<&TpuConfig>, seed: Option<u64>) -> Result<()> {
    let Some(p) = out else { return Ok(()) };
    let mut path = p.clone().into_os_string();
    path.push(".meta.json");
    let meta = Meta {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash: cfg.map(config_hash),
        seed,
    };
    let path = PathBuf::from(path);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_workload(name: &str) -> Result<WorkloadSpec> {
    let path = Path::new(name);
    if name.ends_with(".json") || path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return WorkloadSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()));
    }
    make_preset(name).map_err(|e| usage(e.to_string()))
}

fn load_workloads(names: &[String]) -> Result<Vec<WorkloadSpec>> {
    if names.iter().any(|n| n.eq_ignore_ascii_case("all")) {
        return Ok(all_presets());
    }
    names.iter().map(|n| load_workload(n)).collect()
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let workloads = load_workloads(&a.workload)?;
    if !a.timing_only && a.seed.is_none() {
        return Err(usage("--seed is required for functional simulation (or pass --timing-only)"));
    }
    if a.timeline.is_some() && workloads.len() != 1 {
        return Err(usage("--timeline needs exactly one workload"));
    }
    let mut rows: Vec<(String, PerfCounters)> = Vec::new();
    let mut mismatched = Vec::new();
    for ws in &workloads {
        let run = if a.timing_only {
            let lowered = lower(ws, &cfg).with_context(|| format!("lowering {}", ws.name))?;
            simulate_timed(&lowered.program, &cfg, &lowered.useful, a.timeline.is_some())?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or_default());
            let model = random_quant_model(ws, &mut rng);
            let input = random_input(ws, &mut rng);
            let lowered = lower_model(ws, Some(&model), &cfg).with_context(|| format!("lowering {}", ws.name))?;
            let (mut state, mut host) = load(&model, &lowered, &cfg, &input)?;
            let mut run = simulate_with_state(&lowered.program, &cfg, &lowered.useful, &mut state, &mut host)?;
            if a.timeline.is_some() {
                run = simulate_timed(&lowered.program, &cfg, &lowered.useful, true)?;
            }
            let got = lowered.host.unpack_output(&host.bytes);
            if got != reference_forward(&model, &input)? {
                mismatched.push(ws.name.clone());
            }
            run
        };
        if let Some(p) = &a.timeline {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_timeline(&run.timeline, io::BufWriter::new(f))?;
        }
        rows.push((ws.name.clone(), run.counters));
    }
    write_counters_csv(&rows, sink(&a.out)?)?;
    write_sidecar(&a.out, "simulate", Some(&cfg), a.seed)?;
    if !mismatched.is_empty() {
        bail!(Failed(format!("output differs from the reference for {}", mismatched.join(", "))));
    }
    Ok(())
}

fn lower_cmd(a: LowerArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let ws = load_workload(&a.workload)?;
    let lowered = lower(&ws, &cfg).with_context(|| format!("lowering {}", ws.name))?;
    if let Some(p) = &a.out {
        fs::write(p, lowered.program.to_bytes()?).with_context(|| format!("writing {}", p.display()))?;
        write_sidecar(&a.out, "lower", Some(&cfg), None)?;
    }
    if let Some(p) = &a.report {
        let text = serde_json::to_string_pretty(&lowered.report())? + "\n";
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    if a.listing || (a.out.is_none() && a.report.is_none()) {
        io::stdout().lock().write_all(lowered.program.listing().as_bytes())?;
    }
    let diags = validate(&lowered.program, &cfg);
    if !diags.is_empty() {
        bail!(Failed(format!("program failed static checks: {diags:?}")));
    }
    Ok(())
}

fn roofline(a: RooflineArgs) -> Result<()> {
    let (mut devices, cfg) = match &a.config {
        Some(p) => match load_config(p).with_context(|| format!("loading {}", p.display()))? {
            ConfigFile::Devices(d) => (d, TpuConfig::default()),
            ConfigFile::Tpu(cfg) => {
                let mut d = RooflineDevice::presets();
                d.retain(|x| x.name != "tpu");
                let mut tpu = cfg.roofline_device();
                tpu.quoted_ridge = RooflineDevice::tpu().quoted_ridge;
                d.push(tpu);
                (d, cfg)
            }
        },
        None => (RooflineDevice::presets(), TpuConfig::default()),
    };
    if !a.devices.iter().any(|d| d.eq_ignore_ascii_case("all")) {
        let mut picked = Vec::new();
        for name in &a.devices {
            let d = devices
                .iter()
                .find(|d| d.name.eq_ignore_ascii_case(name))
                .ok_or_else(|| usage(format!("unknown device {name:?}")))?;
            picked.push(d.clone());
        }
        devices = picked;
    }
    let conv = OpsConvention::from(a.convention);
    let mut points = Vec::new();
    for dev in &devices {
        for ws in all_presets() {
            let intensity = operational_intensity(&ws)?;
            let measured = if a.measure && dev.name == "tpu" {
                let lowered = lower(&ws, &cfg)?;
                Some(simulate_timed(&lowered.program, &cfg, &lowered.useful, false)?.counters.achieved_ops_per_s)
            } else {
                None
            };
            let mut p = RooflinePoint::new(dev, &ws.name, intensity, measured);
            let scale = dev.ops_convention.convert(1.0, conv);
            p.intensity *= scale;
            p.attainable *= scale;
            p.measured = p.measured.map(|m| m * scale);
            points.push(p);
        }
    }
    let shown: Vec<RooflineDevice> = devices.iter().map(|d| d.in_convention(conv)).collect();
    write_roofline_csv(sink(&a.out)?, &points, &shown)?;
    write_sidecar(&a.out, "roofline", Some(&cfg), None)?;
    if let Some(p) = points.iter().find(|p| !p.under_roof()) {
        bail!(Failed(format!("{} on {} exceeds its roof", p.workload, p.device)));
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let workloads = load_workloads(&a.workload)?;
    let knobs: Vec<ScaleKnob> = if a.knob.iter().any(|k| k.eq_ignore_ascii_case("all")) {
        ScaleKnob::ALL.to_vec()
    } else {
        a.knob
            .iter()
            .map(|k| k.parse().map_err(|e: tpu_sim::dse::DseError| usage(e.to_string())))
            .collect::<Result<_>>()?
    };
    let mut results = Vec::new();
    for k in knobs {
        let r = sweep(&workloads, k, &a.factors, &cfg).map_err(|e| match e {
            tpu_sim::dse::DseError::FactorRange { .. } => usage(e.to_string()),
            other => anyhow!(other),
        })?;
        results.push(r);
    }
    write_sweep_csv(sink(&a.out)?, &results)?;
    write_sidecar(&a.out, "sweep", Some(&cfg), None)?;
    Ok(())
}

fn prime(a: TpuPrimeArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let report = tpu_prime(&cfg, &all_presets())?;
    let mut out = sink(&a.out)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    out.flush()?;
    write_sidecar(&a.out, "tpu-prime", Some(&cfg), None)?;
    Ok(())
}

fn latency(a: LatencyArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let m: LatencyModel = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            m.validate()?;
            m
        }
        None => LatencyModel::tpu_mlp0(),
    };
    if a.batches.is_empty() || a.limit_ms.is_nan() || a.limit_ms <= 0.0 {
        return Err(usage("need a positive --limit-ms and at least one batch"));
    }
    let limit = a.limit_ms / 1e3;
    let mut w = csv::Writer::from_writer(sink(&a.out)?);
    w.write_record(["batch", "latency_ms", "ips", "within_limit"])?;
    let mut batches = a.batches.clone();
    batches.sort_unstable();
    batches.dedup();
    for &b in &batches {
        let lat = model.latency(b);
        w.write_record([
            b.to_string(),
            format!("{:.3}", lat * 1e3),
            format!("{:.0}", model.throughput(b)),
            (lat <= limit * (1.0 + 1e-12)).to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    let (batch, ips) = max_throughput_under_latency(&model, &batches, limit).map_err(|e| anyhow!(Failed(e.to_string())))?;
    eprintln!("selected batch {batch} at {ips:.0} inferences/s");
    write_sidecar(&a.out, "latency", None, None)?;
    Ok(())
}

fn device(name: &str) -> Result<RooflineDevice> {
    RooflineDevice::preset(name).ok_or_else(|| usage(format!("unknown device {name:?}")))
}

fn power(a: PowerArgs) -> Result<()> {
    let devices = a.devices.iter().map(|d| device(d)).collect::<Result<Vec<_>>>()?;
    if a.loads {
        let mut w = csv::Writer::from_writer(sink(&a.out)?);
        w.write_record(["device", "load_pct", "watts", "fraction_of_busy"])?;
        for d in &devices {
            for pct in (0..=100).step_by(10) {
                let watts = power_at_load(d, f64::from(pct) / 100.0)?;
                w.write_record([
                    d.name.clone(),
                    pct.to_string(),
                    format!("{watts:.3}"),
                    format!("{:.4}", watts / d.die_busy_watts),
                ])?;
            }
        }
        w.flush()?;
        return Ok(());
    }
    let base = device(&a.baseline)?;
    let host = device(&a.host)?;
    let base_perf = relative_perf(&base.name).ok_or_else(|| usage(format!("no published performance for {}", base.name)))?;
    let mut reports = Vec::new();
    for d in &devices {
        let perf = relative_perf(&d.name).ok_or_else(|| usage(format!("no published performance for {}", d.name)))?;
        let rel: Vec<f64> = perf.iter().zip(&base_perf).map(|(p, b)| p / b).collect();
        reports.push(power_report(d, &base, &host, &PRESET_NAMES, &rel, &mix_weights())?);
    }
    write_power_csv(sink(&a.out)?, &reports)?;
    write_sidecar(&a.out, "power", None, None)?;
    Ok(())
}

fn validate_model(a: ValidateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    if a.random > 0 && a.seed.is_none() {
        return Err(usage("--random needs --seed"));
    }
    let mut workloads = all_presets();
    if let Some(seed) = a.seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..a.random {
            let mut ws = random_workload(&mut rng, cfg.matrix_dim);
            ws.name = format!("random{i}");
            workloads.push(ws);
        }
    }
    let mut w = csv::Writer::from_writer(sink(&a.out)?);
    w.write_record(["workload", "sim_cycles", "estimate_cycles", "delta_pct", "within_tolerance"])?;
    let mut failed = Vec::new();
    let mut deltas = Vec::new();
    for ws in &workloads {
        let lowered = lower(ws, &cfg).with_context(|| format!("lowering {}", ws.name))?;
        let sim = simulate_timed(&lowered.program, &cfg, &lowered.useful, false)?.counters.total_cycles;
        let est = estimate(ws, &cfg)?.cycles;
        let delta = (est as f64 - sim as f64) / sim as f64;
        let ok = delta.abs() <= a.tolerance;
        if !ok {
            failed.push(ws.name.clone());
        }
        deltas.push(delta.abs());
        w.write_record([
            ws.name.clone(),
            sim.to_string(),
            format!("{est:.0}"),
            format!("{:.2}", 100.0 * delta),
            ok.to_string(),
        ])?;
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    w.write_record(["mean_abs".into(), String::new(), String::new(), format!("{:.2}", 100.0 * mean), String::new()])?;
    w.flush()?;
    drop(w);
    write_sidecar(&a.out, "validate-model", Some(&cfg), a.seed)?;
    if !failed.is_empty() {
        bail!(Failed(format!("estimate off by more than {:.0}% on {}", 100.0 * a.tolerance, failed.join(", "))));
    }
    Ok(())
}

fn encode(a: IoArgs) -> Result<()> {
    let text = read_input(&a.input)?;
    let program: Program = serde_json::from_slice(&text).context("parsing program JSON")?;
    let bytes = program.to_bytes()?;
    let mut out = sink(&a.out)?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn decode(a: IoArgs) -> Result<()> {
    let bytes = read_input(&a.input)?;
    let program = Program::from_bytes(&bytes)?;
    let mut out = sink(&a.out)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&program)?)?;
    out.flush()?;
    Ok(())
}
