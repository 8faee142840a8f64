//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::panic;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tpu_sim::analysis::{
    attainable, estimate, max_throughput_under_latency, power_at_load, LatencyModel, TPU_MLP0_POINTS,
};
use tpu_sim::archconfig::{ridge_point, LoadProfile, RooflineDevice, TpuConfig};
use tpu_sim::dse::{host_adjusted, sweep, tiling_cost, time_share, tpu_prime, ScaleKnob, HOST_INTERACTION};
use tpu_sim::funcsim::{execute, widen, HostMemory, TpuState};
use tpu_sim::isa::{act_flags, mm_flags, rw_flags, Instruction, Opcode, Program, FRAME_BYTES, MAX_UB_ADDR};
use tpu_sim::lowering::{lower, run_model};
use tpu_sim::timesim::{simulate_timed, PerfCounters};
use tpu_sim::workloads::{
    all_presets, fc_intensity, make_preset, operational_intensity, published, random_input, random_quant_model,
    random_workload, reference_forward, Activation, LayerSpec, WorkloadSpec, PRESET_NAMES,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn timed(ws: &WorkloadSpec, cfg: &TpuConfig) -> PerfCounters {
    let l = lower(ws, cfg).expect("lowers");
    simulate_timed(&l.program, cfg, &l.useful, false).expect("times").counters
}

/// One direct MatrixMultiply with random operand modes against a wrapping
/// 32-bit triple loop.
fn gemm_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let dim = [2u32, 4, 8, 16][rng.gen_range(0..4)];
    let d = dim as usize;
    let batch = rng.gen_range(1..=40usize);
    let flags = rng.gen_range(0..16u8) << 1;
    let (a16, w16) = (flags & mm_flags::ACT16 != 0, flags & mm_flags::WEIGHT16 != 0);
    let (a_s, w_s) = (flags & mm_flags::ACT_SIGNED != 0, flags & mm_flags::WEIGHT_SIGNED != 0);
    let mut raw = |n: usize, wide: bool| -> Vec<u16> {
        (0..n).map(|_| if wide { rng.gen() } else { u16::from(rng.gen::<u8>()) }).collect()
    };
    let xr = raw(batch * d, a16);
    let wr = raw(d * d, w16);
    let bytes = |v: &[u16], wide: bool| -> Vec<u8> {
        if wide {
            v.iter().flat_map(|x| x.to_le_bytes()).collect()
        } else {
            v.iter().map(|x| *x as u8).collect()
        }
    };
    let cfg = TpuConfig::small(dim);
    let mut st = TpuState::new(&cfg);
    st.wmem.write(0, &bytes(&wr, w16));
    let input = bytes(&xr, a16);
    let n = input.len() as u32;
    let mut host = HostMemory::from_bytes(input);
    let mut rw = Instruction::read_weights(0, 1);
    if w16 {
        rw.flags = rw_flags::WIDE;
    }
    let p = Program::new(
        "gemm",
        vec![Instruction::read_host(0, n), rw, Instruction::matmul(0, 0, batch as u32, flags), Instruction::halt()],
    );
    execute(&p, &mut st, &mut host).map_err(|e| e.to_string())?;
    for b in 0..batch {
        let want: Vec<i32> = (0..d)
            .map(|j| {
                (0..d).fold(0i32, |acc, i| {
                    let x = widen(xr[b * d + i], a16, a_s) as i32;
                    let w = widen(wr[i * d + j], w16, w_s) as i32;
                    acc.wrapping_add(x.wrapping_mul(w))
                })
            })
            .collect();
        check(st.acc_row(b) == want.as_slice(), format!("gemm mismatch dim {dim} flags {flags:#x} row {b}"))?;
    }
    Ok(())
}

fn c1_functional() -> Outcome {
    let failures: Vec<String> = (0..1000u64)
        .into_par_iter()
        .filter_map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if seed % 2 == 0 {
                return gemm_case(&mut rng).err();
            }
            let dim = [4u32, 8, 16][rng.gen_range(0..3)];
            let ws = random_workload(&mut rng, dim);
            let qm = random_quant_model(&ws, &mut rng);
            let x = random_input(&ws, &mut rng);
            let got = run_model(&qm, &TpuConfig::small(dim), &x);
            let want = reference_forward(&qm, &x);
            match (got, want) {
                (Ok(g), Ok(w)) if g == w => None,
                (g, w) => Some(format!("seed {seed}: sim {:?} vs oracle {:?}", g.map(|v| v.len()), w.map(|v| v.len()))),
            }
        })
        .collect();
    check(failures.is_empty(), failures.first().cloned().unwrap_or_default())?;
    Ok("1000 programs (500 direct GEMM, 500 lowered FC/conv nets) match exactly".into())
}

fn c2_ridge() -> Outcome {
    let r = ridge_point(&RooflineDevice::tpu());
    let shown = (r * 10.0).floor() / 10.0;
    check(shown == 1349.2, format!("ridge {r}"))?;
    check((1340.0..=1360.0).contains(&r), format!("ridge {r} outside [1340, 1360]"))?;
    Ok(format!("ridge {r:.2} MAC/byte, reported 1349.2 against 1350"))
}

fn c3_tiling() -> Outcome {
    let a = tiling_cost(600, 600, 256, 34e9);
    let b = tiling_cost(600, 600, 512, 34e9);
    let (ua, ub) = (a.seconds * 1e6, b.seconds * 1e6);
    check(a.steps == 9 && b.steps == 4, format!("steps {} and {}", a.steps, b.steps))?;
    check((ua - 17.3).abs() < 0.05 && (ub - 30.8).abs() < 0.05, format!("{ua:.2} us and {ub:.2} us"))?;
    check((ua - 18.0).abs() / 18.0 <= 0.10 && (ub - 32.0).abs() / 32.0 <= 0.10, "outside 10% of 18/32 us")?;
    Ok(format!("(9 steps, {ua:.1} us) and (4 steps, {ub:.1} us)"))
}

fn fc_stream(batch: u32) -> WorkloadSpec {
    WorkloadSpec {
        name: format!("fc-stream-{batch}"),
        batch,
        layers: (0..4).map(|_| LayerSpec::fc(2048, 2048, Activation::Relu)).collect(),
    }
}

fn c4_fetch_hiding() -> Outcome {
    let cfg = TpuConfig::default();
    let big = timed(&fc_stream(1350), &cfg);
    let small = timed(&fc_stream(64), &cfg);
    let (fb, fs) = (big.fraction(big.weight_stall_cycles), small.fraction(small.weight_stall_cycles));
    check(fb <= 0.01, format!("batch 1350 stalls {:.2}%", 100.0 * fb))?;
    check(fs >= 0.40, format!("batch 64 stalls {:.2}%", 100.0 * fs))?;
    Ok(format!("weight stall {:.2}% at B=1350, {:.1}% at B=64", 100.0 * fb, 100.0 * fs))
}

fn sample_runs(cfg: &TpuConfig) -> Vec<(WorkloadSpec, PerfCounters)> {
    let mut specs = all_presets();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    specs.extend((0..100).map(|_| random_workload(&mut rng, cfg.matrix_dim)));
    specs
        .into_par_iter()
        .map(|ws| {
            let c = timed(&ws, cfg);
            (ws, c)
        })
        .collect()
}

fn c5_closure(runs: &[(WorkloadSpec, PerfCounters)]) -> Outcome {
    for (ws, c) in runs {
        let sum = c.array_active_cycles + c.weight_stall_cycles + c.weight_shift_cycles + c.non_matrix_cycles;
        check(sum == c.total_cycles, format!("{}: {sum} != {}", ws.name, c.total_cycles))?;
    }
    Ok(format!("{} runs close exactly", runs.len()))
}

fn c6_roofline(runs: &[(WorkloadSpec, PerfCounters)], cfg: &TpuConfig) -> Outcome {
    let dev = cfg.roofline_device();
    let mut tightest = 0.0f64;
    for (ws, c) in runs {
        let roof = attainable(&dev, operational_intensity(ws).map_err(|e| e.to_string())?);
        let ratio = c.achieved_ops_per_s / roof;
        tightest = tightest.max(ratio);
        check(ratio <= 1.01, format!("{} at {:.3} of its roof", ws.name, ratio))?;
    }
    Ok(format!("{} runs, highest achieved/roof {:.3}", runs.len(), tightest))
}

fn c7_estimator(runs: &[(WorkloadSpec, PerfCounters)], cfg: &TpuConfig) -> Outcome {
    let mut worst = (String::new(), 0.0f64);
    for (ws, c) in runs.iter().take(PRESET_NAMES.len()) {
        let est = estimate(ws, cfg).map_err(|e| e.to_string())?.cycles;
        let err = (est - c.total_cycles as f64).abs() / c.total_cycles as f64;
        if err > worst.1 {
            worst = (ws.name.clone(), err);
        }
    }
    check(worst.1 <= 0.10, format!("{} off by {:.1}%", worst.0, 100.0 * worst.1))?;
    Ok(format!("worst preset {} at {:.2}%", worst.0, 100.0 * worst.1))
}

fn c8_trends() -> Outcome {
    let cfg = TpuConfig::default();
    let presets = all_presets();
    let mem = sweep(&presets, ScaleKnob::Memory, &[4.0], &cfg).map_err(|e| e.to_string())?;
    let clk = sweep(&presets, ScaleKnob::Clock, &[4.0], &cfg).map_err(|e| e.to_string())?;
    let mat = sweep(&presets, ScaleKnob::Matrix, &[2.0], &cfg).map_err(|e| e.to_string())?;
    let s = |r: &tpu_sim::dse::SweepResult, f: f64, w: &str| r.cell(f, w).and_then(|c| c.speedup).unwrap_or(f64::NAN);
    let mut notes = Vec::new();
    for w in ["MLP0", "MLP1", "LSTM0", "LSTM1"] {
        let (m, c) = (s(&mem, 4.0, w), s(&clk, 4.0, w));
        check(m >= 2.5, format!("memory x4 {w} {m:.2}"))?;
        check(c <= 1.2, format!("clock x4 {w} {c:.2}"))?;
        notes.push(format!("{w} {m:.2}"));
    }
    for w in ["CNN0", "CNN1"] {
        let c = s(&clk, 4.0, w);
        check((1.6..=2.4).contains(&c), format!("clock x4 {w} {c:.2}"))?;
        notes.push(format!("{w} clock {c:.2}"));
    }
    let wm = mat.mean(2.0).and_then(|m| m.weighted).unwrap_or(f64::NAN);
    check(wm <= 1.05, format!("matrix x2 WM {wm:.3}"))?;
    Ok(format!("memory x4 {}, matrix x2 WM {wm:.2}", notes.join(", ")))
}

fn c9_prime() -> Outcome {
    let r = tpu_prime(&TpuConfig::default(), &all_presets()).map_err(|e| e.to_string())?;
    let by = |n: &str| r.variants.iter().find(|v| v.name == n).expect("variant");
    let (clock, mem) = (by("clock"), by("memory"));
    check(clock.weighted_mean <= 1.1, format!("clock-only WM {:.3}", clock.weighted_mean))?;
    check((3.0..=4.5).contains(&mem.weighted_mean), format!("bandwidth x5 WM {:.3}", mem.weighted_mean))?;
    check(mem.host_weighted_mean < mem.weighted_mean, "host adjustment did not lower the gain")?;
    let zero = host_adjusted(&mem.gains, &vec![0.0; mem.gains.len()]).map_err(|e| e.to_string())?;
    check(zero == mem.gains, "h = 0 changed the gains")?;
    let shares: Vec<f64> = HOST_INTERACTION.iter().map(|f| time_share(*f)).collect();
    let again = host_adjusted(&mem.gains, &shares).map_err(|e| e.to_string())?;
    check(again.iter().zip(&mem.gains).all(|(a, g)| a < g || *g <= 1.0), "per-app adjustment not smaller")?;
    Ok(format!(
        "clock-only WM {:.2}, bandwidth x5 WM {:.2}, host-adjusted {:.2}",
        clock.weighted_mean, mem.weighted_mean, mem.host_weighted_mean
    ))
}

fn c10_intensity() -> Outcome {
    let mut worst = 0.0f64;
    for name in PRESET_NAMES {
        let ws = make_preset(name).map_err(|e| e.to_string())?;
        let got = operational_intensity(&ws).map_err(|e| e.to_string())?;
        let want = published(name).expect("published").intensity;
        let err = (got - want).abs() / want;
        worst = worst.max(err);
        check(err <= 0.05, format!("{name}: {got:.1} vs {want}"))?;
    }
    for b in 1..=4096u32 {
        let ws = WorkloadSpec {
            name: "fc".into(),
            batch: b,
            layers: vec![LayerSpec::fc(700, 300, Activation::Relu), LayerSpec::fc(300, 1100, Activation::Relu)],
        };
        check(fc_intensity(&ws) == Some(f64::from(b)), format!("FC stack at batch {b}"))?;
        check(operational_intensity(&ws).ok() == Some(f64::from(b)), format!("FC stack at batch {b}"))?;
    }
    Ok(format!("presets within {:.2}%, FC stacks exact for B = 1..4096", 100.0 * worst))
}

fn c11_latency() -> Outcome {
    let m = LatencyModel::tpu_mlp0();
    for p in TPU_MLP0_POINTS {
        let (lat, ips) = (m.latency(p.batch), m.throughput(p.batch));
        check((lat - p.latency_s).abs() <= 1e-12 * p.latency_s, format!("batch {}: {lat} s", p.batch))?;
        check((ips - p.ips).abs() <= 1e-9 * p.ips, format!("batch {}: {ips} IPS", p.batch))?;
    }
    let (b, _) = max_throughput_under_latency(&m, &[16, 64, 100, 150, 200, 250], 7e-3).map_err(|e| e.to_string())?;
    check(b == 200, format!("7 ms limit picks {b}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let model = LatencyModel {
            a: rng.gen_range(1e-7..1e-4),
            c: rng.gen_range(0.0..1e-2),
            h: rng.gen_range(0.0..0.9),
            d: rng.gen_range(1.0..4.0),
            g: rng.gen_range(0.0..1e-7),
        };
        let cands: Vec<u32> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(1..3000)).collect();
        let mut last = u32::MAX;
        for k in (0..60).rev() {
            let limit = 1e-4 * 1.2f64.powi(k);
            if let Ok((sel, _)) = max_throughput_under_latency(&model, &cands, limit) {
                check(sel <= last, format!("model {i}: limit {limit} picked {sel} after {last}"))?;
                last = sel;
            }
        }
    }
    Ok("both stored rows reproduced; selection monotone over 100 random models".into())
}

fn c12_power() -> Outcome {
    let points = [
        (RooflineDevice::tpu(), 0.88),
        (RooflineDevice::haswell(), 0.56),
        (RooflineDevice::k80(), 0.66),
        (RooflineDevice::tpu_with(LoadProfile::MemoryBound), 0.94),
        (RooflineDevice::haswell_with(LoadProfile::MemoryBound), 0.47),
        (RooflineDevice::k80_with(LoadProfile::MemoryBound), 0.78),
    ];
    for (dev, frac) in &points {
        let w = power_at_load(dev, 0.1).map_err(|e| e.to_string())?;
        check((w / dev.die_busy_watts - frac).abs() < 1e-12, format!("{}: {:.4} at 10%", dev.name, w / dev.die_busy_watts))?;
        check(power_at_load(dev, 1.0).map_err(|e| e.to_string())? == dev.die_busy_watts, "full load is not busy power")?;
        let mut prev = 0.0;
        for i in 0..=1000 {
            let w = power_at_load(dev, f64::from(i) / 1000.0).map_err(|e| e.to_string())?;
            check(w >= prev, format!("{} decreases at {i}", dev.name))?;
            prev = w;
        }
    }
    Ok("88%, 56%, 66% (and 94%, 47%, 78%) at 10% load; curves nondecreasing".into())
}

fn random_instruction(rng: &mut ChaCha8Rng) -> Instruction {
    let opcode = Opcode::ALL[rng.gen_range(0..Opcode::ALL.len())];
    let mut flags = rng.gen::<u8>() & opcode.allowed_flags();
    if opcode == Opcode::Activate && flags & act_flags::POOL_MASK == act_flags::POOL_MASK {
        flags &= !act_flags::POOL_MASK;
    }
    Instruction {
        opcode,
        flags,
        ub_addr: rng.gen_range(0..=MAX_UB_ADDR),
        acc_addr: rng.gen(),
        length: rng.gen(),
        repeat: rng.gen(),
    }
}

fn c13_isa() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10_000 {
        let ins = random_instruction(&mut rng);
        let frame = ins.encode().map_err(|e| format!("{ins:?}: {e}"))?;
        check(Instruction::decode(&frame) == Ok(ins), format!("{ins:?} did not round-trip"))?;
    }
    let mut accepted = 0;
    for _ in 0..100_000 {
        let frame: [u8; FRAME_BYTES] = rng.gen();
        let decoded = panic::catch_unwind(|| Instruction::decode(&frame)).map_err(|_| format!("decode panicked on {frame:?}"))?;
        if let Ok(ins) = decoded {
            accepted += 1;
            check(ins.encode() == Ok(frame), format!("{frame:?} re-encodes differently"))?;
        }
    }
    Ok(format!("10^4 round trips; 10^5 fuzzed frames decoded totally ({accepted} valid)"))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let cfg = TpuConfig::default();
    let runs = sample_runs(&cfg);
    let criteria: Vec<Criterion> = vec![
        ("functional correctness", Box::new(c1_functional)),
        ("ridge point", Box::new(c2_ridge)),
        ("tiling example", Box::new(c3_tiling)),
        ("weight-fetch hiding", Box::new(c4_fetch_hiding)),
        ("counter closure", Box::new(|| c5_closure(&runs))),
        ("roofline dominance", Box::new(|| c6_roofline(&runs, &cfg))),
        ("estimator vs timing sim", Box::new(|| c7_estimator(&runs, &cfg))),
        ("scaling trends", Box::new(c8_trends)),
        ("faster-memory variant", Box::new(c9_prime)),
        ("workload intensity", Box::new(c10_intensity)),
        ("latency-bounded batch", Box::new(c11_latency)),
        ("energy proportionality", Box::new(c12_power)),
        ("ISA encode/decode", Box::new(c13_isa)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(panic::AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
