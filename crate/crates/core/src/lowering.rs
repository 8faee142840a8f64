//! Compiles a workload into an instruction stream.
//!
//! Every activation tensor lives in the Unified Buffer as `ceil(C / dim)`
//! feature blocks. A block is a run of `batch * h * w` rows (example-major,
//! then pixel), each row holding `dim` channels; unused lanes are padding.
//! The host buffer holds the input blocks followed by the output blocks in
//! the same padded order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archconfig::TpuConfig;
use crate::funcsim::{execute, ExecError, HostMemory, TpuState};
use crate::isa::{
    act_flags, mm_flags, pack_conv_kernel, pack_dims16, pack_pool_window, rw_flags, ConfigReg, Instruction,
    Program,
};
use crate::workloads::{LayerKind, QuantModel, Shape, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("does not fit: {resource} needs {needed}, {available} available")]
    DoesNotFit {
        resource: &'static str,
        needed: u64,
        available: u64,
    },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("input has {got} values, expected {expected}")]
    InputSize { got: usize, expected: usize },
}

/// One weight tile in Weight Memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileKey {
    pub layer: usize,
    /// Output-channel block.
    pub n: u32,
    /// Input-channel block.
    pub k: u32,
    /// Kernel tap (0 for FC).
    pub tap: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileSlot {
    pub key: TileKey,
    pub wide: bool,
    pub wmem_addr: u64,
    /// Fraction of the array's MACs that carry real weights.
    pub useful: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    /// Weight tile grid: input blocks x output blocks (x taps).
    pub k_tiles: u32,
    pub n_tiles: u32,
    pub taps: u32,
    pub k_pad: u32,
    pub n_pad: u32,
    /// Row chunks the batch is split into to fit the accumulators.
    pub chunks: u32,
    pub true_macs: u64,
    pub padded_macs: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TilePlan {
    pub layers: Vec<LayerPlan>,
    /// Unique tiles in Weight Memory.
    pub tiles: Vec<TileSlot>,
    /// Tile index (into `tiles`) consumed by each matrix instruction, in order.
    pub pops: Vec<usize>,
}

impl TilePlan {
    pub fn true_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.true_macs).sum()
    }

    pub fn padded_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.padded_macs).sum()
    }
}

/// True MACs over padded array MACs for the whole program.
pub fn useful_mac_fraction(plan: &TilePlan) -> f64 {
    let p = plan.padded_macs();
    if p == 0 {
        1.0
    } else {
        plan.true_macs() as f64 / p as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UbInterval {
    /// Tensor index: 0 is the input, `i + 1` the output of layer `i`.
    pub tensor: usize,
    pub first_row: u64,
    pub rows: u64,
    /// Inclusive step range over which the tensor is live.
    pub def: i64,
    pub last_use: i64,
}

impl UbInterval {
    pub fn live_with(&self, o: &UbInterval) -> bool {
        self.def <= o.last_use && o.def <= self.last_use
    }

    pub fn overlaps(&self, o: &UbInterval) -> bool {
        self.first_row < o.first_row + o.rows && o.first_row < self.first_row + self.rows
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UbAllocation {
    pub intervals: Vec<UbInterval>,
    pub peak_rows: u64,
    pub peak_bytes: u64,
}

impl UbAllocation {
    /// Checks that no two simultaneously live tensors share rows.
    pub fn is_sound(&self) -> bool {
        let mut events: Vec<(i64, bool, usize)> = Vec::new();
        for (i, iv) in self.intervals.iter().enumerate() {
            events.push((iv.def, false, i));
            events.push((iv.last_use, true, i));
        }
        events.sort();
        let mut live: Vec<usize> = Vec::new();
        for (_, end, i) in events {
            if end {
                live.retain(|x| *x != i);
            } else {
                let iv = &self.intervals[i];
                if live.iter().any(|j| self.intervals[*j].overlaps(iv)) {
                    return false;
                }
                live.push(i);
            }
        }
        true
    }
}

fn first_fit(sizes: &[u64], live: &[(i64, i64)]) -> UbAllocation {
    let mut placed: Vec<UbInterval> = Vec::new();
    for (t, (&rows, &(def, last_use))) in sizes.iter().zip(live).enumerate() {
        let mut busy: Vec<(u64, u64)> = placed
            .iter()
            .filter(|p| p.def <= last_use && def <= p.last_use)
            .map(|p| (p.first_row, p.first_row + p.rows))
            .collect();
        busy.sort();
        let mut at = 0u64;
        for (s, e) in busy {
            if at + rows <= s {
                break;
            }
            at = at.max(e);
        }
        placed.push(UbInterval {
            tensor: t,
            first_row: at,
            rows,
            def,
            last_use,
        });
    }
    let peak_rows = placed.iter().map(|p| p.first_row + p.rows).max().unwrap_or(0);
    UbAllocation {
        intervals: placed,
        peak_rows,
        peak_bytes: 0,
    }
}

/// Where the input and output tensors sit in host memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostLayout {
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub batch: u32,
    pub dim: u32,
    pub input_offset: u64,
    pub input_bytes: u64,
    pub output_offset: u64,
    pub output_bytes: u64,
}

impl HostLayout {
    pub fn total_bytes(&self) -> u64 {
        self.output_offset + self.output_bytes
    }

    fn block_rows(&self, s: Shape) -> u64 {
        u64::from(self.batch) * s.pixels()
    }

    fn pack(&self, s: Shape, codes: &[i8]) -> Vec<u8> {
        let d = self.dim as usize;
        let c = s.c as usize;
        let rows = self.block_rows(s) as usize;
        let blocks = c.div_ceil(d);
        let mut out = vec![0u8; blocks * rows * d];
        for r in 0..rows {
            for ch in 0..c {
                out[((ch / d) * rows + r) * d + ch % d] = codes[r * c + ch] as u8;
            }
        }
        out
    }

    fn unpack(&self, s: Shape, bytes: &[u8]) -> Vec<i8> {
        let d = self.dim as usize;
        let c = s.c as usize;
        let rows = self.block_rows(s) as usize;
        let mut out = vec![0i8; rows * c];
        for r in 0..rows {
            for ch in 0..c {
                out[r * c + ch] = bytes[((ch / d) * rows + r) * d + ch % d] as i8;
            }
        }
        out
    }

    /// Host buffer holding `codes` (batch, pixel, channel order) in TPU order.
    pub fn pack_input(&self, codes: &[i8]) -> Vec<u8> {
        let mut host = self.pack(self.input_shape, codes);
        host.resize(self.total_bytes() as usize, 0);
        host
    }

    pub fn unpack_output(&self, host: &[u8]) -> Vec<i8> {
        let start = self.output_offset as usize;
        self.unpack(self.output_shape, &host[start..start + self.output_bytes as usize])
    }
}

#[derive(Debug, Clone)]
pub struct Lowered {
    pub program: Program,
    pub plan: TilePlan,
    pub ub: UbAllocation,
    pub host: HostLayout,
    /// Useful-MAC fraction per instruction (1.0 for non-matrix ones).
    pub useful: Vec<f64>,
}

/// JSON summary of a compilation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReport {
    pub workload: String,
    pub instructions: usize,
    pub weight_tiles: usize,
    pub tile_pops: usize,
    pub ub_peak_bytes: u64,
    pub useful_mac_fraction: f64,
    pub layers: Vec<LayerPlan>,
}

impl Lowered {
    pub fn report(&self) -> PlanReport {
        PlanReport {
            workload: self.program.meta.name.clone(),
            instructions: self.program.len(),
            weight_tiles: self.plan.tiles.len(),
            tile_pops: self.plan.pops.len(),
            ub_peak_bytes: self.ub.peak_bytes,
            useful_mac_fraction: useful_mac_fraction(&self.plan),
            layers: self.plan.layers.clone(),
        }
    }
}

struct Emitter<'a> {
    cfg: &'a TpuConfig,
    ins: Vec<Instruction>,
    useful: Vec<f64>,
    plan: TilePlan,
    slots: HashMap<TileKey, usize>,
    wmem_cursor: u64,
    acc_toggle: usize,
}

impl Emitter<'_> {
    fn push(&mut self, i: Instruction) {
        self.ins.push(i);
        self.useful.push(1.0);
    }

    fn tile(&mut self, key: TileKey, wide: bool, useful: f64) -> Result<usize, LowerError> {
        if let Some(s) = self.slots.get(&key) {
            return Ok(*s);
        }
        let size = self.cfg.tile_bytes() * if wide { 2 } else { 1 };
        let addr = self.wmem_cursor.div_ceil(size) * size;
        self.wmem_cursor = addr + size;
        if self.wmem_cursor > self.cfg.weight_mem_bytes {
            return Err(LowerError::DoesNotFit {
                resource: "weight memory",
                needed: self.wmem_cursor,
                available: self.cfg.weight_mem_bytes,
            });
        }
        self.plan.tiles.push(TileSlot {
            key,
            wide,
            wmem_addr: addr,
            useful,
        });
        let idx = self.plan.tiles.len() - 1;
        self.slots.insert(key, idx);
        Ok(idx)
    }

    /// Records a matrix instruction that consumes `tile`.
    fn matrix(&mut self, i: Instruction, tile: usize) {
        self.plan.pops.push(tile);
        self.ins.push(i);
        self.useful.push(self.plan.tiles[tile].useful);
    }

    fn region(&mut self, rows: u64) -> u16 {
        let acc = u64::from(self.cfg.acc_entries);
        let base = if 2 * rows <= acc {
            self.acc_toggle ^= 1;
            (self.acc_toggle as u64) * (acc / 2)
        } else {
            0
        };
        base as u16
    }
}

fn read_weights_for(slot: &TileSlot, cfg: &TpuConfig) -> Instruction {
    let size = cfg.tile_bytes() * if slot.wide { 2 } else { 1 };
    let mut i = Instruction::read_weights((slot.wmem_addr / size) as u32, 1);
    if slot.wide {
        i.flags |= rw_flags::WIDE;
    }
    i
}

/// Splits `n` items into the fewest equal chunks of at most `cap`.
pub(crate) fn chunking(n: u64, cap: u64) -> Vec<(u64, u64)> {
    let k = n.div_ceil(cap).max(1);
    let size = n.div_ceil(k);
    (0..k)
        .map(|i| (i * size, size.min(n - i * size)))
        .filter(|(_, len)| *len > 0)
        .collect()
}

/// Inserts weight prefetches into a stream of matrix instructions so that
/// at most `depth` tiles are outstanding ahead of the consumer.
fn schedule_prefetch(em: &mut Emitter, body: Vec<(Instruction, f64, Option<usize>)>) -> (Vec<Instruction>, Vec<f64>) {
    let depth = em.cfg.fifo_depth_tiles as usize;
    let pops = em.plan.pops.clone();
    let mut out = Vec::with_capacity(body.len() + pops.len());
    let mut useful = Vec::with_capacity(out.capacity());
    let mut requested = 0usize;
    let mut popped = 0usize;
    let request_upto = |target: usize, out: &mut Vec<Instruction>, useful: &mut Vec<f64>, requested: &mut usize| {
        while *requested < target.min(pops.len()) {
            out.push(read_weights_for(&em.plan.tiles[pops[*requested]], em.cfg));
            useful.push(1.0);
            *requested += 1;
        }
    };
    request_upto(depth, &mut out, &mut useful, &mut requested);
    for (ins, u, tile) in body {
        if tile.is_some() {
            request_upto(popped + depth.max(1), &mut out, &mut useful, &mut requested);
            popped += 1;
        }
        out.push(ins);
        useful.push(u);
    }
    (out, useful)
}

fn mm_flags_for(wide: bool, accumulate: bool) -> u8 {
    let mut f = mm_flags::ACT_SIGNED | mm_flags::WEIGHT_SIGNED;
    if wide {
        f |= mm_flags::WEIGHT16;
    }
    if accumulate {
        f |= mm_flags::ACCUMULATE;
    }
    f
}

/// Lowers `ws` onto `cfg`. Requantization parameters come from `model` when
/// given; otherwise every layer uses scale 1, shift 0.
pub fn lower_model(ws: &WorkloadSpec, model: Option<&QuantModel>, cfg: &TpuConfig) -> Result<Lowered, LowerError> {
    let shapes = ws.shapes()?;
    let d = cfg.dim() as u64;
    let dim = cfg.matrix_dim;
    let batch = u64::from(ws.batch);
    let acc = u64::from(cfg.acc_entries);

    // UB allocation over tensor liveness.
    let blocks = |s: Shape| u64::from(s.c).div_ceil(d);
    let sizes: Vec<u64> = shapes.iter().map(|s| blocks(*s) * batch * s.pixels()).collect();
    let n_layers = ws.layers.len() as i64;
    let live: Vec<(i64, i64)> = (0..shapes.len() as i64)
        .map(|t| (t - 1, if t == n_layers { t + 1 } else { t }))
        .collect();
    let mut ub = first_fit(&sizes, &live);
    ub.peak_bytes = ub.peak_rows * cfg.ub_row_bytes();
    if ub.peak_rows > cfg.ub_rows() {
        return Err(LowerError::DoesNotFit {
            resource: "unified buffer",
            needed: ub.peak_bytes,
            available: cfg.ub_bytes,
        });
    }
    let block_base = |t: usize, b: u64| ub.intervals[t].first_row + b * batch * shapes[t].pixels();

    let input_bytes = sizes[0] * d;
    let out_t = shapes.len() - 1;
    let host = HostLayout {
        input_shape: shapes[0],
        output_shape: shapes[out_t],
        batch: ws.batch,
        dim,
        input_offset: 0,
        input_bytes,
        output_offset: input_bytes,
        output_bytes: sizes[out_t] * d,
    };

    let mut em = Emitter {
        cfg,
        ins: Vec::new(),
        useful: Vec::new(),
        plan: TilePlan::default(),
        slots: HashMap::new(),
        wmem_cursor: 0,
        acc_toggle: 1,
    };

    // Output rows go to the host as soon as the last layer produces them.
    let out_rows = batch * shapes[out_t].pixels();
    let emit_output = |em: &mut Emitter, b: u64, row0: u64, rows: u64| {
        em.push(Instruction::set_config(
            ConfigReg::HostAddress,
            (host.output_offset + (b * out_rows + row0) * d) as u32,
        ));
        em.push(Instruction::write_host((block_base(out_t, b) + row0) as u32, (rows * d) as u32));
    };

    for b in 0..blocks(shapes[0]) {
        let rows = batch * shapes[0].pixels();
        em.push(Instruction::set_config(ConfigReg::HostAddress, (b * rows * d) as u32));
        em.push(Instruction::read_host(block_base(0, b) as u32, (rows * d) as u32));
    }

    for (li, l) in ws.layers.iter().enumerate() {
        let (inp, out) = (shapes[li], shapes[li + 1]);
        let (scale, shift) = model
            .map(|m| (m.layers[li].requant_scale, m.layers[li].requant_shift))
            .unwrap_or((1, 0));
        em.push(Instruction::set_config(ConfigReg::RequantScale, scale as u32));
        em.push(Instruction::set_config(ConfigReg::RequantShift, shift));
        let func = l.activation.act_fn();
        let wide = l.weight_bits == 16;
        match l.kind {
            LayerKind::Fc { .. } | LayerKind::Conv { .. } => {
                let (c, m) = (u64::from(inp.c), u64::from(out.c));
                let (kt, nt) = (c.div_ceil(d), m.div_ceil(d));
                let (taps, g) = match l.geometry(inp) {
                    Some(g) => {
                        let g = g.map_err(|reason| WorkloadError::Invalid { layer: li, reason })?;
                        (g.taps(), Some(g))
                    }
                    None => (1, None),
                };
                let out_px = out.pixels();
                if out_px > acc {
                    return Err(LowerError::DoesNotFit {
                        resource: "accumulators",
                        needed: out_px,
                        available: acc,
                    });
                }
                // chunks of whole examples
                let max_ex = (acc / out_px).min(u64::from(u16::MAX));
                let chunks = chunking(batch, max_ex);
                if let Some(g) = g {
                    em.push(Instruction::set_config(ConfigReg::ConvImage, pack_dims16(g.h, g.w)));
                    em.push(Instruction::set_config(
                        ConfigReg::ConvKernel,
                        pack_conv_kernel(g.r, g.s, g.stride, g.pad),
                    ));
                }
                for &(ex0, n_ex) in &chunks {
                    let rows = n_ex * out_px;
                    for n in 0..nt {
                        let region = em.region(rows);
                        for k in 0..kt {
                            let kv = (c - k * d).min(d);
                            let nv = (m - n * d).min(d);
                            let useful = (kv * nv) as f64 / (d * d) as f64;
                            for tap in 0..taps {
                                let key = TileKey {
                                    layer: li,
                                    n: n as u32,
                                    k: k as u32,
                                    tap,
                                };
                                let tile = em.tile(key, wide, useful)?;
                                let flags = mm_flags_for(wide, k > 0 || tap > 0);
                                let src = block_base(li, k) + ex0 * inp.pixels();
                                let i = if g.is_some() {
                                    Instruction::convolve(src as u32, region, n_ex as u16, tap as u16, flags)
                                } else {
                                    Instruction::matmul(src as u32, region, rows as u32, flags)
                                };
                                em.matrix(i, tile);
                            }
                        }
                        let dst = block_base(li + 1, n) + ex0 * out_px;
                        em.push(Instruction::activate(region, dst as u32, rows as u32, func, 0));
                        if li + 1 == out_t {
                            emit_output(&mut em, n, ex0 * out_px, rows);
                        }
                    }
                }
                let padded = batch * out_px * kt * nt * u64::from(taps) * d * d;
                em.plan.layers.push(LayerPlan {
                    layer: li,
                    k_tiles: kt as u32,
                    n_tiles: nt as u32,
                    taps,
                    k_pad: (kt * d - c) as u32,
                    n_pad: (nt * d - m) as u32,
                    chunks: chunks.len() as u32,
                    true_macs: batch * out_px * c * m * u64::from(taps),
                    padded_macs: padded,
                });
            }
            LayerKind::Vector { .. } | LayerKind::Pool { .. } => {
                let mut flags = act_flags::SRC_UB;
                if let LayerKind::Pool { window, stride, pad, kind } = l.kind {
                    flags |= kind.kind().flag_bits();
                    em.push(Instruction::set_config(
                        ConfigReg::PoolWindow,
                        pack_pool_window(window, stride, pad),
                    ));
                    em.push(Instruction::set_config(ConfigReg::PoolImage, pack_dims16(inp.h, inp.w)));
                }
                let rows = batch * inp.pixels();
                for b in 0..blocks(inp) {
                    em.push(Instruction::set_config(ConfigReg::UbSource, block_base(li, b) as u32));
                    em.push(Instruction::activate(0, block_base(li + 1, b) as u32, rows as u32, func, flags));
                    if li + 1 == out_t {
                        emit_output(&mut em, b, 0, batch * out.pixels());
                    }
                }
            }
        }
    }

    em.push(Instruction::halt());

    let body: Vec<(Instruction, f64, Option<usize>)> = {
        let mut pops = em.plan.pops.iter();
        em.ins
            .iter()
            .zip(&em.useful)
            .map(|(i, u)| (*i, *u, if i.opcode.is_matrix() { pops.next().copied() } else { None }))
            .collect()
    };
    let (instructions, useful) = schedule_prefetch(&mut em, body);
    let mut program = Program::new(ws.name.clone(), instructions);
    program.meta.config_hash = crate::isa::config_hash(cfg);
    Ok(Lowered {
        program,
        plan: em.plan,
        ub,
        host,
        useful,
    })
}

pub fn lower(ws: &WorkloadSpec, cfg: &TpuConfig) -> Result<Lowered, LowerError> {
    lower_model(ws, None, cfg)
}

/// Peak Unified Buffer bytes of the compiled workload.
pub fn ub_footprint(ws: &WorkloadSpec, cfg: &TpuConfig) -> Result<u64, LowerError> {
    Ok(lower(ws, cfg)?.ub.peak_bytes)
}

/// Weight Memory contents: `(byte address, tile bytes)` per unique tile.
pub fn weight_image(model: &QuantModel, lowered: &Lowered, cfg: &TpuConfig) -> Vec<(u64, Vec<u8>)> {
    let d = cfg.dim();
    let shapes = model.spec.shapes().expect("lowered spec is valid");
    lowered
        .plan
        .tiles
        .iter()
        .map(|slot| {
            let key = slot.key;
            let c = shapes[key.layer].c as usize;
            let m = shapes[key.layer + 1].c as usize;
            let w = &model.layers[key.layer].weights;
            let elem = if slot.wide { 2 } else { 1 };
            let mut bytes = vec![0u8; d * d * elem];
            for i in 0..d {
                let ci = key.k as usize * d + i;
                if ci >= c {
                    break;
                }
                for j in 0..d {
                    let mj = key.n as usize * d + j;
                    if mj >= m {
                        break;
                    }
                    let v = w[(key.tap as usize * c + ci) * m + mj];
                    let at = (i * d + j) * elem;
                    if slot.wide {
                        bytes[at..at + 2].copy_from_slice(&v.to_le_bytes());
                    } else {
                        bytes[at] = v as i8 as u8;
                    }
                }
            }
            (slot.wmem_addr, bytes)
        })
        .collect()
}

/// Prepares device and host state for running `lowered` on `input`.
pub fn load(model: &QuantModel, lowered: &Lowered, cfg: &TpuConfig, input: &[i8]) -> Result<(TpuState, HostMemory), RunError> {
    let expected = (lowered.host.input_shape.elements() * u64::from(lowered.host.batch)) as usize;
    if input.len() != expected {
        return Err(RunError::InputSize {
            got: input.len(),
            expected,
        });
    }
    let mut state = TpuState::new(cfg);
    for (addr, bytes) in weight_image(model, lowered, cfg) {
        state.wmem.write(addr, &bytes);
    }
    let host = HostMemory::from_bytes(lowered.host.pack_input(input));
    Ok((state, host))
}

/// Compiles and functionally executes `model` on one batch of input codes.
pub fn run_model(model: &QuantModel, cfg: &TpuConfig, input: &[i8]) -> Result<Vec<i8>, RunError> {
    let lowered = lower_model(&model.spec, Some(model), cfg)?;
    let (mut state, mut host) = load(model, &lowered, cfg, input)?;
    execute(&lowered.program, &mut state, &mut host)?;
    Ok(lowered.host.unpack_output(&host.bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{validate, Opcode};
    use crate::workloads::{make_preset, random_input, random_quant_model, random_workload, reference_forward, Activation, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fc(inp: u32, out: u32, batch: u32) -> WorkloadSpec {
        WorkloadSpec {
            name: "fc".into(),
            batch,
            layers: vec![LayerSpec::fc(inp, out, Activation::Relu)],
        }
    }

    fn count(p: &Program, op: Opcode) -> usize {
        p.instructions.iter().filter(|i| i.opcode == op).count()
    }

    #[test]
    fn single_tile_layer() {
        let l = lower(&fc(256, 256, 256), &TpuConfig::default()).unwrap();
        assert_eq!(l.plan.tiles.len(), 1);
        assert_eq!(count(&l.program, Opcode::MatrixMultiply), 1);
        assert_eq!(count(&l.program, Opcode::Activate), 1);
        assert_eq!(useful_mac_fraction(&l.plan), 1.0);
    }

    #[test]
    fn tile_counts_600() {
        let l = lower(&fc(600, 600, 1), &TpuConfig::default()).unwrap();
        assert_eq!(l.plan.tiles.len(), 9);
        let frac = useful_mac_fraction(&l.plan);
        assert!((frac - 360000.0 / 589824.0).abs() < 1e-12);
        let big = TpuConfig {
            matrix_dim: 512,
            acc_entries: 4096,
            ..TpuConfig::default()
        };
        assert_eq!(lower(&fc(600, 600, 1), &big).unwrap().plan.tiles.len(), 4);
    }

    #[test]
    fn shallow_channels_waste_lanes() {
        let ws = WorkloadSpec {
            name: "c".into(),
            batch: 1,
            layers: vec![LayerSpec::conv(3, 256, 3, 8, 8, 1, 1, Activation::Relu)],
        };
        let l = lower(&ws, &TpuConfig::default()).unwrap();
        assert!(l.plan.tiles.iter().all(|t| t.useful <= 3.0 / 256.0));
    }

    #[test]
    fn minimal_footprint() {
        assert_eq!(ub_footprint(&fc(256, 256, 1), &TpuConfig::default()).unwrap(), 512);
    }

    #[test]
    fn footprint_scales_with_batch() {
        let cfg = TpuConfig::default();
        for name in ["MLP0", "MLP1"] {
            let mut ws = make_preset(name).unwrap();
            let a = ub_footprint(&ws, &cfg).unwrap();
            ws.batch *= 2;
            assert_eq!(ub_footprint(&ws, &cfg).unwrap(), 2 * a);
        }
    }

    #[test]
    fn presets_lower_and_validate() {
        let cfg = TpuConfig::default();
        for ws in crate::workloads::all_presets() {
            let l = lower(&ws, &cfg).unwrap();
            assert!(l.ub.peak_bytes <= cfg.ub_bytes);
            assert!(l.ub.is_sound());
            let diags = validate(&l.program, &cfg);
            assert!(diags.is_empty(), "{}: {:?}", ws.name, &diags[..diags.len().min(3)]);
            assert_eq!(l.plan.true_macs(), ws.total_macs().unwrap(), "{}", ws.name);
        }
    }

    #[test]
    fn weighted_useful_fraction_sums_to_true_macs() {
        let cfg = TpuConfig::small(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let ws = random_workload(&mut rng, 8);
            let l = lower(&ws, &cfg).unwrap();
            let mut st = crate::isa::Registers::new();
            let mut sum = 0.0;
            for (i, u) in l.program.instructions.iter().zip(&l.useful) {
                if i.opcode == Opcode::SetConfig {
                    st.set(ConfigReg::from_id(i.flags).unwrap(), i.length);
                }
                if i.opcode.is_matrix() {
                    let fp = i.footprint(0, &st, &cfg).unwrap();
                    sum += u * (fp.matrix_rows * 64) as f64;
                }
            }
            let t = ws.total_macs().unwrap() as f64;
            assert!((sum - t).abs() <= 1e-6 * t.max(1.0), "{sum} vs {t}");
        }
    }

    #[test]
    fn lowered_random_models_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [4u32, 8] {
            let cfg = TpuConfig::small(dim);
            for _ in 0..40 {
                let ws = random_workload(&mut rng, dim);
                let qm = random_quant_model(&ws, &mut rng);
                let x = random_input(&ws, &mut rng);
                let l = lower_model(&ws, Some(&qm), &cfg).unwrap();
                assert!(validate(&l.program, &cfg).is_empty());
                assert_eq!(run_model(&qm, &cfg, &x).unwrap(), reference_forward(&qm, &x).unwrap(), "{ws:?}");
            }
        }
    }

    #[test]
    fn batch_chunks_when_accumulators_are_short() {
        let cfg = TpuConfig::small(4);
        let ws = fc(6, 5, 1100);
        let l = lower(&ws, &cfg).unwrap();
        assert_eq!(l.plan.layers[0].chunks, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qm = random_quant_model(&ws, &mut rng);
        let x = random_input(&ws, &mut rng);
        assert_eq!(run_model(&qm, &cfg, &x).unwrap(), reference_forward(&qm, &x).unwrap());
    }

    #[test]
    fn weights_must_fit() {
        let cfg = TpuConfig {
            weight_mem_bytes: 1 << 20,
            ..TpuConfig::default()
        };
        assert!(matches!(
            lower(&fc(2048, 2048, 1), &cfg),
            Err(LowerError::DoesNotFit { resource: "weight memory", .. })
        ));
    }

    #[test]
    fn buffer_must_fit() {
        let cfg = TpuConfig::default();
        assert!(matches!(
            lower(&fc(4096, 4096, 4096), &cfg),
            Err(LowerError::DoesNotFit { resource: "unified buffer", .. })
        ));
    }

    #[test]
    fn prefetch_runs_ahead_of_consumer() {
        let cfg = TpuConfig::default();
        let l = lower(&fc(1024, 1024, 16), &cfg).unwrap();
        let mut requested = 0;
        let mut popped = 0;
        for i in &l.program.instructions {
            match i.opcode {
                Opcode::ReadWeights => requested += 1,
                Opcode::MatrixMultiply => {
                    popped += 1;
                    assert!(requested >= popped);
                    assert!(requested - popped < cfg.fifo_depth_tiles as usize);
                }
                _ => {}
            }
        }
    }
}
