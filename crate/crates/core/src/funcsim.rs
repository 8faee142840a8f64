//! Bit-exact functional model. Instructions retire one at a time in program
//! order; the systolic wavefront is invisible here and each matrix operation
//! is an atomic B-row GEMM into the 32-bit accumulators.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archconfig::TpuConfig;
use crate::isa::{
    act_flags, mm_flags, rw_flags, ActFn, ConfigReg, ConvGeometry, Footprint, Instruction, Opcode,
    PoolKind, Program, Registers,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("instruction {index}: address fault in {space}")]
    AddressFault { index: usize, space: &'static str },
    #[error("instruction {index}: no weight tile queued")]
    FifoUnderflow { index: usize },
    #[error("instruction {index}: accumulator rows out of range")]
    AccOutOfRange { index: usize },
    #[error("instruction {index}: weight memory read out of range")]
    WeightMemOutOfRange { index: usize },
    #[error("instruction {index}: weight tile width does not match instruction")]
    WeightWidthMismatch { index: usize },
    #[error("instruction {index}: invalid pool window: {reason}")]
    InvalidPool { index: usize, reason: String },
    #[error("instruction {index}: {reason}")]
    Geometry { index: usize, reason: String },
    #[error("instruction {index}: malformed instruction")]
    Malformed { index: usize },
}

const PAGE: u64 = 1 << 16;

/// Fixed-capacity byte store that only materializes pages once written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteStore {
    len: u64,
    pages: HashMap<u64, Box<[u8]>>,
}

impl ByteStore {
    pub fn new(len: u64) -> Self {
        ByteStore {
            len,
            pages: HashMap::new(),
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn in_range(&self, addr: u64, n: usize) -> bool {
        addr.checked_add(n as u64).is_some_and(|end| end <= self.len)
    }

    pub fn read(&self, addr: u64, buf: &mut [u8]) -> bool {
        if !self.in_range(addr, buf.len()) {
            return false;
        }
        let mut done = 0;
        while done < buf.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(buf.len() - done);
            match self.pages.get(&page) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
        true
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> bool {
        if !self.in_range(addr, data.len()) {
            return false;
        }
        let mut done = 0;
        while done < data.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(data.len() - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| vec![0u8; PAGE as usize].into_boxed_slice());
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        true
    }

    pub fn read_vec(&self, addr: u64, n: usize) -> Option<Vec<u8>> {
        let mut v = vec![0u8; n];
        self.read(addr, &mut v).then_some(v)
    }
}

/// Host-side buffer the DMA engine reads from and writes to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostMemory {
    pub bytes: Vec<u8>,
}

impl HostMemory {
    pub fn new(len: usize) -> Self {
        HostMemory { bytes: vec![0; len] }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        HostMemory { bytes }
    }

    fn slice(&self, range: std::ops::Range<u64>) -> Option<&[u8]> {
        self.bytes.get(range.start as usize..range.end as usize)
    }

    fn slice_mut(&mut self, range: std::ops::Range<u64>) -> Option<&mut [u8]> {
        self.bytes.get_mut(range.start as usize..range.end as usize)
    }
}

/// One matrix_dim x matrix_dim block of weights, row `i` feeding input lane `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightTile {
    pub data: Vec<u8>,
    pub wide: bool,
}

impl WeightTile {
    fn raw(&self, idx: usize) -> u16 {
        if self.wide {
            u16::from_le_bytes([self.data[2 * idx], self.data[2 * idx + 1]])
        } else {
            u16::from(self.data[idx])
        }
    }
}

/// Operand widths and signedness of a matrix operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataMode {
    pub act16: bool,
    pub weight16: bool,
    pub act_signed: bool,
    pub weight_signed: bool,
}

impl DataMode {
    pub fn from_flags(flags: u8) -> Self {
        DataMode {
            act16: flags & mm_flags::ACT16 != 0,
            weight16: flags & mm_flags::WEIGHT16 != 0,
            act_signed: flags & mm_flags::ACT_SIGNED != 0,
            weight_signed: flags & mm_flags::WEIGHT_SIGNED != 0,
        }
    }

    pub fn flags(&self) -> u8 {
        let mut f = 0;
        if self.act16 {
            f |= mm_flags::ACT16;
        }
        if self.weight16 {
            f |= mm_flags::WEIGHT16;
        }
        if self.act_signed {
            f |= mm_flags::ACT_SIGNED;
        }
        if self.weight_signed {
            f |= mm_flags::WEIGHT_SIGNED;
        }
        f
    }

    /// Throughput relative to 8x8-bit operation.
    pub fn speed_factor(&self) -> f64 {
        1.0 / self.slowdown() as f64
    }

    /// Cycles per row.
    pub fn slowdown(&self) -> u64 {
        match (self.act16, self.weight16) {
            (false, false) => 1,
            (true, true) => 4,
            _ => 2,
        }
    }
}

/// Widens a raw element according to its width and signedness.
pub fn widen(raw: u16, wide: bool, signed: bool) -> i64 {
    match (wide, signed) {
        (false, false) => i64::from(raw as u8),
        (false, true) => i64::from(raw as u8 as i8),
        (true, false) => i64::from(raw),
        (true, true) => i64::from(raw as i16),
    }
}

/// Output element format of the activation unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutFormat {
    pub wide: bool,
    pub signed: bool,
}

impl OutFormat {
    pub fn from_act_flags(flags: u8) -> Self {
        OutFormat {
            wide: flags & act_flags::OUT16 != 0,
            signed: flags & act_flags::OUT_UNSIGNED == 0,
        }
    }

    pub fn bits(&self) -> u32 {
        if self.wide {
            16
        } else {
            8
        }
    }

    pub fn range(&self) -> (i64, i64) {
        let bits = self.bits();
        if self.signed {
            (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
        } else {
            (0, (1i64 << bits) - 1)
        }
    }

    pub fn saturate(&self, v: i64) -> i64 {
        let (lo, hi) = self.range();
        v.clamp(lo, hi)
    }
}

/// Divides and rounds half away from zero.
pub fn div_round_half_away(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.abs() * 2 + den;
    let r = q / (2 * den);
    if num < 0 {
        -r
    } else {
        r
    }
}

/// Multiply by `scale`, arithmetic shift right by `shift` rounding half away
/// from zero. No narrowing.
pub fn requantize(v: i64, scale: i32, shift: u32) -> i64 {
    let prod = i128::from(v) * i128::from(scale);
    let shifted = if shift == 0 {
        prod
    } else {
        div_round_half_away(prod, 1i128 << shift.min(126))
    };
    shifted.clamp(i128::from(i64::MIN), i128::from(i64::MAX)) as i64
}

/// Lookup-table input step: an 8-bit code `x` stands for `x / 16`.
pub const LUT_INPUT_SCALE: f64 = 16.0;

/// Sigmoid / tanh output for 8-bit input code `x` in the given output coding.
/// Unsigned outputs represent `y * 2^bits`, signed ones `y * 2^(bits-1)`.
pub fn lut_value(func: ActFn, x: i8, out: OutFormat) -> i64 {
    let xr = f64::from(x) / LUT_INPUT_SCALE;
    let y = match func {
        ActFn::Sigmoid => 1.0 / (1.0 + (-xr).exp()),
        ActFn::Tanh => xr.tanh(),
        ActFn::Identity | ActFn::Relu => unreachable!("not a table function"),
    };
    let scale = if out.signed {
        f64::from(1u32 << (out.bits() - 1))
    } else {
        f64::from(1u32 << out.bits())
    };
    out.saturate((y * scale).round() as i64)
}

/// The 256-entry table indexed by `x as u8`.
pub fn build_lut(func: ActFn, out: OutFormat) -> [i64; 256] {
    let mut t = [0i64; 256];
    for x in i8::MIN..=i8::MAX {
        t[x as u8 as usize] = lut_value(func, x, out);
    }
    t
}

/// Elementwise part of the activation pipeline: requantize then apply `func`.
/// Pooling and final saturation happen afterwards.
pub fn activation_value(v: i64, func: ActFn, scale: i32, shift: u32, lut: Option<&[i64; 256]>) -> i64 {
    let r = requantize(v, scale, shift);
    match func {
        ActFn::Identity => r,
        ActFn::Relu => r.max(0),
        ActFn::Sigmoid | ActFn::Tanh => {
            let x = r.clamp(-128, 127) as i8;
            lut.expect("table built for table function")[x as u8 as usize]
        }
    }
}

/// Pools `images` images of `g.h x g.w` rows of `lanes` values each.
pub fn pool_rows(values: &[i64], lanes: usize, images: usize, g: &ConvGeometry, kind: PoolKind) -> Vec<i64> {
    let (h, w) = (g.h as usize, g.w as usize);
    let (oh, ow) = (g.out_h() as usize, g.out_w() as usize);
    let mut out = Vec::with_capacity(images * oh * ow * lanes);
    for img in 0..images {
        for y in 0..oh {
            for x in 0..ow {
                for lane in 0..lanes {
                    let mut best = i64::MIN;
                    let mut sum: i128 = 0;
                    let mut count = 0i128;
                    for dr in 0..g.r {
                        for ds in 0..g.s {
                            if let Some((iy, ix)) = g.source(y as u32, x as u32, dr, ds) {
                                let v = values[((img * h + iy as usize) * w + ix as usize) * lanes + lane];
                                best = best.max(v);
                                sum += i128::from(v);
                                count += 1;
                            }
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => best,
                        PoolKind::Avg => div_round_half_away(sum, count.max(1)) as i64,
                    });
                }
            }
        }
    }
    out
}

/// Architectural state of one accelerator die.
#[derive(Debug, Clone, PartialEq)]
pub struct TpuState {
    pub cfg: TpuConfig,
    pub ub: ByteStore,
    pub wmem: ByteStore,
    pub wfifo: VecDeque<WeightTile>,
    /// Tiles requested but waiting for FIFO space.
    pub pending: VecDeque<WeightTile>,
    pub active_tile: Option<WeightTile>,
    pub shadow_tile: Option<WeightTile>,
    /// `acc_entries * matrix_dim` accumulators, row-major.
    pub acc: Vec<i32>,
    /// Number of 2^32 wraps absorbed by accumulator updates.
    pub overflow_count: u64,
    pub regs: Registers,
}

/// One record per retired instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecEvent {
    pub index: usize,
    pub opcode: String,
    pub ub_addr: u32,
    pub acc_addr: u16,
    pub iterations: u32,
    /// Bytes moved over the host link or out of Weight Memory.
    pub bytes: u64,
}

pub fn write_event_log<W: Write>(events: &[ExecEvent], mut out: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

impl TpuState {
    pub fn new(cfg: &TpuConfig) -> Self {
        TpuState {
            cfg: cfg.clone(),
            ub: ByteStore::new(cfg.ub_bytes),
            wmem: ByteStore::new(cfg.weight_mem_bytes),
            wfifo: VecDeque::new(),
            pending: VecDeque::new(),
            active_tile: None,
            shadow_tile: None,
            acc: vec![0; cfg.acc_entries as usize * cfg.dim()],
            overflow_count: 0,
            regs: Registers::new(),
        }
    }

    pub fn acc_row(&self, row: usize) -> &[i32] {
        let d = self.cfg.dim();
        &self.acc[row * d..(row + 1) * d]
    }

    /// Reads `lanes` elements of a logical buffer row.
    fn read_ub_row(&self, row: u64, wide: bool, signed: bool, index: usize) -> Result<Vec<i64>, ExecError> {
        let d = self.cfg.dim();
        let rb = self.cfg.ub_row_bytes();
        let n = if wide { 2 * d } else { d };
        let bytes = self
            .ub
            .read_vec(row * rb, n)
            .ok_or(ExecError::AddressFault { index, space: "unified buffer" })?;
        Ok((0..d)
            .map(|i| {
                let raw = if wide {
                    u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]])
                } else {
                    u16::from(bytes[i])
                };
                widen(raw, wide, signed)
            })
            .collect())
    }

    fn write_ub_row(&mut self, row: u64, values: &[i64], fmt: OutFormat, index: usize) -> Result<(), ExecError> {
        let rb = self.cfg.ub_row_bytes();
        let bytes: Vec<u8> = if fmt.wide {
            values.iter().flat_map(|v| (*v as i16 as u16).to_le_bytes()).collect()
        } else {
            values.iter().map(|v| *v as u8).collect()
        };
        if self.ub.write(row * rb, &bytes) {
            Ok(())
        } else {
            Err(ExecError::AddressFault { index, space: "unified buffer" })
        }
    }

    /// Queues `n` tiles read from Weight Memory starting at tile `first`.
    pub fn read_weights(&mut self, first: u64, n: u64, wide: bool, index: usize) -> Result<(), ExecError> {
        let tile_bytes = self.cfg.tile_bytes() as usize * if wide { 2 } else { 1 };
        for t in first..first + n {
            let data = self
                .wmem
                .read_vec(t * tile_bytes as u64, tile_bytes)
                .ok_or(ExecError::WeightMemOutOfRange { index })?;
            let tile = WeightTile { data, wide };
            if self.wfifo.len() < self.cfg.fifo_depth_tiles as usize && self.pending.is_empty() {
                self.wfifo.push_back(tile);
            } else {
                self.pending.push_back(tile);
            }
        }
        Ok(())
    }

    /// Moves the next queued tile through the shadow slot into the array.
    fn load_next_tile(&mut self, index: usize) -> Result<(), ExecError> {
        let tile = match self.wfifo.pop_front() {
            Some(t) => {
                if let Some(p) = self.pending.pop_front() {
                    self.wfifo.push_back(p);
                }
                t
            }
            None => self.pending.pop_front().ok_or(ExecError::FifoUnderflow { index })?,
        };
        self.shadow_tile = Some(tile);
        self.active_tile = self.shadow_tile.take();
        Ok(())
    }

    /// `acc[acc_base + b] (+)= input_rows[b] x active_tile` for every row.
    pub fn matrix_multiply(
        &mut self,
        inputs: &[Vec<i64>],
        acc_base: u64,
        mode: DataMode,
        accumulate: bool,
        index: usize,
    ) -> Result<(), ExecError> {
        let d = self.cfg.dim();
        let tile = self.active_tile.as_ref().ok_or(ExecError::FifoUnderflow { index })?;
        if tile.wide != mode.weight16 {
            return Err(ExecError::WeightWidthMismatch { index });
        }
        if acc_base + inputs.len() as u64 > u64::from(self.cfg.acc_entries) {
            return Err(ExecError::AccOutOfRange { index });
        }
        let weights: Vec<i64> = (0..d * d)
            .map(|k| widen(tile.raw(k), mode.weight16, mode.weight_signed))
            .collect();
        let mut sums = vec![0i64; d];
        for (b, x) in inputs.iter().enumerate() {
            sums.iter_mut().for_each(|s| *s = 0);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0 {
                    continue;
                }
                let wrow = &weights[i * d..(i + 1) * d];
                for (s, &w) in sums.iter_mut().zip(wrow) {
                    *s += xi * w;
                }
            }
            let row = (acc_base as usize + b) * d;
            for (j, s) in sums.iter().enumerate() {
                let old = if accumulate { i64::from(self.acc[row + j]) } else { 0 };
                let exact = old + s;
                let wrapped = exact as i32;
                self.overflow_count += ((exact - i64::from(wrapped)) / (1i64 << 32)).unsigned_abs();
                self.acc[row + j] = wrapped;
            }
        }
        Ok(())
    }

    fn gather_conv_inputs(
        &self,
        ub_base: u64,
        images: u64,
        tap: u32,
        g: &ConvGeometry,
        mode: DataMode,
        index: usize,
    ) -> Result<Vec<Vec<i64>>, ExecError> {
        let d = self.cfg.dim();
        let scale = if mode.act16 { 2 } else { 1 };
        let (dr, ds) = (tap / g.s, tap % g.s);
        let mut rows = Vec::with_capacity((images * g.out_pixels()) as usize);
        for img in 0..images {
            for oh in 0..g.out_h() {
                for ow in 0..g.out_w() {
                    match g.source(oh, ow, dr, ds) {
                        Some((ih, iw)) => {
                            let r = img * g.in_pixels() + u64::from(ih) * u64::from(g.w) + u64::from(iw);
                            rows.push(self.read_ub_row(ub_base + r * scale, mode.act16, mode.act_signed, index)?);
                        }
                        None => rows.push(vec![0; d]),
                    }
                }
            }
        }
        Ok(rows)
    }

    fn activate(&mut self, ins: &Instruction, fp: &Footprint, index: usize) -> Result<(), ExecError> {
        let d = self.cfg.dim();
        let out = OutFormat::from_act_flags(ins.flags);
        let func = ins.act_fn();
        let lut = matches!(func, ActFn::Sigmoid | ActFn::Tanh).then(|| build_lut(func, out));
        let (scale, shift) = (self.regs.requant_scale, self.regs.requant_shift);
        let n = fp.act_rows;
        let mut values = Vec::with_capacity(n as usize * d);
        if let Some(src) = &fp.ub_read {
            let step = if out.wide { 2 } else { 1 };
            for r in 0..n {
                let row = self.read_ub_row(src.start + r * step, out.wide, out.signed, index)?;
                values.extend(row.into_iter().map(|v| activation_value(v, func, scale, shift, lut.as_ref())));
            }
        } else {
            let acc = fp.acc_read.clone().ok_or(ExecError::Malformed { index })?;
            if acc.end > u64::from(self.cfg.acc_entries) {
                return Err(ExecError::AccOutOfRange { index });
            }
            for r in acc {
                values.extend(
                    self.acc_row(r as usize)
                        .iter()
                        .map(|v| activation_value(i64::from(*v), func, scale, shift, lut.as_ref())),
                );
            }
        }
        if let Some(kind) = ins.pool_kind() {
            let g = self
                .regs
                .pool_geometry()
                .map_err(|reason| ExecError::InvalidPool { index, reason })?;
            let images = (n / g.in_pixels()) as usize;
            values = pool_rows(&values, d, images, &g, kind);
        }
        let dst = fp.ub_write.clone().ok_or(ExecError::Malformed { index })?;
        let step = if out.wide { 2 } else { 1 };
        for (k, chunk) in values.chunks(d).enumerate() {
            let sat: Vec<i64> = chunk.iter().map(|v| out.saturate(*v)).collect();
            self.write_ub_row(dst.start + k as u64 * step, &sat, out, index)?;
        }
        Ok(())
    }

    fn step(&mut self, index: usize, ins: &Instruction, host: &mut HostMemory) -> Result<u64, ExecError> {
        ins.check().map_err(|_| ExecError::Malformed { index })?;
        let cfg = self.cfg.clone();
        let rb = cfg.ub_row_bytes();
        let mut moved = 0u64;
        if ins.opcode == Opcode::SetConfig {
            let reg = ConfigReg::from_id(ins.flags).ok_or(ExecError::Malformed { index })?;
            self.regs.set(reg, ins.length);
            return Ok(0);
        }
        for iter in 0..ins.iterations() {
            let fp = ins.footprint(iter, &self.regs, &cfg).map_err(|reason| match ins.opcode {
                Opcode::Activate => ExecError::InvalidPool { index, reason },
                _ => ExecError::Geometry { index, reason },
            })?;
            match ins.opcode {
                Opcode::ReadHostMemory | Opcode::ReadHostMemoryAlt => {
                    if let (Some(h), Some(u)) = (fp.host_read.clone(), fp.ub_write.clone()) {
                        let data = host
                            .slice(h)
                            .ok_or(ExecError::AddressFault { index, space: "host memory" })?
                            .to_vec();
                        if !self.ub.write(u.start * rb, &data) {
                            return Err(ExecError::AddressFault { index, space: "unified buffer" });
                        }
                    }
                    moved += fp.dma_bytes;
                }
                Opcode::WriteHostMemory | Opcode::WriteHostMemoryAlt => {
                    if let (Some(h), Some(u)) = (fp.host_write.clone(), fp.ub_read.clone()) {
                        let data = self
                            .ub
                            .read_vec(u.start * rb, (h.end - h.start) as usize)
                            .ok_or(ExecError::AddressFault { index, space: "unified buffer" })?;
                        host.slice_mut(h)
                            .ok_or(ExecError::AddressFault { index, space: "host memory" })?
                            .copy_from_slice(&data);
                    }
                    moved += fp.dma_bytes;
                }
                Opcode::ReadWeights => {
                    let wide = ins.flags & rw_flags::WIDE != 0;
                    let tile = cfg.tile_bytes() * if wide { 2 } else { 1 };
                    if let Some(r) = &fp.wmem_read {
                        self.read_weights(r.start / tile, fp.tiles, wide, index)?;
                        moved += r.end - r.start;
                    }
                }
                Opcode::MatrixMultiply | Opcode::Convolve => {
                    let mode = DataMode::from_flags(ins.flags);
                    let acc = fp.acc_write.clone().ok_or(ExecError::Malformed { index })?;
                    if acc.end > u64::from(cfg.acc_entries) {
                        return Err(ExecError::AccOutOfRange { index });
                    }
                    if iter == 0 {
                        self.load_next_tile(index)?;
                    }
                    let ub = fp.ub_read.clone().ok_or(ExecError::Malformed { index })?;
                    let inputs = if ins.opcode == Opcode::Convolve {
                        let g = self
                            .regs
                            .conv_geometry()
                            .map_err(|reason| ExecError::Geometry { index, reason })?;
                        let (images, tap) = ins.conv_dims();
                        self.gather_conv_inputs(ub.start, u64::from(images), tap, &g, mode, index)?
                    } else {
                        let step = if mode.act16 { 2 } else { 1 };
                        (0..fp.matrix_rows)
                            .map(|b| self.read_ub_row(ub.start + b * step, mode.act16, mode.act_signed, index))
                            .collect::<Result<Vec<_>, _>>()?
                    };
                    let accumulate = ins.flags & mm_flags::ACCUMULATE != 0;
                    self.matrix_multiply(&inputs, acc.start, mode, accumulate, index)?;
                }
                Opcode::Activate => self.activate(ins, &fp, index)?,
                _ => {}
            }
        }
        Ok(moved)
    }
}

/// Runs `program` to Halt (or the end of the instruction stream).
pub fn execute(program: &Program, state: &mut TpuState, host: &mut HostMemory) -> Result<Vec<ExecEvent>, ExecError> {
    let mut events = Vec::with_capacity(program.len());
    for (index, ins) in program.instructions.iter().enumerate() {
        let bytes = state.step(index, ins, host)?;
        events.push(ExecEvent {
            index,
            opcode: ins.opcode.name().to_string(),
            ub_addr: ins.ub_addr,
            acc_addr: ins.acc_addr,
            iterations: ins.iterations(),
            bytes,
        });
        if ins.opcode == Opcode::Halt {
            break;
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{pack_dims16, pack_pool_window};

    fn cfg(dim: u32) -> TpuConfig {
        TpuConfig::small(dim)
    }

    fn signed8() -> u8 {
        mm_flags::ACT_SIGNED | mm_flags::WEIGHT_SIGNED
    }

    #[test]
    fn halt_leaves_state_unchanged() {
        let c = cfg(4);
        let mut s = TpuState::new(&c);
        let before = s.clone();
        let mut host = HostMemory::new(16);
        execute(&Program::new("h", vec![Instruction::halt()]), &mut s, &mut host).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn host_round_trip() {
        let c = cfg(4);
        let mut s = TpuState::new(&c);
        let mut host = HostMemory::from_bytes((0..40u8).collect());
        let orig = host.clone();
        let p = Program::new(
            "rt",
            vec![
                Instruction::set_config(ConfigReg::HostAddress, 3),
                Instruction::read_host(2, 13),
                Instruction::write_host(2, 13),
                Instruction::halt(),
            ],
        );
        execute(&p, &mut s, &mut host).unwrap();
        assert_eq!(host, orig);
    }

    fn two_by_two(flags: u8) -> (TpuState, Program) {
        let c = cfg(2);
        let mut s = TpuState::new(&c);
        s.wmem.write(0, &[5, 6, 7, 8]);
        let mut host = HostMemory::from_bytes(vec![1, 2, 3, 4]);
        let p = Program::new(
            "mm",
            vec![
                Instruction::read_host(0, 4),
                Instruction::read_weights(0, 1),
                Instruction::matmul(0, 0, 2, flags),
                Instruction::halt(),
            ],
        );
        execute(&p, &mut s, &mut host).unwrap();
        (s, p)
    }

    #[test]
    fn hand_gemm_2x2() {
        let (s, _) = two_by_two(signed8());
        assert_eq!(s.acc_row(0), &[19, 22]);
        assert_eq!(s.acc_row(1), &[43, 50]);
    }

    #[test]
    fn identity_tile_sign_extends() {
        let c = cfg(4);
        let mut s = TpuState::new(&c);
        let mut eye = vec![0u8; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1;
        }
        s.wmem.write(0, &eye);
        let mut host = HostMemory::from_bytes(vec![0xff, 0x80, 0x7f, 3]);
        let p = Program::new(
            "id",
            vec![
                Instruction::read_host(0, 4),
                Instruction::read_weights(0, 1),
                Instruction::matmul(0, 0, 1, signed8()),
                Instruction::halt(),
            ],
        );
        execute(&p, &mut s, &mut host).unwrap();
        assert_eq!(s.acc_row(0), &[-1, -128, 127, 3]);
    }

    #[test]
    fn all_ones_256() {
        let c = TpuConfig::default();
        let mut s = TpuState::new(&c);
        s.wmem.write(0, &vec![1u8; 65536]);
        let mut host = HostMemory::from_bytes(vec![1u8; 256]);
        let p = Program::new(
            "ones",
            vec![
                Instruction::read_host(0, 256),
                Instruction::read_weights(0, 1),
                Instruction::matmul(0, 0, 1, signed8()),
                Instruction::halt(),
            ],
        );
        let events = execute(&p, &mut s, &mut host).unwrap();
        assert!(s.acc_row(0).iter().all(|v| *v == 256));
        assert_eq!(events[1].bytes, 65536);
    }

    #[test]
    fn matmul_without_tile_underflows() {
        let c = cfg(2);
        let mut s = TpuState::new(&c);
        let mut host = HostMemory::from_bytes(vec![0; 4]);
        let p = Program::new("u", vec![Instruction::read_host(0, 4), Instruction::matmul(0, 0, 1, 0)]);
        assert_eq!(execute(&p, &mut s, &mut host), Err(ExecError::FifoUnderflow { index: 1 }));
    }

    #[test]
    fn fifo_holds_at_most_depth() {
        let c = TpuConfig {
            fifo_depth_tiles: 4,
            ..cfg(2)
        };
        let mut s = TpuState::new(&c);
        for t in 0..5u8 {
            s.wmem.write(u64::from(t) * 4, &[t + 1, 0, 0, 0]);
        }
        s.read_weights(0, 5, false, 0).unwrap();
        assert_eq!(s.wfifo.len(), 4);
        assert_eq!(s.pending.len(), 1);
        s.load_next_tile(0).unwrap();
        assert_eq!(s.active_tile.as_ref().unwrap().data[0], 1);
        assert_eq!(s.wfifo.len(), 4);
        assert!(s.pending.is_empty());
        assert_eq!(s.wfifo.back().unwrap().data[0], 5);
    }

    #[test]
    fn overflow_wraps_and_counts() {
        let c = cfg(2);
        let mut s = TpuState::new(&c);
        s.acc[0] = i32::MAX;
        s.active_tile = Some(WeightTile {
            data: vec![1, 0, 0, 0],
            wide: false,
        });
        let mode = DataMode::from_flags(signed8());
        s.matrix_multiply(&[vec![1, 0]], 0, mode, true, 0).unwrap();
        assert_eq!(s.acc[0], i32::MIN);
        assert_eq!(s.overflow_count, 1);
    }

    #[test]
    fn activation_functions() {
        assert_eq!(activation_value(-5, ActFn::Relu, 1, 0, None), 0);
        assert_eq!(activation_value(100, ActFn::Identity, 1, 0, None), 100);
        let u8fmt = OutFormat { wide: false, signed: false };
        let lut = build_lut(ActFn::Sigmoid, u8fmt);
        assert_eq!(activation_value(0, ActFn::Sigmoid, 1, 0, Some(&lut)), 128);
        assert_eq!(lut[127u8 as usize], 255);
        let t = build_lut(ActFn::Tanh, OutFormat { wide: false, signed: true });
        assert_eq!(t[0], 0);
        assert_eq!(t[0x80], -128);
    }

    #[test]
    fn requant_rounding() {
        assert_eq!(requantize(3, 1, 1), 2);
        assert_eq!(requantize(-3, 1, 1), -2);
        assert_eq!(requantize(5, 3, 2), 4);
        assert_eq!(requantize(-1, 1, 2), 0);
        assert_eq!(requantize(-2, 1, 2), -1);
    }

    #[test]
    fn activate_relu_saturates() {
        let (mut s, _) = two_by_two(signed8());
        let mut host = HostMemory::new(8);
        let p = Program::new(
            "a",
            vec![
                Instruction::set_config(ConfigReg::RequantScale, 4),
                Instruction::activate(0, 10, 2, ActFn::Relu, 0),
                Instruction::set_config(ConfigReg::HostAddress, 0),
                Instruction::write_host(10, 4),
                Instruction::halt(),
            ],
        );
        execute(&p, &mut s, &mut host).unwrap();
        assert_eq!(&host.bytes[..4], &[76, 88, 127, 127]);
    }

    #[test]
    fn max_pool_over_rows() {
        let c = cfg(2);
        let mut s = TpuState::new(&c);
        // one 2x2 image, two lanes
        let img: Vec<u8> = vec![1, 9, 4, 2, 3, 7, 2, 1];
        let mut host = HostMemory::from_bytes([img, vec![0; 2]].concat());
        let p = Program::new(
            "pool",
            vec![
                Instruction::read_host(0, 8),
                Instruction::set_config(ConfigReg::UbSource, 0),
                Instruction::set_config(ConfigReg::PoolWindow, pack_pool_window(2, 2, 0)),
                Instruction::set_config(ConfigReg::PoolImage, pack_dims16(2, 2)),
                Instruction::activate(0, 8, 4, ActFn::Identity, act_flags::SRC_UB | (1 << act_flags::POOL_SHIFT)),
                Instruction::set_config(ConfigReg::HostAddress, 8),
                Instruction::write_host(8, 2),
                Instruction::halt(),
            ],
        );
        execute(&p, &mut s, &mut host).unwrap();
        assert_eq!(&host.bytes[8..], &[4, 9]);
    }

    #[test]
    fn bad_pool_window_is_error() {
        let c = cfg(2);
        let mut s = TpuState::new(&c);
        let mut host = HostMemory::from_bytes(vec![0; 8]);
        let p = Program::new(
            "pool",
            vec![
                Instruction::read_host(0, 8),
                Instruction::set_config(ConfigReg::PoolWindow, pack_pool_window(0, 1, 0)),
                Instruction::set_config(ConfigReg::PoolImage, pack_dims16(2, 2)),
                Instruction::activate(0, 8, 4, ActFn::Identity, act_flags::SRC_UB | (2 << act_flags::POOL_SHIFT)),
            ],
        );
        assert!(matches!(execute(&p, &mut s, &mut host), Err(ExecError::InvalidPool { .. })));
    }

    #[test]
    fn speed_factors() {
        let m = |a, w| DataMode {
            act16: a,
            weight16: w,
            act_signed: true,
            weight_signed: true,
        };
        assert_eq!(m(false, false).speed_factor(), 1.0);
        assert_eq!(m(true, false).speed_factor(), 0.5);
        assert_eq!(m(false, true).speed_factor(), 0.5);
        assert_eq!(m(true, true).speed_factor(), 0.25);
    }

    #[test]
    fn byte_store_pages() {
        let mut b = ByteStore::new(3 * PAGE);
        assert!(b.write(PAGE - 2, &[1, 2, 3, 4]));
        assert_eq!(b.read_vec(PAGE - 3, 6).unwrap(), vec![0, 1, 2, 3, 4, 0]);
        assert!(!b.write(3 * PAGE - 1, &[1, 2]));
        assert!(b.read_vec(3 * PAGE, 1).is_none());
    }
}
