//! The CISC instruction set: opcodes, the fixed 12-byte frame, the program
//! container with its binary format, and static validation.
//!
//! Frame layout (little-endian):
//!
//! | byte  | field                                   |
//! |-------|-----------------------------------------|
//! | 0     | opcode                                  |
//! | 1     | flags (meaning depends on the opcode)   |
//! | 2..5  | Unified Buffer row address (24 bits)    |
//! | 5..7  | accumulator row address (16 bits)       |
//! | 7..11 | length (32 bits, or two 16-bit dims)    |
//! | 11    | repeat (extra iterations)               |

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archconfig::TpuConfig;

pub const FRAME_BYTES: usize = 12;
pub const MAX_UB_ADDR: u32 = (1 << 24) - 1;

pub const PROGRAM_MAGIC: &[u8; 4] = b"TPUP";
pub const PROGRAM_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Nop,
    ReadHostMemory,
    ReadWeights,
    MatrixMultiply,
    /// Shares MatrixMultiply's opcode byte with [`mm_flags::CONVOLVE`] set.
    Convolve,
    Activate,
    WriteHostMemory,
    ReadHostMemoryAlt,
    WriteHostMemoryAlt,
    SetConfig,
    SyncA,
    SyncB,
    InterruptHost,
    DebugTag,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 15] = [
        Opcode::Nop,
        Opcode::ReadHostMemory,
        Opcode::ReadWeights,
        Opcode::MatrixMultiply,
        Opcode::Convolve,
        Opcode::Activate,
        Opcode::WriteHostMemory,
        Opcode::ReadHostMemoryAlt,
        Opcode::WriteHostMemoryAlt,
        Opcode::SetConfig,
        Opcode::SyncA,
        Opcode::SyncB,
        Opcode::InterruptHost,
        Opcode::DebugTag,
        Opcode::Halt,
    ];

    pub fn byte(self) -> u8 {
        match self {
            Opcode::Nop => 0x00,
            Opcode::ReadHostMemory => 0x01,
            Opcode::ReadWeights => 0x02,
            Opcode::MatrixMultiply | Opcode::Convolve => 0x03,
            Opcode::Activate => 0x04,
            Opcode::WriteHostMemory => 0x05,
            Opcode::ReadHostMemoryAlt => 0x06,
            Opcode::WriteHostMemoryAlt => 0x07,
            Opcode::SetConfig => 0x08,
            Opcode::SyncA => 0x09,
            Opcode::SyncB => 0x0a,
            Opcode::InterruptHost => 0x0b,
            Opcode::DebugTag => 0x0c,
            Opcode::Halt => 0x0f,
        }
    }

    /// Flag bits an instruction of this opcode may carry.
    pub fn allowed_flags(self) -> u8 {
        match self {
            Opcode::MatrixMultiply | Opcode::Convolve => mm_flags::MASK,
            Opcode::Activate => act_flags::MASK,
            Opcode::ReadWeights => rw_flags::WIDE,
            Opcode::SetConfig => 0x07,
            _ => 0,
        }
    }

    pub fn is_host_read(self) -> bool {
        matches!(self, Opcode::ReadHostMemory | Opcode::ReadHostMemoryAlt)
    }

    pub fn is_host_write(self) -> bool {
        matches!(self, Opcode::WriteHostMemory | Opcode::WriteHostMemoryAlt)
    }

    pub fn is_matrix(self) -> bool {
        matches!(self, Opcode::MatrixMultiply | Opcode::Convolve)
    }

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Nop => "nop",
            Opcode::ReadHostMemory => "read_host_memory",
            Opcode::ReadWeights => "read_weights",
            Opcode::MatrixMultiply => "matrix_multiply",
            Opcode::Convolve => "convolve",
            Opcode::Activate => "activate",
            Opcode::WriteHostMemory => "write_host_memory",
            Opcode::ReadHostMemoryAlt => "read_host_memory_alt",
            Opcode::WriteHostMemoryAlt => "write_host_memory_alt",
            Opcode::SetConfig => "set_config",
            Opcode::SyncA => "sync_a",
            Opcode::SyncB => "sync_b",
            Opcode::InterruptHost => "interrupt_host",
            Opcode::DebugTag => "debug_tag",
            Opcode::Halt => "halt",
        }
    }
}

/// MatrixMultiply / Convolve flag bits.
pub mod mm_flags {
    /// Add into the accumulators instead of overwriting them.
    pub const ACCUMULATE: u8 = 1 << 0;
    /// Activations are 16-bit.
    pub const ACT16: u8 = 1 << 1;
    /// Weights are 16-bit.
    pub const WEIGHT16: u8 = 1 << 2;
    pub const ACT_SIGNED: u8 = 1 << 3;
    pub const WEIGHT_SIGNED: u8 = 1 << 4;
    /// Encoding-only bit that distinguishes Convolve.
    pub const CONVOLVE: u8 = 1 << 5;
    pub const MASK: u8 = 0x1f;
}

/// Activate flag bits.
pub mod act_flags {
    /// Bits 0-1: 0 identity, 1 ReLU, 2 sigmoid, 3 tanh.
    pub const FN_MASK: u8 = 0x03;
    /// Bits 2-3: 0 none, 1 max, 2 average; 3 is reserved.
    pub const POOL_SHIFT: u8 = 2;
    pub const POOL_MASK: u8 = 0x0c;
    pub const OUT16: u8 = 1 << 4;
    pub const OUT_UNSIGNED: u8 = 1 << 5;
    /// Read the input from the Unified Buffer (row address held in the
    /// `UbSource` register) rather than the accumulators.
    pub const SRC_UB: u8 = 1 << 6;
    pub const MASK: u8 = 0x7f;
}

/// ReadWeights flag bits.
pub mod rw_flags {
    /// Tiles hold 16-bit weights (twice the bytes).
    pub const WIDE: u8 = 1 << 0;
}

/// Registers written by SetConfig; the register id travels in the flags byte
/// and the value in the length field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfigReg {
    /// Requantization multiplier (two's complement 32-bit).
    RequantScale = 0,
    /// Requantization right shift, 0..=62.
    RequantShift = 1,
    /// Host byte address used by the next host DMA.
    HostAddress = 2,
    /// Pool window: bits 0-7 size, 8-15 stride, 16-23 padding.
    PoolWindow = 3,
    /// Pool input image: low 16 bits height, high 16 bits width.
    PoolImage = 4,
    /// Convolution input image: low 16 bits height, high 16 bits width.
    ConvImage = 5,
    /// Convolution kernel: bits 0-7 rows, 8-15 cols, 16-23 stride, 24-31 padding.
    ConvKernel = 6,
    /// Unified Buffer source row for Activate in buffer-source mode.
    UbSource = 7,
}

impl ConfigReg {
    pub fn from_id(id: u8) -> Option<ConfigReg> {
        Some(match id {
            0 => ConfigReg::RequantScale,
            1 => ConfigReg::RequantShift,
            2 => ConfigReg::HostAddress,
            3 => ConfigReg::PoolWindow,
            4 => ConfigReg::PoolImage,
            5 => ConfigReg::ConvImage,
            6 => ConfigReg::ConvKernel,
            7 => ConfigReg::UbSource,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActFn {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl ActFn {
    pub fn code(self) -> u8 {
        match self {
            ActFn::Identity => 0,
            ActFn::Relu => 1,
            ActFn::Sigmoid => 2,
            ActFn::Tanh => 3,
        }
    }

    pub fn from_code(code: u8) -> ActFn {
        match code & act_flags::FN_MASK {
            0 => ActFn::Identity,
            1 => ActFn::Relu,
            2 => ActFn::Sigmoid,
            _ => ActFn::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

impl PoolKind {
    /// Activate flag bits selecting this pooling mode.
    pub fn flag_bits(self) -> u8 {
        let code = match self {
            PoolKind::Max => 1,
            PoolKind::Avg => 2,
        };
        code << act_flags::POOL_SHIFT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    pub flags: u8,
    pub ub_addr: u32,
    pub acc_addr: u16,
    pub length: u32,
    pub repeat: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("ub_addr {0:#x} exceeds 24 bits")]
    UbAddrOverflow(u32),
    #[error("flags {flags:#04x} not valid for {opcode:?}")]
    InvalidFlags { opcode: Opcode, flags: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown opcode byte {0:#04x}")]
    UnknownOpcode(u8),
    #[error("reserved flag bits set: {flags:#04x} for opcode byte {opcode:#04x}")]
    ReservedFlagSet { opcode: u8, flags: u8 },
}

impl Instruction {
    pub fn new(opcode: Opcode) -> Self {
        Instruction {
            opcode,
            flags: 0,
            ub_addr: 0,
            acc_addr: 0,
            length: 0,
            repeat: 0,
        }
    }

    pub fn nop() -> Self {
        Self::new(Opcode::Nop)
    }

    pub fn halt() -> Self {
        Self::new(Opcode::Halt)
    }

    pub fn read_host(ub_row: u32, bytes: u32) -> Self {
        Instruction {
            ub_addr: ub_row,
            length: bytes,
            ..Self::new(Opcode::ReadHostMemory)
        }
    }

    pub fn write_host(ub_row: u32, bytes: u32) -> Self {
        Instruction {
            ub_addr: ub_row,
            length: bytes,
            ..Self::new(Opcode::WriteHostMemory)
        }
    }

    /// Queues `n_tiles` tiles starting at tile index `wmem_tile`.
    pub fn read_weights(wmem_tile: u32, n_tiles: u32) -> Self {
        Instruction {
            ub_addr: wmem_tile,
            length: n_tiles,
            ..Self::new(Opcode::ReadWeights)
        }
    }

    pub fn matmul(ub_row: u32, acc_row: u16, rows: u32, flags: u8) -> Self {
        Instruction {
            flags,
            ub_addr: ub_row,
            acc_addr: acc_row,
            length: rows,
            ..Self::new(Opcode::MatrixMultiply)
        }
    }

    /// Convolution over `images` input images for kernel tap `tap`
    /// (row-major index into the kernel window).
    pub fn convolve(ub_row: u32, acc_row: u16, images: u16, tap: u16, flags: u8) -> Self {
        Instruction {
            flags,
            ub_addr: ub_row,
            acc_addr: acc_row,
            length: u32::from(images) | (u32::from(tap) << 16),
            ..Self::new(Opcode::Convolve)
        }
    }

    pub fn activate(acc_row: u16, ub_row: u32, rows: u32, func: ActFn, flags: u8) -> Self {
        Instruction {
            flags: (flags & !act_flags::FN_MASK) | func.code(),
            ub_addr: ub_row,
            acc_addr: acc_row,
            length: rows,
            ..Self::new(Opcode::Activate)
        }
    }

    pub fn set_config(reg: ConfigReg, value: u32) -> Self {
        Instruction {
            flags: reg as u8,
            length: value,
            ..Self::new(Opcode::SetConfig)
        }
    }

    pub fn with_repeat(mut self, repeat: u8) -> Self {
        self.repeat = repeat;
        self
    }

    /// Number of times the instruction executes.
    pub fn iterations(&self) -> u32 {
        u32::from(self.repeat) + 1
    }

    /// Conv length field split into (images, tap).
    pub fn conv_dims(&self) -> (u32, u32) {
        (self.length & 0xffff, self.length >> 16)
    }

    pub fn act_fn(&self) -> ActFn {
        ActFn::from_code(self.flags)
    }

    pub fn pool_kind(&self) -> Option<PoolKind> {
        match (self.flags & act_flags::POOL_MASK) >> act_flags::POOL_SHIFT {
            1 => Some(PoolKind::Max),
            2 => Some(PoolKind::Avg),
            _ => None,
        }
    }

    pub fn check(&self) -> Result<(), EncodeError> {
        if self.ub_addr > MAX_UB_ADDR {
            return Err(EncodeError::UbAddrOverflow(self.ub_addr));
        }
        let bad_flags = self.flags & !self.opcode.allowed_flags() != 0
            || (self.opcode == Opcode::Activate
                && (self.flags & act_flags::POOL_MASK) == act_flags::POOL_MASK);
        if bad_flags {
            return Err(EncodeError::InvalidFlags {
                opcode: self.opcode,
                flags: self.flags,
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u8; FRAME_BYTES], EncodeError> {
        self.check()?;
        let mut f = [0u8; FRAME_BYTES];
        f[0] = self.opcode.byte();
        f[1] = if self.opcode == Opcode::Convolve {
            self.flags | mm_flags::CONVOLVE
        } else {
            self.flags
        };
        f[2..5].copy_from_slice(&self.ub_addr.to_le_bytes()[..3]);
        f[5..7].copy_from_slice(&self.acc_addr.to_le_bytes());
        f[7..11].copy_from_slice(&self.length.to_le_bytes());
        f[11] = self.repeat;
        Ok(f)
    }

    pub fn decode(frame: &[u8; FRAME_BYTES]) -> Result<Instruction, DecodeError> {
        let op_byte = frame[0];
        let raw_flags = frame[1];
        let mut flags = raw_flags;
        let opcode = match op_byte {
            0x03 if raw_flags & mm_flags::CONVOLVE != 0 => {
                flags &= !mm_flags::CONVOLVE;
                Opcode::Convolve
            }
            b => *Opcode::ALL
                .iter()
                .find(|o| **o != Opcode::Convolve && o.byte() == b)
                .ok_or(DecodeError::UnknownOpcode(b))?,
        };
        let instr = Instruction {
            opcode,
            flags,
            ub_addr: u32::from_le_bytes([frame[2], frame[3], frame[4], 0]),
            acc_addr: u16::from_le_bytes([frame[5], frame[6]]),
            length: u32::from_le_bytes([frame[7], frame[8], frame[9], frame[10]]),
            repeat: frame[11],
        };
        instr.check().map_err(|_| DecodeError::ReservedFlagSet {
            opcode: op_byte,
            flags: raw_flags,
        })?;
        Ok(instr)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} flags={:#04x} ub={:#08x} acc={:#06x} len={}",
            self.opcode.name(),
            self.flags,
            self.ub_addr,
            self.acc_addr,
            self.length
        )?;
        if self.repeat > 0 {
            write!(f, " x{}", self.iterations())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProgramMeta {
    pub name: String,
    /// Hash of the configuration the program was compiled for.
    pub config_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Program {
    pub meta: ProgramMeta,
    pub instructions: Vec<Instruction>,
}

#[derive(Debug, Error)]
pub enum ProgramFormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: DecodeError,
    },
    #[error("instruction {index}: {source}")]
    Encode {
        index: usize,
        #[source]
        source: EncodeError,
    },
}

impl Program {
    pub fn new(name: impl Into<String>, instructions: Vec<Instruction>) -> Self {
        Program {
            meta: ProgramMeta {
                name: name.into(),
                config_hash: 0,
            },
            instructions,
        }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ProgramFormatError> {
        let mut out = Vec::with_capacity(10 + self.len() * FRAME_BYTES);
        out.extend_from_slice(PROGRAM_MAGIC);
        out.extend_from_slice(&PROGRAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (index, instr) in self.instructions.iter().enumerate() {
            let frame = instr
                .encode()
                .map_err(|source| ProgramFormatError::Encode { index, source })?;
            out.extend_from_slice(&frame);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Program, ProgramFormatError> {
        if bytes.len() < 10 {
            return Err(ProgramFormatError::Truncated {
                expected: 10,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != PROGRAM_MAGIC {
            return Err(ProgramFormatError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PROGRAM_VERSION {
            return Err(ProgramFormatError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let expected = count
            .checked_mul(FRAME_BYTES)
            .and_then(|n| n.checked_add(10))
            .unwrap_or(usize::MAX);
        if bytes.len() != expected {
            return Err(ProgramFormatError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let instructions = bytes[10..]
            .chunks_exact(FRAME_BYTES)
            .enumerate()
            .map(|(index, chunk)| {
                let frame: &[u8; FRAME_BYTES] = chunk.try_into().expect("exact chunk");
                Instruction::decode(frame).map_err(|source| ProgramFormatError::Frame { index, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Program {
            meta: ProgramMeta::default(),
            instructions,
        })
    }

    /// Debug listing, one instruction per line.
    pub fn listing(&self) -> String {
        self.instructions
            .iter()
            .enumerate()
            .map(|(i, ins)| format!("{i:6}: {ins}\n"))
            .collect()
    }
}

/// Stable FNV-1a hash of a configuration's JSON form.
pub fn config_hash(cfg: &TpuConfig) -> u64 {
    let text = serde_json::to_string(cfg).expect("config serializes");
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

// ---------------------------------------------------------------------------
// Static validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Diagnostic {
    MissingHalt,
    InstructionAfterHalt { index: usize },
    InvalidFlags { index: usize },
    UbOutOfRange { index: usize },
    AccOutOfRange { index: usize },
    WeightMemOutOfRange { index: usize },
    /// Activate reads accumulator rows that no earlier instruction wrote.
    AccReadBeforeWrite { index: usize },
    /// A matrix operation or host write reads buffer rows never written.
    UbReadBeforeWrite { index: usize },
    /// A matrix operation has no weight tile queued for it.
    FifoUnderflow { index: usize },
    /// Register contents make the instruction's shape meaningless.
    BadGeometry { index: usize, reason: String },
}

/// Mirror of the SetConfig registers, shared by the functional and timing
/// models and the validator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Registers {
    pub requant_scale: i32,
    pub requant_shift: u32,
    pub host_addr: u32,
    pub pool_window: u32,
    pub pool_image: u32,
    pub conv_image: u32,
    pub conv_kernel: u32,
    pub ub_source: u32,
}

impl Registers {
    pub fn new() -> Self {
        Registers {
            requant_scale: 1,
            ..Default::default()
        }
    }

    pub fn set(&mut self, reg: ConfigReg, value: u32) {
        match reg {
            ConfigReg::RequantScale => self.requant_scale = value as i32,
            ConfigReg::RequantShift => self.requant_shift = value,
            ConfigReg::HostAddress => self.host_addr = value,
            ConfigReg::PoolWindow => self.pool_window = value,
            ConfigReg::PoolImage => self.pool_image = value,
            ConfigReg::ConvImage => self.conv_image = value,
            ConfigReg::ConvKernel => self.conv_kernel = value,
            ConfigReg::UbSource => self.ub_source = value,
        }
    }

    pub fn conv_geometry(&self) -> Result<ConvGeometry, String> {
        ConvGeometry::new(
            self.conv_image & 0xffff,
            self.conv_image >> 16,
            self.conv_kernel & 0xff,
            (self.conv_kernel >> 8) & 0xff,
            (self.conv_kernel >> 16) & 0xff,
            self.conv_kernel >> 24,
        )
    }

    pub fn pool_geometry(&self) -> Result<ConvGeometry, String> {
        let k = self.pool_window & 0xff;
        ConvGeometry::new(
            self.pool_image & 0xffff,
            self.pool_image >> 16,
            k,
            k,
            (self.pool_window >> 8) & 0xff,
            (self.pool_window >> 16) & 0xff,
        )
    }
}

pub fn pack_dims16(a: u32, b: u32) -> u32 {
    (a & 0xffff) | (b << 16)
}

pub fn pack_conv_kernel(r: u32, s: u32, stride: u32, pad: u32) -> u32 {
    (r & 0xff) | ((s & 0xff) << 8) | ((stride & 0xff) << 16) | ((pad & 0xff) << 24)
}

pub fn pack_pool_window(k: u32, stride: u32, pad: u32) -> u32 {
    (k & 0xff) | ((stride & 0xff) << 8) | ((pad & 0xff) << 16)
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub h: u32,
    pub w: u32,
    pub r: u32,
    pub s: u32,
    pub stride: u32,
    pub pad: u32,
}

impl ConvGeometry {
    pub fn new(h: u32, w: u32, r: u32, s: u32, stride: u32, pad: u32) -> Result<Self, String> {
        if h == 0 || w == 0 {
            return Err("image dims must be positive".into());
        }
        if r == 0 || s == 0 || stride == 0 {
            return Err("window and stride must be positive".into());
        }
        if pad >= r || pad >= s {
            return Err("padding must be smaller than the window".into());
        }
        if r > h + 2 * pad || s > w + 2 * pad {
            return Err("window larger than padded image".into());
        }
        Ok(ConvGeometry {
            h,
            w,
            r,
            s,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> u32 {
        (self.h + 2 * self.pad - self.r) / self.stride + 1
    }

    pub fn out_w(&self) -> u32 {
        (self.w + 2 * self.pad - self.s) / self.stride + 1
    }

    pub fn in_pixels(&self) -> u64 {
        u64::from(self.h) * u64::from(self.w)
    }

    pub fn out_pixels(&self) -> u64 {
        u64::from(self.out_h()) * u64::from(self.out_w())
    }

    pub fn taps(&self) -> u32 {
        self.r * self.s
    }

    /// Input pixel feeding output pixel (oh, ow) through tap (dr, ds), or
    /// `None` for the zero padding.
    pub fn source(&self, oh: u32, ow: u32, dr: u32, ds: u32) -> Option<(u32, u32)> {
        let ih = (oh * self.stride + dr) as i64 - self.pad as i64;
        let iw = (ow * self.stride + ds) as i64 - self.pad as i64;
        if ih < 0 || iw < 0 || ih >= self.h as i64 || iw >= self.w as i64 {
            None
        } else {
            Some((ih as u32, iw as u32))
        }
    }
}

/// Half-open row interval.
pub type Rows = std::ops::Range<u64>;

/// Memory regions one iteration of an instruction touches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Footprint {
    pub ub_read: Option<Rows>,
    pub ub_write: Option<Rows>,
    pub acc_read: Option<Rows>,
    pub acc_write: Option<Rows>,
    /// Byte range in host memory.
    pub host_read: Option<Rows>,
    pub host_write: Option<Rows>,
    /// Weight Memory byte range.
    pub wmem_read: Option<Rows>,
    /// Matrix-unit rows processed (one per cycle at full speed).
    pub matrix_rows: u64,
    /// Activation-unit input rows.
    pub act_rows: u64,
    /// Bytes moved over the host link.
    pub dma_bytes: u64,
    pub tiles: u64,
}

/// Rows a 16-bit element vector occupies per logical row.
fn row_scale(wide: bool) -> u64 {
    if wide {
        2
    } else {
        1
    }
}

impl Instruction {
    /// Footprint of iteration `iter` given the current register file.
    pub fn footprint(&self, iter: u32, regs: &Registers, cfg: &TpuConfig) -> Result<Footprint, String> {
        let row_bytes = cfg.ub_row_bytes();
        let it = u64::from(iter);
        let mut fp = Footprint::default();
        match self.opcode {
            Opcode::ReadHostMemory | Opcode::ReadHostMemoryAlt | Opcode::WriteHostMemory | Opcode::WriteHostMemoryAlt => {
                let bytes = u64::from(self.length);
                let rows = bytes.div_ceil(row_bytes);
                let ub0 = u64::from(self.ub_addr) + it * rows;
                let host0 = u64::from(regs.host_addr) + it * bytes;
                if bytes > 0 {
                    if self.opcode.is_host_read() {
                        fp.ub_write = Some(ub0..ub0 + rows);
                        fp.host_read = Some(host0..host0 + bytes);
                    } else {
                        fp.ub_read = Some(ub0..ub0 + rows);
                        fp.host_write = Some(host0..host0 + bytes);
                    }
                }
                fp.dma_bytes = bytes;
            }
            Opcode::ReadWeights => {
                let tile = cfg.tile_bytes() * row_scale(self.flags & rw_flags::WIDE != 0);
                let n = u64::from(self.length);
                let first = u64::from(self.ub_addr) + it * n;
                if n > 0 {
                    fp.wmem_read = Some(first * tile..(first + n) * tile);
                }
                fp.tiles = n;
            }
            Opcode::MatrixMultiply => {
                let b = u64::from(self.length);
                if b == 0 {
                    return Err("matrix multiply of zero rows".into());
                }
                let scale = row_scale(self.flags & mm_flags::ACT16 != 0);
                let ub0 = u64::from(self.ub_addr) + it * b * scale;
                let acc0 = u64::from(self.acc_addr) + it * b;
                fp.ub_read = Some(ub0..ub0 + b * scale);
                fp.acc_write = Some(acc0..acc0 + b);
                fp.matrix_rows = b;
                fp.tiles = u64::from(iter == 0);
            }
            Opcode::Convolve => {
                let g = regs.conv_geometry()?;
                let (images, tap) = self.conv_dims();
                if images == 0 {
                    return Err("convolution over zero images".into());
                }
                if tap >= g.taps() {
                    return Err(format!("tap {tap} outside {}x{} kernel", g.r, g.s));
                }
                let scale = row_scale(self.flags & mm_flags::ACT16 != 0);
                let in_rows = u64::from(images) * g.in_pixels();
                let out_rows = u64::from(images) * g.out_pixels();
                let ub0 = u64::from(self.ub_addr) + it * in_rows * scale;
                let acc0 = u64::from(self.acc_addr) + it * out_rows;
                fp.ub_read = Some(ub0..ub0 + in_rows * scale);
                fp.acc_write = Some(acc0..acc0 + out_rows);
                fp.matrix_rows = out_rows;
                fp.tiles = u64::from(iter == 0);
            }
            Opcode::Activate => {
                let b = u64::from(self.length);
                if b == 0 {
                    return Err("activate of zero rows".into());
                }
                let out_rows = match self.pool_kind() {
                    None => b,
                    Some(_) => {
                        let g = regs.pool_geometry()?;
                        if b % g.in_pixels() != 0 {
                            return Err("pooled rows are not a whole number of images".into());
                        }
                        b / g.in_pixels() * g.out_pixels()
                    }
                };
                let out_scale = row_scale(self.flags & act_flags::OUT16 != 0);
                if self.flags & act_flags::SRC_UB != 0 {
                    let src0 = u64::from(regs.ub_source) + it * b * out_scale;
                    fp.ub_read = Some(src0..src0 + b * out_scale);
                } else {
                    let acc0 = u64::from(self.acc_addr) + it * b;
                    fp.acc_read = Some(acc0..acc0 + b);
                }
                let ub0 = u64::from(self.ub_addr) + it * out_rows * out_scale;
                fp.ub_write = Some(ub0..ub0 + out_rows * out_scale);
                fp.act_rows = b;
            }
            _ => {}
        }
        Ok(fp)
    }
}

fn covered(bits: &[bool], r: &Rows) -> bool {
    bits[r.start as usize..r.end as usize].iter().all(|b| *b)
}

fn mark(bits: &mut [bool], r: &Rows) {
    bits[r.start as usize..r.end as usize].iter_mut().for_each(|b| *b = true);
}

/// Statically checks `program` against `cfg`. Host-memory bounds depend on
/// the host buffer and are checked at execution time.
pub fn validate(program: &Program, cfg: &TpuConfig) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let ub_rows = cfg.ub_rows();
    let acc_rows = u64::from(cfg.acc_entries);
    let mut ub_written = vec![false; ub_rows as usize];
    let mut acc_written = vec![false; acc_rows as usize];
    let mut regs = Registers::new();
    let mut queued_tiles: u64 = 0;
    let mut halted = false;

    for (index, ins) in program.instructions.iter().enumerate() {
        if halted {
            diags.push(Diagnostic::InstructionAfterHalt { index });
            continue;
        }
        if ins.check().is_err() {
            diags.push(Diagnostic::InvalidFlags { index });
            continue;
        }
        match ins.opcode {
            Opcode::Halt => {
                halted = true;
                continue;
            }
            Opcode::SetConfig => {
                if let Some(reg) = ConfigReg::from_id(ins.flags) {
                    regs.set(reg, ins.length);
                }
                continue;
            }
            _ => {}
        }
        if ins.opcode.is_matrix() && u64::from(ins.acc_addr) >= acc_rows {
            diags.push(Diagnostic::AccOutOfRange { index });
            continue;
        }
        if ins.opcode == Opcode::Convolve {
            if let Err(reason) = regs.conv_geometry() {
                diags.push(Diagnostic::BadGeometry { index, reason });
                continue;
            }
        }
        for iter in 0..ins.iterations() {
            let fp = match ins.footprint(iter, &regs, cfg) {
                Ok(fp) => fp,
                Err(reason) => {
                    diags.push(Diagnostic::BadGeometry { index, reason });
                    break;
                }
            };
            let ub_ok = |r: &Option<Rows>| r.as_ref().is_none_or(|r| r.end <= ub_rows);
            let acc_ok = |r: &Option<Rows>| r.as_ref().is_none_or(|r| r.end <= acc_rows);
            if !ub_ok(&fp.ub_read) || !ub_ok(&fp.ub_write) {
                diags.push(Diagnostic::UbOutOfRange { index });
                break;
            }
            if !acc_ok(&fp.acc_read) || !acc_ok(&fp.acc_write) {
                diags.push(Diagnostic::AccOutOfRange { index });
                break;
            }
            if fp.wmem_read.as_ref().is_some_and(|r| r.end > cfg.weight_mem_bytes) {
                diags.push(Diagnostic::WeightMemOutOfRange { index });
                break;
            }
            if let Some(r) = &fp.ub_read {
                if !covered(&ub_written, r) {
                    diags.push(Diagnostic::UbReadBeforeWrite { index });
                    break;
                }
            }
            if let Some(r) = &fp.acc_read {
                if !covered(&acc_written, r) {
                    diags.push(Diagnostic::AccReadBeforeWrite { index });
                    break;
                }
            }
            if ins.opcode == Opcode::ReadWeights {
                queued_tiles += fp.tiles;
            } else if fp.tiles > 0 {
                if queued_tiles == 0 {
                    diags.push(Diagnostic::FifoUnderflow { index });
                    break;
                }
                queued_tiles -= 1;
            }
            if let Some(r) = &fp.ub_write {
                mark(&mut ub_written, r);
            }
            if let Some(r) = &fp.acc_write {
                mark(&mut acc_written, r);
            }
        }
    }
    if !halted {
        diags.push(Diagnostic::MissingHalt);
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Byte layout written out by hand, independent of `encode`.
    fn oracle_frame(op: u8, flags: u8, ub: u32, acc: u16, len: u32, rep: u8) -> [u8; 12] {
        [
            op,
            flags,
            (ub & 0xff) as u8,
            ((ub >> 8) & 0xff) as u8,
            ((ub >> 16) & 0xff) as u8,
            (acc & 0xff) as u8,
            (acc >> 8) as u8,
            (len & 0xff) as u8,
            ((len >> 8) & 0xff) as u8,
            ((len >> 16) & 0xff) as u8,
            (len >> 24) as u8,
            rep,
        ]
    }

    #[test]
    fn nop_is_zero_frame() {
        assert_eq!(Instruction::nop().encode().unwrap(), [0u8; 12]);
    }

    #[test]
    fn matmul_layout_matches_oracle() {
        let ins = Instruction::matmul(1, 2, 300, 0);
        let frame = ins.encode().unwrap();
        assert_eq!(frame, oracle_frame(0x03, 0, 1, 2, 300, 0));
        assert_eq!(&frame[2..5], &[1, 0, 0]);
        assert_eq!(&frame[5..7], &[2, 0]);
        assert_eq!(&frame[7..11], &[44, 1, 0, 0]);
    }

    #[test]
    fn convolve_sets_flag_bit() {
        let ins = Instruction::convolve(7, 3, 8, 4, mm_flags::ACCUMULATE);
        let frame = ins.encode().unwrap();
        assert_eq!(frame, oracle_frame(0x03, 0x21, 7, 3, 8 | (4 << 16), 0));
        assert_eq!(Instruction::decode(&frame).unwrap(), ins);
    }

    #[test]
    fn ub_overflow_rejected() {
        let ins = Instruction::read_host(1 << 24, 4);
        assert_eq!(ins.encode(), Err(EncodeError::UbAddrOverflow(1 << 24)));
    }

    #[test]
    fn unknown_opcode() {
        let mut f = [0u8; 12];
        f[0] = 0xff;
        assert_eq!(Instruction::decode(&f), Err(DecodeError::UnknownOpcode(0xff)));
    }

    #[test]
    fn reserved_flags() {
        let f = oracle_frame(0x03, 0x80, 0, 0, 1, 0);
        assert!(matches!(Instruction::decode(&f), Err(DecodeError::ReservedFlagSet { .. })));
        let f = oracle_frame(0x04, act_flags::POOL_MASK, 0, 0, 1, 0);
        assert!(matches!(Instruction::decode(&f), Err(DecodeError::ReservedFlagSet { .. })));
        let f = oracle_frame(0x00, 0x01, 0, 0, 0, 0);
        assert!(matches!(Instruction::decode(&f), Err(DecodeError::ReservedFlagSet { .. })));
    }

    #[test]
    fn distinct_opcode_bytes() {
        let mut bytes: Vec<u8> = Opcode::ALL
            .iter()
            .filter(|o| **o != Opcode::Convolve)
            .map(|o| o.byte())
            .collect();
        bytes.sort();
        bytes.dedup();
        assert_eq!(bytes.len(), Opcode::ALL.len() - 1);
    }

    #[test]
    fn program_binary_round_trip() {
        let p = Program::new(
            "t",
            vec![
                Instruction::read_host(0, 256),
                Instruction::matmul(0, 0, 1, 0).with_repeat(3),
                Instruction::halt(),
            ],
        );
        let bytes = p.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TPUP");
        assert_eq!(bytes.len(), 10 + 3 * 12);
        let back = Program::from_bytes(&bytes).unwrap();
        assert_eq!(back.instructions, p.instructions);
        assert!(Program::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn empty_program_missing_halt() {
        let cfg = TpuConfig::small(4);
        assert_eq!(validate(&Program::default(), &cfg), vec![Diagnostic::MissingHalt]);
    }

    #[test]
    fn acc_boundary() {
        let cfg = TpuConfig::small(4);
        let p = Program::new(
            "t",
            vec![
                Instruction::read_host(0, 4),
                Instruction::read_weights(0, 1),
                Instruction::matmul(0, cfg.acc_entries as u16, 1, 0),
                Instruction::halt(),
            ],
        );
        assert_eq!(validate(&p, &cfg), vec![Diagnostic::AccOutOfRange { index: 2 }]);
    }

    #[test]
    fn read_before_write_and_underflow() {
        let cfg = TpuConfig::small(4);
        let p = Program::new(
            "t",
            vec![
                Instruction::matmul(0, 0, 1, 0),
                Instruction::activate(8, 0, 1, ActFn::Relu, 0),
                Instruction::read_host(0, 4),
                Instruction::matmul(0, 0, 1, 0),
                Instruction::halt(),
                Instruction::nop(),
            ],
        );
        assert_eq!(
            validate(&p, &cfg),
            vec![
                Diagnostic::UbReadBeforeWrite { index: 0 },
                Diagnostic::AccReadBeforeWrite { index: 1 },
                Diagnostic::FifoUnderflow { index: 3 },
                Diagnostic::InstructionAfterHalt { index: 5 },
            ]
        );
    }

    #[test]
    fn geometry_output_dims() {
        let g = ConvGeometry::new(5, 5, 3, 3, 1, 0).unwrap();
        assert_eq!((g.out_h(), g.out_w()), (3, 3));
        let g = ConvGeometry::new(19, 19, 3, 3, 1, 1).unwrap();
        assert_eq!(g.out_pixels(), 361);
        assert_eq!(g.source(0, 0, 0, 0), None);
        assert_eq!(g.source(0, 0, 1, 1), Some((0, 0)));
        assert!(ConvGeometry::new(2, 2, 3, 3, 1, 0).is_err());
    }
}
