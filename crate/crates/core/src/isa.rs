//! The per-board instruction set: a small RISC-V-style integer core plus
//! custom instructions for step issue and board coordination. All
//! instructions are 32 bits; branch and jump offsets count words.

use std::fmt;

use crate::regalloc::Reg;

pub const OP: u32 = 0x33;
pub const OP_IMM: u32 = 0x13;
pub const BRANCH: u32 = 0x63;
pub const JAL: u32 = 0x6F;
pub const LOAD: u32 = 0x03;
pub const STORE: u32 = 0x23;
pub const SYSTEM: u32 = 0x73;
pub const CUSTOM: u32 = 0x0B;

pub const HALT_WORD: u32 = 0x0000_0073;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instr {
    Add { rd: Reg, rs1: Reg, rs2: Reg },
    Sub { rd: Reg, rs1: Reg, rs2: Reg },
    Slt { rd: Reg, rs1: Reg, rs2: Reg },
    Addi { rd: Reg, rs1: Reg, imm: i32 },
    Slti { rd: Reg, rs1: Reg, imm: i32 },
    Beq { rs1: Reg, rs2: Reg, off: i32 },
    Bne { rs1: Reg, rs2: Reg, off: i32 },
    Blt { rs1: Reg, rs2: Reg, off: i32 },
    Bge { rs1: Reg, rs2: Reg, off: i32 },
    Jal { rd: Reg, off: i32 },
    Lw { rd: Reg, rs1: Reg, imm: i32 },
    Sw { rs2: Reg, rs1: Reg, imm: i32 },
    Halt,
    /// Enqueue step-table entry `index`.
    Step { index: u32 },
    /// Enqueue the step-table entry held in a register.
    StepReg { rs1: Reg },
    Barrier,
    /// Latch photon counter `counter` into `rd`.
    ReadCnt { rd: Reg, counter: u32 },
    /// Broadcast a register value to all other boards.
    Bcast { rs1: Reg },
    /// Receive the broadcast value.
    Recv { rd: Reg },
    WaitHost { tag: u32 },
}

/// Timing class of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Alu,
    Branch,
    Jump,
    Mem,
    Step,
    Barrier,
    Coord,
    Halt,
    WaitHost,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IsaError {
    #[error("immediate {value} does not fit {bits} bits")]
    Immediate { value: i64, bits: u32 },
    #[error("register x{0} out of range")]
    Register(Reg),
    #[error("cannot decode word {0:#010x}")]
    Decode(u32),
}

fn fits_signed(v: i32, bits: u32) -> bool {
    let lim = 1i64 << (bits - 1);
    (-lim..lim).contains(&(v as i64))
}

pub fn fits_imm12(v: i32) -> bool {
    fits_signed(v, 12)
}

fn check_reg(r: Reg) -> Result<u32, IsaError> {
    if r < 32 {
        Ok(r as u32)
    } else {
        Err(IsaError::Register(r))
    }
}

fn signed(v: i32, bits: u32) -> Result<u32, IsaError> {
    if fits_signed(v, bits) {
        Ok((v as u32) & ((1 << bits) - 1))
    } else {
        Err(IsaError::Immediate { value: v as i64, bits })
    }
}

fn unsigned(v: u32, bits: u32) -> Result<u32, IsaError> {
    if v < (1 << bits) {
        Ok(v)
    } else {
        Err(IsaError::Immediate { value: v as i64, bits })
    }
}

fn r_type(f7: u32, rs2: Reg, rs1: Reg, f3: u32, rd: Reg, opcode: u32) -> Result<u32, IsaError> {
    Ok(f7 << 25 | check_reg(rs2)? << 20 | check_reg(rs1)? << 15 | f3 << 12 | check_reg(rd)? << 7 | opcode)
}

fn i_type(imm: u32, rs1: Reg, f3: u32, rd: Reg, opcode: u32) -> Result<u32, IsaError> {
    Ok(imm << 20 | check_reg(rs1)? << 15 | f3 << 12 | check_reg(rd)? << 7 | opcode)
}

fn s_type(imm: u32, rs2: Reg, rs1: Reg, f3: u32, opcode: u32) -> Result<u32, IsaError> {
    Ok((imm >> 5) << 25 | check_reg(rs2)? << 20 | check_reg(rs1)? << 15 | f3 << 12 | (imm & 0x1F) << 7 | opcode)
}

fn sign_extend(v: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((v << shift) as i32) >> shift
}

impl Instr {
    pub fn encode(&self) -> Result<u32, IsaError> {
        use Instr::*;
        match *self {
            Add { rd, rs1, rs2 } => r_type(0, rs2, rs1, 0, rd, OP),
            Sub { rd, rs1, rs2 } => r_type(0x20, rs2, rs1, 0, rd, OP),
            Slt { rd, rs1, rs2 } => r_type(0, rs2, rs1, 2, rd, OP),
            Addi { rd, rs1, imm } => i_type(signed(imm, 12)?, rs1, 0, rd, OP_IMM),
            Slti { rd, rs1, imm } => i_type(signed(imm, 12)?, rs1, 2, rd, OP_IMM),
            Beq { rs1, rs2, off } => s_type(signed(off, 12)?, rs2, rs1, 0, BRANCH),
            Bne { rs1, rs2, off } => s_type(signed(off, 12)?, rs2, rs1, 1, BRANCH),
            Blt { rs1, rs2, off } => s_type(signed(off, 12)?, rs2, rs1, 4, BRANCH),
            Bge { rs1, rs2, off } => s_type(signed(off, 12)?, rs2, rs1, 5, BRANCH),
            Jal { rd, off } => Ok(signed(off, 20)? << 12 | check_reg(rd)? << 7 | JAL),
            Lw { rd, rs1, imm } => i_type(signed(imm, 12)?, rs1, 2, rd, LOAD),
            Sw { rs2, rs1, imm } => s_type(signed(imm, 12)?, rs2, rs1, 2, STORE),
            Halt => Ok(HALT_WORD),
            Step { index } => i_type(unsigned(index, 12)?, 0, 0, 0, CUSTOM),
            StepReg { rs1 } => i_type(0, rs1, 1, 0, CUSTOM),
            Barrier => i_type(0, 0, 2, 0, CUSTOM),
            ReadCnt { rd, counter } => i_type(unsigned(counter, 12)?, 0, 3, rd, CUSTOM),
            Bcast { rs1 } => i_type(0, rs1, 4, 0, CUSTOM),
            Recv { rd } => i_type(0, 0, 5, rd, CUSTOM),
            WaitHost { tag } => i_type(unsigned(tag, 12)?, 0, 6, 0, CUSTOM),
        }
    }

    pub fn decode(w: u32) -> Result<Instr, IsaError> {
        use Instr::*;
        let opcode = w & 0x7F;
        let rd = ((w >> 7) & 0x1F) as Reg;
        let f3 = (w >> 12) & 0x7;
        let rs1 = ((w >> 15) & 0x1F) as Reg;
        let rs2 = ((w >> 20) & 0x1F) as Reg;
        let f7 = w >> 25;
        let imm_i = sign_extend(w >> 20, 12);
        let uimm_i = w >> 20;
        let imm_s = sign_extend((w >> 25) << 5 | (w >> 7) & 0x1F, 12);
        let bad = || IsaError::Decode(w);
        let ins = match (opcode, f3) {
            (OP, 0) if f7 == 0 => Add { rd, rs1, rs2 },
            (OP, 0) if f7 == 0x20 => Sub { rd, rs1, rs2 },
            (OP, 2) if f7 == 0 => Slt { rd, rs1, rs2 },
            (OP_IMM, 0) => Addi { rd, rs1, imm: imm_i },
            (OP_IMM, 2) => Slti { rd, rs1, imm: imm_i },
            (BRANCH, 0) => Beq { rs1, rs2, off: imm_s },
            (BRANCH, 1) => Bne { rs1, rs2, off: imm_s },
            (BRANCH, 4) => Blt { rs1, rs2, off: imm_s },
            (BRANCH, 5) => Bge { rs1, rs2, off: imm_s },
            (JAL, _) => Jal { rd, off: sign_extend(w >> 12, 20) },
            (LOAD, 2) => Lw { rd, rs1, imm: imm_i },
            (STORE, 2) => Sw { rs2, rs1, imm: imm_s },
            (SYSTEM, _) if w == HALT_WORD => Halt,
            (CUSTOM, 0) => Step { index: uimm_i },
            (CUSTOM, 1) => StepReg { rs1 },
            (CUSTOM, 2) => Barrier,
            (CUSTOM, 3) => ReadCnt { rd, counter: uimm_i },
            (CUSTOM, 4) => Bcast { rs1 },
            (CUSTOM, 5) => Recv { rd },
            (CUSTOM, 6) => WaitHost { tag: uimm_i },
            _ => return Err(bad()),
        };
        // reject words with stray bits so that decode(encode(x)) is a bijection on valid words
        if ins.encode().ok() != Some(w) {
            return Err(bad());
        }
        Ok(ins)
    }

    pub fn class(&self) -> Class {
        use Instr::*;
        match self {
            Add { .. } | Sub { .. } | Slt { .. } | Addi { .. } | Slti { .. } => Class::Alu,
            Beq { .. } | Bne { .. } | Blt { .. } | Bge { .. } => Class::Branch,
            Jal { .. } => Class::Jump,
            Lw { .. } | Sw { .. } => Class::Mem,
            Halt => Class::Halt,
            Step { .. } | StepReg { .. } => Class::Step,
            Barrier => Class::Barrier,
            ReadCnt { .. } | Bcast { .. } | Recv { .. } => Class::Coord,
            WaitHost { .. } => Class::WaitHost,
        }
    }

    /// Word offset of a branch or jump target, if any.
    pub fn target_offset(&self) -> Option<i32> {
        use Instr::*;
        match *self {
            Beq { off, .. } | Bne { off, .. } | Blt { off, .. } | Bge { off, .. } | Jal { off, .. } => Some(off),
            _ => None,
        }
    }

    pub fn with_offset(self, new: i32) -> Instr {
        use Instr::*;
        match self {
            Beq { rs1, rs2, .. } => Beq { rs1, rs2, off: new },
            Bne { rs1, rs2, .. } => Bne { rs1, rs2, off: new },
            Blt { rs1, rs2, .. } => Blt { rs1, rs2, off: new },
            Bge { rs1, rs2, .. } => Bge { rs1, rs2, off: new },
            Jal { rd, .. } => Jal { rd, off: new },
            other => other,
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instr::*;
        match *self {
            Add { rd, rs1, rs2 } => write!(f, "add x{rd}, x{rs1}, x{rs2}"),
            Sub { rd, rs1, rs2 } => write!(f, "sub x{rd}, x{rs1}, x{rs2}"),
            Slt { rd, rs1, rs2 } => write!(f, "slt x{rd}, x{rs1}, x{rs2}"),
            Addi { rd, rs1, imm } => write!(f, "addi x{rd}, x{rs1}, {imm}"),
            Slti { rd, rs1, imm } => write!(f, "slti x{rd}, x{rs1}, {imm}"),
            Beq { rs1, rs2, off } => write!(f, "beq x{rs1}, x{rs2}, {off:+}"),
            Bne { rs1, rs2, off } => write!(f, "bne x{rs1}, x{rs2}, {off:+}"),
            Blt { rs1, rs2, off } => write!(f, "blt x{rs1}, x{rs2}, {off:+}"),
            Bge { rs1, rs2, off } => write!(f, "bge x{rs1}, x{rs2}, {off:+}"),
            Jal { rd, off } => write!(f, "jal x{rd}, {off:+}"),
            Lw { rd, rs1, imm } => write!(f, "lw x{rd}, {imm}(x{rs1})"),
            Sw { rs2, rs1, imm } => write!(f, "sw x{rs2}, {imm}(x{rs1})"),
            Halt => f.write_str("halt"),
            Step { index } => write!(f, "step {index}"),
            StepReg { rs1 } => write!(f, "step x{rs1}"),
            Barrier => f.write_str("barrier"),
            ReadCnt { rd, counter } => write!(f, "readcnt x{rd}, {counter}"),
            Bcast { rs1 } => write!(f, "bcast x{rs1}"),
            Recv { rd } => write!(f, "recv x{rd}"),
            WaitHost { tag } => write!(f, "waithost {tag}"),
        }
    }
}
