//! Instruction encoding consumed by the command processor.
//!
//! | opcode | words | layout                                        |
//! |--------|-------|-----------------------------------------------|
//! | 0x0    | 1     | NOP                                           |
//! | 0x1    | 3     | SET_REG reg, value                            |
//! | 0x2    | 6     | COMPUTE sub_op, dst, src1, src2, count        |
//! | 0x3    | 4     | COPY dst, src, count_words                    |
//! | 0x4    | 4     | FENCE seq_lo, seq_hi, flags (bit0 = IRQ)      |

pub const OP_NOP: u32 = 0x0;
pub const OP_SET_REG: u32 = 0x1;
pub const OP_COMPUTE: u32 = 0x2;
pub const OP_COPY: u32 = 0x3;
pub const OP_FENCE: u32 = 0x4;

pub const FENCE_FLAG_IRQ: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComputeOp {
    Add,
    Mul,
    Dot,
}

impl ComputeOp {
    pub fn code(self) -> u32 {
        match self {
            ComputeOp::Add => 0,
            ComputeOp::Mul => 1,
            ComputeOp::Dot => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ComputeOp::Add),
            1 => Some(ComputeOp::Mul),
            2 => Some(ComputeOp::Dot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Nop,
    SetReg {
        reg: u32,
        value: u32,
    },
    Compute {
        op: ComputeOp,
        dst: u32,
        src1: u32,
        src2: u32,
        count: u32,
    },
    Copy {
        dst: u32,
        src: u32,
        count: u32,
    },
    Fence {
        seq: u64,
        irq: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    UnknownOpcode(u32),
    UnknownSubOp(u32),
    /// Fewer words available than the opcode requires.
    Truncated { needed: usize },
}

/// Word length of the instruction starting with `opcode`.
pub fn length_of(opcode: u32) -> Option<usize> {
    match opcode {
        OP_NOP => Some(1),
        OP_SET_REG => Some(3),
        OP_COMPUTE => Some(6),
        OP_COPY => Some(4),
        OP_FENCE => Some(4),
        _ => None,
    }
}

impl Instruction {
    pub fn len_words(&self) -> usize {
        match self {
            Instruction::Nop => 1,
            Instruction::SetReg { .. } => 3,
            Instruction::Compute { .. } => 6,
            Instruction::Copy { .. } => 4,
            Instruction::Fence { .. } => 4,
        }
    }

    /// Device cycles to execute this instruction.
    pub fn cycles(&self) -> u64 {
        match *self {
            Instruction::Nop | Instruction::SetReg { .. } => 1,
            Instruction::Compute { count, .. } | Instruction::Copy { count, .. } => 1 + count as u64,
            Instruction::Fence { .. } => 4,
        }
    }

    pub fn encode(&self, out: &mut Vec<u32>) {
        match *self {
            Instruction::Nop => out.push(OP_NOP),
            Instruction::SetReg { reg, value } => out.extend([OP_SET_REG, reg, value]),
            Instruction::Compute {
                op,
                dst,
                src1,
                src2,
                count,
            } => out.extend([OP_COMPUTE, op.code(), dst, src1, src2, count]),
            Instruction::Copy { dst, src, count } => out.extend([OP_COPY, dst, src, count]),
            Instruction::Fence { seq, irq } => out.extend([
                OP_FENCE,
                seq as u32,
                (seq >> 32) as u32,
                if irq { FENCE_FLAG_IRQ } else { 0 },
            ]),
        }
    }

    pub fn decode(words: &[u32]) -> Result<Instruction, DecodeError> {
        let opcode = *words.first().ok_or(DecodeError::Truncated { needed: 1 })?;
        let len = length_of(opcode).ok_or(DecodeError::UnknownOpcode(opcode))?;
        if words.len() < len {
            return Err(DecodeError::Truncated { needed: len });
        }
        let w = &words[..len];
        Ok(match opcode {
            OP_NOP => Instruction::Nop,
            OP_SET_REG => Instruction::SetReg {
                reg: w[1],
                value: w[2],
            },
            OP_COMPUTE => Instruction::Compute {
                op: ComputeOp::from_code(w[1]).ok_or(DecodeError::UnknownSubOp(w[1]))?,
                dst: w[2],
                src1: w[3],
                src2: w[4],
                count: w[5],
            },
            OP_COPY => Instruction::Copy {
                dst: w[1],
                src: w[2],
                count: w[3],
            },
            OP_FENCE => Instruction::Fence {
                seq: w[1] as u64 | ((w[2] as u64) << 32),
                irq: w[3] & FENCE_FLAG_IRQ != 0,
            },
            _ => unreachable!(),
        })
    }
}

pub fn encode_all(instrs: &[Instruction]) -> Vec<u32> {
    let mut out = Vec::new();
    for i in instrs {
        i.encode(&mut out);
    }
    out
}
