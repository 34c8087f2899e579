//! One workload definition, two driver stacks.
//!
//! `Stack` is the narrow application-facing surface the workloads need.
//! Operands name buffers; each stack resolves them its own way (the
//! library driver to device addresses, the legacy driver to buffer ids
//! that the kernel patches).

use crate::devcore::Core;
use crate::error::{Error, Result};
use crate::legacydrv::{BufRef, BufferId, ClientId, CsInstr, LegacyCalls, LegacyDriver};
use crate::libdrv::{BufferHandle, LibDriver, Placement};
use crate::platform::{AppId, CostLedger};
use crate::simdev::isa::{ComputeOp, Instruction};
use crate::simdev::{DisplayMode, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operand<B> {
    pub buf: B,
    /// Byte offset into the buffer.
    pub offset: u32,
}

pub fn at<B>(buf: B, word: u32) -> Operand<B> {
    Operand { buf, offset: 4 * word }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmd<B> {
    Compute {
        op: ComputeOp,
        dst: Operand<B>,
        src1: Operand<B>,
        src2: Operand<B>,
        count: u32,
    },
    Copy {
        dst: Operand<B>,
        src: Operand<B>,
        count: u32,
    },
}

pub trait Stack {
    type Buf: Copy;

    fn alloc(&mut self, size: u32, placement: Placement) -> Result<Self::Buf>;
    fn write(&mut self, buf: Self::Buf, offset: u32, data: &[u8]) -> Result<()>;
    fn read(&mut self, buf: Self::Buf, offset: u32, len: u32) -> Result<Vec<u8>>;
    fn submit(&mut self, cmds: &[Cmd<Self::Buf>]) -> Result<u64>;
    /// Blocks until `seq` completes.
    fn wait(&mut self, seq: u64) -> Result<()>;
    fn set_mode(&mut self, mode: DisplayMode) -> Result<()>;
    fn present(&mut self, buf: Self::Buf) -> Result<()>;
    /// What the display currently shows.
    fn scanout(&mut self) -> Result<Frame>;
    fn ledger(&self) -> CostLedger;

    fn write_words(&mut self, buf: Self::Buf, word: u32, words: &[u32]) -> Result<()> {
        self.write(buf, 4 * word, &to_bytes(words))
    }

    fn read_words(&mut self, buf: Self::Buf, word: u32, count: u32) -> Result<Vec<u32>> {
        Ok(from_bytes(&self.read(buf, 4 * word, 4 * count)?))
    }
}

pub fn to_bytes(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn from_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// An application's view of the library stack while its lib is bound.
pub struct LibSession<'a> {
    pub core: &'a mut Core,
    pub lib: &'a mut LibDriver,
    pub app: AppId,
}

impl LibSession<'_> {
    fn da(&self, o: Operand<BufferHandle>) -> Result<u32> {
        Ok(self.lib.device_address(o.buf)? + o.offset)
    }
}

impl Stack for LibSession<'_> {
    type Buf = BufferHandle;

    fn alloc(&mut self, size: u32, placement: Placement) -> Result<BufferHandle> {
        self.lib.create_buffer(&mut self.core.port(self.app), size, placement)
    }

    fn write(&mut self, buf: BufferHandle, offset: u32, data: &[u8]) -> Result<()> {
        self.lib.write_buffer(&mut self.core.port(self.app), buf, offset, data)
    }

    fn read(&mut self, buf: BufferHandle, offset: u32, len: u32) -> Result<Vec<u8>> {
        self.lib.read_buffer(&mut self.core.port(self.app), buf, offset, len)
    }

    fn submit(&mut self, cmds: &[Cmd<BufferHandle>]) -> Result<u64> {
        let instrs = cmds
            .iter()
            .map(|c| {
                Ok(match *c {
                    Cmd::Compute { op, dst, src1, src2, count } => Instruction::Compute {
                        op,
                        dst: self.da(dst)?,
                        src1: self.da(src1)?,
                        src2: self.da(src2)?,
                        count,
                    },
                    Cmd::Copy { dst, src, count } => Instruction::Copy {
                        dst: self.da(dst)?,
                        src: self.da(src)?,
                        count,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.lib.submit(&mut self.core.port(self.app), &instrs)
    }

    fn wait(&mut self, seq: u64) -> Result<()> {
        self.lib.wait_fence(&mut self.core.port(self.app), seq)
    }

    fn set_mode(&mut self, mode: DisplayMode) -> Result<()> {
        self.lib.set_mode(&mut self.core.port(self.app), 0, mode)
    }

    fn present(&mut self, buf: BufferHandle) -> Result<()> {
        self.lib.present(&mut self.core.port(self.app), buf)
    }

    fn scanout(&mut self) -> Result<Frame> {
        scanout(self.core.machine_mut())
    }

    fn ledger(&self) -> CostLedger {
        *self.core.ledger()
    }
}

fn scanout(m: &mut crate::machine::Machine) -> Result<Frame> {
    let s = m.scanout()?;
    match s.fault {
        Some(f) => Err(Error::DeviceFault(f)),
        None => Ok(s.frame),
    }
}

/// An application's view of the legacy stack.
pub struct LegacySession<'a> {
    pub drv: &'a mut LegacyDriver,
    pub client: ClientId,
}

fn buf_ref(o: Operand<BufferId>) -> BufRef {
    BufRef::new(o.buf, o.offset)
}

impl Stack for LegacySession<'_> {
    type Buf = BufferId;

    fn alloc(&mut self, size: u32, placement: Placement) -> Result<BufferId> {
        self.drv.alloc(self.client, size, placement)
    }

    fn write(&mut self, buf: BufferId, offset: u32, data: &[u8]) -> Result<()> {
        self.drv.write(self.client, buf, offset, data)
    }

    fn read(&mut self, buf: BufferId, offset: u32, len: u32) -> Result<Vec<u8>> {
        self.drv.read(self.client, buf, offset, len)
    }

    fn submit(&mut self, cmds: &[Cmd<BufferId>]) -> Result<u64> {
        let batch: Vec<CsInstr> = cmds
            .iter()
            .map(|c| match *c {
                Cmd::Compute { op, dst, src1, src2, count } => CsInstr::Compute {
                    op,
                    dst: buf_ref(dst),
                    src1: buf_ref(src1),
                    src2: buf_ref(src2),
                    count,
                },
                Cmd::Copy { dst, src, count } => CsInstr::Copy {
                    dst: buf_ref(dst),
                    src: buf_ref(src),
                    count,
                },
            })
            .collect();
        self.drv.submit(self.client, &batch)
    }

    fn wait(&mut self, seq: u64) -> Result<()> {
        self.drv.wait(self.client, seq)
    }

    fn set_mode(&mut self, mode: DisplayMode) -> Result<()> {
        self.drv.set_mode(self.client, 0, mode)
    }

    fn present(&mut self, buf: BufferId) -> Result<()> {
        self.drv.present(self.client, buf)
    }

    fn scanout(&mut self) -> Result<Frame> {
        scanout(self.drv.machine_mut())
    }

    fn ledger(&self) -> CostLedger {
        *self.drv.ledger()
    }
}
