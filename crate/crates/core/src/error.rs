use thiserror::Error;

use crate::simdev::IrqFlags;

/// Errors returned across every layer of the stack.
///
/// Names follow the errno-style codes the driver interfaces report, so a
/// test can match on `Error::Perm` regardless of which layer produced it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("EPERM: operation not permitted")]
    Perm,
    #[error("EINVAL: invalid argument")]
    Inval,
    #[error("EEXIST: mapping already exists")]
    Exist,
    #[error("ENOENT: no such entry")]
    NoEnt,
    #[error("ENOTBOUND: library is not bound to the device")]
    NotBound,
    #[error("EBUSY: another library is bound")]
    Busy,
    #[error("ENOSYS: entry point not exported by this build")]
    NoSys,
    #[error("EBADHANDLE: unknown or unsuitable buffer handle")]
    BadHandle,
    #[error("ERANGE: offset or length out of range")]
    Range,
    #[error("EBATCHTOOBIG: batch does not fit the ring")]
    BatchTooBig,
    #[error("DOUBLE_INIT: device already initialized")]
    DoubleInit,
    #[error("OUT_OF_MEMORY: not enough free system pages")]
    OutOfMemory,
    #[error("OUT_OF_VRAM: no device-memory segment available")]
    OutOfVram,
    #[error("OUT_OF_SEGMENT: segment exhausted")]
    OutOfSegment,
    #[error("OUT_OF_POOL: library pool exhausted")]
    OutOfPool,
    #[error("REG_FAULT: register offset {0:#x} is not in the register map")]
    RegFault(u32),
    #[error("DEVICE_FAULT: {0:?}")]
    DeviceFault(IrqFlags),
    #[error("ESTALL: fence cannot complete, device is idle")]
    Stalled,
    #[error("EFAULT: address {0:#x} is not mapped")]
    Fault(u32),
    #[error("VERIFY_FAIL: {0}")]
    VerifyFail(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
