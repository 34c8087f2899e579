use std::collections::BTreeMap;

use crate::simdev::regs::{self, RegClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    ReadWrite,
}

/// Registers a bound library may touch through `access_register`.
#[derive(Debug, Clone)]
pub struct RegisterAcl {
    entries: BTreeMap<u32, Access>,
}

impl Default for RegisterAcl {
    fn default() -> Self {
        let entries = regs::REGISTER_MAP
            .iter()
            .filter(|r| r.class == RegClass::Management)
            .map(|r| {
                let a = if r.offset == regs::RB_HEAD {
                    Access::Read
                } else {
                    Access::ReadWrite
                };
                (r.offset, a)
            })
            .collect();
        Self { entries }
    }
}

impl RegisterAcl {
    pub fn allows(&self, reg: u32, is_write: bool) -> bool {
        match self.entries.get(&reg) {
            Some(Access::ReadWrite) => true,
            Some(Access::Read) => !is_write,
            None => false,
        }
    }

    pub fn offsets(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }
}
