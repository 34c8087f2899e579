//! Containment suite: a malicious lib attacks a victim lib's state.
//!
//! The attacker is a normal application that drives the core directly
//! (it owns its library code, so it can put anything in its ring). The
//! victim has run real work and been revoked; its pool pages, device
//! memory segment and saved registers are captured before each attack and
//! compared byte for byte afterwards.

use serde::Serialize;

use super::{core_config, lib_config, BenchConfig};
use crate::devcore::{Core, LibId, SchedulerCalls};
use crate::error::{Error, Result};
use crate::iommu::APERTURE_BASE;
use crate::libdrv::{LibConfig, LibDriver, Placement, RING_WORDS};
use crate::machine::IommuMode;
use crate::platform::{AppId, PAGE_SIZE};
use crate::simdev::isa::{ComputeOp, Instruction};
use crate::simdev::regs::{self, RegClass, REGISTER_MAP};
use crate::simdev::{IrqFlags, STATUS_FLAGS};

const ATTACKER: AppId = AppId(1);
const VICTIM: AppId = AppId(2);
const ATTACKER_POOL: u32 = 32;
const VICTIM_POOL: u32 = 64;
/// Mapped in the victim's table only.
const VICTIM_ONLY_PAGE: u32 = APERTURE_BASE + 40 * PAGE_SIZE;
/// Mapped in nobody's table.
const UNMAPPED_PAGE: u32 = APERTURE_BASE + 200 * PAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttackCase {
    pub letter: char,
    pub name: &'static str,
    pub expected: &'static str,
}

pub const ATTACK_CASES: [AttackCase; 8] = [
    AttackCase { letter: 'a', name: "unmapped-dma", expected: "IOMMU_FAULT" },
    AttackCase { letter: 'b', name: "foreign-page-dma", expected: "IOMMU_FAULT" },
    AttackCase { letter: 'c', name: "vram-past-segment", expected: "MC_FAULT" },
    AttackCase { letter: 'd', name: "sensitive-set-reg", expected: "CMD_FAULT" },
    AttackCase { letter: 'e', name: "sensitive-register-access", expected: "EPERM" },
    AttackCase { letter: 'f', name: "ring-base-unmapped", expected: "IOMMU_FAULT" },
    AttackCase { letter: 'g', name: "trigger-after-revoke", expected: "ENOTBOUND" },
    AttackCase { letter: 'h', name: "status-page-foreign", expected: "lost interrupt" },
];

impl AttackCase {
    pub fn find(key: &str) -> Option<AttackCase> {
        ATTACK_CASES
            .iter()
            .copied()
            .find(|c| c.name == key || key.len() == 1 && key.starts_with(c.letter))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub case: AttackCase,
    pub iommu: IommuMode,
    pub observed: String,
    pub fault_ok: bool,
    pub victim_intact: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub outcomes: Vec<AttackOutcome>,
}

impl AttackReport {
    pub fn all_passed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.passed)
    }
}

struct Arena {
    core: Core,
    atk: LibDriver,
    victim: LibId,
}

impl Arena {
    fn new(cfg: &BenchConfig, iommu: IommuMode) -> Result<Self> {
        let mut core = Core::new(core_config(cfg, iommu));
        core.device_init()?;
        // The attacker launches first so the victim's segment sits directly
        // above the attacker's in device memory.
        core.create_app(ATTACKER, ATTACKER_POOL)?;
        core.create_app(VICTIM, VICTIM_POOL)?;
        let base = lib_config(cfg);
        let mut atk = LibDriver::init(&mut core.port(ATTACKER), LibConfig { pool_pages: ATTACKER_POOL, ..base })?;
        let mut vic = LibDriver::init(&mut core.port(VICTIM), LibConfig { pool_pages: VICTIM_POOL, ..base })?;

        core.bind_device_lib(vic.id())?;
        let p = &mut core.port(VICTIM);
        let g = vic.create_buffer(p, 64 * 4, Placement::Gtt)?;
        let v = vic.create_buffer(p, 64 * 4, Placement::Vram)?;
        let data: Vec<u32> = (0..64).map(|i| 0xC0DE_0000 | i).collect();
        vic.write_words(p, g, 0, &data)?;
        vic.write_words(p, v, 0, &data)?;
        let (gd, vd) = (vic.device_address(g)?, vic.device_address(v)?);
        let seq = vic.submit(p, &[Instruction::Compute { op: ComputeOp::Add, dst: vd, src1: vd, src2: gd, count: 64 }])?;
        vic.wait_fence(p, seq)?;
        core.revoke_device_lib(vic.id())?;

        core.bind_device_lib(atk.id())?;
        let p = &mut core.port(ATTACKER);
        let seq = atk.submit(p, &[Instruction::Nop])?;
        atk.wait_fence(p, seq)?;
        Ok(Self { core, atk, victim: vic.id() })
    }

    fn victim_state(&self) -> Vec<u8> {
        let ctx = self.core.lib(self.victim).expect("victim exists");
        let m = self.core.machine();
        let mut out = Vec::new();
        for frame in ctx.mappings.values() {
            let mut page = vec![0u8; PAGE_SIZE as usize];
            m.platform.mem.read(frame * PAGE_SIZE, &mut page);
            out.extend(page);
        }
        out.extend(&m.device.vram()[ctx.seg_base as usize..ctx.seg_limit as usize]);
        for (o, v) in &ctx.snapshot.m_regs {
            out.extend(o.to_le_bytes());
            out.extend(v.to_le_bytes());
        }
        out
    }

    fn seg_size(&self) -> u32 {
        let ctx = self.core.lib(self.atk.id()).unwrap();
        ctx.seg_limit - ctx.seg_base
    }

    /// Submits from the attacker and reports the fault that stopped it.
    fn attack_batch(&mut self, instrs: &[Instruction]) -> Result<IrqFlags> {
        let p = &mut self.core.port(ATTACKER);
        let seq = self.atk.submit(p, instrs)?;
        match self.atk.wait_fence(p, seq) {
            Err(Error::DeviceFault(f)) => Ok(f),
            Ok(()) => Ok(IrqFlags::empty()),
            Err(e) => Err(e),
        }
    }

    fn attacker_flags(&mut self) -> Result<IrqFlags> {
        self.core.machine_mut().run_until_idle();
        let v = self.core.port(ATTACKER).read_u32(self.atk.status_vaddr() + STATUS_FLAGS)?;
        Ok(IrqFlags::from_bits_truncate(v))
    }
}

fn flags_text(f: IrqFlags) -> String {
    if f.is_empty() {
        "no fault".into()
    } else {
        format!("{f:?}")
    }
}

/// Runs one case; returns (observed, expected-fault-seen).
fn execute(case: AttackCase, a: &mut Arena) -> Result<(String, bool)> {
    let seg = a.seg_size();
    let (own_h, own) = {
        let p = &mut a.core.port(ATTACKER);
        let h = a.atk.create_buffer(p, 256, Placement::Gtt)?;
        (h, a.atk.device_address(h)?)
    };
    let own_view = a.atk.map_buffer(own_h)?.vaddr;
    match case.letter {
        'a' => {
            let f1 = a.attack_batch(&[Instruction::Copy { dst: UNMAPPED_PAGE, src: own, count: 16 }])?;
            let f2 = a.attack_batch(&[Instruction::Copy { dst: own, src: UNMAPPED_PAGE, count: 16 }])?;
            Ok((format!("write: {}, read: {}", flags_text(f1), flags_text(f2)), f1 == IrqFlags::IOMMU_FAULT && f2 == IrqFlags::IOMMU_FAULT))
        }
        'b' => {
            let before = a.core.port(ATTACKER).read_u32(own_view)?;
            let f1 = a.attack_batch(&[Instruction::Copy { dst: VICTIM_ONLY_PAGE, src: own, count: 64 }])?;
            let f2 = a.attack_batch(&[Instruction::Copy { dst: own, src: VICTIM_ONLY_PAGE, count: 64 }])?;
            let after = a.core.port(ATTACKER).read_u32(own_view)?;
            Ok((
                format!("write: {}, read: {}", flags_text(f1), flags_text(f2)),
                f1 == IrqFlags::IOMMU_FAULT && f2 == IrqFlags::IOMMU_FAULT && before == after,
            ))
        }
        'c' => {
            let f1 = a.attack_batch(&[Instruction::Copy { dst: seg, src: own, count: 16 }])?;
            let f2 = a.attack_batch(&[Instruction::Copy { dst: own, src: seg + 64, count: 16 }])?;
            let f3 = a.attack_batch(&[Instruction::Copy { dst: seg - 32, src: own, count: 16 }])?;
            Ok((
                format!("at limit: {}, read past: {}, straddling: {}", flags_text(f1), flags_text(f2), flags_text(f3)),
                [f1, f2, f3].iter().all(|f| *f == IrqFlags::MC_FAULT),
            ))
        }
        'd' => {
            let targets = [
                regs::MC_SEG_BASE,
                regs::MC_SEG_LIMIT,
                regs::IOMMU_ROOT,
                regs::IOMMU_ENABLE,
                regs::DISP_PLL,
                regs::DISP_ENABLE,
            ];
            let mut ok = true;
            let mut seen = Vec::new();
            for reg in targets {
                let was = a.core.machine().mmio_read(reg)?;
                let f = a.attack_batch(&[Instruction::SetReg { reg, value: 0xFFFF_F000 }])?;
                ok &= f == IrqFlags::CMD_FAULT && a.core.machine().mmio_read(reg)? == was;
                seen.push(flags_text(f));
            }
            seen.dedup();
            Ok((seen.join(", "), ok))
        }
        'e' => {
            let port = &mut a.core.port(ATTACKER);
            let (mut denied, mut total) = (0, 0);
            for r in REGISTER_MAP.iter().filter(|r| r.class == RegClass::Sensitive) {
                for write in [false, true] {
                    total += 1;
                    if port.access_register(a.atk.id(), r.offset, 0xDEAD_BEEF, write) == Err(Error::Perm) {
                        denied += 1;
                    }
                }
            }
            Ok((format!("{denied}/{total} denied with EPERM"), denied == total))
        }
        'f' => {
            let id = a.atk.id();
            let port = &mut a.core.port(ATTACKER);
            port.access_register(id, regs::RB_BASE, UNMAPPED_PAGE, true)?;
            let head = port.access_register(id, regs::RB_HEAD, 0, false)?;
            port.access_register(id, regs::RB_TAIL, (head + 16) % (4 * RING_WORDS), true)?;
            let f = a.attacker_flags()? & IrqFlags::FAULTS;
            Ok((flags_text(f), f == IrqFlags::IOMMU_FAULT))
        }
        'g' => {
            let id = a.atk.id();
            a.core.revoke_device_lib(id)?;
            let digest = a.core.machine().device.digest();
            let port = &mut a.core.port(ATTACKER);
            let r1 = port.access_register(id, regs::RB_TAIL, 64, true);
            let r2 = a.atk.submit(port, &[Instruction::Nop]);
            let r3 = a.core.port(ATTACKER).set_mode(id, 0, crate::bench::workload::FRAME_MODE);
            let untouched = a.core.machine().device.digest() == digest;
            let nb = Err(Error::NotBound);
            let ok = r1.clone().map(|_| ()) == nb && r2.clone().map(|_| ()) == nb && r3 == nb && untouched;
            Ok((format!("{:?}, {:?}, {:?}", r1, r2, r3), ok))
        }
        'h' => {
            let id = a.atk.id();
            let lost = a.core.machine().device.counters.lost_interrupts;
            a.core.port(ATTACKER).access_register(id, regs::IH_PAGE_ADDR, VICTIM_ONLY_PAGE, true)?;
            let p = &mut a.core.port(ATTACKER);
            a.atk.submit(p, &[Instruction::Copy { dst: UNMAPPED_PAGE, src: own, count: 4 }])?;
            a.core.machine_mut().run_until_idle();
            let lost = a.core.machine().device.counters.lost_interrupts - lost;
            let fault = a.core.machine().device.last_fault();
            Ok((
                format!("{lost} interrupt(s) dropped, device fault {:?}", fault),
                lost >= 1 && fault == Some(IrqFlags::IOMMU_FAULT),
            ))
        }
        _ => unreachable!("unknown case"),
    }
}

pub fn run_case(cfg: &BenchConfig, case: AttackCase, iommu: IommuMode) -> Result<AttackOutcome> {
    let mut arena = Arena::new(cfg, iommu)?;
    let before = arena.victim_state();
    let (observed, fault_ok) = match execute(case, &mut arena) {
        Ok(r) => r,
        Err(e) => (format!("harness error: {e}"), false),
    };
    let victim_intact = arena.victim_state() == before;
    Ok(AttackOutcome {
        case,
        iommu,
        observed,
        fault_ok,
        victim_intact,
        passed: fault_ok && victim_intact,
    })
}

/// Runs the selected cases (all of them when `only` is empty) under both
/// IOMMU deployments.
pub fn run_attacks(cfg: &BenchConfig, only: &[AttackCase]) -> Result<AttackReport> {
    let cases = if only.is_empty() { &ATTACK_CASES[..] } else { only };
    let mut outcomes = Vec::new();
    for case in cases {
        for iommu in [IommuMode::System, IommuMode::Builtin] {
            outcomes.push(run_case(cfg, *case, iommu)?);
        }
    }
    Ok(AttackReport { outcomes })
}
