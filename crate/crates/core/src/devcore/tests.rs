use super::*;
use crate::iommu::APERTURE_BASE;
use crate::simdev::isa::{self, ComputeOp, Instruction};
use crate::simdev::regs::*;
use crate::simdev::{IrqFlags, STATUS_SEQ};

const A: AppId = AppId(1);
const B: AppId = AppId(2);
const SCRATCH3: u32 = SCRATCH0 + 12;

fn core() -> Core {
    let mut c = Core::new(CoreConfig::default());
    c.device_init().unwrap();
    c.create_app(A, 8).unwrap();
    c.create_app(B, 8).unwrap();
    c
}

/// Inits a lib for `app` and maps its 8 reserved pages at the aperture base.
fn lib_with_pages(c: &mut Core, app: AppId) -> (LibId, Vec<u32>) {
    let mut p = c.port(app);
    let (lib, _) = p.init_device_lib().unwrap();
    let vaddrs = p.take_reserved(8);
    for (i, v) in vaddrs.iter().enumerate() {
        p.iommu_map_page(lib, *v, APERTURE_BASE + i as u32 * PAGE_SIZE).unwrap();
    }
    (lib, vaddrs)
}

/// Ring at aperture page 0 (1024 words), status at page 1.
fn program_ring(c: &mut Core, app: AppId, lib: LibId) {
    let mut p = c.port(app);
    p.access_register(lib, RB_BASE, APERTURE_BASE, true).unwrap();
    p.access_register(lib, RB_SIZE, 1024, true).unwrap();
    p.access_register(lib, IH_PAGE_ADDR, APERTURE_BASE + PAGE_SIZE, true).unwrap();
}

fn submit(c: &mut Core, app: AppId, lib: LibId, ring_vaddr: u32, instrs: &[Instruction]) {
    let mut p = c.port(app);
    let mut tail = p.access_register(lib, RB_TAIL, 0, false).unwrap();
    for w in isa::encode_all(instrs) {
        p.write_u32(ring_vaddr + tail, w).unwrap();
        tail = (tail + 4) % PAGE_SIZE;
    }
    p.access_register(lib, RB_TAIL, tail, true).unwrap();
}

#[test]
fn exported_surface_is_nine_or_seven() {
    let c = Core::new(CoreConfig::default());
    assert_eq!(c.exported_entry_points().len(), 9);
    assert_eq!(LIB_CALLS.len(), 7);
    assert_eq!(SCHEDULER_CALLS.len(), 2);
    let intel = Core::new(CoreConfig::without_device_memory());
    let names = intel.exported_entry_points();
    assert_eq!(names.len(), 7);
    assert!(!names.contains(&"alloc_device_memory"));
}

#[test]
fn init_loads_firmware_and_refuses_second_call() {
    let mut c = Core::new(CoreConfig::default());
    c.create_app(A, 0).unwrap();
    assert_eq!(c.port(A).init_device_lib().unwrap_err(), Error::Inval);
    c.device_init().unwrap();
    assert_eq!(c.machine().mmio_read(FW_CTRL), Ok(FW_STATE_READY));
    assert_eq!(c.machine().mmio_read(IRQ_ENABLE), Ok(1));
    assert_eq!(c.machine().mmio_read(DISP_ENABLE), Ok(0));
    assert_eq!(c.device_init(), Err(Error::DoubleInit));
}

#[test]
fn segments_are_first_fit_and_disjoint_until_vram_runs_out() {
    let mut c = core();
    let (l1, info) = c.port(A).init_device_lib().unwrap();
    assert_eq!(info.segment_size, DEFAULT_SEGMENT_SIZE);
    let (l2, _) = c.port(B).init_device_lib().unwrap();
    let s1 = c.lib(l1).unwrap();
    let s2 = c.lib(l2).unwrap();
    assert_eq!((s1.seg_base, s1.seg_limit), (0, 1 << 20));
    assert_eq!((s2.seg_base, s2.seg_limit), (1 << 20, 2 << 20));
    assert_ne!(s1.table_root, s2.table_root);
    for _ in 2..16 {
        c.port(A).init_device_lib().unwrap();
    }
    assert_eq!(c.port(A).init_device_lib().unwrap_err(), Error::OutOfVram);
}

#[test]
fn info_page_is_mapped_read_only_for_the_app() {
    let mut c = core();
    let (lib, info) = c.port(A).init_device_lib().unwrap();
    let v = c.lib(lib).unwrap().info_vaddr;
    let mut p = c.port(A);
    let mut buf = vec![0u8; info.to_bytes().len()];
    p.read(v, &mut buf).unwrap();
    assert_eq!(InfoPage::from_bytes(&buf).unwrap(), info);
    assert_eq!(p.write_u32(v, 7), Err(Error::Perm));
}

#[test]
fn map_checks_ownership_alignment_and_duplicates() {
    let mut c = core();
    let (la, _) = c.port(A).init_device_lib().unwrap();
    let vb = c.port(B).take_reserved(1)[0];
    let va = c.port(A).take_reserved(1)[0];
    // B's page lives at the same vaddr in B's space, but A cannot name it.
    assert_eq!(c.port(A).iommu_map_page(la, vb + 0x10_0000, APERTURE_BASE), Err(Error::Perm));
    assert!(c.lib(la).unwrap().mappings.is_empty());
    assert_eq!(c.port(A).iommu_map_page(la, va, APERTURE_BASE + 4), Err(Error::Inval));
    assert_eq!(c.port(A).iommu_map_page(la, va, 0x1000), Err(Error::Inval));
    c.port(A).iommu_map_page(la, va, APERTURE_BASE).unwrap();
    assert_eq!(c.port(A).iommu_map_page(la, va, APERTURE_BASE), Err(Error::Exist));
    // The info page is core-owned.
    let info_v = c.lib(la).unwrap().info_vaddr;
    assert_eq!(c.port(A).iommu_map_page(la, info_v, APERTURE_BASE + PAGE_SIZE), Err(Error::Perm));
    // A lib cannot be driven by another app.
    assert_eq!(c.port(B).iommu_map_page(la, vb, APERTURE_BASE + PAGE_SIZE), Err(Error::Perm));
}

#[test]
fn unmap_unpins_and_faults_later_access() {
    let mut c = core();
    let (lib, vs) = lib_with_pages(&mut c, A);
    let frames: Vec<u32> = vs
        .iter()
        .map(|v| c.machine().platform.lookup(A, *v).unwrap().frame)
        .collect();
    assert!(frames.iter().all(|f| c.machine().platform.mem.pin_count(*f) == 1));
    assert_eq!(c.port(A).iommu_unmap_page(lib, 0x7000_0000), Err(Error::NoEnt));
    c.port(A).iommu_unmap_page(lib, vs[3]).unwrap();
    assert_eq!(c.port(A).iommu_unmap_page(lib, vs[3]), Err(Error::NoEnt));
    assert_eq!(c.machine().platform.mem.pin_count(frames[3]), 0);

    c.bind_device_lib(lib).unwrap();
    program_ring(&mut c, A, lib);
    submit(
        &mut c,
        A,
        lib,
        vs[0],
        &[Instruction::Copy {
            dst: APERTURE_BASE + 2 * PAGE_SIZE,
            src: APERTURE_BASE + 3 * PAGE_SIZE,
            count: 1,
        }],
    );
    c.machine_mut().run_until_idle();
    let flags = c.port(A).read_u32(vs[1] + 12).unwrap();
    assert_eq!(flags, IrqFlags::IOMMU_FAULT.bits());
    for v in &vs {
        if *v != vs[3] {
            c.port(A).iommu_unmap_page(lib, *v).unwrap();
        }
    }
    assert!(frames.iter().all(|f| c.machine().platform.mem.pin_count(*f) == 0));
}

#[test]
fn device_memory_is_sub_allocated_inside_the_segment() {
    let mut c = core();
    let (_, _) = c.port(A).init_device_lib().unwrap();
    let (lib, _) = c.port(B).init_device_lib().unwrap();
    let mut p = c.port(B);
    assert_eq!(p.alloc_device_memory(lib, 4096), Ok(0));
    assert_eq!(p.alloc_device_memory(lib, 1), Ok(4096));
    assert_eq!(p.alloc_device_memory(lib, (1 << 20) + 1), Err(Error::OutOfSegment));
    assert_eq!(p.alloc_device_memory(lib, 0), Err(Error::Inval));
    assert_eq!(p.release_device_memory(lib, 0, 4000), Err(Error::Inval));
    p.release_device_memory(lib, 0, 4096).unwrap();
    assert_eq!(p.alloc_device_memory(lib, 4096), Ok(0));
    while p.alloc_device_memory(lib, 64 << 10).is_ok() {}
    let hi = c
        .lib(lib)
        .unwrap()
        .device_allocations()
        .map(|(s, l)| s + l)
        .max()
        .unwrap();
    assert!(hi <= DEFAULT_SEGMENT_SIZE);
}

#[test]
fn device_memory_calls_absent_without_device_memory() {
    let mut c = Core::new(CoreConfig::without_device_memory());
    c.device_init().unwrap();
    c.create_app(A, 0).unwrap();
    let (lib, info) = c.port(A).init_device_lib().unwrap();
    assert_eq!(info.vram_total, 0);
    assert_eq!(c.port(A).alloc_device_memory(lib, 64), Err(Error::NoSys));
}

#[test]
fn register_access_requires_binding_and_acl() {
    let mut c = core();
    let (lib, _) = c.port(A).init_device_lib().unwrap();
    let before = c.machine().device.digest();
    assert_eq!(c.port(A).access_register(lib, SCRATCH0, 5, true), Err(Error::NotBound));
    c.bind_device_lib(lib).unwrap();
    let mut p = c.port(A);
    assert_eq!(p.access_register(lib, SCRATCH0, 5, true), Ok(5));
    assert_eq!(p.access_register(lib, SCRATCH0, 0, false), Ok(5));
    assert_eq!(p.access_register(lib, RB_HEAD, 4, true), Err(Error::Perm));
    assert_eq!(p.access_register(lib, MC_SEG_BASE, 0, true), Err(Error::Perm));
    assert_eq!(p.access_register(lib, DISP_PLL, 0, false), Err(Error::Perm));
    assert_eq!(p.access_register(lib, 0x444, 0, false), Err(Error::Perm));
    c.revoke_device_lib(lib).unwrap();
    let mid = c.machine().device.digest();
    assert_eq!(c.port(A).access_register(lib, RB_TAIL, 8, true), Err(Error::NotBound));
    assert_eq!(c.machine().device.digest(), mid);
    assert_ne!(before, mid);
}

#[test]
fn every_lib_call_is_one_crossing() {
    let mut c = core();
    let l0 = *c.ledger();
    let (lib, _) = c.port(A).init_device_lib().unwrap();
    let _ = c.port(A).access_register(lib, SCRATCH0, 0, false);
    let d = c.ledger().since(&l0);
    assert_eq!((d.crossings, d.core_calls), (2, 2));
    c.bind_device_lib(lib).unwrap();
    c.revoke_device_lib(lib).unwrap();
    let d = c.ledger().since(&l0);
    assert_eq!((d.crossings, d.core_calls), (2, 4));
}

#[test]
fn set_mode_programs_display_only_for_listed_modes() {
    let mut c = core();
    let (lib, _) = c.port(A).init_device_lib().unwrap();
    let m = DisplayMode::new(64, 48, 60);
    assert_eq!(c.port(A).set_mode(lib, 0, m), Err(Error::NotBound));
    c.bind_device_lib(lib).unwrap();
    let mut p = c.port(A);
    assert_eq!(p.set_mode(lib, 0, DisplayMode::new(640, 480, 60)), Err(Error::Inval));
    assert_eq!(p.set_mode(lib, 1, m), Err(Error::Inval));
    p.set_mode(lib, 0, m).unwrap();
    let mm = c.machine();
    assert_eq!(mm.mmio_read(DISP_ENABLE), Ok(1));
    assert_eq!(mm.mmio_read(DISP_TIMING_H), Ok(64));
    assert_eq!(mm.mmio_read(DISP_TIMING_V), Ok(48));
    assert_eq!(mm.mmio_read(DISP_PLL), Ok(64 * 48 * 60));
}

#[test]
fn bind_rules() {
    let mut c = core();
    let (la, _) = c.port(A).init_device_lib().unwrap();
    let (lb, _) = c.port(B).init_device_lib().unwrap();
    assert_eq!(c.bind_device_lib(LibId(99)), Err(Error::NoEnt));
    assert_eq!(c.revoke_device_lib(la), Err(Error::NotBound));
    c.bind_device_lib(la).unwrap();
    for o in regs::management_offsets() {
        assert_eq!(c.machine().mmio_read(o), Ok(0), "reg {o:#x}");
    }
    assert_eq!(c.machine().mmio_read(MC_SEG_LIMIT), Ok(1 << 20));
    assert_eq!(c.bind_device_lib(lb), Err(Error::Busy));
    assert_eq!(c.revoke_device_lib(lb), Err(Error::NotBound));
    assert_eq!(c.lib(la).unwrap().state, LibState::Bound);
    c.revoke_device_lib(la).unwrap();
    assert_eq!(c.lib(la).unwrap().state, LibState::RevokedIdle);
    assert_eq!(c.machine().mmio_read(MC_SEG_LIMIT), Ok(0));
    assert_eq!(c.machine().iommu_root(), 0);
}

#[test]
fn revoke_waits_for_in_flight_work() {
    let mut c = core();
    let (lib, vs) = lib_with_pages(&mut c, A);
    c.bind_device_lib(lib).unwrap();
    program_ring(&mut c, A, lib);
    submit(
        &mut c,
        A,
        lib,
        vs[0],
        &[
            Instruction::Compute {
                op: ComputeOp::Add,
                dst: 0,
                src1: 0x1_0000,
                src2: 0x2_0000,
                count: 999,
            },
            Instruction::Fence { seq: 3, irq: true },
        ],
    );
    c.machine_mut().tick(10);
    assert!(c.machine().device.busy());
    let cycles0 = c.ledger().device_cycles;
    c.revoke_device_lib(lib).unwrap();
    assert!(!c.machine().device.busy());
    assert!(c.ledger().device_cycles - cycles0 >= 990);
    assert_eq!(c.port(A).read_u32(vs[1] + STATUS_SEQ), Ok(3));
}

#[test]
fn rebind_restores_values_from_revoke_time() {
    let mut c = core();
    let (la, _) = c.port(A).init_device_lib().unwrap();
    let (lb, _) = c.port(B).init_device_lib().unwrap();
    c.bind_device_lib(la).unwrap();
    c.port(A).access_register(la, SCRATCH3, 0xAA, true).unwrap();
    c.port(A).access_register(la, FB_BASE, 0x4000, true).unwrap();
    c.revoke_device_lib(la).unwrap();
    let snap = c.lib(la).unwrap().snapshot.clone();
    assert_eq!(snap.get(SCRATCH3), Some(0xAA));
    c.bind_device_lib(lb).unwrap();
    assert_eq!(c.machine().mmio_read(SCRATCH3), Ok(0));
    c.port(B).access_register(lb, SCRATCH3, 0xBB, true).unwrap();
    c.revoke_device_lib(lb).unwrap();
    c.bind_device_lib(la).unwrap();
    assert_eq!(c.machine().mmio_read(SCRATCH3), Ok(0xAA));
    assert_eq!(c.machine().mmio_read(FB_BASE), Ok(0x4000));
    c.revoke_device_lib(la).unwrap();
    assert_eq!(c.lib(la).unwrap().snapshot, snap);
}

#[test]
fn bind_always_flushes() {
    let mut c = core();
    let (la, _) = c.port(A).init_device_lib().unwrap();
    for _ in 0..5 {
        let before = c.machine().device.counters;
        c.bind_device_lib(la).unwrap();
        let after = c.machine().device.counters;
        assert_eq!(after.tlb_flushes, before.tlb_flushes + 1);
        assert_eq!(after.cache_flushes, before.cache_flushes + 1);
        c.revoke_device_lib(la).unwrap();
    }
    assert_eq!(c.ledger().restores, 5);
    assert_eq!(c.ledger().snapshots, 5);
}
