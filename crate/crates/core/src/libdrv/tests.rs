use super::*;
use crate::devcore::{Core, CoreConfig, SchedulerCalls};
use crate::platform::AppId;
use crate::simdev::isa::ComputeOp;
use crate::simdev::regs::MC_SEG_BASE;
use crate::simdev::{digest_words, IrqFlags};

const A: AppId = AppId(1);
const POOL: u32 = 32;

fn setup() -> (Core, LibDriver) {
    let mut core = Core::new(CoreConfig::default());
    core.device_init().unwrap();
    core.create_app(A, POOL).unwrap();
    let cfg = LibConfig {
        pool_pages: POOL,
        ..LibConfig::default()
    };
    let lib = LibDriver::init(&mut core.port(A), cfg).unwrap();
    core.bind_device_lib(lib.id()).unwrap();
    (core, lib)
}

#[test]
fn launch_maps_whole_pool_with_one_crossing_per_page() {
    let mut core = Core::new(CoreConfig::default());
    core.device_init().unwrap();
    core.create_app(A, POOL).unwrap();
    let before = *core.ledger();
    let lib = LibDriver::init(&mut core.port(A), LibConfig { pool_pages: POOL, ..Default::default() }).unwrap();
    assert_eq!(core.ledger().since(&before).crossings, POOL as u64 + 1);
    assert_eq!(core.lib(lib.id()).unwrap().mappings.len(), POOL as usize);
    let first = *core.lib(lib.id()).unwrap().mappings.keys().next().unwrap();
    assert_eq!(first, APERTURE_BASE);
}

#[test]
fn launch_without_reservation_pays_for_the_page_allocation() {
    let mut core = Core::new(CoreConfig::default());
    core.device_init().unwrap();
    core.create_app(A, 0).unwrap();
    let before = *core.ledger();
    LibDriver::init(&mut core.port(A), LibConfig { pool_pages: POOL, ..Default::default() }).unwrap();
    assert_eq!(core.ledger().since(&before).crossings, POOL as u64 + 2);
}

#[test]
fn gtt_buffers_live_in_the_pool_window() {
    let (mut core, mut lib) = setup();
    let p = &mut core.port(A);
    let h = lib.create_buffer(p, 4096, Placement::Gtt).unwrap();
    let da = lib.device_address(h).unwrap();
    assert!(da >= APERTURE_BASE + FIXED_PAGES * PAGE_SIZE);
    assert!(da + 4096 <= APERTURE_BASE + POOL * PAGE_SIZE);
    let s = lib.create_buffer(p, 64, Placement::Sys).unwrap();
    assert_eq!(lib.device_address(s), Err(Error::BadHandle));
    assert_eq!(lib.create_buffer(p, (1 << 20) + 1, Placement::Vram), Err(Error::OutOfSegment));
    assert_eq!(lib.create_buffer(p, 200 * PAGE_SIZE, Placement::Gtt), Err(Error::OutOfPool));
}

#[test]
fn destroyed_address_is_reused() {
    let (mut core, mut lib) = setup();
    let p = &mut core.port(A);
    for placement in [Placement::Gtt, Placement::Vram] {
        let h = lib.create_buffer(p, 1000, placement).unwrap();
        let a = lib.device_address(h).unwrap();
        lib.destroy_buffer(p, h).unwrap();
        let h2 = lib.create_buffer(p, 1000, placement).unwrap();
        assert_eq!(lib.device_address(h2), Ok(a));
    }
    assert_eq!(lib.destroy_buffer(p, BufferHandle(99)), Err(Error::BadHandle));
}

#[test]
fn gtt_io_copies_nothing_and_checks_range() {
    let (mut core, mut lib) = setup();
    let before = *core.ledger();
    let p = &mut core.port(A);
    let h = lib.create_buffer(p, 256, Placement::Gtt).unwrap();
    let data: Vec<u8> = (0..=255).collect();
    lib.write_buffer(p, h, 0, &data).unwrap();
    assert_eq!(lib.read_buffer(p, h, 0, 256).unwrap(), data);
    assert_eq!(lib.read_buffer(p, h, 200, 57), Err(Error::Range));
    assert_eq!(lib.write_buffer(p, h, 256, &[1]), Err(Error::Range));
    let d = core.ledger().since(&before);
    assert_eq!((d.bytes_copied, d.crossings), (0, 0));
}

#[test]
fn vram_io_goes_through_staging() {
    let (mut core, mut lib) = setup();
    let before = *core.ledger();
    let p = &mut core.port(A);
    let h = lib.create_buffer(p, 64, Placement::Vram).unwrap();
    let words: Vec<u32> = (0..16).map(|i| i * 7 + 1).collect();
    lib.write_words(p, h, 0, &words).unwrap();
    assert_eq!(lib.read_words(p, h, 0, 16).unwrap(), words);
    assert_eq!(lib.read_buffer(p, h, 1, 4), Err(Error::Inval));
    assert!(core.ledger().since(&before).device_cycles > 0);
    assert_eq!(core.ledger().since(&before).bytes_copied, 0);
}

#[test]
fn move_round_trip_preserves_bytes() {
    let (mut core, mut lib) = setup();
    let p = &mut core.port(A);
    let h = lib.create_buffer(p, 5000, Placement::Gtt).unwrap();
    let data: Vec<u8> = (0..5000u32).map(|i| (i * 31 % 251) as u8).collect();
    lib.write_buffer(p, h, 0, &data).unwrap();
    for to in [Placement::Vram, Placement::Sys, Placement::Vram, Placement::Gtt, Placement::Sys, Placement::Gtt] {
        lib.move_buffer(p, h, to).unwrap();
        if to != Placement::Vram {
            assert_eq!(lib.read_buffer(p, h, 0, 5000).unwrap(), data, "{to:?}");
        }
    }
    let cycles = p.ledger().device_cycles;
    lib.move_buffer(p, h, Placement::Gtt).unwrap();
    assert_eq!(p.ledger().device_cycles, cycles);
}

#[test]
fn move_without_space_leaves_source_intact() {
    let (mut core, mut lib) = setup();
    let p = &mut core.port(A);
    let filler = lib.create_buffer(p, (1 << 20) - 4096, Placement::Vram).unwrap();
    let h = lib.create_buffer(p, 8192, Placement::Gtt).unwrap();
    lib.write_words(p, h, 0, &[5, 6, 7]).unwrap();
    assert_eq!(lib.move_buffer(p, h, Placement::Vram), Err(Error::OutOfSegment));
    assert_eq!(lib.read_words(p, h, 0, 3).unwrap(), vec![5, 6, 7]);
    assert_eq!(lib.buffers().find(|b| b.handle == h).unwrap().placement, Placement::Gtt);
    lib.destroy_buffer(p, filler).unwrap();
}

#[test]
fn submit_is_one_crossing_regardless_of_batch_size() {
    let (mut core, mut lib) = setup();
    let s0 = lib.submit(&mut core.port(A), &[Instruction::Nop]).unwrap();
    for k in [1usize, 10, 500] {
        let before = *core.ledger();
        let s = lib.submit(&mut core.port(A), &vec![Instruction::Nop; k]).unwrap();
        assert!(s > s0);
        assert_eq!(core.ledger().since(&before).crossings, 1);
        let before = *core.ledger();
        lib.wait_fence(&mut core.port(A), s).unwrap();
        let d = core.ledger().since(&before);
        assert_eq!(d.crossings, 0);
        assert!(d.poll_rounds >= 1);
    }
    assert_eq!(
        lib.submit(&mut core.port(A), &vec![Instruction::Nop; RING_WORDS as usize]),
        Err(Error::BatchTooBig)
    );
}

#[test]
fn wait_on_zero_returns_at_once() {
    let (mut core, mut lib) = setup();
    let before = *core.ledger();
    lib.wait_fence(&mut core.port(A), 0).unwrap();
    assert_eq!(core.ledger().since(&before).poll_rounds, 0);
}

#[test]
fn ring_wraps_many_times() {
    let (mut core, mut lib) = setup();
    let p = &mut core.port(A);
    let h = lib.create_buffer(p, 4, Placement::Gtt).unwrap();
    let da = lib.device_address(h).unwrap();
    let one = lib.create_buffer(p, 4, Placement::Gtt).unwrap();
    lib.write_words(p, one, 0, &[1]).unwrap();
    let one_da = lib.device_address(one).unwrap();
    let add = Instruction::Compute { op: ComputeOp::Add, dst: da, src1: da, src2: one_da, count: 1 };
    let mut last = 0;
    for _ in 0..60 {
        // No waiting here: submit must reclaim ring space by itself.
        last = lib.submit(p, &vec![add; 50]).unwrap();
    }
    lib.wait_fence(p, last).unwrap();
    assert_eq!(lib.read_words(p, h, 0, 1).unwrap(), vec![3000]);
}

#[test]
fn sensitive_write_from_ring_faults() {
    let (mut core, mut lib) = setup();
    let seg0 = core.machine().mmio_read(MC_SEG_BASE).unwrap();
    let s = lib
        .submit(&mut core.port(A), &[Instruction::SetReg { reg: MC_SEG_BASE, value: 0x40_0000 }])
        .unwrap();
    assert_eq!(
        lib.wait_fence(&mut core.port(A), s),
        Err(Error::DeviceFault(IrqFlags::CMD_FAULT))
    );
    assert_eq!(core.machine().mmio_read(MC_SEG_BASE), Ok(seg0));
    // The lib recovers: the next batch runs normally.
    let s2 = lib.submit(&mut core.port(A), &[Instruction::Nop]).unwrap();
    lib.wait_fence(&mut core.port(A), s2).unwrap();
}

#[test]
fn revoked_lib_cannot_trigger() {
    let (mut core, mut lib) = setup();
    let s = lib.submit(&mut core.port(A), &[Instruction::Nop]).unwrap();
    core.revoke_device_lib(lib.id()).unwrap();
    // Revoke drained the batch, so the fence is already visible.
    lib.wait_fence(&mut core.port(A), s).unwrap();
    assert_eq!(
        lib.submit(&mut core.port(A), &[Instruction::Nop]),
        Err(Error::NotBound)
    );
}

#[test]
fn present_sets_scanout_base() {
    let (mut core, mut lib) = setup();
    let p = &mut core.port(A);
    let mode = DisplayMode::new(64, 48, 60);
    lib.set_mode(p, 0, mode).unwrap();
    let fb = lib.create_buffer(p, mode.pixels() * 4, Placement::Vram).unwrap();
    let pixels: Vec<u32> = (0..48).flat_map(|y| (0..64).map(move |x| x + y * 64)).collect();
    lib.write_words(p, fb, 0, &pixels).unwrap();
    lib.present(p, fb).unwrap();
    let sys = lib.create_buffer(p, 64, Placement::Sys).unwrap();
    assert_eq!(lib.present(p, sys), Err(Error::BadHandle));
    assert_eq!(core.machine().mmio_read(FB_BASE), lib.device_address(fb));
    let out = core.machine_mut().scanout().unwrap();
    assert_eq!(out.fault, None);
    assert_eq!(out.frame.digest, digest_words(&pixels));
}
