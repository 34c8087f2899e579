//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always
//! printed, not only on failure. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use devisol::bench::{
    check_against_solo, measure_switch, run_attacks, run_schedule, run_workload, speedup, BenchConfig, DriverKind,
    WorkloadKind, WorkloadSpec,
};
use devisol::devcore::{Core, CoreConfig, LibId, SchedulerCalls, LIB_CALLS, SCHEDULER_CALLS};
use devisol::iommu::{self, Iommu, APERTURE_BASE};
use devisol::libdrv::{LibConfig, LibDriver, Placement};
use devisol::platform::{AppId, Owner, SystemMemory, PAGE_SIZE};
use devisol::simdev::isa::{ComputeOp, Instruction};
use devisol::simdev::{digest_words, regs};
use devisol::IommuMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn containment() -> Verdict {
    let report = ok(run_attacks(&BenchConfig::default(), &[]))?;
    for o in &report.outcomes {
        ensure!(o.passed, "case {} under {:?}: {} (victim intact: {})", o.case.letter, o.iommu, o.observed, o.victim_intact);
    }
    let cases: std::collections::BTreeSet<char> = report.outcomes.iter().map(|o| o.case.letter).collect();
    ensure!(cases.len() == 8, "expected 8 cases, ran {}", cases.len());

    let t = Instant::now();
    let out = ok(Command::new(env!("CARGO_BIN_EXE_bench")).args(["attack", "--format", "csv"]).output())?;
    let took = t.elapsed();
    ensure!(out.status.success(), "`bench attack` exited with {:?}", out.status.code());
    ensure!(took < Duration::from_secs(10), "`bench attack` took {took:?}");
    Ok(format!("8 cases x 2 IOMMU modes contained; `bench attack` exit 0 in {:.2}s", took.as_secs_f64()))
}

fn api_surface() -> Verdict {
    let want = [
        "init_device_lib",
        "iommu_map_page",
        "iommu_unmap_page",
        "alloc_device_memory",
        "release_device_memory",
        "access_register",
        "set_mode",
        "bind_device_lib",
        "revoke_device_lib",
    ];
    ensure!(LIB_CALLS.len() == 7 && SCHEDULER_CALLS.len() == 2, "7 + 2 split broken");
    let full = Core::new(CoreConfig::default()).exported_entry_points();
    ensure!(full == want, "exported {full:?}");
    let mut cfg = CoreConfig::without_device_memory();
    cfg.machine.iommu = IommuMode::Builtin;
    let small = Core::new(cfg).exported_entry_points();
    ensure!(small.len() == 7, "no-device-memory build exports {}", small.len());
    ensure!(!small.contains(&"alloc_device_memory") && !small.contains(&"release_device_memory"), "{small:?}");
    Ok("9 entry points (7 lib + 2 scheduler); 7 without device memory".into())
}

fn functional_equivalence() -> Verdict {
    let t = Instant::now();
    for n in [2, 4, 16, 64] {
        let host = digest_words(&devisol::bench::workload::host_matmul(
            n,
            &devisol::bench::workload::matrix_a(n),
            &devisol::bench::workload::matrix_b(n),
        ));
        for driver in [DriverKind::Library, DriverKind::Legacy] {
            for iommu in [IommuMode::System, IommuMode::Builtin] {
                let spec = WorkloadSpec::new(WorkloadKind::Matmul, n, 2, driver).with_iommu(iommu);
                let r = ok(run_workload(&spec))?;
                ensure!(r.digests.result == host, "n={n} {driver:?} {iommu:?} digest differs from host oracle");
            }
        }
    }
    let took = t.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("16 configurations equal the host product ({:.1}s)", took.as_secs_f64()))
}

fn matmul_trend() -> Verdict {
    let s: Vec<f64> = [4, 16, 64]
        .iter()
        .map(|&n| ok(speedup(&WorkloadSpec::new(WorkloadKind::Matmul, n, 3, DriverKind::Library))))
        .collect::<Result<_, _>>()?;
    ensure!(s[0] > 1.05, "speedup at n=4 is {:.3}", s[0]);
    ensure!(s.windows(2).all(|w| w[1] <= w[0]), "not non-increasing: {s:?}");
    Ok(format!("speedup n=4/16/64: {:.2} / {:.2} / {:.2}", s[0], s[1], s[2]))
}

fn graphics_trend() -> Verdict {
    let spec = |k| WorkloadSpec::new(k, 8, 4, DriverKind::Library);
    let va = ok(speedup(&spec(WorkloadKind::VertexArray)))?;
    let dl = ok(speedup(&spec(WorkloadKind::DisplayList)))?;
    ensure!(va >= 1.10 * dl, "vertex-array {va:.3} vs display-list {dl:.3}");
    for k in [WorkloadKind::VertexArray, WorkloadKind::DisplayList] {
        let r = ok(run_workload(&spec(k)))?;
        for (i, l) in r.iteration_ledgers.iter().enumerate().skip(1) {
            ensure!(l.crossings == 1 && l.bytes_copied == 0, "{k:?} frame {}: {} crossings, {} bytes", i + 1, l.crossings, l.bytes_copied);
        }
    }
    Ok(format!("vertex-array {va:.2} vs display-list {dl:.2}; library frames: 1 crossing, 0 bytes"))
}

fn switch_cost() -> Verdict {
    let cfg = BenchConfig::default();
    let mut means = Vec::new();
    for pool_pages in [64, 1024] {
        let r = ok(measure_switch(&BenchConfig { pool_pages, ..cfg }, IommuMode::System, 100))?;
        ensure!(r.stddev == 0.0, "pool {pool_pages}: stddev {}", r.stddev);
        ensure!(r.snapshots == 100 && r.restores == 100, "pool {pool_pages}: {} snapshots, {} restores", r.snapshots, r.restores);
        means.push(r.mean);
    }
    ensure!(means[0] == means[1], "mean differs: {means:?}");
    Ok(format!("mean {} units, sigma 0, for pools of 64 and 1024 pages", means[0]))
}

fn scheduler_equivalence() -> Verdict {
    let mut runs = 0;
    for libs in [2u32, 3] {
        for epoch in [100, 500, 5000] {
            let specs: Vec<WorkloadSpec> = (0..libs)
                .map(|i| {
                    let kind = [WorkloadKind::Matmul, WorkloadKind::DisplayList, WorkloadKind::VertexArray][i as usize];
                    WorkloadSpec::new(kind, 4 + 2 * i, 3, DriverKind::Library)
                })
                .collect();
            let r = ok(run_schedule(&specs, epoch))?;
            ok(check_against_solo(&specs, &r))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} schedules match solo digests"))
}

struct Tenant {
    app: AppId,
    lib: LibDriver,
    acc_buf: devisol::libdrv::BufferHandle,
    acc: u32,
    one: u32,
    expected: u32,
}

fn m_regs(core: &Core) -> Vec<(u32, u32)> {
    regs::management_offsets().map(|o| (o, core.machine().mmio_read(o).unwrap())).collect()
}

fn snapshot_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut core = Core::new(CoreConfig::default());
    ok(core.device_init())?;
    let mut tenants = Vec::new();
    for a in 1..=3 {
        let app = AppId(a);
        ok(core.create_app(app, 16))?;
        let mut lib = ok(LibDriver::init(&mut core.port(app), LibConfig { pool_pages: 16, ..LibConfig::default() }))?;
        let p = &mut core.port(app);
        let acc_buf = ok(lib.create_buffer(p, 4, Placement::Gtt))?;
        let one = ok(lib.create_buffer(p, 4, Placement::Gtt))?;
        ok(lib.write_words(p, one, 0, &[1]))?;
        let (acc, one) = (ok(lib.device_address(acc_buf))?, ok(lib.device_address(one))?);
        tenants.push(Tenant { app, lib, acc_buf, acc, one, expected: 0 });
    }
    let mut snapshots: BTreeMap<LibId, Vec<(u32, u32)>> = BTreeMap::new();
    for cycle in 0..1000 {
        let t = &mut tenants[rng.gen_range(0..3)];
        let id = t.lib.id();
        let before = core.machine().device.counters;
        ok(core.bind_device_lib(id))?;
        let after = core.machine().device.counters;
        ensure!(after.tlb_flushes > before.tlb_flushes && after.cache_flushes > before.cache_flushes, "cycle {cycle}: bind did not flush");
        if let Some(snap) = snapshots.get(&id) {
            ensure!(&m_regs(&core) == snap, "cycle {cycle}: restored registers differ from the revoke-time snapshot");
        }
        let p = &mut core.port(t.app);
        for _ in 0..rng.gen_range(0..4) {
            let adds = rng.gen_range(1..40);
            let add = Instruction::Compute { op: ComputeOp::Add, dst: t.acc, src1: t.acc, src2: t.one, count: 1 };
            let seq = ok(t.lib.submit(p, &vec![add; adds]))?;
            t.expected += adds as u32;
            if rng.gen_bool(0.5) {
                ok(t.lib.wait_fence(p, seq))?;
            }
        }
        ok(core.revoke_device_lib(id))?;
        snapshots.insert(id, core.lib(id).unwrap().snapshot.m_regs.clone());
    }
    for t in &mut tenants {
        ok(core.bind_device_lib(t.lib.id()))?;
        let got = ok(t.lib.read_words(&mut core.port(t.app), t.acc_buf, 0, 1))?[0];
        ok(core.revoke_device_lib(t.lib.id()))?;
        ensure!(got == t.expected, "lib {:?}: accumulator {got}, expected {}", t.lib.id(), t.expected);
    }

    let stale = stale_tlb(true)?;
    let fresh = stale_tlb(false)?;
    ensure!(stale, "skipping the switch flush did not mistranslate");
    ensure!(!fresh, "mistranslation with flushing enabled");
    Ok("1000 cycles: restore == snapshot, flush on every bind; no-flush hook mistranslates".into())
}

/// Two libs map the same aperture address to different frames. Returns
/// whether the second lib read the first lib's data.
fn stale_tlb(skip_flush: bool) -> Result<bool, String> {
    let mut any = false;
    for iommu in [IommuMode::System, IommuMode::Builtin] {
        let mut cfg = CoreConfig::default();
        cfg.machine.iommu = iommu;
        let mut core = Core::new(cfg);
        ok(core.device_init())?;
        let mut libs = Vec::new();
        for (a, fill) in [(1, 0xAAAA_AAAAu32), (2, 0xBBBB_BBBB)] {
            let app = AppId(a);
            ok(core.create_app(app, 16))?;
            let mut lib = ok(LibDriver::init(&mut core.port(app), LibConfig { pool_pages: 16, ..LibConfig::default() }))?;
            let p = &mut core.port(app);
            let src = ok(lib.create_buffer(p, 64, Placement::Gtt))?;
            let dst = ok(lib.create_buffer(p, 64, Placement::Gtt))?;
            ok(lib.write_words(p, src, 0, &[fill; 16]))?;
            libs.push((app, lib, src, dst));
        }
        ensure!(
            libs[0].1.device_address(libs[0].2) == libs[1].1.device_address(libs[1].2),
            "layouts differ"
        );
        core.debug_skip_switch_flush(skip_flush);
        for (app, lib, src, dst) in &mut libs {
            ok(core.bind_device_lib(lib.id()))?;
            let p = &mut core.port(*app);
            let (s, d) = (ok(lib.device_address(*src))?, ok(lib.device_address(*dst))?);
            ok(lib.submit(p, &[Instruction::Copy { dst: d, src: s, count: 16 }]))?;
            // A stale entry can also send the fence to the other tenant's
            // status page, so drain the device instead of waiting on it.
            core.machine_mut().run_until_idle();
            ok(core.revoke_device_lib(lib.id()))?;
        }
        let (app, lib, _, dst) = &mut libs[1];
        ok(core.bind_device_lib(lib.id()))?;
        let got = ok(lib.read_words(&mut core.port(*app), *dst, 0, 16))?;
        any |= got != vec![0xBBBB_BBBB; 16];
    }
    Ok(any)
}

fn translation_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mem = SystemMemory::new(1024);
    let roots = [mem.alloc_frame(Owner::Core).unwrap(), mem.alloc_frame(Owner::Core).unwrap()].map(|f| f * PAGE_SIZE);
    let mut mmu = Iommu::new(64);
    let mut active = 0;
    mmu.set_root(roots[active]);
    let frames: Vec<u32> = (0..200).map(|_| mem.alloc_frame(Owner::Core).unwrap()).collect();
    let page = |k: u32| APERTURE_BASE + k * PAGE_SIZE + (if k > 96 { 0x40_0000 } else { 0 });
    let (mut hits, mut checks) = (0, 0);
    for step in 0..10_000 {
        match rng.gen_range(0..10) {
            0..=1 => {
                let root = roots[rng.gen_range(0..2)];
                let frame = frames[rng.gen_range(0..frames.len())];
                let _ = iommu::table_map(&mut mem, root, page(rng.gen_range(0..128)), frame, rng.gen_bool(0.8), |m| {
                    m.alloc_frame(Owner::Core)
                });
            }
            2 => {
                let root = roots[rng.gen_range(0..2)];
                if iommu::table_unmap(&mut mem, root, page(rng.gen_range(0..128))).is_some() && root == roots[active] {
                    mmu.flush();
                }
            }
            3 if rng.gen_bool(0.1) => {
                active = 1 - active;
                mmu.set_root(roots[active]);
                mmu.flush();
            }
            _ => {
                let addr = page(rng.gen_range(0..128)) + 4 * rng.gen_range(0..1024);
                let write = rng.gen_bool(0.3);
                let walks = mmu.stats.walks;
                let via_tlb = mmu.translate(&mem, addr, write);
                hits += (mmu.stats.walks == walks) as u32;
                let oracle = iommu::translate_by_walk(&mem, roots[active], addr, write);
                ensure!(via_tlb == oracle, "step {step}: {addr:#x} tlb {via_tlb:?} walk {oracle:?}");
                checks += 1;
            }
        }
    }
    ensure!(hits > 100, "TLB barely exercised ({hits} hits)");
    Ok(format!("10000 operations, {checks} lookups equal the walk ({hits} TLB hits)"))
}

fn launch_overhead() -> Verdict {
    let r = ok(run_workload(&WorkloadSpec::new(WorkloadKind::Matmul, 8, 5, DriverKind::Library)))?;
    ensure!(r.first_iteration as f64 > r.steady_mean, "first {} <= steady {}", r.first_iteration, r.steady_mean);
    for pool in [16u32, 64, 256] {
        let mut core = Core::new(CoreConfig::default());
        ok(core.device_init())?;
        ok(core.create_app(AppId(1), pool))?;
        let before = *core.ledger();
        ok(LibDriver::init(&mut core.port(AppId(1)), LibConfig { pool_pages: pool, ..LibConfig::default() }))?;
        let c = core.ledger().since(&before).crossings;
        ensure!(c == pool as u64 + 1, "pool {pool}: {c} crossings");
    }
    Ok(format!("first iteration {} > steady {:.0}; init crossings = pool + 1", r.first_iteration, r.steady_mean))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("containment", containment),
        ("api surface", api_surface),
        ("functional equivalence", functional_equivalence),
        ("matmul speedup trend", matmul_trend),
        ("graphics speedup trend", graphics_trend),
        ("switch cost", switch_cost),
        ("scheduler equivalence", scheduler_equivalence),
        ("snapshot round-trip and flush", snapshot_round_trip),
        ("translation oracle", translation_oracle),
        ("launch overhead", launch_overhead),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
