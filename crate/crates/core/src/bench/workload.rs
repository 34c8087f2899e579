//! The three benchmark workloads as resumable jobs.
//!
//! A job never blocks on its own: `step` does the host-side work up to the
//! next fence and hands the fence back, so the same job can be driven to
//! completion directly or time-sliced by the scheduler.

use serde::{Deserialize, Serialize};

use super::stack::{at, Cmd, Stack};
use crate::error::{Error, Result};
use crate::libdrv::Placement;
use crate::simdev::isa::ComputeOp;
use crate::simdev::{digest_words, DisplayMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    Matmul,
    VertexArray,
    DisplayList,
}

/// DOT instructions per matmul batch; 512 × 6 words leaves room in the ring.
pub const MATMUL_BATCH: usize = 512;
/// Instructions in every graphics frame.
pub const FRAME_INSTRS: u32 = 32;
pub const FRAME_MODE: DisplayMode = DisplayMode::new(64, 48, 60);
const FB_WORDS: u32 = 64 * 48;

pub fn vertex_words(n: u32) -> u32 {
    64 * n
}

pub fn matrix_a(n: u32) -> Vec<u32> {
    (0..n * n).map(|k| k + 1).collect()
}

pub fn matrix_b(n: u32) -> Vec<u32> {
    (0..n * n).map(|k| n * n + k + 1).collect()
}

/// Row-major wrapping integer product.
pub fn host_matmul(n: u32, a: &[u32], b: &[u32]) -> Vec<u32> {
    let n = n as usize;
    let mut c = vec![0u32; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = (0..n).fold(0u32, |s, k| s.wrapping_add(a[i * n + k].wrapping_mul(b[k * n + j])));
        }
    }
    c
}

fn transpose(n: u32, m: &[u32]) -> Vec<u32> {
    let n = n as usize;
    (0..n * n).map(|k| m[(k % n) * n + k / n]).collect()
}

/// Vertex data for frame `frame` (the display list always uses frame 0).
pub fn vertices(n: u32, frame: u32) -> Vec<u32> {
    (0..vertex_words(n))
        .map(|i| i.wrapping_mul(40503).wrapping_add(frame.wrapping_mul(2654435761)) >> 8)
        .collect()
}

fn transform(n: u32) -> Vec<u32> {
    (0..vertex_words(n)).map(|i| (i % 7) + 1).collect()
}

/// One frame's instruction `k` as (op, fb word, vertex word, chunk words).
/// Even slots accumulate vertices into the framebuffer, odd slots write a
/// transformed span.
fn frame_slot(n: u32, k: u32) -> (ComputeOp, u32, u32, u32) {
    let chunk = 2 * n;
    let fb = (k * chunk * 3) % (FB_WORDS - chunk + 1);
    let op = if k % 2 == 0 { ComputeOp::Add } else { ComputeOp::Mul };
    (op, fb, k * chunk, chunk)
}

/// Host replay of `frames` graphics frames.
pub fn host_frames(n: u32, frames: u32, per_frame_upload: bool) -> Vec<u32> {
    let mut fb = vec![0u32; FB_WORDS as usize];
    let t = transform(n);
    for f in 0..frames {
        let v = vertices(n, if per_frame_upload { f } else { 0 });
        for k in 0..FRAME_INSTRS {
            let (op, d, s, c) = frame_slot(n, k);
            for i in 0..c as usize {
                let (d, s) = (d as usize + i, s as usize + i);
                fb[d] = match op {
                    ComputeOp::Add => fb[d].wrapping_add(v[s]),
                    _ => v[s].wrapping_mul(t[s]),
                };
            }
        }
    }
    fb
}

pub fn validate(kind: WorkloadKind, n: u32, iters: u32) -> Result<()> {
    if n == 0 || iters == 0 {
        return Err(Error::Config("size and iterations must be at least 1".into()));
    }
    if kind != WorkloadKind::Matmul && 2 * n > FB_WORDS {
        return Err(Error::Config(format!("graphics size must be at most {}", FB_WORDS / 2)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Host-side progress; call `step` again.
    Continue,
    /// Call `step` again once this fence has completed.
    Wait(u64),
    /// An iteration just finished.
    IterationDone,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Digests {
    pub result: u64,
    pub scanout: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Setup,
    Begin,
    Submit(usize),
    Finish,
    Final,
    Done,
}

#[derive(Debug, Clone, Copy)]
struct Bufs<B> {
    /// Per-iteration input (matmul: A; graphics: vertices).
    x: B,
    /// matmul: C. graphics: framebuffer.
    out: B,
}

pub struct Job<B> {
    kind: WorkloadKind,
    n: u32,
    iters: u32,
    iter: u32,
    phase: Phase,
    bufs: Option<Bufs<B>>,
    batches: Vec<Vec<Cmd<B>>>,
    digests: Option<Digests>,
}

impl<B: Copy> Job<B> {
    pub fn new(kind: WorkloadKind, n: u32, iters: u32) -> Result<Self> {
        validate(kind, n, iters)?;
        Ok(Self {
            kind,
            n,
            iters,
            iter: 0,
            phase: Phase::Setup,
            bufs: None,
            batches: Vec::new(),
            digests: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn digests(&self) -> Option<Digests> {
        self.digests
    }

    pub fn step<S: Stack<Buf = B>>(&mut self, s: &mut S) -> Result<Step> {
        match self.phase {
            Phase::Setup => {
                self.setup(s)?;
                self.phase = Phase::Begin;
                Ok(Step::Continue)
            }
            Phase::Begin => {
                if self.kind == WorkloadKind::VertexArray {
                    s.write_words(self.bufs().x, 0, &vertices(self.n, self.iter))?;
                }
                self.phase = Phase::Submit(0);
                Ok(Step::Continue)
            }
            Phase::Submit(i) => {
                let seq = s.submit(&self.batches[i])?;
                self.phase = if i + 1 < self.batches.len() {
                    Phase::Submit(i + 1)
                } else {
                    Phase::Finish
                };
                Ok(Step::Wait(seq))
            }
            Phase::Finish => {
                if self.kind == WorkloadKind::Matmul {
                    let c = s.read_words(self.bufs().out, 0, self.n * self.n)?;
                    let want = host_matmul(self.n, &matrix_a(self.n), &matrix_b(self.n));
                    if c != want {
                        return Err(Error::VerifyFail(format!(
                            "matmul n={} iteration {} differs from the host product",
                            self.n,
                            self.iter + 1
                        )));
                    }
                    self.digests = Some(Digests {
                        result: digest_words(&c),
                        scanout: None,
                    });
                }
                self.iter += 1;
                self.phase = if self.iter == self.iters { Phase::Final } else { Phase::Begin };
                Ok(Step::IterationDone)
            }
            Phase::Final => {
                if self.kind != WorkloadKind::Matmul {
                    let fb = s.read_words(self.bufs().out, 0, FB_WORDS)?;
                    let want = host_frames(self.n, self.iters, self.kind == WorkloadKind::VertexArray);
                    if fb != want {
                        return Err(Error::VerifyFail(format!(
                            "{:?} n={} framebuffer differs from the host replay",
                            self.kind, self.n
                        )));
                    }
                    let frame = s.scanout()?;
                    if frame.pixels != fb {
                        return Err(Error::VerifyFail("scanout differs from the framebuffer".into()));
                    }
                    self.digests = Some(Digests {
                        result: digest_words(&fb),
                        scanout: Some(frame.digest),
                    });
                }
                self.phase = Phase::Done;
                Ok(Step::Done)
            }
            Phase::Done => Ok(Step::Done),
        }
    }

    fn bufs(&self) -> Bufs<B> {
        self.bufs.expect("set up")
    }

    fn setup<S: Stack<Buf = B>>(&mut self, s: &mut S) -> Result<()> {
        let n = self.n;
        match self.kind {
            WorkloadKind::Matmul => {
                let bytes = 4 * n * n;
                let a = s.alloc(bytes, Placement::Vram)?;
                let bt = s.alloc(bytes, Placement::Vram)?;
                let c = s.alloc(bytes, Placement::Gtt)?;
                s.write_words(a, 0, &matrix_a(n))?;
                s.write_words(bt, 0, &transpose(n, &matrix_b(n)))?;
                let dots: Vec<Cmd<B>> = (0..n * n)
                    .map(|k| Cmd::Compute {
                        op: ComputeOp::Dot,
                        dst: at(c, k),
                        src1: at(a, (k / n) * n),
                        src2: at(bt, (k % n) * n),
                        count: n,
                    })
                    .collect();
                self.batches = dots.chunks(MATMUL_BATCH).map(<[_]>::to_vec).collect();
                self.bufs = Some(Bufs { x: a, out: c });
            }
            WorkloadKind::VertexArray | WorkloadKind::DisplayList => {
                let vbytes = 4 * vertex_words(n);
                let placement = if self.kind == WorkloadKind::VertexArray {
                    Placement::Gtt
                } else {
                    Placement::Vram
                };
                let v = s.alloc(vbytes, placement)?;
                let t = s.alloc(vbytes, Placement::Vram)?;
                let fb = s.alloc(4 * FB_WORDS, Placement::Vram)?;
                if self.kind == WorkloadKind::DisplayList {
                    s.write_words(v, 0, &vertices(n, 0))?;
                }
                s.write_words(t, 0, &transform(n))?;
                s.write_words(fb, 0, &vec![0; FB_WORDS as usize])?;
                s.set_mode(FRAME_MODE)?;
                s.present(fb)?;
                let frame = (0..FRAME_INSTRS)
                    .map(|k| {
                        let (op, d, src, c) = frame_slot(n, k);
                        let (src1, src2) = match op {
                            ComputeOp::Add => (at(fb, d), at(v, src)),
                            _ => (at(v, src), at(t, src)),
                        };
                        Cmd::Compute {
                            op,
                            dst: at(fb, d),
                            src1,
                            src2,
                            count: c,
                        }
                    })
                    .collect();
                self.batches = vec![frame];
                self.bufs = Some(Bufs { x: v, out: fb });
            }
        }
        Ok(())
    }
}

/// Drives a job to completion on one stack, returning the ledger snapshot
/// at every iteration boundary.
pub fn run_to_end<S: Stack>(job: &mut Job<S::Buf>, s: &mut S) -> Result<Vec<crate::platform::CostLedger>> {
    let mut marks = Vec::new();
    loop {
        match job.step(s)? {
            Step::Continue => {}
            Step::Wait(seq) => s.wait(seq)?,
            Step::IterationDone => marks.push(s.ledger()),
            Step::Done => return Ok(marks),
        }
    }
}
