//! Forward-pass latency harness for the point and probabilistic heads.
//!
//! Output buffers are allocated before the timed loop and reused; per-pass
//! scratch is released within the pass, so memory use does not grow with the
//! number of passes.

use std::fmt;
use std::fmt::Write as _;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::epsoftmax::{ep_softmax_into, softmax_into, ProbMoments, RatioVariant};
use crate::error::{Error, Result};
use crate::grid::{DesignMatrix, Grid};
use crate::head::{point_logits_into, predict_moments_into, GaussianHead, LogitMoments};
use crate::fastmath::dispatch;
use crate::uncertainty::{argmax, make_bundle_into, EntropySpace, UncertaintyBundle};
use crate::Exec;

pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_WARMUP_PASSES: usize = 20;

const PIXEL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// `point_logits -> softmax -> argmax`
    Point,
    /// `predict_moments -> ep_softmax -> make_bundle`
    Bayes,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Point => "point",
            BenchMode::Bayes => "bayes",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(BenchMode::Point),
            "bayes" => Ok(BenchMode::Bayes),
            other => Err(Error::Config(format!("unknown bench mode '{other}' (expected point|bayes)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub exec: Exec,
    pub iterations: usize,
    /// Seconds.
    pub total: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single pass.
    pub std: f64,
    pub min: f64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub features: usize,
    pub checksum: u64,
    /// Per-pass latencies in seconds.
    pub samples: Vec<f64>,
}

impl BenchReport {
    pub fn csv_header() -> &'static str {
        "mode,exec,iterations,height,width,classes,features,total_s,mean_ms,std_ms,min_ms,fps,checksum"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{},{},{},{},{},{:.6},{:.4},{:.4},{:.4},{:.3},{:016x}",
            self.mode,
            self.exec,
            self.iterations,
            self.height,
            self.width,
            self.classes,
            self.features,
            self.total,
            self.mean * 1e3,
            self.std * 1e3,
            self.min * 1e3,
            self.fps,
            self.checksum
        )
    }

    pub fn human(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} head, {}x{}x{} -> {} classes, {} passes ({:?})",
            self.mode, self.height, self.width, self.features, self.classes, self.iterations, self.exec
        );
        let _ = writeln!(
            s,
            "  per pass: mean {:.3} ms, std {:.3} ms, min {:.3} ms",
            self.mean * 1e3,
            self.std * 1e3,
            self.min * 1e3
        );
        let _ = write!(s, "  total {:.3} s, {:.2} fps, checksum {:016x}", self.total, self.fps, self.checksum);
        s
    }
}

struct PointBuffers {
    logits: Grid,
    probs: Grid,
    label: Vec<u16>,
}

struct BayesBuffers {
    logits: LogitMoments,
    probs: ProbMoments,
    bundle: UncertaintyBundle,
}

enum Buffers {
    Point(PointBuffers),
    Bayes(Box<BayesBuffers>),
}

dispatch!(fn softmax_argmax => softmax_argmax_generic(k: usize, logits: &[f32], probs: &mut [f32], label: &mut [u16]));

#[inline(always)]
fn softmax_argmax_generic(k: usize, logits: &[f32], probs: &mut [f32], label: &mut [u16]) {
    for ((l, p), y) in logits.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(label.iter_mut()) {
        softmax_into(l, p);
        *y = argmax(p) as u16;
    }
}

impl Buffers {
    fn new(design: &DesignMatrix, head: &GaussianHead, mode: BenchMode) -> Result<Self> {
        let (h, w, k) = (design.height(), design.width(), head.classes());
        Ok(match mode {
            BenchMode::Point => Buffers::Point(PointBuffers {
                logits: Grid::zeros(h, w, k)?,
                probs: Grid::zeros(h, w, k)?,
                label: vec![0; h * w],
            }),
            BenchMode::Bayes => {
                let logits = LogitMoments::zeros(h, w, k)?;
                let probs = ProbMoments::zeros(h, w, k, RatioVariant::default())?;
                let bundle = crate::uncertainty::make_bundle(&probs, &logits, EntropySpace::default(), &[])?;
                Buffers::Bayes(Box::new(BayesBuffers { logits, probs, bundle }))
            }
        })
    }

    fn pass(&mut self, design: &DesignMatrix, head: &GaussianHead, exec: Exec) -> Result<()> {
        match self {
            Buffers::Point(b) => {
                point_logits_into(design, head, exec, &mut b.logits)?;
                let k = head.classes();
                match exec {
                    Exec::Serial => softmax_argmax(k, b.logits.data(), b.probs.data_mut(), &mut b.label),
                    Exec::Parallel => b
                        .logits
                        .data()
                        .par_chunks(PIXEL_CHUNK * k)
                        .zip(b.probs.data_mut().par_chunks_mut(PIXEL_CHUNK * k))
                        .zip(b.label.par_chunks_mut(PIXEL_CHUNK))
                        .for_each(|((l, p), y)| softmax_argmax(k, l, p, y)),
                }
                black_box(&b.label);
            }
            Buffers::Bayes(b) => {
                predict_moments_into(design, head, exec, &mut b.logits)?;
                ep_softmax_into(&b.logits, RatioVariant::default(), exec, &mut b.probs)?;
                make_bundle_into(&b.probs, &b.logits, EntropySpace::default(), &[], exec, &mut b.bundle)?;
                black_box(&b.bundle);
            }
        }
        Ok(())
    }

    fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        match self {
            Buffers::Point(b) => {
                b.probs.data().iter().for_each(|v| h.word(u64::from(v.to_bits())));
                b.label.iter().for_each(|&v| h.word(u64::from(v)));
            }
            Buffers::Bayes(b) => {
                b.bundle.epistemic.iter().for_each(|v| h.word(u64::from(v.to_bits())));
                b.bundle.aleatoric.iter().for_each(|v| h.word(u64::from(v.to_bits())));
                b.bundle.label.iter().for_each(|&v| h.word(u64::from(v)));
            }
        }
        h.0
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn word(&mut self, w: u64) {
        for b in w.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Runs `warmup_passes` untimed passes, then times `iterations` passes one by
/// one with a monotonic clock.
pub fn run_bench(
    design: &DesignMatrix,
    head: &GaussianHead,
    mode: BenchMode,
    iterations: usize,
    warmup_passes: usize,
    exec: Exec,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    let mut buffers = Buffers::new(design, head, mode)?;
    for _ in 0..warmup_passes {
        buffers.pass(design, head, exec)?;
    }
    let mut samples = Vec::with_capacity(iterations);
    let start = Instant::now();
    for _ in 0..iterations {
        let t = Instant::now();
        buffers.pass(black_box(design), head, exec)?;
        samples.push(t.elapsed().as_secs_f64());
    }
    let total = start.elapsed().as_secs_f64();

    let n = iterations as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = if iterations > 1 {
        (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(BenchReport {
        mode,
        exec,
        iterations,
        total,
        mean,
        std,
        min,
        fps: n / total,
        height: design.height(),
        width: design.width(),
        classes: head.classes(),
        features: head.features(),
        checksum: buffers.checksum(),
        samples,
    })
}
