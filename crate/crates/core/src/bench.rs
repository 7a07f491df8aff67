//! Latency harness for stacks of same-padding depth-wise convolutions.

use std::io::Write;
use std::time::Instant;

use crate::conv::{conv2d_blocked_with_tile, Backend, ConvSpec, ConvWeights, DEFAULT_TILE};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Dist, Rng, Shape, Tensor};

pub const MIN_REPS: usize = 5;
pub const WARMUP: usize = 3;
pub const CSV_HEADER: &str = "resolution,kernel,backend,mean_ms,std_ms,reps,threads";

/// Kernel sizes of the classic large-kernel latency grid.
pub const DEFAULT_KERNELS: [usize; 10] = [3, 5, 7, 9, 13, 17, 21, 27, 29, 31];
pub const DEFAULT_RESOLUTIONS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub kernels: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub batch: usize,
    pub channels: usize,
    pub layers: usize,
    pub backends: Vec<Backend>,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub tile: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    /// Desk-scale version of the `(64, 384, R, R)` 24-layer setup: input
    /// `(4, 64, R, R)`, same depth and grid.
    fn default() -> Self {
        BenchConfig {
            kernels: DEFAULT_KERNELS.to_vec(),
            resolutions: DEFAULT_RESOLUTIONS.to_vec(),
            batch: 4,
            channels: 64,
            layers: 24,
            backends: vec![Backend::Blocked],
            reps: MIN_REPS,
            warmup: WARMUP,
            threads: 1,
            tile: DEFAULT_TILE,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(Error::param(format!(
                "reps must be at least {MIN_REPS}, got {}",
                self.reps
            )));
        }
        if self.warmup < WARMUP {
            return Err(Error::param(format!("warm-up must be at least {WARMUP}")));
        }
        if self.kernels.is_empty() || self.resolutions.is_empty() || self.backends.is_empty() {
            return Err(Error::param("kernel, resolution and backend lists must be non-empty"));
        }
        if self.batch == 0 || self.channels == 0 || self.layers == 0 || self.tile == 0 {
            return Err(Error::param("batch, channels, layers and tile must be positive"));
        }
        for &k in &self.kernels {
            ConvSpec::depthwise(self.channels, k, 1, 1)?;
        }
        if self.resolutions.contains(&0) {
            return Err(Error::param("resolution must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub resolution: usize,
    pub kernel: usize,
    pub backend: Backend,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
    pub threads: usize,
    /// Set when the configuration could not be allocated.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn find(&self, resolution: usize, kernel: usize, backend: Backend) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.resolution == resolution && r.kernel == kernel && r.backend == backend)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            if r.skipped {
                writeln!(
                    out,
                    "{},{},{},nan,nan,{},{}",
                    r.resolution, r.kernel, r.backend, r.reps, r.threads
                )?;
            } else {
                writeln!(
                    out,
                    "{},{},{},{:.4},{:.4},{},{}",
                    r.resolution, r.kernel, r.backend, r.mean_ms, r.std_ms, r.reps, r.threads
                )?;
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// Mean latency laid out as one line per (backend, resolution) and one
    /// column per kernel size.
    pub fn grid(&self) -> String {
        let mut kernels: Vec<usize> = self.rows.iter().map(|r| r.kernel).collect();
        kernels.sort_unstable();
        kernels.dedup();
        let mut keys: Vec<(Backend, usize)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.backend, r.resolution)) {
                keys.push((r.backend, r.resolution));
            }
        }
        let mut s = format!("{:<8} {:>5}", "backend", "R");
        for k in &kernels {
            s.push_str(&format!(" {:>9}", format!("K={k}")));
        }
        s.push('\n');
        for (b, res) in keys {
            s.push_str(&format!("{:<8} {:>5}", b.id(), res));
            for &k in &kernels {
                match self.find(res, k, b) {
                    Some(r) if !r.skipped => s.push_str(&format!(" {:>9.3}", r.mean_ms)),
                    Some(_) => s.push_str(&format!(" {:>9}", "skip")),
                    None => s.push_str(&format!(" {:>9}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Times `layers` stacked depth-wise convolutions for every
/// (resolution, kernel, backend) combination.
pub fn bench_stack(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let (rows, threads) = par::with_threads(cfg.threads, || run_grid(cfg));
    let mut rows = rows?;
    for r in &mut rows {
        r.threads = threads;
    }
    Ok(BenchReport { rows })
}

fn run_grid(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &res in &cfg.resolutions {
        for &k in &cfg.kernels {
            for &backend in &cfg.backends {
                rows.push(run_one(cfg, res, k, backend)?);
            }
        }
    }
    Ok(rows)
}

fn try_alloc(len: usize) -> Option<Vec<f32>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len).ok()?;
    v.resize(len, 0.0);
    Some(v)
}

fn run_one(cfg: &BenchConfig, res: usize, k: usize, backend: Backend) -> Result<BenchRow> {
    let mut row = BenchRow {
        resolution: res,
        kernel: k,
        backend,
        mean_ms: f64::NAN,
        median_ms: f64::NAN,
        std_ms: f64::NAN,
        reps: cfg.reps,
        threads: cfg.threads,
        skipped: false,
    };
    let shape = Shape::new(cfg.batch, cfg.channels, res, res)?;
    // Input plus two live activations.
    if try_alloc(shape.numel() * 3).is_none() {
        row.skipped = true;
        return Ok(row);
    }

    let spec = ConvSpec::depthwise(cfg.channels, k, 1, 1)?;
    let mut rng = Rng::new(cfg.seed).fork((res * 1000 + k) as u64);
    let x = Tensor::new_random(shape, &mut rng, Dist::Uniform { lo: 0.0, hi: 1.0 })?;
    // Positive weights with unit expected row sum keep activations O(1)
    // through the stack, away from denormals.
    let hi = 2.0 / (k * k) as f32;
    let stack: Vec<ConvWeights> = (0..cfg.layers)
        .map(|_| ConvWeights::random(&spec, &mut rng, Dist::Uniform { lo: 0.0, hi }))
        .collect::<Result<_>>()?;

    let forward = |input: &Tensor| -> Result<Tensor> {
        let mut cur = input.clone();
        for w in &stack {
            cur = match backend {
                Backend::Blocked => conv2d_blocked_with_tile(&cur, w, &spec, cfg.tile)?,
                other => other.conv2d(&cur, w, &spec)?,
            };
        }
        Ok(cur)
    };

    for _ in 0..cfg.warmup {
        std::hint::black_box(forward(&x)?);
    }
    let mut samples = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        let y = forward(&x)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    let (mean, median, std) = summarize(&samples);
    row.mean_ms = mean;
    row.median_ms = median;
    row.std_ms = std;
    Ok(row)
}

/// `(mean, median, sample std-dev)`.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    (mean, median, var.sqrt())
}
