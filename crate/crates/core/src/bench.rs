//! Time and memory of one transformer block (attention + FFN) in SA versus
//! XSA mode.
//!
//! Every `(seq_len, d_model)` pair gets its own seeded weights and input,
//! shared by all modes. Modes are timed in alternating order after a common
//! warmup so slow drift of the machine affects them equally.
//!
//! Memory is the peak of live heap bytes during one block call above the level
//! at its start, as seen by [`CountingAllocator`]. The allocator has to be
//! installed by the final binary:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: xsa_core::bench::CountingAllocator = xsa_core::bench::CountingAllocator;
//! ```
//!
//! Without it `peak_bytes` is reported as `null`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, TraceCapture};
use crate::model::{Block, ModelConfig};
use crate::tensor::{no_grad, DType, Float, Tensor};
use crate::{Error, Result};

static ACTIVE: AtomicBool = AtomicBool::new(false);

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

/// System allocator that tracks live and peak bytes per thread.
pub struct CountingAllocator;

fn track(delta: i64) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            if !ACTIVE.load(Ordering::Relaxed) {
                ACTIVE.store(true, Ordering::Relaxed);
            }
            track(layout.size() as i64);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        track(-(layout.size() as i64));
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            ACTIVE.store(true, Ordering::Relaxed);
            track(layout.size() as i64);
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            track(new_size as i64 - layout.size() as i64);
        }
        p
    }
}

/// Whether [`CountingAllocator`] is the global allocator of this process.
pub fn allocator_active() -> bool {
    if !ACTIVE.load(Ordering::Relaxed) {
        drop(std::hint::black_box(Box::new(0u64)));
    }
    ACTIVE.load(Ordering::Relaxed)
}

/// Live heap bytes allocated by this thread minus those it freed.
pub fn live_bytes() -> i64 {
    LIVE.with(Cell::get)
}

/// Restarts peak tracking at the current live level.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|p| p.set(now));
}

pub fn peak_bytes() -> i64 {
    PEAK.with(Cell::get)
}

/// Runs `f` and returns its result with the peak number of bytes it held
/// above the starting level (`None` without the counting allocator).
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, Option<u64>) {
    let active = allocator_active();
    let base = live_bytes();
    reset_peak();
    let out = f();
    let peak = peak_bytes() - base;
    (out, active.then_some(peak.max(0) as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub d_models: Vec<usize>,
    pub modes: Vec<AttentionMode>,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub precision: DType,
    /// Time forward + backward instead of forward only.
    pub backward: bool,
    pub d_head: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    /// Cells whose estimated footprint exceeds this are skipped.
    pub memory_budget_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_lens: vec![256, 512, 1024, 2048],
            d_models: vec![256, 512],
            modes: vec![AttentionMode::Sa, AttentionMode::Xsa],
            batch: 4,
            repeats: 20,
            warmup: 2,
            precision: DType::F32,
            backward: false,
            d_head: 64,
            ffn_mult: 4,
            seed: 0,
            memory_budget_bytes: 3 << 30,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 || self.warmup < 2 {
            return Err(Error::config(format!(
                "need repeats >= 5 and warmup >= 2, got {} and {}",
                self.repeats, self.warmup
            )));
        }
        if self.seq_lens.is_empty() || self.d_models.is_empty() || self.modes.is_empty() || self.batch == 0 {
            return Err(Error::config("empty benchmark grid"));
        }
        for &d in &self.d_models {
            if self.d_head == 0 || d % self.d_head != 0 || self.d_head % 2 != 0 {
                return Err(Error::config(format!(
                    "d_model {d} must be a multiple of the even d_head {}",
                    self.d_head
                )));
            }
        }
        if self.seq_lens.contains(&0) {
            return Err(Error::config("seq_len must be positive"));
        }
        Ok(())
    }

    /// Rough upper bound of bytes one block call holds at once.
    pub fn estimate_bytes(&self, seq_len: usize, d_model: usize) -> u64 {
        let (b, t, d) = (self.batch as u64, seq_len as u64, d_model as u64);
        let h = d / self.d_head.max(1) as u64;
        let size = self.precision.size_of() as u64;
        let scores = 2 * b * h * t * t;
        let acts = 12 * b * t * d + 2 * b * t * d * self.ffn_mult as u64;
        let mult = if self.backward { 3 } else { 1 };
        mult * (scores + acts) * size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub logical_cpus: usize,
    pub hostname: String,
}

impl Host {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        let hostname = std::fs::read_to_string("/etc/hostname")
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| "unknown".into());
        Host {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            hostname,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchManifest {
    pub precision: DType,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// `forward` or `forward+backward`.
    pub pass: String,
    pub d_head: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    pub memory_metric: String,
    pub host: Host,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: AttentionMode,
    pub seq_len: usize,
    pub d_model: usize,
    pub median_ms: Option<f64>,
    pub p10_ms: Option<f64>,
    pub p90_ms: Option<f64>,
    pub peak_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioResult {
    pub seq_len: usize,
    pub d_model: usize,
    /// XSA median time over SA median time.
    pub time_ratio: f64,
    /// XSA peak bytes over SA peak bytes.
    pub mem_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub manifest: BenchManifest,
    pub cells: Vec<CellResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratios: Vec<RatioResult>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(format!("bench json: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("bench json: {e}")))
    }

    pub fn cell(&self, mode: AttentionMode, seq_len: usize, d_model: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.seq_len == seq_len && c.d_model == d_model)
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

struct Fixture<S: Float> {
    block: Block<S>,
    x: Tensor<S>,
    cfg: ModelConfig,
}

fn fixture<S: Float>(bc: &BenchConfig, seq_len: usize, d_model: usize) -> Result<Fixture<S>> {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model,
        n_heads: d_model / bc.d_head,
        d_head: bc.d_head,
        max_seq_len: seq_len,
        ffn_mult: bc.ffn_mult,
        ..ModelConfig::tiny()
    };
    cfg.validate()?;
    let seed = bc.seed ^ ((seq_len as u64) << 32) ^ d_model as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = Block::init(&cfg, &mut rng);
    let x = Tensor::randn(&[bc.batch, seq_len, d_model], 1.0, &mut rng);
    Ok(Fixture { block, x, cfg })
}

fn run_once<S: Float>(f: &Fixture<S>, mode: AttentionMode, backward: bool) -> Result<(f64, Option<u64>)> {
    let acfg = crate::attention::AttentionConfig {
        mode,
        ..f.cfg.attention()
    };
    let start = Instant::now();
    let (res, peak) = measure_peak(|| -> Result<()> {
        if backward {
            let (y, _) = f.block.forward(&f.x, &acfg, TraceCapture::Off)?;
            y.sum().backward()?;
        } else {
            let _guard = no_grad();
            let (y, _) = f.block.forward(&f.x, &acfg, TraceCapture::Off)?;
            std::hint::black_box(y.data());
        }
        Ok(())
    });
    let ms = start.elapsed().as_secs_f64() * 1e3;
    res?;
    if backward {
        for (_, _, p) in f.block.named_params("block") {
            p.zero_grad();
        }
    }
    Ok((ms, peak))
}

fn bench_pair<S: Float>(bc: &BenchConfig, seq_len: usize, d_model: usize) -> Result<Vec<CellResult>> {
    let f = fixture::<S>(bc, seq_len, d_model)?;
    let modes = &bc.modes;
    for _ in 0..bc.warmup {
        for &m in modes {
            run_once(&f, m, bc.backward)?;
        }
    }
    let mut times = vec![Vec::with_capacity(bc.repeats); modes.len()];
    let mut peaks: Vec<Option<u64>> = vec![None; modes.len()];
    for r in 0..bc.repeats {
        for k in 0..modes.len() {
            // Rotate the starting mode every repeat.
            let i = (k + r) % modes.len();
            let (ms, peak) = run_once(&f, modes[i], bc.backward)?;
            times[i].push(ms);
            peaks[i] = match (peaks[i], peak) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
        }
    }
    Ok(modes
        .iter()
        .enumerate()
        .map(|(i, &mode)| {
            let mut t = times[i].clone();
            t.sort_by(f64::total_cmp);
            CellResult {
                mode,
                seq_len,
                d_model,
                median_ms: Some(percentile(&t, 0.5)),
                p10_ms: Some(percentile(&t, 0.1)),
                p90_ms: Some(percentile(&t, 0.9)),
                peak_bytes: peaks[i],
                skipped: None,
            }
        })
        .collect())
}

/// Benchmarks one block per `(mode, seq_len, d_model)` cell. Cells over the
/// memory budget are recorded as skipped.
pub fn bench_block(bc: &BenchConfig) -> Result<BenchReport> {
    bench_block_with(bc, |_| {})
}

/// [`bench_block`] with a callback per finished cell.
pub fn bench_block_with(bc: &BenchConfig, mut on_cell: impl FnMut(&CellResult)) -> Result<BenchReport> {
    bc.validate()?;
    let mut modes = bc.modes.clone();
    modes.dedup();
    let bc = BenchConfig { modes, ..bc.clone() };
    let mut cells = Vec::new();
    for &t in &bc.seq_lens {
        for &d in &bc.d_models {
            let est = bc.estimate_bytes(t, d);
            let pair = if est > bc.memory_budget_bytes {
                let why = format!("estimated {est} bytes exceeds budget {}", bc.memory_budget_bytes);
                bc.modes
                    .iter()
                    .map(|&mode| CellResult {
                        mode,
                        seq_len: t,
                        d_model: d,
                        median_ms: None,
                        p10_ms: None,
                        p90_ms: None,
                        peak_bytes: None,
                        skipped: Some(why.clone()),
                    })
                    .collect()
            } else {
                match bc.precision {
                    DType::F32 => bench_pair::<f32>(&bc, t, d)?,
                    DType::F64 => bench_pair::<f64>(&bc, t, d)?,
                }
            };
            pair.iter().for_each(&mut on_cell);
            cells.extend(pair);
        }
    }
    let mut ratios = Vec::new();
    if bc.modes.contains(&AttentionMode::Sa) && bc.modes.contains(&AttentionMode::Xsa) {
        for &t in &bc.seq_lens {
            for &d in &bc.d_models {
                let find = |m: AttentionMode| cells.iter().find(|c| c.mode == m && c.seq_len == t && c.d_model == d);
                let (Some(sa), Some(xsa)) = (find(AttentionMode::Sa), find(AttentionMode::Xsa)) else {
                    continue;
                };
                let (Some(ts), Some(tx)) = (sa.median_ms, xsa.median_ms) else {
                    continue;
                };
                let mem_ratio = match (sa.peak_bytes, xsa.peak_bytes) {
                    (Some(a), Some(b)) if a > 0 => Some(b as f64 / a as f64),
                    _ => None,
                };
                ratios.push(RatioResult {
                    seq_len: t,
                    d_model: d,
                    time_ratio: tx / ts,
                    mem_ratio,
                });
            }
        }
    }
    Ok(BenchReport {
        manifest: BenchManifest {
            precision: bc.precision,
            batch: bc.batch,
            repeats: bc.repeats,
            warmup: bc.warmup,
            pass: if bc.backward { "forward+backward" } else { "forward" }.into(),
            d_head: bc.d_head,
            ffn_mult: bc.ffn_mult,
            seed: bc.seed,
            memory_metric: "peak live heap bytes above the call's starting level".into(),
            host: Host::detect(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
        cells,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            seq_lens: vec![16, 32],
            d_models: vec![32],
            batch: 2,
            repeats: 5,
            d_head: 16,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn grid_and_ratios() {
        let r = bench_block(&small()).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert_eq!(r.ratios.len(), 2);
        for c in &r.cells {
            let (p10, med, p90) = (c.p10_ms.unwrap(), c.median_ms.unwrap(), c.p90_ms.unwrap());
            assert!(p10 <= med && med <= p90);
        }
        assert_eq!(r.manifest.pass, "forward");
        let json = r.to_json().unwrap();
        assert_eq!(BenchReport::from_json(&json).unwrap(), r);
    }

    #[test]
    fn single_mode_has_no_ratios() {
        let bc = BenchConfig {
            modes: vec![AttentionMode::Sa],
            ..small()
        };
        let r = bench_block(&bc).unwrap();
        assert!(r.ratios.is_empty());
        assert!(!r.to_json().unwrap().contains("ratios"));
    }

    #[test]
    fn over_budget_cells_are_skipped() {
        let bc = BenchConfig {
            memory_budget_bytes: 1,
            ..small()
        };
        let r = bench_block(&bc).unwrap();
        assert!(r.cells.iter().all(|c| c.skipped.is_some() && c.median_ms.is_none()));
        assert!(r.ratios.is_empty());
    }

    #[test]
    fn backward_pass_runs() {
        let bc = BenchConfig {
            backward: true,
            seq_lens: vec![8],
            ..small()
        };
        let r = bench_block(&bc).unwrap();
        assert_eq!(r.manifest.pass, "forward+backward");
    }

    #[test]
    fn invalid_settings() {
        assert!(bench_block(&BenchConfig { repeats: 4, ..small() }).is_err());
        assert!(bench_block(&BenchConfig { warmup: 1, ..small() }).is_err());
        assert!(bench_block(&BenchConfig { d_models: vec![40], ..small() }).is_err());
    }

    #[test]
    fn percentiles() {
        let s: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(percentile(&s, 0.5), 6.0);
        assert_eq!(percentile(&s, 0.1), 2.0);
        assert_eq!(percentile(&s, 0.9), 10.0);
    }
}
