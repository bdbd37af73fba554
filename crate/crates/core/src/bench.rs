//! Wall-time and activation-memory sweeps over sequence length, with
//! log–log exponent fitting and CSV reports.

use std::fmt;
use std::hint::black_box;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attn_block_forward, attn_block_peak_bytes, AttnBlockWeights, AttnConfig};
use crate::error::{Error, Result};
use crate::model::{bimamba_block, block_forward, BlockWeights, ModelConfig, ModelParams};
use crate::ssm::{keyword_enum, selective_scan_parallel, Discretization, selective_scan_sequential, ScanCoefficients, ScanMode};
use crate::tensor::{Eager, MemoryAccountant, Tensor, TensorOps};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    BimambaBlock,
    AttnBlock,
    ScanSequential,
    ScanParallel,
}

keyword_enum!(
    Kernel,
    Kernel::BimambaBlock => "bimamba_block",
    Kernel::AttnBlock => "attn_block",
    Kernel::ScanSequential => "scan_sequential",
    Kernel::ScanParallel => "scan_parallel",
);

impl Kernel {
    pub const ALL: [Kernel; 4] = [
        Kernel::BimambaBlock,
        Kernel::AttnBlock,
        Kernel::ScanSequential,
        Kernel::ScanParallel,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub dim: usize,
    pub expand: usize,
    pub state: usize,
    pub heads: usize,
    pub conv_width: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dim: 64,
            expand: 128,
            state: 8,
            heads: 4,
            conv_width: 4,
            repeats: 9,
            warmup: 2,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::Config(format!("repeats must be at least 5, got {}", self.repeats)));
        }
        if self.warmup < 2 {
            return Err(Error::Config(format!("warmup must be at least 2, got {}", self.warmup)));
        }
        AttnConfig::new(self.dim, self.heads)?;
        self.block_config()?.validate()
    }

    pub fn attn(&self) -> Result<AttnConfig> {
        AttnConfig::new(self.dim, self.heads)
    }

    /// A one-block model configuration with these widths. It uses the
    /// exponential rule: both rules cost the same, but with random inputs the
    /// multiplicative one can push `|Ā|` past 1 and overflow a long scan.
    pub fn block_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            blocks: 1,
            discretization: Discretization::Exponential,
            dim: self.dim,
            expand: self.expand,
            state: self.state,
            conv_width: self.conv_width,
            delta_rank: ModelConfig::default_delta_rank(self.dim),
            ..ModelConfig::desk()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kernel: Kernel,
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "E")]
    pub expand: usize,
    #[serde(rename = "N")]
    pub state: usize,
    pub heads: usize,
    pub wall_ns: u64,
    pub peak_bytes: usize,
}

/// One sweep point: the record plus every timed repeat and an output
/// checksum.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub record: BenchRecord,
    pub timings_ns: Vec<u64>,
    pub checksum: f64,
}

pub fn median(values: &[u64]) -> u64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

fn time_repeats(config: &BenchConfig, mut run: impl FnMut() -> Result<f64>) -> Result<(Vec<u64>, f64)> {
    let mut checksum = 0.0;
    for _ in 0..config.warmup {
        checksum = black_box(run()?);
    }
    let mut timings = Vec::with_capacity(config.repeats);
    for _ in 0..config.repeats {
        let start = Instant::now();
        checksum = black_box(run()?);
        timings.push((start.elapsed().as_nanos() as u64).max(1));
    }
    Ok((timings, checksum))
}

fn checksum(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&v| v as f64).sum()
}

fn block_weights(config: &ModelConfig, seed: u64) -> Result<BlockWeights<Tensor<f32>>> {
    let mut params = ModelParams::<f32>::init(config, seed)?;
    Ok(params.blocks.swap_remove(0))
}

/// Seeded scan coefficients with `a_bar` in `(−0.5, 0.5)`.
pub fn scan_inputs(len: usize, expand: usize, state: usize, seed: u64) -> Result<ScanCoefficients<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_bar = Tensor::sample_uniform(&[len, expand, state], -0.5, 0.5, &mut rng)?;
    let b_bar_x = Tensor::sample_uniform(&[len, expand, state], -1.0, 1.0, &mut rng)?;
    let c = Tensor::sample_uniform(&[len, state], -1.0, 1.0, &mut rng)?;
    ScanCoefficients::from_parts(a_bar, b_bar_x, c)
}

/// Peak intermediate bytes of one block forward, from the accountant.
pub fn bimamba_block_peak_bytes(x: &Tensor<f32>, block: &BlockWeights<Tensor<f32>>, config: &ModelConfig) -> Result<usize> {
    let acc = MemoryAccountant::new();
    let mut ops = Eager::with_accountant(acc.clone());
    let w = block.map(|t| ops.input(t, false));
    let xv = ops.input(x, false);
    drop(block_forward(&mut ops, &xv, &w, config)?);
    Ok(acc.peak())
}

/// Closed-form peak for one bidirectional block with the sequential scan,
/// in bytes for elements of `size` bytes. The peak comes while the backward
/// branch discretizes: `x`, the gate, the forward branch output, `x'` and its
/// reversal, `Δ`, `B`, `C`, `A`, and both `L×E×N` coefficient tensors.
pub fn bimamba_block_peak_formula(len: usize, config: &ModelConfig, size: usize) -> usize {
    let (l, d, e, n) = (len, config.dim, config.expand, config.state);
    (5 * l * e + l * d + 2 * l * n + e * n + 2 * l * e * n) * size
}

fn scan_peak_bytes(coef: &ScanCoefficients<f32>, mode: ScanMode) -> Result<usize> {
    let acc = MemoryAccountant::new();
    let mut ops = Eager::with_accountant(acc.clone());
    let a = ops.input(&coef.a_bar, false);
    let b = ops.input(&coef.b_bar_x, false);
    let c = ops.input(&coef.c, false);
    drop(ops.selective_scan(&a, &b, &c, mode)?);
    Ok(acc.peak())
}

/// Time and account one kernel at one sequence length.
pub fn measure_point(kernel: Kernel, len: usize, config: &BenchConfig) -> Result<Measurement> {
    config.validate()?;
    if len == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ len as u64);
    let (timings, checksum, peak_bytes) = match kernel {
        Kernel::BimambaBlock => {
            let mc = config.block_config()?;
            let block = block_weights(&mc, config.seed)?;
            let x = Tensor::<f32>::sample_uniform(&[len, config.dim], -1.0, 1.0, &mut rng)?;
            let peak = bimamba_block_peak_bytes(&x, &block, &mc)?;
            let (t, c) = time_repeats(config, || Ok(checksum(&bimamba_block(&x, &block, &mc)?)))?;
            (t, c, peak)
        }
        Kernel::AttnBlock => {
            let ac = config.attn()?;
            let w = AttnBlockWeights::<Tensor<f32>>::init(ac, config.seed)?;
            let x = Tensor::<f32>::sample_uniform(&[len, config.dim], -1.0, 1.0, &mut rng)?;
            let peak = attn_block_peak_bytes(&x, &w, ac)?;
            let (t, c) = time_repeats(config, || Ok(checksum(&attn_block_forward(&x, &w, ac)?)))?;
            (t, c, peak)
        }
        Kernel::ScanSequential | Kernel::ScanParallel => {
            let coef = scan_inputs(len, config.expand, config.state, config.seed ^ len as u64)?;
            let (mode, scan): (ScanMode, fn(&ScanCoefficients<f32>) -> Result<Tensor<f32>>) =
                if kernel == Kernel::ScanSequential {
                    (ScanMode::Sequential, selective_scan_sequential)
                } else {
                    (ScanMode::Parallel, selective_scan_parallel)
                };
            let peak = scan_peak_bytes(&coef, mode)?;
            let (t, c) = time_repeats(config, || Ok(checksum(&scan(&coef)?)))?;
            (t, c, peak)
        }
    };
    let heads = if kernel == Kernel::AttnBlock { config.heads } else { 0 };
    Ok(Measurement {
        record: BenchRecord {
            kernel,
            len,
            dim: config.dim,
            expand: config.expand,
            state: config.state,
            heads,
            wall_ns: median(&timings),
            peak_bytes,
        },
        timings_ns: timings,
        checksum,
    })
}

fn check_sweep(lens: &[usize]) -> Result<()> {
    if lens.len() < 2 || lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "sequence lengths must be strictly increasing with at least two values, got {lens:?}"
        )));
    }
    Ok(())
}

/// Sweep one kernel over strictly increasing sequence lengths.
pub fn measure(kernel: Kernel, lens: &[usize], config: &BenchConfig) -> Result<Vec<Measurement>> {
    check_sweep(lens)?;
    lens.iter().map(|&len| measure_point(kernel, len, config)).collect()
}

/// Slope and coefficient of determination of a least-squares line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares on `(ln x, ln y)`. Needs at least four points spanning a
/// factor of eight in `x`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<ExponentFit> {
    if points.len() < 4 {
        return Err(Error::InsufficientData(format!("need at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive values".into()));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if hi < 8.0 * lo {
        return Err(Error::InsufficientData(format!("lengths span only {:.2}x, need 8x", hi / lo)));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(ExponentFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Time exponent of one kernel's records.
pub fn fit_exponent(records: &[BenchRecord]) -> Result<ExponentFit> {
    fit_loglog(&records.iter().map(|r| (r.len as f64, r.wall_ns as f64)).collect::<Vec<_>>())
}

/// Memory exponent of one kernel's records.
pub fn fit_memory_exponent(records: &[BenchRecord]) -> Result<ExponentFit> {
    fit_loglog(&records.iter().map(|r| (r.len as f64, r.peak_bytes as f64)).collect::<Vec<_>>())
}

pub fn records_csv(records: &[BenchRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no benchmark records to report".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_records_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_records(path: &Path, records: &[BenchRecord]) -> Result<()> {
    std::fs::write(path, records_csv(records)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<BenchRecord>> {
    parse_records_csv(&std::fs::read_to_string(path)?)
}

/// Per-kernel exponents and the BI-Mamba to attention memory comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub kernels: Vec<KernelSummary>,
    /// `(L, bimamba peak, attention peak)` at the largest length both share.
    pub memory_comparison: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSummary {
    pub kernel: Kernel,
    pub points: usize,
    pub time: Option<ExponentFit>,
    pub memory: Option<ExponentFit>,
}

impl Summary {
    /// Fractional saving of BI-Mamba peak memory relative to attention.
    pub fn memory_saving(&self) -> Option<f64> {
        self.memory_comparison
            .map(|(_, b, a)| 1.0 - b as f64 / a as f64)
    }
}

pub fn summarize(records: &[BenchRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no benchmark records to summarize".into()));
    }
    let mut kernels = Vec::new();
    for k in Kernel::ALL {
        let mut rs: Vec<BenchRecord> = records.iter().filter(|r| r.kernel == k).cloned().collect();
        if rs.is_empty() {
            continue;
        }
        rs.sort_by_key(|r| r.len);
        kernels.push(KernelSummary {
            kernel: k,
            points: rs.len(),
            time: fit_exponent(&rs).ok(),
            memory: fit_memory_exponent(&rs).ok(),
        });
    }
    let peak_at = |k: Kernel, len: usize| {
        records
            .iter()
            .find(|r| r.kernel == k && r.len == len)
            .map(|r| r.peak_bytes)
    };
    let memory_comparison = records
        .iter()
        .filter(|r| r.kernel == Kernel::BimambaBlock)
        .map(|r| r.len)
        .filter(|&l| peak_at(Kernel::AttnBlock, l).is_some())
        .max()
        .map(|l| (l, peak_at(Kernel::BimambaBlock, l).unwrap(), peak_at(Kernel::AttnBlock, l).unwrap()));
    Ok(Summary {
        kernels,
        memory_comparison,
    })
}

fn fmt_fit(f: &Option<ExponentFit>) -> String {
    match f {
        Some(f) => format!("{:.3} (R² {:.3})", f.slope, f.r_squared),
        None => "n/a".into(),
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in &self.kernels {
            writeln!(
                f,
                "{}: {} points, time exponent {}, memory exponent {}",
                k.kernel,
                k.points,
                fmt_fit(&k.time),
                fmt_fit(&k.memory)
            )?;
        }
        match (self.memory_comparison, self.memory_saving()) {
            (Some((l, b, a)), Some(s)) => writeln!(
                f,
                "peak memory at L={l}: bimamba_block {b} B, attn_block {a} B, ratio {:.3} ({:.1}% less)",
                b as f64 / a as f64,
                100.0 * s
            ),
            _ => writeln!(f, "no common length for a memory comparison"),
        }
    }
}

/// CSV body and summary text for a set of records.
pub fn report(records: &[BenchRecord]) -> Result<(String, String)> {
    Ok((records_csv(records)?, summarize(records)?.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[5, 1, 3]), 3);
        assert_eq!(median(&[4, 1, 3, 2]), 2);
    }

    #[test]
    fn exact_power_laws() {
        for p in [1.0, 2.0] {
            let pts: Vec<(f64, f64)> = [256.0, 512.0, 1024.0, 2048.0, 4096.0]
                .iter()
                .map(|&l: &f64| (l, 3.5 * l.powf(p)))
                .collect();
            let fit = fit_loglog(&pts).unwrap();
            assert!((fit.slope - p).abs() < 1e-9);
            assert!((fit.r_squared - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        let pts = [(1.0, 1.0), (2.0, 2.0), (16.0, 16.0)];
        assert!(matches!(fit_loglog(&pts), Err(Error::InsufficientData(_))));
        let narrow = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)];
        assert!(matches!(fit_loglog(&narrow), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(report(&[]).is_err());
    }

    #[test]
    fn block_accountant_matches_formula() {
        let cfg = BenchConfig {
            dim: 16,
            expand: 32,
            state: 4,
            heads: 2,
            ..BenchConfig::default()
        };
        let mc = cfg.block_config().unwrap();
        let block = block_weights(&mc, 3).unwrap();
        for len in [1, 2, 7, 64, 300] {
            let x = Tensor::<f32>::full(&[len, 16], 0.25).unwrap();
            let peak = bimamba_block_peak_bytes(&x, &block, &mc).unwrap();
            assert_eq!(peak, bimamba_block_peak_formula(len, &mc, 4), "len={len}");
        }
    }

    #[test]
    fn sweep_must_increase() {
        assert!(measure(Kernel::ScanSequential, &[8, 8], &BenchConfig::default()).is_err());
        assert!(measure(Kernel::ScanSequential, &[8], &BenchConfig::default()).is_err());
    }
}
