use bimamba::attention::{attn_block_peak_formula, AttnConfig};
use bimamba::bench::{
    bimamba_block_peak_formula, fit_loglog, measure, measure_point, parse_records_csv, read_records, records_csv,
    report, summarize, write_records, BenchConfig, BenchRecord, Kernel,
};
use bimamba::model::ModelConfig;
use proptest::prelude::*;

fn tiny() -> BenchConfig {
    BenchConfig {
        dim: 16,
        expand: 32,
        state: 4,
        heads: 2,
        repeats: 5,
        ..BenchConfig::default()
    }
}

#[test]
fn scan_modes_agree_on_the_checksum() {
    for len in [1, 7, 64, 300] {
        let s = measure_point(Kernel::ScanSequential, len, &tiny()).unwrap();
        let p = measure_point(Kernel::ScanParallel, len, &tiny()).unwrap();
        let scale = s.checksum.abs().max(1.0);
        assert!((s.checksum - p.checksum).abs() <= 1e-4 * scale, "{} vs {}", s.checksum, p.checksum);
    }
}

#[test]
fn peak_memory_is_deterministic_and_matches_formulas() {
    let cfg = tiny();
    for len in [16, 64] {
        let a = measure_point(Kernel::BimambaBlock, len, &cfg).unwrap();
        let b = measure_point(Kernel::BimambaBlock, len, &cfg).unwrap();
        assert_eq!(a.record.peak_bytes, b.record.peak_bytes);
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.timings_ns.len(), cfg.repeats);
        assert_eq!(a.record.wall_ns, bimamba::bench::median(&a.timings_ns));
        let mc = cfg.block_config().unwrap();
        assert_eq!(a.record.peak_bytes, bimamba_block_peak_formula(len, &mc, 4));
        let attn = measure_point(Kernel::AttnBlock, len, &cfg).unwrap();
        assert_eq!(attn.record.peak_bytes, attn_block_peak_formula(len, cfg.attn().unwrap(), 4));
    }
}

#[test]
fn full_width_bimamba_needs_less_memory_than_attention_at_4096() {
    let full = ModelConfig::full();
    let mc = ModelConfig {
        blocks: 1,
        ..full.clone()
    };
    let bimamba = bimamba_block_peak_formula(4096, &mc, 4);
    let attn = attn_block_peak_formula(4096, AttnConfig::new(full.dim, 6).unwrap(), 4);
    assert!(bimamba < attn, "{bimamba} vs {attn}");
}

#[test]
fn sweeps_need_increasing_lengths_and_enough_repeats() {
    assert!(measure(Kernel::ScanSequential, &[8], &tiny()).is_err());
    assert!(measure(Kernel::ScanSequential, &[8, 8], &tiny()).is_err());
    assert!(measure(Kernel::ScanSequential, &[16, 8], &tiny()).is_err());
    let few = BenchConfig { repeats: 4, ..tiny() };
    assert!(measure_point(Kernel::ScanSequential, 8, &few).is_err());
    let cold = BenchConfig { warmup: 1, ..tiny() };
    assert!(measure_point(Kernel::ScanSequential, 8, &cold).is_err());
    assert!(measure_point(Kernel::ScanSequential, 0, &tiny()).is_err());
}

#[test]
fn csv_header_and_summary() {
    let cfg = tiny();
    let mut records = Vec::new();
    for k in [Kernel::BimambaBlock, Kernel::AttnBlock] {
        records.extend(measure(k, &[32, 64, 128, 256], &cfg).unwrap().into_iter().map(|m| m.record));
    }
    let (csv, text) = report(&records).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "kernel,L,D,E,N,heads,wall_ns,peak_bytes");
    assert_eq!(csv.lines().count(), records.len() + 1);
    let summary = summarize(&records).unwrap();
    assert_eq!(summary.kernels.len(), 2);
    let (l, b, a) = summary.memory_comparison.unwrap();
    assert_eq!(l, 256);
    assert!(b < a);
    assert!(text.contains("peak memory at L=256"));
    assert!(records_csv(&[]).is_err());
    assert!(summarize(&[]).is_err());
}

#[test]
fn loglog_fit_recovers_known_exponents() {
    for k in [1.0, 2.0, 0.5] {
        let pts: Vec<(f64, f64)> = [4.0, 8.0, 16.0, 32.0, 64.0].iter().map(|&x| (x, 3.0 * f64::powf(x, k))).collect();
        let fit = fit_loglog(&pts).unwrap();
        assert!((fit.slope - k).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }
    assert!(fit_loglog(&[(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)]).is_err());
    assert!(fit_loglog(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)]).is_err());
}

fn arb_record() -> impl Strategy<Value = BenchRecord> {
    (0usize..4, 1usize..1 << 20, 1usize..1024, 1usize..4096, 1usize..64, 0usize..16, any::<u64>(), any::<usize>())
        .prop_map(|(k, len, dim, expand, state, heads, wall_ns, peak_bytes)| BenchRecord {
            kernel: Kernel::ALL[k],
            len,
            dim,
            expand,
            state,
            heads,
            wall_ns,
            peak_bytes,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_round_trip_through_csv(records in prop::collection::vec(arb_record(), 1..20)) {
        let text = records_csv(&records).unwrap();
        prop_assert_eq!(parse_records_csv(&text).unwrap(), records.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_records(&path, &records).unwrap();
        prop_assert_eq!(read_records(&path).unwrap(), records);
    }

    #[test]
    fn kernel_names_round_trip(k in 0usize..4) {
        let kernel = Kernel::ALL[k];
        prop_assert_eq!(kernel.to_string().parse::<Kernel>().unwrap(), kernel);
    }
}
