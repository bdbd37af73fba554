mod run_config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bimamba::bench::{measure, report, write_records, BenchConfig, Kernel};
use bimamba::data::io::{read_dataset, read_rawv, write_dataset, write_pgm};
use bimamba::data::{parallel_project, synth_dataset, Axis, Split, SynthConfig};
use bimamba::metrics::{auroc, delong_test};
use bimamba::model::{check_gradients, checkpoint, BiMamba, Fusion};
use bimamba::train::{evaluate_auroc, predict, train_loop, write_history};
use bimamba::Error;
use clap::{Args, Parser, Subcommand};

use run_config::{all_keys, RunConfig};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "bimamba", version, about = "Two-view BI-Mamba classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-view dataset.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Allow writing into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Project a RAWV volume to frontal and lateral PGM radiographs.
    Project {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out_frontal: PathBuf,
        #[arg(long)]
        out_lateral: PathBuf,
    },
    /// Train a model and write history.csv, model.ckpt and config.txt.
    #[command(after_help = config_help())]
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// AUROC of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must name the fusion the checkpoint was trained with.
        #[arg(long)]
        fusion: Option<Fusion>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write one score per line.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Write one 0/1 label per line, aligned with --scores.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// DeLong test of two score files against one label file.
    Delong {
        scores_a: PathBuf,
        scores_b: PathBuf,
        labels: PathBuf,
    },
    /// Time and memory sweep over sequence lengths.
    Bench {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "bimamba_block,attn_block")]
        kernels: Vec<Kernel>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 128)]
        expand: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Finite-difference check of every parameter gradient.
    #[command(after_help = config_help())]
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// A preset (desk, toy, full) or a `key = value` file applied over desk.
    #[arg(long, default_value = "desk")]
    config: String,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> bimamba::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for pair in &self.overrides {
            cfg.apply_pair(pair)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_help() -> String {
    let mut s = String::from("Config keys (file lines are `key = value`, `#` starts a comment):\n");
    let defaults = RunConfig::default().to_text();
    for line in defaults.lines() {
        let _ = writeln!(s, "  {line}");
    }
    debug_assert_eq!(defaults.lines().count(), all_keys().len());
    s
}

/// A failure with its exit code and a one-line reason.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::InvalidShape(_) => "invalid_shape",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::DivisionByZero => "division_by_zero",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::BackwardTwice => "backward_twice",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::DegenerateTest { .. } => "degenerate_test",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        };
        let code = if e.is_numerical() {
            3
        } else if matches!(e, Error::Config(_)) {
            1
        } else {
            2
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn contract(kind: &'static str, message: String) -> Failure {
    Failure { code: 2, kind, message }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Synth {
            seed,
            n,
            out,
            size,
            force,
        } => cmd_synth(seed, n, &out, size, force),
        Command::Project {
            volume,
            out_frontal,
            out_lateral,
        } => cmd_project(&volume, &out_frontal, &out_lateral),
        Command::Train { data, out, seed, config } => cmd_train(&data, &out, seed, &config.resolve()?),
        Command::Eval {
            checkpoint,
            data,
            fusion,
            split,
            scores,
            labels,
        } => cmd_eval(&checkpoint, &data, fusion, split, scores.as_deref(), labels.as_deref()),
        Command::Delong {
            scores_a,
            scores_b,
            labels,
        } => cmd_delong(&scores_a, &scores_b, &labels),
        Command::Bench {
            seed,
            out,
            lens,
            kernels,
            dim,
            expand,
            state,
            heads,
            repeats,
            warmup,
        } => {
            let config = BenchConfig {
                dim,
                expand,
                state,
                heads,
                conv_width: 4,
                repeats,
                warmup,
                seed,
            };
            cmd_bench(&config, &lens, &kernels, &out)
        }
        Command::Gradcheck { seed, config } => cmd_gradcheck(seed, &config.resolve()?),
    }
}

fn cmd_synth(seed: u64, n: usize, out: &Path, size: usize, force: bool) -> CmdResult {
    if !force && out.is_dir() && std::fs::read_dir(out).map_err(Error::from)?.next().is_some() {
        return Err(contract(
            "refused",
            format!("{} is not empty; pass --force to write into it", out.display()),
        ));
    }
    let dataset = synth_dataset(seed, n, &SynthConfig::with_size(size, size))?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_dataset(out, &dataset)?;
    let [tr, va, te] = [Split::Train, Split::Val, Split::Test].map(|s| dataset.manifest.ids(s).len());
    println!(
        "subjects={n} positives={} train={tr} val={va} test={te} out={}",
        dataset.positives(),
        out.display()
    );
    Ok(())
}

fn cmd_project(volume: &Path, frontal: &Path, lateral: &Path) -> CmdResult {
    let v = read_rawv(volume)?;
    let f = parallel_project(&v, Axis::Frontal);
    let l = parallel_project(&v, Axis::Lateral);
    write_pgm(frontal, &f)?;
    write_pgm(lateral, &l)?;
    println!("frontal={:?} lateral={:?}", f.shape(), l.shape());
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, seed: u64, cfg: &RunConfig) -> CmdResult {
    let dataset = read_dataset(data)?;
    if let Some(s) = dataset.samples.first() {
        let want = [cfg.model.height, cfg.model.width];
        if s.frontal.shape() != want {
            return Err(contract(
                "shape_mismatch",
                format!("images are {:?} but the model expects {want:?}", s.frontal.shape()),
            ));
        }
    }
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let resolved = format!("seed = {seed}\ndata = {}\nout = {}\n{}", data.display(), out.display(), cfg.to_text());
    eprint!("{resolved}");
    std::fs::write(out.join("config.txt"), cfg.to_text()).map_err(Error::from)?;

    let mut model = BiMamba::<f32>::new(cfg.model.clone(), seed)?;
    let train = bimamba::train::TrainConfig { seed, ..cfg.train.clone() };
    let ckpt = out.join("model.ckpt");
    let outcome = train_loop(&mut model, &dataset, &train, Some(&ckpt), |r| {
        println!(
            "epoch={} train_loss={:.6} val_auroc={:.6} lr={:.3e}",
            r.epoch, r.train_loss, r.val_auroc, r.lr
        );
    })?;
    write_history(&out.join("history.csv"), &outcome.history)?;
    let test = evaluate_auroc(&outcome.best, &dataset.split(Split::Test))?;
    println!(
        "best_epoch={} best_val_auroc={:.6} test_auroc={test:.6} checkpoint={}",
        outcome.best_epoch,
        outcome.best_val_auroc,
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    fusion: Option<Fusion>,
    split: Split,
    scores_out: Option<&Path>,
    labels_out: Option<&Path>,
) -> CmdResult {
    let model = checkpoint::load::<f32>(ckpt)?;
    if let Some(f) = fusion {
        if f != model.config.fusion {
            return Err(contract(
                "fusion_mismatch",
                format!("checkpoint was trained with {} but --fusion is {f}", model.config.fusion),
            ));
        }
    }
    let dataset = read_dataset(data)?;
    let samples = dataset.split(split);
    let scores = predict(&model, &samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let a = auroc(&scores, &labels)?;
    if let Some(p) = scores_out {
        let text: String = scores.iter().map(|s| format!("{s}\n")).collect();
        std::fs::write(p, text).map_err(Error::from)?;
    }
    if let Some(p) = labels_out {
        let text: String = labels.iter().map(|&l| if l { "1\n" } else { "0\n" }).collect();
        std::fs::write(p, text).map_err(Error::from)?;
    }
    println!(
        "fusion={} split={} n={} auroc={a:.6}",
        model.config.fusion,
        split.name(),
        samples.len()
    );
    Ok(())
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> std::result::Result<Vec<T>, Failure> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if !t.is_empty() {
            out.push(parse(t).ok_or_else(|| {
                Failure::from(Error::Parse {
                    offset,
                    message: format!("{}: cannot parse {t:?}", path.display()),
                })
            })?);
        }
        offset += line.len();
    }
    Ok(out)
}

fn cmd_delong(a: &Path, b: &Path, labels: &Path) -> CmdResult {
    let sa = read_lines(a, |s| s.parse::<f64>().ok())?;
    let sb = read_lines(b, |s| s.parse::<f64>().ok())?;
    let l = read_lines(labels, |s| match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    })?;
    let r = delong_test(&sa, &sb, &l)?;
    println!("auc_a={:.6} auc_b={:.6} z={:.6} p={:.6}", r.auc_a, r.auc_b, r.z, r.p_value);
    Ok(())
}

fn cmd_bench(config: &BenchConfig, lens: &[usize], kernels: &[Kernel], out: &Path) -> CmdResult {
    let mut records = Vec::new();
    for &k in kernels {
        for m in measure(k, lens, config)? {
            eprintln!(
                "kernel={} L={} wall_ns={} peak_bytes={}",
                k, m.record.len, m.record.wall_ns, m.record.peak_bytes
            );
            records.push(m.record);
        }
    }
    write_records(out, &records)?;
    let (_, summary) = report(&records)?;
    print!("{summary}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, cfg: &RunConfig) -> CmdResult {
    let r = check_gradients(&cfg.model, seed, 1e-4, 1e-6)?;
    println!(
        "coordinates={} max_relative_error={:.3e} worst={}[{}]",
        r.coordinates, r.max_relative_error, r.worst_parameter, r.worst_index
    );
    if r.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            kind: "gradcheck",
            message: format!("max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE}", r.max_relative_error),
        })
    }
}
