//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{load_dataset, save_dataset, synth_generate, DescriptorDataset, Sample, SynthSpec};
use crate::encoding::{encode_forward, normalize, DescriptorSet, NormalizeMode};
use crate::error::{Error, Result};
use crate::gradcheck::{
    check_diagonal_codeword, check_encoding, check_network, grid_instances, tiny_network, Grid, DEFAULT_STEP,
    DEFAULT_TOL,
};
use crate::matrix::Mat;
use crate::network::{
    evaluate, fit, fit_joint, load_checkpoint, save_checkpoint, Checkpoint, EpochMetrics, NetworkParams,
};
use crate::reference::{bow_histogram, hard_assign, vlad};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "deepten",
    version,
    about = "Residual encoding layer: training, evaluation and gradient checks"
)]
struct Cli {
    /// Override the seed from the spec or config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print results, not progress.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic train/test pair from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Train a network; passing --data2 trains two heads on a shared projection.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        data2: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-epoch metrics as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print top-1 accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Head of a joint checkpoint.
        #[arg(long, value_enum, default_value_t = Head::A)]
        head: Head,
    },
    /// Encode every sample with the checkpoint's projection and codebook.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Head of a joint checkpoint.
        #[arg(long, value_enum, default_value_t = Head::A)]
        head: Head,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GridArg::Default)]
        grid: GridArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Head {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Normalized residual encoding.
    Ten,
    /// Raw VLAD.
    Vlad,
    /// Hard-assignment histogram.
    Bow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GridArg {
    Default,
    Small,
}

/// Failure of a subcommand, carrying the flag or file it concerns.
#[derive(Debug)]
enum CliError {
    Data { context: String, source: Error },
    Gradcheck(usize),
}

fn ctx<T>(context: impl Into<String>, r: Result<T>) -> std::result::Result<T, CliError> {
    r.map_err(|source| CliError::Data {
        context: context.into(),
        source,
    })
}

/// Entry point used by the binary. Prints to stdout/stderr and returns the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let quiet = cli.quiet;
    let seed = cli.seed;
    let outcome = match cli.command {
        Command::Synth {
            spec,
            out_train,
            out_test,
        } => cmd_synth(&spec, &out_train, &out_test, seed, quiet),
        Command::Train {
            config,
            data,
            data2,
            out,
            metrics,
        } => cmd_train(&config, &data, data2.as_deref(), &out, metrics.as_deref(), seed, quiet),
        Command::Eval { ckpt, data, head } => cmd_eval(&ckpt, &data, head),
        Command::Encode {
            ckpt,
            data,
            method,
            out,
            head,
        } => cmd_encode(&ckpt, &data, method, &out, head, quiet),
        Command::Gradcheck { grid } => cmd_gradcheck(grid, quiet),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Data { context, source }) => {
            eprintln!("error: {context}: {source}");
            EXIT_DATA
        }
        Err(CliError::Gradcheck(n)) => {
            eprintln!("error: gradcheck: {n} check(s) failed");
            EXIT_GRADCHECK
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

fn cmd_synth(spec_path: &Path, out_train: &Path, out_test: &Path, seed: Option<u64>, quiet: bool) -> CliResult {
    let flag = format!("--spec {}", spec_path.display());
    let text = ctx(
        &flag,
        fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e)),
    )?;
    let mut spec: SynthSpec = ctx(
        &flag,
        serde_json::from_str(&text).map_err(|e| Error::Config {
            path: spec_path.display().to_string(),
            detail: e.to_string(),
        }),
    )?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (train, test) = ctx(&flag, synth_generate(&spec))?;
    ctx(
        format!("--out-train {}", out_train.display()),
        save_dataset(&train, out_train),
    )?;
    ctx(
        format!("--out-test {}", out_test.display()),
        save_dataset(&test, out_test),
    )?;
    if !quiet {
        println!(
            "wrote {} train and {} test samples (D = {}, {} classes)",
            train.len(),
            test.len(),
            train.dim(),
            train.n_classes()
        );
    }
    Ok(())
}

fn load_data(flag: &str, path: &Path) -> std::result::Result<DescriptorDataset, CliError> {
    ctx(format!("{flag} {}", path.display()), load_dataset(path))
}

fn check_dataset(flag: &str, path: &Path, ds: &DescriptorDataset, d_in: usize, n_classes: usize) -> CliResult {
    let context = format!("{flag} {}", path.display());
    if ds.dim() != d_in {
        return ctx(
            context,
            Err(Error::shape(
                "train",
                format!("dataset D = {} but model D_in = {d_in}", ds.dim()),
            )),
        );
    }
    if ds.n_classes() > n_classes {
        return ctx(
            context,
            Err(Error::Argument(format!(
                "dataset has {} classes but the model has {n_classes}",
                ds.n_classes()
            ))),
        );
    }
    Ok(())
}

fn format_metrics(tag: &str, m: &EpochMetrics) -> String {
    let mut line = format!("{tag}epoch {:>3} lr {:.2e} ", m.epoch + 1, m.learning_rate);
    if let Some(n) = m.descriptor_count {
        let _ = write!(line, "N {n:>4} ");
    }
    let _ = write!(line, "loss {:.6} acc {:.4}", m.mean_loss, m.accuracy);
    line
}

fn cmd_train(
    config_path: &Path,
    data_path: &Path,
    data2_path: Option<&Path>,
    out: &Path,
    metrics_path: Option<&Path>,
    seed: Option<u64>,
    quiet: bool,
) -> CliResult {
    let mut cfg = ctx(
        format!("--config {}", config_path.display()),
        RunConfig::load(config_path),
    )?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let m = cfg.model.clone();
    let train_a = load_data("--data", data_path)?;
    check_dataset("--data", data_path, &train_a, m.d_in, m.n_classes)?;

    let second = match data2_path {
        Some(p) => Some(("--data2", p.to_path_buf())),
        None if cfg.joint.enabled => cfg.joint.data.clone().map(|p| ("joint.data", p)),
        None => None,
    };

    let (checkpoint, log) = match second {
        None => {
            let mut params = ctx("train", cfg.init_network())?;
            let history = ctx("train", fit(&mut params, &train_a, &cfg.fit_options()))?;
            if !quiet {
                for h in &history {
                    println!("{}", format_metrics("", h));
                }
            }
            let log = serde_json::json!({
                "epochs": history.iter().map(metrics_json).collect::<Vec<_>>(),
            });
            (
                Checkpoint::Single {
                    params,
                    normalize: cfg.normalize,
                },
                log,
            )
        }
        Some((flag, path)) => {
            let train_b = load_data(flag, &path)?;
            check_dataset(flag, &path, &train_b, m.d_in, train_b.n_classes())?;
            let mut net = ctx("train", cfg.init_joint(train_b.n_classes()))?;
            let history = ctx(
                "train",
                fit_joint(&mut net, &train_a, &train_b, &cfg.joint_fit_options()),
            )?;
            if !quiet {
                for (a, b) in &history {
                    println!("{}", format_metrics("A ", a));
                    println!("{}", format_metrics("B ", b));
                }
            }
            let log = serde_json::json!({
                "epochs_a": history.iter().map(|(a, _)| metrics_json(a)).collect::<Vec<_>>(),
                "epochs_b": history.iter().map(|(_, b)| metrics_json(b)).collect::<Vec<_>>(),
            });
            (
                Checkpoint::Joint {
                    net,
                    normalize: cfg.normalize,
                },
                log,
            )
        }
    };
    ctx(format!("--out {}", out.display()), save_checkpoint(&checkpoint, out))?;
    if let Some(p) = metrics_path {
        let text = serde_json::to_string_pretty(&log).expect("metrics serialize");
        ctx(
            format!("--metrics {}", p.display()),
            fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        )?;
    }
    if !quiet {
        println!("saved {}", out.display());
    }
    Ok(())
}

fn metrics_json(m: &EpochMetrics) -> serde_json::Value {
    serde_json::json!({
        "epoch": m.epoch,
        "learning_rate": m.learning_rate,
        "descriptor_count": m.descriptor_count,
        "mean_loss": m.mean_loss,
        "accuracy": m.accuracy,
    })
}

fn head_index(h: Head) -> usize {
    match h {
        Head::A => 0,
        Head::B => 1,
    }
}

fn load_head(ckpt: &Path, head: Head) -> std::result::Result<(NetworkParams, NormalizeMode), CliError> {
    let flag = format!("--ckpt {}", ckpt.display());
    let ck = ctx(&flag, load_checkpoint(ckpt))?;
    let params = ctx(format!("--head with {flag}"), ck.head(head_index(head)))?;
    Ok((params, ck.normalize()))
}

fn cmd_eval(ckpt: &Path, data_path: &Path, head: Head) -> CliResult {
    let (params, mode) = load_head(ckpt, head)?;
    let ds = load_data("--data", data_path)?;
    check_dataset("--data", data_path, &ds, params.d_in(), params.n_classes())?;
    let acc = ctx(format!("--data {}", data_path.display()), evaluate(&params, &ds, mode))?;
    println!("{acc:.4}");
    Ok(())
}

/// Encodes one descriptor set after applying the network's projection.
pub fn encode_sample(
    params: &NetworkParams,
    mode: NormalizeMode,
    x: &DescriptorSet,
    method: Method,
) -> Result<Vec<f64>> {
    let projected = x.as_mat().matmul(&params.w_proj)?.add_row_broadcast(&params.b_proj)?;
    let z = DescriptorSet::new(projected)?;
    let codebook = &params.head.codebook;
    Ok(match method {
        Method::Ten => {
            let (e, _) = encode_forward(&z, codebook, &params.head.smoothing)?;
            normalize(&e, mode).values
        }
        Method::Vlad => vlad(&z, codebook)?.into_vec(),
        Method::Bow => bow_histogram(&hard_assign(&z, codebook)?).counts.into_vec(),
    })
}

/// Encodes every sample into a one-row sample of the output dataset.
pub fn encode_dataset(
    params: &NetworkParams,
    mode: NormalizeMode,
    ds: &DescriptorDataset,
    method: Method,
) -> Result<DescriptorDataset> {
    let mut samples = Vec::with_capacity(ds.len());
    let mut width = 0;
    for s in ds.samples() {
        let v = encode_sample(params, mode, &s.x, method)?;
        width = v.len();
        samples.push(Sample {
            x: DescriptorSet::new(Mat::from_vec(1, v.len(), v)?)?,
            label: s.label,
        });
    }
    DescriptorDataset::new(samples, ds.n_classes(), width)
}

fn cmd_encode(ckpt: &Path, data_path: &Path, method: Method, out: &Path, head: Head, quiet: bool) -> CliResult {
    let (params, mode) = load_head(ckpt, head)?;
    let ds = load_data("--data", data_path)?;
    check_dataset("--data", data_path, &ds, params.d_in(), ds.n_classes())?;
    let encoded = ctx(
        format!("--data {}", data_path.display()),
        encode_dataset(&params, mode, &ds, method),
    )?;
    ctx(format!("--out {}", out.display()), save_dataset(&encoded, out))?;
    if !quiet {
        println!(
            "wrote {} encodings of length {} to {}",
            encoded.len(),
            encoded.dim(),
            out.display()
        );
    }
    Ok(())
}

fn cmd_gradcheck(grid: GridArg, quiet: bool) -> CliResult {
    let grid = match grid {
        GridArg::Default => Grid::Default,
        GridArg::Small => Grid::Small,
    };
    let mut failures = 0;
    for (n, k, d, seed) in grid_instances(grid) {
        let check = ctx("gradcheck", check_encoding(n, k, d, seed, DEFAULT_STEP, DEFAULT_TOL))?;
        if !check.passed {
            failures += 1;
        }
        println!("{check}");
    }
    let net_seeds = match grid {
        Grid::Default => 0..4,
        Grid::Small => 0..1,
    };
    for seed in net_seeds {
        for mode in [NormalizeMode::Global, NormalizeMode::PerCodeword] {
            let (params, x, label) = ctx("gradcheck", tiny_network(seed))?;
            let reports = ctx("gradcheck", check_network(&params, &x, label, mode, DEFAULT_STEP))?;
            let ok = reports.iter().all(|r| r.passes(DEFAULT_TOL));
            if !ok {
                failures += 1;
            }
            let worst = reports
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .expect("six reports");
            println!(
                "{} network seed={seed} normalize={mode:?} worst {} {:.2e}",
                if ok { "PASS" } else { "FAIL" },
                worst.name,
                worst.max_rel_err
            );
        }
    }
    if !quiet {
        let diag = ctx("gradcheck", check_diagonal_codeword(5, 4, 2, 1, DEFAULT_STEP))?;
        println!(
            "info: diagonal-only codeword gradient at N=5 K=4 D=2 has rel err {:.2e} (expected to disagree)",
            diag.max_rel_err
        );
    }
    if failures > 0 {
        Err(CliError::Gradcheck(failures))
    } else {
        Ok(())
    }
}
