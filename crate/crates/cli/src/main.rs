use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use hashfed_core::data::{generate, write_dataset, DataConfig};
use hashfed_core::experiment::{
    self, curve_csv, ensure_output_dir, sweep_csv, sweep_gamma, sweep_table, Comparison, Mode, RunConfig,
};
use hashfed_core::{verify, Gamma};

/// Federated training with hashed parameter compression on a synthetic
/// glyph task.
///
/// Config keys can be overridden with trailing `--key=value` arguments,
/// e.g. `--gamma=1/4` or `--optimizer.lr=0.5`. Set `HASHFED_LOG=info` for
/// per-round progress on stderr.
#[derive(Parser)]
#[command(name = "hashfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training manner (or all three with --compare).
    Run {
        /// Run single (every client), centralized and federated, then print
        /// the accuracy summary.
        #[arg(long)]
        compare: bool,
        /// Config file followed by `--key=value` overrides.
        #[arg(
            required = true,
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "CONFIG [--key=value]..."
        )]
        args: Vec<String>,
    },
    /// Federated runs over several compression ratios.
    SweepGamma {
        /// Comma-separated ratios in (0, 1].
        #[arg(long, default_value = "1,1/2,1/4,1/8", value_delimiter = ',')]
        gammas: Vec<Gamma>,
        #[arg(
            required = true,
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "CONFIG [--key=value]..."
        )]
        args: Vec<String>,
    },
    /// Merge federated runs of several configs on the uploaded-bytes axis.
    Curve {
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config files followed by `--key=value` overrides applied to all.
        #[arg(
            required = true,
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "CONFIG... [--key=value]..."
        )]
        args: Vec<String>,
    },
    /// Write a glyph dataset file.
    GenData {
        #[arg(long, default_value_t = DataConfig::default().n)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DataConfig::default().p_flip)]
        p_flip: f64,
        #[arg(long, default_value_t = DataConfig::default().max_shift)]
        max_shift: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in property checks.
    Verify,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: 1, err }
    }
}

impl From<hashfed_core::Error> for Failure {
    fn from(err: hashfed_core::Error) -> Self {
        Failure {
            code: 1,
            err: err.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HASHFED_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { compare, args } => {
            let (paths, overrides) = split_args(&args)?;
            let [path] = paths.as_slice() else {
                return Err(anyhow!("`run` takes exactly one config file, got {}", paths.len()).into());
            };
            let cfg = load_config(path, &overrides)?;
            let out = output_dir(&cfg)?;
            if compare {
                run_compare(&cfg, out)
            } else {
                run_one(&cfg, out)
            }
        }
        Command::SweepGamma { gammas, args } => {
            let (paths, overrides) = split_args(&args)?;
            let [path] = paths.as_slice() else {
                return Err(anyhow!("`sweep-gamma` takes exactly one config file, got {}", paths.len()).into());
            };
            let cfg = load_config(path, &overrides)?;
            let out = output_dir(&cfg)?;
            let rows = sweep_gamma(&cfg, &gammas)?;
            print!("{}", sweep_table(&rows));
            if let Some(dir) = out {
                write(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
                for r in &rows {
                    let name = format!("federated_g{}.csv", r.gamma.to_string().replace('/', "-"));
                    write(&dir.join(name), &experiment::metrics_csv(&r.metrics))?;
                }
            }
            Ok(())
        }
        Command::Curve { out, args } => {
            let (paths, overrides) = split_args(&args)?;
            if paths.is_empty() {
                return Err(anyhow!("`curve` needs at least one config file").into());
            }
            if let Some(parent) = out
                .as_deref()
                .and_then(Path::parent)
                .filter(|p| !p.as_os_str().is_empty())
            {
                check_dir(parent)?;
            }
            let mut runs = Vec::new();
            for (i, path) in paths.iter().enumerate() {
                let cfg = load_config(path, &overrides)?;
                let mut label = Path::new(path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("run{i}"));
                if runs.iter().any(|(l, _)| *l == label) {
                    label = format!("{label}_{i}");
                }
                let artifacts = experiment::run_federated(&cfg)?;
                runs.push((label, artifacts.metrics));
            }
            let csv = curve_csv(&runs);
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::GenData {
            n,
            seed,
            p_flip,
            max_shift,
            out,
        } => {
            DataConfig {
                n,
                p_flip,
                max_shift,
                seed: Some(seed),
            }
            .validate()?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                check_dir(parent)?;
            }
            let ds = generate(n, seed, p_flip, max_shift);
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_dataset(std::io::BufWriter::new(file), &ds).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {n} examples to {}", out.display());
            Ok(())
        }
        Command::Verify => {
            let outcomes = verify::run_all();
            for o in &outcomes {
                println!(
                    "{} {:<40} {:>6.2}s  {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.secs,
                    o.detail
                );
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(anyhow!("{failed} check(s) failed").into());
            }
            Ok(())
        }
    }
}

type Overrides = Vec<(String, String)>;

/// Separates config paths from `--key=value` overrides.
fn split_args(args: &[String]) -> anyhow::Result<(Vec<String>, Overrides)> {
    let mut paths = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(kv) = a.strip_prefix("--") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{a}` must have the form --key=value"))?;
            overrides.push((k.to_string(), v.to_string()));
        } else {
            paths.push(a.clone());
        }
    }
    Ok((paths, overrides))
}

fn load_config(path: &str, overrides: &[(String, String)]) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
    RunConfig::from_toml(&text, overrides)
        .with_context(|| format!("invalid config {path}"))
        .map_err(Failure::from)
}

fn check_dir(dir: &Path) -> Result<(), Failure> {
    ensure_output_dir(dir).map_err(|e| Failure { code: 2, err: e.into() })
}

fn output_dir(cfg: &RunConfig) -> Result<Option<&Path>, Failure> {
    match cfg.output.as_deref() {
        Some(dir) => check_dir(dir).map(|_| Some(dir)),
        None => Ok(None),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_one(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let artifacts = experiment::run(cfg)?;
    match out {
        Some(dir) => {
            artifacts.write_to(dir)?;
            let acc = artifacts.final_accuracy().unwrap_or(f64::NAN);
            println!("{}: final accuracy {acc:.4}", cfg.mode.as_str());
        }
        None => print!("{}", artifacts.csv()),
    }
    Ok(())
}

fn run_compare(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let cmp = Comparison::run(cfg)?;
    if let Some(dir) = out {
        for (i, s) in cmp.single.iter().enumerate() {
            s.write_named(dir, &format!("{}_{i}", Mode::Single.as_str()))?;
        }
        cmp.centralized.write_to(dir)?;
        cmp.federated.write_to(dir)?;
    }
    let summary = cmp.summary()?.render();
    if let Some(dir) = out {
        write(&dir.join("summary.txt"), &summary)?;
    }
    print!("{summary}");
    Ok(())
}
