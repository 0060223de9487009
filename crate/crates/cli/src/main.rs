use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use favit::attnmap;
use favit::check::{self, Scope, PARAM_BAND, REFERENCE_PARAMS};
use favit::flops::{self, Mechanism, SweepOptions, SweepTarget};
use favit::model::{self, ModelParams, VariantSpec};
use favit::{Error, Fusion, Initializer};

/// Factorization self-attention and FaViT backbones.
#[derive(Parser)]
#[command(name = "favit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Built-in variant (B0, B1, B2, B3).
    #[arg(long, default_value = "B0", conflicts_with = "config")]
    variant: String,
    /// JSON variant file instead of a built-in name.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cross-window fusion, overriding the variant.
    #[arg(long)]
    fusion: Option<FusionArg>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Max,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Dense,
    Window,
    Fasa,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Fasa,
    Model,
    Grads,
    Oracles,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-stage layout of a variant.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run randomized property suites.
    Check {
        #[arg(value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = check::DEFAULT_TRIALS)]
        trials: usize,
        /// Where a failing case is written.
        #[arg(long, default_value = "favit-out")]
        out: PathBuf,
    },
    /// Measure MACs (and optionally time) across input sizes.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated input sizes.
        #[arg(long, value_delimiter = ',', default_value = "224,448,896")]
        sizes: Vec<usize>,
        /// Sweep one attention layer on the stage-1 map instead of the whole model.
        #[arg(long)]
        mechanism: Option<MechanismArg>,
        /// Timed repetitions per size (best-of); 0 disables timing.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value = "favit-out")]
        out: PathBuf,
        /// Print every row to stdout as well.
        #[arg(long)]
        trace: bool,
    },
    /// Export attention-span maps for one query position.
    Attnmap {
        #[command(flatten)]
        model: ModelArgs,
        /// Stage 1..=4.
        #[arg(long, default_value_t = 1)]
        stage: usize,
        /// Query position on the stage map as ROW,COL.
        #[arg(long, value_parser = parse_query)]
        query: (usize, usize),
        /// Binary PPM/PGM image; a seeded random image is used otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Side of the random image.
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value = "favit-out")]
        out: PathBuf,
        /// Print per-group window and padding details.
        #[arg(long)]
        trace: bool,
    },
    /// Count parameters and compare against the reference sizes.
    Paramcount {
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn parse_query(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((num(r)?, num(c)?))
}

enum Failure {
    Verification(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::NonFinite(_) | Error::Contract(_) => {
                Failure::Verification(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Verification(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_spec(args: &ModelArgs) -> Result<VariantSpec, Error> {
    let mut spec = match &args.config {
        Some(path) => VariantSpec::load_config(path)?,
        None => model::load_variant(&args.variant)?,
    };
    if let Some(f) = args.fusion {
        spec = spec.with_fusion(match f {
            FusionArg::Max => Fusion::Max,
            FusionArg::Mean => Fusion::Mean,
        });
    }
    Ok(spec)
}

fn fmt_list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(usize::to_string).collect();
    format!("[{}]", items.join(","))
}

fn describe(args: &ModelArgs) -> Outcome {
    let spec = load_spec(args)?;
    println!(
        "FaViT-{} M={} fusion={} classes={} in_channels={}",
        spec.name, spec.sample_side, spec.fusion, spec.num_classes, spec.in_channels
    );
    for (s, st) in spec.stages.iter().enumerate() {
        let cfg = spec.fasa_config(s)?;
        println!(
            "stage {}: P={} C={} H={} E={} B={} D={} S={} G={} head_dim={} out=H/{}",
            s + 1,
            st.patch_size,
            st.channels,
            st.heads,
            st.mlp_ratio,
            st.blocks,
            fmt_list(&st.dilations),
            fmt_list(&cfg.window_sides()),
            cfg.groups(),
            cfg.head_dim(),
            spec.reduction(s),
        );
    }
    Ok(())
}

fn run_check(scope: ScopeArg, seed: u64, trials: usize, out: &Path) -> Outcome {
    let scope = match scope {
        ScopeArg::Fasa => Scope::Fasa,
        ScopeArg::Model => Scope::Model,
        ScopeArg::Grads => Scope::Grads,
        ScopeArg::Oracles => Scope::Oracles,
        ScopeArg::All => Scope::All,
    };
    let outcomes = check::run_scope(scope, seed, trials)?;
    for o in &outcomes {
        println!("{o}");
    }
    match check::write_counterexample(out, &outcomes)? {
        Some(path) => Err(Failure::Verification(format!(
            "property failed; counterexample written to {}",
            path.display()
        ))),
        None => Ok(()),
    }
}

fn bench(
    args: &ModelArgs,
    sizes: &[usize],
    mechanism: Option<MechanismArg>,
    repeats: usize,
    out: &Path,
    trace: bool,
) -> Outcome {
    if sizes.is_empty() {
        return Err(Failure::Usage("no sizes given".into()));
    }
    if let Some(bad) = sizes.iter().find(|&&s| s == 0 || s % 32 != 0) {
        return Err(Failure::Usage(format!("size {bad} is not divisible by 32")));
    }
    let spec = load_spec(args)?;
    let (target, label, power) = match mechanism {
        None => (SweepTarget::Variant(spec.clone()), spec.name.clone(), 1),
        Some(m) => {
            let (mech, power) = match m {
                MechanismArg::Dense => (Mechanism::DenseSa, 2),
                MechanismArg::Window => (Mechanism::WindowSa, 1),
                MechanismArg::Fasa => (Mechanism::Fasa, 1),
            };
            let config = spec.fasa_config(0)?;
            (
                SweepTarget::Mechanism {
                    mechanism: mech,
                    config,
                },
                mech.to_string(),
                power,
            )
        }
    };
    let opts = SweepOptions {
        repeats,
        seed: args.seed,
        ..SweepOptions::default()
    };
    let reports = flops::sweep(&target, sizes, &opts)?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("bench_{label}.csv"));
    flops::write_csv(fs::File::create(&path)?, &reports)?;
    if trace {
        flops::write_csv(std::io::stdout().lock(), &reports)?;
    }
    let first = &reports[0];
    let last = &reports[reports.len() - 1];
    let value = |r: &flops::FlopReport| r.measured_macs.map_or(r.formula_macs as f64, |m| m as f64);
    println!("wrote {} ({} rows)", path.display(), reports.len());
    println!(
        "cost ratio {}->{}: {:.4} (token ratio {:.4})",
        first.size,
        last.size,
        value(last) / value(first),
        last.tokens as f64 / first.tokens as f64
    );
    let law = if power == 1 { "linear" } else { "quadratic" };
    println!(
        "{law} fit residual: {:.3e}",
        flops::fit_residual(&reports, power)
    );
    Ok(())
}

fn attnmap_cmd(
    args: &ModelArgs,
    stage: usize,
    query: (usize, usize),
    image: Option<&Path>,
    size: usize,
    out: &Path,
    trace: bool,
) -> Outcome {
    let spec = load_spec(args)?;
    let model = ModelParams::build(&spec, args.seed)?;
    let img = match image {
        Some(p) => attnmap::read_image(p)?,
        None => {
            let mut init = Initializer::new(args.seed);
            init.normal(&[1, size, size, spec.in_channels])
        }
    };
    let spans = attnmap::stage_spans(&model, stage, query, img)?;
    let paths = attnmap::write_spans(out, stage, &spans)?;
    for s in &spans {
        let support = s.support();
        println!(
            "group {}: {}x{} map, {} positions, mass {:.6}, padding {:.6}",
            s.group,
            s.map_h,
            s.map_w,
            support.len(),
            s.total(),
            s.padding_mass
        );
        if trace {
            let coords: Vec<String> = support.iter().map(|(r, c)| format!("({r},{c})")).collect();
            println!("  support {}", coords.join(" "));
        }
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn paramcount(args: &ModelArgs) -> Outcome {
    let spec = load_spec(args)?;
    let model = ModelParams::build(&spec, args.seed)?;
    let count = model::count_params(&model);
    let reference = model::VARIANT_NAMES
        .iter()
        .position(|n| *n == spec.name)
        .map(|i| REFERENCE_PARAMS[i]);
    match reference {
        Some(p) => {
            let (lo, hi) = (p * (1.0 - PARAM_BAND), p * (1.0 + PARAM_BAND));
            let ok = (lo..=hi).contains(&(count as f64));
            println!(
                "{}: {count} parameters, band [{:.2}M, {:.2}M] {}",
                spec.name,
                lo / 1e6,
                hi / 1e6,
                if ok { "PASS" } else { "FAIL" }
            );
            if ok {
                Ok(())
            } else {
                Err(Failure::Verification(format!(
                    "{count} is outside the reference band"
                )))
            }
        }
        None => {
            println!("{}: {count} parameters (no reference count)", spec.name);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Describe { model } => describe(model),
        Command::Check {
            scope,
            seed,
            trials,
            out,
        } => run_check(*scope, *seed, *trials, out),
        Command::Bench {
            model,
            sizes,
            mechanism,
            repeats,
            out,
            trace,
        } => bench(model, sizes, *mechanism, *repeats, out, *trace),
        Command::Attnmap {
            model,
            stage,
            query,
            image,
            size,
            out,
            trace,
        } => attnmap_cmd(model, *stage, *query, image.as_deref(), *size, out, *trace),
        Command::Paramcount { model } => paramcount(model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
