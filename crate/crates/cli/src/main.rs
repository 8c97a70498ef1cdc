use std::fs;
use std::io::Write as _;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use effcov::binary::{self, MixtureExampleSpec, ReportMode};
use effcov::empirics::{self, Binning, ColumnMap, RangeFilter};
use effcov::linear::{self, LinearModelParams};
use effcov::mle::{self, FitConfig};
use effcov::rng::derive_seed;
use effcov::scm::{self, ScmSpec};
use effcov::{CausalDag, KvReport};

/// Residual confounding from causal-effect covariability.
#[derive(Parser, Debug)]
#[command(name = "effcov", version, about)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    /// Line-oriented key=value.
    Machine,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tables and odds ratios of the two-type mixture example.
    DemoExample {
        #[arg(long, value_enum, default_value_t = Mode::Exact)]
        mode: Mode,
        /// Emit the tables as CSV instead of the text report.
        #[arg(long)]
        csv: bool,
    },
    /// Path, d-separation and backdoor queries on a graph file.
    Graph {
        /// Graph file: one `A -> B` edge or `node A` per line, `#` comments.
        file: PathBuf,
        #[command(subcommand)]
        query: GraphQuery,
    },
    /// Simulate a dataset from model parameters or a structural model.
    Simulate(SimulateArgs),
    /// Maximum-likelihood fit of the random-coefficient model.
    Fit(FitArgs),
    /// Likelihood-ratio test from two log-likelihoods.
    Lrt {
        #[arg(long, allow_hyphen_values = true)]
        ll_full: f64,
        #[arg(long, allow_hyphen_values = true)]
        ll_reduced: f64,
    },
    /// Per-level moment curves with bootstrap bands and model overlays.
    Moments(MomentsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Exact,
    Rounded,
}

#[derive(Subcommand, Debug)]
enum GraphQuery {
    /// List every path between two nodes.
    Paths { a: String, b: String },
    /// Exit 0 if the sets are d-separated given `--given`, else 1.
    Dsep {
        /// Comma-separated node set.
        a: String,
        /// Comma-separated node set.
        b: String,
        #[arg(long, value_delimiter = ',')]
        given: Vec<String>,
    },
    /// Exit 0 if `--given` blocks every backdoor path from x to y, else 1.
    Backdoor {
        x: String,
        y: String,
        #[arg(long, value_delimiter = ',')]
        given: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Random-coefficient parameters of the full model fitted to conscript data.
    StrengthFull,
    /// The two-type mixture example.
    Mixture,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Linear model parameters (TOML with the 13 named fields).
    #[arg(long, conflicts_with_all = ["scm", "preset"])]
    params: Option<PathBuf>,
    /// Structural model (TOML).
    #[arg(long, conflicts_with = "preset")]
    scm: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Number of units.
    #[arg(long, short)]
    n: usize,
    /// Observations per unit (structural models only).
    #[arg(long, default_value_t = 1)]
    obs_per_unit: usize,
    /// Integer z levels `lo:hi` for linear-model simulation.
    #[arg(long, default_value = "64:75")]
    levels: String,
    /// Equal counts per level instead of uniform draws.
    #[arg(long)]
    balanced: bool,
    /// Output CSV (stdout if omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Input CSV with a header row.
    data: PathBuf,
    #[arg(long, default_value = "z")]
    z_col: String,
    #[arg(long, default_value = "x")]
    x_col: String,
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Keep rows with `min <= column <= max`; `column:min:max`, repeatable.
    #[arg(long = "filter")]
    filters: Vec<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fix the slope covariance at zero.
    #[arg(long, conflicts_with = "compare")]
    reduced: bool,
    /// Fit both models and test the slope covariance.
    #[arg(long)]
    compare: bool,
    #[arg(long, default_value_t = 32)]
    starts: usize,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.2)]
    dispersion: f64,
    /// Percentile bootstrap with this many resamples.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Directory for `full.toml` / `reduced.toml` parameter files.
    #[arg(long)]
    save_params: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MomentsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 200)]
    n_boot: usize,
    /// Bin width for continuous z (default: one bin per distinct level).
    #[arg(long)]
    bin_width: Option<f64>,
    /// Full-model parameters to overlay.
    #[arg(long)]
    full: Option<PathBuf>,
    /// Reduced-model parameters to overlay.
    #[arg(long)]
    reduced: Option<PathBuf>,
    /// Output directory for the five panel files.
    #[arg(long, short)]
    out: PathBuf,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: e.into(),
        }
    }

    fn numeric(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 3,
            error: e.into(),
        }
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::DemoExample { mode, csv } => demo_example(cli, *mode, *csv),
        Command::Graph { file, query } => graph(cli, file, query),
        Command::Simulate(a) => simulate(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Lrt {
            ll_full,
            ll_reduced,
        } => {
            let r =
                mle::lrt_from_log_likelihoods(*ll_full, *ll_reduced).map_err(Failure::numeric)?;
            emit(cli, &r.to_kv(), || r.render_text(), None)?;
            Ok(0)
        }
        Command::Moments(a) => moments(cli, a),
    }
}

fn emit(
    cli: &Cli,
    kv: &KvReport,
    text: impl FnOnce() -> String,
    out: Option<&FsPath>,
) -> Result<(), Failure> {
    let body = match cli.format {
        Format::Machine => kv.to_string(),
        Format::Text => text(),
    };
    write_output(out, &body)
}

fn write_output(out: Option<&FsPath>, body: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, body)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::usage),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(body.as_bytes())
                .and_then(|_| so.flush())
                .map_err(Failure::usage)
        }
    }
}

fn demo_example(cli: &Cli, mode: Mode, csv: bool) -> Outcome {
    let spec = MixtureExampleSpec::two_types();
    let mode = match mode {
        Mode::Exact => ReportMode::Exact,
        Mode::Rounded => ReportMode::RoundedTable,
    };
    let m = binary::summary_measures(&spec, mode).map_err(Failure::numeric)?;
    if csv && cli.format == Format::Text {
        let body = binary::render_csv(&spec, mode).map_err(Failure::numeric)?;
        write_output(None, &body)?;
        return Ok(0);
    }
    let text = binary::render_text(&spec, mode).map_err(Failure::numeric)?;
    emit(cli, &m.to_kv(), || text, None)?;
    Ok(0)
}

fn split_set(s: &str) -> Vec<&str> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect()
}

fn graph(cli: &Cli, file: &FsPath, q: &GraphQuery) -> Outcome {
    let text = fs::read_to_string(file)
        .with_context(|| format!("reading {}", file.display()))
        .map_err(Failure::usage)?;
    let g = CausalDag::parse(&text).map_err(Failure::usage)?;
    let mut kv = KvReport::new();
    match q {
        GraphQuery::Paths { a, b } => {
            let paths = g.enumerate_paths(a, b).map_err(Failure::usage)?;
            kv.push("paths.count", paths.len());
            for (i, p) in paths.iter().enumerate() {
                kv.push(format!("paths.{i}"), p);
            }
            let text = || {
                let mut s = format!("{} path(s) between {a} and {b}\n", paths.len());
                for p in &paths {
                    s.push_str(&format!("  {p}\n"));
                }
                s
            };
            emit(cli, &kv, text, None)?;
            Ok(0)
        }
        GraphQuery::Dsep { a, b, given } => {
            let given: Vec<&str> = given.iter().map(String::as_str).collect();
            let sep = g
                .d_separated(&split_set(a), &split_set(b), &given)
                .map_err(Failure::usage)?;
            kv.push("dsep", sep);
            let text = || {
                format!(
                    "{{{a}}} and {{{b}}} are {} given {{{}}}\n",
                    if sep { "d-separated" } else { "d-connected" },
                    given.join(",")
                )
            };
            emit(cli, &kv, text, None)?;
            Ok(if sep { 0 } else { 1 })
        }
        GraphQuery::Backdoor { x, y, given } => {
            let given: Vec<&str> = given.iter().map(String::as_str).collect();
            let paths = g.backdoor_paths(x, y).map_err(Failure::usage)?;
            let blocked = g.backdoor_blocked(x, y, &given).map_err(Failure::usage)?;
            kv.push("backdoor.blocked", blocked);
            kv.push("backdoor.count", paths.len());
            let mut open = Vec::new();
            for (i, p) in paths.iter().enumerate() {
                let b = g.path_blocked(p, &given).map_err(Failure::usage)?;
                kv.push(format!("backdoor.{i}"), p);
                kv.push(format!("backdoor.{i}.blocked"), b);
                if !b {
                    open.push(p);
                }
            }
            let text = || {
                let mut s = format!(
                    "backdoor paths from {x} to {y}: {}; {} by {{{}}}\n",
                    paths.len(),
                    if blocked {
                        "all blocked"
                    } else {
                        "not blocked"
                    },
                    given.join(",")
                );
                for p in &open {
                    s.push_str(&format!("  open: {p}\n"));
                }
                s
            };
            emit(cli, &kv, text, None)?;
            Ok(if blocked { 0 } else { 1 })
        }
    }
}

fn parse_levels(s: &str) -> anyhow::Result<Vec<f64>> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("levels must look like lo:hi, got `{s}`"))?;
    let (lo, hi): (i64, i64) = (lo.trim().parse()?, hi.trim().parse()?);
    if lo > hi {
        return Err(anyhow!("empty level range {s}"));
    }
    Ok(linear::integer_levels(lo, hi))
}

fn read_params(path: &FsPath) -> Result<LinearModelParams, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::usage)?;
    LinearModelParams::from_toml(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::usage)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Outcome {
    if a.n == 0 {
        return Err(Failure::usage(anyhow!("--n must be positive")));
    }
    let levels = parse_levels(&a.levels).map_err(Failure::usage)?;
    let linear_params = match (&a.params, a.preset) {
        (Some(p), _) => Some(read_params(p)?),
        (None, Some(Preset::StrengthFull)) => Some(LinearModelParams::strength_full()),
        _ => None,
    };
    let (body, provenance) = if let Some(p) = linear_params {
        let zs = if a.balanced {
            if !a.n.is_multiple_of(levels.len()) {
                return Err(Failure::usage(anyhow!(
                    "--balanced needs n divisible by the {} levels",
                    levels.len()
                )));
            }
            linear::balanced_levels(&levels, a.n / levels.len())
        } else {
            linear::uniform_levels(&levels, a.n, cli.seed)
        };
        let d = linear::simulate(&p, &zs, cli.seed).map_err(Failure::numeric)?;
        let hash = effcov::report::sha256_hex(p.to_toml().as_bytes());
        (
            d.to_csv(),
            format!("spec_hash={hash} seed={} units={}", cli.seed, a.n),
        )
    } else {
        let spec = match (&a.scm, a.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(Failure::usage)?;
                ScmSpec::from_toml(&text).map_err(Failure::usage)?
            }
            (None, Some(Preset::Mixture)) => {
                ScmSpec::mixture_example(&MixtureExampleSpec::two_types())
                    .map_err(Failure::numeric)?
            }
            _ => {
                return Err(Failure::usage(anyhow!(
                    "one of --params, --scm or --preset is required"
                )))
            }
        };
        let pop = scm::sample_population(&spec, a.n, a.obs_per_unit, cli.seed)
            .map_err(Failure::numeric)?;
        (pop.to_csv(), pop.provenance.to_string())
    };
    write_output(a.out.as_deref(), &body)?;
    eprintln!("provenance: {provenance}");
    Ok(0)
}

fn load_data(d: &DataArgs) -> Result<effcov::Dataset, Failure> {
    let filters = d
        .filters
        .iter()
        .map(|f| {
            RangeFilter::parse(f)
                .ok_or_else(|| anyhow!("bad filter `{f}`, expected column:min:max"))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(Failure::usage)?;
    let cols = ColumnMap {
        z: d.z_col.clone(),
        x: d.x_col.clone(),
        y: d.y_col.clone(),
        unit_id: None,
    };
    let (data, report) = empirics::ingest(&d.data, &cols, &filters)
        .with_context(|| format!("reading {}", d.data.display()))
        .map_err(Failure::usage)?;
    if report.dropped > 0 {
        eprintln!(
            "kept {} rows, dropped {} by filters",
            report.kept, report.dropped
        );
    }
    Ok(data)
}

fn fit(cli: &Cli, a: &FitArgs) -> Outcome {
    let data = load_data(&a.data)?;
    let cfg = FitConfig {
        n_starts: a.starts,
        tolerance: a.tolerance,
        max_iter: a.max_iter,
        dispersion: a.dispersion,
        reduced: a.reduced,
        seed: cli.seed,
        ..FitConfig::default()
    };
    cfg.validate().map_err(Failure::usage)?;
    let boot = |cfg: &FitConfig| -> Result<Option<mle::BootstrapSummary>, Failure> {
        a.bootstrap
            .map(|n| mle::bootstrap(&data, cfg, n, derive_seed(cli.seed, 0xb007)))
            .transpose()
            .map_err(Failure::numeric)
    };

    let mut kv = KvReport::new();
    let mut text = String::new();
    let mut converged = true;
    let mut save = Vec::new();
    if a.compare {
        let (full, reduced) = mle::fit_nested(&data, &cfg).map_err(Failure::numeric)?;
        let lrt = mle::likelihood_ratio_test(&full, &reduced).map_err(Failure::numeric)?;
        let b = boot(&cfg)?;
        kv.extend("full.", &full.to_kv());
        kv.extend("reduced.", &reduced.to_kv());
        kv.extend("", &lrt.to_kv());
        if let Some(b) = &b {
            kv.extend("full.", &b.to_kv());
        }
        text.push_str(&full.render_text(b.as_ref()));
        text.push('\n');
        text.push_str(&reduced.render_text(None));
        text.push('\n');
        text.push_str(&lrt.render_text());
        converged = full.converged && reduced.converged;
        save.push(("full.toml", full.params));
        save.push(("reduced.toml", reduced.params));
    } else {
        let b = boot(&cfg)?;
        let r = match &b {
            Some(b) => b.point.clone(),
            None => mle::fit(&data, &cfg).map_err(Failure::numeric)?,
        };
        kv.extend("", &r.to_kv());
        if let Some(b) = &b {
            kv.extend("", &b.to_kv());
        }
        text.push_str(&r.render_text(b.as_ref()));
        converged = converged && r.converged;
        save.push((
            if a.reduced {
                "reduced.toml"
            } else {
                "full.toml"
            },
            r.params,
        ));
    }
    if let Some(dir) = &a.save_params {
        fs::create_dir_all(dir).map_err(Failure::usage)?;
        for (name, p) in save {
            fs::write(dir.join(name), p.to_toml()).map_err(Failure::usage)?;
        }
    }
    emit(cli, &kv, || text, a.out.as_deref())?;
    if converged {
        Ok(0)
    } else {
        eprintln!("warning: simplex did not converge within --max-iter");
        Ok(3)
    }
}

fn moments(cli: &Cli, a: &MomentsArgs) -> Outcome {
    let data = load_data(&a.data)?;
    let full = a.full.as_deref().map(read_params).transpose()?;
    let reduced = a.reduced.as_deref().map(read_params).transpose()?;
    let binning = match a.bin_width {
        Some(width) => Binning::Width { width, origin: 0.0 },
        None => Binning::ExactLevels,
    };
    let curve =
        empirics::moment_curve(&data, binning, a.n_boot, cli.seed).map_err(Failure::usage)?;
    let table = empirics::overlay(full.as_ref(), reduced.as_ref(), &curve);
    let files = table.write_panels(&a.out).map_err(Failure::usage)?;
    let mut kv = KvReport::new();
    kv.push("bins", curve.bins.len()).push("n_boot", a.n_boot);
    for (i, f) in files.iter().enumerate() {
        kv.push(format!("file.{i}"), f.display());
    }
    let text = || {
        let mut s = format!(
            "{} bins, {} bootstrap resamples per bin\n",
            curve.bins.len(),
            a.n_boot
        );
        for f in &files {
            s.push_str(&format!("wrote {}\n", f.display()));
        }
        s
    };
    emit(cli, &kv, text, None)?;
    Ok(0)
}
