use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nmaipw::diagnostics::{eggers_test, funnel_data};
use nmaipw::ipw::{fit_ipw_policy, parametric_bootstrap};
use nmaipw::report::{check_treatments, replicates_csv};
use nmaipw::{
    fit_weighted, load_dataset, p_score, run_monte_carlo, Direction, Error, FitDocument, NetworkDataset,
    RankDocument, RootPolicy, Schema, SelectionSpec, SimConfig, SimMetrics, TauMode, TreatmentId,
};

#[derive(Parser)]
#[command(name = "nmaipw", version, about = "Network meta-analysis with registry-based publication-bias adjustment")]
struct Cli {
    /// Worker threads for bootstrap and Monte Carlo loops (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Console rendering.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Tau {
    Common,
    Design,
}

impl From<Tau> for TauMode {
    fn from(t: Tau) -> Self {
        match t {
            Tau::Common => TauMode::Common,
            Tau::Design => TauMode::DesignSpecific,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dir {
    Higher,
    Lower,
}

impl From<Dir> for Direction {
    fn from(d: Dir) -> Self {
        match d {
            Dir::Higher => Direction::Higher,
            Dir::Lower => Direction::Lower,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Heterogeneity structure.
    #[arg(long, value_enum, default_value_t = Tau::Design)]
    tau: Tau,
    /// Reference treatment for the basic contrasts.
    #[arg(long)]
    reference: Option<String>,
    /// Which sign of the effect counts as benefit.
    #[arg(long, value_enum, default_value_t = Dir::Higher)]
    direction: Dir,
}

#[derive(Subcommand)]
enum Command {
    /// Unadjusted multivariate random-effects fit.
    Fit {
        studies: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// fit-v1 JSON output [default: <studies>.fit.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Publication-bias adjusted fit by inverse probability weighting.
    Adjust {
        studies: PathBuf,
        /// Selection model: logit2, probit2, logitK1, probitK1, logit2K, probit2K.
        #[arg(long)]
        selection: SelectionSpec,
        #[command(flatten)]
        model: ModelArgs,
        /// Parametric bootstrap replicates; 0 skips the bootstrap.
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long)]
        seed: u64,
        /// Fail when the selection equations have no exact root instead of
        /// using the least-squares solution.
        #[arg(long)]
        strict_root: bool,
        /// Write the bootstrap replicate matrix to this CSV file.
        #[arg(long)]
        dump_replicates: Option<PathBuf>,
        /// fit-v1 JSON output [default: <studies>.ipw-<selection>.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// P-score ranking from a fit document.
    Rank {
        fit: PathBuf,
        /// Overrides the direction stored in the fit document.
        #[arg(long, value_enum)]
        direction: Option<Dir>,
        /// rank-v1 JSON output [default: <fit>.rank.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo experiment from a TOML configuration.
    Simulate {
        config: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: u64,
        /// Overrides the number of replications.
        #[arg(long)]
        replications: Option<usize>,
        /// Overrides the number of bootstrap replicates.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Metrics CSV output; a JSON twin is written alongside
        /// [default: <config>.metrics.csv]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison-adjusted funnel plot data with registry overlays.
    Funnel {
        studies: PathBuf,
        fit: PathBuf,
        /// funnel-v1 CSV output [default: <studies>.funnel.csv]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a static SVG rendering.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Egger's regression test for funnel asymmetry.
    Egger {
        studies: PathBuf,
        fit: PathBuf,
        /// egger-v1 JSON output [default: <studies>.egger.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type CliResult<T> = Result<T, Failure>;

enum Failure {
    Input(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn default_out(input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    PathBuf::from(format!("{stem}.{suffix}"))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn load(path: &Path, direction: Direction) -> CliResult<NetworkDataset> {
    let data = load_dataset(path, Schema::StudiesLongV1).map_err(|e| match e {
        Error::Io(io) => io_failure(path, io),
        other => other.into(),
    })?;
    Ok(data.with_direction(direction))
}

fn load_fit(path: &Path) -> CliResult<FitDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    FitDocument::from_json(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn reference(data: &NetworkDataset, label: &Option<String>) -> CliResult<TreatmentId> {
    match label {
        Some(l) => Ok(data.treatment(l)?.clone()),
        None => Ok(data.default_reference()),
    }
}

fn emit_fit(doc: &FitDocument, format: Format) -> CliResult<String> {
    Ok(match format {
        Format::Json => doc.to_json()?,
        Format::Csv => doc.to_csv(),
        Format::Text => doc.to_text(),
    })
}

fn metrics_text(m: &SimMetrics) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    let mut s = format!(
        "replications: {}   bootstrap: {}   unpublished fraction: {:.3}\n\n",
        m.replications, m.bootstrap, m.mean_unpublished_fraction
    );
    let _ = writeln!(
        s,
        "{:<14} {:<9} {:>6} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5}",
        "estimator", "parameter", "truth", "AVE", "SD", "CP", "LOCI", "NOZ", "fail"
    );
    for r in &m.rows {
        let _ = writeln!(
            s,
            "{:<14} {:<9} {:>6.3} {:>7.3} {:>7} {:>7} {:>7} {:>5} {:>5}",
            r.estimator,
            r.parameter,
            r.truth,
            r.ave,
            opt(r.sd),
            opt(r.cp),
            opt(r.loci),
            r.noz.map_or_else(|| "-".to_string(), |v| v.to_string()),
            r.failures
        );
    }
    s
}

fn run(cli: Cli) -> CliResult<String> {
    let format = cli.format;
    match cli.command {
        Command::Fit { studies, model, out } => {
            let direction = model.direction.into();
            let data = load(&studies, direction)?;
            let fit = fit_weighted(&data, &reference(&data, &model.reference)?, model.tau.into(), None)?;
            let doc = FitDocument::from_mre(&fit, direction)?;
            write(&out.unwrap_or_else(|| default_out(&studies, "fit.json")), &doc.to_json()?)?;
            emit_fit(&doc, format)
        }
        Command::Adjust {
            studies,
            selection,
            model,
            bootstrap,
            seed,
            strict_root,
            dump_replicates,
            out,
        } => {
            let direction = model.direction.into();
            let data = load(&studies, direction)?;
            let spec = selection.with_direction(direction);
            let policy = if strict_root {
                RootPolicy::Exact
            } else {
                RootPolicy::LeastSquares
            };
            let mut fit = fit_ipw_policy(&data, &spec, &reference(&data, &model.reference)?, model.tau.into(), policy)?;
            if bootstrap > 0 {
                fit.boot = Some(parametric_bootstrap(&data, &fit, bootstrap, seed)?);
            }
            if let Some(path) = &dump_replicates {
                let boot = fit
                    .boot
                    .as_ref()
                    .ok_or_else(|| Failure::Input("--dump-replicates needs --bootstrap > 0".into()))?;
                write(path, &replicates_csv(boot))?;
            }
            let doc = FitDocument::from_ipw(&fit, (bootstrap > 0).then_some(seed))?;
            let suffix = format!("ipw-{}.json", spec.token());
            write(&out.unwrap_or_else(|| default_out(&studies, &suffix)), &doc.to_json()?)?;
            emit_fit(&doc, format)
        }
        Command::Rank { fit, direction, out } => {
            let doc = load_fit(&fit)?;
            let direction = direction.map_or(doc.direction, Direction::from);
            let table = p_score(&doc.league_table(), direction)?;
            let rank = RankDocument::new(table);
            write(&out.unwrap_or_else(|| default_out(&fit, "rank.json")), &rank.to_json()?)?;
            Ok(match format {
                Format::Json => rank.to_json()?,
                Format::Csv => rank.to_csv(),
                Format::Text => rank.table.to_string(),
            })
        }
        Command::Simulate {
            config,
            seed,
            replications,
            bootstrap,
            out,
        } => {
            let mut cfg = SimConfig::load(&config).map_err(|e| match e {
                Error::Io(io) => io_failure(&config, io),
                other => other.into(),
            })?;
            cfg.seed = seed;
            if let Some(r) = replications {
                cfg.replications = r;
            }
            if let Some(b) = bootstrap {
                cfg.bootstrap = b;
            }
            let metrics = run_monte_carlo(&cfg)?;
            let csv_path = out.unwrap_or_else(|| default_out(&config, "metrics.csv"));
            write(&csv_path, &metrics.to_csv())?;
            write(&csv_path.with_extension("json"), &metrics.to_json()?)?;
            Ok(match format {
                Format::Json => metrics.to_json()?,
                Format::Csv => metrics.to_csv(),
                Format::Text => metrics_text(&metrics),
            })
        }
        Command::Funnel { studies, fit, out, svg } => {
            let doc = load_fit(&fit)?;
            let data = load(&studies, doc.direction)?;
            check_treatments(&doc, &data)?;
            let funnel = funnel_data(&data, &doc.point_fit()?)?;
            write(&out.unwrap_or_else(|| default_out(&studies, "funnel.csv")), &funnel.to_csv())?;
            if let Some(path) = svg {
                write(&path, &funnel.to_svg())?;
            }
            Ok(match format {
                Format::Json => serde_json::to_string_pretty(&funnel).map_err(Error::from)? + "\n",
                _ => funnel.to_csv(),
            })
        }
        Command::Egger { studies, fit, out } => {
            let doc = load_fit(&fit)?;
            let data = load(&studies, doc.direction)?;
            check_treatments(&doc, &data)?;
            let r = eggers_test(&data, &doc.point_fit()?)?;
            let json = serde_json::to_string_pretty(&r).map_err(Error::from)? + "\n";
            write(&out.unwrap_or_else(|| default_out(&studies, "egger.json")), &json)?;
            Ok(match format {
                Format::Json => json,
                Format::Csv => format!(
                    "m,intercept,se,t,df,p_value,slope\n{},{},{},{},{},{},{}\n",
                    r.m, r.intercept, r.se, r.t, r.df, r.p_value, r.slope
                ),
                Format::Text => format!(
                    "Egger test on {} comparisons: intercept {:.4} (se {:.4}), t = {:.3} on {} df, p = {:.4}\n",
                    r.m, r.intercept, r.se, r.t, r.df, r.p_value
                ),
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(Failure::Input(format!("cannot start {n} threads: {e}"))),
        },
        None => run(cli),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
