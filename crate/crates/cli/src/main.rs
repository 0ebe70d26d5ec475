use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icefactor::ingest::{build_panel, parse_source, PanelPolicy, SourceSpec};
use icefactor::panel::resolve_indicator;
use icefactor::simulation::{monte_carlo_recovery, named_parameters, simulate, ShockDist, SimConfig};
use icefactor::{
    build_design_matrix, compare_normalizations, extract_factor, fit_em, EMConfig, Error, ExtractedSeries, FitResult,
    IndicatorPanel, ModelParams, ParamValues, Result, YearMonth,
};

/// Single-factor state-space estimation for sea-ice extent indicators.
#[derive(Parser)]
#[command(name = "icefactor", version)]
struct Cli {
    /// On failure, print a JSON error object to stderr instead of plain text.
    #[arg(long, global = true)]
    error_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse provider files and align them into a panel CSV.
    Ingest(IngestArgs),
    /// Estimate the model on a panel by EM.
    Fit(FitArgs),
    /// Smoothed latent series at fitted parameters.
    Extract(ExtractArgs),
    /// Month-by-month regression of one extraction on another.
    Compare(CompareArgs),
    /// Simulate a panel from model parameters.
    Simulate(SimulateArgs),
    /// Monte Carlo recovery study.
    Mc(McArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct IngestArgs {
    /// `PRESET=PATH`, or `SPEC.json=PATH` for a custom layout. Repeat per
    /// source; panel columns follow the order given.
    #[arg(long = "source", required = true, value_name = "PRESET=PATH")]
    sources: Vec<String>,
    /// Panel CSV destination (stdout if omitted).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the panel report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Values at or below this are masked.
    #[arg(long, default_value_t = 0.0)]
    lower: f64,
    /// Values above this are masked.
    #[arg(long, default_value_t = 30.0)]
    upper: f64,
    /// Accept series with no month in common.
    #[arg(long)]
    allow_no_overlap: bool,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    /// Relative log-likelihood change for convergence.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Max-abs parameter change for convergence.
    #[arg(long, default_value_t = 1e-7)]
    param_tol: f64,
    /// Skip the Hessian standard errors.
    #[arg(long)]
    no_se: bool,
    /// Plain EM steps without extrapolation.
    #[arg(long)]
    no_accel: bool,
}

impl EmArgs {
    fn config(&self) -> EMConfig {
        EMConfig {
            max_iters: self.max_iters,
            loglik_tol: self.tol,
            param_tol: self.param_tol,
            standard_errors: !self.no_se,
            acceleration: !self.no_accel,
            ..EMConfig::default()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Indicator with c = 0, λ = 1: S, J, B, G or a column name.
    #[arg(long, default_value = "S")]
    anchor: String,
    /// Month with TIME = 1 (default: first panel month).
    #[arg(long, value_name = "YYYY-MM")]
    time_origin: Option<YearMonth>,
    /// Starting parameters as JSON (default: data-driven start).
    #[arg(long)]
    start: Option<PathBuf>,
    #[command(flatten)]
    em: EmArgs,
    /// `json` writes the full fit; `csv` a parameter table.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Fit JSON written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Long CSV with the latent series and each indicator, for plotting.
    #[arg(long)]
    long: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Extraction used as the regressor (CSV or .json).
    #[arg(long)]
    base: PathBuf,
    /// Extraction used as the response (CSV or .json).
    #[arg(long)]
    other: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Parameters as JSON (default: the reference sea-ice estimates).
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 506)]
    periods: usize,
    #[arg(long, value_name = "YYYY-MM", default_value = "1978-11")]
    start_date: YearMonth,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Degrees of freedom for unit-variance Student-t shocks (Gaussian if omitted).
    #[arg(long)]
    t_dof: Option<f64>,
}

impl ModelArgs {
    fn config(&self) -> Result<SimConfig> {
        let params = match &self.params {
            Some(p) => read_json::<ParamValues>(p).and_then(ModelParams::try_from)?,
            None => ModelParams::sea_ice_reference(),
        };
        let mut cfg = SimConfig::new(params, self.periods, self.start_date, self.seed);
        if let Some(dof) = self.t_dof {
            cfg.shocks = ShockDist::StudentT { dof };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Panel CSV destination (stdout if omitted).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the simulated latent states as `date,state` CSV.
    #[arg(long)]
    states: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_panel(path: &Path) -> Result<IndicatorPanel> {
    IndicatorPanel::read_csv(read_text(path)?.as_bytes())
}

fn read_extraction(path: &Path) -> Result<ExtractedSeries> {
    if path.extension().is_some_and(|e| e == "json") {
        read_json(path)
    } else {
        ExtractedSeries::read_csv(read_text(path)?.as_bytes())
    }
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_json<T: serde::Serialize>(path: &Option<PathBuf>, value: &T) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let mut series = Vec::new();
    for s in &args.sources {
        let (key, path) = s
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("--source expects PRESET=PATH, got {s:?}")))?;
        let spec = if key.ends_with(".json") {
            read_json::<SourceSpec>(Path::new(key))?
        } else {
            SourceSpec::preset(key)?
        };
        let parsed = parse_source(&read_text(Path::new(path))?, &spec)?;
        for w in &parsed.warnings {
            eprintln!("warning: {w}");
        }
        series.push(parsed);
    }
    let policy = PanelPolicy {
        lower: args.lower,
        upper: args.upper,
        require_overlap: !args.allow_no_overlap,
    };
    let (panel, report) = build_panel(&series, &policy)?;
    let mut w = sink(&args.output)?;
    panel.write_csv(&mut w)?;
    w.flush()?;
    if let Some(p) = &args.report {
        write_json(&Some(p.clone()), &report)?;
    }
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let panel = read_panel(&args.panel)?;
    if panel.is_empty() {
        return Err(Error::Format("panel has no rows".into()));
    }
    let anchor = resolve_indicator(panel.names(), &args.anchor)?;
    let origin = args.time_origin.unwrap_or(panel.dates()[0]);
    let design = build_design_matrix(panel.dates(), origin)?;
    let mut em = args.em.config();
    if let Some(p) = &args.start {
        em.seed_params = Some(read_json::<ParamValues>(p).and_then(ModelParams::try_from)?);
    }
    let fit = fit_em(&panel, &design, anchor, &em)?;
    if !fit.converged {
        eprintln!("warning: stopped after {} iterations without meeting the tolerance", fit.iterations());
    }
    match args.format {
        Format::Json => write_json(&args.output, &fit),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink(&args.output)?);
            w.write_record(["parameter", "estimate", "std_error"])?;
            for (name, est, se) in named_parameters(&fit.params, fit.std_errors.as_ref()) {
                w.write_record([name, est.to_string(), se.map(|s| s.to_string()).unwrap_or_default()])?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn extract(args: &ExtractArgs) -> Result<()> {
    let panel = read_panel(&args.panel)?;
    let fit: FitResult = read_json(&args.fit)?;
    if fit.params.names() != panel.names() {
        return Err(Error::Input("fit and panel have different indicators".into()));
    }
    let design = build_design_matrix(panel.dates(), fit.time_origin)?;
    let e = extract_factor(&fit, &panel, &design)?;
    match (args.format, args.long) {
        (Format::Json, _) => write_json(&args.output, &e),
        (Format::Csv, true) => {
            let mut w = sink(&args.output)?;
            e.write_long_csv(&panel, &mut w)?;
            w.flush()?;
            Ok(())
        }
        (Format::Csv, false) => {
            let mut w = sink(&args.output)?;
            e.write_csv(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn compare(args: &CompareArgs) -> Result<()> {
    let cmp = compare_normalizations(&read_extraction(&args.base)?, &read_extraction(&args.other)?)?;
    match args.format {
        Format::Json => write_json(&args.output, &cmp),
        Format::Csv => {
            let mut w = sink(&args.output)?;
            cmp.write_csv(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let cfg = args.model.config()?;
    let (panel, states) = simulate(&cfg)?;
    let mut w = sink(&args.output)?;
    panel.write_csv(&mut w)?;
    w.flush()?;
    if let Some(p) = &args.states {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["date", "state"])?;
        for (d, x) in panel.dates().iter().zip(&states) {
            w.write_record([d.to_string(), x.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn mc(args: &McArgs) -> Result<()> {
    let cfg = args.model.config()?;
    let report = monte_carlo_recovery(&cfg, args.reps, &args.em.config())?;
    match args.format {
        Format::Json => write_json(&args.output, &report),
        Format::Csv => {
            let mut w = sink(&args.output)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Input(_) => "input",
        Error::Format(_) | Error::Csv(_) | Error::Json(_) => "format",
        Error::Io(_) => "io",
        _ => "numerical",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Fit(a) => fit(a),
        Command::Extract(a) => extract(a),
        Command::Compare(a) => compare(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Mc(a) => mc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if cli.error_json {
                let obj = serde_json::json!({ "error": kind(&e), "message": e.to_string(), "exit_code": code });
                eprintln!("{obj}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}
