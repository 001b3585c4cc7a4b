//! `persuade`: batch front end for the persuasion library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use persuasion::boe::{boe_report, q_interval, q_interval_from_counts, BoeInput};
use persuasion::bounds::{aggregate_sharp_bounds, membership, write_membership_csv};
use persuasion::dataset::{
    load_staggered_csv, load_staggered_long_csv, load_two_period_csv, LongSchema, StaggeredSchema, TwoPeriodPanel,
    TwoPeriodSchema, DEFAULT_INFINITY_TOKEN,
};
use persuasion::nuisance::{fit_nuisance, NuisanceConfig, NuisanceMethod};
use persuasion::semipar::{estimate, estimate_unconfoundedness_mode, Estimator, Link, PsiEvaluator};
use persuasion::sim::{monte_carlo, oracle, Dgp, EstimatorSpec, Replication};
use persuasion::staggered::{espr, espr_pretrend, EsprReport, StaggeredEstimator};
use persuasion::stats::two_sided_z;
use persuasion::twoperiod_reg::{fit_two_way_fe, gmm_iv, partial_out_covariates, rate_from_fe, type_shares};
use persuasion::{Error, EstimateReport, Result, Target, VERSION};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser, Debug, Serialize)]
#[command(name = "persuade", version, about = "Persuasion rates on the treated from binary panel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
enum Command {
    /// Two-period estimators (fe, gmm, did, pi, pow, dr) for APRT and R-APRT.
    Estimate(EstimateArgs),
    /// Sharp bounds on the rates when backlash is not ruled out.
    Bounds(BoundsArgs),
    /// Back-of-the-envelope rates from a published ATT and its standard error.
    Boe(BoeArgs),
    /// Event-study persuasion rates under staggered adoption.
    Staggered(StaggeredArgs),
    /// Monte Carlo study from a design file.
    Simulate(SimulateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Args, Debug, Serialize)]
struct OutputArgs {
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug, Serialize)]
struct TwoPeriodInput {
    /// Wide CSV with one row per unit.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y0")]
    y0_col: String,
    #[arg(long, default_value = "y1")]
    y1_col: String,
    #[arg(long, default_value = "d1")]
    d_col: String,
    #[arg(long, value_delimiter = ',')]
    x_cols: Vec<String>,
    #[arg(long)]
    cluster_col: Option<String>,
}

impl TwoPeriodInput {
    fn load(&self) -> Result<TwoPeriodPanel> {
        let schema = TwoPeriodSchema {
            y0: self.y0_col.clone(),
            y1: self.y1_col.clone(),
            d: self.d_col.clone(),
            x: self.x_cols.clone(),
            cluster: self.cluster_col.clone(),
        };
        load_two_period_csv(&self.input, &schema)
    }
}

#[derive(Args, Debug, Serialize)]
struct NuisanceArgs {
    /// logistic, cell_means or constant.
    #[arg(long, default_value = "logistic")]
    nuisance: String,
    /// identity, logit or exponential (non-identity links apply to did only).
    #[arg(long, default_value = "identity")]
    link: String,
    /// Cross-fitting folds.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Propensity trimming level.
    #[arg(long, default_value_t = 0.01)]
    trim: f64,
}

impl NuisanceArgs {
    fn config(&self) -> Result<NuisanceConfig> {
        let mut cfg = NuisanceConfig::new(self.nuisance.parse::<NuisanceMethod>()?);
        cfg.trim = self.trim;
        cfg.seed = self.seed;
        if let Some(k) = self.folds {
            cfg = cfg.cross_fit(k, self.seed);
        }
        Ok(cfg)
    }

    fn link(&self) -> Result<Link> {
        self.link.parse()
    }
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    data: TwoPeriodInput,
    #[arg(long, value_delimiter = ',', default_value = "fe,gmm,did,pi,pow,dr")]
    estimators: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "aprt,raprt")]
    targets: Vec<String>,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// Residualize outcomes on the covariates before fe and gmm.
    #[arg(long)]
    partial_out: bool,
    /// Condition on the pre-period outcome instead of imposing parallel trends.
    #[arg(long)]
    unconfoundedness: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct BoundsArgs {
    #[command(flatten)]
    data: TwoPeriodInput,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    /// Also write per-unit indicator membership as CSV.
    #[arg(long)]
    membership: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct BoeArgs {
    #[arg(long)]
    att: f64,
    /// Standard error of the ATT estimate.
    #[arg(long)]
    se: f64,
    /// Point value of Pr(Y1 = 0 | D = 1).
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, requires = "q_upper")]
    q_lower: Option<f64>,
    #[arg(long, requires = "q_lower")]
    q_upper: Option<f64>,
    /// Treated units with Y1 = 0, for a Wald interval on q.
    #[arg(long, requires = "q_n")]
    q_successes: Option<u64>,
    /// Treated-group size.
    #[arg(long)]
    q_n: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Level spent on the q interval; defaults to alpha / 2.
    #[arg(long)]
    alpha0: Option<f64>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct StaggeredArgs {
    #[arg(long)]
    input: PathBuf,
    /// Input is long: one row per unit and period.
    #[arg(long)]
    long: bool,
    /// Outcome columns in period order (wide layout); default detects y0, y1, ...
    #[arg(long, value_delimiter = ',')]
    y_cols: Vec<String>,
    #[arg(long, default_value = "s")]
    s_col: String,
    #[arg(long, default_value = "id")]
    unit_col: String,
    #[arg(long, default_value = "t")]
    period_col: String,
    /// Outcome column (long layout).
    #[arg(long, default_value = "y")]
    y_col: String,
    #[arg(long, value_delimiter = ',')]
    x_cols: Vec<String>,
    #[arg(long)]
    cluster_col: Option<String>,
    #[arg(long, default_value = DEFAULT_INFINITY_TOKEN)]
    never_token: String,
    /// Event-time range `a..b` (inclusive).
    #[arg(long, allow_hyphen_values = true)]
    horizons: Option<String>,
    /// Include every pre-adoption placebo horizon `j <= -2`.
    #[arg(long)]
    pretrend: bool,
    /// regression or dr.
    #[arg(long, default_value = "regression")]
    estimator: String,
    #[command(flatten)]
    nuisance: NuisanceArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Design description (JSON or TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Write per-replication results as CSV.
    #[arg(long)]
    replications: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

/// Contents of a `simulate` design file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimConfig {
    dgp: Dgp,
    estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_alpha")]
    alpha: f64,
}

fn default_n() -> usize {
    1000
}
fn default_reps() -> usize {
    200
}
fn default_alpha() -> f64 {
    0.05
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn envelope(config: &Value, body: Value) -> Value {
    let mut out = json!({ "version": VERSION, "config": config });
    if let (Value::Object(o), Value::Object(b)) = (&mut out, body) {
        o.extend(b);
    }
    out
}

fn emit(output: &OutputArgs, text: &str) -> Result<()> {
    match &output.out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| io_err(Path::new("<stdout>"), e))
        }
    }
}

fn emit_json(output: &OutputArgs, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    emit(output, &text)
}

/// CSV with the version and resolved config as leading comment lines.
fn csv_text(config: &Value, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
    format!("# persuasion {VERSION}\n# config: {config}\n{body}")
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn report_row(r: &EstimateReport) -> Vec<String> {
    vec![
        serde_json::to_value(r.estimand).unwrap().as_str().unwrap_or_default().to_string(),
        r.estimator.clone(),
        fmt(r.point),
        fmt(r.se),
        fmt(r.ci[0]),
        fmt(r.ci[1]),
        fmt(r.level),
        r.n.to_string(),
    ]
}

fn cmd_estimate(args: &EstimateArgs, config: &Value) -> Result<()> {
    let panel = args.data.load()?;
    let targets: Vec<Target> = args.targets.iter().map(|t| t.parse()).collect::<Result<_>>()?;
    let nuisance = args.nuisance.config()?;
    let link = args.nuisance.link()?;
    let mut reports = Vec::new();
    let mut fit = None;
    for name in &args.estimators {
        let name = name.trim().to_ascii_lowercase();
        for &t in &targets {
            let r = match name.as_str() {
                "fe" | "gmm" if args.partial_out && panel.dim_x() > 0 => {
                    let res = partial_out_covariates(&panel)?;
                    if name == "fe" {
                        rate_from_fe(&fit_two_way_fe(&res)?, &res, t, args.alpha)?
                    } else {
                        gmm_iv(&res, t, args.alpha)?
                    }
                }
                "fe" => rate_from_fe(&fit_two_way_fe(&panel)?, &panel, t, args.alpha)?,
                "gmm" => gmm_iv(&panel, t, args.alpha)?,
                other => {
                    let est: Estimator = other.parse()?;
                    if args.unconfoundedness {
                        estimate_unconfoundedness_mode(&panel, est, &nuisance, t, args.alpha)?
                    } else {
                        if fit.is_none() {
                            fit = Some(fit_nuisance(&panel, &nuisance)?);
                        }
                        estimate(&panel, fit.as_ref().unwrap(), est, t, args.alpha, link)?
                    }
                }
            };
            reports.push(r);
        }
    }
    let att = fit_two_way_fe(&panel)?.gamma;
    let shares = type_shares(&panel, att)?;
    match args.output.format {
        Format::Json => emit_json(
            &args.output,
            &envelope(
                config,
                json!({
                    "n": panel.n(),
                    "dropped_rows": panel.dropped_rows(),
                    "reports": reports,
                    "type_shares": shares,
                    "type_shares_att_source": "fe",
                }),
            ),
        ),
        Format::Csv => {
            let rows: Vec<Vec<String>> = reports.iter().map(report_row).collect();
            emit(
                &args.output,
                &csv_text(config, &["estimand", "estimator", "point", "se", "ci_lo", "ci_hi", "level", "n"], &rows),
            )
        }
    }
}

fn cmd_bounds(args: &BoundsArgs, config: &Value) -> Result<()> {
    let panel = args.data.load()?;
    let fit = fit_nuisance(&panel, &args.nuisance.config()?)?;
    let eval = PsiEvaluator::new(args.nuisance.link()?, &fit);
    let bounds = aggregate_sharp_bounds(&panel, &eval)?;
    let rows = membership(&panel, &eval)?;
    if let Some(p) = &args.membership {
        let f = fs::File::create(p).map_err(|e| io_err(p, e))?;
        write_membership_csv(f, &rows)?;
    }
    match args.output.format {
        Format::Json => emit_json(
            &args.output,
            &envelope(config, json!({ "n": panel.n(), "bounds": bounds, "nuisance": fit.meta })),
        ),
        Format::Csv => {
            let mut buf = Vec::new();
            write_membership_csv(&mut buf, &rows)?;
            let body = String::from_utf8(buf).expect("utf-8");
            emit(&args.output, &format!("# persuasion {VERSION}\n# config: {config}\n{body}"))
        }
    }
}

fn cmd_boe(args: &BoeArgs, config: &Value) -> Result<()> {
    let alpha0 = args.alpha0.unwrap_or(args.alpha / 2.0);
    let level = 1.0 - alpha0;
    let (q, ql, qu) = match (args.q_lower, args.q_upper, args.q_successes, args.q_n, args.q) {
        (Some(l), Some(u), _, _, q) => (q, l, u),
        (None, None, Some(k), Some(n), q) => {
            let (l, u) = q_interval_from_counts(k, n, level)?;
            (q.or(Some(k as f64 / n as f64)), l, u)
        }
        (None, None, None, Some(n), Some(q)) => {
            let (l, u) = q_interval(q, n as f64, level);
            (Some(q), l, u)
        }
        (None, None, None, None, Some(q)) => (Some(q), q, q),
        _ => {
            return Err(Error::InvalidInput(
                "give --q-lower/--q-upper, --q-successes/--q-n, or --q (optionally with --q-n)".into(),
            ))
        }
    };
    let mut input = BoeInput::new(args.att, args.se, ql, qu, args.alpha);
    input.alpha0 = alpha0;
    input.q = q;
    let r = boe_report(&input)?;
    let body = json!({
        "q": q,
        "q_interval": [ql, qu],
        "z": r.z,
        "aprt": { "point": r.aprt, "ci": [r.aprt_ci.0, r.aprt_ci.1] },
        "raprt": { "point": r.raprt, "ci": [r.raprt_ci.0, r.raprt_ci.1] },
        "level": 1.0 - args.alpha,
    });
    match args.output.format {
        Format::Json => emit_json(&args.output, &envelope(config, body)),
        Format::Csv => {
            let row = |name: &str, p: Option<f64>, ci: (f64, f64)| {
                vec![name.to_string(), p.map(fmt).unwrap_or_default(), fmt(ci.0), fmt(ci.1)]
            };
            let rows = vec![row("APRT", r.aprt, r.aprt_ci), row("RAPRT", r.raprt, r.raprt_ci)];
            emit(&args.output, &csv_text(config, &["estimand", "point", "ci_lo", "ci_hi"], &rows))
        }
    }
}

fn parse_horizons(spec: &str) -> Result<(i64, i64)> {
    let bad = || Error::InvalidInput(format!("horizons must look like `a..b`, got `{spec}`"));
    let (a, b) = spec.split_once("..").ok_or_else(bad)?;
    let a: i64 = a.trim().parse().map_err(|_| bad())?;
    let b: i64 = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn cmd_staggered(args: &StaggeredArgs, config: &Value) -> Result<()> {
    let panel = if args.long {
        load_staggered_long_csv(
            &args.input,
            &LongSchema {
                unit: args.unit_col.clone(),
                period: args.period_col.clone(),
                y: args.y_col.clone(),
                s: args.s_col.clone(),
                x: args.x_cols.clone(),
                cluster: args.cluster_col.clone(),
                infinity_token: args.never_token.clone(),
            },
        )?
    } else {
        load_staggered_csv(
            &args.input,
            &StaggeredSchema {
                y: args.y_cols.clone(),
                s: args.s_col.clone(),
                x: args.x_cols.clone(),
                cluster: args.cluster_col.clone(),
                infinity_token: args.never_token.clone(),
            },
        )?
    };
    let t = panel.horizon() as i64;
    let mut horizons: Vec<i64> = match &args.horizons {
        Some(h) => {
            let (a, b) = parse_horizons(h)?;
            (a..=b).collect()
        }
        None if args.pretrend => Vec::new(),
        None => (0..t).collect(),
    };
    if args.pretrend {
        horizons.extend(-t..=-2);
    }
    horizons.sort_unstable();
    horizons.dedup();
    let estimator: StaggeredEstimator = args.estimator.parse()?;
    let nuisance = args.nuisance.config()?;
    let mut reports: Vec<EsprReport> = Vec::new();
    let mut skipped = Vec::new();
    for &j in &horizons {
        let r = if j < 0 {
            espr_pretrend(&panel, j, estimator, Some(&nuisance), args.alpha)
        } else {
            espr(&panel, j, estimator, Some(&nuisance), args.alpha)
        };
        match r {
            Ok(r) => reports.push(r),
            Err(e @ (Error::NoEligibleGroups(_) | Error::HorizonOutOfRange(_))) => {
                skipped.push(json!({ "j": j, "error": e.payload() }));
            }
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() {
        return Err(Error::NoEligibleGroups(horizons.first().copied().unwrap_or(0)));
    }
    let summary = envelope(
        config,
        json!({
            "n": panel.n(),
            "horizon": panel.horizon(),
            "espr": reports,
            "skipped_horizons": skipped,
        }),
    );
    match args.output.format {
        Format::Json => emit_json(&args.output, &summary),
        Format::Csv => {
            let z = two_sided_z(args.alpha);
            let mut rows = Vec::new();
            for r in &reports {
                for c in &r.components {
                    rows.push(vec![
                        c.s.to_string(),
                        r.j.to_string(),
                        "THETA_ST".to_string(),
                        fmt(c.theta),
                        fmt(c.se),
                        fmt(c.theta - z * c.se),
                        fmt(c.theta + z * c.se),
                    ]);
                }
                rows.push(vec![
                    "all".to_string(),
                    r.j.to_string(),
                    "ESPR".to_string(),
                    fmt(r.theta),
                    fmt(r.se),
                    fmt(r.ci[0]),
                    fmt(r.ci[1]),
                ]);
            }
            let text = csv_text(config, &["s", "j", "estimand", "point", "se", "ci_lo", "ci_hi"], &rows);
            emit(&args.output, &text)?;
            if let Some(out) = &args.output.out {
                let path = out.with_extension("json");
                let mut s = serde_json::to_string_pretty(&summary).expect("serializable output");
                s.push('\n');
                fs::write(&path, s).map_err(|e| io_err(&path, e))?;
            }
            Ok(())
        }
    }
}

fn read_sim_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }
}

fn cmd_simulate(args: &SimulateArgs, config: &Value) -> Result<()> {
    let mut sim = read_sim_config(&args.config)?;
    sim.reps = args.reps.unwrap_or(sim.reps);
    sim.n = args.n.unwrap_or(sim.n);
    sim.seed = args.seed.unwrap_or(sim.seed);
    sim.alpha = args.alpha.unwrap_or(sim.alpha);
    if sim.estimators.is_empty() {
        return Err(Error::InvalidInput("design file lists no estimators".into()));
    }
    let truth = oracle(&sim.dgp)?;
    let mut results = Vec::new();
    let mut rep_rows: Vec<(String, Replication)> = Vec::new();
    for spec in &sim.estimators {
        let (summary, reps) = monte_carlo(&sim.dgp, spec, sim.n, sim.reps, sim.seed, sim.alpha)?;
        results.push(json!({ "estimator": spec.label(), "spec": spec, "summary": summary }));
        rep_rows.extend(reps.into_iter().map(|r| (spec.label(), r)));
    }
    if let Some(p) = &args.replications {
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        let rows: Vec<Vec<String>> = rep_rows
            .iter()
            .map(|(label, r)| {
                vec![
                    label.clone(),
                    r.rep.to_string(),
                    opt(r.point),
                    opt(r.se),
                    r.covered.map(|c| c.to_string()).unwrap_or_default(),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        let text = csv_text(config, &["estimator", "rep", "point", "se", "covered", "error"], &rows);
        fs::write(p, text).map_err(|e| io_err(p, e))?;
    }
    let body = json!({ "design": sim, "oracle": truth, "results": results });
    match args.output.format {
        Format::Json => emit_json(&args.output, &envelope(config, body)),
        Format::Csv => {
            let rows: Vec<Vec<String>> = results
                .iter()
                .map(|r| {
                    let s = &r["summary"];
                    let mut row = vec![r["estimator"].as_str().unwrap_or_default().to_string()];
                    for k in ["truth", "mean", "bias", "sd", "rmse", "mean_se", "coverage", "failures"] {
                        row.push(s[k].to_string());
                    }
                    row
                })
                .collect();
            let header = ["estimator", "truth", "mean", "bias", "sd", "rmse", "mean_se", "coverage", "failures"];
            emit(&args.output, &csv_text(config, &header, &rows))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = serde_json::to_value(&cli.command).expect("serializable config");
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a, &config),
        Command::Bounds(a) => cmd_bounds(a, &config),
        Command::Boe(a) => cmd_boe(a, &config),
        Command::Staggered(a) => cmd_staggered(a, &config),
        Command::Simulate(a) => cmd_simulate(a, &config),
    }
}

fn print_error(payload: Value) {
    let v = json!({ "version": VERSION, "error": payload });
    println!("{}", serde_json::to_string_pretty(&v).expect("serializable error"));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            print_error(json!({ "code": "INVALID_INPUT", "message": e.to_string(), "context": {} }));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            print_error(serde_json::to_value(e.payload()).expect("serializable payload"));
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
