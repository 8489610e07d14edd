use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sampfuse::data::{load_csv, load_csv_pair, SchemaDescriptor};
use sampfuse::error::Error;
use sampfuse::estimators::{aipw_report, ipw_report, EstimateReport, PoissonDesign};
use sampfuse::outcome::{fit_outcome, fit_outcome_flexible, predict, OutcomeFamily};
use sampfuse::propensity::{
    cv_lambda, fit_collaborative, fit_lasso, fit_newton, fit_oalasso, fit_scad_union,
    PenaltyConfig, PropensityFit,
};
use sampfuse::sim::{
    run_monte_carlo, write_metrics_csv, write_selection_csv, EstimatorKind, ScenarioSpec,
};
use sampfuse::{CombinedSample, Membership};

#[derive(Parser)]
#[command(
    name = "sampfuse",
    version,
    about = "Population-mean estimation from combined probability and non-probability samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the population mean from CSV data
    Estimate(EstimateArgs),
    /// Run a Monte-Carlo scenario study
    Simulate(SimulateArgs),
    /// Cross-validate the penalty strength and emit the CV curve
    CvLambda(CvLambdaArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Combined CSV holding both samples
    #[arg(long, conflicts_with_all = ["input_a", "input_b"])]
    input: Option<PathBuf>,
    /// CSV for the non-probability sample A
    #[arg(long, requires = "input_b")]
    input_a: Option<PathBuf>,
    /// CSV for the probability sample B
    #[arg(long, requires = "input_a")]
    input_b: Option<PathBuf>,
    /// Schema descriptor: inline `key=value;...` or a path to a key=value file
    #[arg(long)]
    schema: String,
}

impl InputArgs {
    fn load(&self) -> sampfuse::Result<CombinedSample> {
        let schema = if std::path::Path::new(&self.schema).is_file() {
            SchemaDescriptor::from_file(std::path::Path::new(&self.schema))?
        } else {
            SchemaDescriptor::parse(&self.schema)?
        };
        match (&self.input, &self.input_a, &self.input_b) {
            (Some(p), _, _) => load_csv(p, &schema),
            (None, Some(a), Some(b)) => load_csv_pair(a, b, &schema),
            _ => Err(Error::Config(
                "provide --input or both --input-a and --input-b".into(),
            )),
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Comma list of estimators
    #[arg(long, value_delimiter = ',', default_value = "ipw-logistic")]
    methods: Vec<String>,
    /// Adaptive-weight exponent for OALASSO
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Cross-validation folds
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// RNG seed for fold assignment
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force the AIPW outcome model to zero (reduces AIPW to IPW)
    #[arg(long)]
    null_outcome: bool,
    /// Use the flexible basis-expansion outcome model for AIPW rows
    #[arg(long)]
    flexible_outcome: bool,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario id (1-4)
    #[arg(long)]
    scenario: u8,
    /// Replicate count
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Master RNG seed
    #[arg(long)]
    seed: u64,
    /// Comma list of estimators; defaults to the scenario's full table
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvLambdaArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Penalized method whose curve to compute: lasso or oalasso
    #[arg(long, default_value = "lasso")]
    method: String,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Convergence { .. } | Error::Separation | Error::Degenerate(_) => 2,
        _ => 1,
    }
}

fn penalty_config(gamma: f64, folds: usize, seed: u64) -> PenaltyConfig {
    PenaltyConfig {
        gamma,
        v_folds: folds,
        seed,
        ..PenaltyConfig::default()
    }
}

fn fit_propensity(
    sample: &CombinedSample,
    kind: EstimatorKind,
    penalty: &PenaltyConfig,
    mhat: Option<(&[f64], &[f64])>,
) -> sampfuse::Result<PropensityFit> {
    let all: Vec<usize> = (0..sample.p()).collect();
    match kind {
        EstimatorKind::IpwLogistic
        | EstimatorKind::AipwLogistic
        | EstimatorKind::AipwLogisticMisspec
        | EstimatorKind::AipwLogisticFlex => fit_newton(sample, &all),
        EstimatorKind::IpwLasso | EstimatorKind::AipwLasso => fit_lasso(sample, penalty),
        EstimatorKind::IpwOalasso | EstimatorKind::AipwOalasso => {
            fit_oalasso(sample, penalty, OutcomeFamily::Linear)
        }
        EstimatorKind::AipwScadUnion => {
            fit_scad_union(sample, penalty, OutcomeFamily::Linear).map(|(f, _)| f)
        }
        EstimatorKind::AipwBenkeser => {
            let (ma, mb) = mhat.ok_or_else(|| {
                Error::Config("collaborative score needs a fitted outcome model".into())
            })?;
            fit_collaborative(sample, ma, mb)
        }
    }
}

fn cmd_estimate(args: &EstimateArgs) -> sampfuse::Result<()> {
    let sample = args.input.load()?;
    std::fs::create_dir_all(&args.out)?;
    let design = PoissonDesign;
    let penalty = penalty_config(args.gamma, args.folds, args.seed);
    let all: Vec<usize> = (0..sample.p()).collect();

    let mut summary = String::from("estimator,mu_hat,se,ci_lo,ci_hi\n");
    let mut reports: Vec<EstimateReport> = Vec::new();
    for name in &args.methods {
        let kind = EstimatorKind::parse(name)?;
        let is_aipw = !matches!(
            kind,
            EstimatorKind::IpwLogistic | EstimatorKind::IpwLasso | EstimatorKind::IpwOalasso
        );
        let report = if is_aipw {
            let (okind, ma, mb) = if args.null_outcome {
                (
                    sampfuse::outcome::OutcomeKind::Linear,
                    vec![0.0; sample.n_a()],
                    vec![0.0; sample.n_b()],
                )
            } else if args.flexible_outcome || kind == EstimatorKind::AipwLogisticFlex {
                let of = fit_outcome_flexible(&sample, args.seed)?;
                let ma = predict(&of, &sample, Membership::A)?;
                let mb = predict(&of, &sample, Membership::B)?;
                (of.kind, ma, mb)
            } else {
                let of = fit_outcome(&sample, OutcomeFamily::Linear, &all)?;
                let ma = predict(&of, &sample, Membership::A)?;
                let mb = predict(&of, &sample, Membership::B)?;
                (of.kind, ma, mb)
            };
            let pfit = fit_propensity(&sample, kind, &penalty, Some((&ma, &mb)))?;
            aipw_report(&sample, &pfit, &ma, &mb, kind.name(), okind, &design)?
        } else {
            let pfit = fit_propensity(&sample, kind, &penalty, None)?;
            ipw_report(&sample, &pfit, kind.name(), &design)?
        };
        summary.push_str(&format!(
            "{},{:.10},{:.10},{:.10},{:.10}\n",
            kind.name(),
            report.mu_hat,
            report.se,
            report.ci_lo,
            report.ci_hi
        ));
        let json =
            serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(args.out.join(format!("{}.json", kind.name())), json)?;
        reports.push(report);
    }
    std::fs::write(args.out.join("summary.csv"), summary)?;

    println!(
        "{:<24} {:>14} {:>12} {:>26}",
        "estimator", "estimate", "SE", "95% CI"
    );
    for r in &reports {
        println!(
            "{:<24} {:>14.6} {:>12.6} {:>12.6}, {:>12.6}",
            r.method.estimator, r.mu_hat, r.se, r.ci_lo, r.ci_hi
        );
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), (u8, String)> {
    let fail = |e: Error| (exit_code_for(&e), e.to_string());
    let spec = ScenarioSpec::new(args.scenario).map_err(fail)?;
    let methods: Vec<EstimatorKind> = match &args.methods {
        Some(names) => names
            .iter()
            .map(|n| EstimatorKind::parse(n))
            .collect::<sampfuse::Result<_>>()
            .map_err(fail)?,
        None => EstimatorKind::defaults_for_scenario(args.scenario),
    };
    std::fs::create_dir_all(&args.out).map_err(|e| (1, e.to_string()))?;
    let rows = run_monte_carlo(&spec, &methods, args.reps, args.seed, args.jobs).map_err(fail)?;

    write_metrics_csv(&rows, &args.out.join("metrics.csv")).map_err(fail)?;
    write_selection_csv(
        &rows,
        &spec.covariate_names(),
        &args.out.join("selection.csv"),
    )
    .map_err(fail)?;

    println!(
        "{:<24} {:>8} {:>10} {:>8} {:>8} {:>7}",
        "estimator", "%B", "MSE", "MC SE", "SE", "%COV"
    );
    for r in &rows {
        println!(
            "{:<24} {:>8.2} {:>10.4} {:>8.4} {:>8.4} {:>7.1}{}",
            r.estimator,
            r.pct_bias,
            r.mse,
            r.mc_se,
            r.mean_se,
            r.coverage,
            if r.valid { "" } else { "  [invalid]" }
        );
    }
    if let Some(bad) = rows.iter().find(|r| !r.valid) {
        return Err((
            2,
            format!(
                "aggregate for {} is invalid ({} of {} replicates failed)",
                bad.estimator, bad.n_fail, args.reps
            ),
        ));
    }
    Ok(())
}

fn cmd_cv_lambda(args: &CvLambdaArgs) -> sampfuse::Result<()> {
    let sample = args.input.load()?;
    let penalty = penalty_config(args.gamma, args.folds, args.seed);
    let factors: Vec<f64> = match args.method.as_str() {
        "lasso" => vec![1.0; sample.p()],
        "oalasso" => {
            let alpha = sampfuse::propensity::outcome_coefficients(&sample, OutcomeFamily::Linear)?;
            sampfuse::propensity::adaptive_factors(&alpha, args.gamma)
        }
        other => {
            return Err(Error::Config(format!(
                "cv-lambda supports lasso or oalasso, got '{other}'"
            )))
        }
    };
    let curve = cv_lambda(&sample, &factors, &penalty)?;
    let mut out = String::from("lambda,mean_loss");
    for v in 0..curve.fold_loss.first().map_or(0, |f| f.len()) {
        out.push_str(&format!(",fold{}", v + 1));
    }
    out.push('\n');
    for (k, &lambda) in curve.lambdas.iter().enumerate() {
        out.push_str(&format!("{:.10e},{:.10e}", lambda, curve.mean_loss[k]));
        for loss in &curve.fold_loss[k] {
            out.push_str(&format!(",{loss:.10e}"));
        }
        out.push('\n');
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, out)?;
    println!("selected lambda: {:.10e}", curve.selected);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result: Result<(), (u8, String)> = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a).map_err(|e| (exit_code_for(&e), e.to_string())),
        Command::Simulate(a) => cmd_simulate(a),
        Command::CvLambda(a) => cmd_cv_lambda(a).map_err(|e| (exit_code_for(&e), e.to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
