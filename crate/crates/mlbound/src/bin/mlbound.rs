//! Command-line front end for the marginal-likelihood bound pipeline.
//!
//! Exit codes: 0 success, 1 partial cell failures or failed checks,
//! 2 spec or IO errors. Dataset root resolution order: --data-root,
//! config file, MLBOUND_DATA, ./datasets.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlbound::bound::{verify_kl_inequality, ParamFunctionMap};
use mlbound::curves::{exponent_from_ratio, fit_power_law, CurveKind, LearningCurve};
use mlbound::data::CorruptionMode;
use mlbound::ep::EpConfig;
use mlbound::experiment::{run_pipeline, CellRow, ExperimentSpec, KernelKind};
use mlbound::kernel::{analytic_fcn_kernel, mc_kernel, KernelConfig};
use mlbound::oracle::{
    bound_violation_rate, oracle_learning_curve, telescoping_residual, DataDistribution,
    HypothesisSpace,
};
use mlbound::trainer::{evaluate_error, train_to_zero_error, TrainConfig};

#[derive(Parser)]
#[command(
    name = "mlbound",
    about = "Marginal-likelihood PAC-Bayes bounds for wide networks",
    version
)]
struct Cli {
    /// Flat key-value config file (`key = value` lines); CLI flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evidence and bound over an (m, rho, seed) grid, bound-only.
    Bound(GridArgs),
    /// Learning-curve run plus power-law fits (add --train for test error).
    Curve(CurveArgs),
    /// Label-corruption sweep at fixed m.
    CorruptSweep(SweepArgs),
    /// Exact-oracle checks: telescoping, bound guarantee, KL pushforward.
    OracleVerify(OracleArgs),
    /// Build a kernel matrix and export it.
    Kernel(KernelArgs),
    /// Train the reference network on a subset and report errors.
    Train(TrainArgs),
}

#[derive(Args, Clone)]
struct GridArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Comma-separated training-set sizes.
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    /// Comma-separated corruption fractions.
    #[arg(long, value_delimiter = ',')]
    rho: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// analytic or mc
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    sigma_w2: Option<f64>,
    #[arg(long)]
    sigma_b2: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    /// MC parameter draws; 0 means ceil(0.1 m).
    #[arg(long)]
    mc_draws: Option<usize>,
    /// flip or resample
    #[arg(long)]
    corruption: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also train the reference network per cell.
    #[arg(long)]
    train: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Drop points below this m from the fits.
    #[arg(long)]
    min_m: Option<usize>,
    /// Weight the log-log fit by inverse relative variance.
    #[arg(long)]
    weighted: bool,
    /// Aggregate bound/error ratios with a geometric mean.
    #[arg(long)]
    geometric: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 6)]
    domain_size: usize,
    /// uniform, simplicity, or point-mass
    #[arg(long, default_value = "uniform")]
    prior: String,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Also write the matrix as CSV next to the binary output.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Save the trained model snapshot here.
    #[arg(long)]
    snapshot: Option<PathBuf>,
}

type Config = HashMap<String, String>;

fn load_config(path: Option<&PathBuf>) -> Result<Config, String> {
    let mut map = HashMap::new();
    let Some(path) = path else {
        return Ok(map);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "config line {} is not `key = value`: {line}",
                lineno + 1
            ));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn conf_parse<T: std::str::FromStr>(config: &Config, key: &str) -> Result<Option<T>, String> {
    match config.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| format!("config key {key} has invalid value {v}")),
    }
}

fn conf_list<T: std::str::FromStr>(config: &Config, key: &str) -> Result<Vec<T>, String> {
    match config.get(key) {
        None => Ok(Vec::new()),
        Some(v) => v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| format!("config key {key} has invalid entry {s}"))
            })
            .collect(),
    }
}

fn resolve_spec(args: &GridArgs, config: &Config) -> Result<ExperimentSpec, String> {
    let dataset = args
        .dataset
        .clone()
        .or_else(|| config.get("dataset").cloned())
        .ok_or("no dataset given (flag --dataset or config key `dataset`)")?;
    let data_root = args
        .data_root
        .clone()
        .or_else(|| config.get("data-root").map(PathBuf::from))
        .or_else(|| std::env::var_os("MLBOUND_DATA").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("datasets"));

    let m_grid = if !args.m.is_empty() {
        args.m.clone()
    } else {
        conf_list(config, "m")?
    };
    let rho_grid = if !args.rho.is_empty() {
        args.rho.clone()
    } else {
        let from_config: Vec<f64> = conf_list(config, "rho")?;
        if from_config.is_empty() {
            vec![0.0]
        } else {
            from_config
        }
    };
    let seeds = if !args.seeds.is_empty() {
        args.seeds.clone()
    } else {
        let from_config: Vec<u64> = conf_list(config, "seeds")?;
        if from_config.is_empty() {
            vec![0]
        } else {
            from_config
        }
    };

    let kernel_kind = match args
        .kernel
        .clone()
        .or_else(|| config.get("kernel").cloned())
        .unwrap_or_else(|| "analytic".into())
        .as_str()
    {
        "analytic" => KernelKind::Analytic,
        "mc" => KernelKind::Mc,
        other => return Err(format!("unknown kernel kind {other}")),
    };
    let corruption_mode = match args
        .corruption
        .clone()
        .or_else(|| config.get("corruption").cloned())
        .unwrap_or_else(|| "flip".into())
        .as_str()
    {
        "flip" => CorruptionMode::Flip,
        "resample" => CorruptionMode::Resample,
        other => return Err(format!("unknown corruption mode {other}")),
    };

    let defaults = KernelConfig::default();
    let kernel = KernelConfig {
        sigma_w2: args
            .sigma_w2
            .or(conf_parse(config, "sigma-w2")?)
            .unwrap_or(defaults.sigma_w2),
        sigma_b2: args
            .sigma_b2
            .or(conf_parse(config, "sigma-b2")?)
            .unwrap_or(defaults.sigma_b2),
        depth: args
            .depth
            .or(conf_parse(config, "depth")?)
            .unwrap_or(defaults.depth),
        width: args
            .width
            .or(conf_parse(config, "width")?)
            .unwrap_or(defaults.width),
        mc_draws: args
            .mc_draws
            .or(conf_parse(config, "mc-draws")?)
            .unwrap_or(0),
    };

    let trainer = if args.train || config.get("train").map(String::as_str) == Some("true") {
        let mut t = TrainConfig::default();
        if let Some(me) = args.max_epochs.or(conf_parse(config, "max-epochs")?) {
            t.max_epochs = me;
        }
        t.sigma_w2 = kernel.sigma_w2;
        Some(t)
    } else {
        None
    };

    Ok(ExperimentSpec {
        dataset,
        dataset_root: data_root,
        m_grid,
        rho_grid,
        kernel_kind,
        kernel,
        ep: EpConfig::default(),
        delta: args.delta.or(conf_parse(config, "delta")?).unwrap_or(0.01),
        gamma: args.gamma.or(conf_parse(config, "gamma")?).unwrap_or(0.01),
        trainer,
        corruption_mode,
        seeds,
        output: args
            .output
            .clone()
            .or_else(|| config.get("output").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results.csv")),
    })
}

fn run_grid(spec: &ExperimentSpec) -> Result<Vec<CellRow>, ExitCode> {
    match run_pipeline(spec) {
        Ok(outcome) => {
            eprintln!(
                "{} cells, {} failed, results in {}",
                outcome.rows.len(),
                outcome.failed_cells,
                spec.output.display()
            );
            if outcome.failed_cells > 0 {
                Err(ExitCode::from(1))
            } else {
                Ok(outcome.rows)
            }
        }
        Err(e) => {
            eprintln!("pipeline error: {e}");
            Err(ExitCode::from(2))
        }
    }
}

/// Per-m mean of a row statistic over seeds, as a fit-ready curve.
fn mean_curve(
    rows: &[CellRow],
    kind: CurveKind,
    value: impl Fn(&CellRow) -> Option<f64>,
) -> Option<LearningCurve> {
    let mut by_m: HashMap<usize, Vec<f64>> = HashMap::new();
    for row in rows {
        if let Some(v) = value(row) {
            by_m.entry(row.m).or_default().push(v);
        }
    }
    let mut points: Vec<(usize, f64, f64)> = by_m
        .into_iter()
        .map(|(m, vs)| {
            let n = vs.len() as f64;
            let mean = vs.iter().sum::<f64>() / n;
            let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(2.0 - 1.0);
            (m, mean, (var / n).sqrt())
        })
        .collect();
    points.sort_by_key(|p| p.0);
    points.retain(|p| p.1 > 0.0);
    LearningCurve::new(points, kind).ok()
}

fn cmd_curve(args: &CurveArgs, config: &Config) -> ExitCode {
    let spec = match resolve_spec(&args.grid, config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let rows = match run_grid(&spec) {
        Ok(r) => r,
        Err(code) => return code,
    };

    let bound_curve = mean_curve(&rows, CurveKind::Bound, |r| r.epsilon_bound);
    let error_curve = mean_curve(&rows, CurveKind::EmpiricalError, |r| r.test_error);

    let mut report = serde_json::Map::new();
    if let Some(c) = &bound_curve {
        match fit_power_law(c, args.min_m, args.weighted) {
            Ok(fit) => {
                report.insert("bound_fit".into(), serde_json::to_value(fit).unwrap());
            }
            Err(e) => eprintln!("bound fit skipped: {e}"),
        }
    }
    if let Some(c) = &error_curve {
        match fit_power_law(c, args.min_m, args.weighted) {
            Ok(fit) => {
                report.insert("error_fit".into(), serde_json::to_value(fit).unwrap());
            }
            Err(e) => eprintln!("error fit skipped: {e}"),
        }
    }
    if let (Some(b), Some(e)) = (&bound_curve, &error_curve) {
        match exponent_from_ratio(b, e, args.min_m, args.geometric) {
            Ok(r) => {
                report.insert("ratio_exponent".into(), serde_json::to_value(r).unwrap());
            }
            Err(e) => eprintln!("ratio exponent skipped: {e}"),
        }
    }
    println!("{}", serde_json::Value::Object(report));
    ExitCode::SUCCESS
}

fn cmd_oracle(args: &OracleArgs) -> ExitCode {
    let space = match args.prior.as_str() {
        "uniform" => HypothesisSpace::full_uniform(args.domain_size),
        "simplicity" => HypothesisSpace::full_simplicity_biased(args.domain_size),
        "point-mass" => {
            let target = (args.seed % (1u64 << args.domain_size)) as u16;
            HypothesisSpace::full_point_mass(args.domain_size, target)
        }
        other => {
            eprintln!("unknown prior family {other}");
            return ExitCode::from(2);
        }
    };
    let space = match space {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let target = mlbound::oracle::sample_target(&space, args.seed ^ 0xabcd);
    let dist = match DataDistribution::uniform(&space, target) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };

    let mut ok = true;

    let mut worst_residual = 0.0f64;
    for trace in 0..100 {
        match telescoping_residual(&space, &dist, args.m.max(1), args.seed + trace) {
            Ok(r) => worst_residual = worst_residual.max(r),
            Err(e) => {
                eprintln!("telescoping check failed to run: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let telescoping_ok = worst_residual < 1e-12;
    ok &= telescoping_ok;
    println!(
        "telescoping_identity: {} (max residual {worst_residual:.3e})",
        if telescoping_ok { "PASS" } else { "FAIL" }
    );

    match bound_violation_rate(
        &space,
        &dist,
        args.m.max(2),
        args.delta,
        args.gamma,
        args.trials,
        args.seed,
    ) {
        Ok(rate) => {
            let budget = args.delta
                + args.gamma
                + 3.0 * ((args.delta + args.gamma) / args.trials as f64).sqrt();
            let pass = rate <= budget;
            ok &= pass;
            println!(
                "bound_guarantee: {} (violation rate {rate:.4}, budget {budget:.4})",
                if pass { "PASS" } else { "FAIL" }
            );
        }
        Err(e) => {
            eprintln!("violation check failed to run: {e}");
            return ExitCode::from(2);
        }
    }

    match oracle_learning_curve(
        &space,
        &dist,
        &[1, args.m.max(2) / 2, args.m.max(2)],
        500,
        args.seed,
    ) {
        Ok(points) => {
            let worst = points
                .iter()
                .map(|p| p.identity_residual)
                .fold(0.0f64, f64::max);
            let pass = worst < 1e-10;
            ok &= pass;
            println!(
                "evidence_sum_identity: {} (max residual {worst:.3e})",
                if pass { "PASS" } else { "FAIL" }
            );
            for p in points {
                println!(
                    "  m={} mean_error={:.5} mean_neg_log_evidence={:.5} max_pe={:.4}",
                    p.m, p.mean_error, p.mean_neg_log_evidence, p.max_predictive_error
                );
            }
        }
        Err(e) => {
            eprintln!("learning-curve check failed to run: {e}");
            return ExitCode::from(2);
        }
    }

    // KL pushforward on seeded random parameter-function maps
    {
        use rand::{Rng, SeedableRng};
        let mut failures = 0;
        for trial in 0..1000u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed ^ (trial + 1));
            let n = rng.gen_range(2..=64usize);
            let nf = rng.gen_range(1..=16usize);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut v: Vec<f64> = raw.iter().map(|r| r / s).collect();
                let adjust = 1.0 - v.iter().sum::<f64>();
                v[0] += adjust;
                v
            };
            let map = ParamFunctionMap {
                function_of: (0..n).map(|_| rng.gen_range(0..nf)).collect(),
                prior: draw(&mut rng),
                posterior: draw(&mut rng),
            };
            match verify_kl_inequality(&map) {
                Ok(r) if r.holds => {}
                _ => failures += 1,
            }
        }
        let pass = failures == 0;
        ok &= pass;
        println!(
            "kl_pushforward: {} ({failures} failures in 1000 maps)",
            if pass { "PASS" } else { "FAIL" }
        );
    }

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_kernel(args: &KernelArgs, config: &Config) -> ExitCode {
    let spec = match resolve_spec(&args.grid, config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let m = *spec.m_grid.first().unwrap_or(&100);
    let seed = *spec.seeds.first().unwrap_or(&0);
    let built = (|| -> Result<mlbound::kernel::KernelMatrix, String> {
        let raw = mlbound::data::load_split(&spec.dataset_root, &spec.dataset, "train")
            .map_err(|e| e.to_string())?;
        let pool = mlbound::data::binarize(&raw, &spec.dataset);
        let (subset, _) =
            mlbound::data::sample_subset(&pool, m, seed).map_err(|e| e.to_string())?;
        let mut kcfg = spec.kernel;
        if spec.kernel_kind == KernelKind::Mc && kcfg.mc_draws == 0 {
            kcfg.mc_draws = KernelConfig::default_mc_draws(m);
        }
        match spec.kernel_kind {
            KernelKind::Analytic => {
                analytic_fcn_kernel(&subset.inputs, subset.dim, &kcfg).map_err(|e| e.to_string())
            }
            KernelKind::Mc => {
                mc_kernel(&subset.inputs, subset.dim, &kcfg, seed).map_err(|e| e.to_string())
            }
        }
    })();
    let kernel = match built {
        Ok(k) => k,
        Err(e) => {
            eprintln!("kernel build failed: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = kernel.validate() {
        eprintln!("kernel failed validation: {e}");
        return ExitCode::from(1);
    }
    if let Err(e) = kernel.save(&spec.output) {
        eprintln!("cannot save kernel: {e}");
        return ExitCode::from(2);
    }
    if args.csv {
        let csv_path = spec.output.with_extension("csv");
        match std::fs::File::create(&csv_path) {
            Ok(f) => {
                if let Err(e) = kernel.export_csv(std::io::BufWriter::new(f)) {
                    eprintln!("cannot write kernel CSV: {e}");
                    return ExitCode::from(2);
                }
            }
            Err(e) => {
                eprintln!("cannot create {}: {e}", csv_path.display());
                return ExitCode::from(2);
            }
        }
    }
    eprintln!("kernel {m}x{m} written to {}", spec.output.display());
    ExitCode::SUCCESS
}

fn cmd_train(args: &TrainArgs, config: &Config) -> ExitCode {
    let mut grid = args.grid.clone();
    grid.train = true;
    let spec = match resolve_spec(&grid, config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let m = *spec.m_grid.first().unwrap_or(&1000);
    let seed = *spec.seeds.first().unwrap_or(&0);
    let result = (|| -> Result<(), String> {
        let raw = mlbound::data::load_split(&spec.dataset_root, &spec.dataset, "train")
            .map_err(|e| e.to_string())?;
        let pool = mlbound::data::binarize(&raw, &spec.dataset);
        let (subset, _) =
            mlbound::data::sample_subset(&pool, m, seed).map_err(|e| e.to_string())?;
        let mut tcfg = spec.trainer.clone().unwrap_or_default();
        tcfg.seed = seed;
        let model = train_to_zero_error(&subset, &tcfg).map_err(|e| e.to_string())?;
        println!(
            "epochs={} reached_zero={} train_error={:.5}",
            model.outcome.epochs_used, model.outcome.reached_zero, model.outcome.final_train_error
        );
        let raw_test = mlbound::data::load_split(&spec.dataset_root, &spec.dataset, "test")
            .map_err(|e| e.to_string())?;
        let test = mlbound::data::binarize(&raw_test, &spec.dataset);
        let err = evaluate_error(&model.params, &test).map_err(|e| e.to_string())?;
        println!("test_error={err:.5}");
        if let Some(path) = &args.snapshot {
            model
                .params
                .save(path, seed, 0)
                .map_err(|e| e.to_string())?;
            eprintln!("snapshot written to {}", path.display());
        }
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("train failed: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = match load_config(cli.config.as_ref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    match &cli.command {
        Command::Bound(args) => {
            let mut args = args.clone();
            args.train = false;
            match resolve_spec(&args, &config) {
                Ok(spec) => match run_grid(&spec) {
                    Ok(_) => ExitCode::SUCCESS,
                    Err(code) => code,
                },
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Curve(args) => cmd_curve(args, &config),
        Command::CorruptSweep(args) => {
            let mut grid = args.grid.clone();
            if grid.rho.is_empty() && !config.contains_key("rho") {
                grid.rho = vec![0.0, 0.25, 0.5];
            }
            match resolve_spec(&grid, &config) {
                Ok(spec) => match run_grid(&spec) {
                    Ok(_) => ExitCode::SUCCESS,
                    Err(code) => code,
                },
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::OracleVerify(args) => cmd_oracle(args),
        Command::Kernel(args) => cmd_kernel(args, &config),
        Command::Train(args) => cmd_train(args, &config),
    }
}
