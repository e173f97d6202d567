//! Command-line front end.
//!
//! Exit status: 0 on success, 2 for invalid arguments (including an
//! `(epsilon, delta)` pair outside the accepted range), 1 for runtime
//! failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::data::{
    parse_ratings, prepare, read_observed, read_triplets, rescale_ratings, write_id_map,
    write_observed, write_triplets, RatingFormat,
};
use crate::error::{Error, Result};
use crate::eval::{
    empirical_risk, run_sweep, test_rmse, train_model, write_results_csv, Algorithm,
    ExperimentSpec, ModelSettings, TrainedModel,
};
use crate::fw::EigBackend;
use crate::privacy::{noise_scale, noise_scale_ungated, validate_params, Mechanism, NoiseSchedule};

#[derive(Debug, Parser)]
#[command(
    name = "dpmc",
    version,
    about = "Joint-differentially-private matrix completion"
)]
pub struct Cli {
    /// Maximum number of worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a rating file into a centred, clipped observed matrix and a
    /// held-out test file.
    Ingest(IngestArgs),
    /// Train one algorithm on an observed matrix and write the model.
    Train(TrainArgs),
    /// Run an experiment grid from a TOML spec and write the results CSV.
    Sweep(SweepArgs),
    /// Score a saved model on held-out ratings.
    Eval(EvalArgs),
    /// Print the Gaussian noise scale of a mechanism.
    NoiseCalc(NoiseCalcArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw rating file.
    #[arg(long)]
    pub input: PathBuf,
    /// `csv` (user,item,rating[,timestamp]) or `double_colon` (u::i::r::t).
    #[arg(long, default_value = "csv")]
    pub format: RatingFormat,
    /// Declared rating scale `LO,HI` (default: observed range).
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair, allow_hyphen_values = true)]
    pub scale: Option<(f64, f64)>,
    /// Map the rating scale affinely onto `LO,HI`.
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair, allow_hyphen_values = true)]
    pub rescale: Option<(f64, f64)>,
    /// Training ratings kept per user.
    #[arg(long, default_value_t = 80)]
    pub xi: usize,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Observed-matrix output.
    #[arg(long)]
    pub output: PathBuf,
    /// Held-out `user,item,rating` triplets.
    #[arg(long)]
    pub test_output: Option<PathBuf>,
    /// `index<TAB>raw_id` map for users.
    #[arg(long)]
    pub user_map: Option<PathBuf>,
    /// `index<TAB>raw_id` map for items.
    #[arg(long)]
    pub item_map: Option<PathBuf>,
}

/// Algorithm hyperparameters; each flag mirrors the config key `section.key`.
#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// fw.k: nuclear-norm budget.
    #[arg(long = "fw-k", alias = "k")]
    pub fw_k: Option<f64>,
    /// fw.iterations: rounds T.
    #[arg(long = "fw-iterations", alias = "T")]
    pub fw_iterations: Option<usize>,
    /// fw.beta: failure probability of the eigenvalue inflation.
    #[arg(long = "fw-beta")]
    pub fw_beta: Option<f64>,
    /// fw.backend: `exact` or `oja`.
    #[arg(long = "fw-backend")]
    pub fw_backend: Option<EigBackend>,
    /// fw.oja_iterations: inner Oja steps per round.
    #[arg(long = "fw-oja-iterations")]
    pub fw_oja_iterations: Option<usize>,
    /// fw.schedule: `uniform` or `recalibrated`.
    #[arg(long = "fw-schedule")]
    pub fw_schedule: Option<NoiseSchedule>,
    /// fw.row_bound (default: schema bound of the data).
    #[arg(long = "fw-row-bound")]
    pub fw_row_bound: Option<f64>,
    /// svd.rank
    #[arg(long = "svd-rank")]
    pub svd_rank: Option<usize>,
    /// svd.row_bound
    #[arg(long = "svd-row-bound")]
    pub svd_row_bound: Option<f64>,
    /// pgd.k
    #[arg(long = "pgd-k")]
    pub pgd_k: Option<f64>,
    /// pgd.iterations
    #[arg(long = "pgd-iterations")]
    pub pgd_iterations: Option<usize>,
    /// pgd.step: `0.5`, `inv_sqrt`, `inv`, or e.g. `inv_sqrt:0.5`.
    #[arg(long = "pgd-step")]
    pub pgd_step: Option<String>,
    /// pgd.schedule
    #[arg(long = "pgd-schedule")]
    pub pgd_schedule: Option<NoiseSchedule>,
    /// pgd.row_bound
    #[arg(long = "pgd-row-bound")]
    pub pgd_row_bound: Option<f64>,
}

impl ModelArgs {
    pub fn apply(&self, s: &mut ModelSettings) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = &$src {
                    $dst = v.clone();
                }
            };
        }
        set!(self.fw_k => s.fw.k);
        set!(self.fw_iterations => s.fw.iterations);
        set!(self.fw_beta => s.fw.beta);
        set!(self.fw_backend => s.fw.backend);
        set!(self.fw_oja_iterations => s.fw.oja_iterations);
        set!(self.fw_schedule => s.fw.schedule);
        if self.fw_row_bound.is_some() {
            s.fw.row_bound = self.fw_row_bound;
        }
        set!(self.svd_rank => s.svd.rank);
        if self.svd_row_bound.is_some() {
            s.svd.row_bound = self.svd_row_bound;
        }
        set!(self.pgd_k => s.pgd.k);
        set!(self.pgd_iterations => s.pgd.iterations);
        set!(self.pgd_step => s.pgd.step);
        set!(self.pgd_schedule => s.pgd.schedule);
        if self.pgd_row_bound.is_some() {
            s.pgd.row_bound = self.pgd_row_bound;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Observed matrix written by `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub algo: Algorithm,
    #[arg(long, default_value_t = 1.0)]
    pub eps: f64,
    /// Accepts plain or scientific notation, e.g. `1e-6`.
    #[arg(long, default_value_t = 1e-6)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Where to write the model.
    #[arg(long)]
    pub model_out: PathBuf,
    /// Held-out triplets; adds test RMSE to the metrics.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Also write the metrics to this file.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Report RMSE without clamping predictions to the rating scale.
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML experiment spec.
    #[arg(long)]
    pub config: PathBuf,
    /// Results CSV (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides `algorithms` in the config.
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<Algorithm>>,
    /// Overrides `epsilons`.
    #[arg(long = "epsilons", alias = "eps", value_delimiter = ',')]
    pub epsilons: Option<Vec<f64>>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Overrides `seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub xi: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub master_seed: Option<u64>,
    /// Record wall-clock seconds (the CSV is then no longer reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Report RMSE without clamping predictions to the rating scale.
    #[arg(long)]
    pub no_clip: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Held-out triplets written by `ingest`.
    #[arg(long)]
    pub test: PathBuf,
    /// Observed matrix; adds the empirical risk.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Debug, Args)]
pub struct NoiseCalcArgs {
    /// `fw`, `oja`, `svd` or `pgd`.
    #[arg(long)]
    pub mech: Mechanism,
    /// Row bound L.
    #[arg(long = "L", alias = "row-bound")]
    pub row_bound: f64,
    /// T for fw/pgd, Gamma for oja; ignored for svd.
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    #[arg(long)]
    pub eps: f64,
    #[arg(long)]
    pub delta: f64,
    /// Evaluate the formula even when epsilon > 2 ln(1/delta).
    #[arg(long)]
    pub ungated: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();

    if let Err(e) = precheck(&cli.command) {
        let err = Cli::command().error(ErrorKind::ValueValidation, e);
        let _ = err.print();
        return 2;
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Argument checks that clap cannot express: privacy parameters and ranges.
fn precheck(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            if a.algo.is_private() {
                validate_params(a.eps, a.delta)?;
            }
        }
        Command::NoiseCalc(a) => {
            if !a.ungated {
                validate_params(a.eps, a.delta)?;
            }
        }
        Command::Ingest(a) => {
            if !(0.0..1.0).contains(&a.test_fraction) {
                return Err(Error::invalid("--test-fraction must lie in [0, 1)"));
            }
        }
        Command::Sweep(a) => {
            if let Some(d) = a.delta {
                if !(d > 0.0 && d < 1.0) {
                    return Err(Error::DeltaOutOfRange(d));
                }
            }
        }
        Command::Eval(_) => {}
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if !matches!(cli.command, Command::Sweep(_)) {
        if let Some(n) = cli.threads {
            // Fails only if a global pool already exists, e.g. in tests.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a, cli.threads),
        Command::Eval(a) => eval(a),
        Command::NoiseCalc(a) => noise_calc(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::file(path, e))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::file(path, e))?,
    ))
}

fn parse_pair(text: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = text
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got '{text}'"))?;
    let num = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| format!("'{x}' is not a number"))
    };
    Ok((num(lo)?, num(hi)?))
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let mut ds = parse_ratings(open(&a.input)?, a.format)?;
    if let Some((lo, hi)) = a.scale {
        ds = ds.with_scale(lo, hi)?;
    }
    if let Some((lo, hi)) = a.rescale {
        ds = rescale_ratings(&ds, lo, hi)?;
    }
    let prepared = prepare(&ds, a.xi, a.test_fraction, a.seed)?;
    write_observed(&prepared.observed, create(&a.output)?)?;
    match &a.test_output {
        Some(p) => write_triplets(&prepared.test, create(p)?)?,
        None if !prepared.test.is_empty() => {
            log::warn!(
                "{} held-out ratings discarded (no --test-output)",
                prepared.test.len()
            )
        }
        None => {}
    }
    if let Some(p) = &a.user_map {
        write_id_map(&ds.user_ids, create(p)?)?;
    }
    if let Some(p) = &a.item_map {
        write_id_map(&ds.item_ids, create(p)?)?;
    }
    println!(
        "users={} items={} observed={} test={} row_bound={}",
        prepared.observed.num_users(),
        prepared.observed.num_items(),
        prepared.observed.num_observed(),
        prepared.test.len(),
        prepared.observed.row_bound
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let obs = read_observed(open(&a.data)?)?;
    let mut settings = ModelSettings::default();
    a.model.apply(&mut settings);
    let model = train_model(a.algo, &obs, &settings, a.eps, a.delta, a.seed)?;
    model.write(create(&a.model_out)?)?;

    let mut report = format!(
        "algo={}\nepsilon={}\ndelta={}\nseed={}\ntrain_risk={}\n",
        a.algo,
        a.eps,
        a.delta,
        a.seed,
        empirical_risk(model.predictor(), &obs)?
    );
    if let Some(p) = &a.test {
        let test = read_triplets(open(p)?)?;
        let clip = !a.no_clip;
        report.push_str(&format!(
            "test_rmse={}\n",
            test_rmse(model.predictor(), &test, clip)?
        ));
        log::info!(
            "test_rmse with clip={}: {}",
            !clip,
            test_rmse(model.predictor(), &test, !clip)?
        );
    }
    print!("{report}");
    if let Some(p) = &a.metrics_out {
        create(p)?.write_all(report.as_bytes())?;
    }
    Ok(())
}

fn sweep(a: &SweepArgs, threads: Option<usize>) -> Result<()> {
    let mut spec = ExperimentSpec::from_path(&a.config)?;
    if let Some(v) = &a.algorithms {
        spec.algorithms = v.clone();
    }
    if let Some(v) = &a.epsilons {
        spec.epsilons = v.clone();
    }
    if let Some(v) = a.delta {
        spec.delta = v;
    }
    if let Some(v) = &a.seeds {
        spec.seeds = v.clone();
    }
    if let Some(v) = a.xi {
        spec.xi = v;
    }
    if let Some(v) = a.test_fraction {
        spec.test_fraction = v;
    }
    if let Some(v) = a.master_seed {
        spec.master_seed = v;
    }
    if a.timing {
        spec.timing = true;
    }
    if a.no_clip {
        spec.clip = false;
    }
    let mut settings = spec.model_settings();
    a.model.apply(&mut settings);
    spec.fw = settings.fw;
    spec.svd = settings.svd;
    spec.pgd = settings.pgd;

    let rows = run_sweep(&spec, threads)?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: {} eps={} seed={}: {}",
            r.algorithm,
            r.epsilon,
            r.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    match &a.output {
        Some(p) => write_results_csv(&rows, create(p)?),
        None => write_results_csv(&rows, std::io::stdout().lock()),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = TrainedModel::read(open(&a.model)?)?;
    let test = read_triplets(open(&a.test)?)?;
    let clip = !a.no_clip;
    if let Some(p) = &a.data {
        let obs = read_observed(open(p)?)?;
        println!("train_risk={}", empirical_risk(model.predictor(), &obs)?);
    }
    println!("n_test={}", test.len());
    println!("test_rmse={}", test_rmse(model.predictor(), &test, clip)?);
    log::info!(
        "test_rmse with clip={}: {}",
        !clip,
        test_rmse(model.predictor(), &test, !clip)?
    );
    Ok(())
}

fn noise_calc(a: &NoiseCalcArgs) -> Result<()> {
    let scale = if a.ungated {
        noise_scale_ungated(a.mech, a.row_bound, a.rounds, a.eps, a.delta)?
    } else {
        noise_scale(
            a.mech,
            a.row_bound,
            a.rounds,
            &validate_params(a.eps, a.delta)?,
        )?
    };
    println!("sigma={:.6}", scale.sigma);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn bad_privacy_pair_exits_two() {
        let code = run([
            "dpmc",
            "train",
            "--data",
            "x",
            "--algo",
            "fw_private",
            "--eps",
            "10",
            "--delta",
            "0.5",
            "--model-out",
            "y",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_flag_exits_two() {
        assert_eq!(run(["dpmc", "noise-calc", "--bogus"]), 2);
    }

    #[test]
    fn missing_file_exits_one() {
        let code = run([
            "dpmc",
            "eval",
            "--model",
            "/nonexistent/model",
            "--test",
            "/nonexistent/test",
        ]);
        assert_eq!(code, 1);
    }
}
