//! Command-line entry point: eight subcommands over the shared stage layer.
//!
//! Every option can come from a flag or from a `key = value` config file
//! (key = the long flag name without `--`); flags win. `--seed` and
//! `--config` are global. Exit codes: 0 success, 2 validation/input
//! problems, 3 numerical failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use exvi::config::ConfigMap;
use exvi::report::{self, ReportConfig};
use exvi::stages::{self, ExperimentMode, LikelihoodMode, PriorOptions, SynthConfig};
use exvi_core::classifier;
use exvi_core::gmm::GmmFitOptions;
use exvi_core::vi::ViOptions;
use exvi_core::{
    Error, FeatureTable64, FrechetTail64, GmmModel64, PcaModel64, Result, StressModel64,
};

#[derive(Parser)]
#[command(
    name = "exvi",
    version,
    about = "Latent-configuration inference pipeline for extreme stress events"
)]
struct Cli {
    /// Key=value config file; flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (seeded world or supplied models).
    Synth(SynthArgs),
    /// Fit the latent map and mixture prior from a feature CSV.
    FitPrior(FitPriorArgs),
    /// Variational posterior refinement of the prior.
    RunVi(RunViArgs),
    /// Independence-sampler posterior with a mixture refit.
    RunMcmc(RunMcmcArgs),
    /// Baseline: mixture fit on the latents of flagged extreme rows.
    RunEmpirical(RunEmpiricalArgs),
    /// Log-likelihood-ratio classification report and threshold sweep.
    Classify(ClassifyArgs),
    /// Full experiment: data, models, posteriors, classification, PDFs.
    RunAll(RunAllArgs),
    /// Plot-ready CSV regeneration from a completed run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// perfect | mixed
    #[arg(long)]
    mode: Option<String>,
    /// Output dataset directory (train.csv, test.csv, meta.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with prior.json, pca.json, stress.json (skips the world).
    #[arg(long)]
    models: Option<PathBuf>,
    /// Observed feature CSV with a stress column (mixed mode).
    #[arg(long)]
    experimental: Option<PathBuf>,
    /// Perfect mode: total generated rows.
    #[arg(long)]
    n_samples: Option<usize>,
    /// Perfect mode: rows in the training split.
    #[arg(long)]
    n_train: Option<usize>,
    /// Mixed mode: synthetic rows generated.
    #[arg(long)]
    n_synthetic: Option<usize>,
    /// Mixed mode: synthetic rows in the training split.
    #[arg(long)]
    n_train_synthetic: Option<usize>,
    /// Mixed mode: experimental rows in the training split.
    #[arg(long)]
    n_train_experimental: Option<usize>,
    /// Stress quantile defining the extreme threshold.
    #[arg(long)]
    quantile: Option<f64>,
    /// Seed of the built world (defaults to the global seed).
    #[arg(long)]
    world_seed: Option<u64>,
}

#[derive(Args)]
struct FitPriorArgs {
    /// Feature CSV to fit on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (pca.json, prior.json, prior_info.json, selection.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed component count; omit to select by BIC.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Fixed latent dimension; omit to keep by explained variance.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Explained-variance fraction when the dimension is not fixed.
    #[arg(long)]
    explained: Option<f64>,
    /// zscore | none
    #[arg(long)]
    scaling: Option<String>,
    /// Covariance diagonal regularization.
    #[arg(long)]
    reg: Option<f64>,
}

#[derive(Args)]
struct RunViArgs {
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Data CSV; features are projected when --pca is given, otherwise the
    /// columns are taken as latent coordinates.
    #[arg(long)]
    data: Option<PathBuf>,
    /// observed | surrogate
    #[arg(long)]
    likelihood: Option<String>,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    stress_model: Option<PathBuf>,
    /// Fitted tail JSON; omitted in surrogate mode the tail is fitted from
    /// the data's stress column.
    #[arg(long)]
    tail: Option<PathBuf>,
    /// Stress threshold for the tail fit; defaults to the data quantile.
    #[arg(long)]
    sigma_bar: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    /// zero | profile
    #[arg(long)]
    tail_location: Option<String>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Posterior covariance regularization.
    #[arg(long)]
    reg: Option<f64>,
    /// Posterior JSON path; elbo_trace.csv and vi_info.json land beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunMcmcArgs {
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    stress_model: Option<PathBuf>,
    #[arg(long)]
    tail: Option<PathBuf>,
    /// Data CSV; sets the default step budget and, without --tail, supplies
    /// the stress column the tail is fitted on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    sigma_bar: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    /// zero | profile
    #[arg(long)]
    tail_location: Option<String>,
    /// Proposals; defaults to 50 × data rows when --data is given.
    #[arg(long)]
    steps: Option<usize>,
    /// Discarded leading steps; defaults to 10% of the steps.
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Components of the refit; defaults to the prior's count.
    #[arg(long)]
    k: Option<usize>,
    /// Kept-samples CSV path; mcmc_posterior.json and mcmc_info.json land
    /// beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunEmpiricalArgs {
    /// Prior JSON; supplies the component count unless --k is given.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Data CSV with `extreme` flags.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    reg: Option<f64>,
    /// Posterior JSON path; empirical_info.json lands beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Data CSV with ground-truth `extreme` flags.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Score threshold; rows scoring strictly above are called extreme.
    #[arg(long)]
    threshold: Option<f64>,
    /// Stress threshold recorded in the report.
    #[arg(long)]
    sigma_bar: Option<f64>,
    /// Output directory (report.json, sweep.csv, llr_scatter.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunAllArgs {
    /// Run directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// perfect | mixed
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    experimental: Option<PathBuf>,
    #[arg(long)]
    world_seed: Option<u64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_synthetic: Option<usize>,
    #[arg(long)]
    n_train_synthetic: Option<usize>,
    #[arg(long)]
    n_train_experimental: Option<usize>,
    #[arg(long)]
    quantile: Option<f64>,
    /// Comma-separated subset of vi,mcmc,empirical.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long)]
    explained: Option<f64>,
    /// zscore | none
    #[arg(long)]
    scaling: Option<String>,
    #[arg(long)]
    reg: Option<f64>,
    /// Stress-surrogate ridge penalty.
    #[arg(long)]
    ridge: Option<f64>,
    /// zero | profile
    #[arg(long)]
    tail_location: Option<String>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    pdf_samples: Option<usize>,
    #[arg(long)]
    pdf_bins: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Completed run directory.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Output directory; defaults to <run>/report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// 1-based latent pair of the density grid, e.g. 1,2.
    #[arg(long)]
    pair: Option<String>,
    /// Lattice points per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Lattice half-width in prior standard deviations.
    #[arg(long)]
    span: Option<f64>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    let seed = cfg.resolve(cli.seed, "seed", 0u64)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&cfg, seed, a),
        Command::FitPrior(a) => cmd_fit_prior(&cfg, seed, a),
        Command::RunVi(a) => cmd_run_vi(&cfg, a),
        Command::RunMcmc(a) => cmd_run_mcmc(&cfg, seed, a),
        Command::RunEmpirical(a) => cmd_run_empirical(&cfg, seed, a),
        Command::Classify(a) => cmd_classify(&cfg, a),
        Command::RunAll(a) => cmd_run_all(&cfg, seed, a),
        Command::Report(a) => cmd_report(&cfg, a),
    }
}

/// Parent directory of a file path (empty means the working directory).
fn ensure_parent(path: &Path) -> Result<PathBuf> {
    let parent = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !parent.as_os_str().is_empty() {
        std::fs::create_dir_all(&parent)?;
    }
    Ok(parent)
}

fn count_flags(flags: Option<&[bool]>) -> usize {
    flags.map_or(0, |f| f.iter().filter(|&&b| b).count())
}

fn cmd_synth(cfg: &ConfigMap, seed: u64, a: SynthArgs) -> Result<()> {
    let out: PathBuf = cfg.resolve_required(a.out, "out")?;
    let mode: ExperimentMode = cfg.resolve(a.mode, "mode", "perfect".to_string())?.parse()?;
    let models_dir: Option<PathBuf> = cfg.resolve_opt(a.models, "models")?;
    let world_seed = cfg.resolve(a.world_seed, "world-seed", seed)?;
    let mut synth = SynthConfig::new(mode, seed);
    synth.n_samples = cfg.resolve(a.n_samples, "n-samples", synth.n_samples)?;
    synth.n_train = cfg.resolve(a.n_train, "n-train", synth.n_train)?;
    synth.n_synthetic = cfg.resolve(a.n_synthetic, "n-synthetic", synth.n_synthetic)?;
    synth.n_train_synthetic =
        cfg.resolve(a.n_train_synthetic, "n-train-synthetic", synth.n_train_synthetic)?;
    synth.n_train_experimental = cfg.resolve(
        a.n_train_experimental,
        "n-train-experimental",
        synth.n_train_experimental,
    )?;
    synth.quantile = cfg.resolve(a.quantile, "quantile", synth.quantile)?;
    synth.experimental = cfg.resolve_opt(a.experimental, "experimental")?;

    let (models, built) =
        stages::resolve_generator_models(models_dir.as_deref(), world_seed)?;
    let ds = stages::build_dataset(&models, &synth)?;
    ds.save(&out)?;
    if built {
        stages::save_generator_models(&out.join("world"), &models)?;
    }
    println!(
        "dataset: {} train / {} test rows, sigma_bar {:.6}, {} train / {} test extremes",
        ds.train.n(),
        ds.test.n(),
        ds.sigma_bar,
        count_flags(ds.train.extreme()),
        count_flags(ds.test.extreme()),
    );
    Ok(())
}

fn prior_options(cfg: &ConfigMap, seed: u64, a: &FitPriorArgs) -> Result<PriorOptions> {
    let defaults = PriorOptions::default();
    Ok(PriorOptions {
        k: cfg.resolve_opt(a.k, "k")?,
        k_min: cfg.resolve(a.k_min, "k-min", defaults.k_min)?,
        k_max: cfg.resolve(a.k_max, "k-max", defaults.k_max)?,
        pca_dim: cfg.resolve_opt(a.pca_dim, "pca-dim")?,
        explained: cfg.resolve(a.explained, "explained", defaults.explained)?,
        scaling: stages::parse_scaling(&cfg.resolve(
            a.scaling.clone(),
            "scaling",
            "zscore".to_string(),
        )?)?,
        reg: cfg.resolve(a.reg, "reg", defaults.reg)?,
        seed,
    })
}

fn cmd_fit_prior(cfg: &ConfigMap, seed: u64, a: FitPriorArgs) -> Result<()> {
    let data: PathBuf = cfg.resolve_required(a.data.clone(), "data")?;
    let out: PathBuf = cfg.resolve_required(a.out.clone(), "out")?;
    let opts = prior_options(cfg, seed, &a)?;
    let table = FeatureTable64::read_csv(&data)?;
    let fit = stages::fit_prior(&table, &opts)?;
    stages::write_prior_artifacts(&out, &fit)?;
    println!(
        "prior: K={} d={} log-likelihood {:.4}{}",
        fit.prior.k(),
        fit.prior.d(),
        fit.info.log_likelihood,
        if fit.candidates.is_some() { " (BIC-selected)" } else { "" },
    );
    Ok(())
}

/// Loads the tail or fits one from the data's stress column, writing the
/// fitted tail beside `out` for the record.
fn resolve_tail(
    cfg: &ConfigMap,
    tail: Option<PathBuf>,
    sigma_bar: Option<f64>,
    quantile: Option<f64>,
    tail_location: Option<String>,
    table: Option<&FeatureTable64>,
    out_parent: &Path,
) -> Result<FrechetTail64> {
    match cfg.resolve_opt(tail, "tail")? {
        Some(path) => FrechetTail64::load_json(path),
        None => {
            let table = table.ok_or_else(|| {
                Error::validation(
                    "pass --tail, or --data with a stress column to fit one",
                )
            })?;
            let location = stages::parse_tail_location(&cfg.resolve(
                tail_location,
                "tail-location",
                "zero".to_string(),
            )?)?;
            let sigma_bar = stages::resolve_sigma_bar(
                table,
                cfg.resolve_opt(sigma_bar, "sigma-bar")?,
                cfg.resolve(quantile, "quantile", 0.95)?,
            )?;
            let fitted = stages::fit_tail_from_table(table, sigma_bar, location)?;
            fitted.save_json(out_parent.join("tail_fitted.json"))?;
            println!(
                "tail: fitted s {:.4} alpha {:.4} m {:.4} at sigma_bar {:.6}",
                fitted.s(),
                fitted.alpha(),
                fitted.m(),
                fitted.sigma_bar(),
            );
            Ok(fitted)
        }
    }
}

fn cmd_run_vi(cfg: &ConfigMap, a: RunViArgs) -> Result<()> {
    let prior = GmmModel64::load_json(cfg.resolve_required::<PathBuf>(a.prior, "prior")?)?;
    let table = FeatureTable64::read_csv(cfg.resolve_required::<PathBuf>(a.data, "data")?)?;
    let mode: LikelihoodMode =
        cfg.resolve_required::<String>(a.likelihood, "likelihood")?.parse()?;
    let pca = cfg
        .resolve_opt::<PathBuf>(a.pca, "pca")?
        .map(PcaModel64::load_json)
        .transpose()?;
    let out: PathBuf = cfg.resolve_required(a.out, "out")?;
    let parent = ensure_parent(&out)?;
    let opts = ViOptions {
        max_iter: cfg.resolve(a.max_iter, "max-iter", ViOptions::default().max_iter)?,
        tol: cfg.resolve(a.tol, "tol", ViOptions::default().tol)?,
        reg_floor: cfg.resolve(a.reg, "reg", ViOptions::default().reg_floor)?,
    };
    let surrogate = match mode {
        LikelihoodMode::Observed => None,
        LikelihoodMode::Surrogate => {
            let stress = StressModel64::load_json(
                cfg.resolve_required::<PathBuf>(a.stress_model, "stress-model")?,
            )?;
            let tail = resolve_tail(
                cfg,
                a.tail,
                a.sigma_bar,
                a.quantile,
                a.tail_location,
                Some(&table),
                &parent,
            )?;
            Some((stress, tail))
        }
    };
    let result = stages::run_vi_stage(
        &prior,
        pca.as_ref(),
        surrogate.as_ref().map(|(s, t)| (s, t)),
        &table,
        mode,
        opts,
    )?;
    result.posterior.save_json(&out)?;
    stages::write_elbo_trace_csv(&parent.join("elbo_trace.csv"), &result.elbo_trace)?;
    stages::write_vi_info(&parent.join("vi_info.json"), &result)?;
    println!(
        "vi: {} iterations, converged={}, effective n {:.2}, frozen components {}",
        result.iterations, result.converged, result.effective_n, result.frozen_events,
    );
    Ok(())
}

fn cmd_run_mcmc(cfg: &ConfigMap, seed: u64, a: RunMcmcArgs) -> Result<()> {
    let prior = GmmModel64::load_json(cfg.resolve_required::<PathBuf>(a.prior, "prior")?)?;
    let pca = PcaModel64::load_json(cfg.resolve_required::<PathBuf>(a.pca, "pca")?)?;
    let stress = StressModel64::load_json(
        cfg.resolve_required::<PathBuf>(a.stress_model, "stress-model")?,
    )?;
    let table = cfg
        .resolve_opt::<PathBuf>(a.data, "data")?
        .map(FeatureTable64::read_csv)
        .transpose()?;
    let out: PathBuf = cfg.resolve_required(a.out, "out")?;
    let parent = ensure_parent(&out)?;
    let tail = resolve_tail(
        cfg,
        a.tail,
        a.sigma_bar,
        a.quantile,
        a.tail_location,
        table.as_ref(),
        &parent,
    )?;
    let steps = match cfg.resolve_opt(a.steps, "steps")? {
        Some(s) => s,
        None => match &table {
            Some(t) => 50 * t.n(),
            None => {
                return Err(Error::validation(
                    "pass --steps, or --data for the default 50 × rows budget",
                ))
            }
        },
    };
    let opts = stages::McmcStageOptions {
        steps,
        burn_in: cfg
            .resolve_opt(a.burn_in, "burn-in")?
            .unwrap_or_else(|| exvi_core::mcmc::default_burn_in(steps)),
        thin: cfg.resolve(a.thin, "thin", 1)?,
        k: cfg.resolve(a.k, "k", prior.k())?,
        seed,
    };
    let run = stages::run_mcmc_stage(&prior, &pca, &stress, &tail, &opts)?;
    stages::write_samples_csv(&out, &run.result.samples)?;
    run.posterior.save_json(parent.join("mcmc_posterior.json"))?;
    stages::write_mcmc_info(&parent.join("mcmc_info.json"), &opts, &run)?;
    println!(
        "mcmc: {} steps, acceptance {:.4}, kept {} samples, refit K={}",
        opts.steps,
        run.result.acceptance_rate,
        run.result.samples.nrows(),
        run.posterior.k(),
    );
    Ok(())
}

fn cmd_run_empirical(cfg: &ConfigMap, seed: u64, a: RunEmpiricalArgs) -> Result<()> {
    let table = FeatureTable64::read_csv(cfg.resolve_required::<PathBuf>(a.data, "data")?)?;
    let pca = cfg
        .resolve_opt::<PathBuf>(a.pca, "pca")?
        .map(PcaModel64::load_json)
        .transpose()?;
    let k = match cfg.resolve_opt(a.k, "k")? {
        Some(k) => k,
        None => match cfg.resolve_opt::<PathBuf>(a.prior, "prior")? {
            Some(path) => GmmModel64::load_json(path)?.k(),
            None => {
                return Err(Error::validation(
                    "pass --k or --prior to set the component count",
                ))
            }
        },
    };
    let reg = cfg.resolve(a.reg, "reg", GmmFitOptions::default().reg_floor)?;
    let out: PathBuf = cfg.resolve_required(a.out, "out")?;
    let parent = ensure_parent(&out)?;
    let (model, info, n_rows) =
        stages::run_empirical_stage(k, pca.as_ref(), &table, reg, seed)?;
    model.save_json(&out)?;
    stages::write_empirical_info(&parent.join("empirical_info.json"), n_rows, &model, &info)?;
    println!(
        "empirical: {} flagged rows, K={}, log-likelihood {:.4}",
        n_rows,
        model.k(),
        info.log_likelihood,
    );
    Ok(())
}

fn cmd_classify(cfg: &ConfigMap, a: ClassifyArgs) -> Result<()> {
    let prior = GmmModel64::load_json(cfg.resolve_required::<PathBuf>(a.prior, "prior")?)?;
    let posterior =
        GmmModel64::load_json(cfg.resolve_required::<PathBuf>(a.posterior, "posterior")?)?;
    let pca = cfg
        .resolve_opt::<PathBuf>(a.pca, "pca")?
        .map(PcaModel64::load_json)
        .transpose()?;
    let table = FeatureTable64::read_csv(cfg.resolve_required::<PathBuf>(a.data, "data")?)?;
    let threshold =
        cfg.resolve(a.threshold, "threshold", classifier::DEFAULT_LLR_THRESHOLD)?;
    let sigma_bar: f64 = cfg.resolve_required(a.sigma_bar, "sigma-bar")?;
    let out: PathBuf = cfg.resolve_required(a.out, "out")?;
    std::fs::create_dir_all(&out)?;
    let result =
        stages::classify_stage(&prior, &posterior, pca.as_ref(), &table, threshold, sigma_bar, None)?;
    result.report.save_json(out.join("report.json"))?;
    classifier::write_sweep_csv(out.join("sweep.csv"), &result.curve)?;
    match table.stress() {
        Some(stresses) => stages::write_scatter_csv(
            &out.join("llr_scatter.csv"),
            &result.llrs,
            stresses,
            table.extreme().expect("classification validated the flags"),
        )?,
        None => eprintln!("note: no stress column; llr_scatter.csv skipped"),
    }
    let r = &result.report;
    println!(
        "classify: tp {} fp {} tn {} fn {} (fnr {:.4}, fpr {:.4})",
        r.tp, r.fp, r.tn, r.fn_, r.fnr, r.fpr,
    );
    Ok(())
}

fn cmd_run_all(cfg: &ConfigMap, seed: u64, a: RunAllArgs) -> Result<()> {
    let out: PathBuf = cfg.resolve_required(a.out, "out")?;
    let mode: ExperimentMode = cfg.resolve(a.mode, "mode", "perfect".to_string())?.parse()?;
    let mut rc = stages::RunAllConfig::new(out, mode, seed);
    rc.models_dir = cfg.resolve_opt(a.models, "models")?;
    rc.world_seed = cfg.resolve(a.world_seed, "world-seed", seed)?;
    rc.synth.n_samples = cfg.resolve(a.n_samples, "n-samples", rc.synth.n_samples)?;
    rc.synth.n_train = cfg.resolve(a.n_train, "n-train", rc.synth.n_train)?;
    rc.synth.n_synthetic = cfg.resolve(a.n_synthetic, "n-synthetic", rc.synth.n_synthetic)?;
    rc.synth.n_train_synthetic =
        cfg.resolve(a.n_train_synthetic, "n-train-synthetic", rc.synth.n_train_synthetic)?;
    rc.synth.n_train_experimental = cfg.resolve(
        a.n_train_experimental,
        "n-train-experimental",
        rc.synth.n_train_experimental,
    )?;
    rc.synth.quantile = cfg.resolve(a.quantile, "quantile", rc.synth.quantile)?;
    rc.synth.experimental = cfg.resolve_opt(a.experimental, "experimental")?;
    rc.methods =
        stages::parse_methods(&cfg.resolve(a.methods, "methods", "vi,mcmc,empirical".into())?)?;
    rc.prior.k = cfg.resolve_opt(a.k, "k")?;
    rc.prior.k_min = cfg.resolve(a.k_min, "k-min", rc.prior.k_min)?;
    rc.prior.k_max = cfg.resolve(a.k_max, "k-max", rc.prior.k_max)?;
    rc.prior.pca_dim = cfg.resolve_opt(a.pca_dim, "pca-dim")?;
    rc.prior.explained = cfg.resolve(a.explained, "explained", rc.prior.explained)?;
    rc.prior.scaling =
        stages::parse_scaling(&cfg.resolve(a.scaling, "scaling", "zscore".to_string())?)?;
    rc.prior.reg = cfg.resolve(a.reg, "reg", rc.prior.reg)?;
    rc.ridge = cfg.resolve(a.ridge, "ridge", rc.ridge)?;
    rc.tail_location = stages::parse_tail_location(&cfg.resolve(
        a.tail_location,
        "tail-location",
        "zero".to_string(),
    )?)?;
    rc.vi.max_iter = cfg.resolve(a.max_iter, "max-iter", rc.vi.max_iter)?;
    rc.vi.tol = cfg.resolve(a.tol, "tol", rc.vi.tol)?;
    rc.vi.reg_floor = rc.prior.reg;
    rc.steps = cfg.resolve_opt(a.steps, "steps")?;
    rc.burn_in = cfg.resolve_opt(a.burn_in, "burn-in")?;
    rc.thin = cfg.resolve(a.thin, "thin", rc.thin)?;
    rc.llr_threshold = cfg.resolve(a.threshold, "threshold", rc.llr_threshold)?;
    rc.pdf_samples = cfg.resolve(a.pdf_samples, "pdf-samples", rc.pdf_samples)?;
    rc.pdf_bins = cfg.resolve(a.pdf_bins, "pdf-bins", rc.pdf_bins)?;

    let summary = stages::run_all(&rc)?;
    println!(
        "models: prior K={} d={}, sigma_bar {:.6}",
        summary.prior.prior.k(),
        summary.prior.prior.d(),
        summary.sigma_bar,
    );
    if let Some(vi) = &summary.vi {
        println!("vi: {} iterations, converged={}", vi.iterations, vi.converged);
    }
    if let Some(mcmc) = &summary.mcmc {
        println!(
            "mcmc: acceptance {:.4}, kept {} samples",
            mcmc.result.acceptance_rate,
            mcmc.result.samples.nrows(),
        );
    }
    if let Some((model, _, n_rows)) = &summary.empirical {
        println!("empirical: {} flagged rows, K={}", n_rows, model.k());
    }
    for (method, c) in &summary.reports {
        let r = &c.report;
        println!(
            "{}: tp {} fp {} tn {} fn {} (fnr {:.4}, fpr {:.4})",
            method.name(),
            r.tp,
            r.fp,
            r.tn,
            r.fn_,
            r.fnr,
            r.fpr,
        );
    }
    println!("run complete: {}", summary.out_dir.display());
    Ok(())
}

fn cmd_report(cfg: &ConfigMap, a: ReportArgs) -> Result<()> {
    let run_dir: PathBuf = cfg.resolve_required(a.run, "run")?;
    let mut rc = ReportConfig::new(run_dir);
    rc.out_dir = cfg.resolve_opt(a.out, "out")?;
    rc.pair = stages::parse_pair(&cfg.resolve(a.pair, "pair", "1,2".to_string())?)?;
    rc.grid = cfg.resolve(a.grid, "grid", rc.grid)?;
    rc.span = cfg.resolve(a.span, "span", rc.span)?;
    let summary = report::run_report(&rc)?;
    println!(
        "report: {} files in {} ({} density grid points)",
        summary.files.len(),
        summary.out_dir.display(),
        summary.grid_points,
    );
    Ok(())
}
