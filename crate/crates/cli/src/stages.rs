//! Pipeline stages shared by the subcommands and the end-to-end runner.
//!
//! Each stage is a function over loaded models and tables; standalone
//! subcommands and `run_all` both go through these, so an artifact is
//! written the same way no matter which entry point produced it.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use exvi_core::classifier::{self, ClassificationReport, SweepPoint};
use exvi_core::data::format_scalar;
use exvi_core::evt::{fit_frechet_mle, FrechetFitOptions, TailLocation};
use exvi_core::gmm::{self, GmmFitInfo, GmmFitOptions, KCandidate};
use exvi_core::likelihood::{LikelihoodProvider, SurrogateLikelihood};
use exvi_core::mcmc::{self, McmcResult};
use exvi_core::pca::{DimensionPolicy, PcaOptions, ScalingMode};
use exvi_core::rng::{stream_rng, streams};
use exvi_core::stress::{fit_stress, full_quadratic_termspec, StressFitOptions};
use exvi_core::synth::{
    build_world, generate_mixed, generate_perfect, select_threshold, Dataset, MixedConfig,
    PerfectConfig,
};
use exvi_core::vi::{self, ViOptions};
use exvi_core::{
    write_json_file, Error, FeatureTable64, FrechetTail64, GmmModel64, PcaModel64, Real, Result,
    StressModel64, ViResult64,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Schema tag stamped into every run directory's `meta.json`.
pub const RUN_SCHEMA: &str = "run/v1";

/// Wraps a stage's error with the stage name so end-to-end failures point at
/// the phase that broke. The validation/numerical distinction (and hence the
/// exit code) survives the wrapping.
pub fn stage_context<T>(stage: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Validation(m) => Error::validation(format!("{stage}: {m}")),
        Error::Numerical(m) => Error::numerical(format!("{stage}: {m}")),
        other => Error::validation(format!("{stage}: {other}")),
    })
}

// ---------------------------------------------------------------------------
// Option vocabulary shared by flags and config keys
// ---------------------------------------------------------------------------

/// How per-sample extreme-event likelihoods are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodMode {
    /// Trust the `extreme` indicator column.
    Observed,
    /// Predict exceedance probabilities from the stress surrogate and tail.
    Surrogate,
}

impl FromStr for LikelihoodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(LikelihoodMode::Observed),
            "surrogate" => Ok(LikelihoodMode::Surrogate),
            other => Err(Error::validation(format!(
                "unknown likelihood mode `{other}` (expected observed|surrogate)"
            ))),
        }
    }
}

/// Which experiment regime a dataset is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentMode {
    /// Sample everything from the generator models.
    Perfect,
    /// Blend synthetic rows with an observed feature table.
    Mixed,
}

impl ExperimentMode {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::Perfect => "perfect",
            ExperimentMode::Mixed => "mixed",
        }
    }
}

impl FromStr for ExperimentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(ExperimentMode::Perfect),
            "mixed" => Ok(ExperimentMode::Mixed),
            other => Err(Error::validation(format!(
                "unknown experiment mode `{other}` (expected perfect|mixed)"
            ))),
        }
    }
}

/// Posterior-construction methods the pipeline can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Vi,
    Mcmc,
    Empirical,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vi, Method::Mcmc, Method::Empirical];

    /// Directory and report name of the method inside a run directory.
    pub fn name(self) -> &'static str {
        match self {
            Method::Vi => "vi",
            Method::Mcmc => "mcmc",
            Method::Empirical => "empirical",
        }
    }

    /// Offset added to the report sampling stream. Fixed per method (not per
    /// position) so a `--methods` subset reproduces the full run's draws.
    pub fn pdf_stream_offset(self) -> u64 {
        match self {
            Method::Vi => 1,
            Method::Mcmc => 2,
            Method::Empirical => 3,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vi" => Ok(Method::Vi),
            "mcmc" => Ok(Method::Mcmc),
            "empirical" => Ok(Method::Empirical),
            other => Err(Error::validation(format!(
                "unknown method `{other}` (expected vi|mcmc|empirical)"
            ))),
        }
    }
}

/// Parses a comma-separated method list into canonical (vi, mcmc, empirical)
/// order with duplicates removed.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut requested = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        requested.push(part.parse::<Method>()?);
    }
    let picked: Vec<Method> =
        Method::ALL.into_iter().filter(|m| requested.contains(m)).collect();
    if picked.is_empty() {
        return Err(Error::validation(
            "no methods selected (expected a comma-separated subset of vi,mcmc,empirical)",
        ));
    }
    Ok(picked)
}

pub fn parse_tail_location(s: &str) -> Result<TailLocation> {
    match s {
        "zero" => Ok(TailLocation::Zero),
        "profile" => Ok(TailLocation::Profile),
        other => Err(Error::validation(format!(
            "unknown tail location `{other}` (expected zero|profile)"
        ))),
    }
}

pub fn parse_scaling(s: &str) -> Result<ScalingMode> {
    match s {
        "zscore" => Ok(ScalingMode::ZScore),
        "none" => Ok(ScalingMode::None),
        other => Err(Error::validation(format!(
            "unknown scaling mode `{other}` (expected zscore|none)"
        ))),
    }
}

/// Parses a 1-based `a,b` latent coordinate pair (e.g. `1,2`).
pub fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::validation(format!("bad coordinate pair `{s}` (expected e.g. `1,2`)"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || b == 0 || a == b {
        return Err(Error::validation(format!(
            "coordinate pair `{s}` must name two distinct 1-based components"
        )));
    }
    Ok((a, b))
}

// ---------------------------------------------------------------------------
// Shared small helpers
// ---------------------------------------------------------------------------

/// Latent coordinates of a table: projected through the map when one is
/// given, otherwise the feature columns are taken to be latent already.
pub fn latents_for(pca: Option<&PcaModel64>, table: &FeatureTable64) -> Result<DMatrix<Real>> {
    match pca {
        Some(p) => p.project_batch(table.rows()),
        None => Ok(table.rows().clone()),
    }
}

/// Uses the given threshold when present, otherwise derives one from the
/// table's stress column at the given quantile.
pub fn resolve_sigma_bar(
    table: &FeatureTable64,
    sigma_bar: Option<Real>,
    quantile: f64,
) -> Result<Real> {
    match sigma_bar {
        Some(v) => Ok(v),
        None => {
            let stresses = table.stress().ok_or_else(|| {
                Error::validation(
                    "no stress column to derive a threshold from; pass --sigma-bar",
                )
            })?;
            select_threshold(stresses.as_slice(), quantile)
        }
    }
}

/// Fits the exceedance tail on `stress − σ̄` over the table's threshold
/// crossings.
pub fn fit_tail_from_table(
    table: &FeatureTable64,
    sigma_bar: Real,
    location: TailLocation,
) -> Result<FrechetTail64> {
    let stresses = table.stress().ok_or_else(|| {
        Error::validation("data has no stress column; cannot fit an exceedance tail")
    })?;
    let ys: Vec<Real> =
        stresses.iter().copied().filter(|&s| s > sigma_bar).map(|s| s - sigma_bar).collect();
    fit_frechet_mle(&ys, sigma_bar, FrechetFitOptions { location, ..FrechetFitOptions::default() })
}

// ---------------------------------------------------------------------------
// Prior fitting
// ---------------------------------------------------------------------------

/// Options for the latent map + mixture prior stage.
#[derive(Debug, Clone)]
pub struct PriorOptions {
    /// Fixed component count; `None` selects by BIC over `k_min..=k_max`.
    pub k: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
    /// Fixed latent dimension; `None` keeps components by explained variance.
    pub pca_dim: Option<usize>,
    pub explained: f64,
    pub scaling: ScalingMode,
    /// Covariance diagonal regularization for the mixture fit.
    pub reg: f64,
    pub seed: u64,
}

impl Default for PriorOptions {
    fn default() -> Self {
        PriorOptions {
            k: None,
            k_min: 1,
            k_max: 6,
            pca_dim: None,
            explained: 0.95,
            scaling: ScalingMode::ZScore,
            reg: GmmFitOptions::default().reg_floor,
            seed: 0,
        }
    }
}

/// Fitted latent map and mixture prior, with the fit diagnostics and the
/// per-K selection table when a component count was chosen by BIC.
#[derive(Debug, Clone)]
pub struct PriorFit {
    pub pca: PcaModel64,
    pub prior: GmmModel64,
    pub info: GmmFitInfo<Real>,
    pub candidates: Option<Vec<KCandidate>>,
}

/// Standardize, fit the latent map, and fit the mixture prior on the
/// projected coordinates, selecting the component count by BIC unless fixed.
pub fn fit_prior(table: &FeatureTable64, opts: &PriorOptions) -> Result<PriorFit> {
    let policy = match opts.pca_dim {
        Some(d) => DimensionPolicy::Fixed(d),
        None => DimensionPolicy::ExplainedVariance(opts.explained),
    };
    let pca = PcaModel64::fit(table, PcaOptions { policy, scaling: opts.scaling })?;
    let latents = pca.project_batch(table.rows())?;
    let base = GmmFitOptions { reg_floor: opts.reg, ..GmmFitOptions::default() };
    let (prior, info, candidates) = match opts.k {
        Some(k) => {
            let (model, info) =
                gmm::fit(&latents, GmmFitOptions { n_components: k, ..base }, opts.seed)?;
            (model, info, None)
        }
        None => {
            if opts.k_min < 1 || opts.k_max < opts.k_min {
                return Err(Error::validation(format!(
                    "component range must satisfy 1 <= k-min <= k-max, got {}..={}",
                    opts.k_min, opts.k_max
                )));
            }
            let ks: Vec<usize> = (opts.k_min..=opts.k_max).collect();
            let (model, info, candidates) = gmm::select_k(&latents, &ks, base, opts.seed)?;
            (model, info, Some(candidates))
        }
    };
    Ok(PriorFit { pca, prior, info, candidates })
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorInfoDoc {
    k: usize,
    d: usize,
    log_likelihood: f64,
    iterations: usize,
    converged: bool,
    best_init: usize,
    rescues: usize,
    selected_by_bic: bool,
}

/// Writes `pca.json`, `prior.json`, `prior_info.json`, and (when BIC
/// selection ran) `selection.csv` into `dir`.
pub fn write_prior_artifacts(dir: &Path, fit: &PriorFit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    fit.pca.save_json(dir.join("pca.json"))?;
    fit.prior.save_json(dir.join("prior.json"))?;
    if let Some(candidates) = &fit.candidates {
        write_selection_csv(&dir.join("selection.csv"), candidates)?;
    }
    let doc = PriorInfoDoc {
        k: fit.prior.k(),
        d: fit.prior.d(),
        log_likelihood: fit.info.log_likelihood,
        iterations: fit.info.iterations,
        converged: fit.info.converged,
        best_init: fit.info.best_init,
        rescues: fit.info.rescues,
        selected_by_bic: fit.candidates.is_some(),
    };
    write_json_file(dir.join("prior_info.json"), &doc)
}

/// Per-K model-selection table (`k,log_likelihood,n_params,bic,aic`).
pub fn write_selection_csv(path: &Path, candidates: &[KCandidate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "log_likelihood", "n_params", "bic", "aic"])?;
    for c in candidates {
        w.write_record([
            c.k.to_string(),
            format_scalar(c.log_likelihood),
            c.n_params.to_string(),
            format_scalar(c.bic),
            format_scalar(c.aic),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stress surrogate
// ---------------------------------------------------------------------------

/// Fits the full quadratic stress surrogate on the table's features against
/// its observed stress column.
pub fn fit_surrogate_stress(table: &FeatureTable64, ridge: f64) -> Result<StressModel64> {
    let stresses = table.stress().ok_or_else(|| {
        Error::validation("data has no stress column; cannot fit a stress surrogate")
    })?;
    let mut spec = full_quadratic_termspec(table.dim());
    spec.feature_names = Some(table.feature_names().to_vec());
    fit_stress(table.rows(), stresses, &spec, StressFitOptions { ridge, fit_intercept: true })
}

// ---------------------------------------------------------------------------
// Variational stage
// ---------------------------------------------------------------------------

/// Runs variational refinement of the prior on the table's latent
/// coordinates. Surrogate mode needs the latent map plus the stress and tail
/// models; observed mode needs the `extreme` indicator column.
pub fn run_vi_stage(
    prior: &GmmModel64,
    pca: Option<&PcaModel64>,
    surrogate: Option<(&StressModel64, &FrechetTail64)>,
    table: &FeatureTable64,
    mode: LikelihoodMode,
    opts: ViOptions,
) -> Result<ViResult64> {
    let latents = latents_for(pca, table)?;
    match mode {
        LikelihoodMode::Observed => {
            let flags = table.extreme().ok_or_else(|| {
                Error::validation(
                    "observed likelihood needs an `extreme` column in the data",
                )
            })?;
            vi::run_vi(prior, &latents, &LikelihoodProvider::Observed(flags), opts)
        }
        LikelihoodMode::Surrogate => {
            let pca = pca.ok_or_else(|| {
                Error::validation("surrogate likelihood needs a latent map (--pca)")
            })?;
            let (stress, tail) = surrogate.ok_or_else(|| {
                Error::validation(
                    "surrogate likelihood needs a stress model and a fitted tail",
                )
            })?;
            let lik = SurrogateLikelihood::new(pca, stress, tail)?;
            vi::run_vi(prior, &latents, &LikelihoodProvider::Surrogate(lik), opts)
        }
    }
}

/// `iteration,elbo` trace; iterations are numbered from 1.
pub fn write_elbo_trace_csv(path: &Path, trace: &[Real]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "elbo"])?;
    for (i, &e) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format_scalar(e)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ViInfoDoc {
    iterations: usize,
    converged: bool,
    effective_n: f64,
    frozen_events: usize,
    final_elbo: Option<f64>,
}

pub fn write_vi_info(path: &Path, result: &ViResult64) -> Result<()> {
    let doc = ViInfoDoc {
        iterations: result.iterations,
        converged: result.converged,
        effective_n: result.effective_n,
        frozen_events: result.frozen_events,
        final_elbo: result.elbo_trace.last().copied(),
    };
    write_json_file(path, &doc)
}

// ---------------------------------------------------------------------------
// Sampling stage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct McmcStageOptions {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Component count of the density refit on the kept samples.
    pub k: usize,
    pub seed: u64,
}

/// Chain output together with the mixture refit of its kept samples.
#[derive(Debug, Clone)]
pub struct McmcRun {
    pub result: McmcResult<Real>,
    pub posterior: GmmModel64,
    pub refit: GmmFitInfo<Real>,
}

/// Runs the independence sampler against the surrogate exceedance likelihood
/// and refits a mixture of `k` components on the kept draws.
pub fn run_mcmc_stage(
    prior: &GmmModel64,
    pca: &PcaModel64,
    stress: &StressModel64,
    tail: &FrechetTail64,
    opts: &McmcStageOptions,
) -> Result<McmcRun> {
    let lik = SurrogateLikelihood::new(pca, stress, tail)?;
    let result = mcmc::run_mh(prior, &lik, opts.steps, opts.burn_in, opts.thin, opts.seed)?;
    let (posterior, refit) = mcmc::fit_posterior_gmm(&result, opts.k, opts.seed)?;
    Ok(McmcRun { result, posterior, refit })
}

/// Kept chain states, one latent coordinate per column (`z1..zd`).
pub fn write_samples_csv(path: &Path, samples: &DMatrix<Real>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (1..=samples.ncols()).map(|j| format!("z{j}")).collect();
    w.write_record(&header)?;
    for i in 0..samples.nrows() {
        let record: Vec<String> = (0..samples.ncols()).map(|j| format_scalar(samples[(i, j)])).collect();
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct McmcInfoDoc {
    steps: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    acceptance_rate: f64,
    kept: usize,
    refit_log_likelihood: f64,
    refit_iterations: usize,
    refit_converged: bool,
}

pub fn write_mcmc_info(path: &Path, opts: &McmcStageOptions, run: &McmcRun) -> Result<()> {
    let doc = McmcInfoDoc {
        steps: opts.steps,
        burn_in: opts.burn_in,
        thin: opts.thin,
        seed: opts.seed,
        acceptance_rate: run.result.acceptance_rate,
        kept: run.result.samples.nrows(),
        refit_log_likelihood: run.refit.log_likelihood,
        refit_iterations: run.refit.iterations,
        refit_converged: run.refit.converged,
    };
    write_json_file(path, &doc)
}

// ---------------------------------------------------------------------------
// Empirical baseline
// ---------------------------------------------------------------------------

/// Empirical posterior: a mixture fitted directly on the latent coordinates
/// of the rows flagged extreme, with the same component count as the prior.
pub fn run_empirical_stage(
    k: usize,
    pca: Option<&PcaModel64>,
    table: &FeatureTable64,
    reg: f64,
    seed: u64,
) -> Result<(GmmModel64, GmmFitInfo<Real>, usize)> {
    let flags = table.extreme().ok_or_else(|| {
        Error::validation("empirical baseline needs an `extreme` column in the data")
    })?;
    let latents = latents_for(pca, table)?;
    let picked: Vec<usize> =
        (0..table.n()).filter(|&i| flags[i]).collect();
    if picked.len() < k {
        return Err(Error::validation(format!(
            "{} flagged extreme rows cannot support {k} components",
            picked.len()
        )));
    }
    let d = latents.ncols();
    let subset = DMatrix::from_fn(picked.len(), d, |i, j| latents[(picked[i], j)]);
    let opts =
        GmmFitOptions { n_components: k, reg_floor: reg, ..GmmFitOptions::default() };
    let (model, info) = gmm::fit(&subset, opts, seed)?;
    Ok((model, info, picked.len()))
}

#[derive(Debug, Serialize, Deserialize)]
struct EmpiricalInfoDoc {
    n_rows: usize,
    k: usize,
    log_likelihood: f64,
    iterations: usize,
    converged: bool,
}

pub fn write_empirical_info(
    path: &Path,
    n_rows: usize,
    model: &GmmModel64,
    info: &GmmFitInfo<Real>,
) -> Result<()> {
    let doc = EmpiricalInfoDoc {
        n_rows,
        k: model.k(),
        log_likelihood: info.log_likelihood,
        iterations: info.iterations,
        converged: info.converged,
    };
    write_json_file(path, &doc)
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Scores, the confusion report at the working threshold, and the full
/// threshold sweep for one posterior against the prior.
#[derive(Debug, Clone)]
pub struct Classification {
    pub llrs: Vec<Real>,
    pub report: ClassificationReport,
    pub curve: Vec<SweepPoint>,
}

/// Scores every row of the table by log-likelihood ratio, classifies at the
/// working threshold, and sweeps either the supplied grid or a default one
/// spanning the observed scores.
pub fn classify_stage(
    prior: &GmmModel64,
    posterior: &GmmModel64,
    pca: Option<&PcaModel64>,
    table: &FeatureTable64,
    llr_threshold: Real,
    sigma_bar: Real,
    grid: Option<&[Real]>,
) -> Result<Classification> {
    let truth = table
        .extreme()
        .ok_or_else(|| {
            Error::validation("classification needs ground-truth `extreme` flags in the data")
        })?
        .to_vec();
    let latents = latents_for(pca, table)?;
    let llrs: Vec<Real> = classifier::llr_batch(posterior, prior, &latents)?.iter().copied().collect();
    let pred: Vec<bool> = llrs.iter().map(|&v| classifier::classify(v, llr_threshold)).collect();
    let report = classifier::confusion(&pred, &truth, llr_threshold, sigma_bar)?;
    let owned;
    let grid = match grid {
        Some(g) => g,
        None => {
            owned = classifier::default_sweep_grid(&llrs)?;
            &owned
        }
    };
    let curve = classifier::threshold_sweep(&llrs, &truth, grid)?;
    Ok(Classification { llrs, report, curve })
}

/// `llr,stress,extreme` rows pairing each score with its observed stress.
pub fn write_scatter_csv(
    path: &Path,
    llrs: &[Real],
    stresses: &DVector<Real>,
    truth: &[bool],
) -> Result<()> {
    if llrs.len() != stresses.len() || llrs.len() != truth.len() {
        return Err(Error::validation(format!(
            "scatter columns disagree: {} scores, {} stresses, {} labels",
            llrs.len(),
            stresses.len(),
            truth.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["llr", "stress", "extreme"])?;
    for i in 0..llrs.len() {
        w.write_record([
            format_scalar(llrs[i]),
            format_scalar(stresses[i]),
            if truth[i] { "1".to_string() } else { "0".to_string() },
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature-space distribution reports
// ---------------------------------------------------------------------------

/// One feature's binned density estimate.
#[derive(Debug, Clone)]
pub struct FeatureHistogram {
    pub feature: String,
    /// `n_bins + 1` ascending bin edges.
    pub edges: Vec<Real>,
    /// Per-bin density; integrates to 1 over the binned range.
    pub density: Vec<Real>,
}

/// Samples each latent density, reconstructs the draws to feature space, and
/// histograms every feature on bin edges shared across sources so the
/// resulting PDFs are directly comparable.
///
/// Sources are `(name, stream offset, density)`; the offset fixes the RNG
/// stream so a subset of sources reproduces the full set's draws.
pub fn feature_pdf_tables(
    sources: &[(&str, u64, &GmmModel64)],
    pca: &PcaModel64,
    feature_names: &[String],
    n_samples: usize,
    n_bins: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<FeatureHistogram>)>> {
    if n_samples == 0 || n_bins == 0 {
        return Err(Error::validation("need at least one sample and one bin"));
    }
    if feature_names.len() != pca.n_features() {
        return Err(Error::validation(format!(
            "{} feature names for a {}-feature latent map",
            feature_names.len(),
            pca.n_features()
        )));
    }
    let mut reconstructed = Vec::with_capacity(sources.len());
    for &(name, offset, model) in sources {
        let mut rng = stream_rng(seed, streams::REPORT + offset);
        let latents = model.sample_batch(n_samples, &mut rng);
        let features = pca.reconstruct_batch(&latents)?;
        reconstructed.push((name.to_string(), features));
    }

    let n_features = pca.n_features();
    let mut tables: Vec<(String, Vec<FeatureHistogram>)> =
        reconstructed.iter().map(|(name, _)| (name.clone(), Vec::new())).collect();
    for j in 0..n_features {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (_, features) in &reconstructed {
            for i in 0..features.nrows() {
                lo = lo.min(features[(i, j)]);
                hi = hi.max(features[(i, j)]);
            }
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite reconstructed values for feature `{}`",
                feature_names[j]
            )));
        }
        if hi <= lo {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / n_bins as f64;
        let edges: Vec<Real> = (0..=n_bins).map(|b| lo + b as f64 * width).collect();
        for (source, (_, features)) in reconstructed.iter().enumerate() {
            let mut counts = vec![0usize; n_bins];
            for i in 0..features.nrows() {
                let b = ((features[(i, j)] - lo) / width) as usize;
                counts[b.min(n_bins - 1)] += 1;
            }
            let density: Vec<Real> =
                counts.iter().map(|&c| c as f64 / (n_samples as f64 * width)).collect();
            tables[source].1.push(FeatureHistogram {
                feature: feature_names[j].clone(),
                edges: edges.clone(),
                density,
            });
        }
    }
    Ok(tables)
}

/// `feature,bin_low,bin_high,density` rows for one source's histograms.
pub fn write_feature_pdf_csv(path: &Path, histograms: &[FeatureHistogram]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "bin_low", "bin_high", "density"])?;
    for h in histograms {
        for b in 0..h.density.len() {
            w.write_record([
                h.feature.clone(),
                format_scalar(h.edges[b]),
                format_scalar(h.edges[b + 1]),
                format_scalar(h.density[b]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Generator models and dataset construction
// ---------------------------------------------------------------------------

/// The trio of models that generates synthetic data: the latent mixture, the
/// latent-to-feature map, and the stress response.
#[derive(Debug, Clone)]
pub struct GeneratorModels {
    pub prior: GmmModel64,
    pub pca: PcaModel64,
    pub stress: StressModel64,
}

pub fn save_generator_models(dir: &Path, models: &GeneratorModels) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    models.prior.save_json(dir.join("prior.json"))?;
    models.pca.save_json(dir.join("pca.json"))?;
    models.stress.save_json(dir.join("stress.json"))
}

pub fn load_generator_models(dir: &Path) -> Result<GeneratorModels> {
    Ok(GeneratorModels {
        prior: GmmModel64::load_json(dir.join("prior.json"))?,
        pca: PcaModel64::load_json(dir.join("pca.json"))?,
        stress: StressModel64::load_json(dir.join("stress.json"))?,
    })
}

/// Loads generator models from a directory when given, otherwise builds the
/// seeded synthetic world. The flag reports whether a world was built (and
/// should therefore be archived alongside the run).
pub fn resolve_generator_models(
    models_dir: Option<&Path>,
    world_seed: u64,
) -> Result<(GeneratorModels, bool)> {
    match models_dir {
        Some(dir) => Ok((load_generator_models(dir)?, false)),
        None => {
            let world = build_world::<Real>(world_seed)?;
            Ok((
                GeneratorModels { prior: world.prior, pca: world.pca, stress: world.stress },
                true,
            ))
        }
    }
}

/// Dataset-construction options for both experiment regimes.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub mode: ExperimentMode,
    pub seed: u64,
    /// Perfect mode: total rows and training rows.
    pub n_samples: usize,
    pub n_train: usize,
    /// Mixed mode: synthetic pool and per-provenance training counts.
    pub n_synthetic: usize,
    pub n_train_synthetic: usize,
    pub n_train_experimental: usize,
    pub quantile: f64,
    /// Mixed mode: observed feature CSV with a stress column.
    pub experimental: Option<PathBuf>,
}

impl SynthConfig {
    pub fn new(mode: ExperimentMode, seed: u64) -> Self {
        let perfect = PerfectConfig::default();
        let mixed = MixedConfig::default();
        SynthConfig {
            mode,
            seed,
            n_samples: perfect.n_samples,
            n_train: perfect.n_train,
            n_synthetic: mixed.n_synthetic,
            n_train_synthetic: mixed.n_train_synthetic,
            n_train_experimental: mixed.n_train_experimental,
            quantile: perfect.quantile,
            experimental: None,
        }
    }
}

/// Generates the dataset for the configured regime from the given models.
pub fn build_dataset(models: &GeneratorModels, cfg: &SynthConfig) -> Result<Dataset<Real>> {
    match cfg.mode {
        ExperimentMode::Perfect => generate_perfect(
            &models.prior,
            &models.pca,
            &models.stress,
            &PerfectConfig {
                n_samples: cfg.n_samples,
                n_train: cfg.n_train,
                quantile: cfg.quantile,
                seed: cfg.seed,
            },
        ),
        ExperimentMode::Mixed => {
            let path = cfg.experimental.as_ref().ok_or_else(|| {
                Error::validation(
                    "mixed mode needs an observed feature CSV (--experimental)",
                )
            })?;
            let observed = FeatureTable64::read_csv(path)?;
            generate_mixed(
                &models.prior,
                &models.pca,
                &models.stress,
                &MixedConfig {
                    n_synthetic: cfg.n_synthetic,
                    n_train_synthetic: cfg.n_train_synthetic,
                    n_train_experimental: cfg.n_train_experimental,
                    quantile: cfg.quantile,
                    seed: cfg.seed,
                },
                &observed,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// End-to-end experiment
// ---------------------------------------------------------------------------

/// Tail parameters archived in the run's `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailMeta {
    pub s: f64,
    pub alpha: f64,
    pub m: f64,
    pub sigma_bar: f64,
}

/// Run-directory manifest: everything the report stage needs to regenerate
/// plot-ready tables, and the key settings for the record. Deliberately free
/// of timestamps so identical runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema: String,
    pub mode: String,
    pub seed: u64,
    pub quantile: f64,
    pub sigma_bar: f64,
    pub llr_threshold: f64,
    pub methods: Vec<String>,
    pub k: usize,
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_extremes: usize,
    pub test_extremes: usize,
    pub tail: TailMeta,
    pub steps: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub pdf_samples: usize,
    pub pdf_bins: usize,
}

/// Full-experiment configuration. `seed` overrides the seeds embedded in the
/// nested option structs so one value drives the whole run.
#[derive(Debug, Clone)]
pub struct RunAllConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub synth: SynthConfig,
    /// Generator models to use instead of building the seeded world.
    pub models_dir: Option<PathBuf>,
    /// Seed of the built world when `models_dir` is absent.
    pub world_seed: u64,
    pub methods: Vec<Method>,
    pub prior: PriorOptions,
    /// Ridge penalty of the stress-surrogate fit.
    pub ridge: f64,
    pub tail_location: TailLocation,
    pub vi: ViOptions,
    /// Sampler steps; defaults to 50 × (training rows).
    pub steps: Option<usize>,
    /// Defaults to 10% of the steps.
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub llr_threshold: f64,
    pub pdf_samples: usize,
    pub pdf_bins: usize,
}

impl RunAllConfig {
    pub fn new(out_dir: impl Into<PathBuf>, mode: ExperimentMode, seed: u64) -> Self {
        RunAllConfig {
            out_dir: out_dir.into(),
            seed,
            synth: SynthConfig::new(mode, seed),
            models_dir: None,
            world_seed: seed,
            methods: Method::ALL.to_vec(),
            prior: PriorOptions::default(),
            ridge: StressFitOptions::default().ridge,
            tail_location: TailLocation::Zero,
            vi: ViOptions::default(),
            steps: None,
            burn_in: None,
            thin: 10,
            llr_threshold: classifier::DEFAULT_LLR_THRESHOLD,
            pdf_samples: 2000,
            pdf_bins: 40,
        }
    }
}

/// Everything a completed end-to-end run produced, for programmatic
/// inspection on top of the artifact directory.
#[derive(Debug, Clone)]
pub struct RunAllSummary {
    pub out_dir: PathBuf,
    pub sigma_bar: Real,
    pub prior: PriorFit,
    pub tail: FrechetTail64,
    pub vi: Option<ViResult64>,
    pub mcmc: Option<McmcRun>,
    pub empirical: Option<(GmmModel64, GmmFitInfo<Real>, usize)>,
    /// Per-method classification on the shared threshold grid.
    pub reports: Vec<(Method, Classification)>,
    /// The shared grid itself.
    pub grid: Vec<Real>,
}

impl RunAllSummary {
    pub fn classification(&self, method: Method) -> Option<&Classification> {
        self.reports.iter().find(|(m, _)| *m == method).map(|(_, c)| c)
    }
}

/// Runs the full experiment: dataset, fitted models, every requested
/// posterior, classification on a shared threshold grid, and feature-space
/// distribution tables, all under one run directory with a `meta.json`
/// manifest.
pub fn run_all(cfg: &RunAllConfig) -> Result<RunAllSummary> {
    if cfg.methods.is_empty() {
        return Err(Error::validation("no methods selected for the run"));
    }
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;

    // Data: generator models, then the dataset they imply.
    let (models, built) = stage_context(
        "synth",
        resolve_generator_models(cfg.models_dir.as_deref(), cfg.world_seed),
    )?;
    let synth_cfg = SynthConfig { seed: cfg.seed, ..cfg.synth.clone() };
    let ds = stage_context("synth", build_dataset(&models, &synth_cfg))?;
    stage_context("synth", ds.save(out.join("data")))?;
    if built {
        stage_context("synth", save_generator_models(&out.join("world"), &models))?;
    }

    // Fitted pipeline models (distinct from the generator's own).
    let prior_opts = PriorOptions { seed: cfg.seed, ..cfg.prior.clone() };
    let prior_fit = stage_context("fit-prior", fit_prior(&ds.train, &prior_opts))?;
    let models_dir = out.join("models");
    stage_context("fit-prior", write_prior_artifacts(&models_dir, &prior_fit))?;

    let stress = stage_context("stress", fit_surrogate_stress(&ds.train, cfg.ridge))?;
    stage_context("stress", stress.save_json(models_dir.join("stress.json")))?;

    let tail = stage_context(
        "tail",
        fit_tail_from_table(&ds.train, ds.sigma_bar, cfg.tail_location),
    )?;
    stage_context("tail", tail.save_json(models_dir.join("tail.json")))?;

    // Posteriors.
    let k = prior_fit.prior.k();
    let mut vi_result = None;
    let mut mcmc_run = None;
    let mut mcmc_opts = None;
    let mut empirical = None;
    for &method in &cfg.methods {
        let dir = out.join(method.name());
        std::fs::create_dir_all(&dir)?;
        match method {
            Method::Vi => {
                let result = stage_context(
                    "run-vi",
                    run_vi_stage(
                        &prior_fit.prior,
                        Some(&prior_fit.pca),
                        Some((&stress, &tail)),
                        &ds.train,
                        LikelihoodMode::Surrogate,
                        cfg.vi,
                    ),
                )?;
                result.posterior.save_json(dir.join("posterior.json"))?;
                write_elbo_trace_csv(&dir.join("elbo_trace.csv"), &result.elbo_trace)?;
                write_vi_info(&dir.join("info.json"), &result)?;
                vi_result = Some(result);
            }
            Method::Mcmc => {
                let steps = cfg.steps.unwrap_or(50 * ds.train.n());
                let opts = McmcStageOptions {
                    steps,
                    burn_in: cfg.burn_in.unwrap_or_else(|| mcmc::default_burn_in(steps)),
                    thin: cfg.thin,
                    k,
                    seed: cfg.seed,
                };
                let run = stage_context(
                    "run-mcmc",
                    run_mcmc_stage(&prior_fit.prior, &prior_fit.pca, &stress, &tail, &opts),
                )?;
                write_samples_csv(&dir.join("samples.csv"), &run.result.samples)?;
                run.posterior.save_json(dir.join("posterior.json"))?;
                write_mcmc_info(&dir.join("info.json"), &opts, &run)?;
                mcmc_opts = Some(opts);
                mcmc_run = Some(run);
            }
            Method::Empirical => {
                let (model, info, n_rows) = stage_context(
                    "run-empirical",
                    run_empirical_stage(
                        k,
                        Some(&prior_fit.pca),
                        &ds.train,
                        cfg.prior.reg,
                        cfg.seed,
                    ),
                )?;
                model.save_json(dir.join("posterior.json"))?;
                write_empirical_info(&dir.join("info.json"), n_rows, &model, &info)?;
                empirical = Some((model, info, n_rows));
            }
        }
    }

    // Classification on a grid shared across methods so sweeps line up.
    let posterior_of = |method: Method| -> &GmmModel64 {
        match method {
            Method::Vi => &vi_result.as_ref().unwrap().posterior,
            Method::Mcmc => &mcmc_run.as_ref().unwrap().posterior,
            Method::Empirical => &empirical.as_ref().unwrap().0,
        }
    };
    let test_flags = ds.test.extreme().ok_or_else(|| {
        Error::validation("classify: test data has no ground-truth `extreme` flags")
    })?;
    let test_latents = stage_context(
        "classify",
        prior_fit.pca.project_batch(ds.test.rows()),
    )?;
    let mut pooled = Vec::new();
    for &method in &cfg.methods {
        let llrs =
            classifier::llr_batch(posterior_of(method), &prior_fit.prior, &test_latents)?;
        pooled.extend(llrs.iter().copied());
    }
    let grid = stage_context("classify", classifier::default_sweep_grid(&pooled))?;
    let mut reports = Vec::new();
    for &method in &cfg.methods {
        let classification = stage_context(
            "classify",
            classify_stage(
                &prior_fit.prior,
                posterior_of(method),
                Some(&prior_fit.pca),
                &ds.test,
                cfg.llr_threshold,
                ds.sigma_bar,
                Some(&grid),
            ),
        )?;
        let dir = out.join(method.name());
        classification.report.save_json(dir.join("report.json"))?;
        classifier::write_sweep_csv(dir.join("sweep.csv"), &classification.curve)?;
        if let Some(stresses) = ds.test.stress() {
            write_scatter_csv(
                &dir.join("llr_scatter.csv"),
                &classification.llrs,
                stresses,
                test_flags,
            )?;
        }
        reports.push((method, classification));
    }

    // Feature-space distributions of the prior and every posterior.
    let mut sources: Vec<(&str, u64, &GmmModel64)> = vec![("prior", 0, &prior_fit.prior)];
    for &method in &cfg.methods {
        sources.push((method.name(), method.pdf_stream_offset(), posterior_of(method)));
    }
    let pdf_tables = stage_context(
        "report",
        feature_pdf_tables(
            &sources,
            &prior_fit.pca,
            ds.train.feature_names(),
            cfg.pdf_samples,
            cfg.pdf_bins,
            cfg.seed,
        ),
    )?;
    let pdf_dir = out.join("feature_pdfs");
    std::fs::create_dir_all(&pdf_dir)?;
    for (name, histograms) in &pdf_tables {
        write_feature_pdf_csv(&pdf_dir.join(format!("{name}.csv")), histograms)?;
    }

    // Manifest last, once every artifact is in place.
    let count_true = |flags: Option<&[bool]>| flags.map_or(0, |f| f.iter().filter(|&&b| b).count());
    let meta = RunMeta {
        schema: RUN_SCHEMA.to_string(),
        mode: cfg.synth.mode.name().to_string(),
        seed: cfg.seed,
        quantile: cfg.synth.quantile,
        sigma_bar: ds.sigma_bar,
        llr_threshold: cfg.llr_threshold,
        methods: cfg.methods.iter().map(|m| m.name().to_string()).collect(),
        k,
        latent_dim: prior_fit.prior.d(),
        n_train: ds.train.n(),
        n_test: ds.test.n(),
        train_extremes: count_true(ds.train.extreme()),
        test_extremes: count_true(ds.test.extreme()),
        tail: TailMeta {
            s: tail.s(),
            alpha: tail.alpha(),
            m: tail.m(),
            sigma_bar: tail.sigma_bar(),
        },
        steps: mcmc_opts.as_ref().map(|o| o.steps),
        burn_in: mcmc_opts.as_ref().map(|o| o.burn_in),
        thin: mcmc_opts.as_ref().map(|o| o.thin),
        pdf_samples: cfg.pdf_samples,
        pdf_bins: cfg.pdf_bins,
    };
    write_json_file(out.join("meta.json"), &meta)?;

    Ok(RunAllSummary {
        out_dir: out.clone(),
        sigma_bar: ds.sigma_bar,
        prior: prior_fit,
        tail,
        vi: vi_result,
        mcmc: mcmc_run,
        empirical,
        reports,
        grid,
    })
}
