//! Plot-ready table regeneration from a completed run directory.
//!
//! Everything is recomputed from the stored models and data, so running the
//! report twice over the same run directory produces identical bytes. All
//! inputs are checked up front: a missing artifact aborts before any output
//! file is created.

use std::path::{Path, PathBuf};

use exvi_core::classifier;
use exvi_core::data::format_scalar;
use exvi_core::gmm::GmmModel;
use exvi_core::{
    read_json_file, Error, FeatureTable64, GmmModel64, PcaModel64, Real, Result,
};
use nalgebra::{DMatrix, DVector};

use crate::stages::{
    feature_pdf_tables, write_feature_pdf_csv, write_scatter_csv, FeatureHistogram, Method,
    RunMeta, RUN_SCHEMA,
};

/// Report options over a completed run directory.
#[derive(Debug, Clone)]
pub struct ReportConfig {
    pub run_dir: PathBuf,
    /// Where the tables go; defaults to `<run_dir>/report`.
    pub out_dir: Option<PathBuf>,
    /// 1-based latent coordinate pair of the density grid.
    pub pair: (usize, usize),
    /// Lattice points per axis.
    pub grid: usize,
    /// Half-width of the lattice in prior standard deviations.
    pub span: f64,
}

impl ReportConfig {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        ReportConfig { run_dir: run_dir.into(), out_dir: None, pair: (1, 2), grid: 100, span: 4.0 }
    }
}

/// What the report stage wrote.
#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Rows in the density grid table.
    pub grid_points: usize,
}

/// Mixture marginal over two coordinates: the same weights with means and
/// covariances restricted to the chosen pair.
pub fn marginal_pair(model: &GmmModel64, a: usize, b: usize) -> Result<GmmModel64> {
    let d = model.d();
    if a >= d || b >= d || a == b {
        return Err(Error::validation(format!(
            "coordinate pair ({a}, {b}) out of range for a {d}-dimensional mixture"
        )));
    }
    let weights: Vec<Real> = model.weights().iter().copied().collect();
    let means: Vec<DVector<Real>> = model
        .means()
        .iter()
        .map(|m| DVector::from_vec(vec![m[a], m[b]]))
        .collect();
    let covariances: Vec<DMatrix<Real>> = model
        .covariances()
        .iter()
        .map(|c| {
            DMatrix::from_row_slice(2, 2, &[c[(a, a)], c[(a, b)], c[(b, a)], c[(b, b)]])
        })
        .collect();
    GmmModel::new(weights, means, covariances)
}

/// Mixture mean and standard deviation of one coordinate of a 2-D marginal.
fn coordinate_moments(model: &GmmModel64, coord: usize) -> (f64, f64) {
    let mut mean = 0.0;
    let mut second = 0.0;
    for k in 0..model.k() {
        let w = model.weights()[k];
        let mu = model.means()[k][coord];
        mean += w * mu;
        second += w * (model.covariances()[k][(coord, coord)] + mu * mu);
    }
    (mean, (second - mean * mean).max(0.0).sqrt())
}

struct LoadedRun {
    meta: RunMeta,
    pca: PcaModel64,
    prior: GmmModel64,
    posteriors: Vec<(Method, GmmModel64)>,
    test: FeatureTable64,
}

/// Verifies every required artifact exists before reading anything, so a
/// partial or empty run directory fails with one actionable message.
fn require(missing: &mut Vec<String>, path: PathBuf) -> PathBuf {
    if !path.is_file() {
        missing.push(path.display().to_string());
    }
    path
}

fn incomplete(run_dir: &Path, missing: &[String]) -> Error {
    Error::validation(format!(
        "run directory {} is incomplete; missing: {}. Run `run-all` first.",
        run_dir.display(),
        missing.join(", ")
    ))
}

fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let mut missing: Vec<String> = Vec::new();
    let meta_path = require(&mut missing, run_dir.join("meta.json"));
    let pca_path = require(&mut missing, run_dir.join("models").join("pca.json"));
    let prior_path = require(&mut missing, run_dir.join("models").join("prior.json"));
    let test_path = require(&mut missing, run_dir.join("data").join("test.csv"));
    if !missing.is_empty() {
        return Err(incomplete(run_dir, &missing));
    }
    let meta: RunMeta = read_json_file(&meta_path)?;
    if meta.schema != RUN_SCHEMA {
        return Err(Error::validation(format!(
            "unsupported run schema `{}` (expected `{RUN_SCHEMA}`)",
            meta.schema
        )));
    }
    let mut methods = Vec::new();
    let mut posterior_paths = Vec::new();
    for name in &meta.methods {
        let method: Method = name.parse()?;
        let p = require(&mut missing, run_dir.join(method.name()).join("posterior.json"));
        methods.push(method);
        posterior_paths.push(p);
    }
    if !missing.is_empty() {
        return Err(incomplete(run_dir, &missing));
    }
    let mut posteriors = Vec::new();
    for (method, path) in methods.into_iter().zip(posterior_paths) {
        posteriors.push((method, GmmModel64::load_json(path)?));
    }
    Ok(LoadedRun {
        meta,
        pca: PcaModel64::load_json(pca_path)?,
        prior: GmmModel64::load_json(prior_path)?,
        posteriors,
        test: FeatureTable64::read_csv(test_path)?,
    })
}

/// Header and rows of the 2-D marginal density grid over one latent pair.
struct DensityGrid {
    header: Vec<String>,
    /// Each row: the two coordinates, then one density per column source.
    rows: Vec<Vec<Real>>,
}

fn density_grid(
    run: &LoadedRun,
    pair: (usize, usize),
    grid: usize,
    span: f64,
) -> Result<DensityGrid> {
    if grid < 2 {
        return Err(Error::validation("density grid needs at least 2 points per axis"));
    }
    if !(span > 0.0) {
        return Err(Error::validation("density grid span must be positive"));
    }
    let d = run.prior.d();
    let (a, b) = (pair.0 - 1, pair.1 - 1);
    if pair.0 == 0 || pair.1 == 0 || a >= d || b >= d || a == b {
        return Err(Error::validation(format!(
            "coordinate pair {},{} out of range for {d} latent components",
            pair.0, pair.1
        )));
    }
    let prior2 = marginal_pair(&run.prior, a, b)?;
    let mut marginals = vec![("prior".to_string(), prior2)];
    for (method, posterior) in &run.posteriors {
        marginals.push((method.name().to_string(), marginal_pair(posterior, a, b)?));
    }
    // Lattice bounds from the prior marginal: mean ± span·σ per coordinate.
    let (mean_a, sd_a) = coordinate_moments(&marginals[0].1, 0);
    let (mean_b, sd_b) = coordinate_moments(&marginals[0].1, 1);
    let (lo_a, hi_a) = (mean_a - span * sd_a, mean_a + span * sd_a);
    let (lo_b, hi_b) = (mean_b - span * sd_b, mean_b + span * sd_b);
    let step_a = (hi_a - lo_a) / (grid - 1) as f64;
    let step_b = (hi_b - lo_b) / (grid - 1) as f64;

    let mut header = vec![format!("z{}", pair.0), format!("z{}", pair.1)];
    header.extend(marginals.iter().map(|(name, _)| name.clone()));
    let mut rows = Vec::with_capacity(grid * grid);
    let mut point = DVector::zeros(2);
    for i in 0..grid {
        point[0] = lo_a + i as f64 * step_a;
        for j in 0..grid {
            point[1] = lo_b + j as f64 * step_b;
            let mut row = Vec::with_capacity(2 + marginals.len());
            row.push(point[0]);
            row.push(point[1]);
            for (_, model) in &marginals {
                row.push(model.log_density(&point).exp());
            }
            rows.push(row);
        }
    }
    Ok(DensityGrid { header, rows })
}

fn write_density_grid_csv(path: &Path, grid: &DensityGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&grid.header)?;
    for row in &grid.rows {
        let record: Vec<String> = row.iter().map(|&v| format_scalar(v)).collect();
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Regenerates every plot-ready table from a completed run directory:
/// the density grid over a latent pair, per-method threshold sweeps and
/// LLR-vs-stress scatters on the shared grid, and the feature-space PDFs.
pub fn run_report(cfg: &ReportConfig) -> Result<ReportSummary> {
    let run = load_run(&cfg.run_dir)?;

    // Compute everything before creating any output file.
    let grid_table = density_grid(&run, cfg.pair, cfg.grid, cfg.span)?;

    let test_latents = run.pca.project_batch(run.test.rows())?;
    let truth = run.test.extreme().ok_or_else(|| {
        Error::validation("test data has no ground-truth `extreme` flags")
    })?;
    let mut scored: Vec<(Method, Vec<Real>)> = Vec::new();
    let mut pooled = Vec::new();
    for (method, posterior) in &run.posteriors {
        let llrs: Vec<Real> =
            classifier::llr_batch(posterior, &run.prior, &test_latents)?.iter().copied().collect();
        pooled.extend_from_slice(&llrs);
        scored.push((*method, llrs));
    }
    let shared_grid = classifier::default_sweep_grid(&pooled)?;
    let mut curves = Vec::new();
    for (method, llrs) in &scored {
        curves.push((*method, classifier::threshold_sweep(llrs, truth, &shared_grid)?));
    }

    let sources: Vec<(&str, u64, &GmmModel64)> = std::iter::once(("prior", 0, &run.prior))
        .chain(
            run.posteriors
                .iter()
                .map(|(m, model)| (m.name(), m.pdf_stream_offset(), model)),
        )
        .collect();
    let pdfs: Vec<(String, Vec<FeatureHistogram>)> = feature_pdf_tables(
        &sources,
        &run.pca,
        run.test.feature_names(),
        run.meta.pdf_samples,
        run.meta.pdf_bins,
        run.meta.seed,
    )?;

    // Emit.
    let out_dir =
        cfg.out_dir.clone().unwrap_or_else(|| cfg.run_dir.join("report"));
    std::fs::create_dir_all(&out_dir)?;
    let mut files = Vec::new();
    let grid_path = out_dir.join("density_grid.csv");
    write_density_grid_csv(&grid_path, &grid_table)?;
    files.push(grid_path);
    for ((method, curve), (_, llrs)) in curves.iter().zip(&scored) {
        let sweep_path = out_dir.join(format!("sweep_{}.csv", method.name()));
        classifier::write_sweep_csv(&sweep_path, curve)?;
        files.push(sweep_path);
        if let Some(stresses) = run.test.stress() {
            let scatter_path = out_dir.join(format!("llr_scatter_{}.csv", method.name()));
            write_scatter_csv(&scatter_path, llrs, stresses, truth)?;
            files.push(scatter_path);
        }
    }
    for (name, histograms) in &pdfs {
        let pdf_path = out_dir.join(format!("feature_pdfs_{name}.csv"));
        write_feature_pdf_csv(&pdf_path, histograms)?;
        files.push(pdf_path);
    }
    let grid_points = grid_table.rows.len();
    Ok(ReportSummary { out_dir, files, grid_points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_mixture() -> GmmModel64 {
        GmmModel::new(
            vec![0.6, 0.4],
            vec![
                DVector::from_vec(vec![0.0, 1.0, -1.0]),
                DVector::from_vec(vec![2.0, -1.0, 0.5]),
            ],
            vec![
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[1.0, 0.3, 0.0, 0.3, 2.0, 0.1, 0.0, 0.1, 1.5],
                ),
                DMatrix::identity(3, 3),
            ],
        )
        .unwrap()
    }

    #[test]
    fn marginal_matches_numerical_integration() {
        // Integrate the 3-D density over the dropped coordinate and compare
        // with the closed-form 2-D marginal on a few probe points.
        let model = toy_mixture();
        let marginal = marginal_pair(&model, 0, 2).unwrap();
        for &(x, z) in &[(0.0, 0.0), (1.5, -0.5), (2.0, 0.5), (-1.0, 1.0)] {
            let n_steps = 4001;
            let (lo, hi) = (-30.0, 30.0);
            let h = (hi - lo) / (n_steps - 1) as f64;
            let mut integral = 0.0;
            for s in 0..n_steps {
                let y = lo + s as f64 * h;
                let p = model.log_density(&DVector::from_vec(vec![x, y, z])).exp();
                let weight = if s == 0 || s == n_steps - 1 { 0.5 } else { 1.0 };
                integral += weight * p * h;
            }
            let direct = marginal.log_density(&DVector::from_vec(vec![x, z])).exp();
            assert_relative_eq!(integral, direct, max_relative = 1e-6);
        }
    }

    #[test]
    fn coordinate_moments_match_sampling_free_algebra() {
        let model = toy_mixture();
        let marginal = marginal_pair(&model, 0, 1).unwrap();
        let (mean, sd) = coordinate_moments(&marginal, 0);
        // E[x] = 0.6·0 + 0.4·2, Var[x] = Σ w(σ² + μ²) − mean².
        assert_relative_eq!(mean, 0.8, epsilon = 1e-12);
        let second = 0.6 * (1.0 + 0.0) + 0.4 * (1.0 + 4.0);
        assert_relative_eq!(sd, (second - 0.64_f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn marginal_rejects_bad_pairs() {
        let model = toy_mixture();
        assert!(marginal_pair(&model, 0, 3).is_err());
        assert!(marginal_pair(&model, 1, 1).is_err());
    }
}
