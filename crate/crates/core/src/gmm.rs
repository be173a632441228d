use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, stream_rng, streams};
use crate::scalar::{log_sum_exp, Scalar};

const LN_2PI: f64 = 1.8378770664093453;

/// Full-covariance Gaussian mixture. Each component caches its Cholesky
/// factor and log-normalization so density evaluation is a triangular solve.
#[derive(Debug, Clone)]
pub struct GmmModel<S: Scalar> {
    weights: DVector<S>,
    means: Vec<DVector<S>>,
    covariances: Vec<DMatrix<S>>,
    chol: Vec<DMatrix<S>>,
    log_norm: Vec<S>,
}

impl<S: Scalar> PartialEq for GmmModel<S> {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
    }
}

impl<S: Scalar> GmmModel<S> {
    /// Builds a model from explicit parameters, validating shapes, weight
    /// normalization, and positive-definiteness of every covariance.
    pub fn new(
        weights: Vec<S>,
        means: Vec<DVector<S>>,
        covariances: Vec<DMatrix<S>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::validation("mixture needs at least one component"));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::validation(format!(
                "component count mismatch: {} weights, {} means, {} covariances",
                k,
                means.len(),
                covariances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::validation("mixture dimension must be at least 1"));
        }
        if means.iter().any(|m| m.len() != d)
            || covariances.iter().any(|c| c.nrows() != d || c.ncols() != d)
        {
            return Err(Error::validation("inconsistent component dimensions"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < S::zero()) {
            return Err(Error::validation("weights must be finite and nonnegative"));
        }
        if means.iter().flat_map(|m| m.iter()).any(|v| !v.is_finite())
            || covariances.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite())
        {
            return Err(Error::validation("non-finite mixture parameter"));
        }
        let total: S = weights.iter().copied().sum();
        if (total - S::one()).abs() > S::c(1e-6) {
            return Err(Error::validation(format!(
                "weights sum to {}, expected 1",
                total.f64()
            )));
        }
        let weights = DVector::from_iterator(k, weights.into_iter().map(|w| w / total));

        let mut chol = Vec::with_capacity(k);
        let mut log_norm = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for (idx, cov) in covariances.into_iter().enumerate() {
            let sym = symmetrize(&cov);
            let l = nalgebra::Cholesky::new(sym.clone())
                .ok_or_else(|| {
                    Error::numerical(format!(
                        "covariance of component {idx} is not positive definite"
                    ))
                })?
                .l();
            log_norm.push(log_normalization(&l, d));
            chol.push(l);
            covs.push(sym);
        }
        Ok(GmmModel { weights, means, covariances: covs, chol, log_norm })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &DVector<S> {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<S>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<S>] {
        &self.covariances
    }

    /// Log-density of component `k` (without its mixture weight).
    pub fn component_log_density(&self, k: usize, x: &DVector<S>) -> S {
        let diff = x - &self.means[k];
        let y = self.chol[k]
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has positive diagonal");
        self.log_norm[k] - S::c(0.5) * y.dot(&y)
    }

    /// Log-densities of all components at `x`, without mixture weights.
    pub fn component_log_densities(&self, x: &DVector<S>) -> DVector<S> {
        DVector::from_fn(self.k(), |k, _| self.component_log_density(k, x))
    }

    /// Mixture log-density: log-sum-exp of weighted component densities.
    pub fn log_density(&self, x: &DVector<S>) -> S {
        let terms: Vec<S> = (0..self.k())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_density_batch(&self, rows: &DMatrix<S>) -> Result<DVector<S>> {
        self.check_rows(rows)?;
        Ok(DVector::from_fn(rows.nrows(), |i, _| self.log_density(&rows.row(i).transpose())))
    }

    /// Standard mixture responsibilities: row i holds the posterior component
    /// probabilities of point i; each row sums to 1.
    pub fn responsibilities(&self, rows: &DMatrix<S>) -> Result<DMatrix<S>> {
        self.check_rows(rows)?;
        let n = rows.nrows();
        let k = self.k();
        let mut r = DMatrix::zeros(n, k);
        let mut row_terms = vec![S::zero(); k];
        for i in 0..n {
            let x = rows.row(i).transpose();
            for (j, term) in row_terms.iter_mut().enumerate() {
                *term = self.weights[j].ln() + self.component_log_density(j, &x);
            }
            let lse = log_sum_exp(&row_terms);
            for j in 0..k {
                r[(i, j)] = (row_terms[j] - lse).exp();
            }
        }
        Ok(r)
    }

    pub fn total_log_likelihood(&self, rows: &DMatrix<S>) -> Result<S> {
        Ok(self.log_density_batch(rows)?.iter().copied().sum())
    }

    /// Free parameter count: K-1 weights + K*d means + K*d*(d+1)/2
    /// covariance entries.
    pub fn n_params(&self) -> usize {
        let k = self.k();
        let d = self.d();
        (k - 1) + k * d + k * d * (d + 1) / 2
    }

    pub fn bic(&self, total_log_likelihood: S, n: usize) -> S {
        S::c(self.n_params() as f64 * (n as f64).ln()) - S::c(2.0) * total_log_likelihood
    }

    pub fn aic(&self, total_log_likelihood: S) -> S {
        S::c(2.0 * self.n_params() as f64) - S::c(2.0) * total_log_likelihood
    }

    /// Draws one point. Uniform and normal variates are drawn as `f64` and
    /// cast, so sample streams agree across scalar types.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<S> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.k() - 1;
        for k in 0..self.k() {
            acc += self.weights[k].f64();
            if u < acc {
                comp = k;
                break;
            }
        }
        let eps = DVector::from_fn(self.d(), |_, _| S::c(rng.sample::<f64, _>(StandardNormal)));
        &self.means[comp] + &self.chol[comp] * eps
    }

    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> DMatrix<S> {
        let mut out = DMatrix::zeros(n, self.d());
        for i in 0..n {
            out.row_mut(i).tr_copy_from(&self.sample(rng));
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_json_file(path, &GmmModelDto::from(self))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let dto: GmmModelDto = crate::read_json_file(path)?;
        dto.into_model()
    }

    fn check_rows(&self, rows: &DMatrix<S>) -> Result<()> {
        if rows.ncols() != self.d() {
            return Err(Error::validation(format!(
                "matrix has {} columns, mixture dimension is {}",
                rows.ncols(),
                self.d()
            )));
        }
        Ok(())
    }
}

fn symmetrize<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        (m[(i, j)] + m[(j, i)]) * S::c(0.5)
    })
}

fn log_normalization<S: Scalar>(l: &DMatrix<S>, d: usize) -> S {
    let log_det: S = (0..d).map(|j| l[(j, j)].ln()).sum::<S>() * S::c(2.0);
    S::c(-0.5) * (S::c(d as f64 * LN_2PI) + log_det)
}

/// Adds `reg` to the diagonal and factors; escalates the jitter tenfold a few
/// times if the factorization still fails. Returns the covariance actually
/// factored together with its lower Cholesky factor.
fn regularized_cholesky<S: Scalar>(
    cov: &DMatrix<S>,
    reg: S,
) -> Result<(DMatrix<S>, DMatrix<S>)> {
    let d = cov.nrows();
    let base = symmetrize(cov);
    let mut jitter = reg;
    for _ in 0..8 {
        let mut c = base.clone();
        for j in 0..d {
            c[(j, j)] += jitter;
        }
        if let Some(f) = nalgebra::Cholesky::new(c.clone()) {
            return Ok((c, f.l()));
        }
        jitter = if jitter > S::zero() { jitter * S::c(10.0) } else { S::c(1e-10) };
    }
    Err(Error::numerical("covariance not positive definite even after jitter"))
}

/// Options of the expectation-maximization fit.
#[derive(Debug, Clone, Copy)]
pub struct GmmFitOptions {
    pub n_components: usize,
    /// Added to every covariance diagonal after each M step.
    pub reg_floor: f64,
    /// Relative log-likelihood change below which the fit stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of independent k-means++ restarts; best final likelihood wins.
    pub n_init: usize,
}

impl Default for GmmFitOptions {
    fn default() -> Self {
        GmmFitOptions { n_components: 1, reg_floor: 1e-6, tol: 1e-8, max_iter: 500, n_init: 5 }
    }
}

/// Fit diagnostics, kept in memory only (never serialized with the model).
#[derive(Debug, Clone)]
pub struct GmmFitInfo<S: Scalar> {
    pub log_likelihood: S,
    pub ll_trace: Vec<S>,
    pub iterations: usize,
    pub converged: bool,
    pub best_init: usize,
    pub rescues: usize,
}

/// Expectation-maximization fit of a `K`-component full-covariance mixture,
/// seeded by k-means++ with pooled initial covariances.
pub fn fit<S: Scalar>(
    rows: &DMatrix<S>,
    opts: GmmFitOptions,
    seed: u64,
) -> Result<(GmmModel<S>, GmmFitInfo<S>)> {
    let n = rows.nrows();
    let d = rows.ncols();
    let k = opts.n_components;
    if k == 0 {
        return Err(Error::validation("need at least one mixture component"));
    }
    if d == 0 {
        return Err(Error::validation("need at least one feature"));
    }
    if n < k.max(2) {
        return Err(Error::validation(format!(
            "{n} rows cannot support a {k}-component mixture"
        )));
    }
    if opts.n_init == 0 {
        return Err(Error::validation("need at least one initialization"));
    }
    if !(opts.tol > 0.0) || !(opts.reg_floor >= 0.0) {
        return Err(Error::validation("tol must be positive and reg_floor nonnegative"));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite entry in data matrix"));
    }

    let pooled = pooled_covariance(rows);
    let mut seed_rng = stream_rng(seed, streams::EM);
    let mut best: Option<(GmmModel<S>, GmmFitInfo<S>)> = None;
    for init_idx in 0..opts.n_init {
        let init_seed = seed_rng.next_u64();
        let run = em_single(rows, &pooled, opts, init_seed, init_idx)?;
        let better = match &best {
            None => true,
            Some((_, b)) => run.1.log_likelihood > b.log_likelihood,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one initialization ran"))
}

fn pooled_covariance<S: Scalar>(rows: &DMatrix<S>) -> DMatrix<S> {
    let n = rows.nrows();
    let d = rows.ncols();
    let n_s = S::c(n as f64);
    let mean = DVector::<S>::from_fn(d, |j, _| rows.column(j).iter().copied().sum::<S>() / n_s);
    let centered = DMatrix::from_fn(n, d, |i, j| rows[(i, j)] - mean[j]);
    let denom = S::c((n.max(2) - 1) as f64);
    centered.transpose() * centered / denom
}

struct EmState<S: Scalar> {
    weights: Vec<S>,
    means: Vec<DVector<S>>,
    covs: Vec<DMatrix<S>>,
    chols: Vec<DMatrix<S>>,
    log_norms: Vec<S>,
}

impl<S: Scalar> EmState<S> {
    fn refactor(&mut self, reg: S) -> Result<()> {
        let d = self.means[0].len();
        self.chols.clear();
        self.log_norms.clear();
        for cov in self.covs.iter_mut() {
            let (c, l) = regularized_cholesky(cov, reg)?;
            *cov = c;
            self.log_norms.push(log_normalization(&l, d));
            self.chols.push(l);
        }
        Ok(())
    }

    /// Log density of component `k` at `x`, using `scratch` as the working
    /// vector so the EM loops stay allocation-free.
    fn component_log_density_into(&self, k: usize, x: &DVector<S>, scratch: &mut DVector<S>) -> S {
        scratch.copy_from(x);
        *scratch -= &self.means[k];
        let solved = self.chols[k].solve_lower_triangular_mut(scratch);
        debug_assert!(solved, "Cholesky factor has positive diagonal");
        self.log_norms[k] - S::c(0.5) * scratch.dot(scratch)
    }
}

fn em_single<S: Scalar>(
    rows: &DMatrix<S>,
    pooled: &DMatrix<S>,
    opts: GmmFitOptions,
    init_seed: u64,
    init_idx: usize,
) -> Result<(GmmModel<S>, GmmFitInfo<S>)> {
    let n = rows.nrows();
    let d = rows.ncols();
    let k = opts.n_components;
    let reg = S::c(opts.reg_floor);
    let mut rng = stream_rng(init_seed, 0);

    // The points as column vectors, transposed once up front; together with
    // the shared scratch vector this keeps the per-row EM loops free of heap
    // allocation, which dominates the runtime on large sample sets otherwise.
    let xs: Vec<DVector<S>> = (0..n).map(|i| rows.row(i).transpose()).collect();
    let mut scratch = DVector::<S>::zeros(d);

    // k-means++ seeding, then one hard assignment for the initial moments.
    let centers = kmeanspp_centers(&xs, k, &mut rng);
    let mut counts = vec![0usize; k];
    let mut sums = vec![DVector::<S>::zeros(d); k];
    for x in &xs {
        let mut bestk = 0;
        let mut bestd = S::infinity();
        for (j, c) in centers.iter().enumerate() {
            scratch.copy_from(x);
            scratch -= c;
            let dist = scratch.norm_squared();
            if dist < bestd {
                bestd = dist;
                bestk = j;
            }
        }
        counts[bestk] += 1;
        sums[bestk] += x;
    }
    let mut state = EmState {
        weights: (0..k)
            .map(|j| S::c((counts[j].max(1)) as f64))
            .collect(),
        means: (0..k)
            .map(|j| {
                if counts[j] > 0 {
                    &sums[j] / S::c(counts[j] as f64)
                } else {
                    centers[j].clone()
                }
            })
            .collect(),
        covs: vec![pooled.clone(); k],
        chols: Vec::new(),
        log_norms: Vec::new(),
    };
    let wsum: S = state.weights.iter().copied().sum();
    for w in state.weights.iter_mut() {
        *w /= wsum;
    }
    state.refactor(reg)?;

    let mut ll_trace: Vec<S> = Vec::new();
    let mut converged = false;
    let mut rescues = 0usize;
    let mut r = DMatrix::<S>::zeros(n, k);
    let mut point_ld = vec![S::zero(); n];
    let mut row_terms = vec![S::zero(); k];
    // Flat work buffers for the per-row forward substitution; the hot loops
    // below run on raw slices because generic matrix calls at this grain
    // dominate the runtime on large sample sets.
    let mut solve_buf = vec![S::zero(); d];
    let mut diff_buf = vec![S::zero(); d];
    let tol = S::c(opts.tol);

    for _iter in 0..opts.max_iter {
        // E step and log-likelihood under the current parameters. Each
        // component's weighted log densities land in a column of `r`, then a
        // row-wise pass normalizes them into responsibilities.
        let half = S::c(0.5);
        for j in 0..k {
            let base = state.weights[j].ln() + state.log_norms[j];
            let l = state.chols[j].as_slice(); // column-major, (a, b) at b * d + a
            let mu = state.means[j].as_slice();
            let y = &mut solve_buf[..d];
            for (i, xv) in xs.iter().enumerate() {
                let x = xv.as_slice();
                let mut quad = S::zero();
                for a in 0..d {
                    let mut t = x[a] - mu[a];
                    for (b, &yb) in y.iter().enumerate().take(a) {
                        t -= l[b * d + a] * yb;
                    }
                    let ya = t / l[a * d + a];
                    y[a] = ya;
                    quad += ya * ya;
                }
                r[(i, j)] = base - half * quad;
            }
        }
        let mut ll = S::zero();
        for i in 0..n {
            let mut hi = S::neg_infinity();
            for j in 0..k {
                if r[(i, j)] > hi {
                    hi = r[(i, j)];
                }
            }
            let mut total = S::zero();
            for (j, shifted) in row_terms.iter_mut().enumerate() {
                *shifted = (r[(i, j)] - hi).exp();
                total += *shifted;
            }
            let lse = hi + total.ln();
            point_ld[i] = lse;
            ll += lse;
            for j in 0..k {
                r[(i, j)] = row_terms[j] / total;
            }
        }
        let prev = ll_trace.last().copied();
        ll_trace.push(ll);
        if let Some(p) = prev {
            if (ll - p).abs() <= tol * S::one().max(ll.abs()) {
                converged = true;
                break;
            }
        }

        // M step.
        for j in 0..k {
            let mass: S = (0..n).map(|i| r[(i, j)]).sum();
            if mass.f64() < 1e-10 {
                // Empty component: restart it at the point the mixture
                // explains worst.
                let mut worst = 0;
                for i in 1..n {
                    if point_ld[i] < point_ld[worst] {
                        worst = i;
                    }
                }
                state.means[j] = xs[worst].clone();
                state.covs[j] = pooled.clone();
                state.weights[j] = S::c(1.0 / n as f64);
                rescues += 1;
                continue;
            }
            let mut mu = DVector::<S>::zeros(d);
            mu.gemv_tr(S::one(), rows, &r.column(j), S::zero());
            mu /= mass;
            let mut cov = DMatrix::<S>::zeros(d, d);
            {
                let mus = mu.as_slice();
                let diff = &mut diff_buf[..d];
                let cf = cov.as_mut_slice();
                for (i, xv) in xs.iter().enumerate() {
                    let x = xv.as_slice();
                    let w = r[(i, j)];
                    for a in 0..d {
                        diff[a] = x[a] - mus[a];
                    }
                    for b in 0..d {
                        let wb = w * diff[b];
                        let col = &mut cf[b * d..(b + 1) * d];
                        for a in 0..d {
                            col[a] += wb * diff[a];
                        }
                    }
                }
            }
            cov /= mass;
            state.means[j] = mu;
            state.covs[j] = symmetrize(&cov);
            state.weights[j] = mass / S::c(n as f64);
        }
        let wsum: S = state.weights.iter().copied().sum();
        for w in state.weights.iter_mut() {
            *w /= wsum;
        }
        state.refactor(reg)?;
    }

    let final_ll = match ll_trace.last() {
        Some(&ll) => ll,
        None => {
            // max_iter == 0: report the likelihood of the initial parameters.
            let mut ll = S::zero();
            for i in 0..n {
                for (j, term) in row_terms.iter_mut().enumerate() {
                    *term = state.weights[j].ln()
                        + state.component_log_density_into(j, &xs[i], &mut scratch);
                }
                ll += log_sum_exp(&row_terms);
            }
            ll
        }
    };
    let iterations = ll_trace.len();
    let model = GmmModel::new(state.weights, state.means, state.covs)?;
    Ok((
        model,
        GmmFitInfo {
            log_likelihood: final_ll,
            ll_trace,
            iterations,
            converged,
            best_init: init_idx,
            rescues,
        },
    ))
}

/// k-means++ center selection: first center uniform, the rest sampled with
/// probability proportional to squared distance from the chosen set.
fn kmeanspp_centers<S: Scalar>(
    xs: &[DVector<S>],
    k: usize,
    rng: &mut impl Rng,
) -> Vec<DVector<S>> {
    let n = xs.len();
    let mut centers: Vec<DVector<S>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(xs[first].clone());
    let mut d2 = vec![0.0f64; n];
    let mut diff = DVector::<S>::zeros(xs[first].len());
    while centers.len() < k {
        let mut total = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let mut best = f64::INFINITY;
            for c in &centers {
                diff.copy_from(x);
                diff -= c;
                best = best.min(diff.norm_squared().f64());
            }
            d2[i] = best;
            total += best;
        }
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if target < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(xs[idx].clone());
    }
    centers
}

/// One scored candidate of the component-count search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KCandidate {
    pub k: usize,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub bic: f64,
    pub aic: f64,
}

/// Fits every candidate component count and keeps the lowest-BIC model;
/// exact ties resolve to the smaller count because candidates are scanned in
/// ascending order and replacement requires a strictly lower score.
pub fn select_k<S: Scalar>(
    rows: &DMatrix<S>,
    ks: &[usize],
    base_opts: GmmFitOptions,
    seed: u64,
) -> Result<(GmmModel<S>, GmmFitInfo<S>, Vec<KCandidate>)> {
    if ks.is_empty() {
        return Err(Error::validation("empty candidate list for component count"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut candidates = Vec::with_capacity(ks.len());
    let mut best: Option<(GmmModel<S>, GmmFitInfo<S>, f64)> = None;
    for &k in &ks {
        let opts = GmmFitOptions { n_components: k, ..base_opts };
        let (model, info) = fit(rows, opts, mix(seed, k as u64))?;
        let bic = model.bic(info.log_likelihood, rows.nrows()).f64();
        let aic = model.aic(info.log_likelihood).f64();
        candidates.push(KCandidate {
            k,
            log_likelihood: info.log_likelihood.f64(),
            n_params: model.n_params(),
            bic,
            aic,
        });
        let better = match &best {
            None => true,
            Some((_, _, b)) => bic < *b,
        };
        if better {
            best = Some((model, info, bic));
        }
    }
    let (model, info, _) = best.expect("at least one candidate fitted");
    Ok((model, info, candidates))
}

#[derive(Debug, Serialize, Deserialize)]
struct GmmModelDto {
    n_components: usize,
    d: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl<S: Scalar> From<&GmmModel<S>> for GmmModelDto {
    fn from(m: &GmmModel<S>) -> Self {
        GmmModelDto {
            n_components: m.k(),
            d: m.d(),
            weights: m.weights.iter().map(|v| v.f64()).collect(),
            means: m.means.iter().map(|mu| mu.iter().map(|v| v.f64()).collect()).collect(),
            covariances: m
                .covariances
                .iter()
                .map(|c| {
                    (0..c.nrows())
                        .map(|i| (0..c.ncols()).map(|j| c[(i, j)].f64()).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl GmmModelDto {
    fn into_model<S: Scalar>(self) -> Result<GmmModel<S>> {
        if self.weights.len() != self.n_components {
            return Err(Error::validation("component count mismatch in mixture file"));
        }
        let means: Vec<DVector<S>> = self
            .means
            .iter()
            .map(|m| DVector::from_iterator(m.len(), m.iter().map(|&v| S::c(v))))
            .collect();
        let covs: Result<Vec<DMatrix<S>>> = self
            .covariances
            .iter()
            .map(|c| {
                let d = c.len();
                if c.iter().any(|row| row.len() != d) {
                    return Err(Error::validation("ragged covariance in mixture file"));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| S::c(c[i][j])))
            })
            .collect();
        if means.iter().any(|m| m.len() != self.d) {
            return Err(Error::validation("mean dimension mismatch in mixture file"));
        }
        GmmModel::new(self.weights.iter().map(|&w| S::c(w)).collect(), means, covs?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gauss1(x: f64, mu: f64, var: f64) -> f64 {
        (-0.5 * (x - mu).powi(2) / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    fn two_component_2d() -> GmmModel<f64> {
        GmmModel::new(
            vec![0.4, 0.6],
            vec![
                DVector::from_vec(vec![-4.0, 0.0]),
                DVector::from_vec(vec![4.0, 1.0]),
            ],
            vec![
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
                DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn univariate_log_density_matches_closed_form() {
        let m = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.0])],
            vec![DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        for x in [-2.0, 0.0, 1.3] {
            let want = gauss1(x, 0.0, 1.0).ln();
            assert_relative_eq!(m.log_density(&DVector::from_vec(vec![x])), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn mixture_log_density_matches_direct_sum() {
        let m = GmmModel::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.25)],
        )
        .unwrap();
        for x in [-1.0, 0.5, 2.0, 4.0] {
            let want = (0.3 * gauss1(x, 0.0, 1.0) + 0.7 * gauss1(x, 2.0, 0.25)).ln();
            assert_relative_eq!(m.log_density(&DVector::from_vec(vec![x])), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn bivariate_log_density_matches_explicit_inverse() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let m = GmmModel::new(vec![1.0], vec![DVector::from_vec(vec![1.0, -1.0])], vec![cov])
            .unwrap();
        let x = DVector::from_vec(vec![0.3, 0.4]);
        let det: f64 = 2.0 * 1.0 - 0.6 * 0.6;
        let d0 = 0.3 - 1.0;
        let d1 = 0.4 + 1.0;
        // inverse of [[2, .6], [.6, 1]] scaled by 1/det
        let quad = (d0 * (1.0 * d0 - 0.6 * d1) + d1 * (-0.6 * d0 + 2.0 * d1)) / det;
        let want = -0.5 * (2.0 * LN_2PI + det.ln() + quad);
        assert_relative_eq!(m.log_density(&x), want, epsilon = 1e-12);
    }

    #[test]
    fn responsibilities_normalized_with_symmetric_oracle() {
        let m = GmmModel::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        let rows = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, -3.0]);
        let r = m.responsibilities(&rows).unwrap();
        for i in 0..3 {
            assert_relative_eq!(r.row(i).sum(), 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(r[(0, 0)], 0.5, epsilon = 1e-12);
        let want = gauss1(1.0, -1.0, 1.0) / (gauss1(1.0, -1.0, 1.0) + gauss1(1.0, 1.0, 1.0));
        assert_relative_eq!(r[(1, 0)], want, epsilon = 1e-12);
        assert!(r[(2, 0)] > 0.99);
    }

    #[test]
    fn fit_recovers_separated_mixture() {
        let truth = two_component_2d();
        let mut rng = stream_rng(11, streams::SAMPLE);
        let rows = truth.sample_batch(2000, &mut rng);
        let (m, info) = fit(
            &rows,
            GmmFitOptions { n_components: 2, ..Default::default() },
            11,
        )
        .unwrap();
        assert!(info.converged);
        // order components by first mean coordinate to compare
        let mut idx = [0usize, 1];
        if m.means()[0][0] > m.means()[1][0] {
            idx = [1, 0];
        }
        assert_relative_eq!(m.weights()[idx[0]], 0.4, epsilon = 0.05);
        assert_relative_eq!(m.means()[idx[0]][0], -4.0, epsilon = 0.15);
        assert_relative_eq!(m.means()[idx[1]][0], 4.0, epsilon = 0.15);
        assert_relative_eq!(m.means()[idx[1]][1], 1.0, epsilon = 0.15);
        assert_relative_eq!(m.covariances()[idx[1]][(0, 1)], 0.4, epsilon = 0.2);
    }

    #[test]
    fn ll_trace_nondecreasing() {
        let truth = two_component_2d();
        let mut rng = stream_rng(3, streams::SAMPLE);
        let rows = truth.sample_batch(500, &mut rng);
        let (_, info) = fit(
            &rows,
            GmmFitOptions { n_components: 2, ..Default::default() },
            3,
        )
        .unwrap();
        assert!(info.ll_trace.len() >= 2);
        for w in info.ll_trace.windows(2) {
            let slack = 1e-7 * w[0].abs().max(1.0);
            assert!(w[1] >= w[0] - slack, "log-likelihood dropped: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let truth = two_component_2d();
        let mut rng = stream_rng(5, streams::SAMPLE);
        let rows = truth.sample_batch(300, &mut rng);
        let opts = GmmFitOptions { n_components: 2, ..Default::default() };
        let (a, _) = fit(&rows, opts, 42).unwrap();
        let (b, _) = fit(&rows, opts, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_and_information_criteria() {
        let m1 = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.0])],
            vec![DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        assert_eq!(m1.n_params(), 2);
        let mut rng = stream_rng(0, 0);
        let rows = DMatrix::from_fn(50, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (m4, _) = fit(
            &rows,
            GmmFitOptions { n_components: 4, max_iter: 5, n_init: 1, ..Default::default() },
            1,
        )
        .unwrap();
        assert_eq!(m4.n_params(), 3 + 12 + 24);

        let ll = -123.4;
        let n = 100;
        assert_relative_eq!(m1.bic(ll, n), 2.0 * (100.0f64).ln() + 246.8, epsilon = 1e-10);
        assert_relative_eq!(m1.aic(ll), 4.0 + 246.8, epsilon = 1e-10);
    }

    #[test]
    fn select_k_finds_three_clusters() {
        let truth = GmmModel::new(
            vec![0.3, 0.4, 0.3],
            vec![
                DVector::from_vec(vec![-8.0]),
                DVector::from_vec(vec![0.0]),
                DVector::from_vec(vec![8.0]),
            ],
            vec![DMatrix::from_element(1, 1, 0.25); 3],
        )
        .unwrap();
        let mut rng = stream_rng(21, streams::SAMPLE);
        let rows = truth.sample_batch(600, &mut rng);
        let ks = [1, 2, 3, 4, 5];
        let (m, _, cands) = select_k(&rows, &ks, GmmFitOptions::default(), 21).unwrap();
        assert_eq!(m.k(), 3);
        let best = cands.iter().min_by(|a, b| a.bic.partial_cmp(&b.bic).unwrap()).unwrap();
        assert_eq!(best.k, 3);
        assert_eq!(cands.len(), 5);
    }

    #[test]
    fn sampling_matches_moments() {
        let m = two_component_2d();
        let mut rng = stream_rng(9, streams::SAMPLE);
        let x = m.sample_batch(20000, &mut rng);
        // mixture mean = sum_k pi_k mu_k
        let want_mean = [0.4 * -4.0 + 0.6 * 4.0, 0.4 * 0.0 + 0.6 * 1.0];
        for j in 0..2 {
            assert_relative_eq!(x.column(j).mean(), want_mean[j], epsilon = 0.08);
        }
        // mixture covariance = sum_k pi_k (cov_k + mu_k mu_k^T) - m m^T
        let mut want_cov = DMatrix::zeros(2, 2);
        for (k, w) in [0.4, 0.6].iter().enumerate() {
            let mu = &m.means()[k];
            want_cov += (&m.covariances()[k] + mu * mu.transpose()) * *w;
        }
        let mm = DVector::from_vec(want_mean.to_vec());
        want_cov -= &mm * mm.transpose();
        let mean = DVector::from_vec(vec![x.column(0).mean(), x.column(1).mean()]);
        let centered = DMatrix::from_fn(x.nrows(), 2, |i, j| x[(i, j)] - mean[j]);
        let emp = centered.transpose() * &centered / (x.nrows() - 1) as f64;
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(emp[(i, j)], want_cov[(i, j)], epsilon = 0.3);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = two_component_2d();
        let a = m.sample_batch(50, &mut stream_rng(4, streams::SAMPLE));
        let b = m.sample_batch(50, &mut stream_rng(4, streams::SAMPLE));
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let m = two_component_2d();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmm.json");
        m.save_json(&path).unwrap();
        let back = GmmModel::<f64>::load_json(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn invalid_construction_rejected() {
        let mean = vec![DVector::from_vec(vec![0.0])];
        let cov = vec![DMatrix::from_element(1, 1, 1.0)];
        let err = GmmModel::new(vec![0.5], mean.clone(), cov.clone()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));

        let bad_cov = vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])];
        let err = GmmModel::new(vec![1.0], vec![DVector::from_vec(vec![0.0, 0.0])], bad_cov)
            .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));

        let err = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.0, 0.0])],
            vec![DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn overspecified_fit_stays_valid() {
        let truth = two_component_2d();
        let mut rng = stream_rng(13, streams::SAMPLE);
        let rows = truth.sample_batch(60, &mut rng);
        let (m, info) = fit(
            &rows,
            GmmFitOptions { n_components: 4, n_init: 2, ..Default::default() },
            13,
        )
        .unwrap();
        assert!(info.log_likelihood.is_finite());
        assert!(m.weights().iter().all(|w| *w > 0.0));
        assert_relative_eq!(m.weights().sum(), 1.0, epsilon = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn fit_properties_hold_on_random_data(
            seed in 0u64..1000,
            n in 8usize..30,
            d in 1usize..3,
            k in 1usize..3,
        ) {
            let mut rng = stream_rng(seed, 77);
            let rows = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let opts = GmmFitOptions { n_components: k, max_iter: 50, n_init: 2, ..Default::default() };
            let (m, info) = fit(&rows, opts, seed).unwrap();
            prop_assert!(info.log_likelihood.is_finite());
            prop_assert!((m.weights().sum() - 1.0).abs() < 1e-9);
            let r = m.responsibilities(&rows).unwrap();
            for i in 0..n {
                prop_assert!((r.row(i).sum() - 1.0).abs() < 1e-9);
            }
            let ld = m.log_density_batch(&rows).unwrap();
            prop_assert!(ld.iter().all(|v| v.is_finite()));
        }
    }
}
