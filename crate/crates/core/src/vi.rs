//! Extreme-event-focused variational refinement of a Gaussian mixture prior.
//!
//! The update alternates a responsibility computation — prior component
//! densities tilted by the per-sample exceedance likelihood, normalized
//! against the current posterior mixture — with a weighted M step in which
//! only samples carrying extreme-event mass contribute. Because the
//! exceedance likelihood does not depend on the component index, the
//! normalized responsibilities reduce to the prior's own mixture
//! responsibilities; the refinement is then the fixed point of a weighted
//! EM refit of the prior family, reached in a couple of iterations with a
//! nondecreasing evidence bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::likelihood::LikelihoodProvider;
use crate::scalar::{log_sum_exp, Scalar};

/// Output of one full variational run.
#[derive(Debug, Clone)]
pub struct ViResult<S: Scalar> {
    pub posterior: GmmModel<S>,
    pub elbo_trace: Vec<S>,
    pub iterations: usize,
    pub converged: bool,
    /// Total extreme-event mass N_E = sum of per-sample weights.
    pub effective_n: S,
    /// Number of (iteration, component) events where a component's mass
    /// vanished and its shape was held at the prior.
    pub frozen_events: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ViOptions {
    pub max_iter: usize,
    /// Relative evidence-bound change below which the loop stops.
    pub tol: f64,
    /// Added to every refitted covariance diagonal.
    pub reg_floor: f64,
}

impl Default for ViOptions {
    fn default() -> Self {
        ViOptions { max_iter: 200, tol: 1e-7, reg_floor: 1e-6 }
    }
}

fn check_shapes<S: Scalar>(
    prior: &GmmModel<S>,
    posterior: &GmmModel<S>,
    latents: &DMatrix<S>,
    lik: &DVector<S>,
) -> Result<()> {
    if prior.k() != posterior.k() {
        return Err(Error::validation(format!(
            "prior has {} components, posterior {}",
            prior.k(),
            posterior.k()
        )));
    }
    if prior.d() != posterior.d() || prior.d() != latents.ncols() {
        return Err(Error::validation(format!(
            "dimension mismatch: prior d={}, posterior d={}, data d={}",
            prior.d(),
            posterior.d(),
            latents.ncols()
        )));
    }
    if lik.len() != latents.nrows() {
        return Err(Error::validation(format!(
            "{} likelihood values for {} samples",
            lik.len(),
            latents.nrows()
        )));
    }
    if lik
        .iter()
        .any(|&p| !(p.is_finite() && p > S::zero() && p <= S::one() + S::c(1e-9)))
    {
        return Err(Error::validation(
            "likelihoods must be probabilities in (0, 1]",
        ));
    }
    Ok(())
}

/// Assignment probabilities of the extreme-event update: row i, component k
/// carries the prior weight and component density at z_i, tilted by the
/// exceedance likelihood and normalized against the posterior mixture
/// density, then row-normalized in log space. The likelihood and posterior
/// terms are component-independent, so each row equals the prior's standard
/// mixture responsibilities.
pub fn responsibilities<S: Scalar>(
    prior: &GmmModel<S>,
    posterior: &GmmModel<S>,
    latents: &DMatrix<S>,
    lik: &DVector<S>,
) -> Result<DMatrix<S>> {
    check_shapes(prior, posterior, latents, lik)?;
    let n = latents.nrows();
    let k = prior.k();
    let mut r = DMatrix::zeros(n, k);
    let mut terms = vec![S::zero(); k];
    for i in 0..n {
        let z = latents.row(i).transpose();
        let posterior_mix = posterior.log_density(&z);
        let ln_lik = lik[i].ln();
        for (j, term) in terms.iter_mut().enumerate() {
            *term = prior.weights()[j].ln() + prior.component_log_density(j, &z) + ln_lik
                - posterior_mix;
        }
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite responsibility normalization at sample {i}"
            )));
        }
        for j in 0..k {
            let v = (terms[j] - lse).exp();
            if !v.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite responsibility at sample {i}, component {j}"
                )));
            }
            r[(i, j)] = v;
        }
    }
    Ok(r)
}

/// Refitted mixture parameters from one weighted M step.
#[derive(Debug, Clone)]
pub struct MStep<S: Scalar> {
    pub weights: Vec<S>,
    pub means: Vec<DVector<S>>,
    pub covariances: Vec<DMatrix<S>>,
    /// Components whose weighted mass vanished; their mean and covariance
    /// are the prior's.
    pub frozen: Vec<bool>,
}

/// Weighted M step: component masses, means, and covariances from
/// responsibility-weighted sample moments, weights normalized by the
/// effective sample count N_E. A component with weighted mass below 1e-12
/// keeps the prior's shape for this iteration.
pub fn m_step<S: Scalar>(
    latents: &DMatrix<S>,
    r: &DMatrix<S>,
    sample_weights: &DVector<S>,
    prior: &GmmModel<S>,
    reg_floor: f64,
) -> Result<MStep<S>> {
    let n = latents.nrows();
    let d = latents.ncols();
    let k = prior.k();
    if r.nrows() != n || r.ncols() != k {
        return Err(Error::validation(format!(
            "responsibility matrix is {}x{}, expected {}x{}",
            r.nrows(),
            r.ncols(),
            n,
            k
        )));
    }
    if sample_weights.len() != n {
        return Err(Error::validation(format!(
            "{} sample weights for {n} samples",
            sample_weights.len()
        )));
    }
    if sample_weights.iter().any(|&w| !w.is_finite() || w < S::zero()) {
        return Err(Error::validation("sample weights must be finite and nonnegative"));
    }
    for i in 0..n {
        let s: S = r.row(i).iter().copied().sum();
        if (s - S::one()).abs() > S::c(1e-8) {
            return Err(Error::validation(format!(
                "responsibility row {i} sums to {}, expected 1",
                s.f64()
            )));
        }
    }
    let n_e: S = sample_weights.iter().copied().sum();
    if !(n_e > S::zero()) {
        return Err(Error::validation("total sample weight must be positive"));
    }

    let reg = S::c(reg_floor);
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    let mut frozen = vec![false; k];
    for j in 0..k {
        let mass: S = (0..n).map(|i| sample_weights[i] * r[(i, j)]).sum();
        if mass.f64() < 1e-12 {
            frozen[j] = true;
            weights.push(mass / n_e);
            means.push(prior.means()[j].clone());
            covariances.push(prior.covariances()[j].clone());
            continue;
        }
        let mut mu = DVector::<S>::zeros(d);
        for i in 0..n {
            let wr = sample_weights[i] * r[(i, j)];
            if wr > S::zero() {
                mu.axpy(wr, &latents.row(i).transpose(), S::one());
            }
        }
        mu /= mass;
        let mut cov = DMatrix::<S>::zeros(d, d);
        for i in 0..n {
            let wr = sample_weights[i] * r[(i, j)];
            if wr > S::zero() {
                let diff = latents.row(i).transpose() - &mu;
                cov.ger(wr, &diff, &diff, S::one());
            }
        }
        cov /= mass;
        // symmetrize the rank-update accumulation and apply the floor
        for a in 0..d {
            for b in (a + 1)..d {
                let avg = (cov[(a, b)] + cov[(b, a)]) * S::c(0.5);
                cov[(a, b)] = avg;
                cov[(b, a)] = avg;
            }
            cov[(a, a)] += reg;
        }
        weights.push(mass / n_e);
        means.push(mu);
        covariances.push(cov);
    }
    // defensive renormalization; exact already unless a component froze
    let total: S = weights.iter().copied().sum();
    if total > S::zero() {
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
    Ok(MStep { weights, means, covariances, frozen })
}

/// Evidence bound of the current posterior against the tilted prior,
/// averaged over the weighted samples:
/// sum_i (w_i/N_E) sum_k r_ik [ln lik_i + ln(pi_k N_k^prior(z_i))
/// − ln Q^posterior(z_i) − ln r_ik].
pub fn elbo<S: Scalar>(
    prior: &GmmModel<S>,
    posterior: &GmmModel<S>,
    latents: &DMatrix<S>,
    lik: &DVector<S>,
    sample_weights: &DVector<S>,
) -> Result<S> {
    check_shapes(prior, posterior, latents, lik)?;
    let n = latents.nrows();
    if sample_weights.len() != n {
        return Err(Error::validation(format!(
            "{} sample weights for {n} samples",
            sample_weights.len()
        )));
    }
    let n_e: S = sample_weights.iter().copied().sum();
    if !(n_e > S::zero()) {
        return Err(Error::validation("total sample weight must be positive"));
    }
    let r = responsibilities(prior, posterior, latents, lik)?;
    let k = prior.k();
    let mut acc = S::zero();
    for i in 0..n {
        let w = sample_weights[i];
        if w <= S::zero() {
            continue;
        }
        let z = latents.row(i).transpose();
        let posterior_mix = posterior.log_density(&z);
        let mut point = lik[i].ln() - posterior_mix;
        for j in 0..k {
            let rij = r[(i, j)];
            if rij > S::zero() {
                point += rij
                    * (prior.weights()[j].ln() + prior.component_log_density(j, &z) - rij.ln());
            }
        }
        acc += w / n_e * point;
    }
    Ok(acc)
}

/// Algorithm outer loop: starting from the prior, alternate responsibilities
/// and the weighted M step until the evidence bound stabilizes.
pub fn run_vi<S: Scalar>(
    prior: &GmmModel<S>,
    latents: &DMatrix<S>,
    provider: &LikelihoodProvider<'_, S>,
    opts: ViOptions,
) -> Result<ViResult<S>> {
    if !(opts.tol > 0.0) || !(opts.reg_floor >= 0.0) {
        return Err(Error::validation("tol must be positive and reg_floor nonnegative"));
    }
    let (lik, weights) = provider.per_sample(latents)?;
    let floor_cut = S::c(crate::evt::PROB_FLOOR * (1.0 + 1e-9));
    let n_e: S = weights.iter().copied().sum();
    if lik.iter().all(|&p| p <= floor_cut) || !(n_e > S::zero()) {
        return Err(Error::validation(
            "no sample carries extreme-event mass: every likelihood sits at the floor; \
             review the stress threshold",
        ));
    }

    let mut posterior = prior.clone();
    let mut trace: Vec<S> = Vec::new();
    let mut converged = false;
    let mut frozen_events = 0usize;
    let tol = S::c(opts.tol);
    for _ in 0..opts.max_iter {
        let r = responsibilities(prior, &posterior, latents, &lik)?;
        let m = m_step(latents, &r, &weights, prior, opts.reg_floor)?;
        frozen_events += m.frozen.iter().filter(|&&f| f).count();
        posterior = GmmModel::new(m.weights, m.means, m.covariances)?;
        let bound = elbo(prior, &posterior, latents, &lik, &weights)?;
        trace.push(bound);
        let t = trace.len();
        if t >= 2 {
            let delta = (trace[t - 1] - trace[t - 2]).abs();
            if delta < tol * S::one().max(trace[t - 1].abs()) {
                converged = true;
                break;
            }
        }
    }
    let iterations = trace.len();
    Ok(ViResult {
        posterior,
        elbo_trace: trace,
        iterations,
        converged,
        effective_n: n_e,
        frozen_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, streams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn prior_2d() -> GmmModel<f64> {
        GmmModel::new(
            vec![0.35, 0.65],
            vec![
                DVector::from_vec(vec![-2.0, 0.5]),
                DVector::from_vec(vec![3.0, -1.0]),
            ],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
                DMatrix::from_row_slice(2, 2, &[1.5, -0.3, -0.3, 1.2]),
            ],
        )
        .unwrap()
    }

    fn split_prior_1d(sep: f64) -> GmmModel<f64> {
        GmmModel::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-sep]), DVector::from_vec(vec![sep])],
            vec![DMatrix::from_element(1, 1, 1.0); 2],
        )
        .unwrap()
    }

    fn random_lik(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = stream_rng(seed, 31);
        DVector::from_fn(n, |_, _| rng.random::<f64>() * 0.9 + 0.05)
    }

    #[test]
    fn single_component_gives_unit_column() {
        let prior = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.0, 0.0])],
            vec![DMatrix::identity(2, 2)],
        )
        .unwrap();
        let mut rng = stream_rng(1, 31);
        let z = DMatrix::from_fn(15, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lik = random_lik(15, 2);
        let r = responsibilities(&prior, &prior, &z, &lik).unwrap();
        for i in 0..15 {
            assert_relative_eq!(r[(i, 0)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn reduces_to_prior_mixture_responsibilities() {
        let prior = prior_2d();
        let mut rng = stream_rng(3, 31);
        let z = DMatrix::from_fn(20, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let lik = DVector::from_element(20, 1.0);
        let r = responsibilities(&prior, &prior, &z, &lik).unwrap();
        let em = prior.responsibilities(&z).unwrap();
        for i in 0..20 {
            for j in 0..2 {
                assert_relative_eq!(r[(i, j)], em[(i, j)], epsilon = 1e-10);
            }
        }
        // the posterior and likelihood terms are row constants: any posterior
        // and any likelihood yield the same normalized assignments
        let other = split_prior_1d(4.0);
        let other2 = GmmModel::new(
            vec![0.9, 0.1],
            vec![
                DVector::from_vec(vec![10.0, 10.0]),
                DVector::from_vec(vec![-10.0, -10.0]),
            ],
            vec![DMatrix::identity(2, 2).scale(3.0); 2],
        )
        .unwrap();
        let _ = other;
        let lik2 = random_lik(20, 4);
        let r2 = responsibilities(&prior, &other2, &z, &lik2).unwrap();
        for i in 0..20 {
            for j in 0..2 {
                assert_relative_eq!(r2[(i, j)], em[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn rows_normalized_and_nonnegative() {
        let prior = prior_2d();
        let mut rng = stream_rng(5, 31);
        let z = DMatrix::from_fn(30, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
        let lik = random_lik(30, 6);
        let r = responsibilities(&prior, &prior, &z, &lik).unwrap();
        for i in 0..30 {
            let sum: f64 = r.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(r.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn likelihood_scaling_leaves_assignments_and_shifts_bound() {
        let prior = prior_2d();
        let mut rng = stream_rng(7, 31);
        let z = DMatrix::from_fn(40, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let lik = DVector::from_fn(40, |i, _| 1e-4 * (1.0 + (i as f64) / 50.0));
        let w = DVector::from_fn(40, |i, _| 0.5 + (i % 3) as f64 * 0.25);
        let c = 37.0;
        let scaled = &lik * c;
        let r1 = responsibilities(&prior, &prior, &z, &lik).unwrap();
        let r2 = responsibilities(&prior, &prior, &z, &scaled).unwrap();
        for i in 0..40 {
            for j in 0..2 {
                assert_relative_eq!(r1[(i, j)], r2[(i, j)], epsilon = 1e-12);
            }
        }
        let e1 = elbo(&prior, &prior, &z, &lik, &w).unwrap();
        let e2 = elbo(&prior, &prior, &z, &scaled, &w).unwrap();
        assert_relative_eq!(e2 - e1, c.ln(), epsilon = 1e-10);
    }

    #[test]
    fn m_step_closed_forms() {
        // K=1 uniform weights: weighted mean and covariance
        let prior = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.0])],
            vec![DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        let z = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 6.0]);
        let r = DMatrix::from_element(4, 1, 1.0);
        let w = DVector::from_element(4, 1.0);
        let m = m_step(&z, &r, &w, &prior, 0.0).unwrap();
        assert_relative_eq!(m.means[0][0], 3.0, epsilon = 1e-12);
        let var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
        assert_relative_eq!(m.covariances[0][(0, 0)], var, epsilon = 1e-12);
        assert_relative_eq!(m.weights[0], 1.0, epsilon = 1e-12);

        // one-hot weight: every surviving component collapses onto that
        // sample with floor covariance
        let prior2 = split_prior_1d(1.0);
        let r2 = DMatrix::from_row_slice(4, 2, &[
            0.5, 0.5, //
            0.4, 0.6, //
            0.3, 0.7, //
            0.2, 0.8,
        ]);
        let w2 = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
        let m2 = m_step(&z, &r2, &w2, &prior2, 1e-8).unwrap();
        for k in 0..2 {
            assert!(!m2.frozen[k]);
            assert_relative_eq!(m2.means[k][0], 3.0, epsilon = 1e-12);
            assert_relative_eq!(m2.covariances[k][(0, 0)], 1e-8, epsilon = 1e-20);
        }
        assert_relative_eq!(m2.weights[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(m2.weights[1], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn binary_weights_reduce_to_subset_statistics() {
        let prior = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.0, 0.0])],
            vec![DMatrix::identity(2, 2)],
        )
        .unwrap();
        let mut rng = stream_rng(9, 31);
        let n = 200;
        let z = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let flags: Vec<bool> = (0..n).map(|i| z[(i, 0)] > 0.3).collect();
        let r = DMatrix::from_element(n, 1, 1.0);
        let w = DVector::from_fn(n, |i, _| if flags[i] { 1.0 } else { 0.0 });
        let m = m_step(&z, &r, &w, &prior, 1e-12).unwrap();
        // plain statistics of the flagged subset (covariance divided by the
        // subset count)
        let subset: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();
        let cnt = subset.len() as f64;
        for j in 0..2 {
            let mean = subset.iter().map(|&i| z[(i, j)]).sum::<f64>() / cnt;
            assert_relative_eq!(m.means[0][j], mean, epsilon = 1e-6);
        }
        let mean0 = subset.iter().map(|&i| z[(i, 0)]).sum::<f64>() / cnt;
        let mean1 = subset.iter().map(|&i| z[(i, 1)]).sum::<f64>() / cnt;
        let mut cov = [[0.0f64; 2]; 2];
        for &i in &subset {
            let d0 = z[(i, 0)] - mean0;
            let d1 = z[(i, 1)] - mean1;
            cov[0][0] += d0 * d0;
            cov[0][1] += d0 * d1;
            cov[1][0] += d1 * d0;
            cov[1][1] += d1 * d1;
        }
        for a in 0..2 {
            for b in 0..2 {
                assert_relative_eq!(
                    m.covariances[0][(a, b)],
                    cov[a][b] / cnt,
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn vanished_component_keeps_prior_shape() {
        let prior = split_prior_1d(2.0);
        let z = DMatrix::from_column_slice(3, 1, &[1.9, 2.1, 2.3]);
        // all responsibility mass on component 1
        let r = DMatrix::from_fn(3, 2, |_, j| if j == 1 { 1.0 } else { 0.0 });
        let w = DVector::from_element(3, 1.0);
        let m = m_step(&z, &r, &w, &prior, 1e-6).unwrap();
        assert!(m.frozen[0]);
        assert!(!m.frozen[1]);
        assert_eq!(m.means[0], prior.means()[0]);
        assert_eq!(m.covariances[0], prior.covariances()[0]);
        // the vanished component carries no weight; the total stays 1
        assert_relative_eq!(m.weights[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(m.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn elbo_zero_at_prior_with_flat_likelihood() {
        let prior = prior_2d();
        let mut rng = stream_rng(11, 31);
        let z = DMatrix::from_fn(25, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let lik = DVector::from_element(25, 1.0);
        let w = DVector::from_element(25, 1.0);
        let e = elbo(&prior, &prior, &z, &lik, &w).unwrap();
        assert!(e <= 1e-10, "bound must be nonpositive, got {e}");
        assert!(e.abs() < 1e-9);
    }

    #[test]
    fn elbo_equals_log_constant_for_single_gaussian() {
        let prior = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![0.5])],
            vec![DMatrix::from_element(1, 1, 2.0)],
        )
        .unwrap();
        let z = DMatrix::from_column_slice(10, 1, &[-2.0, -1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, -0.5, 0.2]);
        for c in [1e-6, 1e-3, 0.5] {
            let lik = DVector::from_element(10, c);
            let w = DVector::from_fn(10, |i, _| 1.0 + (i as f64) * 0.1);
            let e = elbo(&prior, &prior, &z, &lik, &w).unwrap();
            assert_relative_eq!(e, c.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn elbo_matches_naive_loop_oracle() {
        let prior = prior_2d();
        let posterior = GmmModel::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_vec(vec![-1.0, 0.0]),
                DVector::from_vec(vec![2.0, -0.5]),
            ],
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2).scale(2.0)],
        )
        .unwrap();
        let mut rng = stream_rng(13, 31);
        let z = DMatrix::from_fn(50, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.5);
        let lik = random_lik(50, 14);
        let w = DVector::from_fn(50, |i, _| 0.1 + (i as f64 % 7.0) / 7.0);

        // naive reimplementation with plain loops and direct density math
        let dens = |mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>| -> f64 {
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
            let inv = [
                [cov[(1, 1)] / det, -cov[(0, 1)] / det],
                [-cov[(1, 0)] / det, cov[(0, 0)] / det],
            ];
            let d0 = x[0] - mean[0];
            let d1 = x[1] - mean[1];
            let q = d0 * (inv[0][0] * d0 + inv[0][1] * d1) + d1 * (inv[1][0] * d0 + inv[1][1] * d1);
            (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
        };
        let n_e: f64 = w.iter().sum();
        let mut want = 0.0;
        for i in 0..50 {
            let x = z.row(i).transpose();
            let mut prior_comp = [0.0; 2];
            let mut post_mix = 0.0;
            for k in 0..2 {
                prior_comp[k] =
                    prior.weights()[k] * dens(&prior.means()[k], &prior.covariances()[k], &x);
                post_mix += posterior.weights()[k]
                    * dens(&posterior.means()[k], &posterior.covariances()[k], &x);
            }
            let prior_sum: f64 = prior_comp.iter().sum();
            let mut point = lik[i].ln() - post_mix.ln();
            for k in 0..2 {
                let rik = prior_comp[k] / prior_sum;
                point += rik * (prior_comp[k].ln() - rik.ln());
            }
            want += w[i] / n_e * point;
        }
        let got = elbo(&prior, &posterior, &z, &lik, &w).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-10);
    }

    #[test]
    fn flat_likelihood_run_is_an_em_refit() {
        let prior = prior_2d();
        let mut rng = stream_rng(15, streams::SAMPLE);
        let z = prior.sample_batch(8000, &mut rng);
        let flags = vec![true; 8000];
        let provider = LikelihoodProvider::Observed(&flags);
        let res = run_vi(&prior, &z, &provider, ViOptions::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 5);
        assert_relative_eq!(res.effective_n, 8000.0, epsilon = 1e-9);
        for k in 0..2 {
            let dist = (&res.posterior.means()[k] - &prior.means()[k]).norm();
            assert!(dist < 0.1, "component {k} moved {dist}");
        }
        for t in 1..res.elbo_trace.len() {
            assert!(res.elbo_trace[t] >= res.elbo_trace[t - 1] - 1e-6);
        }
        // the refit is a fixed point: a fresh M step reproduces it
        let (lik, w) = provider.per_sample(&z).unwrap();
        let r = responsibilities(&prior, &res.posterior, &z, &lik).unwrap();
        let m = m_step(&z, &r, &w, &prior, ViOptions::default().reg_floor).unwrap();
        for k in 0..2 {
            assert_relative_eq!(m.weights[k], res.posterior.weights()[k], epsilon = 1e-9);
            for j in 0..2 {
                assert_relative_eq!(m.means[k][j], res.posterior.means()[k][j], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn indicator_on_one_cluster_concentrates_posterior() {
        let prior = split_prior_1d(8.0);
        let mut rng = stream_rng(17, streams::SAMPLE);
        let z = prior.sample_batch(2000, &mut rng);
        let flags: Vec<bool> = (0..2000).map(|i| z[(i, 0)] > 0.0).collect();
        assert!(flags.iter().any(|&f| f));
        let provider = LikelihoodProvider::Observed(&flags);
        let res = run_vi(&prior, &z, &provider, ViOptions::default()).unwrap();
        assert!(res.posterior.weights()[1] >= 0.95);
        // the deserted component froze to the prior's shape
        assert!(res.frozen_events >= 1);
        assert_eq!(res.posterior.means()[0], prior.means()[0]);
        // the flagged cluster's refit stays near its generating mean
        assert_relative_eq!(res.posterior.means()[1][0], 8.0, epsilon = 0.15);
        for t in 1..res.elbo_trace.len() {
            assert!(res.elbo_trace[t] >= res.elbo_trace[t - 1] - 1e-6);
        }
    }

    #[test]
    fn zero_iterations_returns_prior_verbatim() {
        let prior = prior_2d();
        let mut rng = stream_rng(19, streams::SAMPLE);
        let z = prior.sample_batch(50, &mut rng);
        let flags = vec![true; 50];
        let provider = LikelihoodProvider::Observed(&flags);
        let res = run_vi(&prior, &z, &provider, ViOptions { max_iter: 0, ..Default::default() })
            .unwrap();
        assert_eq!(res.posterior, prior);
        assert!(res.elbo_trace.is_empty());
        assert_eq!(res.iterations, 0);
        assert!(!res.converged);
    }

    #[test]
    fn empty_evidence_is_rejected() {
        let prior = prior_2d();
        let mut rng = stream_rng(21, streams::SAMPLE);
        let z = prior.sample_batch(50, &mut rng);
        let flags = vec![false; 50];
        let provider = LikelihoodProvider::Observed(&flags);
        let err = run_vi(&prior, &z, &provider, ViOptions::default()).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("threshold"), "message: {msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatches_rejected() {
        let prior = prior_2d();
        let other = split_prior_1d(1.0);
        let z = DMatrix::zeros(5, 2);
        let lik = DVector::from_element(5, 0.5);
        assert!(responsibilities(&prior, &other, &z, &lik).is_err());
        let bad_lik = DVector::from_element(4, 0.5);
        assert!(responsibilities(&prior, &prior, &z, &bad_lik).is_err());
        let neg_lik = DVector::from_element(5, -0.1);
        assert!(responsibilities(&prior, &prior, &z, &neg_lik).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn vi_invariants_on_random_problems(seed in 0u64..500, n in 20usize..60) {
            let prior = prior_2d();
            let mut rng = stream_rng(seed, streams::SAMPLE);
            let z = prior.sample_batch(n, &mut rng);
            let flags: Vec<bool> = (0..n).map(|i| z[(i, 0)] > -1.0).collect();
            prop_assume!(flags.iter().any(|&f| f));
            let provider = LikelihoodProvider::Observed(&flags);
            let res = run_vi(&prior, &z, &provider, ViOptions::default()).unwrap();
            prop_assert!(res.effective_n > 0.0);
            prop_assert!((res.posterior.weights().sum() - 1.0).abs() < 1e-10);
            for t in 1..res.elbo_trace.len() {
                prop_assert!(res.elbo_trace[t] >= res.elbo_trace[t - 1] - 1e-6);
            }
            let (lik, _) = provider.per_sample(&z).unwrap();
            let r = responsibilities(&prior, &res.posterior, &z, &lik).unwrap();
            for i in 0..n {
                let sum: f64 = r.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
