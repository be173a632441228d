//! Independence Metropolis–Hastings baseline targeting the extreme-event
//! posterior P(z|E) ∝ P(E|z)·P(z), proposing fresh draws from the prior.
//! Because the proposal equals the prior, the prior densities cancel and the
//! acceptance probability is min(1, lik(z')/lik(z)).

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::evt::PROB_FLOOR;
use crate::gmm::{fit as gmm_fit, GmmFitInfo, GmmFitOptions, GmmModel};
use crate::likelihood::LatentLikelihood;
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;

/// Number of prior draws scored to pick the chain's starting state.
const N_WARMUP: usize = 100;

/// Post-processed chain output.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcResult<S: Scalar> {
    /// Post burn-in, thinned states, one row per kept state.
    pub samples: DMatrix<S>,
    /// accepted / proposed, exact.
    pub acceptance_rate: f64,
    /// Number of proposals made (excluding warm-up scoring draws).
    pub chain_length: usize,
    pub seed: u64,
}

/// Default burn-in: 10% of the proposal budget.
pub fn default_burn_in(n_steps: usize) -> usize {
    n_steps / 10
}

/// Run one independence chain. The likelihood is evaluated in log space and
/// floored at ln(1e-12); non-finite evaluations are treated as floor-level
/// (the proposal is then effectively rejected against any supported state).
pub fn run_mh<S: Scalar, L: LatentLikelihood<S> + ?Sized>(
    prior: &GmmModel<S>,
    lik: &L,
    n_steps: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<McmcResult<S>> {
    if thin < 1 {
        return Err(Error::validation("thin must be at least 1"));
    }
    if n_steps <= burn_in {
        return Err(Error::validation(format!(
            "n_steps ({n_steps}) must exceed burn_in ({burn_in})"
        )));
    }
    let floor_log = S::c(PROB_FLOOR.ln());
    let floor_cut = floor_log + S::c(1e-9);
    let clamp = |v: S| -> S {
        if v.is_finite() {
            v.max(floor_log)
        } else if v == S::infinity() {
            v
        } else {
            floor_log
        }
    };

    let mut rng = stream_rng(seed, streams::MCMC);

    // score warm-up draws; the best one seeds the chain
    let warmup = prior.sample_batch(N_WARMUP, &mut rng);
    let mut best: Option<(usize, S)> = None;
    for i in 0..N_WARMUP {
        let z = warmup.row(i).transpose();
        let ll = clamp(lik.log_lik(&z)?);
        if best.map_or(true, |(_, b)| ll > b) {
            best = Some((i, ll));
        }
    }
    let (best_idx, best_ll) = best.expect("warm-up draws scored");
    if best_ll <= floor_cut {
        return Err(Error::validation(
            "no extreme-event mass anywhere in the warm-up draws: every likelihood sits \
             at the floor; review the stress threshold",
        ));
    }

    let d = prior.d();
    let kept = (n_steps - burn_in).div_ceil(thin);
    let mut samples = DMatrix::<S>::zeros(kept, d);
    let mut current = warmup.row(best_idx).transpose();
    let mut current_ll = best_ll;
    let mut accepted = 0usize;
    let mut row = 0usize;
    for step in 1..=n_steps {
        let proposal = prior.sample(&mut rng);
        let proposal_ll = clamp(lik.log_lik(&proposal)?);
        // the uniform is drawn every step so the stream does not depend on
        // the acceptance path
        let u: f64 = rng.random();
        if S::c(u.ln()) < proposal_ll - current_ll {
            current = proposal;
            current_ll = proposal_ll;
            accepted += 1;
        }
        if step > burn_in && (step - burn_in - 1) % thin == 0 {
            samples.row_mut(row).tr_copy_from(&current);
            row += 1;
        }
    }
    debug_assert_eq!(row, kept);
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("chain produced a non-finite state"));
    }
    Ok(McmcResult {
        samples,
        acceptance_rate: accepted as f64 / n_steps as f64,
        chain_length: n_steps,
        seed,
    })
}

/// Density model of the chain for likelihood-ratio use: an EM fit on the
/// kept samples with the requested component count (normally the prior's K).
pub fn fit_posterior_gmm<S: Scalar>(
    result: &McmcResult<S>,
    k: usize,
    seed: u64,
) -> Result<(GmmModel<S>, GmmFitInfo<S>)> {
    if result.samples.nrows() < k {
        return Err(Error::validation(format!(
            "{} chain samples cannot support {k} components",
            result.samples.nrows()
        )));
    }
    let opts = GmmFitOptions { n_components: k, ..Default::default() };
    gmm_fit(&result.samples, opts, seed)
}
