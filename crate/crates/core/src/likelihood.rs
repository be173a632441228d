use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::evt::{FrechetTail, PROB_FLOOR};
use crate::pca::PcaModel;
use crate::scalar::Scalar;
use crate::stress::StressModel;

/// Log-likelihood of the extreme event at an arbitrary latent point; the
/// abstraction the samplers target. Values need not be clamped to
/// probabilities — only ratios matter to Metropolis-Hastings — and test
/// closures exploit that.
pub trait LatentLikelihood<S: Scalar> {
    fn log_lik(&self, z: &DVector<S>) -> Result<S>;
}

impl<S: Scalar, F: Fn(&DVector<S>) -> S> LatentLikelihood<S> for F {
    fn log_lik(&self, z: &DVector<S>) -> Result<S> {
        Ok(self(z))
    }
}

/// Physics-informed exceedance likelihood: reconstruct the latent point to
/// feature space, evaluate the quadratic stress surrogate, and convert the
/// predicted stress into a tail exceedance probability.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateLikelihood<'a, S: Scalar> {
    pca: &'a PcaModel<S>,
    stress: &'a StressModel<S>,
    tail: &'a FrechetTail<S>,
}

impl<'a, S: Scalar> SurrogateLikelihood<'a, S> {
    pub fn new(
        pca: &'a PcaModel<S>,
        stress: &'a StressModel<S>,
        tail: &'a FrechetTail<S>,
    ) -> Result<Self> {
        if pca.n_features() != stress.n_features() {
            return Err(Error::validation(format!(
                "latent map reconstructs {} features but the stress model expects {}",
                pca.n_features(),
                stress.n_features()
            )));
        }
        Ok(SurrogateLikelihood { pca, stress, tail })
    }

    /// P(sigma > sigma_bar | z), clamped to [PROB_FLOOR, 1].
    pub fn exceedance_prob(&self, z: &DVector<S>) -> Result<S> {
        let x = self.pca.reconstruct(z)?;
        let sigma = self.stress.eval(&x)?;
        Ok(self.tail.exceedance_prob(sigma))
    }
}

impl<S: Scalar> LatentLikelihood<S> for SurrogateLikelihood<'_, S> {
    fn log_lik(&self, z: &DVector<S>) -> Result<S> {
        Ok(self.exceedance_prob(z)?.ln())
    }
}

/// Per-sample likelihoods and weights for the variational update.
///
/// `Observed` trusts the exceedance indicators: flagged samples carry
/// likelihood 1 and weight 1, the rest the probability floor and weight 0.
/// `Surrogate` assigns every sample its predicted exceedance probability as
/// both likelihood and weight.
pub enum LikelihoodProvider<'a, S: Scalar> {
    Observed(&'a [bool]),
    Surrogate(SurrogateLikelihood<'a, S>),
}

impl<S: Scalar> LikelihoodProvider<'_, S> {
    /// Returns (likelihoods, weights), both length N, likelihoods in
    /// [PROB_FLOOR, 1].
    pub fn per_sample(&self, latents: &DMatrix<S>) -> Result<(DVector<S>, DVector<S>)> {
        let n = latents.nrows();
        match self {
            LikelihoodProvider::Observed(flags) => {
                if flags.len() != n {
                    return Err(Error::validation(format!(
                        "{} exceedance flags for {} samples",
                        flags.len(),
                        n
                    )));
                }
                let floor = S::c(PROB_FLOOR);
                let lik = DVector::from_fn(n, |i, _| if flags[i] { S::one() } else { floor });
                let w = DVector::from_fn(n, |i, _| if flags[i] { S::one() } else { S::zero() });
                Ok((lik, w))
            }
            LikelihoodProvider::Surrogate(s) => {
                let mut lik = DVector::zeros(n);
                for i in 0..n {
                    lik[i] = s.exceedance_prob(&latents.row(i).transpose())?;
                }
                Ok((lik.clone(), lik))
            }
        }
    }
}
