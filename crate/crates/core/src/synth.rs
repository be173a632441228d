//! Dataset construction for both experiment regimes: a fully synthetic
//! "known generator" test (sample a latent mixture, embed to features,
//! evaluate a quadratic stress response, threshold at a quantile) and a
//! mixed regime that augments experimental rows with synthetic ones. Also
//! houses the seeded generator world itself: a latent cluster mixture, an
//! orthonormal feature embedding stored as a PCA model, and the latent
//! quadratic stress response expanded exactly into a feature-space
//! polynomial model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::FeatureTable;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::pca::{PcaModel, Standardization};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::stress::{full_quadratic_termspec, StressModel};

/// Empirical quantile of the stresses with linear interpolation between
/// order statistics (the common "type 7" convention): with h = (N−1)·q,
/// the threshold is x_(⌊h⌋) + (h−⌊h⌋)·(x_(⌊h⌋+1) − x_(⌊h⌋)). Warns on
/// stderr when nothing exceeds the result (degenerate input).
pub fn select_threshold<S: Scalar>(stresses: &[S], quantile: f64) -> Result<S> {
    if stresses.is_empty() {
        return Err(Error::validation("cannot select a threshold from no stresses"));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::validation(format!("quantile {quantile} outside (0, 1)")));
    }
    if stresses.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite stress value"));
    }
    let mut sorted = stresses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len();
    let h = (n - 1) as f64 * quantile;
    let lo = h.floor() as usize;
    let frac = S::c(h - h.floor());
    let threshold = if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    };
    let exceed = stresses.iter().filter(|&&v| v > threshold).count();
    if exceed == 0 {
        eprintln!(
            "warning: no stress exceeds the selected threshold {}; \
             the stress distribution is degenerate at this quantile",
            threshold.f64()
        );
    }
    Ok(threshold)
}

/// Quadratic response over latent coordinates:
/// σ(z) = constant + linearᵀz + zᵀ·quadratic·z.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentQuadratic<S: Scalar> {
    pub constant: S,
    pub linear: DVector<S>,
    pub quadratic: DMatrix<S>,
}

impl<S: Scalar> LatentQuadratic<S> {
    pub fn new(constant: S, linear: DVector<S>, quadratic: DMatrix<S>) -> Result<Self> {
        let d = linear.len();
        if quadratic.nrows() != d || quadratic.ncols() != d {
            return Err(Error::validation(format!(
                "quadratic matrix is {}x{}, linear part has {d} entries",
                quadratic.nrows(),
                quadratic.ncols()
            )));
        }
        for a in 0..d {
            for b in 0..d {
                if (quadratic[(a, b)] - quadratic[(b, a)]).abs() > S::c(1e-10) {
                    return Err(Error::validation("quadratic matrix must be symmetric"));
                }
            }
        }
        Ok(LatentQuadratic { constant, linear, quadratic })
    }

    pub fn eval(&self, z: &DVector<S>) -> Result<S> {
        if z.len() != self.linear.len() {
            return Err(Error::validation(format!(
                "latent length {} for {}-dimensional response",
                z.len(),
                self.linear.len()
            )));
        }
        Ok(self.constant + self.linear.dot(z) + (&self.quadratic * z).dot(z))
    }
}

/// Exact re-expression of a latent quadratic response as a full quadratic
/// polynomial over the embedded features. Because the embedding is affine
/// (x = (mean + W·z) ⊙ scale + shift with orthonormal W), substituting the
/// projection z(x) into σ(z) yields a feature-space quadratic whose
/// coefficients this computes in closed form.
pub fn latent_quadratic_to_feature_model<S: Scalar>(
    pca: &PcaModel<S>,
    response: &LatentQuadratic<S>,
    feature_names: Option<Vec<String>>,
) -> Result<StressModel<S>> {
    let d = pca.d();
    let n = pca.n_features();
    if response.linear.len() != d {
        return Err(Error::validation(format!(
            "response dimension {} vs embedding dimension {d}",
            response.linear.len()
        )));
    }
    let w = pca.components(); // n x d, orthonormal columns
    let std = pca.standardization();
    // u = (x − shift)/scale = P·x + q with P = diag(1/scale)
    let p_diag = DVector::from_fn(n, |j, _| S::one() / std.scale[j]);
    let q = DVector::from_fn(n, |j, _| -std.shift[j] / std.scale[j]);
    // z = Wᵀ·u + t with t = −Wᵀ·mean
    let t = -(w.transpose() * pca.mean());

    let a = &response.quadratic;
    let b = &response.linear;
    // σ as a quadratic in u
    let at = a * &t;
    let alpha0 = response.constant + b.dot(&t) + t.dot(&at);
    let beta_u = w * b + (w * &at).scale(S::c(2.0));
    let m_u = w * a * w.transpose();

    // σ as a quadratic in x: intercept + linᵀx + xᵀ·Mx·x
    let mq = &m_u * &q;
    let intercept = alpha0 + beta_u.dot(&q) + q.dot(&mq);
    let lin = DVector::from_fn(n, |j, _| p_diag[j] * (beta_u[j] + S::c(2.0) * mq[j]));
    let mx = DMatrix::from_fn(n, n, |i, j| p_diag[i] * m_u[(i, j)] * p_diag[j]);

    let mut spec = full_quadratic_termspec(n);
    spec.feature_names = feature_names;
    spec.validate()?;
    // coefficient layout of the full quadratic spec: n linear terms, then
    // n squares, then the (a, b) products in lexicographic order
    let mut beta = DVector::zeros(spec.n_terms());
    for j in 0..n {
        beta[j] = lin[j];
        beta[n + j] = mx[(j, j)];
    }
    let mut idx = 2 * n;
    for a_i in 0..n {
        for b_i in (a_i + 1)..n {
            beta[idx] = S::c(2.0) * mx[(a_i, b_i)];
            idx += 1;
        }
    }
    StressModel::new(spec, beta, intercept)
}

/// A complete seeded generator: the latent cluster mixture, the feature
/// embedding (stored as a PCA model so reconstruction is the embedding
/// map), the latent stress response, and its exact feature-space
/// expansion.
#[derive(Debug, Clone)]
pub struct World<S: Scalar> {
    pub prior: GmmModel<S>,
    pub pca: PcaModel<S>,
    pub stress: StressModel<S>,
    pub latent_stress: LatentQuadratic<S>,
}

/// Latent dimension of the generated world.
pub const WORLD_LATENT_DIM: usize = 3;
/// Number of latent clusters in the generated world.
pub const WORLD_CLUSTERS: usize = 4;
/// Number of embedded features in the generated world.
pub const WORLD_FEATURES: usize = 8;

/// Builds the seeded world: four well-separated latent clusters on a
/// jittered tetrahedron, an orthonormal embedding into eight scaled and
/// shifted features, and a concave quadratic stress response peaking near
/// one "hot" cluster so that extreme events concentrate on a single latent
/// configuration.
pub fn build_world<S: Scalar>(seed: u64) -> Result<World<S>> {
    let mut rng = stream_rng(seed, streams::WORLD);
    let d = WORLD_LATENT_DIM;
    let k = WORLD_CLUSTERS;
    let n_feat = WORLD_FEATURES;

    // cluster centers: tetrahedron vertices scaled to pairwise distance
    // ~6.2, plus per-seed jitter
    let verts: [[f64; 3]; 4] =
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let scale_v = 2.2;
    let mut means = Vec::with_capacity(k);
    for v in verts {
        let jitter: Vec<f64> =
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect();
        means.push(DVector::from_fn(d, |j, _| S::c(v[j] * scale_v + jitter[j])));
    }

    // mildly anisotropic covariances via random rotations
    let mut covariances = Vec::with_capacity(k);
    for _ in 0..k {
        let rot: DMatrix<S> = random_rotation(d, &mut rng);
        let eig: Vec<f64> = (0..d).map(|_| 0.5 + rng.random::<f64>() * 0.7).collect();
        let lam = DMatrix::from_fn(d, d, |i, j| if i == j { S::c(eig[i]) } else { S::zero() });
        covariances.push(&rot * lam * rot.transpose());
    }

    // uneven weights with per-seed jitter
    let base = [0.30, 0.28, 0.24, 0.18];
    let mut weights: Vec<S> = base
        .iter()
        .map(|&w| S::c(w + (rng.random::<f64>() - 0.5) * 0.04))
        .collect();
    let total: S = weights.iter().copied().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let prior = GmmModel::new(weights, means.clone(), covariances)?;

    // orthonormal embedding with per-feature scale and shift
    let raw = DMatrix::<S>::from_fn(n_feat, d, |_, _| S::c(rng.sample::<f64, _>(StandardNormal)));
    let qr = raw.qr();
    let mut w_embed = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < S::zero() {
            for i in 0..n_feat {
                w_embed[(i, j)] = -w_embed[(i, j)];
            }
        }
    }
    let feat_scale = DVector::from_fn(n_feat, |_, _| S::c(0.5 + rng.random::<f64>() * 1.5));
    let feat_shift = DVector::from_fn(n_feat, |_, _| S::c((rng.random::<f64>() - 0.5) * 2.0));
    let mean_std = DVector::from_fn(n_feat, |_, _| S::c((rng.random::<f64>() - 0.5) * 0.4));
    // descending nominal spectrum; only the ordering matters downstream
    let eigenvalues = DVector::from_fn(d, |j, _| S::c(6.0 - j as f64 * 0.5));
    let pca = PcaModel::from_parts(
        mean_std,
        w_embed,
        eigenvalues,
        Standardization { shift: feat_shift, scale: feat_scale },
    )?;

    // concave stress response peaking near the lightest cluster:
    // σ(z) = γ − (z − h)ᵀ A (z − h) with A positive definite
    let hot = k - 1;
    let h = DVector::from_fn(d, |j, _| {
        means[hot][j] + S::c(rng.sample::<f64, _>(StandardNormal) * 0.3)
    });
    let rot: DMatrix<S> = random_rotation(d, &mut rng);
    let curv: Vec<f64> = (0..d).map(|_| 0.35 + rng.random::<f64>() * 0.2).collect();
    let lam = DMatrix::from_fn(d, d, |i, j| if i == j { S::c(curv[i]) } else { S::zero() });
    let a_mat: DMatrix<S> = &rot * lam * rot.transpose();
    let a_sym = (&a_mat + a_mat.transpose()).scale(S::c(0.5));
    let gamma = S::c(1300.0);
    let ah: DVector<S> = &a_sym * &h;
    let latent_stress = LatentQuadratic::new(
        gamma - h.dot(&ah),
        ah.scale(S::c(2.0)),
        -a_sym,
    )?;
    let names = (0..n_feat).map(|j| format!("f{j}")).collect();
    let stress = latent_quadratic_to_feature_model(&pca, &latent_stress, Some(names))?;

    Ok(World { prior, pca, stress, latent_stress })
}

fn random_rotation<S: Scalar>(d: usize, rng: &mut impl Rng) -> DMatrix<S> {
    let raw = DMatrix::<S>::from_fn(d, d, |_, _| S::c(rng.sample::<f64, _>(StandardNormal)));
    let qr = raw.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < S::zero() {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Origin of a dataset row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Experimental,
}

/// A train/test split with its stress threshold and per-row provenance.
/// Synthetic rows always precede experimental rows within each split.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub train: FeatureTable<S>,
    pub test: FeatureTable<S>,
    pub sigma_bar: S,
    pub quantile: f64,
    pub seed: u64,
    pub train_provenance: Vec<Provenance>,
    pub test_provenance: Vec<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitCounts {
    synthetic: usize,
    experimental: usize,
    extremes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    schema: String,
    sigma_bar: f64,
    quantile: f64,
    seed: u64,
    train: SplitCounts,
    test: SplitCounts,
}

const DATASET_SCHEMA: &str = "dataset/v1";

fn count_extremes<S: Scalar>(t: &FeatureTable<S>) -> usize {
    t.extreme().map_or(0, |e| e.iter().filter(|&&f| f).count())
}

fn provenance_counts(p: &[Provenance]) -> (usize, usize) {
    let synthetic = p.iter().filter(|&&x| x == Provenance::Synthetic).count();
    (synthetic, p.len() - synthetic)
}

impl<S: Scalar> Dataset<S> {
    /// Writes `train.csv`, `test.csv`, and `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.train.write_csv(dir.join("train.csv"))?;
        self.test.write_csv(dir.join("test.csv"))?;
        let (tr_syn, tr_exp) = provenance_counts(&self.train_provenance);
        let (te_syn, te_exp) = provenance_counts(&self.test_provenance);
        let meta = DatasetMeta {
            schema: DATASET_SCHEMA.to_string(),
            sigma_bar: self.sigma_bar.f64(),
            quantile: self.quantile,
            seed: self.seed,
            train: SplitCounts {
                synthetic: tr_syn,
                experimental: tr_exp,
                extremes: count_extremes(&self.train),
            },
            test: SplitCounts {
                synthetic: te_syn,
                experimental: te_exp,
                extremes: count_extremes(&self.test),
            },
        };
        crate::write_json_file(dir.join("meta.json"), &meta)
    }

    /// Reads a dataset directory written by [`Dataset::save`]. Per-row
    /// provenance is reconstructed from the counts (synthetic rows first).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: DatasetMeta = crate::read_json_file(dir.join("meta.json"))?;
        if meta.schema != DATASET_SCHEMA {
            return Err(Error::validation(format!(
                "unsupported dataset schema `{}`",
                meta.schema
            )));
        }
        let train = FeatureTable::read_csv(dir.join("train.csv"))?;
        let test = FeatureTable::read_csv(dir.join("test.csv"))?;
        let rebuild = |n: usize, counts: &SplitCounts, split: &str| -> Result<Vec<Provenance>> {
            if counts.synthetic + counts.experimental != n {
                return Err(Error::validation(format!(
                    "{split} provenance counts {}+{} do not match {n} rows",
                    counts.synthetic, counts.experimental
                )));
            }
            let mut p = vec![Provenance::Synthetic; counts.synthetic];
            p.extend(std::iter::repeat_n(Provenance::Experimental, counts.experimental));
            Ok(p)
        };
        let train_provenance = rebuild(train.n(), &meta.train, "train")?;
        let test_provenance = rebuild(test.n(), &meta.test, "test")?;
        Ok(Dataset {
            train,
            test,
            sigma_bar: S::c(meta.sigma_bar),
            quantile: meta.quantile,
            seed: meta.seed,
            train_provenance,
            test_provenance,
        })
    }
}

/// Settings of the fully synthetic regime.
#[derive(Debug, Clone, Copy)]
pub struct PerfectConfig {
    pub n_samples: usize,
    pub n_train: usize,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for PerfectConfig {
    fn default() -> Self {
        PerfectConfig { n_samples: 5000, n_train: 4000, quantile: 0.95, seed: 0 }
    }
}

/// Settings of the mixed synthetic-plus-experimental regime.
#[derive(Debug, Clone, Copy)]
pub struct MixedConfig {
    pub n_synthetic: usize,
    pub n_train_synthetic: usize,
    pub n_train_experimental: usize,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for MixedConfig {
    fn default() -> Self {
        MixedConfig {
            n_synthetic: 1400,
            n_train_synthetic: 700,
            n_train_experimental: 300,
            quantile: 0.95,
            seed: 0,
        }
    }
}

fn feature_names_for<S: Scalar>(stress: &StressModel<S>) -> Vec<String> {
    match &stress.termspec().feature_names {
        Some(names) => names.clone(),
        None => (0..stress.n_features()).map(|j| format!("f{j}")).collect(),
    }
}

/// Samples latents from the generator mixture, embeds them to features,
/// evaluates the stress response, thresholds at the configured quantile of
/// the pooled stresses, and splits into train and test.
pub fn generate_perfect<S: Scalar>(
    prior: &GmmModel<S>,
    pca: &PcaModel<S>,
    stress: &StressModel<S>,
    cfg: &PerfectConfig,
) -> Result<Dataset<S>> {
    if cfg.n_samples < 10 {
        return Err(Error::validation("need at least 10 samples"));
    }
    if cfg.n_train == 0 || cfg.n_train >= cfg.n_samples {
        return Err(Error::validation(format!(
            "train size {} must lie strictly inside 0..{}",
            cfg.n_train, cfg.n_samples
        )));
    }
    if prior.d() != pca.d() {
        return Err(Error::validation(format!(
            "prior dimension {} vs embedding latent dimension {}",
            prior.d(),
            pca.d()
        )));
    }
    let mut rng = stream_rng(cfg.seed, streams::DATA);
    let latents = prior.sample_batch(cfg.n_samples, &mut rng);
    let features = pca.reconstruct_batch(&latents)?;
    let stresses = stress.eval_batch(&features)?;
    let sigma_bar = select_threshold(stresses.as_slice(), cfg.quantile)?;
    let flags: Vec<bool> = stresses.iter().map(|&s| s > sigma_bar).collect();
    let names = feature_names_for(stress);

    let build = |range: std::ops::Range<usize>| -> Result<FeatureTable<S>> {
        let idx: Vec<usize> = range.collect();
        let rows = DMatrix::from_fn(idx.len(), features.ncols(), |i, j| features[(idx[i], j)]);
        let s = DVector::from_fn(idx.len(), |i, _| stresses[idx[i]]);
        let e: Vec<bool> = idx.iter().map(|&i| flags[i]).collect();
        FeatureTable::new(names.clone(), rows, Some(s), Some(e))
    };
    let train = build(0..cfg.n_train)?;
    let test = build(cfg.n_train..cfg.n_samples)?;
    let train_provenance = vec![Provenance::Synthetic; train.n()];
    let test_provenance = vec![Provenance::Synthetic; test.n()];
    Ok(Dataset {
        train,
        test,
        sigma_bar,
        quantile: cfg.quantile,
        seed: cfg.seed,
        train_provenance,
        test_provenance,
    })
}

/// Combines synthetic draws with experimental rows. The stress threshold
/// comes from the experimental stress distribution alone; synthetic rows
/// inherit it. Train takes the configured number of synthetic rows plus a
/// seeded random subset of the experimental rows; everything else goes to
/// test. Within each split, synthetic rows precede experimental rows.
pub fn generate_mixed<S: Scalar>(
    prior: &GmmModel<S>,
    pca: &PcaModel<S>,
    stress: &StressModel<S>,
    cfg: &MixedConfig,
    experimental: &FeatureTable<S>,
) -> Result<Dataset<S>> {
    let obs = experimental.stress().ok_or_else(|| {
        Error::validation("experimental rows must carry observed stress values")
    })?;
    if experimental.dim() != pca.n_features() {
        return Err(Error::validation(format!(
            "experimental rows have {} features, the embedding expects {}",
            experimental.dim(),
            pca.n_features()
        )));
    }
    let n_exp = experimental.n();
    if n_exp <= cfg.n_train_experimental {
        return Err(Error::validation(format!(
            "need more than {} experimental rows ({} supplied) to fill the training \
             quota and leave a test remainder",
            cfg.n_train_experimental, n_exp
        )));
    }
    if cfg.n_train_synthetic > cfg.n_synthetic {
        return Err(Error::validation(format!(
            "synthetic training quota {} exceeds the synthetic total {}",
            cfg.n_train_synthetic, cfg.n_synthetic
        )));
    }
    if prior.d() != pca.d() {
        return Err(Error::validation(format!(
            "prior dimension {} vs embedding latent dimension {}",
            prior.d(),
            pca.d()
        )));
    }

    let sigma_bar = select_threshold(obs.as_slice(), cfg.quantile)?;

    let mut rng = stream_rng(cfg.seed, streams::DATA);
    let latents = prior.sample_batch(cfg.n_synthetic, &mut rng);
    let (syn_rows, syn_stress) = if cfg.n_synthetic > 0 {
        let features = pca.reconstruct_batch(&latents)?;
        let stresses = stress.eval_batch(&features)?;
        (features, stresses)
    } else {
        (DMatrix::zeros(0, pca.n_features()), DVector::zeros(0))
    };

    let mut exp_order: Vec<usize> = (0..n_exp).collect();
    exp_order.shuffle(&mut rng);

    let names = experimental.feature_names().to_vec();
    let d = pca.n_features();
    let build = |syn_idx: &[usize], exp_idx: &[usize]| -> Result<(FeatureTable<S>, Vec<Provenance>)> {
        let n = syn_idx.len() + exp_idx.len();
        let mut rows = DMatrix::zeros(n, d);
        let mut s = DVector::zeros(n);
        let mut e = Vec::with_capacity(n);
        let mut prov = Vec::with_capacity(n);
        for (r, &i) in syn_idx.iter().enumerate() {
            for j in 0..d {
                rows[(r, j)] = syn_rows[(i, j)];
            }
            s[r] = syn_stress[i];
            e.push(syn_stress[i] > sigma_bar);
            prov.push(Provenance::Synthetic);
        }
        let base = syn_idx.len();
        for (r, &i) in exp_idx.iter().enumerate() {
            for j in 0..d {
                rows[(base + r, j)] = experimental.rows()[(i, j)];
            }
            s[base + r] = obs[i];
            e.push(obs[i] > sigma_bar);
            prov.push(Provenance::Experimental);
        }
        Ok((FeatureTable::new(names.clone(), rows, Some(s), Some(e))?, prov))
    };

    let syn_train: Vec<usize> = (0..cfg.n_train_synthetic).collect();
    let syn_test: Vec<usize> = (cfg.n_train_synthetic..cfg.n_synthetic).collect();
    let exp_train = exp_order[..cfg.n_train_experimental].to_vec();
    let exp_test = exp_order[cfg.n_train_experimental..].to_vec();
    let (train, train_provenance) = build(&syn_train, &exp_train)?;
    let (test, test_provenance) = build(&syn_test, &exp_test)?;
    Ok(Dataset {
        train,
        test,
        sigma_bar,
        quantile: cfg.quantile,
        seed: cfg.seed,
        train_provenance,
        test_provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn threshold_interpolates_between_order_statistics() {
        let stresses: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let t = select_threshold(&stresses, 0.95).unwrap();
        assert!(t > 95.0 && t < 96.0, "threshold {t}");
        assert_relative_eq!(t, 95.05, epsilon = 1e-12);
        assert_eq!(stresses.iter().filter(|&&s| s > t).count(), 5);
    }

    #[test]
    fn threshold_matches_manual_formula_on_random_data() {
        let mut rng = stream_rng(1, 51);
        let stresses: Vec<f64> = (0..137).map(|_| rng.random::<f64>() * 50.0).collect();
        for q in [0.5, 0.9, 0.95, 0.99] {
            let t = select_threshold(&stresses, q).unwrap();
            let mut sorted = stresses.clone();
            sorted.sort_by(f64::total_cmp);
            let h = (sorted.len() - 1) as f64 * q;
            let expect = sorted[h.floor() as usize]
                + (h - h.floor())
                    * (sorted[(h.floor() as usize + 1).min(sorted.len() - 1)]
                        - sorted[h.floor() as usize]);
            assert_relative_eq!(t, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_and_invalid_threshold_inputs() {
        let t = select_threshold(&[3.0f64; 20], 0.95).unwrap();
        assert_eq!(t, 3.0);
        assert_eq!([3.0f64; 20].iter().filter(|&&s| s > t).count(), 0);
        assert!(select_threshold::<f64>(&[], 0.95).is_err());
        assert!(select_threshold(&[1.0f64], 0.0).is_err());
        assert!(select_threshold(&[1.0f64], 1.0).is_err());
        assert!(select_threshold(&[f64::NAN], 0.9).is_err());
    }

    #[test]
    fn world_is_deterministic_per_seed() {
        let a: World<f64> = build_world(7).unwrap();
        let b: World<f64> = build_world(7).unwrap();
        assert_eq!(a.prior, b.prior);
        assert_eq!(a.pca.components(), b.pca.components());
        assert_eq!(a.stress.beta(), b.stress.beta());
        assert_eq!(a.latent_stress, b.latent_stress);
        let c: World<f64> = build_world(8).unwrap();
        assert_ne!(a.prior, c.prior);
    }

    #[test]
    fn world_embedding_is_orthonormal() {
        let w: World<f64> = build_world(3).unwrap();
        let wt_w = w.pca.components().transpose() * w.pca.components();
        for i in 0..WORLD_LATENT_DIM {
            for j in 0..WORLD_LATENT_DIM {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(wt_w[(i, j)], want, epsilon = 1e-10);
            }
        }
        // projection inverts reconstruction on the latent manifold
        let mut rng = stream_rng(4, 51);
        let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let back = w.pca.project(&w.pca.reconstruct(&z).unwrap()).unwrap();
        for j in 0..3 {
            assert_relative_eq!(back[j], z[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn feature_stress_model_matches_latent_response() {
        for seed in [0u64, 5, 11] {
            let w: World<f64> = build_world(seed).unwrap();
            let mut rng = stream_rng(seed + 100, 51);
            for _ in 0..50 {
                let z = DVector::from_fn(WORLD_LATENT_DIM, |_, _| {
                    rng.sample::<f64, _>(StandardNormal) * 3.0
                });
                let x = w.pca.reconstruct(&z).unwrap();
                let via_features = w.stress.eval(&x).unwrap();
                let direct = w.latent_stress.eval(&z).unwrap();
                assert_relative_eq!(via_features, direct, epsilon = 1e-7, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn perfect_dataset_has_documented_shape() {
        let w: World<f64> = build_world(1).unwrap();
        let cfg = PerfectConfig { seed: 42, ..Default::default() };
        let ds = generate_perfect(&w.prior, &w.pca, &w.stress, &cfg).unwrap();
        assert_eq!(ds.train.n(), 4000);
        assert_eq!(ds.test.n(), 1000);
        let pooled_extremes = count_extremes(&ds.train) + count_extremes(&ds.test);
        assert_eq!(pooled_extremes, 250); // exactly 5% of 5000
        assert!(ds.train_provenance.iter().all(|&p| p == Provenance::Synthetic));
        // flags consistent with the threshold in both splits
        for t in [&ds.train, &ds.test] {
            let s = t.stress().unwrap();
            let e = t.extreme().unwrap();
            for i in 0..t.n() {
                assert_eq!(e[i], s[i] > ds.sigma_bar);
            }
        }
    }

    #[test]
    fn small_perfect_dataset_counts_exceedances_exactly() {
        let w: World<f64> = build_world(2).unwrap();
        let cfg = PerfectConfig { n_samples: 100, n_train: 80, quantile: 0.95, seed: 9 };
        let ds = generate_perfect(&w.prior, &w.pca, &w.stress, &cfg).unwrap();
        assert_eq!(count_extremes(&ds.train) + count_extremes(&ds.test), 5);
    }

    #[test]
    fn perfect_generation_is_deterministic() {
        let w: World<f64> = build_world(3).unwrap();
        let cfg = PerfectConfig { seed: 5, n_samples: 500, n_train: 400, quantile: 0.95 };
        let a = generate_perfect(&w.prior, &w.pca, &w.stress, &cfg).unwrap();
        let b = generate_perfect(&w.prior, &w.pca, &w.stress, &cfg).unwrap();
        assert_eq!(a.train.rows(), b.train.rows());
        assert_eq!(a.test.rows(), b.test.rows());
        assert_eq!(a.train.stress().unwrap(), b.train.stress().unwrap());
        assert_eq!(a.train.extreme().unwrap(), b.train.extreme().unwrap());
        assert_eq!(a.sigma_bar, b.sigma_bar);
        let c = generate_perfect(
            &w.prior,
            &w.pca,
            &w.stress,
            &PerfectConfig { seed: 6, ..cfg },
        )
        .unwrap();
        assert_ne!(a.train.rows(), c.train.rows());
    }

    #[test]
    fn dataset_directory_round_trips() {
        let w: World<f64> = build_world(4).unwrap();
        let cfg = PerfectConfig { n_samples: 200, n_train: 150, quantile: 0.9, seed: 77 };
        let ds = generate_perfect(&w.prior, &w.pca, &w.stress, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back: Dataset<f64> = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.train.rows(), ds.train.rows());
        assert_eq!(back.test.extreme().unwrap(), ds.test.extreme().unwrap());
        assert_eq!(back.sigma_bar, ds.sigma_bar);
        assert_eq!(back.quantile, ds.quantile);
        assert_eq!(back.seed, ds.seed);
        assert_eq!(back.train_provenance, ds.train_provenance);
    }

    fn synthetic_experimental_table(n: usize, seed: u64) -> (World<f64>, FeatureTable<f64>) {
        let w: World<f64> = build_world(seed).unwrap();
        let mut rng = stream_rng(seed + 500, 51);
        let latents = w.prior.sample_batch(n, &mut rng);
        let rows = w.pca.reconstruct_batch(&latents).unwrap();
        let mut stresses = w.stress.eval_batch(&rows).unwrap();
        for v in stresses.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal) * 0.05;
        }
        let names = (0..WORLD_FEATURES).map(|j| format!("f{j}")).collect();
        let table = FeatureTable::new(names, rows, Some(stresses), None).unwrap();
        (w, table)
    }

    #[test]
    fn mixed_dataset_splits_and_threshold() {
        let (w, exp) = synthetic_experimental_table(546, 10);
        let cfg = MixedConfig { seed: 21, ..Default::default() };
        let ds = generate_mixed(&w.prior, &w.pca, &w.stress, &cfg, &exp).unwrap();
        assert_eq!(ds.train.n(), 1000);
        assert_eq!(ds.test.n(), 700 + 246);
        let (tr_syn, tr_exp) = provenance_counts(&ds.train_provenance);
        assert_eq!((tr_syn, tr_exp), (700, 300));
        let (te_syn, te_exp) = provenance_counts(&ds.test_provenance);
        assert_eq!((te_syn, te_exp), (700, 246));
        // threshold comes from the experimental stresses alone
        let expect = select_threshold(exp.stress().unwrap().as_slice(), 0.95).unwrap();
        assert_eq!(ds.sigma_bar, expect);
        for t in [&ds.train, &ds.test] {
            let s = t.stress().unwrap();
            let e = t.extreme().unwrap();
            for i in 0..t.n() {
                assert_eq!(e[i], s[i] > ds.sigma_bar);
            }
        }
    }

    #[test]
    fn mixed_is_deterministic_and_exhaustive_over_experimental_rows() {
        let (w, exp) = synthetic_experimental_table(617, 11);
        let cfg = MixedConfig { seed: 33, ..Default::default() };
        let a = generate_mixed(&w.prior, &w.pca, &w.stress, &cfg, &exp).unwrap();
        let b = generate_mixed(&w.prior, &w.pca, &w.stress, &cfg, &exp).unwrap();
        assert_eq!(a.train.rows(), b.train.rows());
        assert_eq!(a.test.rows(), b.test.rows());
        let (_, te_exp) = provenance_counts(&a.test_provenance);
        assert_eq!(te_exp, 317);
        // every experimental stress value appears exactly once across splits
        let mut seen: Vec<f64> = Vec::new();
        for (t, prov) in [(&a.train, &a.train_provenance), (&a.test, &a.test_provenance)] {
            let s = t.stress().unwrap();
            for i in 0..t.n() {
                if prov[i] == Provenance::Experimental {
                    seen.push(s[i]);
                }
            }
        }
        let mut want: Vec<f64> = exp.stress().unwrap().iter().copied().collect();
        seen.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(seen, want);
    }

    #[test]
    fn mixed_without_synthetic_rows_is_a_pure_experimental_split() {
        let (w, exp) = synthetic_experimental_table(400, 12);
        let cfg = MixedConfig {
            n_synthetic: 0,
            n_train_synthetic: 0,
            n_train_experimental: 300,
            quantile: 0.95,
            seed: 2,
        };
        let ds = generate_mixed(&w.prior, &w.pca, &w.stress, &cfg, &exp).unwrap();
        assert_eq!(ds.train.n(), 300);
        assert_eq!(ds.test.n(), 100);
        assert!(ds.train_provenance.iter().all(|&p| p == Provenance::Experimental));
    }

    #[test]
    fn mixed_input_validation() {
        let (w, exp) = synthetic_experimental_table(200, 13);
        let cfg = MixedConfig { seed: 3, ..Default::default() };
        let err = generate_mixed(&w.prior, &w.pca, &w.stress, &cfg, &exp).unwrap_err();
        match err {
            Error::Validation(msg) => {
                assert!(msg.contains("300") && msg.contains("200"), "message: {msg}")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
        // rows without stress are rejected outright
        let no_stress = FeatureTable::new(
            exp.feature_names().to_vec(),
            exp.rows().clone(),
            None,
            None,
        )
        .unwrap();
        let big_cfg = MixedConfig { n_train_experimental: 100, ..cfg };
        assert!(generate_mixed(&w.prior, &w.pca, &w.stress, &big_cfg, &no_stress).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn exceedance_count_brackets_the_quantile_mass(seed in 0u64..300, n in 20usize..400, qi in 1usize..10) {
            let q = 0.05 * qi as f64 + 0.5;
            let mut rng = stream_rng(seed, 51);
            let stresses: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let t = select_threshold(&stresses, q).unwrap();
            let exceed = stresses.iter().filter(|&&s| s > t).count();
            let target = (1.0 - q) * n as f64;
            prop_assert!(exceed == target.ceil() as usize || exceed == target.floor() as usize,
                "{exceed} exceedances for target {target}");
        }

        #[test]
        fn perfect_flags_always_consistent(seed in 0u64..100) {
            let w: World<f64> = build_world(seed % 5).unwrap();
            let cfg = PerfectConfig { n_samples: 120, n_train: 90, quantile: 0.9, seed };
            let ds = generate_perfect(&w.prior, &w.pca, &w.stress, &cfg).unwrap();
            prop_assert_eq!(ds.train.n() + ds.test.n(), 120);
            for t in [&ds.train, &ds.test] {
                let s = t.stress().unwrap();
                let e = t.extreme().unwrap();
                for i in 0..t.n() {
                    prop_assert_eq!(e[i], s[i] > ds.sigma_bar);
                }
            }
        }
    }
}
