use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::FeatureTable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How features are rescaled before the eigendecomposition.
///
/// `ZScore` (the default) makes contribution maps comparable across features
/// with mixed physical units; `None` analyzes the raw covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    ZScore,
    None,
}

/// How many principal components to retain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimensionPolicy {
    Fixed(usize),
    /// Smallest d whose cumulative eigenvalue fraction reaches the given
    /// fraction in (0, 1].
    ExplainedVariance(f64),
}

impl Default for DimensionPolicy {
    fn default() -> Self {
        DimensionPolicy::ExplainedVariance(0.95)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PcaOptions {
    pub policy: DimensionPolicy,
    pub scaling: ScalingMode,
}

/// Per-feature affine transform applied before projection: subtract `shift`,
/// divide by `scale`. Zero-variance features keep scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization<S: Scalar> {
    pub shift: DVector<S>,
    pub scale: DVector<S>,
}

/// Linear latent map fitted by principal component analysis: holds the
/// standardization, the post-standardization mean, the retained eigenvector
/// columns, and their eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<S: Scalar> {
    mean: DVector<S>,
    components: DMatrix<S>,
    eigenvalues: DVector<S>,
    standardization: Standardization<S>,
}

impl<S: Scalar> PcaModel<S> {
    /// Diagonalizes the sample covariance of the (optionally z-scored)
    /// features and retains components per the dimension policy.
    pub fn fit(table: &FeatureTable<S>, opts: PcaOptions) -> Result<Self> {
        Self::fit_matrix(table.rows(), opts)
    }

    pub fn fit_matrix(rows: &DMatrix<S>, opts: PcaOptions) -> Result<Self> {
        let n = rows.nrows();
        let d_in = rows.ncols();
        if n < 2 {
            return Err(Error::validation(format!("need at least 2 rows, got {n}")));
        }
        if d_in < 1 {
            return Err(Error::validation("need at least 1 feature"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite entry in feature matrix"));
        }
        if let DimensionPolicy::ExplainedVariance(f) = opts.policy {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::validation(format!(
                    "explained-variance fraction {f} outside (0, 1]"
                )));
            }
        }

        let n_s = S::c(n as f64);
        let denom = S::c((n - 1) as f64);
        let col_mean = DVector::<S>::from_fn(d_in, |j, _| rows.column(j).iter().copied().sum::<S>() / n_s);
        let standardization = match opts.scaling {
            ScalingMode::ZScore => {
                let scale = DVector::from_fn(d_in, |j, _| {
                    let var = rows
                        .column(j)
                        .iter()
                        .map(|&v| (v - col_mean[j]) * (v - col_mean[j]))
                        .sum::<S>()
                        / denom;
                    let sd = var.sqrt();
                    if sd > S::zero() {
                        sd
                    } else {
                        S::one()
                    }
                });
                Standardization { shift: col_mean.clone(), scale }
            }
            ScalingMode::None => Standardization {
                shift: DVector::zeros(d_in),
                scale: DVector::from_element(d_in, S::one()),
            },
        };

        let std_rows = DMatrix::from_fn(n, d_in, |i, j| {
            (rows[(i, j)] - standardization.shift[j]) / standardization.scale[j]
        });
        let mean = DVector::<S>::from_fn(d_in, |j, _| std_rows.column(j).iter().copied().sum::<S>() / n_s);
        let centered = DMatrix::from_fn(n, d_in, |i, j| std_rows[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / denom;

        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d_in).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let eigenvalues_all: Vec<S> =
            order.iter().map(|&i| eig.eigenvalues[i].max(S::zero())).collect();
        let total: S = eigenvalues_all.iter().copied().sum();
        if total <= S::zero() {
            return Err(Error::validation(
                "zero total variance: all rows identical after standardization",
            ));
        }

        let d = match opts.policy {
            DimensionPolicy::Fixed(d) => {
                if d < 1 || d > d_in {
                    return Err(Error::validation(format!(
                        "retained dimension {d} outside 1..={d_in}"
                    )));
                }
                d
            }
            DimensionPolicy::ExplainedVariance(f) => {
                let target = S::c(f) - S::c(1e-12);
                let mut cum = S::zero();
                let mut d = d_in;
                for (k, &l) in eigenvalues_all.iter().enumerate() {
                    cum += l;
                    if cum / total >= target {
                        d = k + 1;
                        break;
                    }
                }
                d
            }
        };

        let mut components = DMatrix::<S>::zeros(d_in, d);
        for (k, &src) in order.iter().take(d).enumerate() {
            let mut col = eig.eigenvectors.column(src).clone_owned();
            let mut max_idx = 0;
            for j in 1..d_in {
                if col[j].abs() > col[max_idx].abs() {
                    max_idx = j;
                }
            }
            if col[max_idx] < S::zero() {
                col.neg_mut();
            }
            components.set_column(k, &col);
        }
        let eigenvalues = DVector::from_vec(eigenvalues_all[..d].to_vec());

        Ok(PcaModel { mean, components, eigenvalues, standardization })
    }

    pub fn n_features(&self) -> usize {
        self.components.nrows()
    }

    pub fn d(&self) -> usize {
        self.components.ncols()
    }

    pub fn mean(&self) -> &DVector<S> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<S> {
        &self.components
    }

    pub fn eigenvalues(&self) -> &DVector<S> {
        &self.eigenvalues
    }

    pub fn standardization(&self) -> &Standardization<S> {
        &self.standardization
    }

    /// Fraction of total variance captured per retained component; sums to
    /// at most 1.
    pub fn explained_fraction(&self) -> DVector<S> {
        let total: S = self.eigenvalues.iter().copied().sum();
        self.eigenvalues.map(|l| l / total)
    }

    pub fn project(&self, x: &DVector<S>) -> Result<DVector<S>> {
        if x.len() != self.n_features() {
            return Err(Error::validation(format!(
                "vector length {} for {}-feature model",
                x.len(),
                self.n_features()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite entry in input vector"));
        }
        let std = DVector::from_fn(x.len(), |j, _| {
            (x[j] - self.standardization.shift[j]) / self.standardization.scale[j] - self.mean[j]
        });
        Ok(self.components.transpose() * std)
    }

    pub fn reconstruct(&self, z: &DVector<S>) -> Result<DVector<S>> {
        if z.len() != self.d() {
            return Err(Error::validation(format!(
                "latent length {} for d={} model",
                z.len(),
                self.d()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite entry in latent vector"));
        }
        let std = &self.mean + &self.components * z;
        Ok(DVector::from_fn(self.n_features(), |j, _| {
            std[j] * self.standardization.scale[j] + self.standardization.shift[j]
        }))
    }

    /// Row-wise projection of an N x D matrix to N x d.
    pub fn project_batch(&self, rows: &DMatrix<S>) -> Result<DMatrix<S>> {
        if rows.ncols() != self.n_features() {
            return Err(Error::validation(format!(
                "matrix has {} columns, model expects {}",
                rows.ncols(),
                self.n_features()
            )));
        }
        let n = rows.nrows();
        let std = DMatrix::from_fn(n, rows.ncols(), |i, j| {
            (rows[(i, j)] - self.standardization.shift[j]) / self.standardization.scale[j]
                - self.mean[j]
        });
        Ok(std * &self.components)
    }

    /// Row-wise reconstruction of an N x d latent matrix to N x D.
    pub fn reconstruct_batch(&self, latents: &DMatrix<S>) -> Result<DMatrix<S>> {
        if latents.ncols() != self.d() {
            return Err(Error::validation(format!(
                "latent matrix has {} columns, model expects {}",
                latents.ncols(),
                self.d()
            )));
        }
        let std = latents * self.components.transpose();
        Ok(DMatrix::from_fn(std.nrows(), self.n_features(), |i, j| {
            (std[(i, j)] + self.mean[j]) * self.standardization.scale[j]
                + self.standardization.shift[j]
        }))
    }

    /// Feature-contribution matrix: entry (j, k) = |v_jk| * sqrt(lambda_k).
    pub fn contributions(&self) -> DMatrix<S> {
        DMatrix::from_fn(self.n_features(), self.d(), |j, k| {
            self.components[(j, k)].abs() * self.eigenvalues[k].sqrt()
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_json_file(path, &PcaModelDto::from(self))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let dto: PcaModelDto = crate::read_json_file(path)?;
        dto.into_model()
    }

    /// Assembles a model directly from its parts, with the same validation
    /// as the serialized form. `components` is `n_features x d`, one
    /// retained direction per column; `eigenvalues` must be nonincreasing
    /// and nonnegative; standardization scales must be positive.
    pub fn from_parts(
        mean: DVector<S>,
        components: DMatrix<S>,
        eigenvalues: DVector<S>,
        standardization: Standardization<S>,
    ) -> Result<Self> {
        let n_features = components.nrows();
        let d = components.ncols();
        if d < 1 || d > n_features {
            return Err(Error::validation(format!("d={d} outside 1..={n_features}")));
        }
        if mean.len() != n_features
            || eigenvalues.len() != d
            || standardization.shift.len() != n_features
            || standardization.scale.len() != n_features
        {
            return Err(Error::validation("inconsistent shapes in PCA model parts"));
        }
        if eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::validation("eigenvalues not nonincreasing"));
        }
        if eigenvalues.iter().any(|&l| l < S::zero()) {
            return Err(Error::validation("negative eigenvalue"));
        }
        if standardization.scale.iter().any(|&s| !(s > S::zero())) {
            return Err(Error::validation("non-positive standardization scale"));
        }
        Ok(PcaModel { mean, components, eigenvalues, standardization })
    }
}

/// Serialized form; `components` holds one eigenvector per entry
/// (column-major), all values as f64.
#[derive(Debug, Serialize, Deserialize)]
struct PcaModelDto {
    n_features: usize,
    d: usize,
    mean: Vec<f64>,
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    standardization: StandardizationDto,
}

#[derive(Debug, Serialize, Deserialize)]
struct StandardizationDto {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl<S: Scalar> From<&PcaModel<S>> for PcaModelDto {
    fn from(m: &PcaModel<S>) -> Self {
        PcaModelDto {
            n_features: m.n_features(),
            d: m.d(),
            mean: m.mean.iter().map(|v| v.f64()).collect(),
            components: (0..m.d())
                .map(|k| m.components.column(k).iter().map(|v| v.f64()).collect())
                .collect(),
            eigenvalues: m.eigenvalues.iter().map(|v| v.f64()).collect(),
            standardization: StandardizationDto {
                shift: m.standardization.shift.iter().map(|v| v.f64()).collect(),
                scale: m.standardization.scale.iter().map(|v| v.f64()).collect(),
            },
        }
    }
}

impl PcaModelDto {
    fn into_model<S: Scalar>(self) -> Result<PcaModel<S>> {
        let PcaModelDto { n_features, d, mean, components, eigenvalues, standardization } = self;
        if d < 1 || d > n_features {
            return Err(Error::validation(format!("d={d} outside 1..={n_features}")));
        }
        if mean.len() != n_features
            || components.len() != d
            || components.iter().any(|c| c.len() != n_features)
            || eigenvalues.len() != d
            || standardization.shift.len() != n_features
            || standardization.scale.len() != n_features
        {
            return Err(Error::validation("inconsistent shapes in PCA model file"));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::validation("eigenvalues not nonincreasing in PCA model file"));
        }
        if eigenvalues.iter().any(|&l| l < 0.0) {
            return Err(Error::validation("negative eigenvalue in PCA model file"));
        }
        if standardization.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::validation("non-positive standardization scale"));
        }
        let comp = DMatrix::from_fn(n_features, d, |j, k| S::c(components[k][j]));
        Ok(PcaModel {
            mean: DVector::from_iterator(n_features, mean.iter().map(|&v| S::c(v))),
            components: comp,
            eigenvalues: DVector::from_iterator(d, eigenvalues.iter().map(|&v| S::c(v))),
            standardization: Standardization {
                shift: DVector::from_iterator(n_features, standardization.shift.iter().map(|&v| S::c(v))),
                scale: DVector::from_iterator(n_features, standardization.scale.iter().map(|&v| S::c(v))),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, 99);
        DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn orthonormality_defect(m: &PcaModel<f64>) -> f64 {
        let g = m.components().transpose() * m.components();
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - want).abs());
            }
        }
        worst
    }

    #[test]
    fn axis_aligned_variance_picks_single_component() {
        let n = 50;
        let rows = DMatrix::from_fn(n, 2, |i, j| if j == 0 { i as f64 } else { 3.0 });
        let m = PcaModel::fit_matrix(&rows, PcaOptions::default()).unwrap();
        assert_eq!(m.d(), 1);
        assert_relative_eq!(m.components()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.components()[(1, 0)], 0.0, epsilon = 1e-12);

        let fixed = PcaModel::fit_matrix(
            &rows,
            PcaOptions { policy: DimensionPolicy::Fixed(2), ..Default::default() },
        )
        .unwrap();
        assert_relative_eq!(fixed.eigenvalues()[1], 0.0, epsilon = 1e-12);
        // zero-eigenvalue component contributes nothing
        let contrib = fixed.contributions();
        assert_relative_eq!(contrib[(0, 1)], 0.0, epsilon = 1e-10);
        assert_relative_eq!(contrib[(1, 1)], 0.0, epsilon = 1e-10);
        // first column is (sqrt(lambda_1), 0)
        assert_relative_eq!(contrib[(0, 0)], fixed.eigenvalues()[0].sqrt(), epsilon = 1e-12);
        assert_relative_eq!(contrib[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_fraction_retains_everything() {
        let rows = random_matrix(40, 4, 1);
        let m = PcaModel::fit_matrix(
            &rows,
            PcaOptions { policy: DimensionPolicy::ExplainedVariance(1.0), ..Default::default() },
        )
        .unwrap();
        assert_eq!(m.d(), 4);
    }

    #[test]
    fn known_diagonal_gaussian_recovers_spectrum() {
        let mut rng = stream_rng(7, 1);
        let sds = [2.0, 1.0, 0.1];
        let n = 4000;
        let rows = DMatrix::from_fn(n, 3, |_, j| sds[j] * rng.sample::<f64, _>(StandardNormal));
        let m = PcaModel::fit_matrix(
            &rows,
            PcaOptions {
                policy: DimensionPolicy::ExplainedVariance(0.95),
                scaling: ScalingMode::None,
            },
        )
        .unwrap();
        assert_eq!(m.d(), 2);
        assert_relative_eq!(m.eigenvalues()[0], 4.0, max_relative = 0.15);
        assert_relative_eq!(m.eigenvalues()[1], 1.0, max_relative = 0.15);
        // dominant contribution of PC1 is feature 1, near sqrt(4) = 2
        let contrib = m.contributions();
        assert!(contrib[(0, 0)] > contrib[(1, 0)] && contrib[(0, 0)] > contrib[(2, 0)]);
        assert_relative_eq!(contrib[(0, 0)], 2.0, max_relative = 0.15);
    }

    #[test]
    fn projection_centering_and_alignment() {
        let rows = random_matrix(200, 5, 2);
        let m = PcaModel::fit_matrix(&rows, PcaOptions::default()).unwrap();
        // the standardized mean point projects to the origin
        let x_mean = DVector::from_fn(5, |j, _| {
            m.standardization().shift[j]
                + m.standardization().scale[j] * m.mean()[j]
        });
        let z = m.project(&x_mean).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-10));
        // one eigenvector step lands on a basis vector
        let v1 = m.components().column(0).clone_owned();
        let x1 = DVector::from_fn(5, |j, _| {
            m.standardization().shift[j]
                + m.standardization().scale[j] * (m.mean()[j] + v1[j])
        });
        let z1 = m.project(&x1).unwrap();
        for k in 0..m.d() {
            let want = if k == 0 { 1.0 } else { 0.0 };
            assert_relative_eq!(z1[k], want, epsilon = 1e-9);
        }
    }

    #[test]
    fn reconstruct_at_origin_is_training_mean() {
        let rows = random_matrix(150, 4, 3);
        let m = PcaModel::fit_matrix(&rows, PcaOptions::default()).unwrap();
        let x0 = m.reconstruct(&DVector::zeros(m.d())).unwrap();
        for j in 0..4 {
            let col_mean = rows.column(j).mean();
            assert_relative_eq!(x0[j], col_mean, epsilon = 1e-10);
        }
    }

    #[test]
    fn full_rank_round_trip() {
        let rows = random_matrix(1000, 6, 4);
        for scaling in [ScalingMode::ZScore, ScalingMode::None] {
            let m = PcaModel::fit_matrix(
                &rows,
                PcaOptions { policy: DimensionPolicy::Fixed(6), scaling },
            )
            .unwrap();
            assert!(orthonormality_defect(&m) < 1e-8);
            let z = m.project_batch(&rows).unwrap();
            let back = m.reconstruct_batch(&z).unwrap();
            let worst = (&back - &rows).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(worst < 1e-10, "round-trip error {worst}");
        }
    }

    #[test]
    fn truncated_residual_orthogonal_to_retained_components() {
        let rows = random_matrix(300, 6, 5);
        let m = PcaModel::fit_matrix(
            &rows,
            PcaOptions { policy: DimensionPolicy::Fixed(3), ..Default::default() },
        )
        .unwrap();
        for i in 0..20 {
            let x = rows.row(i).transpose();
            let z = m.project(&x).unwrap();
            let xh = m.reconstruct(&z).unwrap();
            // compare in standardized coordinates, where the projection lives
            let resid = DVector::from_fn(6, |j, _| {
                (x[j] - xh[j]) / m.standardization().scale[j]
            });
            for k in 0..3 {
                let ip = m.components().column(k).dot(&resid);
                assert!(ip.abs() < 1e-8, "residual component {ip}");
            }
        }
    }

    #[test]
    fn projected_variances_nonincreasing() {
        let rows = random_matrix(400, 5, 6);
        let m = PcaModel::fit_matrix(&rows, PcaOptions::default()).unwrap();
        let z = m.project_batch(&rows).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..m.d() {
            let col = z.column(k);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.nrows() - 1) as f64;
            assert!(var <= last + 1e-9);
            last = var;
        }
    }

    #[test]
    fn degenerate_input_rejected() {
        let rows = DMatrix::from_element(10, 3, 2.5);
        let err = PcaModel::fit_matrix(&rows, PcaOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn length_mismatch_rejected() {
        let rows = random_matrix(50, 3, 7);
        let m = PcaModel::fit_matrix(&rows, PcaOptions::default()).unwrap();
        assert!(m.project(&DVector::zeros(4)).is_err());
        assert!(m.reconstruct(&DVector::zeros(m.d() + 1)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let rows = random_matrix(80, 4, 8);
        let m = PcaModel::fit_matrix(&rows, PcaOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.json");
        m.save_json(&path).unwrap();
        let back = PcaModel::<f64>::load_json(&path).unwrap();
        assert_eq!(m, back);
    }
}
