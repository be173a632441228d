use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One monomial of the quadratic stress expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Linear,
    Product,
    Square,
}

/// A single term: `linear` reads feature `a`, `square` multiplies feature
/// `a` with itself (`b` mirrors `a`), `product` multiplies features `a` and
/// `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub kind: TermKind,
    pub a: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b: Option<usize>,
}

impl Term {
    pub fn linear(a: usize) -> Self {
        Term { kind: TermKind::Linear, a, b: None }
    }

    pub fn square(a: usize) -> Self {
        Term { kind: TermKind::Square, a, b: Some(a) }
    }

    pub fn product(a: usize, b: usize) -> Self {
        Term { kind: TermKind::Product, a, b: Some(b) }
    }
}

/// Ordered list of monomials over a fixed feature dimension. Terms are data,
/// not code: different physical systems ship different term files over their
/// own feature namings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub n_features: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feature_names: Option<Vec<String>>,
    pub terms: Vec<Term>,
}

impl TermSpec {
    pub fn new(n_features: usize, terms: Vec<Term>) -> Result<Self> {
        let spec = TermSpec { n_features, feature_names: None, terms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::validation("term spec needs at least one feature"));
        }
        if self.terms.is_empty() {
            return Err(Error::validation("term spec needs at least one term"));
        }
        if let Some(names) = &self.feature_names {
            if names.len() != self.n_features {
                return Err(Error::validation(format!(
                    "{} feature names for {} features",
                    names.len(),
                    self.n_features
                )));
            }
        }
        for (t, term) in self.terms.iter().enumerate() {
            if term.a >= self.n_features {
                return Err(Error::validation(format!(
                    "term {t}: feature index {} outside dimension {}",
                    term.a, self.n_features
                )));
            }
            match term.kind {
                TermKind::Linear => {
                    if term.b.is_some() {
                        return Err(Error::validation(format!(
                            "term {t}: linear term must not carry a second index"
                        )));
                    }
                }
                TermKind::Square => {
                    if term.b != Some(term.a) {
                        return Err(Error::validation(format!(
                            "term {t}: square term must have matching indices"
                        )));
                    }
                }
                TermKind::Product => match term.b {
                    Some(b) if b < self.n_features => {}
                    Some(b) => {
                        return Err(Error::validation(format!(
                            "term {t}: feature index {b} outside dimension {}",
                            self.n_features
                        )));
                    }
                    None => {
                        return Err(Error::validation(format!(
                            "term {t}: product term needs a second index"
                        )));
                    }
                },
            }
        }
        Ok(())
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    fn eval_term<S: Scalar>(&self, t: usize, x: &DVector<S>) -> S {
        let term = &self.terms[t];
        match term.kind {
            TermKind::Linear => x[term.a],
            TermKind::Square => x[term.a] * x[term.a],
            TermKind::Product => x[term.a] * x[term.b.expect("validated product index")],
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_json_file(path, self)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let spec: TermSpec = crate::read_json_file(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Materializes the monomial columns for a batch of feature rows.
pub fn design_matrix<S: Scalar>(spec: &TermSpec, rows: &DMatrix<S>) -> Result<DMatrix<S>> {
    if rows.ncols() != spec.n_features {
        return Err(Error::validation(format!(
            "matrix has {} columns, term spec expects {}",
            rows.ncols(),
            spec.n_features
        )));
    }
    let n = rows.nrows();
    let mut m = DMatrix::zeros(n, spec.n_terms());
    for i in 0..n {
        let x = rows.row(i).transpose();
        for t in 0..spec.n_terms() {
            m[(i, t)] = spec.eval_term(t, &x);
        }
    }
    Ok(m)
}

/// Quadratic stress surrogate: intercept plus a coefficient per term.
#[derive(Debug, Clone, PartialEq)]
pub struct StressModel<S: Scalar> {
    termspec: TermSpec,
    beta: DVector<S>,
    intercept: S,
}

impl<S: Scalar> StressModel<S> {
    pub fn new(termspec: TermSpec, beta: DVector<S>, intercept: S) -> Result<Self> {
        termspec.validate()?;
        if beta.len() != termspec.n_terms() {
            return Err(Error::validation(format!(
                "{} coefficients for {} terms",
                beta.len(),
                termspec.n_terms()
            )));
        }
        if beta.iter().any(|v| !v.is_finite()) || !intercept.is_finite() {
            return Err(Error::validation("non-finite stress coefficient"));
        }
        Ok(StressModel { termspec, beta, intercept })
    }

    pub fn termspec(&self) -> &TermSpec {
        &self.termspec
    }

    pub fn beta(&self) -> &DVector<S> {
        &self.beta
    }

    pub fn intercept(&self) -> S {
        self.intercept
    }

    pub fn n_features(&self) -> usize {
        self.termspec.n_features
    }

    /// Predicted stress at one feature vector.
    pub fn eval(&self, x: &DVector<S>) -> Result<S> {
        if x.len() != self.termspec.n_features {
            return Err(Error::validation(format!(
                "vector length {} for {}-feature model",
                x.len(),
                self.termspec.n_features
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite entry in input vector"));
        }
        let mut acc = self.intercept;
        for t in 0..self.termspec.n_terms() {
            acc += self.beta[t] * self.termspec.eval_term(t, x);
        }
        Ok(acc)
    }

    pub fn eval_batch(&self, rows: &DMatrix<S>) -> Result<DVector<S>> {
        let m = design_matrix(&self.termspec, rows)?;
        let mut out = m * &self.beta;
        out.add_scalar_mut(self.intercept);
        Ok(out)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_json_file(path, &StressModelDto::from(self))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let dto: StressModelDto = crate::read_json_file(path)?;
        StressModel::new(
            dto.termspec,
            DVector::from_iterator(dto.beta.len(), dto.beta.iter().map(|&v| S::c(v))),
            S::c(dto.intercept),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StressModelDto {
    termspec: TermSpec,
    beta: Vec<f64>,
    intercept: f64,
}

impl<S: Scalar> From<&StressModel<S>> for StressModelDto {
    fn from(m: &StressModel<S>) -> Self {
        StressModelDto {
            termspec: m.termspec.clone(),
            beta: m.beta.iter().map(|v| v.f64()).collect(),
            intercept: m.intercept.f64(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StressFitOptions {
    /// L2 penalty on the coefficients; the intercept is never penalized.
    pub ridge: f64,
    pub fit_intercept: bool,
}

impl Default for StressFitOptions {
    fn default() -> Self {
        StressFitOptions { ridge: 1e-8, fit_intercept: true }
    }
}

/// Ridge least squares on the term design matrix, solved by column-pivoted QR
/// on the (optionally ridge-augmented) system.
pub fn fit_stress<S: Scalar>(
    rows: &DMatrix<S>,
    sigma: &DVector<S>,
    termspec: &TermSpec,
    opts: StressFitOptions,
) -> Result<StressModel<S>> {
    termspec.validate()?;
    let n = rows.nrows();
    let t = termspec.n_terms();
    if sigma.len() != n {
        return Err(Error::validation(format!(
            "{} stress values for {} rows",
            sigma.len(),
            n
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite stress value"));
    }
    if !(opts.ridge >= 0.0) {
        return Err(Error::validation("ridge must be nonnegative"));
    }
    if opts.ridge == 0.0 && n <= t {
        return Err(Error::validation(format!(
            "{n} rows cannot determine {t} coefficients without ridge"
        )));
    }

    let m = design_matrix(termspec, rows)?;
    let (mc, sc, m_means, s_mean) = if opts.fit_intercept {
        let n_s = S::c(n as f64);
        let m_means = DVector::<S>::from_fn(t, |j, _| m.column(j).iter().copied().sum::<S>() / n_s);
        let s_mean = sigma.iter().copied().sum::<S>() / n_s;
        let mc = DMatrix::from_fn(n, t, |i, j| m[(i, j)] - m_means[j]);
        let sc = DVector::from_fn(n, |i, _| sigma[i] - s_mean);
        (mc, sc, m_means, s_mean)
    } else {
        (m, sigma.clone(), DVector::zeros(t), S::zero())
    };

    let beta = if opts.ridge > 0.0 {
        let sqrt_ridge = S::c(opts.ridge.sqrt());
        let mut a = DMatrix::zeros(n + t, t);
        a.view_mut((0, 0), (n, t)).copy_from(&mc);
        for j in 0..t {
            a[(n + j, j)] = sqrt_ridge;
        }
        let mut b = DVector::zeros(n + t);
        b.rows_mut(0, n).copy_from(&sc);
        qr_least_squares(a, &b, false)?
    } else {
        qr_least_squares(mc, &sc, true)?
    };

    let intercept = if opts.fit_intercept { s_mean - m_means.dot(&beta) } else { S::zero() };
    StressModel::new(termspec.clone(), beta, intercept)
}

/// Minimum-residual solution of a tall system via column-pivoted QR:
/// x = P R^-1 (Q^T b). With `rank_check` the triangular factor's diagonal is
/// screened and a deficient design is reported instead of silently solved.
fn qr_least_squares<S: Scalar>(
    a: DMatrix<S>,
    b: &DVector<S>,
    rank_check: bool,
) -> Result<DVector<S>> {
    let t = a.ncols();
    let qr = a.col_piv_qr();
    let r = qr.r();
    if rank_check {
        let r00 = r[(0, 0)].abs();
        let tol = r00 * S::c(1e-10);
        if r00 == S::zero() || (0..t).any(|j| r[(j, j)].abs() <= tol) {
            return Err(Error::numerical(
                "design matrix is rank deficient; refit with ridge > 0",
            ));
        }
    }
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let rhs = qtb.rows(0, t).into_owned();
    let mut x = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::numerical("singular triangular factor in least-squares solve"))?;
    qr.p().inv_permute_rows(&mut x);
    Ok(x)
}

/// All monomials of a full quadratic over `d` features: every linear term,
/// every square, and every unordered cross product, in that order.
pub fn full_quadratic_termspec(d: usize) -> TermSpec {
    let mut terms = Vec::new();
    for a in 0..d {
        terms.push(Term::linear(a));
    }
    for a in 0..d {
        terms.push(Term::square(a));
    }
    for a in 0..d {
        for b in (a + 1)..d {
            terms.push(Term::product(a, b));
        }
    }
    TermSpec { n_features: d, feature_names: None, terms }
}

/// Feature layout and term families of the bicrystal stress expansion,
/// generalized to `n_gr` grains. Feature groups, in order: the dislocation
/// density root; per-grain slip eigenvalues and their maxima (3 each); the
/// per-grain elastic strain tensor (9 entries); per-grain stiffness
/// diagonals (3); per-grain resolved shear stresses and their maxima
/// (5 each); and per grain pair the squared slip-direction alignments and
/// their maxima (3 each).
pub fn bicrystal_termspec(n_gr: usize) -> Result<TermSpec> {
    if n_gr < 1 {
        return Err(Error::validation("need at least one grain"));
    }
    let mut names: Vec<String> = Vec::new();
    names.push("sqrt_rho_ssd".to_string());
    let mut lambda = Vec::new();
    let mut lambda_max = Vec::new();
    let mut ee = Vec::new();
    let mut c_diag = Vec::new();
    let mut tau = Vec::new();
    let mut tau_max = Vec::new();
    for g in 1..=n_gr {
        for i in 1..=3 {
            lambda.push(names.len());
            names.push(format!("lambda_{i}_G{g}"));
        }
    }
    for g in 1..=n_gr {
        for i in 1..=3 {
            lambda_max.push(names.len());
            names.push(format!("lambda_max_{i}_G{g}"));
        }
    }
    for g in 1..=n_gr {
        for i in 1..=3 {
            for j in 1..=3 {
                ee.push(names.len());
                names.push(format!("Ee_{i}{j}_G{g}"));
            }
        }
    }
    for g in 1..=n_gr {
        for i in 1..=3 {
            c_diag.push(names.len());
            names.push(format!("C_{i}{i}_G{g}"));
        }
    }
    for g in 1..=n_gr {
        for i in 1..=5 {
            tau.push(names.len());
            names.push(format!("tau_{i}_G{g}"));
        }
    }
    for g in 1..=n_gr {
        for i in 1..=5 {
            tau_max.push(names.len());
            names.push(format!("tau_max_{i}_G{g}"));
        }
    }
    let mut vdot2 = Vec::new();
    let mut vdot2_max = Vec::new();
    for gn in 1..=n_gr {
        for gm in (gn + 1)..=n_gr {
            for i in 1..=3 {
                vdot2.push(names.len());
                names.push(format!("vdot2_{i}_G{gn}{gm}"));
            }
        }
    }
    for gn in 1..=n_gr {
        for gm in (gn + 1)..=n_gr {
            for i in 1..=3 {
                vdot2_max.push(names.len());
                names.push(format!("vdot2max_{i}_G{gn}{gm}"));
            }
        }
    }

    let mut terms = Vec::new();
    // linear families over density, slip eigenvalues, elastic strain, and
    // stiffness diagonals
    terms.push(Term::linear(0));
    terms.extend(lambda.iter().map(|&a| Term::linear(a)));
    terms.extend(lambda_max.iter().map(|&a| Term::linear(a)));
    terms.extend(ee.iter().map(|&a| Term::linear(a)));
    terms.extend(c_diag.iter().map(|&a| Term::linear(a)));
    // cross-grain slip eigenvalue products: all index pairs, then matched
    // maxima
    for gn in 0..n_gr {
        for gm in (gn + 1)..n_gr {
            for i in 0..3 {
                for j in 0..3 {
                    terms.push(Term::product(lambda[3 * gn + i], lambda[3 * gm + j]));
                }
            }
        }
    }
    for gn in 0..n_gr {
        for gm in (gn + 1)..n_gr {
            for i in 0..3 {
                terms.push(Term::product(lambda_max[3 * gn + i], lambda_max[3 * gm + i]));
            }
        }
    }
    // squared elastic strain and stiffness terms
    terms.extend(ee.iter().map(|&a| Term::square(a)));
    terms.extend(c_diag.iter().map(|&a| Term::square(a)));
    // cross-grain resolved shear products: all index pairs, then matched
    // maxima
    for gn in 0..n_gr {
        for gm in (gn + 1)..n_gr {
            for i in 0..5 {
                for j in 0..5 {
                    terms.push(Term::product(tau[5 * gn + i], tau[5 * gm + j]));
                }
            }
        }
    }
    for gn in 0..n_gr {
        for gm in (gn + 1)..n_gr {
            for i in 0..5 {
                terms.push(Term::product(tau_max[5 * gn + i], tau_max[5 * gm + i]));
            }
        }
    }
    // alignment families enter linearly (already squared quantities)
    terms.extend(vdot2.iter().map(|&a| Term::linear(a)));
    terms.extend(vdot2_max.iter().map(|&a| Term::linear(a)));

    let spec = TermSpec { n_features: names.len(), feature_names: Some(names), terms };
    spec.validate()?;
    Ok(spec)
}
