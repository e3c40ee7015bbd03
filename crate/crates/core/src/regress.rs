//! Least-squares engine.
//!
//! Every fit goes through a Householder QR of the (row-weighted) design; the
//! Gram inverse is only materialized for sandwich variances. Rank is checked on
//! the singular values of the triangular factor with a relative threshold of
//! `1e-10`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a design is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A labelled regressor block.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    column_labels: Vec<String>,
    has_intercept: bool,
}

impl DesignMatrix {
    pub fn new(
        values: DMatrix<f64>,
        column_labels: Vec<String>,
        has_intercept: bool,
    ) -> Result<Self> {
        if column_labels.len() != values.ncols() {
            return Err(Error::DimensionMismatch {
                what: "column labels",
                expected: values.ncols(),
                found: column_labels.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "design matrix".into(),
            });
        }
        let mut seen = HashSet::new();
        for label in &column_labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self {
            values,
            column_labels,
            has_intercept,
        })
    }

    /// Intercept-only design with `n` rows.
    pub fn intercept(n: usize) -> Self {
        Self {
            values: DMatrix::from_element(n, 1, 1.0),
            column_labels: vec!["(intercept)".into()],
            has_intercept: true,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_labels(&self) -> &[String] {
        &self.column_labels
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.column_labels.iter().position(|l| l == label)
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> DesignMatrix {
        DesignMatrix {
            values: self.values.select_columns(cols),
            column_labels: cols
                .iter()
                .map(|&c| self.column_labels[c].clone())
                .collect(),
            has_intercept: self.has_intercept && cols.contains(&0),
        }
    }
}

/// Heteroskedasticity-robust sandwich flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum HcFlavor {
    Hc0,
    #[default]
    Hc1,
}

/// Result of a (weighted) least-squares fit.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    /// `(X'ΩX)^{-1}` with `Ω = diag(weights)` (identity when unweighted).
    pub gram_inverse: DMatrix<f64>,
    pub weights: Option<DVector<f64>>,
    pub column_labels: Vec<String>,
    design: DMatrix<f64>,
}

impl RegressionFit {
    pub fn nobs(&self) -> usize {
        self.design.nrows()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.column_labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.coefficients[i])
    }
}

struct QrSolve {
    qr: nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: DMatrix<f64>,
}

fn factor(x: &DMatrix<f64>, labels: &[String]) -> Result<QrSolve> {
    let (n, p) = x.shape();
    if n < p {
        return Err(Error::TooFewRows { rows: n, cols: p });
    }
    if p == 0 {
        return Err(Error::InvalidArgument("design has no columns".into()));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let sv = r.clone().singular_values();
    let largest = sv.max();
    let smallest = sv.min();
    if !(largest > 0.0) || !(smallest > RANK_TOLERANCE * largest) {
        return Err(Error::RankDeficient {
            columns: collinear_columns(x, labels),
        });
    }
    Ok(QrSolve { qr, r })
}

impl QrSolve {
    fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let p = self.r.ncols();
        let mut qty = y.clone();
        self.qr.q_tr_mul(&mut qty);
        let head = qty.rows(0, p).into_owned();
        self.r
            .solve_upper_triangular(&head)
            .expect("triangular factor checked nonsingular")
    }

    fn gram_inverse(&self) -> DMatrix<f64> {
        let p = self.r.ncols();
        let r_inv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(p, p))
            .expect("triangular factor checked nonsingular");
        &r_inv * r_inv.transpose()
    }
}

/// Names the columns that are (numerically) spanned by the columns before
/// them. Greedy modified Gram-Schmidt in column order.
pub fn collinear_columns(x: &DMatrix<f64>, labels: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut flagged = Vec::new();
    let mut worst = (f64::INFINITY, 0usize);
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let rem = v.norm();
        let ratio = if norm > 0.0 { rem / norm } else { 0.0 };
        if ratio < worst.0 {
            worst = (ratio, j);
        }
        if ratio <= 1e-9 {
            flagged.push(labels[j].clone());
        } else {
            basis.push(v / rem);
        }
    }
    if flagged.is_empty() && x.ncols() > 0 {
        flagged.push(labels[worst.1].clone());
    }
    flagged
}

fn check_response(y: &[f64], n: usize) -> Result<DVector<f64>> {
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            what: "response",
            expected: n,
            found: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "response".into(),
        });
    }
    Ok(DVector::from_column_slice(y))
}

/// Ordinary least squares of `y` on the design.
pub fn ols_fit(y: &[f64], x: &DesignMatrix) -> Result<RegressionFit> {
    let y = check_response(y, x.nrows())?;
    let solver = factor(x.values(), x.column_labels())?;
    let coefficients = solver.solve(&y);
    let fitted = x.values() * &coefficients;
    let residuals = &y - &fitted;
    Ok(RegressionFit {
        coefficients,
        residuals,
        fitted,
        gram_inverse: solver.gram_inverse(),
        weights: None,
        column_labels: x.column_labels().to_vec(),
        design: x.values().clone(),
    })
}

/// Weighted least squares minimizing `Σ ωᵢ (yᵢ − xᵢ'b)²`.
pub fn wls_fit(y: &[f64], x: &DesignMatrix, weights: &[f64]) -> Result<RegressionFit> {
    let n = x.nrows();
    let y = check_response(y, n)?;
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: n,
            found: weights.len(),
        });
    }
    if let Some((row, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w > 0.0) || !w.is_finite())
    {
        return Err(Error::NonPositiveWeight { row, value });
    }
    let sqrt_w = DVector::from_iterator(n, weights.iter().map(|w| w.sqrt()));
    let mut xw = x.values().clone();
    for (mut row, s) in xw.row_iter_mut().zip(sqrt_w.iter()) {
        row *= *s;
    }
    let yw = y.component_mul(&sqrt_w);
    let solver = factor(&xw, x.column_labels())?;
    let coefficients = solver.solve(&yw);
    let fitted = x.values() * &coefficients;
    let residuals = &y - &fitted;
    Ok(RegressionFit {
        coefficients,
        residuals,
        fitted,
        gram_inverse: solver.gram_inverse(),
        weights: Some(DVector::from_column_slice(weights)),
        column_labels: x.column_labels().to_vec(),
        design: x.values().clone(),
    })
}

/// Residuals of each target column after projecting it onto the controls.
pub fn residualize(targets: &DMatrix<f64>, controls: &DesignMatrix) -> Result<DMatrix<f64>> {
    if targets.nrows() != controls.nrows() {
        return Err(Error::DimensionMismatch {
            what: "residualize targets",
            expected: controls.nrows(),
            found: targets.nrows(),
        });
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "residualize targets".into(),
        });
    }
    let solver = factor(controls.values(), controls.column_labels())?;
    let q = solver.qr.q();
    let coef = q.transpose() * targets;
    Ok(targets - q * coef)
}

/// Sandwich `(X'ΩX)⁻¹ X'Ω diag(e²) ΩX (X'ΩX)⁻¹`; HC1 rescales by `N/(N−P)`.
///
/// HC1 is undefined for an exactly identified fit (`N == P`) and comes back
/// as NaN there.
pub fn hc_variance(fit: &RegressionFit, flavor: HcFlavor) -> DMatrix<f64> {
    let x = fit.design();
    let (n, p) = x.shape();
    let mut scaled = x.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        let w = fit.weights.as_ref().map_or(1.0, |w| w[i]);
        row *= w * fit.residuals[i];
    }
    let meat = scaled.transpose() * &scaled;
    let mut v = &fit.gram_inverse * meat * &fit.gram_inverse;
    // symmetrize away rounding
    v = (&v + v.transpose()) * 0.5;
    match flavor {
        HcFlavor::Hc0 => v,
        HcFlavor::Hc1 => {
            let scale = if n > p {
                n as f64 / (n - p) as f64
            } else {
                f64::NAN
            };
            v * scale
        }
    }
}

/// Square roots of the diagonal of a covariance matrix.
pub fn standard_errors(v: &DMatrix<f64>) -> Vec<f64> {
    v.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect()
}
