//! Estimators of weighted averages of conditional effects that are free of
//! contamination from other arms: the interacted-regression ATE, the
//! one-at-a-time regression, and the common-weights regression.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_design, control_design, encode_treatments, Dataset, DesignSpec, Interaction, Strata,
};
use crate::error::{Error, Result};
use crate::oracle::PopulationSpec;
use crate::regress::{
    hc_variance, ols_fit, residualize, standard_errors, wls_fit, DesignMatrix, HcFlavor,
};

/// Propensities at or below this are treated as nonpositive.
pub const PROPENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    AteInteracted,
    OneAtATime,
    CommonWeights,
    Uninteracted,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Uninteracted,
        EstimatorKind::AteInteracted,
        EstimatorKind::OneAtATime,
        EstimatorKind::CommonWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::AteInteracted => "ate",
            EstimatorKind::OneAtATime => "one_at_a_time",
            EstimatorKind::CommonWeights => "common",
            EstimatorKind::Uninteracted => "uninteracted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightsSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl WeightsSummary {
    fn of(w: &[f64]) -> Self {
        Self {
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            mean: w.iter().sum::<f64>() / w.len() as f64,
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSet {
    pub kind: EstimatorKind,
    /// Names of the treatment arms, in coefficient order.
    pub arms: Vec<String>,
    pub beta: Vec<f64>,
    /// HC1 robust standard errors of the fitted regression.
    pub se_robust: Vec<f64>,
    /// Plug-in SEs treating the propensity scores as known.
    pub se_known_pscore: Option<Vec<f64>>,
    /// Plug-in SEs including the cost of estimating the weights (common weights only).
    pub se_estimated_pscore: Option<Vec<f64>>,
    pub n_used: usize,
    pub weights_summary: Option<WeightsSummary>,
    pub warnings: Vec<String>,
}

fn treatment_coefficients(
    fit: &crate::regress::RegressionFit,
    cols: std::ops::Range<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let se = standard_errors(&hc_variance(fit, HcFlavor::Hc1));
    (
        cols.clone().map(|j| fit.coefficients[j]).collect(),
        cols.map(|j| se[j]).collect(),
    )
}

fn attach_known_pscore(set: &mut EstimateSet, dataset: &Dataset, spec: &DesignSpec) {
    if !dataset.all_categorical() {
        set.warnings
            .push("known-propensity SEs need categorical controls; not computed".into());
        return;
    }
    let fitted = estimate_propensity(dataset, spec)
        .and_then(|p| known_pscore_variance(dataset, &PropensitySource::Estimated(&p), set.kind));
    match fitted {
        Ok(se) => {
            set.se_known_pscore = Some(se.known);
            set.se_estimated_pscore = se.estimated;
            set.warnings.extend(se.warnings);
        }
        Err(e) => set
            .warnings
            .push(format!("known-propensity SEs not computed: {e}")),
    }
}

/// The usual regression of the outcome on treatment indicators and controls.
pub fn uninteracted(dataset: &Dataset, spec: &DesignSpec) -> Result<EstimateSet> {
    let design = build_design(
        dataset,
        &DesignSpec::new(spec.control_style, Interaction::None),
    )?;
    let fit = ols_fit(&design.outcome, &design.matrix)?;
    let (beta, se_robust) = treatment_coefficients(&fit, design.treatments.clone());
    Ok(EstimateSet {
        kind: EstimatorKind::Uninteracted,
        arms: dataset.arm_names()[1..].to_vec(),
        beta,
        se_robust,
        se_known_pscore: None,
        se_estimated_pscore: None,
        n_used: dataset.n(),
        weights_summary: None,
        warnings: Vec::new(),
    })
}

fn require_full_cells(dataset: &Dataset) -> Result<()> {
    if !dataset.all_categorical() {
        return Ok(());
    }
    let strata = dataset.strata();
    for (s, cells) in strata
        .cell_counts(dataset.treatment(), dataset.k() + 1)
        .iter()
        .enumerate()
    {
        if let Some(d) = cells.iter().position(|&c| c == 0) {
            return Err(Error::EmptyCell {
                stratum: strata.labels[s].clone(),
                arm: dataset.arm_names()[d].clone(),
            });
        }
    }
    Ok(())
}

/// Unweighted average effects from the regression with treatment × demeaned
/// control interactions.
pub fn ate_interacted(dataset: &Dataset, spec: &DesignSpec) -> Result<EstimateSet> {
    require_full_cells(dataset)?;
    let design = build_design(
        dataset,
        &DesignSpec::new(spec.control_style, Interaction::Demeaned),
    )?;
    let fit = ols_fit(&design.outcome, &design.matrix)?;
    let (beta, se_robust) = treatment_coefficients(&fit, design.treatments.clone());
    let mut set = EstimateSet {
        kind: EstimatorKind::AteInteracted,
        arms: dataset.arm_names()[1..].to_vec(),
        beta,
        se_robust,
        se_known_pscore: None,
        se_estimated_pscore: None,
        n_used: dataset.n(),
        weights_summary: None,
        warnings: Vec::new(),
    };
    attach_known_pscore(&mut set, dataset, spec);
    Ok(set)
}

/// For each arm `k`, the regression of the outcome on `X_k` and controls
/// among units in the control arm or arm `k`.
pub fn one_at_a_time(dataset: &Dataset, spec: &DesignSpec) -> Result<EstimateSet> {
    let k = dataset.k();
    let mut beta = Vec::with_capacity(k);
    let mut se_robust = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for arm in 1..=k {
        let (sub, _) = dataset.restrict_arms(&[0, arm])?;
        if sub.all_categorical() {
            let strata = sub.strata();
            let one_sided = strata
                .cell_counts(sub.treatment(), 2)
                .iter()
                .filter(|c| c[0] == 0 || c[1] == 0)
                .count();
            if one_sided > 0 {
                warnings.push(format!(
                    "arm {}: {one_sided} strata contain only one of the two arms and get zero weight",
                    dataset.arm_names()[arm]
                ));
            }
        }
        let design = build_design(
            &sub,
            &DesignSpec::new(spec.control_style, Interaction::None),
        )?;
        let fit = ols_fit(&design.outcome, &design.matrix)?;
        let (b, s) = treatment_coefficients(&fit, design.treatments.clone());
        beta.push(b[0]);
        se_robust.push(s[0]);
    }
    let mut set = EstimateSet {
        kind: EstimatorKind::OneAtATime,
        arms: dataset.arm_names()[1..].to_vec(),
        beta,
        se_robust,
        se_known_pscore: None,
        se_estimated_pscore: None,
        n_used: dataset.n(),
        weights_summary: None,
        warnings,
    };
    attach_known_pscore(&mut set, dataset, spec);
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMethod {
    LinearProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    /// `N × (K+1)`; column 0 is the control arm.
    pub p_hat: DMatrix<f64>,
    pub method: PropensityMethod,
}

impl PropensityFit {
    /// Rows with some fitted propensity at or below zero.
    pub fn nonpositive_rows(&self) -> Vec<usize> {
        (0..self.p_hat.nrows())
            .filter(|&i| self.p_hat.row(i).iter().any(|&p| p <= PROPENSITY_FLOOR))
            .collect()
    }
}

/// Fitted values from projecting each arm indicator on the controls;
/// the control-arm column is the complement.
pub fn estimate_propensity(dataset: &Dataset, spec: &DesignSpec) -> Result<PropensityFit> {
    let x = encode_treatments(dataset);
    let controls = control_design(dataset, spec.control_style)?;
    let fitted = &x - residualize(&x, &controls)?;
    let k = dataset.k();
    let p_hat = DMatrix::from_fn(dataset.n(), k + 1, |i, j| {
        if j == 0 {
            1.0 - fitted.row(i).sum()
        } else {
            fitted[(i, j - 1)]
        }
    });
    Ok(PropensityFit {
        p_hat,
        method: PropensityMethod::LinearProjection,
    })
}

/// Weighted regression of the outcome on arm indicators with observation
/// weights `λ̂ᶜ(Wᵢ)/p̂_{Dᵢ}(Wᵢ)`, `λ̂ᶜ = 1/Σ_k p̂_k⁻¹`.
pub fn common_weights(dataset: &Dataset, spec: &DesignSpec) -> Result<EstimateSet> {
    let p = estimate_propensity(dataset, spec)?;
    let bad = p.nonpositive_rows();
    let mut warnings = Vec::new();
    if bad.len() == dataset.n() {
        return Err(Error::NonPositivePropensity {
            excluded: bad.len(),
        });
    }
    let mut keep = vec![true; dataset.n()];
    for &i in &bad {
        keep[i] = false;
    }
    if !bad.is_empty() {
        warnings.push(format!(
            "{} rows with a nonpositive fitted propensity were excluded; the weighted estimand changes accordingly",
            bad.len()
        ));
    }
    let rows: Vec<usize> = (0..dataset.n()).filter(|&i| keep[i]).collect();
    let sub = dataset.subset(&rows).map_err(|_| Error::EmptyCell {
        stratum: "(rows with positive propensities)".into(),
        arm: "some arm".into(),
    })?;
    let weights: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let lc = 1.0 / p.p_hat.row(i).iter().map(|v| 1.0 / v).sum::<f64>();
            lc / p.p_hat[(i, dataset.treatment()[i])]
        })
        .collect();
    let k = dataset.k();
    let x = encode_treatments(&sub);
    let values = DMatrix::from_fn(
        sub.n(),
        k + 1,
        |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] },
    );
    let mut labels = vec!["(intercept)".to_string()];
    labels.extend(sub.arm_names()[1..].iter().map(|a| format!("D={a}")));
    let design = DesignMatrix::new(values, labels, true)?;
    let fit = wls_fit(sub.outcome(), &design, &weights)?;
    let (beta, se_robust) = treatment_coefficients(&fit, 1..k + 1);
    let mut set = EstimateSet {
        kind: EstimatorKind::CommonWeights,
        arms: dataset.arm_names()[1..].to_vec(),
        beta,
        se_robust,
        se_known_pscore: None,
        se_estimated_pscore: None,
        n_used: sub.n(),
        weights_summary: Some(WeightsSummary::of(&weights)),
        warnings,
    };
    attach_known_pscore(&mut set, dataset, spec);
    Ok(set)
}

/// Runs every estimator kind; failures are returned in place.
pub fn estimate_all(
    dataset: &Dataset,
    spec: &DesignSpec,
) -> Vec<(EstimatorKind, Result<EstimateSet>)> {
    EstimatorKind::ALL
        .iter()
        .map(|&kind| (kind, estimate(dataset, spec, kind)))
        .collect()
}

pub fn estimate(dataset: &Dataset, spec: &DesignSpec, kind: EstimatorKind) -> Result<EstimateSet> {
    match kind {
        EstimatorKind::Uninteracted => uninteracted(dataset, spec),
        EstimatorKind::AteInteracted => ate_interacted(dataset, spec),
        EstimatorKind::OneAtATime => one_at_a_time(dataset, spec),
        EstimatorKind::CommonWeights => common_weights(dataset, spec),
    }
}

/// Where the propensity scores for the known-propensity variance come from.
#[derive(Debug, Clone, Copy)]
pub enum PropensitySource<'a> {
    /// Fitted scores; outcome moments come from within-cell sample moments.
    Estimated(&'a PropensityFit),
    /// Population scores, outcome variances and effects from a spec.
    Population(&'a PopulationSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnownPscoreSe {
    /// Variance as if the weights and propensities were known.
    pub known: Vec<f64>,
    /// Adds the cost of estimating the weights; common weights only.
    pub estimated: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Per-stratum moments feeding the variance formulas.
struct StratumMoments {
    mass: f64,
    p: Vec<f64>,
    sigma2: Vec<f64>,
    tau: Vec<f64>,
}

fn stratum_weight(kind: EstimatorKind, p: &[f64], arm: usize) -> f64 {
    match kind {
        EstimatorKind::AteInteracted | EstimatorKind::Uninteracted => 1.0,
        EstimatorKind::OneAtATime => p[0] * p[arm] / (p[0] + p[arm]),
        EstimatorKind::CommonWeights => 1.0 / p.iter().map(|v| 1.0 / v).sum::<f64>(),
    }
}

/// Asymptotic variances (not yet divided by `N`) of the λ-weighted contrast
/// of each arm with control.
fn weighted_variances(
    moments: &[StratumMoments],
    kind: EstimatorKind,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut known = Vec::with_capacity(k);
    let mut estimated = Vec::with_capacity(k);
    for arm in 1..=k {
        let lam: Vec<f64> = moments
            .iter()
            .map(|m| stratum_weight(kind, &m.p, arm))
            .collect();
        let mean: f64 = moments.iter().zip(&lam).map(|(m, l)| m.mass * l).sum();
        let target: f64 = moments
            .iter()
            .zip(&lam)
            .map(|(m, l)| m.mass * l * m.tau[arm - 1])
            .sum::<f64>()
            / mean;
        let mut v = 0.0;
        let mut penalty = 0.0;
        for (m, &l) in moments.iter().zip(&lam) {
            v += m.mass * l * l * (m.sigma2[0] / m.p[0] + m.sigma2[arm] / m.p[arm]);
            let curvature: f64 = m.p.iter().map(|p| l * l / p.powi(3)).sum::<f64>() - 1.0;
            penalty += m.mass * l * l * (m.tau[arm - 1] - target).powi(2) * curvature;
        }
        known.push(v / (mean * mean));
        estimated.push((v + penalty) / (mean * mean));
    }
    (known, estimated)
}

/// Plug-in standard errors assuming known propensity scores, for the
/// weighting implied by `kind`; for common weights also the version that
/// accounts for estimating the weights.
pub fn known_pscore_variance(
    dataset: &Dataset,
    source: &PropensitySource,
    kind: EstimatorKind,
) -> Result<KnownPscoreSe> {
    let k = dataset.k();
    let n = dataset.n() as f64;
    let mut warnings = Vec::new();
    let moments = match source {
        PropensitySource::Estimated(fit) => {
            if !dataset.all_categorical() {
                return Err(Error::InvalidArgument(
                    "within-cell outcome moments need categorical controls".into(),
                ));
            }
            let bad = fit.nonpositive_rows().len();
            if bad > 0 {
                return Err(Error::NonPositivePropensity { excluded: bad });
            }
            let strata = dataset.strata();
            sample_moments(dataset, &strata, fit, &mut warnings)
        }
        PropensitySource::Population(spec) => {
            if spec.k() != k {
                return Err(Error::DimensionMismatch {
                    what: "spec arms",
                    expected: k,
                    found: spec.k(),
                });
            }
            let mut out = Vec::new();
            for (s, st) in spec.strata.iter().enumerate() {
                if st.mass == 0.0 {
                    continue;
                }
                if let Some(arm) = st.p.iter().position(|&p| p <= PROPENSITY_FLOOR) {
                    return Err(Error::ZeroPropensity { stratum: s, arm });
                }
                out.push(StratumMoments {
                    mass: st.mass,
                    p: st.p.clone(),
                    sigma2: st.sigma2.clone(),
                    tau: spec.tau(s),
                });
            }
            out
        }
    };
    let (known, estimated) = weighted_variances(&moments, kind, k);
    let se = |v: Vec<f64>| {
        v.into_iter()
            .map(|x| (x.max(0.0) / n).sqrt())
            .collect::<Vec<_>>()
    };
    Ok(KnownPscoreSe {
        known: se(known),
        estimated: (kind == EstimatorKind::CommonWeights).then(|| se(estimated)),
        warnings,
    })
}

fn sample_moments(
    dataset: &Dataset,
    strata: &Strata,
    fit: &PropensityFit,
    warnings: &mut Vec<String>,
) -> Vec<StratumMoments> {
    let arms = dataset.k() + 1;
    let s_count = strata.len();
    let mut sum = vec![vec![0.0; arms]; s_count];
    let mut count = vec![vec![0usize; arms]; s_count];
    for i in 0..dataset.n() {
        let (s, d) = (strata.ids[i], dataset.treatment()[i]);
        sum[s][d] += dataset.outcome()[i];
        count[s][d] += 1;
    }
    let mean: Vec<Vec<f64>> = (0..s_count)
        .map(|s| {
            (0..arms)
                .map(|d| {
                    if count[s][d] > 0 {
                        sum[s][d] / count[s][d] as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut ss = vec![vec![0.0; arms]; s_count];
    for i in 0..dataset.n() {
        let (s, d) = (strata.ids[i], dataset.treatment()[i]);
        ss[s][d] += (dataset.outcome()[i] - mean[s][d]).powi(2);
    }
    // arm-pooled within-cell variance for cells too small to have their own
    let pooled: Vec<f64> = (0..arms)
        .map(|d| {
            let df: usize = (0..s_count).map(|s| count[s][d].saturating_sub(1)).sum();
            let total: f64 = (0..s_count).map(|s| ss[s][d]).sum();
            if df > 0 {
                total / df as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut small = 0;
    let moments = (0..s_count)
        .map(|s| {
            let sigma2 = (0..arms)
                .map(|d| {
                    if count[s][d] >= 2 {
                        ss[s][d] / (count[s][d] - 1) as f64
                    } else {
                        small += 1;
                        pooled[d]
                    }
                })
                .collect();
            let p = fit
                .p_hat
                .row(strata.representative[s])
                .iter()
                .copied()
                .collect();
            StratumMoments {
                mass: strata.counts[s] as f64 / dataset.n() as f64,
                p,
                sigma2,
                tau: (1..arms).map(|d| mean[s][d] - mean[s][0]).collect(),
            }
        })
        .collect();
    if small > 0 {
        warnings.push(format!("{small} cells have fewer than two observations; their variance uses the arm-pooled estimate"));
    }
    moments
}
