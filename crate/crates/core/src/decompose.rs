//! Exact sample decomposition of multi-treatment regression coefficients
//! into own-effect and contamination components, plus the diagnostics built
//! on it: per-stratum weights, weight/effect correlations, worst-case
//! reordering bounds, and noise-adjusted effect dispersion.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_design, control_design, encode_treatments, ControlStyle, Dataset, DesignSpec,
    Interaction, Strata,
};
use crate::error::{Error, Result};
use crate::regress::{
    collinear_columns, hc_variance, ols_fit, residualize, standard_errors, DesignMatrix, HcFlavor,
};

/// Most redraws a single bootstrap replicate may use before giving up.
pub const MAX_REDRAWS_PER_REPLICATE: usize = 10;

/// Per-observation weight matrices `Λ̂ᵢ = (Ẋ'Ẋ)⁻¹ Ẋᵢ Xᵢ'`, where `Ẋ` is the
/// treatment block residualized on `controls`. They sum to the identity.
pub fn lambda_matrices(x: &DMatrix<f64>, controls: &DesignMatrix) -> Result<Vec<DMatrix<f64>>> {
    let k = x.ncols();
    let xdot = residualize(x, controls)?;
    let degenerate =
        (0..k).any(|j| xdot.column(j).norm() <= 1e-10 * x.column(j).norm().max(f64::MIN_POSITIVE));
    let gram = xdot.transpose() * &xdot;
    let inv = match (degenerate, gram.clone().cholesky()) {
        (false, Some(chol)) => chol.inverse(),
        _ => {
            let mut joint = DMatrix::zeros(x.nrows(), controls.ncols() + k);
            joint
                .columns_mut(0, controls.ncols())
                .copy_from(controls.values());
            joint.columns_mut(controls.ncols(), k).copy_from(x);
            let mut labels = controls.column_labels().to_vec();
            labels.extend((1..=k).map(|j| format!("D{j}")));
            return Err(Error::RankDeficient {
                columns: collinear_columns(&joint, &labels),
            });
        }
    };
    Ok((0..x.nrows())
        .map(|i| {
            let xd = &inv * xdot.row(i).transpose();
            xd * x.row(i)
        })
        .collect())
}

/// A stratum left out of the conditional-effect fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedStratum {
    pub stratum: String,
    pub missing_arms: Vec<String>,
}

/// Conditional effect estimates `τ̂(w)` for every stratum of the sample.
#[derive(Debug, Clone)]
pub struct ConditionalAtes {
    pub strata: Strata,
    /// `None` for excluded strata.
    pub tau: Vec<Option<Vec<f64>>>,
    pub se: Vec<Option<Vec<f64>>>,
    pub excluded: Vec<ExcludedStratum>,
}

impl ConditionalAtes {
    /// `τ̂(Wᵢ)` for row `i`, if its stratum was estimable.
    pub fn tau_of_row(&self, i: usize) -> Option<&[f64]> {
        self.tau[self.strata.ids[i]].as_deref()
    }
}

fn arm_restricted(dataset: &Dataset, spec: &DesignSpec) -> Result<(Dataset, DesignSpec)> {
    let mut plain = spec.clone();
    match plain.subsample.take() {
        Some(arms) => Ok((dataset.restrict_arms(&arms)?.0, plain)),
        None => Ok((dataset.clone(), plain)),
    }
}

/// `τ̂_k(w) = γ̂_{0,k} + w'γ̂_{W,k}` from the fully interacted regression.
///
/// When every control is categorical, strata lacking some arm are excluded
/// and reported; the fit then runs on the remaining rows.
pub fn conditional_ates(dataset: &Dataset, spec: &DesignSpec) -> Result<ConditionalAtes> {
    let (ds, spec) = arm_restricted(dataset, spec)?;
    let strata = ds.strata();
    let arms = ds.k() + 1;
    let mut keep = vec![true; strata.len()];
    let mut excluded = Vec::new();
    if ds.all_categorical() {
        for (s, cells) in strata.cell_counts(ds.treatment(), arms).iter().enumerate() {
            let missing: Vec<String> = (0..arms)
                .filter(|&d| cells[d] == 0)
                .map(|d| ds.arm_names()[d].clone())
                .collect();
            if !missing.is_empty() {
                keep[s] = false;
                excluded.push(ExcludedStratum {
                    stratum: strata.labels[s].clone(),
                    missing_arms: missing,
                });
            }
        }
        if !keep.iter().any(|&k| k) {
            let first = &excluded[0];
            return Err(Error::EmptyCell {
                stratum: first.stratum.clone(),
                arm: first.missing_arms[0].clone(),
            });
        }
    }
    let kept_rows: Vec<usize> = (0..ds.n()).filter(|&i| keep[strata.ids[i]]).collect();
    let sub = if excluded.is_empty() {
        ds.clone()
    } else {
        ds.subset(&kept_rows)?
    };
    let mut position = vec![usize::MAX; ds.n()];
    for (p, &r) in kept_rows.iter().enumerate() {
        position[r] = p;
    }

    let design = build_design(&sub, &DesignSpec::new(spec.control_style, Interaction::Raw))?;
    let fit = ols_fit(&design.outcome, &design.matrix)?;
    let v = hc_variance(&fit, HcFlavor::Hc1);
    let c = design.controls.len();
    let k = sub.k();
    let mut tau = vec![None; strata.len()];
    let mut se = vec![None; strata.len()];
    for s in (0..strata.len()).filter(|&s| keep[s]) {
        let row = position[strata.representative[s]];
        let mut t = Vec::with_capacity(k);
        let mut e = Vec::with_capacity(k);
        for a in 0..k {
            let mut grad = DVector::zeros(design.matrix.ncols());
            grad[design.treatments.start + a] = 1.0;
            for j in 0..c {
                grad[design.interactions.start + a * c + j] =
                    design.matrix.values()[(row, design.controls.start + j)];
            }
            t.push(grad.dot(&fit.coefficients));
            e.push((grad.transpose() * &v * &grad)[(0, 0)].max(0.0).sqrt());
        }
        tau[s] = Some(t);
        se[s] = Some(e);
    }
    Ok(ConditionalAtes {
        strata,
        tau,
        se,
        excluded,
    })
}

/// Per-stratum view of the decomposition.
#[derive(Debug, Clone)]
pub struct StratumWeights {
    pub label: String,
    pub count: usize,
    /// `Σ_{i∈w} Λ̂ᵢ`.
    pub weight_sum: DMatrix<f64>,
    /// `λ̂(w) = (N/n_w) Σ_{i∈w} Λ̂ᵢ`, so that the mass-weighted mean is `I`.
    pub lambda: DMatrix<f64>,
    pub tau: Option<Vec<f64>>,
    pub tau_se: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct WeightDecomposition {
    pub arm_names: Vec<String>,
    pub n: usize,
    pub lambda_per_obs: Vec<DMatrix<f64>>,
    pub strata: Vec<StratumWeights>,
    pub stratum_of_row: Vec<usize>,
    /// Uninteracted regression coefficients on the treatment indicators.
    pub beta_hat: Vec<f64>,
    /// HC1 robust SEs of `beta_hat`.
    pub beta_se: Vec<f64>,
    pub own_component: Vec<f64>,
    pub contamination_component: Vec<f64>,
    /// `max_k |own + contamination − β̂|`.
    pub identity_gap: f64,
    pub ates: ConditionalAtes,
    pub warnings: Vec<String>,
}

impl WeightDecomposition {
    pub fn k(&self) -> usize {
        self.beta_hat.len()
    }
}

/// Splits each uninteracted coefficient into an own-effect part and a
/// contamination part from the other arms' conditional effects.
pub fn decompose_beta(dataset: &Dataset, spec: &DesignSpec) -> Result<WeightDecomposition> {
    let (ds, spec) = arm_restricted(dataset, spec)?;
    let k = ds.k();
    let n = ds.n();
    let x = encode_treatments(&ds);
    let controls = control_design(&ds, spec.control_style)?;
    let lambda = lambda_matrices(&x, &controls)?;

    let plain = build_design(&ds, &DesignSpec::new(spec.control_style, Interaction::None))?;
    let fit = ols_fit(&plain.outcome, &plain.matrix)?;
    let beta_hat: Vec<f64> = plain
        .treatments
        .clone()
        .map(|j| fit.coefficients[j])
        .collect();
    let se_all = standard_errors(&hc_variance(&fit, HcFlavor::Hc1));
    let beta_se = plain.treatments.clone().map(|j| se_all[j]).collect();

    let ates = conditional_ates(&ds, &spec)?;
    let mut own = vec![0.0; k];
    let mut contamination = vec![0.0; k];
    for (i, l) in lambda.iter().enumerate() {
        if let Some(tau) = ates.tau_of_row(i) {
            for a in 0..k {
                for b in 0..k {
                    if a == b {
                        own[a] += l[(a, b)] * tau[b];
                    } else {
                        contamination[a] += l[(a, b)] * tau[b];
                    }
                }
            }
        }
    }
    let identity_gap = (0..k)
        .map(|a| (own[a] + contamination[a] - beta_hat[a]).abs())
        .fold(0.0, f64::max);

    let strata_info = &ates.strata;
    let mut sums = vec![DMatrix::zeros(k, k); strata_info.len()];
    for (i, l) in lambda.iter().enumerate() {
        sums[strata_info.ids[i]] += l;
    }
    let strata: Vec<StratumWeights> = sums
        .into_iter()
        .enumerate()
        .map(|(s, sum)| StratumWeights {
            label: strata_info.labels[s].clone(),
            count: strata_info.counts[s],
            lambda: &sum * (n as f64 / strata_info.counts[s] as f64),
            weight_sum: sum,
            tau: ates.tau[s].clone(),
            tau_se: ates.se[s].clone(),
        })
        .collect();

    let mut warnings = Vec::new();
    if !ates.excluded.is_empty() {
        warnings.push(format!(
            "{} strata lack some arm and were left out of the conditional effects; own + contamination no longer sums to the regression coefficient",
            ates.excluded.len()
        ));
    }
    let negative = strata
        .iter()
        .filter(|s| (0..k).any(|a| s.lambda[(a, a)] < -1e-12))
        .count();
    if negative > 0 {
        warnings.push(format!(
            "{negative} strata have a negative own-treatment weight"
        ));
    }

    Ok(WeightDecomposition {
        arm_names: ds.arm_names().to_vec(),
        n,
        lambda_per_obs: lambda,
        strata,
        stratum_of_row: strata_info.ids.clone(),
        beta_hat,
        beta_se,
        own_component: own,
        contamination_component: contamination,
        identity_gap,
        ates,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapScheme {
    /// Resample rows i.i.d. from the whole sample.
    #[default]
    Iid,
    /// Resample within each (stratum, arm) cell, keeping cell sizes fixed.
    StratifiedCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub scheme: BootstrapScheme,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 500,
            seed: 0,
            scheme: BootstrapScheme::Iid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionSe {
    pub beta: Vec<f64>,
    pub own: Vec<f64>,
    pub contamination: Vec<f64>,
    pub replicates: usize,
    /// Draws thrown away because a cell came out empty.
    pub redraws: usize,
    pub scheme: BootstrapScheme,
    pub seed: u64,
}

/// Random stream for replicate `r`, independent of scheduling.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

fn draw_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    cells: &[Vec<usize>],
    scheme: BootstrapScheme,
) -> Vec<usize> {
    match scheme {
        BootstrapScheme::Iid => (0..n).map(|_| rng.random_range(0..n)).collect(),
        BootstrapScheme::StratifiedCells => cells
            .iter()
            .flat_map(|cell| {
                (0..cell.len())
                    .map(|_| cell[rng.random_range(0..cell.len())])
                    .collect::<Vec<_>>()
            })
            .collect(),
    }
}

/// Bootstrap standard errors for `β̂`, own, and contamination components.
///
/// Replicates are redrawn when an arm vanishes, a stratum that was estimable
/// in the full sample loses an arm, or the refit is numerically singular.
pub fn decomposition_se(
    dataset: &Dataset,
    spec: &DesignSpec,
    config: BootstrapConfig,
) -> Result<DecompositionSe> {
    if config.replicates < 2 {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    let (ds, spec) = arm_restricted(dataset, spec)?;
    let base = decompose_beta(&ds, &spec)?;
    let k = base.k();
    let arms = k + 1;
    let strata = &base.ates.strata;
    let required: Vec<bool> = base.ates.tau.iter().map(Option::is_some).collect();
    let mut cells = vec![Vec::new(); strata.len() * arms];
    for i in 0..ds.n() {
        cells[strata.ids[i] * arms + ds.treatment()[i]].push(i);
    }
    cells.retain(|c| !c.is_empty());

    let outcomes: Vec<Result<(Vec<f64>, usize)>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(config.seed, r as u64);
            for attempt in 0..MAX_REDRAWS_PER_REPLICATE {
                let rows = draw_rows(&mut rng, ds.n(), &cells, config.scheme);
                let mut counts = vec![0usize; strata.len() * arms];
                for &i in &rows {
                    counts[strata.ids[i] * arms + ds.treatment()[i]] += 1;
                }
                let populated = (0..strata.len())
                    .filter(|&s| required[s])
                    .all(|s| (0..arms).all(|d| counts[s * arms + d] > 0))
                    && (0..arms).all(|d| (0..strata.len()).any(|s| counts[s * arms + d] > 0));
                if !populated {
                    continue;
                }
                let sample = ds.subset(&rows)?;
                match decompose_beta(&sample, &spec) {
                    Ok(d) => {
                        let mut stats = d.beta_hat;
                        stats.extend(d.own_component);
                        stats.extend(d.contamination_component);
                        return Ok((stats, attempt));
                    }
                    Err(e) if e.is_validation() => return Err(e),
                    Err(_) => continue,
                }
            }
            Err(Error::BootstrapCellFailure {
                replicate: r,
                attempts: MAX_REDRAWS_PER_REPLICATE,
            })
        })
        .collect();

    let mut draws = Vec::with_capacity(config.replicates);
    let mut redraws = 0;
    for o in outcomes {
        let (stats, extra) = o?;
        redraws += extra;
        draws.push(stats);
    }
    let sd: Vec<f64> = (0..3 * k)
        .map(|j| {
            let vals: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            sample_sd(&vals)
        })
        .collect();
    Ok(DecompositionSe {
        beta: sd[..k].to_vec(),
        own: sd[k..2 * k].to_vec(),
        contamination: sd[2 * k..].to_vec(),
        replicates: config.replicates,
        redraws,
        scheme: config.scheme,
        seed: config.seed,
    })
}

fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Mass-weighted Pearson correlation; `None` when either series is constant.
pub fn weighted_correlation(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let total: f64 = w.iter().sum();
    if x.len() < 2 || total <= 0.0 {
        return None;
    }
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += w[i] * dx * dy;
        sxx += w[i] * dx * dx;
        syy += w[i] * dy * dy;
    }
    let scale = (mx.abs() + 1.0) * (my.abs() + 1.0) * total;
    if sxx.sqrt() * syy.sqrt() <= 1e-12 * scale {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCorrelation {
    /// Arm whose coefficient the weight belongs to (1-based).
    pub k: usize,
    /// Arm whose effect is weighted (1-based).
    pub l: usize,
    /// `None` when λ̂_{kℓ}(w) or τ̂_ℓ(w) does not vary across strata.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub stratum: String,
    pub mass: usize,
    /// `lambda[k][l]` = λ̂_{kℓ}(w).
    pub lambda: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub tau_se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub pairs: Vec<PairCorrelation>,
    pub scatter: Vec<ScatterRow>,
}

/// Correlation across strata between each weight λ̂_{kℓ}(w) and τ̂_ℓ(w),
/// weighted by stratum counts. Own-weight pairs come first.
pub fn weight_effect_correlation(decomp: &WeightDecomposition) -> CorrelationReport {
    let k = decomp.k();
    let used: Vec<&StratumWeights> = decomp.strata.iter().filter(|s| s.tau.is_some()).collect();
    let mass: Vec<f64> = used.iter().map(|s| s.count as f64).collect();
    let mut order: Vec<(usize, usize)> = (0..k).map(|a| (a, a)).collect();
    for a in 0..k {
        order.extend((0..k).filter(|&b| b != a).map(|b| (a, b)));
    }
    let pairs = order
        .into_iter()
        .map(|(a, b)| {
            let lam: Vec<f64> = used.iter().map(|s| s.lambda[(a, b)]).collect();
            let tau: Vec<f64> = used.iter().map(|s| s.tau.as_ref().unwrap()[b]).collect();
            PairCorrelation {
                k: a + 1,
                l: b + 1,
                correlation: weighted_correlation(&lam, &tau, &mass),
            }
        })
        .collect();
    let scatter = used
        .iter()
        .map(|s| ScatterRow {
            stratum: s.label.clone(),
            mass: s.count,
            lambda: (0..k)
                .map(|a| (0..k).map(|b| s.lambda[(a, b)]).collect())
                .collect(),
            tau: s.tau.clone().unwrap(),
            tau_se: s.tau_se.clone().unwrap(),
        })
        .collect();
    CorrelationReport { pairs, scatter }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmBounds {
    pub lower: f64,
    pub upper: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstCaseBounds {
    pub arms: Vec<ArmBounds>,
    /// Stratum permutation attaining each bound, per (k, ℓ≠k):
    /// `upper_perm[k][j]` lists, for the weight sorted j-th, the stratum whose τ̂ it receives.
    pub upper_perm: Vec<Vec<Vec<usize>>>,
    pub lower_perm: Vec<Vec<Vec<usize>>>,
    pub convention: &'static str,
}

/// Largest and smallest contamination attainable by reassigning the
/// observed τ̂_ℓ(w) values across strata, one contaminating arm at a time.
pub fn worst_case_bounds(decomp: &WeightDecomposition) -> WorstCaseBounds {
    let k = decomp.k();
    let used: Vec<&StratumWeights> = decomp.strata.iter().filter(|s| s.tau.is_some()).collect();
    let mut arms = Vec::with_capacity(k);
    let mut upper_perm = Vec::with_capacity(k);
    let mut lower_perm = Vec::with_capacity(k);
    for a in 0..k {
        let mut lower = 0.0;
        let mut upper = 0.0;
        let mut up = Vec::new();
        let mut lo = Vec::new();
        for b in (0..k).filter(|&b| b != a) {
            let s: Vec<f64> = used.iter().map(|st| st.weight_sum[(a, b)]).collect();
            let t: Vec<f64> = used.iter().map(|st| st.tau.as_ref().unwrap()[b]).collect();
            let mut s_order: Vec<usize> = (0..s.len()).collect();
            s_order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
            let mut t_order: Vec<usize> = (0..t.len()).collect();
            t_order.sort_by(|&i, &j| t[i].total_cmp(&t[j]));
            let m = s.len();
            for j in 0..m {
                upper += s[s_order[j]] * t[t_order[j]];
                lower += s[s_order[j]] * t[t_order[m - 1 - j]];
            }
            up.push(t_order.clone());
            lo.push(t_order.iter().rev().copied().collect());
        }
        arms.push(ArmBounds {
            lower,
            upper,
            observed: decomp.contamination_component[a],
        });
        upper_perm.push(up);
        lower_perm.push(lo);
    }
    WorstCaseBounds {
        arms,
        upper_perm,
        lower_perm,
        convention: "each contaminating arm permuted independently; bounds summed over arms",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterogeneitySd {
    /// Noise-adjusted SD, `sqrt(max(0, var − mean SE²))`.
    pub sd: f64,
    pub raw_sd: f64,
    pub mean_se_sq: f64,
    /// True when the adjustment would have gone negative.
    pub clamped: bool,
}

/// Dispersion of τ̂_k(w) across strata net of estimation noise, mass-weighted.
pub fn heterogeneity_sd(ates: &ConditionalAtes) -> Vec<HeterogeneitySd> {
    let used: Vec<usize> = (0..ates.tau.len())
        .filter(|&s| ates.tau[s].is_some())
        .collect();
    let k = used
        .first()
        .map_or(0, |&s| ates.tau[s].as_ref().unwrap().len());
    let mass: Vec<f64> = used.iter().map(|&s| ates.strata.counts[s] as f64).collect();
    let total: f64 = mass.iter().sum();
    (0..k)
        .map(|a| {
            let t: Vec<f64> = used
                .iter()
                .map(|&s| ates.tau[s].as_ref().unwrap()[a])
                .collect();
            let e: Vec<f64> = used
                .iter()
                .map(|&s| ates.se[s].as_ref().unwrap()[a])
                .collect();
            let mean = t.iter().zip(&mass).map(|(v, m)| v * m).sum::<f64>() / total;
            let var = t
                .iter()
                .zip(&mass)
                .map(|(v, m)| m * (v - mean).powi(2))
                .sum::<f64>()
                / total;
            let mean_se_sq = e.iter().zip(&mass).map(|(v, m)| m * v * v).sum::<f64>() / total;
            let adjusted = var - mean_se_sq;
            HeterogeneitySd {
                sd: adjusted.max(0.0).sqrt(),
                raw_sd: var.sqrt(),
                mean_se_sq,
                clamped: adjusted < 0.0,
            }
        })
        .collect()
}

/// Default specification: saturated strata dummies, no interactions.
pub fn saturated() -> DesignSpec {
    DesignSpec::new(ControlStyle::StrataDummies, Interaction::None)
}
