//! Closed-form population quantities for discrete designs, plus exact
//! enumeration and Monte Carlo simulation of such designs.
//!
//! A population is a finite set of strata, each with a mass, arm
//! propensities, and arm-specific outcome means and variances.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ControlColumn, Dataset};
use crate::error::{Error, Result};

/// Tolerance for masses and propensities summing to one.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSpec {
    pub mass: f64,
    pub p: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm_names: Option<Vec<String>>,
    pub strata: Vec<StratumSpec>,
}

fn invalid(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::InvalidSpec {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn number_array(value: &Value, pointer: &str, len: Option<usize>) -> Result<Vec<f64>> {
    let arr = value
        .as_array()
        .ok_or_else(|| invalid(pointer, "expected an array of numbers"))?;
    if let Some(len) = len {
        if arr.len() != len {
            return Err(invalid(
                pointer,
                format!("expected {len} entries, found {}", arr.len()),
            ));
        }
    }
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| invalid(format!("{pointer}/{i}"), "expected a finite number"))
        })
        .collect()
}

impl PopulationSpec {
    pub fn new(strata: Vec<StratumSpec>) -> Result<Self> {
        let spec = Self {
            arm_names: None,
            strata,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses and validates a JSON document; errors carry a JSON pointer.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let obj = root
            .as_object()
            .ok_or_else(|| invalid("", "expected an object"))?;
        let strata = obj
            .get("strata")
            .ok_or_else(|| invalid("/strata", "missing field"))?
            .as_array()
            .ok_or_else(|| invalid("/strata", "expected an array"))?;
        if strata.is_empty() {
            return Err(invalid("/strata", "need at least one stratum"));
        }
        let mut width = None;
        let mut parsed = Vec::with_capacity(strata.len());
        for (s, st) in strata.iter().enumerate() {
            let base = format!("/strata/{s}");
            let o = st
                .as_object()
                .ok_or_else(|| invalid(&base, "expected an object"))?;
            let field = |name: &str| {
                o.get(name)
                    .ok_or_else(|| invalid(format!("{base}/{name}"), "missing field"))
            };
            let mass = field("mass")?
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| invalid(format!("{base}/mass"), "expected a finite number"))?;
            let p = number_array(field("p")?, &format!("{base}/p"), width)?;
            width = Some(p.len());
            let mu = number_array(field("mu")?, &format!("{base}/mu"), width)?;
            let sigma2 = number_array(field("sigma2")?, &format!("{base}/sigma2"), width)?;
            parsed.push(StratumSpec {
                mass,
                p,
                mu,
                sigma2,
            });
        }
        let arm_names = match obj.get("arm_names") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_array()
                    .ok_or_else(|| invalid("/arm_names", "expected an array of strings"))?
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        a.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| invalid(format!("/arm_names/{i}"), "expected a string"))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let spec = Self {
            arm_names,
            strata: parsed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.strata.is_empty() {
            return Err(invalid("/strata", "need at least one stratum"));
        }
        let width = self.strata[0].p.len();
        if width < 2 {
            return Err(invalid(
                "/strata/0/p",
                "need a control arm and at least one treatment arm",
            ));
        }
        let mut total = 0.0;
        for (s, st) in self.strata.iter().enumerate() {
            let base = format!("/strata/{s}");
            if !(st.mass.is_finite() && st.mass >= 0.0) {
                return Err(invalid(
                    format!("{base}/mass"),
                    "mass must be a nonnegative number",
                ));
            }
            total += st.mass;
            for (name, v) in [("p", &st.p), ("mu", &st.mu), ("sigma2", &st.sigma2)] {
                if v.len() != width {
                    return Err(invalid(
                        format!("{base}/{name}"),
                        format!("expected {width} entries, found {}", v.len()),
                    ));
                }
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(invalid(
                        format!("{base}/{name}/{i}"),
                        "expected a finite number",
                    ));
                }
            }
            if let Some(i) = st.p.iter().position(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(invalid(
                    format!("{base}/p/{i}"),
                    "propensity outside [0, 1]",
                ));
            }
            let ps: f64 = st.p.iter().sum();
            if (ps - 1.0).abs() > SUM_TOLERANCE {
                return Err(invalid(
                    format!("{base}/p"),
                    format!("propensities sum to {ps}, not 1"),
                ));
            }
            if let Some(i) = st.sigma2.iter().position(|&x| x < 0.0) {
                return Err(invalid(
                    format!("{base}/sigma2/{i}"),
                    "variance must be nonnegative",
                ));
            }
        }
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(invalid("/strata", format!("masses sum to {total}, not 1")));
        }
        if let Some(names) = &self.arm_names {
            if names.len() != width {
                return Err(invalid(
                    "/arm_names",
                    format!("expected {width} names, found {}", names.len()),
                ));
            }
        }
        Ok(())
    }

    /// Number of treatment arms, excluding control.
    pub fn k(&self) -> usize {
        self.strata[0].p.len() - 1
    }

    pub fn arm_names(&self) -> Vec<String> {
        self.arm_names.clone().unwrap_or_else(|| {
            std::iter::once("control".to_string())
                .chain((1..=self.k()).map(|k| format!("t{k}")))
                .collect()
        })
    }

    /// `τ(w) = μ_{1..K}(w) − μ₀(w)`.
    pub fn tau(&self, stratum: usize) -> Vec<f64> {
        let st = &self.strata[stratum];
        st.mu[1..].iter().map(|m| m - st.mu[0]).collect()
    }

    /// Cell counts rounded to integers at `cell_scale` total units (each
    /// cell at least one), with masses and propensities recomputed so that
    /// [`enumerate_exact`] accepts the result at the returned row count.
    pub fn quantized(&self, cell_scale: u64) -> (PopulationSpec, u64) {
        let counts: Vec<Vec<f64>> = self
            .strata
            .iter()
            .map(|st| {
                st.p.iter()
                    .map(|p| (st.mass * p * cell_scale as f64).round().max(1.0))
                    .collect()
            })
            .collect();
        let total: f64 = counts.iter().flatten().sum();
        let strata = self
            .strata
            .iter()
            .zip(&counts)
            .map(|(st, c)| {
                let n: f64 = c.iter().sum();
                StratumSpec {
                    mass: n / total,
                    p: c.iter().map(|x| x / n).collect(),
                    mu: st.mu.clone(),
                    sigma2: st.sigma2.clone(),
                }
            })
            .collect();
        let spec = PopulationSpec {
            arm_names: self.arm_names.clone(),
            strata,
        };
        (spec, total as u64)
    }
}

/// The two-school, three-arm design used throughout as a worked example:
/// equal school masses, arm shares (.50, .05, .45) and (.10, .45, .45), and
/// a single nonzero effect: arm 2 raises outcomes by one in school 1.
pub fn two_school_example() -> PopulationSpec {
    PopulationSpec {
        arm_names: Some(vec!["control".into(), "t1".into(), "t2".into()]),
        strata: vec![
            StratumSpec {
                mass: 0.5,
                p: vec![0.50, 0.05, 0.45],
                mu: vec![0.0, 0.0, 0.0],
                sigma2: vec![1.0; 3],
            },
            StratumSpec {
                mass: 0.5,
                p: vec![0.10, 0.45, 0.45],
                mu: vec![0.0, 0.0, 1.0],
                sigma2: vec![1.0; 3],
            },
        ],
    }
}

/// Random spec with the given shape: masses and propensities from a flat
/// Dirichlet floored at 0.02 and renormalized; means in [−2, 2]; variances
/// in [0.5, 2].
pub fn random_spec_with<R: Rng>(rng: &mut R, strata: usize, k: usize) -> PopulationSpec {
    let mut simplex = |len: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = raw.iter().sum();
        let floored: Vec<f64> = raw.iter().map(|x| (x / total).max(0.02)).collect();
        let total: f64 = floored.iter().sum();
        floored.iter().map(|x| x / total).collect()
    };
    let masses = simplex(strata);
    let props: Vec<Vec<f64>> = (0..strata).map(|_| simplex(k + 1)).collect();
    let strata = masses
        .into_iter()
        .zip(props)
        .map(|(mass, p)| StratumSpec {
            mass,
            p,
            mu: (0..=k).map(|_| rng.random_range(-2.0..2.0)).collect(),
            sigma2: (0..=k).map(|_| rng.random_range(0.5..2.0)).collect(),
        })
        .collect();
    PopulationSpec {
        arm_names: None,
        strata,
    }
}

/// Random spec with 2–6 strata and 1–4 treatment arms.
pub fn random_spec<R: Rng>(rng: &mut R) -> PopulationSpec {
    let strata = rng.random_range(2..=6);
    let k = rng.random_range(1..=4);
    random_spec_with(rng, strata, k)
}

/// Treatment-block variance `v(w) = diag(p) − pp'` of the arm indicators.
pub fn treatment_variance(p: &[f64]) -> DMatrix<f64> {
    let k = p.len() - 1;
    DMatrix::from_fn(k, k, |a, b| {
        let (pa, pb) = (p[a + 1], p[b + 1]);
        if a == b {
            pa - pa * pb
        } else {
            -pa * pb
        }
    })
}

/// `Λ(w) = (Σ_w π(w) v(w))⁻¹ v(w)` for every stratum.
pub fn population_lambda(spec: &PopulationSpec) -> Result<Vec<DMatrix<f64>>> {
    spec.validate()?;
    let k = spec.k();
    let v: Vec<DMatrix<f64>> = spec
        .strata
        .iter()
        .map(|s| treatment_variance(&s.p))
        .collect();
    let avg = spec
        .strata
        .iter()
        .zip(&v)
        .fold(DMatrix::zeros(k, k), |acc, (s, vw)| acc + vw * s.mass);
    if (0..k).any(|a| avg[(a, a)] <= 1e-14) {
        return Err(Error::SingularAverageVariance);
    }
    let inv = avg
        .cholesky()
        .ok_or(Error::SingularAverageVariance)?
        .inverse();
    Ok(v.iter().map(|vw| &inv * vw).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub lambda: Vec<DMatrix<f64>>,
    pub beta: Vec<f64>,
    pub own: Vec<f64>,
    pub contamination: Vec<f64>,
    /// Weight on stratum 0 when `K = 1` with two strata.
    pub phi: Option<f64>,
}

/// Population regression coefficients split into own and contamination parts.
pub fn population_beta(spec: &PopulationSpec) -> Result<OracleResult> {
    let lambda = population_lambda(spec)?;
    let k = spec.k();
    let mut own = vec![0.0; k];
    let mut contamination = vec![0.0; k];
    for (s, (st, l)) in spec.strata.iter().zip(&lambda).enumerate() {
        let tau = spec.tau(s);
        for a in 0..k {
            for b in 0..k {
                let term = st.mass * l[(a, b)] * tau[b];
                if a == b {
                    own[a] += term;
                } else {
                    contamination[a] += term;
                }
            }
        }
    }
    let beta = own.iter().zip(&contamination).map(|(o, c)| o + c).collect();
    let phi = if k == 1 && spec.strata.len() == 2 {
        population_phi(spec).ok()
    } else {
        None
    };
    Ok(OracleResult {
        lambda,
        beta,
        own,
        contamination,
        phi,
    })
}

/// Share of the binary-treatment coefficient placed on stratum 0:
/// `φ = v(0)π(0) / (v(0)π(0) + v(1)π(1))`, `v(w) = p(w)(1 − p(w))`.
pub fn population_phi(spec: &PopulationSpec) -> Result<f64> {
    spec.validate()?;
    if spec.k() != 1 || spec.strata.len() != 2 {
        return Err(Error::InvalidArgument(
            "φ needs one treatment arm and exactly two strata".into(),
        ));
    }
    let part = |s: &StratumSpec| s.p[1] * (1.0 - s.p[1]) * s.mass;
    let (a, b) = (part(&spec.strata[0]), part(&spec.strata[1]));
    if a + b <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(a / (a + b))
}

/// Contrast of arm means targeted by a weighting scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    /// Arm `k` (1-based) against control.
    Single(usize),
    /// Average over all pairwise contrasts.
    AllPairs,
    /// Arbitrary coefficients on the `K+1` arm means.
    General(Vec<f64>),
}

impl Contrast {
    /// Coefficient vector over the `K+1` arms, where one exists.
    pub fn coefficients(&self, k: usize) -> Option<Vec<f64>> {
        match self {
            Contrast::Single(a) => {
                let mut c = vec![0.0; k + 1];
                c[0] = -1.0;
                c[*a] = 1.0;
                Some(c)
            }
            Contrast::AllPairs => None,
            Contrast::General(c) => Some(c.clone()),
        }
    }
}

/// Variance-minimizing stratum weights.
///
/// `Single(k)` and `AllPairs` use the homoskedastic closed forms
/// `p₀p_k/(p₀+p_k)` and `1/Σ_k p_k⁻¹`; `General(c)` uses the outcome
/// variances in the spec: `(Σ_k c_k² σ_k²/p_k)⁻¹`.
pub fn optimal_weights(spec: &PopulationSpec, contrast: &Contrast) -> Result<Vec<f64>> {
    spec.validate()?;
    let k = spec.k();
    spec.strata
        .iter()
        .enumerate()
        .map(|(s, st)| match contrast {
            Contrast::Single(a) => {
                if *a == 0 || *a > k {
                    return Err(Error::InvalidArgument(format!(
                        "arm {a} is not a treatment arm"
                    )));
                }
                let (p0, pk) = (st.p[0], st.p[*a]);
                if p0 <= 0.0 || pk <= 0.0 {
                    return Err(Error::ZeroPropensity {
                        stratum: s,
                        arm: if p0 <= 0.0 { 0 } else { *a },
                    });
                }
                Ok(p0 * pk / (p0 + pk))
            }
            Contrast::AllPairs => {
                if let Some(arm) = st.p.iter().position(|&p| p <= 0.0) {
                    return Err(Error::ZeroPropensity { stratum: s, arm });
                }
                Ok(1.0 / st.p.iter().map(|p| 1.0 / p).sum::<f64>())
            }
            Contrast::General(c) => {
                if c.len() != k + 1 {
                    return Err(Error::DimensionMismatch {
                        what: "contrast",
                        expected: k + 1,
                        found: c.len(),
                    });
                }
                let mut total = 0.0;
                for (j, &cj) in c.iter().enumerate() {
                    if cj == 0.0 {
                        continue;
                    }
                    if st.p[j] <= 0.0 {
                        return Err(Error::ZeroPropensity { stratum: s, arm: j });
                    }
                    total += cj * cj * st.sigma2[j] / st.p[j];
                }
                if total <= 0.0 {
                    return Err(Error::ZeroVariance);
                }
                Ok(1.0 / total)
            }
        })
        .collect()
}

/// `V = E[λ² Σ_k c_k² σ_k²/p_k] / E[λ]²`, expectations over strata masses.
pub fn efficiency_bound(spec: &PopulationSpec, weights: &[f64], c: &[f64]) -> Result<f64> {
    spec.validate()?;
    if weights.len() != spec.strata.len() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: spec.strata.len(),
            found: weights.len(),
        });
    }
    if c.len() != spec.k() + 1 {
        return Err(Error::DimensionMismatch {
            what: "contrast",
            expected: spec.k() + 1,
            found: c.len(),
        });
    }
    let mut mean = 0.0;
    let mut num = 0.0;
    for (s, (st, &l)) in spec.strata.iter().zip(weights).enumerate() {
        mean += st.mass * l;
        if st.mass == 0.0 || l == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (j, &cj) in c.iter().enumerate() {
            if cj == 0.0 {
                continue;
            }
            if st.p[j] <= 0.0 {
                return Err(Error::ZeroPropensity { stratum: s, arm: j });
            }
            inner += cj * cj * st.sigma2[j] / st.p[j];
        }
        num += st.mass * l * l * inner;
    }
    if mean.abs() <= f64::EPSILON * weights.iter().fold(0.0_f64, |m, w| m.max(w.abs()))
        || mean == 0.0
    {
        return Err(Error::ZeroMeanWeights);
    }
    Ok(num / (mean * mean))
}

/// Population targets of the regression and of each alternative estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimands {
    pub uninteracted: Vec<f64>,
    pub ate: Vec<f64>,
    pub one_at_a_time: Vec<f64>,
    pub common: Vec<f64>,
}

/// λ-weighted average of `τ_k(w)`.
fn weighted_tau(spec: &PopulationSpec, arm: usize, weights: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (s, (st, l)) in spec.strata.iter().zip(weights).enumerate() {
        num += st.mass * l * spec.tau(s)[arm];
        den += st.mass * l;
    }
    num / den
}

pub fn estimands(spec: &PopulationSpec) -> Result<Estimands> {
    let k = spec.k();
    let uninteracted = population_beta(spec)?.beta;
    let ones = vec![1.0; spec.strata.len()];
    let ate = (0..k).map(|a| weighted_tau(spec, a, &ones)).collect();
    let one_at_a_time = (0..k)
        .map(|a| {
            Ok(weighted_tau(
                spec,
                a,
                &optimal_weights(spec, &Contrast::Single(a + 1))?,
            ))
        })
        .collect::<Result<_>>()?;
    let lc = optimal_weights(spec, &Contrast::AllPairs)?;
    let common = (0..k).map(|a| weighted_tau(spec, a, &lc)).collect();
    Ok(Estimands {
        uninteracted,
        ate,
        one_at_a_time,
        common,
    })
}

fn stratum_column(spec: &PopulationSpec, codes: Vec<usize>) -> ControlColumn {
    ControlColumn::Categorical {
        name: "stratum".into(),
        levels: (0..spec.strata.len()).map(|s| s.to_string()).collect(),
        codes,
    }
}

/// A dataset whose (stratum, arm) frequencies reproduce the population
/// exactly at `cell_scale` total rows, with every outcome equal to its cell
/// mean.
pub fn enumerate_exact(spec: &PopulationSpec, cell_scale: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut outcome = Vec::new();
    let mut treatment = Vec::new();
    let mut codes = Vec::new();
    for (s, st) in spec.strata.iter().enumerate() {
        for (d, &p) in st.p.iter().enumerate() {
            let value = st.mass * p * cell_scale as f64;
            let count = value.round();
            if (value - count).abs() > 1e-6 * value.abs().max(1.0) {
                return Err(Error::NonIntegralCells {
                    stratum: s,
                    arm: d,
                    value,
                });
            }
            for _ in 0..count as usize {
                outcome.push(st.mu[d]);
                treatment.push(d);
                codes.push(s);
            }
        }
    }
    Dataset::new(
        outcome,
        treatment,
        spec.arm_names(),
        vec![stratum_column(spec, codes)],
    )
}

/// `n` i.i.d. draws: stratum from the masses, arm from the stratum's
/// propensities, outcome Normal with the cell's mean and variance.
pub fn simulate(spec: &PopulationSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata_dist = WeightedIndex::new(spec.strata.iter().map(|s| s.mass))
        .map_err(|e| Error::InvalidArgument(format!("stratum masses: {e}")))?;
    let arm_dist: Vec<Option<WeightedIndex<f64>>> = spec
        .strata
        .iter()
        .map(|s| WeightedIndex::new(s.p.iter().copied()).ok())
        .collect();
    let mut outcome = Vec::with_capacity(n);
    let mut treatment = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        let s = strata_dist.sample(&mut rng);
        let d = arm_dist[s]
            .as_ref()
            .expect("validated propensities")
            .sample(&mut rng);
        let st = &spec.strata[s];
        let z: f64 = rng.sample(StandardNormal);
        outcome.push(st.mu[d] + st.sigma2[d].sqrt() * z);
        treatment.push(d);
        codes.push(s);
    }
    Dataset::new(
        outcome,
        treatment,
        spec.arm_names(),
        vec![stratum_column(spec, codes)],
    )
}
