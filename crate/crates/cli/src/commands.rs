//! The four subcommands. Each returns a report plus the text printed to
//! standard output.

use std::path::Path;

use contam_core::decompose::heterogeneity_sd;
use contam_core::decompose::replicate_rng;
use contam_core::oracle::random_spec;
use contam_core::{
    decompose_beta, decomposition_se, efficiency_bound, enumerate_exact, estimands, estimate,
    load_csv_reader, optimal_weights, population_beta, simulate, weight_effect_correlation,
    worst_case_bounds, BootstrapConfig, Contrast, ControlKind, ControlStyle, CsvColumns, Dataset,
    DesignSpec, Error, EstimateSet, EstimatorKind, Interaction, LoadOptions, PopulationSpec,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::args::{
    DataArgs, DecomposeArgs, EstimateArgs, OracleArgs, OutputArgs, SimulateArgs, SpecSource,
};
use crate::report::{sha256_hex, Fingerprint, RunReport};
use crate::table::{exact, num, wrapped, Table};
use crate::Failure;

/// Largest tolerated gap between the closed forms and the enumerated regression.
pub const CHECK_TOLERANCE: f64 = 1e-9;

pub struct Run {
    pub report: RunReport,
    pub text: String,
    pub csv: Option<Table>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    if jobs == 0 {
        return Err(Error::InvalidArgument("--jobs must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::numerical(format!("could not start worker threads: {e}")))
}

struct Loaded {
    dataset: Dataset,
    spec: DesignSpec,
    fingerprint: Fingerprint,
}

fn load(args: &DataArgs) -> Result<Loaded, Failure> {
    let bytes = std::fs::read(&args.data).map_err(Error::from)?;
    let columns = CsvColumns {
        outcome: args.outcome.clone(),
        treatment: args.treatment.clone(),
        controls: args
            .controls
            .iter()
            .map(|c| (c.name.clone(), c.kind))
            .collect(),
        control_arm: args.control_arm.clone(),
        arm_order: args.arms.clone(),
    };
    let options = LoadOptions {
        min_arm_count: args.min_arm_count,
    };
    let (dataset, load_report) = load_csv_reader(bytes.as_slice(), &columns, options)?;
    let continuous = args
        .controls
        .iter()
        .any(|c| c.kind == ControlKind::Continuous);
    let style = if args.linear_controls || continuous {
        ControlStyle::Linear
    } else {
        ControlStyle::StrataDummies
    };
    let fingerprint = Fingerprint {
        source: args.data.display().to_string(),
        rows: dataset.n(),
        rows_read: Some(load_report.rows_read),
        rows_dropped: Some(load_report.rows_dropped),
        columns: json!({
            "outcome": args.outcome,
            "treatment": args.treatment,
            "controls": args.controls,
            "control_arm": args.control_arm,
            "arms": &dataset.arm_names()[1..],
            "control_style": style,
        }),
        sha256: sha256_hex(&bytes),
    };
    Ok(Loaded {
        dataset,
        spec: DesignSpec::new(style, Interaction::Demeaned),
        fingerprint,
    })
}

fn load_warnings(fp: &Fingerprint) -> Vec<String> {
    match fp.rows_dropped {
        Some(d) if d > 0 => vec![format!("{d} rows dropped for missing or unparsable values")],
        _ => Vec::new(),
    }
}

fn arm_header(label: &str, arms: &[String]) -> Vec<String> {
    std::iter::once(label.to_string())
        .chain(arms.iter().cloned())
        .collect()
}

fn row(label: &str, values: &[f64], cell: impl Fn(f64) -> String) -> Vec<String> {
    std::iter::once(label.to_string())
        .chain(values.iter().map(|&v| cell(v)))
        .collect()
}

pub fn decompose(args: &DecomposeArgs, command: Vec<String>) -> Result<Run, Failure> {
    let out = &args.output;
    let pool = pool(out.jobs)?;
    let Loaded {
        dataset,
        spec,
        fingerprint,
    } = load(&args.data)?;
    let dec = decompose_beta(&dataset, &spec)?;
    let se = if args.bootstrap > 0 {
        let config = BootstrapConfig {
            replicates: args.bootstrap,
            seed: out.seed,
            scheme: args.bootstrap_scheme.into(),
        };
        Some(pool.install(|| decomposition_se(&dataset, &spec, config))?)
    } else {
        None
    };
    let bounds = worst_case_bounds(&dec);
    let corr = weight_effect_correlation(&dec);
    let het = heterogeneity_sd(&dec.ates);
    let arms = &dec.arm_names[1..];

    let mut warnings = load_warnings(&fingerprint);
    warnings.extend(dec.warnings.iter().cloned());
    let results = json!({
        "arms": arms,
        "control_arm": dec.arm_names[0],
        "n": dec.n,
        "strata": dec.strata.len(),
        "excluded_strata": dec.ates.excluded,
        "coefficient": { "estimate": dec.beta_hat, "se": dec.beta_se },
        "own_effect": { "estimate": dec.own_component, "se": se.as_ref().map(|s| &s.own) },
        "contamination": { "estimate": dec.contamination_component, "se": se.as_ref().map(|s| &s.contamination) },
        "identity_gap": dec.identity_gap,
        "bootstrap": se,
        "worst_case": bounds,
        "correlations": corr.pairs,
        "heterogeneity_sd": het,
        "scatter": corr.scatter,
    });

    let mut t = Table::new(arm_header("", arms));
    t.push(row("Coefficient", &dec.beta_hat, num));
    t.push(row("", &dec.beta_se, |v| wrapped(v, '(', ')')));
    t.push(row("Own effect", &dec.own_component, num));
    if let Some(s) = &se {
        t.push(row("", &s.own, |v| wrapped(v, '(', ')')));
    }
    t.push(row("Contamination bias", &dec.contamination_component, num));
    if let Some(s) = &se {
        t.push(row("", &s.contamination, |v| wrapped(v, '(', ')')));
    }
    let lower: Vec<f64> = bounds.arms.iter().map(|b| b.lower).collect();
    let upper: Vec<f64> = bounds.arms.iter().map(|b| b.upper).collect();
    t.push(row("Worst-case negative bias", &lower, num));
    t.push(row("Worst-case positive bias", &upper, num));
    let sds: Vec<f64> = het.iter().map(|h| h.sd).collect();
    t.push(row("Effect heterogeneity SD", &sds, num));

    let mut c = Table::new(vec!["weight".into(), "effect".into(), "correlation".into()])
        .titled("Weight/effect correlations");
    for p in &corr.pairs {
        c.push(vec![
            format!("λ[{},{}]", arms[p.k - 1], arms[p.l - 1]),
            format!("τ[{}]", arms[p.l - 1]),
            p.correlation.map_or_else(|| "n/a".into(), num),
        ]);
    }
    let mut text = format!(
        "N = {}, {} strata, control arm {}\n\n{}",
        dec.n,
        dec.strata.len(),
        dec.arm_names[0],
        t.render()
    );
    if let Some(s) = &se {
        text.push_str(&format!(
            "Standard errors in parentheses: robust for the coefficient, {} bootstrap draws for the components.\n",
            s.replicates
        ));
    }
    text.push('\n');
    text.push_str(&c.render());

    // scatter table for plotting
    let k = dec.k();
    let mut header = vec!["stratum".to_string(), "mass".to_string()];
    for a in 1..=k {
        for b in 1..=k {
            header.push(format!("lambda_{a}_{b}"));
        }
    }
    header.extend((1..=k).map(|a| format!("tau_{a}")));
    header.extend((1..=k).map(|a| format!("se_{a}")));
    let mut scatter = Table::new(header);
    for r in &corr.scatter {
        let mut cells = vec![r.stratum.clone(), r.mass.to_string()];
        cells.extend(r.lambda.iter().flatten().map(|&v| exact(v)));
        cells.extend(r.tau.iter().map(|&v| exact(v)));
        cells.extend(r.tau_se.iter().map(|&v| exact(v)));
        scatter.push(cells);
    }

    Ok(Run {
        report: RunReport::new(command, fingerprint, out.seed, results, warnings),
        text,
        csv: Some(scatter),
    })
}

fn estimator_label(kind: EstimatorKind) -> &'static str {
    match kind {
        EstimatorKind::Uninteracted => "Uninteracted regression",
        EstimatorKind::AteInteracted => "ATE (interacted)",
        EstimatorKind::OneAtATime => "One-at-a-time",
        EstimatorKind::CommonWeights => "Common weights",
    }
}

pub fn estimate_cmd(args: &EstimateArgs, command: Vec<String>) -> Result<Run, Failure> {
    let out = &args.output;
    let Loaded {
        dataset,
        spec,
        fingerprint,
    } = load(&args.data)?;
    let sets: Vec<EstimateSet> = args
        .which
        .kinds()
        .into_iter()
        .map(|kind| estimate(&dataset, &spec, kind))
        .collect::<Result<_, _>>()?;
    let arms = &dataset.arm_names()[1..];
    let mut warnings = load_warnings(&fingerprint);
    for s in &sets {
        warnings.extend(s.warnings.iter().map(|w| format!("{}: {w}", s.kind.name())));
    }

    let mut t = Table::new(arm_header("", arms));
    let mut csv = Table::new(
        [
            "estimator",
            "arm",
            "estimate",
            "se_robust",
            "se_known_pscore",
            "se_estimated_pscore",
            "n_used",
        ]
        .map(String::from)
        .to_vec(),
    );
    for s in &sets {
        t.push(row(estimator_label(s.kind), &s.beta, num));
        t.push(row("", &s.se_robust, |v| wrapped(v, '(', ')')));
        if let Some(known) = &s.se_known_pscore {
            t.push(row("", known, |v| wrapped(v, '[', ']')));
        }
        if let Some(est) = &s.se_estimated_pscore {
            t.push(row("", est, |v| wrapped(v, '{', '}')));
        }
        for (a, arm) in arms.iter().enumerate() {
            let pick = |v: &Option<Vec<f64>>| v.as_ref().map_or_else(String::new, |v| exact(v[a]));
            csv.push(vec![
                s.kind.name().into(),
                arm.clone(),
                exact(s.beta[a]),
                exact(s.se_robust[a]),
                pick(&s.se_known_pscore),
                pick(&s.se_estimated_pscore),
                s.n_used.to_string(),
            ]);
        }
    }
    let text = format!(
        "N = {}, control arm {}\n\n{}Robust SEs in parentheses; known-propensity SEs in brackets; \
         braces add the cost of estimating the common weights.\n",
        dataset.n(),
        dataset.arm_names()[0],
        t.render()
    );
    let results = json!({
        "arms": arms,
        "control_arm": dataset.arm_names()[0],
        "n": dataset.n(),
        "estimates": sets,
    });
    Ok(Run {
        report: RunReport::new(command, fingerprint, out.seed, results, warnings),
        text,
        csv: Some(csv),
    })
}

fn read_spec(source: &SpecSource, seed: u64) -> Result<(PopulationSpec, Fingerprint), Failure> {
    let (spec, name, digest) = match &source.spec {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(Error::from)?;
            let text = String::from_utf8(bytes.clone()).map_err(|_| Error::InvalidSpec {
                pointer: String::new(),
                message: "spec is not UTF-8".into(),
            })?;
            (
                PopulationSpec::from_json(&text)?,
                path.display().to_string(),
                sha256_hex(&bytes),
            )
        }
        None => {
            let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(seed));
            let digest = sha256_hex(spec.to_json().as_bytes());
            (spec, format!("random spec (seed {seed})"), digest)
        }
    };
    let fingerprint = Fingerprint {
        source: name,
        rows: spec.strata.len(),
        rows_read: None,
        rows_dropped: None,
        columns: Value::Null,
        sha256: digest,
    };
    Ok((spec, fingerprint))
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn oracle(args: &OracleArgs, command: Vec<String>) -> Result<Run, Failure> {
    let out = &args.output;
    let (spec, fingerprint) = read_spec(&args.source, out.seed)?;
    let k = spec.k();
    let names = spec.arm_names();
    let arms = &names[1..];
    let pop = population_beta(&spec)?;
    let targets = estimands(&spec)?;
    let mut warnings = Vec::new();

    let ones = vec![1.0; spec.strata.len()];
    let common = optimal_weights(&spec, &Contrast::AllPairs)?;
    let mut one_at_a_time = Vec::with_capacity(k);
    let mut efficient = Vec::with_capacity(k);
    let mut bounds = json!({});
    let mut bound_rows: Vec<(&str, Vec<f64>)> = Vec::new();
    let (mut b_ate, mut b_one, mut b_common, mut b_eff) = (vec![], vec![], vec![], vec![]);
    for a in 1..=k {
        let c = Contrast::Single(a)
            .coefficients(k)
            .expect("single contrast");
        let w = optimal_weights(&spec, &Contrast::Single(a))?;
        b_ate.push(efficiency_bound(&spec, &ones, &c)?);
        b_one.push(efficiency_bound(&spec, &w, &c)?);
        b_common.push(efficiency_bound(&spec, &common, &c)?);
        match optimal_weights(&spec, &Contrast::General(c.clone())) {
            Ok(e) => {
                b_eff.push(efficiency_bound(&spec, &e, &c)?);
                efficient.push(Some(e));
            }
            Err(e) => {
                warnings.push(format!("variance-optimal weights for {}: {e}", arms[a - 1]));
                b_eff.push(f64::NAN);
                efficient.push(None);
            }
        }
        one_at_a_time.push(w);
    }
    bounds["ate"] = json!(b_ate);
    bounds["one_at_a_time"] = json!(b_one);
    bounds["common"] = json!(b_common);
    bounds["variance_optimal"] = json!(b_eff
        .iter()
        .map(|v| v.is_finite().then_some(*v))
        .collect::<Vec<_>>());
    bound_rows.push(("ATE", b_ate));
    bound_rows.push(("One-at-a-time", b_one));
    bound_rows.push(("Common weights", b_common));
    bound_rows.push(("Variance-optimal", b_eff));

    let strata: Vec<Value> = spec
        .strata
        .iter()
        .zip(&pop.lambda)
        .enumerate()
        .map(|(s, (st, l))| {
            json!({
                "index": s,
                "mass": st.mass,
                "p": st.p,
                "tau": spec.tau(s),
                "lambda": (0..k).map(|a| (0..k).map(|b| l[(a, b)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
            })
        })
        .collect();

    let check = if args.check {
        let (grid, rows) = spec.quantized(args.cell_scale);
        let exact_pop = population_beta(&grid)?;
        let ds = enumerate_exact(&grid, rows)?;
        let dec = decompose_beta(&ds, &DesignSpec::default())?;
        let mut gap = max_gap(&dec.beta_hat, &exact_pop.beta)
            .max(max_gap(&dec.own_component, &exact_pop.own))
            .max(max_gap(
                &dec.contamination_component,
                &exact_pop.contamination,
            ));
        for (st, l) in dec.strata.iter().zip(&exact_pop.lambda) {
            gap = gap.max((&st.lambda - l).amax());
        }
        let rounding = max_gap(&exact_pop.beta, &pop.beta);
        Some(json!({
            "cell_scale": args.cell_scale,
            "rows": rows,
            "max_deviation": gap,
            "tolerance": CHECK_TOLERANCE,
            "passed": gap <= CHECK_TOLERANCE,
            "rounding_shift": rounding,
        }))
    } else {
        None
    };

    let results = json!({
        "arms": arms,
        "control_arm": names[0],
        "strata": strata,
        "beta": pop.beta,
        "own_effect": pop.own,
        "contamination": pop.contamination,
        "phi": pop.phi,
        "estimands": targets,
        "optimal_weights": {
            "one_at_a_time": one_at_a_time,
            "common": common,
            "variance_optimal": efficient,
        },
        "efficiency_bounds": bounds,
        "check": check,
    });

    let mut lam = Table::new(
        std::iter::once("stratum".to_string())
            .chain(std::iter::once("mass".to_string()))
            .chain(
                (0..k)
                    .flat_map(|a| (0..k).map(move |b| (a, b)))
                    .map(|(a, b)| format!("λ[{},{}]", arms[a], arms[b])),
            )
            .collect(),
    )
    .titled("Implicit weights by stratum");
    let mut csv = Table::new(
        ["stratum", "mass"]
            .map(String::from)
            .into_iter()
            .chain((1..=k).flat_map(|a| (1..=k).map(move |b| format!("lambda_{a}_{b}"))))
            .chain((1..=k).map(|a| format!("tau_{a}")))
            .collect(),
    );
    for (s, (st, l)) in spec.strata.iter().zip(&pop.lambda).enumerate() {
        let mut cells = vec![s.to_string(), format!("{:.4}", st.mass)];
        let mut raw = vec![s.to_string(), exact(st.mass)];
        for a in 0..k {
            for b in 0..k {
                cells.push(format!("{:.4}", l[(a, b)]));
                raw.push(exact(l[(a, b)]));
            }
        }
        raw.extend(spec.tau(s).into_iter().map(exact));
        lam.push(cells);
        csv.push(raw);
    }
    let mut t = Table::new(arm_header("", arms)).titled("Population coefficients");
    t.push(row("Regression coefficient", &pop.beta, num));
    t.push(row("Own effect", &pop.own, num));
    t.push(row("Contamination bias", &pop.contamination, num));
    t.push(row("ATE", &targets.ate, num));
    t.push(row("One-at-a-time target", &targets.one_at_a_time, num));
    t.push(row("Common-weights target", &targets.common, num));
    let mut v = Table::new(arm_header("", arms)).titled("Asymptotic variance bounds (×N)");
    for (label, values) in &bound_rows {
        v.push(row(label, values, num));
    }
    let mut text = format!("{}\n{}\n{}", lam.render(), t.render(), v.render());
    if let Some(c) = &check {
        text.push_str(&format!(
            "\nEnumeration check ({} rows): max deviation {:.3e}, {}\n",
            c["rows"],
            c["max_deviation"].as_f64().unwrap_or(f64::NAN),
            if c["passed"] == true {
                "passed"
            } else {
                "FAILED"
            }
        ));
    }
    let failed = check.as_ref().is_some_and(|c| c["passed"] != true);
    let run = Run {
        report: RunReport::new(command, fingerprint, out.seed, results, warnings),
        text,
        csv: Some(csv),
    };
    if failed {
        return Err(Failure::check_failed(run));
    }
    Ok(run)
}

#[derive(Default, Clone)]
struct Tally {
    estimates: Vec<f64>,
    ses: Vec<f64>,
    failures: usize,
}

pub fn simulate_cmd(args: &SimulateArgs, command: Vec<String>) -> Result<Run, Failure> {
    use rayon::prelude::*;

    let out = &args.output;
    if args.reps == 0 {
        return Err(Error::InvalidArgument("--reps must be at least 1".into()).into());
    }
    let pool = pool(out.jobs)?;
    let (spec, fingerprint) = read_spec(&args.source, out.seed)?;
    let targets = estimands(&spec)?;
    let k = spec.k();
    let names = spec.arm_names();
    let arms = &names[1..];
    let kinds = EstimatorKind::ALL;
    if args.n == 0 {
        return Err(Error::InvalidArgument("--n must be at least 1".into()).into());
    }

    // one dataset per replicate, seeded from (seed, replicate)
    let draws: Vec<Vec<Result<EstimateSet, Error>>> = pool.install(|| {
        (0..args.reps)
            .into_par_iter()
            .map(|r| {
                let data_seed = replicate_rng(out.seed, r as u64).next_u64();
                let ds = simulate(&spec, args.n, data_seed);
                kinds
                    .iter()
                    .map(|&kind| match &ds {
                        Ok(ds) => estimate(ds, &DesignSpec::default(), kind),
                        Err(e) => Err(Error::InvalidArgument(e.to_string())),
                    })
                    .collect()
            })
            .collect()
    });

    let mut tallies = vec![vec![Tally::default(); k]; kinds.len()];
    let mut csv = Table::new(
        ["rep", "estimator", "arm", "estimate", "se_robust"]
            .map(String::from)
            .to_vec(),
    );
    for (r, rep) in draws.iter().enumerate() {
        for (e, result) in rep.iter().enumerate() {
            match result {
                Ok(set) => {
                    for a in 0..k {
                        tallies[e][a].estimates.push(set.beta[a]);
                        tallies[e][a].ses.push(set.se_robust[a]);
                        csv.push(vec![
                            r.to_string(),
                            kinds[e].name().into(),
                            arms[a].clone(),
                            exact(set.beta[a]),
                            exact(set.se_robust[a]),
                        ]);
                    }
                }
                Err(_) => tallies[e].iter_mut().for_each(|t| t.failures += 1),
            }
        }
    }

    let mut warnings = Vec::new();
    let mut summary = Vec::new();
    let mut t = Table::new(
        [
            "estimator",
            "arm",
            "target",
            "mean",
            "bias",
            "sd",
            "mean se",
            "coverage",
        ]
        .map(String::from)
        .to_vec(),
    );
    for (e, kind) in kinds.iter().enumerate() {
        let target = match kind {
            EstimatorKind::Uninteracted => &targets.uninteracted,
            EstimatorKind::AteInteracted => &targets.ate,
            EstimatorKind::OneAtATime => &targets.one_at_a_time,
            EstimatorKind::CommonWeights => &targets.common,
        };
        let fails = tallies[e][0].failures;
        if fails > 0 {
            warnings.push(format!(
                "{}: {fails} of {} replicates failed",
                kind.name(),
                args.reps
            ));
        }
        for a in 0..k {
            let tally = &tallies[e][a];
            let m = tally.estimates.len();
            let stats = (m > 0).then(|| {
                let mean = tally.estimates.iter().sum::<f64>() / m as f64;
                let sd = (m > 1).then(|| {
                    (tally
                        .estimates
                        .iter()
                        .map(|v| (v - mean).powi(2))
                        .sum::<f64>()
                        / (m - 1) as f64)
                        .sqrt()
                });
                let mean_se = tally.ses.iter().sum::<f64>() / m as f64;
                let covered = tally
                    .estimates
                    .iter()
                    .zip(&tally.ses)
                    .filter(|(b, s)| (*b - target[a]).abs() <= 1.959964 * *s)
                    .count();
                (mean, sd, mean_se, covered as f64 / m as f64)
            });
            let (mean, sd, mean_se, coverage) =
                stats.map_or((f64::NAN, None, f64::NAN, f64::NAN), |s| s);
            t.push(vec![
                kind.name().into(),
                arms[a].clone(),
                num(target[a]),
                num(mean),
                num(mean - target[a]),
                sd.map_or_else(String::new, num),
                num(mean_se),
                num(coverage),
            ]);
            let finite = |v: f64| v.is_finite().then_some(v);
            summary.push(json!({
                "estimator": kind.name(),
                "arm": arms[a],
                "target": target[a],
                "replicates": m,
                "failures": tally.failures,
                "mean": finite(mean),
                "bias": finite(mean - target[a]),
                "sd": sd,
                "mean_se": finite(mean_se),
                "coverage_95": finite(coverage),
            }));
        }
    }
    let text = format!(
        "{} replicates of n = {}\n\n{}",
        args.reps,
        args.n,
        t.render()
    );
    let results = json!({
        "arms": arms,
        "control_arm": names[0],
        "n": args.n,
        "reps": args.reps,
        "estimands": targets,
        "summary": summary,
    });
    Ok(Run {
        report: RunReport::new(command, fingerprint, out.seed, results, warnings),
        text,
        csv: Some(csv),
    })
}

/// Writes the optional machine artifacts next to the printed table.
pub fn write_outputs(run: &Run, out: &OutputArgs) -> Result<(), Failure> {
    if let Some(path) = &out.json {
        run.report.write_json(path).map_err(Error::from)?;
    }
    if let (Some(path), Some(table)) = (&out.csv, &run.csv) {
        table.write_csv(Path::new(path)).map_err(Error::from)?;
    }
    Ok(())
}
