//! Datasets, CSV ingestion, treatment encoding, and design construction.
//!
//! Design columns are always laid out as
//! `[intercept | treatments | controls | interactions]`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regress::DesignMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlColumn {
    Categorical {
        name: String,
        levels: Vec<String>,
        codes: Vec<usize>,
    },
    Continuous {
        name: String,
        values: Vec<f64>,
    },
}

impl ControlColumn {
    pub fn name(&self) -> &str {
        match self {
            ControlColumn::Categorical { name, .. } | ControlColumn::Continuous { name, .. } => {
                name
            }
        }
    }

    pub fn kind(&self) -> ControlKind {
        match self {
            ControlColumn::Categorical { .. } => ControlKind::Categorical,
            ControlColumn::Continuous { .. } => ControlKind::Continuous,
        }
    }

    fn len(&self) -> usize {
        match self {
            ControlColumn::Categorical { codes, .. } => codes.len(),
            ControlColumn::Continuous { values, .. } => values.len(),
        }
    }

    fn select(&self, rows: &[usize]) -> ControlColumn {
        match self {
            ControlColumn::Categorical {
                name,
                levels,
                codes,
            } => ControlColumn::Categorical {
                name: name.clone(),
                levels: levels.clone(),
                codes: rows.iter().map(|&r| codes[r]).collect(),
            },
            ControlColumn::Continuous { name, values } => ControlColumn::Continuous {
                name: name.clone(),
                values: rows.iter().map(|&r| values[r]).collect(),
            },
        }
    }

    fn display_value(&self, row: usize) -> String {
        match self {
            ControlColumn::Categorical { levels, codes, .. } => levels[codes[row]].clone(),
            ControlColumn::Continuous { values, .. } => format!("{}", values[row]),
        }
    }

    /// Drops unused levels, keeping the original level order.
    fn compact(self) -> ControlColumn {
        match self {
            ControlColumn::Categorical {
                name,
                levels,
                codes,
            } => {
                let mut used = vec![false; levels.len()];
                for &c in &codes {
                    used[c] = true;
                }
                let mut remap = vec![usize::MAX; levels.len()];
                let mut kept = Vec::new();
                for (i, level) in levels.into_iter().enumerate() {
                    if used[i] {
                        remap[i] = kept.len();
                        kept.push(level);
                    }
                }
                ControlColumn::Categorical {
                    name,
                    levels: kept,
                    codes: codes.into_iter().map(|c| remap[c]).collect(),
                }
            }
            other => other,
        }
    }
}

/// Outcomes, treatment arms, and controls for `N` units.
///
/// Arm 0 is the control arm. Every arm occurs at least once.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcome: Vec<f64>,
    treatment: Vec<usize>,
    arm_names: Vec<String>,
    controls: Vec<ControlColumn>,
}

impl Dataset {
    pub fn new(
        outcome: Vec<f64>,
        treatment: Vec<usize>,
        arm_names: Vec<String>,
        controls: Vec<ControlColumn>,
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::EmptyAfterFiltering);
        }
        if treatment.len() != n {
            return Err(Error::DimensionMismatch {
                what: "treatment",
                expected: n,
                found: treatment.len(),
            });
        }
        if arm_names.len() < 2 {
            return Err(Error::InvalidArgument(
                "need a control arm and at least one treatment arm".into(),
            ));
        }
        if outcome.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite {
                what: "outcome".into(),
            });
        }
        let mut counts = vec![0usize; arm_names.len()];
        for &d in &treatment {
            if d >= arm_names.len() {
                return Err(Error::InvalidArgument(format!(
                    "arm index {d} out of range"
                )));
            }
            counts[d] += 1;
        }
        if let Some(arm) = counts.iter().position(|&c| c == 0) {
            return Err(Error::SingletonArm {
                arm: arm_names[arm].clone(),
                count: 0,
                required: 1,
            });
        }
        for c in &controls {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "control column",
                    expected: n,
                    found: c.len(),
                });
            }
            if let ControlColumn::Continuous { values, name } = c {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: name.clone() });
                }
            }
            if let ControlColumn::Categorical { levels, codes, .. } = c {
                if codes.iter().any(|&code| code >= levels.len()) {
                    return Err(Error::InvalidArgument(format!(
                        "category code out of range in `{}`",
                        c.name()
                    )));
                }
            }
        }
        Ok(Self {
            outcome,
            treatment,
            arm_names,
            controls: controls.into_iter().map(ControlColumn::compact).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of treatment arms, excluding the control arm.
    pub fn k(&self) -> usize {
        self.arm_names.len() - 1
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treatment(&self) -> &[usize] {
        &self.treatment
    }

    pub fn arm_names(&self) -> &[String] {
        &self.arm_names
    }

    pub fn controls(&self) -> &[ControlColumn] {
        &self.controls
    }

    pub fn all_categorical(&self) -> bool {
        self.controls
            .iter()
            .all(|c| c.kind() == ControlKind::Categorical)
    }

    pub fn arm_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.arm_names.len()];
        for &d in &self.treatment {
            counts[d] += 1;
        }
        counts
    }

    /// Rows in the given order (repeats allowed). Fails if an arm disappears.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::new(
            rows.iter().map(|&r| self.outcome[r]).collect(),
            rows.iter().map(|&r| self.treatment[r]).collect(),
            self.arm_names.clone(),
            self.controls.iter().map(|c| c.select(rows)).collect(),
        )
    }

    /// Keeps the rows assigned to `arms` and relabels `arms[j]` as arm `j`.
    /// `arms[0]` becomes the control arm.
    pub fn restrict_arms(&self, arms: &[usize]) -> Result<(Dataset, Vec<usize>)> {
        let mut remap = vec![None; self.arm_names.len()];
        for (j, &a) in arms.iter().enumerate() {
            if a >= self.arm_names.len() || remap[a].is_some() {
                return Err(Error::InvalidArgument(format!("bad arm filter {arms:?}")));
            }
            remap[a] = Some(j);
        }
        let rows: Vec<usize> = (0..self.n())
            .filter(|&i| remap[self.treatment[i]].is_some())
            .collect();
        let ds = Dataset::new(
            rows.iter().map(|&r| self.outcome[r]).collect(),
            rows.iter()
                .map(|&r| remap[self.treatment[r]].unwrap())
                .collect(),
            arms.iter().map(|&a| self.arm_names[a].clone()).collect(),
            self.controls.iter().map(|c| c.select(&rows)).collect(),
        )?;
        Ok((ds, rows))
    }

    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Dataset> {
        Dataset::new(
            outcome,
            self.treatment.clone(),
            self.arm_names.clone(),
            self.controls.clone(),
        )
    }

    /// Groups rows by their full control vector.
    pub fn strata(&self) -> Strata {
        let mut groups: BTreeMap<Vec<StratumKeyPart>, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n() {
            let key = self
                .controls
                .iter()
                .map(|c| match c {
                    ControlColumn::Categorical { codes, .. } => StratumKeyPart::Code(codes[i]),
                    ControlColumn::Continuous { values, .. } => StratumKeyPart::Value(values[i]),
                })
                .collect();
            groups.entry(key).or_default().push(i);
        }
        let mut ids = vec![0; self.n()];
        let mut labels = Vec::with_capacity(groups.len());
        let mut counts = Vec::with_capacity(groups.len());
        let mut representative = Vec::with_capacity(groups.len());
        for (s, rows) in groups.into_values().enumerate() {
            for &r in &rows {
                ids[r] = s;
            }
            let first = rows[0];
            labels.push(if self.controls.is_empty() {
                "(all)".to_string()
            } else {
                self.controls
                    .iter()
                    .map(|c| format!("{}={}", c.name(), c.display_value(first)))
                    .collect::<Vec<_>>()
                    .join("|")
            });
            counts.push(rows.len());
            representative.push(first);
        }
        Strata {
            ids,
            labels,
            counts,
            representative,
        }
    }

    /// Writes `outcome,treatment,<controls>` with a header row.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["outcome".to_string(), "treatment".to_string()];
        header.extend(self.controls.iter().map(|c| c.name().to_string()));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![
                format!("{}", self.outcome[i]),
                self.arm_names[self.treatment[i]].clone(),
            ];
            rec.extend(self.controls.iter().map(|c| c.display_value(i)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum StratumKeyPart {
    Code(usize),
    Value(f64),
}

impl PartialEq for StratumKeyPart {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for StratumKeyPart {}

impl PartialOrd for StratumKeyPart {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for StratumKeyPart {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (StratumKeyPart::Code(a), StratumKeyPart::Code(b)) => a.cmp(b),
            (StratumKeyPart::Value(a), StratumKeyPart::Value(b)) => a.total_cmp(b),
            (StratumKeyPart::Code(_), StratumKeyPart::Value(_)) => Ordering::Less,
            (StratumKeyPart::Value(_), StratumKeyPart::Code(_)) => Ordering::Greater,
        }
    }
}

/// Row grouping by unique control vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Strata {
    /// Stratum index of each row.
    pub ids: Vec<usize>,
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
    /// First row of each stratum.
    pub representative: Vec<usize>,
}

impl Strata {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `counts[s][d]`: observations of arm `d` in stratum `s`.
    pub fn cell_counts(&self, treatment: &[usize], arms: usize) -> Vec<Vec<usize>> {
        let mut cells = vec![vec![0; arms]; self.len()];
        for (&s, &d) in self.ids.iter().zip(treatment) {
            cells[s][d] += 1;
        }
        cells
    }
}

/// `N×K` matrix of arm indicators; the control arm is the omitted category.
pub fn encode_treatments(dataset: &Dataset) -> DMatrix<f64> {
    let k = dataset.k();
    let mut x = DMatrix::zeros(dataset.n(), k);
    for (i, &d) in dataset.treatment().iter().enumerate() {
        if d > 0 {
            x[(i, d - 1)] = 1.0;
        }
    }
    x
}

/// Inverse of [`encode_treatments`]. Rows must be all-zero or a single one.
pub fn decode_treatments(x: &DMatrix<f64>) -> Result<Vec<usize>> {
    x.row_iter()
        .map(|row| {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v == 1.0)
                .map(|(j, _)| j)
                .collect();
            let zeros = row.iter().filter(|v| **v == 0.0).count();
            match (ones.as_slice(), zeros + ones.len() == row.len()) {
                ([], true) => Ok(0),
                ([j], true) => Ok(j + 1),
                _ => Err(Error::InvalidArgument(
                    "row is not a treatment indicator".into(),
                )),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlStyle {
    /// One dummy per distinct control vector (saturated); all controls categorical.
    #[default]
    StrataDummies,
    /// Additive: dummies per categorical column, continuous columns linearly.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    #[default]
    None,
    Demeaned,
    Raw,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub control_style: ControlStyle,
    pub interaction: Interaction,
    /// Restrict to these arms (first one becomes the control arm).
    pub subsample: Option<Vec<usize>>,
}

impl DesignSpec {
    pub fn new(control_style: ControlStyle, interaction: Interaction) -> Self {
        Self {
            control_style,
            interaction,
            subsample: None,
        }
    }
}

/// A built regression design plus its column layout.
#[derive(Debug, Clone)]
pub struct Design {
    pub matrix: DesignMatrix,
    /// Outcome on the rows used.
    pub outcome: Vec<f64>,
    /// Row indices into the original dataset.
    pub rows: Vec<usize>,
    pub treatments: Range<usize>,
    pub controls: Range<usize>,
    pub interactions: Range<usize>,
    /// Sample mean of the control block (used to center interactions).
    pub control_means: Vec<f64>,
}

/// Control columns (no intercept) and their labels.
pub fn control_block(
    dataset: &Dataset,
    style: ControlStyle,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = dataset.n();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    match style {
        ControlStyle::StrataDummies => {
            if !dataset.all_categorical() {
                return Err(Error::InvalidArgument(
                    "strata dummies require every control column to be categorical".into(),
                ));
            }
            let strata = dataset.strata();
            let reference = most_frequent(&strata.counts);
            for s in (0..strata.len()).filter(|&s| s != reference) {
                cols.push(
                    strata
                        .ids
                        .iter()
                        .map(|&id| f64::from(u8::from(id == s)))
                        .collect(),
                );
                labels.push(strata.labels[s].clone());
            }
        }
        ControlStyle::Linear => {
            for c in dataset.controls() {
                match c {
                    ControlColumn::Categorical {
                        name,
                        levels,
                        codes,
                    } => {
                        let mut counts = vec![0; levels.len()];
                        for &code in codes {
                            counts[code] += 1;
                        }
                        let reference = most_frequent(&counts);
                        for (l, level) in levels.iter().enumerate().filter(|(l, _)| *l != reference)
                        {
                            cols.push(
                                codes
                                    .iter()
                                    .map(|&code| f64::from(u8::from(code == l)))
                                    .collect(),
                            );
                            labels.push(format!("{name}={level}"));
                        }
                    }
                    ControlColumn::Continuous { name, values } => {
                        cols.push(values.clone());
                        labels.push(name.clone());
                    }
                }
            }
        }
    }
    let m = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok((m, labels))
}

/// Index of the largest count; ties go to the first.
fn most_frequent(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// `[intercept | controls]`.
pub fn control_design(dataset: &Dataset, style: ControlStyle) -> Result<DesignMatrix> {
    let (block, labels) = control_block(dataset, style)?;
    let n = dataset.n();
    let values = DMatrix::from_fn(n, 1 + block.ncols(), |i, j| {
        if j == 0 {
            1.0
        } else {
            block[(i, j - 1)]
        }
    });
    let mut all = vec!["(intercept)".to_string()];
    all.extend(labels);
    DesignMatrix::new(values, all, true)
}

fn treatment_label(arm: &str) -> String {
    format!("D={arm}")
}

/// Builds the regression design for `spec`.
pub fn build_design(dataset: &Dataset, spec: &DesignSpec) -> Result<Design> {
    let (restricted, rows);
    let ds = match &spec.subsample {
        Some(arms) => {
            (restricted, rows) = dataset.restrict_arms(arms)?;
            &restricted
        }
        None => {
            rows = (0..dataset.n()).collect();
            dataset
        }
    };
    let n = ds.n();
    let k = ds.k();
    let x = encode_treatments(ds);
    let (w, w_labels) = control_block(ds, spec.control_style)?;
    let c = w.ncols();
    let control_means: Vec<f64> = (0..c).map(|j| w.column(j).mean()).collect();
    let n_inter = match spec.interaction {
        Interaction::None => 0,
        _ => k * c,
    };
    let p = 1 + k + c + n_inter;
    let mut values = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(p);
    labels.push("(intercept)".to_string());
    values.column_mut(0).fill(1.0);
    for j in 0..k {
        values.column_mut(1 + j).copy_from(&x.column(j));
        labels.push(treatment_label(&ds.arm_names()[j + 1]));
    }
    for j in 0..c {
        values.column_mut(1 + k + j).copy_from(&w.column(j));
        labels.push(w_labels[j].clone());
    }
    if n_inter > 0 {
        let shift = spec.interaction == Interaction::Demeaned;
        for a in 0..k {
            for j in 0..c {
                let col = 1 + k + c + a * c + j;
                let center = if shift { control_means[j] } else { 0.0 };
                for i in 0..n {
                    values[(i, col)] = x[(i, a)] * (w[(i, j)] - center);
                }
                labels.push(format!(
                    "{}×{}",
                    treatment_label(&ds.arm_names()[a + 1]),
                    w_labels[j]
                ));
            }
        }
    }
    Ok(Design {
        matrix: DesignMatrix::new(values, labels, true)?,
        outcome: ds.outcome().to_vec(),
        rows,
        treatments: 1..1 + k,
        controls: 1 + k..1 + k + c,
        interactions: 1 + k + c..p,
        control_means,
    })
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvColumns {
    pub outcome: String,
    pub treatment: String,
    pub controls: Vec<(String, ControlKind)>,
    /// Treatment label designated as the control arm.
    pub control_arm: String,
    /// Optional order of the non-control arms; defaults to natural sort order.
    pub arm_order: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Minimum observations per arm.
    pub min_arm_count: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { min_arm_count: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(
        field.trim(),
        "" | "NA" | "na" | "NaN" | "nan" | "." | "null" | "NULL"
    )
}

fn parse_finite(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Numeric labels sort numerically, everything else lexicographically.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Reads a headed UTF-8 CSV. Rows with a missing or unparsable field in any
/// used column are dropped and counted.
pub fn load_csv(
    path: impl AsRef<Path>,
    columns: &CsvColumns,
    options: LoadOptions,
) -> Result<(Dataset, LoadReport)> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, columns, options)
}

pub fn load_csv_reader<R: std::io::Read>(
    reader: R,
    columns: &CsvColumns,
    options: LoadOptions,
) -> Result<(Dataset, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = find(&columns.outcome)?;
    let d_idx = find(&columns.treatment)?;
    let c_idx: Vec<usize> = columns
        .controls
        .iter()
        .map(|(name, _)| find(name))
        .collect::<Result<_>>()?;

    let mut report = LoadReport::default();
    let mut outcome = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut raw_controls: Vec<Vec<String>> = vec![Vec::new(); c_idx.len()];
    for record in rdr.records() {
        let record = record?;
        report.rows_read += 1;
        let get = |i: usize| record.get(i).unwrap_or("");
        let y = parse_finite(get(y_idx));
        let d = get(d_idx);
        let mut ok = y.is_some() && !is_missing(d);
        for (j, &ci) in c_idx.iter().enumerate() {
            let f = get(ci);
            ok &= !is_missing(f);
            if columns.controls[j].1 == ControlKind::Continuous {
                ok &= parse_finite(f).is_some();
            }
        }
        if !ok {
            report.rows_dropped += 1;
            continue;
        }
        outcome.push(y.unwrap());
        labels.push(d.trim().to_string());
        for (j, &ci) in c_idx.iter().enumerate() {
            raw_controls[j].push(get(ci).trim().to_string());
        }
    }
    if outcome.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }

    let mut distinct: Vec<String> = labels.clone();
    distinct.sort_by(|a, b| natural_cmp(a, b));
    distinct.dedup();
    if !distinct.contains(&columns.control_arm) {
        return Err(Error::UnknownControlArm(columns.control_arm.clone()));
    }
    let mut arm_names = vec![columns.control_arm.clone()];
    match &columns.arm_order {
        Some(order) => {
            for name in order {
                if name == &columns.control_arm
                    || !distinct.contains(name)
                    || arm_names.contains(name)
                {
                    return Err(Error::InvalidArgument(format!(
                        "arm order entry `{name}` is not a treatment arm"
                    )));
                }
                arm_names.push(name.clone());
            }
            if arm_names.len() != distinct.len() {
                return Err(Error::InvalidArgument(
                    "arm order must list every non-control arm".into(),
                ));
            }
        }
        None => arm_names.extend(distinct.into_iter().filter(|l| l != &columns.control_arm)),
    }
    let arm_index: HashMap<&str, usize> = arm_names
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let treatment: Vec<usize> = labels.iter().map(|l| arm_index[l.as_str()]).collect();

    let mut counts = vec![0; arm_names.len()];
    for &d in &treatment {
        counts[d] += 1;
    }
    if let Some(arm) = counts.iter().position(|&c| c < options.min_arm_count) {
        return Err(Error::SingletonArm {
            arm: arm_names[arm].clone(),
            count: counts[arm],
            required: options.min_arm_count,
        });
    }

    let controls = columns
        .controls
        .iter()
        .zip(raw_controls)
        .map(|((name, kind), raw)| match kind {
            ControlKind::Continuous => ControlColumn::Continuous {
                name: name.clone(),
                values: raw.iter().map(|f| parse_finite(f).unwrap()).collect(),
            },
            ControlKind::Categorical => {
                let mut levels = raw.clone();
                levels.sort_by(|a, b| natural_cmp(a, b));
                levels.dedup();
                let index: HashMap<&str, usize> = levels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (l.as_str(), i))
                    .collect();
                let codes = raw.iter().map(|f| index[f.as_str()]).collect();
                ControlColumn::Categorical {
                    name: name.clone(),
                    levels,
                    codes,
                }
            }
        })
        .collect();

    Ok((
        Dataset::new(outcome, treatment, arm_names, controls)?,
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::ols_fit;

    fn stratum(codes: Vec<usize>, levels: usize) -> ControlColumn {
        ControlColumn::Categorical {
            name: "w".into(),
            levels: (0..levels).map(|l| l.to_string()).collect(),
            codes,
        }
    }

    fn columns() -> CsvColumns {
        CsvColumns {
            outcome: "y".into(),
            treatment: "arm".into(),
            controls: vec![("school".into(), ControlKind::Categorical)],
            control_arm: "control".into(),
            arm_order: Some(vec!["small".into(), "aide".into()]),
        }
    }

    #[test]
    fn three_row_file() {
        let text = "y,arm,school\n1.0,control,a\n2.0,small,a\n3.5,aide,b\n";
        let (ds, report) =
            load_csv_reader(text.as_bytes(), &columns(), LoadOptions::default()).unwrap();
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.treatment(), &[0, 1, 2]);
        assert_eq!(report.rows_dropped, 0);
        let strict = LoadOptions { min_arm_count: 2 };
        assert!(matches!(
            load_csv_reader(text.as_bytes(), &columns(), strict),
            Err(Error::SingletonArm { .. })
        ));
    }

    #[test]
    fn nan_outcome_row_dropped() {
        let text = "y,arm,school\n1.0,control,a\nNaN,small,a\n2.0,small,b\n3.5,aide,b\n";
        let (ds, report) =
            load_csv_reader(text.as_bytes(), &columns(), LoadOptions::default()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(report.rows_dropped, 1);
        assert_eq!(report.rows_read, 4);
    }

    #[test]
    fn ingestion_errors() {
        let text = "y,arm\n1.0,control\n";
        assert!(matches!(
            load_csv_reader(text.as_bytes(), &columns(), LoadOptions::default()),
            Err(Error::MissingColumn(c)) if c == "school"
        ));
        let text = "y,arm,school\nNA,control,a\n";
        assert!(matches!(
            load_csv_reader(text.as_bytes(), &columns(), LoadOptions::default()),
            Err(Error::EmptyAfterFiltering)
        ));
        let text = "y,arm,school\n1,treated,a\n2,small,a\n";
        assert!(matches!(
            load_csv_reader(text.as_bytes(), &columns(), LoadOptions::default()),
            Err(Error::UnknownControlArm(_))
        ));
    }

    #[test]
    fn encode_examples() {
        let ds = Dataset::new(
            vec![0.0; 3],
            vec![0, 1, 2],
            vec!["c".into(), "a".into(), "b".into()],
            vec![],
        )
        .unwrap();
        let x = encode_treatments(&ds);
        assert_eq!(
            x,
            DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
        );
        assert_eq!(decode_treatments(&x).unwrap(), vec![0, 1, 2]);
        // column means are arm shares
        let ds = Dataset::new(
            vec![0.0; 5],
            vec![0, 1, 1, 2, 0],
            vec!["c".into(), "a".into(), "b".into()],
            vec![],
        )
        .unwrap();
        let x = encode_treatments(&ds);
        assert!((x.column(0).mean() - 0.4).abs() < 1e-15);
        assert!((x.column(1).mean() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn all_control_rows_encode_to_zero() {
        let ds = Dataset::new(
            vec![0.0; 3],
            vec![0, 0, 1],
            vec!["c".into(), "t".into()],
            vec![],
        )
        .unwrap();
        let x = encode_treatments(&ds);
        assert_eq!(x.row(0).sum(), 0.0);
        assert_eq!(x.row(1).sum(), 0.0);
        assert_eq!(x.row(2).sum(), 1.0);
    }

    #[test]
    fn design_widths() {
        let ds = Dataset::new(
            vec![0.0; 6],
            vec![0, 1, 2, 0, 1, 2],
            vec!["c".into(), "a".into(), "b".into()],
            vec![stratum(vec![0, 0, 0, 1, 1, 1], 2)],
        )
        .unwrap();
        let plain = build_design(&ds, &DesignSpec::default()).unwrap();
        assert_eq!(plain.matrix.ncols(), 4);
        let inter = build_design(
            &ds,
            &DesignSpec::new(ControlStyle::StrataDummies, Interaction::Demeaned),
        )
        .unwrap();
        assert_eq!(inter.matrix.ncols(), 6);
        assert_eq!(inter.interactions, 4..6);
        // centered interactions: W − W̄ sums to zero
        let w = inter.matrix.values().column(inter.controls.start);
        let wbar = inter.control_means[0];
        assert!(w.iter().map(|v| v - wbar).sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn most_frequent_stratum_is_reference() {
        let ds = Dataset::new(
            vec![0.0; 6],
            vec![0, 1, 0, 1, 0, 1],
            vec!["c".into(), "t".into()],
            vec![stratum(vec![0, 1, 1, 1, 2, 2], 3)],
        )
        .unwrap();
        let (_, labels) = control_block(&ds, ControlStyle::StrataDummies).unwrap();
        assert_eq!(labels, vec!["w=0".to_string(), "w=2".to_string()]);
    }

    #[test]
    fn singleton_stratum_makes_interacted_design_singular() {
        // stratum 1 only has arm 0 and 1: the arm-2 interaction is all zero
        let ds = Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            vec![0, 1, 2, 0, 1, 0, 1],
            vec!["c".into(), "a".into(), "b".into()],
            vec![stratum(vec![0, 0, 0, 0, 1, 1, 1], 2)],
        )
        .unwrap();
        let d = build_design(
            &ds,
            &DesignSpec::new(ControlStyle::StrataDummies, Interaction::Raw),
        )
        .unwrap();
        match ols_fit(&d.outcome, &d.matrix) {
            Err(Error::RankDeficient { columns }) => {
                assert!(columns.iter().any(|c| c.contains("w=1")))
            }
            other => panic!("expected rank failure, got {other:?}"),
        }
    }

    #[test]
    fn demeaned_and_raw_interactions_agree() {
        // τ̂_k from the demeaned design equals γ̂₀ + W̄'γ̂_W from the raw one
        let codes = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2];
        let d = vec![0, 1, 2, 0, 1, 2, 0, 0, 1, 2, 1, 2, 0, 0, 1, 2, 2, 1];
        let y: Vec<f64> = (0..codes.len())
            .map(|i| ((i * 7919) % 13) as f64 * 0.37 + d[i] as f64)
            .collect();
        let ds = Dataset::new(
            y,
            d,
            vec!["c".into(), "a".into(), "b".into()],
            vec![stratum(codes, 3)],
        )
        .unwrap();
        let dm = build_design(
            &ds,
            &DesignSpec::new(ControlStyle::StrataDummies, Interaction::Demeaned),
        )
        .unwrap();
        let raw = build_design(
            &ds,
            &DesignSpec::new(ControlStyle::StrataDummies, Interaction::Raw),
        )
        .unwrap();
        let fd = ols_fit(&dm.outcome, &dm.matrix).unwrap();
        let fr = ols_fit(&raw.outcome, &raw.matrix).unwrap();
        let c = raw.controls.len();
        for k in 0..2 {
            let mut tau = fr.coefficients[raw.treatments.start + k];
            for j in 0..c {
                tau += raw.control_means[j] * fr.coefficients[raw.interactions.start + k * c + j];
            }
            assert!((fd.coefficients[dm.treatments.start + k] - tau).abs() < 1e-10);
        }
    }

    #[test]
    fn subsample_remaps_arms() {
        let ds = Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0, 1, 2, 2],
            vec!["c".into(), "a".into(), "b".into()],
            vec![],
        )
        .unwrap();
        let (sub, rows) = ds.restrict_arms(&[0, 2]).unwrap();
        assert_eq!(rows, vec![0, 2, 3]);
        assert_eq!(sub.treatment(), &[0, 1, 1]);
        assert_eq!(sub.arm_names(), &["c".to_string(), "b".to_string()]);
    }
}
