//! Scoring against human gold labels, and inter-coder reliability.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use num::{BigInt, BigRational, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

pub type LabelSet = BTreeSet<String>;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot read gold labels {path}: {reason}")]
    Gold { path: String, reason: String },
    #[error("gold row {row}: {reason}")]
    GoldRow { row: usize, reason: String },
    #[error("agreement filter needs exactly two coders, found {0}")]
    CoderCount(usize),
    #[error("predictions and gold share no units")]
    EmptyOverlap,
    #[error("fewer than 2 pairable units")]
    TooFewPairable,
    #[error("degenerate margin: expected disagreement is zero")]
    DegenerateMargin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub unit_id: String,
    pub coder_id: String,
    pub labels: LabelSet,
}

/// Gold table with a header row: `unit_id,coder_id,label1[,label2]`.
pub fn read_gold(path: &Path) -> Result<Vec<GoldLabel>, MetricsError> {
    let err = |reason: String| MetricsError::Gold {
        path: path.display().to_string(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(u), Some(c), Some(l1)) = (col("unit_id"), col("coder_id"), col("label1")) else {
        return Err(err("header must name unit_id, coder_id and label1".into()));
    };
    let l2 = col("label2");
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| MetricsError::GoldRow {
            row,
            reason: e.to_string(),
        })?;
        let field = |j: usize| rec.get(j).map(str::trim).unwrap_or("").to_string();
        let (unit_id, coder_id) = (field(u), field(c));
        if unit_id.is_empty() || coder_id.is_empty() {
            return Err(MetricsError::GoldRow {
                row,
                reason: "empty unit_id or coder_id".into(),
            });
        }
        let mut labels: LabelSet = [field(l1)].into_iter().filter(|s| !s.is_empty()).collect();
        if let Some(j) = l2 {
            let second = field(j);
            if !second.is_empty() {
                labels.insert(second);
            }
        }
        if labels.is_empty() {
            return Err(MetricsError::GoldRow {
                row,
                reason: "no label".into(),
            });
        }
        if !seen.insert((unit_id.clone(), coder_id.clone())) {
            return Err(MetricsError::GoldRow {
                row,
                reason: format!("second record for unit {unit_id:?}, coder {coder_id:?}"),
            });
        }
        out.push(GoldLabel {
            unit_id,
            coder_id,
            labels,
        });
    }
    Ok(out)
}

/// unit -> coder -> labels
pub fn by_unit(gold: &[GoldLabel]) -> BTreeMap<String, BTreeMap<String, LabelSet>> {
    let mut m: BTreeMap<String, BTreeMap<String, LabelSet>> = BTreeMap::new();
    for g in gold {
        m.entry(g.unit_id.clone())
            .or_default()
            .insert(g.coder_id.clone(), g.labels.clone());
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Label sets share at least one label.
    Lenient,
    /// Label sets are equal.
    Strict,
}

impl Matching {
    pub fn agrees(&self, a: &LabelSet, b: &LabelSet) -> bool {
        match self {
            Matching::Lenient => !a.is_disjoint(b),
            Matching::Strict => a == b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub matching: Matching,
    pub coders: Vec<String>,
    pub units_coded: usize,
    /// Units only one coder labelled; dropped.
    pub missing_coder: usize,
    pub disagreements: usize,
    pub retained_count: usize,
    /// Retained unit -> gold labels (the labels both coders gave).
    pub retained: BTreeMap<String, LabelSet>,
}

pub fn agreement_filter(gold: &[GoldLabel], matching: Matching) -> Result<AgreementReport, MetricsError> {
    let coders: BTreeSet<&str> = gold.iter().map(|g| g.coder_id.as_str()).collect();
    if coders.len() != 2 {
        return Err(MetricsError::CoderCount(coders.len()));
    }
    let coders: Vec<String> = coders.into_iter().map(str::to_string).collect();
    let units = by_unit(gold);
    let mut report = AgreementReport {
        matching,
        units_coded: units.len(),
        coders: coders.clone(),
        missing_coder: 0,
        disagreements: 0,
        retained_count: 0,
        retained: BTreeMap::new(),
    };
    for (unit, codes) in &units {
        let (Some(a), Some(b)) = (codes.get(&coders[0]), codes.get(&coders[1])) else {
            report.missing_coder += 1;
            continue;
        };
        if matching.agrees(a, b) {
            report
                .retained
                .insert(unit.clone(), a.intersection(b).cloned().collect());
        } else {
            report.disagreements += 1;
        }
    }
    report.retained_count = report.retained.len();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Presence,
    Classification,
    Topic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub matching: Matching,
    pub n_units: usize,
    pub accuracy: f64,
    /// Headline figures, macro-averaged over classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_avg: Averaged,
    pub micro_avg: Averaged,
    pub per_class: Vec<ClassScore>,
    /// Pipeline vs gold, one coding each per unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Score predictions on the units both sides cover.
///
/// Per class, strict matching counts set membership: a predicted label in
/// gold is a true positive, one not in gold a false positive, a gold label
/// not predicted a false negative. Lenient matching credits a unit whose
/// sets intersect with its shared labels and ignores the rest; a unit whose
/// sets are disjoint counts every prediction as a false positive and every
/// gold label as a false negative.
pub fn score(
    predictions: &BTreeMap<String, LabelSet>,
    gold: &BTreeMap<String, LabelSet>,
    matching: Matching,
    task: Task,
) -> Result<MetricsReport, MetricsError> {
    let units: Vec<&String> = predictions.keys().filter(|u| gold.contains_key(*u)).collect();
    if units.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    let mut counts: BTreeMap<String, [u64; 4]> = BTreeMap::new();
    let mut correct = 0u64;
    for u in &units {
        let (p, g) = (&predictions[*u], &gold[*u]);
        for c in g {
            counts.entry(c.clone()).or_default()[3] += 1;
        }
        let ok = matching.agrees(p, g);
        correct += ok as u64;
        match (matching, ok) {
            (Matching::Lenient, true) => {
                for c in p.intersection(g) {
                    counts.entry(c.clone()).or_default()[0] += 1;
                }
            }
            _ => {
                for c in p.union(g) {
                    let e = counts.entry(c.clone()).or_default();
                    match (p.contains(c), g.contains(c)) {
                        (true, true) => e[0] += 1,
                        (true, false) => e[1] += 1,
                        _ => e[2] += 1,
                    }
                }
            }
        }
    }
    let per_class: Vec<ClassScore> = counts
        .into_iter()
        .map(|(class, [tp, fp, fn_, support])| {
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassScore {
                class,
                tp,
                fp,
                fn_,
                support,
                precision,
                recall,
                f1: f1(precision, recall),
            }
        })
        .collect();
    let k = per_class.len() as f64;
    let macro_avg = Averaged {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
    };
    let (tp, fp, fn_) = per_class
        .iter()
        .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
    let (mp, mr) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let micro_avg = Averaged {
        precision: mp,
        recall: mr,
        f1: f1(mp, mr),
    };
    Ok(MetricsReport {
        task,
        matching,
        n_units: units.len(),
        accuracy: correct as f64 / units.len() as f64,
        precision: macro_avg.precision,
        recall: macro_avg.recall,
        f1: macro_avg.f1,
        macro_avg,
        micro_avg,
        per_class,
        alpha: None,
    })
}

/// Canonical single value for a label set, so alpha can treat two-label
/// codings as nominal categories.
pub fn label_value(labels: &LabelSet) -> String {
    labels.iter().cloned().collect::<Vec<_>>().join(" | ")
}

/// Nominal Krippendorff's alpha. Each unit lists the values its coders
/// assigned; units with fewer than two values are not pairable and are
/// skipped. Computed with exact rationals.
pub fn krippendorff_alpha<S: AsRef<str>>(units: &[Vec<S>]) -> Result<f64, MetricsError> {
    let mut categories: BTreeMap<&str, usize> = BTreeMap::new();
    let pairable: Vec<&Vec<S>> = units.iter().filter(|u| u.len() >= 2).collect();
    if pairable.len() < 2 {
        return Err(MetricsError::TooFewPairable);
    }
    for u in &pairable {
        for v in u.iter() {
            let next = categories.len();
            categories.entry(v.as_ref()).or_insert(next);
        }
    }
    let k = categories.len();
    // coincidence matrix, o[c][k] = sum over units of pairs (c,k) / (m_u - 1)
    let zero = BigRational::zero();
    let mut o = vec![vec![zero.clone(); k]; k];
    for u in &pairable {
        let m = u.len();
        let w = BigRational::new(BigInt::from(1), BigInt::from(m as u64 - 1));
        for (i, a) in u.iter().enumerate() {
            for (j, b) in u.iter().enumerate() {
                if i != j {
                    let (ca, cb) = (categories[a.as_ref()], categories[b.as_ref()]);
                    o[ca][cb] += &w;
                }
            }
        }
    }
    let n_c: Vec<BigRational> = o
        .iter()
        .map(|row| row.iter().fold(zero.clone(), |acc, x| acc + x))
        .collect();
    let n: BigRational = n_c.iter().fold(zero.clone(), |acc, x| acc + x);
    let mut observed = zero.clone();
    let mut expected = zero.clone();
    for c in 0..k {
        for d in 0..k {
            if c != d {
                observed += &o[c][d];
                expected += &n_c[c] * &n_c[d];
            }
        }
    }
    let one = BigRational::from_integer(BigInt::from(1));
    let d_o = observed / &n;
    let d_e = expected / (&n * (&n - &one));
    if d_e.is_zero() {
        return Err(MetricsError::DegenerateMargin);
    }
    let alpha = one - d_o / d_e;
    Ok(alpha.to_f64().expect("finite rational"))
}

/// Everything `eval` reports for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agreement: AgreementSummary,
    pub reports: Vec<MetricsReport>,
    /// Between the two human coders over every doubly coded unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_inter_coder: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub matching: Matching,
    pub units_coded: usize,
    pub missing_coder: usize,
    pub disagreements: usize,
    pub retained_count: usize,
}

impl From<&AgreementReport> for AgreementSummary {
    fn from(r: &AgreementReport) -> Self {
        Self {
            matching: r.matching,
            units_coded: r.units_coded,
            missing_coder: r.missing_coder,
            disagreements: r.disagreements,
            retained_count: r.retained_count,
        }
    }
}

/// Filter gold by coder agreement, then score `predictions` both ways.
pub fn evaluate(
    predictions: &BTreeMap<String, LabelSet>,
    gold: &[GoldLabel],
    filter: Matching,
    task: Task,
) -> Result<EvalReport, MetricsError> {
    let agreement = agreement_filter(gold, filter)?;
    let mut notes = Vec::new();
    let mut reports = Vec::new();
    for matching in [Matching::Strict, Matching::Lenient] {
        let mut r = score(predictions, &agreement.retained, matching, task)?;
        let pairs: Vec<Vec<String>> = agreement
            .retained
            .iter()
            .filter_map(|(u, g)| predictions.get(u).map(|p| vec![label_value(p), label_value(g)]))
            .collect();
        r.alpha = krippendorff_alpha(&pairs).ok();
        reports.push(r);
    }
    let coded: Vec<Vec<String>> = by_unit(gold)
        .values()
        .map(|codes| codes.values().map(label_value).collect())
        .collect();
    let alpha_inter_coder = match krippendorff_alpha(&coded) {
        Ok(a) => Some(a),
        Err(e) => {
            notes.push(format!("inter-coder alpha unavailable: {e}"));
            None
        }
    };
    if task == Task::Presence {
        notes.push("presence: \"present\" is the positive class".into());
    }
    Ok(EvalReport {
        agreement: AgreementSummary::from(&agreement),
        reports,
        alpha_inter_coder,
        notes,
    })
}

/// Aligned plain-text table: Accuracy, F1, Precision, Recall, Alpha.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let a = &report.agreement;
    let _ = writeln!(
        out,
        "gold: {} coded, {} retained ({} disagreements, {} single-coded; {:?} filter)",
        a.units_coded, a.retained_count, a.disagreements, a.missing_coder, a.matching
    );
    let _ = writeln!(
        out,
        "{:<10} {:<8} {:>7} {:>9} {:>7} {:>10} {:>8} {:>8}",
        "matching", "average", "units", "accuracy", "f1", "precision", "recall", "alpha"
    );
    let fmt_alpha = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    for r in &report.reports {
        for (name, avg) in [("macro", r.macro_avg), ("micro", r.micro_avg)] {
            let _ = writeln!(
                out,
                "{:<10} {:<8} {:>7} {:>9.3} {:>7.3} {:>10.3} {:>8.3} {:>8}",
                format!("{:?}", r.matching).to_lowercase(),
                name,
                r.n_units,
                r.accuracy,
                avg.f1,
                avg.precision,
                avg.recall,
                fmt_alpha(r.alpha)
            );
        }
    }
    let _ = writeln!(out, "inter-coder alpha: {}", fmt_alpha(report.alpha_inter_coder));
    if let Some(r) = report.reports.first() {
        let _ = writeln!(out);
        let width = r.per_class.iter().map(|c| c.class.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:<width$} {:>6} {:>5} {:>5} {:>5} {:>10} {:>8} {:>7}",
            "class", "support", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        for c in &r.per_class {
            let _ = writeln!(
                out,
                "{:<width$} {:>7} {:>5} {:>5} {:>5} {:>10.3} {:>8.3} {:>7.3}",
                c.class, c.support, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[&str]) -> LabelSet {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn map(rows: &[(&str, &[&str])]) -> BTreeMap<String, LabelSet> {
        rows.iter().map(|(u, l)| (u.to_string(), set(l))).collect()
    }

    #[test]
    fn alpha_oracles() {
        assert_eq!(
            krippendorff_alpha(&[vec!["a", "a"], vec!["b", "b"], vec!["c", "c"]]).unwrap(),
            1.0
        );
        let a = krippendorff_alpha(&[vec!["a", "a"], vec!["a", "b"], vec!["b", "b"], vec!["b", "a"]]).unwrap();
        assert!((a - 0.125).abs() < 1e-12);
        assert!(matches!(
            krippendorff_alpha(&[vec!["a", "a"], vec!["a", "a"]]),
            Err(MetricsError::DegenerateMargin)
        ));
        assert!(matches!(
            krippendorff_alpha(&[vec!["a", "b"], vec!["a"]]),
            Err(MetricsError::TooFewPairable)
        ));
    }

    #[test]
    fn alpha_skips_single_codings() {
        let with = krippendorff_alpha(&[
            vec!["a", "a"],
            vec!["a", "b"],
            vec!["b", "b"],
            vec!["b", "a"],
            vec!["c"],
        ])
        .unwrap();
        assert!((with - 0.125).abs() < 1e-12);
    }

    #[test]
    fn accuracy_three_of_four() {
        let gold = map(&[("1", &["A"]), ("2", &["A"]), ("3", &["B"]), ("4", &["B"])]);
        let pred = map(&[("1", &["A"]), ("2", &["A"]), ("3", &["B"]), ("4", &["A"])]);
        let r = score(&pred, &gold, Matching::Strict, Task::Classification).unwrap();
        assert_eq!(r.accuracy, 0.75);
        // single label, complete predictions: micro F1 is accuracy
        assert!((r.micro_avg.f1 - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn macro_from_known_confusion() {
        // A: tp2 fp1 fn0, B: tp1 fp0 fn2
        let gold = map(&[
            ("1", &["A"]),
            ("2", &["A"]),
            ("3", &["B"]),
            ("4", &["B"]),
            ("5", &["B"]),
        ]);
        let pred = map(&[("1", &["A"]), ("2", &["A"]), ("3", &["B"]), ("4", &["A"]), ("5", &[])]);
        let r = score(&pred, &gold, Matching::Strict, Task::Classification).unwrap();
        let shape: Vec<(&str, u64, u64, u64)> = r
            .per_class
            .iter()
            .map(|c| (c.class.as_str(), c.tp, c.fp, c.fn_))
            .collect();
        assert_eq!(shape, vec![("A", 2, 1, 0), ("B", 1, 0, 2)]);
        assert!((r.precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.4} {:.4}", r.precision, r.recall), "0.8333 0.6667");
    }

    #[test]
    fn perfect_predictions() {
        let gold = map(&[("1", &["A"]), ("2", &["B", "C"])]);
        for m in [Matching::Strict, Matching::Lenient] {
            let r = score(&gold, &gold, m, Task::Classification).unwrap();
            assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn lenient_vs_strict() {
        let gold = map(&[("1", &["A", "B"])]);
        let pred = map(&[("1", &["A"])]);
        assert_eq!(
            score(&pred, &gold, Matching::Lenient, Task::Classification)
                .unwrap()
                .accuracy,
            1.0
        );
        assert_eq!(
            score(&pred, &gold, Matching::Strict, Task::Classification)
                .unwrap()
                .accuracy,
            0.0
        );
        assert!(matches!(
            score(&pred, &map(&[("2", &["A"])]), Matching::Strict, Task::Classification),
            Err(MetricsError::EmptyOverlap)
        ));
    }

    fn coded(rows: &[(&str, &str, &[&str])]) -> Vec<GoldLabel> {
        rows.iter()
            .map(|(u, c, l)| GoldLabel {
                unit_id: u.to_string(),
                coder_id: c.to_string(),
                labels: set(l),
            })
            .collect()
    }

    #[test]
    fn agreement_filter_rules() {
        let g = coded(&[
            ("1", "x", &["A"]),
            ("1", "y", &["A", "B"]),
            ("2", "x", &["A"]),
            ("2", "y", &["B"]),
            ("3", "x", &["C"]),
        ]);
        let lenient = agreement_filter(&g, Matching::Lenient).unwrap();
        assert_eq!(
            (lenient.retained_count, lenient.disagreements, lenient.missing_coder),
            (1, 1, 1)
        );
        assert_eq!(lenient.retained["1"], set(&["A"]));
        assert_eq!(agreement_filter(&g, Matching::Strict).unwrap().retained_count, 0);
        let same = coded(&[
            ("1", "x", &["A"]),
            ("1", "y", &["A"]),
            ("2", "x", &["B"]),
            ("2", "y", &["B"]),
        ]);
        assert_eq!(agreement_filter(&same, Matching::Strict).unwrap().retained_count, 2);
        assert!(matches!(
            agreement_filter(&coded(&[("1", "x", &["A"])]), Matching::Strict),
            Err(MetricsError::CoderCount(1))
        ));
    }
}
