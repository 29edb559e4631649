//! Output parsing, per-run metrics, seed aggregation and strategy deltas.
//!
//! Classification tasks report macro precision, macro F1 and accuracy;
//! entity extraction reports micro F1 over exact `(span, type)` matches.
//! Unparseable outputs count as wrong answers, never as missing ones.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, Label, TaskSpec};
use crate::num::Scalar;
use crate::promptkit;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("predictions do not cover the gold test ids: {0}")]
    CoverageMismatch(String),
    #[error("reports mix tasks {0:?} and {1:?}")]
    MixedTasks(String, String),
    #[error("reports populate different metrics")]
    MixedMetrics,
    #[error("no reports to aggregate")]
    NoReports,
    #[error("baseline mean of {0} is zero")]
    ZeroBaseline(Metric),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroPrecision,
    MacroF1,
    MicroF1,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::MacroPrecision, Metric::MacroF1, Metric::MicroF1, Metric::Accuracy];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MacroPrecision => "macro_precision",
            Metric::MacroF1 => "macro_f1",
            Metric::MicroF1 => "micro_f1",
            Metric::Accuracy => "accuracy",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::MacroPrecision => "Macro P",
            Metric::MacroF1 => "Macro F1",
            Metric::MicroF1 => "Micro F1",
            Metric::Accuracy => "Accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub test_id: String,
    pub raw_text: String,
    pub parsed: Label,
}

impl Prediction {
    pub fn new(test_id: impl Into<String>, raw_text: impl Into<String>, spec: &TaskSpec) -> Self {
        let raw_text = raw_text.into();
        Self {
            test_id: test_id.into(),
            parsed: parse_label(&raw_text, spec),
            raw_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub metrics: BTreeMap<Metric, T>,
    pub per_class: BTreeMap<String, ClassStats<T>>,
}

impl<T: Scalar> MetricReport<T> {
    pub fn get(&self, m: Metric) -> Option<T> {
        self.metrics.get(&m).copied()
    }

    /// The headline F1 of the task: macro F1 for classification, micro F1 for extraction.
    pub fn primary_f1(&self) -> Option<T> {
        self.get(Metric::MacroF1).or_else(|| self.get(Metric::MicroF1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd<T> {
    pub mean: T,
    pub std: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport<T> {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub seeds: Vec<Option<u64>>,
    pub metrics: BTreeMap<Metric, MeanStd<T>>,
}

impl<T: Scalar> AggregateReport<T> {
    pub fn primary_f1(&self) -> Option<MeanStd<T>> {
        self.metrics
            .get(&Metric::MacroF1)
            .or_else(|| self.metrics.get(&Metric::MicroF1))
            .copied()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Earliest whole-word occurrence of `needle` in `hay`.
fn whole_word_position(hay: &str, needle: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = hay[from..].find(needle) {
        let start = from + rel;
        let end = start + needle.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = hay[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

/// Turns raw model output into a label; `Label::Invalid` when nothing usable is found.
///
/// Classification: lowercase the first non-blank line and return the label-set
/// member that occurs earliest as a whole word. Extraction: parse the first
/// balanced bracketed list of `[span, type]` pairs, dropping unknown types.
pub fn parse_label(raw: &str, spec: &TaskSpec) -> Label {
    if spec.kind.is_classification() {
        let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        let line = line
            .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .to_lowercase();
        spec.label_set
            .iter()
            .filter_map(|l| whole_word_position(&line, l).map(|p| (p, std::cmp::Reverse(l.len()), l)))
            .min()
            .map_or(Label::Invalid, |(_, _, l)| Label::ClassName(l.clone()))
    } else {
        let Some(list) = promptkit::first_balanced_list(raw) else {
            return Label::Invalid;
        };
        let Some(pairs) = promptkit::parse_pair_list(list) else {
            return Label::Invalid;
        };
        Label::Entities(
            pairs
                .into_iter()
                .filter_map(|(span, ty)| spec.canonical_entity_type(&ty).map(|t| Entity::new(span, t)))
                .collect(),
        )
    }
}

fn ratio<T: Scalar>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_usize_lossy(num) / T::from_usize_lossy(den)
    }
}

fn harmonic<T: Scalar>(p: T, r: T) -> T {
    if p + r == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * p * r / (p + r)
    }
}

fn check_coverage<'a>(preds: &'a [Prediction], golds: &BTreeMap<String, Label>) -> Result<BTreeMap<&'a str, &'a Label>, EvalError> {
    let mut by_id = BTreeMap::new();
    for p in preds {
        if by_id.insert(p.test_id.as_str(), &p.parsed).is_some() {
            return Err(EvalError::CoverageMismatch(format!("duplicate prediction for {:?}", p.test_id)));
        }
        if !golds.contains_key(&p.test_id) {
            return Err(EvalError::CoverageMismatch(format!("no gold for {:?}", p.test_id)));
        }
    }
    if let Some(missing) = golds.keys().find(|k| !by_id.contains_key(k.as_str())) {
        return Err(EvalError::CoverageMismatch(format!("no prediction for {missing:?}")));
    }
    Ok(by_id)
}

fn class_of(l: &Label) -> Option<&str> {
    match l {
        Label::ClassName(c) => Some(c.as_str()),
        _ => None,
    }
}

fn entity_set(l: &Label) -> HashSet<&Entity> {
    match l {
        Label::Entities(es) => es.iter().collect(),
        _ => HashSet::new(),
    }
}

/// Metrics of one run against gold labels.
pub fn score_run<T: Scalar>(
    preds: &[Prediction],
    golds: &BTreeMap<String, Label>,
    spec: &TaskSpec,
) -> Result<MetricReport<T>, EvalError> {
    let by_id = check_coverage(preds, golds)?;
    let mut metrics = BTreeMap::new();
    let mut per_class = BTreeMap::new();
    if spec.kind.is_classification() {
        let n = golds.len();
        let mut correct = 0;
        let mut tp = vec![0usize; spec.label_set.len()];
        let mut fp = vec![0usize; spec.label_set.len()];
        let mut fn_ = vec![0usize; spec.label_set.len()];
        let index = |c: Option<&str>| c.and_then(|c| spec.label_set.iter().position(|l| l.eq_ignore_ascii_case(c)));
        for (id, gold) in golds {
            let g = index(class_of(gold));
            let p = index(class_of(by_id[id.as_str()]));
            match (g, p) {
                (Some(g), Some(p)) if g == p => {
                    tp[g] += 1;
                    correct += 1;
                }
                _ => {
                    if let Some(g) = g {
                        fn_[g] += 1;
                    }
                    if let Some(p) = p {
                        fp[p] += 1;
                    }
                }
            }
        }
        let (mut sum_p, mut sum_f) = (T::zero(), T::zero());
        for (i, class) in spec.label_set.iter().enumerate() {
            let precision: T = ratio(tp[i], tp[i] + fp[i]);
            let recall: T = ratio(tp[i], tp[i] + fn_[i]);
            let f1 = harmonic(precision, recall);
            sum_p = sum_p + precision;
            sum_f = sum_f + f1;
            per_class.insert(
                class.clone(),
                ClassStats {
                    precision,
                    recall,
                    f1,
                    support: tp[i] + fn_[i],
                },
            );
        }
        let k = T::from_usize_lossy(spec.label_set.len());
        metrics.insert(Metric::MacroPrecision, sum_p / k);
        metrics.insert(Metric::MacroF1, sum_f / k);
        metrics.insert(Metric::Accuracy, ratio(correct, n));
    } else {
        let mut counts: BTreeMap<&str, [usize; 3]> = spec.entity_type_set.iter().map(|t| (t.as_str(), [0; 3])).collect();
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (id, gold) in golds {
            let g = entity_set(gold);
            let p = entity_set(by_id[id.as_str()]);
            for e in &p {
                let slot = counts.entry(e.entity_type.as_str()).or_default();
                if g.contains(e) {
                    tp += 1;
                    slot[0] += 1;
                } else {
                    fp += 1;
                    slot[1] += 1;
                }
            }
            for e in g.difference(&p) {
                fn_ += 1;
                counts.entry(e.entity_type.as_str()).or_default()[2] += 1;
            }
        }
        let micro = if tp + fp + fn_ == 0 {
            T::one()
        } else {
            ratio(2 * tp, 2 * tp + fp + fn_)
        };
        metrics.insert(Metric::MicroF1, micro);
        for (ty, [t, f, m]) in counts {
            let precision: T = ratio(t, t + f);
            let recall: T = ratio(t, t + m);
            per_class.insert(
                ty.to_string(),
                ClassStats {
                    precision,
                    recall,
                    f1: harmonic(precision, recall),
                    support: t + m,
                },
            );
        }
    }
    Ok(MetricReport {
        task_id: spec.task_id.clone(),
        strategy: None,
        seed: None,
        metrics,
        per_class,
    })
}

/// Mean and sample standard deviation (divisor `n - 1`, zero for one report).
pub fn aggregate_seeds<T: Scalar>(reports: &[MetricReport<T>]) -> Result<AggregateReport<T>, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    let keys: BTreeSet<Metric> = first.metrics.keys().copied().collect();
    for r in reports {
        if r.task_id != first.task_id {
            return Err(EvalError::MixedTasks(first.task_id.clone(), r.task_id.clone()));
        }
        if !r.metrics.keys().copied().eq(keys.iter().copied()) {
            return Err(EvalError::MixedMetrics);
        }
    }
    let n = T::from_usize_lossy(reports.len());
    let metrics = keys
        .into_iter()
        .map(|m| {
            let values: Vec<T> = reports.iter().map(|r| r.metrics[&m]).collect();
            let mean = values.iter().fold(T::zero(), |a, &v| a + v) / n;
            let std = if reports.len() < 2 {
                T::zero()
            } else {
                let ss = values.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
                (ss / (n - T::one())).sqrt()
            };
            (m, MeanStd { mean, std })
        })
        .collect();
    Ok(AggregateReport {
        task_id: first.task_id.clone(),
        strategy: first.strategy.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics,
    })
}

/// Signed relative change `(candidate - baseline) / baseline` of every metric
/// the two aggregates share.
pub fn delta_report<T: Scalar>(
    candidate: &AggregateReport<T>,
    baseline: &AggregateReport<T>,
) -> Result<BTreeMap<Metric, T>, EvalError> {
    if candidate.task_id != baseline.task_id {
        return Err(EvalError::MixedTasks(baseline.task_id.clone(), candidate.task_id.clone()));
    }
    let mut out = BTreeMap::new();
    for (m, c) in &candidate.metrics {
        let Some(b) = baseline.metrics.get(m) else { continue };
        if b.mean == T::zero() {
            return Err(EvalError::ZeroBaseline(*m));
        }
        out.insert(*m, (c.mean - b.mean) / b.mean);
    }
    Ok(out)
}
