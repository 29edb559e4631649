//! Demonstration difficulty: label perplexity under the model's own
//! instruction template, and expert rankings with Kendall's W.
//!
//! Complexity of a demonstration `(x, y)` is `exp(-log p(y | I(x)))` where
//! `I(x)` is the instruction-wrapped input. The normalized variant divides
//! the log-probability by the number of label tokens first.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Demonstration, TaskSpec};
use crate::gateway::{Gateway, GatewayError, TokenScore};
use crate::jsonl::{self, JsonlError};
use crate::num::Scalar;
use crate::promptkit::{self, PromptError, TemplateFamily};

/// Largest positive log-probability sum tolerated from a backend (rounding).
pub const LOGPROB_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DifficultyError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("label of {0:?} serializes to an empty string")]
    EmptyLabelSerialization(String),
    #[error("backend returned no tokens for {0:?}")]
    NoTokens(String),
    #[error("log-probability sum {sum} for {demo_id:?} is not a valid probability")]
    BadLogprob { demo_id: String, sum: f64 },
    #[error("rankings cover different item sets (judge {0:?})")]
    ItemSetMismatch(String),
    #[error("at least two judges are required")]
    FewerThanTwoJudges,
    #[error("at least two items are required")]
    FewerThanTwoItems,
    #[error("Kendall's W is undefined: every judge ties every item")]
    DegenerateDenominator,
    #[error("rank {rank} for {demo_id:?} by judge {judge:?} is not positive")]
    BadRank { judge: String, demo_id: String, rank: f64 },
    #[error("ranks of judge {judge:?} sum to {sum}, expected {expected}")]
    BadRankSum { judge: String, sum: f64, expected: f64 },
    #[error("judge {judge:?} ranks {demo_id:?} twice")]
    DuplicateRank { judge: String, demo_id: String },
    #[error("ranking file: {0}")]
    File(String),
}

impl From<JsonlError> for DifficultyError {
    fn from(e: JsonlError) -> Self {
        DifficultyError::File(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore<T> {
    pub demo_id: String,
    pub complexity: T,
    pub normalized: bool,
    pub token_count: usize,
    pub sum_logprob: T,
}

impl<T: Scalar> DifficultyScore<T> {
    /// Builds a score from per-token logprobs of the label.
    pub fn from_tokens(demo_id: &str, tokens: &[TokenScore], normalize: bool) -> Result<Self, DifficultyError> {
        if tokens.is_empty() {
            return Err(DifficultyError::NoTokens(demo_id.to_string()));
        }
        let sum = tokens.iter().fold(T::zero(), |acc, t| acc + T::lit(t.logprob));
        Self::from_sum(demo_id, sum, tokens.len(), normalize)
    }

    pub fn from_sum(demo_id: &str, sum_logprob: T, token_count: usize, normalize: bool) -> Result<Self, DifficultyError> {
        if !sum_logprob.is_finite() || sum_logprob > T::lit(LOGPROB_EPSILON) || token_count == 0 {
            return Err(DifficultyError::BadLogprob {
                demo_id: demo_id.to_string(),
                sum: sum_logprob.to_f64_lossy(),
            });
        }
        let exponent = if normalize {
            -sum_logprob / T::from_usize_lossy(token_count)
        } else {
            -sum_logprob
        };
        Ok(Self {
            demo_id: demo_id.to_string(),
            complexity: exponent.exp(),
            normalized: normalize,
            token_count,
            sum_logprob,
        })
    }
}

/// Scoring request for one demonstration: `(prompt, continuation)`.
pub fn scoring_request(
    family: &TemplateFamily,
    spec: &TaskSpec,
    demo: &Demonstration,
) -> Result<(String, String), DifficultyError> {
    let (prompt, continuation) = promptkit::render_scoring_pair(family, spec, demo)?;
    if continuation.is_empty() {
        return Err(DifficultyError::EmptyLabelSerialization(demo.demo_id.clone()));
    }
    Ok((prompt, continuation))
}

/// Complexity of one demonstration's gold label.
pub fn complexity<T: Scalar>(
    demo: &Demonstration,
    spec: &TaskSpec,
    family: &TemplateFamily,
    gateway: &Gateway,
    normalize: bool,
) -> Result<DifficultyScore<T>, DifficultyError> {
    let (prompt, continuation) = scoring_request(family, spec, demo)?;
    let tokens = gateway.score_continuation(&prompt, &continuation)?;
    DifficultyScore::from_tokens(&demo.demo_id, &tokens, normalize)
}

/// Scores many demonstrations concurrently; results keyed by demo id.
pub fn complexity_many<T: Scalar>(
    demos: &[&Demonstration],
    spec: &TaskSpec,
    family: &TemplateFamily,
    gateway: &Gateway,
    normalize: bool,
) -> BTreeMap<String, Result<DifficultyScore<T>, DifficultyError>> {
    let items = demos.iter().map(|d| (d.demo_id.clone(), *d)).collect();
    gateway.map_concurrent(items, |g, d| complexity(d, spec, family, g, normalize))
}

/// One judge's ranks (1 = easiest; tied items share the average rank).
#[derive(Debug, Clone, PartialEq)]
pub struct HumanRanking<T> {
    pub judge_id: String,
    pub ranks: BTreeMap<String, T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRanking<T> {
    /// Easiest first.
    pub ordered_demo_ids: Vec<String>,
    pub mean_rank: BTreeMap<String, T>,
    pub w_statistic: T,
}

fn check_rankings<T: Scalar>(rankings: &[HumanRanking<T>]) -> Result<BTreeSet<&str>, DifficultyError> {
    if rankings.len() < 2 {
        return Err(DifficultyError::FewerThanTwoJudges);
    }
    let items: BTreeSet<&str> = rankings[0].ranks.keys().map(String::as_str).collect();
    for r in rankings {
        if !r.ranks.keys().map(String::as_str).eq(items.iter().copied()) {
            return Err(DifficultyError::ItemSetMismatch(r.judge_id.clone()));
        }
        if let Some((id, &rank)) = r.ranks.iter().find(|(_, &v)| !(v > T::zero() && v.is_finite())) {
            return Err(DifficultyError::BadRank {
                judge: r.judge_id.clone(),
                demo_id: id.clone(),
                rank: rank.to_f64_lossy(),
            });
        }
        let n = items.len() as f64;
        let expected = n * (n + 1.0) / 2.0;
        let sum = r.ranks.values().fold(0.0, |a, v| a + v.to_f64_lossy());
        if (sum - expected).abs() > 1e-6 * expected.max(1.0) {
            return Err(DifficultyError::BadRankSum {
                judge: r.judge_id.clone(),
                sum,
                expected,
            });
        }
    }
    Ok(items)
}

/// Sum of `t^3 - t` over groups of tied ranks within one judge.
fn tie_correction<T: Scalar>(ranks: &BTreeMap<String, T>) -> T {
    let mut values: Vec<T> = ranks.values().copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut total = T::zero();
    let mut i = 0;
    while i < values.len() {
        let mut j = i + 1;
        while j < values.len() && values[j] == values[i] {
            j += 1;
        }
        let t = T::from_usize_lossy(j - i);
        total = total + t * t * t - t;
        i = j;
    }
    total
}

/// Kendall's coefficient of concordance with tie correction:
/// `W = 12 S / (m^2 (n^3 - n) - m * sum_j T_j)`, clamped to `[0, 1]`.
pub fn kendalls_w<T: Scalar>(rankings: &[HumanRanking<T>]) -> Result<T, DifficultyError> {
    let items = check_rankings(rankings)?;
    let n = items.len();
    if n < 2 {
        return Err(DifficultyError::FewerThanTwoItems);
    }
    let m = T::from_usize_lossy(rankings.len());
    let nf = T::from_usize_lossy(n);
    let mean_sum = m * (nf + T::one()) / T::lit(2.0);
    let s = items.iter().fold(T::zero(), |acc, id| {
        let r = rankings.iter().fold(T::zero(), |a, j| a + j.ranks[*id]);
        acc + (r - mean_sum) * (r - mean_sum)
    });
    let ties = rankings.iter().fold(T::zero(), |acc, j| acc + tie_correction(&j.ranks));
    let denom = m * m * (nf * nf * nf - nf) - m * ties;
    if denom <= T::zero() {
        return Err(DifficultyError::DegenerateDenominator);
    }
    let w = T::lit(12.0) * s / denom;
    Ok(w.max(T::zero()).min(T::one()))
}

/// Mean rank per item, ordered easiest first (ties by demo id), with W attached.
///
/// When every judge ties every item W is undefined; it is reported as 1.0
/// since the judges agree perfectly.
pub fn aggregate_expert_ranks<T: Scalar>(rankings: &[HumanRanking<T>]) -> Result<AggregateRanking<T>, DifficultyError> {
    let items = check_rankings(rankings)?;
    let m = T::from_usize_lossy(rankings.len());
    let mean_rank: BTreeMap<String, T> = items
        .iter()
        .map(|id| {
            let total = rankings.iter().fold(T::zero(), |a, j| a + j.ranks[*id]);
            (id.to_string(), total / m)
        })
        .collect();
    let mut ordered: Vec<String> = mean_rank.keys().cloned().collect();
    // keys are id-ascending; a stable sort keeps that as the tie-break
    ordered.sort_by(|a, b| mean_rank[a].partial_cmp(&mean_rank[b]).expect("finite ranks"));
    let w_statistic = match kendalls_w(rankings) {
        Ok(w) => w,
        Err(DifficultyError::DegenerateDenominator) | Err(DifficultyError::FewerThanTwoItems) => T::one(),
        Err(e) => return Err(e),
    };
    Ok(AggregateRanking {
        ordered_demo_ids: ordered,
        mean_rank,
        w_statistic,
    })
}

#[derive(Debug, Clone, Deserialize)]
struct RankRecord {
    judge: String,
    demo_id: String,
    rank: f64,
}

/// Reads `{judge, demo_id, rank}` lines, grouping by judge (first-seen order).
pub fn load_rankings<T: Scalar>(path: &Path) -> Result<Vec<HumanRanking<T>>, DifficultyError> {
    let records: Vec<(usize, RankRecord)> = jsonl::read_records(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_judge: BTreeMap<String, BTreeMap<String, T>> = BTreeMap::new();
    for (_, rec) in records {
        let ranks = by_judge.entry(rec.judge.clone()).or_insert_with(|| {
            order.push(rec.judge.clone());
            BTreeMap::new()
        });
        if ranks.insert(rec.demo_id.clone(), T::lit(rec.rank)).is_some() {
            return Err(DifficultyError::DuplicateRank {
                judge: rec.judge,
                demo_id: rec.demo_id,
            });
        }
    }
    Ok(order
        .into_iter()
        .map(|judge| {
            let ranks = by_judge.remove(&judge).unwrap_or_default();
            HumanRanking { judge_id: judge, ranks }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, TaskKind};
    use crate::gateway::MockBackend;
    use crate::promptkit::TemplateKind;
    use std::sync::Arc;

    fn judge(id: &str, ranks: &[(&str, f64)]) -> HumanRanking<f64> {
        HumanRanking {
            judge_id: id.into(),
            ranks: ranks.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn complexity_from_tokens() {
        let zero = [TokenScore::new("a", 0.0), TokenScore::new("b", 0.0)];
        for norm in [false, true] {
            assert_eq!(DifficultyScore::<f64>::from_tokens("d", &zero, norm).unwrap().complexity, 1.0);
        }
        let two = [TokenScore::new("a", -0.5), TokenScore::new("b", -1.5)];
        let raw = DifficultyScore::<f64>::from_tokens("d", &two, false).unwrap();
        assert!(close(raw.complexity, 7.389056099));
        assert_eq!(raw.token_count, 2);
        assert_eq!(raw.sum_logprob, -2.0);
        let norm = DifficultyScore::<f64>::from_tokens("d", &two, true).unwrap();
        assert!(close(norm.complexity, std::f64::consts::E));
        assert!(DifficultyScore::<f64>::from_tokens("d", &[], false).is_err());
        assert!(DifficultyScore::<f64>::from_tokens("d", &[TokenScore::new("a", 0.5)], false).is_err());
        assert!(DifficultyScore::<f64>::from_tokens("d", &[TokenScore::new("a", f64::NAN)], false).is_err());
    }

    #[test]
    fn complexity_with_mock_backend() {
        let spec = TaskSpec {
            task_id: "scicite".into(),
            kind: TaskKind::SingleTextClassification,
            label_set: vec!["method".into(), "background".into(), "result".into()],
            entity_type_set: vec![],
            task_description: "Identify the intent.".into(),
            default_demo_count: 5,
        };
        let demo = Demonstration {
            demo_id: "c1".into(),
            primary_text: "A direct consequence.".into(),
            secondary_text: None,
            gold: Label::class("background"),
        };
        let gw = Gateway::new(Arc::new(MockBackend::for_task(&spec)), 1);
        let fam = TemplateFamily::new(TemplateKind::MixtralInst, None);
        let s: DifficultyScore<f64> = complexity(&demo, &spec, &fam, &gw, false).unwrap();
        assert!(close(s.complexity, std::f64::consts::E));
        assert_eq!(s.token_count, 1);
        let s32: DifficultyScore<f32> = complexity(&demo, &spec, &fam, &gw, false).unwrap();
        assert!((s32.complexity - std::f32::consts::E).abs() < 1e-5);
    }

    #[test]
    fn w_examples() {
        let a = judge("a", &[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        assert_eq!(kendalls_w(&[a.clone(), a.clone()]).unwrap(), 1.0);
        let rev = judge("r", &[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        assert_eq!(kendalls_w(&[a.clone(), rev]).unwrap(), 0.0);
        let c = judge("c", &[("a", 2.0), ("b", 1.0), ("c", 3.0)]);
        let w = kendalls_w(&[a.clone(), a.clone(), c]).unwrap();
        assert!((w - 12.0 * 14.0 / (9.0 * 24.0)).abs() < 1e-12);
    }

    #[test]
    fn w_errors() {
        let a = judge("a", &[("a", 1.0), ("b", 2.0)]);
        assert_eq!(kendalls_w(std::slice::from_ref(&a)), Err(DifficultyError::FewerThanTwoJudges));
        let other = judge("o", &[("a", 1.0), ("c", 2.0)]);
        assert!(matches!(kendalls_w(&[a.clone(), other]), Err(DifficultyError::ItemSetMismatch(_))));
        let tied = judge("t", &[("a", 1.5), ("b", 1.5)]);
        assert_eq!(
            kendalls_w(&[tied.clone(), tied]),
            Err(DifficultyError::DegenerateDenominator)
        );
        let neg = judge("n", &[("a", -1.0), ("b", 2.0)]);
        assert!(matches!(kendalls_w(&[a.clone(), neg]), Err(DifficultyError::BadRank { .. })));
        let gap = judge("g", &[("a", 1.0), ("b", 3.0)]);
        assert!(matches!(kendalls_w(&[a, gap]), Err(DifficultyError::BadRankSum { .. })));
    }

    #[test]
    fn aggregate_examples() {
        let a = judge("a", &[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        let agg = aggregate_expert_ranks(&[a.clone(), a]).unwrap();
        assert_eq!(agg.ordered_demo_ids, vec!["a", "b", "c"]);
        assert_eq!(agg.w_statistic, 1.0);

        let x = judge("x", &[("b", 2.0), ("a", 1.0)]);
        let y = judge("y", &[("a", 2.0), ("b", 1.0)]);
        let agg = aggregate_expert_ranks(&[y, x]).unwrap();
        assert_eq!(agg.ordered_demo_ids, vec!["a", "b"]);
        assert_eq!(agg.mean_rank["a"], 1.5);
        assert_eq!(agg.w_statistic, 0.0);

        let j1 = judge("1", &[("p", 1.0), ("q", 2.5), ("r", 2.5), ("s", 4.0)]);
        let j2 = judge("2", &[("p", 1.0), ("q", 2.0), ("r", 3.0), ("s", 4.0)]);
        let j3 = judge("3", &[("p", 2.0), ("q", 1.0), ("r", 3.0), ("s", 4.0)]);
        let agg = aggregate_expert_ranks(&[j1, j2, j3]).unwrap();
        assert!((agg.mean_rank["q"] - 5.5 / 3.0).abs() < 1e-12);
        assert!((agg.mean_rank["r"] - 8.5 / 3.0).abs() < 1e-12);
        assert_eq!(agg.ordered_demo_ids, vec!["p", "q", "r", "s"]);
        assert!(agg.w_statistic > 0.0 && agg.w_statistic < 1.0);
    }

    #[test]
    fn tie_correction_counts_groups() {
        let j = judge("t", &[("a", 1.0), ("b", 2.5), ("c", 2.5), ("d", 4.0)]);
        assert_eq!(tie_correction(&j.ranks), 6.0);
    }

    #[test]
    fn ranking_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        std::fs::write(
            &p,
            "{\"judge\":\"j1\",\"demo_id\":\"a\",\"rank\":1}\n{\"judge\":\"j1\",\"demo_id\":\"b\",\"rank\":2}\n\
             {\"judge\":\"j2\",\"demo_id\":\"a\",\"rank\":2}\n{\"judge\":\"j2\",\"demo_id\":\"b\",\"rank\":1}\n",
        )
        .unwrap();
        let r: Vec<HumanRanking<f64>> = load_rankings(&p).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].judge_id, "j1");
        assert_eq!(kendalls_w(&r).unwrap(), 0.0);
        std::fs::write(&p, "{\"judge\":\"j1\",\"demo_id\":\"a\",\"rank\":1}\n{\"judge\":\"j1\",\"demo_id\":\"a\",\"rank\":2}\n").unwrap();
        assert!(matches!(load_rankings::<f64>(&p), Err(DifficultyError::DuplicateRank { .. })));
    }
}
