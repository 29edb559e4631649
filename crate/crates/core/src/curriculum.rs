//! Demonstration ordering strategies and the exhaustive order search.
//!
//! Easy demonstrations go first and hard ones last, nearest the test input.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::hash::{fisher_yates, fnv1a64, SplitMix64};
use crate::num::{stable_argsort, Scalar};

/// Default cap on candidates for [`exhaustive_order_search`] (6! = 720 orders).
pub const DEFAULT_MAX_SEARCH: usize = 6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurriculumError {
    #[error("no score for demonstration {0:?}")]
    MissingScore(String),
    #[error("random ordering needs a seed")]
    SeedRequired,
    #[error("a seed is only meaningful for random ordering")]
    UnexpectedSeed,
    #[error("fixed ordering needs an order")]
    FixedOrderRequired,
    #[error("fixed order is not a permutation of the candidates")]
    FixedOrderNotPermutation,
    #[error("duplicate candidate {0:?}")]
    DuplicateCandidate(String),
    #[error("{got} candidates exceed the search limit of {max}")]
    TooManyCandidates { got: usize, max: usize },
    #[error("nothing to order")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Ascending difficulty.
    Iccl,
    /// Descending difficulty.
    AntiIccl,
    Random,
    /// Ascending similarity, so the most similar demonstration sits next to the test input.
    SimilarityAscending,
    /// Ascending mean expert rank.
    HumanCurriculum,
    Fixed,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Iccl => "iccl",
            StrategyKind::AntiIccl => "anti_iccl",
            StrategyKind::Random => "random",
            StrategyKind::SimilarityAscending => "similarity_ascending",
            StrategyKind::HumanCurriculum => "human_curriculum",
            StrategyKind::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "iccl" => StrategyKind::Iccl,
            "anti_iccl" | "anti-iccl" => StrategyKind::AntiIccl,
            "random" => StrategyKind::Random,
            "similarity_ascending" | "similarity-ascending" => StrategyKind::SimilarityAscending,
            "human_curriculum" | "human-curriculum" => StrategyKind::HumanCurriculum,
            "fixed" => StrategyKind::Fixed,
            _ => return None,
        })
    }

    pub fn needs_scores(self) -> bool {
        !matches!(self, StrategyKind::Random | StrategyKind::Fixed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingStrategy {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_order: Option<Vec<String>>,
}

impl OrderingStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            seed: None,
            fixed_order: None,
        }
    }

    pub fn random(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Self::new(StrategyKind::Random)
        }
    }

    pub fn fixed(order: Vec<String>) -> Self {
        Self {
            fixed_order: Some(order),
            ..Self::new(StrategyKind::Fixed)
        }
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        match (self.kind, self.seed) {
            (StrategyKind::Random, None) => return Err(CurriculumError::SeedRequired),
            (k, Some(_)) if k != StrategyKind::Random => return Err(CurriculumError::UnexpectedSeed),
            _ => {}
        }
        if self.kind == StrategyKind::Fixed && self.fixed_order.is_none() {
            return Err(CurriculumError::FixedOrderRequired);
        }
        Ok(())
    }
}

/// A demonstration order for one test input, with the value each position
/// was sorted by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderPlan<T> {
    pub test_id: String,
    pub ordered_demo_ids: Vec<String>,
    pub strategy: OrderingStrategy,
    pub provenance: BTreeMap<String, T>,
}

fn check_unique(candidates: &[String]) -> Result<(), CurriculumError> {
    let mut seen = BTreeSet::new();
    for c in candidates {
        if !seen.insert(c.as_str()) {
            return Err(CurriculumError::DuplicateCandidate(c.clone()));
        }
    }
    Ok(())
}

/// Seed of the shuffle stream for one test input.
pub fn shuffle_seed(seed: u64, test_id: &str) -> u64 {
    seed ^ fnv1a64(test_id)
}

/// Orders `candidates` by `strategy`.
///
/// Score-driven strategies sort ascending with ties kept in input order;
/// `anti_iccl` is the exact reverse of that order. `random` shuffles with
/// Fisher–Yates over a SplitMix64 stream seeded by `seed ^ fnv1a64(test_id)`.
pub fn order_demonstrations<T: Scalar>(
    test_id: &str,
    candidates: &[String],
    strategy: &OrderingStrategy,
    scores: Option<&BTreeMap<String, T>>,
) -> Result<OrderPlan<T>, CurriculumError> {
    strategy.validate()?;
    check_unique(candidates)?;
    let mut provenance = BTreeMap::new();
    let ordered = match strategy.kind {
        kind if kind.needs_scores() => {
            let scores = scores.ok_or_else(|| {
                CurriculumError::MissingScore(candidates.first().cloned().unwrap_or_default())
            })?;
            let mut values = Vec::with_capacity(candidates.len());
            for c in candidates {
                let v = *scores.get(c).ok_or_else(|| CurriculumError::MissingScore(c.clone()))?;
                values.push(v);
                provenance.insert(c.clone(), v);
            }
            let mut ordered: Vec<String> = stable_argsort(&values)
                .into_iter()
                .map(|i| candidates[i].clone())
                .collect();
            if kind == StrategyKind::AntiIccl {
                ordered.reverse();
            }
            ordered
        }
        StrategyKind::Random => {
            let seed = strategy.seed.ok_or(CurriculumError::SeedRequired)?;
            let mut ordered = candidates.to_vec();
            fisher_yates(&mut ordered, &mut SplitMix64::new(shuffle_seed(seed, test_id)));
            ordered
        }
        _ => {
            let fixed = strategy.fixed_order.as_ref().ok_or(CurriculumError::FixedOrderRequired)?;
            let a: BTreeSet<&String> = fixed.iter().collect();
            let b: BTreeSet<&String> = candidates.iter().collect();
            if fixed.len() != candidates.len() || a != b {
                return Err(CurriculumError::FixedOrderNotPermutation);
            }
            fixed.clone()
        }
    };
    Ok(OrderPlan {
        test_id: test_id.to_string(),
        ordered_demo_ids: ordered,
        strategy: strategy.clone(),
        provenance,
    })
}

/// Rearranges `items` into the next lexicographic permutation; false when
/// `items` was already the last one.
fn next_permutation<T: Ord>(items: &mut [T]) -> bool {
    if items.len() < 2 {
        return false;
    }
    let Some(i) = (0..items.len() - 1).rev().find(|&i| items[i] < items[i + 1]) else {
        return false;
    };
    let j = (i + 1..items.len()).rev().find(|&j| items[j] > items[i]).expect("pivot exists");
    items.swap(i, j);
    items[i + 1..].reverse();
    true
}

/// Result of scoring every permutation of a small candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<T> {
    pub best: OrderPlan<T>,
    pub best_score: T,
    /// Every permutation with its score, in lexicographic order of ids.
    pub table: Vec<(Vec<String>, T)>,
}

/// Scores all `n!` orders of `candidates` with `evaluator` and returns the
/// maximizer. Ties go to the lexicographically smallest id sequence.
pub fn exhaustive_order_search<T, F>(
    test_id: &str,
    candidates: &[String],
    mut evaluator: F,
    max_n: usize,
) -> Result<SearchResult<T>, CurriculumError>
where
    T: Scalar,
    F: FnMut(&[String]) -> T,
{
    if candidates.is_empty() {
        return Err(CurriculumError::NoCandidates);
    }
    if candidates.len() > max_n {
        return Err(CurriculumError::TooManyCandidates {
            got: candidates.len(),
            max: max_n,
        });
    }
    check_unique(candidates)?;
    let mut perm = candidates.to_vec();
    perm.sort();
    let mut table = Vec::new();
    let mut best: Option<(usize, T)> = None;
    loop {
        let score = evaluator(&perm);
        // strict improvement keeps the first (smallest) maximizer
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((table.len(), score));
        }
        table.push((perm.clone(), score));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (idx, best_score) = best.expect("at least one permutation");
    let order = table[idx].0.clone();
    let provenance = order.iter().map(|id| (id.clone(), best_score)).collect();
    Ok(SearchResult {
        best: OrderPlan {
            test_id: test_id.to_string(),
            ordered_demo_ids: order.clone(),
            strategy: OrderingStrategy::fixed(order),
            provenance,
        },
        best_score,
        table,
    })
}

/// Synthetic evaluator: one point per adjacent pair whose difficulty rises.
pub fn ascending_pairs_evaluator<'a, T: Scalar>(difficulty: &'a BTreeMap<String, T>) -> impl Fn(&[String]) -> T + 'a {
    move |order: &[String]| {
        let rising = order.windows(2).filter(|w| difficulty[&w[0]] < difficulty[&w[1]]).count();
        T::from_usize_lossy(rising)
    }
}
