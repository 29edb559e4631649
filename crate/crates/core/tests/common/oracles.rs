//! Straightforward reference implementations used to cross-check the crate.

use std::collections::{BTreeMap, BTreeSet};

/// Cosine similarity, written out longhand.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).fold(0.0, |a, (x, y)| a + x * y);
    let uu: f64 = u.iter().fold(0.0, |a, x| a + x * x);
    let vv: f64 = v.iter().fold(0.0, |a, x| a + x * x);
    dot / (uu.sqrt() * vv.sqrt())
}

/// Score everything, sort by (similarity desc, id asc), keep `k`.
pub fn top_k(query: &[f64], pool: &BTreeMap<String, Vec<f64>>, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = pool.iter().map(|(id, v)| (id.clone(), cosine(query, v))).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Average ranks for tied values, 1-based, doubled so they stay integral.
pub fn doubled_midranks(values: &[i64]) -> Vec<i64> {
    values
        .iter()
        .map(|v| {
            let below = values.iter().filter(|w| *w < v).count() as i64;
            let equal = values.iter().filter(|w| *w == v).count() as i64;
            // mean of below+1 ..= below+equal, times two
            2 * below + equal + 1
        })
        .collect()
}

/// Kendall's W with tie correction in exact integer arithmetic. `ranks2`
/// holds each judge's doubled ranks.
pub fn kendalls_w(ranks2: &[Vec<i64>]) -> f64 {
    let m = ranks2.len() as i128;
    let n = ranks2[0].len() as i128;
    // doubled column sums minus their doubled mean m(n+1)
    let s4: i128 = (0..n as usize)
        .map(|i| {
            let r: i128 = ranks2.iter().map(|j| j[i] as i128).sum();
            let d = r - m * (n + 1);
            d * d
        })
        .sum();
    let ties: i128 = ranks2
        .iter()
        .map(|j| {
            let mut counts = BTreeMap::new();
            for r in j {
                *counts.entry(*r).or_insert(0i128) += 1;
            }
            counts.values().map(|t| t * t * t - t).sum::<i128>()
        })
        .sum();
    let denom = m * m * (n * n * n - n) - m * ties;
    // 12 S / denom with S = s4 / 4
    (3 * s4) as f64 / denom as f64
}

/// Per-class counts from a confusion matrix whose last column collects
/// predictions outside the label set.
pub struct ClassificationOracle {
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

pub fn classification(labels: &[&str], gold: &[usize], pred: &[Option<usize>]) -> ClassificationOracle {
    let k = labels.len();
    let mut m = vec![vec![0usize; k + 1]; k];
    for (g, p) in gold.iter().zip(pred) {
        m[*g][p.unwrap_or(k)] += 1;
    }
    let (mut sp, mut sf) = (0.0, 0.0);
    for (c, row) in m.iter().enumerate() {
        let tp = row[c] as f64;
        let predicted: usize = m.iter().map(|r| r[c]).sum();
        let actual: usize = row.iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        sp += p;
        sf += f;
    }
    let correct: usize = (0..k).map(|c| m[c][c]).sum();
    ClassificationOracle {
        macro_precision: sp / k as f64,
        macro_f1: sf / k as f64,
        accuracy: correct as f64 / gold.len() as f64,
    }
}

/// Micro F1 over exact (span, type) matches; 1 when nothing is predicted or expected.
pub fn micro_f1(gold: &[BTreeSet<(String, String)>], pred: &[BTreeSet<(String, String)>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        tp += g.intersection(p).count();
        fp += p.difference(g).count();
        fn_ += g.difference(p).count();
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Indices sorted by (value, index).
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// All permutations of `items`, by recursion.
pub fn permutations(items: &[String]) -> Vec<Vec<String>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}
