//! Corpus BLEU-4 and ROUGE-L over whitespace tokens.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;
/// Numerator used for an n-gram order with candidates but no matches.
pub const SMOOTHING_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub examples: Vec<ExampleScore>,
}

/// Sufficient statistics for BLEU, summable across examples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BleuStats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for g in toks.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

fn bleu_stats(cand: &str, refs: &[String]) -> BleuStats {
    let c = tokens(cand);
    let rs: Vec<Vec<&str>> = refs.iter().map(|r| tokens(r)).collect();
    let mut st = BleuStats {
        cand_len: c.len(),
        // closest reference length, the shorter one on a tie
        ref_len: rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let cc = ngram_counts(&c, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in &rs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        st.matches[n - 1] = cc.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        st.totals[n - 1] = c.len().saturating_sub(n - 1);
    }
    st
}

fn bleu_from_stats(st: &BleuStats) -> f64 {
    if st.cand_len == 0 || st.matches[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..MAX_ORDER {
        let (m, t) = (st.matches[n] as f64, st.totals[n] as f64);
        log_p += if st.totals[n] == 0 {
            0.0
        } else if st.matches[n] == 0 {
            (SMOOTHING_EPS / t).ln()
        } else {
            (m / t).ln()
        };
    }
    let bp = if st.cand_len >= st.ref_len {
        1.0
    } else {
        (1.0 - st.ref_len as f64 / st.cand_len as f64).exp()
    };
    100.0 * bp * (log_p / MAX_ORDER as f64).exp()
}

fn check_inputs(candidates: &[String], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Metric("empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::Metric(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus-level BLEU-4 in [0, 100].
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let stats: Vec<BleuStats> = candidates
        .par_iter()
        .zip(references)
        .map(|(c, r)| bleu_stats(c, r))
        .collect();
    let mut total = BleuStats::default();
    for s in stats {
        total += s;
    }
    Ok(bleu_from_stats(&total))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_l_single(cand: &str, refs: &[String]) -> f64 {
    let c = tokens(cand);
    refs.iter()
        .map(|r| {
            let r = tokens(r);
            let l = lcs_len(&c, &r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / c.len() as f64;
            let rec = l as f64 / r.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .fold(0.0, f64::max)
}

/// Mean per-example ROUGE-L F1 (best reference), scaled to [0, 100].
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let per: Vec<f64> = candidates
        .par_iter()
        .zip(references)
        .map(|(c, r)| rouge_l_single(c, r))
        .collect();
    Ok(100.0 * per.iter().sum::<f64>() / per.len() as f64)
}

/// Both corpus scores plus a per-example breakdown (sentence-level BLEU under
/// the same smoothing).
pub fn score(candidates: &[String], references: &[Vec<String>]) -> Result<ScoreReport> {
    Ok(ScoreReport {
        bleu4: bleu4(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        examples: candidates
            .par_iter()
            .zip(references)
            .enumerate()
            .map(|(index, (c, r))| ExampleScore {
                index,
                bleu4: bleu_from_stats(&bleu_stats(c, r)),
                rouge_l: 100.0 * rouge_l_single(c, r),
            })
            .collect(),
    })
}
