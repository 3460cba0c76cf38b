//! Task distributions (prior over token sequences plus conditional
//! next-token tables) and the metrics evaluated against them: prior-averaged
//! KL divergence, strict-argmax accuracy, T_epsilon, negentropy.
//!
//! Supports are enumerated densely, which keeps every metric exact; the
//! support cap guards desk-scale use.

use serde::{Deserialize, Serialize};

use crate::model::TokenSeq;
use crate::numkernel::{log_softmax, Rng};
use crate::{Error, Result};

/// Largest dense support the crate will enumerate (N^S for generated tasks).
pub const SUPPORT_CAP: usize = 100_000;

/// A prior over token sequences together with per-sequence conditional
/// next-token distributions, and optionally the lookup table `g` naming each
/// sequence's designated next token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "S")]
    pub s: usize,
    /// (sequence, prior probability) pairs; priors are positive and sum to 1.
    pub support: Vec<(TokenSeq, f64)>,
    /// One length-N probability row per supported sequence.
    pub conditionals: Vec<Vec<f64>>,
    /// Lookup table g: support index -> designated next token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Every conditional row is one-hot (zero entropy).
    pub assumption1: bool,
    /// Every conditional entry is strictly positive (full support).
    pub assumption2: bool,
    pub min_conditional: f64,
    /// Largest Shannon entropy across rows (nats).
    pub max_entropy: f64,
}

impl TaskDistribution {
    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// Designated target token of a supported sequence: the lookup entry if
    /// present, otherwise the argmax of a one-hot conditional row.
    pub fn target(&self, idx: usize) -> Option<usize> {
        if let Some(g) = &self.g {
            return Some(g[idx]);
        }
        let row = &self.conditionals[idx];
        let (argmax, &max) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
        if (max - 1.0).abs() < 1e-9 {
            Some(argmax)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.len() != self.conditionals.len() {
            return Err(Error::DimMismatch(
                "support and conditionals length differ".into(),
            ));
        }
        let prior_sum: f64 = self.support.iter().map(|(_, p)| p).sum();
        if (prior_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArg(format!(
                "prior sums to {prior_sum}, expected 1"
            )));
        }
        for (t, p) in &self.support {
            if *p <= 0.0 {
                return Err(Error::InvalidArg("prior probabilities must be positive".into()));
            }
            if t.len() != self.s || t.0.iter().any(|&id| id >= self.n) {
                return Err(Error::InvalidArg("malformed sequence in support".into()));
            }
        }
        for row in &self.conditionals {
            if row.len() != self.n {
                return Err(Error::DimMismatch("conditional row length != N".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidArg("conditional row is not a distribution".into()));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let task: TaskDistribution = serde_json::from_str(&s)?;
        task.validate()?;
        Ok(task)
    }
}

/// Enumerate all N^S sequences in lexicographic order.
fn all_sequences(n: usize, s: usize) -> Vec<TokenSeq> {
    let total = n.pow(s as u32);
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut tokens = vec![0usize; s];
        for pos in (0..s).rev() {
            tokens[pos] = idx % n;
            idx /= n;
        }
        out.push(TokenSeq(tokens));
    }
    out
}

fn check_scale(n: usize, s: usize) -> Result<usize> {
    let mut total = 1usize;
    for _ in 0..s {
        total = total
            .checked_mul(n)
            .filter(|&t| t <= SUPPORT_CAP)
            .ok_or(Error::SupportCapExceeded {
                got: usize::MAX,
                cap: SUPPORT_CAP,
            })?;
    }
    Ok(total)
}

/// Association task: uniform prior over all N^S sequences, each with one
/// uniformly random correct next token (one-hot conditionals).
pub fn make_association_task(n: usize, s: usize, seed: u64) -> Result<TaskDistribution> {
    if n < 2 || s < 1 {
        return Err(Error::InvalidArg("need N >= 2 and S >= 1".into()));
    }
    let total = check_scale(n, s)?;
    let mut rng = Rng::stream(seed, &[0x61_73_73_6f_63]);
    let support: Vec<(TokenSeq, f64)> = all_sequences(n, s)
        .into_iter()
        .map(|t| (t, 1.0 / total as f64))
        .collect();
    let mut conditionals = Vec::with_capacity(total);
    let mut g = Vec::with_capacity(total);
    for _ in 0..total {
        let target = rng.below(n);
        let mut row = vec![0.0; n];
        row[target] = 1.0;
        conditionals.push(row);
        g.push(target);
    }
    Ok(TaskDistribution {
        n,
        s,
        support,
        conditionals,
        g: Some(g),
    })
}

/// Noisy lookup task: probability `p_correct` on g(t) and the rest spread
/// uniformly, so every conditional has full support.
pub fn make_noisy_lookup_task(
    n: usize,
    s: usize,
    p_correct: f64,
    seed: u64,
) -> Result<TaskDistribution> {
    if n < 2 || s < 1 {
        return Err(Error::InvalidArg("need N >= 2 and S >= 1".into()));
    }
    if !(p_correct > 1.0 / n as f64 && p_correct < 1.0) {
        return Err(Error::InvalidArg(format!(
            "p_correct = {p_correct} must lie in (1/N, 1) = ({}, 1)",
            1.0 / n as f64
        )));
    }
    let mut task = make_association_task(n, s, seed)?;
    let off = (1.0 - p_correct) / (n - 1) as f64;
    let g = task.g.clone().unwrap();
    for (row, &target) in task.conditionals.iter_mut().zip(&g) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j == target { p_correct } else { off };
        }
    }
    Ok(task)
}

/// Replace every conditional row pi by (pi + delta) / (1 + N delta).
/// Preserves each row's argmax and gives the output full support.
pub fn smooth_task(task: &TaskDistribution, delta: f64) -> Result<TaskDistribution> {
    if delta <= 0.0 {
        return Err(Error::InvalidArg("smoothing delta must be > 0".into()));
    }
    let n = task.n as f64;
    let mut out = task.clone();
    for row in out.conditionals.iter_mut() {
        for v in row.iter_mut() {
            *v = (*v + delta) / (1.0 + n * delta);
        }
    }
    Ok(out)
}

/// Sum of p log p with 0 log 0 = 0; lies in [-log N, 0].
pub fn negentropy(dist: &[f64]) -> f64 {
    dist.iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum()
}

/// Prior-averaged KL divergence between the task conditionals and the
/// model distribution softmax(logits(t)).
pub fn kl_divergence<F>(task: &TaskDistribution, mut logits_fn: F) -> f64
where
    F: FnMut(&TokenSeq) -> Vec<f64>,
{
    let mut total = 0.0;
    for (idx, (t, prior)) in task.support.iter().enumerate() {
        let logits = logits_fn(t);
        let logq = log_softmax(&logits);
        let row = &task.conditionals[idx];
        let mut kl = 0.0;
        for (p, lq) in row.iter().zip(&logq) {
            if *p > 0.0 {
                kl += p * (p.ln() - lq);
            }
        }
        total += prior * kl;
    }
    total
}

/// Prior-weighted fraction of sequences whose target logit is the unique
/// strict maximum. Ties count as failure.
pub fn accuracy<F>(task: &TaskDistribution, mut logits_fn: F) -> Result<f64>
where
    F: FnMut(&TokenSeq) -> Vec<f64>,
{
    let mut correct = 0.0;
    let mut total = 0.0;
    for (idx, (t, prior)) in task.support.iter().enumerate() {
        let target = task.target(idx).ok_or_else(|| {
            Error::InvalidArg(format!(
                "sequence {idx} has no designated target (need lookup g or one-hot rows)"
            ))
        })?;
        let logits = logits_fn(t);
        let lt = logits[target];
        let strict_max = logits
            .iter()
            .enumerate()
            .all(|(j, &lj)| j == target || lj < lt);
        if strict_max {
            correct += prior;
        }
        total += prior;
    }
    // Normalizing by the actual prior mass makes the all-correct case
    // exactly 1.0 regardless of rounding in the stored priors.
    Ok(correct / total)
}

/// Smallest number of sequences whose cumulative prior exceeds 1 - epsilon
/// (strictly); epsilon = 0 returns the support size. Ties between equal
/// priors are broken by lexicographic token order for reproducibility.
pub fn t_epsilon(task: &TaskDistribution, epsilon: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArg("epsilon must lie in [0, 1)".into()));
    }
    let order = prior_order(task);
    let mut cum = 0.0;
    for (count, &idx) in order.iter().enumerate() {
        cum += task.support[idx].1;
        if cum > 1.0 - epsilon {
            return Ok(count + 1);
        }
    }
    Ok(task.support.len())
}

/// Support indices sorted by decreasing prior, lexicographic tokens as the
/// tie-break.
pub fn prior_order(task: &TaskDistribution) -> Vec<usize> {
    let mut order: Vec<usize> = (0..task.support.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = task.support[a].1;
        let pb = task.support[b].1;
        pb.partial_cmp(&pa)
            .unwrap()
            .then_with(|| task.support[a].0.cmp(&task.support[b].0))
    });
    order
}

pub fn check_assumptions(task: &TaskDistribution) -> AssumptionReport {
    let mut min_conditional = f64::INFINITY;
    let mut max_entropy = 0.0f64;
    let mut all_one_hot = true;
    for row in &task.conditionals {
        for &p in row {
            min_conditional = min_conditional.min(p);
        }
        let ent = -negentropy(row);
        max_entropy = max_entropy.max(ent);
        let one_hot = row.iter().all(|&p| p.abs() < 1e-12 || (p - 1.0).abs() < 1e-12);
        all_one_hot &= one_hot;
    }
    AssumptionReport {
        assumption1: all_one_hot,
        assumption2: min_conditional > 0.0,
        min_conditional,
        max_entropy,
    }
}
