//! Chain labels and evaluation metrics.
//!
//! ALMS and BLEU compare operation-kind sequences; parameters are ignored.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{enumerate_chains, Chain, OpKind, Operation};

/// The ordered set of chains that defines the class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainUniverse {
    chains: Vec<Chain>,
}

impl ChainUniverse {
    pub fn enumerate(ops: &[Operation], max_len: usize) -> Result<Self> {
        Ok(Self { chains: enumerate_chains(ops, max_len, true)? })
    }

    /// An explicit chain list; order defines the class indices.
    pub fn from_chains(chains: Vec<Chain>) -> Result<Self> {
        for i in 0..chains.len() {
            if chains[..i].contains(&chains[i]) {
                return Err(Error::Encoding(format!("chain {} listed twice", chains[i])));
            }
        }
        Ok(Self { chains })
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn chains(&self) -> &[Chain] {
        &self.chains
    }

    pub fn encode(&self, chain: &Chain) -> Result<usize> {
        self.chains
            .iter()
            .position(|c| c == chain)
            .ok_or_else(|| Error::Encoding(format!("chain {chain} is not in the universe")))
    }

    pub fn decode(&self, index: usize) -> Result<&Chain> {
        self.chains
            .get(index)
            .ok_or_else(|| Error::Encoding(format!("class {index} out of range 0..{}", self.chains.len())))
    }
}

fn check_labels(preds: &[usize], truths: &[usize], k: Option<usize>) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", preds.len(), truths.len())));
    }
    if let Some(k) = k {
        if let Some(bad) = preds.iter().chain(truths).find(|&&l| l >= k) {
            return Err(Error::Encoding(format!("label {bad} out of range 0..{k}")));
        }
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_labels(preds, truths, None)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(preds: &[usize], truths: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    check_labels(preds, truths, Some(k))?;
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(truths) {
        m[t][p] += 1;
    }
    Ok(m)
}

fn longest_common_run(a: &[OpKind], b: &[OpKind]) -> usize {
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Longest matched contiguous subchain over the true length, in `[0, 1]`.
pub fn alms(pred: &Chain, truth: &Chain) -> f64 {
    let (p, t) = (pred.kinds(), truth.kinds());
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    longest_common_run(&p, &t) as f64 / t.len().max(1) as f64
}

/// Sentence BLEU over operation kinds, n-gram order capped at the prediction length, no smoothing.
pub fn bleu(pred: &Chain, truth: &Chain, max_n: usize) -> f64 {
    let (p, t) = (pred.kinds(), truth.kinds());
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    if p.is_empty() || t.is_empty() {
        return 0.0;
    }
    let top = max_n.min(p.len());
    let mut log_sum = 0.0;
    for n in 1..=top {
        let pred_grams: Vec<&[OpKind]> = p.windows(n).collect();
        let true_grams: Vec<&[OpKind]> = t.windows(n).collect();
        let mut used = vec![false; true_grams.len()];
        let mut hits = 0usize;
        for g in &pred_grams {
            // Clipped counting: each reference n-gram matches at most once.
            if let Some(i) = true_grams.iter().enumerate().position(|(i, r)| !used[i] && r == g) {
                used[i] = true;
                hits += 1;
            }
        }
        if hits == 0 {
            return 0.0;
        }
        log_sum += libm::log(hits as f64 / pred_grams.len() as f64);
    }
    let bp = if p.len() < t.len() { libm::exp(1.0 - t.len() as f64 / p.len() as f64) } else { 1.0 };
    bp * libm::exp(log_sum / top as f64)
}

pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    /// Mean ALMS times 100.
    pub alms: f64,
    /// Mean sentence BLEU.
    pub bleu: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn from_labels(preds: &[usize], truths: &[usize], universe: &ChainUniverse) -> Result<Self> {
        let confusion = confusion_matrix(preds, truths, universe.len())?;
        let pairs: Vec<(&Chain, &Chain)> = preds
            .iter()
            .zip(truths)
            .map(|(&p, &t)| Ok((universe.decode(p)?, universe.decode(t)?)))
            .collect::<Result<_>>()?;
        let mut rep = Self::from_chain_pairs(&pairs)?;
        rep.confusion = confusion;
        rep.accuracy = accuracy(preds, truths)?;
        Ok(rep)
    }

    /// Sequence metrics for free-form chains; accuracy is exact-match rate, no confusion matrix.
    pub fn from_chain_pairs(pairs: &[(&Chain, &Chain)]) -> Result<Self> {
        let n = pairs.len();
        if n == 0 {
            return Ok(Self { accuracy: 0.0, confusion: Vec::new(), alms: 0.0, bleu: 0.0, n });
        }
        let exact = pairs.iter().filter(|(p, t)| p == t).count();
        let alms_mean = pairs.iter().map(|(p, t)| alms(p, t)).sum::<f64>() / n as f64;
        let bleu_mean = pairs.iter().map(|(p, t)| bleu(p, t, BLEU_MAX_N)).sum::<f64>() / n as f64;
        Ok(Self { accuracy: exact as f64 / n as f64, confusion: Vec::new(), alms: 100.0 * alms_mean, bleu: bleu_mean, n })
    }
}
