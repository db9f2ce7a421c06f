//! Next-token probability distributions and the product-of-experts fusion
//! that combines a frozen base policy with a trainable adapter.
//!
//! All distribution math runs in f64; the product is computed in log space
//! so supports as small as 1e-30 fuse without underflow.

use crate::error::{Error, Result};

/// Threshold on the product normalizer below which the two experts are
/// treated as having disjoint supports.
pub const DEGENERATE_Z: f64 = 1e-30;

/// Normalized probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    p: Vec<f64>,
}

impl Distribution {
    pub fn from_probs(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Shape("empty distribution".into()));
        }
        let mut sum = 0.0;
        for &v in &p {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!("invalid probability {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        Ok(Distribution { p })
    }

    pub fn uniform(n: usize) -> Self {
        Distribution {
            p: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut p = vec![0.0; n];
        p[i] = 1.0;
        Distribution { p }
    }

    /// Softmax of `logits / temperature`, computed in f64.
    pub fn from_logits_f32(logits: &[f32], temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if logits.is_empty() {
            return Err(Error::Shape("empty logits".into()));
        }
        let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature).collect();
        let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|&l| (l - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(Distribution {
            p: exps.into_iter().map(|e| e / sum).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, i: usize) -> f64 {
        self.p[i]
    }

    pub fn sum(&self) -> f64 {
        self.p.iter().sum()
    }

    /// Index of the largest probability; ties resolve to the lowest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.p.iter().enumerate() {
            if v > self.p[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats (0 ln 0 = 0).
    pub fn entropy(&self) -> f64 {
        -self
            .p
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> f64 {
        self.p
            .iter()
            .zip(&other.p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Zero out the given ids and renormalize the rest.
    pub fn mask_renormalize(&self, zero_ids: &[u32]) -> Result<Self> {
        if zero_ids.is_empty() {
            return Ok(self.clone());
        }
        let mut p = self.p.clone();
        for &id in zero_ids {
            if (id as usize) < p.len() {
                p[id as usize] = 0.0;
            }
        }
        let sum: f64 = p.iter().sum();
        if sum < DEGENERATE_Z {
            return Err(Error::DegenerateProduct(sum));
        }
        for v in &mut p {
            *v /= sum;
        }
        Ok(Distribution { p })
    }
}

/// Per-step product of experts: `out[i] = base[i] * adapter[i] / Z` with
/// `Z = sum_j base[j] * adapter[j]`, computed in log space.
pub fn product_of_experts(base: &Distribution, adapter: &Distribution) -> Result<Distribution> {
    if base.len() != adapter.len() {
        return Err(Error::Shape(format!(
            "product_of_experts: {} vs {} entries",
            base.len(),
            adapter.len()
        )));
    }
    let logs: Vec<f64> = base
        .p
        .iter()
        .zip(&adapter.p)
        .map(|(&b, &a)| b.ln() + a.ln())
        .collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::DegenerateProduct(0.0));
    }
    let lse = mx + logs.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
    if lse < DEGENERATE_Z.ln() {
        return Err(Error::DegenerateProduct(lse.exp()));
    }
    Ok(Distribution {
        p: logs.into_iter().map(|l| (l - lse).exp()).collect(),
    })
}

/// KL(d || reference) in nats; 0 iff the distributions are equal. Mass in `d`
/// where `reference` is zero signals infinite divergence.
pub fn kl_divergence(d: &Distribution, reference: &Distribution) -> Result<f64> {
    if d.len() != reference.len() {
        return Err(Error::Shape(format!(
            "kl: {} vs {} entries",
            d.len(),
            reference.len()
        )));
    }
    let mut sum = 0.0;
    for (&t, &b) in d.p.iter().zip(&reference.p) {
        if t > 0.0 {
            if b == 0.0 {
                return Err(Error::InfiniteKl(
                    "mass on an entry the reference assigns zero".into(),
                ));
            }
            sum += t * (t.ln() - b.ln());
        }
    }
    Ok(sum.max(0.0))
}
