//! Decoding: greedy, top-k, nucleus, and typical filtering over next-token
//! distributions, plus the sequence sampling loop.
//!
//! Ties everywhere break by ascending token id so runs are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::vocab::{Vocab, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecoderKind {
    Greedy,
    TopK { k: usize },
    Nucleus { p: f64 },
    Typical { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub temperature: f64,
    pub max_length: usize,
    pub seed: u64,
}

impl DecoderSpec {
    pub fn nucleus(p: f64, max_length: usize, seed: u64) -> DecoderSpec {
        DecoderSpec {
            kind: DecoderKind::Nucleus { p },
            temperature: 1.0,
            max_length,
            seed,
        }
    }

    pub fn greedy(max_length: usize) -> DecoderSpec {
        DecoderSpec {
            kind: DecoderKind::Greedy,
            temperature: 1.0,
            max_length,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> DecoderSpec {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DecoderKind::TopK { k } if k < 1 => {
                return Err(Error::Config("top-k needs k >= 1".into()))
            }
            DecoderKind::Nucleus { p } if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::Config(format!("nucleus p {p} outside (0, 1]")))
            }
            DecoderKind::Typical { tau } if !(tau > 0.0 && tau <= 1.0) => {
                return Err(Error::Config(format!("typical tau {tau} outside (0, 1]")))
            }
            _ => {}
        }
        if self.max_length < 1 {
            return Err(Error::Config("max_length must be >= 1".into()));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Anything that can produce a next-token distribution given a prompt and
/// the tokens generated so far.
pub trait NextTokenPolicy: Sync {
    fn next_dist(&self, prompt: &[u32], generated: &[u32], temperature: f64)
        -> Result<Distribution>;
    fn vocab(&self) -> &Vocab;
}

/// Token ids ordered by descending probability, ties by ascending id.
fn by_descending_prob(dist: &Distribution) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| {
        dist.get(b)
            .partial_cmp(&dist.get(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn keep_and_renormalize(dist: &Distribution, keep: &[usize]) -> Distribution {
    let mut p = vec![0.0; dist.len()];
    let mut sum = 0.0;
    for &i in keep {
        p[i] = dist.get(i);
        sum += dist.get(i);
    }
    for v in &mut p {
        *v /= sum;
    }
    Distribution::from_probs(p).expect("renormalized filter output")
}

/// Keep the smallest descending-probability prefix with cumulative mass
/// >= p, then renormalize.
pub fn nucleus_filter(dist: &Distribution, p: f64) -> Distribution {
    let order = by_descending_prob(dist);
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += dist.get(i);
        if mass >= p {
            break;
        }
    }
    keep_and_renormalize(dist, &kept)
}

/// Keep the k highest-probability tokens, then renormalize.
pub fn top_k_filter(dist: &Distribution, k: usize) -> Distribution {
    let order = by_descending_prob(dist);
    let kept: Vec<usize> = order.into_iter().take(k.max(1)).collect();
    keep_and_renormalize(dist, &kept)
}

/// Rank tokens by |surprisal - entropy| ascending (ties by id), keep the
/// smallest prefix with cumulative mass >= tau, renormalize.
pub fn typical_filter(dist: &Distribution, tau: f64) -> Distribution {
    let h = dist.entropy();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    let dev = |i: usize| -> f64 {
        let p = dist.get(i);
        if p <= 0.0 {
            f64::INFINITY
        } else {
            (-p.ln() - h).abs()
        }
    };
    order.sort_by(|&a, &b| {
        dev(a)
            .partial_cmp(&dev(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        if dist.get(i) <= 0.0 {
            continue;
        }
        kept.push(i);
        mass += dist.get(i);
        if mass >= tau {
            break;
        }
    }
    keep_and_renormalize(dist, &kept)
}

pub fn apply_filter(spec: &DecoderSpec, dist: &Distribution) -> Distribution {
    match spec.kind {
        DecoderKind::Greedy => Distribution::one_hot(dist.len(), dist.argmax()),
        DecoderKind::TopK { k } => top_k_filter(dist, k),
        DecoderKind::Nucleus { p } => nucleus_filter(dist, p),
        DecoderKind::Typical { tau } => typical_filter(dist, tau),
    }
}

/// Draw one token from a distribution; ids with zero mass are never chosen.
pub fn sample_token(dist: &Distribution, rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random::<f64>() * dist.sum();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            acc += p;
            if u < acc {
                return i as u32;
            }
        }
    }
    last_nonzero as u32
}

/// Sample until EOS or `max_length` tokens. The emitted EOS (if any) is the
/// final element of the returned sequence.
pub fn sample_sequence(
    policy: &dyn NextTokenPolicy,
    prompt: &[u32],
    spec: &DecoderSpec,
) -> Result<Vec<u32>> {
    spec.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("decoder: {m}")),
        other => other,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut generated = Vec::new();
    for _ in 0..spec.max_length {
        let dist = policy.next_dist(prompt, &generated, spec.temperature)?;
        let filtered = apply_filter(spec, &dist);
        let tok = match spec.kind {
            DecoderKind::Greedy => filtered.argmax() as u32,
            _ => sample_token(&filtered, &mut rng),
        };
        generated.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(generated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(p: Vec<f64>) -> Distribution {
        Distribution::from_probs(p).unwrap()
    }

    #[test]
    fn nucleus_hand_example() {
        let dist = d(vec![0.5, 0.3, 0.15, 0.05]);
        let out = nucleus_filter(&dist, 0.9);
        // keep first three (cumsum 0.95), renormalize
        assert!((out.get(0) - 0.5 / 0.95).abs() < 1e-12);
        assert!((out.get(1) - 0.3 / 0.95).abs() < 1e-12);
        assert!((out.get(2) - 0.15 / 0.95).abs() < 1e-12);
        assert_eq!(out.get(3), 0.0);
    }

    #[test]
    fn nucleus_p_one_is_identity() {
        let dist = d(vec![0.4, 0.35, 0.25]);
        let out = nucleus_filter(&dist, 1.0);
        assert!(out.max_abs_diff(&dist) < 1e-12);
    }

    #[test]
    fn nucleus_tiny_p_is_one_hot_at_argmax() {
        let dist = d(vec![0.2, 0.5, 0.3]);
        let out = nucleus_filter(&dist, 0.1);
        assert_eq!(out.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn top_k_hand_example() {
        let dist = d(vec![0.5, 0.3, 0.2]);
        let out = top_k_filter(&dist, 2);
        assert!((out.get(0) - 0.625).abs() < 1e-12);
        assert!((out.get(1) - 0.375).abs() < 1e-12);
        assert_eq!(out.get(2), 0.0);
    }

    #[test]
    fn top_k_large_k_is_identity_and_k1_is_argmax() {
        let dist = d(vec![0.5, 0.3, 0.2]);
        assert!(top_k_filter(&dist, 10).max_abs_diff(&dist) < 1e-12);
        assert_eq!(top_k_filter(&dist, 1).probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn typical_uniform_high_tau_is_identity() {
        let dist = Distribution::uniform(4);
        let out = typical_filter(&dist, 0.95);
        assert!(out.max_abs_diff(&dist) < 1e-12);
    }

    #[test]
    fn typical_tau_one_is_identity_and_one_hot_preserved() {
        let dist = d(vec![0.7, 0.2, 0.1]);
        let out = typical_filter(&dist, 1.0);
        assert!(out.max_abs_diff(&dist) < 1e-12);
        let oh = Distribution::one_hot(4, 2);
        assert_eq!(typical_filter(&oh, 0.5).probs(), oh.probs());
    }

    #[test]
    fn filters_output_valid_distributions_with_subset_support() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rand::Rng::random_range(&mut rng, 2..=16usize);
            let raw: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let sum: f64 = raw.iter().sum();
            let dist = d(raw.into_iter().map(|v| v / sum).collect());
            for out in [
                nucleus_filter(&dist, 0.7),
                top_k_filter(&dist, 3),
                typical_filter(&dist, 0.8),
            ] {
                assert!((out.sum() - 1.0).abs() < 1e-9);
                for i in 0..n {
                    assert!(out.get(i) >= 0.0);
                    if dist.get(i) == 0.0 {
                        assert_eq!(out.get(i), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn greedy_equals_topk1_equals_tiny_nucleus() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..8).map(|_| rand::Rng::random::<f64>(&mut rng) + 0.01).collect();
            let sum: f64 = raw.iter().sum();
            let dist = d(raw.into_iter().map(|v| v / sum).collect());
            let g = dist.argmax();
            assert_eq!(top_k_filter(&dist, 1).argmax(), g);
            assert_eq!(nucleus_filter(&dist, 1e-12).argmax(), g);
        }
    }
}
