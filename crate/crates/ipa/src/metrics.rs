//! Evaluation metrics over sampled generations: average maximum toxicity,
//! toxicity probability, distinct-n diversity, ordered-keyword coverage
//! rate, perplexity under a reference model, and mean stepwise KL to base.
//!
//! Sampling fans out per (prompt, sample) with derived seeds, so results are
//! deterministic for a given seed and decoder regardless of thread count.

use std::collections::{BTreeSet, HashSet};

use crate::decode::{sample_sequence, DecoderSpec, NextTokenPolicy};
use crate::error::{Error, Result};
use crate::lm::Policy;
use crate::par::{mix_seed, try_map};
use crate::reward::{ordered_coverage, toxicity_score};
use crate::rl::collect_rollouts;
use crate::tailor::TailoredPolicy;
use crate::vocab::Vocab;

/// One ordered-keyword evaluation instance: the prompt carries the keywords.
#[derive(Debug, Clone)]
pub struct CoverageInstance {
    pub prompt: Vec<u32>,
    pub keywords: Vec<u32>,
}

/// `samples_per_prompt` generations per prompt, seeds derived per
/// (prompt, sample) from the decoder seed.
pub fn sample_outputs(
    policy: &dyn NextTokenPolicy,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    decoder: &DecoderSpec,
) -> Result<Vec<Vec<Vec<u32>>>> {
    if prompts.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if samples_per_prompt < 1 {
        return Err(Error::Config("samples_per_prompt must be >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..samples_per_prompt).map(move |s| (p, s)))
        .collect();
    let flat = try_map(&jobs, |_, &(p, s)| {
        let spec = decoder.clone().with_seed(mix_seed(decoder.seed, p as u64, s as u64));
        sample_sequence(policy, &prompts[p], &spec)
    })?;
    let mut out = vec![Vec::with_capacity(samples_per_prompt); prompts.len()];
    for ((p, _), seq) in jobs.into_iter().zip(flat) {
        out[p].push(seq);
    }
    Ok(out)
}

/// Mean over prompts of the maximum toxicity score across samples.
pub fn avg_max_toxicity(
    policy: &dyn NextTokenPolicy,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    decoder: &DecoderSpec,
    toxic: &HashSet<u32>,
) -> Result<f64> {
    let samples = sample_outputs(policy, prompts, samples_per_prompt, decoder)?;
    Ok(mean_of_prompt_maxima(&samples, policy.vocab(), toxic))
}

fn mean_of_prompt_maxima(samples: &[Vec<Vec<u32>>], vocab: &Vocab, toxic: &HashSet<u32>) -> f64 {
    let maxima: Vec<f64> = samples
        .iter()
        .map(|per_prompt| {
            per_prompt
                .iter()
                .map(|o| toxicity_score(o, toxic, vocab))
                .fold(0.0, f64::max)
        })
        .collect();
    maxima.iter().sum::<f64>() / maxima.len() as f64
}

/// Fraction of prompts with at least one sample at or above the threshold.
pub fn toxicity_probability(
    policy: &dyn NextTokenPolicy,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    threshold: f64,
    decoder: &DecoderSpec,
    toxic: &HashSet<u32>,
) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let samples = sample_outputs(policy, prompts, samples_per_prompt, decoder)?;
    Ok(probability_over_threshold(
        &samples,
        policy.vocab(),
        toxic,
        threshold,
    ))
}

fn probability_over_threshold(
    samples: &[Vec<Vec<u32>>],
    vocab: &Vocab,
    toxic: &HashSet<u32>,
    threshold: f64,
) -> f64 {
    let hits = samples
        .iter()
        .filter(|per_prompt| {
            per_prompt
                .iter()
                .any(|o| toxicity_score(o, toxic, vocab) >= threshold)
        })
        .count();
    hits as f64 / samples.len() as f64
}

/// Distinct n-grams across all outputs divided by total content tokens.
/// Outputs shorter than n contribute no n-grams; an empty output list
/// scores 0.
pub fn dist_n(outputs: &[Vec<u32>], n: usize, vocab: &Vocab) -> f64 {
    assert!(n >= 1, "n-gram order must be >= 1");
    let mut grams: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut total = 0usize;
    for o in outputs {
        let content = vocab.content_ids(o);
        total += content.len();
        if content.len() >= n {
            for w in content.windows(n) {
                grams.insert(w.to_vec());
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    grams.len() as f64 / total as f64
}

/// Mean ordered-coverage over one seeded sample per instance.
pub fn coverage_rate(
    policy: &dyn NextTokenPolicy,
    instances: &[CoverageInstance],
    decoder: &DecoderSpec,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let covered = try_map(instances, |i, inst| {
        let spec = decoder.clone().with_seed(mix_seed(decoder.seed, i as u64, 0));
        let out = sample_sequence(policy, &inst.prompt, &spec)?;
        Ok(ordered_coverage(&out, &inst.keywords, policy.vocab()))
    })?;
    Ok(covered.iter().filter(|&&c| c).count() as f64 / instances.len() as f64)
}

/// Perplexity of the outputs under a frozen reference model:
/// exp(total NLL / total tokens).
pub fn perplexity_under(reference: &Policy, outputs: &[Vec<u32>]) -> Result<f64> {
    let mut total_lp = 0.0;
    let mut tokens = 0usize;
    let lps = try_map(outputs, |_, o| {
        if o.is_empty() {
            return Ok((0.0, 0));
        }
        let lp = reference.sequence_logprob(&[crate::vocab::BOS], o)?;
        Ok((lp, o.len()))
    })?;
    for (lp, n) in lps {
        total_lp += lp;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok((-total_lp / tokens as f64).exp())
}

/// Mean per-token KL(tailored || base) over sampled trajectories from the
/// tailored policy (base restricted to the reachable support).
pub fn mean_stepwise_kl(
    tailored: &TailoredPolicy,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    decoder: &DecoderSpec,
) -> Result<f64> {
    let rollouts = collect_rollouts(tailored, prompts, samples_per_prompt, decoder, false)?;
    let kls: Vec<f64> = rollouts.iter().flat_map(|r| r.step_kls.iter().copied()).collect();
    if kls.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok(kls.iter().sum::<f64>() / kls.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, Role};
    use crate::tailor::PolicySampler;

    fn vocab() -> Vocab {
        Vocab::from_alphabet("abt", 0).unwrap()
    }

    #[test]
    fn dist_n_hand_cases() {
        let v = vocab();
        let o = v.encode("abab").unwrap();
        assert_eq!(dist_n(&[o], 2, &v), 0.5);
        let distinct = v.encode("abt").unwrap();
        assert_eq!(dist_n(&[distinct], 1, &v), 1.0);
        assert_eq!(dist_n(&[], 2, &v), 0.0);
    }

    #[test]
    fn dist_n_is_permutation_invariant_over_outputs() {
        let v = vocab();
        let a = v.encode("abab").unwrap();
        let b = v.encode("tta").unwrap();
        let c = v.encode("bat").unwrap();
        let fwd = dist_n(&[a.clone(), b.clone(), c.clone()], 2, &v);
        let rev = dist_n(&[c, b, a], 2, &v);
        assert_eq!(fwd, rev);
    }

    #[test]
    fn max_then_mean_hand_cases() {
        let v = vocab();
        let toxic: HashSet<u32> = [v.char_id('t').unwrap()].into();
        // 1 prompt, samples scoring {0.2, 0.6} -> 0.6 ; scores built from
        // token fractions: "tabab" = 1/5... use direct fractions instead
        let s02 = v.encode("tabab").unwrap(); // 0.2
        let s06 = v.encode("tttab").unwrap(); // 0.6
        let samples = vec![vec![s02.clone(), s06.clone()]];
        assert_eq!(mean_of_prompt_maxima(&samples, &v, &toxic), 0.6);
        // 2 prompts with maxima {0.6, 0.2} -> 0.4
        let samples = vec![vec![s06], vec![s02]];
        assert!((mean_of_prompt_maxima(&samples, &v, &toxic) - 0.4).abs() < 1e-12);
        // threshold 0.5 -> only the first prompt trips -> 0.5
        let s02b = v.encode("tabab").unwrap();
        let s06b = v.encode("tttab").unwrap();
        let samples = vec![vec![s06b], vec![s02b]];
        assert_eq!(probability_over_threshold(&samples, &v, &toxic, 0.5), 0.5);
        assert_eq!(probability_over_threshold(&samples, &v, &toxic, 0.99), 0.0);
    }

    #[test]
    fn sampling_metrics_are_deterministic() {
        let v = vocab();
        let cfg = LmConfig {
            vocab_size: v.len(),
            dim: 8,
            heads: 2,
            layers: 1,
            context: 16,
            ff_mult: 4,
            tie_embeddings: false,
        };
        let policy = Policy::new(cfg, v.clone(), Role::Base, 11).unwrap();
        let sampler = PolicySampler { policy: &policy };
        let prompts = vec![v.encode_prompt("a").unwrap(), v.encode_prompt("b").unwrap()];
        let toxic: HashSet<u32> = [v.char_id('t').unwrap()].into();
        let dec = DecoderSpec::nucleus(0.9, 6, 42);
        let a = avg_max_toxicity(&sampler, &prompts, 3, &dec, &toxic).unwrap();
        let b = avg_max_toxicity(&sampler, &prompts, 3, &dec, &toxic).unwrap();
        assert_eq!(a, b);
        let p1 = toxicity_probability(&sampler, &prompts, 3, 0.5, &dec, &toxic).unwrap();
        let p2 = toxicity_probability(&sampler, &prompts, 3, 0.5, &dec, &toxic).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn coverage_rate_requires_instances() {
        let v = vocab();
        let cfg = LmConfig {
            vocab_size: v.len(),
            dim: 8,
            heads: 2,
            layers: 1,
            context: 16,
            ff_mult: 4,
            tie_embeddings: false,
        };
        let policy = Policy::new(cfg, v, Role::Base, 1).unwrap();
        let sampler = PolicySampler { policy: &policy };
        let dec = DecoderSpec::nucleus(0.9, 4, 0);
        assert!(matches!(
            coverage_rate(&sampler, &[], &dec),
            Err(Error::EmptyEvalSet)
        ));
    }
}
