//! Programmatic reward functions: a toxic-token-fraction proxy, ordered
//! lexical coverage, a fluency proxy under a frozen reference model, and
//! composite product rewards.
//!
//! All rewards are total (defined for empty outputs) and deterministic.
//! Scores look only at content tokens; special and control ids are ignored.

use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lm::Policy;
use crate::vocab::Vocab;

/// A named scalar reward with a declared codomain.
#[derive(Clone)]
pub struct RewardSpec {
    pub name: String,
    pub codomain: (f64, f64),
    f: Arc<dyn Fn(&[u32], &[u32]) -> Result<f64> + Send + Sync>,
}

impl RewardSpec {
    pub fn new<F>(name: &str, codomain: (f64, f64), f: F) -> RewardSpec
    where
        F: Fn(&[u32], &[u32]) -> Result<f64> + Send + Sync + 'static,
    {
        RewardSpec {
            name: name.to_string(),
            codomain,
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, prompt: &[u32], output: &[u32]) -> Result<f64> {
        let v = (self.f)(prompt, output)?;
        if !v.is_finite() {
            return Err(Error::Reward(format!("{}: non-finite value {v}", self.name)));
        }
        if v < self.codomain.0 - 1e-12 || v > self.codomain.1 + 1e-12 {
            return Err(Error::Codomain(format!(
                "{}: {v} outside [{}, {}]",
                self.name, self.codomain.0, self.codomain.1
            )));
        }
        Ok(v)
    }
}

impl std::fmt::Debug for RewardSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RewardSpec({})", self.name)
    }
}

/// Fraction of content tokens that belong to the toxic set; empty output
/// scores 0.
pub fn toxicity_score(output: &[u32], toxic: &HashSet<u32>, vocab: &Vocab) -> f64 {
    let content = vocab.content_ids(output);
    if content.is_empty() {
        return 0.0;
    }
    let hits = content.iter().filter(|t| toxic.contains(t)).count();
    hits as f64 / content.len() as f64
}

/// `1 - toxicity_score`; higher is better.
pub fn toxicity_reward(output: &[u32], toxic: &HashSet<u32>, vocab: &Vocab) -> f64 {
    1.0 - toxicity_score(output, toxic, vocab)
}

/// 1 iff the keywords appear in the output (content tokens only) as a
/// subsequence in the given order. Empty keyword lists are vacuously covered.
pub fn ordered_coverage(output: &[u32], keywords: &[u32], vocab: &Vocab) -> bool {
    let content = vocab.content_ids(output);
    let mut want = keywords.iter();
    let mut next = want.next();
    for tok in content {
        match next {
            None => break,
            Some(&k) if k == tok => next = want.next(),
            Some(_) => {}
        }
    }
    next.is_none()
}

/// `exp(mean per-token log-prob of output under the reference)`; empty
/// output scores 1.
pub fn fluency_proxy(output: &[u32], reference: &Policy) -> Result<f64> {
    if output.is_empty() {
        return Ok(1.0);
    }
    let lp = reference.sequence_logprob(&[crate::vocab::BOS], output)?;
    Ok((lp / output.len() as f64).exp())
}

/// Product of [0,1]-codomain components.
#[derive(Clone, Debug)]
pub struct CompositeReward {
    pub components: Vec<RewardSpec>,
}

impl CompositeReward {
    pub fn new(components: Vec<RewardSpec>) -> Result<CompositeReward> {
        for c in &components {
            if c.codomain != (0.0, 1.0) {
                return Err(Error::Codomain(format!(
                    "component {} has codomain [{}, {}], composite needs [0, 1]",
                    c.name, c.codomain.0, c.codomain.1
                )));
            }
        }
        Ok(CompositeReward { components })
    }

    pub fn eval(&self, prompt: &[u32], output: &[u32]) -> Result<f64> {
        product_reward(&self.components, prompt, output)
    }
}

/// Product of the given components on one (prompt, output) pair.
pub fn product_reward(components: &[RewardSpec], prompt: &[u32], output: &[u32]) -> Result<f64> {
    let mut v = 1.0;
    for c in components {
        let x = c.eval(prompt, output)?;
        if !(-1e-12..=1.0 + 1e-12).contains(&x) {
            return Err(Error::Codomain(format!("{}: {x} outside [0, 1]", c.name)));
        }
        v *= x.clamp(0.0, 1.0);
    }
    Ok(v)
}

/// Toxicity-complement reward spec over a fixed toxic token set.
pub fn toxicity_reward_spec(vocab: Vocab, toxic: HashSet<u32>) -> RewardSpec {
    RewardSpec::new("toxicity_reward", (0.0, 1.0), move |_p, o| {
        Ok(toxicity_reward(o, &toxic, &vocab))
    })
}

/// Ordered-coverage reward; the keywords are the prompt's content tokens.
pub fn coverage_reward_spec(vocab: Vocab) -> RewardSpec {
    RewardSpec::new("ordered_coverage", (0.0, 1.0), move |p, o| {
        let keywords = vocab.content_ids(p);
        Ok(if ordered_coverage(o, &keywords, &vocab) {
            1.0
        } else {
            0.0
        })
    })
}

/// Fluency proxy under a frozen reference policy.
pub fn fluency_reward_spec(reference: Arc<Policy>) -> RewardSpec {
    RewardSpec::new("fluency_proxy", (0.0, 1.0), move |_p, o| {
        fluency_proxy(o, &reference)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, Role};

    fn vocab() -> Vocab {
        Vocab::from_alphabet("abt", 1).unwrap()
    }

    fn ids(v: &Vocab, s: &str) -> Vec<u32> {
        v.encode(s).unwrap()
    }

    #[test]
    fn toxicity_score_hand_cases() {
        let v = vocab();
        let toxic: HashSet<u32> = [v.char_id('t').unwrap()].into();
        assert_eq!(toxicity_score(&ids(&v, "ab"), &toxic, &v), 0.0);
        assert_eq!(toxicity_score(&ids(&v, "tatb"), &toxic, &v), 0.5);
        assert_eq!(toxicity_score(&[], &toxic, &v), 0.0);
        // specials are not content
        let mut with_eos = ids(&v, "tatb");
        with_eos.push(crate::vocab::EOS);
        assert_eq!(toxicity_score(&with_eos, &toxic, &v), 0.5);
    }

    #[test]
    fn toxicity_reward_complements_score() {
        let v = vocab();
        let toxic: HashSet<u32> = [v.char_id('t').unwrap()].into();
        for s in ["", "t", "ta", "abab", "tttt"] {
            let o = ids(&v, s);
            assert_eq!(
                toxicity_reward(&o, &toxic, &v) + toxicity_score(&o, &toxic, &v),
                1.0
            );
        }
        assert_eq!(toxicity_reward(&ids(&v, "tt"), &toxic, &v), 0.0);
        assert_eq!(toxicity_reward(&ids(&v, "ab"), &toxic, &v), 1.0);
    }

    #[test]
    fn ordered_coverage_cases() {
        let v = Vocab::from_alphabet("abcxy", 0).unwrap();
        let kw = v.encode("abc").unwrap();
        assert!(ordered_coverage(&v.encode("axbyc").unwrap(), &kw, &v));
        assert!(!ordered_coverage(&v.encode("bac").unwrap(), &kw, &v));
        assert!(!ordered_coverage(&v.encode("ab").unwrap(), &kw, &v));
    }

    #[test]
    fn coverage_survives_supersequence_extension() {
        use rand::{Rng, SeedableRng};
        let v = Vocab::from_alphabet("abcxy", 0).unwrap();
        let kw = v.encode("ac").unwrap();
        let covering = v.encode("abc").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let regular: Vec<u32> = v.regular_ids().collect();
        for _ in 0..200 {
            let mut extended = covering.clone();
            let pos = rng.random_range(0..=extended.len());
            let tok = regular[rng.random_range(0..regular.len())];
            extended.insert(pos, tok);
            assert!(ordered_coverage(&extended, &kw, &v));
        }
    }

    #[test]
    fn fluency_proxy_matches_definition() {
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
        let reference = Policy::new(cfg, v.clone(), Role::Base, 3).unwrap().frozen();
        assert_eq!(fluency_proxy(&[], &reference).unwrap(), 1.0);
        let out = ids(&v, "abt");
        let f = fluency_proxy(&out, &reference).unwrap();
        let lp = reference
            .sequence_logprob(&[crate::vocab::BOS], &out)
            .unwrap();
        assert!((f - (lp / 3.0).exp()).abs() < 1e-9);
        assert!(f > 0.0 && f <= 1.0);
    }

    #[test]
    fn product_reward_cases() {
        let half = RewardSpec::new("half", (0.0, 1.0), |_, _| Ok(0.5));
        let zero = RewardSpec::new("zero", (0.0, 1.0), |_, _| Ok(0.0));
        assert_eq!(
            product_reward(&[half.clone(), half.clone()], &[], &[]).unwrap(),
            0.25
        );
        assert_eq!(product_reward(&[half.clone(), zero], &[], &[]).unwrap(), 0.0);
        assert_eq!(product_reward(&[half], &[], &[]).unwrap(), 0.5);
        let bad = RewardSpec::new("bad", (0.0, 2.0), |_, _| Ok(1.5));
        assert!(matches!(
            product_reward(&[bad], &[], &[]),
            Err(Error::Codomain(_))
        ));
    }

    #[test]
    fn rewards_stay_in_codomain_for_random_inputs() {
        use rand::{Rng, SeedableRng};
        let v = vocab();
        let toxic: HashSet<u32> = [v.char_id('t').unwrap()].into();
        let spec = toxicity_reward_spec(v.clone(), toxic);
        let cov = coverage_reward_spec(v.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let len = rng.random_range(0..12usize);
            let out: Vec<u32> = (0..len)
                .map(|_| rng.random_range(0..v.len() as u32))
                .collect();
            let prompt: Vec<u32> = vec![crate::vocab::BOS];
            for s in [&spec, &cov] {
                let r = s.eval(&prompt, &out).unwrap();
                assert!((0.0..=1.0).contains(&r) && r.is_finite());
            }
        }
    }
}
