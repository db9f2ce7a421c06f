//! Sequence-level knowledge distillation: sample a corpus from a frozen
//! teacher, fit a smaller student on it by MLE, and measure the remaining
//! per-step forward KL gap.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{sample_sequence, DecoderSpec};
use crate::error::{Error, Result};
use crate::lm::{train_mle, MleConfig, Policy, Role};
use crate::par::{mix_seed, try_map};
use crate::tailor::PolicySampler;

/// KL log clamp when the student assigns (numerically) zero mass where the
/// teacher has some: report a large finite gap instead of crashing.
const KD_LOG_CLAMP: f64 = -30.0;

/// Teacher-sampled (prompt, output) pairs with full provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct KdCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub teacher_digest: String,
    pub decoder: DecoderSpec,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct KdRecord {
    prompt: Vec<u32>,
    output: Vec<u32>,
    teacher_digest: String,
    seed: u64,
}

impl KdCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// JSON-Lines: one record per pair, each carrying provenance.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({
            "teacher_digest": self.teacher_digest,
            "decoder": self.decoder,
            "seed": self.seed,
        });
        writeln!(w, "{header}")?;
        for (prompt, output) in &self.pairs {
            let rec = KdRecord {
                prompt: prompt.clone(),
                output: output.clone(),
                teacher_digest: self.teacher_digest.clone(),
                seed: self.seed,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KdCorpus> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty KD corpus file".into()))??;
        let header: serde_json::Value = serde_json::from_str(&header_line)
            .map_err(|e| Error::Format(format!("KD corpus header: {e}")))?;
        let teacher_digest = header["teacher_digest"]
            .as_str()
            .ok_or_else(|| Error::Format("KD corpus header missing teacher_digest".into()))?
            .to_string();
        let decoder: DecoderSpec = serde_json::from_value(header["decoder"].clone())
            .map_err(|e| Error::Format(format!("KD corpus decoder: {e}")))?;
        let seed = header["seed"]
            .as_u64()
            .ok_or_else(|| Error::Format("KD corpus header missing seed".into()))?;
        let mut pairs = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: KdRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("KD corpus record: {e}")))?;
            pairs.push((rec.prompt, rec.output));
        }
        Ok(KdCorpus {
            pairs,
            teacher_digest,
            decoder,
            seed,
        })
    }
}

/// Sample `n_per_prompt` outputs per prompt from a frozen teacher.
pub fn generate_kd_corpus(
    teacher: &Policy,
    prompts: &[Vec<u32>],
    n_per_prompt: usize,
    decoder: &DecoderSpec,
) -> Result<KdCorpus> {
    if !teacher.frozen {
        return Err(Error::State("teacher must be frozen during KD sampling".into()));
    }
    decoder.validate()?;
    let sampler = PolicySampler { policy: teacher };
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..n_per_prompt).map(move |s| (p, s)))
        .collect();
    let outputs = try_map(&jobs, |_, &(p, s)| {
        let spec = decoder
            .clone()
            .with_seed(mix_seed(decoder.seed, p as u64, s as u64));
        sample_sequence(&sampler, &prompts[p], &spec)
    })?;
    let pairs = jobs
        .into_iter()
        .zip(outputs)
        .map(|((p, _), o)| (prompts[p].clone(), o))
        .collect();
    Ok(KdCorpus {
        pairs,
        teacher_digest: teacher.digest(),
        decoder: decoder.clone(),
        seed: decoder.seed,
    })
}

/// Fit the student on teacher samples by conditional MLE and return it
/// frozen with role `approximate`.
pub fn fit_approximate(
    mut student: Policy,
    corpus: &KdCorpus,
    mle: &MleConfig,
) -> Result<Policy> {
    if student.frozen {
        return Err(Error::FrozenPolicy("student must be trainable".into()));
    }
    if mle.steps > 0 {
        train_mle(&mut student, &corpus.pairs, mle)?;
    }
    Ok(student.with_role(Role::Approximate).frozen())
}

/// Mean per-step forward KL(teacher || approximate) over teacher-forced
/// samples, truncated at `horizon` steps per prompt. Student log-probs are
/// clamped at -30 where its mass underflows.
pub fn eval_kd_gap(
    teacher: &Policy,
    approximate: &Policy,
    heldout_prompts: &[Vec<u32>],
    horizon: usize,
    decoder: &DecoderSpec,
) -> Result<f64> {
    if horizon < 1 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if heldout_prompts.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if teacher.vocab != approximate.vocab {
        return Err(Error::ConfigMismatch(
            "teacher and approximate policy must share a vocabulary".into(),
        ));
    }
    let sampler = PolicySampler { policy: teacher };
    let per_prompt = try_map(heldout_prompts, |i, prompt| {
        let spec = decoder
            .clone()
            .with_seed(mix_seed(decoder.seed, 0xD157, i as u64));
        let sample = sample_sequence(&sampler, prompt, &spec)?;
        let steps = sample.len().min(horizon);
        let mut kls = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut ctx = prompt.clone();
            ctx.extend_from_slice(&sample[..t]);
            let p = teacher.next_token_dist(&ctx, 1.0)?;
            let q = approximate.next_token_dist(&ctx, 1.0)?;
            let mut kl = 0.0;
            for i in 0..p.len() {
                let pi = p.get(i);
                if pi > 0.0 {
                    let lq = q.get(i).ln().max(KD_LOG_CLAMP);
                    kl += pi * (pi.ln() - lq);
                }
            }
            kls.push(kl.max(0.0));
        }
        Ok(kls)
    })?;
    let flat: Vec<f64> = per_prompt.into_iter().flatten().collect();
    if flat.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok(flat.iter().sum::<f64>() / flat.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{eval_nll, wrap_sequences, LmConfig};
    use crate::vocab::Vocab;

    fn cfg(v: &Vocab, dim: usize) -> LmConfig {
        LmConfig {
            vocab_size: v.len(),
            dim,
            heads: 2,
            layers: 1,
            context: 24,
            ff_mult: 4,
            tie_embeddings: false,
        }
    }

    fn trained_teacher() -> Policy {
        let v = Vocab::from_alphabet("ab", 0).unwrap();
        let mut teacher = Policy::new(cfg(&v, 16), v.clone(), Role::Base, 0).unwrap();
        let seq = v.encode("abababababab").unwrap();
        let pairs = wrap_sequences(&[seq]);
        train_mle(
            &mut teacher,
            &pairs,
            &MleConfig {
                steps: 200,
                batch_size: 2,
                learning_rate: 5e-3,
                warmup_steps: 10,
                seed: 3,
            },
        )
        .unwrap();
        teacher.frozen()
    }

    #[test]
    fn kd_corpus_is_deterministic_and_roundtrips() {
        let teacher = trained_teacher();
        let prompts = vec![teacher.vocab.encode_prompt("a").unwrap()];
        let dec = DecoderSpec::nucleus(0.9, 8, 17);
        let a = generate_kd_corpus(&teacher, &prompts, 3, &dec).unwrap();
        let b = generate_kd_corpus(&teacher, &prompts, 3, &dec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kd.jsonl");
        a.save(&path).unwrap();
        let loaded = KdCorpus::load(&path).unwrap();
        assert_eq!(a, loaded);

        // every stored output re-scores with finite log-prob
        for (p, o) in &a.pairs {
            assert!(teacher.sequence_logprob(p, o).unwrap().is_finite());
        }
    }

    #[test]
    fn zero_per_prompt_gives_empty_corpus() {
        let teacher = trained_teacher();
        let prompts = vec![teacher.vocab.encode_prompt("a").unwrap()];
        let dec = DecoderSpec::nucleus(0.9, 8, 17);
        let c = generate_kd_corpus(&teacher, &prompts, 0, &dec).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn unfrozen_teacher_is_rejected() {
        let v = Vocab::from_alphabet("ab", 0).unwrap();
        let teacher = Policy::new(cfg(&v, 8), v.clone(), Role::Base, 0).unwrap();
        let prompts = vec![v.encode_prompt("a").unwrap()];
        assert!(matches!(
            generate_kd_corpus(&teacher, &prompts, 1, &DecoderSpec::nucleus(0.9, 4, 0)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn fit_relabels_even_with_zero_steps() {
        let teacher = trained_teacher();
        let v = teacher.vocab.clone();
        let student = Policy::new(cfg(&v, 8), v.clone(), Role::Base, 9).unwrap();
        let bytes = student.param_bytes();
        let corpus = KdCorpus {
            pairs: vec![],
            teacher_digest: teacher.digest(),
            decoder: DecoderSpec::nucleus(0.9, 8, 0),
            seed: 0,
        };
        let approx = fit_approximate(
            student,
            &corpus,
            &MleConfig {
                steps: 0,
                ..MleConfig::default()
            },
        )
        .unwrap();
        assert_eq!(approx.role, Role::Approximate);
        assert!(approx.frozen);
        assert_eq!(approx.param_bytes(), bytes);
    }

    #[test]
    fn distillation_shrinks_the_gap_and_teacher_is_untouched() {
        let teacher = trained_teacher();
        let teacher_bytes = teacher.param_bytes();
        let v = teacher.vocab.clone();
        let prompts: Vec<Vec<u32>> = vec![
            v.encode_prompt("a").unwrap(),
            v.encode_prompt("b").unwrap(),
            v.encode_prompt("ab").unwrap(),
        ];
        let dec = DecoderSpec::nucleus(0.9, 10, 5);
        let corpus = generate_kd_corpus(&teacher, &prompts, 6, &dec).unwrap();

        let student = Policy::new(cfg(&v, 8), v.clone(), Role::Base, 21).unwrap();
        let untrained_gap =
            eval_kd_gap(&teacher, &student.clone().frozen(), &prompts, 6, &dec).unwrap();
        let approx = fit_approximate(
            student,
            &corpus,
            &MleConfig {
                steps: 300,
                batch_size: 8,
                learning_rate: 5e-3,
                warmup_steps: 15,
                seed: 4,
            },
        )
        .unwrap();
        let trained_gap = eval_kd_gap(&teacher, &approx, &prompts, 6, &dec).unwrap();
        assert!(
            trained_gap < untrained_gap,
            "gap should shrink: {untrained_gap} -> {trained_gap}"
        );
        assert!(trained_gap >= 0.0);
        assert_eq!(teacher.param_bytes(), teacher_bytes);

        // distilled student should predict like the teacher on held-out greedy
        // continuations most of the time
        let greedy = DecoderSpec::greedy(6);
        let ts = PolicySampler { policy: &teacher };
        let as_ = PolicySampler { policy: &approx };
        let mut agree = 0;
        for p in &prompts {
            let a = sample_sequence(&ts, p, &greedy).unwrap();
            let b = sample_sequence(&as_, p, &greedy).unwrap();
            if a == b {
                agree += 1;
            }
        }
        assert!(agree >= 2, "teacher/student greedy agreement {agree}/3");
    }

    #[test]
    fn kd_gap_zero_for_identical_policies() {
        let teacher = trained_teacher();
        let prompts = vec![teacher.vocab.encode_prompt("a").unwrap()];
        let dec = DecoderSpec::nucleus(0.9, 6, 2);
        let gap = eval_kd_gap(&teacher, &teacher, &prompts, 4, &dec).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn eval_nll_helper_stays_consistent() {
        // larger corpora should not hurt the fit on their own distribution
        let teacher = trained_teacher();
        let v = teacher.vocab.clone();
        let prompts = vec![v.encode_prompt("a").unwrap()];
        let dec = DecoderSpec::nucleus(0.9, 10, 1);
        let corpus = generate_kd_corpus(&teacher, &prompts, 4, &dec).unwrap();
        let student = Policy::new(cfg(&v, 8), v, Role::Base, 2).unwrap();
        let fitted = fit_approximate(
            student,
            &corpus,
            &MleConfig {
                steps: 120,
                batch_size: 4,
                learning_rate: 5e-3,
                warmup_steps: 6,
                seed: 0,
            },
        )
        .unwrap();
        let nll = eval_nll(&fitted, &corpus.pairs).unwrap();
        assert!(nll.is_finite());
    }
}
