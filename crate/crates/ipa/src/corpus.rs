//! Synthetic character-level corpora: periodic patterns, Markov chains, or
//! keyword-echo sequences, with optional toxic-token injection, split into
//! train/val/test JSON-Lines files.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CoverageInstance;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Grammar {
    /// Each sequence repeats one of the patterns from a random phase.
    Periodic { patterns: Vec<String> },
    /// Order-1 Markov chain over the regular alphabet; rows must be
    /// stochastic and align with the alphabet.
    Markov { transitions: Vec<Vec<f64>> },
    /// Sequences of `keywords` distinct prompt characters followed by a
    /// continuation that opens by echoing them in order with probability
    /// `echo_prob` (random filler otherwise).
    KeywordEcho { keywords: usize, echo_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub alphabet: String,
    #[serde(default)]
    pub toxic_alphabet: String,
    pub grammar: Grammar,
    pub toxic_injection_rate: f64,
    pub sequences: usize,
    pub seq_len: usize,
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub control_slots: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusData {
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

impl CorpusData {
    pub fn all(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::Config("alphabet must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.toxic_injection_rate) {
            return Err(Error::Config(format!(
                "toxic_injection_rate {} outside [0, 1]",
                self.toxic_injection_rate
            )));
        }
        if self.toxic_injection_rate > 0.0 && self.toxic_alphabet.is_empty() {
            return Err(Error::Config(
                "toxic injection requires a toxic alphabet".into(),
            ));
        }
        if self.alphabet.chars().any(|c| self.toxic_alphabet.contains(c)) {
            return Err(Error::Config(
                "alphabet and toxic alphabet must be disjoint".into(),
            ));
        }
        let (a, b, c) = self.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {:?} must sum to 1", self.split)));
        }
        if self.sequences == 0 || self.seq_len == 0 {
            return Err(Error::Config("corpus must have sequences and length".into()));
        }
        match &self.grammar {
            Grammar::Periodic { patterns } => {
                if patterns.is_empty() {
                    return Err(Error::Config("periodic grammar needs patterns".into()));
                }
                for p in patterns {
                    if p.is_empty() || p.chars().any(|c| !self.alphabet.contains(c)) {
                        return Err(Error::Config(format!(
                            "pattern {p:?} must be nonempty over the alphabet"
                        )));
                    }
                }
            }
            Grammar::Markov { transitions } => {
                let n = self.alphabet.chars().count();
                if transitions.len() != n {
                    return Err(Error::Config(format!(
                        "markov table has {} rows for {} alphabet chars",
                        transitions.len(),
                        n
                    )));
                }
                for row in transitions {
                    if row.len() != n {
                        return Err(Error::Config("markov rows must match alphabet".into()));
                    }
                    let s: f64 = row.iter().sum();
                    if row.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-6 {
                        return Err(Error::Config("markov rows must be stochastic".into()));
                    }
                }
            }
            Grammar::KeywordEcho { keywords, echo_prob } => {
                if *keywords == 0 || *keywords >= self.seq_len {
                    return Err(Error::Config(
                        "keyword count must be positive and below seq_len".into(),
                    ));
                }
                if *keywords > self.alphabet.chars().count() {
                    return Err(Error::Config("more keywords than alphabet chars".into()));
                }
                if !(0.0..=1.0).contains(echo_prob) {
                    return Err(Error::Config("echo_prob outside [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// The vocabulary this corpus implies: regular alphabet plus toxic
    /// alphabet plus reserved control slots.
    pub fn vocab(&self) -> Result<Vocab> {
        let mut alphabet = self.alphabet.clone();
        alphabet.push_str(&self.toxic_alphabet);
        Vocab::from_alphabet(&alphabet, self.control_slots)
    }
}

fn gen_sequence(
    spec: &SyntheticCorpusSpec,
    vocab: &Vocab,
    regular: &[u32],
    toxic: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    let mut seq: Vec<u32> = match &spec.grammar {
        Grammar::Periodic { patterns } => {
            let pat: Vec<u32> = vocab.encode(&patterns[rng.random_range(0..patterns.len())])?;
            let phase = rng.random_range(0..pat.len());
            (0..spec.seq_len).map(|i| pat[(phase + i) % pat.len()]).collect()
        }
        Grammar::Markov { transitions } => {
            let mut state = rng.random_range(0..regular.len());
            let mut out = Vec::with_capacity(spec.seq_len);
            out.push(regular[state]);
            for _ in 1..spec.seq_len {
                let row = &transitions[state];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = row.len() - 1;
                for (j, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = j;
                        break;
                    }
                }
                state = next;
                out.push(regular[state]);
            }
            out
        }
        Grammar::KeywordEcho { keywords, echo_prob } => {
            // distinct keywords drawn from the regular alphabet
            let mut pool: Vec<u32> = regular.to_vec();
            for i in (1..pool.len()).rev() {
                let j = rng.random_range(0..=i);
                pool.swap(i, j);
            }
            let kws = &pool[..*keywords];
            let body_len = spec.seq_len - keywords;
            let mut body: Vec<u32> = (0..body_len)
                .map(|_| regular[rng.random_range(0..regular.len())])
                .collect();
            if rng.random::<f64>() < *echo_prob && body_len >= *keywords {
                body[..*keywords].copy_from_slice(kws);
            }
            let mut out = kws.to_vec();
            out.extend(body);
            out
        }
    };
    if spec.toxic_injection_rate > 0.0 {
        for t in seq.iter_mut() {
            if rng.random::<f64>() < spec.toxic_injection_rate {
                *t = toxic[rng.random_range(0..toxic.len())];
            }
        }
    }
    Ok(seq)
}

/// Generate and split the corpus; fully determined by (spec, seed).
pub fn gen_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<CorpusData> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let regular: Vec<u32> = spec
        .alphabet
        .chars()
        .map(|c| vocab.char_id(c))
        .collect::<Result<_>>()?;
    let toxic: Vec<u32> = spec
        .toxic_alphabet
        .chars()
        .map(|c| vocab.char_id(c))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        seqs.push(gen_sequence(spec, &vocab, &regular, &toxic, &mut rng)?);
    }
    let n_train = (spec.sequences as f64 * spec.split.0).round() as usize;
    let n_val = (spec.sequences as f64 * spec.split.1).round() as usize;
    let n_train = n_train.min(seqs.len());
    let n_val = n_val.min(seqs.len() - n_train);
    let test = seqs.split_off(n_train + n_val);
    let val = seqs.split_off(n_train);
    Ok(CorpusData {
        train: seqs,
        val,
        test,
    })
}

/// Observed toxic-token fraction over a set of sequences.
pub fn measured_toxic_rate(seqs: &[Vec<u32>], toxic: &std::collections::HashSet<u32>) -> f64 {
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = seqs
        .iter()
        .map(|s| s.iter().filter(|t| toxic.contains(t)).count())
        .sum();
    hits as f64 / total as f64
}

fn write_split(path: &Path, seqs: &[Vec<u32>], producer_digest: &str) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "{}",
        serde_json::json!({ "recipe_digest": producer_digest })
    )?;
    for s in seqs {
        writeln!(w, "{}", serde_json::json!({ "tokens": s }))?;
    }
    w.flush()?;
    Ok(())
}

/// Write train/val/test JSON-Lines files under `dir`, each prefixed by a
/// provenance header record.
pub fn gen_corpus_files(
    spec: &SyntheticCorpusSpec,
    seed: u64,
    dir: &Path,
    producer_digest: &str,
) -> Result<CorpusData> {
    let data = gen_corpus(spec, seed)?;
    std::fs::create_dir_all(dir)?;
    write_split(&dir.join("train.jsonl"), &data.train, producer_digest)?;
    write_split(&dir.join("val.jsonl"), &data.val, producer_digest)?;
    write_split(&dir.join("test.jsonl"), &data.test, producer_digest)?;
    Ok(data)
}

/// Read one split file back (skipping provenance headers).
pub fn read_split(path: &Path) -> Result<Vec<Vec<u32>>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("corpus line: {e}")))?;
        if v.get("recipe_digest").is_some() {
            continue;
        }
        let toks = v
            .get("tokens")
            .and_then(|t| t.as_array())
            .ok_or_else(|| Error::Format("corpus record missing tokens".into()))?;
        out.push(
            toks.iter()
                .map(|t| {
                    t.as_u64()
                        .map(|x| x as u32)
                        .ok_or_else(|| Error::Format("bad token id".into()))
                })
                .collect::<Result<_>>()?,
        );
    }
    Ok(out)
}

/// Ordered-keyword evaluation instances: prompts carry `keywords` distinct
/// regular tokens (BOS-prefixed), deterministic in the seed.
pub fn keyword_instances(
    vocab: &Vocab,
    count: usize,
    keywords: usize,
    seed: u64,
) -> Result<Vec<CoverageInstance>> {
    let regular: Vec<u32> = vocab.regular_ids().collect();
    if keywords == 0 || keywords > regular.len() {
        return Err(Error::Config(format!(
            "cannot draw {keywords} distinct keywords from {} regular tokens",
            regular.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pool = regular.clone();
        for i in (1..pool.len()).rev() {
            let j = rng.random_range(0..=i);
            pool.swap(i, j);
        }
        let kws: Vec<u32> = pool[..keywords].to_vec();
        let mut prompt = vec![crate::vocab::BOS];
        prompt.extend(&kws);
        out.push(CoverageInstance {
            prompt,
            keywords: kws,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toxic_spec(rate: f64, sequences: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            alphabet: "abcdef".into(),
            toxic_alphabet: "uvw".into(),
            grammar: Grammar::Periodic {
                patterns: vec!["abcdef".into(), "fedcba".into()],
            },
            toxic_injection_rate: rate,
            sequences,
            seq_len: 24,
            split: (0.8, 0.1, 0.1),
            control_slots: 5,
        }
    }

    #[test]
    fn zero_injection_has_no_toxic_tokens() {
        let spec = toxic_spec(0.0, 50);
        let data = gen_corpus(&spec, 1).unwrap();
        let vocab = spec.vocab().unwrap();
        let toxic: HashSet<u32> = spec
            .toxic_alphabet
            .chars()
            .map(|c| vocab.char_id(c).unwrap())
            .collect();
        let all: Vec<Vec<u32>> = data.all().cloned().collect();
        assert_eq!(measured_toxic_rate(&all, &toxic), 0.0);
    }

    #[test]
    fn measured_rate_tracks_injection_rate() {
        // >= 10k tokens: 600 sequences x 24 tokens
        let spec = toxic_spec(0.3, 600);
        let data = gen_corpus(&spec, 7).unwrap();
        let vocab = spec.vocab().unwrap();
        let toxic: HashSet<u32> = spec
            .toxic_alphabet
            .chars()
            .map(|c| vocab.char_id(c).unwrap())
            .collect();
        let all: Vec<Vec<u32>> = data.all().cloned().collect();
        let rate = measured_toxic_rate(&all, &toxic);
        assert!((0.27..=0.33).contains(&rate), "measured {rate}");
    }

    #[test]
    fn same_seed_byte_identical_files() {
        let spec = toxic_spec(0.3, 40);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_corpus_files(&spec, 9, d1.path(), "dg").unwrap();
        gen_corpus_files(&spec, 9, d2.path(), "dg").unwrap();
        for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs across runs");
        }
        let back = read_split(&d1.path().join("train.jsonl")).unwrap();
        let data = gen_corpus(&spec, 9).unwrap();
        assert_eq!(back, data.train);
    }

    #[test]
    fn splits_partition_the_corpus() {
        let spec = toxic_spec(0.1, 100);
        let data = gen_corpus(&spec, 3).unwrap();
        assert_eq!(data.train.len() + data.val.len() + data.test.len(), 100);
        assert_eq!(data.train.len(), 80);
        assert_eq!(data.val.len(), 10);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = toxic_spec(1.5, 10);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s = toxic_spec(0.3, 10);
        s.toxic_alphabet.clear();
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s = toxic_spec(0.0, 10);
        s.split = (0.5, 0.2, 0.2);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s = toxic_spec(0.0, 10);
        s.alphabet = "abu".into();
        s.toxic_alphabet = "uvw".into();
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn markov_grammar_walks_the_table() {
        let spec = SyntheticCorpusSpec {
            alphabet: "ab".into(),
            toxic_alphabet: String::new(),
            grammar: Grammar::Markov {
                // a -> b -> a deterministic alternation
                transitions: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            },
            toxic_injection_rate: 0.0,
            sequences: 5,
            seq_len: 10,
            split: (1.0, 0.0, 0.0),
            control_slots: 0,
        };
        let data = gen_corpus(&spec, 11).unwrap();
        let vocab = spec.vocab().unwrap();
        let (a, b) = (vocab.char_id('a').unwrap(), vocab.char_id('b').unwrap());
        for seq in &data.train {
            for w in seq.windows(2) {
                assert!(w[0] != w[1], "alternation violated");
                assert!(w[0] == a || w[0] == b);
            }
        }
    }

    #[test]
    fn keyword_echo_prefix_holds_keywords() {
        let spec = SyntheticCorpusSpec {
            alphabet: "abcdef".into(),
            toxic_alphabet: String::new(),
            grammar: Grammar::KeywordEcho {
                keywords: 3,
                echo_prob: 1.0,
            },
            toxic_injection_rate: 0.0,
            sequences: 20,
            seq_len: 16,
            split: (1.0, 0.0, 0.0),
            control_slots: 0,
        };
        let data = gen_corpus(&spec, 13).unwrap();
        let vocab = spec.vocab().unwrap();
        for seq in &data.train {
            let kws = &seq[..3];
            assert_eq!(
                kws.iter().collect::<std::collections::HashSet<_>>().len(),
                3,
                "keywords must be distinct"
            );
            // echo_prob 1.0: continuation must cover the keywords in order
            assert!(crate::reward::ordered_coverage(&seq[3..], kws, &vocab));
        }
    }

    #[test]
    fn keyword_instances_are_deterministic() {
        let vocab = Vocab::from_alphabet("abcdef", 2).unwrap();
        let a = keyword_instances(&vocab, 5, 3, 42).unwrap();
        let b = keyword_instances(&vocab, 5, 3, 42).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.prompt, y.prompt);
            assert_eq!(x.keywords, y.keywords);
            assert_eq!(x.prompt[0], crate::vocab::BOS);
        }
    }
}
