//! Plain-text `key = value` configuration with `[sections]`, mapping onto
//! experiment recipes, decoder specs, and compare tolerances. Hyperparameter
//! keys keep their standard names (kl_coefficient, exploration_frequency,
//! warmup_steps, nucleus_p, temperature, ...).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{Grammar, SyntheticCorpusSpec};
use crate::decode::{DecoderKind, DecoderSpec};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, MleConfig};
use crate::recipe::{AdapterInit, EvalSpec, ExperimentRecipe, KdSettings, Task};
use crate::report::Tolerance;
use crate::rl::{Algorithm, TrainConfig};
use crate::tailor::IpaVariant;

#[derive(Debug, Clone, Default)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Ini> {
        let mut ini = Ini::default();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section", lineno + 1)))?;
                current = name.trim().to_string();
                ini.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            if current.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key outside any [section]",
                    lineno + 1
                )));
            }
            ini.sections
                .get_mut(&current)
                .expect("section exists")
                .insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Ini> {
        Ini::parse(&std::fs::read_to_string(path)?)
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&BTreeMap<String, String>> {
        self.section(name)
            .ok_or_else(|| Error::Config(format!("missing [{name}] section")))
    }
}

fn get<'a>(s: &'a BTreeMap<String, String>, section: &str, key: &str) -> Result<&'a str> {
    s.get(key)
        .map(|v| v.as_str())
        .ok_or_else(|| Error::Config(format!("[{section}] missing key {key}")))
}

fn parse<T: FromStr>(s: &BTreeMap<String, String>, section: &str, key: &str) -> Result<T> {
    let raw = get(s, section, key)?;
    raw.parse::<T>()
        .map_err(|_| Error::Config(format!("[{section}] {key} = {raw:?} is not valid")))
}

fn parse_or<T: FromStr>(
    s: &BTreeMap<String, String>,
    section: &str,
    key: &str,
    default: T,
) -> Result<T> {
    match s.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse::<T>()
            .map_err(|_| Error::Config(format!("[{section}] {key} = {raw:?} is not valid"))),
    }
}

fn decoder_from(s: &BTreeMap<String, String>, section: &str) -> Result<DecoderSpec> {
    let kind_name = s.get("decoder").map(|v| v.as_str()).unwrap_or("nucleus");
    let kind = match kind_name {
        "greedy" => DecoderKind::Greedy,
        "top_k" => DecoderKind::TopK {
            k: parse_or(s, section, "top_k", 50usize)?,
        },
        "nucleus" => DecoderKind::Nucleus {
            p: parse_or(s, section, "nucleus_p", 0.9f64)?,
        },
        "typical" => DecoderKind::Typical {
            tau: parse_or(s, section, "typical_tau", 0.95f64)?,
        },
        other => return Err(Error::Config(format!("[{section}] unknown decoder {other:?}"))),
    };
    let spec = DecoderSpec {
        kind,
        temperature: parse_or(s, section, "temperature", 1.0f64)?,
        max_length: parse_or(s, section, "max_length", 16usize)?,
        seed: 0,
    };
    spec.validate()?;
    Ok(spec)
}

fn lm_shape_from(s: &BTreeMap<String, String>, section: &str) -> Result<LmConfig> {
    Ok(LmConfig {
        vocab_size: 0, // filled from the corpus vocab
        dim: parse(s, section, "dim")?,
        heads: parse(s, section, "heads")?,
        layers: parse(s, section, "layers")?,
        context: parse(s, section, "context")?,
        ff_mult: parse_or(s, section, "ff_mult", 4usize)?,
        tie_embeddings: parse_or(s, section, "tie_embeddings", false)?,
    })
}

fn mle_from(s: &BTreeMap<String, String>, section: &str) -> Result<MleConfig> {
    Ok(MleConfig {
        steps: parse(s, section, "steps")?,
        batch_size: parse(s, section, "batch_size")?,
        learning_rate: parse(s, section, "learning_rate")?,
        warmup_steps: parse_or(s, section, "warmup_steps", 0usize)?,
        seed: 0,
    })
}

fn corpus_from(s: &BTreeMap<String, String>, section: &str) -> Result<SyntheticCorpusSpec> {
    let grammar = match get(s, section, "grammar")? {
        "periodic" => Grammar::Periodic {
            patterns: get(s, section, "patterns")?
                .split('|')
                .map(str::to_string)
                .collect(),
        },
        "markov" => {
            let rows = get(s, section, "transitions")?
                .split(';')
                .map(|row| {
                    row.split(',')
                        .map(|v| {
                            v.trim().parse::<f64>().map_err(|_| {
                                Error::Config(format!("[{section}] bad transition value {v:?}"))
                            })
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            Grammar::Markov { transitions: rows }
        }
        "keyword-echo" => Grammar::KeywordEcho {
            keywords: parse(s, section, "keywords")?,
            echo_prob: parse(s, section, "echo_prob")?,
        },
        other => return Err(Error::Config(format!("[{section}] unknown grammar {other:?}"))),
    };
    let split_raw = get(s, section, "split")?;
    let parts: Vec<f64> = split_raw
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("[{section}] bad split {split_raw:?}")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "[{section}] split needs three comma-separated fractions"
        )));
    }
    Ok(SyntheticCorpusSpec {
        alphabet: get(s, section, "alphabet")?.to_string(),
        toxic_alphabet: s.get("toxic_alphabet").cloned().unwrap_or_default(),
        grammar,
        toxic_injection_rate: parse_or(s, section, "toxic_injection_rate", 0.0f64)?,
        sequences: parse(s, section, "sequences")?,
        seq_len: parse(s, section, "seq_len")?,
        split: (parts[0], parts[1], parts[2]),
        control_slots: parse_or(s, section, "control_slots", 5usize)?,
    })
}

fn train_from(s: &BTreeMap<String, String>, section: &str) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    Ok(TrainConfig {
        algorithm: Algorithm::from_str(get(s, section, "algorithm")?)?,
        kl_coefficient: parse_or(s, section, "kl_coefficient", defaults.kl_coefficient)?,
        exploration_frequency: parse_or(
            s,
            section,
            "exploration_frequency",
            defaults.exploration_frequency,
        )?,
        quantile_count: parse_or(s, section, "quantile_count", defaults.quantile_count)?,
        clip_ratio: parse_or(s, section, "clip_ratio", defaults.clip_ratio)?,
        rollouts_per_exploration: parse_or(
            s,
            section,
            "rollouts_per_exploration",
            defaults.rollouts_per_exploration,
        )?,
        batch_size: parse_or(s, section, "batch_size", defaults.batch_size)?,
        total_steps: parse(s, section, "total_steps")?,
        learning_rate: parse_or(s, section, "learning_rate", defaults.learning_rate)?,
        warmup_steps: parse_or(s, section, "warmup_steps", defaults.warmup_steps)?,
        pool_capacity: parse_or(s, section, "pool_capacity", defaults.pool_capacity)?,
        explore: decoder_from(s, section)?,
        seed: 0,
    })
}

/// Build a full experiment recipe from an INI document.
pub fn recipe_from_ini(ini: &Ini) -> Result<ExperimentRecipe> {
    let r = ini.require("recipe")?;
    let task = Task::from_str(get(r, "recipe", "task")?)?;
    let variant = IpaVariant::from_str(get(r, "recipe", "variant")?)?;
    let corpus = corpus_from(ini.require("corpus")?, "corpus")?;
    let base = lm_shape_from(ini.require("base")?, "base")?;
    let adapter = lm_shape_from(ini.require("adapter")?, "adapter")?;
    let training_base = match ini.section("training_base") {
        Some(s) => Some(lm_shape_from(s, "training_base")?),
        None => None,
    };
    let kd = match ini.section("kd") {
        Some(s) => Some(KdSettings {
            prompts: parse(s, "kd", "prompts")?,
            prompt_len: parse(s, "kd", "prompt_len")?,
            n_per_prompt: parse(s, "kd", "n_per_prompt")?,
            decoder: decoder_from(s, "kd")?,
            mle: mle_from(s, "kd")?,
        }),
        None => None,
    };
    let e = ini.require("eval")?;
    let eval = EvalSpec {
        prompts: parse(e, "eval", "prompts")?,
        prompt_len: parse_or(e, "eval", "prompt_len", 4usize)?,
        samples_per_prompt: parse_or(e, "eval", "samples_per_prompt", 25usize)?,
        toxicity_threshold: parse_or(e, "eval", "toxicity_threshold", 0.5f64)?,
        keywords: parse_or(e, "eval", "keywords", 3usize)?,
        decoder: decoder_from(e, "eval")?,
    };
    let recipe = ExperimentRecipe {
        name: get(r, "recipe", "name")?.to_string(),
        task,
        variant,
        corpus,
        base,
        adapter,
        adapter_init: match ini.require("adapter")?.get("init") {
            Some(v) => AdapterInit::from_str(v)?,
            None => AdapterInit::Fresh,
        },
        training_base,
        kd,
        pretrain: mle_from(ini.require("pretrain")?, "pretrain")?,
        train: train_from(ini.require("train")?, "train")?,
        eval,
        train_prompts: parse_or(r, "recipe", "train_prompts", 16usize)?,
        seed: parse_or(r, "recipe", "seed", 0u64)?,
    };
    recipe.validate()?;
    Ok(recipe)
}

/// Parse a [tolerances] section: `metric = lower|higher, max_rel_degradation`.
pub fn tolerances_from_ini(ini: &Ini) -> Result<Vec<Tolerance>> {
    let Some(s) = ini.section("tolerances") else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (metric, v) in s {
        let (dir, tol) = v
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("tolerance {metric}: expected direction, value")))?;
        let lower_is_better = match dir.trim() {
            "lower" => true,
            "higher" => false,
            other => {
                return Err(Error::Config(format!(
                    "tolerance {metric}: direction {other:?} must be lower or higher"
                )))
            }
        };
        let max_rel_degradation = tol
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("tolerance {metric}: bad value {tol:?}")))?;
        out.push(Tolerance {
            metric: metric.clone(),
            lower_is_better,
            max_rel_degradation,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
# toxic-token avoidance, direct variant
[recipe]
name = detox-direct
task = forbidden-token
variant = direct
seed = 7
train_prompts = 16

[corpus]
alphabet = abcdef
toxic_alphabet = uvw
grammar = periodic
patterns = abcdef|fedcba
toxic_injection_rate = 0.3
sequences = 100
seq_len = 24
split = 0.8, 0.1, 0.1
control_slots = 5

[base]
dim = 32
heads = 2
layers = 2
context = 32

[adapter]
dim = 16
heads = 2
layers = 1
context = 32

[pretrain]
steps = 50
batch_size = 8
learning_rate = 0.003
warmup_steps = 5

[train]
algorithm = quark
total_steps = 16
kl_coefficient = 0.05
exploration_frequency = 8
quantile_count = 5
rollouts_per_exploration = 8
batch_size = 8
learning_rate = 0.003
warmup_steps = 2
nucleus_p = 0.9
temperature = 1.0
max_length = 12

[eval]
prompts = 4
prompt_len = 4
samples_per_prompt = 3
toxicity_threshold = 0.5
nucleus_p = 0.9
max_length = 12
"#;

    #[test]
    fn sample_config_parses_into_a_valid_recipe() {
        let ini = Ini::parse(SAMPLE).unwrap();
        let recipe = recipe_from_ini(&ini).unwrap();
        assert_eq!(recipe.name, "detox-direct");
        assert_eq!(recipe.seed, 7);
        assert_eq!(recipe.train.kl_coefficient, 0.05);
        assert_eq!(recipe.train.exploration_frequency, 8);
        assert_eq!(recipe.base.dim, 32);
        assert_eq!(recipe.adapter.dim, 16);
        match recipe.eval.decoder.kind {
            DecoderKind::Nucleus { p } => assert_eq!(p, 0.9),
            other => panic!("expected nucleus, got {other:?}"),
        }
    }

    #[test]
    fn missing_sections_and_keys_are_config_errors() {
        let ini = Ini::parse("[recipe]\nname = x\n").unwrap();
        assert!(matches!(recipe_from_ini(&ini), Err(Error::Config(_))));
        let bad = Ini::parse("[corpus\n");
        assert!(matches!(bad, Err(Error::Config(_))));
        let stray = Ini::parse("key = 1\n");
        assert!(matches!(stray, Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let ini = Ini::parse("[a]\n  x = 1  # trailing\n\n# full line\n[b]\ny = z\n").unwrap();
        assert_eq!(ini.section("a").unwrap()["x"], "1");
        assert_eq!(ini.section("b").unwrap()["y"], "z");
    }

    #[test]
    fn tolerances_parse() {
        let ini = Ini::parse(
            "[tolerances]\ntailored.toxicity_probability = lower, 0.25\ntailored.coverage_rate = higher, 0.1\n",
        )
        .unwrap();
        let tols = tolerances_from_ini(&ini).unwrap();
        assert_eq!(tols.len(), 2);
        let tox = tols
            .iter()
            .find(|t| t.metric == "tailored.toxicity_probability")
            .unwrap();
        assert!(tox.lower_is_better);
        assert_eq!(tox.max_rel_degradation, 0.25);
    }
}
