//! Experiment recipes: corpus generation, base pretraining, optional
//! transfer/distillation stages, adapter RL training, and a base-vs-tailored
//! metric report, all derived deterministically from one seed.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_checkpoint;
use crate::corpus::{gen_corpus_files, keyword_instances, SyntheticCorpusSpec};
use crate::decode::DecoderSpec;
use crate::distill::{fit_approximate, generate_kd_corpus};
use crate::error::{Error, Result};
use crate::lm::{eval_nll, train_mle, wrap_sequences, LmConfig, MleConfig, Policy, Role};
use crate::metrics::{
    dist_n, mean_stepwise_kl, perplexity_under, sample_outputs, CoverageInstance,
};
use crate::par::mix_seed;
use crate::report::MetricReport;
use crate::reward::{
    coverage_reward_spec, fluency_reward_spec, ordered_coverage, toxicity_score, CompositeReward,
    RewardSpec,
};
use crate::rl::{train, Algorithm, TrainConfig, TrainLog};
use crate::tailor::{assemble_variant, IpaVariant, PolicySampler, TailoredPolicy};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ForbiddenToken,
    OrderedKeywords,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::ForbiddenToken => "forbidden-token",
            Task::OrderedKeywords => "ordered-keywords",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "forbidden-token" => Ok(Task::ForbiddenToken),
            "ordered-keywords" => Ok(Task::OrderedKeywords),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// How adapter parameters start out: small random weights (near-uniform
/// outputs) or pretrained on the task corpus by MLE first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    Fresh,
    Pretrained,
}

impl std::str::FromStr for AdapterInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<AdapterInit> {
        match s {
            "fresh" => Ok(AdapterInit::Fresh),
            "pretrained" => Ok(AdapterInit::Pretrained),
            other => Err(Error::Config(format!("unknown adapter_init {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub prompts: usize,
    pub prompt_len: usize,
    pub samples_per_prompt: usize,
    pub toxicity_threshold: f64,
    /// Keywords per instance (ordered-keywords task).
    pub keywords: usize,
    pub decoder: DecoderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdSettings {
    pub prompts: usize,
    pub prompt_len: usize,
    pub n_per_prompt: usize,
    pub decoder: DecoderSpec,
    pub mle: MleConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecipe {
    pub name: String,
    pub task: Task,
    pub variant: IpaVariant,
    pub corpus: SyntheticCorpusSpec,
    /// Deployment base shape (vocab_size is filled from the corpus vocab).
    pub base: LmConfig,
    pub adapter: LmConfig,
    pub adapter_init: AdapterInit,
    /// Training-side base shape for transfer/distilled variants.
    pub training_base: Option<LmConfig>,
    pub kd: Option<KdSettings>,
    pub pretrain: MleConfig,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    /// Prompts used for RL exploration (drawn from the train split).
    pub train_prompts: usize,
    pub seed: u64,
}

impl ExperimentRecipe {
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self).expect("recipe serializes"));
        hex::encode(hasher.finalize())
    }

    fn shaped(&self, shape: &LmConfig, vocab: &Vocab) -> LmConfig {
        LmConfig {
            vocab_size: vocab.len(),
            ..shape.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let vocab = self.corpus.vocab()?;
        self.shaped(&self.base, &vocab).validate()?;
        self.shaped(&self.adapter, &vocab).validate()?;
        self.train.validate()?;
        self.eval.decoder.validate()?;
        if self.eval.prompts == 0 || self.train_prompts == 0 {
            return Err(Error::Config("prompt counts must be >= 1".into()));
        }
        match self.variant {
            IpaVariant::Direct => {}
            IpaVariant::Transfer => {
                if self.training_base.is_none() {
                    return Err(Error::Config(
                        "transfer variant needs a training_base shape".into(),
                    ));
                }
            }
            IpaVariant::Distilled => {
                if self.training_base.is_none() || self.kd.is_none() {
                    return Err(Error::Config(
                        "distilled variant needs training_base and kd settings".into(),
                    ));
                }
            }
        }
        if let Some(tb) = &self.training_base {
            self.shaped(tb, &vocab).validate()?;
        }
        if let Some(kd) = &self.kd {
            kd.decoder.validate()?;
            if kd.prompts == 0 {
                return Err(Error::Config("kd needs prompts".into()));
            }
        }
        if self.train.algorithm == Algorithm::Quark
            && self.corpus.control_slots < self.train.quantile_count
        {
            return Err(Error::Config(format!(
                "quark with K={} needs at least that many control slots, corpus has {}",
                self.train.quantile_count, self.corpus.control_slots
            )));
        }
        // generation must fit every context window involved
        let prompt_total = 1 + match self.task {
            Task::ForbiddenToken => self.eval.prompt_len,
            Task::OrderedKeywords => self.eval.keywords,
        };
        let needed_base = prompt_total + self.eval.decoder.max_length.max(self.train.explore.max_length);
        let needed_adapter = needed_base + 1; // control token slot
        let windows = [
            ("base", self.base.context),
            ("adapter", self.adapter.context),
        ];
        for (name, ctx) in windows {
            let needed = if name == "adapter" { needed_adapter } else { needed_base };
            if needed > ctx {
                return Err(Error::Config(format!(
                    "{name} context {ctx} too small for prompt {prompt_total} + generation"
                )));
            }
        }
        if let Some(tb) = &self.training_base {
            if needed_base > tb.context {
                return Err(Error::Config("training_base context too small".into()));
            }
        }
        Ok(())
    }
}

/// Holds the output-directory lock for the lifetime of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "output dir is locked by another run (remove {} if stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
        Error::Numerical(m) => Error::Numerical(format!("[{stage}] {m}")),
        other => Error::State(format!("[{stage}] {other}")),
    })
}

/// Prompts for the forbidden-token task: BOS plus sequence prefixes.
pub fn prefix_prompts(seqs: &[Vec<u32>], count: usize, prompt_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let seq = &seqs[i % seqs.len()];
        let mut p = vec![crate::vocab::BOS];
        p.extend_from_slice(&seq[..prompt_len.min(seq.len())]);
        out.push(p);
    }
    out
}

pub struct RecipeArtifacts {
    pub report: MetricReport,
    pub train_log: TrainLog,
    pub base_path: PathBuf,
    pub adapter_path: PathBuf,
}

/// Execute every stage of a recipe under `out_dir` and return the report.
pub fn run_recipe(recipe: &ExperimentRecipe, out_dir: &Path) -> Result<RecipeArtifacts> {
    staged("validate", recipe.validate())?;
    let digest = recipe.digest();
    let _lock = DirLock::acquire(out_dir)?;

    // corpus
    let vocab = recipe.corpus.vocab()?;
    let corpus_seed = mix_seed(recipe.seed, 1, 0);
    let data = staged(
        "corpus",
        gen_corpus_files(&recipe.corpus, corpus_seed, &out_dir.join("corpus"), &digest),
    )?;
    let train_pairs = wrap_sequences(&data.train);
    let val_pairs = wrap_sequences(if data.val.is_empty() { &data.train } else { &data.val });

    // deployment base
    let base_cfg = recipe.shaped(&recipe.base, &vocab);
    let mut base = staged(
        "pretrain-base",
        Policy::new(base_cfg, vocab.clone(), Role::Base, mix_seed(recipe.seed, 2, 0)),
    )?;
    let mut pretrain = recipe.pretrain.clone();
    pretrain.seed = mix_seed(recipe.seed, 2, 1);
    staged("pretrain-base", train_mle(&mut base, &train_pairs, &pretrain))?;
    let base = base.frozen();
    let base_val_nll = staged("pretrain-base", eval_nll(&base, &val_pairs))?;
    let base_path = out_dir.join("base.ckpt");
    save_checkpoint(&base, &base_path, None, Some(&digest))?;

    // training-side base per variant
    let training_base: Option<Policy> = match recipe.variant {
        IpaVariant::Direct => None,
        IpaVariant::Transfer => {
            let cfg = recipe.shaped(recipe.training_base.as_ref().expect("validated"), &vocab);
            let mut small = staged(
                "pretrain-training-base",
                Policy::new(cfg, vocab.clone(), Role::Base, mix_seed(recipe.seed, 3, 0)),
            )?;
            let mut mle = recipe.pretrain.clone();
            mle.seed = mix_seed(recipe.seed, 3, 1);
            staged(
                "pretrain-training-base",
                train_mle(&mut small, &train_pairs, &mle),
            )?;
            let small = small.frozen();
            save_checkpoint(&small, &out_dir.join("training_base.ckpt"), None, Some(&digest))?;
            Some(small)
        }
        IpaVariant::Distilled => {
            let kd = recipe.kd.as_ref().expect("validated");
            let kd_prompts = prefix_prompts(&data.train, kd.prompts, kd.prompt_len);
            let kd_decoder = kd.decoder.clone().with_seed(mix_seed(recipe.seed, 5, 0));
            let corpus = staged(
                "distill",
                generate_kd_corpus(&base, &kd_prompts, kd.n_per_prompt, &kd_decoder),
            )?;
            corpus.save(&out_dir.join("kd_corpus.jsonl"))?;
            let cfg = recipe.shaped(recipe.training_base.as_ref().expect("validated"), &vocab);
            let student = staged(
                "distill",
                Policy::new(cfg, vocab.clone(), Role::Base, mix_seed(recipe.seed, 5, 1)),
            )?;
            let mut mle = kd.mle.clone();
            mle.seed = mix_seed(recipe.seed, 5, 2);
            let approx = staged("distill", fit_approximate(student, &corpus, &mle))?;
            save_checkpoint(&approx, &out_dir.join("approx.ckpt"), None, Some(&digest))?;
            Some(approx)
        }
    };
    let rl_base: &Policy = training_base.as_ref().unwrap_or(&base);

    // reward and prompts per task
    let toxic: HashSet<u32> = recipe
        .corpus
        .toxic_alphabet
        .chars()
        .map(|c| vocab.char_id(c))
        .collect::<Result<_>>()?;
    let base_arc = Arc::new(base.clone());
    let (reward, rl_prompts, eval_instances): (CompositeReward, Vec<Vec<u32>>, Vec<CoverageInstance>) =
        match recipe.task {
            Task::ForbiddenToken => {
                let spec = crate::reward::toxicity_reward_spec(vocab.clone(), toxic.clone());
                let prompts = prefix_prompts(&data.train, recipe.train_prompts, recipe.eval.prompt_len);
                (CompositeReward::new(vec![spec])?, prompts, Vec::new())
            }
            Task::OrderedKeywords => {
                let components: Vec<RewardSpec> = vec![
                    coverage_reward_spec(vocab.clone()),
                    fluency_reward_spec(base_arc.clone()),
                ];
                let instances = keyword_instances(
                    &vocab,
                    recipe.train_prompts,
                    recipe.eval.keywords,
                    mix_seed(recipe.seed, 8, 0),
                )?;
                let prompts = instances.iter().map(|i| i.prompt.clone()).collect();
                let eval_instances = keyword_instances(
                    &vocab,
                    recipe.eval.prompts,
                    recipe.eval.keywords,
                    mix_seed(recipe.seed, 9, 0),
                )?;
                (CompositeReward::new(components)?, prompts, eval_instances)
            }
        };

    // adapter RL training against the training-side base
    let adapter_cfg = recipe.shaped(&recipe.adapter, &vocab);
    let mut adapter = staged(
        "train-ipa",
        Policy::new(adapter_cfg, vocab.clone(), Role::Adapter, mix_seed(recipe.seed, 4, 0)),
    )?;
    if recipe.adapter_init == AdapterInit::Pretrained {
        let mut mle = recipe.pretrain.clone();
        mle.seed = mix_seed(recipe.seed, 4, 1);
        staged("pretrain-adapter", train_mle(&mut adapter, &train_pairs, &mle))?;
    }
    let adapter = adapter;
    let mut train_cfg = recipe.train.clone();
    train_cfg.seed = mix_seed(recipe.seed, 6, 0);
    let reward_fn = move |p: &[u32], o: &[u32]| reward.eval(p, o);
    let (adapter, train_log) = staged(
        "train-ipa",
        train(rl_base, adapter, &reward_fn, &rl_prompts, &train_cfg),
    )?;
    std::fs::write(out_dir.join("train_log.jsonl"), train_log.to_jsonl(&digest))?;

    // deployment assembly
    let control = match train_cfg.algorithm {
        Algorithm::Quark => Some(vocab.control_token(train_cfg.quantile_count - 1)?),
        Algorithm::Ppo => None,
    };
    let (tailored, manifest) = staged(
        "assemble",
        assemble_variant(recipe.variant, &base, training_base.as_ref(), &adapter, control),
    )?;
    let adapter_path = out_dir.join("adapter.ckpt");
    save_checkpoint(&adapter, &adapter_path, Some(&manifest), Some(&digest))?;

    // evaluation: untailored base vs tailored policy
    let eval_decoder = recipe.eval.decoder.clone().with_seed(mix_seed(recipe.seed, 7, 0));
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("base.val_nll".to_string(), base_val_nll);
    let eval_prompts: Vec<Vec<u32>> = match recipe.task {
        Task::ForbiddenToken => {
            let heldout = if data.test.is_empty() { &data.train } else { &data.test };
            prefix_prompts(heldout, recipe.eval.prompts, recipe.eval.prompt_len)
        }
        Task::OrderedKeywords => eval_instances.iter().map(|i| i.prompt.clone()).collect(),
    };

    let base_sampler = PolicySampler { policy: &base };
    staged(
        "eval",
        evaluate_side(
            "base",
            &base_sampler,
            recipe,
            &eval_prompts,
            &eval_instances,
            &eval_decoder,
            &toxic,
            &base,
            &mut metrics,
        ),
    )?;
    staged(
        "eval",
        evaluate_side(
            "tailored",
            &tailored,
            recipe,
            &eval_prompts,
            &eval_instances,
            &eval_decoder,
            &toxic,
            &base,
            &mut metrics,
        ),
    )?;
    let kl = staged(
        "eval",
        mean_stepwise_kl(&tailored, &eval_prompts, recipe.eval.samples_per_prompt.min(4), &eval_decoder),
    )?;
    metrics.insert("tailored.mean_kl_to_base".to_string(), kl);

    let report = MetricReport {
        recipe_digest: digest,
        seed: recipe.seed,
        task: recipe.task.as_str().to_string(),
        metrics,
        config: serde_json::to_value(recipe)?,
    };
    report.save(&out_dir.join("report.json"))?;
    Ok(RecipeArtifacts {
        report,
        train_log,
        base_path,
        adapter_path,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_side(
    side: &str,
    policy: &dyn crate::decode::NextTokenPolicy,
    recipe: &ExperimentRecipe,
    prompts: &[Vec<u32>],
    instances: &[CoverageInstance],
    decoder: &DecoderSpec,
    toxic: &HashSet<u32>,
    reference: &Policy,
    metrics: &mut std::collections::BTreeMap<String, f64>,
) -> Result<()> {
    let vocab = policy.vocab().clone();
    match recipe.task {
        Task::ForbiddenToken => {
            let samples = sample_outputs(policy, prompts, recipe.eval.samples_per_prompt, decoder)?;
            let maxima: Vec<f64> = samples
                .iter()
                .map(|per| {
                    per.iter()
                        .map(|o| toxicity_score(o, toxic, &vocab))
                        .fold(0.0, f64::max)
                })
                .collect();
            let avg_max = maxima.iter().sum::<f64>() / maxima.len() as f64;
            let prob = maxima
                .iter()
                .filter(|&&m| m >= recipe.eval.toxicity_threshold)
                .count() as f64
                / maxima.len() as f64;
            let flat: Vec<Vec<u32>> = samples.iter().flatten().cloned().collect();
            metrics.insert(format!("{side}.avg_max_toxicity"), avg_max);
            metrics.insert(format!("{side}.toxicity_probability"), prob);
            metrics.insert(format!("{side}.dist_2"), dist_n(&flat, 2, &vocab));
            metrics.insert(format!("{side}.dist_3"), dist_n(&flat, 3, &vocab));
            metrics.insert(format!("{side}.perplexity"), perplexity_under(reference, &flat)?);
            let mean_reward = flat
                .iter()
                .map(|o| 1.0 - toxicity_score(o, toxic, &vocab))
                .sum::<f64>()
                / flat.len() as f64;
            metrics.insert(format!("{side}.mean_reward"), mean_reward);
        }
        Task::OrderedKeywords => {
            let samples = sample_outputs(policy, prompts, 1, decoder)?;
            let mut covered = 0usize;
            let mut fluency_sum = 0.0;
            let flat: Vec<Vec<u32>> = samples.iter().map(|per| per[0].clone()).collect();
            for (inst, out) in instances.iter().zip(&flat) {
                if ordered_coverage(out, &inst.keywords, &vocab) {
                    covered += 1;
                }
                fluency_sum += crate::reward::fluency_proxy(out, reference)?;
            }
            metrics.insert(
                format!("{side}.coverage_rate"),
                covered as f64 / instances.len() as f64,
            );
            metrics.insert(format!("{side}.fluency"), fluency_sum / instances.len() as f64);
            metrics.insert(format!("{side}.dist_2"), dist_n(&flat, 2, &vocab));
            metrics.insert(format!("{side}.perplexity"), perplexity_under(reference, &flat)?);
        }
    }
    Ok(())
}

/// Rebuild the evaluation inputs a recipe implies (corpus-derived prompts,
/// toxic set, instances, seeded decoder) and score a base checkpoint against
/// an optional tailored policy.
pub fn evaluate_pair(
    recipe: &ExperimentRecipe,
    base: &Policy,
    adapter: Option<(&Policy, Option<u32>)>,
) -> Result<MetricReport> {
    recipe.validate()?;
    let digest = recipe.digest();
    let vocab = recipe.corpus.vocab()?;
    if vocab != base.vocab {
        return Err(Error::ConfigMismatch(
            "base checkpoint vocab differs from the recipe corpus".into(),
        ));
    }
    let data = crate::corpus::gen_corpus(&recipe.corpus, mix_seed(recipe.seed, 1, 0))?;
    let toxic: HashSet<u32> = recipe
        .corpus
        .toxic_alphabet
        .chars()
        .map(|c| vocab.char_id(c))
        .collect::<Result<_>>()?;
    let eval_instances = match recipe.task {
        Task::OrderedKeywords => keyword_instances(
            &vocab,
            recipe.eval.prompts,
            recipe.eval.keywords,
            mix_seed(recipe.seed, 9, 0),
        )?,
        Task::ForbiddenToken => Vec::new(),
    };
    let eval_prompts: Vec<Vec<u32>> = match recipe.task {
        Task::ForbiddenToken => {
            let heldout = if data.test.is_empty() { &data.train } else { &data.test };
            prefix_prompts(heldout, recipe.eval.prompts, recipe.eval.prompt_len)
        }
        Task::OrderedKeywords => eval_instances.iter().map(|i| i.prompt.clone()).collect(),
    };
    let eval_decoder = recipe.eval.decoder.clone().with_seed(mix_seed(recipe.seed, 7, 0));

    let mut metrics = std::collections::BTreeMap::new();
    let base_sampler = PolicySampler { policy: base };
    evaluate_side(
        "base",
        &base_sampler,
        recipe,
        &eval_prompts,
        &eval_instances,
        &eval_decoder,
        &toxic,
        base,
        &mut metrics,
    )?;
    if let Some((adapter, control)) = adapter {
        let tailored = TailoredPolicy::new(base, adapter)?.with_control(control)?;
        evaluate_side(
            "tailored",
            &tailored,
            recipe,
            &eval_prompts,
            &eval_instances,
            &eval_decoder,
            &toxic,
            base,
            &mut metrics,
        )?;
        let kl = mean_stepwise_kl(
            &tailored,
            &eval_prompts,
            recipe.eval.samples_per_prompt.min(4),
            &eval_decoder,
        )?;
        metrics.insert("tailored.mean_kl_to_base".to_string(), kl);
    }
    Ok(MetricReport {
        recipe_digest: digest,
        seed: recipe.seed,
        task: recipe.task.as_str().to_string(),
        metrics,
        config: serde_json::to_value(recipe)?,
    })
}

/// Desk-default recipe for the toxic-token-avoidance experiment.
pub fn detox_recipe(variant: IpaVariant, algorithm: Algorithm, seed: u64) -> ExperimentRecipe {
    let shape = |dim: usize, layers: usize| LmConfig {
        vocab_size: 0,
        dim,
        heads: 2,
        layers,
        context: 32,
        ff_mult: 4,
        tie_embeddings: false,
    };
    ExperimentRecipe {
        name: format!("detox-{}-{:?}", variant.as_str(), algorithm).to_lowercase(),
        task: Task::ForbiddenToken,
        variant,
        corpus: SyntheticCorpusSpec {
            alphabet: "abcdef".into(),
            toxic_alphabet: "uvw".into(),
            grammar: crate::corpus::Grammar::Periodic {
                patterns: vec!["abcdef".into(), "fedcba".into(), "abcfde".into()],
            },
            toxic_injection_rate: 0.3,
            sequences: 600,
            seq_len: 24,
            split: (0.8, 0.1, 0.1),
            control_slots: 5,
        },
        base: shape(32, 2),
        adapter: shape(16, 1),
        adapter_init: AdapterInit::Fresh,
        training_base: match variant {
            IpaVariant::Direct => None,
            IpaVariant::Transfer => Some(shape(16, 2)),
            IpaVariant::Distilled => Some(shape(16, 2)),
        },
        kd: match variant {
            IpaVariant::Distilled => Some(KdSettings {
                prompts: 24,
                prompt_len: 4,
                n_per_prompt: 4,
                decoder: DecoderSpec::nucleus(0.9, 18, 0),
                mle: MleConfig {
                    steps: 600,
                    batch_size: 16,
                    learning_rate: 3e-3,
                    warmup_steps: 30,
                    seed: 0,
                },
            }),
            _ => None,
        },
        pretrain: MleConfig {
            steps: 500,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 25,
            seed: 0,
        },
        train: TrainConfig {
            algorithm,
            kl_coefficient: 0.05,
            exploration_frequency: 8,
            quantile_count: 5,
            clip_ratio: 0.2,
            rollouts_per_exploration: 32,
            batch_size: 32,
            total_steps: 200,
            learning_rate: 3e-3,
            warmup_steps: 10,
            pool_capacity: crate::rl::DEFAULT_POOL_CAPACITY,
            explore: DecoderSpec::nucleus(0.9, 16, 0),
            seed: 0,
        },
        eval: EvalSpec {
            prompts: 16,
            prompt_len: 4,
            samples_per_prompt: 25,
            toxicity_threshold: 0.5,
            keywords: 3,
            decoder: DecoderSpec::nucleus(0.9, 16, 0),
        },
        train_prompts: 16,
        seed,
    }
}

/// Desk-default recipe for the ordered-keyword coverage experiment.
pub fn keywords_recipe(seed: u64) -> ExperimentRecipe {
    let mut r = detox_recipe(IpaVariant::Direct, Algorithm::Quark, seed);
    r.name = "keywords-direct-quark".into();
    r.task = Task::OrderedKeywords;
    r.corpus = SyntheticCorpusSpec {
        alphabet: "abcdef".into(),
        toxic_alphabet: String::new(),
        grammar: crate::corpus::Grammar::KeywordEcho {
            keywords: 3,
            echo_prob: 0.45,
        },
        toxic_injection_rate: 0.0,
        sequences: 600,
        seq_len: 20,
        split: (0.8, 0.1, 0.1),
        control_slots: 5,
    };
    r.train.total_steps = 240;
    r.train.explore = DecoderSpec::nucleus(0.9, 18, 0);
    r.eval.decoder = DecoderSpec::nucleus(0.9, 18, 0);
    r.eval.prompts = 24;
    r.train_prompts = 24;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_recipes_validate() {
        for variant in [IpaVariant::Direct, IpaVariant::Transfer, IpaVariant::Distilled] {
            detox_recipe(variant, Algorithm::Quark, 0).validate().unwrap();
        }
        detox_recipe(IpaVariant::Direct, Algorithm::Ppo, 0)
            .validate()
            .unwrap();
        keywords_recipe(0).validate().unwrap();
    }

    #[test]
    fn recipe_digest_tracks_content() {
        let a = detox_recipe(IpaVariant::Direct, Algorithm::Quark, 0);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn validation_rejects_oversized_generation() {
        let mut r = detox_recipe(IpaVariant::Direct, Algorithm::Quark, 0);
        r.eval.decoder.max_length = 100;
        assert!(matches!(r.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn validation_rejects_missing_stage_inputs() {
        let mut r = detox_recipe(IpaVariant::Transfer, Algorithm::Quark, 0);
        r.training_base = None;
        assert!(matches!(r.validate(), Err(Error::Config(_))));
        let mut r = detox_recipe(IpaVariant::Distilled, Algorithm::Quark, 0);
        r.kd = None;
        assert!(matches!(r.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn lock_file_guards_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let l1 = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::State(_))));
        drop(l1);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
