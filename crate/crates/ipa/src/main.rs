//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort,
//! 4 acceptance regression (compare). IPA_THREADS caps parallelism.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ipa::checkpoint::{load_checkpoint, save_checkpoint};
use ipa::config::{recipe_from_ini, tolerances_from_ini, Ini};
use ipa::corpus::gen_corpus_files;
use ipa::decode::sample_sequence;
use ipa::distill::{fit_approximate, generate_kd_corpus};
use ipa::error::{Error, Result};
use ipa::lm::{train_mle, Policy, Role};
use ipa::par::mix_seed;
use ipa::recipe::{evaluate_pair, prefix_prompts, run_recipe, Task};
use ipa::report::{compare_report, regressions, render_diff, MetricReport};
use ipa::reward::{coverage_reward_spec, fluency_reward_spec, toxicity_reward_spec, CompositeReward};
use ipa::rl::{train, Algorithm};
use ipa::tailor::{IpaVariant, PolicySampler, TailoredPolicy};

#[derive(Parser)]
#[command(name = "ipa", version, about = "Tailor a frozen language model with an RL-trained adapter policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Recipe / settings file (key = value sections).
    #[arg(long)]
    config: PathBuf,
    /// Seed override; the config seed is used when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test corpus files.
    GenCorpus(Common),
    /// Pretrain the base language model on the corpus.
    TrainLm(Common),
    /// Distill a frozen teacher checkpoint into an approximate policy.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        base: PathBuf,
    },
    /// RL-train an adapter against a (training-side) base checkpoint.
    TrainIpa {
        #[command(flatten)]
        common: Common,
        /// Training-side base checkpoint (frozen).
        #[arg(long)]
        base: PathBuf,
    },
    /// Sample text from a base checkpoint, optionally tailored by an adapter.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Prompt text (regular alphabet characters).
        #[arg(long, default_value = "")]
        prompt: String,
        /// Number of samples.
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Evaluate a base checkpoint (and optionally a tailored policy) on the
    /// recipe's metric suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Diff two metric reports; exits 4 on regressions past tolerances.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        /// Optional tolerances config ([tolerances] section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the JSON diff.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full recipe: corpus, pretrain, (transfer/distill), RL, report.
    RunRecipe {
        #[command(flatten)]
        common: Common,
        /// Variant override (direct | transfer | distilled).
        #[arg(long)]
        variant: Option<String>,
    },
}

fn load_recipe(common: &Common) -> Result<ipa::recipe::ExperimentRecipe> {
    let ini = Ini::load(&common.config)?;
    let mut recipe = recipe_from_ini(&ini)?;
    if let Some(seed) = common.seed {
        recipe.seed = seed;
    }
    Ok(recipe)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenCorpus(common) => {
            let recipe = load_recipe(&common)?;
            let digest = recipe.digest();
            let seed = mix_seed(recipe.seed, 1, 0);
            let data = gen_corpus_files(&recipe.corpus, seed, &common.out, &digest)?;
            println!(
                "corpus: {} train / {} val / {} test sequences -> {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                common.out.display()
            );
            Ok(0)
        }
        Command::TrainLm(common) => {
            let recipe = load_recipe(&common)?;
            let digest = recipe.digest();
            let vocab = recipe.corpus.vocab()?;
            let data = ipa::corpus::gen_corpus(&recipe.corpus, mix_seed(recipe.seed, 1, 0))?;
            let pairs = ipa::lm::wrap_sequences(&data.train);
            let cfg = ipa::lm::LmConfig {
                vocab_size: vocab.len(),
                ..recipe.base.clone()
            };
            let mut base = Policy::new(cfg, vocab, Role::Base, mix_seed(recipe.seed, 2, 0))?;
            let mut mle = recipe.pretrain.clone();
            mle.seed = mix_seed(recipe.seed, 2, 1);
            let log = train_mle(&mut base, &pairs, &mle)?;
            let base = base.frozen();
            let path = common.out.join("base.ckpt");
            save_checkpoint(&base, &path, None, Some(&digest))?;
            let last = log.losses.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
            println!(
                "base trained ({} steps, final loss {last:.4}) -> {}",
                mle.steps,
                path.display()
            );
            Ok(0)
        }
        Command::Distill { common, base } => {
            let recipe = load_recipe(&common)?;
            let digest = recipe.digest();
            let kd = recipe
                .kd
                .clone()
                .ok_or_else(|| Error::Config("config has no [kd] section".into()))?;
            let shape = recipe
                .training_base
                .clone()
                .ok_or_else(|| Error::Config("config has no [training_base] section".into()))?;
            let (teacher, _) = load_checkpoint(&base)?;
            let teacher = teacher.frozen();
            let data = ipa::corpus::gen_corpus(&recipe.corpus, mix_seed(recipe.seed, 1, 0))?;
            let prompts = prefix_prompts(&data.train, kd.prompts, kd.prompt_len);
            let decoder = kd.decoder.clone().with_seed(mix_seed(recipe.seed, 5, 0));
            let corpus = generate_kd_corpus(&teacher, &prompts, kd.n_per_prompt, &decoder)?;
            corpus.save(&common.out.join("kd_corpus.jsonl"))?;
            let cfg = ipa::lm::LmConfig {
                vocab_size: teacher.vocab.len(),
                ..shape
            };
            let student = Policy::new(
                cfg,
                teacher.vocab.clone(),
                Role::Base,
                mix_seed(recipe.seed, 5, 1),
            )?;
            let mut mle = kd.mle.clone();
            mle.seed = mix_seed(recipe.seed, 5, 2);
            let approx = fit_approximate(student, &corpus, &mle)?;
            let path = common.out.join("approx.ckpt");
            save_checkpoint(&approx, &path, None, Some(&digest))?;
            println!(
                "distilled {} pairs into approximate policy -> {}",
                corpus.len(),
                path.display()
            );
            Ok(0)
        }
        Command::TrainIpa { common, base } => {
            let recipe = load_recipe(&common)?;
            let digest = recipe.digest();
            let (training_base, _) = load_checkpoint(&base)?;
            let training_base = training_base.frozen();
            let vocab = training_base.vocab.clone();
            let data = ipa::corpus::gen_corpus(&recipe.corpus, mix_seed(recipe.seed, 1, 0))?;
            let toxic: std::collections::HashSet<u32> = recipe
                .corpus
                .toxic_alphabet
                .chars()
                .map(|c| vocab.char_id(c))
                .collect::<Result<_>>()?;
            let (reward, prompts) = match recipe.task {
                Task::ForbiddenToken => (
                    CompositeReward::new(vec![toxicity_reward_spec(vocab.clone(), toxic)])?,
                    prefix_prompts(&data.train, recipe.train_prompts, recipe.eval.prompt_len),
                ),
                Task::OrderedKeywords => {
                    let instances = ipa::corpus::keyword_instances(
                        &vocab,
                        recipe.train_prompts,
                        recipe.eval.keywords,
                        mix_seed(recipe.seed, 8, 0),
                    )?;
                    (
                        CompositeReward::new(vec![
                            coverage_reward_spec(vocab.clone()),
                            fluency_reward_spec(std::sync::Arc::new(training_base.clone())),
                        ])?,
                        instances.into_iter().map(|i| i.prompt).collect(),
                    )
                }
            };
            let adapter_cfg = ipa::lm::LmConfig {
                vocab_size: vocab.len(),
                ..recipe.adapter.clone()
            };
            let adapter = Policy::new(
                adapter_cfg,
                vocab.clone(),
                Role::Adapter,
                mix_seed(recipe.seed, 4, 0),
            )?;
            let mut cfg = recipe.train.clone();
            cfg.seed = mix_seed(recipe.seed, 6, 0);
            let reward_fn = move |p: &[u32], o: &[u32]| reward.eval(p, o);
            let (adapter, log) = train(&training_base, adapter, &reward_fn, &prompts, &cfg)?;
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("train_log.jsonl"), log.to_jsonl(&digest))?;
            let control = match cfg.algorithm {
                Algorithm::Quark => Some(vocab.control_token(cfg.quantile_count - 1)?),
                Algorithm::Ppo => None,
            };
            let (_, manifest) = ipa::tailor::assemble_variant(
                recipe.variant,
                &training_base,
                None,
                &adapter,
                control,
            )?;
            let path = common.out.join("adapter.ckpt");
            save_checkpoint(&adapter, &path, Some(&manifest), Some(&digest))?;
            let final_reward = log.rounds.last().map(|r| r.mean_reward).unwrap_or(f64::NAN);
            println!(
                "adapter trained ({} rounds, final mean reward {final_reward:.3}) -> {}",
                log.rounds.len(),
                path.display()
            );
            Ok(0)
        }
        Command::Generate {
            common,
            base,
            adapter,
            prompt,
            n,
        } => {
            let recipe = load_recipe(&common)?;
            let (base, _) = load_checkpoint(&base)?;
            let base = base.frozen();
            let prompt_ids = base.vocab.encode_prompt(&prompt)?;
            let seed0 = common.seed.unwrap_or(recipe.seed);
            let adapter_loaded = match &adapter {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            for i in 0..n {
                let spec = recipe
                    .eval
                    .decoder
                    .clone()
                    .with_seed(mix_seed(seed0, 0x9E, i as u64));
                let out = match &adapter_loaded {
                    Some((adapter, manifest)) => {
                        let control = manifest.as_ref().and_then(|m| m.control_token);
                        let tailored =
                            TailoredPolicy::new(&base, adapter)?.with_control(control)?;
                        sample_sequence(&tailored, &prompt_ids, &spec)?
                    }
                    None => {
                        let sampler = PolicySampler { policy: &base };
                        sample_sequence(&sampler, &prompt_ids, &spec)?
                    }
                };
                println!("{}{}", prompt, base.vocab.decode(&out));
            }
            Ok(0)
        }
        Command::Eval {
            common,
            base,
            adapter,
        } => {
            let recipe = load_recipe(&common)?;
            let (base, _) = load_checkpoint(&base)?;
            let base = base.frozen();
            let adapter_loaded = match &adapter {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let pair = adapter_loaded
                .as_ref()
                .map(|(a, m)| (a, m.as_ref().and_then(|m| m.control_token)));
            let report = evaluate_pair(&recipe, &base, pair)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("report.json");
            report.save(&path)?;
            for (k, v) in &report.metrics {
                println!("{k} = {v:.6}");
            }
            println!("report -> {}", path.display());
            Ok(0)
        }
        Command::Compare {
            report_a,
            report_b,
            config,
            out,
        } => {
            let a = MetricReport::load(&report_a)?;
            let b = MetricReport::load(&report_b)?;
            let diff = compare_report(&a, &b)?;
            print!("{}", render_diff(&diff));
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&diff)?)?;
            }
            let tolerances = match config {
                Some(path) => tolerances_from_ini(&Ini::load(&path)?)?,
                None => Vec::new(),
            };
            let regs = regressions(&diff, &tolerances);
            if regs.is_empty() {
                Ok(0)
            } else {
                eprintln!("regressions: {}", regs.join(", "));
                Ok(4)
            }
        }
        Command::RunRecipe { common, variant } => {
            let mut recipe = load_recipe(&common)?;
            if let Some(v) = variant {
                recipe.variant = IpaVariant::from_str(&v)?;
            }
            let artifacts = run_recipe(&recipe, &common.out)?;
            for (k, v) in &artifacts.report.metrics {
                println!("{k} = {v:.6}");
            }
            println!("report -> {}", common.out.join("report.json").display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
