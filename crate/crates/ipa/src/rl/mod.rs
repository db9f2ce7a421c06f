//! RL optimization of the adapter: reward-quantile conditioning (Quark-style)
//! and clipped policy gradient (PPO-style) behind one training loop. Only
//! adapter parameters ever receive gradients; the base stays frozen.

pub mod ppo;
pub mod quark;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::decode::{apply_filter, sample_token, DecoderKind, DecoderSpec};
use crate::dist::kl_divergence;
use crate::error::{Error, Result};
use crate::lm::{apply_grad_step, warmup_lr, ItemGrad, Policy};
use crate::tailor::TailoredPolicy;
use crate::tensor::Tensor;
use crate::vocab::EOS;

/// Full-distribution KL between a tailored step distribution and the base's.
pub use crate::dist::kl_divergence as kl_per_token;

/// Reward functions map (prompt, output) to a finite scalar and must be
/// total, including for empty outputs.
pub type RewardFn<'a> = dyn Fn(&[u32], &[u32]) -> Result<f64> + Sync + 'a;

/// One sampled trajectory with everything the losses need later.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub output: Vec<u32>,
    /// log p_fused(y_t | .) recorded at sampling time (pre-filter).
    pub tailored_logps: Vec<f64>,
    /// log p_base(y_t | .) at each step.
    pub base_logps: Vec<f64>,
    /// KL(fused || base) of the full step distributions.
    pub step_kls: Vec<f64>,
    /// Teacher-forced base log rows per step (cached; the base is frozen).
    pub base_rows: Vec<Vec<f64>>,
    pub reward: f64,
    pub seed: u64,
    pub decoder: DecoderSpec,
    pub bin: Option<usize>,
}

/// Base log-distribution rows aligned with each output step, restricted to
/// the non-control support the fused policy can actually reach (control mass
/// is additively masked out and the row renormalized). The fused policy is
/// invariant to this per-row shift; the KL penalty is measured against it.
pub fn compute_base_rows(base: &Policy, prompt: &[u32], output: &[u32]) -> Result<Vec<Vec<f64>>> {
    if output.is_empty() {
        return Ok(Vec::new());
    }
    let mut ctx = prompt.to_vec();
    ctx.extend_from_slice(output);
    let rows = base.log_rows(&ctx, 1.0)?;
    let controls: Vec<usize> = (0..base.vocab.control_count())
        .map(|k| base.vocab.control_token(k).map(|c| c as usize))
        .collect::<Result<_>>()?;
    let masked = rows[prompt.len() - 1..prompt.len() + output.len() - 1]
        .iter()
        .map(|row| {
            let shifted: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(i, &v)| if controls.contains(&i) { v - 1e9 } else { v })
                .collect();
            let mx = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + shifted.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            shifted.into_iter().map(|v| v - lse).collect()
        })
        .collect();
    Ok(masked)
}

/// Growable FIFO store of scored rollouts with quantile-bin annotations.
pub struct DataPool {
    rollouts: VecDeque<Rollout>,
    capacity: usize,
}

pub const DEFAULT_POOL_CAPACITY: usize = 10_000;

impl DataPool {
    pub fn new(capacity: usize) -> DataPool {
        DataPool {
            rollouts: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn get(&self, i: usize) -> &Rollout {
        &self.rollouts[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rollout> {
        self.rollouts.iter()
    }

    pub fn extend(&mut self, items: Vec<Rollout>) {
        for r in items {
            if self.rollouts.len() == self.capacity {
                self.rollouts.pop_front();
            }
            self.rollouts.push_back(r);
        }
    }

    /// Sort by (reward, insertion order) and split into `k` contiguous bins
    /// of near-equal size; bin `k-1` holds the highest rewards. With fewer
    /// rollouts than bins, the top bins get one rollout each (`underfilled`).
    /// Returns (histogram, underfilled).
    pub fn partition(&mut self, k: usize) -> Result<(Vec<usize>, bool)> {
        if self.rollouts.is_empty() {
            return Err(Error::State("cannot partition an empty pool".into()));
        }
        if k < 2 {
            return Err(Error::Config(format!("quantile count {k} must be >= 2")));
        }
        let n = self.rollouts.len();
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort: ties keep insertion order
        order.sort_by(|&a, &b| {
            self.rollouts[a]
                .reward
                .partial_cmp(&self.rollouts[b].reward)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut hist = vec![0usize; k];
        if n < k {
            // one rollout per top bin so the best bin is always populated
            for (rank, &idx) in order.iter().enumerate() {
                let bin = k - n + rank;
                self.rollouts[idx].bin = Some(bin);
                hist[bin] += 1;
            }
            return Ok((hist, true));
        }
        let base = n / k;
        let rem = n % k;
        let mut cursor = 0usize;
        for bin in 0..k {
            // larger bins sit at the high-reward end
            let size = base + usize::from(bin >= k - rem);
            for _ in 0..size {
                let idx = order[cursor];
                self.rollouts[idx].bin = Some(bin);
                hist[bin] += 1;
                cursor += 1;
            }
        }
        Ok((hist, false))
    }
}

use crate::par::mix_seed;

fn sample_with_record(
    policy: &TailoredPolicy,
    prompt: &[u32],
    spec: &DecoderSpec,
    seed: u64,
) -> Result<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut output = Vec::new();
    let mut tailored_logps = Vec::new();
    let mut base_logps = Vec::new();
    let mut step_kls = Vec::new();
    let controls: Vec<u32> = (0..policy.base.vocab.control_count())
        .map(|k| policy.base.vocab.control_token(k))
        .collect::<Result<_>>()?;
    for _ in 0..spec.max_length {
        let (base_dist, _, fused) = policy.next_dist_detail(prompt, &output, spec.temperature)?;
        let filtered = apply_filter(spec, &fused);
        let tok = match spec.kind {
            DecoderKind::Greedy => filtered.argmax() as u32,
            _ => sample_token(&filtered, &mut rng),
        };
        tailored_logps.push(fused.get(tok as usize).ln());
        base_logps.push(base_dist.get(tok as usize).ln());
        // KL against the base restricted to the reachable support
        let base_ref = base_dist.mask_renormalize(&controls)?;
        step_kls.push(kl_divergence(&fused, &base_ref)?);
        output.push(tok);
        if tok == EOS {
            break;
        }
    }
    let base_rows = compute_base_rows(policy.base, prompt, &output)?;
    Ok(Rollout {
        prompt: prompt.to_vec(),
        output,
        tailored_logps,
        base_logps,
        step_kls,
        base_rows,
        reward: 0.0,
        seed,
        decoder: spec.clone(),
        bin: None,
    })
}

/// Sample `n_per_prompt` rollouts per prompt, recording per-step tailored and
/// base log-probs. With `condition_on_best_bin`, the adapter context is
/// conditioned on the highest-reward control token (Quark exploration).
pub fn collect_rollouts(
    policy: &TailoredPolicy,
    prompts: &[Vec<u32>],
    n_per_prompt: usize,
    decoder: &DecoderSpec,
    condition_on_best_bin: bool,
) -> Result<Vec<Rollout>> {
    if prompts.is_empty() {
        return Err(Error::Config("no prompts to explore from".into()));
    }
    decoder.validate()?;
    let view = if condition_on_best_bin {
        let k = policy.base.vocab.control_count();
        if k == 0 {
            return Err(Error::State(
                "best-bin conditioning needs control-token slots".into(),
            ));
        }
        policy
            .clone()
            .with_control(Some(policy.base.vocab.control_token(k - 1)?))?
    } else {
        policy.clone()
    };
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..n_per_prompt).map(move |s| (p, s)))
        .collect();
    crate::par::try_map(&jobs, |_, &(p, s)| {
        let seed = mix_seed(decoder.seed, p as u64, s as u64);
        sample_with_record(&view, &prompts[p], &decoder.clone().with_seed(seed), seed)
    })
}

/// Score rollouts in place; rewards must come back finite.
pub fn score_rollouts(rollouts: &mut [Rollout], reward_fn: &RewardFn<'_>) -> Result<()> {
    for r in rollouts.iter_mut() {
        let v = reward_fn(&r.prompt, &r.output).map_err(|e| Error::Reward(e.to_string()))?;
        if !v.is_finite() {
            return Err(Error::Reward(format!("non-finite reward {v}")));
        }
        r.reward = v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Quark,
    Ppo,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Algorithm> {
        match s {
            "quark" => Ok(Algorithm::Quark),
            "ppo" => Ok(Algorithm::Ppo),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// KL coefficient beta.
    pub kl_coefficient: f64,
    /// Gradient steps per exploration round.
    pub exploration_frequency: usize,
    /// Quantile bin count K (Quark).
    pub quantile_count: usize,
    /// PPO clip ratio epsilon.
    pub clip_ratio: f64,
    pub rollouts_per_exploration: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub pool_capacity: usize,
    pub explore: DecoderSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Quark,
            kl_coefficient: 0.05,
            exploration_frequency: 8,
            quantile_count: 5,
            clip_ratio: 0.2,
            rollouts_per_exploration: 32,
            batch_size: 32,
            total_steps: 240,
            learning_rate: 3e-3,
            warmup_steps: 12,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            explore: DecoderSpec::nucleus(0.9, 16, 0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kl_coefficient < 0.0 {
            return Err(Error::Config("kl_coefficient must be >= 0".into()));
        }
        if self.exploration_frequency < 1 {
            return Err(Error::Config("exploration_frequency must be >= 1".into()));
        }
        if self.quantile_count < 2 {
            return Err(Error::Config("quantile_count must be >= 2".into()));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::Config("clip_ratio must lie in (0, 1)".into()));
        }
        if self.batch_size < 1 || self.rollouts_per_exploration < 1 {
            return Err(Error::Config("batch and exploration sizes must be >= 1".into()));
        }
        self.explore.validate()
    }
}

/// One record per completed exploration round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub mean_kl: f64,
    pub bin_histogram: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rounds: Vec<RoundRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// JSON-Lines rendering: a provenance header record, then one record per
    /// exploration round.
    pub fn to_jsonl(&self, recipe_digest: &str) -> String {
        let mut out = format!("{{\"recipe_digest\":{}}}\n", serde_json::json!(recipe_digest));
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Build the fused per-step log distributions `log p_fused` on the tape for
/// one rollout: adapter logits (control-masked, renormalized) plus constant
/// base log rows, re-normalized per step. Returns (log rows, base constant),
/// both `[steps, vocab]`.
pub(crate) fn fused_log_rows<E: crate::tensor::Element>(
    tape: &mut crate::tape::Tape<E>,
    vars: &crate::lm::LmVars,
    adapter_cfg: &crate::lm::LmConfig,
    vocab: &crate::vocab::Vocab,
    adapter_ctx: &[u32],
    base_rows: &[Vec<f64>],
) -> Result<(crate::tape::Var, crate::tape::Var)> {
    let n = base_rows.len();
    let v = vocab.len();
    let logits = crate::lm::logits_on_tape(tape, vars, adapter_cfg, adapter_ctx)?;
    let pstart = adapter_ctx.len() - n;
    let rows: Vec<usize> = (pstart - 1..adapter_ctx.len() - 1).collect();
    let picked = tape.gather_rows(logits, &rows)?;
    let mut mask = vec![E::ZERO; v];
    for k in 0..vocab.control_count() {
        mask[vocab.control_token(k)? as usize] = E::from_f64(-1e9);
    }
    let mask_var = tape.constant(Tensor::from_vec(vec![v], mask)?);
    let masked = tape.add_row(picked, mask_var)?;
    let a_log = tape.log_softmax(masked)?;
    let mut bdata = Vec::with_capacity(n * v);
    for row in base_rows {
        for &x in row {
            bdata.push(E::from_f64(x));
        }
    }
    let b = tape.constant(Tensor::from_vec(vec![n, v], bdata)?);
    let z = tape.add(a_log, b)?;
    let log_t = tape.log_softmax(z)?;
    Ok((log_t, b))
}

/// Ordered adapter-parameter gradients for one rollout; used by both
/// algorithms so the Adam step can average per-token across the batch.
fn item_grad(
    base: &Policy,
    adapter: &Policy,
    rollout: &Rollout,
    cfg: &TrainConfig,
    advantages: Option<&[f64]>,
) -> Result<ItemGrad> {
    let mut tape = crate::tape::Tape::<f32>::new();
    let vars = crate::lm::register_params(&mut tape, &adapter.params, true);
    let (loss, tokens) = match cfg.algorithm {
        Algorithm::Quark => quark::item_loss_on_tape(
            &mut tape,
            &vars,
            &adapter.cfg,
            &base.vocab,
            rollout,
            cfg.kl_coefficient,
        )?,
        Algorithm::Ppo => ppo::item_loss_on_tape(
            &mut tape,
            &vars,
            &adapter.cfg,
            &base.vocab,
            rollout,
            advantages.ok_or_else(|| Error::State("PPO needs advantages".into()))?,
            cfg.clip_ratio,
        )?,
    };
    let loss_sum = tape.value(loss).scalar_value() as f64;
    let grads = tape.backward(loss)?;
    let ordered = vars.ordered();
    let mut out = Vec::with_capacity(ordered.len());
    for v in ordered {
        out.push(
            grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::State("missing adapter gradient".into()))?,
        );
    }
    Ok(ItemGrad {
        loss_sum,
        tokens,
        grads: out,
    })
}

/// Mean per-token loss plus named adapter gradients (the public gradient
/// map; it never contains base parameters).
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<(String, Tensor<f32>)>,
    pub tokens: usize,
}

fn batch_loss(
    base: &Policy,
    adapter: &Policy,
    batch: &[&Rollout],
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    let advantages = match cfg.algorithm {
        Algorithm::Ppo => Some(ppo::shaped_whitened_advantages(batch, cfg.kl_coefficient)),
        Algorithm::Quark => None,
    };
    let items: Vec<&Rollout> = batch.to_vec();
    let grads = crate::par::try_map(&items, |i, r| {
        item_grad(base, adapter, r, cfg, advantages.as_ref().map(|a| a[i].as_slice()))
    })?;
    let nonempty: Vec<ItemGrad> = grads.into_iter().filter(|g| g.tokens > 0).collect();
    let total_tokens: usize = nonempty.iter().map(|g| g.tokens).sum();
    if total_tokens == 0 {
        return Err(Error::State("batch contains no tokens".into()));
    }
    let loss = nonempty.iter().map(|g| g.loss_sum).sum::<f64>() / total_tokens as f64;
    let names: Vec<String> = adapter.params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut summed: Vec<Tensor<f32>> = nonempty[0].grads.clone();
    for g in &nonempty[1..] {
        for (a, b) in summed.iter_mut().zip(&g.grads) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    let scale = 1.0 / total_tokens as f32;
    for t in &mut summed {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok(LossOutput {
        loss,
        grads: names.into_iter().zip(summed).collect(),
        tokens: total_tokens,
    })
}

/// Quark loss over a binned batch: control-conditioned NLL under the fused
/// policy plus beta * KL(fused || base), averaged per token. Gradients cover
/// adapter parameters only.
pub fn quark_loss(
    base: &Policy,
    adapter: &Policy,
    batch: &[&Rollout],
    beta: f64,
) -> Result<LossOutput> {
    let cfg = TrainConfig {
        algorithm: Algorithm::Quark,
        kl_coefficient: beta,
        ..TrainConfig::default()
    };
    batch_loss(base, adapter, batch, &cfg)
}

/// PPO clipped-surrogate loss with KL-shaped whitened returns. Gradients
/// cover adapter parameters only.
pub fn ppo_loss(
    base: &Policy,
    adapter: &Policy,
    batch: &[&Rollout],
    beta: f64,
    clip_ratio: f64,
) -> Result<LossOutput> {
    let cfg = TrainConfig {
        algorithm: Algorithm::Ppo,
        kl_coefficient: beta,
        clip_ratio,
        ..TrainConfig::default()
    };
    batch_loss(base, adapter, batch, &cfg)
}

/// The f_RL entry point: optimize the adapter of `base + adapter` against a
/// reward function, exploring every `exploration_frequency` gradient steps.
pub fn train(
    base: &Policy,
    mut adapter: Policy,
    reward_fn: &RewardFn<'_>,
    prompts: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<(Policy, TrainLog)> {
    cfg.validate()?;
    if !base.frozen {
        return Err(Error::State("train requires a frozen base policy".into()));
    }
    if adapter.frozen {
        return Err(Error::FrozenPolicy("adapter must be trainable".into()));
    }
    if base.vocab != adapter.vocab {
        return Err(Error::ConfigMismatch(
            "base and adapter must share a vocabulary".into(),
        ));
    }
    if cfg.algorithm == Algorithm::Quark && base.vocab.control_count() < cfg.quantile_count {
        return Err(Error::ConfigMismatch(format!(
            "vocab has {} control slots, quark needs {}",
            base.vocab.control_count(),
            cfg.quantile_count
        )));
    }
    if prompts.is_empty() {
        return Err(Error::Config("prompts must be nonempty".into()));
    }

    let mut log = TrainLog::default();
    if cfg.total_steps == 0 {
        return Ok((adapter, log));
    }

    let shapes: Vec<Vec<usize>> = adapter
        .params
        .named()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut adam = AdamState::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = DataPool::new(cfg.pool_capacity);
    let mut active: Vec<Rollout> = Vec::new(); // PPO on-policy set
    let mut ppo_order: Vec<usize> = Vec::new();
    let mut round = 0usize;
    let mut pending = RoundRecord {
        round: 0,
        step: 0,
        mean_reward: 0.0,
        loss: 0.0,
        mean_kl: 0.0,
        bin_histogram: Vec::new(),
        seed: 0,
    };
    let mut losses_this_round: Vec<f64> = Vec::new();

    for step in 0..cfg.total_steps {
        if step % cfg.exploration_frequency == 0 {
            if step > 0 {
                pending.loss = mean(&losses_this_round);
                log.rounds.push(pending.clone());
                losses_this_round.clear();
            }
            let round_seed = mix_seed(cfg.seed, 0xE0_u64, round as u64);
            let decoder = cfg.explore.clone().with_seed(round_seed);
            let view = TailoredPolicy::new(base, &adapter)?;
            let n_per_prompt = cfg.rollouts_per_exploration.div_ceil(prompts.len()).max(1);
            let mut rollouts = collect_rollouts(
                &view,
                prompts,
                n_per_prompt,
                &decoder,
                cfg.algorithm == Algorithm::Quark,
            )?;
            rollouts.truncate(cfg.rollouts_per_exploration);
            score_rollouts(&mut rollouts, reward_fn)?;
            pending = RoundRecord {
                round,
                step,
                mean_reward: mean(&rollouts.iter().map(|r| r.reward).collect::<Vec<_>>()),
                loss: 0.0,
                mean_kl: mean(
                    &rollouts
                        .iter()
                        .flat_map(|r| r.step_kls.iter().copied())
                        .collect::<Vec<_>>(),
                ),
                bin_histogram: Vec::new(),
                seed: round_seed,
            };
            match cfg.algorithm {
                Algorithm::Quark => {
                    pool.extend(rollouts);
                    let (hist, _underfilled) = pool.partition(cfg.quantile_count)?;
                    pending.bin_histogram = hist;
                }
                Algorithm::Ppo => {
                    active = rollouts;
                    ppo_order = (0..active.len()).collect();
                    // new minibatch order per round
                    for i in (1..ppo_order.len()).rev() {
                        let j = rng.random_range(0..=i);
                        ppo_order.swap(i, j);
                    }
                }
            }
            round += 1;
        }

        let batch: Vec<&Rollout> = match cfg.algorithm {
            Algorithm::Quark => (0..cfg.batch_size)
                .map(|_| pool.get(rng.random_range(0..pool.len())))
                .collect(),
            Algorithm::Ppo => {
                let chunks = ppo_order.len().div_ceil(cfg.batch_size).max(1);
                let which = (step % cfg.exploration_frequency) % chunks;
                ppo_order
                    .iter()
                    .skip(which * cfg.batch_size)
                    .take(cfg.batch_size)
                    .map(|&i| &active[i])
                    .collect()
            }
        };
        let items: Vec<&Rollout> = batch;
        let advantages = match cfg.algorithm {
            Algorithm::Ppo => Some(ppo::shaped_whitened_advantages(&items, cfg.kl_coefficient)),
            Algorithm::Quark => None,
        };
        let grads = crate::par::try_map(&items, |i, r| {
            item_grad(base, &adapter, r, cfg, advantages.as_ref().map(|a| a[i].as_slice()))
        })?;
        let usable: Vec<ItemGrad> = grads.into_iter().filter(|g| g.tokens > 0).collect();
        if usable.is_empty() {
            losses_this_round.push(0.0);
            continue;
        }
        let lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, step);
        let loss = apply_grad_step(&mut adapter.params, &mut adam, &usable, lr)?;
        losses_this_round.push(loss);
    }
    pending.loss = mean(&losses_this_round);
    log.rounds.push(pending);
    Ok((adapter, log))
}
