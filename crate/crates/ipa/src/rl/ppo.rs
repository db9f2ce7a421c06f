//! Clipped-surrogate policy gradient over the fused policy, with KL-shaped
//! returns whitened per batch in place of a learned critic.

use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmVars};
use crate::rl::Rollout;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::vocab::Vocab;

const WHITEN_SIGMA_FLOOR: f64 = 1e-6;

/// Shaped return per token: `G_t = R(y) - beta * sum_{s >= t} KL_s`, then
/// whitened to zero mean / unit variance across the whole batch. A batch
/// with a single token keeps its raw return (whitening a singleton would
/// erase the learning signal entirely).
pub fn shaped_whitened_advantages(batch: &[&Rollout], beta: f64) -> Vec<Vec<f64>> {
    let mut per_rollout: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    for r in batch {
        let n = r.output.len();
        let mut g = vec![0.0; n];
        let mut suffix = 0.0;
        for t in (0..n).rev() {
            suffix += r.step_kls.get(t).copied().unwrap_or(0.0);
            g[t] = r.reward - beta * suffix;
        }
        per_rollout.push(g);
    }
    let flat: Vec<f64> = per_rollout.iter().flatten().copied().collect();
    if flat.len() < 2 {
        return per_rollout;
    }
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let var = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / flat.len() as f64;
    let sigma = var.sqrt().max(WHITEN_SIGMA_FLOOR);
    for g in &mut per_rollout {
        for v in g.iter_mut() {
            *v = (*v - mean) / sigma;
        }
    }
    per_rollout
}

/// Summed per-token clipped-surrogate loss for one rollout:
/// `-sum_t min(rho_t * A_t, clip(rho_t, 1-eps, 1+eps) * A_t)` with
/// `rho_t = exp(new_logp_t - old_logp_t)`.
pub fn item_loss_on_tape<E: Element>(
    tape: &mut Tape<E>,
    adapter_vars: &LmVars,
    adapter_cfg: &LmConfig,
    vocab: &Vocab,
    rollout: &Rollout,
    advantages: &[f64],
    clip_ratio: f64,
) -> Result<(Var, usize)> {
    let n = rollout.output.len();
    if rollout.tailored_logps.len() != n {
        return Err(Error::State(
            "rollout is missing collection-time tailored log-probs".into(),
        ));
    }
    if advantages.len() != n {
        return Err(Error::State("advantage length out of sync with output".into()));
    }
    if rollout.base_rows.len() != n {
        return Err(Error::State("rollout base rows out of sync with output".into()));
    }
    let mut ctx = Vec::with_capacity(rollout.prompt.len() + n);
    ctx.extend_from_slice(&rollout.prompt);
    ctx.extend_from_slice(&rollout.output);
    let (log_t, _) =
        crate::rl::fused_log_rows(tape, adapter_vars, adapter_cfg, vocab, &ctx, &rollout.base_rows)?;
    let targets: Vec<usize> = rollout.output.iter().map(|&t| t as usize).collect();
    let new_lp = tape.take_per_row(log_t, &targets)?;
    let old = tape.constant(Tensor::from_vec(
        vec![n],
        rollout.tailored_logps.iter().map(|&v| E::from_f64(v)).collect(),
    )?);
    let diff = tape.sub(new_lp, old)?;
    let ratio = tape.exp(diff)?;
    let adv = tape.constant(Tensor::from_vec(
        vec![n],
        advantages.iter().map(|&v| E::from_f64(v)).collect(),
    )?);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)?;
    let clipped = tape.mul(clipped_ratio, adv)?;
    let objective = tape.min2(unclipped, clipped)?;
    let total = tape.sum_all(objective)?;
    let loss = tape.scale(total, -1.0)?;
    Ok((loss, n))
}

/// Mean per-token PPO loss over a batch on a caller-provided tape.
/// Advantages are computed from the batch's stored rewards and step KLs.
pub fn loss_graph<E: Element>(
    tape: &mut Tape<E>,
    adapter_vars: &LmVars,
    adapter_cfg: &LmConfig,
    vocab: &Vocab,
    batch: &[&Rollout],
    beta: f64,
    clip_ratio: f64,
) -> Result<Var> {
    let advantages = shaped_whitened_advantages(batch, beta);
    let mut total: Option<Var> = None;
    let mut tokens = 0usize;
    for (r, adv) in batch.iter().zip(&advantages) {
        if r.output.is_empty() {
            continue;
        }
        let (loss, n) =
            item_loss_on_tape(tape, adapter_vars, adapter_cfg, vocab, r, adv, clip_ratio)?;
        tokens += n;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::State("batch contains no tokens".into()))?;
    tape.scale(total, 1.0 / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::DecoderSpec;
    use crate::lm::{Policy, Role};
    use crate::rl::{collect_rollouts, ppo_loss, score_rollouts};
    use crate::tailor::TailoredPolicy;
    use crate::vocab::Vocab;

    fn setup() -> (Policy, Policy) {
        let vocab = Vocab::from_alphabet("abcd", 0).unwrap();
        let cfg = LmConfig {
            vocab_size: vocab.len(),
            dim: 8,
            heads: 2,
            layers: 1,
            context: 16,
            ff_mult: 4,
            tie_embeddings: false,
        };
        let base = Policy::new(cfg.clone(), vocab.clone(), Role::Base, 0)
            .unwrap()
            .frozen();
        let adapter = Policy::new(cfg, vocab, Role::Adapter, 1).unwrap();
        (base, adapter)
    }

    fn sample(base: &Policy, adapter: &Policy, reward: f64) -> Vec<Rollout> {
        let tailored = TailoredPolicy::new(base, adapter).unwrap();
        let prompts = vec![base.vocab.encode_prompt("ab").unwrap()];
        let mut rollouts =
            collect_rollouts(&tailored, &prompts, 3, &DecoderSpec::nucleus(0.9, 5, 7), false)
                .unwrap();
        score_rollouts(&mut rollouts, &|_, _| Ok(reward)).unwrap();
        rollouts
    }

    #[test]
    fn on_policy_first_step_has_unit_ratios() {
        let (base, adapter) = setup();
        let rollouts = sample(&base, &adapter, 0.7);
        // distinct rewards so whitening leaves nonzero advantages
        let mut rollouts = rollouts;
        for (i, r) in rollouts.iter_mut().enumerate() {
            r.reward = i as f64;
        }
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let advantages = shaped_whitened_advantages(&refs, 0.0);
        // same params as collection: ratios are 1, so the loss equals the
        // unclipped surrogate -mean(A)
        let out = ppo_loss(&base, &adapter, &refs, 0.0, 0.2).unwrap();
        let flat: Vec<f64> = advantages.into_iter().flatten().collect();
        let expect = -flat.iter().sum::<f64>() / flat.len() as f64;
        assert!((out.loss - expect).abs() < 1e-4, "{} vs {expect}", out.loss);
    }

    #[test]
    fn constant_rewards_give_zero_loss_and_gradients() {
        let (base, adapter) = setup();
        let rollouts = sample(&base, &adapter, 0.5);
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let out = ppo_loss(&base, &adapter, &refs, 0.0, 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
        for (_, g) in &out.grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn whitening_skips_singleton_batches() {
        let (base, adapter) = setup();
        let mut rollouts = sample(&base, &adapter, 1.0);
        rollouts.truncate(1);
        rollouts[0].output.truncate(1);
        rollouts[0].tailored_logps.truncate(1);
        rollouts[0].base_logps.truncate(1);
        rollouts[0].step_kls.truncate(1);
        rollouts[0].base_rows.truncate(1);
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let adv = shaped_whitened_advantages(&refs, 0.0);
        assert_eq!(adv, vec![vec![1.0]]);
    }

    #[test]
    fn single_step_gradient_raises_rewarded_token_logprob() {
        // R = 1, beta = 0, one token: the loss gradient should point toward
        // increasing that token's fused log-prob. Verify by taking one tiny
        // gradient step and re-scoring.
        let (base, adapter) = setup();
        let mut rollouts = sample(&base, &adapter, 1.0);
        rollouts.truncate(1);
        let r = &mut rollouts[0];
        r.output.truncate(1);
        r.tailored_logps.truncate(1);
        r.base_logps.truncate(1);
        r.step_kls.truncate(1);
        r.base_rows.truncate(1);
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let out = ppo_loss(&base, &adapter, &refs, 0.0, 0.2).unwrap();
        let mut nudged = adapter.clone();
        let step = 1e-3f32;
        for ((_, g), (_, p)) in out.grads.iter().zip(nudged.params.named_mut()) {
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= step * gv;
            }
        }
        let before = TailoredPolicy::new(&base, &adapter)
            .unwrap()
            .sequence_logprob(&rollouts[0].prompt, &rollouts[0].output)
            .unwrap();
        let after = TailoredPolicy::new(&base, &nudged)
            .unwrap()
            .sequence_logprob(&rollouts[0].prompt, &rollouts[0].output)
            .unwrap();
        assert!(
            after > before,
            "descending the loss should raise the token log-prob ({before} -> {after})"
        );
    }

    #[test]
    fn missing_old_logps_is_a_state_error() {
        let (base, adapter) = setup();
        let mut rollouts = sample(&base, &adapter, 1.0);
        for (i, r) in rollouts.iter_mut().enumerate() {
            r.reward = i as f64;
        }
        rollouts[0].tailored_logps.clear();
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        assert!(matches!(
            ppo_loss(&base, &adapter, &refs, 0.0, 0.2),
            Err(Error::State(_))
        ));
    }
}
