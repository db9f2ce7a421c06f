//! Reward-quantile conditioned training: maximize the fused policy's
//! likelihood of pooled rollouts under their bin's control token, with a KL
//! penalty toward the frozen base.

use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmVars};
use crate::rl::Rollout;
use crate::tape::{Tape, Var};
use crate::tensor::Element;
use crate::vocab::Vocab;

/// Summed per-token loss for one binned rollout:
/// `-sum_t log p_fused(y_t | ctrl_bin, x, y_<t) + beta * sum_t KL_t`.
pub fn item_loss_on_tape<E: Element>(
    tape: &mut Tape<E>,
    adapter_vars: &LmVars,
    adapter_cfg: &LmConfig,
    vocab: &Vocab,
    rollout: &Rollout,
    beta: f64,
) -> Result<(Var, usize)> {
    let bin = rollout
        .bin
        .ok_or_else(|| Error::State("rollout has no quantile bin".into()))?;
    let ctrl = vocab.control_token(bin)?;
    if rollout.base_rows.len() != rollout.output.len() {
        return Err(Error::State("rollout base rows out of sync with output".into()));
    }
    let mut ctx = Vec::with_capacity(rollout.prompt.len() + rollout.output.len() + 1);
    ctx.push(ctrl);
    ctx.extend_from_slice(&rollout.prompt);
    ctx.extend_from_slice(&rollout.output);
    let (log_t, base_const) =
        crate::rl::fused_log_rows(tape, adapter_vars, adapter_cfg, vocab, &ctx, &rollout.base_rows)?;

    let targets: Vec<usize> = rollout.output.iter().map(|&t| t as usize).collect();
    let picked = tape.take_per_row(log_t, &targets)?;
    let lp_sum = tape.sum_all(picked)?;
    let nll = tape.scale(lp_sum, -1.0)?;
    let loss = if beta != 0.0 {
        let probs = tape.softmax(log_t)?;
        let diff = tape.sub(log_t, base_const)?;
        let prod = tape.mul(probs, diff)?;
        let per_step = tape.row_sum(prod)?;
        let kl_sum = tape.sum_all(per_step)?;
        let weighted = tape.scale(kl_sum, beta)?;
        tape.add(nll, weighted)?
    } else {
        nll
    };
    Ok((loss, rollout.output.len()))
}

/// Mean per-token Quark loss over a batch, on a caller-provided tape (used
/// by training in f32 and by gradient checks in f64).
pub fn loss_graph<E: Element>(
    tape: &mut Tape<E>,
    adapter_vars: &LmVars,
    adapter_cfg: &LmConfig,
    vocab: &Vocab,
    batch: &[&Rollout],
    beta: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut tokens = 0usize;
    for r in batch {
        if r.output.is_empty() {
            continue;
        }
        let (loss, n) = item_loss_on_tape(tape, adapter_vars, adapter_cfg, vocab, r, beta)?;
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
    use crate::lm::{register_params, Policy, Role};
    use crate::rl::{collect_rollouts, quark_loss};
    use crate::tailor::TailoredPolicy;
    use crate::vocab::Vocab;

    fn setup() -> (Policy, Policy) {
        let vocab = Vocab::from_alphabet("abcd", 2).unwrap();
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

    fn sample_binned(base: &Policy, adapter: &Policy, bin: usize) -> Vec<Rollout> {
        let tailored = TailoredPolicy::new(base, adapter).unwrap();
        let prompts = vec![base.vocab.encode_prompt("ab").unwrap()];
        let mut rollouts =
            collect_rollouts(&tailored, &prompts, 2, &DecoderSpec::nucleus(0.9, 6, 3), false)
                .unwrap();
        for r in &mut rollouts {
            r.bin = Some(bin);
        }
        rollouts
    }

    #[test]
    fn beta_zero_reduces_to_conditioned_nll() {
        let (base, adapter) = setup();
        let rollouts = sample_binned(&base, &adapter, 1);
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let out = quark_loss(&base, &adapter, &refs, 0.0).unwrap();
        // recompute the NLL by scoring each rollout under the control-conditioned
        // fused policy
        let mut expect = 0.0;
        let mut tokens = 0usize;
        for r in &rollouts {
            let ctrl = base.vocab.control_token(1).unwrap();
            let tp = TailoredPolicy::new(&base, &adapter)
                .unwrap()
                .with_control(Some(ctrl))
                .unwrap();
            expect -= tp.sequence_logprob(&r.prompt, &r.output).unwrap();
            tokens += r.output.len();
        }
        expect /= tokens as f64;
        assert!((out.loss - expect).abs() < 1e-4, "{} vs {}", out.loss, expect);
    }

    #[test]
    fn uniform_adapter_has_negligible_kl_term() {
        let (base, adapter) = setup();
        let adapter = adapter.zeroed();
        let rollouts = sample_binned(&base, &adapter, 0);
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let without = quark_loss(&base, &adapter, &refs, 0.0).unwrap().loss;
        let with = quark_loss(&base, &adapter, &refs, 0.05).unwrap().loss;
        assert!((with - without).abs() < 1e-6, "KL term should vanish at uniform adapter");
    }

    #[test]
    fn gradient_map_covers_adapter_only() {
        let (base, adapter) = setup();
        let rollouts = sample_binned(&base, &adapter, 1);
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let out = quark_loss(&base, &adapter, &refs, 0.05).unwrap();
        let adapter_names: std::collections::HashSet<String> = adapter
            .params
            .named()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        assert_eq!(out.grads.len(), adapter_names.len());
        for (name, _) in &out.grads {
            assert!(adapter_names.contains(name));
        }
    }

    #[test]
    fn missing_bin_is_a_state_error() {
        let (base, adapter) = setup();
        let mut rollouts = sample_binned(&base, &adapter, 0);
        rollouts[0].bin = None;
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        assert!(matches!(
            quark_loss(&base, &adapter, &refs, 0.05),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn loss_graph_matches_itemized_training_path() {
        let (base, adapter) = setup();
        let rollouts = sample_binned(&base, &adapter, 1);
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let out = quark_loss(&base, &adapter, &refs, 0.05).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = register_params(&mut tape, &adapter.params, true);
        let loss =
            loss_graph(&mut tape, &vars, &adapter.cfg, &base.vocab, &refs, 0.05).unwrap();
        let single_tape = tape.value(loss).scalar_value() as f64;
        assert!((single_tape - out.loss).abs() < 1e-5);
    }
}
