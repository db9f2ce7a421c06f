//! The tailored policy: a per-step normalized product of a frozen base
//! policy's next-token distribution and a trainable adapter's.
//!
//! Control tokens condition the adapter context only; their probability mass
//! is zeroed out of the adapter distribution before fusion so they can never
//! be generated, and the base context never contains them.

use serde::{Deserialize, Serialize};

use crate::checkpoint::VariantManifest;
use crate::decode::NextTokenPolicy;
use crate::dist::{product_of_experts, Distribution, DEGENERATE_Z};
use crate::error::{Error, Result};
use crate::lm::{Policy, Role};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpaVariant {
    /// Adapter trained against the deployment base itself.
    Direct,
    /// Adapter trained against a different (smaller) base, then deployed
    /// over this one.
    Transfer,
    /// Adapter trained against a distilled approximate policy.
    Distilled,
}

impl IpaVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            IpaVariant::Direct => "direct",
            IpaVariant::Transfer => "transfer",
            IpaVariant::Distilled => "distilled",
        }
    }
}

impl std::str::FromStr for IpaVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<IpaVariant> {
        match s {
            "direct" => Ok(IpaVariant::Direct),
            "transfer" => Ok(IpaVariant::Transfer),
            "distilled" => Ok(IpaVariant::Distilled),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Frozen base + trainable adapter fused per step.
#[derive(Clone)]
pub struct TailoredPolicy<'a> {
    pub base: &'a Policy,
    pub adapter: &'a Policy,
    /// Prepended to the adapter context only (reward-quantile conditioning).
    pub control_token: Option<u32>,
    pub base_temperature: f64,
    pub adapter_temperature: f64,
}

impl<'a> TailoredPolicy<'a> {
    pub fn new(base: &'a Policy, adapter: &'a Policy) -> Result<TailoredPolicy<'a>> {
        if !base.frozen {
            return Err(Error::State("tailored policy requires a frozen base".into()));
        }
        if base.vocab != adapter.vocab {
            return Err(Error::ConfigMismatch(
                "base and adapter must share a vocabulary".into(),
            ));
        }
        Ok(TailoredPolicy {
            base,
            adapter,
            control_token: None,
            base_temperature: 1.0,
            adapter_temperature: 1.0,
        })
    }

    pub fn with_control(mut self, control_token: Option<u32>) -> Result<TailoredPolicy<'a>> {
        if let Some(t) = control_token {
            if !self.base.vocab.is_control(t) {
                return Err(Error::Config(format!("token {t} is not a control token")));
            }
        }
        self.control_token = control_token;
        Ok(self)
    }

    fn control_ids(&self) -> Vec<u32> {
        (0..self.base.vocab.control_count())
            .map(|k| self.base.vocab.control_token(k).expect("in range"))
            .collect()
    }

    pub fn adapter_context(&self, prompt: &[u32], generated: &[u32]) -> Vec<u32> {
        let mut ctx = Vec::with_capacity(prompt.len() + generated.len() + 1);
        if let Some(c) = self.control_token {
            ctx.push(c);
        }
        ctx.extend_from_slice(prompt);
        ctx.extend_from_slice(generated);
        ctx
    }

    /// Base distribution, control-masked adapter distribution, and their
    /// normalized product for the next position.
    pub fn next_dist_detail(
        &self,
        prompt: &[u32],
        generated: &[u32],
        temperature: f64,
    ) -> Result<(Distribution, Distribution, Distribution)> {
        let mut base_ctx = prompt.to_vec();
        base_ctx.extend_from_slice(generated);
        let base_dist = self
            .base
            .next_token_dist(&base_ctx, self.base_temperature * temperature)?;
        let adapter_ctx = self.adapter_context(prompt, generated);
        let raw = self
            .adapter
            .next_token_dist(&adapter_ctx, self.adapter_temperature * temperature)?;
        let adapter_dist = raw.mask_renormalize(&self.control_ids())?;
        let fused = product_of_experts(&base_dist, &adapter_dist)?;
        Ok((base_dist, adapter_dist, fused))
    }

    /// Sum over steps of log p(y_t | ...) under the per-step fused policy,
    /// each step with its own normalizer. Empty output scores 0.
    pub fn sequence_logprob(&self, prompt: &[u32], output: &[u32]) -> Result<f64> {
        if output.is_empty() {
            return Ok(0.0);
        }
        if prompt.is_empty() {
            return Err(Error::Shape("prompt must be nonempty".into()));
        }
        let mut base_ctx = prompt.to_vec();
        base_ctx.extend_from_slice(output);
        let base_rows = self.base.log_rows(&base_ctx, self.base_temperature)?;
        let adapter_ctx = self.adapter_context(prompt, output);
        let adapter_rows = self
            .adapter
            .log_rows(&adapter_ctx, self.adapter_temperature)?;
        let off = usize::from(self.control_token.is_some());
        let controls: Vec<usize> = self.control_ids().iter().map(|&c| c as usize).collect();
        let vocab_len = self.base.vocab.len();

        let mut total = 0.0;
        for (t, &tok) in output.iter().enumerate() {
            let b = &base_rows[prompt.len() + t - 1];
            let a = &adapter_rows[off + prompt.len() + t - 1];
            // renormalize the adapter row over non-control ids, in log space
            let mut a_max = f64::NEG_INFINITY;
            for i in 0..vocab_len {
                if !controls.contains(&i) && a[i] > a_max {
                    a_max = a[i];
                }
            }
            let mut a_sum = 0.0;
            for i in 0..vocab_len {
                if !controls.contains(&i) {
                    a_sum += (a[i] - a_max).exp();
                }
            }
            let a_lse = a_max + a_sum.ln();
            let fused_log = |i: usize| -> f64 {
                if controls.contains(&i) {
                    f64::NEG_INFINITY
                } else {
                    b[i] + a[i] - a_lse
                }
            };
            let mut s_max = f64::NEG_INFINITY;
            for i in 0..vocab_len {
                let s = fused_log(i);
                if s > s_max {
                    s_max = s;
                }
            }
            if s_max == f64::NEG_INFINITY {
                return Err(Error::DegenerateProduct(0.0));
            }
            let mut z = 0.0;
            for i in 0..vocab_len {
                z += (fused_log(i) - s_max).exp();
            }
            let lse = s_max + z.ln();
            if lse < DEGENERATE_Z.ln() {
                return Err(Error::DegenerateProduct(lse.exp()));
            }
            total += fused_log(tok as usize) - lse;
        }
        Ok(total)
    }
}

impl NextTokenPolicy for TailoredPolicy<'_> {
    fn next_dist(
        &self,
        prompt: &[u32],
        generated: &[u32],
        temperature: f64,
    ) -> Result<Distribution> {
        let (_, _, fused) = self.next_dist_detail(prompt, generated, temperature)?;
        Ok(fused)
    }

    fn vocab(&self) -> &Vocab {
        &self.base.vocab
    }
}

/// Decoding view of a single policy; zeroes control-token mass so control
/// ids are inputs, never outputs.
pub struct PolicySampler<'a> {
    pub policy: &'a Policy,
}

impl NextTokenPolicy for PolicySampler<'_> {
    fn next_dist(
        &self,
        prompt: &[u32],
        generated: &[u32],
        temperature: f64,
    ) -> Result<Distribution> {
        let mut ctx = prompt.to_vec();
        ctx.extend_from_slice(generated);
        let dist = self.policy.next_token_dist(&ctx, temperature)?;
        let controls: Vec<u32> = (0..self.policy.vocab.control_count())
            .map(|k| self.policy.vocab.control_token(k).expect("in range"))
            .collect();
        dist.mask_renormalize(&controls)
    }

    fn vocab(&self) -> &Vocab {
        &self.policy.vocab
    }
}

/// Wire a deployment base and a trained adapter into a tailored policy,
/// recording provenance for the three IPA variants.
pub fn assemble_variant<'a>(
    variant: IpaVariant,
    deployment_base: &'a Policy,
    training_base: Option<&Policy>,
    adapter: &'a Policy,
    control_token: Option<u32>,
) -> Result<(TailoredPolicy<'a>, VariantManifest)> {
    let training = training_base.unwrap_or(deployment_base);
    match variant {
        IpaVariant::Direct => {}
        IpaVariant::Transfer => {
            if training.digest() == deployment_base.digest() {
                return Err(Error::ConfigMismatch(
                    "transfer variant requires a training base different from deployment".into(),
                ));
            }
        }
        IpaVariant::Distilled => {
            if training.role != Role::Approximate {
                return Err(Error::ConfigMismatch(
                    "distilled variant requires a training base with role = approximate".into(),
                ));
            }
        }
    }
    if training.vocab != adapter.vocab {
        return Err(Error::ConfigMismatch(
            "training base and adapter must share a vocabulary".into(),
        ));
    }
    let policy = TailoredPolicy::new(deployment_base, adapter)?.with_control(control_token)?;
    let manifest = VariantManifest {
        variant: variant.as_str().to_string(),
        base_digest: deployment_base.digest(),
        training_base_digest: training.digest(),
        adapter_digest: adapter.digest(),
        control_token,
    };
    Ok((policy, manifest))
}
