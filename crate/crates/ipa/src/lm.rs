//! Decoder-only transformer language model used for the base, adapter, and
//! approximate policies.
//!
//! The forward pass is built on the gradient tape and is generic over the
//! element type, so the same code serves f32 training and f64 shadow-mode
//! gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as RandDistribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::vocab::Vocab;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub context: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn default_ff_mult() -> usize {
    4
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.heads == 0 || self.context == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParamsOf<E: Element> {
    pub ln1_g: Tensor<E>,
    pub ln1_b: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_g: Tensor<E>,
    pub ln2_b: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParamsOf<E: Element> {
    pub tok_emb: Tensor<E>,
    pub pos_emb: Tensor<E>,
    pub blocks: Vec<BlockParamsOf<E>>,
    pub lnf_g: Tensor<E>,
    pub lnf_b: Tensor<E>,
    /// Absent when embeddings are tied to the output projection.
    pub out_w: Option<Tensor<E>>,
}

pub type LmParams = LmParamsOf<f32>;

macro_rules! block_fields {
    () => {
        [
            "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b",
            "w1", "b1", "w2", "b2",
        ]
    };
}

impl<E: Element> BlockParamsOf<E> {
    fn field(&self, name: &str) -> &Tensor<E> {
        match name {
            "ln1_g" => &self.ln1_g,
            "ln1_b" => &self.ln1_b,
            "wq" => &self.wq,
            "bq" => &self.bq,
            "wk" => &self.wk,
            "bk" => &self.bk,
            "wv" => &self.wv,
            "bv" => &self.bv,
            "wo" => &self.wo,
            "bo" => &self.bo,
            "ln2_g" => &self.ln2_g,
            "ln2_b" => &self.ln2_b,
            "w1" => &self.w1,
            "b1" => &self.b1,
            "w2" => &self.w2,
            "b2" => &self.b2,
            _ => unreachable!("unknown block field {name}"),
        }
    }

}

impl<E: Element> LmParamsOf<E> {
    /// Ordered (name, tensor) view; the order is the canonical parameter
    /// order used by the optimizer, checkpoints, and digests.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for f in block_fields!() {
                out.push((format!("block{i}.{f}"), b.field(f)));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        if let Some(w) = &self.out_w {
            out.push(("out_w".into(), w));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let BlockParamsOf {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            } = b;
            let fields: [(&str, &mut Tensor<E>); 16] = [
                ("ln1_g", ln1_g),
                ("ln1_b", ln1_b),
                ("wq", wq),
                ("bq", bq),
                ("wk", wk),
                ("bk", bk),
                ("wv", wv),
                ("bv", bv),
                ("wo", wo),
                ("bo", bo),
                ("ln2_g", ln2_g),
                ("ln2_b", ln2_b),
                ("w1", w1),
                ("b1", b1),
                ("w2", w2),
                ("b2", b2),
            ];
            for (f, t) in fields {
                out.push((format!("block{i}.{f}"), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        if let Some(w) = &mut self.out_w {
            out.push(("out_w".into(), w));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn convert<T: Element>(&self) -> LmParamsOf<T> {
        LmParamsOf {
            tok_emb: self.tok_emb.convert(),
            pos_emb: self.pos_emb.convert(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParamsOf {
                    ln1_g: b.ln1_g.convert(),
                    ln1_b: b.ln1_b.convert(),
                    wq: b.wq.convert(),
                    bq: b.bq.convert(),
                    wk: b.wk.convert(),
                    bk: b.bk.convert(),
                    wv: b.wv.convert(),
                    bv: b.bv.convert(),
                    wo: b.wo.convert(),
                    bo: b.bo.convert(),
                    ln2_g: b.ln2_g.convert(),
                    ln2_b: b.ln2_b.convert(),
                    w1: b.w1.convert(),
                    b1: b.b1.convert(),
                    w2: b.w2.convert(),
                    b2: b.b2.convert(),
                })
                .collect(),
            lnf_g: self.lnf_g.convert(),
            lnf_b: self.lnf_b.convert(),
            out_w: self.out_w.as_ref().map(|w| w.convert()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

impl LmParams {
    /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &LmConfig, seed: u64) -> Result<LmParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("std > 0");
        let mut gauss = |shape: Vec<usize>| -> Tensor<f32> {
            let numel = shape.iter().product();
            let data = (0..numel).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(shape, data).expect("shape matches data")
        };
        let (v, d, f) = (cfg.vocab_size, cfg.dim, cfg.dim * cfg.ff_mult);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParamsOf {
                ln1_g: Tensor::filled(vec![d], 1.0),
                ln1_b: Tensor::zeros(vec![d]),
                wq: gauss(vec![d, d]),
                bq: Tensor::zeros(vec![d]),
                wk: gauss(vec![d, d]),
                bk: Tensor::zeros(vec![d]),
                wv: gauss(vec![d, d]),
                bv: Tensor::zeros(vec![d]),
                wo: gauss(vec![d, d]),
                bo: Tensor::zeros(vec![d]),
                ln2_g: Tensor::filled(vec![d], 1.0),
                ln2_b: Tensor::zeros(vec![d]),
                w1: gauss(vec![d, f]),
                b1: Tensor::zeros(vec![f]),
                w2: gauss(vec![f, d]),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(LmParams {
            tok_emb: gauss(vec![v, d]),
            pos_emb: gauss(vec![cfg.context, d]),
            blocks,
            lnf_g: Tensor::filled(vec![d], 1.0),
            lnf_b: Tensor::zeros(vec![d]),
            out_w: if cfg.tie_embeddings {
                None
            } else {
                Some(gauss(vec![d, v]))
            },
        })
    }
}

/// Tape handles for a registered parameter set, mirroring `LmParamsOf`.
pub struct LmVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub out_w: Option<Var>,
}

pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LmVars {
    /// Rebuild the structured view from vars laid out in canonical order
    /// (the order `LmParamsOf::named` produces for this config).
    pub fn from_ordered(cfg: &LmConfig, vars: &[Var]) -> Result<LmVars> {
        let expected = 2 + cfg.layers * 16 + 2 + usize::from(!cfg.tie_embeddings);
        if vars.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..cfg.layers)
            .map(|_| BlockVars {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let lnf_g = next();
        let lnf_b = next();
        let out_w = if cfg.tie_embeddings { None } else { Some(next()) };
        Ok(LmVars {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            out_w,
        })
    }

    /// Flat list in canonical parameter order, matching `LmParamsOf::named`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b,
                b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        if let Some(w) = self.out_w {
            out.push(w);
        }
        out
    }
}

/// Register every parameter on the tape, as trainable leaves or constants.
pub fn register_params<E: Element>(
    tape: &mut Tape<E>,
    params: &LmParamsOf<E>,
    trainable: bool,
) -> LmVars {
    let mut reg = |t: &Tensor<E>| -> Var {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    LmVars {
        tok_emb: reg(&params.tok_emb),
        pos_emb: reg(&params.pos_emb),
        blocks: params
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_g: reg(&b.ln1_g),
                ln1_b: reg(&b.ln1_b),
                wq: reg(&b.wq),
                bq: reg(&b.bq),
                wk: reg(&b.wk),
                bk: reg(&b.bk),
                wv: reg(&b.wv),
                bv: reg(&b.bv),
                wo: reg(&b.wo),
                bo: reg(&b.bo),
                ln2_g: reg(&b.ln2_g),
                ln2_b: reg(&b.ln2_b),
                w1: reg(&b.w1),
                b1: reg(&b.b1),
                w2: reg(&b.w2),
                b2: reg(&b.b2),
            })
            .collect(),
        lnf_g: reg(&params.lnf_g),
        lnf_b: reg(&params.lnf_b),
        out_w: params.out_w.as_ref().map(|w| reg(w)),
    }
}

fn causal_mask<E: Element>(t: usize) -> Tensor<E> {
    let neg = E::from_f64(-1e9);
    let mut data = vec![E::ZERO; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = neg;
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("square mask")
}

/// Full-context logits `[T, vocab]`; row `t` scores the token following
/// `ctx[..=t]`. Fails with `ContextOverflow` past the model window and
/// `Index` on out-of-vocabulary ids.
pub fn logits_on_tape<E: Element>(
    tape: &mut Tape<E>,
    vars: &LmVars,
    cfg: &LmConfig,
    ctx: &[u32],
) -> Result<Var> {
    let t = ctx.len();
    if t == 0 {
        return Err(Error::Shape("context must be nonempty".into()));
    }
    if t > cfg.context {
        return Err(Error::ContextOverflow(format!(
            "context length {t} exceeds window {}",
            cfg.context
        )));
    }
    let ids: Vec<usize> = ctx.iter().map(|&i| i as usize).collect();
    for &id in &ids {
        if id >= cfg.vocab_size {
            return Err(Error::Index(format!(
                "token id {id} outside vocab of {}",
                cfg.vocab_size
            )));
        }
    }
    let positions: Vec<usize> = (0..t).collect();

    let tok = tape.gather_rows(vars.tok_emb, &ids)?;
    let pos = tape.gather_rows(vars.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mask = tape.constant(causal_mask::<E>(t));
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    for b in &vars.blocks {
        let h = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
        let q0 = tape.matmul(h, b.wq)?;
        let q = tape.add_row(q0, b.bq)?;
        let k0 = tape.matmul(h, b.wk)?;
        let k = tape.add_row(k0, b.bk)?;
        let v0 = tape.matmul(h, b.wv)?;
        let v = tape.add_row(v0, b.bv)?;

        let mut merged: Option<Var> = None;
        for head in 0..cfg.heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.scale(raw, scale)?;
            let masked = tape.add(scaled, mask)?;
            let att = tape.softmax(masked)?;
            let oh = tape.matmul(att, vh)?;
            merged = Some(match merged {
                None => oh,
                Some(m) => tape.concat_cols(m, oh)?,
            });
        }
        let o0 = tape.matmul(merged.expect("at least one head"), b.wo)?;
        let o = tape.add_row(o0, b.bo)?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
        let f0 = tape.matmul(h2, b.w1)?;
        let f1 = tape.add_row(f0, b.b1)?;
        let f2 = tape.gelu(f1)?;
        let f3 = tape.matmul(f2, b.w2)?;
        let f = tape.add_row(f3, b.b2)?;
        x = tape.add(x, f)?;
    }

    let xf = tape.layer_norm(x, vars.lnf_g, vars.lnf_b, LN_EPS)?;
    match vars.out_w {
        Some(w) => tape.matmul(xf, w),
        None => {
            let wt = tape.transpose(vars.tok_emb)?;
            tape.matmul(xf, wt)
        }
    }
}

/// Summed NLL of `completion` given `prefix`, plus the token count.
/// Loss covers only completion positions.
pub fn nll_on_tape<E: Element>(
    tape: &mut Tape<E>,
    vars: &LmVars,
    cfg: &LmConfig,
    prefix: &[u32],
    completion: &[u32],
) -> Result<(Var, usize)> {
    if prefix.is_empty() {
        return Err(Error::Shape("prefix must be nonempty".into()));
    }
    if completion.is_empty() {
        return Err(Error::Shape("completion must be nonempty".into()));
    }
    let mut ctx = prefix.to_vec();
    ctx.extend_from_slice(completion);
    let logits = logits_on_tape(tape, vars, cfg, &ctx)?;
    let logp = tape.log_softmax(logits)?;
    let rows: Vec<usize> = (prefix.len() - 1..ctx.len() - 1).collect();
    let picked_rows = tape.gather_rows(logp, &rows)?;
    let targets: Vec<usize> = completion.iter().map(|&t| t as usize).collect();
    let picked = tape.take_per_row(picked_rows, &targets)?;
    let total = tape.sum_all(picked)?;
    let nll = tape.scale(total, -1.0)?;
    Ok((nll, completion.len()))
}

/// Which side of the product a policy plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Adapter,
    Approximate,
}

/// An autoregressive policy: parameters plus frozen/role metadata.
#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: LmConfig,
    pub vocab: Vocab,
    pub params: LmParams,
    pub frozen: bool,
    pub role: Role,
    pub seed: u64,
}

impl Policy {
    pub fn new(cfg: LmConfig, vocab: Vocab, role: Role, seed: u64) -> Result<Policy> {
        if cfg.vocab_size != vocab.len() {
            return Err(Error::ConfigMismatch(format!(
                "config vocab_size {} vs vocab of {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let params = LmParams::init(&cfg, seed)?;
        Ok(Policy {
            cfg,
            vocab,
            params,
            frozen: false,
            role,
            seed,
        })
    }

    pub fn frozen(mut self) -> Policy {
        self.frozen = true;
        self
    }

    pub fn with_role(mut self, role: Role) -> Policy {
        self.role = role;
        self
    }

    /// Zero every parameter; the resulting policy emits exactly uniform
    /// distributions (useful for identity-expert tests).
    pub fn zeroed(mut self) -> Policy {
        for (_, t) in self.params.named_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        self
    }

    fn full_logits(&self, ctx: &[u32]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = register_params(&mut tape, &self.params, false);
        let out = logits_on_tape(&mut tape, &vars, &self.cfg, ctx)?;
        Ok(tape.value(out).clone())
    }

    /// Final-position logits row for the given context.
    pub fn forward_logits(&self, ctx: &[u32]) -> Result<Vec<f32>> {
        let logits = self.full_logits(ctx)?;
        let v = self.cfg.vocab_size;
        let t = ctx.len();
        Ok(logits.data()[(t - 1) * v..t * v].to_vec())
    }

    /// Softmax of the final-position logits at the given temperature.
    pub fn next_token_dist(&self, ctx: &[u32], temperature: f64) -> Result<Distribution> {
        let logits = self.forward_logits(ctx)?;
        Distribution::from_logits_f32(&logits, temperature)
    }

    /// Per-position log distributions (f64 log-softmax of f32 logits / temp).
    /// Row `t` is `log p(next | ctx[..=t])`.
    pub fn log_rows(&self, ctx: &[u32], temperature: f64) -> Result<Vec<Vec<f64>>> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Domain(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        let logits = self.full_logits(ctx)?;
        let v = self.cfg.vocab_size;
        let mut rows = Vec::with_capacity(ctx.len());
        for t in 0..ctx.len() {
            let row = &logits.data()[t * v..(t + 1) * v];
            let scaled: Vec<f64> = row.iter().map(|&l| l as f64 / temperature).collect();
            let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + scaled.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
            rows.push(scaled.into_iter().map(|l| l - lse).collect());
        }
        Ok(rows)
    }

    /// Sum of per-step log probabilities of `output` given `prompt`.
    /// Empty output scores 0.
    pub fn sequence_logprob(&self, prompt: &[u32], output: &[u32]) -> Result<f64> {
        if output.is_empty() {
            return Ok(0.0);
        }
        if prompt.is_empty() {
            return Err(Error::Shape("prompt must be nonempty".into()));
        }
        let mut ctx = prompt.to_vec();
        ctx.extend_from_slice(output);
        let rows = self.log_rows(&ctx, 1.0)?;
        let mut total = 0.0;
        for (t, &tok) in output.iter().enumerate() {
            total += rows[prompt.len() + t - 1][tok as usize];
        }
        Ok(total)
    }

    /// Canonical content digest over config, vocab, and parameter bytes.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&self.cfg).expect("config serializes"));
        hasher.update(serde_json::to_string(&self.vocab).expect("vocab serializes"));
        for (name, t) in self.params.named() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.params.named() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            steps: 400,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MleLog {
    /// (step, mean per-token NLL of the batch)
    pub losses: Vec<(usize, f64)>,
}

/// Per-item loss and parameter gradients in canonical order.
pub(crate) struct ItemGrad {
    pub loss_sum: f64,
    pub tokens: usize,
    pub grads: Vec<Tensor<f32>>,
}

pub(crate) fn mle_item_grad(
    params: &LmParams,
    cfg: &LmConfig,
    prefix: &[u32],
    completion: &[u32],
) -> Result<ItemGrad> {
    let mut tape = Tape::<f32>::new();
    let vars = register_params(&mut tape, params, true);
    let (loss, tokens) = nll_on_tape(&mut tape, &vars, cfg, prefix, completion)?;
    let loss_sum = tape.value(loss).scalar_value() as f64;
    let grads = tape.backward(loss)?;
    let ordered = vars.ordered();
    let mut out = Vec::with_capacity(ordered.len());
    for v in ordered {
        out.push(
            grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::State("missing leaf gradient".into()))?,
        );
    }
    Ok(ItemGrad {
        loss_sum,
        tokens,
        grads: out,
    })
}

pub(crate) fn warmup_lr(base: f64, warmup_steps: usize, step: usize) -> f64 {
    if step < warmup_steps {
        base * (step + 1) as f64 / warmup_steps.max(1) as f64
    } else {
        base
    }
}

/// Accumulate ordered per-item gradients scaled by `1 / total_tokens` and
/// apply one Adam step.
pub(crate) fn apply_grad_step(
    params: &mut LmParams,
    adam: &mut crate::adam::AdamState,
    items: &[ItemGrad],
    lr: f64,
) -> Result<f64> {
    let total_tokens: usize = items.iter().map(|g| g.tokens).sum();
    if total_tokens == 0 {
        return Err(Error::State("gradient step with zero tokens".into()));
    }
    let scale = 1.0 / total_tokens as f32;
    let n_params = items[0].grads.len();
    let mut summed: Vec<Tensor<f32>> = items[0].grads.to_vec();
    for item in &items[1..] {
        for (acc, g) in summed.iter_mut().zip(&item.grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for t in &mut summed {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    let loss = items.iter().map(|g| g.loss_sum).sum::<f64>() / total_tokens as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    let mut named = params.named_mut();
    debug_assert_eq!(named.len(), n_params);
    let mut refs: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
    let grad_refs: Vec<&Tensor<f32>> = summed.iter().collect();
    adam.step(&mut refs, &grad_refs, lr)?;
    Ok(loss)
}

/// Maximum-likelihood training on (prefix, completion) pairs. The loss is
/// restricted to completion tokens; plain corpus sequences should be wrapped
/// with [`wrap_sequences`].
pub fn train_mle(
    policy: &mut Policy,
    pairs: &[(Vec<u32>, Vec<u32>)],
    cfg: &MleConfig,
) -> Result<MleLog> {
    if policy.frozen {
        return Err(Error::FrozenPolicy(format!(
            "cannot run MLE on frozen {:?} policy",
            policy.role
        )));
    }
    let mut log = MleLog::default();
    if cfg.steps == 0 {
        return Ok(log);
    }
    let usable: Vec<&(Vec<u32>, Vec<u32>)> = pairs
        .iter()
        .filter(|(p, c)| !c.is_empty() && p.len() + c.len() <= policy.cfg.context)
        .collect();
    if usable.is_empty() {
        return Err(Error::Config("no trainable pairs within the context window".into()));
    }
    let shapes: Vec<Vec<usize>> = policy
        .params
        .named()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut adam = crate::adam::AdamState::new(&shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for step in 0..cfg.steps {
        let batch: Vec<(Vec<u32>, Vec<u32>)> = (0..cfg.batch_size.max(1))
            .map(|_| {
                let i = rand::Rng::random_range(&mut rng, 0..usable.len());
                usable[i].clone()
            })
            .collect();
        let item_grads = crate::par::try_map(&batch, |_, (p, c)| {
            mle_item_grad(&policy.params, &policy.cfg, p, c)
        })?;
        let lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, step);
        let loss = apply_grad_step(&mut policy.params, &mut adam, &item_grads, lr)?;
        log.losses.push((step, loss));
    }
    Ok(log)
}

/// Wrap corpus sequences for unconditional MLE: prefix BOS, completion the
/// sequence plus EOS.
pub fn wrap_sequences(seqs: &[Vec<u32>]) -> Vec<(Vec<u32>, Vec<u32>)> {
    seqs.iter()
        .map(|s| {
            let mut completion = s.clone();
            completion.push(crate::vocab::EOS);
            (vec![crate::vocab::BOS], completion)
        })
        .collect()
}

/// Mean per-token NLL over pairs (evaluation only).
pub fn eval_nll(policy: &Policy, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let logps = crate::par::try_map(pairs, |_, (p, c)| policy.sequence_logprob(p, c))?;
    for ((_, c), lp) in pairs.iter().zip(logps) {
        total -= lp;
        tokens += c.len();
    }
    if tokens == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok(total / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg(vocab: &Vocab) -> LmConfig {
        LmConfig {
            vocab_size: vocab.len(),
            dim: 8,
            heads: 2,
            layers: 1,
            context: 16,
            ff_mult: 4,
            tie_embeddings: false,
        }
    }

    fn tiny_policy(seed: u64) -> Policy {
        let vocab = Vocab::from_alphabet("abcd", 0).unwrap();
        let cfg = tiny_cfg(&vocab);
        Policy::new(cfg, vocab, Role::Base, seed).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let p = tiny_policy(3);
        let ctx = p.vocab.encode_prompt("abca").unwrap();
        let a = p.forward_logits(&ctx).unwrap();
        let b = p.forward_logits(&ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causality_appending_preserves_earlier_rows() {
        let p = tiny_policy(5);
        let ctx = p.vocab.encode_prompt("abc").unwrap();
        let mut longer = ctx.clone();
        longer.push(p.vocab.char_id('d').unwrap());
        let short = p.full_logits(&ctx).unwrap();
        let long = p.full_logits(&longer).unwrap();
        let v = p.cfg.vocab_size;
        for t in 0..ctx.len() {
            for j in 0..v {
                assert_eq!(
                    short.data()[t * v + j],
                    long.data()[t * v + j],
                    "row {t} changed"
                );
            }
        }
    }

    #[test]
    fn causality_perturbing_later_token_preserves_earlier_rows() {
        let p = tiny_policy(9);
        let a = p.vocab.encode_prompt("abcd").unwrap();
        let mut b = a.clone();
        let last = b.len() - 1;
        b[last] = p.vocab.char_id('a').unwrap();
        let la = p.full_logits(&a).unwrap();
        let lb = p.full_logits(&b).unwrap();
        let v = p.cfg.vocab_size;
        for t in 0..last {
            for j in 0..v {
                assert_eq!(la.data()[t * v + j], lb.data()[t * v + j]);
            }
        }
    }

    #[test]
    fn init_entropy_is_near_uniform() {
        let p = tiny_policy(17);
        let ctx = p.vocab.encode_prompt("ab").unwrap();
        let d = p.next_token_dist(&ctx, 1.0).unwrap();
        let h = d.entropy();
        let max_h = (p.cfg.vocab_size as f64).ln();
        assert!(h > 0.9 * max_h, "entropy {h} vs log|V| {max_h}");
        assert!((d.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn temperature_one_matches_plain_softmax() {
        let p = tiny_policy(2);
        let ctx = p.vocab.encode_prompt("a").unwrap();
        let d = p.next_token_dist(&ctx, 1.0).unwrap();
        let direct =
            Distribution::from_logits_f32(&p.forward_logits(&ctx).unwrap(), 1.0).unwrap();
        assert!(d.max_abs_diff(&direct) == 0.0);
    }

    #[test]
    fn context_overflow_detected() {
        let p = tiny_policy(1);
        let ctx = vec![crate::vocab::BOS; p.cfg.context + 1];
        assert!(matches!(
            p.forward_logits(&ctx),
            Err(Error::ContextOverflow(_))
        ));
    }

    #[test]
    fn bad_token_id_detected() {
        let p = tiny_policy(1);
        assert!(matches!(
            p.forward_logits(&[p.cfg.vocab_size as u32]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn sequence_logprob_empty_output_is_zero() {
        let p = tiny_policy(4);
        let prompt = p.vocab.encode_prompt("a").unwrap();
        assert_eq!(p.sequence_logprob(&prompt, &[]).unwrap(), 0.0);
    }

    #[test]
    fn sequence_logprob_single_token_matches_dist() {
        let p = tiny_policy(4);
        let prompt = p.vocab.encode_prompt("ab").unwrap();
        let tok = p.vocab.char_id('c').unwrap();
        let d = p.next_token_dist(&prompt, 1.0).unwrap();
        let lp = p.sequence_logprob(&prompt, &[tok]).unwrap();
        assert!((lp - d.get(tok as usize).ln()).abs() < 1e-9);
    }

    #[test]
    fn sequence_logprob_matches_stepwise_product() {
        let p = tiny_policy(8);
        let prompt = p.vocab.encode_prompt("a").unwrap();
        let out = p.vocab.encode("bcda").unwrap();
        let lp = p.sequence_logprob(&prompt, &out).unwrap();
        let mut brute = 1.0f64;
        let mut ctx = prompt.clone();
        for &tok in &out {
            let d = p.next_token_dist(&ctx, 1.0).unwrap();
            brute *= d.get(tok as usize);
            ctx.push(tok);
        }
        assert!((lp.exp() - brute).abs() < 1e-6);
    }

    #[test]
    fn train_mle_memorizes_a_sequence() {
        let vocab = Vocab::from_alphabet("ab", 0).unwrap();
        let cfg = LmConfig {
            vocab_size: vocab.len(),
            dim: 16,
            heads: 2,
            layers: 1,
            context: 16,
            ff_mult: 4,
            tie_embeddings: false,
        };
        let mut policy = Policy::new(cfg, vocab.clone(), Role::Base, 0).unwrap();
        let seq = vocab.encode("abababab").unwrap();
        let pairs = wrap_sequences(&[seq.clone(), seq.clone()]);
        let before = eval_nll(&policy, &pairs).unwrap();
        train_mle(
            &mut policy,
            &pairs,
            &MleConfig {
                steps: 250,
                batch_size: 2,
                learning_rate: 5e-3,
                warmup_steps: 10,
                seed: 1,
            },
        )
        .unwrap();
        let after = eval_nll(&policy, &pairs).unwrap();
        assert!(after < 0.05, "NLL {after} (was {before})");
    }

    #[test]
    fn train_mle_zero_steps_is_identity() {
        let mut p = tiny_policy(6);
        let bytes = p.param_bytes();
        let pairs = wrap_sequences(&[p.vocab.encode("ab").unwrap()]);
        let log = train_mle(&mut p, &pairs, &MleConfig {
            steps: 0,
            ..MleConfig::default()
        })
        .unwrap();
        assert!(log.losses.is_empty());
        assert_eq!(bytes, p.param_bytes());
    }

    #[test]
    fn train_mle_rejects_frozen_policy() {
        let mut p = tiny_policy(6).frozen();
        let pairs = wrap_sequences(&[p.vocab.encode("ab").unwrap()]);
        assert!(matches!(
            train_mle(&mut p, &pairs, &MleConfig::default()),
            Err(Error::FrozenPolicy(_))
        ));
    }

    #[test]
    fn two_corpora_cross_evaluation() {
        let vocab = Vocab::from_alphabet("abcd", 0).unwrap();
        let cfg = LmConfig {
            vocab_size: vocab.len(),
            dim: 16,
            heads: 2,
            layers: 1,
            context: 16,
            ff_mult: 4,
            tie_embeddings: false,
        };
        let seq_a = vocab.encode("abababab").unwrap();
        let seq_b = vocab.encode("cdcdcdcd").unwrap();
        let pairs_a = wrap_sequences(&[seq_a]);
        let pairs_b = wrap_sequences(&[seq_b]);
        let mle = MleConfig {
            steps: 200,
            batch_size: 2,
            learning_rate: 5e-3,
            warmup_steps: 10,
            seed: 2,
        };
        let mut model_a = Policy::new(cfg.clone(), vocab.clone(), Role::Base, 0).unwrap();
        let mut model_b = Policy::new(cfg, vocab, Role::Base, 1).unwrap();
        train_mle(&mut model_a, &pairs_a, &mle).unwrap();
        train_mle(&mut model_b, &pairs_b, &mle).unwrap();
        assert!(eval_nll(&model_a, &pairs_a).unwrap() < eval_nll(&model_b, &pairs_a).unwrap());
        assert!(eval_nll(&model_b, &pairs_b).unwrap() < eval_nll(&model_a, &pairs_b).unwrap());
    }

    #[test]
    fn zeroed_policy_is_exactly_uniform() {
        let p = tiny_policy(12).zeroed();
        let ctx = p.vocab.encode_prompt("ab").unwrap();
        let d = p.next_token_dist(&ctx, 1.0).unwrap();
        let u = 1.0 / p.cfg.vocab_size as f64;
        for &v in d.probs() {
            assert!((v - u).abs() < 1e-15);
        }
    }
}
