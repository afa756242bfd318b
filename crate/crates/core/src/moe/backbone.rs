use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bindings, Parameters, Tape, Tensor, Var};

use super::layer::{Gating, LayerTrace, MoeLayer};
use super::router::Router;

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub initial_experts: usize,
    pub top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            d_ff: 128,
            n_blocks: 4,
            max_seq_len: 16,
            lora_rank: 4,
            initial_experts: 4,
            top_k: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_blocks", self.n_blocks),
            ("max_seq_len", self.max_seq_len),
            ("lora_rank", self.lora_rank),
            ("initial_experts", self.initial_experts),
            ("top_k", self.top_k),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if self.top_k > self.initial_experts {
            return Err(Error::config("model.top_k", "exceeds initial_experts"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// FFN up-projection `d_ff x d_model` with its expert group.
    pub moe: MoeLayer,
    /// FFN down-projection `d_model x d_ff`.
    pub w_down: Tensor,
}

/// Pre-norm causal decoder. Only LoRA experts and routers ever train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub head: Tensor,
}

/// Router selection for a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum RouteMode<'a> {
    /// Each layer's `active_router`, bound for gradients when trainable.
    Active,
    /// Frozen per-layer routers, e.g. a bank snapshot.
    Fixed(&'a [Router]),
    /// No experts at all: every MoE layer contributes `W0 x` only.
    BaseOnly,
}

pub struct ForwardOutput {
    /// `[batch, seq, vocab]`
    pub logits: Var,
    /// Residual stream after the last block, `[batch, seq, d_model]`.
    pub hidden: Var,
    pub traces: Vec<LayerTrace>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = Tensor::normal(&[config.vocab_size, d], 1.0, rng);
        let pos = Tensor::normal(&[config.max_seq_len, d], 1.0, rng);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            blocks.push(Block {
                wq: Tensor::normal(&[d, d], inv(d), rng),
                wk: Tensor::normal(&[d, d], inv(d), rng),
                wv: Tensor::normal(&[d, d], inv(d), rng),
                wo: Tensor::normal(&[d, d], inv(d), rng),
                moe: MoeLayer::new(
                    d,
                    config.d_ff,
                    config.lora_rank,
                    config.initial_experts,
                    config.top_k,
                    rng,
                )?,
                w_down: Tensor::normal(&[d, config.d_ff], inv(config.d_ff), rng),
            });
        }
        let head = Tensor::normal(&[config.vocab_size, d], inv(d), rng);
        Ok(Self {
            config,
            embed,
            pos,
            blocks,
            head,
        })
    }

    pub fn active_routers(&self) -> Vec<Router> {
        self.blocks.iter().map(|b| b.moe.active_router.clone()).collect()
    }

    pub fn set_active_routers(&mut self, routers: Vec<Router>) -> Result<()> {
        if routers.len() != self.blocks.len() {
            return Err(Error::Structural(format!(
                "{} routers for {} blocks",
                routers.len(),
                self.blocks.len()
            )));
        }
        for (b, r) in self.blocks.iter_mut().zip(routers) {
            b.moe.check_router(&r)?;
            b.moe.active_router = r;
        }
        Ok(())
    }

    /// Copies of the pinned router rows of every layer.
    pub fn pinned_router_rows(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                let r = &b.moe.active_router;
                r.g.data()[..r.pinned_rows * r.d_in()].to_vec()
            })
            .collect()
    }

    /// Writes back rows captured by [`Self::pinned_router_rows`].
    pub fn restore_pinned_router_rows(&mut self, rows: &[Vec<f64>]) {
        for (b, saved) in self.blocks.iter_mut().zip(rows) {
            b.moe.active_router.g.data_mut()[..saved.len()].copy_from_slice(saved);
        }
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.moe.experts.len()).collect()
    }

    /// Forward over a row-major `[batch, seq]` token matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        mode: RouteMode<'_>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if seq == 0 || seq > c.max_seq_len || tokens.len() != batch * seq {
            return Err(Error::Dimension {
                op: "backbone forward",
                lhs: vec![batch, seq],
                rhs: vec![tokens.len()],
            });
        }
        if let RouteMode::Fixed(rs) = mode {
            if rs.len() != self.blocks.len() {
                return Err(Error::Structural(format!(
                    "{} routers for {} blocks",
                    rs.len(),
                    self.blocks.len()
                )));
            }
        }
        let d = c.d_model;
        let n = batch * seq;
        let embed = bindings.bind(tape, "embed".into(), &self.embed);
        let pos = bindings.bind(tape, "pos".into(), &self.pos);
        let x = tape.embedding(embed, tokens, &[batch, seq])?;
        let p = tape.slice(pos, 0, seq)?;
        let mut h = tape.add(x, p)?;

        let causal = causal_keep(batch, seq);
        let scale = 1.0 / (d as f64).sqrt();
        let mut traces = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let pre = format!("block{bi}");
            let wq = bindings.bind(tape, format!("{pre}.wq"), &block.wq);
            let wk = bindings.bind(tape, format!("{pre}.wk"), &block.wk);
            let wv = bindings.bind(tape, format!("{pre}.wv"), &block.wv);
            let wo = bindings.bind(tape, format!("{pre}.wo"), &block.wo);
            let hn = tape.rms_norm(h, NORM_EPS)?;
            let q = tape.linear(hn, wq)?;
            let k = tape.linear(hn, wk)?;
            let v = tape.linear(hn, wv)?;
            let s = tape.batch_matmul_t(q, k)?;
            let s = tape.scale(s, scale)?;
            let att = tape.masked_softmax(s, Some(&causal))?;
            let ctx = tape.batch_matmul(att, v)?;
            let o = tape.linear(ctx, wo)?;
            h = tape.add(h, o)?;

            let hn = tape.rms_norm(h, NORM_EPS)?;
            let flat = tape.reshape(hn, &[n, d])?;
            let gating = match mode {
                RouteMode::Active => Gating::Router {
                    router: &block.moe.active_router,
                    trainable: block.moe.active_router.g.requires_grad(),
                },
                RouteMode::Fixed(rs) => Gating::Router {
                    router: &rs[bi],
                    trainable: false,
                },
                RouteMode::BaseOnly => Gating::BaseOnly,
            };
            let (up, trace) = block.moe.forward(tape, bindings, &format!("{pre}.moe"), flat, gating)?;
            traces.extend(trace);
            let act = tape.relu(up)?;
            let wd = bindings.bind(tape, format!("{pre}.w_down"), &block.w_down);
            let down = tape.linear(act, wd)?;
            let down = tape.reshape(down, &[batch, seq, d])?;
            h = tape.add(h, down)?;
        }
        let head = bindings.bind(tape, "head".into(), &self.head);
        let hn = tape.rms_norm(h, NORM_EPS)?;
        let logits = tape.linear(hn, head)?;
        Ok(ForwardOutput {
            logits,
            hidden: h,
            traces,
        })
    }

    /// Final-position hidden state of the base path (all experts disabled).
    pub fn last_token_feature(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Contract("last_token_feature of an empty sequence".into()));
        }
        Ok(self.last_token_features(&[tokens])?.remove(0))
    }

    /// Batched [`Self::last_token_feature`]; sequences of equal length share a pass.
    pub fn last_token_features(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); seqs.len()];
        let mut i = 0;
        while i < seqs.len() {
            let len = seqs[i].len();
            if len == 0 {
                return Err(Error::Contract("last_token_feature of an empty sequence".into()));
            }
            let mut j = i;
            while j < seqs.len() && seqs[j].len() == len && j - i < 256 {
                j += 1;
            }
            let flat: Vec<usize> = seqs[i..j].iter().flat_map(|s| s.iter().copied()).collect();
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            let f = self.forward(&mut tape, &mut b, &flat, j - i, len, RouteMode::BaseOnly)?;
            let hv = tape.value(f.hidden);
            let d = self.config.d_model;
            for (r, slot) in out[i..j].iter_mut().enumerate() {
                let off = (r * len + len - 1) * d;
                *slot = hv.data()[off..off + d].to_vec();
            }
            i = j;
        }
        Ok(out)
    }
}

fn causal_keep(batch: usize, seq: usize) -> Vec<bool> {
    let mut keep = Vec::with_capacity(batch * seq * seq);
    for _ in 0..batch {
        for i in 0..seq {
            for j in 0..seq {
                keep.push(j <= i);
            }
        }
    }
    keep
}

impl Parameters for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embed", &self.embed);
        f("pos", &self.pos);
        for (bi, b) in self.blocks.iter().enumerate() {
            f(&format!("block{bi}.wq"), &b.wq);
            f(&format!("block{bi}.wk"), &b.wk);
            f(&format!("block{bi}.wv"), &b.wv);
            f(&format!("block{bi}.wo"), &b.wo);
            f(&format!("block{bi}.moe.w0"), &b.moe.w0);
            for (i, e) in b.moe.experts.iter().enumerate() {
                f(&format!("block{bi}.moe.expert{i}.a"), &e.a);
                f(&format!("block{bi}.moe.expert{i}.b"), &e.b);
            }
            f(&format!("block{bi}.moe.router.g"), &b.moe.active_router.g);
            f(&format!("block{bi}.w_down"), &b.w_down);
        }
        f("head", &self.head);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embed", &mut self.embed);
        f("pos", &mut self.pos);
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{bi}.wq"), &mut b.wq);
            f(&format!("block{bi}.wk"), &mut b.wk);
            f(&format!("block{bi}.wv"), &mut b.wv);
            f(&format!("block{bi}.wo"), &mut b.wo);
            f(&format!("block{bi}.moe.w0"), &mut b.moe.w0);
            for (i, e) in b.moe.experts.iter_mut().enumerate() {
                f(&format!("block{bi}.moe.expert{i}.a"), &mut e.a);
                f(&format!("block{bi}.moe.expert{i}.b"), &mut e.b);
            }
            f(&format!("block{bi}.moe.router.g"), &mut b.moe.active_router.g);
            f(&format!("block{bi}.w_down"), &mut b.w_down);
        }
        f("head", &mut self.head);
    }
}

/// Mean over layers of the balance loss, differentiable through the full
/// router softmax.
pub fn aux_loss_on_tape(tape: &mut Tape, traces: &[LayerTrace]) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for t in traces {
        let total: u64 = t.selections.iter().sum();
        if total == 0 {
            return Err(Error::Contract("balance loss over an empty batch".into()));
        }
        let e = t.selections.len();
        let f = Tensor::vector(t.selections.iter().map(|&s| s as f64 / total as f64).collect());
        let fv = tape.constant(f);
        let probs = tape.softmax(t.logits)?;
        let weighted = tape.mul(probs, fv)?;
        let s = tape.sum(weighted)?;
        let term = tape.scale(s, e as f64 / t.tokens as f64)?;
        terms.push(tape.reshape(term, &[1, 1])?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(&terms)?;
    Ok(Some(tape.mean(all)?))
}
