//! Probabilistic task locator: one small VAE per task over frozen
//! last-token features, scored by z-normalized reconstruction
//! log-probability.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{total_loss, LossTerms, LossWeights};
use crate::moe::Router;
use crate::numerics::{softplus, AdamConfig, AdamW, Bindings, Parameters, Tape, Tensor, Var};
use crate::seeding::Rng;

pub const STD_FLOOR: f64 = 1e-6;

/// How the `N_rep` per-sample likelihoods are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepAverage {
    /// Mean of log-densities.
    LogMean,
    /// Log of the mean density, computed with log-sum-exp.
    DensityMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtlConfig {
    pub n_rep: usize,
    pub t_recent: usize,
    pub d_latent: usize,
    pub d_hidden: usize,
    pub vae_steps: usize,
    pub vae_batch_size: usize,
    pub vae_learning_rate: f64,
    pub rep_average: RepAverage,
}

impl Default for PtlConfig {
    fn default() -> Self {
        Self {
            n_rep: 10,
            t_recent: 256,
            d_latent: 16,
            d_hidden: 32,
            vae_steps: 400,
            vae_batch_size: 64,
            vae_learning_rate: 3e-3,
            rep_average: RepAverage::LogMean,
        }
    }
}

impl PtlConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("ptl.n_rep", self.n_rep),
            ("ptl.d_latent", self.d_latent),
            ("ptl.d_hidden", self.d_hidden),
            ("ptl.vae_batch_size", self.vae_batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.t_recent < 2 {
            return Err(Error::config("ptl.t_recent", "must be at least 2"));
        }
        if !(self.vae_learning_rate > 0.0 && self.vae_learning_rate.is_finite()) {
            return Err(Error::config("ptl.vae_learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Affine map `w x + b` with `w: [out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: Tensor::uniform(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng).trainable(),
            b: Tensor::zeros(&[d_out]).trainable(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.w.rows())
            .map(|o| self.b.data()[o] + self.w.row(o).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn on_tape(&self, tape: &mut Tape, bind: &mut Bindings, name: &str, x: Var) -> Result<Var> {
        let w = bind.bind(tape, format!("{name}.w"), &self.w);
        let b = bind.bind(tape, format!("{name}.b"), &self.b);
        let y = tape.linear(x, w)?;
        tape.add(y, b)
    }
}

/// Two-layer ReLU network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub l1: Dense,
    pub l2: Dense,
}

impl Ffn {
    fn new(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            l1: Dense::new(d_in, d_hidden, rng),
            l2: Dense::new(d_hidden, d_out, rng),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.l1.apply(x).into_iter().map(|v| v.max(0.0)).collect();
        self.l2.apply(&h)
    }

    fn on_tape(&self, tape: &mut Tape, bind: &mut Bindings, name: &str, x: Var) -> Result<Var> {
        let h = self.l1.on_tape(tape, bind, &format!("{name}.l1"), x)?;
        let h = tape.relu(h)?;
        self.l2.on_tape(tape, bind, &format!("{name}.l2"), h)
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&format!("{name}.l1.w"), &self.l1.w);
        f(&format!("{name}.l1.b"), &self.l1.b);
        f(&format!("{name}.l2.w"), &self.l2.w);
        f(&format!("{name}.l2.b"), &self.l2.b);
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{name}.l1.w"), &mut self.l1.w);
        f(&format!("{name}.l1.b"), &mut self.l1.b);
        f(&format!("{name}.l2.w"), &mut self.l2.w);
        f(&format!("{name}.l2.b"), &mut self.l2.b);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub enc_mu: Ffn,
    pub enc_sigma: Ffn,
    pub dec_mu: Ffn,
    pub dec_sigma: Ffn,
    pub d_latent: usize,
    pub owner_task: usize,
}

const VAE_PARTS: [&str; 4] = ["enc_mu", "enc_sigma", "dec_mu", "dec_sigma"];

impl VaeModel {
    pub fn new(d_model: usize, d_hidden: usize, d_latent: usize, owner_task: usize, rng: &mut Rng) -> Self {
        Self {
            enc_mu: Ffn::new(d_model, d_hidden, d_latent, rng),
            enc_sigma: Ffn::new(d_model, d_hidden, d_latent, rng),
            dec_mu: Ffn::new(d_latent, d_hidden, d_model, rng),
            dec_sigma: Ffn::new(d_latent, d_hidden, d_model, rng),
            d_latent,
            owner_task,
        }
    }

    pub fn d_model(&self) -> usize {
        self.enc_mu.l1.w.cols()
    }

    fn part(&self, i: usize) -> &Ffn {
        [&self.enc_mu, &self.enc_sigma, &self.dec_mu, &self.dec_sigma][i]
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.visit_params_mut(&mut |_, t| t.set_requires_grad(on));
    }

    /// Latent mean and softplus scale.
    pub fn encode(&self, f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if f.len() != self.d_model() {
            return Err(Error::Dimension {
                op: "vae encode",
                lhs: vec![self.d_model()],
                rhs: vec![f.len()],
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("vae encode", "non-finite feature"));
        }
        let mu = self.enc_mu.apply(f);
        let sigma = self.enc_sigma.apply(f).into_iter().map(softplus).collect();
        Ok((mu, sigma))
    }

    /// Reconstruction mean and softplus scale.
    pub fn decode(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mu = self.dec_mu.apply(z);
        let sigma = self.dec_sigma.apply(z).into_iter().map(softplus).collect();
        (mu, sigma)
    }
}

impl Parameters for VaeModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, name) in VAE_PARTS.iter().enumerate() {
            self.part(i).visit(name, f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.enc_mu.visit_mut("enc_mu", f);
        self.enc_sigma.visit_mut("enc_sigma", f);
        self.dec_mu.visit_mut("dec_mu", f);
        self.dec_sigma.visit_mut("dec_sigma", f);
    }
}

pub fn sample_latent(mu: &[f64], sigma: &[f64], rng: &mut Rng) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Diagonal-Gaussian log-density of `f` summed over coordinates.
pub fn log_likelihood(mu: &[f64], sigma: &[f64], f: &[f64]) -> Result<f64> {
    if mu.len() != f.len() || sigma.len() != f.len() {
        return Err(Error::Dimension {
            op: "log_likelihood",
            lhs: vec![mu.len(), sigma.len()],
            rhs: vec![f.len()],
        });
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut acc = 0.0;
    for ((m, s), x) in mu.iter().zip(sigma).zip(f) {
        if s.is_nan() || *s <= 0.0 {
            return Err(Error::Contract(format!("non-positive scale {s} in log_likelihood")));
        }
        let r = (x - m) / s;
        acc += -s.ln() - half_log_2pi - 0.5 * r * r;
    }
    Ok(acc)
}

/// Closed-form `KL(N(mu, sigma²) ‖ N(0, 1))`.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (m, s) in mu.iter().zip(sigma) {
        if s.is_nan() || *s <= 0.0 {
            return Err(Error::Contract(format!("non-positive scale {s} in kl_divergence")));
        }
        acc += 1.0 + (s * s).ln() - m * m - s * s;
    }
    Ok(-0.5 * acc)
}

pub fn rec_logprob(vae: &VaeModel, f: &[f64], n_rep: usize, mode: RepAverage, rng: &mut Rng) -> Result<f64> {
    if n_rep == 0 {
        return Err(Error::Contract("rec_logprob needs n_rep >= 1".into()));
    }
    let (mu, sigma) = vae.encode(f)?;
    let mut lls = Vec::with_capacity(n_rep);
    for _ in 0..n_rep {
        let z = sample_latent(&mu, &sigma, rng);
        let (m, s) = vae.decode(&z);
        lls.push(log_likelihood(&m, &s, f)?);
    }
    Ok(match mode {
        RepAverage::LogMean => lls.iter().sum::<f64>() / n_rep as f64,
        RepAverage::DensityMean => {
            let max = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + (lls.iter().map(|l| (l - max).exp()).sum::<f64>() / n_rep as f64).ln()
        }
    })
}

/// Tape terms `(KL, −rec_logprob)` averaged over the rows of `features`,
/// with `eps` holding `n_rep` blocks of standard-normal draws.
pub fn vae_loss_terms(
    vae: &VaeModel,
    tape: &mut Tape,
    bind: &mut Bindings,
    features: Var,
    eps: &Tensor,
    n_rep: usize,
) -> Result<(Var, Var)> {
    let rows = tape.value(features).rows();
    let d = tape.value(features).cols();
    let mu = vae.enc_mu.on_tape(tape, bind, "enc_mu", features)?;
    let pre = vae.enc_sigma.on_tape(tape, bind, "enc_sigma", features)?;
    let sigma = tape.softplus(pre)?;

    let log_sigma = tape.log(sigma)?;
    let mu2 = tape.mul(mu, mu)?;
    let s2 = tape.mul(sigma, sigma)?;
    let a = tape.add(mu2, s2)?;
    let a = tape.scale(a, 0.5)?;
    let kl = tape.sub(a, log_sigma)?;
    let kl = tape.sum(kl)?;
    let kl = tape.scale(kl, 1.0 / rows as f64)?;
    let kl_const = tape.constant(Tensor::scalar(-0.5 * vae.d_latent as f64));
    let kl = tape.add(kl, kl_const)?;

    let mu_rep = tape.concat(&vec![mu; n_rep])?;
    let sigma_rep = tape.concat(&vec![sigma; n_rep])?;
    let f_rep = tape.concat(&vec![features; n_rep])?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sigma_rep, e)?;
    let z = tape.add(mu_rep, noise)?;
    let m = vae.dec_mu.on_tape(tape, bind, "dec_mu", z)?;
    let pre = vae.dec_sigma.on_tape(tape, bind, "dec_sigma", z)?;
    let s = tape.softplus(pre)?;
    let ls = tape.log(s)?;
    let neg = tape.scale(ls, -1.0)?;
    let inv = tape.exp(neg)?;
    let diff = tape.sub(f_rep, m)?;
    let r = tape.mul(diff, inv)?;
    let r2 = tape.mul(r, r)?;
    let r2 = tape.scale(r2, 0.5)?;
    let nll = tape.add(r2, ls)?;
    let nll = tape.sum(nll)?;
    let nll = tape.scale(nll, 1.0 / (rows * n_rep) as f64)?;
    let c = tape.constant(Tensor::scalar(0.5 * d as f64 * (2.0 * PI).ln()));
    let rec = tape.add(nll, c)?;
    Ok((kl, rec))
}

/// Fits a fresh VAE to one task's features with `λ·KL + η·L_rec`.
pub fn fit_task_vae(
    features: &[Vec<f64>],
    cfg: &PtlConfig,
    weights: &LossWeights,
    task: usize,
    rng: &mut Rng,
) -> Result<VaeModel> {
    let d = features.first().map(Vec::len).ok_or_else(|| Error::Contract("no features to fit".into()))?;
    let mut vae = VaeModel::new(d, cfg.d_hidden, cfg.d_latent, task, rng);
    let mut opt = AdamW::for_params(AdamConfig::with_lr(cfg.vae_learning_rate), &vae);
    let fit_weights = LossWeights {
        kappa: 0.0,
        ..*weights
    };
    let bs = cfg.vae_batch_size.min(features.len());
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.vae_steps {
        if cursor + bs > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let mut flat = Vec::with_capacity(bs * d);
        for &i in &order[cursor..cursor + bs] {
            flat.extend_from_slice(&features[i]);
        }
        cursor += bs;
        let mut tape = Tape::new();
        let mut bind = Bindings::new();
        let x = tape.constant(Tensor::new(&[bs, d], flat)?);
        let eps = Tensor::normal(&[bs * cfg.n_rep, cfg.d_latent], 1.0, rng);
        let (kl, rec) = vae_loss_terms(&vae, &mut tape, &mut bind, x, &eps, cfg.n_rep)?;
        let loss = total_loss(
            &mut tape,
            LossTerms {
                kl: Some(kl),
                rec: Some(rec),
                ..Default::default()
            },
            &fit_weights,
        )
        .map_err(|e| match e {
            Error::Numeric { context, detail } => Error::numeric(format!("vae step {step}: {context}"), detail),
            other => other,
        })?;
        tape.backward(loss)?;
        bind.absorb(&tape, &mut vae)?;
        opt.step(&mut vae)?;
    }
    vae.set_trainable(false);
    Ok(vae)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrimitive {
    pub mean_logp: f64,
    pub std_logp: f64,
    pub sample_count: usize,
    pub owner_task: usize,
}

pub fn build_primitive(
    vae: &VaeModel,
    recent: &[Vec<f64>],
    n_rep: usize,
    mode: RepAverage,
    rng: &mut Rng,
) -> Result<TaskPrimitive> {
    if recent.len() < 2 {
        return Err(Error::Contract(format!(
            "a primitive needs at least 2 instances, got {}",
            recent.len()
        )));
    }
    let scores = recent
        .iter()
        .map(|f| rec_logprob(vae, f, n_rep, mode, rng))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&scores);
    Ok(TaskPrimitive {
        mean_logp: mean,
        std_logp: std.max(STD_FLOOR),
        sample_count: recent.len(),
        owner_task: vae.owner_task,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One trained task: its locator key and the router it unlocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub primitive: TaskPrimitive,
    pub vae: VaeModel,
    pub routers: Vec<Router>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveBank {
    pub entries: Vec<BankEntry>,
}

impl PrimitiveBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the next task's entry; owners must arrive in training order.
    pub fn insert(&mut self, entry: BankEntry) -> Result<()> {
        let expected = self.entries.len();
        if entry.primitive.owner_task != expected || entry.vae.owner_task != expected {
            return Err(Error::Structural(format!(
                "bank expects task {expected}, got primitive {} / vae {}",
                entry.primitive.owner_task, entry.vae.owner_task
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn routers(&self, task: usize) -> Result<&[Router]> {
        self.entries
            .get(task)
            .map(|e| e.routers.as_slice())
            .ok_or(Error::Index {
                context: "router bank",
                index: task,
                len: self.entries.len(),
            })
    }
}

impl Parameters for PrimitiveBank {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, e) in self.entries.iter().enumerate() {
            e.vae.visit_params(&mut |name, t| f(&format!("entry{i}.vae.{name}"), t));
            for (h, r) in e.routers.iter().enumerate() {
                f(&format!("entry{i}.router{h}.g"), &r.g);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.vae.visit_params_mut(&mut |name, t| f(&format!("entry{i}.vae.{name}"), t));
            for (h, r) in e.routers.iter_mut().enumerate() {
                f(&format!("entry{i}.router{h}.g"), &mut r.g);
            }
        }
    }
}

/// z-scores of `f` under every bank entry.
pub fn task_scores(bank: &PrimitiveBank, f: &[f64], n_rep: usize, mode: RepAverage, rng: &mut Rng) -> Result<Vec<f64>> {
    bank.entries
        .iter()
        .map(|e| {
            let lp = rec_logprob(&e.vae, f, n_rep, mode, rng)?;
            Ok((lp - e.primitive.mean_logp) / e.primitive.std_logp)
        })
        .collect()
}

/// Index of the highest z-score, lowest index on ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn locate_task(bank: &PrimitiveBank, f: &[f64], n_rep: usize, mode: RepAverage, rng: &mut Rng) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::Contract("locate_task on an empty bank".into()));
    }
    Ok(argmax_first(&task_scores(bank, f, n_rep, mode, rng)?))
}
