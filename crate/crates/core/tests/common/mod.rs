#![allow(dead_code)]

use cmoe::loss::{total_loss, LossTerms, LossWeights};
use cmoe::moe::{aux_loss_on_tape, route, Backbone, Gating, ModelConfig, MoeLayer, RouteMode, Router};
use cmoe::numerics::{finite_diff_grad, max_relative_error, Bindings, Parameters, Tape, Tensor, Var};
use cmoe::ptl::{vae_loss_terms, VaeModel};
use cmoe::seeding::{rng_for, Rng};
use cmoe::Result;

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-7;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v.abs() < margin { v.signum() * margin + v } else { v })
        .collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn positive(t: Tensor) -> Tensor {
    let data = t.data().iter().map(|v| v.abs() + 0.2).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// One case per differentiable tape op, on random inputs from `rng`.
pub fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let n = |shape: &[usize], rng: &mut Rng| Tensor::normal(shape, 1.0, rng);
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $f:expr) => {
            cases.push(OpCase { name: $name, inputs: vec![$($inp),*], f: Box::new($f) })
        };
    }
    case!("matmul", [n(&[3, 4], rng), n(&[4, 2], rng)], |t, v| t.matmul(v[0], v[1]));
    case!("linear", [n(&[2, 3, 4], rng), n(&[5, 4], rng)], |t, v| t.linear(v[0], v[1]));
    case!("batch_matmul", [n(&[2, 3, 4], rng), n(&[2, 4, 2], rng)], |t, v| t.batch_matmul(v[0], v[1]));
    case!("batch_matmul_t", [n(&[2, 3, 4], rng), n(&[2, 5, 4], rng)], |t, v| t.batch_matmul_t(v[0], v[1]));
    case!("add", [n(&[3, 4], rng), n(&[3, 4], rng)], |t, v| t.add(v[0], v[1]));
    case!("add_broadcast", [n(&[2, 3, 4], rng), n(&[4], rng)], |t, v| t.add(v[0], v[1]));
    case!("sub", [n(&[3, 4], rng), n(&[4], rng)], |t, v| t.sub(v[0], v[1]));
    case!("mul", [n(&[3, 4], rng), n(&[3, 4], rng)], |t, v| t.mul(v[0], v[1]));
    case!("scale", [n(&[5], rng)], |t, v| t.scale(v[0], -1.7));
    case!("relu", [away_from_zero(n(&[4, 3], rng), 0.05)], |t, v| t.relu(v[0]));
    case!("softmax", [n(&[3, 5], rng)], |t, v| t.softmax(v[0]));
    case!("masked_softmax", [n(&[2, 4], rng)], |t, v| {
        t.masked_softmax(v[0], Some(&[true, false, true, true, false, true, false, true]))
    });
    case!("softplus", [n(&[4, 3], rng)], |t, v| t.softplus(v[0]));
    case!("exp", [n(&[6], rng)], |t, v| t.exp(v[0]));
    case!("log", [positive(n(&[6], rng))], |t, v| t.log(v[0]));
    case!("sum", [n(&[2, 3], rng)], |t, v| t.sum(v[0]));
    case!("mean", [n(&[2, 3], rng)], |t, v| t.mean(v[0]));
    case!("concat", [n(&[2, 3], rng), n(&[1, 3], rng)], |t, v| t.concat(&[v[0], v[1], v[0]]));
    case!("slice", [n(&[4, 3], rng)], |t, v| t.slice(v[0], 1, 2));
    case!("reshape", [n(&[2, 6], rng)], |t, v| t.reshape(v[0], &[3, 4]));
    case!("rms_norm", [n(&[3, 5], rng)], |t, v| t.rms_norm(v[0], 1e-6));
    case!("embedding", [n(&[5, 3], rng)], |t, v| t.embedding(v[0], &[4, 0, 4, 2], &[2, 2]));
    case!("gate_mix", [n(&[3, 2], rng), n(&[2, 3, 4], rng)], |t, v| t.gate_mix(v[0], v[1]));
    case!("cross_entropy", [n(&[4, 5], rng)], |t, v| {
        t.cross_entropy(v[0], &[1, 0, 4, 2], &[1.0, 0.0, 2.0, 0.5])
    });
    cases
}

/// `sum(f(inputs) ⊙ R)` for a fixed random `R`, so every output coordinate
/// carries a distinct upstream gradient.
fn probe_loss(case: &OpCase, inputs: &[Tensor], weights_seed: u64) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().trainable())).collect();
    let out = (case.f)(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let r = Tensor::normal(&shape, 1.0, &mut rng_for(weights_seed, "probe-weights", 0));
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Max relative error between tape and central-difference gradients over
/// every input of `case`.
pub fn op_max_error(case: &OpCase, weights_seed: u64) -> Result<f64> {
    let (mut tape, vars, loss) = probe_loss(case, &case.inputs, weights_seed)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("input gradient").to_vec();
        let numeric = finite_diff_grad(
            |p| {
                let mut inputs = case.inputs.clone();
                inputs[k] = p.clone();
                let (tape, _, loss) = probe_loss(case, &inputs, weights_seed)?;
                Ok(tape.value(loss).data()[0])
            },
            &case.inputs[k],
            H,
        )?;
        worst = worst.max(max_relative_error(&analytic, numeric.data(), FLOOR));
    }
    Ok(worst)
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        d_ff: 12,
        n_blocks: 2,
        max_seq_len: 6,
        lora_rank: 2,
        initial_experts: 3,
        top_k: 2,
    }
}

/// Trainable toy model with non-zero expert `B` so every path is live.
pub fn toy_model(seed: u64) -> Backbone {
    let mut rng = rng_for(seed, "toy", 0);
    let mut m = Backbone::new(toy_config(), &mut rng).unwrap();
    for b in &mut m.blocks {
        for e in &mut b.moe.experts {
            e.b = Tensor::normal(e.b.shape(), 0.3, &mut rng);
            e.set_frozen(false);
        }
        b.moe.active_router.set_trainable(true);
    }
    m
}

pub struct ToyLossInputs {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
    pub features: Tensor,
    pub eps: Tensor,
}

pub fn toy_inputs(seed: u64) -> ToyLossInputs {
    let mut rng = rng_for(seed, "toy-inputs", 0);
    use rand::Rng as _;
    let (batch, seq) = (2, 5);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..16)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..16)).collect();
    let weights = (0..batch * seq).map(|i| if i % seq >= 3 { 1.0 } else { 0.0 }).collect();
    ToyLossInputs {
        tokens,
        targets,
        weights,
        features: Tensor::normal(&[3, 8], 1.0, &mut rng),
        eps: Tensor::normal(&[6, 2], 1.0, &mut rng),
    }
}

pub const TOY_WEIGHTS: LossWeights = LossWeights {
    lambda: 0.3,
    eta: 0.7,
    kappa: 0.5,
};

/// `L_CE + λ·KL + η·L_rec + κ·L_aux` with every term live.
pub fn toy_total_loss(model: &Backbone, vae: &VaeModel, inp: &ToyLossInputs) -> Result<(Tape, Bindings, Bindings, Var)> {
    let mut tape = Tape::new();
    let mut mb = Bindings::new();
    let out = model.forward(&mut tape, &mut mb, &inp.tokens, 2, 5, RouteMode::Active)?;
    let logits = tape.reshape(out.logits, &[10, 16])?;
    let ce = tape.cross_entropy(logits, &inp.targets, &inp.weights)?;
    let aux = aux_loss_on_tape(&mut tape, &out.traces)?;
    let mut vb = Bindings::new();
    let f = tape.constant(inp.features.clone());
    let (kl, rec) = vae_loss_terms(vae, &mut tape, &mut vb, f, &inp.eps, 2)?;
    let loss = total_loss(
        &mut tape,
        LossTerms {
            ce: Some(ce),
            kl: Some(kl),
            rec: Some(rec),
            aux,
        },
        &TOY_WEIGHTS,
    )?;
    Ok((tape, mb, vb, loss))
}

pub fn toy_vae(seed: u64) -> VaeModel {
    VaeModel::new(8, 4, 2, 0, &mut rng_for(seed, "toy-vae", 0))
}

/// Max relative error of the full loss gradient over every trainable
/// tensor of the toy model and its VAE.
pub fn total_loss_max_error(seed: u64) -> Result<(f64, usize)> {
    let model = toy_model(seed);
    let vae = toy_vae(seed);
    let inp = toy_inputs(seed);
    let (mut tape, mb, vb, loss) = toy_total_loss(&model, &vae, &inp)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in model.trainable_names() {
        let var = mb.get(&name).expect("bound");
        let analytic = tape.grad(var).map(<[f64]>::to_vec).unwrap_or_default();
        let mut current = None;
        model.visit_params(&mut |n, t| {
            if n == name {
                current = Some(t.clone());
            }
        });
        let p = current.unwrap();
        let numeric = finite_diff_grad(
            |q| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, t| {
                    if n == name {
                        *t = q.clone().trainable();
                    }
                });
                let (tape, _, _, l) = toy_total_loss(&m, &vae, &inp)?;
                Ok(tape.value(l).data()[0])
            },
            &p,
            H,
        )?;
        let analytic = if analytic.is_empty() { vec![0.0; p.numel()] } else { analytic };
        worst = worst.max(max_relative_error(&analytic, numeric.data(), FLOOR));
        checked += 1;
    }
    for name in vae.trainable_names() {
        let var = vb.get(&name).expect("bound");
        let analytic = tape.grad(var).expect("vae grad").to_vec();
        let mut current = None;
        vae.visit_params(&mut |n, t| {
            if n == name {
                current = Some(t.clone());
            }
        });
        let p = current.unwrap();
        let numeric = finite_diff_grad(
            |q| {
                let mut v = vae.clone();
                v.visit_params_mut(&mut |n, t| {
                    if n == name {
                        *t = q.clone().trainable();
                    }
                });
                let (tape, _, _, l) = toy_total_loss(&model, &v, &inp)?;
                Ok(tape.value(l).data()[0])
            },
            &p,
            H,
        )?;
        worst = worst.max(max_relative_error(&analytic, numeric.data(), FLOOR));
        checked += 1;
    }
    Ok((worst, checked))
}

/// Independent top-k gate computation: sort indices by logit, keep the
/// first `k`, softmax over those.
pub fn oracle_gates(logits: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let chosen = &order[..k];
    let m = chosen.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = chosen.iter().map(|&i| (logits[i] - m).exp()).sum();
    let mut g = vec![0.0; logits.len()];
    for &i in chosen {
        g[i] = (logits[i] - m).exp() / z;
    }
    g
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Dense `(W0 + Σ g_i B_i A_i) x` built as an explicit matrix.
pub fn dense_moe(layer: &MoeLayer, gates: &[f64], x: &[f64]) -> Vec<f64> {
    let (d_out, d_in) = (layer.d_out(), layer.d_in());
    let mut w = layer.w0.data().to_vec();
    for (e, &g) in layer.experts.iter().zip(gates) {
        if g == 0.0 {
            continue;
        }
        for o in 0..d_out {
            for i in 0..d_in {
                let ba: f64 = (0..e.rank()).map(|r| e.b.at2(o, r) * e.a.at2(r, i)).sum();
                w[o * d_in + i] += g * ba;
            }
        }
    }
    matvec(&Tensor::new(&[d_out, d_in], w).unwrap(), x)
}

/// Random layer with live experts and a random router over all of them.
pub fn random_layer(rng: &mut Rng) -> MoeLayer {
    use rand::Rng as _;
    let d_in = rng.gen_range(2..10);
    let d_out = rng.gen_range(2..10);
    let rank = rng.gen_range(1..4);
    let n = rng.gen_range(1..7);
    let top_k = rng.gen_range(1..=n);
    let mut layer = MoeLayer::new(d_in, d_out, rank, n, top_k, rng).unwrap();
    for e in &mut layer.experts {
        e.b = Tensor::normal(e.b.shape(), 1.0, rng);
    }
    layer.active_router.g = Tensor::normal(&[n, d_in], 1.0, rng);
    layer
}

/// Largest deviation between `moe_forward`, the tape forward and the dense
/// oracle over `cases` random layers.
pub fn moe_exactness(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, "moe-exactness", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let mut layer = random_layer(&mut rng);
        let x = Tensor::normal(&[layer.d_in()], 1.0, &mut rng).into_data();
        let logits = matvec(&layer.active_router.g, &x);
        let gates = oracle_gates(&logits, layer.active_router.top_k);
        let want = dense_moe(&layer, &gates, &x);
        let got = layer.moe_forward(&x, false)?;
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.constant(Tensor::new(&[1, x.len()], x.clone())?);
        let router = layer.active_router.clone();
        let (out, _) = layer.forward(&mut tape, &mut b, "l", xv, Gating::Router { router: &router, trainable: false })?;
        for ((w, g), t) in want.iter().zip(&got).zip(tape.value(out).data()) {
            worst = worst.max((w - g).abs()).max((w - t).abs());
        }
    }
    Ok(worst)
}

/// `N_e = 1, top_k = 1` compared bitwise against `W0 x + B A x`.
pub fn degenerate_moe_exact(cases: usize, seed: u64) -> Result<bool> {
    let mut rng = rng_for(seed, "moe-degenerate", 0);
    for _ in 0..cases {
        let mut layer = MoeLayer::new(5, 4, 2, 1, 1, &mut rng)?;
        layer.experts[0].b = Tensor::normal(&[4, 2], 1.0, &mut rng);
        layer.active_router.g = Tensor::normal(&[1, 5], 1.0, &mut rng);
        let x = Tensor::normal(&[5], 1.0, &mut rng).into_data();
        let base = matvec(&layer.w0, &x);
        let ax = matvec(&layer.experts[0].a, &x);
        let bax = matvec(&layer.experts[0].b, &ax);
        let got = layer.moe_forward(&x, false)?;
        if !base.iter().zip(&bax).zip(&got).all(|((w, d), g)| (w + d).to_bits() == g.to_bits()) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Number of routings out of `n` that break the gate contract.
pub fn gate_contract_violations(n: usize, seed: u64) -> Result<usize> {
    use rand::Rng as _;
    let mut rng = rng_for(seed, "gate-contract", 0);
    let mut bad = 0;
    for i in 0..n {
        let experts = rng.gen_range(1..13);
        let d_in = rng.gen_range(1..9);
        let top_k = rng.gen_range(1..=experts);
        let mut router = Router::new(experts, d_in, top_k, 0, &mut rng)?;
        router.g = Tensor::normal(&[experts, d_in], 2.0, &mut rng);
        if i % 10 == 0 && experts > 1 {
            let first = router.g.row(0).to_vec();
            router.g.data_mut()[d_in..2 * d_in].copy_from_slice(&first);
        }
        let x = Tensor::normal(&[d_in], 1.0, &mut rng).into_data();
        let gates = route(&router, &x)?;
        let nonzero = gates.iter().filter(|g| **g != 0.0).count();
        let sum: f64 = gates.iter().filter(|g| **g != 0.0).sum();
        if nonzero != top_k || (sum - 1.0).abs() > 1e-9 {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Brute-force expansion decision for one layer: two-pass mean and
/// population std, then a scan over the probes.
pub fn oracle_decision(act: &[f64], probes: &[usize], alpha: f64, cap: usize) -> (usize, usize) {
    let n = act.len() as f64;
    let mut mean = 0.0;
    for a in act {
        mean += a;
    }
    mean /= n;
    let mut ss = 0.0;
    for a in act {
        ss += (a - mean).powi(2);
    }
    let threshold = mean - alpha * (ss / n).sqrt();
    let mut count = 0;
    let mut best: Option<usize> = None;
    for &p in probes {
        if act[p] > threshold {
            count += 1;
        }
        best = match best {
            Some(b) if act[b] >= act[p] => Some(b),
            _ => Some(p),
        };
    }
    (count.min(cap), best.unwrap())
}

/// Disagreements between `select_expansion` and the brute-force oracle
/// over `n` random activation vectors per alpha.
pub fn pgke_oracle_disagreements(n: usize, seed: u64) -> usize {
    use cmoe::pgke::{select_expansion, ActivationReport, ProbeConfig};
    use rand::Rng as _;
    let mut rng = rng_for(seed, "pgke-oracle", 0);
    let mut bad = 0;
    for &alpha in &[0.0, 0.8, 2.0] {
        for i in 0..n {
            let len = rng.gen_range(2..12);
            let n_probes = rng.gen_range(1..len);
            let mut act: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
            if i % 7 == 0 {
                act[len - 1] = act[len - n_probes];
            }
            let total: f64 = act.iter().sum();
            act.iter_mut().for_each(|a| *a /= total);
            let probes: Vec<usize> = (len - n_probes..len).collect();
            let cap = rng.gen_range(1..4);
            let cfg = ProbeConfig {
                alpha,
                n_new_experts_cap: cap,
                n_probes_per_layer: n_probes,
                ..ProbeConfig::default()
            };
            let report = ActivationReport {
                layer: 0,
                act: act.clone(),
                act_topk_frequency: act.clone(),
                act_mean_gate_probability: act.clone(),
                probe_indices: probes.clone(),
                threshold: 0.0,
                selected: false,
                n_selected_probes: 0,
            };
            let plan = select_expansion(&[report], &cfg);
            let (want_n, want_src) = oracle_decision(&act, &probes, alpha, cap);
            let ok = match plan.layers.get(&0) {
                None => want_n == 0,
                Some(p) => p.n_new == want_n && p.copy_source == want_src,
            };
            if !ok {
                bad += 1;
            }
        }
    }
    bad
}

/// Relative gap between the closed-form KL and a Monte Carlo estimate
/// `E_q[log q(z) − log p(z)]`.
pub fn kl_monte_carlo_gap(samples: usize, seed: u64) -> Result<f64> {
    use cmoe::ptl::{kl_divergence, log_likelihood, sample_latent};
    let mut rng = rng_for(seed, "kl-mc", 0);
    let d = 4;
    let mu = Tensor::normal(&[d], 1.0, &mut rng).into_data();
    let sigma: Vec<f64> = Tensor::uniform(&[d], 0.5, &mut rng).data().iter().map(|s| 0.7 + s).collect();
    let zeros = vec![0.0; d];
    let ones = vec![1.0; d];
    let mut acc = 0.0;
    for _ in 0..samples {
        let z = sample_latent(&mu, &sigma, &mut rng);
        acc += log_likelihood(&mu, &sigma, &z)? - log_likelihood(&zeros, &ones, &z)?;
    }
    let mc = acc / samples as f64;
    let exact = kl_divergence(&mu, &sigma)?;
    Ok((mc - exact).abs() / exact.abs())
}

/// Largest gap between `log_likelihood` and the log of an explicit product
/// of univariate normal densities.
pub fn log_likelihood_product_gap(cases: usize, seed: u64) -> Result<f64> {
    use cmoe::ptl::log_likelihood;
    use std::f64::consts::PI;
    let mut rng = rng_for(seed, "ll-product", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = 6;
        let mu = Tensor::normal(&[d], 1.0, &mut rng).into_data();
        let sigma: Vec<f64> = Tensor::uniform(&[d], 0.5, &mut rng).data().iter().map(|s| 0.8 + s).collect();
        let f = Tensor::normal(&[d], 1.0, &mut rng).into_data();
        let mut density = 1.0;
        for i in 0..d {
            let r = (f[i] - mu[i]) / sigma[i];
            density *= (-0.5 * r * r).exp() / (sigma[i] * (2.0 * PI).sqrt());
        }
        worst = worst.max((log_likelihood(&mu, &sigma, &f)? - density.ln()).abs());
    }
    Ok(worst)
}

/// Count of non-positive outputs of the VAE scale head's softplus over
/// `n` random inputs.
pub fn softplus_non_positive(n: usize, seed: u64) -> usize {
    use rand::Rng as _;
    let mut rng = rng_for(seed, "softplus", 0);
    (0..n)
        .filter(|_| {
            let x: f64 = rng.gen_range(-30.0..30.0);
            let s = cmoe::numerics::softplus(x);
            s.is_nan() || s <= 0.0
        })
        .count()
}
