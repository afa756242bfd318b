use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bindings, Tape, Tensor, Var};

use super::expert::LoraExpert;
use super::router::{route, top_k_mask, Router};

/// Frozen projection `W0` adapted by a growing group of LoRA experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    /// `d_out x d_in`, never trained.
    pub w0: Tensor,
    pub experts: Vec<LoraExpert>,
    pub active_router: Router,
}

/// Where the weights of appended experts come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertInit {
    CopyOf(usize),
    AverageOfGroup,
    ZeroB,
}

/// Which gating to apply inside a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Gating<'a> {
    /// Base path only: the layer returns `W0 x`.
    BaseOnly,
    /// Gate with this router; `trainable` binds its matrix for gradients.
    Router { router: &'a Router, trainable: bool },
}

/// Per-layer routing record of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub tokens: usize,
    /// Top-k selection count per visible expert.
    pub selections: Vec<u64>,
    /// Mean full-softmax router probability per visible expert.
    pub mean_probs: Vec<f64>,
    /// Router logits `[tokens, visible]` on the tape.
    pub logits: Var,
}

impl MoeLayer {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        n_experts: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w0 = Tensor::normal(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng);
        let experts = (0..n_experts)
            .map(|_| LoraExpert::zero_b(d_in, d_out, rank, 0, rng))
            .collect();
        let active_router = Router::new(n_experts, d_in, top_k, 0, rng)?;
        Ok(Self {
            w0,
            experts,
            active_router,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn rank(&self) -> usize {
        self.experts.first().map_or(1, LoraExpert::rank)
    }

    pub fn check_router(&self, router: &Router) -> Result<()> {
        router.validate()?;
        if router.visible_experts > self.experts.len() {
            return Err(Error::Structural(format!(
                "router sees {} experts but the layer holds {}",
                router.visible_experts,
                self.experts.len()
            )));
        }
        if router.d_in() != self.d_in() {
            return Err(Error::Dimension {
                op: "moe router",
                lhs: router.g.shape().to_vec(),
                rhs: self.w0.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `W0 x + Σ gate_i B_i A_i x` for a single token under the active
    /// router. With `measure` on, bumps `selection_count` of the chosen
    /// experts.
    pub fn moe_forward(&mut self, x: &[f64], measure: bool) -> Result<Vec<f64>> {
        self.check_router(&self.active_router)?;
        let gates = route(&self.active_router, x)?;
        let mut out: Vec<f64> = (0..self.d_out())
            .map(|o| self.w0.row(o).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        for (i, &g) in gates.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            if measure {
                self.experts[i].selection_count += 1;
            }
            for (o, v) in out.iter_mut().zip(self.experts[i].apply(x)) {
                *o += g * v;
            }
        }
        Ok(out)
    }

    pub fn reset_selection_counts(&mut self) {
        self.experts.iter_mut().for_each(|e| e.selection_count = 0);
    }

    /// Tape forward over `x: [tokens, d_in]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bindings: &mut Bindings,
        prefix: &str,
        x: Var,
        gating: Gating<'_>,
    ) -> Result<(Var, Option<LayerTrace>)> {
        let w0 = bindings.bind(tape, format!("{prefix}.w0"), &self.w0);
        let base = tape.linear(x, w0)?;
        let Gating::Router { router, trainable } = gating else {
            return Ok((base, None));
        };
        self.check_router(router)?;
        let g = if trainable {
            bindings.bind(tape, format!("{prefix}.router.g"), &router.g)
        } else {
            tape.leaf(&router.g)
        };
        let logits = tape.linear(x, g)?;
        let n_vis = router.visible_experts;
        let tokens = tape.value(x).rows();

        let lv = tape.value(logits);
        let mut keep = Vec::with_capacity(lv.numel());
        let mut selections = vec![0u64; n_vis];
        let mut mean_probs = vec![0.0; n_vis];
        for t in 0..tokens {
            let row = lv.row(t);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("moe route", "non-finite router logits"));
            }
            let mask = top_k_mask(row, router.top_k);
            for (i, &m) in mask.iter().enumerate() {
                selections[i] += m as u64;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in mean_probs.iter_mut().zip(row) {
                *p += (v - max).exp() / z / tokens as f64;
            }
            keep.extend(mask);
        }
        let gates = tape.masked_softmax(logits, Some(&keep))?;

        let mut ys = Vec::with_capacity(n_vis);
        for (i, e) in self.experts[..n_vis].iter().enumerate() {
            let a = bindings.bind(tape, format!("{prefix}.expert{i}.a"), &e.a);
            let b = bindings.bind(tape, format!("{prefix}.expert{i}.b"), &e.b);
            if selections[i] == 0 {
                ys.push(tape.constant(Tensor::zeros(&[1, tokens, self.d_out()])));
                continue;
            }
            let ax = tape.linear(x, a)?;
            let bax = tape.linear(ax, b)?;
            ys.push(tape.reshape(bax, &[1, tokens, self.d_out()])?);
        }
        let stacked = tape.concat(&ys)?;
        let mixed = tape.gate_mix(gates, stacked)?;
        let out = tape.add(base, mixed)?;
        Ok((
            out,
            Some(LayerTrace {
                tokens,
                selections,
                mean_probs,
                logits,
            }),
        ))
    }

    /// Appends `n` unfrozen experts tagged with `task`; returns their indices.
    pub fn append_experts<R: Rng + ?Sized>(
        &mut self,
        n: usize,
        init: ExpertInit,
        task: usize,
        rng: &mut R,
    ) -> Result<Range<usize>> {
        if n == 0 {
            return Err(Error::Contract("append_experts needs n >= 1".into()));
        }
        let start = self.experts.len();
        let template = match init {
            ExpertInit::CopyOf(j) => {
                let src = self.experts.get(j).ok_or(Error::Index {
                    context: "append_experts copy source",
                    index: j,
                    len: start,
                })?;
                Some((src.a.clone(), src.b.clone()))
            }
            ExpertInit::AverageOfGroup => {
                if start == 0 {
                    return Err(Error::Contract("cannot average an empty expert group".into()));
                }
                Some(average_weights(&self.experts))
            }
            ExpertInit::ZeroB => None,
        };
        let (d_in, d_out, rank) = (self.d_in(), self.d_out(), self.rank());
        for _ in 0..n {
            let e = match &template {
                Some((a, b)) => LoraExpert::from_weights(a.clone(), b.clone(), task),
                None => LoraExpert::zero_b(d_in, d_out, rank, task, rng),
            };
            self.experts.push(e);
        }
        Ok(start..start + n)
    }

    /// Drops experts from `len` onward.
    pub fn truncate_experts(&mut self, len: usize) {
        self.experts.truncate(len);
    }

    /// Sets `frozen` on every expert whose origin task satisfies `pred`.
    pub fn freeze_experts(&mut self, pred: impl Fn(usize) -> bool) {
        for e in &mut self.experts {
            if pred(e.origin_task) {
                e.set_frozen(true);
            }
        }
    }
}

/// Elementwise mean of the group's `A` and `B` matrices.
pub fn average_weights(experts: &[LoraExpert]) -> (Tensor, Tensor) {
    let n = experts.len() as f64;
    let mut a = experts[0].a.clone();
    let mut b = experts[0].b.clone();
    for e in &experts[1..] {
        a.data_mut().iter_mut().zip(e.a.data()).for_each(|(x, y)| *x += y);
        b.data_mut().iter_mut().zip(e.b.data()).for_each(|(x, y)| *x += y);
    }
    a.data_mut().iter_mut().for_each(|x| *x /= n);
    b.data_mut().iter_mut().for_each(|x| *x /= n);
    a.set_requires_grad(false);
    b.set_requires_grad(false);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(n: usize, k: usize) -> MoeLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut l = MoeLayer::new(6, 5, 2, n, k, &mut rng).unwrap();
        for e in &mut l.experts {
            e.b = Tensor::normal(&[5, 2], 0.3, &mut rng);
        }
        l
    }

    #[allow(clippy::needless_range_loop)]
    fn dense(l: &MoeLayer, x: &[f64]) -> Vec<f64> {
        let gates = route(&l.active_router, x).unwrap();
        let mut out = vec![0.0; l.d_out()];
        for o in 0..l.d_out() {
            for i in 0..l.d_in() {
                out[o] += l.w0.at2(o, i) * x[i];
            }
        }
        for (e, g) in l.experts.iter().zip(&gates) {
            // explicit B A product, then apply
            let r = e.rank();
            for o in 0..l.d_out() {
                let mut acc = 0.0;
                for i in 0..l.d_in() {
                    let ba: f64 = (0..r).map(|k| e.b.at2(o, k) * e.a.at2(k, i)).sum();
                    acc += ba * x[i];
                }
                out[o] += g * acc;
            }
        }
        out
    }

    #[test]
    fn zero_adapter_gives_base() {
        let mut l = layer(1, 1);
        l.experts[0].b = Tensor::zeros(&[5, 2]);
        let x = [0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
        let out = l.moe_forward(&x, false).unwrap();
        let base: Vec<f64> = (0..5).map(|o| l.w0.row(o).iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        assert_eq!(out, base);
    }

    #[test]
    fn single_expert_matches_dense_product() {
        let mut l = layer(1, 1);
        let x = [0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
        let out = l.moe_forward(&x, false).unwrap();
        let d = dense(&l, &x);
        for (a, b) in out.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_gates() {
        let mut l = layer(3, 2);
        l.experts[1] = l.experts[0].clone();
        l.active_router.g = Tensor::zeros(&[3, 6]);
        let x = [0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
        let two = l.moe_forward(&x, false).unwrap();
        let mut single = l.clone();
        single.experts.truncate(1);
        single.active_router = Router {
            g: Tensor::zeros(&[1, 6]),
            top_k: 1,
            owner_task: 0,
            visible_experts: 1,
            pinned_rows: 0,
        };
        let one = single.moe_forward(&x, false).unwrap();
        for (a, b) in two.iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn measurement_counts_selected() {
        let mut l = layer(4, 2);
        l.moe_forward(&[1.0; 6], true).unwrap();
        l.moe_forward(&[1.0; 6], false).unwrap();
        let total: u64 = l.experts.iter().map(|e| e.selection_count).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn router_count_mismatch_is_structural() {
        let mut l = layer(2, 1);
        l.experts.truncate(1);
        assert!(matches!(l.moe_forward(&[0.0; 6], false), Err(Error::Structural(_))));
    }

    #[test]
    fn append_average_copy_and_indices() {
        let mut l = layer(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = l.append_experts(1, ExpertInit::AverageOfGroup, 1, &mut rng).unwrap();
        assert_eq!(r, 2..3);
        for k in 0..l.experts[0].a.numel() {
            let want = (l.experts[0].a.data()[k] + l.experts[1].a.data()[k]) / 2.0;
            assert_eq!(l.experts[2].a.data()[k], want);
        }
        let r = l.append_experts(2, ExpertInit::CopyOf(1), 1, &mut rng).unwrap();
        assert_eq!(r, 3..5);
        assert_eq!(l.experts[3].weight_hash(), l.experts[1].weight_hash());
        assert!(!l.experts[4].frozen && l.experts[4].origin_task == 1);
        assert!(matches!(
            l.append_experts(1, ExpertInit::CopyOf(99), 1, &mut rng),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn freeze_by_origin() {
        let mut l = layer(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        l.append_experts(1, ExpertInit::ZeroB, 1, &mut rng).unwrap();
        l.freeze_experts(|t| t < 1);
        assert!(l.experts[0].frozen && l.experts[1].frozen && !l.experts[2].frozen);
        assert!(!l.experts[0].a.requires_grad());
        let before: Vec<bool> = l.experts.iter().map(|e| e.frozen).collect();
        l.freeze_experts(|_| false);
        assert_eq!(before, l.experts.iter().map(|e| e.frozen).collect::<Vec<_>>());
    }

    #[test]
    fn tape_forward_matches_dense() {
        let l = layer(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::normal(&[7, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let xv = tape.constant(x.clone());
        let (out, trace) = l
            .forward(&mut tape, &mut b, "l", xv, Gating::Router { router: &l.active_router, trainable: false })
            .unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.selections.iter().sum::<u64>(), 14);
        for t in 0..7 {
            let d = dense(&l, x.row(t));
            for (a, b) in tape.value(out).row(t).iter().zip(&d) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
