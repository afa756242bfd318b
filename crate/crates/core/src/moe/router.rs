use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Linear gate over the experts visible to one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    /// `visible_experts x d_in` gating matrix.
    pub g: Tensor,
    pub top_k: usize,
    pub owner_task: usize,
    pub visible_experts: usize,
    /// Leading rows held fixed while the router trains.
    #[serde(default)]
    pub pinned_rows: usize,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(
        visible_experts: usize,
        d_in: usize,
        top_k: usize,
        owner_task: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Tensor::uniform(&[visible_experts, d_in], init_scale(d_in), rng);
        let r = Self {
            g,
            top_k,
            owner_task,
            visible_experts,
            pinned_rows: 0,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn d_in(&self) -> usize {
        self.g.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.g.rows() != self.visible_experts {
            return Err(Error::Structural(format!(
                "router has {} rows but {} visible experts",
                self.g.rows(),
                self.visible_experts
            )));
        }
        if self.top_k == 0 || self.top_k > self.visible_experts {
            return Err(Error::Structural(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.visible_experts
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.visible_experts)
            .map(|i| self.g.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.g.set_requires_grad(on);
        self.pinned_rows = 0;
    }

    /// Trainable except for the first `rows` rows.
    pub fn set_trainable_after(&mut self, rows: usize) {
        self.g.set_requires_grad(true);
        self.pinned_rows = rows.min(self.visible_experts);
    }
}

pub(crate) fn init_scale(d_in: usize) -> f64 {
    1.0 / (d_in as f64).sqrt()
}

/// Indices of the `k` largest logits, ties broken toward the lower index.
/// Returned in descending logit order.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k mask for a single row of logits.
pub fn top_k_mask(logits: &[f64], k: usize) -> Vec<bool> {
    let mut keep = vec![false; logits.len()];
    for i in top_k_indices(logits, k) {
        keep[i] = true;
    }
    keep
}

/// Gate vector from raw logits: softmax restricted to the top-k entries,
/// zeros elsewhere.
pub fn gates_from_logits(logits: &[f64], top_k: usize) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("route", "non-finite router logits"));
    }
    if top_k == 0 || top_k > logits.len() {
        return Err(Error::Structural(format!(
            "top_k {top_k} outside 1..={}",
            logits.len()
        )));
    }
    let sel = top_k_indices(logits, top_k);
    let max = logits[sel[0]];
    let mut gates = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for &i in &sel {
        gates[i] = (logits[i] - max).exp();
        sum += gates[i];
    }
    gates.iter_mut().for_each(|g| *g /= sum);
    Ok(gates)
}

/// Gate vector of `router` for one token feature.
pub fn route(router: &Router, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != router.d_in() {
        return Err(Error::Dimension {
            op: "route",
            lhs: router.g.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("route", "non-finite token feature"));
    }
    gates_from_logits(&router.logits(x), router.top_k)
}

/// Copy of `prev` with `extra_rows` freshly initialized gate rows appended.
pub fn derive_router<R: Rng + ?Sized>(
    prev: &Router,
    extra_rows: usize,
    owner_task: usize,
    rng: &mut R,
) -> Router {
    let d_in = prev.d_in();
    let mut data = prev.g.data().to_vec();
    if extra_rows > 0 {
        let fresh = Tensor::uniform(&[extra_rows, d_in], init_scale(d_in), rng);
        data.extend_from_slice(fresh.data());
    }
    let visible = prev.visible_experts + extra_rows;
    Router {
        g: Tensor::new(&[visible, d_in], data).expect("consistent router shape"),
        top_k: prev.top_k,
        owner_task,
        visible_experts: visible,
        pinned_rows: 0,
    }
}

/// Switch-style balance loss `N_e · Σ f_i P_i`.
///
/// `selections[i]` counts tokens whose top-k set contains expert `i`;
/// `mean_probs[i]` is the mean full-softmax router probability of expert `i`.
pub fn aux_balance_loss(selections: &[u64], mean_probs: &[f64]) -> Result<f64> {
    let total: u64 = selections.iter().sum();
    if total == 0 {
        return Err(Error::Contract("balance loss over an empty batch".into()));
    }
    if selections.len() != mean_probs.len() {
        return Err(Error::Dimension {
            op: "aux_balance_loss",
            lhs: vec![selections.len()],
            rhs: vec![mean_probs.len()],
        });
    }
    let n = selections.len() as f64;
    Ok(n * selections
        .iter()
        .zip(mean_probs)
        .map(|(&s, p)| s as f64 / total as f64 * p)
        .sum::<f64>())
}
