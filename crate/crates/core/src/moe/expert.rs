use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

use super::router::init_scale;

/// Low-rank adapter `B·A` added to a frozen projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    /// `rank x d_in`
    pub a: Tensor,
    /// `d_out x rank`
    pub b: Tensor,
    pub frozen: bool,
    pub origin_task: usize,
    #[serde(skip)]
    pub selection_count: u64,
}

impl LoraExpert {
    /// `A` uniform, `B` zero: the adapter starts as an exact no-op.
    pub fn zero_b<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, origin_task: usize, rng: &mut R) -> Self {
        Self::from_weights(
            Tensor::uniform(&[rank, d_in], init_scale(d_in), rng),
            Tensor::zeros(&[d_out, rank]),
            origin_task,
        )
    }

    pub fn from_weights(a: Tensor, b: Tensor, origin_task: usize) -> Self {
        let mut e = Self {
            a,
            b,
            frozen: false,
            origin_task,
            selection_count: 0,
        };
        e.set_frozen(false);
        e
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.a.set_requires_grad(!frozen);
        self.b.set_requires_grad(!frozen);
    }

    /// `B (A x)` for one token.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let ax: Vec<f64> = (0..self.rank())
            .map(|r| self.a.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        (0..self.d_out())
            .map(|o| self.b.row(o).iter().zip(&ax).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Stable fingerprint of the weights, used to check that mutations
    /// leave existing experts alone.
    pub fn weight_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.a.data().iter().chain(self.b.data()) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}
