use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Weights of the auxiliary terms; cross-entropy always has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub eta: f64,
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            eta: 1e-3,
            kappa: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda", self.lambda), ("eta", self.eta), ("kappa", self.kappa)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    format!("loss.{field}"),
                    format!("must be a finite non-negative number, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Scalar loss components on a tape; absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub ce: Option<Var>,
    pub kl: Option<Var>,
    pub rec: Option<Var>,
    pub aux: Option<Var>,
}

/// `L_CE + λ·L_KL + η·L_rec + κ·L_aux` on the tape.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        ("ce", terms.ce, 1.0),
        ("kl", terms.kl, w.lambda),
        ("rec", terms.rec, w.eta),
        ("aux", terms.aux, w.kappa),
    ];
    let mut acc: Option<Var> = None;
    for (name, var, weight) in parts {
        let Some(v) = var else { continue };
        let value = tape.value(v);
        if value.numel() != 1 {
            return Err(Error::Contract(format!("loss term `{name}` is not a scalar")));
        }
        if !value.data()[0].is_finite() {
            return Err(Error::numeric(format!("loss term `{name}`"), "non-finite value"));
        }
        let scaled = tape.scale(v, weight)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(tape.constant(crate::numerics::Tensor::scalar(0.0))),
    }
}

/// Scalar version of [`total_loss`] over plain values.
pub fn total_loss_value(
    ce: Option<f64>,
    kl: Option<f64>,
    rec: Option<f64>,
    aux: Option<f64>,
    w: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for (name, v, weight) in [("ce", ce, 1.0), ("kl", kl, w.lambda), ("rec", rec, w.eta), ("aux", aux, w.kappa)] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::numeric(format!("loss term `{name}`"), "non-finite value"));
            }
            total += weight * v;
        }
    }
    Ok(total)
}
