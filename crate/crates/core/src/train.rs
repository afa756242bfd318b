//! Minibatch training and evaluation loops over a task's sequences.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{total_loss, LossTerms, LossWeights};
use crate::moe::{aux_loss_on_tape, Backbone, RouteMode};
use crate::numerics::{AdamConfig, AdamW, Bindings, Tape};
use crate::seeding::Rng;
use crate::tasks::{exact_match_count, Batch};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    /// Cross-entropy of each step's batch, before the update.
    pub ce: Vec<f64>,
}

impl PhaseLog {
    pub fn first(&self) -> Option<f64> {
        self.ce.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.ce.last().copied()
    }
}

/// Cross-entropy plus weighted balance loss for one batch under the
/// model's active routers. Returns the total and the plain CE value.
pub fn batch_loss(
    model: &Backbone,
    tape: &mut Tape,
    bindings: &mut Bindings,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(crate::numerics::Var, f64)> {
    let out = model.forward(tape, bindings, &batch.tokens, batch.len(), batch.seq_len, RouteMode::Active)?;
    let (targets, w) = batch.targets();
    let rows = batch.tokens.len();
    let logits = tape.reshape(out.logits, &[rows, model.config.vocab_size])?;
    let ce = tape.cross_entropy(logits, &targets, &w)?;
    let aux = aux_loss_on_tape(tape, &out.traces)?;
    let ce_value = tape.value(ce).data()[0];
    let total = total_loss(
        tape,
        LossTerms {
            ce: Some(ce),
            aux,
            ..Default::default()
        },
        weights,
    )?;
    Ok((total, ce_value))
}

/// Runs `phase.steps` AdamW updates over shuffled passes of `data`,
/// updating only the model's currently trainable tensors.
pub fn run_phase(
    model: &mut Backbone,
    data: &[Vec<usize>],
    answer: Range<usize>,
    phase: &PhaseConfig,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<(PhaseLog, AdamW)> {
    let mut opt = AdamW::for_params(AdamConfig::with_lr(phase.learning_rate), model);
    let mut log = PhaseLog::default();
    if phase.steps == 0 {
        return Ok((log, opt));
    }
    if data.is_empty() || phase.batch_size == 0 {
        return Err(Error::Contract("training phase needs data and a positive batch size".into()));
    }
    let bs = phase.batch_size.min(data.len());
    let pinned = model.pinned_router_rows();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for step in 0..phase.steps {
        if cursor + bs > order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let seqs: Vec<&[usize]> = order[cursor..cursor + bs].iter().map(|&i| data[i].as_slice()).collect();
        cursor += bs;
        let batch = Batch::from_sequences(0, &seqs, answer.clone())?;
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let (loss, ce) = batch_loss(model, &mut tape, &mut bindings, &batch, weights)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::numeric(format!("training step {step}"), "non-finite loss"));
        }
        log.ce.push(ce);
        tape.backward(loss)?;
        bindings.absorb(&tape, model)?;
        opt.step(model)?;
        model.restore_pinned_router_rows(&pinned);
    }
    Ok((log, opt))
}

/// Number of exactly matched sequences under the given routing.
pub fn correct_count(model: &Backbone, seqs: &[&[usize]], answer: Range<usize>, mode: RouteMode<'_>) -> Result<usize> {
    let mut correct = 0;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let batch = Batch::from_sequences(0, chunk, answer.clone())?;
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let out = model.forward(&mut tape, &mut bindings, &batch.tokens, batch.len(), batch.seq_len, mode)?;
        correct += exact_match_count(tape.value(out.logits).data(), model.config.vocab_size, &batch)?;
    }
    Ok(correct)
}

pub fn accuracy(model: &Backbone, seqs: &[&[usize]], answer: Range<usize>, mode: RouteMode<'_>) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Contract("accuracy over an empty set".into()));
    }
    Ok(correct_count(model, seqs, answer, mode)? as f64 / seqs.len() as f64)
}

/// Marks every expert and every active router trainable or frozen.
pub fn set_all_adapters(model: &mut Backbone, trainable: bool) {
    for b in &mut model.blocks {
        for e in &mut b.moe.experts {
            e.set_frozen(!trainable);
        }
        b.moe.active_router.set_trainable(trainable);
    }
}
