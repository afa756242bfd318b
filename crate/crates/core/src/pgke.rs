//! Probe-guided expert growth: temporary probe experts measure where a new
//! task needs capacity, then only those layers receive new experts.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::moe::{derive_router, Backbone, ExpertInit, LoraExpert, RouteMode, Router};
use crate::numerics::{Bindings, Tape};
use crate::seeding::Rng;
use crate::tasks::Batch;
use crate::train::{run_phase, PhaseConfig, PhaseLog};

const STATS_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationMetric {
    TopkFrequency,
    MeanGateProbability,
}

/// Which rows of a derived router train during probing and fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterUpdate {
    /// Every row, including those copied from the previous router.
    Full,
    /// Only the rows appended for new experts; copied rows stay fixed.
    AppendedRows,
}

impl RouterUpdate {
    fn install(self, mut router: Router, inherited: usize) -> Router {
        match self {
            RouterUpdate::Full => router.set_trainable(true),
            RouterUpdate::AppendedRows => router.set_trainable_after(inherited),
        }
        router
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub alpha: f64,
    pub probe_fraction: f64,
    pub n_probes_per_layer: usize,
    pub probe_steps: usize,
    pub activation_metric: ActivationMetric,
    pub n_new_experts_cap: usize,
    pub router_update: RouterUpdate,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            probe_fraction: 0.10,
            n_probes_per_layer: 2,
            probe_steps: 50,
            activation_metric: ActivationMetric::TopkFrequency,
            n_new_experts_cap: 2,
            router_update: RouterUpdate::Full,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::config("probe.alpha", "must be finite"));
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction < 1.0) {
            return Err(Error::config("probe.probe_fraction", "must lie in (0, 1)"));
        }
        if self.n_probes_per_layer == 0 {
            return Err(Error::config("probe.n_probes_per_layer", "must be at least 1"));
        }
        if self.n_new_experts_cap == 0 {
            return Err(Error::config("probe.n_new_experts_cap", "must be at least 1"));
        }
        Ok(())
    }
}

/// Two disjoint subsets of `⌈fraction·n⌉` items each, from a seeded shuffle.
pub fn split_probe_data<T: Clone>(data: &[T], fraction: f64, rng: &mut Rng) -> Result<(Vec<T>, Vec<T>)> {
    if data.len() < 2 {
        return Err(Error::Contract(format!(
            "probe split needs at least 2 samples, got {}",
            data.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("probe.probe_fraction", "must lie in (0, 1)"));
    }
    let k = (fraction * data.len() as f64).ceil() as usize;
    if 2 * k > data.len() {
        return Err(Error::config(
            "probe.probe_fraction",
            format!("two subsets of {k} cannot be disjoint within {} samples", data.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let train = idx[..k].iter().map(|&i| data[i].clone()).collect();
    let eval = idx[k..2 * k].iter().map(|&i| data[i].clone()).collect();
    Ok((train, eval))
}

/// Where the probes of one layer live, and what to restore afterwards.
#[derive(Clone, Debug)]
pub struct ProbeLayer {
    pub experts_before: usize,
    pub probes: Range<usize>,
    pub prev_router: Router,
}

#[derive(Clone, Debug)]
pub struct ProbeHandles {
    pub task: usize,
    pub layers: Vec<ProbeLayer>,
}

/// Adds `n_probes_per_layer` probes (average of the layer's experts) to
/// every layer, freezes every pre-existing expert and installs a probe
/// router derived from `prev_routers`.
pub fn attach_probes(
    model: &mut Backbone,
    prev_routers: &[Router],
    cfg: &ProbeConfig,
    task: usize,
    rng: &mut Rng,
) -> Result<ProbeHandles> {
    if prev_routers.len() != model.blocks.len() {
        return Err(Error::Structural(format!(
            "{} previous routers for {} layers",
            prev_routers.len(),
            model.blocks.len()
        )));
    }
    let mut layers = Vec::with_capacity(model.blocks.len());
    for (block, prev) in model.blocks.iter_mut().zip(prev_routers) {
        let layer = &mut block.moe;
        let before = layer.experts.len();
        if prev.visible_experts != before {
            return Err(Error::Structural(format!(
                "previous router sees {} experts, layer holds {before}",
                prev.visible_experts
            )));
        }
        layer.freeze_experts(|_| true);
        let probes = layer.append_experts(cfg.n_probes_per_layer, ExpertInit::AverageOfGroup, task, rng)?;
        let router = derive_router(prev, cfg.n_probes_per_layer, task, rng);
        layer.active_router = cfg.router_update.install(router, before);
        layers.push(ProbeLayer {
            experts_before: before,
            probes,
            prev_router: prev.clone(),
        });
    }
    Ok(ProbeHandles { task, layers })
}

/// Trains the probes and probe routers on `x_train` at the probe learning
/// rate.
#[allow(clippy::too_many_arguments)]
pub fn train_probes(
    model: &mut Backbone,
    x_train: &[Vec<usize>],
    answer: Range<usize>,
    cfg: &ProbeConfig,
    learning_rate: f64,
    batch_size: usize,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<PhaseLog> {
    let phase = PhaseConfig {
        steps: cfg.probe_steps,
        batch_size,
        learning_rate,
    };
    Ok(run_phase(model, x_train, answer, &phase, weights, rng)?.0)
}

/// Per-layer probe measurement and the expansion decision derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub layer: usize,
    /// Activation per expert under the configured metric.
    pub act: Vec<f64>,
    pub act_topk_frequency: Vec<f64>,
    pub act_mean_gate_probability: Vec<f64>,
    pub probe_indices: Vec<usize>,
    pub threshold: f64,
    pub selected: bool,
    pub n_selected_probes: usize,
}

/// Routes every token of `x_eval` through the probe routers and reports
/// per-expert activation in each layer.
pub fn activation_stats(
    model: &Backbone,
    handles: &ProbeHandles,
    x_eval: &[Vec<usize>],
    answer: Range<usize>,
    cfg: &ProbeConfig,
) -> Result<Vec<ActivationReport>> {
    if x_eval.is_empty() {
        return Err(Error::Contract("activation stats over an empty probe eval set".into()));
    }
    let n_layers = model.blocks.len();
    let mut selections: Vec<Vec<u64>> = model
        .blocks
        .iter()
        .map(|b| vec![0; b.moe.active_router.visible_experts])
        .collect();
    let mut prob_sums: Vec<Vec<f64>> = selections.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut tokens = 0usize;
    let seqs: Vec<&[usize]> = x_eval.iter().map(Vec::as_slice).collect();
    for chunk in seqs.chunks(STATS_CHUNK) {
        let batch = Batch::from_sequences(0, chunk, answer.clone())?;
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let out = model.forward(&mut tape, &mut bindings, &batch.tokens, batch.len(), batch.seq_len, RouteMode::Active)?;
        for (h, trace) in out.traces.iter().enumerate() {
            for (acc, s) in selections[h].iter_mut().zip(&trace.selections) {
                *acc += s;
            }
            for (acc, p) in prob_sums[h].iter_mut().zip(&trace.mean_probs) {
                *acc += p * trace.tokens as f64;
            }
        }
        tokens += batch.tokens.len();
    }
    let mut reports = Vec::with_capacity(n_layers);
    for (h, layer) in handles.layers.iter().enumerate() {
        let total: u64 = selections[h].iter().sum();
        let freq: Vec<f64> = selections[h].iter().map(|&s| s as f64 / total as f64).collect();
        let gate: Vec<f64> = prob_sums[h].iter().map(|&p| p / tokens as f64).collect();
        let act = match cfg.activation_metric {
            ActivationMetric::TopkFrequency => freq.clone(),
            ActivationMetric::MeanGateProbability => gate.clone(),
        };
        let probe_indices: Vec<usize> = layer.probes.clone().collect();
        let decision = decide_layer(&act, &probe_indices, cfg.alpha, cfg.n_new_experts_cap);
        reports.push(ActivationReport {
            layer: h,
            act,
            act_topk_frequency: freq,
            act_mean_gate_probability: gate,
            probe_indices,
            threshold: decision.threshold,
            selected: decision.n_new > 0,
            n_selected_probes: decision.n_new,
        });
    }
    Ok(reports)
}

/// `mean(act) − alpha·std(act)` with the population standard deviation.
pub fn expansion_threshold(act: &[f64], alpha: f64) -> f64 {
    let n = act.len() as f64;
    let mean = act.iter().sum::<f64>() / n;
    let var = act.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    mean - alpha * var.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub threshold: f64,
    /// Probes strictly above the threshold, capped.
    pub n_new: usize,
    /// Most activated probe, lowest index on ties.
    pub top_probe: usize,
}

pub fn decide_layer(act: &[f64], probes: &[usize], alpha: f64, cap: usize) -> LayerDecision {
    let threshold = expansion_threshold(act, alpha);
    let above = probes.iter().filter(|&&p| act[p] > threshold).count();
    let mut top_probe = probes[0];
    for &p in probes {
        if act[p] > act[top_probe] {
            top_probe = p;
        }
    }
    LayerDecision {
        threshold,
        n_new: above.min(cap),
        top_probe,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub n_new: usize,
    pub copy_source: usize,
}

/// Layers to expand; layers absent from the map gain no experts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub layers: BTreeMap<usize, LayerPlan>,
}

impl ExpansionPlan {
    pub fn n_new(&self, layer: usize) -> usize {
        self.layers.get(&layer).map_or(0, |p| p.n_new)
    }

    pub fn expanded_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every layer grows by `cap` experts.
    pub fn every_layer(n_layers: usize, cap: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|h| (h, LayerPlan { n_new: cap, copy_source: 0 }))
                .collect(),
        }
    }
}

pub fn select_expansion(reports: &[ActivationReport], cfg: &ProbeConfig) -> ExpansionPlan {
    let mut plan = ExpansionPlan::default();
    for r in reports {
        let d = decide_layer(&r.act, &r.probe_indices, cfg.alpha, cfg.n_new_experts_cap);
        if d.n_new > 0 {
            plan.layers.insert(
                r.layer,
                LayerPlan {
                    n_new: d.n_new,
                    copy_source: d.top_probe,
                },
            );
        }
    }
    plan
}

/// Removes the probes, grows the planned layers by copies of their top
/// probe, installs `R_i` derived from the previous routers and fine-tunes
/// the new experts and `R_i` on the task data. Returns the frozen `R_i`.
#[allow(clippy::too_many_arguments)]
pub fn expand_and_finetune(
    model: &mut Backbone,
    handles: ProbeHandles,
    plan: &ExpansionPlan,
    data: &[Vec<usize>],
    answer: Range<usize>,
    phase: &PhaseConfig,
    router_update: RouterUpdate,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<(Vec<Router>, PhaseLog)> {
    if let Some((&h, _)) = plan.layers.iter().find(|(&h, _)| h >= handles.layers.len()) {
        return Err(Error::Structural(format!(
            "expansion plan names layer {h} but the model has {}",
            handles.layers.len()
        )));
    }
    let task = handles.task;
    for (h, (block, probe)) in model.blocks.iter_mut().zip(&handles.layers).enumerate() {
        let layer = &mut block.moe;
        let copy = match plan.layers.get(&h) {
            Some(p) => {
                if !probe.probes.contains(&p.copy_source) {
                    return Err(Error::Structural(format!(
                        "layer {h} copy source {} is not a probe",
                        p.copy_source
                    )));
                }
                let src = &layer.experts[p.copy_source];
                Some((p.n_new, src.a.clone(), src.b.clone()))
            }
            None => None,
        };
        layer.truncate_experts(probe.experts_before);
        let n_new = copy.as_ref().map_or(0, |c| c.0);
        if let Some((n, a, b)) = copy {
            for _ in 0..n {
                layer.experts.push(LoraExpert::from_weights(a.clone(), b.clone(), task));
            }
        }
        let router = derive_router(&probe.prev_router, n_new, task, rng);
        layer.active_router = router_update.install(router, probe.experts_before);
    }
    let (log, _) = run_phase(model, data, answer, phase, weights, rng)?;
    let mut routers = Vec::with_capacity(model.blocks.len());
    for block in &mut model.blocks {
        block.moe.freeze_experts(|_| true);
        block.moe.active_router.set_trainable(false);
        routers.push(block.moe.active_router.clone());
    }
    Ok((routers, log))
}

/// Trainable parameters a task adds: new experts plus its full router.
pub fn added_params(expert_counts_before: &[usize], plan: &ExpansionPlan, expert_params: usize, d_in: usize) -> usize {
    expert_counts_before
        .iter()
        .enumerate()
        .map(|(h, &n)| {
            let s = plan.n_new(h);
            s * expert_params + (n + s) * d_in
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub added: usize,
    pub every_layer: usize,
    pub ratio: f64,
}

pub fn param_report(
    expert_counts_before: &[usize],
    plan: &ExpansionPlan,
    cap: usize,
    expert_params: usize,
    d_in: usize,
) -> ParamReport {
    let added = added_params(expert_counts_before, plan, expert_params, d_in);
    let every = added_params(
        expert_counts_before,
        &ExpansionPlan::every_layer(expert_counts_before.len(), cap),
        expert_params,
        d_in,
    );
    ParamReport {
        added,
        every_layer: every,
        ratio: added as f64 / every as f64,
    }
}

/// Everything PGKE decided for one task, for the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub task: usize,
    pub alpha: f64,
    pub metric: ActivationMetric,
    pub layers: Vec<ActivationReport>,
    pub plan: ExpansionPlan,
    pub params_before: usize,
    pub params_after: usize,
    pub params: ParamReport,
    pub probe_ce_first: Option<f64>,
    pub probe_ce_last: Option<f64>,
}
