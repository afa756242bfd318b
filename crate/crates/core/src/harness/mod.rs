//! Continual-learning driver: runs the per-task pipeline, evaluates under
//! every routing mode and records the run.

mod checkpoint;
mod metrics;
mod vault;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{RoutingMode, RunConfig};
use crate::error::{Error, Result};
use crate::moe::{Backbone, RouteMode};
use crate::numerics::{AdamW, Parameters};
use crate::pgke::{
    activation_stats, attach_probes, expand_and_finetune, param_report, select_expansion, split_probe_data,
    train_probes, ExpansionReport,
};
use crate::ptl::{build_primitive, fit_task_vae, locate_task, BankEntry, PrimitiveBank, TaskPrimitive};
use crate::seeding::rng_for;
use crate::tasks::{eval_set, Similarity, StreamManifest, TaskSpec};
use crate::train::{correct_count, run_phase, set_all_adapters, PhaseConfig, PhaseLog};

pub use checkpoint::{
    read_file, sha256_hex, write_atomic, BlobEntry, BlobReader, BlobWriter, BLOB_FILE, CHECKPOINT_VERSION,
    MANIFEST_FILE,
};
pub use metrics::{bwt, mean_accuracy, metrics_csv, summarize, AccuracyMatrix, ModeSummary, Setting, CSV_HEADER};
pub use vault::{DataVault, SlotState};

pub const RUN_MANIFEST_VERSION: u32 = 1;

/// What happened while training one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub family: String,
    pub expansion: Option<ExpansionReport>,
    pub expert_counts: Vec<usize>,
    pub total_params: usize,
    pub train_ce_first: Option<f64>,
    pub train_ce_last: Option<f64>,
    pub primitive: TaskPrimitive,
    pub shared_ce_last: Option<f64>,
}

/// Distances between per-task mean features relative to their spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Smallest distance between two task means.
    pub min_mean_distance: f64,
    /// Largest within-task feature std (root of the mean per-coordinate
    /// variance).
    pub max_within_std: f64,
}

impl SeparationReport {
    pub fn separated(&self) -> bool {
        self.min_mean_distance > self.max_within_std
    }
}

/// Full mutable state of a continual-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub config: RunConfig,
    pub stream: StreamManifest,
    pub model: Backbone,
    pub bank: PrimitiveBank,
    /// Single-router baseline trained on every task in turn.
    pub shared: Option<Backbone>,
    pub vault: DataVault,
    pub records: Vec<TaskRecord>,
    pub matrices: BTreeMap<RoutingMode, AccuracyMatrix>,
    /// Optimizer of the most recent training phase.
    pub optimizer: Option<AdamW>,
    pub separation: Option<SeparationReport>,
}

impl Learner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let stream = StreamManifest::build(&config.stream, config.seed)?;
        Self::with_stream(config, stream)
    }

    /// Starts a run on an explicit stream, e.g. one imported from a manifest.
    pub fn with_stream(config: RunConfig, stream: StreamManifest) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "model-init", 0);
        let model = Backbone::new(config.model.clone(), &mut rng)?;
        let shared = config.eval.shared_baseline.then(|| model.clone());
        let separation = if stream.config.similarity == Similarity::Disjoint {
            let rep = separation(&model, &stream.tasks)?;
            if !rep.separated() {
                return Err(Error::Contract(format!(
                    "disjoint stream is not separable: min mean distance {:.4} <= within-task std {:.4}",
                    rep.min_mean_distance, rep.max_within_std
                )));
            }
            Some(rep)
        } else {
            None
        };
        let matrices = config
            .eval
            .routing
            .iter()
            .map(|&m| (m, AccuracyMatrix::new(stream.tasks.len())))
            .collect();
        Ok(Self {
            vault: DataVault::new(stream.tasks.clone()),
            config,
            stream,
            model,
            bank: PrimitiveBank::default(),
            shared,
            records: Vec::new(),
            matrices,
            optimizer: None,
            separation,
        })
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.stream.tasks
    }

    pub fn next_task(&self) -> usize {
        self.bank.len()
    }

    pub fn is_finished(&self) -> bool {
        self.next_task() == self.specs().len()
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Trains the next task of the stream through the whole pipeline and
    /// seals its data.
    pub fn train_task(&mut self) -> Result<&TaskRecord> {
        let task = self.next_task();
        let spec = self
            .specs()
            .get(task)
            .cloned()
            .ok_or_else(|| Error::Contract("every task of the stream is already trained".into()))?;
        let data = self.vault.open(task).map_err(|e| e.in_stage("data"))?;
        let answer = spec.answer_positions();
        let cfg = self.config.clone();
        let seed = self.seed();
        let t = task as u64;

        let (expansion, log) = if task == 0 {
            set_all_adapters(&mut self.model, true);
            let phase = PhaseConfig {
                steps: cfg.training.bootstrap_steps,
                batch_size: cfg.training.batch_size,
                learning_rate: cfg.training.learning_rate,
            };
            let mut rng = rng_for(seed, "bootstrap", t);
            let (log, opt) = run_phase(&mut self.model, &data, answer.clone(), &phase, &cfg.loss, &mut rng)
                .map_err(|e| e.in_stage("bootstrap"))?;
            set_all_adapters(&mut self.model, false);
            self.optimizer = Some(opt);
            (None, log)
        } else {
            let (report, log) = self.grow(task, &data, &spec).map_err(|e| e.in_stage("pgke"))?;
            (Some(report), log)
        };
        let routers = self.model.active_routers();

        let prompts: Vec<&[usize]> = data.iter().map(|s| spec.prompt(s)).collect();
        let features = self
            .model
            .last_token_features(&prompts)
            .map_err(|e| e.in_stage("features"))?;
        let mut rng = rng_for(seed, "vae-fit", t);
        let vae = fit_task_vae(&features, &cfg.ptl, &cfg.loss, task, &mut rng).map_err(|e| e.in_stage("vae-fit"))?;
        let recent = &features[features.len().saturating_sub(cfg.ptl.t_recent)..];
        let mut rng = rng_for(seed, "primitive", t);
        let primitive = build_primitive(&vae, recent, cfg.ptl.n_rep, cfg.ptl.rep_average, &mut rng)
            .map_err(|e| e.in_stage("primitive"))?;
        self.bank
            .insert(BankEntry {
                primitive: primitive.clone(),
                vae,
                routers,
            })
            .map_err(|e| e.in_stage("bank"))?;

        let shared_ce_last = match self.shared.as_mut() {
            Some(shared) => {
                set_all_adapters(shared, true);
                let phase = PhaseConfig {
                    steps: if task == 0 {
                        cfg.training.bootstrap_steps
                    } else {
                        cfg.training.finetune_steps
                    },
                    batch_size: cfg.training.batch_size,
                    learning_rate: cfg.training.learning_rate,
                };
                let mut rng = rng_for(seed, "shared", t);
                let (log, _) = run_phase(shared, &data, answer, &phase, &cfg.loss, &mut rng)
                    .map_err(|e| e.in_stage("shared-baseline"))?;
                set_all_adapters(shared, false);
                log.last()
            }
            None => None,
        };
        drop(data);
        self.vault.seal(task)?;

        self.records.push(TaskRecord {
            task,
            family: spec.family.to_string(),
            expansion,
            expert_counts: self.model.expert_counts(),
            total_params: self.model.param_count(),
            train_ce_first: log.first(),
            train_ce_last: log.last(),
            primitive,
            shared_ce_last,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    fn grow(&mut self, task: usize, data: &[Vec<usize>], spec: &TaskSpec) -> Result<(ExpansionReport, PhaseLog)> {
        let cfg = self.config.clone();
        let seed = self.seed();
        let t = task as u64;
        let answer = spec.answer_positions();
        let prev = self.bank.routers(task - 1)?.to_vec();
        let counts_before = self.model.expert_counts();
        let params_before = self.model.param_count();

        let mut rng = rng_for(seed, "probe-split", t);
        let (x_train, x_eval) =
            split_probe_data(data, cfg.probe.probe_fraction, &mut rng).map_err(|e| e.in_stage("split"))?;
        let mut rng = rng_for(seed, "probe-attach", t);
        let handles =
            attach_probes(&mut self.model, &prev, &cfg.probe, task, &mut rng).map_err(|e| e.in_stage("attach"))?;
        let mut rng = rng_for(seed, "probe-train", t);
        let probe_log = train_probes(
            &mut self.model,
            &x_train,
            answer.clone(),
            &cfg.probe,
            cfg.training.probe_learning_rate,
            cfg.training.batch_size,
            &cfg.loss,
            &mut rng,
        )
        .map_err(|e| e.in_stage("probe-train"))?;
        let layers = activation_stats(&self.model, &handles, &x_eval, answer.clone(), &cfg.probe)
            .map_err(|e| e.in_stage("activation"))?;
        let plan = select_expansion(&layers, &cfg.probe);
        let phase = PhaseConfig {
            steps: cfg.training.finetune_steps,
            batch_size: cfg.training.batch_size,
            learning_rate: cfg.training.learning_rate,
        };
        let mut rng = rng_for(seed, "expand", t);
        let (_, log) = expand_and_finetune(&mut self.model, handles, &plan, data, answer, &phase, cfg.probe.router_update, &cfg.loss, &mut rng)
            .map_err(|e| e.in_stage("expand"))?;
        let layer = &self.model.blocks[0].moe;
        let expert_params = layer.rank() * (layer.d_in() + layer.d_out());
        let params = param_report(
            &counts_before,
            &plan,
            cfg.probe.n_new_experts_cap,
            expert_params,
            layer.d_in(),
        );
        Ok((
            ExpansionReport {
                task,
                alpha: cfg.probe.alpha,
                metric: cfg.probe.activation_metric,
                layers,
                plan,
                params_before,
                params_after: self.model.param_count(),
                params,
                probe_ce_first: probe_log.first(),
                probe_ce_last: probe_log.last(),
            },
            log,
        ))
    }

    /// Row `j` of the accuracy matrix under `mode`: accuracy on each task
    /// `i <= j` with the bank as it stands after task `j`.
    pub fn evaluate_all(&self, j: usize, mode: RoutingMode) -> Result<Vec<f64>> {
        if j >= self.bank.len() {
            return Err(Error::Contract(format!(
                "cannot evaluate after task {j}: only {} tasks trained",
                self.bank.len()
            )));
        }
        let seed = self.seed();
        let mut row = Vec::with_capacity(j + 1);
        for (i, spec) in self.specs()[..=j].iter().enumerate() {
            let eval = eval_set(spec);
            let seqs: Vec<&[usize]> = eval.iter().map(Vec::as_slice).collect();
            let answer = spec.answer_positions();
            let tag = (j * self.specs().len() + i) as u64;
            let choice: Vec<usize> = match mode {
                RoutingMode::Shared => {
                    let shared = self
                        .shared
                        .as_ref()
                        .ok_or_else(|| Error::config("eval.routing", "`shared` needs the baseline model"))?;
                    let c = correct_count(shared, &seqs, answer, RouteMode::Active)?;
                    row.push(c as f64 / seqs.len() as f64);
                    continue;
                }
                RoutingMode::Oracle => vec![i; seqs.len()],
                RoutingMode::Last => vec![j; seqs.len()],
                RoutingMode::Random => {
                    let mut rng = rng_for(seed, "random-route", tag);
                    (0..seqs.len()).map(|_| rng.gen_range(0..=j)).collect()
                }
                RoutingMode::Ptl => {
                    let prompts: Vec<&[usize]> = eval.iter().map(|s| spec.prompt(s)).collect();
                    let feats = self.model.last_token_features(&prompts)?;
                    self.locate_all(&feats, j, tag)?
                }
            };
            let mut correct = 0;
            for r in 0..=j {
                let group: Vec<&[usize]> = seqs.iter().zip(&choice).filter(|(_, &c)| c == r).map(|(s, _)| *s).collect();
                if group.is_empty() {
                    continue;
                }
                let routers = self.bank.routers(r)?;
                correct += correct_count(&self.model, &group, answer.clone(), RouteMode::Fixed(routers))?;
            }
            row.push(correct as f64 / seqs.len() as f64);
        }
        Ok(row)
    }

    /// PTL task choice for each feature using the first `j + 1` bank entries.
    fn locate_all(&self, feats: &[Vec<f64>], j: usize, tag: u64) -> Result<Vec<usize>> {
        let bank = PrimitiveBank {
            entries: self.bank.entries[..=j].to_vec(),
        };
        let mut rng = rng_for(self.seed(), "ptl-route", tag);
        feats
            .iter()
            .map(|f| locate_task(&bank, f, self.config.ptl.n_rep, self.config.ptl.rep_average, &mut rng))
            .collect()
    }

    /// Column-normalized PTL confusion matrix over each task's eval set:
    /// `m[predicted][true]`.
    pub fn confusion(&self) -> Result<Vec<Vec<f64>>> {
        if self.bank.is_empty() {
            return Err(Error::Contract("confusion matrix needs a non-empty bank".into()));
        }
        let n = self.bank.len();
        let mut m = vec![vec![0.0; n]; n];
        for (i, spec) in self.specs()[..n].iter().enumerate() {
            let eval = eval_set(spec);
            let prompts: Vec<&[usize]> = eval.iter().map(|s| spec.prompt(s)).collect();
            let feats = self.model.last_token_features(&prompts)?;
            let preds = self.locate_all(&feats, n - 1, (n * n + i) as u64)?;
            for p in preds {
                m[p][i] += 1.0 / eval.len() as f64;
            }
        }
        Ok(m)
    }

    /// Trains the next task and appends its row to every matrix.
    pub fn step(&mut self) -> Result<()> {
        self.train_task()?;
        let j = self.next_task() - 1;
        let modes: Vec<RoutingMode> = self.matrices.keys().copied().collect();
        for mode in modes {
            let row = self.evaluate_all(j, mode).map_err(|e| e.in_stage("evaluate"))?;
            self.matrices.get_mut(&mode).expect("mode present").push_row(row)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Parameters added over all grown tasks relative to every-layer growth.
    pub fn param_ratio(&self) -> Option<f64> {
        let (mut ours, mut every) = (0usize, 0usize);
        for r in &self.records {
            if let Some(e) = &r.expansion {
                ours += e.params.added;
                every += e.params.every_layer;
            }
        }
        (every > 0).then(|| ours as f64 / every as f64)
    }

    pub fn expanded_layers(&self) -> usize {
        self.records
            .iter()
            .filter_map(|r| r.expansion.as_ref())
            .map(|e| e.plan.expanded_layers())
            .sum()
    }

    pub fn summaries(&self) -> Result<BTreeMap<RoutingMode, ModeSummary>> {
        self.matrices.iter().map(|(m, a)| Ok((*m, summarize(a)?))).collect()
    }

    pub fn metrics_csv(&self) -> Result<String> {
        metrics_csv(&self.matrices, self.param_ratio())
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let complete = self.matrices.values().all(AccuracyMatrix::is_complete);
        Ok(RunManifest {
            version: RUN_MANIFEST_VERSION,
            seed: self.seed(),
            stream: self.stream.clone(),
            config: self.config.clone(),
            tasks: self.records.clone(),
            param_ratio: self.param_ratio(),
            expanded_layers: self.expanded_layers(),
            matrices: self.matrices.clone(),
            summaries: if complete { Some(self.summaries()?) } else { None },
        })
    }

    /// Writes `checkpoint.json` and `checkpoint.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut state = self.clone();
        let mut w = BlobWriter::default();
        w.take_all("model", &mut state.model);
        if let Some(s) = state.shared.as_mut() {
            w.take_all("shared", s);
        }
        w.take_all("bank", &mut state.bank);
        let (bytes, tensors) = w.finish();
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            blob_sha256: sha256_hex(&bytes),
            blob_bytes: bytes.len(),
            tensors,
            state,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::corrupt(MANIFEST_FILE, e.to_string()))?;
        write_atomic(&dir.join(BLOB_FILE), &bytes)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let text = read_file(&dir.join(MANIFEST_FILE))?;
        let raw: serde_json::Value =
            serde_json::from_slice(&text).map_err(|e| Error::corrupt(MANIFEST_FILE, e.to_string()))?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found,
            });
        }
        let manifest: CheckpointManifest = serde_json::from_value(raw).map_err(|e| Error::corrupt(MANIFEST_FILE, e.to_string()))?;
        let bytes = read_file(&dir.join(BLOB_FILE))?;
        if bytes.len() != manifest.blob_bytes {
            return Err(Error::corrupt(
                BLOB_FILE,
                format!("expected {} bytes, found {}", manifest.blob_bytes, bytes.len()),
            ));
        }
        if sha256_hex(&bytes) != manifest.blob_sha256 {
            return Err(Error::corrupt(BLOB_FILE, "checksum mismatch"));
        }
        let reader = BlobReader::new(&bytes, &manifest.tensors)?;
        let mut state = manifest.state;
        reader.restore_all("model", &mut state.model)?;
        if let Some(s) = state.shared.as_mut() {
            reader.restore_all("shared", s)?;
        }
        reader.restore_all("bank", &mut state.bank)?;
        Ok(state)
    }
}

/// Last-token base features of each task's eval set: smallest distance
/// between task means against the largest within-task std.
pub fn separation(model: &Backbone, specs: &[TaskSpec]) -> Result<SeparationReport> {
    let mut means = Vec::with_capacity(specs.len());
    let mut max_std: f64 = 0.0;
    for spec in specs {
        let eval = eval_set(spec);
        let prompts: Vec<&[usize]> = eval.iter().map(|s| spec.prompt(s)).collect();
        let feats = model.last_token_features(&prompts)?;
        let d = feats[0].len();
        let n = feats.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / n).collect();
        let var = feats
            .iter()
            .map(|f| f.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
            .sum::<f64>()
            / (n * d as f64);
        max_std = max_std.max(var.sqrt());
        means.push(mean);
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            let d2: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    Ok(SeparationReport {
        min_mean_distance: min_dist,
        max_within_std: max_std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub blob_sha256: String,
    pub blob_bytes: usize,
    pub tensors: Vec<BlobEntry>,
    pub state: Learner,
}

/// Everything needed to reproduce and read a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub seed: u64,
    pub stream: StreamManifest,
    pub config: RunConfig,
    pub tasks: Vec<TaskRecord>,
    pub param_ratio: Option<f64>,
    pub expanded_layers: usize,
    pub matrices: BTreeMap<RoutingMode, AccuracyMatrix>,
    pub summaries: Option<BTreeMap<RoutingMode, ModeSummary>>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path: PathBuf = if path.is_dir() {
            path.join(RUN_MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = read_file(&path)?;
        let m: Self = serde_json::from_slice(&text).map_err(|e| Error::corrupt(path.display().to_string(), e.to_string()))?;
        if m.version != RUN_MANIFEST_VERSION {
            return Err(Error::Version {
                expected: RUN_MANIFEST_VERSION,
                found: m.version,
            });
        }
        Ok(m)
    }
}

pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Runs the full stream and writes manifest, metrics and checkpoint into
/// `out`.
pub fn run_to_dir(config: RunConfig, out: &Path) -> Result<Learner> {
    let mut learner = Learner::new(config)?;
    learner.run()?;
    write_outputs(&learner, out)?;
    Ok(learner)
}

pub fn write_outputs(learner: &Learner, out: &Path) -> Result<()> {
    write_atomic(&out.join(METRICS_FILE), learner.metrics_csv()?.as_bytes())?;
    write_atomic(&out.join(RUN_MANIFEST_FILE), learner.manifest()?.to_json().as_bytes())?;
    learner.save_checkpoint(&out.join(CHECKPOINT_DIR))
}
