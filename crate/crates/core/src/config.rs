use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::moe::ModelConfig;
use crate::pgke::ProbeConfig;
use crate::ptl::PtlConfig;
use crate::tasks::StreamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    Ptl,
    Oracle,
    Last,
    Random,
    Shared,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 5] = [
        RoutingMode::Ptl,
        RoutingMode::Oracle,
        RoutingMode::Last,
        RoutingMode::Random,
        RoutingMode::Shared,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Ptl => "ptl",
            RoutingMode::Oracle => "oracle",
            RoutingMode::Last => "last",
            RoutingMode::Random => "random",
            RoutingMode::Shared => "shared",
        }
    }

    /// Parses a comma-separated list such as `ptl,oracle,shared`.
    pub fn parse_list(s: &str) -> Result<Vec<RoutingMode>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let mode = part.parse()?;
            if !out.contains(&mode) {
                out.push(mode);
            }
        }
        if out.is_empty() {
            return Err(Error::config("eval.routing", "no routing modes given"));
        }
        Ok(out)
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoutingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("eval.routing", format!("unknown routing mode `{s}`")))
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub probe_learning_rate: f64,
    pub batch_size: usize,
    /// Steps for the first task, which trains the initial expert group.
    pub bootstrap_steps: usize,
    /// Steps of the post-expansion fine-tune on every later task.
    pub finetune_steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            probe_learning_rate: 3e-4,
            batch_size: 32,
            bootstrap_steps: 1000,
            finetune_steps: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub routing: Vec<RoutingMode>,
    /// Train the single-router baseline alongside the main model.
    pub shared_baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            routing: RoutingMode::ALL.to_vec(),
            shared_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub probe: ProbeConfig,
    pub ptl: PtlConfig,
    pub loss: LossWeights,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            probe: ProbeConfig::default(),
            ptl: PtlConfig::default(),
            loss: LossWeights::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Calibrated for the tiny backbone: higher learning rates with the
    /// same probe/normal ratio as the defaults.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.training.learning_rate = 5e-3;
        c.training.probe_learning_rate = 7.5e-3;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "config".to_string());
            Error::config(at, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.probe.validate()?;
        self.ptl.validate()?;
        self.loss.validate()?;
        let t = &self.training;
        for (field, v) in [
            ("training.learning_rate", t.learning_rate),
            ("training.probe_learning_rate", t.probe_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if self.stream.n_tasks < 2 {
            return Err(Error::config("stream.n_tasks", "a stream needs at least 2 tasks"));
        }
        if self.stream.vocab_size != self.model.vocab_size {
            return Err(Error::config(
                "stream.vocab_size",
                format!("{} differs from model.vocab_size {}", self.stream.vocab_size, self.model.vocab_size),
            ));
        }
        if self.stream.train_size < 2 || self.stream.eval_size == 0 {
            return Err(Error::config("stream.train_size", "need at least 2 train and 1 eval sample"));
        }
        if self.eval.routing.is_empty() {
            return Err(Error::config("eval.routing", "no routing modes given"));
        }
        if self.eval.routing.contains(&RoutingMode::Shared) && !self.eval.shared_baseline {
            return Err(Error::config("eval.routing", "`shared` needs eval.shared_baseline = true"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_override() {
        let c = RunConfig::from_toml("seed = 7\n[probe]\nalpha = 2.0\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.probe.alpha, 2.0);
        assert_eq!(c.probe.n_probes_per_layer, 2);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::from_toml("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = RunConfig::from_toml("[probe]\nalpha = \"x\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn routing_lists() {
        let m = RoutingMode::parse_list("ptl,oracle,shared").unwrap();
        assert_eq!(m, vec![RoutingMode::Ptl, RoutingMode::Oracle, RoutingMode::Shared]);
        assert!(RoutingMode::parse_list("ptl,bogus").is_err());
    }

    #[test]
    fn desk_preset_file_matches_builder() {
        let mut c = RunConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("runs/desk"));
        c.output_dir = RunConfig::default().output_dir;
        assert_eq!(c, RunConfig::desk());
    }

    #[test]
    fn reference_learning_rates_are_defaults() {
        let t = TrainingConfig::default();
        assert_eq!((t.learning_rate, t.probe_learning_rate), (2e-4, 3e-4));
        assert_eq!(ProbeConfig::default().alpha, 0.8);
    }
}
