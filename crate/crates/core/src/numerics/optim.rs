use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Optimizer over every currently trainable tensor of `model`.
    pub fn for_params(config: AdamConfig, model: &dyn Parameters) -> Self {
        let mut opt = Self::new(config);
        model.visit_params(&mut |name, t| {
            if t.requires_grad() {
                opt.register(name, t.numel());
            }
        });
        opt
    }

    pub fn register(&mut self, name: &str, numel: usize) {
        self.moments.insert(
            name.to_string(),
            Moments {
                m: vec![0.0; numel],
                v: vec![0.0; numel],
            },
        );
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn registered(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update of every registered parameter; clears their gradients.
    pub fn step(&mut self, model: &mut dyn Parameters) -> Result<()> {
        let mut seen = 0usize;
        let mut missing: Option<String> = None;
        model.visit_params(&mut |name, t| {
            if self.moments.contains_key(name) {
                seen += 1;
                if (t.grad().is_none() || !t.requires_grad()) && missing.is_none() {
                    missing = Some(name.to_string());
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
        }
        if seen != self.moments.len() {
            let mut present = std::collections::BTreeSet::new();
            model.visit_params(&mut |name, _| {
                present.insert(name.to_string());
            });
            let absent = self
                .moments
                .keys()
                .find(|k| !present.contains(*k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Contract(format!(
                "registered parameter `{absent}` is missing from the model"
            )));
        }

        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |name, p| {
            let Some(mo) = moments.get_mut(name) else { return };
            let g = p.take_grad().expect("checked above");
            let data = p.data_mut();
            for i in 0..data.len() {
                mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g[i];
                mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                data[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * data[i]);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    struct One(Tensor);

    impl Parameters for One {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("p", &self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("p", &mut self.0)
        }
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut m = One(Tensor::vector(vec![1.5, -2.0]).trainable());
        let mut opt = AdamW::for_params(AdamConfig::with_lr(0.1), &m);
        m.0.accumulate_grad(&[0.0, 0.0]).unwrap();
        opt.step(&mut m).unwrap();
        assert_eq!(m.0.data(), &[1.5, -2.0]);
        assert!(m.0.grad().is_none());
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        let mut m = One(Tensor::vector(vec![1.0, 1.0]).trainable());
        let cfg = AdamConfig::with_lr(0.01);
        let mut opt = AdamW::for_params(cfg, &m);
        m.0.accumulate_grad(&[0.5, -3.0]).unwrap();
        opt.step(&mut m).unwrap();
        let e0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let e1 = 1.0 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((m.0.data()[0] - e0).abs() < 1e-15);
        assert!((m.0.data()[1] - e1).abs() < 1e-15);
    }

    #[test]
    fn step_count_increments() {
        let mut m = One(Tensor::vector(vec![1.0]).trainable());
        let mut opt = AdamW::for_params(AdamConfig::default(), &m);
        for _ in 0..2 {
            m.0.accumulate_grad(&[0.3]).unwrap();
            opt.step(&mut m).unwrap();
        }
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut m = One(Tensor::vector(vec![1.0]).trainable());
        let mut opt = AdamW::for_params(AdamConfig::default(), &m);
        let err = opt.step(&mut m).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn frozen_params_not_registered() {
        let m = One(Tensor::vector(vec![1.0]));
        let opt = AdamW::for_params(AdamConfig::default(), &m);
        assert_eq!(opt.registered().count(), 0);
    }
}
