use std::collections::HashMap;

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Anything that owns named parameter tensors.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| {
            if t.requires_grad() {
                out.push(name.to_string());
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| {
            if t.requires_grad() {
                n += t.numel()
            }
        });
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }
}

/// Parameter name to tape leaf, recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Puts `t` on the tape as a leaf and remembers it under `name`.
    pub fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Var {
        if let Some(&v) = self.vars.get(&name) {
            return v;
        }
        let v = tape.leaf(t);
        self.vars.insert(name, v);
        v
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Copies tape gradients into the bound trainable tensors. Bound
    /// parameters the loss did not reach receive an explicit zero gradient.
    pub fn absorb(&self, tape: &Tape, model: &mut dyn Parameters) -> Result<()> {
        let mut result = Ok(());
        model.visit_params_mut(&mut |name, t| {
            if result.is_err() || !t.requires_grad() {
                return;
            }
            if let Some(&v) = self.vars.get(name) {
                result = match tape.grad(v) {
                    Some(g) => t.accumulate_grad(g),
                    None => t.accumulate_grad(&vec![0.0; t.numel()]),
                };
            }
        });
        result
    }
}
