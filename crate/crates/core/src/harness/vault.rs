use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{train_set, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotState {
    Pending,
    Open,
    Sealed,
}

/// Hands out each task's training data once, in stream order, and refuses
/// any access after the task is sealed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataVault {
    specs: Vec<TaskSpec>,
    slots: Vec<SlotState>,
}

impl DataVault {
    pub fn new(specs: Vec<TaskSpec>) -> Self {
        let slots = vec![SlotState::Pending; specs.len()];
        Self { specs, slots }
    }

    pub fn state(&self, task: usize) -> Option<SlotState> {
        self.slots.get(task).copied()
    }

    /// Training sequences of `task`. Earlier tasks must already be sealed.
    pub fn open(&mut self, task: usize) -> Result<Vec<Vec<usize>>> {
        let state = self.state(task).ok_or(Error::Index {
            context: "data vault",
            index: task,
            len: self.slots.len(),
        })?;
        if state == SlotState::Sealed {
            return Err(Error::ReplayViolation { task });
        }
        if let Some(j) = self.slots[..task].iter().position(|s| *s != SlotState::Sealed) {
            return Err(Error::Contract(format!(
                "task {task} opened before task {j} was finished"
            )));
        }
        self.slots[task] = SlotState::Open;
        Ok(train_set(&self.specs[task]))
    }

    pub fn seal(&mut self, task: usize) -> Result<()> {
        match self.slots.get_mut(task) {
            Some(s) => {
                *s = SlotState::Sealed;
                Ok(())
            }
            None => Err(Error::Index {
                context: "data vault",
                index: task,
                len: self.slots.len(),
            }),
        }
    }
}
