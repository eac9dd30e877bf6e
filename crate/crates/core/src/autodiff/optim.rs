use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Serializable optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn build(&self) -> OptimizerState {
        OptimizerState {
            config: *self,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

/// SGD or Adam state; Adam moments are allocated lazily per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step_count: u64,
    first_moment: Vec<Option<Vec<f64>>>,
    second_moment: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update to every trainable parameter. Gradients are left in
    /// place; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for &id in &ids {
            if store.get(id).grad().is_none() {
                return Err(AutodiffError::MissingGrad {
                    name: store.name(id).to_string(),
                });
            }
        }
        self.step_count += 1;
        let c = self.config;
        if self.first_moment.len() < store.len() {
            self.first_moment.resize(store.len(), None);
            self.second_moment.resize(store.len(), None);
        }
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for id in ids {
            let param = store.get_mut(id);
            let grad = param.grad().expect("checked above").to_vec();
            match c.kind {
                OptimizerKind::Sgd => {
                    param
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .for_each(|(p, g)| *p -= c.learning_rate * g);
                }
                OptimizerKind::Adam => {
                    let n = grad.len();
                    let m = self.first_moment[id.index()].get_or_insert_with(|| vec![0.0; n]);
                    let v = self.second_moment[id.index()].get_or_insert_with(|| vec![0.0; n]);
                    for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }

    /// First-moment tensor of a parameter, once allocated.
    pub fn first_moment(&self, id: super::ParamId) -> Option<&[f64]> {
        self.first_moment.get(id.index()).and_then(|m| m.as_deref())
    }

    pub fn second_moment(&self, id: super::ParamId) -> Option<&[f64]> {
        self.second_moment
            .get(id.index())
            .and_then(|m| m.as_deref())
    }
}
