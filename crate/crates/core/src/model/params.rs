use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{dim_err, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Fixed buffers (the Fourier frequency matrix) are stored and
    /// checkpointed like weights but never receive updates.
    pub trainable: bool,
}

/// Ordered, named parameter tensors. Layers refer to entries by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> usize {
        self.entries.push(ParamEntry { name: name.into(), value, trainable });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> &ParamEntry<T> {
        &self.entries[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut ParamEntry<T> {
        &mut self.entries[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Replaces every value; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(dim_err!("expected {} parameter tensors, got {}", self.entries.len(), values.len()));
        }
        for (e, v) in self.entries.iter().zip(&values) {
            if e.value.shape() != v.shape() {
                return Err(dim_err!("parameter {}: shape {:?}, got {:?}", e.name, e.value.shape(), v.shape()));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(())
    }

    /// Records every entry on `tape`, trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| if e.trainable { tape.param(e.value.clone()) } else { tape.constant(e.value.clone()) })
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// Adam state for every trainable entry of a store.
#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let states = store.entries().iter().map(|e| e.trainable.then(|| AdamState::for_param(&e.value, config))).collect();
        Self { states }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for s in self.states.iter_mut().flatten() {
            s.set_learning_rate(lr);
        }
    }

    /// Applies one update from gradients of variables produced by
    /// [`ParamStore::bind`]. Entries without a gradient get a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, vars: &[Var], grads: &Gradients<T>) -> Result<()> {
        // validate every gradient before touching any parameter
        for (i, s) in self.states.iter().enumerate() {
            if s.is_some() {
                if let Some(g) = grads.get(vars[i]) {
                    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                        return Err(crate::error::Error::Training {
                            iteration: s.as_ref().map_or(0, |s| s.step_count()) + 1,
                            message: format!("non-finite gradient for {} at element {}", store.get(i).name, j),
                        });
                    }
                }
            }
        }
        for (i, s) in self.states.iter_mut().enumerate() {
            if let Some(state) = s {
                let entry = store.get_mut(i);
                match grads.get(vars[i]) {
                    Some(g) => adam_step(&mut entry.value, g, state)?,
                    None => {
                        let zeros = vec![T::ZERO; entry.value.numel()];
                        adam_step(&mut entry.value, &zeros, state)?
                    }
                }
            }
        }
        Ok(())
    }
}
