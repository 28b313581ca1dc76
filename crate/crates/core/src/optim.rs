//! Named parameter storage and the AdamW optimizer with decoupled weight
//! decay, plus the linear learning-rate decay schedule.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{KernelError, Tensor};

/// One trainable array plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

/// Ordered collection of named parameters. Order is fixed at construction and
/// shared by optimizer state, checkpoints, and tape bindings.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let grad = vec![S::zero(); value.len()];
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn entries(&self) -> &[Param<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<S>] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.index.get(name).copied().map(|i| &mut self.entries[i])
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Convert every value and gradient to another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(&p.name, p.value.map(|x| T::from_f64(x.as_f64())));
        }
        out
    }
}

/// `base_lr * (1 - step/total_steps)`, floored at zero. Computed in f64 so the
/// schedule is precision-independent.
pub fn linear_decay_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    (base_lr * (1.0 - step as f64 / total_steps as f64)).max(0.0)
}

/// AdamW: Adam moment estimates with weight decay applied directly to the
/// parameters rather than through the gradient.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamStore<S>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            m: params
                .entries()
                .iter()
                .map(|p| vec![S::zero(); p.value.len()])
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|p| vec![S::zero(); p.value.len()])
                .collect(),
        }
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state saved in a checkpoint.
    pub fn restore(
        &mut self,
        step: u64,
        m: Vec<Vec<S>>,
        v: Vec<Vec<S>>,
    ) -> Result<(), KernelError> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(KernelError::InvalidArgument(
                "optimizer state does not match parameter count".into(),
            ));
        }
        for (cur, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if cur.len() != new.len() {
                return Err(KernelError::InvalidArgument(
                    "optimizer moment buffer does not match parameter shape".into(),
                ));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update over all parameters using their accumulated gradients.
    pub fn step(&mut self, params: &mut ParamStore<S>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.epsilon);
        let decay = S::from_f64(lr * self.weight_decay);

        for (i, p) in params.entries_mut().iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_m_b1 * g;
                *vi = b2 * *vi + one_m_b2 * g * g;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *w = *w - lr_s * m_hat / (v_hat.sqrt() + eps) - decay * *w;
            }
        }
    }
}
