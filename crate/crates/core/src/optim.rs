//! Named parameter groups, AdamW and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamGroup`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Additive accumulator; `None` until a backward pass touches it.
    pub grad: Option<Tensor>,
    pub lr_scale: f64,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Trainable tensors addressed by unique name. Insertion order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamGroup {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        value: Tensor,
        lr_scale: f64,
        decay: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            lr_scale,
            decay,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(id.0)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {}", id.0)))?;
        if g.len() != p.value.numel() {
            return Err(Error::Dimension(format!(
                "gradient of {} elements for parameter {} of shape {:?}",
                g.len(),
                p.name,
                p.value.shape()
            )));
        }
        let buf = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (a, b) in buf.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Rounds all values through `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW moments for one [`ParamGroup`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamGroup, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One AdamW update at learning rate `lr` (scaled per parameter), then
/// clears all gradients.
pub fn adamw_step(params: &mut ParamGroup, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, group has {}",
            state.first.len(),
            params.len()
        )));
    }
    if let Some(p) = params.params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Contract(format!("missing gradient for {}", p.name)));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.params.iter_mut().enumerate() {
        let grad = p.grad.take().expect("checked above");
        let plr = lr * p.lr_scale;
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            if p.decay {
                *w -= plr * c.weight_decay * *w;
            }
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= plr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Half-cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range(format!("step {step} beyond {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn square_loss(params: &mut ParamGroup, id: ParamId) -> f64 {
        let mut g = Graph::new();
        let w = g.param(params, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, params).unwrap();
        g.scalar(loss)
    }

    #[test]
    fn descends_on_square() {
        let mut params = ParamGroup::new();
        let id = params.insert("w", Tensor::vector(vec![1.0]), 1.0, true).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&params, cfg);
        square_loss(&mut params, id);
        adamw_step(&mut params, &mut st, 0.1).unwrap();
        assert!(params.value(id).item() < 1.0);
        assert!(params.grad(id).is_none(), "gradients cleared");
    }

    #[test]
    fn pure_decay_on_zero_gradient() {
        let mut params = ParamGroup::new();
        let id = params.insert("w", Tensor::vector(vec![2.0]), 1.0, true).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&params, cfg);
        params.accumulate_grad(id, &[0.0]).unwrap();
        adamw_step(&mut params, &mut st, 0.5).unwrap();
        let expected = 2.0 - 0.5 * 0.1 * 2.0;
        assert!((params.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_bowl() {
        let mut params = ParamGroup::new();
        let id = params
            .insert("w", Tensor::vector(vec![1.0, -0.7, 0.4]), 1.0, false)
            .unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&params, cfg);
        for step in 0..200 {
            square_loss(&mut params, id);
            let lr = cosine_lr(step, 200, 0.05).unwrap();
            adamw_step(&mut params, &mut st, lr).unwrap();
        }
        for w in params.value(id).data() {
            assert!(w.abs() < 1e-2, "{w}");
        }
    }

    #[test]
    fn missing_gradient_is_contract_violation() {
        let mut params = ParamGroup::new();
        params.insert("w", Tensor::vector(vec![1.0]), 1.0, true).unwrap();
        let mut st = OptimizerState::new(&params, AdamWConfig::default());
        assert!(matches!(
            adamw_step(&mut params, &mut st, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bitwise_deterministic() {
        let run = || {
            let mut params = ParamGroup::new();
            let id = params
                .insert("w", Tensor::vector(vec![0.3, -1.2]), 1.0, true)
                .unwrap();
            let mut st = OptimizerState::new(&params, AdamWConfig::default());
            for _ in 0..10 {
                square_loss(&mut params, id);
                adamw_step(&mut params, &mut st, 0.01).unwrap();
            }
            params.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut params = ParamGroup::new();
        params.insert("w", Tensor::scalar(1.0), 1.0, true).unwrap();
        assert!(params.insert("w", Tensor::scalar(1.0), 1.0, true).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.4).unwrap(), 0.4);
        assert!(cosine_lr(100, 100, 0.4).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.4).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 0.4), Err(Error::Range(_))));
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1.0).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
