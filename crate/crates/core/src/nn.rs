//! Named parameter sets and the two optimizers used for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, RngState, Tape, Tensor, Var};

/// Ordered, named collection of weight tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter `{name}`");
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self.index_of(name)?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::shape("ParamSet::set", self.tensors[i].shape(), t.shape()));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as leaves when `trainable`, else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            names: self.names.clone(),
            vars,
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"));
        self.vars[i]
    }

    pub fn grads(&self, g: &Gradients) -> Result<Vec<Tensor>> {
        self.vars.iter().map(|v| g.get(*v)).collect()
    }
}

/// He-normal initialisation with the given fan-in, scaled by `gain`.
pub fn he_normal(rng: &mut RngState, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    rng.gaussian(shape).scale(std).expect("finite init")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, gg), mm), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * gg;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gg * gg;
                *w -= self.lr * (*mm / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd {
            momentum,
            weight_decay,
            velocity: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len());
        for (i, (p, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            for ((w, gg), vel) in p.data_mut().iter_mut().zip(g.data()).zip(self.velocity[i].iter_mut()) {
                let d = gg + self.weight_decay * *w;
                *vel = self.momentum * *vel + d;
                *w -= lr * *vel;
            }
        }
    }
}
