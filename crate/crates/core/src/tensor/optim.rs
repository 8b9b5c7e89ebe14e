use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub trait Optimizer {
    /// One update over a parameter group; `idx` identifies the parameter so
    /// stateful optimizers can keep per-parameter moments.
    fn step(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor) -> Result<()>;
}

pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, _idx: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "sgd: param shape {:?} vs grad shape {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, idx: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "adam: param shape {:?} vs grad shape {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        while self.m.len() <= idx {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
            self.t.push(0);
        }
        if self.m[idx].is_empty() {
            self.m[idx] = vec![0.0; param.len()];
            self.v[idx] = vec![0.0; param.len()];
        }
        self.t[idx] += 1;
        let t = self.t[idx] as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
        for ((p, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn make_optimizer(kind: OptimizerKind) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Sgd { lr } => Box::new(Sgd::new(lr)),
        OptimizerKind::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => Box::new(Adam::new(lr, beta1, beta2, eps)),
    }
}
