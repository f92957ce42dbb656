use std::collections::BTreeMap;

use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Block {
    name: String,
    value: Tensor2,
    grad: Tensor2,
    m: Tensor2,
    v: Tensor2,
}

/// Named parameter blocks with matching gradient and Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<Block>,
    index: BTreeMap<String, usize>,
    step: u64,
    has_grad: bool,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a block. Re-registering an existing name is an error.
    pub fn insert(&mut self, name: &str, value: Tensor2) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter block `{name}`")));
        }
        let (r, c) = value.shape();
        let id = self.blocks.len();
        self.blocks.push(Block {
            name: name.to_string(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform fan-in initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_kaiming<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor2::from_vec(rows, cols, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        self.insert(name, Tensor2::zeros(rows, cols))
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter block `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn value(&self, id: usize) -> &Tensor2 {
        &self.blocks[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor2 {
        &mut self.blocks[id].value
    }

    pub fn grad(&self, id: usize) -> &Tensor2 {
        &self.blocks[id].grad
    }

    pub fn name(&self, id: usize) -> &str {
        &self.blocks[id].name
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.index.get(name).map(|&i| &self.blocks[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.index
            .get(name)
            .copied()
            .map(move |i| &mut self.blocks[i].value)
    }

    /// Block names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Adds `scale · grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            self.blocks[id].grad.add_scaled(g, scale);
        }
        self.has_grad = true;
    }

    pub fn has_gradients(&self) -> bool {
        self.has_grad
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.data_mut().fill(0.0);
        }
        self.has_grad = false;
    }

    /// Bias-corrected Adam update; zeroes gradients afterwards.
    pub fn adam_step(&mut self, opt: &Adam) -> Result<()> {
        if !self.has_grad {
            return Err(Error::State(
                "adam_step called without populated gradients".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for b in &mut self.blocks {
            let g = b.grad.data();
            let m = b.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
            }
            let v = b.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
            }
            let (m, v) = (b.m.data(), b.v.data());
            for ((p, mi), vi) in b.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *p -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Name → value view used by the checkpoint writer.
    pub fn to_blocks(&self) -> BTreeMap<String, Tensor2> {
        self.index
            .iter()
            .map(|(n, &i)| (n.clone(), self.blocks[i].value.clone()))
            .collect()
    }

    /// Overwrites every registered block from `blocks`; shapes must match.
    pub fn load_blocks(&mut self, blocks: &BTreeMap<String, Tensor2>) -> Result<()> {
        for (name, &id) in &self.index {
            let src = blocks
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter block `{name}`")))?;
            let dst = &mut self.blocks[id].value;
            if src.shape() != dst.shape() {
                return Err(Error::Dimension(format!(
                    "block `{name}` is {}x{} in file, {}x{} in model",
                    src.rows(),
                    src.cols(),
                    dst.rows(),
                    dst.cols()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}
