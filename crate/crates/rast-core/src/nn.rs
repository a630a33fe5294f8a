//! Learned building blocks: parameters, linear maps, layer norm, and the
//! feed-forward block shared by the query generator and output head.
//!
//! Parameter initialization draws from the single run RNG in construction
//! order, so a fixed seed fixes every initial weight.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass context: training toggles dropout, the RNG drives it.
pub struct FwdCtx<'r> {
    pub training: bool,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r> FwdCtx<'r> {
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        FwdCtx {
            training: true,
            rng,
        }
    }

    pub fn eval(rng: &'r mut ChaCha8Rng) -> Self {
        FwdCtx {
            training: false,
            rng,
        }
    }
}

struct ParamInner<S: Scalar> {
    name: String,
    trainable: bool,
    tensor: RefCell<Tensor<S>>,
}

/// Shared handle to a named weight tensor. The optimizer swaps in fresh
/// leaves on each step; frozen parameters are built without gradient
/// tracking and never change.
#[derive(Clone)]
pub struct Param<S: Scalar> {
    inner: Rc<ParamInner<S>>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, data: Vec<S>, shape: &[usize], trainable: bool) -> Result<Self> {
        let tensor = if trainable {
            Tensor::variable(data, shape)?
        } else {
            Tensor::constant(data, shape)?
        };
        Ok(Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                trainable,
                tensor: RefCell::new(tensor),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn value(&self) -> Tensor<S> {
        self.inner.tensor.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.tensor.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.tensor.borrow().numel()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.tensor.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.inner.tensor.borrow().zero_grad();
    }

    /// Replaces the value with a fresh leaf of the same shape. Rejects
    /// updates to frozen parameters.
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if !self.inner.trainable {
            return Err(Error::contract(
                "Param::set_data",
                format!("parameter {} is frozen", self.inner.name),
            ));
        }
        self.load_data(data)
    }

    /// Replaces the value regardless of trainability (checkpoint restore).
    pub fn load_data(&self, data: Vec<S>) -> Result<()> {
        let shape = self.shape();
        let tensor = if self.inner.trainable {
            Tensor::variable(data, &shape)?
        } else {
            Tensor::constant(data, &shape)?
        };
        *self.inner.tensor.borrow_mut() = tensor;
        Ok(())
    }

    pub fn data(&self) -> Vec<S> {
        self.inner.tensor.borrow().data().to_vec()
    }
}

/// Uniform Glorot initialization for linear weights.
pub fn xavier_uniform<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| S::of(rng.random_range(-limit..limit)))
        .collect()
}

/// Normal He initialization for convolution kernels.
pub fn kaiming_normal<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<S> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    (0..n)
        .map(|_| S::sample_standard_normal(rng) * S::of(std))
        .collect()
}

/// Affine map on the last axis: `y = x @ w + b` with `w: [in, out]`.
pub struct Linear<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = Param::new(
            format!("{name}.weight"),
            xavier_uniform(rng, in_dim, out_dim),
            &[in_dim, out_dim],
            trainable,
        )?;
        let bias = if with_bias {
            Some(Param::new(
                format!("{name}.bias"),
                vec![S::zero(); out_dim],
                &[out_dim],
                trainable,
            )?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = x.matmul(&self.weight.value())?;
        match &self.bias {
            Some(b) => y.add(&b.value()),
            None => Ok(y),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            p.push(b.clone());
        }
        p
    }
}

/// Layer normalization over the last axis with learned scale and shift.
pub struct LayerNorm<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub eps: f64,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(name: &str, dim: usize, trainable: bool) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), vec![S::one(); dim], &[dim], trainable)?,
            beta: Param::new(format!("{name}.beta"), vec![S::zero(); dim], &[dim], trainable)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gamma.value(), &self.beta.value(), self.eps)
    }

    pub fn params(&self) -> Vec<Param<S>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Two-layer feed-forward block: `lin2(dropout(relu(lin1(x))))`.
pub struct Ffn<S: Scalar> {
    pub lin1: Linear<S>,
    pub lin2: Linear<S>,
    pub dropout: f64,
}

impl<S: Scalar> Ffn<S> {
    pub fn new(
        name: &str,
        dim: usize,
        mlp_ratio: f64,
        dropout: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = ((dim as f64 * mlp_ratio).round() as usize).max(1);
        Ok(Ffn {
            lin1: Linear::new(&format!("{name}.lin1"), dim, hidden, true, trainable, rng)?,
            lin2: Linear::new(&format!("{name}.lin2"), hidden, dim, true, trainable, rng)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let h = self.lin1.forward(x)?.relu();
        let h = h.dropout(self.dropout, ctx.training, ctx.rng)?;
        self.lin2.forward(&h)
    }

    pub fn params(&self) -> Vec<Param<S>> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p
    }
}
