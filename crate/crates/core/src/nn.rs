//! Parameter containers and the forward-pass context shared by every layer.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::Result;
use crate::tensor::{seeded_rng, SeededRng, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Everything one forward pass needs: the tape, the train/eval switch and
/// the generator feeding dropout and stochastic depth.
pub struct Ctx<'a> {
    pub tape: Tape<'a>,
    pub mode: Mode,
    pub rng: SeededRng,
    params: HashMap<*const Tensor, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Ctx {
            tape: Tape::new(),
            mode,
            rng: seeded_rng(seed),
            params: HashMap::new(),
        }
    }

    /// Puts a parameter on the tape once; later uses reuse the same node so
    /// every consumer's contribution lands on one gradient.
    pub fn param(&mut self, tensor: &'a Tensor) -> Var {
        let key = tensor as *const Tensor;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.tape.leaf(tensor);
        self.params.insert(key, v);
        v
    }

    /// Gradient of a parameter previously registered with [`Ctx::param`].
    pub fn grad_of(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.params
            .get(&(tensor as *const Tensor))
            .and_then(|&v| self.tape.grad(v))
    }

    /// Stochastic depth over a whole per-sample residual branch.
    pub fn drop_branch(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = self.rng.random::<f64>() >= p;
        let rows = self.tape.shape(x)[0];
        self.tape.drop_path_with_mask(x, &vec![keep; rows], p)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.mode, &mut self.rng)
    }
}

/// Depth-first enumeration of named parameter tensors.
pub trait Parameterized {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for Tensor {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(prefix, self)
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor)) {
        if let Some(inner) = self {
            inner.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f);
        }
    }
}

macro_rules! impl_parameterized {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Parameterized for $ty {
            fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s $crate::tensor::Tensor)) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor)) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameterized;

pub fn named_params<M: Parameterized + ?Sized>(module: &M) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, t| out.push((name.to_string(), t)));
    out
}

pub fn count_params<M: Parameterized + ?Sized>(module: &M, mut keep: impl FnMut(&str, &Tensor) -> bool) -> usize {
    let mut total = 0;
    module.visit("", &mut |name, t| {
        if keep(name, t) {
            total += t.numel();
        }
    });
    total
}

pub fn set_trainable<M: Parameterized + ?Sized>(module: &mut M, trainable: bool) {
    module.visit_mut("", &mut |_, t| t.set_requires_grad(trainable));
}

/// Affine map applied to the last axis: `x . weight + bias`, weight `[in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl_parameterized!(Linear { weight, bias });

impl Linear {
    pub fn new(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::trunc_normal(&[input, output], std, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl_parameterized!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, x: Var) -> Result<Var> {
        let g = ctx.param(&self.gamma);
        let b = ctx.param(&self.beta);
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}
