//! Named parameter storage and the small layers shared by encoder and decoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Model parameters keyed by dotted path, kept in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.tensors
            .get(name)
            .ok_or_else(|| shape_err!("missing parameter `{name}`"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|t| t.as_ref())
    }

    /// Mutable access; copies the buffer only if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| shape_err!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

/// Tape plus parameters: everything a forward pass needs.
pub struct Ctx<'a, T: Scalar = f32> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> Clone for Ctx<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Ctx<'_, T> {}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self { tape, params }
    }

    pub fn p(&self, name: &str) -> Result<Var<'a, T>> {
        Ok(self.tape.param(name, self.params.get(name)?))
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'a, T> {
        self.tape.constant(value)
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64(v);
        }
    })
}

/// Applies `f` to `[rows, last]` and restores the leading dims.
fn apply_2d<'t, T: Scalar>(
    x: Var<'t, T>,
    out_last: usize,
    f: impl FnOnce(Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() == 2 {
        return f(x);
    }
    let last = *shape.last().unwrap();
    let rows = x.numel() / last;
    let y = f(x.reshape([rows, last])?)?;
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(out_last);
    y.reshape(out_shape)
}

/// `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.insert(&weight, trunc_normal(&[out_dim, in_dim], INIT_STD, rng));
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros([out_dim]));
            b
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let w = ctx.p(&self.weight)?;
        let b = self.bias.as_deref().map(|b| ctx.p(b)).transpose()?;
        apply_2d(x, self.out_dim, |x| {
            let y = x.matmul_t(&w)?;
            match b {
                Some(b) => y.add_bias(&b),
                None => Ok(y),
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub weight: String,
    pub bias: String,
    pub dim: usize,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, Tensor::ones([dim]));
        store.insert(&bias, Tensor::zeros([dim]));
        Self { weight, bias, dim }
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.layer_norm(&ctx.p(&self.weight)?, &ctx.p(&self.bias)?, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Two-layer position-wise MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true),
            act,
        }
    }

    pub fn forward<'a, T: Scalar>(&self, ctx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let h = self.fc1.forward(ctx, x)?;
        let h = match self.act {
            Activation::Gelu => h.gelu(),
            Activation::Relu => h.relu(),
        };
        self.fc2.forward(ctx, h)
    }
}
