//! Named parameter storage and the small layers built on it.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.find(name).map(|id| &self.tensors[id.0])
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                self.tensors[id.0].shape(),
                value.shape(),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Registers every tensor as a differentiable leaf on `tape`, in order.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Registers every tensor as a constant on `tape` (inference only).
    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Uniform in `±bound`.
pub fn uniform<T: Real>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut Rng) -> Tensor<T> {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_parts(shape, data)
}

/// Fan-in scaled initialisation bound `sqrt(1 / fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = fan_in_bound(fan_in);
        let weight = store.register(
            format!("{name}.weight"),
            uniform([fan_in, fan_out], bound, rng),
        );
        let bias = store.register(format!("{name}.bias"), uniform([fan_out], bound, rng));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(&p[self.weight.0])?.broadcast_add(&p[self.bias.0])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.register(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&p[self.gamma.0], &p[self.beta.0], T::lit(LAYER_NORM_EPS))
    }
}

/// Two linear maps with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let (i, h, o) = dims;
        Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), i, h, rng),
            out: Linear::new(store, &format!("{name}.1"), h, o, rng),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.hidden.forward(p, x)?.gelu();
        self.out.forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_dense_oracle() {
        let mut rng = crate::rng::stream(3, "test");
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
        let x = uniform::<f64>([4, 3], 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = lin.forward(&p, tape.constant(x.clone())).unwrap().value();
        let (w, b) = (store.get(lin.weight), store.get(lin.bias));
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for k in 0..3 {
                    acc += x.at(&[i, k]) * w.at(&[k, j]);
                }
                assert!((y.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
        assert_eq!(store.numel(), 3 * 2 + 2);
        assert!(store.set("lin.weight", Tensor::zeros([2, 3])).is_err());
        assert!(store.set("lin.weight", Tensor::zeros([3, 2])).is_ok());
    }
}
