use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{check_gradients_at, GradReport, Tape, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total trainable elements.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Trainable elements of tensors whose name starts with `prefix`.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Constants for every tensor except `id`, which is replaced by `var`.
    pub fn bind_with<'t>(&self, tape: &'t Tape, id: ParamId, var: Var<'t>) -> Bound<'t> {
        let mut bound = self.bind_frozen(tape);
        bound.vars[id.0] = var;
        bound
    }
}

/// Tape handles for every tensor of a [`ParamStore`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients of every tensor after backward, zeros where none arrived.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Finite-difference check of a scalar function of the parameters, one tensor
/// at a time. With `max_coords`, each tensor is checked on a seeded random
/// subset of its coordinates.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    f: F,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<Vec<(String, GradReport)>>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let rng = Prng::new(seed);
    store
        .ids()
        .map(|id| {
            let n = store.get(id).numel();
            let mut coords: Vec<usize> = (0..n).collect();
            if let Some(limit) = max_coords.filter(|&l| l < n) {
                rng.split(store.name(id)).shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
            let report = check_gradients_at(
                |tape, v| f(tape, &store.bind_with(tape, id, v)),
                store.get(id),
                h,
                &coords,
            )
            .map_err(|e| match e {
                Error::NonFinite { what, index } => Error::NonFinite {
                    what: format!("{what} (parameter `{}`)", store.name(id)),
                    index,
                },
                other => other,
            })?;
            Ok((store.name(id).to_string(), report))
        })
        .collect()
}
