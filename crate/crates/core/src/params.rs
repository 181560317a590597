//! Named parameter tensors and their accumulated gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Optimizer group a parameter belongs to; each group has its own base learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Retriever,
    Reader,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.gen_range(-scale..=scale)))
            .collect();
        self.add(name, group, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        v: f64,
    ) -> ParamId {
        let mut m = Matrix::zeros(rows, cols);
        m.fill(T::of(v));
        self.add(name, group, m)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.params[id.0].group = group;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot of every tensor keyed by name, widened to `f64`.
    pub fn export(&self) -> BTreeMap<String, TensorRecord> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    TensorRecord {
                        rows: p.value.rows(),
                        cols: p.value.cols(),
                        data: p.value.data().iter().map(|x| x.as_f64()).collect(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites every tensor from a snapshot; names and shapes must match exactly.
    pub fn import(&mut self, tensors: &BTreeMap<String, TensorRecord>) -> Result<()> {
        let mut problems = Vec::new();
        for p in &self.params {
            match tensors.get(&p.name) {
                None => problems.push(format!("missing tensor {}", p.name)),
                Some(t) if (t.rows, t.cols) != p.value.shape() || t.data.len() != t.rows * t.cols => {
                    problems.push(format!(
                        "tensor {} has shape {}x{}, expected {}x{}",
                        p.name,
                        t.rows,
                        t.cols,
                        p.value.rows(),
                        p.value.cols()
                    ))
                }
                Some(_) => {}
            }
        }
        for name in tensors.keys() {
            if !self.by_name.contains_key(name) {
                problems.push(format!("unexpected tensor {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Integrity(problems.join("; ")));
        }
        for p in &mut self.params {
            let t = &tensors[&p.name];
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.data) {
                *dst = T::of(src);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Accumulated gradients, one slot per parameter of a store.
///
/// Backward passes add into the tape; it is only cleared by [`GradientTape::zero`],
/// which the trainer calls after every optimizer step.
#[derive(Debug, Clone)]
pub struct GradientTape<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> GradientTape<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        GradientTape {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix<T>) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Gradient of a parameter, `None` when no backward pass reached it.
    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix<T>> {
        self.grads[id.0].as_mut()
    }

    /// Gradient of a parameter with unreached parameters reported as zeros.
    pub fn get_or_zero(&self, id: ParamId, store: &ParamStore<T>) -> Matrix<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn is_reached(&self, id: ParamId) -> bool {
        self.grads[id.0].is_some()
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sum_sq())
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        self.grads.iter_mut().flatten().for_each(|g| g.scale(s));
    }
}
