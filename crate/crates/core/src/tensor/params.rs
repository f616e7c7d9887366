use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.entries.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// A graph together with lazily bound parameter leaves.
///
/// Parameters enter the tape the first time a forward pass asks for them,
/// so a pass that never touches (say) the decoder records no decoder leaves.
pub struct Session<'p, T: Scalar> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, graph: Graph<T>, trainable: bool) -> Self {
        Session {
            graph,
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    /// Inference-only session: no dropout, parameters carry no gradient.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::new(params, Graph::eval(), false)
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients of every bound parameter, aligned with the store.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = (*v)?;
                let g = self.graph.grad(v)?;
                Some(Tensor::from_parts(
                    self.params.get(ParamId(i)).shape().to_vec(),
                    g.to_vec(),
                ))
            })
            .collect()
    }
}

/// Adds `grads` into `acc`, allocating slots on first use.
pub fn accumulate_grads<T: Scalar>(
    acc: &mut Vec<Option<Tensor<T>>>,
    grads: Vec<Option<Tensor<T>>>,
) -> Result<()> {
    if acc.is_empty() {
        acc.resize_with(grads.len(), || None);
    }
    if acc.len() != grads.len() {
        return Err(Error::invalid(
            "gradient sets from different parameter stores",
        ));
    }
    for (slot, g) in acc.iter_mut().zip(grads) {
        match (slot.as_mut(), g) {
            (Some(a), Some(g)) => a
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, &d)| *x += d),
            (None, Some(g)) => *slot = Some(g),
            (_, None) => {}
        }
    }
    Ok(())
}
