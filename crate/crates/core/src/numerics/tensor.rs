use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: positive shape")
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(&[1], vec![v]).expect("scalar")
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f32>> {
        self.grad.as_mut()
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [f32], Option<&mut [f32]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Named trainable tensors in insertion order plus a global step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Tensor>,
    pub step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Structure(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Replaces or inserts; used by checkpoint loading and optimizer state.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Checks that `self` carries exactly the trainable parameter names and
    /// shapes of `reference`; entries prefixed with `__` are ignored.
    pub fn check_structure(&self, reference: &ParameterStore) -> Result<()> {
        let visible = |s: &ParameterStore| {
            s.params
                .iter()
                .filter(|(n, _)| !n.starts_with("__"))
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        let (mine, theirs) = (visible(self), visible(reference));
        for (name, shape) in &theirs {
            match self.params.get(name) {
                None => return Err(Error::Structure(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Structure(format!(
                        "parameter {name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if mine.len() != theirs.len() {
            let extra: Vec<_> = mine
                .iter()
                .filter(|(n, _)| !reference.contains(n))
                .map(|(n, _)| n.as_str())
                .collect();
            return Err(Error::Structure(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// Stores a non-trainable `__meta.<key>` vector (length-prefixed, so
    /// empty lists survive a checkpoint).
    pub fn set_meta(&mut self, key: &str, values: &[f32]) {
        let mut data = Vec::with_capacity(values.len() + 1);
        data.push(values.len() as f32);
        data.extend_from_slice(values);
        self.set(format!("__meta.{key}"), Tensor::new(&[data.len()], data).expect("meta shape"));
    }

    pub fn meta(&self, key: &str) -> Option<Vec<f32>> {
        let d = self.get(&format!("__meta.{key}"))?.data();
        let n = *d.first()? as usize;
        d.get(1..1 + n).map(<[f32]>::to_vec)
    }

    /// Nests every entry of `other` under `__<prefix>/` so a second model
    /// can travel in the same checkpoint without affecting structure checks.
    pub fn embed_prefixed(&mut self, prefix: &str, other: &ParameterStore) {
        for (name, t) in other.iter() {
            self.set(format!("__{prefix}/{name}"), Tensor::new(t.shape(), t.data().to_vec()).expect("same shape"));
        }
        self.set(format!("__{prefix}/__step"), Tensor::new(&[2], crate::numerics::optim::split_counter(other.step)).expect("counter"));
    }

    /// Inverse of [`ParameterStore::embed_prefixed`]; plain names regain
    /// gradient buffers.
    pub fn extract_prefixed(&self, prefix: &str) -> ParameterStore {
        let head = format!("__{prefix}/");
        let mut out = ParameterStore::new();
        for (name, t) in self.iter() {
            let Some(inner) = name.strip_prefix(&head) else { continue };
            if inner == "__step" {
                out.step = crate::numerics::optim::join_counter(t.data());
                continue;
            }
            let mut c = Tensor::new(t.shape(), t.data().to_vec()).expect("same shape");
            if !inner.starts_with("__") {
                c = c.with_grad();
            }
            out.set(inner.to_string(), c);
        }
        out
    }

    /// Copies data from `other` for every matching name, preserving this
    /// store's gradient flags.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        other.check_structure(self)?;
        for (name, t) in self.params.iter_mut() {
            if let Some(src) = other.get(name) {
                t.data_mut().copy_from_slice(src.data());
            }
        }
        for (name, t) in other.iter() {
            if name.starts_with("__") {
                self.params.insert(name.clone(), t.clone());
            }
        }
        self.step = other.step;
        Ok(())
    }
}
