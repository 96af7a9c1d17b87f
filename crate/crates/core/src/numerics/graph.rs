//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with a closure that maps the output gradient onto the gradients of its
//! inputs. [`Graph::backward`] replays the tape in reverse. Graphs are built
//! per training step and thrown away; trainable state lives in a
//! [`ParameterStore`] and is pulled in with [`Graph::param`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParameterStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&[Value], &[f32], &mut GradSink)>;

/// Write access to input gradients during a backward step.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f32>>],
    needs: &'a [bool],
    values: &'a [Value],
}

impl GradSink<'_> {
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Gradient accumulator for `v`, zero-initialised on first use.
    pub fn buf(&mut self, v: Var) -> &mut [f32] {
        let len = self.values[v.0].data.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Graph {
    pub(crate) values: Vec<Value>,
    grads: Vec<Option<Vec<f32>>>,
    needs: Vec<bool>,
    backward: Vec<Option<BackwardFn>>,
    params: Vec<(Var, String)>,
    param_cache: HashMap<(String, bool), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: &[Var],
        bw: BackwardFn,
        op: &str,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("{op} produced non-finite value {bad}")));
        }
        let needs = parents.iter().any(|p| self.needs[p.0]);
        self.values.push(Value { shape, data });
        self.grads.push(None);
        self.needs.push(needs);
        self.backward.push(needs.then_some(bw));
        Ok(Var(self.values.len() - 1))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, needs: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() || n == 0 {
            return Err(Error::Shape(format!(
                "leaf shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("non-finite leaf value".into()));
        }
        self.values.push(Value { shape, data });
        self.grads.push(None);
        self.needs.push(needs);
        self.backward.push(None);
        Ok(Var(self.values.len() - 1))
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        self.push_leaf(shape.to_vec(), data, false)
    }

    /// Free variable whose gradient can be read back with [`Graph::grad`].
    pub fn variable(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        self.push_leaf(shape.to_vec(), data, true)
    }

    pub fn tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Pulls parameter `name` from `store`. When `trainable` is false the
    /// node is treated as a constant (used to freeze one network while the
    /// other is updated).
    pub fn param(&mut self, store: &ParameterStore, name: &str, trainable: bool) -> Result<Var> {
        let key = (name.to_string(), trainable);
        if let Some(&v) = self.param_cache.get(&key) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Structure(format!("unknown parameter {name}")))?;
        let needs = trainable && t.requires_grad();
        let v = self.push_leaf(t.shape().to_vec(), t.data().to_vec(), needs)?;
        if needs {
            self.params.push((v, name.to_string()));
        }
        self.param_cache.insert(key, v);
        Ok(v)
    }

    /// Value copy cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let val = self.values[v.0].clone();
        self.push_leaf(val.shape, val.data, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.values[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.values[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape
            )));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Back-propagates an arbitrary output cotangent `seed` from `out`.
    pub fn backward_from(&mut self, loss: Var, seed: Vec<f32>) -> Result<()> {
        if seed.len() != self.values[loss.0].data.len() {
            return Err(Error::Shape("seed gradient length".into()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(seed);
        let Graph {
            values,
            grads,
            needs,
            backward,
            ..
        } = self;
        for i in (0..=loss.0).rev() {
            let Some(bw) = &backward[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            {
                let mut sink = GradSink {
                    grads: grads.as_mut_slice(),
                    needs: needs.as_slice(),
                    values: values.as_slice(),
                };
                bw(values, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of every trainable parameter node into `store`.
    pub fn accumulate_grads(&self, store: &mut ParameterStore) {
        for (v, name) in &self.params {
            let (Some(g), Some(t)) = (self.grads[v.0].as_ref(), store.get_mut(name)) else {
                continue;
            };
            if let Some(acc) = t.grad_mut() {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}
