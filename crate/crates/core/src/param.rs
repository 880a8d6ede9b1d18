//! Named trainable parameters and non-trainable buffers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::{rng, Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A tensor with a gradient accumulator.
///
/// Buffers (batch-norm running statistics) are stored as parameters with
/// `requires_grad == false`; the optimizer skips them.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a parameter initialized from a stream keyed by `seed` and its name.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => alloc::vec![F::ZERO; n],
            Init::Ones => alloc::vec![F::ONE; n],
            Init::TruncNormal(std) => {
                let mut r = rng::stream(seed, name);
                (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut r);
                        if z.abs() <= 2.0 {
                            break F::from_f64(z * std);
                        }
                    })
                    .collect()
            }
        };
        let value = Tensor::new(shape.to_vec(), data).expect("shape product matches buffer");
        self.insert(name, value, true)
    }

    /// Registers a non-trainable buffer.
    pub fn add_buffer(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Tensor<F>, requires_grad: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            requires_grad,
        });
        self.by_name.insert(name.into(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds the gradients of every parameter leaf in `grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g) {
                *acc += *v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = F::ZERO);
        }
    }

    /// Overwrites the value of a named parameter; shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Data(alloc::format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Data(alloc::format!(
                "parameter {name}: stored shape {:?}, expected {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}
