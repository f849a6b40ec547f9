use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder ODE vector field.
    EncoderField,
    /// GRU cell.
    Gru,
    /// Posterior head mapping the final hidden state to mean and scale.
    PosteriorHead,
    /// Decoder ODE vector field.
    DecoderField,
    /// Cause-specific modules and the shared hazard head.
    HazardDecoder,
    /// Data reconstruction head.
    DataDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    GlorotUniform { limit: f64 },
    Constant { value: f64 },
}

#[derive(Clone, Debug)]
pub struct Tensor {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    fn register(&mut self, name: String, group: ParamGroup, value: Mat, init: Init) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.tensors.len());
        self.tensors.push(Tensor {
            name,
            group,
            value,
            init,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform `rows × cols` weight.
    pub fn glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-limit..=limit));
        self.register(name.into(), group, value, Init::GlorotUniform { limit })
    }

    pub fn constant(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.register(
            name.into(),
            group,
            Mat::from_elem((rows, cols), value),
            Init::Constant { value },
        )
    }

    /// Overwrite a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Mat) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.value.dim() != value.dim() {
            return Err(Error::Dimension(format!(
                "{}: expected {:?}, got {:?}",
                t.name,
                t.value.shape(),
                value.shape()
            )));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{}: non-finite value", t.name)));
        }
        t.value = value;
        Ok(())
    }

    /// Place every tensor on the tape as a parameter leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.value.clone()))
            .collect();
        Bound { vars }
    }

    /// Flattened view of all values, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.value.iter().copied())
            .collect()
    }
}

/// Tape handles for one forward pass.
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Gradient tensors aligned with [`ModelParams`]; untouched slots are zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub tensors: Vec<Mat>,
}

impl Gradients {
    pub fn from_tape(raw: Vec<Option<Mat>>, params: &ModelParams) -> Self {
        let tensors = raw
            .into_iter()
            .zip(params.tensors())
            .map(|(g, t)| match g {
                Some(g) if g.is_standard_layout() => g,
                Some(g) => g.as_standard_layout().into_owned(),
                None => Mat::zeros(t.value.dim()),
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Mat> = params
            .tensors()
            .iter()
            .map(|t| Mat::zeros(t.value.dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, g) in grads.tensors.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let w = &mut params.tensors[i].value;
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
