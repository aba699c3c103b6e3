//! Named parameter tensors, their gradients and the SGD optimizer.

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CpgaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub data: ArrayD<f64>,
}

/// An ordered list of named tensors. Gradients share the layout of the
/// parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, data: ArrayD<f64>) -> usize {
        self.tensors.push(Tensor {
            name: name.into(),
            data,
        });
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        self.tensors[i]
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .expect("tensor is not a matrix")
    }

    pub fn mat_mut(&mut self, i: usize) -> ArrayViewMut2<'_, f64> {
        self.tensors[i]
            .data
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("tensor is not a matrix")
    }

    pub fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        self.tensors[i]
            .data
            .view()
            .into_dimensionality::<Ix1>()
            .expect("tensor is not a vector")
    }

    pub fn vec_mut(&mut self, i: usize) -> ArrayViewMut1<'_, f64> {
        self.tensors[i]
            .data
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("tensor is not a vector")
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    data: ArrayD::zeros(t.data.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|t| (t.name.clone(), t.data.shape().to_vec()))
            .collect()
    }

    /// All entries in declared tensor order, each tensor row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            out.extend(t.data.iter().copied());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CpgaError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            for v in t.data.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Builds a set from `(name, shape)` pairs and a flat buffer.
    pub fn from_flat(shapes: &[(String, Vec<usize>)], flat: &[f64]) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for (name, shape) in shapes {
            set.push(name.clone(), ArrayD::zeros(IxDyn(shape)));
        }
        set.assign_flat(flat)?;
        Ok(set)
    }

    /// `self += alpha * other`; layouts must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamSet) {
        assert_eq!(self.len(), other.len(), "parameter layouts differ");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.scaled_add(alpha, &b.data);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over shapes and the little-endian bytes of every entry.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            hasher.update(t.name.as_bytes());
            for &s in t.data.shape() {
                hasher.update((s as u64).to_le_bytes());
            }
            for v in t.data.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Heavy-ball SGD: `v <- mu v + g + wd p`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: &ParamSet) -> Self {
        Sgd {
            cfg,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        } = self.cfg;
        for ((p, g), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.velocity.tensors.iter_mut())
        {
            Zip::from(&mut p.data)
                .and(&g.data)
                .and(&mut v.data)
                .for_each(|p, &g, v| {
                    *v = momentum * *v + g + weight_decay * *p;
                    *p -= learning_rate * *v;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, IxDyn};

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        p.push("b", array![5.0, 6.0].into_dyn());
        p
    }

    #[test]
    fn flat_round_trip() {
        let p = sample();
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let q = ParamSet::from_flat(&p.shapes(), &flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());
    }

    #[test]
    fn digest_sees_single_bit() {
        let p = sample();
        let mut q = p.clone();
        q.vec_mut(1)[0] = f64::from_bits(5.0f64.to_bits() + 1);
        assert_ne!(p.digest(), q.digest());
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = sample();
        let mut g = p.zeros_like();
        g.tensors[1].data = ArrayD::from_elem(IxDyn(&[2]), 1.0);
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.5,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &p,
        );
        opt.step(&mut p, &g);
        assert_eq!(p.vec(1).to_vec(), vec![4.5, 5.5]);
        assert_eq!(p.mat(0)[[1, 1]], 4.0);
    }

    #[test]
    fn wrong_flat_length_is_shape_error() {
        let mut p = sample();
        assert!(matches!(p.assign_flat(&[1.0]), Err(CpgaError::Shape(_))));
    }
}
