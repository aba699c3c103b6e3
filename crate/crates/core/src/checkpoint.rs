//! Checkpoint files: a manifest (component, tensor shapes, seed, sizes)
//! followed by every parameter as one flat array in declared order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CpgaError, Result};
use crate::memory::{FeatureBank, PredictionBank};
use crate::models::{Classifier, Component, Extractor, Generator, ModelDims, Projector};
use crate::params::ParamSet;

pub const FORMAT: &str = "cpga-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub component: String,
    pub seed: u64,
    pub dims: ModelDims,
    #[serde(default)]
    pub frozen: bool,
    /// Momentum coefficient, for prediction banks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub tensors: Vec<TensorSpec>,
    /// SHA-256 of the parameters (see [`ParamSet::digest`]).
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(component: &str, seed: u64, dims: &ModelDims, params: &ParamSet) -> Self {
        Checkpoint {
            manifest: Manifest {
                format: FORMAT.to_string(),
                component: component.to_string(),
                seed,
                dims: dims.clone(),
                frozen: false,
                beta: None,
                tensors: params
                    .shapes()
                    .into_iter()
                    .map(|(name, shape)| TensorSpec { name, shape })
                    .collect(),
                digest: params.digest(),
            },
            data: params.flatten(),
        }
    }

    pub fn of<C: Component>(c: &C, seed: u64, dims: &ModelDims) -> Self {
        Checkpoint::new(C::NAME, seed, dims, c.params())
    }

    pub fn classifier(c: &Classifier, seed: u64, dims: &ModelDims) -> Self {
        let mut ck = Checkpoint::of(c, seed, dims);
        ck.manifest.frozen = c.is_frozen();
        ck
    }

    pub fn prediction_bank(bank: &PredictionBank, seed: u64, dims: &ModelDims) -> Self {
        let mut ck = Checkpoint::new("prediction_bank", seed, dims, &matrix_set("h", bank.rows().to_owned()));
        ck.manifest.beta = Some(bank.beta());
        ck
    }

    pub fn feature_bank(bank: &FeatureBank, seed: u64, dims: &ModelDims) -> Self {
        Checkpoint::new("feature_bank", seed, dims, &matrix_set("q", bank.rows().to_owned()))
    }

    pub fn params(&self) -> Result<ParamSet> {
        let shapes: Vec<(String, Vec<usize>)> = self
            .manifest
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        let set = ParamSet::from_flat(&shapes, &self.data)?;
        if set.digest() != self.manifest.digest {
            return Err(CpgaError::Parse("checkpoint digest mismatch".into()));
        }
        Ok(set)
    }

    fn expect(&self, component: &str) -> Result<ParamSet> {
        if self.manifest.format != FORMAT {
            return Err(CpgaError::Parse(format!("unknown format {:?}", self.manifest.format)));
        }
        if self.manifest.component != component {
            return Err(CpgaError::Parse(format!(
                "checkpoint holds {:?}, expected {component:?}",
                self.manifest.component
            )));
        }
        self.params()
    }

    pub fn to_extractor(&self) -> Result<Extractor> {
        Extractor::from_parts(&self.manifest.dims, self.expect(Extractor::NAME)?)
    }

    pub fn to_classifier(&self) -> Result<Classifier> {
        Classifier::from_parts(&self.manifest.dims, self.expect(Classifier::NAME)?, self.manifest.frozen)
    }

    pub fn to_generator(&self) -> Result<Generator> {
        Generator::from_parts(&self.manifest.dims, self.expect(Generator::NAME)?)
    }

    pub fn to_projector(&self) -> Result<Projector> {
        Projector::from_parts(&self.manifest.dims, self.expect(Projector::NAME)?)
    }

    pub fn to_prediction_bank(&self) -> Result<PredictionBank> {
        let set = self.expect("prediction_bank")?;
        let beta = self
            .manifest
            .beta
            .ok_or_else(|| CpgaError::Parse("prediction bank without beta".into()))?;
        Ok(PredictionBank::from_rows(set.mat(0).to_owned(), beta))
    }

    pub fn to_feature_bank(&self) -> Result<FeatureBank> {
        let set = self.expect("feature_bank")?;
        Ok(FeatureBank::new(set.mat(0).to_owned()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn matrix_set(name: &str, m: Array2<f64>) -> ParamSet {
    let mut set = ParamSet::new();
    set.push(name, m.into_dyn());
    set
}
