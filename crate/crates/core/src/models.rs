//! The four parametric components: feature extractor, weight-normalized
//! classifier, conditional prototype generator and contrastive projector.
//!
//! Each component owns a [`ParamSet`] and exposes a pure forward pass plus a
//! taped forward/backward pair used during training.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CpgaError, Result};
use crate::linalg::{self, NORM_EPS};
use crate::nn::{Activation, MlpLayout, MlpTape};
use crate::params::{ParamSet, Sgd};

/// Sizes of every component. Defaults are the desk-scale architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub input_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub noise_dim: usize,
    pub generator_hidden: usize,
    pub projector_hidden: Vec<usize>,
    pub contrastive_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input_dim: 16,
            num_classes: 8,
            feature_dim: 64,
            extractor_hidden: vec![64, 64],
            noise_dim: 100,
            generator_hidden: 256,
            projector_hidden: vec![64, 32],
            contrastive_dim: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CpgaError::config("num_classes", "must be at least 2"));
        }
        for (field, v) in [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("noise_dim", self.noise_dim),
            ("generator_hidden", self.generator_hidden),
            ("contrastive_dim", self.contrastive_dim),
        ] {
            if v == 0 {
                return Err(CpgaError::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Common access to a component's parameters.
pub trait Component {
    const NAME: &'static str;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

/// `G_e`: MLP from inputs to features, tanh hidden units, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    layout: MlpLayout,
    params: ParamSet,
}

impl Extractor {
    pub fn new<R: Rng>(dims: &ModelDims, rng: &mut R) -> Self {
        let mut widths = vec![dims.input_dim];
        widths.extend(&dims.extractor_hidden);
        widths.push(dims.feature_dim);
        let mut layout = MlpLayout::new(widths, Activation::Tanh, Activation::Identity);
        let mut params = ParamSet::new();
        layout.init(&mut params, "extractor", rng);
        Extractor { layout, params }
    }

    pub(crate) fn from_parts(dims: &ModelDims, params: ParamSet) -> Result<Self> {
        let mut widths = vec![dims.input_dim];
        widths.extend(&dims.extractor_hidden);
        widths.push(dims.feature_dim);
        let layout = MlpLayout::new(widths, Activation::Tanh, Activation::Identity);
        check_layout(&layout, 0, &params)?;
        Ok(Extractor { layout, params })
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn extract(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.layout.check_input(x)?;
        Ok(self.layout.forward(&self.params, x))
    }

    pub fn extract_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpTape)> {
        self.layout.check_input(x)?;
        Ok(self.layout.forward_tape(&self.params, x))
    }

    pub fn backward(&self, tape: &MlpTape, dq: ArrayView2<f64>, grads: &mut ParamSet) -> Array2<f64> {
        self.layout.backward(&self.params, tape, dq, grads)
    }
}

impl Component for Extractor {
    const NAME: &'static str = "extractor";
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// `C_y`: linear classifier whose rows are used as `g_k * v_k / |v_k|`.
///
/// Once frozen, any attempt to update it fails with a contract error;
/// gradients may still flow through it to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    params: ParamSet,
    frozen: bool,
}

const DIRECTION: usize = 0;
const GAIN: usize = 1;

impl Classifier {
    pub fn new<R: Rng>(dims: &ModelDims, rng: &mut R) -> Self {
        let (k, d) = (dims.num_classes, dims.feature_dim);
        let bound = (6.0 / (k + d) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut params = ParamSet::new();
        params.push(
            "classifier.direction",
            ArrayD::from_shape_fn(IxDyn(&[k, d]), |_| dist.sample(rng)),
        );
        params.push("classifier.gain", ArrayD::from_elem(IxDyn(&[k]), 1.0));
        Classifier {
            params,
            frozen: false,
        }
    }

    /// Builds a classifier from explicit direction rows and gains.
    pub fn from_weights(direction: Array2<f64>, gain: Array1<f64>) -> Result<Self> {
        if direction.nrows() != gain.len() {
            return Err(CpgaError::Shape(format!(
                "{} direction rows but {} gains",
                direction.nrows(),
                gain.len()
            )));
        }
        if direction.rows().into_iter().any(|r| linalg::l2_norm(r) == 0.0) {
            return Err(CpgaError::Contract("classifier row is the zero vector".into()));
        }
        let mut params = ParamSet::new();
        params.push("classifier.direction", direction.into_dyn());
        params.push("classifier.gain", gain.into_dyn());
        Ok(Classifier {
            params,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(dims: &ModelDims, params: ParamSet, frozen: bool) -> Result<Self> {
        let expected = vec![
            vec![dims.num_classes, dims.feature_dim],
            vec![dims.num_classes],
        ];
        let got: Vec<Vec<usize>> = params.shapes().into_iter().map(|(_, s)| s).collect();
        if got != expected {
            return Err(CpgaError::Shape(format!(
                "classifier tensors {got:?}, expected {expected:?}"
            )));
        }
        Ok(Classifier { params, frozen })
    }

    pub fn num_classes(&self) -> usize {
        self.params.mat(DIRECTION).nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.params.mat(DIRECTION).ncols()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Effective weight rows `g_k * v_k / |v_k|`, plus the unit directions
    /// and row norms.
    fn effective(&self) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let (unit, norms) = linalg::l2_normalize_rows(self.params.mat(DIRECTION));
        let gain = self.params.vec(GAIN);
        let w = &unit * &gain.view().insert_axis(Axis(1));
        (w, unit, norms)
    }

    /// Unit-norm class directions.
    pub fn class_directions(&self) -> Array2<f64> {
        self.effective().1
    }

    pub fn logits(&self, q: ArrayView2<f64>) -> Result<Array2<f64>> {
        if q.ncols() != self.feature_dim() {
            return Err(CpgaError::Shape(format!(
                "classifier expects {} feature columns, got {}",
                self.feature_dim(),
                q.ncols()
            )));
        }
        let (w, _, _) = self.effective();
        Ok(q.dot(&w.t()))
    }

    /// Class probabilities: softmax of the weight-normalized logits.
    pub fn classify(&self, q: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(linalg::softmax_rows(self.logits(q)?.view(), 1.0))
    }

    /// Gradient w.r.t. the classifier input given `dprobs` at output `probs`.
    /// Valid whether or not the classifier is frozen.
    pub fn backward_input(&self, probs: ArrayView2<f64>, dprobs: ArrayView2<f64>) -> Array2<f64> {
        let dlogits = linalg::softmax_backward(probs, dprobs, 1.0);
        let (w, _, _) = self.effective();
        dlogits.dot(&w)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// Fails on a frozen classifier.
    pub fn backward(
        &self,
        q: ArrayView2<f64>,
        probs: ArrayView2<f64>,
        dprobs: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> Result<Array2<f64>> {
        if self.frozen {
            return Err(CpgaError::Contract(
                "gradient requested for the frozen classifier".into(),
            ));
        }
        let dlogits = linalg::softmax_backward(probs, dprobs, 1.0);
        let (w, unit, norms) = self.effective();
        let gain = self.params.vec(GAIN);
        // dL/dW_eff, one row per class
        let dw = dlogits.t().dot(&q);
        for k in 0..self.num_classes() {
            let dwk = dw.row(k);
            let uk = unit.row(k);
            let along = dwk.dot(&uk);
            grads.vec_mut(GAIN)[k] += along;
            let scale = gain[k] / norms[k];
            let mut gv = grads.mat_mut(DIRECTION);
            let mut row = gv.row_mut(k);
            row.scaled_add(scale, &dwk);
            row.scaled_add(-scale * along, &uk);
        }
        Ok(dlogits.dot(&w))
    }

    pub fn apply(&mut self, opt: &mut Sgd, grads: &ParamSet) -> Result<()> {
        if self.frozen {
            return Err(CpgaError::Contract("update applied to the frozen classifier".into()));
        }
        opt.step(&mut self.params, grads);
        Ok(())
    }
}

impl Component for Classifier {
    const NAME: &'static str = "classifier";
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Draws `n` noise vectors with entries from U(0, 1).
pub fn sample_noise<R: Rng>(n: usize, noise_dim: usize, rng: &mut R) -> Array2<f64> {
    let dist = Uniform::new(0.0, 1.0).expect("unit interval");
    Array2::from_shape_fn((n, noise_dim), |_| dist.sample(rng))
}

/// A batch of generated prototypes with their conditioning labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBatch {
    pub prototypes: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Recorded generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTape {
    labels: Vec<usize>,
    noise: Array2<f64>,
    mlp: MlpTape,
}

/// `G_g`: class embedding multiplied element-wise with the noise, then an
/// MLP (ReLU hidden layer, linear output) to feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    layout: MlpLayout,
    params: ParamSet,
}

const EMBEDDING: usize = 0;

impl Generator {
    pub fn new<R: Rng>(dims: &ModelDims, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let emb = ArrayD::from_shape_fn(IxDyn(&[dims.num_classes, dims.noise_dim]), |_| {
            StandardNormal.sample(rng)
        });
        params.push("generator.embedding", emb);
        let mut layout = Self::mlp_layout(dims);
        layout.init(&mut params, "generator", rng);
        Generator { layout, params }
    }

    fn mlp_layout(dims: &ModelDims) -> MlpLayout {
        MlpLayout::new(
            vec![dims.noise_dim, dims.generator_hidden, dims.feature_dim],
            Activation::Relu,
            Activation::Identity,
        )
    }

    pub(crate) fn from_parts(dims: &ModelDims, params: ParamSet) -> Result<Self> {
        let mut layout = Self::mlp_layout(dims);
        layout.offset = 1;
        if params.len() != 1 + 2 * layout.num_layers()
            || params.mat(EMBEDDING).dim() != (dims.num_classes, dims.noise_dim)
        {
            return Err(CpgaError::Shape("generator tensors do not match dims".into()));
        }
        check_layout(&layout, 1, &params)?;
        Ok(Generator { layout, params })
    }

    pub fn num_classes(&self) -> usize {
        self.params.mat(EMBEDDING).nrows()
    }

    pub fn noise_dim(&self) -> usize {
        self.params.mat(EMBEDDING).ncols()
    }

    fn conditioned(&self, labels: &[usize], noise: ArrayView2<f64>) -> Result<Array2<f64>> {
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(CpgaError::Contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        if noise.nrows() != labels.len() || noise.ncols() != self.noise_dim() {
            return Err(CpgaError::Shape(format!(
                "noise is {:?}, expected ({}, {})",
                noise.dim(),
                labels.len(),
                self.noise_dim()
            )));
        }
        let emb = self.params.mat(EMBEDDING).select(Axis(0), labels);
        Ok(emb * noise)
    }

    pub fn generate(&self, labels: &[usize], noise: ArrayView2<f64>) -> Result<PrototypeBatch> {
        let h = self.conditioned(labels, noise)?;
        Ok(PrototypeBatch {
            prototypes: self.layout.forward(&self.params, h.view()),
            labels: labels.to_vec(),
        })
    }

    pub fn generate_tape(
        &self,
        labels: &[usize],
        noise: ArrayView2<f64>,
    ) -> Result<(PrototypeBatch, GeneratorTape)> {
        let h = self.conditioned(labels, noise)?;
        let (p, mlp) = self.layout.forward_tape(&self.params, h.view());
        Ok((
            PrototypeBatch {
                prototypes: p,
                labels: labels.to_vec(),
            },
            GeneratorTape {
                labels: labels.to_vec(),
                noise: noise.to_owned(),
                mlp,
            },
        ))
    }

    pub fn backward(&self, tape: &GeneratorTape, dp: ArrayView2<f64>, grads: &mut ParamSet) {
        let dh = self.layout.backward(&self.params, tape.mlp_ref(), dp, grads);
        let mut demb = grads.mat_mut(EMBEDDING);
        for (i, &y) in tape.labels.iter().enumerate() {
            let contrib = &dh.row(i) * &tape.noise.row(i);
            demb.row_mut(y).scaled_add(1.0, &contrib);
        }
    }
}

impl GeneratorTape {
    fn mlp_ref(&self) -> &MlpTape {
        &self.mlp
    }
}

impl Component for Generator {
    const NAME: &'static str = "generator";
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Recorded projector forward pass.
#[derive(Debug, Clone)]
pub struct ProjectorTape {
    mlp: MlpTape,
    out: Array2<f64>,
    norms: Array1<f64>,
}

/// `C_p`: three-layer MLP followed by row-wise L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    layout: MlpLayout,
    params: ParamSet,
}

impl Projector {
    fn mlp_layout(dims: &ModelDims) -> MlpLayout {
        let mut widths = vec![dims.feature_dim];
        widths.extend(&dims.projector_hidden);
        widths.push(dims.contrastive_dim);
        MlpLayout::new(widths, Activation::Tanh, Activation::Identity)
    }

    pub fn new<R: Rng>(dims: &ModelDims, rng: &mut R) -> Self {
        let mut layout = Self::mlp_layout(dims);
        let mut params = ParamSet::new();
        layout.init(&mut params, "projector", rng);
        Projector { layout, params }
    }

    pub(crate) fn from_parts(dims: &ModelDims, params: ParamSet) -> Result<Self> {
        let layout = Self::mlp_layout(dims);
        check_layout(&layout, 0, &params)?;
        Ok(Projector { layout, params })
    }

    pub fn project(&self, q: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.layout.check_input(q)?;
        let z = self.layout.forward(&self.params, q);
        Ok(linalg::l2_normalize_rows(z.view()).0)
    }

    pub fn project_tape(&self, q: ArrayView2<f64>) -> Result<(Array2<f64>, ProjectorTape)> {
        self.layout.check_input(q)?;
        let (z, mlp) = self.layout.forward_tape(&self.params, q);
        let (u, norms) = linalg::l2_normalize_rows(z.view());
        Ok((
            u.clone(),
            ProjectorTape {
                mlp,
                out: u,
                norms,
            },
        ))
    }

    pub fn backward(&self, tape: &ProjectorTape, du: ArrayView2<f64>, grads: &mut ParamSet) -> Array2<f64> {
        let dz = linalg::l2_normalize_backward(tape.out.view(), tape.norms.view(), du);
        self.layout.backward(&self.params, &tape.mlp, dz.view(), grads)
    }
}

impl Component for Projector {
    const NAME: &'static str = "projector";
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

fn check_layout(layout: &MlpLayout, offset: usize, params: &ParamSet) -> Result<()> {
    let shapes = params.shapes();
    for l in 0..layout.num_layers() {
        let w = &shapes.get(offset + 2 * l).map(|s| s.1.clone());
        let b = &shapes.get(offset + 2 * l + 1).map(|s| s.1.clone());
        if w.as_deref() != Some(&[layout.dims[l], layout.dims[l + 1]][..])
            || b.as_deref() != Some(&[layout.dims[l + 1]][..])
        {
            return Err(CpgaError::Shape(format!(
                "layer {l} tensors do not match widths {:?}",
                layout.dims
            )));
        }
    }
    if params.len() != offset + 2 * layout.num_layers() {
        return Err(CpgaError::Shape("unexpected extra tensors".into()));
    }
    Ok(())
}

/// Rows whose norm is below the normalization floor.
pub fn has_degenerate_rows(m: ArrayView2<f64>) -> bool {
    m.rows().into_iter().any(|r| linalg::l2_norm(r) < NORM_EPS)
}
