//! The two training objectives: prototype generation (generator only) and
//! prototype adaptation (extractor and projector).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{
    ce_prototype, elr, neighborhood_clustering_on_bank, nonparametric_backward,
    nonparametric_predict, prototype_infonce, weighted_contrastive, PairPlan, Temperature,
};
use crate::error::{CpgaError, Result};
use crate::models::{Classifier, Component, Extractor, Generator, Projector};
use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct Stage1Loss {
    pub total: f64,
    pub ce: f64,
    pub contrastive: f64,
    pub generator_grads: ParamSet,
}

/// `L_ce + L_con^p` on a generated batch, differentiated w.r.t. the
/// generator. The classifier must be frozen; it only passes gradients
/// through to its input.
pub fn stage1_objective(
    generator: &Generator,
    classifier: &Classifier,
    labels: &[usize],
    noise: ArrayView2<f64>,
    plan: Option<&PairPlan>,
    tau: Temperature,
) -> Result<Stage1Loss> {
    if !classifier.is_frozen() {
        return Err(CpgaError::Contract(
            "prototype generation requires a frozen classifier".into(),
        ));
    }
    let (batch, tape) = generator.generate_tape(labels, noise)?;
    let probs = classifier.classify(batch.prototypes.view())?;
    let ce = ce_prototype(probs.view(), labels)?;
    let mut dp = classifier.backward_input(probs.view(), ce.grad.view());
    let contrastive = match plan {
        Some(plan) => {
            let con = prototype_infonce(batch.prototypes.view(), plan, tau)?;
            dp += &con.grad;
            con.value
        }
        None => 0.0,
    };
    let mut generator_grads = generator.params().zeros_like();
    generator.backward(&tape, dp.view(), &mut generator_grads);
    Ok(Stage1Loss {
        total: ce.value + contrastive,
        ce: ce.value,
        contrastive,
        generator_grads,
    })
}

/// Which adaptation terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub contrastive: bool,
    pub weights: bool,
    pub elr: bool,
    pub nc: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            contrastive: true,
            weights: true,
            elr: true,
            nc: true,
        }
    }
}

impl LossToggles {
    pub const SOURCE_ONLY: LossToggles = LossToggles {
        contrastive: false,
        weights: false,
        elr: false,
        nc: false,
    };

    pub fn validate(&self) -> Result<()> {
        if (self.elr || self.weights) && !self.contrastive {
            return Err(CpgaError::config(
                "toggles",
                "confidence weights and ELR require contrastive alignment",
            ));
        }
        Ok(())
    }

    pub fn any(&self) -> bool {
        self.contrastive || self.elr || self.nc
    }
}

/// Trade-off weights of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeOffs {
    pub lambda: f64,
    pub eta: f64,
}

impl TradeOffs {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CpgaError::config("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(CpgaError::config("eta", format!("must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Everything one adaptation step reads.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub indices: &'a [usize],
    /// One generated prototype per class, ordered by class.
    pub prototypes: ArrayView2<'a, f64>,
    pub pseudo_labels: &'a [usize],
    pub weights: &'a [f64],
    /// Prediction-bank rows for `indices`.
    pub history: ArrayView2<'a, f64>,
    /// Full feature bank (before this batch's update).
    pub feature_bank: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct Stage2Loss {
    pub total: f64,
    pub contrastive: f64,
    pub elr: f64,
    pub nc: f64,
    pub extractor_grads: ParamSet,
    pub projector_grads: ParamSet,
    /// Fresh features of the batch, for the feature bank.
    pub features: Array2<f64>,
    /// Non-parametric predictions of the batch, for the prediction bank.
    pub predictions: Array2<f64>,
}

/// `L_con^w + lambda L_elr + eta L_nc`, differentiated w.r.t. the extractor
/// and projector. The neighborhood term reaches the extractor only.
pub fn stage2_objective(
    extractor: &Extractor,
    projector: &Projector,
    batch: &Stage2Batch<'_>,
    toggles: LossToggles,
    trade: TradeOffs,
    tau: Temperature,
) -> Result<Stage2Loss> {
    toggles.validate()?;
    trade.validate()?;
    let k = batch.prototypes.nrows();
    let n = batch.inputs.nrows();
    if batch.indices.len() != n || batch.history.nrows() != n {
        return Err(CpgaError::Shape("batch components disagree on size".into()));
    }

    let (q, ext_tape) = extractor.extract_tape(batch.inputs)?;
    let (u, u_tape) = projector.project_tape(q.view())?;
    let (v, v_tape) = projector.project_tape(batch.prototypes)?;
    let o = nonparametric_predict(u.view(), v.view(), tau)?;

    let mut du = Array2::zeros(u.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut dq = Array2::zeros(q.raw_dim());

    let mut contrastive = 0.0;
    if toggles.contrastive {
        let ones;
        let weights = if toggles.weights {
            batch.weights
        } else {
            ones = vec![1.0; n];
            &ones
        };
        let con = weighted_contrastive(u.view(), v.view(), batch.pseudo_labels, weights, k, tau)?;
        contrastive = con.value;
        du += &con.grad_u;
        dv += &con.grad_v;
    }

    let mut elr_value = 0.0;
    if toggles.elr {
        let reg = elr(o.view(), batch.history)?;
        elr_value = reg.value;
        if trade.lambda > 0.0 {
            let (du_r, dv_r) = nonparametric_backward(u.view(), v.view(), o.view(), reg.grad.view(), tau);
            du.scaled_add(trade.lambda, &du_r);
            dv.scaled_add(trade.lambda, &dv_r);
        }
    }

    let mut nc = 0.0;
    if toggles.nc {
        let nc_loss = neighborhood_clustering_on_bank(q.view(), batch.indices, batch.feature_bank, tau)?;
        nc = nc_loss.value;
        dq.scaled_add(trade.eta, &nc_loss.grad);
    }

    let mut projector_grads = projector.params().zeros_like();
    dq += &projector.backward(&u_tape, du.view(), &mut projector_grads);
    projector.backward(&v_tape, dv.view(), &mut projector_grads);
    let mut extractor_grads = extractor.params().zeros_like();
    extractor.backward(&ext_tape, dq.view(), &mut extractor_grads);

    let lambda = if toggles.elr { trade.lambda } else { 0.0 };
    let eta = if toggles.nc { trade.eta } else { 0.0 };
    Ok(Stage2Loss {
        total: contrastive + lambda * elr_value + eta * nc,
        contrastive,
        elr: elr_value,
        nc,
        extractor_grads,
        projector_grads,
        features: q,
        predictions: o,
    })
}
