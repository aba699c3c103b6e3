//! Source pretraining, prototype generation (stage 1), prototype adaptation
//! (stage 2), inference and reverse validation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::{inject_label_noise, Dataset, DomainTag, ShiftConfig};
use crate::error::{CpgaError, Result};
use crate::labeling::{self, CentroidSet, PseudoLabels};
use crate::linalg;
use crate::losses::{
    label_smoothing_ce, sample_pairs, stage1_objective, stage2_objective, LossToggles, Stage2Batch,
    Temperature, TradeOffs,
};
use crate::memory::{BankInit, FeatureBank, PredictionBank};
use crate::models::{sample_noise, Classifier, Component, Extractor, Generator, ModelDims, Projector};
use crate::params::{Sgd, SgdConfig};

/// Hyperparameters of one full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub stage1_learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub eta: f64,
    pub beta: f64,
    pub tau: Temperature,
    pub seed: u64,
    pub alpha_smoothing: f64,
    /// Stage 1 uses the prototype contrastive term next to cross entropy.
    pub stage1_contrastive: bool,
    pub losses: LossToggles,
    pub bank_init: BankInit,
    /// Fraction of pseudo labels replaced by a wrong class each epoch.
    pub pseudo_label_noise: f64,
    /// Generated prototypes per class used for the geometry metrics.
    pub geometry_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 200,
            stage1_epochs: 200,
            stage2_epochs: 100,
            learning_rate: 0.01,
            stage1_learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 64,
            lambda: 5.0,
            eta: 0.05,
            beta: 0.9,
            tau: Temperature::DEFAULT,
            seed: 0,
            alpha_smoothing: 0.1,
            stage1_contrastive: true,
            losses: LossToggles::default(),
            bank_init: BankInit::Zero,
            pseudo_label_noise: 0.0,
            geometry_samples: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("stage1_learning_rate", self.stage1_learning_rate),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CpgaError::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CpgaError::config("momentum", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(CpgaError::config("batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CpgaError::config("beta", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.alpha_smoothing) {
            return Err(CpgaError::config("alpha_smoothing", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_label_noise) {
            return Err(CpgaError::config("pseudo_label_noise", "must be in [0, 1]"));
        }
        if self.geometry_samples < 2 {
            return Err(CpgaError::config("geometry_samples", "must be at least 2"));
        }
        self.trade_offs().validate()?;
        self.losses.validate()
    }

    pub fn trade_offs(&self) -> TradeOffs {
        TradeOffs {
            lambda: self.lambda,
            eta: self.eta,
        }
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: 0.0,
        }
    }
}

/// Independent random streams per phase, all derived from the run seed.
#[derive(Debug, Clone, Copy)]
enum Phase {
    Init = 1,
    Pretrain = 2,
    Stage1 = 3,
    Stage2 = 4,
    Geometry = 5,
    Reverse = 6,
}

fn rng_for(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase as u64);
    rng
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// One row of the metrics log. Quantities that do not apply to a stage are
/// left empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Option<Stage>,
    pub loss_total: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_con_p: Option<f64>,
    pub loss_con_w: Option<f64>,
    pub loss_elr: Option<f64>,
    pub loss_nc: Option<f64>,
    pub target_acc: Option<f64>,
    pub pseudo_acc: Option<f64>,
    pub mean_weight: Option<f64>,
    pub inter_dist: Option<f64>,
    pub intra_dist: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,stage,loss_total,loss_ce,loss_con_p,loss_con_w,loss_elr,loss_nc,target_acc,pseudo_acc,mean_weight,inter_dist,intra_dist";

/// Append-only per-epoch log with globally increasing epoch numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    records: Vec<EpochRecord>,
    echo: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn progress_line(r: &EpochRecord) -> String {
    let mut line = format!("epoch {:>4} {:<8}", r.epoch, r.stage.map(Stage::as_str).unwrap_or(""));
    let fields = [
        ("loss", r.loss_total),
        ("target_acc", r.target_acc),
        ("pseudo_acc", r.pseudo_acc),
        ("inter", r.inter_dist),
        ("intra", r.intra_dist),
    ];
    for (name, v) in fields {
        if let Some(v) = v {
            line.push_str(&format!(" {name} {v:.5}"));
        }
    }
    line
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// A log that also prints one progress line per record.
    pub fn echoing() -> Self {
        MetricsLog {
            records: Vec::new(),
            echo: true,
        }
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_epoch(&self) -> usize {
        self.records.last().map_or(1, |r| r.epoch + 1)
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(CpgaError::Contract(format!(
                    "epoch {} logged after epoch {}",
                    record.epoch, last.epoch
                )));
            }
        }
        if self.echo {
            println!("{}", progress_line(&record));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == Some(stage))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.stage.map(Stage::as_str).unwrap_or(""),
                opt(r.loss_total),
                opt(r.loss_ce),
                opt(r.loss_con_p),
                opt(r.loss_con_w),
                opt(r.loss_elr),
                opt(r.loss_nc),
                opt(r.target_acc),
                opt(r.pseudo_acc),
                opt(r.mean_weight),
                opt(r.inter_dist),
                opt(r.intra_dist),
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(CpgaError::Parse("unexpected metrics header".into()));
        }
        let mut log = MetricsLog::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(CpgaError::Parse(format!("line {}: expected 13 fields", ln + 2)));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|e| CpgaError::Parse(format!("line {}: {e}", ln + 2)))
                }
            };
            let stage = match f[1] {
                "pretrain" => Some(Stage::Pretrain),
                "stage1" => Some(Stage::Stage1),
                "stage2" => Some(Stage::Stage2),
                "" => None,
                other => return Err(CpgaError::Parse(format!("unknown stage {other:?}"))),
            };
            log.push(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|e| CpgaError::Parse(format!("line {}: {e}", ln + 2)))?,
                stage,
                loss_total: num(f[2])?,
                loss_ce: num(f[3])?,
                loss_con_p: num(f[4])?,
                loss_con_w: num(f[5])?,
                loss_elr: num(f[6])?,
                loss_nc: num(f[7])?,
                target_acc: num(f[8])?,
                pseudo_acc: num(f[9])?,
                mean_weight: num(f[10])?,
                inter_dist: num(f[11])?,
                intra_dist: num(f[12])?,
            })?;
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Sizes derived from a dataset and the configured architecture.
pub fn dims_for(data: &Dataset, model: &ModelDims) -> ModelDims {
    ModelDims {
        input_dim: data.input_dim(),
        num_classes: data.num_classes(),
        ..model.clone()
    }
}

/// Trains extractor and classifier on labeled source data with
/// label-smoothing cross entropy, then freezes the classifier. Returns the
/// source training accuracy alongside the model.
pub fn pretrain_source(
    source: &Dataset,
    dims: &ModelDims,
    cfg: &TrainConfig,
    log: Option<&mut MetricsLog>,
) -> Result<(Extractor, Classifier, f64)> {
    cfg.validate()?;
    let labels = source
        .training_labels()
        .ok_or_else(|| CpgaError::Contract("pretraining needs a labeled source domain".into()))?;
    let mut init = rng_for(cfg.seed, Phase::Init);
    let extractor = Extractor::new(dims, &mut init);
    let classifier = Classifier::new(dims, &mut init);
    fit_classifier(source.features().view(), labels, extractor, classifier, cfg, log)
}

fn fit_classifier(
    x: ArrayView2<f64>,
    labels: &[usize],
    mut extractor: Extractor,
    mut classifier: Classifier,
    cfg: &TrainConfig,
    mut log: Option<&mut MetricsLog>,
) -> Result<(Extractor, Classifier, f64)> {
    let mut rng = rng_for(cfg.seed, Phase::Pretrain);
    let mut opt_e = Sgd::new(cfg.sgd(cfg.learning_rate), extractor.params());
    let mut opt_c = Sgd::new(cfg.sgd(cfg.learning_rate), classifier.params());
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (q, tape) = extractor.extract_tape(xb.view())?;
            let probs = classifier.classify(q.view())?;
            let loss = label_smoothing_ce(probs.view(), &yb, cfg.alpha_smoothing)?;
            if !loss.value.is_finite() {
                return Err(CpgaError::Diverged(format!("source loss {}", loss.value)));
            }
            let mut gc = classifier.params().zeros_like();
            let dq = classifier.backward(q.view(), probs.view(), loss.grad.view(), &mut gc)?;
            let mut ge = extractor.params().zeros_like();
            extractor.backward(&tape, dq.view(), &mut ge);
            opt_e.step(extractor.params_mut(), &ge);
            classifier.apply(&mut opt_c, &gc)?;
            total += loss.value;
            batches += 1;
        }
        if let Some(log) = log.as_deref_mut() {
            log.push(EpochRecord {
                epoch: log.next_epoch(),
                stage: Some(Stage::Pretrain),
                loss_total: Some(total / batches as f64),
                ..EpochRecord::default()
            })?;
        }
    }
    if !extractor.params().is_finite() || !classifier.params().is_finite() {
        return Err(CpgaError::Diverged("non-finite source parameters".into()));
    }
    classifier.freeze();
    let pred = infer(&extractor, &classifier, x)?;
    let acc = accuracy(&pred, labels);
    Ok((extractor, classifier, acc))
}

/// Mean cosine distance between prototypes of different classes and of
/// the same class (distinct samples).
pub fn prototype_geometry(prototypes: ArrayView2<f64>, labels: &[usize]) -> (f64, f64) {
    let sims = linalg::cosine_matrix(prototypes, prototypes);
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            let d = 1.0 - sims[[i, j]];
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (inter / n_inter.max(1) as f64, intra / n_intra.max(1) as f64)
}

/// `samples` labels per class, class-major.
pub fn balanced_labels(num_classes: usize, samples: usize) -> Vec<usize> {
    (0..num_classes).flat_map(|k| std::iter::repeat_n(k, samples)).collect()
}

/// Generates `per_class` prototypes for every class with fresh noise.
pub fn generate_balanced(
    generator: &Generator,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<crate::models::PrototypeBatch> {
    let labels = balanced_labels(generator.num_classes(), per_class);
    let noise = sample_noise(labels.len(), generator.noise_dim(), rng);
    generator.generate(&labels, noise.view())
}

/// Stage 1: trains a fresh generator against the frozen classifier. Every
/// batch holds exactly two prototypes per class.
pub fn train_stage1(
    classifier: &Classifier,
    dims: &ModelDims,
    cfg: &TrainConfig,
    mut log: Option<&mut MetricsLog>,
) -> Result<Generator> {
    cfg.validate()?;
    if !classifier.is_frozen() {
        return Err(CpgaError::Contract("stage 1 needs a frozen classifier".into()));
    }
    let digest = classifier.params().digest();
    let mut init = rng_for(cfg.seed, Phase::Init);
    // skip past the source model's draws so the generator has its own init
    let _ = Extractor::new(dims, &mut init);
    let _ = Classifier::new(dims, &mut init);
    let mut generator = Generator::new(dims, &mut init);
    let mut rng = rng_for(cfg.seed, Phase::Stage1);
    let mut geo_rng = rng_for(cfg.seed, Phase::Geometry);
    let mut opt = Sgd::new(cfg.sgd(cfg.stage1_learning_rate), generator.params());
    let k = dims.num_classes;
    let labels = balanced_labels(k, 2);
    for _ in 0..cfg.stage1_epochs {
        let noise = sample_noise(labels.len(), dims.noise_dim, &mut rng);
        let plan = if cfg.stage1_contrastive {
            Some(sample_pairs(&labels, k, &mut rng)?)
        } else {
            None
        };
        let loss = stage1_objective(&generator, classifier, &labels, noise.view(), plan.as_ref(), cfg.tau)?;
        if !loss.total.is_finite() {
            return Err(CpgaError::Diverged(format!("stage 1 loss {}", loss.total)));
        }
        opt.step(generator.params_mut(), &loss.generator_grads);
        if let Some(log) = log.as_deref_mut() {
            let batch = generate_balanced(&generator, cfg.geometry_samples, &mut geo_rng)?;
            let (inter, intra) = prototype_geometry(batch.prototypes.view(), &batch.labels);
            log.push(EpochRecord {
                epoch: log.next_epoch(),
                stage: Some(Stage::Stage1),
                loss_total: Some(loss.total),
                loss_ce: Some(loss.ce),
                loss_con_p: Some(loss.contrastive),
                inter_dist: Some(inter),
                intra_dist: Some(intra),
                ..EpochRecord::default()
            })?;
        }
    }
    if classifier.params().digest() != digest {
        return Err(CpgaError::Contract("classifier changed during stage 1".into()));
    }
    Ok(generator)
}

/// State carried out of stage 2.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub extractor: Extractor,
    pub projector: Projector,
    pub predictions: PredictionBank,
    pub features: FeatureBank,
    pub centroids: Option<CentroidSet>,
    pub pseudo: Option<PseudoLabels>,
}

/// Fresh projector for a run.
pub fn init_projector(dims: &ModelDims, seed: u64) -> Projector {
    let mut init = rng_for(seed, Phase::Init);
    let _ = Extractor::new(dims, &mut init);
    let _ = Classifier::new(dims, &mut init);
    let _ = Generator::new(dims, &mut init);
    Projector::new(dims, &mut init)
}

/// Stage 2: adapts extractor and projector to the unlabeled target with
/// the generator and classifier held fixed.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    extractor: Extractor,
    projector: Projector,
    generator: &Generator,
    classifier: &Classifier,
    target: &Dataset,
    cfg: &TrainConfig,
    mut log: Option<&mut MetricsLog>,
) -> Result<Adapted> {
    cfg.validate()?;
    if !classifier.is_frozen() {
        return Err(CpgaError::Contract("stage 2 needs a frozen classifier".into()));
    }
    let (c_digest, g_digest) = (classifier.params().digest(), generator.params().digest());
    let (mut extractor, mut projector) = (extractor, projector);
    let k = classifier.num_classes();
    let n = target.len();
    let x = target.features();
    let truth = target.evaluation_labels();
    let mut rng = rng_for(cfg.seed, Phase::Stage2);
    let mut opt_e = Sgd::new(cfg.sgd(cfg.learning_rate), extractor.params());
    let mut opt_p = Sgd::new(cfg.sgd(cfg.learning_rate), projector.params());

    let mut predictions = PredictionBank::new(n, k, cfg.beta, cfg.bank_init)?;
    let mut features = FeatureBank::new(extractor.extract(x.view())?);
    let mut centroids: Option<CentroidSet> = None;
    let mut pseudo: Option<PseudoLabels> = None;
    let class_labels: Vec<usize> = (0..k).collect();
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.stage2_epochs {
        let noise = sample_noise(k, generator.noise_dim(), &mut rng);
        let protos = generator.generate(&class_labels, noise.view())?.prototypes;

        let q_all = extractor.extract(x.view())?;
        let next = match &centroids {
            None => {
                let probs = classifier.classify(q_all.view())?;
                labeling::init_centroids(q_all.view(), probs.view(), classifier.class_directions().view())?
            }
            Some(prev) => {
                let labels = &pseudo.as_ref().expect("labels follow centroids").labels;
                labeling::refresh_centroids(q_all.view(), labels, prev)?
            }
        };
        let mut labels = labeling::assign_labels(q_all.view(), &next);
        if cfg.pseudo_label_noise > 0.0 {
            labels = inject_label_noise(&labels, k, cfg.pseudo_label_noise, cfg.seed)?;
        }
        let weights = labeling::confidence(q_all.view(), &next, &labels, cfg.tau);
        let current = PseudoLabels { labels, weights };

        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_con, mut sum_elr, mut sum_nc) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        if cfg.losses.any() {
            for chunk in order.chunks(cfg.batch_size) {
                let xb = x.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| current.labels[i]).collect();
                let wb: Vec<f64> = chunk.iter().map(|&i| current.weights[i]).collect();
                let hb = predictions.gather(chunk);
                let batch = Stage2Batch {
                    inputs: xb.view(),
                    indices: chunk,
                    prototypes: protos.view(),
                    pseudo_labels: &yb,
                    weights: &wb,
                    history: hb.view(),
                    feature_bank: features.rows(),
                };
                let loss = stage2_objective(&extractor, &projector, &batch, cfg.losses, cfg.trade_offs(), cfg.tau)?;
                if !loss.total.is_finite() {
                    return Err(CpgaError::Diverged(format!("stage 2 loss {}", loss.total)));
                }
                predictions.update(chunk, loss.predictions.view())?;
                features.update(chunk, loss.features.view())?;
                opt_e.step(extractor.params_mut(), &loss.extractor_grads);
                opt_p.step(projector.params_mut(), &loss.projector_grads);
                sum_total += loss.total;
                sum_con += loss.contrastive;
                sum_elr += loss.elr;
                sum_nc += loss.nc;
                batches += 1;
            }
        }
        if let Some(log) = log.as_deref_mut() {
            let b = batches.max(1) as f64;
            let pred = infer(&extractor, classifier, x.view())?;
            log.push(EpochRecord {
                epoch: log.next_epoch(),
                stage: Some(Stage::Stage2),
                loss_total: Some(sum_total / b),
                loss_con_w: Some(sum_con / b),
                loss_elr: Some(sum_elr / b),
                loss_nc: Some(sum_nc / b),
                target_acc: Some(accuracy(&pred, truth)),
                pseudo_acc: Some(current.accuracy(truth)),
                mean_weight: Some(current.mean_weight()),
                ..EpochRecord::default()
            })?;
        }
        centroids = Some(next);
        pseudo = Some(current);
    }
    if !extractor.params().is_finite() || !projector.params().is_finite() {
        return Err(CpgaError::Diverged("non-finite adapted parameters".into()));
    }
    if classifier.params().digest() != c_digest || generator.params().digest() != g_digest {
        return Err(CpgaError::Contract("frozen component changed during stage 2".into()));
    }
    Ok(Adapted {
        extractor,
        projector,
        predictions,
        features,
        centroids,
        pseudo,
    })
}

/// Class predictions `argmax C_y(G_e(x))`.
pub fn infer(extractor: &Extractor, classifier: &Classifier, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let q = extractor.extract(x)?;
    let logits = classifier.logits(q.view())?;
    Ok(linalg::argmax_rows(logits.view()))
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub source_extractor: Extractor,
    pub classifier: Classifier,
    pub generator: Generator,
    pub adapted: Adapted,
    pub source_accuracy: f64,
    pub source_only_target_accuracy: f64,
    pub target_accuracy: f64,
    pub log: MetricsLog,
    pub digests: FrozenDigests,
}

/// Parameter digests taken at stage boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenDigests {
    pub classifier_after_pretrain: String,
    pub classifier_after_stage1: String,
    pub classifier_after_stage2: String,
    pub generator_after_stage1: String,
    pub generator_after_stage2: String,
}

/// Source pretraining followed by both stages.
pub fn run_pipeline(source: &Dataset, target: &Dataset, model: &ModelDims, cfg: &TrainConfig) -> Result<RunOutput> {
    run_pipeline_with_log(source, target, model, cfg, MetricsLog::new())
}

/// [`run_pipeline`] appending to a caller-supplied log.
pub fn run_pipeline_with_log(
    source: &Dataset,
    target: &Dataset,
    model: &ModelDims,
    cfg: &TrainConfig,
    mut log: MetricsLog,
) -> Result<RunOutput> {
    let dims = dims_for(source, model);
    dims.validate()?;
    if target.input_dim() != dims.input_dim || target.num_classes() != dims.num_classes {
        return Err(CpgaError::Shape("source and target disagree on shape".into()));
    }
    let (extractor, classifier, source_accuracy) = pretrain_source(source, &dims, cfg, Some(&mut log))?;
    let classifier_after_pretrain = Checkpoint::classifier(&classifier, cfg.seed, &dims).manifest.digest;
    let truth = target.evaluation_labels();
    let source_only_target_accuracy = accuracy(&infer(&extractor, &classifier, target.features().view())?, truth);

    let generator = train_stage1(&classifier, &dims, cfg, Some(&mut log))?;
    let classifier_after_stage1 = classifier.params().digest();
    let generator_after_stage1 = generator.params().digest();

    let projector = init_projector(&dims, cfg.seed);
    let adapted = train_stage2(
        extractor.clone(),
        projector,
        &generator,
        &classifier,
        target,
        cfg,
        Some(&mut log),
    )?;
    let target_accuracy = accuracy(&infer(&adapted.extractor, &classifier, target.features().view())?, truth);
    let digests = FrozenDigests {
        classifier_after_pretrain,
        classifier_after_stage1,
        classifier_after_stage2: classifier.params().digest(),
        generator_after_stage1,
        generator_after_stage2: generator.params().digest(),
    };
    Ok(RunOutput {
        source_extractor: extractor,
        classifier,
        generator,
        adapted,
        source_accuracy,
        source_only_target_accuracy,
        target_accuracy,
        log,
        digests,
    })
}

impl RunOutput {
    /// Writes every component and both banks into `dir`.
    pub fn save_checkpoints(&self, dir: &Path, dims: &ModelDims, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        Checkpoint::of(&self.adapted.extractor, seed, dims).save(&dir.join("extractor.json"))?;
        Checkpoint::classifier(&self.classifier, seed, dims).save(&dir.join("classifier.json"))?;
        Checkpoint::of(&self.generator, seed, dims).save(&dir.join("generator.json"))?;
        Checkpoint::of(&self.adapted.projector, seed, dims).save(&dir.join("projector.json"))?;
        Checkpoint::prediction_bank(&self.adapted.predictions, seed, dims).save(&dir.join("prediction_bank.json"))?;
        Checkpoint::feature_bank(&self.adapted.features, seed, dims).save(&dir.join("feature_bank.json"))?;
        Ok(())
    }
}

/// Settings of the reverse model used to score a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReverseSettings {
    pub epochs: usize,
    pub prototypes_per_class: usize,
}

impl Default for ReverseSettings {
    fn default() -> Self {
        ReverseSettings {
            epochs: 50,
            prototypes_per_class: 50,
        }
    }
}

/// Result of reverse validation: the winning index and every score.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseValidation {
    pub best: usize,
    pub scores: Vec<f64>,
    pub adapted_accuracy: Vec<f64>,
}

/// Scores one adapted model: a fresh classifier is fitted on the adapted
/// target features with their predicted labels (target acting as source),
/// then evaluated on labeled prototypes from the source generator.
pub fn reverse_score(
    adapted: &Extractor,
    classifier: &Classifier,
    generator: &Generator,
    target: &Dataset,
    dims: &ModelDims,
    cfg: &TrainConfig,
    settings: ReverseSettings,
) -> Result<f64> {
    let x = target.features().view();
    let predicted = infer(adapted, classifier, x)?;
    let q = adapted.extract(x)?;
    let mut rng = rng_for(cfg.seed, Phase::Reverse);
    let mut reverse = Classifier::new(dims, &mut rng);
    let mut opt = Sgd::new(cfg.sgd(cfg.learning_rate), reverse.params());
    let mut order: Vec<usize> = (0..q.nrows()).collect();
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let qb = q.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| predicted[i]).collect();
            let probs = reverse.classify(qb.view())?;
            let loss = label_smoothing_ce(probs.view(), &yb, cfg.alpha_smoothing)?;
            let mut g = reverse.params().zeros_like();
            reverse.backward(qb.view(), probs.view(), loss.grad.view(), &mut g)?;
            reverse.apply(&mut opt, &g)?;
        }
    }
    let batch = generate_balanced(generator, settings.prototypes_per_class, &mut rng)?;
    let logits = reverse.logits(batch.prototypes.view())?;
    Ok(accuracy(&linalg::argmax_rows(logits.view()), &batch.labels))
}

/// Picks the candidate whose reverse score is highest; ties go to the
/// earliest candidate. Each candidate adapts the same source model and
/// generator.
#[allow(clippy::too_many_arguments)]
pub fn reverse_validate(
    candidates: &[TrainConfig],
    extractor: &Extractor,
    classifier: &Classifier,
    generator: &Generator,
    target: &Dataset,
    dims: &ModelDims,
    settings: ReverseSettings,
) -> Result<ReverseValidation> {
    if candidates.is_empty() {
        return Err(CpgaError::config("candidates", "at least one candidate is required"));
    }
    let truth = target.evaluation_labels();
    let mut scores = Vec::with_capacity(candidates.len());
    let mut adapted_accuracy = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let projector = init_projector(dims, cand.seed);
        let adapted = train_stage2(extractor.clone(), projector, generator, classifier, target, cand, None)?;
        scores.push(reverse_score(&adapted.extractor, classifier, generator, target, dims, cand, settings)?);
        adapted_accuracy.push(accuracy(
            &infer(&adapted.extractor, classifier, target.features().view())?,
            truth,
        ));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(ReverseValidation {
        best,
        scores,
        adapted_accuracy,
    })
}

/// Full configuration file: benchmark, architecture and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: ShiftConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CpgaError::Parse(e.to_string()))?;
        cfg.benchmark.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Same configuration with both the data and the training seed set.
    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.benchmark.seed = seed;
        cfg.train.seed = seed;
        cfg
    }
}

/// Writes a run summary CSV (`name,value`).
pub fn write_summary(path: &Path, out: &RunOutput) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "name,value")?;
    writeln!(f, "source_accuracy,{}", out.source_accuracy)?;
    writeln!(f, "source_only_target_accuracy,{}", out.source_only_target_accuracy)?;
    writeln!(f, "target_accuracy,{}", out.target_accuracy)?;
    f.flush()?;
    Ok(())
}

/// Same rows relabeled by the adapted model, tagged as a source domain.
pub fn pseudo_source(target: &Dataset, extractor: &Extractor, classifier: &Classifier) -> Result<Dataset> {
    let labels = infer(extractor, classifier, target.features().view())?;
    target.relabeled(labels, DomainTag::Source)
}
