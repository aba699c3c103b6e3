//! Desk-scale studies: loss ablations, trade-off sensitivity, robustness
//! to noisy pseudo labels, and plots of a metrics log.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_domains, Dataset, ShiftConfig};
use crate::error::{CpgaError, Result};
use crate::losses::LossToggles;
use crate::models::{Classifier, Extractor, Generator, ModelDims};
use crate::training::{
    self, accuracy, generate_balanced, infer, init_projector, prototype_geometry, MetricsLog, RunConfig, Stage,
    TrainConfig,
};

/// Seed of the stream used to draw prototypes for geometry metrics.
const GEOMETRY_SEED: u64 = 0x9e0;

/// Source model and generator shared by every adaptation variant of one
/// (benchmark, seed) pair.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source: Dataset,
    pub target: Dataset,
    pub dims: ModelDims,
    pub extractor: Extractor,
    pub classifier: Classifier,
    pub generator: Generator,
    pub source_accuracy: f64,
    pub source_only_accuracy: f64,
    pub inter_dist: f64,
    pub intra_dist: f64,
}

/// Builds the benchmark, pretrains the source model and runs stage 1.
pub fn prepare(benchmark: &ShiftConfig, model: &ModelDims, cfg: &TrainConfig) -> Result<Prepared> {
    let (source, target) = make_domains(benchmark)?;
    let dims = training::dims_for(&source, model);
    dims.validate()?;
    let (extractor, classifier, source_accuracy) = training::pretrain_source(&source, &dims, cfg, None)?;
    let generator = training::train_stage1(&classifier, &dims, cfg, None)?;
    let pred = infer(&extractor, &classifier, target.features().view())?;
    let source_only_accuracy = accuracy(&pred, target.evaluation_labels());
    let mut rng = ChaCha8Rng::seed_from_u64(GEOMETRY_SEED);
    let batch = generate_balanced(&generator, cfg.geometry_samples, &mut rng)?;
    let (inter_dist, intra_dist) = prototype_geometry(batch.prototypes.view(), &batch.labels);
    Ok(Prepared {
        source,
        target,
        dims,
        extractor,
        classifier,
        generator,
        source_accuracy,
        source_only_accuracy,
        inter_dist,
        intra_dist,
    })
}

/// Runs stage 2 from a prepared source model and returns target accuracy.
pub fn adapt(prepared: &Prepared, cfg: &TrainConfig) -> Result<f64> {
    let projector = init_projector(&prepared.dims, cfg.seed);
    let adapted = training::train_stage2(
        prepared.extractor.clone(),
        projector,
        &prepared.generator,
        &prepared.classifier,
        &prepared.target,
        cfg,
        None,
    )?;
    let pred = infer(&adapted.extractor, &prepared.classifier, prepared.target.features().view())?;
    Ok(accuracy(&pred, prepared.target.evaluation_labels()))
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub name: String,
    #[serde(default)]
    pub losses: LossToggles,
    #[serde(default = "yes")]
    pub stage1_contrastive: bool,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub benchmark: ShiftConfig,
    #[serde(default)]
    pub pseudo_label_noise: f64,
}

fn yes() -> bool {
    true
}

impl AblationSpec {
    pub fn new(name: &str, losses: LossToggles, seeds: &[u64]) -> Self {
        AblationSpec {
            name: name.to_string(),
            losses,
            stage1_contrastive: true,
            seeds: seeds.to_vec(),
            benchmark: ShiftConfig::default(),
            pseudo_label_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CpgaError::config("seeds", format!("ablation {:?} lists no seeds", self.name)));
        }
        self.losses.validate()?;
        self.benchmark.validate()
    }

    fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            losses: self.losses,
            stage1_contrastive: self.stage1_contrastive,
            pseudo_label_noise: self.pseudo_label_noise,
            ..base.clone()
        }
    }
}

/// The loss ladder: source only, then each adaptation term added in turn.
pub fn default_ladder(seeds: &[u64]) -> Vec<AblationSpec> {
    let c = |contrastive, weights, elr, nc| LossToggles {
        contrastive,
        weights,
        elr,
        nc,
    };
    vec![
        AblationSpec::new("source_only", LossToggles::SOURCE_ONLY, seeds),
        AblationSpec::new("contrastive", c(true, false, false, false), seeds),
        AblationSpec::new("weighted", c(true, true, false, false), seeds),
        AblationSpec::new("weighted_elr", c(true, true, true, false), seeds),
        AblationSpec::new("full", c(true, true, true, true), seeds),
    ]
}

/// Ablation specs plus the shared model and training settings, as read from
/// a spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFile {
    pub model: ModelDims,
    pub train: TrainConfig,
    pub ablation: Vec<AblationSpec>,
}

impl AblationFile {
    pub fn from_toml(text: &str) -> Result<AblationFile> {
        let file: AblationFile = toml::from_str(text).map_err(|e| CpgaError::Parse(e.to_string()))?;
        if file.ablation.is_empty() {
            return Err(CpgaError::config("ablation", "no ablation specs"));
        }
        file.train.validate()?;
        for spec in &file.ablation {
            spec.validate()?;
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub name: String,
    /// Seeds whose run finished, paired with target accuracy.
    pub accuracies: Vec<(u64, f64)>,
    /// Seeds whose run failed, with the error.
    pub failures: Vec<(u64, String)>,
    pub mean: f64,
    pub std: f64,
    pub inter_dist: f64,
    pub intra_dist: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

type PrepKey = (String, u64, bool);

fn prep_key(benchmark: &ShiftConfig, seed: u64, stage1_contrastive: bool) -> PrepKey {
    let mut bench = benchmark.clone();
    bench.seed = seed;
    (toml::to_string(&bench).expect("benchmark serializes"), seed, stage1_contrastive)
}

/// One pipeline run per (spec, seed). Source models and generators are
/// shared between specs that only differ in adaptation settings. A failed
/// run is recorded in its row rather than aborting the table.
pub fn run_ablation(specs: &[AblationSpec], model: &ModelDims, base: &TrainConfig) -> Result<Vec<AblationResult>> {
    base.validate()?;
    for spec in specs {
        spec.validate()?;
    }
    let mut keys: BTreeMap<PrepKey, (ShiftConfig, TrainConfig)> = BTreeMap::new();
    for spec in specs {
        for &seed in &spec.seeds {
            let key = prep_key(&spec.benchmark, seed, spec.stage1_contrastive);
            keys.entry(key).or_insert_with(|| {
                let bench = ShiftConfig {
                    seed,
                    ..spec.benchmark.clone()
                };
                (bench, spec.train_config(base, seed))
            });
        }
    }
    let prepared: BTreeMap<PrepKey, std::result::Result<Prepared, String>> = keys
        .into_par_iter()
        .map(|(key, (bench, cfg))| {
            let p = prepare(&bench, model, &cfg).map_err(|e| e.to_string());
            (key, p)
        })
        .collect();

    let cells: Vec<(usize, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.seeds.iter().map(move |&seed| (i, seed)))
        .collect();
    let outcomes: Vec<std::result::Result<(f64, f64, f64), String>> = cells
        .par_iter()
        .map(|&(i, seed)| {
            let spec = &specs[i];
            let prep = prepared[&prep_key(&spec.benchmark, seed, spec.stage1_contrastive)]
                .as_ref()
                .map_err(Clone::clone)?;
            let acc = adapt(prep, &spec.train_config(base, seed)).map_err(|e| e.to_string())?;
            Ok((acc, prep.inter_dist, prep.intra_dist))
        })
        .collect();

    let mut results: Vec<AblationResult> = specs
        .iter()
        .map(|s| AblationResult {
            name: s.name.clone(),
            accuracies: Vec::new(),
            failures: Vec::new(),
            mean: f64::NAN,
            std: f64::NAN,
            inter_dist: f64::NAN,
            intra_dist: f64::NAN,
        })
        .collect();
    let mut geometry: Vec<Vec<(f64, f64)>> = vec![Vec::new(); specs.len()];
    for (&(i, seed), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok((acc, inter, intra)) => {
                results[i].accuracies.push((seed, acc));
                geometry[i].push((inter, intra));
            }
            Err(e) => results[i].failures.push((seed, e)),
        }
    }
    for (r, g) in results.iter_mut().zip(&geometry) {
        let accs: Vec<f64> = r.accuracies.iter().map(|&(_, a)| a).collect();
        (r.mean, r.std) = mean_std(&accs);
        let inter: Vec<f64> = g.iter().map(|x| x.0).collect();
        let intra: Vec<f64> = g.iter().map(|x| x.1).collect();
        r.inter_dist = mean_std(&inter).0;
        r.intra_dist = mean_std(&intra).0;
    }
    Ok(results)
}

pub const ABLATION_HEADER: &str = "name,runs,failed,mean_accuracy,std_accuracy,inter_dist,intra_dist";

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name,
            r.accuracies.len(),
            r.failures.len(),
            r.mean,
            r.std,
            r.inter_dist,
            r.intra_dist
        ));
    }
    out
}

/// Mean target accuracy for every (lambda, eta) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTable {
    pub lambdas: Vec<f64>,
    pub etas: Vec<f64>,
    /// `accuracy[i][j]` belongs to `lambdas[i]`, `etas[j]`.
    pub accuracy: Vec<Vec<f64>>,
}

pub const SENSITIVITY_HEADER: &str = "lambda,eta,mean_accuracy";

impl SensitivityTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SENSITIVITY_HEADER}\n");
        for (i, l) in self.lambdas.iter().enumerate() {
            for (j, e) in self.etas.iter().enumerate() {
                out.push_str(&format!("{l},{e},{}\n", self.accuracy[i][j]));
            }
        }
        out
    }
}

/// Full-pipeline accuracy over a grid of trade-off weights, averaged over
/// `seeds`. A failed cell is reported as NaN.
pub fn run_sensitivity(
    run: &RunConfig,
    lambdas: &[f64],
    etas: &[f64],
    seeds: &[u64],
) -> Result<SensitivityTable> {
    if lambdas.is_empty() || etas.is_empty() {
        return Err(CpgaError::config("grid", "lambda and eta lists must be non-empty"));
    }
    if seeds.is_empty() {
        return Err(CpgaError::config("seeds", "at least one seed is required"));
    }
    let prepared: Vec<Prepared> = seeds
        .par_iter()
        .map(|&s| {
            let cfg = run.with_seed(s);
            prepare(&cfg.benchmark, &cfg.model, &cfg.train)
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..lambdas.len())
        .flat_map(|i| (0..etas.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let accs: Vec<f64> = prepared
                .iter()
                .zip(seeds)
                .map(|(p, &seed)| {
                    let cfg = TrainConfig {
                        seed,
                        lambda: lambdas[i],
                        eta: etas[j],
                        ..run.train.clone()
                    };
                    adapt(p, &cfg).unwrap_or(f64::NAN)
                })
                .collect();
            mean_std(&accs).0
        })
        .collect();
    let accuracy = values.chunks(etas.len()).map(<[f64]>::to_vec).collect();
    Ok(SensitivityTable {
        lambdas: lambdas.to_vec(),
        etas: etas.to_vec(),
        accuracy,
    })
}

/// Weighted and unweighted contrastive accuracy at one noise rate.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePoint {
    pub rate: f64,
    pub weighted: Vec<f64>,
    pub unweighted: Vec<f64>,
}

impl NoisePoint {
    pub fn weighted_mean(&self) -> f64 {
        mean_std(&self.weighted).0
    }

    pub fn unweighted_mean(&self) -> f64 {
        mean_std(&self.unweighted).0
    }
}

pub const NOISE_HEADER: &str = "rate,weighted_mean,unweighted_mean";

pub fn noise_csv(points: &[NoisePoint]) -> String {
    let mut out = format!("{NOISE_HEADER}\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.rate, p.weighted_mean(), p.unweighted_mean()));
    }
    out
}

/// Contrastive alignment with and without confidence weights while a
/// fraction of pseudo labels is corrupted.
pub fn run_noise_robustness(run: &RunConfig, rates: &[f64], seeds: &[u64]) -> Result<Vec<NoisePoint>> {
    if let Some(bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CpgaError::config("rates", format!("{bad} is outside [0, 1]")));
    }
    if seeds.is_empty() {
        return Err(CpgaError::config("seeds", "at least one seed is required"));
    }
    let prepared: Vec<Prepared> = seeds
        .par_iter()
        .map(|&s| {
            let cfg = run.with_seed(s);
            prepare(&cfg.benchmark, &cfg.model, &cfg.train)
        })
        .collect::<Result<_>>()?;
    let variant = |weights: bool, rate: f64, seed: u64| TrainConfig {
        seed,
        pseudo_label_noise: rate,
        losses: LossToggles {
            contrastive: true,
            weights,
            elr: false,
            nc: false,
        },
        ..run.train.clone()
    };
    rates
        .iter()
        .map(|&rate| {
            let runs = |weights: bool| -> Result<Vec<f64>> {
                prepared
                    .par_iter()
                    .zip(seeds.par_iter())
                    .map(|(p, &seed)| adapt(p, &variant(weights, rate, seed)))
                    .collect()
            };
            Ok(NoisePoint {
                rate,
                weighted: runs(true)?,
                unweighted: runs(false)?,
            })
        })
        .collect()
}

/// Files written by [`emit_plots`].
pub const PLOT_FILES: [&str; 3] = ["loss.svg", "accuracy.svg", "prototypes.svg"];

/// What the prototype panel shows.
#[derive(Clone, Copy)]
pub enum PrototypeView<'a> {
    /// Prototypes drawn from a generator, projected to 2-D.
    Generator(&'a Generator, usize),
    /// Per-epoch (inter, intra) distances from the log.
    Distances,
}

type Series = (String, Vec<(f64, f64)>);

fn column(log: &MetricsLog, name: &str, pick: impl Fn(&training::EpochRecord) -> Option<f64>) -> Option<Series> {
    let points: Vec<(f64, f64)> = log
        .records()
        .iter()
        .filter_map(|r| pick(r).filter(|v| v.is_finite()).map(|v| (r.epoch as f64, v)))
        .collect();
    (!points.is_empty()).then(|| (name.to_string(), points))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    (padded(x0, x1), padded(y0, y1))
}

fn plot_err<E: std::fmt::Display>(e: E) -> CpgaError {
    CpgaError::Io(std::io::Error::other(e.to_string()))
}

fn draw(path: &Path, title: &str, x_label: &str, series: &[Series], lines: bool) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if lines && pts.len() > 1 {
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        } else {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| Circle::new((x + 8, y), 3, color.filled()));
        }
    }
    if !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Seeded Gaussian projection of prototypes to the plane, one series per
/// class.
fn projected_prototypes(generator: &Generator, per_class: usize) -> Result<Vec<Series>> {
    let mut rng = ChaCha8Rng::seed_from_u64(GEOMETRY_SEED);
    let batch = generate_balanced(generator, per_class, &mut rng)?;
    let d = batch.prototypes.ncols();
    let proj = Array2::from_shape_fn((d, 2), |_| StandardNormal.sample(&mut rng));
    let (unit, _) = crate::linalg::l2_normalize_rows(batch.prototypes.view());
    let flat = unit.dot(&proj);
    let mut series: Vec<Series> = (0..generator.num_classes())
        .map(|k| (format!("class {k}"), Vec::new()))
        .collect();
    for (row, &y) in flat.axis_iter(Axis(0)).zip(&batch.labels) {
        series[y].1.push((row[0], row[1]));
    }
    Ok(series)
}

/// Renders loss, accuracy and prototype panels as SVG files in `out`.
pub fn emit_plots(log: &MetricsLog, out: &Path, view: PrototypeView<'_>) -> Result<()> {
    if log.is_empty() {
        return Err(CpgaError::Contract("cannot plot an empty metrics log".into()));
    }
    let prototype_series = match view {
        PrototypeView::Generator(g, per_class) => projected_prototypes(g, per_class)?,
        PrototypeView::Distances => {
            let pts: Vec<(f64, f64)> = log
                .stage(Stage::Stage1)
                .filter_map(|r| Some((r.inter_dist?, r.intra_dist?)))
                .collect();
            vec![("stage 1 epochs".to_string(), pts)]
        }
    };
    std::fs::create_dir_all(out)?;
    let losses: Vec<Series> = [
        column(log, "total", |r| r.loss_total),
        column(log, "ce", |r| r.loss_ce),
        column(log, "con_p", |r| r.loss_con_p),
        column(log, "con_w", |r| r.loss_con_w),
        column(log, "elr", |r| r.loss_elr),
        column(log, "nc", |r| r.loss_nc),
    ]
    .into_iter()
    .flatten()
    .collect();
    draw(&out.join(PLOT_FILES[0]), "Losses", "epoch", &losses, true)?;
    let accs: Vec<Series> = [
        column(log, "target", |r| r.target_acc),
        column(log, "pseudo label", |r| r.pseudo_acc),
        column(log, "mean weight", |r| r.mean_weight),
    ]
    .into_iter()
    .flatten()
    .collect();
    draw(&out.join(PLOT_FILES[1]), "Accuracy", "epoch", &accs, true)?;
    let x_label = match view {
        PrototypeView::Generator(..) => "projection 1",
        PrototypeView::Distances => "inter-class distance",
    };
    draw(&out.join(PLOT_FILES[2]), "Prototypes", x_label, &prototype_series, false)?;
    Ok(())
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
