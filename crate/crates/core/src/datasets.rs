//! Synthetic source/target domain pairs with a controllable shift, label
//! noise injection and a plain-text dataset format.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CpgaError, Result};

/// Distance of every class mean from the origin.
pub const CLASS_RADIUS: f64 = 5.0;

/// Angular gap between neighbouring classes sharing a coordinate plane.
pub const CLASS_ARC: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

/// Feature rows with class labels. Target labels exist for evaluation but
/// are not handed out as training labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    domain: DomainTag,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize, domain: DomainTag) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(CpgaError::Shape("dataset must have at least one row".into()));
        }
        if labels.len() != features.nrows() {
            return Err(CpgaError::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(CpgaError::Contract(format!("label {bad} out of range")));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(CpgaError::Contract("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            domain,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    /// Labels usable for training: only a source domain has them.
    pub fn training_labels(&self) -> Option<&[usize]> {
        match self.domain {
            DomainTag::Source => Some(&self.labels),
            DomainTag::Target => None,
        }
    }

    /// Ground truth for measuring accuracy, regardless of domain.
    pub fn evaluation_labels(&self) -> &[usize] {
        &self.labels
    }

    /// Same rows with replacement labels (used to build a pseudo-labeled
    /// "source" from target data).
    pub fn relabeled(&self, labels: Vec<usize>, domain: DomainTag) -> Result<Dataset> {
        Dataset::new(self.features.clone(), labels, self.num_classes, domain)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "cpga-dataset v1 K={} d={} domain={}\n",
            self.num_classes,
            self.input_dim(),
            self.domain.as_str()
        );
        for (row, y) in self.features.rows().into_iter().zip(&self.labels) {
            write!(out, "{y}").unwrap();
            for v in row {
                // shortest representation that parses back to the same bits
                write!(out, ",{v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CpgaError::Parse("empty dataset file".into()))?;
        let (k, d, domain) = parse_header(header)?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let y = fields
                .next()
                .unwrap()
                .trim()
                .parse::<usize>()
                .map_err(|e| CpgaError::Parse(format!("line {}: label: {e}", ln + 2)))?;
            let start = values.len();
            for f in fields {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| CpgaError::Parse(format!("line {}: {e}", ln + 2)))?,
                );
            }
            if values.len() - start != d {
                return Err(CpgaError::Parse(format!(
                    "line {}: expected {d} features, found {}",
                    ln + 2,
                    values.len() - start
                )));
            }
            labels.push(y);
        }
        let features = Array2::from_shape_vec((labels.len(), d), values)
            .map_err(|e| CpgaError::Parse(e.to_string()))?;
        Dataset::new(features, labels, k, domain)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize, DomainTag)> {
    let bad = || CpgaError::Parse(format!("bad dataset header: {header:?}"));
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "cpga-dataset" || parts[1] != "v1" {
        return Err(bad());
    }
    let k = parts[2].strip_prefix("K=").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let d = parts[3].strip_prefix("d=").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let domain = match parts[4].strip_prefix("domain=") {
        Some("source") => DomainTag::Source,
        Some("target") => DomainTag::Target,
        _ => return Err(bad()),
    };
    Ok((k, d, domain))
}

/// Which synthetic family [`make_domains`] draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkKind {
    #[default]
    Gaussians,
    Moons,
}

/// Parameters of a synthetic domain pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub kind: BenchmarkKind,
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Radians, applied in every coordinate plane `(2j, 2j + 1)`.
    pub rotation_angle: f64,
    /// Empty means no translation; otherwise one entry per input dimension.
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            kind: BenchmarkKind::Gaussians,
            num_classes: 8,
            input_dim: 16,
            samples_per_class: 100,
            rotation_angle: 0.5,
            translation: Vec::new(),
            scale: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CpgaError::config("num_classes", "must be at least 2"));
        }
        if self.input_dim < 2 {
            return Err(CpgaError::config("input_dim", "must be at least 2"));
        }
        if self.samples_per_class < 2 {
            return Err(CpgaError::config("samples_per_class", "must be at least 2"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(CpgaError::config("noise_std", "must be positive"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CpgaError::config("scale", "must be positive"));
        }
        if !self.rotation_angle.is_finite() {
            return Err(CpgaError::config("rotation_angle", "must be finite"));
        }
        if !self.translation.is_empty() && self.translation.len() != self.input_dim {
            return Err(CpgaError::config(
                "translation",
                format!("needs {} entries, got {}", self.input_dim, self.translation.len()),
            ));
        }
        Ok(())
    }

    fn translation_vec(&self) -> Array1<f64> {
        if self.translation.is_empty() {
            Array1::zeros(self.input_dim)
        } else {
            Array1::from(self.translation.clone())
        }
    }
}

/// Class means: classes share coordinate planes `(2j, 2j + 1)` in groups,
/// neighbours within a plane [`CLASS_ARC`] radians apart on a circle of
/// radius [`CLASS_RADIUS`].
pub fn class_means(num_classes: usize, input_dim: usize) -> Array2<f64> {
    let planes = input_dim / 2;
    let per_plane = 2.max(num_classes.div_ceil(planes));
    let arc = CLASS_ARC.min(std::f64::consts::TAU / per_plane as f64);
    let mut means = Array2::zeros((num_classes, input_dim));
    for k in 0..num_classes {
        let (plane, slot) = (k / per_plane, k % per_plane);
        let angle = slot as f64 * arc;
        means[[k, 2 * plane]] = CLASS_RADIUS * angle.cos();
        means[[k, 2 * plane + 1]] = CLASS_RADIUS * angle.sin();
    }
    means
}

/// Rotates every coordinate pair `(2j, 2j + 1)` of each row by `angle`.
fn rotate_planes(x: &mut Array2<f64>, angle: f64, center: Option<(f64, f64)>) {
    let (s, c) = angle.sin_cos();
    let (cx, cy) = center.unwrap_or((0.0, 0.0));
    for mut row in x.rows_mut() {
        let planes = if center.is_some() { 1 } else { row.len() / 2 };
        for j in 0..planes {
            let (a, b) = (row[2 * j] - cx, row[2 * j + 1] - cy);
            row[2 * j] = c * a - s * b + cx;
            row[2 * j + 1] = s * a + c * b + cy;
        }
    }
}

fn draw_around<R: Rng>(centers: &Array2<f64>, per_class: usize, noise: f64, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
    let (k, d) = centers.dim();
    let normal = Normal::new(0.0, noise).expect("positive noise");
    let mut x = Array2::zeros((k * per_class, d));
    let mut y = Vec::with_capacity(k * per_class);
    for c in 0..k {
        for s in 0..per_class {
            let mut row = x.row_mut(c * per_class + s);
            for (j, v) in row.iter_mut().enumerate() {
                *v = centers[[c, j]] + normal.sample(rng);
            }
            y.push(c);
        }
    }
    (x, y)
}

pub fn make_domains(cfg: &ShiftConfig) -> Result<(Dataset, Dataset)> {
    match cfg.kind {
        BenchmarkKind::Gaussians => make_gaussian_domains(cfg),
        BenchmarkKind::Moons => make_moons_domains(cfg),
    }
}

/// Gaussian clusters around [`class_means`]. The target moves each mean by
/// rotation, scaling and translation, then draws fresh noise around it.
pub fn make_gaussian_domains(cfg: &ShiftConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg.num_classes, cfg.input_dim);
    let (xs, ys) = draw_around(&means, cfg.samples_per_class, cfg.noise_std, &mut rng);

    let mut shifted = means.clone();
    rotate_planes(&mut shifted, cfg.rotation_angle, None);
    shifted *= cfg.scale;
    shifted += &cfg.translation_vec();
    let (xt, yt) = draw_around(&shifted, cfg.samples_per_class, cfg.noise_std, &mut rng);

    Ok((
        Dataset::new(xs, ys, cfg.num_classes, DomainTag::Source)?,
        Dataset::new(xt, yt, cfg.num_classes, DomainTag::Target)?,
    ))
}

/// Two interleaved half circles in the first coordinate plane, noise on
/// every coordinate. The target is rotated by `rotation_angle` about the
/// centre of the pair.
pub fn make_moons_domains(cfg: &ShiftConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    if cfg.num_classes != 2 {
        return Err(CpgaError::config("num_classes", "two moons needs exactly 2 classes"));
    }
    let n = cfg.samples_per_class;
    let mut base = Array2::zeros((2 * n, cfg.input_dim));
    for i in 0..n {
        let t = std::f64::consts::PI * i as f64 / (n - 1) as f64;
        base[[i, 0]] = t.cos();
        base[[i, 1]] = t.sin();
        base[[n + i, 0]] = 1.0 - t.cos();
        base[[n + i, 1]] = 0.5 - t.sin();
    }
    let labels: Vec<usize> = (0..2 * n).map(|i| i / n).collect();
    let mut rotated = base.clone();
    rotate_planes(&mut rotated, cfg.rotation_angle, Some((0.5, 0.25)));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.noise_std).expect("positive noise");
    let mut add_noise = |m: &mut Array2<f64>| m.mapv_inplace(|v| v + normal.sample(&mut rng));
    add_noise(&mut base);
    add_noise(&mut rotated);
    Ok((
        Dataset::new(base, labels.clone(), 2, DomainTag::Source)?,
        Dataset::new(rotated, labels, 2, DomainTag::Target)?,
    ))
}

/// Replaces exactly `floor(rate * n)` labels, chosen uniformly, with a
/// uniformly drawn different class.
pub fn inject_label_noise(labels: &[usize], num_classes: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CpgaError::config("rate", format!("must be in [0, 1], got {rate}")));
    }
    if num_classes < 2 {
        return Err(CpgaError::config("num_classes", "must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (rate * labels.len() as f64).floor() as usize;
    let mut out = labels.to_vec();
    for i in index::sample(&mut rng, labels.len(), count) {
        let shift = rng.random_range(1..num_classes);
        out[i] = (labels[i] + shift) % num_classes;
    }
    Ok(out)
}
