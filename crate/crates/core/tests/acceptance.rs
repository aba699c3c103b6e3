//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each. With `--ignored`, expected failures count as errors too.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpga::checkpoint::Checkpoint;
use cpga::datasets::make_domains;
use cpga::experiments::{self, default_ladder, prepare};
use cpga::gradcheck::{self, DEFAULT_STEP};
use cpga::labeling::{assign_labels, refresh_centroids, CentroidSet};
use cpga::losses::{
    ce_prototype, elr, neighborhood_clustering, neighborhood_clustering_on_bank, nonparametric_backward,
    nonparametric_predict, prototype_infonce, sample_pairs, stage1_objective, stage2_objective,
    weighted_contrastive, PairPlan, Stage2Batch,
};
use cpga::memory::{BankInit, PredictionBank};
use cpga::models::sample_noise;
use cpga::training::{self, generate_balanced, prototype_geometry, ReverseSettings};
use cpga::{
    linalg, Classifier, Component, Extractor, Generator, LossToggles, ModelDims, Projector, RunConfig, Temperature,
    TradeOffs, TrainConfig,
};

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-6;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Criteria known not to hold at desk scale; each is explained in README.md.
const EXPECTED_FAILURES: &[usize] = &[4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn benchmark() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/rotated_gaussians.toml");
    RunConfig::load(&path).expect("benchmark config")
}

fn tau() -> Temperature {
    Temperature::DEFAULT
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

fn normalize(x: &Array2<f64>) -> Array2<f64> {
    linalg::l2_normalize_rows(x.view()).0
}

fn to_mat(x: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), x.to_vec()).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = uniform(rng, rows, cols, 0.05, 1.0);
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

// ---------------------------------------------------------------- 1

struct GradStats {
    worst: f64,
    instances: usize,
}

impl GradStats {
    fn add(&mut self, rel: f64) {
        self.worst = self.worst.max(rel);
        self.instances += 1;
    }
}

fn grad_ce(rng: &mut ChaCha8Rng, stats: &mut GradStats) {
    let (n, d, k) = (5, 4, 3);
    let dir = uniform(rng, k, d, -1.0, 1.0);
    let gain = Array1::from_shape_fn(k, |_| rng.random_range(0.5..3.0));
    let c = Classifier::from_weights(dir, gain).unwrap();
    let q = uniform(rng, n, d, -1.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let f = |x: &[f64]| {
        let p = c.classify(to_mat(x, n, d).view()).unwrap();
        ce_prototype(p.view(), &labels).unwrap().value
    };
    let p = c.classify(q.view()).unwrap();
    let loss = ce_prototype(p.view(), &labels).unwrap();
    let dq = c.backward_input(p.view(), loss.grad.view());
    let x = q.iter().copied().collect::<Vec<_>>();
    stats.add(gradcheck::check(f, &x, dq.as_slice().unwrap(), DEFAULT_STEP).relative_error);
}

fn grad_infonce(rng: &mut ChaCha8Rng, stats: &mut GradStats) {
    let (k, d) = (3, 5);
    let labels: Vec<usize> = (0..k).flat_map(|c| [c, c]).collect();
    let n = labels.len();
    let plan = sample_pairs(&labels, k, rng).unwrap();
    let p = uniform(rng, n, d, -1.0, 1.0);
    let t = Temperature::new(rng.random_range(0.1..1.0)).unwrap();
    let f = |x: &[f64]| prototype_infonce(to_mat(x, n, d).view(), &plan, t).unwrap().value;
    let loss = prototype_infonce(p.view(), &plan, t).unwrap();
    let x: Vec<f64> = p.iter().copied().collect();
    stats.add(gradcheck::check(f, &x, loss.grad.as_slice().unwrap(), DEFAULT_STEP).relative_error);
}

/// Weighted contrastive and ELR through the non-parametric prediction, with
/// respect to unnormalized inputs so perturbations stay valid.
fn grad_contrastive_elr(rng: &mut ChaCha8Rng, stats: &mut GradStats) {
    let (n, k, d) = (4, 3, 4);
    let a = uniform(rng, n, d, -1.0, 1.0);
    let b = uniform(rng, k, d, -1.0, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let h = random_simplex(rng, n, k) * 0.9;
    let t = Temperature::new(rng.random_range(0.2..1.0)).unwrap();
    let split = n * d;
    let value = |x: &[f64], which: u8| {
        let u = normalize(&to_mat(&x[..split], n, d));
        let v = normalize(&to_mat(&x[split..], k, d));
        match which {
            0 => weighted_contrastive(u.view(), v.view(), &labels, &weights, k, t).unwrap().value,
            _ => {
                let o = nonparametric_predict(u.view(), v.view(), t).unwrap();
                elr(o.view(), h.view()).unwrap().value
            }
        }
    };
    let (u, un) = linalg::l2_normalize_rows(a.view());
    let (v, vn) = linalg::l2_normalize_rows(b.view());
    let x: Vec<f64> = a.iter().chain(b.iter()).copied().collect();

    let con = weighted_contrastive(u.view(), v.view(), &labels, &weights, k, t).unwrap();
    let ga = linalg::l2_normalize_backward(u.view(), un.view(), con.grad_u.view());
    let gb = linalg::l2_normalize_backward(v.view(), vn.view(), con.grad_v.view());
    let analytic: Vec<f64> = ga.iter().chain(gb.iter()).copied().collect();
    stats.add(gradcheck::check(|x| value(x, 0), &x, &analytic, DEFAULT_STEP).relative_error);

    let o = nonparametric_predict(u.view(), v.view(), t).unwrap();
    let reg = elr(o.view(), h.view()).unwrap();
    let (du, dv) = nonparametric_backward(u.view(), v.view(), o.view(), reg.grad.view(), t);
    let ga = linalg::l2_normalize_backward(u.view(), un.view(), du.view());
    let gb = linalg::l2_normalize_backward(v.view(), vn.view(), dv.view());
    let analytic: Vec<f64> = ga.iter().chain(gb.iter()).copied().collect();
    stats.add(gradcheck::check(|x| value(x, 1), &x, &analytic, DEFAULT_STEP).relative_error);
}

fn grad_nc(rng: &mut ChaCha8Rng, stats: &mut GradStats) {
    let (nt, d) = (9, 4);
    let bank = uniform(rng, nt, d, -1.0, 1.0);
    let indices = [1usize, 4, 7];
    let q = uniform(rng, indices.len(), d, -1.0, 1.0);
    let t = Temperature::new(rng.random_range(0.2..1.0)).unwrap();
    let f = |x: &[f64]| {
        neighborhood_clustering_on_bank(to_mat(x, indices.len(), d).view(), &indices, bank.view(), t)
            .unwrap()
            .value
    };
    let loss = neighborhood_clustering_on_bank(q.view(), &indices, bank.view(), t).unwrap();
    let x: Vec<f64> = q.iter().copied().collect();
    stats.add(gradcheck::check(f, &x, loss.grad.as_slice().unwrap(), DEFAULT_STEP).relative_error);
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        input_dim: 4,
        num_classes: 3,
        feature_dim: 5,
        extractor_hidden: vec![6],
        noise_dim: 6,
        generator_hidden: 8,
        projector_hidden: vec![6],
        contrastive_dim: 4,
    }
}

fn grad_stage1(rng: &mut ChaCha8Rng, stats: &mut GradStats) {
    let dims = tiny_dims();
    let mut c = Classifier::new(&dims, rng);
    c.freeze();
    let g = Generator::new(&dims, rng);
    let labels: Vec<usize> = (0..dims.num_classes).flat_map(|k| [k, k]).collect();
    let noise = sample_noise(labels.len(), dims.noise_dim, rng);
    let plan: PairPlan = sample_pairs(&labels, dims.num_classes, rng).unwrap();
    let t = Temperature::new(0.5).unwrap();
    let f = |x: &[f64]| {
        let mut g2 = g.clone();
        g2.params_mut().assign_flat(x).unwrap();
        stage1_objective(&g2, &c, &labels, noise.view(), Some(&plan), t).unwrap().total
    };
    let loss = stage1_objective(&g, &c, &labels, noise.view(), Some(&plan), t).unwrap();
    let x = g.params().flatten();
    stats.add(gradcheck::check(f, &x, &loss.generator_grads.flatten(), DEFAULT_STEP).relative_error);
}

fn grad_stage2(rng: &mut ChaCha8Rng, stats: &mut GradStats) {
    let dims = tiny_dims();
    let e = Extractor::new(&dims, rng);
    let p = Projector::new(&dims, rng);
    let (n, nt, k) = (4, 8, dims.num_classes);
    let inputs = uniform(rng, n, dims.input_dim, -2.0, 2.0);
    let indices = [0usize, 2, 5, 7];
    let prototypes = uniform(rng, k, dims.feature_dim, -2.0, 2.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let history = random_simplex(rng, n, k) * 0.8;
    let bank = uniform(rng, nt, dims.feature_dim, -1.0, 1.0);
    let batch = Stage2Batch {
        inputs: inputs.view(),
        indices: &indices,
        prototypes: prototypes.view(),
        pseudo_labels: &labels,
        weights: &weights,
        history: history.view(),
        feature_bank: bank.view(),
    };
    let trade = TradeOffs { lambda: 0.7, eta: 0.3 };
    let t = Temperature::new(0.5).unwrap();
    let ne = e.params().num_params();
    let f = |x: &[f64]| {
        let (mut e2, mut p2) = (e.clone(), p.clone());
        e2.params_mut().assign_flat(&x[..ne]).unwrap();
        p2.params_mut().assign_flat(&x[ne..]).unwrap();
        stage2_objective(&e2, &p2, &batch, LossToggles::default(), trade, t).unwrap().total
    };
    let loss = stage2_objective(&e, &p, &batch, LossToggles::default(), trade, t).unwrap();
    let x: Vec<f64> = e.params().flatten().into_iter().chain(p.params().flatten()).collect();
    let analytic: Vec<f64> = loss
        .extractor_grads
        .flatten()
        .into_iter()
        .chain(loss.projector_grads.flatten())
        .collect();
    stats.add(gradcheck::check(f, &x, &analytic, DEFAULT_STEP).relative_error);
}

fn criterion_1() -> Verdict {
    type Check = fn(&mut ChaCha8Rng, &mut GradStats);
    let checks: [(&str, Check); 6] = [
        ("prototype cross entropy", grad_ce),
        ("prototype infonce", grad_infonce),
        ("weighted contrastive + elr", grad_contrastive_elr),
        ("neighborhood clustering", grad_nc),
        ("stage 1 objective", grad_stage1),
        ("stage 2 objective", grad_stage2),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, check) in checks {
        let mut stats = GradStats {
            worst: 0.0,
            instances: 0,
        };
        for seed in 0..20 {
            check(&mut ChaCha8Rng::seed_from_u64(1000 + seed), &mut stats);
        }
        pass &= stats.worst < GRAD_TOL && stats.instances >= 20;
        parts.push(format!("{name} {:.1e}/{}", stats.worst, stats.instances));
    }
    verdict(pass, format!("worst relative error: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 2

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn criterion_2() -> Verdict {
    let mut worst = [0.0f64; 5];
    let t = tau();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let k = rng.random_range(2..6);
        let d = rng.random_range(2..8);

        // prototype infonce
        let labels: Vec<usize> = (0..k).flat_map(|c| [c, c, c]).collect();
        let plan = sample_pairs(&labels, k, &mut rng).unwrap();
        let p = rows(&uniform(&mut rng, labels.len(), d, -1.0, 1.0));
        let pm = to_mat(&p.concat(), labels.len(), d);
        let mut total = 0.0;
        for i in 0..labels.len() {
            let pos = (brute_cos(&p[i], &p[plan.positive[i]]) / t.get()).exp();
            let mut den = pos;
            for &j in &plan.negatives[i] {
                den += (brute_cos(&p[i], &p[j]) / t.get()).exp();
            }
            total += -(pos / den).ln();
        }
        let got = prototype_infonce(pm.view(), &plan, t).unwrap().value;
        worst[0] = worst[0].max((got - total / labels.len() as f64).abs());

        // weighted contrastive and non-parametric prediction
        let n = rng.random_range(1..10);
        let u = normalize(&uniform(&mut rng, n, d, -1.0, 1.0));
        let v = normalize(&uniform(&mut rng, k, d, -1.0, 1.0));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (ur, vr) = (rows(&u), rows(&v));
        let mut total = 0.0;
        let o = nonparametric_predict(u.view(), v.view(), t).unwrap();
        for i in 0..n {
            let terms: Vec<f64> = vr.iter().map(|vk| (dot(&ur[i], vk) / t.get()).exp()).collect();
            let den: f64 = terms.iter().sum();
            total += -w[i] * (terms[y[i]] / den).ln();
            for c in 0..k {
                worst[3] = worst[3].max((o[[i, c]] - terms[c] / den).abs());
            }
        }
        let got = weighted_contrastive(u.view(), v.view(), &y, &w, k, t).unwrap().value;
        worst[1] = worst[1].max((got - total / n as f64).abs());

        // neighborhood clustering from explicit similarities
        let nt = rng.random_range(3..12);
        let bank = uniform(&mut rng, nt, d, -1.0, 1.0);
        let br = rows(&bank);
        let idx: Vec<usize> = (0..nt).filter(|i| i % 2 == 0).collect();
        let q = bank.select(Axis(0), &idx);
        let mut total = 0.0;
        let mut srows = Vec::new();
        for &i in &idx {
            let terms: Vec<f64> = (0..nt)
                .filter(|&j| j != i)
                .map(|j| (brute_cos(&br[i], &br[j]) / t.get()).exp())
                .collect();
            let den: f64 = terms.iter().sum();
            let s: Vec<f64> = terms.iter().map(|e| e / den).collect();
            total += -s.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            srows.push(s);
        }
        let expect = total / idx.len() as f64;
        let got = neighborhood_clustering_on_bank(q.view(), &idx, bank.view(), t).unwrap().value;
        worst[2] = worst[2].max((got - expect).abs());
        let s = to_mat(&srows.concat(), idx.len(), nt - 1);
        let got_rows = neighborhood_clustering(s.view()).unwrap().value;
        worst[4] = worst[4].max((got_rows - expect).abs());
    }
    let pass = worst.iter().all(|&w| w < ORACLE_TOL);
    verdict(
        pass,
        format!(
            "max |diff| infonce {:.1e}, weighted {:.1e}, nc(bank) {:.1e}, nc(rows) {:.1e}, nonparametric {:.1e} over 100 instances",
            worst[0], worst[1], worst[2], worst[4], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Exact argmax of cosine similarity on integer vectors; ties go to the
/// lowest index. Compares `sign(q.c) (q.c)^2 / |c|^2` by cross multiplication.
fn brute_assign(q: &[Vec<f64>], c: &[Vec<f64>]) -> Vec<usize> {
    let int = |v: &[f64]| v.iter().map(|&x| x as i64).collect::<Vec<i64>>();
    let idot = |a: &[i64], b: &[i64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<i64>();
    let cs: Vec<Vec<i64>> = c.iter().map(|r| int(r)).collect();
    q.iter()
        .map(|qi| {
            let qi = int(qi);
            let score = |k: usize| {
                let d = idot(&qi, &cs[k]);
                (d.signum() * d * d, idot(&cs[k], &cs[k]))
            };
            let mut best = 0;
            for k in 1..cs.len() {
                let (num_k, den_k) = score(k);
                let (num_b, den_b) = score(best);
                if num_k * den_b > num_b * den_k {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn brute_refresh(q: &[Vec<f64>], labels: &[usize], prev: &[Vec<f64>]) -> Vec<Vec<f64>> {
    prev.iter()
        .enumerate()
        .map(|(k, pk)| {
            let members: Vec<&Vec<f64>> = q.iter().zip(labels).filter(|(_, &y)| y == k).map(|(r, _)| r).collect();
            if members.is_empty() {
                return pk.clone();
            }
            (0..pk.len())
                .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64)
                .collect()
        })
        .collect()
}

fn criterion_3() -> Verdict {
    let (mut label_mismatch, mut worst, mut ties, mut empties) = (0usize, 0.0f64, 0usize, 0usize);
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let k = rng.random_range(2..7);
        let d = rng.random_range(2..6);
        let n = rng.random_range(1..25);
        // integer grids make exact ties common; duplicated centroids force them
        let mut c = Array2::from_shape_fn((k, d), |_| rng.random_range(-2..=2) as f64);
        for mut r in c.rows_mut() {
            if r.iter().all(|&x| x == 0.0) {
                r[0] = 1.0;
            }
        }
        if seed % 3 == 0 {
            let src = c.row(0).to_owned();
            c.row_mut(k - 1).assign(&src);
        }
        let mut q = Array2::from_shape_fn((n, d), |_| rng.random_range(-2..=2) as f64);
        for mut r in q.rows_mut() {
            if r.iter().all(|&x| x == 0.0) {
                r[d - 1] = 1.0;
            }
        }
        let (qr, cr) = (rows(&q), rows(&c));
        let set = CentroidSet {
            centroids: c.clone(),
            epoch: 0,
        };
        let got = assign_labels(q.view(), &set);
        let want = brute_assign(&qr, &cr);
        label_mismatch += got.iter().zip(&want).filter(|(a, b)| a != b).count();
        for qi in &qr {
            let sims: Vec<f64> = cr.iter().map(|ck| brute_cos(qi, ck)).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if sims.iter().filter(|&&s| best - s < 1e-12).count() > 1 {
                ties += 1;
            }
        }
        let fresh = refresh_centroids(q.view(), &got, &set).unwrap();
        empties += (0..k).filter(|c| !got.contains(c)).count();
        let want_c = brute_refresh(&qr, &want, &cr);
        for (a, b) in rows(&fresh.centroids).iter().zip(&want_c) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let pass = label_mismatch == 0 && worst <= 1e-9 && ties > 0 && empties > 0;
    verdict(
        pass,
        format!("label mismatches {label_mismatch}, centroid max |diff| {worst:.1e}, tied rows {ties}, empty classes {empties}"),
    )
}

// ---------------------------------------------------------------- 4 and 5

struct Stage1Outcome {
    con: (f64, f64),
    ce_only: (f64, f64),
    fidelity: f64,
}

fn stage1_outcome() -> Stage1Outcome {
    let run = benchmark().with_seed(0);
    let (source, _) = make_domains(&run.benchmark).unwrap();
    let dims = training::dims_for(&source, &run.model);
    assert_eq!((dims.feature_dim, dims.num_classes), (64, 8));
    let (_, classifier, _) = training::pretrain_source(&source, &dims, &run.train, None).unwrap();
    let geometry = |contrastive: bool| {
        let cfg = TrainConfig {
            stage1_contrastive: contrastive,
            ..run.train.clone()
        };
        let g = training::train_stage1(&classifier, &dims, &cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let batch = generate_balanced(&g, 125, &mut rng).unwrap();
        let pred = linalg::argmax_rows(classifier.logits(batch.prototypes.view()).unwrap().view());
        let fid = training::accuracy(&pred, &batch.labels);
        (prototype_geometry(batch.prototypes.view(), &batch.labels), fid)
    };
    let (con, fidelity) = geometry(true);
    let (ce_only, _) = geometry(false);
    Stage1Outcome { con, ce_only, fidelity }
}

fn criterion_4(s: &Stage1Outcome) -> Verdict {
    let (inter, intra) = s.con;
    let (ce_inter, ce_intra) = s.ce_only;
    let pass = inter >= 0.95 && intra <= 1e-2 && ce_inter < inter && ce_intra >= 10.0 * intra;
    verdict(
        pass,
        format!(
            "ce+con inter {inter:.4} intra {intra:.3e}; ce-only inter {ce_inter:.4} intra {ce_intra:.3e} (ratio {:.2})",
            ce_intra / intra
        ),
    )
}

fn criterion_5(s: &Stage1Outcome) -> Verdict {
    verdict(
        s.fidelity >= 0.99,
        format!("{:.1}% of 1000 prototypes classified as their class", 100.0 * s.fidelity),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Verdict {
    let run = benchmark();
    let mut specs = default_ladder(&SEEDS);
    for s in &mut specs {
        s.benchmark = run.benchmark.clone();
    }
    let results = experiments::run_ablation(&specs, &run.model, &run.train).unwrap();
    let m: Vec<f64> = results.iter().map(|r| r.mean).collect();
    let failed: usize = results.iter().map(|r| r.failures.len()).sum();
    let gain = m[4] - m[0];
    // "<" needs a mean gap of at least one point, "<=" only order
    let strict = |a: f64, b: f64| b - a >= 0.01;
    let ladder = strict(m[0], m[1]) && strict(m[1], m[2]) && strict(m[2], m[3]) && m[3] <= m[4];
    let pass = failed == 0 && gain >= 0.10 && ladder;
    let names: Vec<String> = results.iter().map(|r| format!("{} {:.2}", r.name, 100.0 * r.mean)).collect();
    verdict(pass, format!("gain {:.1} points; {}", 100.0 * gain, names.join(" | ")))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let run = benchmark();
    let points = experiments::run_noise_robustness(&run, &[0.3], &SEEDS).unwrap();
    let (w, u) = (points[0].weighted_mean(), points[0].unweighted_mean());
    verdict(
        w - u >= 0.01,
        format!("30% noise: weighted {:.2} vs unweighted {:.2}", 100.0 * w, 100.0 * u),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let run = benchmark().with_seed(0);
    let (source, target) = make_domains(&run.benchmark).unwrap();
    let dims = training::dims_for(&source, &run.model);
    let dir = tempfile::tempdir().unwrap();
    let save = |name: &str, ck: Checkpoint| -> String {
        let path = dir.path().join(name);
        ck.save(&path).unwrap();
        Checkpoint::load(&path).unwrap().manifest.digest
    };
    let (extractor, classifier, _) = training::pretrain_source(&source, &dims, &run.train, None).unwrap();
    let c0 = save("c0.json", Checkpoint::classifier(&classifier, 0, &dims));
    let generator = training::train_stage1(&classifier, &dims, &run.train, None).unwrap();
    let c1 = save("c1.json", Checkpoint::classifier(&classifier, 0, &dims));
    let g1 = save("g1.json", Checkpoint::of(&generator, 0, &dims));
    let projector = training::init_projector(&dims, 0);
    let adapted =
        training::train_stage2(extractor.clone(), projector, &generator, &classifier, &target, &run.train, None)
            .unwrap();
    let c2 = save("c2.json", Checkpoint::classifier(&classifier, 0, &dims));
    let g2 = save("g2.json", Checkpoint::of(&generator, 0, &dims));
    let e0 = Checkpoint::of(&extractor, 0, &dims).manifest.digest;
    let e2 = Checkpoint::of(&adapted.extractor, 0, &dims).manifest.digest;
    let reloaded = Checkpoint::load(&dir.path().join("c2.json")).unwrap().to_classifier().unwrap();
    let pass = c0 == c1 && c1 == c2 && g1 == g2 && e0 != e2 && reloaded == classifier;
    verdict(
        pass,
        format!(
            "classifier {}..{}..{} generator {}..{}, extractor changed {}",
            &c0[..8],
            &c1[..8],
            &c2[..8],
            &g1[..8],
            &g2[..8],
            e0 != e2
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let (n, k) = (6, 4);
        let beta: f64 = rng.random_range(0.0..=1.0);
        let h0 = random_simplex(&mut rng, n, k);
        let mut bank = PredictionBank::from_rows(h0.clone(), beta);
        let steps = rng.random_range(1..30);
        let mut history: Vec<Array2<f64>> = Vec::new();
        for _ in 0..steps {
            let o = random_simplex(&mut rng, n, k);
            bank.update(&(0..n).collect::<Vec<_>>(), o.view()).unwrap();
            history.push(o);
        }
        let t = history.len() as i32;
        let mut closed = &h0 * beta.powi(t);
        for (s, o) in history.iter().enumerate() {
            closed = closed + o * ((1.0 - beta) * beta.powi(t - 1 - s as i32));
        }
        worst = worst.max((&closed - &bank.rows()).iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }

    let dims = tiny_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e = Extractor::new(&dims, &mut rng);
    let p = Projector::new(&dims, &mut rng);
    let zero = PredictionBank::new(10, dims.num_classes, 0.9, BankInit::Zero).unwrap();
    let indices: Vec<usize> = (0..5).collect();
    let inputs = uniform(&mut rng, 5, dims.input_dim, -1.0, 1.0);
    let prototypes = uniform(&mut rng, dims.num_classes, dims.feature_dim, -1.0, 1.0);
    let labels = vec![0, 1, 2, 0, 1];
    let weights = vec![1.0; 5];
    let bank = uniform(&mut rng, 10, dims.feature_dim, -1.0, 1.0);
    let history = zero.gather(&indices);
    let batch = Stage2Batch {
        inputs: inputs.view(),
        indices: &indices,
        prototypes: prototypes.view(),
        pseudo_labels: &labels,
        weights: &weights,
        history: history.view(),
        feature_bank: bank.view(),
    };
    let loss = stage2_objective(&e, &p, &batch, LossToggles::default(), TradeOffs { lambda: 5.0, eta: 0.05 }, tau())
        .unwrap();
    let pass = worst <= 1e-9 && loss.elr == 0.0;
    verdict(
        pass,
        format!("closed-form max |diff| {worst:.1e} over 50 sequences; first-batch ELR {}", loss.elr),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Verdict {
    let run = benchmark().with_seed(3);
    let dir = tempfile::tempdir().unwrap();
    let mut paths: Vec<PathBuf> = Vec::new();
    for i in 0..2 {
        let (s, t) = make_domains(&run.benchmark).unwrap();
        let out = training::run_pipeline(&s, &t, &run.model, &run.train).unwrap();
        let path = dir.path().join(format!("metrics_{i}.csv"));
        out.log.write_csv(&path).unwrap();
        paths.push(path);
    }
    let (a, b) = (std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    verdict(a == b && rows > 1, format!("{} bytes, {rows} lines, identical {}", a.len(), a == b))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Verdict {
    let run = benchmark();
    // worst candidate first so the tie rule cannot help
    let lambdas = [200.0, 20.0, 5.0];
    let mut hits = 0;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let cfg = run.with_seed(seed);
        let prep = prepare(&cfg.benchmark, &cfg.model, &cfg.train).unwrap();
        let candidates: Vec<TrainConfig> = lambdas
            .iter()
            .map(|&lambda| TrainConfig {
                lambda,
                ..cfg.train.clone()
            })
            .collect();
        let rv = training::reverse_validate(
            &candidates,
            &prep.extractor,
            &prep.classifier,
            &prep.generator,
            &prep.target,
            &prep.dims,
            ReverseSettings::default(),
        )
        .unwrap();
        let best = rv.adapted_accuracy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let chosen = rv.adapted_accuracy[rv.best];
        if best - chosen <= 0.02 {
            hits += 1;
        }
        parts.push(format!("λ={} {:.1}/{:.1}", lambdas[rv.best], 100.0 * chosen, 100.0 * best));
    }
    verdict(hits >= 4, format!("{hits}/5 within 2 points ({})", parts.join(", ")))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // cargo's usual flags for ignored tests turn expected failures into real ones
    let strict = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        println!(
            "criterion {id:>2} {:<4} {name} [{:.1}s] {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
        verdicts.push((id, name, v));
    };
    record(1, "gradient correctness", &criterion_1);
    record(2, "loss oracles", &criterion_2);
    record(3, "pseudo-label oracle", &criterion_3);
    let t = Instant::now();
    let s1 = stage1_outcome();
    let stage1_secs = t.elapsed().as_secs_f64();
    record(4, "prototype geometry", &|| criterion_4(&s1));
    record(5, "generator fidelity", &|| criterion_5(&s1));
    println!("   (stage 1 training for criteria 4 and 5 took {stage1_secs:.1}s)");
    record(6, "adaptation gain and loss ladder", &criterion_6);
    record(7, "noise robustness", &criterion_7);
    record(8, "frozen components", &criterion_8);
    record(9, "bank algebra", &criterion_9);
    record(10, "determinism", &criterion_10);
    record(11, "reverse validation", &criterion_11);

    let passed = verdicts.iter().filter(|v| v.2.pass).count();
    println!("{passed}/{} criteria pass in {:.0}s", verdicts.len(), start.elapsed().as_secs_f64());
    let expected = if strict { &[][..] } else { EXPECTED_FAILURES };
    let unexpected: Vec<String> = verdicts
        .iter()
        .filter(|(id, _, v)| v.pass == expected.contains(id))
        .map(|(id, name, v)| format!("criterion {id} ({name}) {}", if v.pass { "now passes" } else { "fails" }))
        .collect();
    if unexpected.is_empty() {
        if !strict && !EXPECTED_FAILURES.is_empty() {
            println!("expected failures: {EXPECTED_FAILURES:?} (run with --ignored to treat them as errors)");
        }
        ExitCode::SUCCESS
    } else {
        for u in &unexpected {
            println!("unexpected: {u}");
        }
        ExitCode::FAILURE
    }
}
