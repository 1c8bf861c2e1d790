//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line straight to stderr (bypassing the
//! harness capture) before asserting.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use salfuse_cli::{
    cmd_evaluate, cmd_predict, cmd_train_forest, cmd_train_fusion, ingest, predict_image, PipelineConfig,
};
use salfuse_core::eval::{confusion, f_measure, pr_point, roc_point, sweep, thresholds, Aggregation};
use salfuse_core::forest::load_forest;
use salfuse_core::fusion::samples_from_maps;
use salfuse_core::imaging::GrayMap;
use salfuse_core::jsc::{self, Dictionary, JscParams};
use salfuse_core::pipeline::{analyze, MapConfig};
use salfuse_core::tddl::{
    self, gradient_check, initialize, load_model, mean_loss, train_step, FusionModel, GradientCheckOptions, Sample,
    TrainConfig,
};

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion}: {verdict} {detail}");
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_dict(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dictionary<f64> {
    Dictionary::normalized(Array2::from_shape_fn((n, d), |_| gaussian(rng))).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
    let mut worst_dict = 0.0f64;
    let mut worst_weight = 0.0f64;
    let mut inconclusive = 0;
    let instances = 24;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let m = rng.random_range(2..=4);
        let d = rng.random_range(4..=8);
        let (n, p) = (6, 5);
        let dicts = (0..m).map(|_| random_dict(&mut rng, n, d)).collect();
        let weights = (0..m)
            .map(|_| Array2::from_shape_fn((p, d), |_| 0.5 * gaussian(&mut rng)))
            .collect();
        let bias = Array1::from_shape_fn(p, |_| 0.1 * gaussian(&mut rng));
        let model = FusionModel::new(dicts, weights, bias).unwrap();
        let sample = Sample {
            x: (0..m)
                .map(|_| Array1::from_shape_fn(n, |_| gaussian(&mut rng)))
                .collect(),
            y: Array1::from_shape_fn(p, |_| rng.random::<f64>()),
        };
        let cfg = TrainConfig::<f64>::with_iterations(1);
        assert_eq!((cfg.lambda1, cfg.lambda2), (0.015, 0.002));
        let opts = GradientCheckOptions {
            seed: i,
            ..GradientCheckOptions::default()
        };
        let r = gradient_check(&model, &sample, &cfg, &opts).unwrap();
        worst_dict = worst_dict.max(r.dict_rel_error);
        worst_weight = worst_weight.max(r.weight_rel_error);
        inconclusive += r.inconclusive as usize;
    }
    let elapsed = start.elapsed();
    let pass = worst_dict < 1e-3 && worst_weight < 1e-5 && inconclusive == 0 && elapsed < Duration::from_secs(30);
    report(
        1,
        pass,
        &format!(
            "{instances} instances, max dict err {worst_dict:.2e}, max weight err {worst_weight:.2e}, \
             inconclusive {inconclusive}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Joint sparse coding optimality against an accelerated proximal-gradient
//    reference written on plain vectors.

struct Problem {
    /// Per modality: column-major atoms (`d` columns of length `n`).
    atoms: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    n: usize,
    d: usize,
    lambda1: f64,
    lambda2: f64,
}

impl Problem {
    fn m(&self) -> usize {
        self.x.len()
    }

    /// `D^s a` for the code block `a` (length `d`).
    fn apply(&self, s: usize, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (j, &aj) in a.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&self.atoms[s][j * self.n..(j + 1) * self.n]) {
                *o += aj * v;
            }
        }
        out
    }

    /// Codes are stored modality-major: `a[s * d + j]`.
    fn objective(&self, a: &[f64]) -> f64 {
        let mut fit = 0.0;
        for s in 0..self.m() {
            let r = self.apply(s, &a[s * self.d..(s + 1) * self.d]);
            fit += r.iter().zip(&self.x[s]).map(|(u, v)| (v - u) * (v - u)).sum::<f64>();
        }
        let mut group = 0.0;
        for j in 0..self.d {
            group += (0..self.m()).map(|s| a[s * self.d + j].powi(2)).sum::<f64>().sqrt();
        }
        let frob: f64 = a.iter().map(|v| v * v).sum();
        0.5 * fit + self.lambda1 * group + 0.5 * self.lambda2 * frob
    }

    fn smooth_grad(&self, a: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; a.len()];
        for s in 0..self.m() {
            let block = &a[s * self.d..(s + 1) * self.d];
            let r: Vec<f64> = self
                .apply(s, block)
                .iter()
                .zip(&self.x[s])
                .map(|(u, v)| u - v)
                .collect();
            for j in 0..self.d {
                let col = &self.atoms[s][j * self.n..(j + 1) * self.n];
                g[s * self.d + j] = col.iter().zip(&r).map(|(c, v)| c * v).sum::<f64>() + self.lambda2 * block[j];
            }
        }
        g
    }

    /// Upper bound on the Lipschitz constant of the smooth gradient.
    fn lipschitz(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..self.m() {
            // power iteration on D^T D
            let mut v = vec![1.0; self.d];
            let mut est = 0.0;
            for _ in 0..500 {
                let dv = self.apply(s, &v);
                let w: Vec<f64> = (0..self.d)
                    .map(|j| {
                        self.atoms[s][j * self.n..(j + 1) * self.n]
                            .iter()
                            .zip(&dv)
                            .map(|(c, u)| c * u)
                            .sum()
                    })
                    .collect();
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                est = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.iter().map(|x| x / norm).collect();
            }
            worst = worst.max(est);
        }
        1.01 * worst + self.lambda2
    }

    fn prox(&self, z: &mut [f64], step: f64) {
        for j in 0..self.d {
            let norm = (0..self.m()).map(|s| z[s * self.d + j].powi(2)).sum::<f64>().sqrt();
            let scale = if norm > step * self.lambda1 {
                1.0 - step * self.lambda1 / norm
            } else {
                0.0
            };
            for s in 0..self.m() {
                z[s * self.d + j] *= scale;
            }
        }
    }

    /// FISTA with adaptive (function-value) restart.
    fn reference_solve(&self) -> Vec<f64> {
        let step = 1.0 / self.lipschitz();
        let len = self.m() * self.d;
        let (mut a, mut y) = (vec![0.0; len], vec![0.0; len]);
        let mut t = 1.0f64;
        let mut f_prev = self.objective(&a);
        for _ in 0..200_000 {
            let g = self.smooth_grad(&y);
            let mut next: Vec<f64> = y.iter().zip(&g).map(|(v, gv)| v - step * gv).collect();
            self.prox(&mut next, step);
            let f_next = self.objective(&next);
            if f_next > f_prev {
                if t == 1.0 {
                    break;
                }
                t = 1.0;
                y.clone_from(&a);
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let change = next.iter().zip(&a).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            y = next
                .iter()
                .zip(&a)
                .map(|(u, v)| u + (t - 1.0) / t_next * (u - v))
                .collect();
            a = next;
            t = t_next;
            f_prev = f_next;
            if change < 1e-15 {
                break;
            }
        }
        a
    }
}

#[test]
fn criterion_2_jsc_optimality() {
    let start = Instant::now();
    let instances = 120;
    let (mut worst_kkt, mut worst_gap) = (0.0f64, 0.0f64);
    let mut sparse_instances = 0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + i);
        let m = rng.random_range(1..=4);
        let n = rng.random_range(4..=10);
        let d = rng.random_range(3..=10);
        let dicts: Vec<Dictionary<f64>> = (0..m).map(|_| random_dict(&mut rng, n, d)).collect();
        let x: Vec<Array1<f64>> = (0..m)
            .map(|_| Array1::from_shape_fn(n, |_| gaussian(&mut rng)))
            .collect();
        let params = JscParams {
            lambda1: rng.random_range(0.01..1.5),
            lambda2: rng.random_range(0.002..0.2),
            max_iter: 100_000,
            tol: 1e-13,
        };
        let code = jsc::encode(&x, &dicts, &params, None).unwrap();
        let kkt = jsc::kkt_violation(&x, &dicts, code.a.view(), &params);

        let problem = Problem {
            atoms: dicts
                .iter()
                .map(|ds| ds.atoms().t().iter().copied().collect())
                .collect(),
            x: x.iter().map(|v| v.to_vec()).collect(),
            n,
            d,
            lambda1: params.lambda1,
            lambda2: params.lambda2,
        };
        let reference = problem.reference_solve();
        let ours: Vec<f64> = (0..m).flat_map(|s| code.a.column(s).to_vec()).collect();
        let gap = (problem.objective(&ours) - problem.objective(&reference)).abs();

        worst_kkt = worst_kkt.max(kkt);
        worst_gap = worst_gap.max(gap);
        sparse_instances += (code.active_rows.len() < d) as usize;
    }
    let elapsed = start.elapsed();
    let pass = worst_kkt < 1e-6 && worst_gap < 1e-8 && elapsed < Duration::from_secs(30);
    report(
        2,
        pass,
        &format!(
            "{instances} instances ({sparse_instances} with inactive rows), max KKT {worst_kkt:.2e}, \
             max objective gap {worst_gap:.2e}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Learning dynamics on a planted model

/// Samples from a planted model: each modality observes the same row-sparse
/// code through its own dictionary, `x^s = D^s α + noise`, and the target is
/// `y = W α + b`, so every modality can predict it on its own.
fn planted_dataset(rng: &mut ChaCha8Rng, count: usize) -> Vec<Sample<f64>> {
    let (m, n, d, p, k) = (2, 16, 10, 6, 3);
    let dicts: Vec<Dictionary<f64>> = (0..m).map(|_| random_dict(rng, n, d)).collect();
    let weights = Array2::from_shape_fn((p, d), |_| gaussian(rng));
    let bias = Array1::from_shape_fn(p, |_| 0.5 * gaussian(rng));
    (0..count)
        .map(|_| {
            let mut alpha = Array1::<f64>::zeros(d);
            for _ in 0..k {
                alpha[rng.random_range(0..d)] = gaussian(rng);
            }
            let x = dicts
                .iter()
                .map(|ds| ds.atoms().dot(&alpha) + Array1::from_shape_fn(n, |_| 0.01 * gaussian(rng)))
                .collect();
            Sample {
                x,
                y: weights.dot(&alpha) + &bias,
            }
        })
        .collect()
}

#[test]
fn criterion_3_learning_dynamics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = planted_dataset(&mut rng, 400);
    let mut cfg = TrainConfig::<f64>::with_iterations(2000);
    cfg.atoms = 10;
    cfg.seed = 3;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = initialize(&data, cfg.atoms, &mut rng).unwrap();
    let initial = mean_loss(&model, &data, &cfg.jsc_params()).unwrap();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut worst_norm = 0.0f64;
    for t in 1..=cfg.iterations {
        let sample = &data[rng.random_range(0..data.len())];
        losses.push(train_step(&mut model, sample, t, &cfg).unwrap().loss);
        for ds in &model.dicts {
            worst_norm = ds.column_norms().into_iter().fold(worst_norm, f64::max);
        }
    }
    let window = 200;
    let running = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    let final_mean = mean_loss(&model, &data, &cfg.jsc_params()).unwrap();
    let elapsed = start.elapsed();
    let pass = running <= 0.5 * initial
        && final_mean <= 0.5 * initial
        && worst_norm <= 1.0 + 1e-12
        && elapsed < Duration::from_secs(120);
    report(
        3,
        pass,
        &format!(
            "loss at init {initial:.4}, running mean of last {window} steps {running:.4} \
             ({:.1}% drop), final dataset loss {final_mean:.4}, max atom norm {worst_norm:.12}, {elapsed:.2?}",
            100.0 * (1.0 - running / initial)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Segmentation hierarchy

#[test]
fn criterion_4_segmentation_hierarchy() {
    let start = Instant::now();
    let cfg = MapConfig::default();
    let mut violations = 0usize;
    let mut increases = 0usize;
    let mut counts_seen = Vec::new();
    for i in 0..20u64 {
        let image = if i % 2 == 0 {
            common::blob_scene(48 + 8 * (i as usize % 8), 4000 + i).image
        } else {
            common::mosaic_scene(96 + 8 * (i as usize % 5), 12 + i as usize % 3 * 4, 4000 + i)
        };
        let analysis = analyze(&image, &cfg).unwrap();
        let levels = analysis.hierarchy.levels();
        for pair in levels.windows(2) {
            let (fine, coarse) = (pair[0].labels(), pair[1].labels());
            // every fine region lies inside exactly one coarse region
            let mut parent = vec![usize::MAX; pair[0].region_count()];
            for (&f, &c) in fine.iter().zip(coarse) {
                if parent[f] == usize::MAX {
                    parent[f] = c;
                } else if parent[f] != c {
                    violations += 1;
                }
            }
        }
        for (k, parents) in analysis.hierarchy.parent_maps().iter().enumerate() {
            let (fine, coarse) = (levels[k].labels(), levels[k + 1].labels());
            violations += fine.iter().zip(coarse).filter(|(&f, &c)| parents[f] != c).count();
        }
        let counts = analysis.hierarchy.region_counts();
        increases += counts.windows(2).filter(|w| w[1] > w[0]).count();
        counts_seen.push(counts);
    }
    let elapsed = start.elapsed();
    let pass = violations == 0 && increases == 0 && elapsed < Duration::from_secs(60);
    report(
        4,
        pass,
        &format!(
            "20 images, nesting violations {violations}, count increases {increases}, \
             counts per level e.g. {:?} and {:?}, {elapsed:.2?}",
            counts_seen[0], counts_seen[1]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Metric identities

#[test]
fn criterion_5_metric_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (64, 48);
    let gts: Vec<GrayMap> = (0..6)
        .map(|_| GrayMap::from_fn(w, h, |_, _| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }))
        .collect();

    let perfect: Vec<(&GrayMap, &GrayMap)> = gts.iter().map(|g| (g, g)).collect();
    let perfect_curve = sweep(&perfect, Aggregation::Pooled).unwrap();

    let half = GrayMap::filled(w, h, 0.5);
    let constant: Vec<(&GrayMap, &GrayMap)> = gts.iter().map(|g| (&half, g)).collect();
    let constant_auc = sweep(&constant, Aggregation::Pooled).unwrap().auc_roc;

    // exhaustive per-threshold oracle on graded maps
    let maps: Vec<GrayMap> = (0..6)
        .map(|_| GrayMap::from_fn(w, h, |_, _| rng.random_range(0..256) as f64 / 255.0))
        .collect();
    let pairs: Vec<(&GrayMap, &GrayMap)> = maps.iter().zip(&gts).collect();
    let mut mismatches = 0usize;
    for mode in [Aggregation::Pooled, Aggregation::PerImageMean] {
        let curve = sweep(&pairs, mode).unwrap();
        for (i, &t) in thresholds().iter().enumerate() {
            assert_eq!(t, i as f64 / 255.0);
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            let mut per_image = Vec::new();
            for (map, gt) in &pairs {
                let (mut itp, mut ifp, mut ifn, mut itn) = (0u64, 0u64, 0u64, 0u64);
                for (&v, &g) in map.values().iter().zip(gt.values()) {
                    match (v >= t, g > 0.0) {
                        (true, true) => itp += 1,
                        (true, false) => ifp += 1,
                        (false, true) => ifn += 1,
                        (false, false) => itn += 1,
                    }
                }
                let c = confusion(map, gt, t);
                mismatches += ((c.tp, c.fp, c.fn_, c.tn) != (itp, ifp, ifn, itn)) as usize;
                let prec = if itp + ifp == 0 {
                    1.0
                } else {
                    itp as f64 / (itp + ifp) as f64
                };
                let rec = if itp + ifn == 0 {
                    1.0
                } else {
                    itp as f64 / (itp + ifn) as f64
                };
                let tpr = if itp + ifn == 0 {
                    0.0
                } else {
                    itp as f64 / (itp + ifn) as f64
                };
                let fpr = if ifp + itn == 0 {
                    0.0
                } else {
                    ifp as f64 / (ifp + itn) as f64
                };
                per_image.push([prec, rec, tpr, fpr]);
                tp += itp;
                fp += ifp;
                fn_ += ifn;
                tn += itn;
            }
            let expected = match mode {
                Aggregation::Pooled => {
                    let c = salfuse_core::eval::ConfusionCounts { tp, fp, tn, fn_ };
                    let (p, r) = pr_point(&c);
                    let (tpr, fpr) = roc_point(&c);
                    assert_eq!(
                        p,
                        if tp + fp == 0 {
                            1.0
                        } else {
                            tp as f64 / (tp + fp) as f64
                        }
                    );
                    [p, r, tpr, fpr]
                }
                Aggregation::PerImageMean => {
                    let k = per_image.len() as f64;
                    let mut acc = [0.0; 4];
                    for row in &per_image {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc.map(|a| a / k)
                }
            };
            let got = [curve.precision[i], curve.recall[i], curve.tpr[i], curve.fpr[i]];
            mismatches += (got != expected) as usize;
            mismatches += (curve.f_measure[i] != f_measure(expected[0], expected[1])) as usize;
        }
        let best = curve.f_measure.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mismatches += (curve.max_f != best) as usize;
    }
    let elapsed = start.elapsed();
    let pass = perfect_curve.max_f == 1.0
        && perfect_curve.auc_roc == 1.0
        && (constant_auc - 0.5).abs() <= 0.01
        && mismatches == 0
        && elapsed < Duration::from_secs(60);
    report(
        5,
        pass,
        &format!(
            "perfect max_f {} auc {}, constant-0.5 auc {constant_auc:.4}, brute-force mismatches {mismatches}, \
             {elapsed:.2?}",
            perfect_curve.max_f, perfect_curve.auc_roc
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. End-to-end on synthetic blobs

#[test]
fn criterion_6_end_to_end() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    common::write_corpus(&train_dir, 20, 96, 61);
    common::write_corpus(&test_dir, 10, 96, 62);
    let (train_set, _) = ingest(&train_dir).unwrap();
    let (test_set, _) = ingest(&test_dir).unwrap();
    assert_eq!((train_set.entries.len(), test_set.entries.len()), (20, 10));

    let mut cfg = PipelineConfig::default();
    cfg.train.iterations = 20_000;
    let (forest_path, fusion_path) = (root.join("forest.sfrf"), root.join("fusion.sfdl"));
    cmd_train_forest(&train_set, &cfg, &forest_path).unwrap();
    cmd_train_fusion(&train_set, &forest_path, &cfg, &fusion_path, None).unwrap();
    let maps_dir = root.join("maps");
    let predicted = cmd_predict(
        &test_dir.join("images"),
        &forest_path,
        &fusion_path,
        &maps_dir,
        &cfg,
        true,
    )
    .unwrap();
    assert_eq!(predicted.written.len(), 10);

    let fused = cmd_evaluate(&maps_dir, &test_set, &root.join("eval/fused"), &cfg, "").unwrap();
    let scale_f: Vec<f64> = (1..=cfg.levels)
        .map(|k| {
            let prefix = root.join(format!("eval/scale{k}"));
            cmd_evaluate(&maps_dir, &test_set, &prefix, &cfg, &format!("_scale{k}"))
                .unwrap()
                .max_f
        })
        .collect();
    let best_single = scale_f.iter().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = fused.max_f >= 0.80 && fused.max_f >= best_single - 0.02 && elapsed < Duration::from_secs(15 * 60);
    report(
        6,
        pass,
        &format!(
            "fused max_f {:.4} auc {:.4}, per-scale max_f {:?}, {elapsed:.2?}",
            fused.max_f,
            fused.auc_roc,
            scale_f.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. Determinism and persistence

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        forest_trees: 12,
        seed: 17,
        ..PipelineConfig::default()
    };
    cfg.train.iterations = 300;
    cfg.train.atoms = 40;
    cfg
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data_dir = root.join("data");
    common::write_corpus(&data_dir, 6, 64, 71);
    let (set, _) = ingest(&data_dir).unwrap();
    let cfg = small_config();

    let run = |tag: &str| {
        let (fp, mp) = (root.join(format!("{tag}.sfrf")), root.join(format!("{tag}.sfdl")));
        let forest = cmd_train_forest(&set, &cfg, &fp).unwrap();
        let model = cmd_train_fusion(&set, &fp, &cfg, &mp, None).unwrap();
        (forest, model, std::fs::read(&fp).unwrap(), std::fs::read(&mp).unwrap())
    };
    let (forest_a, model_a, forest_bytes_a, model_bytes_a) = run("a");
    let (forest_b, model_b, forest_bytes_b, model_bytes_b) = run("b");
    let identical_retrain = forest_a == forest_b
        && model_a == model_b
        && forest_bytes_a == forest_bytes_b
        && model_bytes_a == model_bytes_b;

    let forest_loaded = load_forest(root.join("a.sfrf")).unwrap();
    let model_loaded: FusionModel<f64> = load_model(root.join("a.sfdl")).unwrap();
    let round_trip_models = forest_loaded == forest_a && model_loaded == model_a;
    let mut identical_predictions = true;
    for entry in &set.entries {
        let (image, _) = salfuse_cli::dataset::load_pair(entry).unwrap();
        let (fused_mem, scales_mem) = predict_image(&image, &forest_a, &model_a, &cfg).unwrap();
        let (fused_disk, scales_disk) = predict_image(&image, &forest_loaded, &model_loaded, &cfg).unwrap();
        identical_predictions &= fused_mem == fused_disk && scales_mem == scales_disk;
    }
    let elapsed = start.elapsed();
    let pass = identical_retrain && round_trip_models && identical_predictions;
    report(
        7,
        pass,
        &format!(
            "bit-identical retrain {identical_retrain}, lossless save/load {round_trip_models}, \
             identical predictions {identical_predictions}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. Default dimensions

fn shapes_from(maps: &[GrayMap], gt: &GrayMap, cfg: &PipelineConfig) -> (usize, usize, FusionModel<f64>) {
    let samples = samples_from_maps(maps, gt, &cfg.fusion_config()).unwrap();
    let x_dim: usize = samples[0].x.iter().map(Vec::len).sum();
    let y_dim = samples[0].y.len();
    let train_cfg = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let model = initialize(
        &salfuse_core::fusion::to_samples::<f64>(&samples),
        train_cfg.atoms,
        &mut rng,
    )
    .unwrap();
    (x_dim, y_dim, model)
}

#[test]
fn criterion_8_default_dimensions() {
    let cfg = PipelineConfig::default();
    assert_eq!((cfg.levels, cfg.patch_size, cfg.train.atoms), (4, 9, 150));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h) = (60, 45);
    let maps: Vec<GrayMap> = (0..cfg.levels)
        .map(|_| GrayMap::from_fn(w, h, |_, _| rng.random::<f64>()))
        .collect();
    let gt = GrayMap::from_fn(w, h, |x, y| {
        if (20..40).contains(&x) && (10..30).contains(&y) {
            1.0
        } else {
            0.0
        }
    });
    let (x_dim, y_dim, model) = shapes_from(&maps, &gt, &cfg);

    let dict = model.stacked_dictionary().dim();
    let weights = model.stacked_weights().dim();
    let bias = model.bias.len();
    let mut bytes = Vec::new();
    tddl::write_model(&model, &mut bytes).unwrap();
    let reread: FusionModel<f64> = tddl::read_model(bytes.as_slice()).unwrap();
    let pass = dict == (324, 150)
        && weights == (81, 600)
        && bias == 81
        && x_dim == 324
        && y_dim == 81
        && reread.stacked_dictionary().dim() == dict;
    report(
        8,
        pass,
        &format!(
            "stacked dictionary {}x{}, stacked weights {}x{}, bias {bias}x1, sample x {x_dim}, y {y_dim}",
            dict.0, dict.1, weights.0, weights.1
        ),
    );
    assert!(pass);
}
