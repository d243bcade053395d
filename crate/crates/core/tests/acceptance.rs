// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria 1-9. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line
//! (written past the test harness capture) and fails if the criterion fails.
//! Tests hold a shared lock so timings are not inflated by each other.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use advseg::augment::{polar_mix, polar_mix_selection};
use advseg::config::{TrainConfig, GAMMA_UNREACHABLE};
use advseg::geom::{build_grid_index, compute_features, neighbor_features};
use advseg::linalg::Matrix;
use advseg::losses::{ce_loss, kd_loss, lovasz_softmax, sce_loss, triplet_reg_with_anchors, SceParams};
use advseg::metrics::{AbsentClassPolicy, ConfusionMatrix};
use advseg::model::{init_model, Checkpoint, FeatureNorm, FeatureSpec, Model};
use advseg::pcio::{LabeledScan, PointCloud};
use advseg::pipeline::{self, EvalRecord, NoObserver, StageOutcome, TrainData};
use advseg::schema::ClassSchema;
use advseg::synth::{self, DatasetManifest};
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u8, pass: bool, detail: &str) {
    let line = format!(
        "ACCEPTANCE {n} {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// --- 1: gradient oracle ------------------------------------------------------------

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

fn ce_ref(z: &[Vec<f64>], y: &[u32]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(r, &l)| -softmax_ref(r)[l as usize].ln())
        .sum::<f64>()
        / z.len() as f64
}

fn sce_ref(z: &[Vec<f64>], y: &[u32], p: SceParams) -> f64 {
    let rce: f64 = z
        .iter()
        .zip(y)
        .map(|(r, &l)| -p.clip_log * (1.0 - softmax_ref(r)[l as usize]))
        .sum::<f64>()
        / z.len() as f64;
    p.alpha * ce_ref(z, y) + p.beta * rce
}

fn kd_ref(s: &[Vec<f64>], t: &[Vec<f64>], base: &[usize], temp: f64) -> f64 {
    let mut total = 0.0;
    for (sr, tr) in s.iter().zip(t) {
        let zs: Vec<f64> = base.iter().map(|&c| sr[c] / temp).collect();
        let zt: Vec<f64> = tr.iter().map(|v| v / temp).collect();
        let (p, q) = (softmax_ref(&zs), softmax_ref(&zt));
        total -= q.iter().zip(&p).map(|(qj, pj)| qj * pj.ln()).sum::<f64>();
    }
    temp * temp * total / s.len() as f64
}

/// Per anchor: farthest same-label and nearest other-label point, hinge, averaged
/// over anchors that have both. Returns the value and the smallest distance to a
/// non-smooth point (ties in the selections, hinge at zero, zero distances).
fn triplet_ref(f: &[Vec<f64>], y: &[u32], margin: f64) -> (f64, f64) {
    let d = |a: usize, b: usize| -> f64 {
        f[a].iter().zip(&f[b]).map(|(x, z)| (x - z) * (x - z)).sum::<f64>().sqrt()
    };
    let (mut sum, mut used, mut kink) = (0.0, 0usize, f64::INFINITY);
    for a in 0..f.len() {
        let pos: Vec<f64> = (0..f.len()).filter(|&j| j != a && y[j] == y[a]).map(|j| d(a, j)).collect();
        let neg: Vec<f64> = (0..f.len()).filter(|&j| y[j] != y[a]).map(|j| d(a, j)).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let dap = pos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dan = neg.iter().cloned().fold(f64::INFINITY, f64::min);
        kink = kink.min(min_gap(&pos)).min(min_gap(&neg)).min(dan).min(dap);
        let h = dap - dan + margin;
        kink = kink.min(h.abs());
        used += 1;
        sum += h.max(0.0);
    }
    (if used == 0 { 0.0 } else { sum / used as f64 }, kink)
}

fn set_params(model: &mut Model, flat: &[f64]) {
    let mut i = 0;
    for l in &mut model.layers {
        for v in l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()) {
            *v = flat[i];
            i += 1;
        }
    }
}

/// Reference forward: standardize, affine layers, ReLU between. Returns the
/// embedding (last hidden output), logits and the smallest |pre-activation|.
fn mlp_ref(model: &Model, x: &Matrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let mut h: Vec<Vec<f64>> = x
        .iter_rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - model.norm.mean[j]) / model.norm.std[j])
                .collect()
        })
        .collect();
    let mut emb = h.clone();
    let mut kink = f64::INFINITY;
    let last = model.layers.len() - 1;
    for (li, layer) in model.layers.iter().enumerate() {
        if li == last {
            emb = h.clone();
        }
        h = h
            .iter()
            .map(|row| {
                (0..layer.out_dim())
                    .map(|o| {
                        let w = layer.weight.row(o);
                        let z = layer.bias[o] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        if li < last {
                            kink = kink.min(z.abs());
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect();
    }
    (emb, h, kink)
}

struct GradStats {
    instances: usize,
    worst: f64,
}

impl GradStats {
    fn new() -> Self {
        GradStats { instances: 0, worst: 0.0 }
    }
    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.instances += 1;
        self.worst = self.worst.max(rel_error(analytic, numeric));
    }
}

fn value_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + b.abs())
}

const INSTANCES: usize = 60;
const SMOOTH_MARGIN: f64 = 1e-3;

fn check_ce(rng: &mut impl Rng) -> GradStats {
    let mut st = GradStats::new();
    while st.instances < INSTANCES {
        let (n, c) = (rng.random_range(1..7), rng.random_range(2..6));
        let z = rand_matrix(rng, n, c, 3.0);
        let y = rand_labels(rng, n, c);
        let out = ce_loss(&z, &y).unwrap();
        assert!(value_close(out.value, ce_ref(&rows(&z), &y)));
        let num = fd_gradient(z.as_slice(), FD_STEP, |v| ce_ref(&rows(&Matrix::from_vec(n, c, v.to_vec())), &y));
        st.add(out.grad.as_slice(), &num);
    }
    st
}

fn check_sce(rng: &mut impl Rng) -> GradStats {
    let mut st = GradStats::new();
    while st.instances < INSTANCES {
        let (n, c) = (rng.random_range(1..7), rng.random_range(2..6));
        let z = rand_matrix(rng, n, c, 3.0);
        let y = rand_labels(rng, n, c);
        let p = SceParams {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            clip_log: rng.random_range(-8.0..-1.0),
        };
        let out = sce_loss(&z, &y, p).unwrap();
        assert!(value_close(out.value, sce_ref(&rows(&z), &y, p)));
        let num = fd_gradient(z.as_slice(), FD_STEP, |v| {
            sce_ref(&rows(&Matrix::from_vec(n, c, v.to_vec())), &y, p)
        });
        st.add(out.grad.as_slice(), &num);
    }
    st
}

fn check_kd(rng: &mut impl Rng) -> GradStats {
    let mut st = GradStats::new();
    while st.instances < INSTANCES {
        let (n, c) = (rng.random_range(1..7), rng.random_range(3..7));
        let nb = rng.random_range(2..c);
        let mut ids: Vec<usize> = (0..c).collect();
        ids.shuffle(rng);
        let mut base = ids[..nb].to_vec();
        base.sort();
        let s = rand_matrix(rng, n, c, 3.0);
        let t = rand_matrix(rng, n, nb, 3.0);
        let temp = rng.random_range(0.5..4.0);
        let out = kd_loss(&s, &t, &base, temp).unwrap();
        assert!(value_close(out.value, kd_ref(&rows(&s), &rows(&t), &base, temp)));
        let num = fd_gradient(s.as_slice(), FD_STEP, |v| {
            kd_ref(&rows(&Matrix::from_vec(n, c, v.to_vec())), &rows(&t), &base, temp)
        });
        st.add(out.grad.as_slice(), &num);
    }
    st
}

fn check_lovasz(rng: &mut impl Rng) -> (GradStats, usize) {
    let mut st = GradStats::new();
    let mut rejected = 0;
    while st.instances < INSTANCES {
        let (n, c) = (rng.random_range(2..9), rng.random_range(2..5));
        let z = rand_matrix(rng, n, c, 3.0);
        let y = rand_labels(rng, n, c);
        let zr = rows(&z);
        let probs: Vec<Vec<f64>> = zr.iter().map(|r| softmax_ref(r)).collect();
        // Keep the sort order and the argmax-derived class set fixed under ±h.
        let mut margin = f64::INFINITY;
        for k in 0..c {
            let err: Vec<f64> = probs
                .iter()
                .zip(&y)
                .map(|(p, &l)| (if l as usize == k { 1.0 } else { 0.0 } - p[k]).abs())
                .collect();
            margin = margin.min(min_gap(&err));
        }
        for p in &probs {
            let mut s = p.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(s[0] - s[1]);
        }
        if margin < SMOOTH_MARGIN {
            rejected += 1;
            continue;
        }
        let all: Vec<usize> = (0..c).collect();
        let restrict = rng.random_bool(0.5);
        let present: Vec<usize> = (0..c)
            .filter(|&k| {
                y.iter().any(|&l| l as usize == k)
                    || probs.iter().any(|p| {
                        let am = (0..c).fold(0, |b, j| if p[j] > p[b] { j } else { b });
                        am == k
                    })
            })
            .collect();
        let classes = if restrict { all.clone() } else { present.clone() };
        let out = lovasz_softmax(&z, &y, restrict.then_some(&all[..])).unwrap();
        assert!(value_close(out.value, lovasz_softmax_ref(&zr, &y, &classes)));
        let num = fd_gradient(z.as_slice(), FD_STEP, |v| {
            lovasz_softmax_ref(&rows(&Matrix::from_vec(n, c, v.to_vec())), &y, &classes)
        });
        st.add(out.grad.as_slice(), &num);
    }
    (st, rejected)
}

fn check_triplet(rng: &mut impl Rng) -> (GradStats, usize) {
    let mut st = GradStats::new();
    let mut rejected = 0;
    while st.instances < INSTANCES {
        let (n, d) = (rng.random_range(3..9), rng.random_range(2..5));
        let f = rand_matrix(rng, n, d, 1.0);
        let y = rand_labels(rng, n, 3);
        let margin = rng.random_range(0.1..1.5);
        let (value, kink) = triplet_ref(&rows(&f), &y, margin);
        if kink < SMOOTH_MARGIN || value == 0.0 {
            rejected += 1;
            continue;
        }
        let anchors: Vec<usize> = (0..n).collect();
        let out = triplet_reg_with_anchors(&f, &y, &anchors, margin).unwrap();
        assert!(value_close(out.value, value));
        let num = fd_gradient(f.as_slice(), FD_STEP, |v| {
            triplet_ref(&rows(&Matrix::from_vec(n, d, v.to_vec())), &y, margin).0
        });
        st.add(out.grad.as_slice(), &num);
    }
    (st, rejected)
}

fn check_mlp(rng: &mut impl Rng) -> (GradStats, usize) {
    let mut st = GradStats::new();
    let mut rejected = 0;
    while st.instances < INSTANCES {
        let din = rng.random_range(2..6);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..6)).collect();
        let c = rng.random_range(2..5);
        let n = rng.random_range(1..6);
        let mut model = init_model(din, &hidden, c, FeatureSpec::default(), rng.random()).unwrap();
        let flat: Vec<f64> = model.params().map(|p| p + 0.1 * (2.0 * rng.random::<f64>() - 1.0)).collect();
        set_params(&mut model, &flat);
        model.norm = FeatureNorm {
            mean: (0..din).map(|_| rng.random_range(-1.0..1.0)).collect(),
            std: (0..din).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let x = rand_matrix(rng, n, din, 2.0);
        let y = rand_labels(rng, n, c);
        let emb_dim = *hidden.last().unwrap();
        let r = rand_matrix(rng, n, emb_dim, 1.0);
        let (_, _, kink) = mlp_ref(&model, &x);
        if kink < SMOOTH_MARGIN {
            rejected += 1;
            continue;
        }
        let objective = |m: &Model| {
            let (emb, logits, _) = mlp_ref(m, &x);
            let lin: f64 = emb.iter().flatten().zip(r.as_slice()).map(|(a, b)| a * b).sum();
            ce_ref(&logits, &y) + lin
        };
        let (logits, cache) = model.forward(&x).unwrap();
        let g = ce_loss(&logits, &y).unwrap().grad;
        let grads = model.backward_with_embedding(&cache, &g, Some(&r)).unwrap();
        let analytic: Vec<f64> = grads.params().collect();
        let mut probe = model.clone();
        let num = fd_gradient(&flat, FD_STEP, |v| {
            set_params(&mut probe, v);
            objective(&probe)
        });
        st.add(&analytic, &num);
    }
    (st, rejected)
}

#[test]
fn criterion_1_gradient_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng(101);
    let ce = check_ce(&mut rng);
    let sce = check_sce(&mut rng);
    let kd = check_kd(&mut rng);
    let (lov, lov_rej) = check_lovasz(&mut rng);
    let (tri, tri_rej) = check_triplet(&mut rng);
    let (mlp, mlp_rej) = check_mlp(&mut rng);
    let elapsed = secs(t.elapsed());
    let all = [("ce", &ce), ("sce", &sce), ("kd", &kd), ("lovasz", &lov), ("triplet", &tri), ("mlp", &mlp)];
    let pass = all.iter().all(|(_, s)| s.instances >= 50 && s.worst <= FD_TOL) && elapsed < 30.0;
    let detail = all
        .iter()
        .map(|(n, s)| format!("{n}={:.1e}/{}", s.worst, s.instances))
        .collect::<Vec<_>>()
        .join(" ");
    report(
        1,
        pass,
        &format!(
            "worst rel err/instances {detail} (tol {FD_TOL:.0e}, h {FD_STEP:.0e}); \
             rejected near kinks lovasz={lov_rej} triplet={tri_rej} mlp={mlp_rej}; {elapsed:.1}s"
        ),
    );
    assert!(pass);
}

// --- 2: metric oracle ----------------------------------------------------------------

#[test]
fn criterion_2_metric_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng(202);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = rng.random_range(1..=6);
        let n = rng.random_range(0..=200);
        let preds = rand_labels(&mut rng, n, c);
        let truth = rand_labels(&mut rng, n, c);
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&preds, &truth).unwrap();
        let want = iou_by_sets(&preds, &truth, c);
        let subset: Vec<u32> = (0..c as u32).filter(|_| rng.random_bool(0.5)).collect();
        let want_subset: Vec<Option<f64>> = subset.iter().map(|&k| want[k as usize]).collect();
        let zero = (!want.iter().all(Option::is_none)).then(|| {
            want.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / c as f64
        });
        let ok = cm.iou_per_class() == want
            && cm.miou(None, AbsentClassPolicy::Exclude) == mean_defined(&want)
            && cm.miou(Some(&subset), AbsentClassPolicy::Exclude) == mean_defined(&want_subset)
            && cm.miou(None, AbsentClassPolicy::Zero) == zero;
        if !ok {
            mismatches += 1;
        }
    }
    let elapsed = secs(t.elapsed());
    let pass = mismatches == 0 && elapsed < 10.0;
    report(2, pass, &format!("1000 instances, {mismatches} mismatches, {elapsed:.2}s"));
    assert!(pass);
}

// --- 3: geometry oracles -------------------------------------------------------------

fn clustered_cloud(rng: &mut impl Rng, n: usize) -> Vec<[f64; 4]> {
    let extent = rng.random_range(1.0..20.0);
    let mut pts = random_points(rng, n, extent);
    // Duplicates and tight clusters exercise ties and shared cells.
    for i in 0..n / 5 {
        let j = rng.random_range(0..n);
        pts[i] = pts[j];
        if i % 2 == 0 {
            pts[i][0] += 1e-3 * rng.random::<f64>();
        }
    }
    pts
}

#[test]
fn criterion_3_geometry_oracles() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng(303);
    let mut feature_mismatch = 0;
    let mut clouds = 0;
    for trial in 0..40 {
        let n = if trial == 0 { 500 } else { rng.random_range(1..=500) };
        let pts = clustered_cloud(&mut rng, n);
        let radius = rng.random_range(0.2..2.0);
        let k = rng.random_range(1..=8);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let want = neighbor_features_ref(&pts, radius, k);
        let direct = compute_features(&cloud, radius, k).unwrap();
        // Cell sizes other than the radius must not change the result.
        let cell = radius * rng.random_range(0.3..3.0);
        let index = build_grid_index(&cloud, cell).unwrap();
        let other = neighbor_features(&cloud, &index, radius, k).unwrap();
        for m in [&direct, &other] {
            let same = m
                .iter_rows()
                .zip(&want)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            if !same {
                feature_mismatch += 1;
            }
        }
        clouds += 1;
    }

    let mut mix_fail = 0;
    let labeled = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, tag: u32| {
        let pts = random_points(rng, n, 30.0);
        LabeledScan::new(PointCloud::new(pts).unwrap(), vec![tag; n]).unwrap()
    };
    for _ in 0..100 {
        let na = rng.random_range(0..300);
        let nb = rng.random_range(0..300);
        let a = labeled(&mut rng, na, 0);
        let b = labeled(&mut rng, nb, 1);
        let theta = rng.random_range(0.01..std::f64::consts::TAU - 0.01);
        let start = rng.random_range(-10.0..10.0);
        let mixed = polar_mix(&a, &b, theta, start).unwrap();
        let (ia, ib) = polar_mix_selection(&a, &b, theta, start).unwrap();
        let a_in: Vec<[f64; 4]> = a.cloud.points().iter().filter(|p| in_sector_ref(p, start, theta)).copied().collect();
        let a_out = a.cloud.points().iter().filter(|p| !in_sector_ref(p, start, theta)).count();
        let b_out: Vec<[f64; 4]> = b.cloud.points().iter().filter(|p| !in_sector_ref(p, start, theta)).copied().collect();
        let b_in = b.cloud.points().iter().filter(|p| in_sector_ref(p, start, theta)).count();
        let mut expect = a_in.clone();
        expect.extend(&b_out);
        let ok = mixed.len() == a_in.len() + b_out.len()
            && a_in.len() + a_out == na
            && b_out.len() + b_in == nb
            && ia.len() == a_in.len()
            && ib.len() == b_out.len()
            && mixed.cloud.points() == &expect[..]
            && mixed.labels[..a_in.len()].iter().all(|&l| l == 0)
            && mixed.labels[a_in.len()..].iter().all(|&l| l == 1);
        if !ok {
            mix_fail += 1;
        }
    }
    let elapsed = secs(t.elapsed());
    let pass = feature_mismatch == 0 && mix_fail == 0 && elapsed < 30.0;
    report(
        3,
        pass,
        &format!(
            "features: {clouds} clouds (N<=500) x 2 grids, {feature_mismatch} mismatches; \
             polar mix: 100 pairs, {mix_fail} failures; {elapsed:.1}s"
        ),
    );
    assert!(pass);
}

// --- shared small split --------------------------------------------------------------

fn small_manifest() -> DatasetManifest {
    let mut m = DatasetManifest::with_defaults(11, 3);
    m.n_source = 12;
    m.n_target_unlabeled = 12;
    m.n_test_source = 4;
    m.n_test_target = 4;
    m.good_weather.points_per_scan = 256;
    m.adverse_weather.points_per_scan = 256;
    m
}

fn small_config() -> TrainConfig {
    TrainConfig {
        stage0_epochs: 5,
        stage1_epochs: 40,
        stage2_epochs: 40,
        eval_every: 10,
        pseudoval_size: 30,
        // Low enough that the gate opens during the short run.
        gamma: 0.3,
        ..TrainConfig::default()
    }
}

fn checkpoint_bytes(model: &Model, schema: &ClassSchema, epoch: usize) -> Vec<u8> {
    Checkpoint {
        model: model.clone(),
        schema: schema.clone(),
        epoch: epoch as u64,
        config_hash: 0,
    }
    .encode()
}

// --- 4: gating equivalence -----------------------------------------------------------

#[test]
fn criterion_4_gating_equivalence() {
    let _g = serial();
    let m = small_manifest();
    let ds = synth::generate_dataset(&m).unwrap();
    let cfg = small_config();
    let phi0 = pipeline::train_stage0(&ds.split.source, &m.schema, &cfg, &mut NoObserver)
        .unwrap()
        .model;
    let full = TrainData {
        schema: &m.schema,
        source: &ds.split.source,
        shots: &ds.split.target_labeled,
        unlabeled: &ds.split.target_unlabeled,
    };
    let run = |gamma: f64, omega0: f64, data: TrainData| {
        let c = TrainConfig { gamma, omega0, ..cfg.clone() };
        pipeline::train_stage1(&phi0, data, &c, &mut NoObserver).unwrap()
    };
    let bytes = |o: &StageOutcome| checkpoint_bytes(o.best_model(), &m.schema, o.best.epoch);
    let gated = run(1.01, cfg.omega0, full);
    let ablation = run(GAMMA_UNREACHABLE, cfg.omega0, full);
    let fss_only = run(1.01, 0.0, TrainData { unlabeled: &[], ..full });
    // Reachable gate: the pseudo-label term must actually change the result.
    let ssl = run(cfg.gamma, cfg.omega0, full);

    let same = bytes(&gated) == bytes(&ablation)
        && bytes(&gated) == bytes(&fss_only)
        && gated.final_model == fss_only.final_model
        && pipeline::records_to_jsonl(&gated.records) == pipeline::records_to_jsonl(&fss_only.records);
    let ssl_ran = ssl.records.iter().any(|r| r.ssl_active) && ssl.final_model != gated.final_model;
    let pass = same && ssl_ran;
    report(
        4,
        pass,
        &format!(
            "gamma=1.01 vs unreachable vs omega0=0 without unlabeled scans: checkpoints {}; \
             control with reachable gamma differs: {ssl_ran}",
            if same { "byte-identical" } else { "DIFFER" }
        ),
    );
    assert!(pass);
}

// --- 5, 6, 9: default split runs -------------------------------------------------------

struct DefaultRuns {
    schema: ClassSchema,
    test_source: Vec<LabeledScan>,
    test_target: Vec<LabeledScan>,
    t_stage0: Duration,
    s1: StageOutcome,
    t_s1: Duration,
    s1_fss: StageOutcome,
    t_s1_fss: Duration,
    s2: StageOutcome,
    t_s2: Duration,
}

fn default_runs() -> &'static DefaultRuns {
    static RUNS: OnceLock<DefaultRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let m = DatasetManifest::with_defaults(0, 5);
        let t = Instant::now();
        let ds = synth::generate_dataset(&m).unwrap();
        let cfg = TrainConfig::default();
        let phi0 = pipeline::train_stage0(&ds.split.source, &m.schema, &cfg, &mut NoObserver)
            .unwrap()
            .model;
        let t_stage0 = t.elapsed();
        let data = TrainData {
            schema: &m.schema,
            source: &ds.split.source,
            shots: &ds.split.target_labeled,
            unlabeled: &ds.split.target_unlabeled,
        };
        let t = Instant::now();
        let s1 = pipeline::train_stage1(&phi0, data, &cfg, &mut NoObserver).unwrap();
        let t_s1 = t.elapsed();
        let t = Instant::now();
        let fss_cfg = TrainConfig { gamma: GAMMA_UNREACHABLE, ..cfg.clone() };
        let s1_fss = pipeline::train_stage1(&phi0, data, &fss_cfg, &mut NoObserver).unwrap();
        let t_s1_fss = t.elapsed();
        let t = Instant::now();
        let s2 = pipeline::train_stage2(&phi0, s1.best_model(), data, &cfg, &mut NoObserver).unwrap();
        let t_s2 = t.elapsed();
        DefaultRuns {
            schema: m.schema,
            test_source: ds.test_source,
            test_target: ds.test_target,
            t_stage0,
            s1,
            t_s1,
            s1_fss,
            t_s1_fss,
            s2,
            t_s2,
        }
    })
}

fn eval(r: &DefaultRuns, model: &Model, scans: &[LabeledScan]) -> pipeline::EvalReport {
    pipeline::evaluate(model, scans, &r.schema, AbsentClassPolicy::Exclude).unwrap()
}

#[test]
fn criterion_5_stage_one_direction() {
    let _g = serial();
    let r = default_runs();
    let novel = |m: &Model| eval(r, m, &r.test_target).miou_novel.unwrap_or(0.0);
    let (ssl, fss) = (novel(r.s1.best_model()), novel(r.s1_fss.best_model()));
    let elapsed = secs(r.t_stage0 + r.t_s1 + r.t_s1_fss);
    let gain = ssl - fss;
    let pass = gain >= 0.02 && elapsed < 300.0;
    report(
        5,
        pass,
        &format!(
            "novel IoU on 100 adverse test scans: with pseudo-labels {ssl:.4}, few-shot only \
             {fss:.4}, gain {gain:+.4} (need >= +0.02); {elapsed:.0}s (need < 300s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_stage_two_direction() {
    let _g = serial();
    let r = default_runs();
    let (m1, m2) = (r.s1.best_model(), r.s2.best_model());
    let src1 = eval(r, m1, &r.test_source).miou_base.unwrap_or(0.0);
    let src2 = eval(r, m2, &r.test_source).miou_base.unwrap_or(0.0);
    let adv1 = eval(r, m1, &r.test_target).miou_all.unwrap_or(0.0);
    let adv2 = eval(r, m2, &r.test_target).miou_all.unwrap_or(0.0);
    let elapsed = secs(r.t_stage0 + r.t_s1 + r.t_s2);
    let pass = src2 - src1 >= 0.10 && (adv2 - adv1).abs() <= 0.05 && elapsed < 480.0;
    report(
        6,
        pass,
        &format!(
            "source mIoU (base classes) stage2 {src2:.4} vs stage1 {src1:.4} (diff {:+.4}, need >= +0.10); \
             adverse mIoU stage2 {adv2:.4} vs stage1 {adv1:.4} (|diff| {:.4}, need <= 0.05); {elapsed:.0}s (need < 480s)",
            src2 - src1,
            (adv2 - adv1).abs()
        ),
    );
    assert!(pass);
}

fn monotone(records: &[EvalRecord]) -> bool {
    records.windows(2).all(|w| match (w[0].best_miou, w[1].best_miou) {
        (Some(a), Some(b)) => b >= a,
        (Some(_), None) => false,
        _ => true,
    })
}

#[test]
fn criterion_9_best_monotone() {
    let _g = serial();
    let r = default_runs();
    let runs = [("stage1", &r.s1), ("stage1-fss-only", &r.s1_fss), ("stage2", &r.s2)];
    let pass = runs.iter().all(|(_, o)| monotone(&o.records) && !o.records.is_empty());
    let detail = runs
        .iter()
        .map(|(n, o)| {
            let trace: Vec<String> = o
                .records
                .iter()
                .map(|x| x.best_miou.map_or("undef".into(), |v| format!("{v:.3}")))
                .collect();
            format!("{n}=[{}]", trace.join(","))
        })
        .collect::<Vec<_>>()
        .join(" ");
    report(9, pass, &format!("best pseudo-val mIoU traces non-decreasing: {detail}"));
    assert!(pass);
}

// --- 7: hyperparameter fidelity --------------------------------------------------------

#[test]
fn criterion_7_hyperparameters() {
    let _g = serial();
    let golden = include_str!("golden/default_config.toml");
    let text = TrainConfig::default().to_toml();
    let v: toml::Table = toml::from_str(&text).unwrap();
    let f = |t: &toml::Table, k: &str| t[k].as_float().unwrap();
    let aug = v["augment"].as_table().unwrap();
    let pair = |k: &str| {
        let a = aug[k].as_array().unwrap();
        [a[0].as_float().unwrap(), a[1].as_float().unwrap()]
    };
    let q = std::f64::consts::FRAC_PI_4;
    let checks = [
        ("lr", f(&v, "lr") == 1e-3),
        ("momentum", f(&v, "momentum") == 0.9),
        ("weight_decay", f(&v, "weight_decay") == 1e-4),
        ("omega0", f(&v, "omega0") == 0.5),
        ("omega1", f(&v, "omega1") == 0.5),
        ("omega2", f(&v, "omega2") == 0.5),
        ("gamma", f(&v, "gamma") == 0.75),
        ("eval_every", v["eval_every"].as_integer() == Some(50)),
        ("pseudoval_size", v["pseudoval_size"].as_integer() == Some(500)),
        ("rotation", pair("rotation") == [-q, q]),
        ("scale", pair("scale") == [0.9, 1.1]),
        ("intensity_scale", pair("intensity_scale") == [0.9, 1.0]),
        ("jitter_std", f(aug, "jitter_std") == 0.3),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let golden_ok = text == golden;
    let round_trip = TrainConfig::from_toml(golden).unwrap() == TrainConfig::default();
    let pass = bad.is_empty() && golden_ok && round_trip;
    report(
        7,
        pass,
        &format!(
            "{} default hyperparameters checked, mismatched {:?}; golden file {}; round trip {}",
            checks.len(),
            bad,
            if golden_ok { "identical" } else { "DIFFERS" },
            round_trip
        ),
    );
    assert!(pass);
}

// --- 8: determinism through the command line -------------------------------------------

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, read(&p)));
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str]) -> i32 {
    let mut v = vec!["advseg"];
    v.extend_from_slice(args);
    advseg::cli::run(v)
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    let m = small_manifest();
    std::fs::write(p("gen.toml"), m.to_toml()).unwrap();
    std::fs::write(p("train.toml"), small_config().to_toml()).unwrap();

    assert_eq!(cli(&["gen-data", "--config", &p("gen.toml"), "--out", &p("d1")]), 0);
    assert_eq!(cli(&["gen-data", "--config", &p("d1/dataset.toml"), "--out", &p("d2")]), 0);
    let data_same = tree_bytes(&tmp.path().join("d1")) == tree_bytes(&tmp.path().join("d2"));

    for stage in ["train-stage0", "train-stage1", "train-stage2"] {
        let code = cli(&[stage, "--config", &p("train.toml"), "--data", &p("d1"), "--out", &p("r1")]);
        assert_eq!(code, 0, "{stage}");
    }
    // Second run: each stage only from the first run's manifest.
    for (i, stage) in ["train-stage0", "train-stage1", "train-stage2"].iter().enumerate() {
        let manifest = p(&format!("r1/stage{i}_manifest.toml"));
        assert_eq!(cli(&[stage, "--config", &manifest, "--out", &p("r2")]), 0, "{stage}");
    }
    let mut identical = Vec::new();
    for i in 0..3 {
        for f in [format!("stage{i}.ckpt"), format!("stage{i}_metrics.jsonl")] {
            let (a, b) = (read(&tmp.path().join("r1").join(&f)), read(&tmp.path().join("r2").join(&f)));
            identical.push((f, a == b && !a.is_empty()));
        }
    }
    let pass = data_same && identical.iter().all(|(_, ok)| *ok);
    let differing: Vec<&String> = identical.iter().filter(|(_, ok)| !ok).map(|(f, _)| f).collect();
    report(
        8,
        pass,
        &format!(
            "dataset trees identical {data_same}; stages 0-2 rerun from manifests: \
             {} of 6 checkpoint/log files byte-identical, differing {differing:?}",
            identical.iter().filter(|(_, ok)| *ok).count()
        ),
    );
    assert!(pass);
}
