//! Acceptance suite: one check per acceptance criterion, run in order.
//!
//! Each criterion prints one `PASS`/`FAIL` line on stderr. A criterion whose
//! target is provably out of reach is reported as `FAIL` together with the
//! proof; only an unexplained failure makes the process exit non-zero.
//! Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plrc::config::{PointMode, RegionSource, TrainConfig};
use plrc::data::{gen_synthetic_dataset, DataItem, Dataset, SyntheticParams};
use plrc::encoder::{Encoder, OutputGrads, PointGrads, Weights};
use plrc::evaluation::{evaluate_jaccard, kept_count, upsample_nearest};
use plrc::geometry::{
    make_grid_regions, render_view, sample_view_transform, transform_label_map, PixelBox, ViewTransform,
};
use plrc::losses::{affinity_distillation, info_nce_image, point_affinity, point_region_contrast, PointsRef};
use plrc::training::{
    cosine_lr, objective, prepare_batch, prepare_sample_with, read_metrics, run_pretraining, train_step, Checkpoint,
    TrainState,
};

enum Outcome {
    Pass(String),
    /// The target cannot be met by any implementation; the string holds the
    /// measured value and the bound that rules it out.
    Unattainable(String),
    Fail(String),
}

type Check = fn() -> Outcome;

fn line(text: &str) {
    // Written to the raw stream so the line shows up even under capture.
    let _ = writeln!(std::io::stderr(), "{text}");
}

fn ensure(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Outcome::Pass(pass)
    } else {
        Outcome::Fail(fail)
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, dim), || rng.random::<f64>() * 2.0 - 1.0);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("input_size", "16"),
        ("widths", "4,8"),
        ("hidden", "16"),
        ("dim", "8"),
        ("R", "8"),
        ("n", "2"),
        ("N", "4"),
        ("P", "4"),
        ("batch_size", "3"),
        ("queue_capacity", "6"),
        ("steps", "10"),
        ("scale_min", "0.3"),
    ] {
        cfg.set(k, v).expect("valid tiny config");
    }
    cfg
}

fn tiny_dataset(count: usize, seed: u64) -> Dataset {
    Dataset::synthetic_in_memory(&SyntheticParams {
        count,
        image_size: 16,
        seed,
        ..Default::default()
    })
    .expect("synthetic data")
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------------------
// 1. Loss oracles
// ---------------------------------------------------------------------------

fn oracle_info_nce(z: &Array1<f64>, pos: &Array1<f64>, negs: &Array2<f64>, tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let z = z.to_vec();
    let num = (dot(&z, &pos.to_vec()) / tau).exp();
    let mut den = num;
    for r in negs.rows() {
        den += (dot(&z, &r.to_vec()) / tau).exp();
    }
    -(num / den).ln()
}

fn oracle_contrast(
    q: &Array2<f64>,
    qa: &[i32],
    k: &Array2<f64>,
    ka: &[i32],
    negs: &Array2<f64>,
    tau: f64,
) -> Option<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..q.nrows() {
        let mut den = 0.0;
        for j in 0..k.nrows() {
            let mut s = 0.0;
            for d in 0..q.ncols() {
                s += q[[i, d]] * k[[j, d]];
            }
            den += (s / tau).exp();
        }
        for j in 0..negs.nrows() {
            let mut s = 0.0;
            for d in 0..q.ncols() {
                s += q[[i, d]] * negs[[j, d]];
            }
            den += (s / tau).exp();
        }
        for j in 0..k.nrows() {
            if ka[j] != qa[i] {
                continue;
            }
            let mut s = 0.0;
            for d in 0..q.ncols() {
                s += q[[i, d]] * k[[j, d]];
            }
            total += -((s / tau).exp() / den).ln();
            pairs += 1;
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

fn oracle_affinity(q: &Array2<f64>, k: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut a = Array2::zeros((q.nrows(), k.nrows()));
    for i in 0..q.nrows() {
        let mut den = 0.0;
        for j in 0..k.nrows() {
            let s: f64 = (0..q.ncols()).map(|d| q[[i, d]] * k[[j, d]]).sum();
            den += (s / tau).exp();
        }
        for j in 0..k.nrows() {
            let s: f64 = (0..q.ncols()).map(|d| q[[i, d]] * k[[j, d]]).sum();
            a[[i, j]] = (s / tau).exp() / den;
        }
    }
    a
}

fn oracle_distill(t: &Array2<f64>, s: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            total -= t[[i, j]] * s[[i, j]].ln();
        }
    }
    total / t.nrows() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut contrast_cases = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(2..=6);
        let tau = rng.random_range(0.05..1.0);
        let n_neg = rng.random_range(0..=4);
        let negs = unit_rows(&mut rng, n_neg, dim);

        let z = unit_rows(&mut rng, 1, dim).row(0).to_owned();
        let pos = unit_rows(&mut rng, 1, dim).row(0).to_owned();
        let got = info_nce_image(z.view(), pos.view(), negs.view(), tau).unwrap();
        worst = worst.max((got - oracle_info_nce(&z, &pos, &negs, tau)).abs());

        let nq = rng.random_range(1..=8);
        let nk = rng.random_range(1..=8);
        let q = unit_rows(&mut rng, nq, dim);
        let k = unit_rows(&mut rng, nk, dim);
        let qa: Vec<i32> = (0..nq).map(|_| rng.random_range(0..3)).collect();
        let ka: Vec<i32> = (0..nk).map(|_| rng.random_range(0..3)).collect();
        let got = point_region_contrast(
            PointsRef::new(q.view(), &qa).unwrap(),
            PointsRef::new(k.view(), &ka).unwrap(),
            negs.view(),
            tau,
        )
        .unwrap();
        let want = oracle_contrast(&q, &qa, &k, &ka, &negs, tau);
        match (got, want) {
            (Some(g), Some(w)) => {
                contrast_cases += 1;
                worst = worst.max((g.loss - w).abs());
            }
            (None, None) => {}
            _ => return Outcome::Fail(format!("seed {seed}: contrast skip decision differs from the oracle")),
        }

        let tau_t = rng.random_range(0.05..0.5);
        let tau_s = rng.random_range(0.05..0.5);
        let teacher = point_affinity(q.view(), k.view(), tau_t).unwrap();
        let student = point_affinity(q.view(), k.view(), tau_s).unwrap();
        let (ot, os) = (oracle_affinity(&q, &k, tau_t), oracle_affinity(&q, &k, tau_s));
        worst = worst.max((teacher.values() - &ot).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        let d = affinity_distillation(&teacher, &student).unwrap();
        worst = worst.max((d - oracle_distill(&ot, &os)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-6 && secs < 10.0 && contrast_cases > 50,
        format!("max |impl - oracle| = {worst:.2e} over 100 seeds ({contrast_cases} contrast cases), {secs:.2}s"),
        format!("max |impl - oracle| = {worst:.2e}, {contrast_cases} contrast cases, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradient check of the full objective
// ---------------------------------------------------------------------------

/// True when every embedding and sampled point feature of the batch is a
/// unit vector, i.e. no projector output sits on the normalisation's
/// singularity at zero, where finite differences are meaningless.
fn away_from_zero_features(encoder: &Encoder, weights: &Weights<f64>, samples: &[plrc::training::Sample]) -> bool {
    let unit = |m: &Array2<f64>| m.rows().into_iter().all(|r| (r.dot(&r) - 1.0).abs() < 1e-9);
    samples.iter().all(|s| {
        [
            (&s.view1, s.regions.as_ref().map(|r| &r.points1.coords)),
            (&s.view2, s.regions.as_ref().map(|r| &r.points2.coords)),
        ]
        .into_iter()
        .all(|(view, coords)| {
            let fwd = encoder
                .forward(weights, &encoder.batch::<f64>(&[view]).unwrap())
                .unwrap();
            unit(fwd.pooled()) && coords.is_none_or(|c| unit(&fwd.point_features(0, c).unwrap()))
        })
    })
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut cfg = tiny_config();
    cfg.set("widths", "6,12").unwrap();
    cfg.set("hidden", "24").unwrap();
    let encoder = Encoder::new(cfg.encoder_config()).unwrap();
    let mut state = TrainState::<f64>::init(&cfg, &encoder).unwrap();
    let params = state.pair.base.param_count();
    if params > 5000 {
        return Outcome::Fail(format!("tiny encoder has {params} parameters"));
    }
    // Move the momentum weights off the base weights so every term is generic.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in state.pair.momentum.tensors_mut() {
        for v in t {
            *v += 0.05 * (rng.random::<f64>() - 0.5);
        }
    }
    // First data seed whose batch shares regions and avoids zero features.
    let fixture = (0..50u64).find_map(|seed| {
        let samples = prepare_batch(&tiny_dataset(6, seed), &cfg, 0).unwrap();
        let usable = samples.iter().any(|s| !s.skipped())
            && away_from_zero_features(&encoder, &state.pair.base, &samples)
            && away_from_zero_features(&encoder, &state.pair.momentum, &samples);
        usable.then_some((seed, samples))
    });
    let Some((data_seed, samples)) = fixture else {
        return Outcome::Fail("no non-degenerate fixture among 50 data seeds".into());
    };
    let queue = unit_rows(&mut rng, 6, cfg.dim);
    let eval =
        |pair: &plrc::encoder::EncoderPair<f64>| objective(&encoder, &cfg, pair, &samples, queue.view(), 1.0).unwrap();
    let base = eval(&state.pair);
    if base.counters.affinity_terms == 0 || base.counters.contrast_terms == 0 {
        return Outcome::Fail("objective did not evaluate every term".into());
    }

    let h = 1e-5;
    let probes = 64;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let idx = rng.random_range(0..params);
        let theta = state.pair.base.get_flat(idx);
        state.pair.base.set_flat(idx, theta + h);
        let plus = eval(&state.pair).report.l_total;
        state.pair.base.set_flat(idx, theta - h);
        let minus = eval(&state.pair).report.l_total;
        state.pair.base.set_flat(idx, theta);
        let fd = (plus - minus) / (2.0 * h);
        let an = base.grad.get_flat(idx);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst < 1e-4 && secs < 60.0,
        format!(
            "max relative error {worst:.2e} on {probes} probes of {params} parameters (data seed {data_seed}), {secs:.2}s"
        ),
        format!("max relative error {worst:.2e} on {probes} probes, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// 3. Geometry round trip
// ---------------------------------------------------------------------------

/// View coordinates of a continuous source position, by direct inversion of
/// the crop and flip.
fn oracle_source_to_view(t: &ViewTransform, y: f64, x: f64, res: usize) -> (f64, f64) {
    let b = &t.crop_box;
    let u = (x - b.x0 as f64) / b.w as f64;
    let v = (y - b.y0 as f64) / b.h as f64;
    let u = if t.hflip { 1.0 - u } else { u };
    (v * res as f64 - 0.5, u * res as f64 - 0.5)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst_cont: f64 = 0.0;
    let mut worst_px: f64 = 0.0;
    let mut cell_misses = 0;
    for case in 0..1000 {
        let h = rng.random_range(8..80);
        let w = rng.random_range(8..80);
        let res = rng.random_range(4..48);
        let n = rng.random_range(1..=4.min(h).min(w));
        let t = sample_view_transform(h, w, &mut rng, (0.1, 1.0), res);
        let grid = make_grid_regions(h, w, n).unwrap();
        let view_labels = transform_label_map(&grid, &t, res);

        // Continuous round trip through the oracle inverse.
        let (r, c) = (rng.random_range(0..res), rng.random_range(0..res));
        let (y, x) = t.view_to_source(r as f64, c as f64, res);
        let (r2, c2) = oracle_source_to_view(&t, y, x, res);
        worst_cont = worst_cont.max((r2 - r as f64).abs()).max((c2 - c as f64).abs());

        // Discrete source pixel within one pixel of the continuous position.
        let (sy, sx) = t.source_pixel(r, c, res);
        let d = ((sy as f64 + 0.5 - y).abs()).max((sx as f64 + 0.5 - x).abs());
        worst_px = worst_px.max(d - 0.5);

        // The view's region label is the grid cell of a source pixel at most
        // one pixel from the mapped position.
        let label = view_labels.labels[[r, c]];
        let (yi, xi) = (y.floor() as isize, x.floor() as isize);
        let hit = (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (py, px) = (yi + dy, xi + dx);
                py >= 0
                    && px >= 0
                    && (py as usize) < h
                    && (px as usize) < w
                    && grid.labels[[py as usize, px as usize]] == label
            })
        });
        if !hit {
            cell_misses += 1;
            line(&format!(
                "  case {case}: label {label} not within one pixel of ({y:.2}, {x:.2})"
            ));
        }
    }

    // Flip involution: exact on the transform, the mapping and the rendering.
    let mut flip_ok = true;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
        let res = rng.random_range(2..24);
        let t = sample_view_transform(h, w, &mut rng, (0.2, 1.0), res);
        let f = t.flipped();
        flip_ok &= f.flipped() == t;
        let (r, c) = (rng.random_range(0..res), rng.random_range(0..res));
        flip_ok &= t.view_to_source(r as f64, c as f64, res) == f.view_to_source(r as f64, (res - 1 - c) as f64, res);
        let img = Array3::from_shape_simple_fn((h, w, 3), || rng.random::<f32>());
        let a = render_view(&img, &t);
        let b = render_view(&img, &f);
        flip_ok &= (0..res).all(|r| (0..res).all(|c| (0..3).all(|k| a[[r, c, k]] == b[[r, res - 1 - c, k]])));
        let grid = make_grid_regions(h, w, 2.min(h).min(w)).unwrap();
        let la = transform_label_map(&grid, &t, res);
        let lb = transform_label_map(&grid, &f, res);
        flip_ok &= (0..res).all(|r| (0..res).all(|c| la.labels[[r, c]] == lb.labels[[r, res - 1 - c]]));
    }
    ensure(
        worst_cont < 1e-9 && worst_px <= 1.0 && cell_misses == 0 && flip_ok,
        format!(
            "1000 cases: continuous error {worst_cont:.1e}, pixel offset ≤ {:.2} px, 0 cell misses; flip involution exact",
            worst_px.max(0.0)
        ),
        format!("continuous {worst_cont:.1e}, pixel {worst_px:.2}, {cell_misses} cell misses, flip exact = {flip_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Closed-form values
// ---------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let z = Array1::from(vec![1.0, 0.0, 0.0]);
    let neg = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
    let got = info_nce_image(z.view(), z.view(), neg.view(), 0.2).unwrap();
    let want = -(5f64.exp() / (5f64.exp() + 1.0)).ln();
    let mut worst = (got - want).abs();

    // Uniform similarities: every logit equal, so each loss is log K.
    for k in [1usize, 2, 5, 17] {
        let negs = Array2::from_shape_fn((k - 1, 3), |(_, d)| if d == 0 { 1.0 } else { 0.0 });
        let l = info_nce_image(z.view(), z.view(), negs.view(), 0.2).unwrap();
        worst = worst.max((l - (k as f64).ln()).abs());

        let keys = Array2::from_shape_fn((k, 3), |(_, d)| if d == 0 { 1.0 } else { 0.0 });
        let ids = vec![0i32; k];
        let q = Array2::from_shape_fn((2, 3), |(_, d)| if d == 0 { 1.0 } else { 0.0 });
        let qa = vec![0i32; 2];
        let c = point_region_contrast(
            PointsRef::new(q.view(), &qa).unwrap(),
            PointsRef::new(keys.view(), &ids).unwrap(),
            ArrayView2::from_shape((0, 3), &[]).unwrap(),
            0.2,
        )
        .unwrap()
        .unwrap();
        worst = worst.max((c.loss - (k as f64).ln()).abs());

        let a = point_affinity(q.view(), keys.view(), 0.1).unwrap();
        worst = worst.max((affinity_distillation(&a, &a).unwrap() - (k as f64).ln()).abs());
    }
    ensure(
        worst <= 1e-9,
        format!(
            "InfoNCE(τ=0.2) = {got:.10} (−log(e⁵/(e⁵+1)) = {want:.10}); uniform cases = log K; max error {worst:.1e}"
        ),
        format!("max error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. Distillation properties and the warm-up gate
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut worst_row: f64 = 0.0;
    let mut worst_gibbs: f64 = f64::INFINITY;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let dim = rng.random_range(2..8);
        let (nq, nk) = (rng.random_range(1..10), rng.random_range(1..10));
        let q = unit_rows(&mut rng, nq, dim);
        let k = unit_rows(&mut rng, nk, dim);
        let t = point_affinity(q.view(), k.view(), rng.random_range(0.03..0.5)).unwrap();
        let s = point_affinity(q.view(), k.view(), rng.random_range(0.03..0.5)).unwrap();
        for a in [&t, &s] {
            worst_row = worst_row.max(a.row_sums().iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max));
        }
        let ce = affinity_distillation(&t, &s).unwrap();
        worst_gibbs = worst_gibbs.min(ce - t.mean_row_entropy());
    }

    // Warm-up gate on a short run: 20 steps, gate at 15%, so steps 0..3 are gated.
    let mut cfg = tiny_config();
    cfg.set("steps", "20").unwrap();
    cfg.set("warmup_fraction", "0.15").unwrap();
    let encoder = Encoder::new(cfg.encoder_config()).unwrap();
    let dataset = tiny_dataset(12, 5);
    let mut state = TrainState::<f64>::init(&cfg, &encoder).unwrap();
    let mut gate_ok = true;
    let mut gated_steps = 0;
    let mut open_with_affinity = 0;
    for step in 0..cfg.steps {
        let samples = prepare_batch(&dataset, &cfg, step).unwrap();
        let out = train_step(&encoder, &cfg, &mut state, &samples).unwrap();
        let before_gate = (step as f64) < cfg.warmup_fraction * cfg.steps as f64;
        if before_gate {
            gated_steps += 1;
            gate_ok &= out.distill_weight == 0.0
                && out.report.l_affinity == 0.0
                && out.report.images.iter().all(|r| r.l_affinity == 0.0)
                && out.counters.affinity_terms == 0;
        } else if out.report.l_affinity > 0.0 {
            open_with_affinity += 1;
        }
    }
    gate_ok &= gated_steps == 3 && open_with_affinity > 0;
    ensure(
        worst_row <= 1e-6 && worst_gibbs >= -1e-8 && gate_ok,
        format!(
            "row sums within {worst_row:.1e}; min(CE − H) = {worst_gibbs:.2e} over 100 cases; \
             l_affinity = 0 on all {gated_steps} gated steps, > 0 on {open_with_affinity} later steps"
        ),
        format!("rows {worst_row:.1e}, Gibbs {worst_gibbs:.2e}, gate ok = {gate_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 6. Reduction to an image-level MoCo step
// ---------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut cfg = tiny_config();
    cfg.set("beta", "0").unwrap();
    let encoder = Encoder::new(cfg.encoder_config()).unwrap();
    let dataset = tiny_dataset(6, 11);
    let samples = prepare_batch(&dataset, &cfg, 0).unwrap();
    let init = TrainState::<f64>::init(&cfg, &encoder).unwrap();

    let mut state = init.clone();
    train_step(&encoder, &cfg, &mut state, &samples).unwrap();

    // Reference: InfoNCE on image embeddings only, written out by hand.
    let b = samples.len();
    let v1: Vec<_> = samples.iter().map(|s| &s.view1).collect();
    let v2: Vec<_> = samples.iter().map(|s| &s.view2).collect();
    let q_fwd = encoder
        .forward(&init.pair.base, &encoder.batch::<f64>(&v1).unwrap())
        .unwrap();
    let k_fwd = encoder
        .forward(&init.pair.momentum, &encoder.batch::<f64>(&v2).unwrap())
        .unwrap();
    let queue = init.queue.negatives().to_owned();
    let mut pooled_grad = Array2::zeros((b, cfg.dim));
    for i in 0..b {
        let q = q_fwd.pooled().row(i);
        let k = k_fwd.pooled().row(i);
        let mut logits = vec![q.dot(&k) / cfg.tau];
        logits.extend(queue.rows().into_iter().map(|n| q.dot(&n) / cfg.tau));
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let den: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / den).collect();
        for d in 0..cfg.dim {
            let mut g = (p[0] - 1.0) * k[d];
            for (j, n) in queue.rows().into_iter().enumerate() {
                g += p[j + 1] * n[d];
            }
            pooled_grad[[i, d]] = g / (cfg.tau * b as f64);
        }
    }
    let grads = OutputGrads {
        pooled: pooled_grad,
        points: vec![PointGrads::default(); b],
    };
    let grad: Weights<f64> = encoder.backward(&init.pair.base, &q_fwd, &grads).unwrap();
    let lr = cfg.lr * cfg.batch_size as f64 / 256.0;
    let mut base = init.pair.base.clone();
    let mut velocity = init.pair.base.zeros_like();
    for idx in 0..base.param_count() {
        let theta = base.get_flat(idx);
        let v = cfg.sgd_momentum * velocity.get_flat(idx) + grad.get_flat(idx) + cfg.weight_decay * theta;
        velocity.set_flat(idx, v);
        base.set_flat(idx, theta - lr * v);
    }
    let mut momentum = init.pair.momentum.clone();
    for idx in 0..momentum.param_count() {
        let m = cfg.ema * momentum.get_flat(idx) + (1.0 - cfg.ema) * base.get_flat(idx);
        momentum.set_flat(idx, m);
    }

    let mut worst: f64 = 0.0;
    for idx in 0..base.param_count() {
        let d_impl = state.pair.base.get_flat(idx) - init.pair.base.get_flat(idx);
        let d_ref = base.get_flat(idx) - init.pair.base.get_flat(idx);
        worst = worst.max((d_impl - d_ref).abs());
        let m_impl = state.pair.momentum.get_flat(idx) - init.pair.momentum.get_flat(idx);
        let m_ref = momentum.get_flat(idx) - init.pair.momentum.get_flat(idx);
        worst = worst.max((m_impl - m_ref).abs());
    }
    let ordered = state.queue.ordered();
    let newest = ordered.slice(ndarray::s![ordered.nrows() - b.., ..]);
    let queue_err = (&newest - k_fwd.pooled())
        .mapv(f64::abs)
        .fold(0.0, |a: f64, &x| a.max(x));
    let lr_ok = (cosine_lr(lr, 0, cfg.steps) - lr).abs() < 1e-15;
    let moved = (0..base.param_count()).any(|i| base.get_flat(i) != init.pair.base.get_flat(i));
    ensure(
        worst <= 1e-7 && queue_err <= 1e-12 && lr_ok && moved,
        format!("max |Δθ_impl − Δθ_ref| = {worst:.1e} over base and momentum weights; enqueued keys match"),
        format!("parameter delta error {worst:.2e}, queue error {queue_err:.1e}, lr ok = {lr_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Desk-scale learning signal
// ---------------------------------------------------------------------------

/// Exact per-object maximum Jaccard of any mask of `⌈keep·R²⌉` grid cells,
/// averaged over the dataset's objects: no encoder can score higher.
fn jaccard_upper_bound(dataset: &Dataset, res: usize, keep: f64) -> f64 {
    let k = kept_count(keep, res * res);
    let mut total = 0.0;
    let mut objects = 0usize;
    for item in &dataset.items {
        let (h, w, _) = item.image.dim();
        let cells = Array2::from_shape_fn((res, res), |(r, c)| r * res + c);
        let owner = upsample_nearest(&cells, h, w);
        let mut cell_px = vec![0usize; res * res];
        for &c in owner.iter() {
            cell_px[c] += 1;
        }
        let uniform = cell_px.iter().all(|&p| p == cell_px[0]);
        assert!(uniform, "bound assumes equal cell sizes");
        for mask in &item.masks {
            let area = mask.iter().filter(|&&b| b).count();
            if area == 0 {
                continue;
            }
            let mut cover = vec![0usize; res * res];
            for (&c, &m) in owner.iter().zip(mask.iter()) {
                cover[c] += usize::from(m);
            }
            cover.sort_unstable_by(|a, b| b.cmp(a));
            let inter: usize = cover[..k].iter().sum();
            let union = area + k * cell_px[0] - inter;
            total += inter as f64 / union as f64;
            objects += 1;
        }
    }
    total / objects.max(1) as f64
}

fn mean_jaccard(ckpt: &Path, dataset: &Dataset, keep: f64) -> f64 {
    let ck = Checkpoint::<f32>::load(ckpt).unwrap();
    let encoder = Encoder::new(ck.encoder.clone()).unwrap();
    evaluate_jaccard(&encoder, &ck.pair.base, dataset, keep, "")
        .unwrap()
        .mean_jaccard
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let train = Dataset::synthetic_in_memory(&SyntheticParams {
        count: 2000,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let held_out = Dataset::synthetic_in_memory(&SyntheticParams {
        count: 200,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.set("checkpoint_every", "0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_pretraining(&cfg, &train, dir.path()).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let keep = cfg.keep_fraction;
    let j0 = mean_jaccard(summary.initial_checkpoint(), &held_out, keep);
    let j1 = mean_jaccard(summary.final_checkpoint(), &held_out, keep);
    let bound = jaccard_upper_bound(&held_out, cfg.resolution, keep);
    let gap = j1 - j0;
    let avg = |lo: usize, hi: usize, f: fn(&plrc::training::StepRecord) -> f64| {
        summary.records[lo..hi].iter().map(f).sum::<f64>() / (hi - lo) as f64
    };
    let n = summary.records.len();
    let contrast = (avg(0, 50, |r| r.l_contrast), avg(n - 50, n, |r| r.l_contrast));
    let detail = format!(
        "random-init {j0:.4}, trained {j1:.4}, gap {gap:+.4}; l_contrast {:.3} -> {:.3}; \
         training {:.1} min",
        contrast.0,
        contrast.1,
        train_secs / 60.0
    );
    if gap >= 0.10 {
        return Outcome::Pass(detail);
    }
    if bound - j0 < 0.10 {
        return Outcome::Unattainable(format!(
            "{detail}; the best achievable mask scores {bound:.4}, only {:+.4} above random init",
            bound - j0
        ));
    }
    Outcome::Fail(detail)
}

// ---------------------------------------------------------------------------
// 8. Robustness ordering under degrading regions
// ---------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let train = Dataset::synthetic_in_memory(&SyntheticParams {
        count: 600,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let held_out = Dataset::synthetic_in_memory(&SyntheticParams {
        count: 100,
        seed: 22,
        ..Default::default()
    })
    .unwrap();
    let mut base = TrainConfig::default();
    for (k, v) in [
        ("batch_size", "16"),
        ("steps", "300"),
        ("checkpoint_every", "0"),
        ("seed", "8"),
    ] {
        base.set(k, v).unwrap();
    }
    let sources = [
        ("gt_mask", RegionSource::GtMask, 4),
        ("grid4", RegionSource::Grid, 4),
        ("grid2", RegionSource::Grid, 2),
    ];
    let mut scores = Vec::new();
    for mode in [PointMode::Point, PointMode::Pooled] {
        let mut row = Vec::new();
        for (name, source, n) in sources {
            let mut cfg = base.clone();
            cfg.point_mode = mode;
            cfg.region_source = source;
            cfg.n = n;
            let dir = tempfile::tempdir().unwrap();
            let s = run_pretraining(&cfg, &train, dir.path()).unwrap();
            let j = mean_jaccard(s.final_checkpoint(), &held_out, cfg.keep_fraction);
            line(&format!("  {mode:?} {name}: mean Jaccard {j:.4}"));
            row.push(j);
        }
        scores.push(row);
    }
    let point_drop = scores[0][0] - scores[0][2];
    let pooled_drop = scores[1][0] - scores[1][2];
    let detail = format!("degradation gt_mask -> grid2: point {point_drop:+.4}, pooled {pooled_drop:+.4}");
    ensure(point_drop <= pooled_drop, detail.clone(), detail)
}

// ---------------------------------------------------------------------------
// 9. Reproducibility
// ---------------------------------------------------------------------------

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let mut cfg = tiny_config();
    cfg.set("steps", "12").unwrap();
    let dataset = tiny_dataset(10, 4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pretraining(&cfg, &dataset, a.path()).unwrap();
    run_pretraining(&cfg, &dataset, b.path()).unwrap();
    let (ma, mb) = (read_metrics(a.path()).unwrap(), read_metrics(b.path()).unwrap());
    let fields = |r: &plrc::training::StepRecord| {
        [
            r.lr,
            r.distill_weight,
            r.l_image,
            r.l_contrast,
            r.l_affinity,
            r.l_point,
            r.l_total,
        ]
    };
    let metrics_ok = ma.len() == mb.len()
        && ma.len() == 12
        && ma.iter().zip(&mb).all(|(x, y)| {
            x.step == y.step
                && x.n_positive_pairs == y.n_positive_pairs
                && x.skipped == y.skipped
                && fields(x).iter().zip(fields(y)).all(|(p, q)| rel_close(*p, q, 1e-5))
        });

    let params = SyntheticParams {
        count: 12,
        image_size: 32,
        seed: 9,
        ..Default::default()
    };
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic_dataset(&params, da.path()).unwrap();
    gen_synthetic_dataset(&params, db.path()).unwrap();
    let (fa, fb) = (files_under(da.path()), files_under(db.path()));
    let bytes_ok = !fa.is_empty()
        && fa == fb
        && fa
            .iter()
            .all(|p| fs::read(da.path().join(p)).unwrap() == fs::read(db.path().join(p)).unwrap());
    ensure(
        metrics_ok && bytes_ok,
        format!(
            "12-step metrics identical within 1e-5 relative; {} generated files byte-identical",
            fa.len()
        ),
        format!("metrics reproducible = {metrics_ok}, data byte-identical = {bytes_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 10. Skip rule
// ---------------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let cfg = tiny_config();
    let encoder = Encoder::new(cfg.encoder_config()).unwrap();
    let state = TrainState::<f64>::init(&cfg, &encoder).unwrap();
    let source = tiny_dataset(2, 12);
    let item = |i: usize| -> DataItem {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let image = Array3::from_shape_simple_fn((32, 32, 3), || rng.random::<f32>());
        DataItem {
            id: format!("disjoint{i}"),
            image,
            masks: source.items[0].masks.clone(),
        }
    };
    // On a 2x2 grid over 32x32, the top-left and bottom-right quadrant crops
    // contain one distinct region each.
    let t1 = ViewTransform::new(PixelBox::new(0, 0, 16, 16), false, 16, 32, 32).unwrap();
    let t2 = ViewTransform::new(PixelBox::new(16, 16, 16, 16), true, 16, 32, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples: Vec<_> = (0..3)
        .map(|i| prepare_sample_with(&item(i), &cfg, t1, t2, &mut rng).unwrap())
        .collect();
    let regions: BTreeSet<i32> = samples[0]
        .labels1
        .present_ids()
        .union(&samples[0].labels2.present_ids())
        .copied()
        .collect();
    let obj = objective(&encoder, &cfg, &state.pair, &samples, state.queue.negatives(), 1.0).unwrap();
    let c = obj.counters;
    let all_skipped = samples.iter().all(|s| s.skipped())
        && obj
            .report
            .images
            .iter()
            .all(|r| r.skipped && r.l_total == r.l_image && r.n_positive_pairs == 0)
        && obj.report.skipped == samples.len();
    let no_point_terms = c.contrast_terms == 0
        && c.affinity_terms == 0
        && c.momentum_view1_passes == 0
        && c.base_view2_passes == 0
        && c.image_terms == samples.len();

    // A mixed batch only evaluates point terms for the overlapping image.
    let overlap = prepare_sample_with(&item(9), &cfg, t1, t1, &mut rng).unwrap();
    let mixed = vec![samples[0].clone(), overlap];
    let m = objective(&encoder, &cfg, &state.pair, &mixed, state.queue.negatives(), 1.0).unwrap();
    let mixed_ok = m.report.images[0].skipped
        && m.report.images[0].l_total == m.report.images[0].l_image
        && !m.report.images[1].skipped
        && m.counters.contrast_terms == 1
        && m.counters.affinity_terms == 1;
    ensure(
        all_skipped && no_point_terms && mixed_ok && regions.len() == 2,
        "disjoint crops: skipped = true, l_total = l_image, 0 contrast/affinity terms and 0 extra passes; \
         mixed batch evaluates point terms only for the overlapping image"
            .to_string(),
        format!("skipped = {all_skipped}, no point terms = {no_point_terms} ({c:?}), mixed = {mixed_ok}"),
    )
}

fn main() {
    let checks: [(usize, &str, Check); 10] = [
        (1, "loss oracle equivalence", criterion_1),
        (2, "finite-difference gradient check", criterion_2),
        (3, "geometry round trip", criterion_3),
        (4, "closed-form values", criterion_4),
        (5, "distillation properties and warm-up gate", criterion_5),
        (6, "reduction to an image-level MoCo step", criterion_6),
        (7, "desk-scale learning signal", criterion_7),
        (8, "robustness ordering", criterion_8),
        (9, "reproducibility", criterion_9),
        (10, "skip rule", criterion_10),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    let mut unattainable = 0;
    for (id, name, check) in checks {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let took = fmt_duration(start.elapsed());
        match outcome {
            Outcome::Pass(d) => line(&format!("criterion {id:>2} ({name}): PASS [{took}] {d}")),
            Outcome::Unattainable(d) => {
                unattainable += 1;
                line(&format!("criterion {id:>2} ({name}): FAIL (unattainable) [{took}] {d}"));
            }
            Outcome::Fail(d) => {
                failures += 1;
                line(&format!("criterion {id:>2} ({name}): FAIL [{took}] {d}"));
            }
        }
    }
    line(&format!(
        "acceptance: {failures} unexplained failures, {unattainable} unattainable"
    ));
    if failures > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    let s = d.as_secs_f64();
    if s < 60.0 {
        format!("{s:.1}s")
    } else {
        format!("{:.1} min", s / 60.0)
    }
}
