//! Acceptance suite: runs every criterion in order, printing one
//! `PASS`/`FAIL` line each, and exits nonzero if any fails. Runs without
//! the libtest harness so timings are not shared with parallel tests.

use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slnet_cli::checkpoint::{self, Checkpoint};
use slnet_cli::pointfile;
use slnet_cli::synth::{synth_generate, SynthSpec};
use slnet_core::backbone::{ModelConfig, Sampling};
use slnet_core::geom::{fps, idw_interpolate, knn, neighborhoods, relative_group, sq_dist, Labels};
use slnet_core::gmu::GmuPlacement;
use slnet_core::nape::{nape_embed, NapeConfig};
use slnet_core::netscore::{
    count_params, estimate_flops, measure_latency, measure_peak_memory, netscore, netscore_plus, BenchConfig,
    EfficiencyRecord,
};
use slnet_core::tensor::gradcheck::{check_store_gradients, GradCheck};
use slnet_core::tensor::{AffineOrder, BnConfig, BnStats};
use slnet_core::train::{fit, OptimConfig, Sample, TrainConfig};
use slnet_core::{Graph, Mode, Model, ParamStore, Plan, Point, PointCloud, Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: slnet_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

/// `(dataset, name, accuracy, params M, FLOPs G, NetScore, [(latency ms,
/// memory MB, NetScore⁺); 2])`, the two runtime triples being the desktop
/// GPU and the embedded board. Latency and memory are the 2048-point
/// columns where the table splits them.
type Row = (&'static str, &'static str, f64, f64, f64, f64, [(f64, f64, f64); 2]);

const MODELNET40: [(&str, f64, f64, f64, f64, [(f64, f64, f64); 2]); 11] = [
    (
        "PointMLP",
        93.66,
        13.24,
        15.67,
        55.69,
        [(4.23, 86.68, 42.87), (65.64, 105.80, 36.48)],
    ),
    (
        "APES (local)",
        93.30,
        4.49,
        7.38,
        63.59,
        [(6.78, 82.69, 49.84), (93.52, 91.82, 43.92)],
    ),
    (
        "APES (global)",
        93.23,
        4.49,
        5.49,
        64.86,
        [(4.89, 82.69, 51.83), (65.97, 91.82, 45.95)],
    ),
    (
        "PointNet++ (msg)",
        92.51,
        1.75,
        4.00,
        70.21,
        [(5.92, 99.87, 56.35), (218.54, 108.99, 48.32)],
    ),
    (
        "DGCNN",
        92.82,
        1.81,
        2.69,
        71.84,
        [(3.90, 78.09, 59.42), (59.87, 87.22, 53.25)],
    ),
    (
        "PointNet++ (ssg)",
        92.31,
        1.48,
        0.86,
        77.59,
        [(2.73, 25.93, 68.34), (181.25, 35.15, 58.57)],
    ),
    (
        "CurveNet",
        93.38,
        2.14,
        0.33,
        80.34,
        [(8.17, 21.33, 69.14), (403.57, 30.45, 59.89)],
    ),
    (
        "PointNet",
        90.04,
        3.47,
        0.45,
        76.27,
        [(0.35, 22.08, 71.86), (5.40, 31.20, 65.13)],
    ),
    (
        "PointMLP (elite)",
        93.28,
        0.72,
        0.91,
        80.64,
        [(1.22, 18.56, 73.87), (25.99, 28.56, 66.29)],
    ),
    (
        "SLNet-S",
        93.64,
        0.14,
        0.31,
        92.42,
        [(0.76, 11.49, 87.71), (18.04, 21.30, 79.50)],
    ),
    (
        "SLNet-M",
        93.92,
        0.55,
        1.22,
        80.66,
        [(1.41, 23.97, 73.01), (30.26, 33.00, 65.67)],
    ),
];

/// ModelNet-R reuses the ModelNet40 costs: `(name, OA, NetScore, NetScore⁺
/// desktop, NetScore⁺ embedded)`.
const MODELNET_R: [(&str, f64, f64, f64, f64); 8] = [
    ("PointMLP", 95.33, 56.00, 43.18, 36.79),
    ("PointNet++ (msg)", 94.06, 70.50, 56.64, 48.61),
    ("DGCNN", 94.03, 72.06, 59.65, 53.47),
    ("PointNet++ (ssg)", 94.02, 77.91, 68.66, 58.89),
    ("CurveNet", 94.12, 80.48, 69.27, 60.03),
    ("PointNet", 91.39, 76.53, 72.12, 65.39),
    ("SLNet-S", 94.53, 92.59, 87.87, 79.66),
    ("SLNet-M", 94.81, 80.83, 73.18, 65.83),
];

const SCANOBJECTNN: [(&str, f64, f64, f64, f64, [(f64, f64, f64); 2]); 7] = [
    (
        "PointMLP",
        85.40,
        13.24,
        15.67,
        54.09,
        [(4.19, 86.68, 41.29), (67.51, 99.80, 34.95)],
    ),
    (
        "DGCNN",
        78.10,
        1.80,
        2.69,
        68.85,
        [(3.90, 78.07, 56.44), (59.87, 87.20, 50.27)],
    ),
    (
        "PointNet++ (ssg)",
        77.90,
        1.47,
        0.86,
        74.66,
        [(2.73, 25.91, 65.42), (180.70, 35.03, 55.66)],
    ),
    (
        "PointNet",
        68.20,
        3.47,
        0.45,
        71.45,
        [(0.35, 22.05, 67.04), (5.31, 31.18, 60.35)],
    ),
    (
        "PointMLP (elite)",
        83.80,
        0.72,
        0.91,
        78.78,
        [(1.20, 18.56, 72.04), (26.23, 27.68, 64.48)],
    ),
    (
        "SLNet-S",
        83.45,
        0.12,
        0.26,
        91.76,
        [(0.66, 8.75, 87.96), (16.79, 17.87, 79.38)],
    ),
    (
        "SLNet-M",
        84.25,
        0.48,
        1.02,
        80.12,
        [(1.24, 18.28, 73.34), (27.57, 27.37, 65.73)],
    ),
];

/// Instance IoU with 2048-point FLOPs, latency and memory.
const SHAPENETPART: [(&str, f64, f64, f64, f64, [(f64, f64, f64); 2]); 9] = [
    (
        "APES (global)",
        85.80,
        1.98,
        15.57,
        62.45,
        [(7.47, 140.38, 47.35), (101.55, 148.51, 41.56)],
    ),
    (
        "APES (local)",
        85.60,
        1.98,
        18.37,
        61.69,
        [(9.38, 140.38, 46.09), (128.43, 148.51, 40.29)],
    ),
    (
        "CurveNet",
        86.60,
        5.53,
        2.56,
        65.98,
        [(10.32, 97.90, 50.96), (280.34, 106.03, 43.62)],
    ),
    (
        "DGCNN",
        85.20,
        1.46,
        4.96,
        68.62,
        [(5.29, 149.14, 54.13), (64.81, 158.27, 48.56)],
    ),
    (
        "PointMLP",
        86.10,
        16.76,
        6.26,
        57.19,
        [(3.28, 113.73, 44.33), (54.76, 121.23, 38.08)],
    ),
    (
        "PointNet",
        83.70,
        8.34,
        5.79,
        60.07,
        [(1.02, 157.72, 49.03), (11.54, 125.39, 44.27)],
    ),
    (
        "PointNet++ (ssg)",
        85.10,
        1.41,
        1.13,
        75.19,
        [(3.35, 58.19, 63.74), (190.38, 42.33, 55.66)],
    ),
    (
        "SLNet-S",
        85.21,
        1.24,
        0.91,
        76.70,
        [(2.49, 38.12, 66.81), (40.88, 46.24, 60.31)],
    ),
    (
        "SLNet-M",
        85.53,
        1.90,
        2.33,
        70.81,
        [(3.72, 41.33, 59.88), (60.66, 49.46, 53.43)],
    ),
];

fn table_rows() -> Vec<Row> {
    let mut rows = Vec::new();
    for (set, table) in [
        ("ModelNet40", &MODELNET40[..]),
        ("ScanObjectNN", &SCANOBJECTNN),
        ("ShapeNetPart", &SHAPENETPART),
    ] {
        rows.extend(table.iter().map(|&(n, a, p, m, s, rt)| (set, n, a, p, m, s, rt)));
    }
    for &(n, a, s, d, e) in &MODELNET_R {
        let &(_, _, p, m, _, [(td, rd, _), (te, re, _)]) = MODELNET40.iter().find(|r| r.0 == n).expect("shared row");
        rows.push(("ModelNet-R", n, a, p, m, s, [(td, rd, d), (te, re, e)]));
    }
    rows
}

fn netscore_reproduction() -> Outcome {
    let (mut worst, mut worst_plus, mut count) = (0.0f64, 0.0f64, 0);
    for (set, name, a, p, m, printed, runtime) in table_rows() {
        let rec = EfficiencyRecord::new(name, a, p, m);
        let dev = (core(netscore(&rec))? - printed).abs();
        ensure(dev <= 0.3, || format!("{set} {name}: NetScore off by {dev:.3}"))?;
        worst = worst.max(dev);
        for (t, r, plus) in runtime {
            let dev = (core(netscore_plus(&rec.clone().with_runtime(t, r)))? - plus).abs();
            ensure(dev <= 0.6, || format!("{set} {name}: NetScore+ off by {dev:.3}"))?;
            worst_plus = worst_plus.max(dev);
        }
        count += 1;
    }
    Ok(format!(
        "{count} rows, max |dNS| {worst:.3}, max |dNS+| {worst_plus:.3}"
    ))
}

// ---------------------------------------------------------------- 2

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries at least 0.1 from zero, so no probe crosses a ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Entries 0.02 apart, so no probe changes an argmax.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.02 - 0.5)
}

/// `sum(v ⊙ r)` with fixed random `r`.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> slnet_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.constant(uniform(&mut rng, g.shape(v)));
    let p = g.mul(v, r)?;
    Ok(g.sum(p))
}

type Forward<'a> = Box<dyn Fn(&ParamStore<f64>) -> slnet_core::Result<(Graph<f64>, Var)> + 'a>;

fn worst_error(store: &mut ParamStore<f64>, seed: u64, f: Forward) -> Result<f64, String> {
    let report = core(check_store_gradients(store, 16, 1e-4, seed, f))?;
    Ok(report.iter().map(|c| c.rel_error).fold(0.0, f64::max))
}

fn vars(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Vec<Var> {
    s.param_ids()
        .collect::<Vec<_>>()
        .into_iter()
        .map(|id| g.param(s, id))
        .collect()
}

/// One random instance of each op family; returns the worst relative
/// error per family.
fn op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (n, din, dout) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
    let mut s = ParamStore::new();
    s.add_param("x", uniform(&mut rng, &[n, din]));
    s.add_param("w", uniform(&mut rng, &[din, dout]));
    s.add_param("b", uniform(&mut rng, &[dout]));
    s.add_param("z", off_zero(&mut rng, &[n, dout]));
    s.add_param("m", uniform(&mut rng, &[n, dout]));
    s.add_param("c", uniform(&mut rng, &[dout]));
    let e = worst_error(
        &mut s,
        seed,
        Box::new(|s| {
            let mut g = Graph::new(Mode::Train, 0);
            let v = vars(&mut g, s);
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let r = g.relu(v[3]);
            let y = g.add(y, r)?;
            let y = g.mul(y, v[4])?;
            let y = g.add_bias(y, v[5])?;
            let y = g.scale(y, -1.5);
            let l = probe(&mut g, y, seed)?;
            Ok((g, l))
        }),
    )?;
    out.push(("linear/relu/add/add_bias/mul/scale/sum", e));

    let (n, c) = (rng.random_range(2..8), rng.random_range(1..5));
    let mut s = ParamStore::new();
    s.add_param("x", uniform(&mut rng, &[n, 2, c]));
    s.add_param("gamma", uniform(&mut rng, &[c]));
    s.add_param("beta", uniform(&mut rng, &[c]));
    let stats = BnStats {
        mean: s.add_buffer("mean", uniform(&mut rng, &[c])),
        var: s.add_buffer("var", Tensor::from_fn(&[c], |i| 0.5 + i as f64)),
    };
    for mode in [Mode::Train, Mode::Eval] {
        let e = worst_error(
            &mut s,
            seed,
            Box::new(move |s| {
                let mut g = Graph::new(mode, 0);
                let v = vars(&mut g, s);
                let y = g.batch_norm(v[0], v[1], v[2], s, stats, BnConfig::default())?;
                let l = probe(&mut g, y, seed)?;
                Ok((g, l))
            }),
        )?;
        out.push(("batch_norm", e));
    }

    let dims = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5)];
    let axis = rng.random_range(0..3);
    let mut s = ParamStore::new();
    s.add_param("x", distinct(&mut rng, &dims));
    let e = worst_error(
        &mut s,
        seed,
        Box::new(move |s| {
            let mut g = Graph::new(Mode::Train, 0);
            let x = vars(&mut g, s)[0];
            let y = g.max_reduce(x, axis)?;
            let l = probe(&mut g, y, seed)?;
            Ok((g, l))
        }),
    )?;
    out.push(("max_reduce", e));

    let (n, c, k, m) = (
        rng.random_range(2..8),
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let centers: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let neighbors: Vec<usize> = (0..m * k).map(|_| rng.random_range(0..n)).collect();
    let mut s = ParamStore::new();
    s.add_param("x", uniform(&mut rng, &[n, c]));
    s.add_param("extra", uniform(&mut rng, &[m, k, 2]));
    let e = worst_error(
        &mut s,
        seed,
        Box::new(|s| {
            let mut g = Graph::new(Mode::Train, 0);
            let v = vars(&mut g, s);
            let grp = g.group_relative(v[0], &centers, &neighbors, k)?;
            let cat = g.concat(&[grp, v[1]])?;
            let flat = g.reshape(cat, &[m * k, c + 2])?;
            let rows = g.gather_rows(flat, &[0, m * k - 1, 0])?;
            let rep = g.repeat_rows(rows, 2)?;
            let a = probe(&mut g, rep, seed)?;
            let b = probe(&mut g, flat, seed + 1)?;
            let l = g.add(a, b)?;
            Ok((g, l))
        }),
    )?;
    out.push(("group_relative/concat/reshape/gather_rows/repeat_rows", e));

    let (n, c, k, r) = (
        rng.random_range(2..7),
        rng.random_range(1..5),
        rng.random_range(1..4),
        rng.random_range(1..5),
    );
    let idx: Vec<usize> = (0..r * k).map(|_| rng.random_range(0..n)).collect();
    let weights: Vec<f64> = (0..r * k).map(|_| rng.random_range(0.0..1.0)).collect();
    let order = if seed.is_multiple_of(2) {
        AffineOrder::ScaleShift
    } else {
        AffineOrder::ShiftScale
    };
    let mut s = ParamStore::new();
    s.add_param("x", uniform(&mut rng, &[n, c]));
    s.add_param("alpha", uniform(&mut rng, &[c]));
    s.add_param("beta", uniform(&mut rng, &[c]));
    let e = worst_error(
        &mut s,
        seed,
        Box::new(|s| {
            let mut g = Graph::new(Mode::Train, seed);
            let v = vars(&mut g, s);
            let y = g.channel_affine(v[0], v[1], v[2], order)?;
            let y = g.dropout(y, 0.3)?;
            let y = g.weighted_gather(y, &idx, &weights, k)?;
            let l = probe(&mut g, y, seed)?;
            Ok((g, l))
        }),
    )?;
    out.push(("channel_affine/dropout/weighted_gather", e));

    let (n, c) = (rng.random_range(1..6), rng.random_range(2..6));
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let class_w: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let mut s = ParamStore::new();
    s.add_param("logits", uniform(&mut rng, &[n, c]).map(|v| 3.0 * v));
    let e = worst_error(
        &mut s,
        seed,
        Box::new(|s| {
            let mut g = Graph::new(Mode::Train, 0);
            let x = vars(&mut g, s)[0];
            let a = g.cross_entropy(x, &targets, 0.0, None)?;
            let b = g.cross_entropy(x, &targets, 0.2, Some(&class_w))?;
            let f = g.focal_loss(x, &targets, 2.0)?;
            let ab = g.add(a, b)?;
            let l = g.add(ab, f)?;
            Ok((g, l))
        }),
    )?;
    out.push(("cross_entropy/focal_loss", e));
    Ok(out)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point<f32>> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

/// Full tiny classifier plus smoothed cross-entropy. A 1e-6 step keeps
/// most probes clear of ReLU and max switches; the 1e-4 floor sits above
/// the resulting quotient noise.
fn tiny_model_error(seed: u64) -> Result<(f64, usize, usize), String> {
    let model = core(Model::<f64>::new(ModelConfig::tiny(4), seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    let plan = core(model.plan(&random_cloud(&mut rng, 256), 0))?;
    let targets = [seed as usize % 4];
    let mut store = model.store().clone();
    let check = GradCheck {
        samples: 2,
        step: 1e-6,
        seed,
        floor: 1e-4,
    };
    let report = core(check.run(&mut store, |s| {
        let mut g = Graph::new(Mode::Train, seed);
        let logits = model.forward_with(&mut g, s, &[&plan], None)?;
        let loss = g.cross_entropy(logits, &targets, 0.1, None)?;
        Ok((g, loss))
    }))?;
    let worst = report.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let kinked = report.iter().map(|c| c.kinked).sum();
    let checked = report.iter().map(|c| c.checked).sum();
    Ok((worst, kinked, checked))
}

fn gradient_suite() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        for (family, e) in op_errors(seed)? {
            ensure(e < GRAD_TOL, || format!("seed {seed}: {family} relative error {e:.2e}"))?;
            worst = worst.max(e);
        }
    }
    let (mut model_worst, mut kinked, mut checked) = (0.0f64, 0, 0);
    for seed in 0..GRAD_SEEDS {
        let (e, k, c) = tiny_model_error(seed)?;
        ensure(e < GRAD_TOL, || {
            format!("seed {seed}: tiny model relative error {e:.2e}")
        })?;
        ensure(k * 4 <= c, || {
            format!("seed {seed}: {k} of {} entries straddle kinks", k + c)
        })?;
        model_worst = model_worst.max(e);
        kinked += k;
        checked += c;
    }
    Ok(format!(
        "{GRAD_SEEDS} seeds, ops max rel {worst:.1e}, tiny model max rel {model_worst:.1e} ({kinked} kinked of {})",
        kinked + checked
    ))
}

// ---------------------------------------------------------------- 3

const INSTANCES: u64 = 100;

fn cloud64(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point<f64>> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

fn fps_oracle(pts: &[Point<f64>], m: usize) -> Vec<usize> {
    let n = pts.len() as f64;
    let c: Point<f64> = std::array::from_fn(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut first = 0;
    for i in 0..pts.len() {
        if sq_dist(&pts[i], &c) > sq_dist(&pts[first], &c) {
            first = i;
        }
    }
    let mut sel = vec![first];
    while sel.len() < m {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in pts.iter().enumerate() {
            let d = sel.iter().map(|&s| sq_dist(p, &pts[s])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

/// Full sort by (distance, index); rows shorter than `k` repeat the nearest.
fn knn_oracle(q: &Point<f64>, refs: &[Point<f64>], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = refs.iter().enumerate().map(|(i, p)| (sq_dist(q, p), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (0..k).map(|j| all.get(j).unwrap_or(&all[0]).1).collect()
}

fn nape_oracle(pts: &[Point<f64>], dim: usize) -> Vec<f64> {
    let n = pts.len() as f64;
    let mut disp = 0.0;
    for a in 0..3 {
        let mu = pts.iter().map(|p| p[a]).sum::<f64>() / n;
        disp += (pts.iter().map(|p| (p[a] - mu).powi(2)).sum::<f64>() / n).sqrt();
    }
    disp /= 3.0;
    let s = 0.4 * (1.0 + disp);
    let beta = 1.0 / (1.0 + (-10.0 * (disp - 0.1)).exp());
    let m = dim.div_ceil(3);
    let mut out = Vec::new();
    for p in pts {
        let mut feats = Vec::new();
        for axis in p {
            for j in 0..m {
                let u = axis - (-1.0 + 2.0 * (j as f64 + 1.0) / (m as f64 + 1.0));
                feats.push(beta * (-u * u / (2.0 * s * s)).exp() + (1.0 - beta) * (u / s).cos());
            }
        }
        out.extend_from_slice(&feats[..dim]);
    }
    out
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-12)
}

fn oracle_equivalence() -> Outcome {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=128);
        let pts = cloud64(&mut rng, n);

        let m = rng.random_range(1..=n);
        let got = core(fps(&pts, m))?;
        ensure(got == fps_oracle(&pts, m), || format!("fps differs at seed {seed}"))?;

        let k = rng.random_range(1..=40);
        let nq = rng.random_range(1..=16);
        let q = cloud64(&mut rng, nq);
        let idx = core(knn(&q, &pts, k))?;
        for (i, p) in q.iter().enumerate() {
            ensure(idx.row(i) == knn_oracle(p, &pts, k).as_slice(), || {
                format!("knn differs at seed {seed}")
            })?;
        }

        let dim = rng.random_range(1..=48);
        let emb = core(nape_embed(&pts, &core(NapeConfig::new(dim))?))?;
        let want = nape_oracle(&pts, dim);
        ensure(emb.data().iter().zip(&want).all(|(&a, &b)| rel_close(a, b)), || {
            format!("nape differs at seed {seed}")
        })?;

        let c = rng.random_range(0..5);
        let feats: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let centers = &fps_oracle(&pts, m)[..];
        let kk = rng.random_range(1..=n.min(16));
        let nbr = core(neighborhoods(&pts, centers, kk))?;
        let grouped = core(relative_group(&feats, c, &pts, &nbr))?;
        let mut want = Vec::new();
        for (row, &ci) in centers.iter().enumerate() {
            ensure(nbr.row(row) == knn_oracle(&pts[ci], &pts, kk).as_slice(), || {
                format!("neighborhoods differ at seed {seed}")
            })?;
            for &nj in nbr.row(row) {
                want.extend((0..c).map(|ch| feats[nj * c + ch] - feats[ci * c + ch]));
                want.extend((0..3).map(|a| pts[nj][a] - pts[ci][a]));
            }
        }
        ensure(grouped == want, || format!("relative_group differs at seed {seed}"))?;

        let nf = rng.random_range(1..=128);
        let fine = cloud64(&mut rng, nf);
        let ch = rng.random_range(1..5);
        let coarse_feats: Vec<f64> = (0..n * ch).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = core(idw_interpolate(&pts, &coarse_feats, ch, &fine, 3, 2.0, 1e-8))?;
        for (r, f) in fine.iter().enumerate() {
            let near = knn_oracle(f, &pts, 3.min(n));
            let w: Vec<f64> = near.iter().map(|&j| 1.0 / (sq_dist(f, &pts[j]) + 1e-8)).collect();
            let total: f64 = w.iter().sum();
            for k in 0..ch {
                let v = near
                    .iter()
                    .zip(&w)
                    .map(|(&j, wj)| wj * coarse_feats[j * ch + k])
                    .sum::<f64>()
                    / total;
                ensure(rel_close(out[r * ch + k], v), || format!("idw differs at seed {seed}"))?;
            }
        }
    }
    Ok(format!(
        "{INSTANCES} instances each of fps, knn, nape, relative_group, idw"
    ))
}

// ---------------------------------------------------------------- 4, 5a

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_EPOCHS: usize = 60;

fn samples(clouds: &[PointCloud]) -> Vec<Sample> {
    clouds
        .iter()
        .map(|c| Sample::new(c.coords().to_vec(), c.cloud_label().expect("labelled")))
        .collect()
}

/// Final averaged-weight test OA of one desk-scale run, and the model.
fn desk_run(seed: u64, sampling: Sampling) -> Result<(f64, Model<f32>, Option<ParamStore<f32>>), String> {
    let data = synth_generate(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let (train, test) = (samples(&data.train), samples(&data.test));
    ensure(train.len() == 400 && test.len() == 100, || {
        "split is not 400/100".into()
    })?;
    let cfg = ModelConfig {
        sampling,
        ..ModelConfig::tiny(4)
    };
    let mut model = core(Model::<f32>::new(cfg, seed))?;
    let tc = TrainConfig {
        optim: OptimConfig {
            lr0: 0.01,
            epochs: DESK_EPOCHS,
            ema_rho: Some(0.99),
            ..OptimConfig::default()
        },
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    };
    let report = core(fit(&mut model, &train, &test, &tc, |_| {}))?;
    let oa = report.epochs.last().and_then(|l| l.test_oa).ok_or("no test accuracy")?;
    Ok((oa, model, report.ema))
}

struct DeskRuns {
    fps_oa: Vec<f64>,
    model: Option<(Model<f32>, Option<ParamStore<f32>>)>,
}

fn desk_training(runs: &mut DeskRuns) -> Outcome {
    let start = Instant::now();
    for seed in DESK_SEEDS {
        let (oa, model, ema) = desk_run(seed, Sampling::Fps)?;
        runs.fps_oa.push(oa);
        runs.model = Some((model, ema));
    }
    let secs = start.elapsed().as_secs_f64();
    let text = format!(
        "test OA {:?} over seeds {DESK_SEEDS:?} in {secs:.0} s",
        pct(&runs.fps_oa)
    );
    ensure(runs.fps_oa.iter().all(|&oa| oa >= 0.95), || {
        format!("below 95%: {text}")
    })?;
    ensure(secs < 600.0, || format!("over 10 minutes: {text}"))?;
    Ok(text)
}

fn pct(xs: &[f64]) -> Vec<String> {
    xs.iter().map(|x| format!("{:.1}%", 100.0 * x)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------- 5

fn params_of(cfg: ModelConfig) -> Result<usize, String> {
    Ok(count_params(&core(Model::<f32>::new(cfg, 0))?))
}

fn ablation_directionality(runs: &DeskRuns) -> Outcome {
    ensure(runs.fps_oa.len() == DESK_SEEDS.len(), || {
        "desk-scale FPS runs missing".into()
    })?;
    let mut random_oa = Vec::new();
    for seed in DESK_SEEDS {
        random_oa.push(desk_run(seed, Sampling::Random)?.0);
    }
    let (f, r) = (mean(&runs.fps_oa), mean(&random_oa));
    ensure(f >= r, || {
        format!("FPS mean {:.1}% below random {:.1}%", 100.0 * f, 100.0 * r)
    })?;

    let counts = [0.125, 0.25, 0.5, 1.0]
        .iter()
        .map(|&lrb_ratio| {
            params_of(ModelConfig {
                lrb_ratio,
                ..ModelConfig::slnet_s()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ensure(counts.windows(2).all(|w| w[0] < w[1]), || {
        format!("bottleneck counts not increasing: {counts:?}")
    })?;

    let mut gmu = Vec::new();
    for cfg in [ModelConfig::slnet_s(), ModelConfig::slnet_m(), ModelConfig::tiny(4)] {
        let dim = cfg.embed_dim;
        let with = params_of(cfg.clone())?;
        let without = params_of(ModelConfig {
            gmu_placement: GmuPlacement::None,
            ..cfg
        })?;
        ensure(with - without == 2 * dim, || {
            format!("GMU adds {} for D={dim}", with - without)
        })?;
        gmu.push(with - without);
    }
    Ok(format!(
        "FPS {:.1}% vs random {:.1}% (random {:?}); params by ratio {counts:?}; GMU adds {gmu:?}",
        100.0 * f,
        100.0 * r,
        pct(&random_oa)
    ))
}

// ---------------------------------------------------------------- 6

fn permutation_invariance() -> Outcome {
    let model = core(Model::<f32>::new(ModelConfig::slnet_s(), 6))?;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let pts = random_cloud(&mut rng, 1024);
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        let a = core(model.predict(&[&core(model.plan(&pts, 0))?], None))?;
        let b = core(model.predict(&[&core(model.plan(&shuffled, 0))?], None))?;
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        worst = worst.max(d);
    }
    ensure(worst < 1e-5, || format!("max |dlogit| {worst:.2e}"))?;
    Ok(format!("50 clouds of 1024 points, max |dlogit| {worst:.2e}"))
}

// ---------------------------------------------------------------- 7

fn parameter_bracket() -> Outcome {
    let s = params_of(ModelConfig::slnet_s())?;
    let m = params_of(ModelConfig::slnet_m())?;
    ensure((100_000..=200_000).contains(&s), || format!("SLNet-S has {s}"))?;
    ensure((400_000..=700_000).contains(&m), || format!("SLNet-M has {m}"))?;
    let mut gmu = Vec::new();
    for (cfg, want) in [(ModelConfig::slnet_s(), 32), (ModelConfig::slnet_m(), 64)] {
        let d = params_of(cfg.clone())?
            - params_of(ModelConfig {
                gmu_placement: GmuPlacement::None,
                ..cfg
            })?;
        ensure(d == want, || format!("GMU contributes {d}, expected {want}"))?;
        gmu.push(d);
    }
    Ok(format!("SLNet-S {s}, SLNet-M {m}, GMU {gmu:?}"))
}

// ---------------------------------------------------------------- 8

fn efficiency_orderings() -> Outcome {
    let bench = BenchConfig::default();
    let s = core(Model::<f32>::new(ModelConfig::slnet_s(), 0))?;
    let m = core(Model::<f32>::new(ModelConfig::slnet_m(), 0))?;
    let (ts, tm) = (core(measure_latency(&s, &bench))?, core(measure_latency(&m, &bench))?);
    let (rs, rm) = (
        core(measure_peak_memory(&s, &bench))?,
        core(measure_peak_memory(&m, &bench))?,
    );
    let fs = core(estimate_flops(s.config(), bench.n_points, 1))?.total();
    let fm = core(estimate_flops(m.config(), bench.n_points, 1))?.total();
    let ratio = fm / fs;
    let text = format!(
        "latency {ts:.1} < {tm:.1} ms, memory {rs:.1} < {rm:.1} MB, FLOPs {:.3}G / {:.3}G = {ratio:.2}",
        fm / 1e9,
        fs / 1e9
    );
    ensure(ts < tm && rs < rm && (2.5..=6.0).contains(&ratio), || text.clone())?;
    Ok(text)
}

// ---------------------------------------------------------------- 9

fn logits_bits(model: &Model<f32>, clouds: &[Vec<Point<f32>>]) -> Result<Vec<u32>, String> {
    let plans: Vec<Plan> = clouds
        .iter()
        .map(|c| model.plan(c, 0))
        .collect::<slnet_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<&Plan> = plans.iter().collect();
    Ok(core(model.predict(&refs, None))?
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect())
}

fn round_trip_integrity(runs: &mut DeskRuns) -> Outcome {
    let (model, ema) = match runs.model.take() {
        Some(m) => m,
        None => (core(Model::<f32>::new(ModelConfig::tiny(4), 9))?, None),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let clouds: Vec<Vec<Point<f32>>> = (0..8).map(|_| random_cloud(&mut rng, 256)).collect();
    let before = logits_bits(&model, &clouds)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.slck");
    let ckpt = Checkpoint { model, ema };
    checkpoint::save(&path, &ckpt).map_err(|e| e.to_string())?;
    let back = checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(logits_bits(&back.model, &clouds)? == before, || {
        "reloaded logits differ".into()
    })?;
    if let (Some(a), Some(b)) = (&ckpt.ema, &back.ema) {
        let eq = a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.value.data() == y.value.data());
        ensure(eq, || "averaged weights differ after reload".into())?;
    }

    let mut files = 0;
    for i in 0..50 {
        let n = rng.random_range(1..300);
        let mut cloud = core(PointCloud::new(random_cloud(&mut rng, n)))?;
        if i % 2 == 0 {
            cloud = core(cloud.with_extras(3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()))?;
        }
        if i % 3 == 0 {
            cloud = core(cloud.with_labels(Labels::Points((0..n).map(|_| rng.random_range(0..50)).collect())))?;
        }
        for ext in ["slpc", "csv"] {
            let p = dir.path().join(format!("c{i}.{ext}"));
            pointfile::save_points(&p, &cloud).map_err(|e| e.to_string())?;
            let back = pointfile::load_points(&p).map_err(|e| e.to_string())?;
            ensure(back == cloud, || format!("point file {i}.{ext} differs"))?;
            files += 1;
        }
    }
    Ok(format!(
        "checkpoint logits bitwise equal on 8 clouds; {files} point files bit-exact"
    ))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let mut runs = DeskRuns {
        fps_oa: Vec::new(),
        model: None,
    };
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}) [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({detail}) [{secs:.1} s]");
            }
        }
    };
    report(1, "netscore reproduction", &mut netscore_reproduction);
    report(2, "gradient suite", &mut gradient_suite);
    report(3, "oracle equivalence", &mut oracle_equivalence);
    report(4, "desk-scale training", &mut || desk_training(&mut runs));
    report(5, "ablation directionality", &mut || ablation_directionality(&runs));
    report(6, "permutation invariance", &mut permutation_invariance);
    report(7, "parameter bracket", &mut parameter_bracket);
    report(8, "efficiency orderings", &mut efficiency_orderings);
    report(9, "round-trip integrity", &mut || round_trip_integrity(&mut runs));
    if failed == 0 {
        println!("acceptance: 9 of 9 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 9 criteria fail");
        ExitCode::FAILURE
    }
}
