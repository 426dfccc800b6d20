//! Efficiency scoring and measurement.
//!
//! Units are fixed: accuracy in percent, parameters in millions, FLOPs in
//! billions, latency in milliseconds per sample, memory in megabytes.

use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{EmbeddingKind, HeadKind, Model, ModelConfig, Plan, IDW_NEIGHBORS, STAGES};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::gmu::GmuPlacement;
use crate::tensor::{AllocStats, Real};

/// Serializes latency and memory measurements process-wide.
static BENCH_LOCK: Mutex<()> = Mutex::new(());

const MB: f64 = 1024.0 * 1024.0;

/// Inputs of the score.
#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyRecord {
    pub name: String,
    pub accuracy: f64,
    pub params_m: f64,
    pub flops_g: f64,
    pub latency_ms: Option<f64>,
    pub memory_mb: Option<f64>,
}

impl EfficiencyRecord {
    pub fn new(name: impl Into<String>, accuracy: f64, params_m: f64, flops_g: f64) -> Self {
        EfficiencyRecord {
            name: name.into(),
            accuracy,
            params_m,
            flops_g,
            latency_ms: None,
            memory_mb: None,
        }
    }

    pub fn with_runtime(mut self, latency_ms: f64, memory_mb: f64) -> Self {
        self.latency_ms = Some(latency_ms);
        self.memory_mb = Some(memory_mb);
        self
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!("{name} {v} must be positive")))
    }
}

/// `20·log10(a² / √(p·m))`.
pub fn netscore(rec: &EfficiencyRecord) -> Result<f64> {
    let a = rec.accuracy;
    if !(a > 0.0 && a <= 100.0) {
        return Err(Error::invalid(format!("accuracy {a} outside (0, 100]")));
    }
    let p = positive("parameter count", rec.params_m)?;
    let m = positive("FLOPs", rec.flops_g)?;
    Ok(20.0 * (a * a / (p * m).sqrt()).log10())
}

/// [`netscore`] with the runtime penalty `(t·r)^(1/4)` in the denominator.
pub fn netscore_plus(rec: &EfficiencyRecord) -> Result<f64> {
    let t = positive(
        "latency",
        rec.latency_ms.ok_or_else(|| Error::invalid("record has no latency"))?,
    )?;
    let r = positive(
        "memory",
        rec.memory_mb.ok_or_else(|| Error::invalid("record has no memory"))?,
    )?;
    Ok(netscore(rec)? - 5.0 * (t * r).log10())
}

/// Trainable scalars, batch-norm statistics excluded.
pub fn count_params<T: Real>(model: &Model<T>) -> usize {
    model.num_params()
}

/// FLOPs of the named parts of a forward pass.
///
/// Conventions: a linear map costs `2·n·in·out`, batch norm `4·n·c`, ReLU,
/// residual addition, grouping differences and each comparison of a max
/// `1` per element, a channel affine `2·n·c`, brute-force kNN `8·Q·N`,
/// farthest-point sampling `4·N·m`, the parameter-free embedding `30·D·N`
/// and interpolation `2·n·k·c`. Stage expansions are counted on the grouped
/// rows, as written, although the implementation projects before grouping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopCount {
    pub parts: Vec<(String, f64)>,
}

impl FlopCount {
    fn add(&mut self, name: impl Into<String>, flops: f64) {
        self.parts.push((name.into(), flops));
    }

    pub fn total(&self) -> f64 {
        self.parts.iter().map(|p| p.1).sum()
    }
}

/// `2·n·in·out`.
pub fn linear_flops(n: f64, fan_in: usize, fan_out: usize) -> f64 {
    2.0 * n * fan_in as f64 * fan_out as f64
}

/// Analytic FLOPs of one forward pass of `cfg` over `batch` clouds of
/// `n_points` points.
pub fn estimate_flops(cfg: &ModelConfig, n_points: usize, batch: usize) -> Result<FlopCount> {
    cfg.validate()?;
    let mut out = FlopCount::default();
    let b = batch as f64;
    let n = n_points as f64;
    let d = cfg.embed_dim;
    let widths = cfg.stage_widths();
    let counts: Vec<usize> = (1..=STAGES).map(|s| n_points >> s).collect();
    if counts.contains(&0) {
        return Err(Error::invalid(format!("{n_points} points leave an empty stage")));
    }

    let embed = match cfg.embedding {
        EmbeddingKind::Mlp => linear_flops(n, 3, d) + n * d as f64,
        _ => 30.0 * d as f64 * n,
    };
    out.add("embed", b * embed);
    if cfg.gmu_placement.after_embedding() {
        out.add("embed.gmu", b * 2.0 * n * d as f64);
    }

    let k = cfg.neighbors as f64;
    let mut prev_n = n;
    let mut prev_c = d;
    for s in 0..STAGES {
        let m = counts[s] as f64;
        let (c_in, w) = (prev_c + 3, widths[s] as f64);
        let rows = m * k;
        let mut f = 4.0 * prev_n * m + 8.0 * m * prev_n;
        f += rows * c_in as f64;
        if matches!(cfg.gmu_placement, GmuPlacement::AfterGrouping | GmuPlacement::Both) {
            f += 2.0 * rows * c_in as f64;
        }
        f += linear_flops(rows, c_in, widths[s]) + 5.0 * rows * w;
        let bott = cfg.bottleneck(widths[s]);
        for _ in 0..cfg.stage_depths[s] {
            f += linear_flops(rows, widths[s], bott) + 5.0 * rows * bott as f64;
            f += linear_flops(rows, bott, widths[s]) + 2.0 * rows * w;
        }
        f += rows * w;
        out.add(format!("stage{s}"), b * f);
        prev_n = m;
        prev_c = widths[s];
    }

    let last = widths[STAGES - 1];
    match cfg.head {
        HeadKind::Classify => {
            let h = cfg.classifier_hidden_width();
            let f = counts[STAGES - 1] as f64 * last as f64
                + linear_flops(1.0, last, h)
                + h as f64
                + linear_flops(1.0, h, cfg.n_classes);
            out.add("head", b * f);
        }
        HeadKind::PartSegment => {
            let mut level_n = vec![n];
            level_n.extend(counts.iter().map(|&c| c as f64));
            let mut level_c = vec![d];
            level_c.extend(widths);
            let dec = cfg.decoder_widths();
            let mut f = 0.0;
            let mut cur = level_c[STAGES];
            for (i, &o) in dec.iter().enumerate() {
                let (coarse, fine) = (level_n[STAGES - i], level_n[STAGES - i - 1]);
                let rows = fine;
                f += 8.0 * fine * coarse + 2.0 * rows * IDW_NEIGHBORS as f64 * cur as f64;
                f += linear_flops(rows, cur + level_c[STAGES - i - 1], o) + 5.0 * rows * o as f64;
                cur = o;
            }
            let context: usize = level_c.iter().sum::<usize>() + cfg.class_embed_dim;
            f += level_n
                .iter()
                .zip(&level_c)
                .map(|(&ln, &lc)| ln * lc as f64)
                .sum::<f64>();
            f += linear_flops(1.0, cfg.seg_categories, cfg.class_embed_dim);
            f += linear_flops(n, cur + context, cfg.seg_hidden) + 5.0 * n * cfg.seg_hidden as f64;
            f += linear_flops(n, cfg.seg_hidden, cfg.n_classes);
            out.add("head", b * f);
        }
    }
    Ok(out)
}

/// Measurement protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub batch: usize,
    pub n_points: usize,
    /// Seed of the fixed random input batch.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup_iters: 10,
            timed_iters: 100,
            batch: 1,
            n_points: 1024,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters < 1 {
            return Err(Error::Config("warmup_iters must be at least 1".into()));
        }
        if self.timed_iters < 10 {
            return Err(Error::Config("timed_iters must be at least 10".into()));
        }
        if self.batch == 0 || self.n_points == 0 {
            return Err(Error::Config("batch and n_points must be positive".into()));
        }
        Ok(())
    }

    /// The fixed input: `batch` clouds uniform in the unit cube.
    pub fn inputs(&self) -> Vec<Vec<Point<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.batch)
            .map(|_| {
                (0..self.n_points)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect()
    }
}

/// Sampling, grouping and eval-mode forward of one batch.
fn infer_once<T: Real>(model: &Model<T>, clouds: &[Vec<Point<f32>>]) -> Result<()> {
    let plans: Vec<Plan> = clouds.iter().map(|c| model.plan(c, 0)).collect::<Result<_>>()?;
    let refs: Vec<&Plan> = plans.iter().collect();
    let cats = vec![0; refs.len()];
    let seg = model.config().head == HeadKind::PartSegment;
    model.predict(&refs, seg.then_some(cats.as_slice()))?;
    Ok(())
}

/// Mean wall-clock milliseconds per sample of inference, geometry included.
pub fn measure_latency<T: Real>(model: &Model<T>, cfg: &BenchConfig) -> Result<f64> {
    cfg.validate()?;
    let clouds = cfg.inputs();
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    for _ in 0..cfg.warmup_iters {
        infer_once(model, &clouds)?;
    }
    let start = Instant::now();
    for _ in 0..cfg.timed_iters {
        infer_once(model, &clouds)?;
    }
    let ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ms / (cfg.timed_iters * cfg.batch) as f64)
}

/// High-water mark of tensor memory above the starting level during one
/// inference, in megabytes.
pub fn measure_peak_memory<T: Real>(model: &Model<T>, cfg: &BenchConfig) -> Result<f64> {
    cfg.validate()?;
    let clouds = cfg.inputs();
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    AllocStats::reset_peak();
    let base = AllocStats::snapshot().current_bytes;
    infer_once(model, &clouds)?;
    let peak = AllocStats::snapshot().peak_bytes;
    Ok(peak.saturating_sub(base) as f64 / MB)
}

/// 1-based ranks, tied values sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(
            "spearman",
            format!("{} against {} values", xs.len(), ys.len()),
        ));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least two pairs"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("rank correlation input".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let mean = (xs.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("rank correlation of a constant sequence"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
