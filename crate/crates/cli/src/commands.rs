//! The `slnet` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use slnet_core::backbone::HeadKind;
use slnet_core::netscore::{
    count_params, estimate_flops, measure_latency, measure_peak_memory, netscore, netscore_plus, BenchConfig,
    EfficiencyRecord,
};
use slnet_core::train::{build_plans, evaluate, fit, LossKind, PartTaxonomy, Sample};
use slnet_core::{Model, ModelConfig, ParamStore, Plan};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{conform_all, load_split, read_parts, write_synth, Dataset};
use crate::error::{CliError, Result};
use crate::pointfile::load_points;
use crate::synth::{synth_generate, Shape, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "slnet",
    version,
    about = "Train, evaluate and score SLNet point-cloud models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shape-classification dataset.
    Synth(SynthArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Classify or segment one point file.
    Infer(InferArgs),
    /// Measure parameters, FLOPs, latency and memory as a CSV row.
    Bench(BenchArgs),
    /// Rank efficiency records by NetScore.
    Netscore(NetscoreArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Comma-separated shapes from sphere, cube, cylinder, torus, cone.
    #[arg(long, default_value = "sphere,cube,cylinder,torus")]
    pub classes: String,
    /// Points per cloud.
    #[arg(long = "n", default_value_t = 256)]
    pub n_points: usize,
    #[arg(long, default_value_t = 125)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep clouds in their stored frame instead of the unit sphere.
    #[arg(long)]
    pub no_normalize: bool,
    /// Checkpoint path; the log goes next to it with a `.log` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    /// Averaged weights when the checkpoint has them, raw otherwise.
    Auto,
    Ema,
    Raw,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = Weights::Auto)]
    pub weights: Weights,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Point file, binary or `.csv`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Dataset directory supplying class names.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Object category, required by segmentation models.
    #[arg(long)]
    pub category: Option<usize>,
    #[arg(long, value_enum, default_value_t = Weights::Auto)]
    pub weights: Weights,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to measure; without it `--preset` builds a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "slnet-s")]
    pub preset: String,
    /// Row name; defaults to the checkpoint stem or preset.
    #[arg(long)]
    pub name: Option<String>,
    /// Accuracy in percent.
    #[arg(long)]
    pub acc: Option<f64>,
    /// Dataset to measure test accuracy on when `--acc` is absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct NetscoreArgs {
    /// CSV with `name,acc,params_m,flops_g` and optional
    /// `latency_ms,mem_mb` columns.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Writes `name,netscore,netscore_plus` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, writing
/// results to `out`.
pub fn run<I, S>(args: I, out: &mut impl Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => return emit(out, &e.to_string()),
        Err(e) => {
            let text = e.to_string();
            return Err(CliError::Usage(
                text.trim_start_matches("error: ").trim_end().to_string(),
            ));
        }
    };
    match cli.command {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Infer(a) => infer(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::Netscore(a) => score(&a, out),
    }
}

fn emit(out: &mut impl Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| {
            if text.ends_with('\n') {
                Ok(())
            } else {
                out.write_all(b"\n")
            }
        })
        .map_err(|e| CliError::io("<stdout>", e))
}

fn synth(a: &SynthArgs, out: &mut impl Write) -> Result<()> {
    let classes = a
        .classes
        .split(',')
        .map(|s| s.trim().parse::<Shape>())
        .collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        classes,
        n_points: a.n_points,
        per_class: a.per_class,
        noise: a.noise,
        seed: a.seed,
    };
    let data = synth_generate(&spec)?;
    write_synth(&a.out, &data)?;
    emit(
        out,
        &format!(
            "wrote {} train and {} test clouds to {}",
            data.train.len(),
            data.test.len(),
            a.out.display()
        ),
    )
}

/// Samples brought to the model's cloud size.
fn prepared(ds: &Dataset, cfg: &ModelConfig, seed: u64) -> Vec<Sample> {
    conform_all(&ds.samples, cfg.n_points, seed)
}

fn class_frequencies(samples: &[Sample], classes: usize, seg: bool) -> Vec<f64> {
    let mut counts = vec![0.0; classes];
    for s in samples {
        match (&s.parts, seg) {
            (Some(p), true) => p.iter().for_each(|&l| counts[l.min(classes - 1)] += 1.0),
            _ => counts[s.label.min(classes - 1)] += 1.0,
        }
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c.max(1.0) / total.max(1.0)).collect()
}

fn train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    let data = run
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("the config must set `data`".into()))?;
    let ckpt_path = a
        .out
        .clone()
        .or(run.out.clone())
        .ok_or_else(|| CliError::Usage("give `--out` or set `out` in the config".into()))?;
    let train_set = load_split(&data, "train", !a.no_normalize)?;
    let test_set = load_split(&data, "test", !a.no_normalize)?;
    let seg = run.model.head == HeadKind::PartSegment;
    if seg {
        let tax = read_parts(&data)?.ok_or_else(|| CliError::Data("segmentation data needs parts.txt".into()))?;
        if !run.n_classes_set {
            run.model.n_classes = tax.total_parts();
        }
        run.model.seg_categories = tax.categories();
    } else if !run.n_classes_set {
        run.model.n_classes = train_set.class_names.len();
    }
    run.model.validate()?;
    if run.train.loss.kind == LossKind::Wce {
        run.train.loss.class_freqs = Some(class_frequencies(&train_set.samples, run.model.n_classes, seg));
    }
    let seed = run.train.seed;
    let train_samples = prepared(&train_set, &run.model, seed);
    let test_samples = prepared(&test_set, &run.model, seed.wrapping_add(1 << 32));
    let mut model = Model::<f32>::new(run.model.clone(), seed)?;
    let log_path = ckpt_path.with_extension("log");
    let mut log = String::new();
    let mut write_err = None;
    let report = fit(&mut model, &train_samples, &test_samples, &run.train, |l| {
        let line = l.to_string();
        if let Err(e) = emit(out, &line) {
            write_err.get_or_insert(e);
        }
        log.push_str(&line);
        log.push('\n');
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(&log_path, log).map_err(|e| CliError::io(&log_path, e))?;
    checkpoint::save(&ckpt_path, &Checkpoint { model, ema: report.ema })?;
    emit(out, &format!("saved {}", ckpt_path.display()))
}

fn chosen(ckpt: &Checkpoint, w: Weights) -> Result<&ParamStore<f32>> {
    match (w, &ckpt.ema) {
        (Weights::Raw, _) | (Weights::Auto, None) => Ok(ckpt.model.store()),
        (_, Some(e)) => Ok(e),
        (Weights::Ema, None) => Err(CliError::Usage("checkpoint has no averaged weights".into())),
    }
}

/// Taxonomy for a segmentation model, from `parts.txt` or else ShapeNet.
fn taxonomy(cfg: &ModelConfig, data: &Path) -> Result<Option<PartTaxonomy>> {
    if cfg.head != HeadKind::PartSegment {
        return Ok(None);
    }
    Ok(Some(match read_parts(data)? {
        Some(t) => t,
        None => PartTaxonomy::shapenet(),
    }))
}

fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let store = chosen(&ckpt, a.weights)?;
    let model = &ckpt.model;
    let ds = load_split(&a.data, &a.split, !a.no_normalize)?;
    if ds.samples.is_empty() {
        return Err(CliError::Data(format!("split `{}` is empty", a.split)));
    }
    let samples = prepared(&ds, model.config(), a.seed);
    let plans: Vec<Plan> = build_plans(model, &samples, a.seed)?;
    let tax = taxonomy(model.config(), &a.data)?;
    let ev = evaluate(model, store, &samples, &plans, a.batch_size, tax.as_ref())?;
    let text = match ev.iou {
        Some(iou) => format!(
            "n={} instance_miou={:.4} class_miou={:.4} point_acc={:.4}",
            samples.len(),
            iou.instance,
            iou.class,
            ev.confusion.oa()
        ),
        None => format!(
            "n={} oa={:.4} macc={:.4}",
            samples.len(),
            ev.confusion.oa(),
            ev.confusion.macc()
        ),
    };
    emit(out, &text)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn infer(a: &InferArgs, out: &mut impl Write) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let store = chosen(&ckpt, a.weights)?;
    let model = Model::with_store(ckpt.model.config().clone(), store)?;
    let cloud = load_points(&a.input)?;
    let cloud = if a.no_normalize { cloud } else { cloud.normalized() };
    let plan = model.plan(cloud.coords(), a.seed)?;
    let cfg = model.config();
    let names = match &a.data {
        Some(d) => crate::dataset::read_classes(d)?,
        None => Vec::new(),
    };
    let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
    if cfg.head == HeadKind::PartSegment {
        let cat = a
            .category
            .ok_or_else(|| CliError::Usage("segmentation models need `--category`".into()))?;
        let logits = model.predict(&[&plan], Some(&[cat]))?;
        let c = logits.cols();
        let wide: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
        let allowed = match a.data.as_deref().map(read_parts).transpose()?.flatten() {
            Some(t) => t.parts(cat)?,
            None if cfg.n_classes == PartTaxonomy::shapenet().total_parts() => PartTaxonomy::shapenet().parts(cat)?,
            None => 0..c,
        };
        let pred = slnet_core::train::restricted_argmax(&wide, c, allowed)?;
        let mut text = String::from("point,part\n");
        for (i, p) in pred.iter().enumerate() {
            text.push_str(&format!("{i},{p}\n"));
        }
        return emit(out, &text);
    }
    let logits = model.predict(&[&plan], None)?;
    let probs = softmax(&logits.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    let mut ranked: Vec<usize> = (0..probs.len()).collect();
    ranked.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    let mut text = String::from("rank,class,prob\n");
    for (r, &i) in ranked.iter().take(a.top_k.max(1)).enumerate() {
        text.push_str(&format!("{},{},{:.6}\n", r + 1, name(i), probs[i]));
    }
    emit(out, &text)
}

fn bench(a: &BenchArgs, out: &mut impl Write) -> Result<()> {
    let (model, default_name, ema) = match &a.checkpoint {
        Some(p) => {
            let ckpt = checkpoint::load(p)?;
            let stem = p
                .file_stem()
                .map_or("model".into(), |s| s.to_string_lossy().into_owned());
            (ckpt.model, stem, ckpt.ema)
        }
        None => (
            Model::<f32>::new(ModelConfig::preset(&a.preset)?, 0)?,
            a.preset.clone(),
            None,
        ),
    };
    let name = a.name.clone().unwrap_or(default_name);
    let acc = match (a.acc, &a.data) {
        (Some(acc), _) => acc,
        (None, Some(data)) => {
            let ds = load_split(data, "test", true)?;
            let samples = prepared(&ds, model.config(), 0);
            let plans = build_plans(&model, &samples, 0)?;
            let store = ema.as_ref().unwrap_or(model.store());
            let tax = taxonomy(model.config(), data)?;
            let ev = evaluate(&model, store, &samples, &plans, 32, tax.as_ref())?;
            100.0 * ev.iou.map_or(ev.confusion.oa(), |i| i.instance)
        }
        (None, None) => return Err(CliError::Usage("give `--acc` or `--data`".into())),
    };
    let bc = BenchConfig {
        warmup_iters: a.warmup,
        timed_iters: a.iters,
        batch: a.batch,
        n_points: a.points,
        seed: 0,
    };
    let params_m = count_params(&model) as f64 / 1e6;
    let flops_g = estimate_flops(model.config(), a.points, 1)?.total() / 1e9;
    let latency = measure_latency(&model, &bc)?;
    let memory = measure_peak_memory(&model, &bc)?;
    emit(
        out,
        &format!(
            "name,acc,params_m,flops_g,latency_ms,mem_mb\n{name},{acc:.2},{params_m:.4},{flops_g:.4},{latency:.3},{memory:.2}"
        ),
    )
}

/// Reads efficiency records from CSV with a header row.
pub fn read_records(path: &Path) -> Result<Vec<EfficiencyRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::format(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| CliError::format(path, e.to_string()))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| CliError::format(path, format!("missing column `{name}`")));
    let (name_c, acc_c, p_c, f_c) = (need("name")?, need("acc")?, need("params_m")?, need("flops_g")?);
    let (lat_c, mem_c) = (col("latency_ms"), col("mem_mb"));
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        let field = |c: usize| -> Result<f64> {
            let f = rec.get(c).unwrap_or("");
            f.parse()
                .map_err(|_| CliError::format(path, format!("row {}: `{f}` is not a number", i + 2)))
        };
        let optional = |c: Option<usize>| -> Result<Option<f64>> {
            match c.and_then(|c| rec.get(c)).filter(|f| !f.is_empty()) {
                Some(_) => field(c.expect("present")).map(Some),
                None => Ok(None),
            }
        };
        let mut r = EfficiencyRecord::new(rec.get(name_c).unwrap_or(""), field(acc_c)?, field(p_c)?, field(f_c)?);
        r.latency_ms = optional(lat_c)?;
        r.memory_mb = optional(mem_c)?;
        records.push(r);
    }
    Ok(records)
}

fn score(a: &NetscoreArgs, out: &mut impl Write) -> Result<()> {
    let records = read_records(&a.input)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let plus = match (r.latency_ms, r.memory_mb) {
            (Some(_), Some(_)) => Some(netscore_plus(r)?),
            _ => None,
        };
        rows.push((r.name.clone(), netscore(r)?, plus));
    }
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
    let mut table = format!(
        "{:>4}  {:<width$}  {:>8}  {:>9}\n",
        "rank", "name", "netscore", "netscore+"
    );
    let mut csv_text = String::from("name,netscore,netscore_plus\n");
    for (i, (name, ns, plus)) in rows.iter().enumerate() {
        let plus_text = plus.map_or(String::new(), |p| format!("{p:.2}"));
        table.push_str(&format!("{:>4}  {name:<width$}  {ns:>8.2}  {plus_text:>9}\n", i + 1));
        csv_text.push_str(&format!(
            "{name},{ns:.4},{}\n",
            plus.map_or(String::new(), |p| format!("{p:.4}"))
        ));
    }
    if let Some(path) = &a.out {
        fs::write(path, csv_text).map_err(|e| CliError::io(path, e))?;
    }
    emit(out, &table)
}
