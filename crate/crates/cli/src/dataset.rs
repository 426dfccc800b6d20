//! On-disk datasets: a directory of point files indexed by a manifest.
//!
//! `classes.txt` holds one class (or object category) name per line.
//! `manifest.csv` has the header `split,file,label` and one row per cloud,
//! `file` relative to the directory and `label` the class or category.
//! Segmentation clouds carry their part labels in the point file. An
//! optional `parts.txt` lists `name count` per category.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slnet_core::train::{PartTaxonomy, Sample};
use slnet_core::PointCloud;

use crate::error::{CliError, Result};
use crate::pointfile::{load_points, save_points};
use crate::synth::SynthDataset;

pub const MANIFEST: &str = "manifest.csv";
pub const CLASSES: &str = "classes.txt";
pub const PARTS: &str = "parts.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub split: String,
    pub file: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Worker threads for loading: `SLNET_THREADS` when set, else the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SLNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn read_classes(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(CLASSES);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Part taxonomy from `parts.txt`, if present.
pub fn read_parts(dir: &Path) -> Result<Option<PartTaxonomy>> {
    let path = dir.join(PARTS);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut cats = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (name, count) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| CliError::format(&path, format!("expected `name count`, got `{line}`")))?;
        let count: usize = count
            .parse()
            .map_err(|_| CliError::format(&path, format!("bad part count in `{line}`")))?;
        cats.push((name.trim().to_string(), count));
    }
    let refs: Vec<(&str, usize)> = cats.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    Ok(Some(PartTaxonomy::new(&refs)?))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::format(&path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(&path, e.to_string()))?;
        if rec.len() != 3 {
            return Err(CliError::format(
                &path,
                format!("row {}: expected split,file,label", i + 2),
            ));
        }
        let label = rec[2]
            .trim()
            .parse()
            .map_err(|_| CliError::format(&path, format!("row {}: bad label `{}`", i + 2, &rec[2])))?;
        out.push(Entry {
            split: rec[0].trim().to_string(),
            file: PathBuf::from(rec[1].trim()),
            label,
        });
    }
    Ok(out)
}

/// Loads every cloud of `split` in manifest order, spreading file reads
/// over [`worker_threads`] threads.
pub fn load_split(dir: &Path, split: &str, normalize: bool) -> Result<Dataset> {
    let class_names = read_classes(dir)?;
    let entries: Vec<Entry> = read_manifest(dir)?.into_iter().filter(|e| e.split == split).collect();
    if let Some(bad) = entries.iter().find(|e| e.label >= class_names.len()) {
        return Err(CliError::Data(format!(
            "{}: label {} but only {} classes",
            bad.file.display(),
            bad.label,
            class_names.len()
        )));
    }
    let workers = worker_threads().min(entries.len()).max(1);
    let chunk = entries.len().div_ceil(workers).max(1);
    let loaded: Vec<Result<Vec<Sample>>> = thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|e| load_entry(dir, e, normalize))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    let mut samples = Vec::with_capacity(entries.len());
    for part in loaded {
        samples.extend(part?);
    }
    Ok(Dataset { class_names, samples })
}

fn load_entry(dir: &Path, e: &Entry, normalize: bool) -> Result<Sample> {
    let cloud = load_points(&dir.join(&e.file))?;
    let cloud = if normalize { cloud.normalized() } else { cloud };
    Ok(Sample {
        points: cloud.coords().to_vec(),
        label: e.label,
        parts: cloud.point_labels().map(<[usize]>::to_vec),
    })
}

/// Writes a synthetic dataset as point files plus manifest.
pub fn write_synth(dir: &Path, data: &SynthDataset) -> Result<()> {
    for split in ["train", "test"] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
    }
    let classes = dir.join(CLASSES);
    fs::write(&classes, data.class_names.join("\n") + "\n").map_err(|e| CliError::io(&classes, e))?;
    let mut manifest = String::from("split,file,label\n");
    for (split, clouds) in [("train", &data.train), ("test", &data.test)] {
        for (i, cloud) in clouds.iter().enumerate() {
            let file = format!("{split}/{i:05}.slpc");
            let label = cloud
                .cloud_label()
                .ok_or_else(|| CliError::Data("synthetic cloud without a label".into()))?;
            save_points(&dir.join(&file), &PointCloud::new(cloud.coords().to_vec())?)?;
            manifest.push_str(&format!("{split},{file},{label}\n"));
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))
}

/// Brings a cloud to exactly `n` points: a seeded subset when larger,
/// seeded repeats when smaller. Part labels follow their points.
pub fn conform(s: &Sample, n: usize, seed: u64) -> Sample {
    let len = s.points.len();
    if len == n {
        return s.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if len > n {
        let mut v = sample(&mut rng, len, n).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..len).chain((len..n).map(|_| rng.random_range(0..len))).collect()
    };
    Sample {
        points: idx.iter().map(|&i| s.points[i]).collect(),
        label: s.label,
        parts: s.parts.as_ref().map(|p| idx.iter().map(|&i| p[i]).collect()),
    }
}

/// [`conform`] over a set, sample `i` drawing from `seed + i`.
pub fn conform_all(samples: &[Sample], n: usize, seed: u64) -> Vec<Sample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| conform(s, n, seed.wrapping_add(i as u64)))
        .collect()
}
