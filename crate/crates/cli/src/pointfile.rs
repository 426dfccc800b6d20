//! Point files: the binary `SLPC` layout and a CSV fallback.
//!
//! Binary layout, little-endian: `SLPC`, then `u32` version, point count,
//! dims (3 or 6) and a 0/1 label flag; `N·dims` `f32` values row-major;
//! `N` `u32` labels when flagged. Cloud-level labels are not stored here.

use std::fs;
use std::path::Path;

use slnet_core::geom::Labels;
use slnet_core::PointCloud;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"SLPC";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a point file, choosing CSV by the `.csv` extension.
pub fn load_points(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|e| CliError::format(path, format!("not UTF-8 text: {e}")))?;
        parse_csv(&text).map_err(|d| CliError::format(path, d))
    } else {
        decode(&bytes).map_err(|d| CliError::format(path, d))
    }
}

/// Writes `cloud`, as CSV for a `.csv` path and binary otherwise.
pub fn save_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let data = if is_csv(path) {
        to_csv(cloud).into_bytes()
    } else {
        encode(cloud)?
    };
    fs::write(path, data).map_err(|e| CliError::io(path, e))
}

fn dims_of(cloud: &PointCloud) -> Result<usize> {
    match cloud.extras() {
        None => Ok(3),
        Some((3, _)) => Ok(6),
        Some((w, _)) => Err(CliError::Data(format!(
            "point files hold 0 or 3 extra channels, not {w}"
        ))),
    }
}

fn row(cloud: &PointCloud, i: usize) -> impl Iterator<Item = f32> + '_ {
    let extra = cloud.extras().map(|(w, d)| &d[i * w..(i + 1) * w]).unwrap_or(&[]);
    cloud.coords()[i].iter().chain(extra).copied()
}

pub fn encode(cloud: &PointCloud) -> Result<Vec<u8>> {
    let dims = dims_of(cloud)?;
    let n = cloud.len();
    let labels = cloud.point_labels();
    let mut out = Vec::with_capacity(HEADER + n * dims * 4 + labels.map_or(0, |_| n * 4));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, dims as u32, labels.is_some() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..n {
        row(cloud, i).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    if let Some(l) = labels {
        for &v in l {
            let v = u32::try_from(v).map_err(|_| CliError::Data(format!("label {v} exceeds 32 bits")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn word(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<PointCloud, String> {
    if bytes.len() < HEADER {
        return Err(format!(
            "truncated header: expected {HEADER} bytes, found {}",
            bytes.len()
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format!(
            "bad magic at byte 0: expected {MAGIC:?}, found {:?}",
            &bytes[..4]
        ));
    }
    let version = word(bytes, 4);
    if version != VERSION {
        return Err(format!("unsupported version {version} at byte 4"));
    }
    let (n, dims, flag) = (word(bytes, 8) as usize, word(bytes, 12) as usize, word(bytes, 16));
    if dims != 3 && dims != 6 {
        return Err(format!("dims {dims} at byte 12 must be 3 or 6"));
    }
    if flag > 1 {
        return Err(format!("label flag {flag} at byte 16 must be 0 or 1"));
    }
    let expected = HEADER + n * dims * 4 + if flag == 1 { n * 4 } else { 0 };
    if bytes.len() < expected {
        return Err(format!(
            "truncated at byte {}: expected {expected} bytes for {n} points of {dims} dims, found {}",
            bytes.len(),
            bytes.len()
        ));
    }
    if bytes.len() > expected {
        return Err(format!(
            "{} trailing bytes after byte {expected}",
            bytes.len() - expected
        ));
    }
    let floats: Vec<f32> = bytes[HEADER..HEADER + n * dims * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    let labels = (flag == 1).then(|| {
        bytes[HEADER + n * dims * 4..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("four bytes")) as usize)
            .collect()
    });
    assemble(&floats, dims, labels).map_err(|e| e.to_string())
}

fn assemble(floats: &[f32], dims: usize, labels: Option<Vec<usize>>) -> slnet_core::Result<PointCloud> {
    let coords = floats.chunks_exact(dims).map(|r| [r[0], r[1], r[2]]).collect();
    let mut cloud = PointCloud::new(coords)?;
    if dims == 6 {
        let extras = floats.chunks_exact(dims).flat_map(|r| r[3..].iter().copied()).collect();
        cloud = cloud.with_extras(3, extras)?;
    }
    if let Some(l) = labels {
        cloud = cloud.with_labels(Labels::Points(l))?;
    }
    Ok(cloud)
}

/// `x,y,z[,nx,ny,nz][,label]` rows; a non-numeric first row is a header.
pub fn parse_csv(text: &str) -> Result<PointCloud, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut floats = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format!("line {}: {e}", i + 1))?;
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f32>().is_err()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(format!("line {}: {} fields, expected {w}", i + 1, rec.len()));
        }
        let dims = match w {
            3 | 4 => 3,
            6 | 7 => 6,
            _ => return Err(format!("line {}: {w} fields; expected 3, 4, 6 or 7", i + 1)),
        };
        for f in rec.iter().take(dims) {
            floats.push(
                f.parse::<f32>()
                    .map_err(|_| format!("line {}: `{f}` is not a number", i + 1))?,
            );
        }
        if w > dims {
            let f = &rec[dims];
            labels.push(
                f.parse::<usize>()
                    .map_err(|_| format!("line {}: `{f}` is not a label", i + 1))?,
            );
        }
    }
    let w = width.ok_or("no points")?;
    let dims = if w >= 6 { 6 } else { 3 };
    assemble(&floats, dims, (w > dims).then_some(labels)).map_err(|e| e.to_string())
}

pub fn to_csv(cloud: &PointCloud) -> String {
    let dims = if cloud.extras().is_some() { 6 } else { 3 };
    let mut header: Vec<&str> = vec!["x", "y", "z", "nx", "ny", "nz"];
    header.truncate(dims);
    let labels = cloud.point_labels();
    if labels.is_some() {
        header.push("label");
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..cloud.len() {
        let mut fields: Vec<String> = row(cloud, i).map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            fields.push(l[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
