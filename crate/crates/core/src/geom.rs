//! Parameter-free geometric kernels: sampling, neighborhoods, grouping and
//! inverse-distance interpolation.
//!
//! Squared Euclidean distances are accumulated in `f64` regardless of the
//! coordinate type, so index selections agree between `f32` and `f64` runs.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// A point in model space.
pub type Point<T> = [T; 3];

/// Labels attached to a cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    Cloud(usize),
    Points(Vec<usize>),
}

/// Coordinates plus optional per-point extras (normals, colors) and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point<f32>>,
    extras: Option<(usize, Vec<f32>)>,
    labels: Option<Labels>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point<f32>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(PointCloud {
            coords,
            extras: None,
            labels: None,
        })
    }

    /// Attaches `width` extra channels per point, row-major.
    pub fn with_extras(mut self, width: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || data.len() != width * self.len() {
            return Err(Error::shape(
                "point extras",
                format!("{} values for {} points of width {width}", data.len(), self.len()),
            ));
        }
        self.extras = Some((width, data));
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        if let Labels::Points(l) = &labels {
            if l.len() != self.len() {
                return Err(Error::shape(
                    "point labels",
                    format!("{} labels for {} points", l.len(), self.len()),
                ));
            }
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point<f32>] {
        &self.coords
    }

    pub fn extras(&self) -> Option<(usize, &[f32])> {
        self.extras.as_ref().map(|(w, d)| (*w, d.as_slice()))
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    /// Per-point labels, if present.
    pub fn point_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Some(Labels::Points(l)) => Some(l),
            _ => None,
        }
    }

    /// Cloud-level label, if present.
    pub fn cloud_label(&self) -> Option<usize> {
        match self.labels {
            Some(Labels::Cloud(l)) => Some(l),
            _ => None,
        }
    }

    /// Copy with the listed points, in order. Extras and per-point labels
    /// follow their points.
    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        if idx.is_empty() {
            return Err(Error::invalid("selection must keep at least one point"));
        }
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let coords = idx.iter().map(|&i| self.coords[i]).collect();
        let extras = self.extras.as_ref().map(|(w, d)| {
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
            (*w, out)
        });
        let labels = self.labels.as_ref().map(|l| match l {
            Labels::Cloud(c) => Labels::Cloud(*c),
            Labels::Points(p) => Labels::Points(idx.iter().map(|&i| p[i]).collect()),
        });
        Ok(PointCloud { coords, extras, labels })
    }

    /// Copy translated to its centroid and scaled so the farthest point lies
    /// on the unit sphere. A single-point cloud maps to the origin.
    pub fn normalized(&self) -> PointCloud {
        let n = self.len() as f64;
        let mut c = [0.0f64; 3];
        for p in &self.coords {
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        c.iter_mut().for_each(|v| *v /= n);
        let radius = self
            .coords
            .iter()
            .map(|p| (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        let coords = self
            .coords
            .iter()
            .map(|p| std::array::from_fn(|a| ((p[a] as f64 - c[a]) * scale) as f32))
            .collect();
        PointCloud {
            coords,
            extras: self.extras.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Squared Euclidean distance in `f64`.
pub fn sq_dist<T: Real>(a: &Point<T>, b: &Point<T>) -> f64 {
    (0..3).map(|i| (a[i].f64() - b[i].f64()).powi(2)).sum()
}

fn check_count(op: &str, m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("{op}: cannot select {m} of {n} points")));
    }
    Ok(())
}

/// Greedy farthest point sampling.
///
/// The seed is the point farthest from the centroid; each later pick
/// maximizes the squared distance to the selected set. Ties go to the lowest
/// index. Indices are returned in selection order.
pub fn fps<T: Real>(points: &[Point<T>], m: usize) -> Result<Vec<usize>> {
    check_count("fps", m, points.len())?;
    let n = points.len() as f64;
    let mut c = [0.0f64; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a].f64();
        }
    }
    let centroid = c.map(|v| v / n);
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d: f64 = (0..3).map(|a| (p[a].f64() - centroid[a]).powi(2)).sum();
        if d > best.0 {
            best = (d, i);
        }
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = best.1;
    selected.push(current);
    while selected.len() < m {
        let cp = &points[current];
        let mut next = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > next.0 {
                next = (min_d[i], i);
            }
        }
        current = next.1;
        selected.push(current);
    }
    Ok(selected)
}

/// `m` distinct indices from `0..n`, drawn without replacement.
pub fn random_sample(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_count("random_sample", m, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, n, m).into_vec())
}

/// Fixed-width neighbor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    /// Index of each query's center in the parent cloud.
    pub centers: Vec<usize>,
    /// `centers.len() × k`, row-major.
    pub neighbors: Vec<usize>,
    /// Squared distances matching `neighbors`; each row nondecreasing.
    pub sq_dists: Vec<f64>,
    pub k: usize,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn dist_row(&self, i: usize) -> &[f64] {
        &self.sq_dists[i * self.k..(i + 1) * self.k]
    }
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Appends the `k` nearest references of `query`, ordered by (distance,
/// index) and padded with the nearest when fewer than `k` references exist.
fn push_nearest<T: Real>(
    query: &Point<T>,
    refs: &[Point<T>],
    k: usize,
    scratch: &mut Vec<(f64, usize)>,
    out: &mut NeighborIndex,
) {
    scratch.clear();
    scratch.extend(refs.iter().enumerate().map(|(i, r)| (sq_dist(query, r), i)));
    let take = k.min(scratch.len());
    if take < scratch.len() {
        scratch.select_nth_unstable_by(take - 1, by_dist_then_index);
        scratch.truncate(take);
    }
    scratch.sort_unstable_by(by_dist_then_index);
    let first = scratch[0];
    for &(d, i) in scratch.iter().chain(std::iter::repeat_n(&first, k - take)) {
        out.neighbors.push(i);
        out.sq_dists.push(d);
    }
}

/// `k` nearest neighbors in `refs` of every query point. `centers` is
/// `0..query.len()`.
pub fn knn<T: Real>(query: &[Point<T>], refs: &[Point<T>], k: usize) -> Result<NeighborIndex> {
    if refs.is_empty() || k == 0 {
        return Err(Error::invalid(format!("knn with {} references and k={k}", refs.len())));
    }
    let mut out = NeighborIndex {
        centers: (0..query.len()).collect(),
        neighbors: Vec::with_capacity(query.len() * k),
        sq_dists: Vec::with_capacity(query.len() * k),
        k,
    };
    let mut scratch = Vec::with_capacity(refs.len());
    for q in query {
        push_nearest(q, refs, k, &mut scratch, &mut out);
    }
    Ok(out)
}

/// `k` nearest neighbors within `points` of each `points[centers[i]]`.
pub fn neighborhoods<T: Real>(points: &[Point<T>], centers: &[usize], k: usize) -> Result<NeighborIndex> {
    let n = points.len();
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let query: Vec<Point<T>> = centers.iter().map(|&c| points[c]).collect();
    let mut out = knn(&query, points, k)?;
    out.centers = centers.to_vec();
    Ok(out)
}

/// Per (center, neighbor): `[f_j, x_j] - [f_i, x_i]`, laid out
/// `m × k × (channels + 3)`.
pub fn relative_group<T: Real>(
    feats: &[T],
    channels: usize,
    coords: &[Point<T>],
    nbr: &NeighborIndex,
) -> Result<Vec<T>> {
    let n = coords.len();
    if feats.len() != n * channels {
        return Err(Error::shape(
            "relative_group",
            format!("{} features for {n} points × {channels}", feats.len()),
        ));
    }
    for &i in nbr.centers.iter().chain(&nbr.neighbors) {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
    }
    let w = channels + 3;
    let mut out = Vec::with_capacity(nbr.len() * nbr.k * w);
    for (row, &ci) in nbr.centers.iter().enumerate() {
        for &nj in nbr.row(row) {
            for ch in 0..channels {
                out.push(feats[nj * channels + ch] - feats[ci * channels + ch]);
            }
            for a in 0..3 {
                out.push(coords[nj][a] - coords[ci][a]);
            }
        }
    }
    Ok(out)
}

/// Inverse-distance weights of the `k` nearest coarse points of each fine
/// point (`min(k, coarse.len())` per row, normalized to sum to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct IdwWeights<T: Real> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
    pub k: usize,
}

pub fn idw_weights<T: Real>(
    coarse: &[Point<T>],
    fine: &[Point<T>],
    k: usize,
    power: f64,
    eps: f64,
) -> Result<IdwWeights<T>> {
    if coarse.is_empty() || k == 0 {
        return Err(Error::invalid(
            "interpolation needs at least one coarse point and k ≥ 1",
        ));
    }
    let k = k.min(coarse.len());
    let nbr = knn(fine, coarse, k)?;
    let mut weights = Vec::with_capacity(nbr.sq_dists.len());
    for row in nbr.sq_dists.chunks_exact(k) {
        let raw: Vec<f64> = row.iter().map(|&d2| 1.0 / (d2.powf(power / 2.0) + eps)).collect();
        let total: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|w| T::of(w / total)));
    }
    Ok(IdwWeights {
        indices: nbr.neighbors,
        weights,
        k,
    })
}

/// Interpolates `coarse_feats` (`coarse.len() × channels`) onto `fine`.
pub fn idw_interpolate<T: Real>(
    coarse: &[Point<T>],
    coarse_feats: &[T],
    channels: usize,
    fine: &[Point<T>],
    k: usize,
    power: f64,
    eps: f64,
) -> Result<Vec<T>> {
    if coarse_feats.len() != coarse.len() * channels {
        return Err(Error::shape(
            "idw_interpolate",
            format!(
                "{} features for {} points × {channels}",
                coarse_feats.len(),
                coarse.len()
            ),
        ));
    }
    let w = idw_weights(coarse, fine, k, power, eps)?;
    let mut out = vec![T::zero(); fine.len() * channels];
    for (r, row) in out.chunks_exact_mut(channels).enumerate() {
        for j in 0..w.k {
            let src = w.indices[r * w.k + j];
            let wt = w.weights[r * w.k + j];
            for (o, &f) in row.iter_mut().zip(&coarse_feats[src * channels..(src + 1) * channels]) {
                *o += wt * f;
            }
        }
    }
    Ok(out)
}
