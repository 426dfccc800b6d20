//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. Values live in the graph; [`Var`] is a handle to a recorded node.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! parameter gradients into the [`ParamStore`] the parameters came from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::Tensor;
use super::param::{BufferId, ParamId, ParamStore};
use super::real::{gemm, Real, Trans};
use crate::error::{Error, Result};

/// Forward-pass behavior of batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Composition order of a per-channel affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffineOrder {
    /// `alpha * x + beta`
    ScaleShift,
    /// `alpha * (x + beta)`
    ShiftScale,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Running-statistics handles of one batch-norm layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnStats {
    pub mean: BufferId,
    pub var: BufferId,
}

/// Batch statistics gathered by a train-mode batch norm, applied to the
/// running buffers by [`Graph::commit_stats`].
#[derive(Clone, Debug)]
pub struct BnUpdate<T: Real> {
    pub stats: BnStats,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxReduce {
        x: usize,
        outer: usize,
        k: usize,
        inner: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<u32>,
    },
    GroupRelative {
        x: usize,
        centers: Vec<u32>,
        neighbors: Vec<u32>,
        k: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    ChannelAffine {
        x: usize,
        alpha: usize,
        beta: usize,
        order: AffineOrder,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    WeightedGather {
        x: usize,
        idx: Vec<u32>,
        weights: Vec<T>,
        k: usize,
    },
    RepeatRows {
        x: usize,
        reps: usize,
    },
    Reshape(usize),
    Sum(usize),
    Loss {
        logits: usize,
        dlogits: Tensor<T>,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::MaxReduce { x, .. }
            | Op::GatherRows { x, .. }
            | Op::GroupRelative { x, .. }
            | Op::Dropout { x, .. }
            | Op::WeightedGather { x, .. }
            | Op::RepeatRows { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Concat { xs } => xs.clone(),
            Op::ChannelAffine { x, alpha, beta, .. } => vec![*x, *alpha, *beta],
            Op::Loss { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate<T>>,
}

fn to_u32(idx: &[usize], len: usize) -> Result<Vec<u32>> {
    idx.iter()
        .map(|&i| {
            if i < len {
                Ok(i as u32)
            } else {
                Err(Error::IndexOutOfRange { index: i, len })
            }
        })
        .collect()
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// First position along the reduced axis holding the maximum of output
/// `(o, i)`.
fn first_max<T: Real>(xd: &[T], od: &[T], o: usize, k: usize, inner: usize, i: usize) -> usize {
    let m = od[o * inner + i];
    (0..k).find(|&j| xd[(o * k + j) * inner + i] == m).unwrap_or(0)
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl<T: Real> Graph<T> {
    /// New empty tape. `seed` drives dropout masks.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Index along the reduced axis that a [`Graph::max_reduce`] node
    /// routes each output's gradient to.
    pub fn argmax(&self, v: Var) -> Option<Vec<u32>> {
        match &self.nodes[v.0].op {
            &Op::MaxReduce { x, outer, k, inner } => {
                let (xd, od) = (self.nodes[x].value.data(), self.nodes[v.0].value.data());
                let mut idx = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    idx.extend((0..inner).map(|i| first_max(xd, od, o, k, inner, i) as u32));
                }
                Some(idx)
            }
            _ => None,
        }
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Applies the batch statistics of every train-mode batch norm to the
    /// running buffers: `running = (1 - momentum) * running + momentum * batch`.
    pub fn commit_stats(&mut self, store: &mut ParamStore<T>) {
        for up in self.bn_updates.drain(..) {
            for (id, batch) in [(up.stats.mean, &up.mean), (up.stats.var, &up.var)] {
                let run = store.buffer_mut(id).value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = (T::one() - up.momentum) * *r + up.momentum * b;
                }
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let requires_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter; its gradient is accumulated by `backward`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.param(id).value.clone(), Op::Param(id))
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{dout}]", self.value(b).shape()),
                ));
            }
        }
        let rows = self.value(x).rows();
        let mut out = Tensor::zeros(&with_last(&xs, dout));
        gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            Trans::N,
            self.value(w).data(),
            Trans::N,
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data();
            for row in out.data_mut().chunks_exact_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    /// Adds the vector `b` to every row of `x` along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("x {:?}, bias {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x.0, s))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x.0))
    }

    /// Batch normalization over every non-channel axis.
    ///
    /// Train mode normalizes with batch statistics and queues a running
    /// statistics update (see [`Graph::commit_stats`]); eval mode uses the
    /// running statistics from `store`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        stats: BnStats,
        cfg: BnConfig,
    ) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(x).ndim() == 0 || self.value(x).rows() == 0 {
            return Err(Error::shape("batch_norm", "empty input"));
        }
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine {:?}, channels {c}", self.shape(v)),
                ));
            }
        }
        let eps = T::of(cfg.eps);
        let n = self.value(x).rows();
        let shape = self.value(x).shape().to_vec();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        match self.mode {
            Mode::Train => {
                let xd = self.value(x).data();
                let mut sum = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    for (s, &v) in sum.iter_mut().zip(row) {
                        *s += v.f64();
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
                let mut sq = vec![0.0f64; c];
                for row in xd.chunks_exact(c) {
                    for ((s, &v), &m) in sq.iter_mut().zip(row).zip(&mean) {
                        let d = v.f64() - m;
                        *s += d * d;
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
                let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + cfg.eps).sqrt())).collect();
                let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
                let mut xhat = Tensor::zeros(&shape);
                let mut out = Tensor::zeros(&shape);
                for ((xr, hr), or) in xd
                    .chunks_exact(c)
                    .zip(xhat.data_mut().chunks_exact_mut(c))
                    .zip(out.data_mut().chunks_exact_mut(c))
                {
                    for j in 0..c {
                        let h = (xr[j] - mean_t[j]) * inv_std[j];
                        hr[j] = h;
                        or[j] = g[j] * h + bt[j];
                    }
                }
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                self.bn_updates.push(BnUpdate {
                    stats,
                    mean: mean_t,
                    var: var.iter().map(|&v| T::of(v * unbias)).collect(),
                    momentum: T::of(cfg.momentum),
                });
                Ok(self.push(
                    out,
                    Op::BatchNorm {
                        x: x.0,
                        gamma: gamma.0,
                        beta: beta.0,
                        xhat,
                        inv_std,
                    },
                ))
            }
            Mode::Eval => {
                let mean = store.buffer(stats.mean).value.data().to_vec();
                let var = store.buffer(stats.var).value.data();
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics width"));
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut out = Tensor::zeros(&shape);
                for (xr, or) in self
                    .value(x)
                    .data()
                    .chunks_exact(c)
                    .zip(out.data_mut().chunks_exact_mut(c))
                {
                    for j in 0..c {
                        or[j] = g[j] * (xr[j] - mean[j]) * inv_std[j] + bt[j];
                    }
                }
                Ok(self.push(
                    out,
                    Op::BatchNormEval {
                        x: x.0,
                        gamma: gamma.0,
                        beta: beta.0,
                        mean,
                        inv_std,
                    },
                ))
            }
        }
    }

    /// Maximum over `axis`. Gradients flow only to the argmax position
    /// (first occurrence on ties).
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("max_reduce", format!("axis {axis} for {shape:?}")));
        }
        let k = shape[axis];
        if k == 0 {
            return Err(Error::shape("max_reduce", "empty reduction axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let base = o * k * inner;
            let ob = &mut out[o * inner..(o + 1) * inner];
            ob.copy_from_slice(&xd[base..base + inner]);
            for j in 1..k {
                let row = &xd[base + j * inner..base + (j + 1) * inner];
                for (o, &v) in ob.iter_mut().zip(row) {
                    *o = if v > *o { v } else { *o };
                }
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            out,
            Op::MaxReduce {
                x: x.0,
                outer,
                k,
                inner,
            },
        ))
    }

    /// Selects rows of `x` (viewed as `[rows, cols]`); output is
    /// `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let idx = to_u32(idx, xv.rows())?;
        let xd = xv.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&xd[i as usize * c..(i as usize + 1) * c]);
        }
        let out = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(out, Op::GatherRows { x: x.0, idx }))
    }

    /// Neighborhood-relative rows: for center `i` and neighbor slot `j`,
    /// `out[i, j] = x[neighbors[i*k + j]] - x[centers[i]]`. Output is
    /// `[centers.len(), k, cols]`.
    pub fn group_relative(&mut self, x: Var, centers: &[usize], neighbors: &[usize], k: usize) -> Result<Var> {
        if k == 0 || neighbors.len() != centers.len() * k {
            return Err(Error::shape(
                "group_relative",
                format!("{} neighbors for {} centers, k={k}", neighbors.len(), centers.len()),
            ));
        }
        let xv = self.value(x);
        let c = xv.cols();
        let n = xv.rows();
        let centers = to_u32(centers, n)?;
        let neighbors = to_u32(neighbors, n)?;
        let xd = xv.data();
        let m = centers.len();
        let mut out = vec![T::zero(); m * k * c];
        for (i, &ci) in centers.iter().enumerate() {
            let cr = &xd[ci as usize * c..(ci as usize + 1) * c];
            for j in 0..k {
                let ni = neighbors[i * k + j] as usize;
                let nr = &xd[ni * c..(ni + 1) * c];
                let or = &mut out[(i * k + j) * c..(i * k + j + 1) * c];
                for ((o, &a), &b) in or.iter_mut().zip(nr).zip(cr) {
                    *o = a - b;
                }
            }
        }
        let out = Tensor::new(&[m, k, c], out)?;
        Ok(self.push(
            out,
            Op::GroupRelative {
                x: x.0,
                centers,
                neighbors,
                k,
            },
        ))
    }

    /// Concatenates along the last axis; all inputs must agree on every
    /// leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat of zero tensors"));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            total += self.value(v).cols();
        }
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for &v in xs {
            let t = self.value(v);
            let c = t.cols();
            for (r, src) in t.data().chunks_exact(c).enumerate() {
                out[r * total + off..r * total + off + c].copy_from_slice(src);
            }
            off += c;
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        ))
    }

    /// Per-channel affine map over the last axis.
    pub fn channel_affine(&mut self, x: Var, alpha: Var, beta: Var, order: AffineOrder) -> Result<Var> {
        let c = self.value(x).cols();
        for v in [alpha, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "channel_affine",
                    format!("parameter {:?} for {c} channels", self.shape(v)),
                ));
            }
        }
        let a = self.value(alpha).data();
        let b = self.value(beta).data();
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        for (xr, or) in xv.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
            for j in 0..c {
                or[j] = match order {
                    AffineOrder::ScaleShift => a[j] * xr[j] + b[j],
                    AffineOrder::ShiftScale => a[j] * (xr[j] + b[j]),
                };
            }
        }
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x: x.0,
                alpha: alpha.0,
                beta: beta.0,
                order,
            },
        ))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p}")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x: x.0, mask }))
    }

    /// `out[r] = sum_j weights[r*k + j] * x[idx[r*k + j]]`; output is
    /// `[idx.len() / k, cols]`.
    pub fn weighted_gather(&mut self, x: Var, idx: &[usize], weights: &[T], k: usize) -> Result<Var> {
        if k == 0 || !idx.len().is_multiple_of(k) || idx.len() != weights.len() {
            return Err(Error::shape(
                "weighted_gather",
                format!("{} indices, {} weights, k={k}", idx.len(), weights.len()),
            ));
        }
        let xv = self.value(x);
        let c = xv.cols();
        let idx = to_u32(idx, xv.rows())?;
        let r = idx.len() / k;
        let xd = xv.data();
        let mut out = vec![T::zero(); r * c];
        for (row, or) in out.chunks_exact_mut(c).enumerate() {
            for j in 0..k {
                let w = weights[row * k + j];
                let src = idx[row * k + j] as usize;
                for (o, &v) in or.iter_mut().zip(&xd[src * c..(src + 1) * c]) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::new(&[r, c], out)?;
        Ok(self.push(
            out,
            Op::WeightedGather {
                x: x.0,
                idx,
                weights: weights.to_vec(),
                k,
            },
        ))
    }

    /// Repeats each row `reps` times consecutively: `[b, c] -> [b*reps, c]`.
    pub fn repeat_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        if reps == 0 {
            return Err(Error::invalid("repeat_rows with zero repetitions"));
        }
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len() * reps);
        for row in xv.data().chunks_exact(c) {
            for _ in 0..reps {
                out.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[xv.rows() * reps, c], out)?;
        Ok(self.push(out, Op::RepeatRows { x: x.0, reps }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    /// Softmax cross entropy with label smoothing (`1 - eps` on the target,
    /// `eps / (C - 1)` elsewhere). With `class_weights`, each sample's term
    /// is scaled by the weight of its target and the total is divided by the
    /// sum of applied weights; otherwise it is the plain mean.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let (n, c) = self.check_logits(logits, targets)?;
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing}")));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::shape("cross_entropy", "class weight count"));
            }
        }
        let on = 1.0 - smoothing;
        let off = if c > 1 { smoothing / (c as f64 - 1.0) } else { 0.0 };
        let ld = self.value(logits).data();
        let mut dlogits = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        let mut norm = 0.0f64;
        let mut probs = vec![0.0f64; c];
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * c..(i + 1) * c];
            let lse = log_softmax_into(row, &mut probs);
            let w = class_weights.map_or(1.0, |w| w[t].f64());
            let mut loss = 0.0;
            for j in 0..c {
                let q = if j == t { on } else { off };
                loss -= q * (row[j].f64() - lse);
                dlogits[i * c + j] = T::of(w * (probs[j] - q));
            }
            total += w * loss;
            norm += w;
        }
        if norm <= 0.0 {
            return Err(Error::invalid("cross entropy weights sum to zero"));
        }
        let inv = T::of(1.0 / norm);
        dlogits.iter_mut().for_each(|d| *d *= inv);
        let dl = Tensor::new(&[n, c], dlogits)?;
        Ok(self.push(
            Tensor::scalar(T::of(total / norm)),
            Op::Loss {
                logits: logits.0,
                dlogits: dl,
            },
        ))
    }

    /// Mean focal loss `(1 - p_t)^gamma * (-ln p_t)`.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64) -> Result<Var> {
        let (n, c) = self.check_logits(logits, targets)?;
        if gamma < 0.0 {
            return Err(Error::invalid(format!("focal gamma {gamma}")));
        }
        let ld = self.value(logits).data();
        let mut dlogits = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        let mut probs = vec![0.0f64; c];
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * c..(i + 1) * c];
            let lse = log_softmax_into(row, &mut probs);
            let log_p = row[t].f64() - lse;
            let p = probs[t];
            let one_m = (1.0 - p).max(0.0);
            let modulator = one_m.powf(gamma);
            total += -modulator * log_p;
            // d/dp of -(1-p)^g ln p
            let dldp = if gamma == 0.0 {
                -1.0 / p
            } else {
                gamma * one_m.powf(gamma - 1.0) * log_p - modulator / p
            };
            for j in 0..c {
                let dp = p * (if j == t { 1.0 } else { 0.0 } - probs[j]);
                dlogits[i * c + j] = T::of(dldp * dp / n as f64);
            }
        }
        let dl = Tensor::new(&[n, c], dlogits)?;
        Ok(self.push(
            Tensor::scalar(T::of(total / n as f64)),
            Op::Loss {
                logits: logits.0,
                dlogits: dl,
            },
        ))
    }

    fn check_logits(&self, logits: Var, targets: &[usize]) -> Result<(usize, usize)> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "loss",
                format!("logits {:?} for {} targets", lv.shape(), targets.len()),
            ));
        }
        let c = lv.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IndexOutOfRange { index: bad, len: c });
        }
        Ok((lv.rows(), c))
    }

    /// Back-propagates from a scalar `loss`, accumulating into the gradients
    /// of every parameter reachable from it. Unreachable parameters are left
    /// untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, gout, &mut grads, store);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], i: usize) -> &'g mut [T] {
        grads[i]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()))
            .data_mut()
    }

    /// Adds `t` to the gradient of node `i`, adopting the buffer when `i`
    /// has none yet.
    fn deposit(&self, grads: &mut [Option<Tensor<T>>], i: usize, t: Tensor<T>) {
        match &mut grads[i] {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(t),
        }
    }

    /// Ops whose input gradient is an elementwise function of the output
    /// gradient reuse its buffer; the rest read it by reference.
    fn backward_node(
        &self,
        node: &Node<T>,
        mut gout: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) {
        match node.op {
            Op::Add(a, b) => match (self.wants(a), self.wants(b)) {
                (true, true) => {
                    self.deposit(grads, a, gout.clone());
                    self.deposit(grads, b, gout);
                }
                (true, false) => self.deposit(grads, a, gout),
                (false, true) => self.deposit(grads, b, gout),
                (false, false) => {}
            },
            Op::AddBias(x, b) => {
                if self.wants(b) {
                    let gb = self.grad_buf(grads, b);
                    let c = gb.len();
                    for row in gout.data().chunks_exact(c) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                if self.wants(x) {
                    self.deposit(grads, x, gout);
                }
            }
            Op::Relu(x) if self.wants(x) => {
                let xv = self.nodes[x].value.data();
                for (v, &xi) in gout.data_mut().iter_mut().zip(xv) {
                    *v = if xi > T::zero() { *v } else { T::zero() };
                }
                self.deposit(grads, x, gout);
            }
            Op::Scale(x, s) if self.wants(x) => {
                gout.data_mut().iter_mut().for_each(|v| *v = *v * s);
                self.deposit(grads, x, gout);
            }
            Op::Reshape(x) if self.wants(x) => {
                let shape = self.nodes[x].value.shape();
                let t = gout.reshape(shape).expect("reshape preserves length");
                self.deposit(grads, x, t);
            }
            _ => self.backward_node_ref(node, &gout, grads, store),
        }
    }

    fn backward_node_ref(
        &self,
        node: &Node<T>,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) {
        let g = gout.data();
        match &node.op {
            Op::Leaf | Op::Add(..) | Op::AddBias(..) | Op::Scale(..) | Op::Relu(_) | Op::Reshape(_) => {}
            Op::Param(pid) => {
                for (a, &b) in store.param_mut(*pid).grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if self.wants(*x) {
                    let gx = self.grad_buf(grads, *x);
                    gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        g,
                        Trans::N,
                        wv.data(),
                        Trans::T,
                        T::one(),
                        gx,
                    );
                }
                if self.wants(*w) {
                    let gw = self.grad_buf(grads, *w);
                    gemm(
                        din,
                        rows,
                        dout,
                        T::one(),
                        xv.data(),
                        Trans::T,
                        g,
                        Trans::N,
                        T::one(),
                        gw,
                    );
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = self.grad_buf(grads, *b);
                        for row in g.chunks_exact(dout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (i, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(i) {
                        let o = self.nodes[other].value.data();
                        for ((d, &v), &ov) in self.grad_buf(grads, i).iter_mut().zip(g).zip(o) {
                            *d += v * ov;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = xhat.rows();
                let h = xhat.data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gh = vec![0.0f64; c];
                for (gr, hr) in g.chunks_exact(c).zip(h.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j].f64();
                        sum_gh[j] += (gr[j] * hr[j]).f64();
                    }
                }
                if self.wants(*gamma) {
                    for (d, &s) in self.grad_buf(grads, *gamma).iter_mut().zip(&sum_gh) {
                        *d += T::of(s);
                    }
                }
                if self.wants(*beta) {
                    for (d, &s) in self.grad_buf(grads, *beta).iter_mut().zip(&sum_g) {
                        *d += T::of(s);
                    }
                }
                if self.wants(*x) {
                    let gam = self.nodes[*gamma].value.data();
                    let nf = n as f64;
                    let mean_g: Vec<T> = sum_g.iter().map(|s| T::of(s / nf)).collect();
                    let mean_gh: Vec<T> = sum_gh.iter().map(|s| T::of(s / nf)).collect();
                    let scale: Vec<T> = (0..c).map(|j| gam[j] * inv_std[j]).collect();
                    let gx = self.grad_buf(grads, *x);
                    for ((dr, gr), hr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(h.chunks_exact(c)) {
                        for j in 0..c {
                            dr[j] += scale[j] * (gr[j] - mean_g[j] - hr[j] * mean_gh[j]);
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let xv = self.nodes[*x].value.data();
                if self.wants(*gamma) {
                    let gg = self.grad_buf(grads, *gamma);
                    for (gr, xr) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * (xr[j] - mean[j]) * inv_std[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.nodes[*gamma].value.data();
                    let gx = self.grad_buf(grads, *x);
                    for (dr, gr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            dr[j] += gr[j] * gam[j] * inv_std[j];
                        }
                    }
                }
            }
            &Op::MaxReduce { x, outer, k, inner } => {
                if self.wants(x) {
                    let xd = self.nodes[x].value.data();
                    let od = node.value.data();
                    let gx = self.grad_buf(grads, x);
                    // `open[i]` is 1 until the first maximal entry of column
                    // `i` has taken its gradient.
                    let mut open = vec![T::one(); inner];
                    for o in 0..outer {
                        open.fill(T::one());
                        let (ob, gb) = (&od[o * inner..(o + 1) * inner], &g[o * inner..(o + 1) * inner]);
                        for j in 0..k {
                            let at = (o * k + j) * inner;
                            let (xr, gr) = (&xd[at..at + inner], &mut gx[at..at + inner]);
                            let lanes = gr.iter_mut().zip(open.iter_mut()).zip(xr.iter().zip(ob).zip(gb));
                            for ((d, op), ((&xv, &m), &gv)) in lanes {
                                let hit = if xv == m { *op } else { T::zero() };
                                *d += hit * gv;
                                *op -= hit;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let c = gout.cols();
                    let gx = self.grad_buf(grads, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        for (d, &v) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::GroupRelative {
                x,
                centers,
                neighbors,
                k,
            } => {
                if self.wants(*x) {
                    let c = gout.cols();
                    let gx = self.grad_buf(grads, *x);
                    for (i, &ci) in centers.iter().enumerate() {
                        let ci = ci as usize;
                        for j in 0..*k {
                            let ni = neighbors[i * k + j] as usize;
                            let gr = &g[(i * k + j) * c..(i * k + j + 1) * c];
                            for (ch, &v) in gr.iter().enumerate() {
                                gx[ni * c + ch] += v;
                                gx[ci * c + ch] -= v;
                            }
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let total = gout.cols();
                let mut off = 0;
                for &i in xs {
                    let c = self.nodes[i].value.cols();
                    if self.wants(i) {
                        let gi = self.grad_buf(grads, i);
                        for (dr, gr) in gi.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                            for (d, &v) in dr.iter_mut().zip(&gr[off..off + c]) {
                                *d += v;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ChannelAffine { x, alpha, beta, order } => {
                let xv = self.nodes[*x].value.data();
                let a = self.nodes[*alpha].value.data();
                let b = self.nodes[*beta].value.data();
                let c = a.len();
                if self.wants(*alpha) {
                    let ga = self.grad_buf(grads, *alpha);
                    for (gr, xr) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for j in 0..c {
                            ga[j] += match order {
                                AffineOrder::ScaleShift => gr[j] * xr[j],
                                AffineOrder::ShiftScale => gr[j] * (xr[j] + b[j]),
                            };
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = self.grad_buf(grads, *beta);
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] += match order {
                                AffineOrder::ScaleShift => gr[j],
                                AffineOrder::ShiftScale => gr[j] * a[j],
                            };
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (dr, gr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            dr[j] += gr[j] * a[j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    for ((d, &v), &m) in self.grad_buf(grads, *x).iter_mut().zip(g).zip(mask) {
                        *d += v * m;
                    }
                }
            }
            Op::WeightedGather { x, idx, weights, k } => {
                if self.wants(*x) {
                    let c = gout.cols();
                    let gx = self.grad_buf(grads, *x);
                    for (row, gr) in g.chunks_exact(c).enumerate() {
                        for j in 0..*k {
                            let w = weights[row * k + j];
                            let dst = idx[row * k + j] as usize;
                            for (d, &v) in gx[dst * c..(dst + 1) * c].iter_mut().zip(gr) {
                                *d += w * v;
                            }
                        }
                    }
                }
            }
            Op::RepeatRows { x, reps } => {
                if self.wants(*x) {
                    let c = gout.cols();
                    let gx = self.grad_buf(grads, *x);
                    for (r, dr) in gx.chunks_exact_mut(c).enumerate() {
                        for t in 0..*reps {
                            let src = &g[(r * reps + t) * c..(r * reps + t + 1) * c];
                            for (d, &v) in dr.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = g[0];
                    self.grad_buf(grads, *x).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Loss { logits, dlogits } => {
                if self.wants(*logits) {
                    let s = g[0];
                    for (d, &v) in self.grad_buf(grads, *logits).iter_mut().zip(dlogits.data()) {
                        *d += s * v;
                    }
                }
            }
        }
    }
}

/// Writes softmax probabilities of `row` into `probs` and returns the
/// log-sum-exp.
fn log_softmax_into<T: Real>(row: &[T], probs: &mut [f64]) -> f64 {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &v) in probs.iter_mut().zip(row) {
        *p = (v.f64() - max).exp();
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
    max + z.ln()
}
