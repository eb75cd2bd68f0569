//! A small reverse-mode autograd tape over [`Tensor`]s.
//!
//! Activations are kept in a token layout: a batch of feature maps with `N`
//! spatial positions and `C` channels is a `[batch * N, C]` matrix whose row
//! `b * N + y * W + x` holds the channels of pixel `(y, x)` of image `b`.
//! Convolutions operate directly on that layout through im2col.

use std::collections::HashMap;

use crate::error::{CvtError, Result};
use crate::losses::{self, ContrastiveParams};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter tensors plus non-trainable state (running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Registers state that is saved with the model but never receives gradient.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.slots.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.slots.push(Slot {
            name,
            value,
            trainable,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.slots[id.0].trainable)
    }

    /// Total number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.value.len())
            .sum()
    }
}

/// Geometry of a square-kernel 2-D convolution over token-layout input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// For every output position and patch entry, the flat input index or
    /// `None` for zero padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let plen = self.patch_len();
        let c = self.in_channels;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width;
                            for ch in 0..c {
                                // patch ordering (channel, ky, kx) matches a [O, C, k, k] kernel
                                let col = (ch * k + ky) * k + kx;
                                let src = inside.then(|| {
                                    ((b * self.height + iy as usize) * self.width + ix as usize)
                                        * c
                                        + ch
                                });
                                f(row * plen + col, col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    GroupedMatMul { a: Var, b: Var, groups: usize },
    Add(Var, Var),
    AddRowBias { x: Var, bias: Var },
    AddTiled { x: Var, tile: Var },
    Scale(Var, f64),
    Gelu(Var),
    Mask { x: Var, mask: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    FixedNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    GroupMeanRows { x: Var, group: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows { x: Var, index: Vec<usize> },
    CrossEntropy { logits: Var, grad: Tensor },
    Contrastive { z: Var, focuses: Option<Var>, dz: Tensor, dfocus: Option<Tensor> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Per-column batch statistics returned by [`Graph::batch_norm`] so the caller
/// can maintain running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (falls back to the biased estimate for a single row).
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(CvtError::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter. Repeated requests reuse one node so that
    /// all uses accumulate into a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// `a [m,k] x b [k,n]`, or `a x bᵀ` with `b [n,k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != bk {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), trans_b, 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    /// Block-diagonal product: `a` holds `groups` stacked `[n, m]` blocks and
    /// `b` holds `groups` stacked `[m, d]` blocks; block `g` of the output is
    /// `a_g x b_g`.
    pub fn grouped_matmul(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if groups == 0 || av.rows() % groups != 0 || bv.rows() % groups != 0 {
            return shape_err(format!("grouped matmul with {groups} groups"));
        }
        let (n, m) = (av.rows() / groups, av.cols());
        let (bm, d) = (bv.rows() / groups, bv.cols());
        if m != bm {
            return shape_err(format!(
                "grouped matmul blocks [{n},{m}] x [{bm},{d}]"
            ));
        }
        let mut out = Tensor::zeros(&[groups * n, d]);
        for g in 0..groups {
            gemm(
                n,
                m,
                d,
                1.0,
                &av.data()[g * n * m..(g + 1) * n * m],
                false,
                &bv.data()[g * m * d..(g + 1) * m * d],
                false,
                0.0,
                &mut out.data_mut()[g * n * d..(g + 1) * n * d],
            );
        }
        Ok(self.push(out, Op::GroupedMatMul { a, b, groups }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[c]` vector to every row of an `[r, c]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return shape_err(format!("bias {:?} for rows of width {c}", bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias { x, bias }))
    }

    /// Adds a `[t, c]` tile to an `[r, c]` matrix; row `i` receives tile row `i % t`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(tile));
        let (t, c) = (tv.rows(), tv.cols());
        if xv.cols() != c || t == 0 || xv.rows() % t != 0 {
            return shape_err(format!("tile {:?} over {:?}", tv.shape(), xv.shape()));
        }
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            for (o, b) in row.iter_mut().zip(tv.row(i % t)) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddTiled { x, tile }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    /// Element-wise product with a fixed mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return shape_err("dropout mask length".into());
        }
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Mask { x, mask }))
    }

    /// Convolution of a token-layout batch with a `[O, C, k, k]` kernel and `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let plen = geom.patch_len();
        let out_c = wv.rows();
        if xv.rows() != geom.batch * geom.height * geom.width
            || xv.cols() != geom.in_channels
            || wv.cols() != plen
            || bv.len() != out_c
        {
            return shape_err(format!(
                "conv input {:?} kernel {:?} for {:?}",
                xv.shape(),
                wv.shape(),
                geom
            ));
        }
        let positions = geom.batch * geom.out_height() * geom.out_width();
        let mut cols = vec![0.0; positions * plen];
        let xd = xv.data();
        geom.for_each_tap(|dst, _, src| {
            if let Some(s) = src {
                cols[dst] = xd[s];
            }
        });
        let mut out = Tensor::zeros(&[positions, out_c]);
        gemm(positions, plen, out_c, 1.0, &cols, false, wv.data(), true, 0.0, out.data_mut());
        for row in out.data_mut().chunks_mut(out_c) {
            for (o, bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return shape_err(format!("columns {start}..{} of {c}", start + len));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for i in 0..xv.rows() {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(&[xv.rows(), len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return shape_err("concat of nothing".into()),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat of differing row counts".into());
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_vec(&[rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > xv.rows() {
            return shape_err(format!("rows {start}..{} of {}", start + len, xv.rows()));
        }
        let out = Tensor::from_vec(&[len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Batch normalization of each column over all rows, using the batch's
    /// own statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 || self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("batch norm over {:?}", xv.shape()));
        }
        let mut mean = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / r as f64).collect();
        let unbiased: Vec<f64> = if r > 1 {
            var.iter().map(|v| v / (r - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Column normalization with externally supplied statistics (inference-mode
    /// batch norm). Gradient flows to `x`, `gamma` and `beta`.
    pub fn fixed_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).cols();
        if mean.len() != c || var.len() != c || self.value(gamma).len() != c {
            return shape_err("fixed norm statistics".into());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_normalize(x, gamma, beta, mean, &inv_std);
        Ok(self.push(
            out,
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let xv = self.value(x);
        let c = xv.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xv.data().to_vec();
        for row in xhat.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut out = xv.clone();
        for (orow, hrow) in out.data_mut().chunks_mut(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                orow[j] = g[j] * hrow[j] + b[j];
            }
        }
        (out, xhat)
    }

    /// Layer normalization of each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("layer norm affine".into());
        }
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xhat.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        for (orow, hrow) in out.data_mut().chunks_mut(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                orow[j] = g[j] * hrow[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Mean over consecutive groups of `group` rows: `[g * group, c] -> [g, c]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if group == 0 || !xv.rows().is_multiple_of(group) {
            return shape_err(format!("pooling {} rows in groups of {group}", xv.rows()));
        }
        let g = xv.rows() / group;
        let mut out = Tensor::zeros(&[g, c]);
        for (i, row) in xv.data().chunks(c).enumerate() {
            for (o, v) in out.row_mut(i / group).iter_mut().zip(row) {
                *o += v / group as f64;
            }
        }
        Ok(self.push(out, Op::GroupMeanRows { x, group }))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return shape_err(format!("row {bad} of {}", xv.rows()));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(&[index.len(), c], out)?;
        Ok(self.push(out, Op::GatherRows { x, index }))
    }

    /// `sum_i weights[i] * CE(logits[i], labels[i])` as a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (value, grad) = losses::weighted_cross_entropy(self.value(logits), labels, weights)?;
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { logits, grad }))
    }

    /// Focal contrastive loss over unit-norm embedding rows and (optionally)
    /// unit-norm focus rows tagged with their classes. With no focuses this is
    /// the supervised contrastive loss.
    pub fn contrastive(
        &mut self,
        z: Var,
        labels: &[usize],
        focuses: Option<(Var, &[usize])>,
        params: ContrastiveParams,
    ) -> Result<Var> {
        let empty = Tensor::zeros(&[0, self.value(z).cols()]);
        let (fvar, fvalue, fclasses) = match focuses {
            Some((f, classes)) => (Some(f), self.value(f).clone(), classes),
            None => (None, empty, &[][..]),
        };
        let out = losses::fc_loss_with_grad(self.value(z), labels, &fvalue, fclasses, params)?;
        Ok(self.push(
            Tensor::scalar(out.value),
            Op::Contrastive {
                z,
                focuses: fvar,
                dz: out.grad_z,
                dfocus: fvar.map(|_| out.grad_focuses),
            },
        ))
    }

    /// `sum_k w_k * s_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return shape_err(format!("weighted sum of non-scalar {:?}", t.shape()));
            }
            total += w * t.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .filter_map(|(p, i)| grads[i].clone().map(|g| (p, g)))
            .collect();
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), gy.cols());
                let mut ga = Tensor::zeros(av.shape());
                // dA = dY · op(B)ᵀ
                gemm(m, n, k, 1.0, gy.data(), false, bv.data(), !trans_b, 0.0, ga.data_mut());
                let mut gb = Tensor::zeros(bv.shape());
                if *trans_b {
                    // B is [n, k]: dB = dYᵀ · A
                    gemm(n, m, k, 1.0, gy.data(), true, av.data(), false, 0.0, gb.data_mut());
                } else {
                    gemm(k, m, n, 1.0, av.data(), true, gy.data(), false, 0.0, gb.data_mut());
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::GroupedMatMul { a, b, groups } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let g = *groups;
                let (n, m) = (av.rows() / g, av.cols());
                let d = bv.cols();
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..g {
                    let gyb = &gy.data()[i * n * d..(i + 1) * n * d];
                    gemm(
                        n,
                        d,
                        m,
                        1.0,
                        gyb,
                        false,
                        &bv.data()[i * m * d..(i + 1) * m * d],
                        true,
                        0.0,
                        &mut ga.data_mut()[i * n * m..(i + 1) * n * m],
                    );
                    gemm(
                        m,
                        n,
                        d,
                        1.0,
                        &av.data()[i * n * m..(i + 1) * n * m],
                        true,
                        gyb,
                        false,
                        0.0,
                        &mut gb.data_mut()[i * m * d..(i + 1) * m * d],
                    );
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::AddRowBias { x, bias } => {
                let c = gy.cols();
                let mut gb = Tensor::zeros(self.value(*bias).shape());
                for row in gy.data().chunks(c) {
                    for (o, v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(grads, *x, gy.clone());
                acc(grads, *bias, gb);
            }
            Op::AddTiled { x, tile } => {
                let tv = self.value(*tile);
                let t = tv.rows();
                let mut gt = Tensor::zeros(tv.shape());
                for i in 0..gy.rows() {
                    for (o, v) in gt.row_mut(i % t).iter_mut().zip(gy.row(i)) {
                        *o += v;
                    }
                }
                acc(grads, *x, gy.clone());
                acc(grads, *tile, gt);
            }
            Op::Scale(x, s) => {
                let mut g = gy.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= s);
                acc(grads, *x, g);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut g = gy.clone();
                for (o, xi) in g.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_grad(*xi);
                }
                acc(grads, *x, g);
            }
            Op::Mask { x, mask } => {
                let mut g = gy.clone();
                for (o, m) in g.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                acc(grads, *x, g);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let wv = self.value(*w);
                let (positions, out_c) = (gy.rows(), gy.cols());
                let plen = geom.patch_len();
                let mut gw = Tensor::zeros(wv.shape());
                // dW [O, P] = dYᵀ [O, positions] · cols [positions, P]
                gemm(out_c, positions, plen, 1.0, gy.data(), true, cols, false, 0.0, gw.data_mut());
                let mut gb = Tensor::zeros(self.value(*b).shape());
                for row in gy.data().chunks(out_c) {
                    for (o, v) in gb.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let mut gcols = vec![0.0; positions * plen];
                gemm(positions, out_c, plen, 1.0, gy.data(), false, wv.data(), false, 0.0, &mut gcols);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let gxd = gx.data_mut();
                geom.for_each_tap(|src, _, dst| {
                    if let Some(d) = dst {
                        gxd[d] += gcols[src];
                    }
                });
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let len = gy.cols();
                let mut g = Tensor::zeros(xv.shape());
                for i in 0..gy.rows() {
                    g.row_mut(i)[*start..start + len].copy_from_slice(gy.row(i));
                }
                acc(grads, *x, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut g = Tensor::zeros(pv.shape());
                    for i in 0..gy.rows() {
                        g.row_mut(i).copy_from_slice(&gy.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    acc(grads, p, g);
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut g = Tensor::zeros(xv.shape());
                g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                acc(grads, *x, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let (r, c) = (gy.rows(), gy.cols());
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (grow, hrow) in gy.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_dy[j] += grow[j];
                        sum_dy_xhat[j] += grow[j] * hrow[j];
                    }
                }
                let mut gx = Tensor::zeros(gy.shape());
                let rn = r as f64;
                for ((orow, grow), hrow) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(gy.data().chunks(c))
                    .zip(xhat.chunks(c))
                {
                    for j in 0..c {
                        orow[j] = gv[j] * inv_std[j] / rn
                            * (rn * grow[j] - sum_dy[j] - hrow[j] * sum_dy_xhat[j]);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, Tensor::from_vec(&[c], sum_dy_xhat).unwrap());
                acc(grads, *beta, Tensor::from_vec(&[c], sum_dy).unwrap());
            }
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let c = gy.cols();
                let mut gx = gy.clone();
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ((orow, grow), hrow) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(gy.data().chunks(c))
                    .zip(xhat.chunks(c))
                {
                    for j in 0..c {
                        orow[j] = grow[j] * gv[j] * inv_std[j];
                        gg[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, Tensor::from_vec(&[c], gg).unwrap());
                acc(grads, *beta, Tensor::from_vec(&[c], gbeta).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let c = gy.cols();
                let cn = c as f64;
                let mut gx = Tensor::zeros(gy.shape());
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for (i, ((orow, grow), hrow)) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(gy.data().chunks(c))
                    .zip(xhat.chunks(c))
                    .enumerate()
                {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let d = grow[j] * gv[j];
                        sum_d += d;
                        sum_dh += d * hrow[j];
                        gg[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                    }
                    for j in 0..c {
                        let d = grow[j] * gv[j];
                        orow[j] = inv_std[i] / cn * (cn * d - sum_d - hrow[j] * sum_dh);
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, Tensor::from_vec(&[c], gg).unwrap());
                acc(grads, *beta, Tensor::from_vec(&[c], gbeta).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut g = gy.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (o, yv) in grow.iter_mut().zip(yrow) {
                        *o = yv * (*o - dot);
                    }
                }
                acc(grads, *x, g);
            }
            Op::GroupMeanRows { x, group } => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.shape());
                let scale = 1.0 / *group as f64;
                for i in 0..xv.rows() {
                    for (o, v) in g.row_mut(i).iter_mut().zip(gy.row(i / group)) {
                        *o = v * scale;
                    }
                }
                acc(grads, *x, g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut g = gy.clone();
                for ((grow, yrow), n) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(norms) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (o, yv) in grow.iter_mut().zip(yrow) {
                        *o = (*o - yv * dot) / n;
                    }
                }
                acc(grads, *x, g);
            }
            Op::GatherRows { x, index } => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                for (i, &src) in index.iter().enumerate() {
                    for (o, v) in g.row_mut(src).iter_mut().zip(gy.row(i)) {
                        *o += v;
                    }
                }
                acc(grads, *x, g);
            }
            Op::CrossEntropy { logits, grad } => {
                let s = gy.item();
                let mut g = grad.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= s);
                acc(grads, *logits, g);
            }
            Op::Contrastive {
                z,
                focuses,
                dz,
                dfocus,
            } => {
                let s = gy.item();
                let mut g = dz.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= s);
                acc(grads, *z, g);
                if let (Some(f), Some(df)) = (focuses, dfocus) {
                    let mut g = df.clone();
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                    acc(grads, *f, g);
                }
            }
            Op::WeightedSum(terms) => {
                let s = gy.item();
                for &(v, w) in terms {
                    acc(grads, v, Tensor::scalar(s * w));
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of any node; `None` if the node does not influence the root.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
