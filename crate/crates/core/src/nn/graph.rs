//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Parameters are copied in from a
//! [`ParamStore`] on first use; [`Gradients::param_grads`] hands their
//! gradients back by name.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 3x3x3, stride-2, padding-1 patch extraction over a
/// `[H, W, D, C]` volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub input: [usize; 3],
    pub channels: usize,
}

impl PatchGeometry {
    pub fn output(&self) -> [usize; 3] {
        self.input.map(|d| d.div_ceil(2))
    }

    pub fn patch_len(&self) -> usize {
        27 * self.channels
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LogSoftmaxRows(Var),
    Nll {
        x: Var,
        targets: Vec<usize>,
    },
    Trilinear {
        fmap: Var,
        taps: Vec<[(usize, f64); 8]>,
    },
    Patches {
        x: Var,
        geometry: PatchGeometry,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    check_finite: bool,
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `C = op(A) * op(B) + beta * C` with row-major storage; `ta`/`tb` read the
/// operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m*k, k*n and m*n elements addressed
    // by the strides above (checked by the debug assertions).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return shape_err(format!("{what}: expected a matrix, got shape {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: cfg!(debug_assertions),
            fault: None,
        }
    }

    /// Enables or disables the per-op finiteness scan.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First non-finite forward value recorded, if any.
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match &self.fault {
            Some(f) => Err(Error::Numerical(f.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = match op {
            Op::Input | Op::Param => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].tracked),
        };
        if self.check_finite && self.fault.is_none() && !value.is_finite() {
            self.fault = Some(format!(
                "non-finite value produced by {} (node {})",
                op_name(&op),
                self.nodes.len()
            ));
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// Tracked leaf that is not a parameter (gradient checks w.r.t. inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Loads a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Param, &[]);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul lhs")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul rhs")?;
        if k != k2 {
            return shape_err(format!("matmul: [{m}, {k}] x [{k2}, {n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = matrix_dims(self.value(x), "add_bias")?;
        if self.value(b).numel() != n {
            return shape_err(format!(
                "add_bias: bias of {} for width {n}",
                self.value(b).numel()
            ));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, b), &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return shape_err(format!("layer_norm: gain/bias must have {n} values"));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Scaled dot-product attention applied independently to each row span
    /// `[start, end)` and each of `heads` column groups. `q`, `k`, `v` are
    /// `[T, C]` with `C % heads == 0`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (t, c) = matrix_dims(self.value(q), "attention q")?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "attention: width {c} is not divisible by {heads} heads"
            )));
        }
        if let Some(&(s, e)) = spans.iter().find(|&&(s, e)| s >= e || e > t) {
            return shape_err(format!("attention: span [{s}, {e}) invalid for {t} rows"));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; t * c];
        let mut probs = Vec::with_capacity(spans.iter().map(|(s, e)| (e - s).pow(2) * heads).sum());
        let mut row = Vec::new();
        for &(s, e) in spans {
            let len = e - s;
            for h in 0..heads {
                let off = h * d;
                for i in s..e {
                    let qi = &qs[i * c + off..i * c + off + d];
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in s..e {
                        let kj = &ks[j * c + off..j * c + off + d];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(dot);
                        row.push(dot);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    let oi = &mut out[i * c + off..i * c + off + d];
                    for (jj, r) in row.iter_mut().enumerate() {
                        *r /= z;
                        let vj = &vs[(s + jj) * c + off..(s + jj) * c + off + d];
                        oi.iter_mut().zip(vj).for_each(|(o, vv)| *o += *r * vv);
                    }
                    debug_assert_eq!(row.len(), len);
                    probs.extend_from_slice(&row);
                }
            }
        }
        let tensor = Tensor::new(vec![t, c], out)?;
        Ok(self.push(
            tensor,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities of the most recent forward pass through `node`,
    /// laid out span by span, head by head, as `len x len` row-major blocks.
    pub fn attention_probs(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (m, n) = (src.rows(), src.cols());
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return shape_err(format!("gather_rows: row {r} of {m}"));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let t = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(t, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = matrix_dims(self.value(a), "concat_rows")?;
        let (mb, nb) = matrix_dims(self.value(b), "concat_rows")?;
        if na != nb {
            return shape_err(format!("concat_rows: widths {na} and {nb}"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![ma + mb, na], data)?;
        Ok(self.push(t, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = matrix_dims(self.value(a), "concat_cols")?;
        let (mb, nb) = matrix_dims(self.value(b), "concat_cols")?;
        if ma != mb {
            return shape_err(format!("concat_cols: heights {ma} and {mb}"));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            data.extend_from_slice(&da[i * na..(i + 1) * na]);
            data.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let t = Tensor::new(vec![ma, na + nb], data)?;
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Scales each row to unit L2 norm. A zero row has no direction and is a
    /// numerical error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "normalize_rows")?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in data.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "row {i} has norm {norm}; cosine similarity is undefined"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::NormalizeRows { x, norms }, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = matrix_dims(self.value(x), "log_softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::LogSoftmaxRows(x), &[x]))
    }

    /// `-sum_i x[i, targets[i]]` over the rows of a log-probability matrix.
    pub fn nll(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "nll")?;
        if targets.len() != m {
            return Err(Error::Label(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Label(format!("target {t} out of range for {n} columns")));
        }
        let d = self.value(x).data();
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| d[i * n + t])
            .sum::<f64>();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        ))
    }

    /// Trilinear interpolation of a `[H, W, D, C]` feature grid at grid-unit
    /// positions. Positions outside the grid are clamped to its boundary;
    /// the number of clamped positions is returned alongside the `[P, C]`
    /// result.
    pub fn trilinear(&mut self, fmap: Var, positions: &[[f64; 3]]) -> Result<(Var, usize)> {
        let f = self.value(fmap);
        if f.rank() != 4 {
            return shape_err(format!("trilinear: expected [H, W, D, C], got {:?}", f.shape()));
        }
        let dims = [f.shape()[0], f.shape()[1], f.shape()[2]];
        let c = f.shape()[3];
        let mut clamped = 0;
        let mut taps = Vec::with_capacity(positions.len());
        for p in positions {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut frac = [0.0; 3];
            let mut was_clamped = false;
            for a in 0..3 {
                let max = (dims[a] - 1) as f64;
                let x = if p[a].is_nan() { 0.0 } else { p[a] };
                let xc = x.clamp(0.0, max);
                was_clamped |= xc != x;
                let l = xc.floor().min(max);
                lo[a] = l as usize;
                hi[a] = (lo[a] + 1).min(dims[a] - 1);
                frac[a] = xc - l;
            }
            clamped += usize::from(was_clamped);
            let cell = |x: usize, y: usize, z: usize| ((x * dims[1] + y) * dims[2] + z) * c;
            let mut tap = [(0usize, 0.0); 8];
            for (corner, slot) in tap.iter_mut().enumerate() {
                let pick = |a: usize| (corner >> a) & 1 == 1;
                let idx = [
                    if pick(0) { hi[0] } else { lo[0] },
                    if pick(1) { hi[1] } else { lo[1] },
                    if pick(2) { hi[2] } else { lo[2] },
                ];
                let w = (0..3)
                    .map(|a| if pick(a) { frac[a] } else { 1.0 - frac[a] })
                    .product::<f64>();
                *slot = (cell(idx[0], idx[1], idx[2]), w);
            }
            taps.push(tap);
        }
        let fd = f.data();
        let mut out = vec![0.0; positions.len() * c];
        for (row, tap) in out.chunks_mut(c).zip(&taps) {
            for &(base, w) in tap {
                if w != 0.0 {
                    row.iter_mut()
                        .zip(&fd[base..base + c])
                        .for_each(|(o, v)| *o += w * v);
                }
            }
        }
        let t = Tensor::new(vec![positions.len(), c], out)?;
        Ok((self.push(t, Op::Trilinear { fmap, taps }, &[fmap]), clamped))
    }

    /// Extracts 3x3x3 stride-2 zero-padded patches from a `[H, W, D, C]`
    /// volume into a `[Ho*Wo*Do, 27*C]` matrix (im2col).
    pub fn patches(&mut self, x: Var) -> Result<(Var, PatchGeometry)> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return shape_err(format!("patches: expected [H, W, D, C], got {:?}", xv.shape()));
        }
        let geometry = PatchGeometry {
            input: [xv.shape()[0], xv.shape()[1], xv.shape()[2]],
            channels: xv.shape()[3],
        };
        let out_dims = geometry.output();
        let rows: usize = out_dims.iter().product();
        let plen = geometry.patch_len();
        let mut data = vec![0.0; rows * plen];
        for_each_patch_tap(geometry, |row, col, src| {
            let c = geometry.channels;
            data[row * plen + col..row * plen + col + c]
                .copy_from_slice(&xv.data()[src..src + c]);
        });
        let t = Tensor::new(vec![rows, plen], data)?;
        Ok((self.push(t, Op::Patches { x, geometry }, &[x]), geometry))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.ensure_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Input | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let params = self
            .params
            .iter()
            .map(|(name, &v)| (name.clone(), v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if tracked(*a) {
                    acc(*a, &mut |da| gemm(m, n, k, g, false, val(*b).data(), true, da, 1.0));
                }
                if tracked(*b) {
                    acc(*b, &mut |db| gemm(k, m, n, val(*a).data(), true, g, false, db, 1.0));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::Relu(x) => {
                let out = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if out[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += s * q));
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = val(*gain).numel();
                let gv = val(*gain).data();
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(n) {
                        d.iter_mut().zip(grow).for_each(|(p, q)| *p += q);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dh = vec![0.0; n];
                    for (i, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let drow = &mut d[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, spans, *heads, probs, g, grads),
            Op::GatherRows(x, rows) => {
                let n = node.value.cols();
                acc(*x, &mut |d| {
                    for (r, grow) in rows.iter().zip(g.chunks(n)) {
                        d[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).numel();
                acc(*a, &mut |d| d.iter_mut().zip(&g[..split]).for_each(|(p, q)| *p += q));
                acc(*b, &mut |d| d.iter_mut().zip(&g[split..]).for_each(|(p, q)| *p += q));
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (val(*a).cols(), val(*b).cols());
                let w = na + nb;
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_mut(na).zip(g.chunks(w)) {
                        drow.iter_mut().zip(&grow[..na]).for_each(|(p, q)| *p += q);
                    }
                });
                acc(*b, &mut |d| {
                    for (drow, grow) in d.chunks_mut(nb).zip(g.chunks(w)) {
                        drow.iter_mut().zip(&grow[na..]).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for (i, norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[i * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = node.value.cols();
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for i in 0..node.value.rows() {
                        let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            d[i * n + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Nll { x, targets } => {
                let n = val(*x).cols();
                acc(*x, &mut |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        d[i * n + t] -= g[0];
                    }
                });
            }
            Op::Trilinear { fmap, taps } => {
                let c = node.value.cols();
                acc(*fmap, &mut |d| {
                    for (grow, tap) in g.chunks(c).zip(taps) {
                        for &(base, w) in tap {
                            if w != 0.0 {
                                d[base..base + c]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(p, q)| *p += w * q);
                            }
                        }
                    }
                });
            }
            Op::Patches { x, geometry } => {
                let plen = geometry.patch_len();
                let c = geometry.channels;
                acc(*x, &mut |d| {
                    for_each_patch_tap(*geometry, |row, col, src| {
                        let grow = &g[row * plen + col..row * plen + col + c];
                        d[src..src + c]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(p, q)| *p += q);
                    });
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[(usize, usize)],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qs, ks, vs) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let c = self.nodes[q.0].value.cols();
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut offset = 0;
        let mut dp = Vec::new();
        for &(s, e) in spans {
            let len = e - s;
            for h in 0..heads {
                let off = h * d;
                let block = &probs[offset..offset + len * len];
                offset += len * len;
                for ii in 0..len {
                    let i = s + ii;
                    let gi = &g[i * c + off..i * c + off + d];
                    let prow = &block[ii * len..(ii + 1) * len];
                    dp.clear();
                    for jj in 0..len {
                        let j = s + jj;
                        let vj = &vs[j * c + off..j * c + off + d];
                        dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                        let p = prow[jj];
                        dv[j * c + off..j * c + off + d]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(x, y)| *x += p * y);
                    }
                    let weighted: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for jj in 0..len {
                        let ds = prow[jj] * (dp[jj] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let j = s + jj;
                        for t in 0..d {
                            dq[i * c + off + t] += ds * ks[j * c + off + t];
                            dk[j * c + off + t] += ds * qs[i * c + off + t];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].tracked {
                continue;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; delta.len()]);
            slot.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
        }
    }
}

/// Visits every in-bounds tap of the stride-2 patch extraction:
/// `(patch row, column offset of the tap's channel block, source offset)`.
fn for_each_patch_tap(geometry: PatchGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [h, w, d] = geometry.input;
    let out = geometry.output();
    let c = geometry.channels;
    let mut row = 0;
    for ox in 0..out[0] {
        for oy in 0..out[1] {
            for oz in 0..out[2] {
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= h as isize {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= w as isize {
                            continue;
                        }
                        for kz in 0..3 {
                            let iz = (2 * oz + kz) as isize - 1;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            let col = ((kx * 3 + ky) * 3 + kz) * c;
                            let src = ((ix as usize * w + iy as usize) * d + iz as usize) * c;
                            f(row, col, src);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Input => "input",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Relu(_) => "relu",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Reshape(_) => "reshape",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::GatherRows(..) => "gather_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::LogSoftmaxRows(_) => "log_softmax_rows",
        Op::Nll { .. } => "nll",
        Op::Trilinear { .. } => "trilinear",
        Op::Patches { .. } => "patches",
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to a tracked leaf (`input` or `param`); zeros are
    /// reported as `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter touched by the graph, sorted by name.
    pub fn param_grads(&self) -> Vec<(&str, &[f64])> {
        let mut out: Vec<(&str, &[f64])> = self
            .params
            .iter()
            .filter_map(|(name, v)| self.wrt(*v).map(|g| (name.as_str(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Adds the parameter gradients into `store`'s accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        store.accumulate_grads(self.param_grads())
    }
}
