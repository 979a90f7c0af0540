//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A `Graph` records every operation of one forward pass as a node holding
//! its output values. `backward` walks the tape in reverse, accumulating
//! gradients into parent nodes and finally into the [`ParamStore`]. The
//! tape is dropped (or truncated) after use; there are no higher-order
//! derivatives.
//!
//! All data is row-major f64. Shape errors are reported eagerly at op
//! construction, naming both shapes.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    Reshape { x: Var },
    Transpose { x: Var },
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    ConcatRows { xs: Vec<Var> },
    ConcatCols { xs: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRowVec { x: Var, v: Var },
    AddColVec { x: Var, v: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    SumAll { x: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    SoftmaxLastDim { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv2d { x: Var, k: Var, padding: usize },
    BilinearSample { f: Var, p: Var },
    ExtractPatches { x: Var, p: usize },
    BceWithLogitsMean { x: Var, target: Rc<Vec<f64>> },
    CeRows { x: Var, targets: Rc<Vec<usize>>, weights: Rc<Vec<f64>> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let r = shape.iter().product::<usize>() / c.max(1);
    (r, c)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes recorded after `mark`. Used to evaluate a throwaway
    /// subgraph (e.g. attention-mask prediction, which is excluded from
    /// the gradient path) without leaving it on the tape. Any `Var` handed
    /// out past the mark must not be used afterwards.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.param_leaves.retain(|_, v| v.0 < mark);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op });
        Var(self.nodes.len() - 1)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push(shape, data, Op::Const)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Const)
    }

    /// Leaf bound to a parameter. Repeated calls for the same parameter
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        let e = store.get(id);
        let v = self.push(e.shape.clone(), e.data.clone(), Op::Param(id));
        self.param_leaves.insert(id, v);
        v
    }

    /// Re-enter a value as a constant, cutting it out of the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.nodes[v.0].shape.clone();
        let data = self.nodes[v.0].data.clone();
        self.push(shape, data, Op::Const)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.numel(x) {
            return Err(Error::dims("reshape", self.shape(x), &shape));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape { x }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dims("transpose expects 2-d", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose { x }))
    }

    /// Row gather on a 2-d tensor: `out[i] = x[idx[i]]`. The workhorse for
    /// window partitioning, cyclic shifts, head splits and broadcasts;
    /// its gradient is a scatter-add.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dims("gather_rows expects 2-d", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Usage(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; idx.len() * c];
        for (i, &src) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&xd[src * c..(src + 1) * c]);
        }
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.shape(xs[0])[1];
        let mut rows = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[1] != c {
                return Err(Error::dims("concat_rows width", self.shape(xs[0]), s));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * c);
        for &v in xs {
            out.extend_from_slice(&self.nodes[v.0].data);
        }
        Ok(self.push(vec![rows, c], out, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.shape(xs[0])[0];
        let mut cols = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != r {
                return Err(Error::dims("concat_cols rows", self.shape(xs[0]), s));
            }
            cols += s[1];
        }
        let mut out = vec![0.0; r * cols];
        let mut off = 0;
        for &v in xs {
            let c = self.shape(v)[1];
            let d = &self.nodes[v.0].data;
            for i in 0..r {
                out[i * cols + off..i * cols + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(vec![r, cols], out, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::dims("slice_rows", s, &[start, len]));
        }
        let c = s[1];
        let data = self.nodes[x.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(vec![len, c], data, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dims("slice_cols", s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }))
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(shape, data, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(shape, data, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(shape, data, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div")?;
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(shape, data, Op::Div { a, b }))
    }

    /// `x + v` broadcasting `v: [c]` over the rows of `x: [r, c]`.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.numel(v) != c {
            return Err(Error::dims("add_row_vec", self.shape(x), self.shape(v)));
        }
        let shape = self.nodes[x.0].shape.clone();
        let mut out = self.nodes[x.0].data.clone();
        let vd = &self.nodes[v.0].data;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += vd[j];
            }
        }
        Ok(self.push(shape, out, Op::AddRowVec { x, v }))
    }

    /// `x + v` broadcasting `v: [r]` over the columns of `x: [r, c]`.
    pub fn add_col_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || self.numel(v) != s[0] {
            return Err(Error::dims("add_col_vec", self.shape(x), self.shape(v)));
        }
        let (r, c) = (s[0], s[1]);
        let shape = self.nodes[x.0].shape.clone();
        let mut out = self.nodes[x.0].data.clone();
        let vd = &self.nodes[v.0].data;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += vd[i];
            }
        }
        Ok(self.push(shape, out, Op::AddColVec { x, v }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        self.push(shape, data, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        self.push(shape, data, Op::AddScalar { x })
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    /// Batched matmul. `a: [B,m,k]`; `b: [B,k,n]`, or `[B,n,k]` with
    /// `trans_b` in which case `out = a · bᵀ` per batch.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dims("bmm", &sa, &sb));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(Error::dims("bmm inner", &sa, &sb));
        }
        let bstride = sb[1] * sb[2];
        let mut out = vec![0.0; bsz * m * n];
        for bi in 0..bsz {
            let abase = &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k];
            let bbase = &self.nodes[b.0].data[bi * bstride..(bi + 1) * bstride];
            let obase = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                mm_nt_into(abase, bbase, m, k, n, obase);
            } else {
                mm_into(abase, bbase, m, k, n, obase);
            }
        }
        Ok(self.push(vec![bsz, m, n], out, Op::Bmm { a, b, trans_b }))
    }

    // ── reductions and nonlinearities ───────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        self.push(shape, data, Op::Sigmoid { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu(v)).collect();
        self.push(shape, data, Op::Gelu { x })
    }

    /// Softmax over the last dimension. `-inf` inputs map to exactly 0.
    /// Rows whose entries are all `-inf` produce a zero row and are
    /// reported in the returned list; callers must handle them.
    pub fn softmax_lastdim(&mut self, x: Var) -> (Var, Vec<usize>) {
        let shape = self.nodes[x.0].shape.clone();
        let (r, c) = rows_cols(&shape);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        let mut degenerate = Vec::new();
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                degenerate.push(i);
                continue; // leave zero row
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = if row[j] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (row[j] - m).exp()
                };
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let v = self.push(shape, out, Op::SoftmaxLastDim { x });
        (v, degenerate)
    }

    /// Layer normalization over the last dimension, then affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let (r, c) = rows_cols(&shape);
        if self.numel(gain) != c || self.numel(bias) != c {
            return Err(Error::dims("layer_norm affine", &shape, self.shape(gain)));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gain.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, eps }))
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// 2-d cross-correlation: `x: [C_in,H,W]`, `k: [C_out,C_in,kh,kw]`.
    /// Kernel sizes 1 and 3 are supported; padding 1 preserves extent for
    /// the 3x3 case.
    pub fn conv2d(&mut self, x: Var, k: Var, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(Error::dims("conv2d", &sx, &sk));
        }
        let (kh, kw) = (sk[2], sk[3]);
        if !(kh == 1 && kw == 1 || kh == 3 && kw == 3) {
            return Err(Error::Config(format!(
                "conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}"
            )));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let cout = sk[0];
        let oh = h + 2 * padding + 1 - kh;
        let ow = w + 2 * padding + 1 - kw;
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[k.0].data;
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for i in 0..cin {
                let xplane = &xd[i * h * w..(i + 1) * h * w];
                let kbase = ((o * cin) + i) * kh * kw;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kv = kd[kbase + dy * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy + dy;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            let iy = iy - padding;
                            for ox in 0..ow {
                                let ix = ox + dx;
                                if ix < padding || ix - padding >= w {
                                    continue;
                                }
                                out[(o * oh + oy) * ow + ox] += kv * xplane[iy * w + ix - padding];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![cout, oh, ow], out, Op::Conv2d { x, k, padding }))
    }

    /// Bilinear sampling of `f: [C,H,W]` at `p: [P,2]` points given as
    /// (x, y) normalized to [0,1], where (0,0) is the center of pixel
    /// (0,0) and (1,1) the center of pixel (H-1,W-1). Points outside the
    /// unit square yield zeros. Gradients flow to both the feature map
    /// and the point coordinates.
    pub fn bilinear_sample(&mut self, f: Var, p: Var) -> Result<Var> {
        let (sf, sp) = (self.shape(f).to_vec(), self.shape(p).to_vec());
        if sf.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(Error::dims("bilinear_sample", &sf, &sp));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let np = sp[0];
        let fd = &self.nodes[f.0].data;
        let pd = &self.nodes[p.0].data;
        let mut out = vec![0.0; np * c];
        for i in 0..np {
            let (x, y) = (pd[i * 2], pd[i * 2 + 1]);
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                continue;
            }
            let (x0, x1, fx) = lerp_cell(x, w);
            let (y0, y1, fy) = lerp_cell(y, h);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = fd[base + y0 * w + x0];
                let v01 = fd[base + y0 * w + x1];
                let v10 = fd[base + y1 * w + x0];
                let v11 = fd[base + y1 * w + x1];
                out[i * c + ch] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
        Ok(self.push(vec![np, c], out, Op::BilinearSample { f, p }))
    }

    /// Non-overlapping `p x p` patches of `x: [C,H,W]` flattened to rows:
    /// `[(H/p)(W/p), C*p*p]`, patches in raster order, features ordered
    /// (channel, dy, dx).
    pub fn extract_patches(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dims("extract_patches", &s, &[]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % p != 0 || w % p != 0 {
            return Err(Error::Input(format!(
                "extract_patches: {h}x{w} not divisible by patch size {p}; tile or pad the input"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let xd = &self.nodes[x.0].data;
        let width = c * p * p;
        let mut out = vec![0.0; gh * gw * width];
        for py in 0..gh {
            for px in 0..gw {
                let row = py * gw + px;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[row * width + (ch * p + dy) * p + dx] =
                                xd[(ch * h + py * p + dy) * w + px * p + dx];
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![gh * gw, width], out, Op::ExtractPatches { x, p }))
    }

    /// Mean binary cross-entropy between logits `x` and a constant target
    /// in [0,1], computed in logit space for stability.
    pub fn bce_with_logits_mean(&mut self, x: Var, target: Rc<Vec<f64>>) -> Result<Var> {
        if self.numel(x) != target.len() {
            return Err(Error::dims(
                "bce_with_logits_mean",
                self.shape(x),
                &[target.len()],
            ));
        }
        let xd = &self.nodes[x.0].data;
        let n = xd.len() as f64;
        let mut acc = 0.0;
        for (&m, &t) in xd.iter().zip(target.iter()) {
            acc += m.max(0.0) - m * t + (-m.abs()).exp().ln_1p();
        }
        Ok(self.push(vec![1], vec![acc / n], Op::BceWithLogitsMean { x, target }))
    }

    /// Weighted sum of per-row cross-entropies of `x: [N,K]` against
    /// integer targets: `Σ_i w_i (logsumexp(x_i) - x_i[t_i])`.
    pub fn ce_rows(
        &mut self,
        x: Var,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(Error::dims("ce_rows", &s, &[targets.len()]));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Usage(format!("ce_rows target {bad} out of range")));
        }
        let xd = &self.nodes[x.0].data;
        let mut acc = 0.0;
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            acc += weights[i] * (lse - row[targets[i]]);
        }
        Ok(self.push(vec![1], vec![acc], Op::CeRows { x, targets, weights }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates parameter gradients in
    /// the store (accumulating); every parameter not reachable from the
    /// loss keeps its current (zero) gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let lv = self.nodes[loss.0].data[0];
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {lv}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let e = store.get_mut(*id);
                    for (dst, src) in e.grad.iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Reshape { x } => acc(&mut grads, *x, &self.nodes, |dx| {
                    for (d, s) in dx.iter_mut().zip(&g) {
                        *d += s;
                    }
                }),
                Op::Transpose { x } => {
                    let (c, r) = (node.shape[0], node.shape[1]); // out is [c,r]
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for i2 in 0..c {
                            for j in 0..r {
                                dx[j * c + i2] += g[i2 * r + j];
                            }
                        }
                    });
                }
                Op::GatherRows { x, idx } => {
                    let cw = node.shape[1];
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for (i2, &src) in idx.iter().enumerate() {
                            for j in 0..cw {
                                dx[src * cw + j] += g[i2 * cw + j];
                            }
                        }
                    });
                }
                Op::ConcatRows { xs } => {
                    let mut off = 0;
                    for &v in xs {
                        let n = self.nodes[v.0].data.len();
                        let gpart = &g[off..off + n];
                        acc(&mut grads, v, &self.nodes, |dx| {
                            for (d, s) in dx.iter_mut().zip(gpart) {
                                *d += s;
                            }
                        });
                        off += n;
                    }
                }
                Op::ConcatCols { xs } => {
                    let r = node.shape[0];
                    let cols = node.shape[1];
                    let mut off = 0;
                    for &v in xs {
                        let c = self.nodes[v.0].shape[1];
                        acc(&mut grads, v, &self.nodes, |dx| {
                            for i2 in 0..r {
                                for j in 0..c {
                                    dx[i2 * c + j] += g[i2 * cols + off + j];
                                }
                            }
                        });
                        off += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.shape[1];
                    let len = node.shape[0];
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for i2 in 0..len {
                            for j in 0..c {
                                dx[(start + i2) * c + j] += g[i2 * c + j];
                            }
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let len = node.shape[1];
                    let r = node.shape[0];
                    let xc = self.nodes[x.0].shape[1];
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for i2 in 0..r {
                            for j in 0..len {
                                dx[i2 * xc + start + j] += g[i2 * len + j];
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                    acc(&mut grads, *b, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, *a, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                    acc(&mut grads, *b, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d -= s;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    acc(&mut grads, *a, &self.nodes, |dx| {
                        for k in 0..g.len() {
                            dx[k] += g[k] * bd[k];
                        }
                    });
                    acc(&mut grads, *b, &self.nodes, |dx| {
                        for k in 0..g.len() {
                            dx[k] += g[k] * ad[k];
                        }
                    });
                }
                Op::Div { a, b } => {
                    let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    acc(&mut grads, *a, &self.nodes, |dx| {
                        for k in 0..g.len() {
                            dx[k] += g[k] / bd[k];
                        }
                    });
                    acc(&mut grads, *b, &self.nodes, |dx| {
                        for k in 0..g.len() {
                            dx[k] -= g[k] * ad[k] / (bd[k] * bd[k]);
                        }
                    });
                }
                Op::AddRowVec { x, v } => {
                    let (r, c) = rows_cols(&node.shape);
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                    acc(&mut grads, *v, &self.nodes, |dv| {
                        for i2 in 0..r {
                            for j in 0..c {
                                dv[j] += g[i2 * c + j];
                            }
                        }
                    });
                }
                Op::AddColVec { x, v } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                    acc(&mut grads, *v, &self.nodes, |dv| {
                        for i2 in 0..r {
                            for j in 0..c {
                                dv[i2] += g[i2 * c + j];
                            }
                        }
                    });
                }
                Op::Scale { x, c } => {
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d += s * c;
                        }
                    });
                }
                Op::AddScalar { x } => {
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for (d, s) in dx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                }
                Op::MatMul { a, b } => {
                    let sa = &self.nodes[a.0].shape;
                    let sb = &self.nodes[b.0].shape;
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    acc(&mut grads, *a, &self.nodes, |dx| {
                        // da += g [m,n] · bᵀ [n,k]
                        mm_nt_acc(&g, bd, m, n, k, dx);
                    });
                    acc(&mut grads, *b, &self.nodes, |dx| {
                        // db += aᵀ [k,m] · g [m,n]
                        mm_tn_acc(ad, &g, k, m, n, dx);
                    });
                }
                Op::Bmm { a, b, trans_b } => {
                    let sa = &self.nodes[a.0].shape;
                    let sb = &self.nodes[b.0].shape;
                    let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                    let n = node.shape[2];
                    let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    let bstride = sb[1] * sb[2];
                    acc(&mut grads, *a, &self.nodes, |dx| {
                        for bi in 0..bsz {
                            let gg = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &bd[bi * bstride..(bi + 1) * bstride];
                            let da = &mut dx[bi * m * k..(bi + 1) * m * k];
                            if *trans_b {
                                // out = a·bᵀ, b: [n,k]; da += g [m,n] · b [n,k]
                                mm_acc(gg, bb, m, n, k, da);
                            } else {
                                // da += g [m,n] · bᵀ [n,k]
                                mm_nt_acc(gg, bb, m, n, k, da);
                            }
                        }
                    });
                    acc(&mut grads, *b, &self.nodes, |dx| {
                        for bi in 0..bsz {
                            let gg = &g[bi * m * n..(bi + 1) * m * n];
                            let aa = &ad[bi * m * k..(bi + 1) * m * k];
                            let db = &mut dx[bi * bstride..(bi + 1) * bstride];
                            if *trans_b {
                                // db [n,k] += gᵀ [n,m] · a [m,k]
                                mm_tn_acc(gg, aa, n, m, k, db);
                            } else {
                                // db [k,n] += aᵀ [k,m] · g [m,n]
                                mm_tn_acc(aa, gg, k, m, n, db);
                            }
                        }
                    });
                }
                Op::SumAll { x } => {
                    let gv = g[0];
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for d in dx.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let yd = &node.data;
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for k in 0..g.len() {
                            dx[k] += g[k] * yd[k] * (1.0 - yd[k]);
                        }
                    });
                }
                Op::Gelu { x } => {
                    let xd = &self.nodes[x.0].data;
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for k in 0..g.len() {
                            dx[k] += g[k] * gelu_grad(xd[k]);
                        }
                    });
                }
                Op::SoftmaxLastDim { x } => {
                    let (r, c) = rows_cols(&node.shape);
                    let yd = &node.data;
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for i2 in 0..r {
                            let y = &yd[i2 * c..(i2 + 1) * c];
                            let gg = &g[i2 * c..(i2 + 1) * c];
                            let dot: f64 = y.iter().zip(gg).map(|(a2, b2)| a2 * b2).sum();
                            for j in 0..c {
                                dx[i2 * c + j] += y[j] * (gg[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (r, c) = rows_cols(&node.shape);
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gain.0].data;
                    // Recompute per-row stats; cheaper than caching for desk scale.
                    let cf = c as f64;
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for i2 in 0..r {
                            let row = &xd[i2 * c..(i2 + 1) * c];
                            let gg = &g[i2 * c..(i2 + 1) * c];
                            let mean = row.iter().sum::<f64>() / cf;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                            let inv = 1.0 / (var + eps).sqrt();
                            let mut sum_gh = 0.0;
                            let mut sum_ghx = 0.0;
                            for j in 0..c {
                                let xh = (row[j] - mean) * inv;
                                let gh = gg[j] * gd[j];
                                sum_gh += gh;
                                sum_ghx += gh * xh;
                            }
                            for j in 0..c {
                                let xh = (row[j] - mean) * inv;
                                let gh = gg[j] * gd[j];
                                dx[i2 * c + j] += (gh - sum_gh / cf - xh * sum_ghx / cf) * inv;
                            }
                        }
                    });
                    acc(&mut grads, *gain, &self.nodes, |dg| {
                        for i2 in 0..r {
                            let row = &xd[i2 * c..(i2 + 1) * c];
                            let mean = row.iter().sum::<f64>() / cf;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                            let inv = 1.0 / (var + eps).sqrt();
                            for j in 0..c {
                                dg[j] += g[i2 * c + j] * (row[j] - mean) * inv;
                            }
                        }
                    });
                    acc(&mut grads, *bias, &self.nodes, |db| {
                        for i2 in 0..r {
                            for j in 0..c {
                                db[j] += g[i2 * c + j];
                            }
                        }
                    });
                }
                Op::Conv2d { x, k, padding } => {
                    let sx = &self.nodes[x.0].shape;
                    let sk = &self.nodes[k.0].shape;
                    let (cin, h, w) = (sx[0], sx[1], sx[2]);
                    let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let xd = &self.nodes[x.0].data;
                    let kd = &self.nodes[k.0].data;
                    let p = *padding;
                    acc(&mut grads, *k, &self.nodes, |dk| {
                        for o in 0..cout {
                            for i2 in 0..cin {
                                for dy in 0..kh {
                                    for dx2 in 0..kw {
                                        let mut s = 0.0;
                                        for oy in 0..oh {
                                            let iy = oy + dy;
                                            if iy < p || iy - p >= h {
                                                continue;
                                            }
                                            for ox in 0..ow {
                                                let ix = ox + dx2;
                                                if ix < p || ix - p >= w {
                                                    continue;
                                                }
                                                s += g[(o * oh + oy) * ow + ox]
                                                    * xd[(i2 * h + iy - p) * w + ix - p];
                                            }
                                        }
                                        dk[((o * cin + i2) * kh + dy) * kw + dx2] += s;
                                    }
                                }
                            }
                        }
                    });
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for o in 0..cout {
                            for i2 in 0..cin {
                                for dy in 0..kh {
                                    for dx2 in 0..kw {
                                        let kv = kd[((o * cin + i2) * kh + dy) * kw + dx2];
                                        if kv == 0.0 {
                                            continue;
                                        }
                                        for oy in 0..oh {
                                            let iy = oy + dy;
                                            if iy < p || iy - p >= h {
                                                continue;
                                            }
                                            for ox in 0..ow {
                                                let ix = ox + dx2;
                                                if ix < p || ix - p >= w {
                                                    continue;
                                                }
                                                dx[(i2 * h + iy - p) * w + ix - p] +=
                                                    kv * g[(o * oh + oy) * ow + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::BilinearSample { f, p } => {
                    let sf = &self.nodes[f.0].shape;
                    let (c, h, w) = (sf[0], sf[1], sf[2]);
                    let np = node.shape[0];
                    let fd = &self.nodes[f.0].data;
                    let pd = &self.nodes[p.0].data;
                    acc(&mut grads, *f, &self.nodes, |df| {
                        for i2 in 0..np {
                            let (x, y) = (pd[i2 * 2], pd[i2 * 2 + 1]);
                            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                                continue;
                            }
                            let (x0, x1, fx) = lerp_cell(x, w);
                            let (y0, y1, fy) = lerp_cell(y, h);
                            for ch in 0..c {
                                let gv = g[i2 * c + ch];
                                let base = ch * h * w;
                                df[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                df[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                df[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                                df[base + y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    });
                    acc(&mut grads, *p, &self.nodes, |dp| {
                        for i2 in 0..np {
                            let (x, y) = (pd[i2 * 2], pd[i2 * 2 + 1]);
                            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                                continue;
                            }
                            let (x0, x1, fx) = lerp_cell(x, w);
                            let (y0, y1, fy) = lerp_cell(y, h);
                            let mut gx = 0.0;
                            let mut gy = 0.0;
                            for ch in 0..c {
                                let gv = g[i2 * c + ch];
                                let base = ch * h * w;
                                let v00 = fd[base + y0 * w + x0];
                                let v01 = fd[base + y0 * w + x1];
                                let v10 = fd[base + y1 * w + x0];
                                let v11 = fd[base + y1 * w + x1];
                                gx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                                gy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                            dp[i2 * 2] += gx * (w.saturating_sub(1)) as f64;
                            dp[i2 * 2 + 1] += gy * (h.saturating_sub(1)) as f64;
                        }
                    });
                }
                Op::ExtractPatches { x, p } => {
                    let sx = &self.nodes[x.0].shape;
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let (gh, gw) = (h / p, w / p);
                    let width = c * p * p;
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for py in 0..gh {
                            for px in 0..gw {
                                let row = py * gw + px;
                                for ch in 0..c {
                                    for dy in 0..*p {
                                        for dx2 in 0..*p {
                                            dx[(ch * h + py * p + dy) * w + px * p + dx2] +=
                                                g[row * width + (ch * p + dy) * p + dx2];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::BceWithLogitsMean { x, target } => {
                    let xd = &self.nodes[x.0].data;
                    let n = xd.len() as f64;
                    let gv = g[0];
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for k in 0..xd.len() {
                            dx[k] += gv * (sigmoid(xd[k]) - target[k]) / n;
                        }
                    });
                }
                Op::CeRows { x, targets, weights } => {
                    let sx = &self.nodes[x.0].shape;
                    let (r, c) = (sx[0], sx[1]);
                    let xd = &self.nodes[x.0].data;
                    let gv = g[0];
                    acc(&mut grads, *x, &self.nodes, |dx| {
                        for i2 in 0..r {
                            let row = &xd[i2 * c..(i2 + 1) * c];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                            for j in 0..c {
                                let soft = (row[j] - m).exp() / sum;
                                let onehot = if j == targets[i2] { 1.0 } else { 0.0 };
                                dx[i2 * c + j] += gv * weights[i2] * (soft - onehot);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Accumulate into the gradient buffer of `v`, lazily zero-initializing.
fn acc<F: FnOnce(&mut [f64])>(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    nodes: &[Node],
    f: F,
) {
    if grads[v.0].is_none() {
        grads[v.0] = Some(vec![0.0; nodes[v.0].data.len()]);
    }
    f(grads[v.0].as_mut().unwrap());
}

// ── scalar math and matmul kernels ──────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Map a normalized coordinate in [0,1] to an interpolation cell of a
/// grid with `n` pixel centers: returns (low index, high index, fraction).
fn lerp_cell(t: f64, n: usize) -> (usize, usize, f64) {
    if n <= 1 {
        return (0, 0, 0.0);
    }
    let c = t * (n - 1) as f64;
    let mut i0 = c.floor() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    (i0, i0 + 1, c - i0 as f64)
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mm_into(a, b, m, k, n, &mut out);
    out
}

fn mm_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    mm_into(a, b, m, k, n, out);
}

/// out[m,n] (+)= a[m,k] · b[n,k]ᵀ
fn mm_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] += s;
        }
    }
}

fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    mm_nt_into(a, b, m, k, n, out);
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
