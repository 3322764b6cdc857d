use std::collections::HashMap;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) struct AttentionSpec {
    pub heads: usize,
    pub groups: usize,
    pub causal: bool,
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Conv1d { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Upsample2x(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    ScaleColumns { x: Var, factors: Vec<f64> },
    GroupMax { x: Var, argmax: Vec<usize> },
    ScatterCells { x: Var, cells: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;

/// Records a forward computation for reverse-mode differentiation.
///
/// Tensors are addressed as 2-D `rows x cols` views where `rows = shape[0]`
/// and `cols` is the product of the remaining dimensions. The tape is
/// single-threaded; independent tapes may live on different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter bound on `tape`, indexed like `store`.
    pub fn for_params(&self, tape: &Tape, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; store.len()];
        for (&pid, &var) in &tape.bound {
            if store.get(ParamId(pid)).trainable {
                out[pid] = self.get(var).map(<[f64]>::to_vec);
            }
        }
        out
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation and its derivative
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.shape, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.shape, Op::Leaf, false)
    }

    /// Binds a stored parameter, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            p.tensor.data.clone(),
            p.tensor.shape.clone(),
            Op::Leaf,
            p.trainable,
        );
        self.bound.insert(id.0, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        let shapes: Vec<String> = vars.iter().map(|v| format!("{:?}", self.shape(*v))).collect();
        Error::shape(op, shapes.join(" vs "))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, vec![n, m], Op::Transpose(a), ng)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, &[a, b]));
        }
        Ok(self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a, b]));
        Ok(self.push(out, shape, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a, b]));
        Ok(self.push(out, shape, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a, b]));
        Ok(self.push(out, shape, Op::Mul(a, b), ng))
    }

    /// `a[i, :] + row[0, :]` for every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r1, n2) = self.dims(row);
        if r1 != 1 || n2 != n {
            return Err(self.shape_err("add_row", &[a, row]));
        }
        let rv = &self.nodes[row.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a, row]));
        Ok(self.push(out, shape, Op::AddRow(a, row), ng))
    }

    /// `x W + b` with `b` a `1 x n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a]));
        self.push(out, shape, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a]));
        self.push(out, shape, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a]));
        self.push(out, shape, Op::Gelu(a), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            softmax_in_place(row);
        }
        let (shape, ng) = (self.shape(a).to_vec(), self.ng(&[a]));
        self.push(out, shape, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(self.shape_err("layer_norm", &[x, gamma, beta]));
        }
        let (xv, g, b) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mean, rstd) = ln_stats(row);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(&[x, gamma, beta]));
        Ok(self.push(out, shape, Op::LayerNorm { x, gamma, beta }, ng))
    }

    /// Kernel-3 convolution along the rows of an `L x C_in` sequence with
    /// replicate padding; `w` is `(3 C_in) x C_out` laid out tap-major.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, cin) = self.dims(x);
        let (wr, cout) = self.dims(w);
        if wr != 3 * cin || self.dims(b) != (1, cout) || l == 0 {
            return Err(self.shape_err("conv1d", &[x, w, b]));
        }
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let mut out = vec![0.0; l * cout];
        for t in 0..l {
            let orow = &mut out[t * cout..(t + 1) * cout];
            orow.copy_from_slice(bv);
            for k in 0..3 {
                let src = (t + k).saturating_sub(1).min(l - 1);
                for ci in 0..cin {
                    let xval = xv[src * cin + ci];
                    let wrow = &wv[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                    for (o, wk) in orow.iter_mut().zip(wrow) {
                        *o += xval * wk;
                    }
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(out, vec![l, cout], Op::Conv1d { x, w, b }, ng))
    }

    /// 3x3 convolution with zero padding 1 over a `[C_in, H, W]` map.
    /// `w` is `[C_out, C_in * 9]`, `b` is `[1, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let [cin, h, wd] = match *self.shape(x) {
            [c, h, w] => [c, h, w],
            _ => return Err(self.shape_err("conv2d", &[x, w, b])),
        };
        let (cout, wcols) = self.dims(w);
        if wcols != cin * 9 || self.dims(b) != (1, cout) || stride == 0 {
            return Err(self.shape_err("conv2d", &[x, w, b]));
        }
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            let oplane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            oplane.iter_mut().for_each(|v| *v = bv[co]);
            for ci in 0..cin {
                let iplane = &xv[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wk = wv[co * cin * 9 + ci * 9 + ky * 3 + kx];
                        if wk == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * wd..(iy as usize + 1) * wd];
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix >= 0 && ix < wd as isize {
                                    oplane[oy * wo + ox] += wk * irow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(out, vec![cout, ho, wo], Op::Conv2d { x, w, b, stride }, ng))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = match *self.shape(x) {
            [c, h, w] => [c, h, w],
            _ => return Err(self.shape_err("upsample2x", &[x])),
        };
        let xv = &self.nodes[x.0].value;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[ch * h2 * w2 + y * w2 + xx] = xv[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, vec![c, h2, w2], Op::Upsample2x(x), ng))
    }

    /// Stacks along the first dimension; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows input"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(self.shape_err("concat_rows", parts));
            }
            rows += self.shape(p)[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(parts);
        Ok(self.push(out, shape, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Joins 2-D views side by side; row counts must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols input"))?;
        let m = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(self.shape_err("concat_cols", parts));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let n = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * n..(i + 1) * n]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(out, vec![m, total], Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, shape),
            ));
        }
        let n = dims2(&shape).1;
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let mut s = shape;
        s[0] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(out, s, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, self.shape(x)),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, vec![m, len], Op::SliceCols { x, start }, ng))
    }

    /// Row `t` of the output is row `idx[t]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::OutOfRange { index: bad, size: m });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            out,
            vec![idx.len(), n],
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(&[x]);
        self.push(vec![m], vec![1, 1], Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        let ng = self.ng(&[x]);
        self.push(vec![s], vec![1, 1], Op::Sum(x), ng)
    }

    /// Multiplies column `c` of the 2-D view by the constant `factors[c]`.
    pub fn scale_columns(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if factors.len() != n {
            return Err(Error::shape(
                "scale_columns",
                format!("{} factors for {:?}", factors.len(), self.shape(x)),
            ));
        }
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, f) in out[i * n..(i + 1) * n].iter_mut().zip(factors) {
                *o *= f;
            }
        }
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(&[x]));
        Ok(self.push(
            out,
            shape,
            Op::ScaleColumns {
                x,
                factors: factors.to_vec(),
            },
            ng,
        ))
    }

    /// Column-wise max over consecutive row groups of `group` rows, of which
    /// only the first `counts[g]` are valid. Empty groups yield zeros.
    pub fn group_max(&mut self, x: Var, group: usize, counts: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if group == 0 || m != group * counts.len() || counts.iter().any(|&c| c > group) {
            return Err(Error::shape(
                "group_max",
                format!("{:?} with group {group} and {} groups", self.shape(x), counts.len()),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; counts.len() * n];
        let mut argmax = vec![usize::MAX; counts.len() * n];
        for (g, &c) in counts.iter().enumerate() {
            for j in 0..n {
                let mut best = f64::NEG_INFINITY;
                for r in 0..c {
                    let row = g * group + r;
                    let v = xv[row * n + j];
                    if v > best {
                        best = v;
                        argmax[g * n + j] = row * n + j;
                    }
                }
                if c > 0 {
                    out[g * n + j] = best;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, vec![counts.len(), n], Op::GroupMax { x, argmax }, ng))
    }

    /// Scatters the rows of an `n x C` matrix into the columns of a
    /// `C x n_cells` map; `cells` must be distinct.
    pub fn scatter_cells(&mut self, x: Var, cells: &[usize], n_cells: usize) -> Result<Var> {
        let (m, c) = self.dims(x);
        if cells.len() != m || cells.iter().any(|&i| i >= n_cells) {
            return Err(Error::shape(
                "scatter_cells",
                format!("{:?} into {n_cells} cells with {} indices", self.shape(x), cells.len()),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; c * n_cells];
        for (r, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                out[ch * n_cells + cell] = xv[r * c + ch];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            out,
            vec![c, n_cells],
            Op::ScatterCells {
                x,
                cells: cells.to_vec(),
            },
            ng,
        ))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    ///
    /// Rows are split into `groups` equal blocks and query block `g` attends
    /// only to key block `g`. Each head uses a `d / heads` column slice and
    /// the scale `1 / sqrt(d / heads)`. Keys with a `false` mask entry are
    /// excluded; a query with no admissible key outputs zeros.
    pub(crate) fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (nq_all, d) = self.dims(q);
        let (nk_all, dk) = self.dims(k);
        let (nv_all, dv) = self.dims(v);
        let AttentionSpec {
            heads,
            groups,
            causal,
            ..
        } = spec;
        if heads == 0
            || d % heads != 0
            || dk != d
            || dv != d
            || nk_all != nv_all
            || groups == 0
            || nq_all % groups != 0
            || nk_all % groups != 0
        {
            return Err(self.shape_err("attention", &[q, k, v]));
        }
        let (nq, nk, dh) = (nq_all / groups, nk_all / groups, d / heads);
        if causal && nq != nk {
            return Err(self.shape_err("attention (causal)", &[q, k, v]));
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != nk_all {
                return Err(Error::shape(
                    "attention",
                    format!("key mask of {} for {nk_all} keys", mask.len()),
                ));
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let mut out = vec![0.0; nq_all * d];
        let mut probs = vec![0.0; groups * heads * nq * nk];
        let mut scores = vec![0.0; nk];
        for g in 0..groups {
            for h in 0..heads {
                for r in 0..nq {
                    let qrow = &qv[(g * nq + r) * d + h * dh..(g * nq + r) * d + (h + 1) * dh];
                    let mut any = false;
                    for s in 0..nk {
                        let allowed = (!causal || s <= r)
                            && spec.key_mask.as_ref().map_or(true, |m| m[g * nk + s]);
                        scores[s] = if allowed {
                            any = true;
                            let krow = &kv[(g * nk + s) * d + h * dh..(g * nk + s) * d + (h + 1) * dh];
                            qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if !any {
                        continue;
                    }
                    softmax_in_place(&mut scores);
                    let prow = &mut probs[((g * heads + h) * nq + r) * nk..((g * heads + h) * nq + r + 1) * nk];
                    prow.copy_from_slice(&scores);
                    let orow = &mut out[(g * nq + r) * d + h * dh..(g * nq + r) * d + (h + 1) * dh];
                    for (s, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vv[(g * nk + s) * d + h * dh..(g * nk + s) * d + (h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            vec![nq_all, d],
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            ng,
        ))
    }

    /// Attention probabilities recorded by an attention node, laid out
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Accumulator for an input, created lazily; None if it needs no grad.
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[a.0].shape);
                let n = dims2(&nodes[b.0].shape).1;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += grow
                                .iter()
                                .zip(&bv[p * n..(p + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(&nodes[a.0].shape);
                if let Some(ga) = acc!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let n = dims2(&nodes[row.0].shape).1;
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gr) = acc!(*row) {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc!(*a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc!(*a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        *o += x * gelu(*v).1;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = dims2(&node.shape).1;
                let y = &node.value;
                if let Some(ga) = acc!(*a) {
                    for ((go, gi), yi) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            go[j] += yi[j] * (gi[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = dims2(&nodes[x.0].shape);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let (mean, rstd) = ln_stats(row);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                if let Some(gx) = acc!(*x) {
                    add_into(gx, &dx);
                }
                if let Some(gg) = acc!(*gamma) {
                    add_into(gg, &dgamma);
                }
                if let Some(gb) = acc!(*beta) {
                    add_into(gb, &dbeta);
                }
            }
            Op::Conv1d { x, w, b } => {
                let (l, cin) = dims2(&nodes[x.0].shape);
                let cout = dims2(&nodes[w.0].shape).1;
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                if let Some(gx) = acc!(*x) {
                    for t in 0..l {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for k in 0..3 {
                            let src = (t + k).saturating_sub(1).min(l - 1);
                            for ci in 0..cin {
                                let wrow = &wv[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                                gx[src * cin + ci] +=
                                    grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for t in 0..l {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for k in 0..3 {
                            let src = (t + k).saturating_sub(1).min(l - 1);
                            for ci in 0..cin {
                                let xval = xv[src * cin + ci];
                                let wrow = &mut gw[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                                for (o, gg) in wrow.iter_mut().zip(grow) {
                                    *o += xval * gg;
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for chunk in g.chunks(cout) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (cin, h, wd) = match nodes[x.0].shape[..] {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let cout = nodes[w.0].shape[0];
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let stride = *stride;
                let mut gx = nodes[x.0].needs_grad.then(|| vec![0.0; xv.len()]);
                let mut gw = nodes[w.0].needs_grad.then(|| vec![0.0; wv.len()]);
                for co in 0..cout {
                    let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                    for ci in 0..cin {
                        let iplane = &xv[ci * h * wd..(ci + 1) * h * wd];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let widx = co * cin * 9 + ci * 9 + ky * 3 + kx;
                                let wk = wv[widx];
                                let mut dw = 0.0;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let iy = iy as usize;
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let go = gplane[oy * wo + ox];
                                        dw += go * iplane[iy * wd + ix as usize];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[ci * h * wd + iy * wd + ix as usize] += go * wk;
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += dw;
                                }
                            }
                        }
                    }
                }
                if let (Some(src), Some(dst)) = (gx, acc!(*x)) {
                    add_into(dst, &src);
                }
                if let (Some(src), Some(dst)) = (gw, acc!(*w)) {
                    add_into(dst, &src);
                }
                if let Some(gb) = acc!(*b) {
                    for (co, plane) in g.chunks(ho * wo).enumerate() {
                        gb[co] += plane.iter().sum::<f64>();
                    }
                }
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = match nodes[x.0].shape[..] {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                if let Some(gx) = acc!(*x) {
                    let (h2, w2) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                gx[ch * h * w + (y / 2) * w + xx / 2] += g[ch * h2 * w2 + y * w2 + xx];
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = acc!(p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let n = dims2(&nodes[p.0].shape).1;
                    if let Some(gp) = acc!(p) {
                        for i in 0..m {
                            add_into(
                                &mut gp[i * n..(i + 1) * n],
                                &g[i * total + off..i * total + off + n],
                            );
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let n = dims2(&nodes[x.0].shape).1;
                if let Some(gx) = acc!(*x) {
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let n = dims2(&nodes[x.0].shape).1;
                let (m, len) = dims2(&node.shape);
                if let Some(gx) = acc!(*x) {
                    for i in 0..m {
                        add_into(
                            &mut gx[i * n + start..i * n + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let n = dims2(&nodes[x.0].shape).1;
                if let Some(gx) = acc!(*x) {
                    for (t, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[t * n..(t + 1) * n]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::ScaleColumns { x, factors } => {
                let n = factors.len();
                if let Some(gx) = acc!(*x) {
                    for (orow, grow) in gx.chunks_mut(n).zip(g.chunks(n)) {
                        for ((o, gg), f) in orow.iter_mut().zip(grow).zip(factors) {
                            *o += gg * f;
                        }
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                if let Some(gx) = acc!(*x) {
                    for (&src, gg) in argmax.iter().zip(g) {
                        if src != usize::MAX {
                            gx[src] += gg;
                        }
                    }
                }
            }
            Op::ScatterCells { x, cells } => {
                let c = dims2(&nodes[x.0].shape).1;
                let n_cells = dims2(&node.shape).1;
                if let Some(gx) = acc!(*x) {
                    for (r, &cell) in cells.iter().enumerate() {
                        for ch in 0..c {
                            gx[r * c + ch] += g[ch * n_cells + cell];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (nq_all, d) = dims2(&nodes[q.0].shape);
                let nk_all = dims2(&nodes[k.0].shape).0;
                let (heads, groups) = (spec.heads, spec.groups);
                let (nq, nk, dh) = (nq_all / groups, nk_all / groups, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; nk];
                for gi in 0..groups {
                    for h in 0..heads {
                        for r in 0..nq {
                            let prow = &probs[((gi * heads + h) * nq + r) * nk..((gi * heads + h) * nq + r + 1) * nk];
                            let qo = (gi * nq + r) * d + h * dh;
                            let grow = &g[qo..qo + dh];
                            let mut dot = 0.0;
                            for s in 0..nk {
                                let p = prow[s];
                                if p == 0.0 {
                                    dp[s] = 0.0;
                                    continue;
                                }
                                let ko = (gi * nk + s) * d + h * dh;
                                let dps: f64 = grow.iter().zip(&vv[ko..ko + dh]).map(|(a, b)| a * b).sum();
                                dp[s] = dps;
                                dot += p * dps;
                                for (o, gg) in gv[ko..ko + dh].iter_mut().zip(grow) {
                                    *o += p * gg;
                                }
                            }
                            for s in 0..nk {
                                let p = prow[s];
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[s] - dot) * scale;
                                let ko = (gi * nk + s) * d + h * dh;
                                for j in 0..dh {
                                    gq[qo + j] += ds * kv[ko + j];
                                    gk[ko + j] += ds * qv[qo + j];
                                }
                            }
                        }
                    }
                }
                if let Some(dst) = acc!(*q) {
                    add_into(dst, &gq);
                }
                if let Some(dst) = acc!(*k) {
                    add_into(dst, &gk);
                }
                if let Some(dst) = acc!(*v) {
                    add_into(dst, &gv);
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn ln_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
