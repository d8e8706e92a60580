use crate::layout::BBox;
use crate::metrics;

use super::tensor::{ParamGrads, ParamId, ParamStore, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    /// Per-row mean and reciprocal std are kept in `aux`.
    LayerNorm { x: Var, gain: Var, bias: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row { x: Var, row: usize },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GatherMean { table: Var, ids: Vec<usize> },
    ClampMin { x: Var, floor: f64, at: Vec<usize> },
    /// The analytic gradient is kept in `aux`.
    CIoULoss(Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// `None` for parameter leaves, which read from the store.
    value: Option<Vec<f64>>,
    aux: Vec<f64>,
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// A single forward computation recorded for reverse-mode differentiation.
///
/// Parameters are borrowed from the store; gradients flow back into
/// [`ParamGrads`] keyed by parameter id.
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &str, detail: String) -> NnError {
    NnError::Shape(format!("{op}: {detail}"))
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[n,m] += a[n,k] * b[k,m]`
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n, d] => (*n, *d),
        [d] => (1, *d),
        _ => (0, 0),
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(data), _) => data,
            (None, Op::Param(id)) => self.params.get(*id).data(),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push_aux(op, shape, value, Vec::new())
    }

    fn push_aux(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, aux: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value: Some(value), aux });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient is propagated out of the graph for it).
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Input, shape, t.into_data())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node { op: Op::Param(id), shape, value: None, aux: Vec::new() });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[n, k], &[k2, m]) = (sa, sb) else {
            return Err(shape_err("matmul", format!("expected matrices, got {sa:?} x {sb:?}")));
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a), self.value(b), &mut out, n, k, m);
        Ok(self.push(Op::MatMul(a, b), vec![n, m], out))
    }

    /// Adds a row vector `b[m]` to every row of `x[n,m]` (or to a vector `x[m]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (_, m) = dims2(self.shape(x));
        if self.shape(b) != [m] || m == 0 {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b);
        let out: Vec<f64> = self.value(x).iter().enumerate().map(|(i, v)| v + bias[i % m]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddBias(x, b), shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape, out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape, out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu(a), shape, out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape, out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (_, m) = dims2(&shape);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(Op::SoftmaxRows(a), shape, out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let &[n, m] = self.shape(a) else {
            return Err(shape_err("transpose", format!("{:?}", self.shape(a))));
        };
        let x = self.value(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x[i * m + j];
            }
        }
        Ok(self.push(Op::Transpose(a), vec![m, n], out))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        let (n, d) = dims2(&shape);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("{shape:?} with gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; n * d];
        let mut aux = Vec::with_capacity(2 * n);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            aux.push(mean);
            aux.push(rstd);
        }
        Ok(self.push_aux(Op::LayerNorm { x, gain, bias }, shape, out, aux))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let &[n, m] = self.shape(x) else {
            return Err(shape_err("slice_cols", format!("{:?}", self.shape(x))));
        };
        if start + len > m {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {m}")));
        }
        let xv = self.value(x);
        let out = (0..n).flat_map(|r| xv[r * m + start..r * m + start + len].iter().copied()).collect();
        Ok(self.push(Op::SliceCols { x, start }, vec![n, len], out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let n = match parts.first().map(|&p| self.shape(p)) {
            Some(&[n, _]) => n,
            _ => return Err(shape_err("concat_cols", "expected matrices".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.shape(p) {
                [rows, w] if rows == n => widths.push(w),
                ref s => return Err(shape_err("concat_cols", format!("row count mismatch {s:?}"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![n, total], out))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(shape_err("concat", format!("expected vectors, got {:?}", self.shape(p))));
            }
            out.extend_from_slice(self.value(p));
        }
        let len = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), vec![len], out))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, NnError> {
        let d = match rows.first().map(|&r| self.shape(r)) {
            Some(&[d]) => d,
            _ => return Err(shape_err("stack_rows", "expected at least one vector".into())),
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.shape(r) != [d] {
                return Err(shape_err("stack_rows", format!("row {:?} vs [{d}]", self.shape(r))));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(Op::StackRows(rows.to_vec()), vec![rows.len(), d], out))
    }

    pub fn row(&mut self, x: Var, row: usize) -> Result<Var, NnError> {
        let &[n, d] = self.shape(x) else {
            return Err(shape_err("row", format!("{:?}", self.shape(x))));
        };
        if row >= n {
            return Err(shape_err("row", format!("row {row} of {n}")));
        }
        let out = self.value(x)[row * d..(row + 1) * d].to_vec();
        Ok(self.push(Op::Row { x, row }, vec![d], out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape, out))
    }

    /// 2-D convolution of `x[c,h,w]` with `w[o,c,k,k]` and bias `b[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let (&[c, h, wd], &[o, c2, k, k2]) = (self.shape(x), self.shape(w)) else {
            return Err(shape_err("conv2d", format!("{:?} * {:?}", self.shape(x), self.shape(w))));
        };
        if c != c2 || k != k2 || self.shape(b) != [o] || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("{:?} * {:?}", self.shape(x), self.shape(w))));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bv[oc]);
            for ic in 0..c {
                let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((oc * c + ic) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *ov += wt * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, vec![o, ho, wo], out))
    }

    /// Mean of the selected rows of `table[v,e]`.
    pub fn gather_mean(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let &[v, e] = self.shape(table) else {
            return Err(shape_err("gather_mean", format!("{:?}", self.shape(table))));
        };
        if ids.is_empty() || ids.iter().any(|&i| i >= v) {
            return Err(shape_err("gather_mean", format!("indices out of range for {v} rows")));
        }
        let tv = self.value(table);
        let mut out = vec![0.0; e];
        for &i in ids {
            out.iter_mut().zip(&tv[i * e..(i + 1) * e]).for_each(|(o, t)| *o += t);
        }
        let inv = 1.0 / ids.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Op::GatherMean { table, ids: ids.to_vec() }, vec![e], out))
    }

    /// `max(x[i], floor)` for each listed flat index; other entries pass through.
    pub fn clamp_min_at(&mut self, x: Var, floor: f64, at: &[usize]) -> Var {
        let mut out = self.value(x).to_vec();
        for &i in at {
            out[i] = out[i].max(floor);
        }
        let shape = self.shape(x).to_vec();
        self.push(Op::ClampMin { x, floor, at: at.to_vec() }, shape, out)
    }

    /// `1 - CIoU(pred, gt)` for a 4-vector prediction (left, top, width, height).
    pub fn ciou_loss(&mut self, pred: Var, gt: &BBox) -> Result<Var, NnError> {
        let p = self.value(pred);
        if p.len() != 4 {
            return Err(shape_err("ciou_loss", format!("{:?}", self.shape(pred))));
        }
        let pb = BBox::new(p[0], p[1], p[2], p[3]);
        let (b, g) = metrics::ciou_loss_and_grad(&pb, gt).map_err(|e| shape_err("ciou_loss", e.to_string()))?;
        Ok(self.push_aux(Op::CIoULoss(pred), vec![1], vec![b.loss], g.to_vec()))
    }

    /// Sum of same-shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let shape = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(shape_err("sum", "no operands".into())),
        };
        let mut out = vec![0.0; shape.iter().product()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(shape_err("sum", format!("{:?} vs {shape:?}", self.shape(p))));
            }
            out.iter_mut().zip(self.value(p)).for_each(|(o, v)| *o += v);
        }
        Ok(self.push(Op::Sum(parts.to_vec()), shape, out))
    }

    /// Reverse pass from a scalar output, returning parameter gradients.
    pub fn backward(&self, output: Var) -> ParamGrads {
        self.backward_with_inputs(output).0
    }

    /// Reverse pass that also returns gradients for every recorded node,
    /// indexed by [`Var`].
    pub fn backward_with_inputs(&self, output: Var) -> (ParamGrads, Vec<Option<Vec<f64>>>) {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0; self.value(output).len()]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let size = |v: Var| self.value(v).len();
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (&[n, k], &[_, m]) = (self.shape(*a), self.shape(*b)) else { unreachable!() };
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = dC * B^T
                    let ga = acc(&mut grads, *a, n * k);
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += gout[i * m + j] * bv[p * m + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                    // dB = A^T * dC
                    let gb = acc(&mut grads, *b, k * m);
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..m {
                                gb[p * m + j] += aip * gout[i * m + j];
                            }
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    let m = size(*b);
                    acc(&mut grads, *x, gout.len()).iter_mut().zip(&gout).for_each(|(g, d)| *g += d);
                    let gb = acc(&mut grads, *b, m);
                    for (i, d) in gout.iter().enumerate() {
                        gb[i % m] += d;
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        acc(&mut grads, *v, gout.len()).iter_mut().zip(&gout).for_each(|(g, d)| *g += d);
                    }
                }
                Op::Scale(a, f) => {
                    acc(&mut grads, *a, gout.len()).iter_mut().zip(&gout).for_each(|(g, d)| *g += f * d);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let ga = acc(&mut grads, *a, gout.len());
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * gelu(xv[i]).1;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let ga = acc(&mut grads, *a, gout.len());
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let (_, m) = dims2(&node.shape);
                    let ga = acc(&mut grads, *a, gout.len());
                    for r in 0..y.len() / m {
                        let (yr, gr) = (&y[r * m..(r + 1) * m], &gout[r * m..(r + 1) * m]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            ga[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let &[n, m] = self.shape(*a) else { unreachable!() };
                    let ga = acc(&mut grads, *a, n * m);
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += gout[j * n + i];
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (n, d) = dims2(&node.shape);
                    let (xv, g) = (self.value(*x), self.value(*gain));
                    let mut dx = vec![0.0; n * d];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        let (mean, rstd) = (node.aux[2 * r], node.aux[2 * r + 1]);
                        let xhat: Vec<f64> = xv[r * d..(r + 1) * d].iter().map(|v| (v - mean) * rstd).collect();
                        let gr = &gout[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            dg[j] += gr[j] * xhat[j];
                            db[j] += gr[j];
                            let dxh = gr[j] * g[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * g[j];
                            dx[r * d + j] =
                                rstd * (dxh - sum_dxhat / d as f64 - xhat[j] * sum_dxhat_xhat / d as f64);
                        }
                    }
                    for (v, g) in [(*x, dx), (*gain, dg), (*bias, db)] {
                        acc(&mut grads, v, g.len()).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::SliceCols { x, start } => {
                    let &[n, m] = self.shape(*x) else { unreachable!() };
                    let len = node.shape[1];
                    let gx = acc(&mut grads, *x, n * m);
                    for r in 0..n {
                        for j in 0..len {
                            gx[r * m + start + j] += gout[r * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (n, total) = (node.shape[0], node.shape[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        let gp = acc(&mut grads, p, n * w);
                        for r in 0..n {
                            for j in 0..w {
                                gp[r * w + j] += gout[r * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::Concat(parts) | Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = size(p);
                        acc(&mut grads, p, len)
                            .iter_mut()
                            .zip(&gout[offset..offset + len])
                            .for_each(|(a, b)| *a += b);
                        offset += len;
                    }
                }
                Op::Row { x, row } => {
                    let d = gout.len();
                    let gx = acc(&mut grads, *x, size(*x));
                    gx[row * d..(row + 1) * d].iter_mut().zip(&gout).for_each(|(a, b)| *a += b);
                }
                Op::Reshape(x) => {
                    acc(&mut grads, *x, gout.len()).iter_mut().zip(&gout).for_each(|(a, b)| *a += b);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (&[c, h, wd], &[o, _, k, _]) = (self.shape(*x), self.shape(*w)) else { unreachable!() };
                    let (ho, wo) = (node.shape[1], node.shape[2]);
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let mut dx = vec![0.0; c * h * wd];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; o];
                    for oc in 0..o {
                        let gplane = &gout[oc * ho * wo..(oc + 1) * ho * wo];
                        db[oc] = gplane.iter().sum();
                        for ic in 0..c {
                            let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                            let dxin = &mut dx[ic * h * wd..(ic + 1) * h * wd];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = ((oc * c + ic) * k + ky) * k + kx;
                                    let wt = wv[widx];
                                    let mut dwt = 0.0;
                                    for oy in 0..ho {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let base = iy as usize * wd;
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix >= 0 && ix < wd as isize {
                                                let gv = gplane[oy * wo + ox];
                                                dwt += gv * xin[base + ix as usize];
                                                dxin[base + ix as usize] += gv * wt;
                                            }
                                        }
                                    }
                                    dw[widx] += dwt;
                                }
                            }
                        }
                    }
                    for (v, g) in [(*x, dx), (*w, dw), (*b, db)] {
                        acc(&mut grads, v, g.len()).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::GatherMean { table, ids } => {
                    let e = gout.len();
                    let inv = 1.0 / ids.len() as f64;
                    let gt = acc(&mut grads, *table, size(*table));
                    for &i in ids {
                        gt[i * e..(i + 1) * e].iter_mut().zip(&gout).for_each(|(a, b)| *a += b * inv);
                    }
                }
                Op::ClampMin { x, floor, at } => {
                    let xv = self.value(*x);
                    let mut g = gout.clone();
                    for &i in at {
                        if xv[i] < *floor {
                            g[i] = 0.0;
                        }
                    }
                    acc(&mut grads, *x, g.len()).iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::CIoULoss(pred) => {
                    let gp = acc(&mut grads, *pred, 4);
                    for i in 0..4 {
                        gp[i] += gout[0] * node.aux[i];
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, gout.len()).iter_mut().zip(&gout).for_each(|(a, b)| *a += b);
                    }
                }
            }
            grads[idx] = Some(gout);
        }

        let mut param_grads = vec![None; self.params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                param_grads[pid] = grads[v.0].clone();
            }
        }
        (ParamGrads(param_grads), grads)
    }
}
