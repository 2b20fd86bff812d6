//! Forward rules and vector-Jacobian products for every primitive the graph can record.

use std::fmt;
use std::str::FromStr;

use super::{NumError, Tensor};

/// Probabilities entering the binary cross-entropy are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;

/// A differentiable primitive.
///
/// Shape rules (`..` is any number of leading axes, flattened row-major):
///
/// | primitive | operands | result |
/// |---|---|---|
/// | `matmul` | `[.., k]`, `[k, m]` | `[.., m]` |
/// | `affine` | `[.., k]`, `[k, m]`, `[m]` | `[.., m]` |
/// | `matmul_nt` | `[.., n, d]`, `[.., m, d]` | `[.., n, m]` |
/// | `add` / `sub` / `mul` | `s`, `s` | `s` |
/// | `scale(c)` | `s` | `s` |
/// | `scale_by` | scalar, `s` | `s` |
/// | `scale_rows` | `[r, ..]`, `[r]` | `[r, ..]` |
/// | `sigmoid` / `relu` / `square` | `s` | `s` |
/// | `softmax` | `[.., n]` | `[.., n]`, over the last axis |
/// | `conv1d` | `[t, c_in]`, `[k, c_in, c_out]`, `[c_out]` | `[t, c_out]` |
/// | `sum_axis(a)` | `s` | `s` without axis `a` |
/// | `sum` / `mean` | `s` | `[]` |
/// | `class_expand` | `[t, d]`, `[n]`, `[n]` | `[t, n, d]` |
/// | `pairwise_diff` | `[.., n, 1]`, `[.., m, 1]` | `[.., n, m]` |
/// | `slice_rows(s, l)` | `[r, ..]` | `[l, ..]` |
/// | `bce` | `s`, `s` | `[]` |
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Affine,
    MatMulNT,
    Add,
    Sub,
    Mul,
    Scale(f64),
    ScaleBy,
    ScaleRows,
    Sigmoid,
    Relu,
    Square,
    Softmax,
    Conv1d,
    SumAxis(usize),
    Sum,
    Mean,
    ClassExpand,
    PairwiseDiff,
    SliceRows { start: usize, len: usize },
    Bce,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Affine => "affine",
            Primitive::MatMulNT => "matmul_nt",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::ScaleBy => "scale_by",
            Primitive::ScaleRows => "scale_rows",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Square => "square",
            Primitive::Softmax => "softmax",
            Primitive::Conv1d => "conv1d",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::ClassExpand => "class_expand",
            Primitive::PairwiseDiff => "pairwise_diff",
            Primitive::SliceRows { .. } => "slice_rows",
            Primitive::Bce => "bce",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Affine | Primitive::Conv1d | Primitive::ClassExpand => 3,
            Primitive::MatMul
            | Primitive::MatMulNT
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::ScaleBy
            | Primitive::ScaleRows
            | Primitive::PairwiseDiff
            | Primitive::Bce => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Scale(c) => write!(f, "scale({c})"),
            Primitive::SumAxis(a) => write!(f, "sum_axis({a})"),
            Primitive::SliceRows { start, len } => write!(f, "slice_rows({start},{len})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses the textual form produced by `Display`, e.g. `sigmoid`, `scale(0.5)`, `slice_rows(2,4)`.
impl FromStr for Primitive {
    type Err = NumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || NumError::UnknownPrimitive(s.to_string());
        let (name, args) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], Some(&s[open + 1..s.len() - 1])),
            Some(_) => return Err(unknown()),
            None => (s, None),
        };
        let args: Vec<&str> = args
            .map(|a| a.split(',').map(str::trim).collect())
            .unwrap_or_default();
        let usize_arg = |i: usize| -> Result<usize, NumError> {
            args.get(i).and_then(|a| a.parse().ok()).ok_or_else(unknown)
        };
        let prim = match (name, args.len()) {
            ("matmul", 0) => Primitive::MatMul,
            ("affine", 0) => Primitive::Affine,
            ("matmul_nt", 0) => Primitive::MatMulNT,
            ("add", 0) => Primitive::Add,
            ("sub", 0) => Primitive::Sub,
            ("mul", 0) => Primitive::Mul,
            ("scale", 1) => Primitive::Scale(args[0].parse().map_err(|_| unknown())?),
            ("scale_by", 0) => Primitive::ScaleBy,
            ("scale_rows", 0) => Primitive::ScaleRows,
            ("sigmoid", 0) => Primitive::Sigmoid,
            ("relu", 0) => Primitive::Relu,
            ("square", 0) => Primitive::Square,
            ("softmax", 0) => Primitive::Softmax,
            ("conv1d", 0) => Primitive::Conv1d,
            ("sum_axis", 1) => Primitive::SumAxis(usize_arg(0)?),
            ("sum", 0) => Primitive::Sum,
            ("mean", 0) => Primitive::Mean,
            ("class_expand", 0) => Primitive::ClassExpand,
            ("pairwise_diff", 0) => Primitive::PairwiseDiff,
            ("slice_rows", 2) => Primitive::SliceRows {
                start: usize_arg(0)?,
                len: usize_arg(1)?,
            },
            ("bce", 0) => Primitive::Bce,
            _ => return Err(unknown()),
        };
        Ok(prim)
    }
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> NumError {
    NumError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn bad_shape(op: &'static str, t: &Tensor, expected: &str) -> NumError {
    NumError::BadShape {
        op,
        shape: t.shape().to_vec(),
        expected: expected.to_string(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(op, a, b))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map preserves shape")
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

/// `out[r, m] = sum_k a[r, k] * b[k, m]` over flattened rows of `a`.
fn matmul_rows(a: &[f64], b: &[f64], rows: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        let out_row = &mut out[r * m..(r + 1) * m];
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn check_matmul(op: &'static str, a: &Tensor, w: &Tensor) -> Result<(usize, usize, usize), NumError> {
    if a.rank() < 1 || w.rank() != 2 || a.cols() != w.shape()[0] {
        return Err(mismatch(op, a, w));
    }
    let k = w.shape()[0];
    let rows = if k == 0 { 0 } else { a.len() / k };
    Ok((rows, k, w.shape()[1]))
}

fn batch_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize), NumError> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] || a.cols() != b.cols() {
        return Err(mismatch(op, a, b));
    }
    let batch = a.shape()[..ra - 2].iter().product();
    Ok((batch, a.shape()[ra - 2], b.shape()[rb - 2], a.cols()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates `prim` on `inputs`. The operand count must already match `prim.arity()`.
pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor, NumError> {
    if inputs.len() != prim.arity() {
        return Err(NumError::Arity {
            op: prim.name(),
            expected: prim.arity(),
            got: inputs.len(),
        });
    }
    let out = match prim {
        Primitive::MatMul => {
            let (a, w) = (inputs[0], inputs[1]);
            let (rows, k, m) = check_matmul("matmul", a, w)?;
            Tensor::new(with_last(a.shape(), m), matmul_rows(a.data(), w.data(), rows, k, m))?
        }
        Primitive::Affine => {
            let (a, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (rows, k, m) = check_matmul("affine", a, w)?;
            if b.shape() != [m] {
                return Err(mismatch("affine", w, b));
            }
            let mut data = matmul_rows(a.data(), w.data(), rows, k, m);
            for row in data.chunks_mut(m.max(1)) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::new(with_last(a.shape(), m), data)?
        }
        Primitive::MatMulNT => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, n, m, d) = batch_dims("matmul_nt", a, b)?;
            let mut data = vec![0.0; batch * n * m];
            for bi in 0..batch {
                let ab = &a.data()[bi * n * d..(bi + 1) * n * d];
                let bb = &b.data()[bi * m * d..(bi + 1) * m * d];
                for i in 0..n {
                    let ai = &ab[i * d..(i + 1) * d];
                    for j in 0..m {
                        let bj = &bb[j * d..(j + 1) * d];
                        data[(bi * n + i) * m + j] =
                            ai.iter().zip(bj).fold(0.0, |acc, (x, y)| acc + x * y);
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            let r = shape.len();
            shape[r - 1] = m;
            Tensor::new(shape, data)?
        }
        Primitive::Add => {
            same_shape("add", inputs[0], inputs[1])?;
            zip_map(inputs[0], inputs[1], |x, y| x + y)
        }
        Primitive::Sub => {
            same_shape("sub", inputs[0], inputs[1])?;
            zip_map(inputs[0], inputs[1], |x, y| x - y)
        }
        Primitive::Mul => {
            same_shape("mul", inputs[0], inputs[1])?;
            zip_map(inputs[0], inputs[1], |x, y| x * y)
        }
        Primitive::Scale(c) => inputs[0].map(|x| c * x),
        Primitive::ScaleBy => {
            let s = inputs[0]
                .item()
                .ok_or_else(|| bad_shape("scale_by", inputs[0], "a single value"))?;
            inputs[1].map(|x| s * x)
        }
        Primitive::ScaleRows => {
            let (a, w) = (inputs[0], inputs[1]);
            if a.rank() < 1 || w.shape() != [a.shape()[0]] {
                return Err(mismatch("scale_rows", a, w));
            }
            let stride = a.len() / a.shape()[0].max(1);
            let mut out = a.clone();
            for (row, &wv) in out.data_mut().chunks_mut(stride.max(1)).zip(w.data()) {
                row.iter_mut().for_each(|v| *v *= wv);
            }
            out
        }
        Primitive::Sigmoid => inputs[0].map(sigmoid),
        Primitive::Relu => inputs[0].map(|x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Square => inputs[0].map(|x| x * x),
        Primitive::Softmax => {
            let a = inputs[0];
            if a.rank() < 1 {
                return Err(bad_shape("softmax", a, "rank >= 1"));
            }
            let n = a.cols();
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n.max(1)) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            out
        }
        Primitive::Conv1d => conv1d_forward(inputs[0], inputs[1], inputs[2])?,
        Primitive::SumAxis(axis) => {
            let a = inputs[0];
            if *axis >= a.rank() {
                return Err(bad_shape("sum_axis", a, &format!("rank > {axis}")));
            }
            let (outer, dim, inner) = split_axis(a.shape(), *axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let src = &a.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    for (dst, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            Tensor::new(shape, data)?
        }
        Primitive::Sum => Tensor::scalar(inputs[0].sum()),
        Primitive::Mean => {
            let a = inputs[0];
            if a.is_empty() {
                return Err(bad_shape("mean", a, "at least one element"));
            }
            Tensor::scalar(a.sum() / a.len() as f64)
        }
        Primitive::ClassExpand => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if x.rank() != 2 {
                return Err(bad_shape("class_expand", x, "[t, d]"));
            }
            if w.rank() != 1 || w.shape() != b.shape() {
                return Err(mismatch("class_expand", w, b));
            }
            let (t, d, n) = (x.shape()[0], x.shape()[1], w.len());
            let mut data = Vec::with_capacity(t * n * d);
            for ti in 0..t {
                let row = x.row(ti);
                for (&wn, &bn) in w.data().iter().zip(b.data()) {
                    data.extend(row.iter().map(|&v| wn * v + bn));
                }
            }
            Tensor::new(vec![t, n, d], data)?
        }
        Primitive::PairwiseDiff => {
            let (a, c) = (inputs[0], inputs[1]);
            let (batch, n, m, one) = batch_dims("pairwise_diff", a, c)?;
            if one != 1 {
                return Err(mismatch("pairwise_diff", a, c));
            }
            let mut data = Vec::with_capacity(batch * n * m);
            for bi in 0..batch {
                let ab = &a.data()[bi * n..(bi + 1) * n];
                let cb = &c.data()[bi * m..(bi + 1) * m];
                for &ai in ab {
                    data.extend(cb.iter().map(|&cj| ai - cj));
                }
            }
            let mut shape = a.shape().to_vec();
            let r = shape.len();
            shape[r - 1] = m;
            Tensor::new(shape, data)?
        }
        Primitive::SliceRows { start, len } => {
            let a = inputs[0];
            if a.rank() < 1 || start + len > a.shape()[0] {
                return Err(bad_shape(
                    "slice_rows",
                    a,
                    &format!("leading axis >= {}", start + len),
                ));
            }
            let stride = a.len() / a.shape()[0].max(1);
            let mut shape = a.shape().to_vec();
            shape[0] = *len;
            Tensor::new(shape, a.data()[start * stride..(start + len) * stride].to_vec())?
        }
        Primitive::Bce => {
            let (p, y) = (inputs[0], inputs[1]);
            same_shape("bce", p, y)?;
            if p.is_empty() {
                return Err(bad_shape("bce", p, "at least one element"));
            }
            let total = p.data().iter().zip(y.data()).fold(0.0, |acc, (&pv, &yv)| {
                let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                acc - (yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln())
            });
            Tensor::scalar(total / p.len() as f64)
        }
    };
    Ok(out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv1d_forward(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    if x.rank() != 2 {
        return Err(bad_shape("conv1d", x, "[t, c_in]"));
    }
    if k.rank() != 3 || k.shape()[1] != x.shape()[1] {
        return Err(mismatch("conv1d", x, k));
    }
    if k.shape()[0] % 2 == 0 {
        return Err(bad_shape("conv1d", k, "odd kernel size"));
    }
    let (t, cin) = (x.shape()[0], x.shape()[1]);
    let (ks, cout) = (k.shape()[0], k.shape()[2]);
    if b.shape() != [cout] {
        return Err(mismatch("conv1d", k, b));
    }
    let half = ks / 2;
    let mut out = Vec::with_capacity(t * cout);
    for _ in 0..t {
        out.extend_from_slice(b.data());
    }
    for ti in 0..t {
        let out_row = &mut out[ti * cout..(ti + 1) * cout];
        for j in 0..ks {
            let src = ti + j;
            if src < half || src - half >= t {
                continue;
            }
            let x_row = x.row(src - half);
            let k_tap = &k.data()[j * cin * cout..(j + 1) * cin * cout];
            for (i, &xv) in x_row.iter().enumerate() {
                let k_row = &k_tap[i * cout..(i + 1) * cout];
                for (o, &kv) in out_row.iter_mut().zip(k_row) {
                    *o += xv * kv;
                }
            }
        }
    }
    Tensor::new(vec![t, cout], out)
}

fn conv1d_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (t, cin) = (x.shape()[0], x.shape()[1]);
    let (ks, cout) = (k.shape()[0], k.shape()[2]);
    let half = ks / 2;
    let mut gx = vec![0.0; t * cin];
    let mut gk = vec![0.0; ks * cin * cout];
    let mut gb = vec![0.0; cout];
    for ti in 0..t {
        let g_row = &g.data()[ti * cout..(ti + 1) * cout];
        for (acc, &gv) in gb.iter_mut().zip(g_row) {
            *acc += gv;
        }
        for j in 0..ks {
            let src = ti + j;
            if src < half || src - half >= t {
                continue;
            }
            let s = src - half;
            for i in 0..cin {
                let xv = x.data()[s * cin + i];
                let base = (j * cin + i) * cout;
                let k_row = &k.data()[base..base + cout];
                let gk_row = &mut gk[base..base + cout];
                let mut dot = 0.0;
                for ((gkv, &kv), &gv) in gk_row.iter_mut().zip(k_row).zip(g_row) {
                    *gkv += gv * xv;
                    dot += gv * kv;
                }
                gx[s * cin + i] += dot;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(k.shape().to_vec(), gk).expect("shape"),
        Tensor::vector(gb),
    )
}

/// Vector-Jacobian product: gradient of the scalar objective with respect to each operand,
/// given the gradient `g` with respect to the primitive's output `out`.
pub(crate) fn backward(prim: &Primitive, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    match prim {
        Primitive::MatMul | Primitive::Affine => {
            let (a, w) = (inputs[0], inputs[1]);
            let (k, m) = (w.shape()[0], w.shape()[1]);
            let rows = if k == 0 { 0 } else { a.len() / k };
            let ga = matmul_rows(g.data(), w.transpose().data(), rows, m, k);
            let gw = matmul_rows(
                a.clone().reshape(vec![rows, k]).expect("rows").transpose().data(),
                g.data(),
                k,
                rows,
                m,
            );
            let mut grads = vec![
                Tensor::new(a.shape().to_vec(), ga).expect("shape"),
                Tensor::new(w.shape().to_vec(), gw).expect("shape"),
            ];
            if matches!(prim, Primitive::Affine) {
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m.max(1)) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.push(Tensor::vector(gb));
            }
            grads
        }
        Primitive::MatMulNT => {
            let (a, b) = (inputs[0], inputs[1]);
            let d = a.cols();
            let n = a.shape()[a.rank() - 2];
            let m = b.shape()[b.rank() - 2];
            let batch = if n * d == 0 { 0 } else { a.len() / (n * d) };
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for bi in 0..batch {
                for i in 0..n {
                    for j in 0..m {
                        let gv = g.data()[(bi * n + i) * m + j];
                        let ar = (bi * n + i) * d;
                        let br = (bi * m + j) * d;
                        for c in 0..d {
                            ga[ar + c] += gv * b.data()[br + c];
                            gb[br + c] += gv * a.data()[ar + c];
                        }
                    }
                }
            }
            vec![
                Tensor::new(a.shape().to_vec(), ga).expect("shape"),
                Tensor::new(b.shape().to_vec(), gb).expect("shape"),
            ]
        }
        Primitive::Add => vec![g.clone(), g.clone()],
        Primitive::Sub => vec![g.clone(), g.map(|v| -v)],
        Primitive::Mul => vec![
            zip_map(g, inputs[1], |gv, y| gv * y),
            zip_map(g, inputs[0], |gv, x| gv * x),
        ],
        Primitive::Scale(c) => vec![g.map(|v| c * v)],
        Primitive::ScaleBy => {
            let s = inputs[0].item().expect("validated in forward");
            let gs = g
                .data()
                .iter()
                .zip(inputs[1].data())
                .fold(0.0, |acc, (gv, x)| acc + gv * x);
            let gs = Tensor::new(inputs[0].shape().to_vec(), vec![gs]).expect("shape");
            vec![gs, g.map(|v| s * v)]
        }
        Primitive::ScaleRows => {
            let (a, w) = (inputs[0], inputs[1]);
            let stride = (a.len() / a.shape()[0].max(1)).max(1);
            let mut ga = g.clone();
            let mut gw = vec![0.0; w.len()];
            for (r, (grow, arow)) in ga
                .data_mut()
                .chunks_mut(stride)
                .zip(a.data().chunks(stride))
                .enumerate()
            {
                let mut dot = 0.0;
                for (gv, &av) in grow.iter_mut().zip(arow) {
                    dot += *gv * av;
                    *gv *= w.data()[r];
                }
                gw[r] = dot;
            }
            vec![ga, Tensor::vector(gw)]
        }
        Primitive::Sigmoid => vec![zip_map(g, out, |gv, y| gv * y * (1.0 - y))],
        Primitive::Relu => vec![zip_map(g, inputs[0], |gv, x| if x > 0.0 { gv } else { 0.0 })],
        Primitive::Square => vec![zip_map(g, inputs[0], |gv, x| 2.0 * x * gv)],
        Primitive::Softmax => {
            let n = out.cols().max(1);
            let mut ga = g.clone();
            for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                let dot = grow.iter().zip(yrow).fold(0.0, |acc, (gv, y)| acc + gv * y);
                for (gv, &y) in grow.iter_mut().zip(yrow) {
                    *gv = y * (*gv - dot);
                }
            }
            vec![ga]
        }
        Primitive::Conv1d => {
            let (gx, gk, gb) = conv1d_backward(inputs[0], inputs[1], g);
            vec![gx, gk, gb]
        }
        Primitive::SumAxis(axis) => {
            let a = inputs[0];
            let (outer, dim, inner) = split_axis(a.shape(), *axis);
            let mut ga = vec![0.0; a.len()];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for d in 0..dim {
                    ga[(o * dim + d) * inner..(o * dim + d + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Tensor::new(a.shape().to_vec(), ga).expect("shape")]
        }
        Primitive::Sum => vec![Tensor::full(inputs[0].shape(), g.data()[0])],
        Primitive::Mean => {
            let n = inputs[0].len() as f64;
            vec![Tensor::full(inputs[0].shape(), g.data()[0] / n)]
        }
        Primitive::ClassExpand => {
            let (x, w) = (inputs[0], inputs[1]);
            let (t, d, n) = (x.shape()[0], x.shape()[1], w.len());
            let mut gx = vec![0.0; t * d];
            let mut gw = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for ti in 0..t {
                let xrow = x.row(ti);
                for c in 0..n {
                    let grow = &g.data()[(ti * n + c) * d..(ti * n + c + 1) * d];
                    let wn = w.data()[c];
                    for ((gxv, &gv), &xv) in gx[ti * d..(ti + 1) * d].iter_mut().zip(grow).zip(xrow) {
                        *gxv += wn * gv;
                        gw[c] += gv * xv;
                        gb[c] += gv;
                    }
                }
            }
            vec![
                Tensor::new(x.shape().to_vec(), gx).expect("shape"),
                Tensor::vector(gw),
                Tensor::vector(gb),
            ]
        }
        Primitive::PairwiseDiff => {
            let (a, c) = (inputs[0], inputs[1]);
            let n = a.shape()[a.rank() - 2];
            let m = c.shape()[c.rank() - 2];
            let batch = if n == 0 { 0 } else { a.len() / n };
            let mut ga = vec![0.0; a.len()];
            let mut gc = vec![0.0; c.len()];
            for bi in 0..batch {
                for i in 0..n {
                    for j in 0..m {
                        let gv = g.data()[(bi * n + i) * m + j];
                        ga[bi * n + i] += gv;
                        gc[bi * m + j] -= gv;
                    }
                }
            }
            vec![
                Tensor::new(a.shape().to_vec(), ga).expect("shape"),
                Tensor::new(c.shape().to_vec(), gc).expect("shape"),
            ]
        }
        Primitive::SliceRows { start, len } => {
            let a = inputs[0];
            let stride = a.len() / a.shape()[0].max(1);
            let mut ga = vec![0.0; a.len()];
            ga[start * stride..(start + len) * stride].copy_from_slice(g.data());
            vec![Tensor::new(a.shape().to_vec(), ga).expect("shape")]
        }
        Primitive::Bce => {
            let (p, y) = (inputs[0], inputs[1]);
            let scale = g.data()[0] / p.len() as f64;
            let gp = zip_map(p, y, |pv, yv| {
                if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                    0.0
                } else {
                    scale * (-yv / pv + (1.0 - yv) / (1.0 - pv))
                }
            });
            let gy = zip_map(p, y, |pv, _| {
                let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                scale * ((1.0 - pc).ln() - pc.ln())
            });
            vec![gp, gy]
        }
    }
}
