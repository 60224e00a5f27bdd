//! Differentiable operations over [`Tensor`].
//!
//! Every op validates shapes up front (errors name the op and both shapes),
//! computes the forward value, and, when the graph is recording and an input
//! participates in gradients, registers a backward step on the tape.
//! Backward steps read the output gradient and accumulate into the inputs;
//! an output that never received a gradient contributes nothing.
//!
//! Broadcasting is deliberately minimal: elementwise ops require identical
//! shapes, and the only implicit expansion is the per-row bias in
//! [`add_bias`] / [`affine`].

use super::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

fn shape2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::shape(op, format!("expected a 2-d tensor, got shape {:?}", s)));
    }
    Ok((s[0], s[1]))
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("lhs shape {:?} vs rhs shape {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elementwise helpers

fn unary<F: Scalar>(
    g: &Graph<F>,
    x: &Tensor<F>,
    f: impl Fn(F) -> F,
    df: impl Fn(F, F) -> F + 'static,
) -> Tensor<F> {
    let data: Vec<F> = x.with_data(|d| d.iter().map(|&v| f(v)).collect());
    let out = Tensor::new(&x.shape(), data).expect("same shape");
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let xd = x.data();
                let od = o.data();
                let delta: Vec<F> = go
                    .iter()
                    .zip(xd.iter().zip(od.iter()))
                    .map(|(&gv, (&xv, &ov))| gv * df(xv, ov))
                    .collect();
                x.accumulate_grad(&delta);
            }),
        );
    }
    out
}

#[allow(clippy::type_complexity)]
fn binary<F: Scalar>(
    g: &Graph<F>,
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
    dfa: impl Fn(F, F) -> F + 'static,
    dfb: impl Fn(F, F) -> F + 'static,
) -> Result<Tensor<F>> {
    same_shape(op, a, b)?;
    let data: Vec<F> = {
        let ad = a.data_ref();
        let bd = b.data_ref();
        ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
    };
    let out = Tensor::new(&a.shape(), data)?;
    if g.track(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let ad = a.data();
                let bd = b.data();
                let da: Vec<F> = go
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gv, (&x, &y))| gv * dfa(x, y))
                    .collect();
                let db: Vec<F> = go
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gv, (&x, &y))| gv * dfb(x, y))
                    .collect();
                a.accumulate_grad(&da);
                b.accumulate_grad(&db);
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise ops

pub fn add<F: Scalar>(g: &Graph<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(g, "add", a, b, |x, y| x + y, |_, _| F::one(), |_, _| F::one())
}

pub fn sub<F: Scalar>(g: &Graph<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(g, "sub", a, b, |x, y| x - y, |_, _| F::one(), |_, _| -F::one())
}

pub fn mul<F: Scalar>(g: &Graph<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(g, "mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div<F: Scalar>(g: &Graph<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(g, "div", a, b, |x, y| x / y, |_, y| F::one() / y, |x, y| -x / (y * y))
}

/// Elementwise minimum. On ties the gradient routes to the first argument.
pub fn minimum<F: Scalar>(g: &Graph<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(
        g,
        "minimum",
        a,
        b,
        |x, y| if x <= y { x } else { y },
        |x, y| if x <= y { F::one() } else { F::zero() },
        |x, y| if x <= y { F::zero() } else { F::one() },
    )
}

/// Elementwise maximum. On ties the gradient routes to the first argument.
pub fn maximum<F: Scalar>(g: &Graph<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(
        g,
        "maximum",
        a,
        b,
        |x, y| if x >= y { x } else { y },
        |x, y| if x >= y { F::one() } else { F::zero() },
        |x, y| if x >= y { F::zero() } else { F::one() },
    )
}

pub fn neg<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(unary(g, x, |v| -v, |_, _| -F::one()))
}

pub fn relu<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(unary(
        g,
        x,
        |v| if v > F::zero() { v } else { F::zero() },
        |v, _| if v > F::zero() { F::one() } else { F::zero() },
    ))
}

pub fn sigmoid<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(unary(g, x, sigmoid_val, |_, y| y * (F::one() - y)))
}

pub fn sigmoid_val<F: Scalar>(v: F) -> F {
    // Split on sign so exp never overflows.
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn exp<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(unary(g, x, |v| v.exp(), |_, y| y))
}

pub fn ln<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(unary(g, x, |v| v.ln(), |v, _| F::one() / v))
}

/// Numerically stable ln(1 + e^x); gradient is sigmoid(x).
pub fn softplus<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(unary(g, x, softplus_val, |v, _| sigmoid_val(v)))
}

pub fn softplus_val<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Elementwise power by a constant. For fractional exponents the input must
/// be non-negative.
pub fn powf<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, p: f64) -> Result<Tensor<F>> {
    let pf = F::of_f64(p);
    Ok(unary(
        g,
        x,
        move |v| v.powf(pf),
        move |v, _| pf * v.powf(pf - F::one()),
    ))
}

pub fn add_scalar<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, c: f64) -> Result<Tensor<F>> {
    let cf = F::of_f64(c);
    Ok(unary(g, x, move |v| v + cf, |_, _| F::one()))
}

pub fn mul_scalar<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, c: f64) -> Result<Tensor<F>> {
    let cf = F::of_f64(c);
    Ok(unary(g, x, move |v| v * cf, move |_, _| cf))
}

// ---------------------------------------------------------------------------
// matrix ops

pub(crate) fn mm<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a [n x k] times b-transposed where b is [m x k].
fn mm_nt<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// a-transposed times b where a is [k x n] and b is [k x m].
fn mm_tn<F: Scalar>(a: &[F], b: &[F], k: usize, n: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn matmul<F: Scalar>(g: &Graph<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, k) = shape2("matmul", a)?;
    let (k2, m) = shape2("matmul", b)?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = {
        let ad = a.data_ref();
        let bd = b.data_ref();
        mm(&ad, &bd, n, k, m)
    };
    let out = Tensor::new(&[n, m], data)?;
    if g.track(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                if a.requires_grad() {
                    let bd = b.data();
                    a.accumulate_grad(&mm_nt(&go, &bd, n, m, k));
                }
                if b.requires_grad() {
                    let ad = a.data();
                    b.accumulate_grad(&mm_tn(&ad, &go, n, k, m));
                }
            }),
        );
    }
    Ok(out)
}

pub fn transpose<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, m) = shape2("transpose", x)?;
    let data = {
        let xd = x.data_ref();
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xd[i * m + j];
            }
        }
        out
    };
    let out = Tensor::new(&[m, n], data)?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let mut dx = vec![F::zero(); n * m];
                for j in 0..m {
                    for i in 0..n {
                        dx[i * m + j] = go[j * n + i];
                    }
                }
                x.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

/// Row-broadcast bias: x is [n x m], bias is [m].
pub fn add_bias<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, m) = shape2("add_bias", x)?;
    if bias.shape() != vec![m] {
        return Err(Error::shape(
            "add_bias",
            format!("x shape {:?} needs bias [{}], got {:?}", x.shape(), m, bias.shape()),
        ));
    }
    let data = {
        let xd = x.data_ref();
        let bd = bias.data_ref();
        let mut out = xd.clone();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += bd[j];
            }
        }
        out
    };
    let out = Tensor::new(&[n, m], data)?;
    if g.track(&[x, bias]) {
        let (x, bias_t, o) = (x.clone(), bias.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                x.accumulate_grad(&go);
                if bias_t.requires_grad() {
                    let mut db = vec![F::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            db[j] += go[i * m + j];
                        }
                    }
                    bias_t.accumulate_grad(&db);
                }
            }),
        );
    }
    Ok(out)
}

/// x [n x k] times w [k x m] plus row-broadcast bias [m].
pub fn affine<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let xw = matmul(g, x, w)?;
    add_bias(g, &xw, b)
}

// ---------------------------------------------------------------------------
// normalization

/// Softmax along `axis` of a 1-d or 2-d tensor. Lane maxima are subtracted
/// before exponentiation so large logits stay finite.
pub fn softmax<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    let (lanes, lane_len, stride, lane_stride) = match (shape.len(), axis) {
        (1, 0) => (1usize, shape[0], 1usize, 0usize),
        (2, 1) => (shape[0], shape[1], 1, shape[1]),
        (2, 0) => (shape[1], shape[0], shape[1], 1),
        _ => {
            return Err(Error::shape(
                "softmax",
                format!("supported ranks are 1 and 2, got shape {:?}", shape),
            ))
        }
    };
    let data = {
        let xd = x.data_ref();
        let mut out = vec![F::zero(); xd.len()];
        for lane in 0..lanes {
            let base = lane * lane_stride;
            let mut mx = F::neg_infinity();
            for i in 0..lane_len {
                mx = mx.max(xd[base + i * stride]);
            }
            let mut total = F::zero();
            for i in 0..lane_len {
                let e = (xd[base + i * stride] - mx).exp();
                out[base + i * stride] = e;
                total += e;
            }
            for i in 0..lane_len {
                out[base + i * stride] = out[base + i * stride] / total;
            }
        }
        out
    };
    let out = Tensor::new(&shape, data)?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let y = o.data();
                let mut dx = vec![F::zero(); y.len()];
                for lane in 0..lanes {
                    let base = lane * lane_stride;
                    let mut dot = F::zero();
                    for i in 0..lane_len {
                        let idx = base + i * stride;
                        dot += go[idx] * y[idx];
                    }
                    for i in 0..lane_len {
                        let idx = base + i * stride;
                        dx[idx] = y[idx] * (go[idx] - dot);
                    }
                }
                x.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

/// Per-row layer normalization of x [n x m] with learned gain and bias [m].
pub fn layer_norm<F: Scalar>(
    g: &Graph<F>,
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    let (n, m) = shape2("layer_norm", x)?;
    if gain.shape() != vec![m] || bias.shape() != vec![m] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "x shape {:?} needs gain/bias [{}], got {:?} and {:?}",
                x.shape(),
                m,
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let epsf = F::of_f64(eps);
    let mf = F::of_f64(m as f64);
    // Cache inverse stddev per row for the backward pass.
    let mut inv_std = vec![F::zero(); n];
    let data = {
        let xd = x.data_ref();
        let gd = gain.data_ref();
        let bd = bias.data_ref();
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<F>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
            let s = F::one() / (var + epsf).sqrt();
            inv_std[i] = s;
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * s * gd[j] + bd[j];
            }
        }
        out
    };
    let out = Tensor::new(&[n, m], data)?;
    if g.track(&[x, gain, bias]) {
        let (x, gain_t, bias_t, o) = (x.clone(), gain.clone(), bias.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let xd = x.data();
                let gd = gain_t.data();
                let mut dx = vec![F::zero(); n * m];
                let mut dg = vec![F::zero(); m];
                let mut db = vec![F::zero(); m];
                for i in 0..n {
                    let row = &xd[i * m..(i + 1) * m];
                    let mean = row.iter().copied().sum::<F>() / mf;
                    let s = inv_std[i];
                    // xh: normalized row; h: upstream grad scaled by gain.
                    let xh: Vec<F> = row.iter().map(|&v| (v - mean) * s).collect();
                    let h: Vec<F> = (0..m).map(|j| go[i * m + j] * gd[j]).collect();
                    let h_mean = h.iter().copied().sum::<F>() / mf;
                    let hx_mean = h.iter().zip(&xh).map(|(&a, &b)| a * b).sum::<F>() / mf;
                    for j in 0..m {
                        dx[i * m + j] = s * (h[j] - h_mean - xh[j] * hx_mean);
                        dg[j] += go[i * m + j] * xh[j];
                        db[j] += go[i * m + j];
                    }
                }
                x.accumulate_grad(&dx);
                gain_t.accumulate_grad(&dg);
                bias_t.accumulate_grad(&db);
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum_all<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let total: F = x.with_data(|d| d.iter().copied().sum());
    let out = Tensor::new(&[1], vec![total])?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        let n = x.numel();
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                x.accumulate_grad(&vec![go[0]; n]);
            }),
        );
    }
    Ok(out)
}

pub fn mean_all<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let n = x.numel();
    if n == 0 {
        return Err(Error::Contract("mean_all of an empty tensor".into()));
    }
    let s = sum_all(g, x)?;
    mul_scalar(g, &s, 1.0 / n as f64)
}

/// Row sums of a 2-d tensor: [n x m] reduced to [n].
pub fn sum_axis1<F: Scalar>(g: &Graph<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, m) = shape2("sum_axis1", x)?;
    let data: Vec<F> = x.with_data(|d| {
        (0..n).map(|i| d[i * m..(i + 1) * m].iter().copied().sum()).collect()
    });
    let out = Tensor::new(&[n], data)?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let mut dx = vec![F::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = go[i];
                    }
                }
                x.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// indexing

/// Gather whole rows of x [n x m] by index; duplicates are allowed and their
/// gradients accumulate.
pub fn select_rows<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, rows: &[usize]) -> Result<Tensor<F>> {
    let (n, m) = shape2("select_rows", x)?;
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Contract(format!(
            "select_rows index {} out of range for {} rows",
            bad, n
        )));
    }
    let data: Vec<F> = x.with_data(|d| {
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(&d[r * m..(r + 1) * m]);
        }
        out
    });
    let out = Tensor::new(&[rows.len(), m], data)?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        let rows = rows.to_vec();
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let mut dx = vec![F::zero(); n * m];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        dx[r * m + j] += go[i * m + j];
                    }
                }
                x.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

/// Pick one element per row: out[i] = x[i, cols[i]].
pub fn select_per_row<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, cols: &[usize]) -> Result<Tensor<F>> {
    let (n, m) = shape2("select_per_row", x)?;
    if cols.len() != n {
        return Err(Error::shape(
            "select_per_row",
            format!("x shape {:?} needs {} column indices, got {}", x.shape(), n, cols.len()),
        ));
    }
    if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
        return Err(Error::Contract(format!(
            "select_per_row column {} out of range for {} columns",
            bad, m
        )));
    }
    let data: Vec<F> = x.with_data(|d| cols.iter().enumerate().map(|(i, &c)| d[i * m + c]).collect());
    let out = Tensor::new(&[n], data)?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        let cols = cols.to_vec();
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let mut dx = vec![F::zero(); n * m];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * m + c] += go[i];
                }
                x.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

/// Contiguous column slice of a 2-d tensor.
pub fn slice_cols<F: Scalar>(g: &Graph<F>, x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let (n, m) = shape2("slice_cols", x)?;
    if start + len > m {
        return Err(Error::shape(
            "slice_cols",
            format!("columns {}..{} out of range for shape {:?}", start, start + len, x.shape()),
        ));
    }
    let data: Vec<F> = x.with_data(|d| {
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&d[i * m + start..i * m + start + len]);
        }
        out
    });
    let out = Tensor::new(&[n, len], data)?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let mut dx = vec![F::zero(); n * m];
                for i in 0..n {
                    for j in 0..len {
                        dx[i * m + start + j] = go[i * len + j];
                    }
                }
                x.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

/// Concatenate 2-d tensors along columns. All parts must share the row count.
pub fn concat_cols<F: Scalar>(g: &Graph<F>, parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero tensors".into()));
    }
    let (n, _) = shape2("concat_cols", parts[0])?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pm) = shape2("concat_cols", p)?;
        if pn != n {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {:?} vs {:?}", parts[0].shape(), p.shape()),
            ));
        }
        widths.push(pm);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![F::zero(); n * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        p.with_data(|d| {
            for i in 0..n {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
        });
        offset += w;
    }
    let out = Tensor::new(&[n, total], data)?;
    if g.track(parts) {
        let o = out.clone();
        let parts: Vec<Tensor<F>> = parts.iter().map(|p| (*p).clone()).collect();
        let widths = widths.clone();
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut dp = vec![F::zero(); n * w];
                        for i in 0..n {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&go[i * total + offset..i * total + offset + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += w;
                }
            }),
        );
    }
    Ok(out)
}

/// Element-level gather: out[i] = x[indices[i]], reshaped to `out_shape`.
/// Used for fixed pixel-to-patch permutations; gradients scatter-add back.
pub fn gather<F: Scalar>(
    g: &Graph<F>,
    x: &Tensor<F>,
    indices: &[usize],
    out_shape: &[usize],
) -> Result<Tensor<F>> {
    if super::numel_of(out_shape) != indices.len() {
        return Err(Error::shape(
            "gather",
            format!("out shape {:?} implies {} elements, got {} indices", out_shape, super::numel_of(out_shape), indices.len()),
        ));
    }
    let n = x.numel();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!(
            "gather index {} out of range for {} elements",
            bad, n
        )));
    }
    let data: Vec<F> = x.with_data(|d| indices.iter().map(|&i| d[i]).collect());
    let out = Tensor::new(out_shape, data)?;
    if g.track(&[x]) {
        let (x, o) = (x.clone(), out.clone());
        let indices = indices.to_vec();
        g.register(
            &out,
            Box::new(move || {
                let Some(go) = o.grad_clone() else { return };
                let mut dx = vec![F::zero(); n];
                for (gi, &i) in go.iter().zip(&indices) {
                    dx[i] += *gi;
                }
                x.accumulate_grad(&dx);
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// attention

/// Projection weights for one multi-head attention block.
#[derive(Clone)]
pub struct AttentionWeights<F: Scalar> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
}

/// Multi-head scaled dot-product attention with input and output projections.
/// q is [Lq x d]; k and v are [Lk x d]; d must be divisible by `heads`.
pub fn multi_head_attention<F: Scalar>(
    g: &Graph<F>,
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    w: &AttentionWeights<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let (_lq, d) = shape2("multi_head_attention", q)?;
    let (lk, dk) = shape2("multi_head_attention", k)?;
    let (lv, dv) = shape2("multi_head_attention", v)?;
    if dk != d || dv != d {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q {:?}, k {:?}, v {:?} must share the model dimension", q.shape(), k.shape(), v.shape()),
        ));
    }
    if lk != lv {
        return Err(Error::shape(
            "multi_head_attention",
            format!("k {:?} and v {:?} must share the sequence length", k.shape(), v.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention heads {} must divide the model dimension {}",
            heads, d
        )));
    }
    let qp = affine(g, q, &w.wq, &w.bq)?;
    let kp = affine(g, k, &w.wk, &w.bk)?;
    let vp = affine(g, v, &w.wv, &w.bv)?;
    let merged = attention_core(g, &qp, &kp, &vp, heads)?;
    affine(g, &merged, &w.wo, &w.bo)
}

/// Scaled dot-product attention over already-projected q [Lq x d],
/// k and v [Lk x d], split into `heads` column groups. No projections are
/// applied, so callers control how q, k, v and the output are produced.
pub fn attention_core<F: Scalar>(
    g: &Graph<F>,
    qp: &Tensor<F>,
    kp: &Tensor<F>,
    vp: &Tensor<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let (_lq, d) = shape2("attention_core", qp)?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention heads {} must divide the model dimension {}",
            heads, d
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_cols(g, qp, h * dh, dh)?;
        let kh = slice_cols(g, kp, h * dh, dh)?;
        let vh = slice_cols(g, vp, h * dh, dh)?;
        let kt = transpose(g, &kh)?;
        let scores = mul_scalar(g, &matmul(g, &qh, &kt)?, scale)?;
        let attn = softmax(g, &scores, 1)?;
        head_outs.push(matmul(g, &attn, &vh)?);
    }
    let refs: Vec<&Tensor<F>> = head_outs.iter().collect();
    concat_cols(g, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {g}, want {w}");
        }
    }

    #[test]
    fn matmul_hand_value() {
        let g = Graph::<f64>::inference();
        let a = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let c = matmul(&g, &a, &b).unwrap();
        assert_close(&c.data(), &[2.0, 1.0, 4.0, 3.0], 0.0);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_both_shapes() {
        let g = Graph::<f64>::inference();
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = matmul(&g, &a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "message was: {msg}");
    }

    #[test]
    fn softmax_hand_values() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[2], &[(1.0f64).ln(), (3.0f64).ln()]).unwrap();
        let y = softmax(&g, &x, 0).unwrap();
        assert_close(&y.data(), &[0.25, 0.75], 1e-12);

        let z = Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap();
        assert_close(&softmax(&g, &z, 0).unwrap().data(), &[0.5, 0.5], 0.0);

        // Stability: equal large logits must not overflow.
        let big = Tensor::from_f64(&[2], &[1000.0, 1000.0]).unwrap();
        assert_close(&softmax(&g, &big, 0).unwrap().data(), &[0.5, 0.5], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.0, -5.0]).unwrap();
        let y = softmax(&g, &x, 1).unwrap();
        let d = y.data();
        for i in 0..2 {
            let s: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let g = Graph::<f64>::inference();
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(softmax(&g, &x, 2).is_err());
    }

    #[test]
    fn layer_norm_hand_value() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap();
        let gain = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let bias = Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let y = layer_norm(&g, &x, &gain, &bias, 1e-12).unwrap();
        assert_close(&y.data(), &[-1.0, 1.0], 1e-6);
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[3], &[0.0, -2.0, 2.0]).unwrap();
        let s = sigmoid(&g, &x).unwrap().data();
        assert!((s[0] - 0.5).abs() < 1e-12);
        let r = relu(&g, &x).unwrap().data();
        assert_close(&r, &[0.0, 0.0, 2.0], 0.0);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[2], &[1000.0, -1000.0]).unwrap();
        let s = sigmoid(&g, &x).unwrap().data();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let sp = softplus(&g, &x).unwrap().data();
        assert!((sp[0] - 1000.0).abs() < 1e-9 && sp[1].abs() < 1e-12);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let g = Graph::<f64>::inference();
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(matches!(add(&g, &a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_key_attention_is_projected_value() {
        // With one key the softmax weight is exactly 1, so the output is the
        // value row through the value and output projections.
        let g = Graph::<f64>::inference();
        let d = 4;
        let eye = |scale: f64| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = scale;
            }
            m
        };
        let w = AttentionWeights {
            wq: Tensor::from_f64(&[d, d], &eye(1.0)).unwrap(),
            bq: Tensor::<f64>::zeros(&[d]),
            wk: Tensor::from_f64(&[d, d], &eye(1.0)).unwrap(),
            bk: Tensor::<f64>::zeros(&[d]),
            wv: Tensor::from_f64(&[d, d], &eye(2.0)).unwrap(),
            bv: Tensor::from_f64(&[d], &[0.1, 0.2, 0.3, 0.4]).unwrap(),
            wo: Tensor::from_f64(&[d, d], &eye(3.0)).unwrap(),
            bo: Tensor::<f64>::zeros(&[d]),
        };
        let q = Tensor::from_f64(&[1, d], &[0.5, -0.5, 1.0, 2.0]).unwrap();
        let kv = Tensor::from_f64(&[1, d], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = multi_head_attention(&g, &q, &kv, &kv, &w, 2).unwrap();
        let want: Vec<f64> = (0..d).map(|i| (2.0 * (i as f64 + 1.0) + 0.1 * (i as f64 + 1.0)) * 3.0).collect();
        assert_close(&out.data(), &want, 1e-12);
    }

    #[test]
    fn identical_keys_average_values_uniformly() {
        let g = Graph::<f64>::inference();
        let d = 4;
        let eye: Vec<f64> = {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            m
        };
        let w = AttentionWeights {
            wq: Tensor::from_f64(&[d, d], &eye).unwrap(),
            bq: Tensor::<f64>::zeros(&[d]),
            wk: Tensor::from_f64(&[d, d], &eye).unwrap(),
            bk: Tensor::<f64>::zeros(&[d]),
            wv: Tensor::from_f64(&[d, d], &eye).unwrap(),
            bv: Tensor::<f64>::zeros(&[d]),
            wo: Tensor::from_f64(&[d, d], &eye).unwrap(),
            bo: Tensor::<f64>::zeros(&[d]),
        };
        let q = Tensor::from_f64(&[1, d], &[0.3, 0.7, -0.2, 0.9]).unwrap();
        let k = Tensor::from_f64(&[2, d], &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_f64(&[2, d], &[0.0, 2.0, 4.0, 6.0, 2.0, 0.0, -4.0, -6.0]).unwrap();
        let out = multi_head_attention(&g, &q, &k, &v, &w, 2).unwrap();
        assert_close(&out.data(), &[1.0, 1.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn gather_and_select_round_trip() {
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let picked = select_rows(&g, &x, &[1, 0, 1]).unwrap();
        assert_eq!(picked.shape(), vec![3, 3]);
        assert_close(&picked.data()[0..3], &[3.0, 4.0, 5.0], 0.0);

        let per_row = select_per_row(&g, &x, &[2, 0]).unwrap();
        assert_close(&per_row.data(), &[2.0, 3.0], 0.0);

        let sliced = slice_cols(&g, &x, 1, 2).unwrap();
        assert_close(&sliced.data(), &[1.0, 2.0, 4.0, 5.0], 0.0);

        let gathered = gather(&g, &x, &[5, 0], &[2]).unwrap();
        assert_close(&gathered.data(), &[5.0, 0.0], 0.0);
    }

    #[test]
    fn select_rows_out_of_range_is_contract_error() {
        let g = Graph::<f64>::inference();
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(select_rows(&g, &x, &[2]), Err(Error::Contract(_))));
    }
}
