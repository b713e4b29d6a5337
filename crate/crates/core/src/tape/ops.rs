use std::rc::Rc;

use super::conv::gemm;
use super::tensor::numel;
use super::{Tape, Var};
use crate::error::{Error, Result};

/// How [`Var::div_with`] treats denominator elements near zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DivPolicy {
    /// Any exactly-zero denominator is an error.
    Error,
    /// Denominators with magnitude below `eps` are replaced by `±eps`;
    /// the gradient with respect to a clamped denominator is zero.
    Epsilon(f64),
}

/// Operand layout for a broadcasting binary op. The shorter operand's shape
/// must be a trailing suffix of the longer one, or it must hold one element.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && b.len() <= a.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn reduce_into(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in grad.chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

impl<'t> Var<'t> {
    fn binary(
        &self,
        other: &Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        // partials (da, db) given (a, b)
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Var<'t>> {
        let shape = broadcast_shape(op, &self.shape(), &other.shape())?;
        let (av, bv) = (self.value(), other.value());
        let n = numel(&shape);
        let (la, lb) = (av.len(), bv.len());
        let value: Vec<f64> = (0..n).map(|k| f(av[k % la], bv[k % lb])).collect();
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(&[*self, *other], shape, value, move |g, sink| {
            let want_a = sink.wants(ia);
            let want_b = sink.wants(ib);
            let mut ga = vec![0.0; if want_a { n } else { 0 }];
            let mut gb = vec![0.0; if want_b { n } else { 0 }];
            for k in 0..n {
                let (da, db) = df(av[k % la], bv[k % lb]);
                if want_a {
                    ga[k] = g[k] * da;
                }
                if want_b {
                    gb[k] = g[k] * db;
                }
            }
            if want_a {
                sink.add(ia, &reduce_into(&ga, la));
            }
            if want_b {
                sink.add(ib, &reduce_into(&gb, lb));
            }
        }))
    }

    /// Elementwise op with derivative expressed through input and output.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y: Rc<Vec<f64>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let yc = y.clone();
        let id = self.id;
        self.tape.record_rc(&[*self], self.shape(), y, move |g, sink| {
            sink.accumulate(id, |buf| {
                for k in 0..buf.len() {
                    buf[k] += g[k] * df(x[k], yc[k]);
                }
            });
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    /// Elementwise division; any zero in the denominator is an error.
    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.div_with(other, DivPolicy::Error)
    }

    pub fn div_with(&self, other: &Var<'t>, policy: DivPolicy) -> Result<Var<'t>> {
        match policy {
            DivPolicy::Error => {
                if other.value().iter().any(|&b| b == 0.0) {
                    return Err(Error::DivisionByZero { op: "div" });
                }
                self.binary(other, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
            }
            DivPolicy::Epsilon(eps) => {
                if !(eps > 0.0) {
                    return Err(Error::InvalidArgument(format!("division guard must be positive, got {eps}")));
                }
                let guarded = other.clamp_magnitude(eps);
                self.binary(&guarded, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
            }
        }
    }

    /// Replace elements with `|x| < eps` by `eps` carrying the sign of `x`
    /// (zero maps to `+eps`). Clamped elements pass no gradient.
    fn clamp_magnitude(&self, eps: f64) -> Var<'t> {
        self.unary(
            move |x| {
                if x.abs() >= eps {
                    x
                } else if x < 0.0 {
                    -eps
                } else {
                    eps
                }
            },
            |x, y| if x == y { 1.0 } else { 0.0 },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        let id = self.id;
        let y: Vec<f64> = self.value().iter().map(|&x| x * c).collect();
        self.tape.record(&[*self], self.shape(), y, move |g, sink| {
            sink.accumulate(id, |buf| {
                for (b, gk) in buf.iter_mut().zip(g) {
                    *b += gk * c;
                }
            });
        })
    }

    pub fn neg(&self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// `x^p` for a constant exponent. Non-integer `p` needs `x > 0`.
    pub fn powf(&self, p: f64) -> Var<'t> {
        let id = self.id;
        let x = self.value();
        let y: Vec<f64> = x.iter().map(|&v| v.powf(p)).collect();
        self.tape.record(&[*self], self.shape(), y, move |g, sink| {
            sink.accumulate(id, |buf| {
                for k in 0..buf.len() {
                    buf[k] += g[k] * p * x[k].powf(p - 1.0);
                }
            });
        })
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if self.value().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument("log of a non-positive element".into()));
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `x` for `x > 0`, `slope·x` otherwise.
    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `x` for `x >= 0`, `exp(x) - 1` otherwise.
    pub fn elu(&self) -> Var<'t> {
        self.unary(
            |x| if x >= 0.0 { x } else { x.exp_m1() },
            |x, y| if x >= 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    /// `max(x, lo)`; clamped elements pass no gradient.
    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(move |x| x.max(lo), move |x, _| if x >= lo { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Var<'t> {
        let id = self.id;
        let s: f64 = self.value().iter().sum();
        self.tape.record(&[*self], vec![], vec![s], move |g, sink| {
            let g0 = g[0];
            sink.accumulate(id, |buf| buf.iter_mut().for_each(|b| *b += g0));
        })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                reason: "empty reduction".into(),
            });
        }
        Ok(self.sum().mul_scalar(1.0 / n as f64))
    }

    /// Sum over the listed axes, removing them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(Error::InvalidShape {
                    op: "sum_axes",
                    reason: format!("bad axis {a} for shape {shape:?}"),
                });
            }
            reduced[a] = true;
        }
        if axes.iter().any(|&a| shape[a] == 0) {
            return Err(Error::InvalidShape {
                op: "sum_axes",
                reason: "empty reduction".into(),
            });
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        // output stride for each input axis (0 for reduced axes)
        let mut out_strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            if !reduced[i] {
                out_strides[i] = acc;
                acc *= shape[i];
            }
        }
        let map: Rc<Vec<usize>> = Rc::new(
            (0..numel(&shape))
                .map(|mut flat| {
                    let mut o = 0;
                    for i in (0..shape.len()).rev() {
                        o += (flat % shape[i]) * out_strides[i];
                        flat /= shape[i];
                    }
                    o
                })
                .collect(),
        );
        let x = self.value();
        let mut y = vec![0.0; numel(&out_shape)];
        for (k, &o) in map.iter().enumerate() {
            y[o] += x[k];
        }
        let id = self.id;
        Ok(self.tape.record(&[*self], out_shape, y, move |g, sink| {
            sink.accumulate(id, |buf| {
                for (k, &o) in map.iter().enumerate() {
                    buf[k] += g[o];
                }
            });
        }))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(axes)?;
        Ok(s.mul_scalar(1.0 / count as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        if numel(shape) != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                reason: format!("cannot view {:?} as {:?}", self.shape(), shape),
            });
        }
        let id = self.id;
        Ok(self
            .tape
            .record_rc(&[*self], shape.to_vec(), self.value(), move |g, sink| sink.add(id, g)))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                reason: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let x = self.value();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&x[o * row + start * inner..o * row + (start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let id = self.id;
        let n_in = x.len();
        Ok(self.tape.record(&[*self], out_shape, y, move |g, sink| {
            sink.accumulate(id, |buf| {
                debug_assert_eq!(buf.len(), n_in);
                for o in 0..outer {
                    let dst = &mut buf[o * row + start * inner..o * row + (start + len) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            });
        }))
    }

    /// Single element at a flat index, as a scalar node.
    pub fn element(&self, index: usize) -> Result<Var<'t>> {
        let n = self.numel();
        if index >= n {
            return Err(Error::IndexOutOfRange { index, len: n });
        }
        self.reshape(&[n])?.narrow(0, index, 1)?.reshape(&[])
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                reason: format!("expected rank 2, got {shape:?}"),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.value();
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                y[j * r + i] = x[i * c + j];
            }
        }
        let id = self.id;
        Ok(self.tape.record(&[*self], vec![c, r], y, move |g, sink| {
            sink.accumulate(id, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            });
        }))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut y, 0.0);
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(&[*self, *other], vec![m, n], y, move |g, sink| {
            // dA = G Bᵀ, dB = Aᵀ G
            sink.accumulate(ia, |buf| gemm(m, n, k, g, false, &b, true, buf, 1.0));
            sink.accumulate(ib, |buf| gemm(k, m, n, &a, true, g, false, buf, 1.0));
        }))
    }
}

impl Tape {
    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                reason: format!("axis {axis} for shape {base:?}"),
            });
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            extents.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let values: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.value()).collect();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                y.extend_from_slice(&v[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(parts, out_shape, y, move |g, sink| {
            let mut offset = 0;
            for (&id, &e) in ids.iter().zip(&extents) {
                sink.accumulate(id, |buf| {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset * inner..o * total * inner + (offset + e) * inner];
                        for (d, s) in buf[o * e * inner..(o + 1) * e * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += e;
            }
        }))
    }
}
