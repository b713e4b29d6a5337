//! Spatial operators on `[.., H, W]` tensors.

use super::{Tape, Var};
use crate::error::{Error, Result};

/// `C = op(A)·op(B) + beta·C` for row-major buffers.
///
/// `op(A)` is `m×k` and `op(B)` is `k×n`. A transposed operand is stored
/// in its untransposed layout (`k×m` for A, `n×k` for B).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer sizes");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // elements whose presence the assert checked.
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

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(Error::InvalidShape {
            op,
            reason: format!("expected [.., H, W], got {shape:?}"),
        });
    }
    let planes = shape[..r - 2].iter().product();
    Ok((planes, shape[r - 2], shape[r - 1]))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.c * self.k * self.k * p];
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((ci * self.k + ki) * self.k + kj) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((ci * self.k + ki) * self.k + kj) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = ci * self.h * self.w + iy as usize * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fixed 3×3 depthwise filter applied with clamp-to-edge padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StencilKernel(pub [f64; 9]);

impl StencilKernel {
    /// Normalized 3×3 Gaussian.
    pub fn gaussian(sigma: f64) -> Self {
        let w1 = (-1.0 / (2.0 * sigma * sigma)).exp();
        let taps = [w1, 1.0, w1];
        let norm: f64 = taps.iter().sum::<f64>().powi(2);
        let mut k = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                k[i * 3 + j] = taps[i] * taps[j] / norm;
            }
        }
        StencilKernel(k)
    }

    pub fn laplacian() -> Self {
        StencilKernel([0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0])
    }

    /// Central difference along x (columns).
    pub fn central_dx() -> Self {
        StencilKernel([0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0])
    }

    /// Central difference along y (rows).
    pub fn central_dy() -> Self {
        StencilKernel([0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0])
    }

    /// Apply to every `h×w` plane of `x`.
    pub fn apply(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for (src, dst) in x.chunks(h * w).zip(y.chunks_mut(h * w)) {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        let sy = (yy + dy).saturating_sub(1).min(h - 1);
                        for dx in 0..3 {
                            let sx = (xx + dx).saturating_sub(1).min(w - 1);
                            acc += self.0[dy * 3 + dx] * src[sy * w + sx];
                        }
                    }
                    dst[yy * w + xx] = acc;
                }
            }
        }
        y
    }

    fn apply_transpose(&self, g: &[f64], h: usize, w: usize, out: &mut [f64]) {
        for (src, dst) in g.chunks(h * w).zip(out.chunks_mut(h * w)) {
            for yy in 0..h {
                for xx in 0..w {
                    let gv = src[yy * w + xx];
                    for dy in 0..3 {
                        let sy = (yy + dy).saturating_sub(1).min(h - 1);
                        for dx in 0..3 {
                            let sx = (xx + dx).saturating_sub(1).min(w - 1);
                            dst[sy * w + sx] += self.0[dy * 3 + dx] * gv;
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of `[C, H, W]` with `[F, C, k, k]` weights and
    /// an optional `[F]` bias. `k` must be odd.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let k = ws[2];
        if k % 2 == 0 || stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                reason: format!("kernel {k} must be odd and stride {stride} positive"),
            });
        }
        let (c, h, w, f) = (xs[0], xs[1], xs[2], ws[0]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                reason: format!("non-positive output extent for {h}x{w} input, k={k}, padding={padding}"),
            });
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        };
        if let Some(b) = bias {
            if b.shape() != [f] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![f],
                    rhs: b.shape(),
                });
            }
        }
        let x = self.value();
        let wt = weight.value();
        let cols = geom.im2col(&x);
        let p = geom.ho * geom.wo;
        let ckk = c * k * k;
        let mut y = vec![0.0; f * p];
        gemm(f, ckk, p, &wt, false, &cols, false, &mut y, 0.0);
        if let Some(b) = bias {
            let bv = b.value();
            for (row, bf) in y.chunks_mut(p).zip(bv.iter()) {
                row.iter_mut().for_each(|v| *v += bf);
            }
        }
        let shape = vec![f, geom.ho, geom.wo];
        let (ix, iw) = (self.id(), weight.id());
        let ib = bias.map(|b| b.id());
        let mut inputs = vec![*self, *weight];
        inputs.extend(bias.copied());
        Ok(self.tape().record(&inputs, shape, y, move |g, sink| {
            sink.accumulate(iw, |dw| gemm(f, p, ckk, g, false, &cols, true, dw, 1.0));
            if let Some(ib) = ib {
                sink.accumulate(ib, |db| {
                    for (d, row) in db.iter_mut().zip(g.chunks(p)) {
                        *d += row.iter().sum::<f64>();
                    }
                });
            }
            if sink.wants(ix) {
                let mut dcols = vec![0.0; ckk * p];
                gemm(ckk, f, p, &wt, true, g, false, &mut dcols, 0.0);
                sink.accumulate(ix, |dx| geom.col2im(&dcols, dx));
            }
        }))
    }

    /// Nearest-neighbour 2× upsampling of the trailing two axes.
    pub fn upsample2x(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, h, w) = spatial("upsample2x", &shape)?;
        let x = self.value();
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![0.0; planes * h2 * w2];
        for p in 0..planes {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    y[(p * h2 + yy) * w2 + xx] = x[(p * h + yy / 2) * w + xx / 2];
                }
            }
        }
        let mut out = shape.clone();
        let r = out.len();
        out[r - 2] = h2;
        out[r - 1] = w2;
        let id = self.id();
        Ok(self.tape().record(&[*self], out, y, move |g, sink| {
            sink.accumulate(id, |buf| {
                for p in 0..planes {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            buf[(p * h + yy / 2) * w + xx / 2] += g[(p * h2 + yy) * w2 + xx];
                        }
                    }
                }
            });
        }))
    }

    /// 2×2 mean pooling of the trailing two axes; both must be even.
    pub fn downsample2x_avg(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (planes, h, w) = spatial("downsample2x_avg", &shape)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "downsample2x_avg",
                reason: format!("odd spatial extent {h}x{w}"),
            });
        }
        let (h2, w2) = (h / 2, w / 2);
        let y = downsample_plain(&self.value(), planes, h, w);
        let mut out = shape.clone();
        let r = out.len();
        out[r - 2] = h2;
        out[r - 1] = w2;
        let id = self.id();
        Ok(self.tape().record(&[*self], out, y, move |g, sink| {
            sink.accumulate(id, |buf| {
                for p in 0..planes {
                    for yy in 0..h {
                        for xx in 0..w {
                            buf[(p * h + yy) * w + xx] += 0.25 * g[(p * h2 + yy / 2) * w2 + xx / 2];
                        }
                    }
                }
            });
        }))
    }

    /// Depthwise 3×3 stencil on every `[H, W]` plane.
    pub fn stencil3(&self, kernel: StencilKernel) -> Result<Var<'t>> {
        let shape = self.shape();
        let (_, h, w) = spatial("stencil3", &shape)?;
        let y = kernel.apply(&self.value(), h, w);
        let id = self.id();
        Ok(self.tape().record(&[*self], shape, y, move |g, sink| {
            sink.accumulate(id, |buf| kernel.apply_transpose(g, h, w, buf));
        }))
    }
}

pub(crate) fn downsample_plain(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let i = (p * h + 2 * yy) * w + 2 * xx;
                y[(p * h2 + yy) * w2 + xx] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    y
}

impl Tape {
    /// Mean-pool a constant tensor `levels` times (image pyramid level).
    pub fn pyramid_level(t: &super::Tensor, levels: usize) -> Result<super::Tensor> {
        let mut cur = t.clone();
        for _ in 0..levels {
            let shape = cur.shape().to_vec();
            let (planes, h, w) = spatial("pyramid_level", &shape)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidShape {
                    op: "pyramid_level",
                    reason: format!("odd spatial extent {h}x{w}"),
                });
            }
            let mut out = shape.clone();
            let r = out.len();
            out[r - 2] = h / 2;
            out[r - 1] = w / 2;
            cur = super::Tensor::new(out, downsample_plain(cur.data(), planes, h, w))?;
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn conv_of_ones_sums_neighbourhood() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[1, 3, 3]));
        let w = tape.param(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(&w, None, 1, 1).unwrap().to_tensor();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn strided_conv_shape() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[1, 4, 4]));
        let w = tape.param(Tensor::ones(&[2, 1, 3, 3]));
        let y = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 2]);
    }

    #[test]
    fn conv_rejects_collapsed_output() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[1, 2, 2]));
        let w = tape.param(Tensor::ones(&[1, 1, 5, 5]));
        assert!(x.conv2d(&w, None, 1, 0).is_err());
        let even = tape.param(Tensor::ones(&[1, 1, 2, 2]));
        assert!(x.conv2d(&even, None, 1, 0).is_err());
    }

    #[test]
    fn conv_bias_gradient_counts_outputs() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2, 4, 4]));
        let w = tape.param(Tensor::ones(&[3, 2, 3, 3]));
        let b = tape.param(Tensor::zeros(&[3]));
        let y = x.conv2d(&w, Some(&b), 2, 1).unwrap();
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.wrt(&b).data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn upsample_duplicates_and_sums_back() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = x.upsample2x().unwrap();
        assert_eq!(y.to_tensor().data(), &[1.0, 1.0, 1.0, 1.0]);
        let g = tape.backward(&y.sum()).unwrap();
        assert_eq!(g.wrt(&x).data(), &[4.0]);
    }

    #[test]
    fn downsample_means_and_inverts_upsample() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        assert_eq!(x.downsample2x_avg().unwrap().to_tensor().data(), &[4.0]);
        let c = tape.param(Tensor::full(&[2, 4, 6], 0.7));
        let d = c.downsample2x_avg().unwrap().to_tensor();
        assert!(d.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let r = tape.param(Tensor::from_fn(&[2, 3, 5], |i| (i as f64).sin()));
        let round = r.upsample2x().unwrap().downsample2x_avg().unwrap().to_tensor();
        assert!(round.max_abs_diff(&r.to_tensor()) < 1e-15);
        let odd = tape.param(Tensor::ones(&[1, 3, 4]));
        assert!(odd.downsample2x_avg().is_err());
    }

    #[test]
    fn gaussian_is_normalized_and_preserves_constants() {
        let k = StencilKernel::gaussian(1.0);
        assert!((k.0.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let y = k.apply(&[2.5; 20], 4, 5);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-14));
        let lap = StencilKernel::laplacian().apply(&[3.0; 16], 4, 4);
        assert!(lap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
