//! Training objective: SSIM, photometric dissimilarity, edge-aware
//! Laplacian smoothness and multi-scale aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{StencilKernel, Tape, Tensor, Var};
use crate::warp::WarpResult;

pub const SSIM_C1: f64 = 0.01;
pub const SSIM_C2: f64 = 0.09;
pub const SSIM_SIGMA: f64 = 1.0;
/// Added to the image-gradient magnitude in the smoothness weight so flat
/// regions stay finite.
pub const GRADIENT_EPS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub num_scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.075,
            lambda: 3.0,
            num_scales: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.lambda >= 0.0) || self.num_scales == 0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights need alpha >= 0, lambda >= 0, num_scales >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-pixel SSIM map of two `[C, H, W]` nodes.
pub fn ssim_var<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let g = StencilKernel::gaussian(SSIM_SIGMA);
    let mu_a = a.stencil3(g)?;
    let mu_b = b.stencil3(g)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = a.square().stencil3(g)?.sub(&mu_aa)?;
    let var_b = b.square().stencil3(g)?.sub(&mu_bb)?;
    let cov = a.mul(b)?.stencil3(g)?.sub(&mu_ab)?;
    let num = mu_ab
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .mul(&cov.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mu_aa
        .add(&mu_bb)?
        .add_scalar(SSIM_C1)
        .mul(&var_a.add(&var_b)?.add_scalar(SSIM_C2))?;
    num.div(&den)
}

/// Per-pixel SSIM map of two `[C, H, W]` images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(ssim_var(&tape.constant(a.clone()), &tape.constant(b.clone()))?.to_tensor())
}

/// `Σ mask·x / (C·Σ mask)` for `[C, H, W]` values and an `[H, W]` mask.
fn masked_mean<'t>(x: &Var<'t>, mask: &Var<'t>, denom: f64) -> Result<Var<'t>> {
    Ok(x.mul(mask)?.sum().mul_scalar(1.0 / denom))
}

/// `Σ_i [masked-mean |Î_i − I_t| − α·masked-mean SSIM(Î_i, I_t)]`.
///
/// A frame with an all-zero mask contributes 0.
pub fn photometric_loss<'t>(warped: &[WarpResult<'t>], target: &Var<'t>, alpha: f64) -> Result<Var<'t>> {
    let tape = target.tape();
    if warped.is_empty() {
        return Err(Error::InvalidArgument("photometric loss needs at least one warped frame".into()));
    }
    let channels = target.shape()[0];
    let mut total = tape.scalar(0.0);
    for (i, w) in warped.iter().enumerate() {
        let valid: f64 = w.mask.data().iter().sum();
        if valid == 0.0 {
            log::warn!("warped frame {i} has an empty validity mask; skipped");
            continue;
        }
        let denom = channels as f64 * valid;
        let mask = tape.constant(w.mask.clone());
        let l1 = masked_mean(&w.image.sub(target)?.abs(), &mask, denom)?;
        let term = if alpha != 0.0 {
            let s = masked_mean(&ssim_var(&w.image, target)?, &mask, denom)?;
            l1.sub(&s.mul_scalar(alpha))?
        } else {
            l1
        };
        total = total.add(&term)?;
    }
    Ok(total)
}

/// Per-pixel weight `1 / (‖∇I‖ + ε_g)`, with `‖∇I‖` the channel mean of
/// the per-channel central-difference gradient magnitude.
pub fn smoothness_weight(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "smooth_loss",
            reason: format!("image must be [C, H, W], got {:?}", image.shape()),
        });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let dx = StencilKernel::central_dx().apply(image.data(), h, w);
    let dy = StencilKernel::central_dy().apply(image.data(), h, w);
    let p = h * w;
    let mut mag = vec![0.0; p];
    for ch in 0..c {
        for k in 0..p {
            let i = ch * p + k;
            mag[k] += (dx[i] * dx[i] + dy[i] * dy[i]).sqrt();
        }
    }
    Tensor::new(vec![h, w], mag.into_iter().map(|m| 1.0 / (m / c as f64 + GRADIENT_EPS)).collect())
}

/// `mean(|Δζ| / (‖∇I‖ + ε_g)) / mean(ζ)` for `[H, W]` depth.
pub fn smooth_loss<'t>(zeta: &Var<'t>, target_image: &Tensor) -> Result<Var<'t>> {
    let zs = zeta.shape();
    let is = target_image.shape();
    if zs.len() != 2 || is.len() != 3 || zs[..] != is[1..] {
        return Err(Error::ShapeMismatch {
            op: "smooth_loss",
            lhs: zs,
            rhs: is.to_vec(),
        });
    }
    let weight = zeta.tape().constant(smoothness_weight(target_image)?);
    let lap = zeta.stencil3(StencilKernel::laplacian())?.abs();
    lap.mul(&weight)?.mean()?.div(&zeta.mean()?)
}

/// `Σ_s (1/2^s)·(L_p^s + λ·L_g^s)`, with `s = 0` the full resolution.
pub fn total_loss<'t>(per_scale: &[(Var<'t>, Var<'t>)], weights: &LossWeights) -> Result<Var<'t>> {
    weights.validate()?;
    if per_scale.len() != weights.num_scales {
        return Err(Error::InvalidArgument(format!(
            "expected {} scales, got {}",
            weights.num_scales,
            per_scale.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (s, (lp, lg)) in per_scale.iter().enumerate() {
        let term = lp.add(&lg.mul_scalar(weights.lambda))?.mul_scalar(0.5f64.powi(s as i32));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("num_scales >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use proptest::prelude::*;

    fn img(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| {
            let x = (i as u64).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(97)) % 1000;
            x as f64 / 999.0
        })
    }

    #[test]
    fn ssim_identity_and_constant_case() {
        let a = img(3, 6, 7, 1);
        let s = ssim(&a, &a).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() <= 1e-9));
        let ones = Tensor::ones(&[1, 4, 4]);
        let zeros = Tensor::zeros(&[1, 4, 4]);
        let s = ssim(&ones, &zeros).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.01 / 1.01).abs() < 1e-12));
    }

    #[test]
    fn ssim_rejects_mismatch() {
        assert!(ssim(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    fn full_warp<'t>(image: Var<'t>) -> WarpResult<'t> {
        let s = image.shape();
        WarpResult {
            image,
            mask: Tensor::ones(&[s[1], s[2]]),
        }
    }

    #[test]
    fn photometric_plug_in() {
        let tape = Tape::new();
        let t = tape.constant(img(3, 5, 5, 2));
        let w = vec![full_warp(t), full_warp(t)];
        assert_eq!(photometric_loss(&w, &t, 0.0).unwrap().item(), 0.0);
        let v = photometric_loss(&w, &t, 0.075).unwrap().item();
        assert!((v + 0.15).abs() < 1e-9);
    }

    #[test]
    fn photometric_half_mask_uses_valid_cells_only() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.2, 0.9, 0.4, 0.9]).unwrap());
        let warped = WarpResult {
            image: w,
            mask: Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        };
        let v = photometric_loss(&[warped], &t, 0.0).unwrap().item();
        assert!((v - 0.3).abs() < 1e-12);
    }

    #[test]
    fn photometric_empty_mask_contributes_zero() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let w = WarpResult {
            image: tape.constant(Tensor::ones(&[1, 2, 2])),
            mask: Tensor::zeros(&[2, 2]),
        };
        assert_eq!(photometric_loss(&[w], &t, 0.075).unwrap().item(), 0.0);
        assert!(photometric_loss(&[], &t, 0.0).is_err());
    }

    #[test]
    fn smooth_loss_constant_depth_is_zero() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::full(&[6, 6], 3.5));
        assert_eq!(smooth_loss(&z, &img(3, 6, 6, 3)).unwrap().item(), 0.0);
    }

    #[test]
    fn smooth_loss_matches_brute_force_on_quadratic_ramp() {
        let n = 5usize;
        let zeta: Vec<f64> = (0..n * n).map(|i| 1.0 + ((i % n) as f64).powi(2)).collect();
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, n as isize - 1) as usize;
            let x = x.clamp(0, n as isize - 1) as usize;
            zeta[y * n + x]
        };
        let mut acc = 0.0;
        for y in 0..n as isize {
            for x in 0..n as isize {
                let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
                // flat image: gradient magnitude 0
                acc += lap.abs() / GRADIENT_EPS;
            }
        }
        let mean_z: f64 = zeta.iter().sum::<f64>() / (n * n) as f64;
        let expect = acc / (n * n) as f64 / mean_z;
        let tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![n, n], zeta.clone()).unwrap());
        let got = smooth_loss(&z, &Tensor::full(&[3, n, n], 0.4)).unwrap().item();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn smoothness_weight_on_linear_ramp() {
        // interior central difference of 0.1·x is 0.1 in every channel
        let image = Tensor::from_fn(&[2, 4, 5], |i| 0.1 * (i % 5) as f64);
        let w = smoothness_weight(&image).unwrap();
        assert!((w.at(&[1, 2]) - 1.0 / 0.2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let one = tape.scalar(1.0);
        let zero = tape.scalar(0.0);
        let four = vec![(one, zero); 4];
        let v = total_loss(&four, &LossWeights::default()).unwrap().item();
        assert!((v - 1.875).abs() < 1e-12);
        let single = LossWeights {
            alpha: 0.0,
            lambda: 3.0,
            num_scales: 1,
        };
        let v = total_loss(&[(tape.scalar(0.1), tape.scalar(0.02))], &single).unwrap().item();
        assert!((v - 0.16).abs() < 1e-12);
        let v = total_loss(&vec![(zero, zero); 4], &LossWeights::default()).unwrap().item();
        assert_eq!(v, 0.0);
        assert!(total_loss(&[(one, zero)], &LossWeights::default()).is_err());
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { num_scales: 0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ssim_bounded_and_symmetric(
            a in proptest::collection::vec(0.0f64..=1.0, 2 * 4 * 5),
            b in proptest::collection::vec(0.0f64..=1.0, 2 * 4 * 5),
        ) {
            let a = Tensor::new(vec![2, 4, 5], a).unwrap();
            let b = Tensor::new(vec![2, 4, 5], b).unwrap();
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!(ab.max_abs_diff(&ba) <= 1e-12);
            prop_assert!(ab.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn smooth_loss_scale_invariant(
            z in proptest::collection::vec(0.1f64..10.0, 36),
            k in 0.01f64..100.0,
        ) {
            let image = img(3, 6, 6, 7);
            let tape = Tape::new();
            let a = smooth_loss(&tape.constant(Tensor::new(vec![6, 6], z.clone()).unwrap()), &image).unwrap().item();
            let zk: Vec<f64> = z.iter().map(|v| v * k).collect();
            let b = smooth_loss(&tape.constant(Tensor::new(vec![6, 6], zk).unwrap()), &image).unwrap().item();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
