//! Differentiable inverse warping.
//!
//! Every warp gathers: each target-grid cell samples the source image at a
//! projected, generally fractional, location. Locations outside the source
//! or behind the camera get value 0 and mask 0; the mask is a constant for
//! the reverse pass.

use crate::error::{Error, Result};
use crate::geometry::var::{project_points, reproject_grid, PoseVar};
use crate::geometry::{mat_flat, Intrinsics, Mat3, Pose, IDENTITY3};
use crate::tape::{Tape, Tensor, Var};

/// Tolerance, in pixels, for sampling locations just outside the lattice
/// due to rounding; such locations are clamped onto the border.
pub const BORDER_SLACK: f64 = 1e-6;

/// Synthesized view plus its `[H, W]` validity mask.
#[derive(Clone, Debug)]
pub struct WarpResult<'t> {
    pub image: Var<'t>,
    pub mask: Tensor,
}

impl WarpResult<'_> {
    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
}

fn tap(u: f64, v: f64, w: usize, h: usize) -> Option<Tap> {
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    if !u.is_finite() || !v.is_finite() || u < -BORDER_SLACK || v < -BORDER_SLACK || u > wm + BORDER_SLACK || v > hm + BORDER_SLACK {
        return None;
    }
    let (u, v) = (u.clamp(0.0, wm), v.clamp(0.0, hm));
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some(Tap {
        x0,
        x1,
        y0,
        y1,
        wx: u - x0 as f64,
        wy: v - y0 as f64,
    })
}

/// Bilinear sampling of `[C, H, W]` at `[2, H', W']` coordinates `(u, v)`.
///
/// Differentiable with respect to both the source values and the
/// coordinates. `extra_valid`, when given, is ANDed into the mask.
pub fn bilinear_sample<'t>(src: &Var<'t>, coords: &Var<'t>) -> Result<WarpResult<'t>> {
    sample_masked(src, coords, None)
}

fn sample_masked<'t>(src: &Var<'t>, coords: &Var<'t>, extra_valid: Option<&[bool]>) -> Result<WarpResult<'t>> {
    let ss = src.shape();
    let cs = coords.shape();
    if ss.len() != 3 || cs.len() != 3 || cs[0] != 2 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_sample",
            lhs: ss,
            rhs: cs,
        });
    }
    let (c, h, w) = (ss[0], ss[1], ss[2]);
    let (ho, wo) = (cs[1], cs[2]);
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "bilinear_sample",
            reason: "empty source".into(),
        });
    }
    let p = ho * wo;
    let cv = coords.value();
    let taps: Vec<Option<Tap>> = (0..p)
        .map(|k| {
            if extra_valid.is_some_and(|ev| !ev[k]) {
                None
            } else {
                tap(cv[k], cv[p + k], w, h)
            }
        })
        .collect();
    let sv = src.value();
    let mut out = vec![0.0; c * p];
    for ch in 0..c {
        let plane = &sv[ch * h * w..(ch + 1) * h * w];
        for (k, t) in taps.iter().enumerate() {
            if let Some(t) = t {
                let top = (1.0 - t.wx) * plane[t.y0 * w + t.x0] + t.wx * plane[t.y0 * w + t.x1];
                let bot = (1.0 - t.wx) * plane[t.y1 * w + t.x0] + t.wx * plane[t.y1 * w + t.x1];
                out[ch * p + k] = (1.0 - t.wy) * top + t.wy * bot;
            }
        }
    }
    let mask = Tensor::new(
        vec![ho, wo],
        taps.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }).collect(),
    )?;
    let (is, ic) = (src.id(), coords.id());
    let image = src.tape().record(&[*src, *coords], vec![c, ho, wo], out, move |g, sink| {
        sink.accumulate(is, |ds| {
            for ch in 0..c {
                let plane = &mut ds[ch * h * w..(ch + 1) * h * w];
                for (k, t) in taps.iter().enumerate() {
                    if let Some(t) = t {
                        let gk = g[ch * p + k];
                        plane[t.y0 * w + t.x0] += gk * (1.0 - t.wx) * (1.0 - t.wy);
                        plane[t.y0 * w + t.x1] += gk * t.wx * (1.0 - t.wy);
                        plane[t.y1 * w + t.x0] += gk * (1.0 - t.wx) * t.wy;
                        plane[t.y1 * w + t.x1] += gk * t.wx * t.wy;
                    }
                }
            }
        });
        sink.accumulate(ic, |dc| {
            for ch in 0..c {
                let plane = &sv[ch * h * w..(ch + 1) * h * w];
                for (k, t) in taps.iter().enumerate() {
                    if let Some(t) = t {
                        let gk = g[ch * p + k];
                        let (a, b) = (plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1]);
                        let (cc, d) = (plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1]);
                        dc[k] += gk * ((1.0 - t.wy) * (b - a) + t.wy * (d - cc));
                        dc[p + k] += gk * ((1.0 - t.wx) * (cc - a) + t.wx * (d - b));
                    }
                }
            }
        });
    });
    Ok(WarpResult { image, mask })
}

/// Synthesize the target view from `src` given the target depth map and
/// `T_{target→src}`.
pub fn inverse_warp<'t>(src: &Var<'t>, depth: &Var<'t>, pose: &PoseVar<'t>, k: &Intrinsics) -> Result<WarpResult<'t>> {
    let (coords, in_front) = reproject_grid(depth, pose, k)?;
    sample_masked(src, &coords, Some(&in_front))
}

/// Rotation-only warp `p ↦ K·R·K⁻¹·p`, independent of depth.
pub fn stabilize<'t>(src: &Var<'t>, rotation: &Var<'t>, k: &Intrinsics) -> Result<WarpResult<'t>> {
    let ss = src.shape();
    if ss.len() != 3 {
        return Err(Error::InvalidShape {
            op: "stabilize",
            reason: format!("expected [C, H, W], got {ss:?}"),
        });
    }
    let (h, w) = (ss[1], ss[2]);
    let tape = src.tape();
    let rays = tape.constant(k.ray_grid(h, w));
    let rotated = rotation.matmul(&rays)?;
    let (coords, in_front) = project_points(&rotated, k, h, w)?;
    sample_masked(src, &coords, Some(&in_front))
}

/// [`stabilize`] on plain tensors. The identity rotation returns `src`
/// unchanged with a full mask.
pub fn stabilize_image(src: &Tensor, rotation: &Mat3, k: &Intrinsics) -> Result<(Tensor, Tensor)> {
    if src.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "stabilize",
            reason: format!("expected [C, H, W], got {:?}", src.shape()),
        });
    }
    if *rotation == IDENTITY3 {
        let (h, w) = (src.shape()[1], src.shape()[2]);
        return Ok((src.clone(), Tensor::ones(&[h, w])));
    }
    let tape = Tape::new();
    let s = tape.constant(src.clone());
    let r = tape.constant(Tensor::new(vec![3, 3], mat_flat(rotation))?);
    let out = stabilize(&s, &r, k)?;
    Ok((out.image.to_tensor(), out.mask))
}

/// [`inverse_warp`] on plain tensors.
pub fn inverse_warp_image(src: &Tensor, depth: &Tensor, pose: &Pose, k: &Intrinsics) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let s = tape.constant(src.clone());
    let d = tape.constant(depth.clone());
    let out = inverse_warp(&s, &d, &PoseVar::constant(&tape, pose), k)?;
    Ok((out.image.to_tensor(), out.mask))
}

/// Masked mean absolute difference over `[C, H, W]` images.
pub fn masked_l1(a: &Tensor, b: &Tensor, mask: &Tensor) -> Option<f64> {
    let p = mask.numel();
    let c = a.numel() / p;
    let valid: f64 = mask.data().iter().sum();
    if valid == 0.0 {
        return None;
    }
    let mut s = 0.0;
    for ch in 0..c {
        for k in 0..p {
            s += mask.data()[k] * (a.data()[ch * p + k] - b.data()[ch * p + k]).abs();
        }
    }
    Some(s / (valid * c as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{euler_to_matrix, transpose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coords<'t>(tape: &'t Tape, pts: &[(f64, f64)]) -> Var<'t> {
        let n = pts.len();
        let mut d = vec![0.0; 2 * n];
        for (k, &(u, v)) in pts.iter().enumerate() {
            d[k] = u;
            d[n + k] = v;
        }
        tape.constant(Tensor::new(vec![2, 1, n], d).unwrap())
    }

    fn smooth_image(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let y = ((i / w) % h) as f64;
            let x = (i % w) as f64;
            0.5 + 0.25 * (0.21 * x + 0.13 * y + ch as f64).sin() + 0.2 * (0.17 * y - 0.07 * x).cos()
        })
    }

    #[test]
    fn bilinear_cases() {
        let tape = Tape::new();
        let src = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let c = coords(&tape, &[(0.5, 0.5), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (-1.0, -1.0)]);
        let out = bilinear_sample(&src, &c).unwrap();
        assert_eq!(out.image.to_tensor().data(), &[1.5, 1.0, 2.0, 3.0, 0.0]);
        assert_eq!(out.mask.data(), &[1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn integer_lattice_is_exact() {
        let tape = Tape::new();
        let img = smooth_image(2, 5, 7);
        let src = tape.constant(img.clone());
        let grid = Tensor::from_fn(&[2, 5, 7], |i| {
            let k = i % 35;
            if i < 35 {
                (k % 7) as f64
            } else {
                (k / 7) as f64
            }
        });
        let out = bilinear_sample(&src, &tape.constant(grid)).unwrap();
        assert_eq!(out.image.to_tensor(), img);
        assert_eq!(out.valid_count(), 35);
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let img = smooth_image(3, 8, 10);
        let k = Intrinsics::centered(10, 8, 9.0, 9.0).unwrap();
        let depth = Tensor::from_fn(&[8, 10], |i| 1.0 + (i % 7) as f64);
        let (out, mask) = inverse_warp_image(&img, &depth, &Pose::identity(), &k).unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-6);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn lateral_translation_shifts_plane() {
        // a fronto-parallel plane at depth z moves by fx·δ/z pixels
        let (h, w) = (6, 16);
        let img = Tensor::from_fn(&[1, h, w], |i| (i % w) as f64 * 0.1);
        let k = Intrinsics::centered(w, h, 20.0, 20.0).unwrap();
        let (z, delta) = (4.0, 0.4);
        let depth = Tensor::full(&[h, w], z);
        let pose = Pose::new(IDENTITY3, [delta, 0.0, 0.0]);
        let (out, mask) = inverse_warp_image(&img, &depth, &pose, &k).unwrap();
        let shift = 20.0 * delta / z;
        for y in 0..h {
            for x in 0..w {
                let expect_u = x as f64 + shift;
                if expect_u <= (w - 1) as f64 {
                    assert_eq!(mask.at(&[y, x]), 1.0);
                    assert!((out.at(&[0, y, x]) - expect_u * 0.1).abs() < 1e-12);
                } else {
                    assert_eq!(mask.at(&[y, x]), 0.0);
                    assert_eq!(out.at(&[0, y, x]), 0.0);
                }
            }
        }
    }

    #[test]
    fn stabilize_matches_zero_translation_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = smooth_image(3, 12, 16);
        let k = Intrinsics::centered(16, 12, 14.0, 14.0).unwrap();
        for _ in 0..20 {
            let r = euler_to_matrix(&[rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
            let depth = Tensor::from_fn(&[12, 16], |_| rng.gen_range(0.5..50.0));
            let (a, ma) = stabilize_image(&img, &r, &k).unwrap();
            let (b, mb) = inverse_warp_image(&img, &depth, &Pose::new(r, [0.0; 3]), &k).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-9);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn depth_dependence_iff_translation() {
        let img = smooth_image(1, 10, 12);
        let k = Intrinsics::centered(12, 10, 10.0, 10.0).unwrap();
        let near = Tensor::full(&[10, 12], 2.0);
        let far = Tensor::full(&[10, 12], 20.0);
        let rot = Pose::from_euler([0.02, -0.03, 0.01], [0.0; 3]);
        let (a, _) = inverse_warp_image(&img, &near, &rot, &k).unwrap();
        let (b, _) = inverse_warp_image(&img, &far, &rot, &k).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        let moving = Pose::from_euler([0.02, -0.03, 0.01], [0.3, 0.0, 0.0]);
        let (a, _) = inverse_warp_image(&img, &near, &moving, &k).unwrap();
        let (b, _) = inverse_warp_image(&img, &far, &moving, &k).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn behind_camera_is_masked() {
        let img = smooth_image(1, 4, 4);
        let k = Intrinsics::centered(4, 4, 3.0, 3.0).unwrap();
        let depth = Tensor::full(&[4, 4], 1.0);
        let pose = Pose::new(IDENTITY3, [0.0, 0.0, -2.0]);
        let (out, mask) = inverse_warp_image(&img, &depth, &pose, &k).unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stabilization_round_trip_on_smooth_image() {
        let (h, w) = (32, 32);
        let img = smooth_image(1, h, w);
        let k = Intrinsics::centered(w, h, 30.0, 30.0).unwrap();
        let r = euler_to_matrix(&[0.03, -0.04, 0.05]);
        let (once, _) = stabilize_image(&img, &r, &k).unwrap();
        let (back, _) = stabilize_image(&once, &transpose(&r), &k).unwrap();
        // interior crop avoids cells whose round trip left the frame
        let mut se = 0.0;
        let mut n = 0.0;
        for y in 6..h - 6 {
            for x in 6..w - 6 {
                se += (back.at(&[0, y, x]) - img.at(&[0, y, x])).powi(2);
                n += 1.0;
            }
        }
        let psnr = 10.0 * (1.0 / (se / n)).log10();
        assert!(psnr >= 30.0, "psnr {psnr}");
    }

    #[test]
    fn masked_l1_counts_valid_cells_only() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::zeros(&[1, 2, 2]);
        let mask = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(masked_l1(&a, &b, &mask), Some(0.5));
        assert_eq!(masked_l1(&a, &b, &Tensor::zeros(&[2, 2])), None);
    }
}
