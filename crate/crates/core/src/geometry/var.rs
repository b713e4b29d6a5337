//! Differentiable counterparts of the pose operations, recorded on a tape.

use super::{euler_jacobian, euler_to_matrix, mat_flat, Intrinsics, NominalDisplacement, Pose};
use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

/// Floor inside the square root of a translation norm, so the norm stays
/// differentiable at exactly zero translation.
const NORM_FLOOR: f64 = 1e-30;

/// Points with camera depth below this are flagged as behind the camera.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-6;

/// `[3]` Euler angles to a `[3, 3]` rotation matrix.
pub fn euler_to_matrix_var<'t>(angles: &Var<'t>) -> Result<Var<'t>> {
    if angles.shape() != [3] {
        return Err(Error::InvalidShape {
            op: "euler_to_matrix",
            reason: format!("expected [3], got {:?}", angles.shape()),
        });
    }
    let a = angles.value();
    let a = [a[0], a[1], a[2]];
    let r = euler_to_matrix(&a);
    let jac = euler_jacobian(&a);
    let id = angles.id();
    Ok(angles.tape().record(&[*angles], vec![3, 3], mat_flat(&r), move |g, sink| {
        sink.accumulate(id, |buf| {
            for (j, dj) in jac.iter().enumerate() {
                let mut s = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        s += g[r * 3 + c] * dj[r][c];
                    }
                }
                buf[j] += s;
            }
        });
    }))
}

/// Rigid transform with `[3, 3]` rotation and `[3]` translation nodes.
#[derive(Clone, Copy, Debug)]
pub struct PoseVar<'t> {
    pub rotation: Var<'t>,
    pub translation: Var<'t>,
}

impl<'t> PoseVar<'t> {
    pub fn constant(tape: &'t Tape, pose: &Pose) -> Self {
        PoseVar {
            rotation: tape.constant(Tensor::new(vec![3, 3], mat_flat(&pose.rotation)).expect("3x3")),
            translation: tape.constant(Tensor::from_vec(pose.translation.to_vec())),
        }
    }

    pub fn identity(tape: &'t Tape) -> Self {
        Self::constant(tape, &Pose::identity())
    }

    /// From a `[6]` vector `(α, β, γ, tx, ty, tz)`.
    pub fn from_vector(v: &Var<'t>) -> Result<Self> {
        if v.shape() != [6] {
            return Err(Error::InvalidShape {
                op: "pose from vector",
                reason: format!("expected [6], got {:?}", v.shape()),
            });
        }
        Ok(PoseVar {
            rotation: euler_to_matrix_var(&v.narrow(0, 0, 3)?)?,
            translation: v.narrow(0, 3, 3)?,
        })
    }

    /// Forward values as a plain pose.
    pub fn value(&self) -> Pose {
        let r = self.rotation.value();
        let t = self.translation.value();
        Pose {
            rotation: super::mat_from_flat(&r),
            translation: [t[0], t[1], t[2]],
        }
    }

    /// Apply to `[3, P]` points.
    pub fn transform_points(&self, points: &Var<'t>) -> Result<Var<'t>> {
        let shape = points.shape();
        if shape.len() != 2 || shape[0] != 3 {
            return Err(Error::InvalidShape {
                op: "transform_points",
                reason: format!("expected [3, P], got {shape:?}"),
            });
        }
        let tape = points.tape();
        let ones = tape.constant(Tensor::ones(&[1, shape[1]]));
        let t = self.translation.reshape(&[3, 1])?.matmul(&ones)?;
        self.rotation.matmul(points)?.add(&t)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseVar<'t>) -> Result<PoseVar<'t>> {
        let rt = self.rotation.matmul(&other.translation.reshape(&[3, 1])?)?.reshape(&[3])?;
        Ok(PoseVar {
            rotation: self.rotation.matmul(&other.rotation)?,
            translation: rt.add(&self.translation)?,
        })
    }

    pub fn inverse(&self) -> Result<PoseVar<'t>> {
        let rt = self.rotation.transpose()?;
        let t = rt.matmul(&self.translation.reshape(&[3, 1])?)?.reshape(&[3])?.neg();
        Ok(PoseVar {
            rotation: rt,
            translation: t,
        })
    }

    /// Same rotation, translation scaled by a scalar node.
    pub fn scale_translation(&self, s: &Var<'t>) -> Result<PoseVar<'t>> {
        Ok(PoseVar {
            rotation: self.rotation,
            translation: self.translation.mul(s)?,
        })
    }
}

/// Differentiable `‖t‖`.
pub fn translation_norm<'t>(t: &Var<'t>) -> Var<'t> {
    t.square().sum().add_scalar(NORM_FLOOR).sqrt()
}

/// `T_{target→i} = T_{last→i} ∘ inverse(T_{last→target})` for every `i`.
pub fn compensate_to_target_var<'t>(poses_to_last: &[PoseVar<'t>], target: usize) -> Result<Vec<PoseVar<'t>>> {
    let n = poses_to_last.len();
    if target >= n {
        return Err(Error::IndexOutOfRange { index: target, len: n });
    }
    let target_to_last = poses_to_last[target].inverse()?;
    poses_to_last.iter().map(|p| p.compose(&target_to_last)).collect()
}

/// Scale every translation by `D0 / (ε + ‖t_reference‖)`.
pub fn normalize_translations_var<'t>(
    poses: &[PoseVar<'t>],
    reference: usize,
    nd: &NominalDisplacement,
) -> Result<Vec<PoseVar<'t>>> {
    let r = poses.get(reference).ok_or(Error::IndexOutOfRange {
        index: reference,
        len: poses.len(),
    })?;
    let denom = translation_norm(&r.translation).add_scalar(nd.epsilon());
    let tape = r.translation.tape();
    let scale = tape.scalar(nd.d0()).div(&denom)?;
    poses.iter().map(|p| p.scale_translation(&scale)).collect()
}

/// Pixel coordinates of every target pixel after projection into another
/// camera: `K·(R·(ζ·K⁻¹·p) + t)`.
///
/// Returns `[2, H, W]` coordinates (u then v) and the per-pixel flag for
/// points in front of the camera.
pub fn reproject_grid<'t>(depth: &Var<'t>, pose: &PoseVar<'t>, k: &Intrinsics) -> Result<(Var<'t>, Vec<bool>)> {
    let shape = depth.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "reproject_grid",
            reason: format!("depth must be [H, W], got {shape:?}"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let tape = depth.tape();
    let rays = tape.constant(k.ray_grid(h, w));
    let points = rays.mul(&depth.reshape(&[h * w])?)?;
    let moved = pose.transform_points(&points)?;
    project_points(&moved, k, h, w)
}

/// Project `[3, H·W]` camera-frame points to `[2, H, W]` pixel coordinates.
pub fn project_points<'t>(points: &Var<'t>, k: &Intrinsics, h: usize, w: usize) -> Result<(Var<'t>, Vec<bool>)> {
    let p = h * w;
    let z = points.narrow(0, 2, 1)?;
    let in_front: Vec<bool> = z.value().iter().map(|&v| v > MIN_PROJECTED_DEPTH).collect();
    let z = z.clamp_min(MIN_PROJECTED_DEPTH);
    let u = points
        .narrow(0, 0, 1)?
        .div(&z)?
        .mul_scalar(k.fx)
        .add_scalar(k.cx);
    let v = points
        .narrow(0, 1, 1)?
        .div(&z)?
        .mul_scalar(k.fy)
        .add_scalar(k.cy);
    let coords = points.tape().concat(&[u, v], 0)?.reshape(&[2, h, w])?;
    debug_assert_eq!(in_front.len(), p);
    Ok((coords, in_front))
}

#[cfg(test)]
mod tests {
    use super::super::{compensate_to_target, normalize_translations, reproject};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::from_euler(
            [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        )
    }

    #[test]
    fn var_pose_ops_match_plain() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plain: Vec<Pose> = (0..4).map(|_| rand_pose(&mut rng)).collect();
        let vars: Vec<PoseVar> = plain.iter().map(|p| PoseVar::constant(&tape, p)).collect();
        let nd = NominalDisplacement::default();
        for t in 0..4 {
            let a = compensate_to_target(&plain, t).unwrap();
            let b = compensate_to_target_var(&vars, t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(x.max_abs_diff(&y.value()) < 1e-12);
            }
            let na = normalize_translations(&a, (t + 1) % 4, &nd).unwrap();
            let nb = normalize_translations_var(&b, (t + 1) % 4, &nd).unwrap();
            for (x, y) in na.iter().zip(&nb) {
                assert!(x.max_abs_diff(&y.value()) < 1e-12);
            }
        }
    }

    #[test]
    fn reproject_grid_matches_pointwise() {
        let tape = Tape::new();
        let k = Intrinsics::centered(6, 5, 4.0, 4.5).unwrap();
        let pose = Pose::from_euler([0.05, -0.02, 0.03], [0.1, -0.05, 0.2]);
        let depth = Tensor::from_fn(&[5, 6], |i| 1.0 + 0.1 * i as f64);
        let d = tape.constant(depth.clone());
        let (coords, valid) = reproject_grid(&d, &PoseVar::constant(&tape, &pose), &k).unwrap();
        let c = coords.to_tensor();
        for v in 0..5 {
            for u in 0..6 {
                let r = reproject(u as f64, v as f64, depth.at(&[v, u]), &pose, &k).unwrap();
                assert!(valid[v * 6 + u]);
                assert!((c.at(&[0, v, u]) - r.u).abs() < 1e-12);
                assert!((c.at(&[1, v, u]) - r.v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_translation_norm_has_finite_gradient() {
        let tape = Tape::new();
        let t = tape.param(Tensor::zeros(&[3]));
        let n = translation_norm(&t);
        let g = tape.backward(&n).unwrap();
        assert!(g.wrt(&t).data().iter().all(|v| v.is_finite()));
    }
}
