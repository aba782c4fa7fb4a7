//! Pinhole camera geometry and differentiable view synthesis.
//!
//! The warp back-projects every target pixel with its depth, moves it by a
//! rigid transform, projects it into the source view, and samples the source
//! bilinearly. Pixels that land outside the source image or behind the
//! camera are dropped from the validity mask instead of being clamped.
//!
//! Coordinates are pixel-centred: column `u` runs over `[0, width-1]`, row
//! `v` over `[0, height-1]`. A rigid transform is parameterised as a
//! 6-vector `[rx, ry, rz, tx, ty, tz]`: axis-angle rotation, then
//! translation, mapping target-camera points into the source camera.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Smallest representable scene depth.
pub const DEPTH_MIN: f64 = 0.1;
/// Largest representable scene depth.
pub const DEPTH_MAX: f64 = 100.0;
/// Slack on image-border validity tests, absorbing float round-off so an
/// identity warp keeps border pixels valid.
pub const BORDER_SLACK: f64 = 1e-6;

/// Pinhole intrinsics for one image resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<F: Real> {
    pub fx: F,
    pub fy: F,
    pub cx: F,
    pub cy: F,
    pub width: usize,
    pub height: usize,
}

impl<F: Real> Intrinsics<F> {
    /// Validates positive focal lengths, a principal point strictly inside
    /// the image, and nonzero extent.
    pub fn new(fx: F, fy: F, cx: F, cy: F, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image extent must be nonzero"));
        }
        if !(fx > F::zero() && fy > F::zero()) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid(format!(
                "focal lengths must be finite and positive, got fx={fx}, fy={fy}"
            )));
        }
        let w = F::c(width as f64);
        let h = F::c(height as f64);
        if !(cx > F::zero() && cx < w && cy > F::zero() && cy < h) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) must lie strictly inside {width}x{height}"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Parses the single-line calibration format `fx fy cx cy width height`.
    pub fn from_calibration(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::invalid(format!(
                "calibration line needs 6 fields `fx fy cx cy width height`, got {}",
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad calibration number `{s}`")))
        };
        let dim = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad calibration extent `{s}`")))
        };
        Intrinsics::new(
            F::c(num(fields[0])?),
            F::c(num(fields[1])?),
            F::c(num(fields[2])?),
            F::c(num(fields[3])?),
            dim(fields[4])?,
            dim(fields[5])?,
        )
    }

    /// Renders the single-line calibration format.
    pub fn to_calibration(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    /// Rescales to a new resolution, scaling focal lengths and principal
    /// point proportionally.
    pub fn scaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = F::c(width as f64) / F::c(self.width as f64);
        let sy = F::c(height as f64) / F::c(self.height as f64);
        Intrinsics::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
        )
    }

    /// Per-pixel `(u - cx) / fx`.
    pub fn normalized_x(&self) -> Array2<F> {
        Array2::from_shape_fn((self.height, self.width), |(_, c)| {
            (F::c(c as f64) - self.cx) / self.fx
        })
    }

    /// Per-pixel `(v - cy) / fy`.
    pub fn normalized_y(&self) -> Array2<F> {
        Array2::from_shape_fn((self.height, self.width), |(r, _)| {
            (F::c(r as f64) - self.cy) / self.fy
        })
    }
}

/// Rigid motion as axis-angle rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3<F: Real> {
    pub rotation: [F; 3],
    pub translation: [F; 3],
}

impl<F: Real> PoseSE3<F> {
    pub fn new(rotation: [F; 3], translation: [F; 3]) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        PoseSE3 {
            rotation: [F::zero(); 3],
            translation: [F::zero(); 3],
        }
    }

    /// Packs into the 6-vector layout used on the tape.
    pub fn to_vector(&self) -> [F; 6] {
        let [rx, ry, rz] = self.rotation;
        let [tx, ty, tz] = self.translation;
        [rx, ry, rz, tx, ty, tz]
    }

    pub fn from_vector(v: [F; 6]) -> Self {
        PoseSE3 {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    /// Rodrigues rotation matrix. Falls back to the series expansion of
    /// `sin(t)/t` and `(1-cos(t))/t^2` near zero, where both are smooth.
    pub fn rotation_matrix(&self) -> [[F; 3]; 3] {
        let [x, y, z] = self.rotation;
        let th2 = x * x + y * y + z * z;
        let (a, b) = rodrigues_coefficients(th2);
        let one = F::one();
        [
            [
                one - b * (y * y + z * z),
                b * x * y - a * z,
                a * y + b * x * z,
            ],
            [
                a * z + b * x * y,
                one - b * (x * x + z * z),
                b * y * z - a * x,
            ],
            [
                b * x * z - a * y,
                a * x + b * y * z,
                one - b * (x * x + y * y),
            ],
        ]
    }

    /// Applies rotation then translation.
    pub fn transform_point(&self, p: [F; 3]) -> [F; 3] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Exact inverse: axis-angle negates, translation counter-rotates.
    pub fn inverse(&self) -> Self {
        let [x, y, z] = self.rotation;
        let inv = PoseSE3 {
            rotation: [-x, -y, -z],
            translation: [F::zero(); 3],
        };
        let r = inv.rotation_matrix();
        let t = self.translation;
        PoseSE3 {
            rotation: inv.rotation,
            translation: [
                -(r[0][0] * t[0] + r[0][1] * t[1] + r[0][2] * t[2]),
                -(r[1][0] * t[0] + r[1][1] * t[1] + r[1][2] * t[2]),
                -(r[2][0] * t[0] + r[2][1] * t[1] + r[2][2] * t[2]),
            ],
        }
    }

    /// Homogeneous 4x4 matrix.
    pub fn matrix(&self) -> [[F; 4]; 4] {
        let r = self.rotation_matrix();
        let t = self.translation;
        let (zero, one) = (F::zero(), F::one());
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [zero, zero, zero, one],
        ]
    }
}

fn rodrigues_coefficients<F: Real>(th2: F) -> (F, F) {
    if th2 < F::c(1e-12) {
        (
            F::one() - th2 / F::c(6.0),
            F::c(0.5) - th2 / F::c(24.0),
        )
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (F::one() - th.cos()) / th2)
    }
}

/// Color image, `[height, width, 3]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame<F: Real> {
    data: Array3<F>,
}

impl<F: Real> ImageFrame<F> {
    /// Accepts data already within `[0, 1]`; rejects anything else.
    pub fn new(data: Array3<F>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::shape(format!(
                "image needs 3 channels, got {}",
                data.shape()[2]
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || v < F::zero() || v > F::one() {
                return Err(Error::invalid(format!("image value {v} outside [0, 1]")));
            }
        }
        Ok(ImageFrame { data })
    }

    /// Clamps into `[0, 1]`, the ingestion rule for external pixel data.
    /// Non-finite input is rejected.
    pub fn from_clamped(data: Array3<F>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "image data".into(),
            });
        }
        Ok(ImageFrame {
            data: data.mapv(|v| v.max(F::zero()).min(F::one())),
        })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    /// Channel-first copy, `[3, height, width]`, for tape pipelines.
    pub fn to_chw(&self) -> ArrayD<F> {
        let (h, w, _) = self.data.dim();
        let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    out[[ch, r, c]] = self.data[[r, c, ch]];
                }
            }
        }
        out
    }

    /// Rebuilds from a channel-first array, clamping into range.
    pub fn from_chw(chw: &ArrayD<F>) -> Result<Self> {
        if chw.ndim() != 3 || chw.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "expected [3, h, w], got {:?}",
                chw.shape()
            )));
        }
        let (h, w) = (chw.shape()[1], chw.shape()[2]);
        let mut data = Array3::zeros((h, w, 3));
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    data[[r, c, ch]] = chw[[ch, r, c]];
                }
            }
        }
        ImageFrame::from_clamped(data)
    }

    /// Luminance proxy: plain channel mean.
    pub fn gray(&self) -> Array2<F> {
        let (h, w, _) = self.data.dim();
        let third = F::one() / F::c(3.0);
        Array2::from_shape_fn((h, w), |(r, c)| {
            (self.data[[r, c, 0]] + self.data[[r, c, 1]] + self.data[[r, c, 2]]) * third
        })
    }
}

/// Per-pixel scene depth, `[height, width]`, inside `[DEPTH_MIN, DEPTH_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<F: Real> {
    data: Array2<F>,
}

impl<F: Real> DepthMap<F> {
    pub fn new(data: Array2<F>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || v < F::c(DEPTH_MIN) || v > F::c(DEPTH_MAX) {
                return Err(Error::invalid(format!(
                    "depth value {v} outside [{DEPTH_MIN}, {DEPTH_MAX}]"
                )));
            }
        }
        Ok(DepthMap { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array2<F> {
        &self.data
    }

    pub fn into_data(self) -> Array2<F> {
        self.data
    }
}

/// Outcome of warping a source frame into the target view.
///
/// Entries outside `validity` are zero in every field; valid entries carry a
/// strictly positive `projected_depth` and in-bounds source coordinates.
#[derive(Debug, Clone)]
pub struct WarpResult<F: Real> {
    pub reconstruction: ImageFrame<F>,
    pub validity: Array2<bool>,
    pub projected_depth: Array2<F>,
    pub interpolated_depth: Array2<F>,
}

impl<F: Real> WarpResult<F> {
    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&b| b).count()
    }
}

/// Tape-resident warp outputs, for building losses on top.
pub struct WarpVars<'t, F: Real> {
    /// `[3, h, w]` reconstruction; zero where invalid.
    pub reconstruction: Var<'t, F>,
    /// `[h, w]` depth of each reprojected point in the source camera.
    pub projected_depth: Var<'t, F>,
    /// `[h, w]` source depth sampled at the reprojected position.
    pub interpolated_depth: Var<'t, F>,
    pub validity: Array2<bool>,
}

/// Reprojects one pixel: back-project at `depth`, transform by `pose`,
/// project. Returns the continuous source coordinates and the depth of the
/// transformed point.
pub fn reproject_pixel<F: Real>(
    u: F,
    v: F,
    depth: F,
    pose: &PoseSE3<F>,
    k: &Intrinsics<F>,
) -> (F, F, F) {
    let x = depth * (u - k.cx) / k.fx;
    let y = depth * (v - k.cy) / k.fy;
    let p = pose.transform_point([x, y, depth]);
    (
        k.fx * p[0] / p[2] + k.cx,
        k.fy * p[1] / p[2] + k.cy,
        p[2],
    )
}

/// Rotation matrix entries and translation components as scalar tape nodes,
/// differentiable in the pose 6-vector.
pub fn pose_on_tape<'t, F: Real>(pose: Var<'t, F>) -> ([[Var<'t, F>; 3]; 3], [Var<'t, F>; 3]) {
    assert_eq!(pose.dims(), vec![6], "pose node must be a 6-vector");
    let wx = pose.index_axis0(0);
    let wy = pose.index_axis0(1);
    let wz = pose.index_axis0(2);
    let tx = pose.index_axis0(3);
    let ty = pose.index_axis0(4);
    let tz = pose.index_axis0(5);

    let th2 = wx * wx + wy * wy + wz * wz;
    let (a, b) = if th2.scalar_value() < F::c(1e-12) {
        (
            th2.scale(F::c(-1.0 / 6.0)).offset(F::one()),
            th2.scale(F::c(-1.0 / 24.0)).offset(F::c(0.5)),
        )
    } else {
        let th = th2.sqrt();
        (
            th.sin() / th,
            th.cos().scale(-F::one()).offset(F::one()) / th2,
        )
    };

    let xy = wx * wy;
    let xz = wx * wz;
    let yz = wy * wz;
    let r00 = (b * (wy * wy + wz * wz)).scale(-F::one()).offset(F::one());
    let r11 = (b * (wx * wx + wz * wz)).scale(-F::one()).offset(F::one());
    let r22 = (b * (wx * wx + wy * wy)).scale(-F::one()).offset(F::one());
    let r01 = b * xy - a * wz;
    let r02 = a * wy + b * xz;
    let r10 = a * wz + b * xy;
    let r12 = b * yz - a * wx;
    let r20 = b * xz - a * wy;
    let r21 = a * wx + b * yz;

    ([[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]], [tx, ty, tz])
}

/// Differentiable warp. `source_chw` is `[3, h, w]`, the depths `[h, w]`,
/// `pose` the 6-vector mapping target-camera points into the source camera.
pub fn warp_on_tape<'t, F: Real>(
    source_chw: Var<'t, F>,
    source_depth: Var<'t, F>,
    target_depth: Var<'t, F>,
    pose: Var<'t, F>,
    k: &Intrinsics<F>,
) -> WarpVars<'t, F> {
    let tape = source_chw.tape();
    let (h, w) = (k.height, k.width);
    assert_eq!(target_depth.dims(), vec![h, w], "target depth shape");

    let x0 = tape.constant(k.normalized_x().into_dyn());
    let y0 = tape.constant(k.normalized_y().into_dyn());
    let ([r0, r1, r2], [tx, ty, tz]) = pose_on_tape(pose);

    let px = target_depth * x0;
    let py = target_depth * y0;
    let pz = target_depth;

    let xc = r0[0] * px + r0[1] * py + r0[2] * pz + tx;
    let yc = r1[0] * px + r1[1] * py + r1[2] * pz + ty;
    let zc = r2[0] * px + r2[1] * py + r2[2] * pz + tz;

    // Depth validity decided on forward values; the masked division keeps
    // gradients off the excluded lanes and never divides by zero.
    let zc_val = zc.value();
    let z_ok = Array2::from_shape_fn((h, w), |(r, c)| zc_val[[r, c]] > F::zero());
    let zmask = tape.constant(
        Array2::from_shape_fn((h, w), |(r, c)| {
            if z_ok[[r, c]] {
                F::one()
            } else {
                F::zero()
            }
        })
        .into_dyn(),
    );
    let zfill = tape.constant(
        Array2::from_shape_fn((h, w), |(r, c)| {
            if z_ok[[r, c]] {
                F::zero()
            } else {
                F::one()
            }
        })
        .into_dyn(),
    );
    let zc_safe = zc * zmask + zfill;

    let u = (xc / zc_safe).scale(k.fx).offset(k.cx);
    let v = (yc / zc_safe).scale(k.fy).offset(k.cy);

    let (uv, vv) = (u.value(), v.value());
    let slack = F::c(BORDER_SLACK);
    let (umax, vmax) = (F::c((w - 1) as f64) + slack, F::c((h - 1) as f64) + slack);
    let validity = Array2::from_shape_fn((h, w), |(r, c)| {
        z_ok[[r, c]]
            && uv[[r, c]] >= -slack
            && uv[[r, c]] <= umax
            && vv[[r, c]] >= -slack
            && vv[[r, c]] <= vmax
    });

    let vmask = tape.constant(
        Array2::from_shape_fn((h, w), |(r, c)| {
            if validity[[r, c]] {
                F::one()
            } else {
                F::zero()
            }
        })
        .into_dyn(),
    );

    let reconstruction = source_chw.grid_sample(u, v, &validity);
    let interpolated = source_depth
        .reshape(&[1, h, w])
        .grid_sample(u, v, &validity)
        .reshape(&[h, w]);
    let projected = zc * vmask;

    WarpVars {
        reconstruction,
        projected_depth: projected,
        interpolated_depth: interpolated,
        validity,
    }
}

/// Warps `source` into the target view defined by `target_depth` and `pose`.
///
/// Degenerate geometry yields an empty validity mask, not an error; shape
/// disagreements are rejected up front.
pub fn warp_frame<F: Real>(
    source: &ImageFrame<F>,
    source_depth: &DepthMap<F>,
    target_depth: &DepthMap<F>,
    pose: &PoseSE3<F>,
    k: &Intrinsics<F>,
) -> Result<WarpResult<F>> {
    let (h, w) = (k.height, k.width);
    for (label, sh, sw) in [
        ("source image", source.height(), source.width()),
        ("source depth", source_depth.height(), source_depth.width()),
        ("target depth", target_depth.height(), target_depth.width()),
    ] {
        if (sh, sw) != (h, w) {
            return Err(Error::shape(format!(
                "{label} is {sh}x{sw}, intrinsics expect {h}x{w}"
            )));
        }
    }

    let tape: Tape<F> = Tape::new();
    let src = tape.constant(source.to_chw());
    let sd = tape.constant(source_depth.data().clone().into_dyn());
    let td = tape.constant(target_depth.data().clone().into_dyn());
    let pv = tape.constant(
        ndarray::Array1::from_vec(pose.to_vector().to_vec()).into_dyn(),
    );
    let warp = warp_on_tape(src, sd, td, pv, k);

    let recon = ImageFrame::from_clamped(
        warp.reconstruction
            .value()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("warp reconstruction is 3-d")
            .permuted_axes([1, 2, 0])
            .to_owned(),
    )?;
    let proj = warp
        .projected_depth
        .value()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("projected depth is 2-d");
    let interp = warp
        .interpolated_depth
        .value()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("interpolated depth is 2-d");

    Ok(WarpResult {
        reconstruction: recon,
        validity: warp.validity,
        projected_depth: proj,
        interpolated_depth: interp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{max_relative_error, numeric_gradient};
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_intrinsics() -> Intrinsics<f64> {
        Intrinsics::new(6.0, 6.0, 3.5, 3.5, 8, 8).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageFrame<f64> {
        ImageFrame::new(Array3::from_shape_fn((h, w, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap()
    }

    fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap<f64> {
        DepthMap::new(Array2::from_shape_fn((h, w), |_| rng.random_range(1.0..5.0))).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3<f64> {
        PoseSE3::new(
            [
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ],
            [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            ],
        )
    }

    #[test]
    fn intrinsics_reject_bad_values() {
        assert!(Intrinsics::<f64>::new(0.0, 6.0, 3.5, 3.5, 8, 8).is_err());
        assert!(Intrinsics::<f64>::new(6.0, -1.0, 3.5, 3.5, 8, 8).is_err());
        assert!(Intrinsics::<f64>::new(6.0, 6.0, 9.0, 3.5, 8, 8).is_err());
        assert!(Intrinsics::<f64>::new(6.0, 6.0, 3.5, 3.5, 0, 8).is_err());
    }

    #[test]
    fn calibration_line_round_trips() {
        let k = Intrinsics::<f64>::new(721.5, 719.2, 609.5, 172.8, 1242, 375).unwrap();
        let line = k.to_calibration();
        let back = Intrinsics::<f64>::from_calibration(&line).unwrap();
        assert_eq!(k, back);
        assert!(Intrinsics::<f64>::from_calibration("1 2 3").is_err());
        assert!(Intrinsics::<f64>::from_calibration("a b c d e f").is_err());
    }

    #[test]
    fn quarter_turn_about_z_matches_reference_matrix() {
        let pose = PoseSE3::<f64>::new([0.0, 0.0, std::f64::consts::FRAC_PI_2], [0.0; 3]);
        let r = pose.rotation_matrix();
        let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (r[i][j] - expect[i][j]).abs() < 1e-9,
                    "entry ({i},{j}) = {}",
                    r[i][j]
                );
            }
        }
    }

    #[test]
    fn zero_rotation_is_exactly_identity() {
        let r = PoseSE3::<f64>::identity().rotation_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    proptest! {
        #[test]
        fn pose_composed_with_inverse_is_identity(
            rx in -1.5f64..1.5, ry in -1.5f64..1.5, rz in -1.5f64..1.5,
            tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
            px in -3.0f64..3.0, py in -3.0f64..3.0, pz in 0.5f64..5.0,
        ) {
            let pose = PoseSE3::new([rx, ry, rz], [tx, ty, tz]);
            let p = [px, py, pz];
            let roundtrip = pose.inverse().transform_point(pose.transform_point(p));
            for i in 0..3 {
                prop_assert!((roundtrip[i] - p[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lateral_translation_shifts_by_focal_over_depth() {
        let k = test_intrinsics();
        let (txv, depth) = (0.5, 2.0);
        let pose = PoseSE3::new([0.0; 3], [txv, 0.0, 0.0]);
        let (u2, v2, z2) = reproject_pixel(3.0, 4.0, depth, &pose, &k);
        assert!((u2 - 3.0 - k.fx * txv / depth).abs() < 1e-12);
        assert!((v2 - 4.0).abs() < 1e-12);
        assert!((z2 - depth).abs() < 1e-12);
    }

    #[test]
    fn points_behind_the_camera_are_invalidated() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = random_image(&mut rng, 8, 8);
        let depth = random_depth(&mut rng, 8, 8);
        // Half-turn about y flips z for every forward point.
        let pose = PoseSE3::new([0.0, std::f64::consts::PI, 0.0], [0.0; 3]);
        let res = warp_frame(&img, &depth, &depth, &pose, &k).unwrap();
        assert_eq!(res.valid_count(), 0);
        assert!(res.projected_depth.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn identity_warp_reproduces_source_with_full_validity() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let img = random_image(&mut rng, 8, 8);
        let depth = random_depth(&mut rng, 8, 8);
        let res = warp_frame(&img, &depth, &depth, &PoseSE3::identity(), &k).unwrap();
        assert_eq!(res.valid_count(), 64);
        for (a, b) in res
            .reconstruction
            .data()
            .iter()
            .zip(img.data().iter())
        {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in res.interpolated_depth.iter().zip(depth.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn extreme_translation_empties_the_mask_without_error() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = random_image(&mut rng, 8, 8);
        let depth = random_depth(&mut rng, 8, 8);
        let pose = PoseSE3::new([0.0; 3], [1e5, 0.0, 0.0]);
        let res = warp_frame(&img, &depth, &depth, &pose, &k).unwrap();
        assert_eq!(res.valid_count(), 0);
    }

    #[test]
    fn warp_rejects_mismatched_shapes() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let img = random_image(&mut rng, 8, 8);
        let depth8 = random_depth(&mut rng, 8, 8);
        let depth4 = random_depth(&mut rng, 4, 4);
        let e = warp_frame(&img, &depth8, &depth4, &PoseSE3::identity(), &k);
        assert!(matches!(e, Err(Error::ShapeMismatch(_))));
    }

    /// Scalar reference warp, written independently of the tape pipeline.
    fn reference_warp(
        img: &ImageFrame<f64>,
        sd: &DepthMap<f64>,
        td: &DepthMap<f64>,
        pose: &PoseSE3<f64>,
        k: &Intrinsics<f64>,
    ) -> (Array3<f64>, Array2<bool>, Array2<f64>, Array2<f64>) {
        let (h, w) = (k.height, k.width);
        let r = pose.rotation_matrix();
        let t = pose.translation;
        let mut recon = Array3::zeros((h, w, 3));
        let mut valid = Array2::from_elem((h, w), false);
        let mut proj = Array2::zeros((h, w));
        let mut interp = Array2::zeros((h, w));
        for row in 0..h {
            for col in 0..w {
                let d = td.data()[[row, col]];
                let x = d * (col as f64 - k.cx) / k.fx;
                let y = d * (row as f64 - k.cy) / k.fy;
                let xc = r[0][0] * x + r[0][1] * y + r[0][2] * d + t[0];
                let yc = r[1][0] * x + r[1][1] * y + r[1][2] * d + t[1];
                let zc = r[2][0] * x + r[2][1] * y + r[2][2] * d + t[2];
                if zc <= 0.0 {
                    continue;
                }
                let u = k.fx * xc / zc + k.cx;
                let v = k.fy * yc / zc + k.cy;
                if u < -BORDER_SLACK
                    || u > (w - 1) as f64 + BORDER_SLACK
                    || v < -BORDER_SLACK
                    || v > (h - 1) as f64 + BORDER_SLACK
                {
                    continue;
                }
                valid[[row, col]] = true;
                proj[[row, col]] = zc;
                let x0 = (u.floor() as isize).clamp(0, w as isize - 1) as usize;
                let y0 = (v.floor() as isize).clamp(0, h as isize - 1) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = u - x0 as f64;
                let fy = v - y0 as f64;
                for ch in 0..3 {
                    let tl = img.data()[[y0, x0, ch]];
                    let tr = img.data()[[y0, x1, ch]];
                    let bl = img.data()[[y1, x0, ch]];
                    let br = img.data()[[y1, x1, ch]];
                    recon[[row, col, ch]] =
                        (tl * (1.0 - fx) + tr * fx) * (1.0 - fy) + (bl * (1.0 - fx) + br * fx) * fy;
                }
                let sl = sd.data();
                let dtl = sl[[y0, x0]];
                let dtr = sl[[y0, x1]];
                let dbl = sl[[y1, x0]];
                let dbr = sl[[y1, x1]];
                interp[[row, col]] =
                    (dtl * (1.0 - fx) + dtr * fx) * (1.0 - fy) + (dbl * (1.0 - fx) + dbr * fx) * fy;
            }
        }
        (recon, valid, proj, interp)
    }

    #[test]
    fn warp_matches_scalar_reference_on_random_scenes() {
        let k = test_intrinsics();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let img = random_image(&mut rng, 8, 8);
            let sd = random_depth(&mut rng, 8, 8);
            let td = random_depth(&mut rng, 8, 8);
            let pose = random_pose(&mut rng);
            let got = warp_frame(&img, &sd, &td, &pose, &k).unwrap();
            let (recon, valid, proj, interp) = reference_warp(&img, &sd, &td, &pose, &k);
            assert_eq!(got.validity, valid);
            for (a, b) in got.reconstruction.data().iter().zip(recon.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in got.projected_depth.iter().zip(proj.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in got.interpolated_depth.iter().zip(interp.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reconstruction_error_gradients_match_finite_differences() {
        let k = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img = random_image(&mut rng, 8, 8);
        let sd = random_depth(&mut rng, 8, 8);
        let td = random_depth(&mut rng, 8, 8);
        let pose = random_pose(&mut rng);

        // Mean absolute reconstruction error over the valid mask.
        let eval = |tdv: &ArrayD<f64>, pv: &ArrayD<f64>| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let src = tape.constant(img.to_chw());
            let sdv = tape.constant(sd.data().clone().into_dyn());
            let td_leaf = tape.leaf(tdv.clone());
            let pose_leaf = tape.leaf(pv.clone());
            let warp = warp_on_tape(src, sdv, td_leaf, pose_leaf, &k);
            let target = tape.constant(img.to_chw());
            let count: usize = warp.validity.iter().filter(|&&b| b).count();
            let m = tape.constant(
                Array2::from_shape_fn((8, 8), |(r, c)| {
                    if warp.validity[[r, c]] {
                        1.0
                    } else {
                        0.0
                    }
                })
                .into_dyn(),
            );
            let err = (warp.reconstruction - target).abs().mean_axis(0);
            (err * m).sum_all().scale(1.0 / count as f64).scalar_value()
        };

        let td0 = td.data().clone().into_dyn();
        let p0 = Array1::from_vec(pose.to_vector().to_vec()).into_dyn();

        let tape: Tape<f64> = Tape::new();
        let src = tape.constant(img.to_chw());
        let sdv = tape.constant(sd.data().clone().into_dyn());
        let td_leaf = tape.leaf(td0.clone());
        let pose_leaf = tape.leaf(p0.clone());
        let warp = warp_on_tape(src, sdv, td_leaf, pose_leaf, &k);
        let target = tape.constant(img.to_chw());
        let count: usize = warp.validity.iter().filter(|&&b| b).count();
        let m = tape.constant(
            Array2::from_shape_fn((8, 8), |(r, c)| {
                if warp.validity[[r, c]] {
                    1.0
                } else {
                    0.0
                }
            })
            .into_dyn(),
        );
        let err = (warp.reconstruction - target).abs().mean_axis(0);
        let loss = (err * m).sum_all().scale(1.0 / count as f64);
        let grads = tape.backward(loss);

        let fd_depth = numeric_gradient(&td0, 1e-5, |x| eval(x, &p0));
        let fd_pose = numeric_gradient(&p0, 1e-5, |x| eval(&td0, x));
        assert!(max_relative_error(&grads.wrt(td_leaf), &fd_depth, 1e-6) < 1e-3);
        assert!(max_relative_error(&grads.wrt(pose_leaf), &fd_pose, 1e-6) < 1e-3);
    }
}
