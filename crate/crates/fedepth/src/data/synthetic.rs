//! Procedurally textured box-world renderer with analytic depth and exact
//! inter-frame poses, a desk-scale stand-in for driving footage.
//!
//! The camera starts each drive inside a textured room (floor, ceiling,
//! walls) scattered with solid boxes, then translates and yaws about the
//! vertical axis frame by frame. Yaw-only motion keeps relative poses in
//! closed form, so rendered frames come with exact warp ground truth.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::camera::{ImageFrame, Intrinsics, PoseSE3, DEPTH_MAX, DEPTH_MIN};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

/// Geometry, texture, and trajectory parameters of a rendered dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Base spatial frequency of the wall and box textures, radians per
    /// metre. Low values keep the color field smooth under bilinear
    /// resampling.
    pub texture_frequency: f64,
    pub drives: usize,
    pub frames_per_drive: usize,
    /// Metres travelled along the current heading per frame.
    pub forward_step: f64,
    /// Radians of yaw per frame.
    pub yaw_step: f64,
    /// Solid boxes scattered through each drive's room.
    pub boxes: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 32,
            texture_frequency: 0.4,
            drives: 4,
            frames_per_drive: 12,
            forward_step: 0.15,
            yaw_step: 0.01,
            boxes: 6,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene resolution must be positive"));
        }
        if self.drives == 0 || self.frames_per_drive < 2 {
            return Err(Error::invalid(
                "a scene needs at least one drive of at least two frames",
            ));
        }
        if !self.texture_frequency.is_finite()
            || !self.forward_step.is_finite()
            || !self.yaw_step.is_finite()
        {
            return Err(Error::invalid("scene parameters must be finite"));
        }
        Ok(())
    }

    /// Pinhole model used for every rendered frame.
    pub fn intrinsics<F: Real>(&self) -> Result<Intrinsics<F>> {
        let f = 0.55 * self.width as f64;
        Intrinsics::new(
            F::c(f),
            F::c(f),
            F::c(self.width as f64 / 2.0 - 0.5),
            F::c(self.height as f64 / 2.0 - 0.5),
            self.width,
            self.height,
        )
    }
}

/// Room interior: the camera travels inside this box, so every ray exits
/// through one of its faces. Coordinates are camera-style, y pointing down.
/// The extent is kept small so pixel footprints on the far wall stay well
/// under the texture wavelength, which is what keeps bilinear resampling
/// accurate in the warp oracle.
const ROOM_MIN: [f64; 3] = [-7.0, -2.5, -4.0];
const ROOM_MAX: [f64; 3] = [7.0, 1.5, 14.0];

/// One sinusoidal color channel: weights over world position plus a phase.
#[derive(Clone, Copy)]
struct TextureWave {
    dir: [f64; 3],
    phase: f64,
}

impl TextureWave {
    fn sample(&self, p: [f64; 3], freq: f64) -> f64 {
        let t = self.dir[0] * p[0] + self.dir[1] * p[1] + self.dir[2] * p[2];
        (freq * t + self.phase).sin()
    }
}

/// Two-wave texture per channel, bounded inside (0, 1).
#[derive(Clone, Copy)]
struct SurfaceTexture {
    coarse: [TextureWave; 3],
    fine: [TextureWave; 3],
}

impl SurfaceTexture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let wave = |rng: &mut ChaCha8Rng| TextureWave {
            dir: [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        };
        SurfaceTexture {
            coarse: [wave(rng), wave(rng), wave(rng)],
            fine: [wave(rng), wave(rng), wave(rng)],
        }
    }

    fn color(&self, p: [f64; 3], freq: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = 0.5
                + 0.25 * self.coarse[ch].sample(p, freq)
                + 0.15 * self.fine[ch].sample(p, 1.9 * freq);
        }
        out
    }
}

struct SceneBox {
    min: [f64; 3],
    max: [f64; 3],
    texture: SurfaceTexture,
}

struct DriveWorld {
    room_texture: SurfaceTexture,
    boxes: Vec<SceneBox>,
}

impl DriveWorld {
    fn random(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let room_texture = SurfaceTexture::random(rng);
        // Boxes stay ahead of the whole trajectory so the camera never
        // starts inside one.
        let clear = spec.frames_per_drive as f64 * spec.forward_step.abs() + 2.0;
        let far = (clear + 4.0).max(ROOM_MAX[2] - 2.0);
        let boxes = (0..spec.boxes)
            .map(|_| {
                let cx = rng.random_range(-5.0..5.0);
                let cy = rng.random_range(-0.5..1.0);
                let cz = rng.random_range(clear..far);
                let hx = rng.random_range(0.3..1.2);
                let hy = rng.random_range(0.3..1.2);
                let hz = rng.random_range(0.3..1.2);
                SceneBox {
                    min: [cx - hx, cy - hy, cz - hz],
                    max: [cx + hx, cy + hy, cz + hz],
                    texture: SurfaceTexture::random(rng),
                }
            })
            .collect();
        DriveWorld {
            room_texture,
            boxes,
        }
    }

    /// Distance along `dir` from `origin` (inside the room) to the room
    /// shell.
    fn room_exit(origin: [f64; 3], dir: [f64; 3]) -> f64 {
        let mut s = f64::INFINITY;
        for axis in 0..3 {
            if dir[axis] > 1e-12 {
                s = s.min((ROOM_MAX[axis] - origin[axis]) / dir[axis]);
            } else if dir[axis] < -1e-12 {
                s = s.min((ROOM_MIN[axis] - origin[axis]) / dir[axis]);
            }
        }
        s
    }

    /// Entry distance into a box via the slab test, if the ray hits it
    /// from outside.
    fn box_entry(b: &SceneBox, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let mut near = f64::NEG_INFINITY;
        let mut far = f64::INFINITY;
        for axis in 0..3 {
            if dir[axis].abs() < 1e-12 {
                if origin[axis] < b.min[axis] || origin[axis] > b.max[axis] {
                    return None;
                }
                continue;
            }
            let t0 = (b.min[axis] - origin[axis]) / dir[axis];
            let t1 = (b.max[axis] - origin[axis]) / dir[axis];
            near = near.max(t0.min(t1));
            far = far.min(t0.max(t1));
        }
        (near <= far && near > 0.0).then_some(near)
    }

    /// Color, camera-frame depth, and box-hit flag for one pixel ray.
    fn cast(&self, origin: [f64; 3], dir: [f64; 3], freq: f64) -> ([f64; 3], f64, bool) {
        let mut s = Self::room_exit(origin, dir);
        let mut texture = &self.room_texture;
        let mut on_box = false;
        for b in &self.boxes {
            if let Some(t) = Self::box_entry(b, origin, dir) {
                if t < s {
                    s = t;
                    texture = &b.texture;
                    on_box = true;
                }
            }
        }
        let hit = [
            origin[0] + s * dir[0],
            origin[1] + s * dir[1],
            origin[2] + s * dir[2],
        ];
        (texture.color(hit, freq), s, on_box)
    }
}

/// Camera station: yaw about the vertical axis plus a world-space center.
#[derive(Debug, Clone, Copy)]
struct CameraStation {
    yaw: f64,
    center: [f64; 3],
}

/// Pose mapping coordinates of the `target` station into the `source`
/// station. Yaw-only motion makes this exact: the rotation is the yaw
/// difference about the vertical axis and the translation is the center
/// offset expressed in source coordinates.
fn relative_pose<F: Real>(target: CameraStation, source: CameraStation) -> PoseSE3<F> {
    let dyaw = target.yaw - source.yaw;
    let d = [
        target.center[0] - source.center[0],
        target.center[1] - source.center[1],
        target.center[2] - source.center[2],
    ];
    let (sin, cos) = (-source.yaw).sin_cos();
    let t = [
        cos * d[0] + sin * d[2],
        d[1],
        -sin * d[0] + cos * d[2],
    ];
    PoseSE3::new(
        [F::zero(), F::c(dyaw), F::zero()],
        [F::c(t[0]), F::c(t[1]), F::c(t[2])],
    )
}

fn render_frame<F: Real>(
    world: &DriveWorld,
    station: CameraStation,
    k: &Intrinsics<F>,
    freq: f64,
) -> (ImageFrame<F>, Array2<F>, Array2<bool>) {
    let (h, w) = (k.height, k.width);
    let (fx, fy) = (k.fx.f64(), k.fy.f64());
    let (cx, cy) = (k.cx.f64(), k.cy.f64());
    let (sin, cos) = station.yaw.sin_cos();

    let mut image = Array3::zeros((h, w, 3));
    let mut depth = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            let dx = (c as f64 - cx) / fx;
            let dy = (r as f64 - cy) / fy;
            // World direction of the pixel ray; depth along the ray equals
            // the camera-frame z because the camera-frame direction has
            // unit z.
            let dir = [cos * dx + sin, dy, -sin * dx + cos];
            let (color, s, on_box) = world.cast(station.center, dir, freq);
            for ch in 0..3 {
                image[[r, c, ch]] = F::c(color[ch]);
            }
            depth[[r, c]] = F::c(s.clamp(DEPTH_MIN, DEPTH_MAX));
            mask[[r, c]] = on_box;
        }
    }
    let image = ImageFrame::from_clamped(image).expect("texture stays inside (0, 1)");
    (image, depth, mask)
}

fn stations(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<CameraStation> {
    let mut yaw = rng.random_range(-0.05..0.05);
    let mut center = [rng.random_range(-1.0..1.0), 0.0, 0.0];
    let mut out = Vec::with_capacity(spec.frames_per_drive);
    for _ in 0..spec.frames_per_drive {
        out.push(CameraStation { yaw, center });
        let (sin, cos) = yaw.sin_cos();
        center[0] += spec.forward_step * sin;
        center[2] += spec.forward_step * cos;
        yaw += spec.yaw_step;
    }
    out
}

/// Renders every drive of `spec` into training samples with analytic depth,
/// exact target-to-source poses, and box-region masks attached. Each sample
/// pairs a target frame with the preceding frame as its single source (the
/// first frame borrows the next frame instead).
pub fn generate_synthetic_scene<F: Real>(spec: &SceneSpec, seed: u64) -> Result<Vec<Sample<F>>> {
    spec.validate()?;
    let k: Intrinsics<F> = spec.intrinsics()?;
    let mut samples = Vec::with_capacity(spec.drives * spec.frames_per_drive);
    for drive in 0..spec.drives {
        let mut drive_rng = rng::stream(seed, "synthetic-drive", &[drive as u64]);
        let world = DriveWorld::random(spec, &mut drive_rng);
        let sts = stations(spec, &mut drive_rng);
        let frames: Vec<_> = sts
            .iter()
            .map(|&st| render_frame(&world, st, &k, spec.texture_frequency))
            .collect();
        for t in 0..frames.len() {
            let s = if t == 0 { 1 } else { t - 1 };
            let (image, depth, mask) = &frames[t];
            samples.push(Sample {
                target: image.clone(),
                sources: vec![frames[s].0.clone()],
                intrinsics: k,
                drive_id: format!("synth_{drive:02}"),
                frame_index: t,
                ground_truth: Some(depth.clone()),
                true_poses: Some(vec![relative_pose(sts[t], sts[s])]),
                region_mask: Some(mask.clone()),
            });
        }
    }
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}
