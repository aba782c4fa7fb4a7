//! Depth and pose networks, the optimizer, and frozen depth priors.
//!
//! Both networks are deliberately small: a three-level U-Net for depth and
//! a three-stage convolutional encoder for pose, with configurable widths.
//! Parameters live in an ordered name -> array map so two instances built
//! from the same configuration are always aggregation-compatible.

use indexmap::IndexMap;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::camera::{DepthMap, ImageFrame, PoseSE3, DEPTH_MAX, DEPTH_MIN};
use crate::error::{Error, Result};
use crate::real::Real;

/// Slope of the sigmoid-to-depth mapping `D = 1 / (a sigma + b)`.
pub const DEPTH_ACT_A: f64 = 9.99;
/// Intercept of the sigmoid-to-depth mapping.
pub const DEPTH_ACT_B: f64 = 0.01;

/// Ordered map of named parameter arrays, the unit FedAvg operates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ParameterSet<F: Real> {
    entries: IndexMap<String, ArrayD<F>>,
}

impl<F: Real> Default for ParameterSet<F> {
    fn default() -> Self {
        ParameterSet {
            entries: IndexMap::new(),
        }
    }
}

impl<F: Real> ParameterSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total payload size: element count times element width.
    pub fn total_bytes(&self) -> u64 {
        self.entries
            .values()
            .map(|a| (a.len() * std::mem::size_of::<F>()) as u64)
            .sum()
    }

    /// Aggregation compatibility: same names in the same order with the
    /// same shapes. The first mismatch is named in the error.
    pub fn compatible_with(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::IncompatibleParameters(format!(
                "{} entries vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, va), (nb, vb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(Error::IncompatibleParameters(format!(
                    "entry `{na}` vs `{nb}`"
                )));
            }
            if va.shape() != vb.shape() {
                return Err(Error::IncompatibleParameters(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Total byte size across several parameter sets (depth + pose for the
/// transfer unit of one federated exchange).
pub fn parameter_bytes<F: Real>(sets: &[&ParameterSet<F>]) -> u64 {
    sets.iter().map(|s| s.total_bytes()).sum()
}

/// Parameters lifted onto a tape, either trainable (leaves) or frozen.
pub struct TapeParams<'t, F: Real> {
    map: IndexMap<String, Var<'t, F>>,
}

impl<'t, F: Real> TapeParams<'t, F> {
    pub fn trainable(tape: &'t Tape<F>, params: &ParameterSet<F>) -> Self {
        TapeParams {
            map: params
                .iter()
                .map(|(n, v)| (n.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    pub fn frozen(tape: &'t Tape<F>, params: &ParameterSet<F>) -> Self {
        TapeParams {
            map: params
                .iter()
                .map(|(n, v)| (n.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var<'t, F> {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    /// Collects the gradient of every parameter after a backward pass.
    pub fn gradients(&self, grads: &Gradients<F>) -> IndexMap<String, ArrayD<F>> {
        self.map
            .iter()
            .map(|(n, v)| (n.clone(), grads.wrt(*v)))
            .collect()
    }
}

fn conv_weight<F: Real>(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> ArrayD<F> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data: Vec<F> = (0..cout * cin * k * k)
        .map(|_| F::c(dist.sample(rng)))
        .collect();
    Array4::from_shape_vec((cout, cin, k, k), data)
        .expect("shape matches data")
        .into_dyn()
}

fn fc_weight<F: Real>(rng: &mut ChaCha8Rng, input: usize, output: usize) -> ArrayD<F> {
    let std = (2.0 / input as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data: Vec<F> = (0..input * output).map(|_| F::c(dist.sample(rng))).collect();
    Array2::from_shape_vec((input, output), data)
        .expect("shape matches data")
        .into_dyn()
}

fn zeros<F: Real>(n: usize) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(&[n]))
}

/// Channel widths of the three encoder levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkWidths {
    pub level0: usize,
    pub level1: usize,
    pub level2: usize,
}

impl Default for NetworkWidths {
    fn default() -> Self {
        NetworkWidths {
            level0: 16,
            level1: 32,
            level2: 64,
        }
    }
}

impl NetworkWidths {
    pub fn new(level0: usize, level1: usize, level2: usize) -> Self {
        NetworkWidths {
            level0,
            level1,
            level2,
        }
    }
}

/// Encoder-decoder depth network with skip connections and a sigmoid head.
///
/// The two stride-2 stages need input sides divisible by 4.
#[derive(Debug, Clone)]
pub struct DepthNetwork<F: Real> {
    pub widths: NetworkWidths,
    pub params: ParameterSet<F>,
}

impl<F: Real> DepthNetwork<F> {
    pub fn new(widths: NetworkWidths, rng: &mut ChaCha8Rng) -> Self {
        let NetworkWidths {
            level0: w0,
            level1: w1,
            level2: w2,
        } = widths;
        let mut p = ParameterSet::new();
        for (name, cout, cin) in [
            ("enc0", w0, 3),
            ("enc1", w1, w0),
            ("enc2", w2, w1),
            ("dec1", w1, w2 + w1),
            ("dec0", w0, w1 + w0),
            ("head", 1, w0),
        ] {
            p.insert(format!("{name}.weight"), conv_weight(rng, cout, cin, 3));
            p.insert(format!("{name}.bias"), zeros(cout));
        }
        DepthNetwork { widths, params: p }
    }

    /// Sigmoid map of a `[batch, 3, h, w]` input, as `[batch, h, w]`.
    pub fn forward<'t>(&self, p: &TapeParams<'t, F>, input: Var<'t, F>) -> Var<'t, F> {
        depth_net_on_tape(p, input)
    }
}

/// Depth architecture applied to lifted parameters: sigmoid map of a
/// `[batch, 3, h, w]` input, as `[batch, h, w]`. The layer widths are
/// implicit in the parameter shapes.
pub fn depth_net_on_tape<'t, F: Real>(p: &TapeParams<'t, F>, input: Var<'t, F>) -> Var<'t, F> {
    let dims = input.dims();
    assert_eq!(dims.len(), 4, "depth input must be [batch, 3, h, w]");
    let (b, h, w) = (dims[0], dims[2], dims[3]);
    assert!(
        h % 4 == 0 && w % 4 == 0,
        "input sides must be divisible by 4, got {h}x{w}"
    );
    let conv = |name: &str, x: Var<'t, F>, stride: usize| {
        x.conv2d(
            p.get(&format!("{name}.weight")),
            Some(p.get(&format!("{name}.bias"))),
            stride,
            1,
        )
    };
    let e0 = conv("enc0", input, 1).elu();
    let e1 = conv("enc1", e0, 2).elu();
    let e2 = conv("enc2", e1, 2).elu();
    let d1 = conv("dec1", Var::concat(1, &[e2.upsample_nearest_2x(), e1]), 1).elu();
    let d0 = conv("dec0", Var::concat(1, &[d1.upsample_nearest_2x(), e0]), 1).elu();
    conv("head", d0, 1).sigmoid().reshape(&[b, h, w])
}

/// Pose network: three stride-2 convolutions over the stacked image pair,
/// a global average pool, and a linear head scaled to keep initial motions
/// near identity.
#[derive(Debug, Clone)]
pub struct PoseNetwork<F: Real> {
    pub widths: NetworkWidths,
    pub params: ParameterSet<F>,
}

/// Output scale of the pose head.
pub const POSE_SCALE: f64 = 0.01;

impl<F: Real> PoseNetwork<F> {
    pub fn new(widths: NetworkWidths, rng: &mut ChaCha8Rng) -> Self {
        let NetworkWidths {
            level0: w0,
            level1: w1,
            level2: w2,
        } = widths;
        let mut p = ParameterSet::new();
        for (name, cout, cin) in [("enc0", w0, 6), ("enc1", w1, w0), ("enc2", w2, w1)] {
            p.insert(format!("{name}.weight"), conv_weight(rng, cout, cin, 3));
            p.insert(format!("{name}.bias"), zeros(cout));
        }
        p.insert("head.weight".to_string(), fc_weight(rng, w2, 6));
        p.insert("head.bias".to_string(), zeros(6));
        PoseNetwork { widths, params: p }
    }

    /// Pose 6-vectors of a `[batch, 6, h, w]` stacked pair, as `[batch, 6]`.
    pub fn forward<'t>(&self, p: &TapeParams<'t, F>, input: Var<'t, F>) -> Var<'t, F> {
        pose_net_on_tape(p, input)
    }
}

/// Pose architecture applied to lifted parameters: 6-vectors of a
/// `[batch, 6, h, w]` stacked pair, as `[batch, 6]`.
pub fn pose_net_on_tape<'t, F: Real>(p: &TapeParams<'t, F>, input: Var<'t, F>) -> Var<'t, F> {
    assert_eq!(input.dims().len(), 4, "pose input must be [batch, 6, h, w]");
    let mut x = input;
    for name in ["enc0", "enc1", "enc2"] {
        x = x
            .conv2d(
                p.get(&format!("{name}.weight")),
                Some(p.get(&format!("{name}.bias"))),
                2,
                1,
            )
            .elu();
    }
    x.global_mean_hw()
        .matmul(p.get("head.weight"))
        .add_row(p.get("head.bias"))
        .scale(F::c(POSE_SCALE))
}

/// Depth activation `D = 1 / (a sigma + b)`, mapping `(0, 1)` onto the
/// representable depth range with `D(0) = 100` and `D(1) = 0.1`.
pub fn sigmoid_to_depth<F: Real>(sigma: &Array2<F>) -> Result<DepthMap<F>> {
    for &s in sigma.iter() {
        if !(F::zero()..=F::one()).contains(&s) {
            return Err(Error::invalid(format!("sigmoid value {s} outside [0, 1]")));
        }
    }
    DepthMap::new(sigma.mapv(|s| F::one() / (F::c(DEPTH_ACT_A) * s + F::c(DEPTH_ACT_B))))
}

/// Tape version of the depth activation.
pub fn sigmoid_to_depth_on_tape<'t, F: Real>(sigma: Var<'t, F>) -> Var<'t, F> {
    sigma.scale(F::c(DEPTH_ACT_A)).offset(F::c(DEPTH_ACT_B)).recip()
}

/// Depth prediction for one image.
pub fn depth_forward<F: Real>(net: &DepthNetwork<F>, image: &ImageFrame<F>) -> Result<DepthMap<F>> {
    let (h, w) = (image.height(), image.width());
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "depth network needs sides divisible by 4, got {h}x{w}"
        )));
    }
    let tape: Tape<F> = Tape::new();
    let p = TapeParams::frozen(&tape, &net.params);
    let input = tape.constant(
        image
            .to_chw()
            .into_shape_with_order(IxDyn(&[1, 3, h, w]))
            .expect("chw reshape"),
    );
    let sigma = net.forward(&p, input);
    let depth = sigmoid_to_depth_on_tape(sigma).value();
    let depth2 = depth
        .into_shape_with_order(IxDyn(&[h, w]))
        .expect("depth squeeze")
        .into_dimensionality::<ndarray::Ix2>()
        .expect("depth is 2-d");
    DepthMap::new(depth2)
}

/// Relative pose prediction for an ordered image pair.
pub fn pose_forward<F: Real>(
    net: &PoseNetwork<F>,
    a: &ImageFrame<F>,
    b: &ImageFrame<F>,
) -> Result<PoseSE3<F>> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::shape("pose input frames differ in shape"));
    }
    let tape: Tape<F> = Tape::new();
    let p = TapeParams::frozen(&tape, &net.params);
    let input = tape.constant(stack_pair(a, b));
    let v = net.forward(&p, input).value();
    let pose = PoseSE3::from_vector([
        v[[0, 0]],
        v[[0, 1]],
        v[[0, 2]],
        v[[0, 3]],
        v[[0, 4]],
        v[[0, 5]],
    ]);
    if pose.to_vector().iter().all(|x| x.is_finite()) {
        Ok(pose)
    } else {
        Err(Error::NonFinite {
            context: "pose prediction".into(),
        })
    }
}

/// `[1, 6, h, w]` channel stack of an image pair.
pub fn stack_pair<F: Real>(a: &ImageFrame<F>, b: &ImageFrame<F>) -> ArrayD<F> {
    let (h, w) = (a.height(), a.width());
    let mut out = ArrayD::zeros(IxDyn(&[1, 6, h, w]));
    for (offset, img) in [(0, a), (3, b)] {
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    out[[0, offset + ch, r, c]] = img.data()[[r, c, ch]];
                }
            }
        }
    }
    out
}

/// Adaptive-moment gradient descent with bias correction.
///
/// Moment estimates are keyed by parameter name and kept across steps; they
/// are local optimizer state, never part of the transferred model.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    moments: HashMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from named gradients. Parameters without a
    /// gradient entry stay untouched.
    pub fn step(&mut self, params: &mut ParameterSet<F>, grads: &IndexMap<String, ArrayD<F>>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::c(self.beta1);
        let b2 = F::c(self.beta2);
        let c1 = F::one() - F::c(self.beta1.powi(t));
        let c2 = F::one() - F::c(self.beta2.powi(t));
        let lr = F::c(self.learning_rate);
        let eps = F::c(self.eps);
        for (name, value) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (F::one() - b2) * g * g;
            });
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p = *p - lr * (m / c1) / ((v / c2).sqrt() + eps);
                });
        }
    }
}

/// A frozen single-image depth prior.
pub trait PseudoDepthProvider<F: Real>: Send + Sync {
    fn pseudo_depth(&self, image: &ImageFrame<F>) -> DepthMap<F>;
}

/// Stable fingerprint of image pixel data.
pub fn image_fingerprint<F: Real>(image: &ImageFrame<F>) -> u64 {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|v| v.f64().to_bits().to_le_bytes())
        .collect();
    crate::rng::stable_hash(&[&bytes])
}

/// Flat-ground prior: depth grows towards the horizon row and saturates at
/// `far` above it. Ignores image content beyond its size; a stand-in prior
/// for data without a registered reference depth.
pub struct GroundPlanePrior<F: Real> {
    pub intrinsics: crate::camera::Intrinsics<F>,
    pub camera_height: f64,
    pub far: f64,
}

impl<F: Real> GroundPlanePrior<F> {
    pub fn new(intrinsics: crate::camera::Intrinsics<F>) -> Self {
        GroundPlanePrior {
            intrinsics,
            camera_height: 1.5,
            far: 80.0,
        }
    }
}

impl<F: Real> PseudoDepthProvider<F> for GroundPlanePrior<F> {
    fn pseudo_depth(&self, image: &ImageFrame<F>) -> DepthMap<F> {
        let k = &self.intrinsics;
        let (h, w) = (image.height(), image.width());
        let lo = F::c(DEPTH_MIN);
        let hi = F::c(self.far.min(DEPTH_MAX));
        let data = Array2::from_shape_fn((h, w), |(r, _)| {
            let dy = F::c(r as f64) - k.cy;
            if dy > F::zero() {
                (F::c(self.camera_height) * k.fy / dy).max(lo).min(hi)
            } else {
                hi
            }
        });
        DepthMap::new(data).expect("prior stays in range by construction")
    }
}

/// Prior backed by registered reference depths, optionally corrupted by a
/// smooth multiplicative noise field. Noise is keyed off the image
/// fingerprint, so identical inputs always see identical outputs.
pub struct ReferencePrior<F: Real> {
    registry: HashMap<u64, Array2<F>>,
    pub noise_amplitude: f64,
    pub seed: u64,
    fallback: GroundPlanePrior<F>,
}

impl<F: Real> ReferencePrior<F> {
    pub fn new(intrinsics: crate::camera::Intrinsics<F>, noise_amplitude: f64, seed: u64) -> Self {
        ReferencePrior {
            registry: HashMap::new(),
            noise_amplitude,
            seed,
            fallback: GroundPlanePrior::new(intrinsics),
        }
    }

    pub fn register(&mut self, image: &ImageFrame<F>, depth: &DepthMap<F>) {
        self.registry
            .insert(image_fingerprint(image), depth.data().clone());
    }

    pub fn registered(&self) -> usize {
        self.registry.len()
    }

    fn smooth_noise(&self, fingerprint: u64, h: usize, w: usize) -> Array2<F> {
        let mut rng = crate::rng::stream(self.seed, "pseudo-noise", &[fingerprint]);
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let mut field = Array2::from_shape_fn((h, w), |_| F::c(dist.sample(&mut rng)));
        // Three box passes leave a smooth field; normalize to unit peak.
        for _ in 0..3 {
            let tape: Tape<F> = Tape::new();
            field = tape
                .constant(field.into_dyn())
                .box3_filter()
                .value()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d field");
        }
        let peak = field
            .iter()
            .map(|v| v.abs().f64())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        field.mapv(|v| v / F::c(peak))
    }
}

impl<F: Real> PseudoDepthProvider<F> for ReferencePrior<F> {
    fn pseudo_depth(&self, image: &ImageFrame<F>) -> DepthMap<F> {
        let fp = image_fingerprint(image);
        let Some(base) = self.registry.get(&fp) else {
            log::warn!("no reference depth registered for image; using the flat-ground prior");
            return self.fallback.pseudo_depth(image);
        };
        if self.noise_amplitude == 0.0 {
            return DepthMap::new(base.clone()).expect("registered depth is valid");
        }
        let noise = self.smooth_noise(fp, base.dim().0, base.dim().1);
        let amp = F::c(self.noise_amplitude);
        let lo = F::c(DEPTH_MIN);
        let hi = F::c(DEPTH_MAX);
        let data = ndarray::Zip::from(base)
            .and(&noise)
            .map_collect(|&d, &n| (d * (F::one() + amp * n)).max(lo).min(hi));
        DepthMap::new(data).expect("clamped into range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{max_relative_error, numeric_gradient};
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_widths() -> NetworkWidths {
        NetworkWidths::new(4, 6, 8)
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageFrame<f64> {
        ImageFrame::new(Array3::from_shape_fn((h, w, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn depth_activation_hits_the_range_boundaries() {
        let sigma = Array2::from_shape_vec((1, 3), vec![0.0f64, 1.0, 0.5]).unwrap();
        let d = sigmoid_to_depth(&sigma).unwrap();
        assert!((d.data()[[0, 0]] - 100.0).abs() < 1e-9);
        assert!((d.data()[[0, 1]] - 0.1).abs() < 1e-12);
        assert!((d.data()[[0, 2]] - 1.0 / 5.005).abs() < 1e-12);

        let bad = Array2::from_elem((1, 1), 1.5);
        assert!(sigmoid_to_depth(&bad).is_err());
    }

    #[test]
    fn depth_activation_is_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let s = Array2::from_elem((1, 1), i as f64 / 100.0);
            let d = sigmoid_to_depth(&s).unwrap().data()[[0, 0]];
            assert!(d < prev);
            assert!((0.1..=100.0).contains(&d));
            prev = d;
        }
    }

    #[test]
    fn parameter_bytes_counts_elements_times_width() {
        let mut p32 = ParameterSet::<f32>::new();
        p32.insert("w", ArrayD::zeros(IxDyn(&[10])));
        assert_eq!(p32.total_bytes(), 40);
        assert_eq!(ParameterSet::<f32>::new().total_bytes(), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DepthNetwork::<f64>::new(tiny_widths(), &mut rng);
        let p = PoseNetwork::<f64>::new(tiny_widths(), &mut rng);
        let hand: u64 = d
            .params
            .iter()
            .chain(p.params.iter())
            .map(|(_, a)| a.len() as u64 * 8)
            .sum();
        assert_eq!(parameter_bytes(&[&d.params, &p.params]), hand);
    }

    #[test]
    fn same_widths_always_build_compatible_parameter_sets() {
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = DepthNetwork::<f32>::new(tiny_widths(), &mut r1);
        let b = DepthNetwork::<f32>::new(tiny_widths(), &mut r2);
        a.params.compatible_with(&b.params).unwrap();

        let c = DepthNetwork::<f32>::new(NetworkWidths::new(5, 6, 8), &mut r2);
        assert!(a.params.compatible_with(&c.params).is_err());
    }

    #[test]
    fn depth_forward_is_deterministic_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DepthNetwork::<f64>::new(tiny_widths(), &mut rng);
        let img = rand_image(&mut rng, 8, 12);
        let d1 = depth_forward(&net, &img).unwrap();
        let d2 = depth_forward(&net, &img).unwrap();
        assert_eq!(d1.data(), d2.data());
        assert_eq!(d1.data().dim(), (8, 12));
        assert!(d1
            .data()
            .iter()
            .all(|&v| (0.1..=100.0).contains(&v)));

        let odd = rand_image(&mut rng, 6, 9);
        assert!(depth_forward(&net, &odd).is_err());
    }

    #[test]
    fn perturbing_a_weight_changes_the_depth_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = DepthNetwork::<f64>::new(tiny_widths(), &mut rng);
        let img = rand_image(&mut rng, 8, 8);
        let before = depth_forward(&net, &img).unwrap();
        for (name, value) in net.params.iter_mut() {
            if name == "enc0.weight" {
                value[[0, 0, 1, 1]] += 0.5;
            }
        }
        let after = depth_forward(&net, &img).unwrap();
        let diff: f64 = before
            .data()
            .iter()
            .zip(after.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn pose_forward_is_finite_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = PoseNetwork::<f64>::new(tiny_widths(), &mut rng);
        let a = rand_image(&mut rng, 8, 8);
        let b = rand_image(&mut rng, 8, 8);
        let p1 = pose_forward(&net, &a, &b).unwrap();
        let p2 = pose_forward(&net, &a, &b).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.to_vector().iter().all(|v| v.is_finite()));

        let small = rand_image(&mut rng, 4, 4);
        assert!(pose_forward(&net, &a, &small).is_err());
    }

    #[test]
    fn warp_loss_gradient_through_the_pose_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = PoseNetwork::<f64>::new(NetworkWidths::new(3, 4, 5), &mut rng);
        let k = crate::camera::Intrinsics::new(6.0, 6.0, 3.5, 3.5, 8, 8).unwrap();
        let target = rand_image(&mut rng, 8, 8);
        let source = rand_image(&mut rng, 8, 8);
        let depth = Array2::from_shape_fn((8, 8), |_| rng.random_range(2.0..4.0));
        let pair = stack_pair(&target, &source);

        // Mean reconstruction error as a function of the head weight.
        let loss_with = |head_w: &ArrayD<f64>| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let mut params = TapeParams::frozen(&tape, &net.params);
            let hw = tape.leaf(head_w.clone());
            params.map.insert("head.weight".into(), hw);
            let pose6 = net.forward(&params, tape.constant(pair.clone())).reshape(&[6]);
            let warp = crate::camera::warp_on_tape(
                tape.constant(source.to_chw()),
                tape.constant(depth.clone().into_dyn()),
                tape.constant(depth.clone().into_dyn()),
                pose6,
                &k,
            );
            (warp.reconstruction - tape.constant(target.to_chw()))
                .abs()
                .mean_all()
                .scalar_value()
        };

        let head0 = net.params.get("head.weight").unwrap().clone();
        let tape: Tape<f64> = Tape::new();
        let mut params = TapeParams::frozen(&tape, &net.params);
        let hw = tape.leaf(head0.clone());
        params.map.insert("head.weight".into(), hw);
        let pose6 = net.forward(&params, tape.constant(pair.clone())).reshape(&[6]);
        let warp = crate::camera::warp_on_tape(
            tape.constant(source.to_chw()),
            tape.constant(depth.clone().into_dyn()),
            tape.constant(depth.clone().into_dyn()),
            pose6,
            &k,
        );
        let loss = (warp.reconstruction - tape.constant(target.to_chw()))
            .abs()
            .mean_all();
        let grads = tape.backward(loss);
        let fd = numeric_gradient(&head0, 1e-6, |x| loss_with(x));
        let err = max_relative_error(&grads.wrt(hw), &fd, 1e-8);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn adam_descends_a_simple_quadratic() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("x", ArrayD::zeros(IxDyn(&[1])));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = params.get("x").unwrap()[[0]];
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0 * (x - 3.0)));
            opt.step(&mut params, &grads);
        }
        let x = params.get("x").unwrap()[[0]];
        assert!((x - 3.0).abs() < 1e-2, "converged to {x}");
        assert_eq!(opt.steps_taken(), 500);
    }

    #[test]
    fn reference_prior_reproduces_registered_depth_and_bounds_noise() {
        let k = crate::camera::Intrinsics::new(6.0, 6.0, 3.5, 3.5, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_image(&mut rng, 8, 8);
        let depth =
            DepthMap::new(Array2::from_shape_fn((8, 8), |_| rng.random_range(1.0..5.0))).unwrap();

        let mut clean = ReferencePrior::new(k, 0.0, 11);
        clean.register(&img, &depth);
        assert_eq!(clean.pseudo_depth(&img).data(), depth.data());
        assert_eq!(clean.pseudo_depth(&img).data(), depth.data());

        let mut noisy = ReferencePrior::new(k, 0.05, 11);
        noisy.register(&img, &depth);
        let out = noisy.pseudo_depth(&img);
        let again = noisy.pseudo_depth(&img);
        assert_eq!(out.data(), again.data());
        for (o, d) in out.data().iter().zip(depth.data().iter()) {
            assert!((o / d - 1.0).abs() <= 0.05 + 1e-12);
        }

        // Unregistered image falls back to the flat-ground prior.
        let other = rand_image(&mut rng, 8, 8);
        let fb = noisy.pseudo_depth(&other);
        assert!(fb.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn ground_plane_prior_deepens_towards_the_horizon() {
        let k = crate::camera::Intrinsics::new(6.0, 6.0, 3.5, 3.5, 8, 8).unwrap();
        let prior = GroundPlanePrior::new(k);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = rand_image(&mut rng, 8, 8);
        let d = prior.pseudo_depth(&img);
        // Below the horizon, nearer rows (larger v) are shallower.
        assert!(d.data()[[7, 0]] < d.data()[[5, 0]]);
        assert_eq!(d.data()[[0, 0]], 80.0);
    }
}
