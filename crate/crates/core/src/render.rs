//! 84×84 grayscale observations of a scene, the perturbed pseudo-real
//! domain, the bottleneck normalization and the labelled dataset file.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ArmModel, ReachAction, SceneState, SimError, Viewport, HORIZON, NUM_ACTIONS};

pub const RESOLUTION: usize = 84;
pub const FRAME_LEN: usize = RESOLUTION * RESOLUTION;

const BACKGROUND: u8 = 255;
const LINK_LEVEL: u8 = 0;
const TARGET_LEVEL: u8 = 100;
const EFFECTOR_LEVEL: u8 = 170;
const LINK_THICKNESS: i32 = 2;
const TARGET_RADIUS: i32 = 3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("theta component {index} = {value} is outside [0, 1]")]
    Range { index: usize, value: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Sim,
    PseudoReal,
}

/// Fixed planar camera looking at the arm's plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Camera {
    pub viewport: Viewport,
    pub resolution: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            viewport: Viewport::default(),
            resolution: RESOLUTION,
        }
    }
}

impl Camera {
    /// Pixels per metre (42 for the default camera).
    pub fn scale(&self) -> f64 {
        self.resolution as f64 / self.viewport.width
    }

    pub fn px_per_cm(&self) -> f64 {
        self.scale() / 100.0
    }

    /// Continuous (column, row) image coordinates; rows grow downwards.
    pub fn world_to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        let min = self.viewport.min();
        let top = min[1] + self.viewport.width;
        [(p[0] - min[0]) * self.scale(), (top - p[1]) * self.scale()]
    }
}

/// 8-bit grayscale frame; pixel value in [0, 1] is `level / 255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFrame {
    pub pixels: Vec<u8>,
    pub domain: Domain,
}

impl ImageFrame {
    pub fn value(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * RESOLUTION + col] as f32 / 255.0
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.pixels.iter().map(|&p| p as f32 / 255.0)
    }

    pub fn mean_abs_diff(&self, other: &ImageFrame) -> f64 {
        let total: u64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| a.abs_diff(b) as u64)
            .sum();
        total as f64 / (255.0 * self.pixels.len() as f64)
    }
}

/// Magnitudes of the pseudo-real perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub noise_sigma: f64,
    /// Uniform brightness offset in `[-brightness, brightness]`.
    pub brightness: f64,
    /// Integer change of stroke width and target radius in `[-thickness, thickness]` px.
    pub thickness: u32,
    /// Integer image shift in `[-translation, translation]` px per axis.
    pub translation: u32,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            brightness: 0.1,
            thickness: 1,
            translation: 2,
        }
    }
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self {
            noise_sigma: 0.0,
            brightness: 0.0,
            thickness: 0,
            translation: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Style {
    thickness: i32,
    radius: i32,
    shift: [i32; 2],
}

impl Default for Style {
    fn default() -> Self {
        Self {
            thickness: LINK_THICKNESS,
            radius: TARGET_RADIUS,
            shift: [0, 0],
        }
    }
}

struct Canvas {
    px: Vec<u8>,
    shift: [i32; 2],
}

impl Canvas {
    fn new(shift: [i32; 2]) -> Self {
        Self {
            px: vec![BACKGROUND; FRAME_LEN],
            shift,
        }
    }

    fn put(&mut self, col: i32, row: i32, level: u8) {
        let (c, r) = (col + self.shift[0], row + self.shift[1]);
        if (0..RESOLUTION as i32).contains(&c) && (0..RESOLUTION as i32).contains(&r) {
            self.px[r as usize * RESOLUTION + c as usize] = level;
        }
    }

    /// Bresenham stroke, widened by stacking copies across the minor axis.
    fn line(&mut self, a: [i32; 2], b: [i32; 2], thickness: i32, level: u8) {
        let (dx, dy) = ((b[0] - a[0]).abs(), -(b[1] - a[1]).abs());
        let (sx, sy) = ((b[0] - a[0]).signum(), (b[1] - a[1]).signum());
        let x_major = dx >= -dy;
        let first = -(thickness - 1) / 2;
        let (mut x, mut y) = (a[0], a[1]);
        let mut err = dx + dy;
        loop {
            for o in first..first + thickness {
                if x_major {
                    self.put(x, y + o, level);
                } else {
                    self.put(x + o, y, level);
                }
            }
            if x == b[0] && y == b[1] {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn disc(&mut self, c: [i32; 2], radius: i32, level: u8) {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.put(c[0] + dx, c[1] + dy, level);
                }
            }
        }
    }

    fn square(&mut self, c: [i32; 2], half: i32, level: u8) {
        for dy in -half..=half {
            for dx in -half..=half {
                self.put(c[0] + dx, c[1] + dy, level);
            }
        }
    }
}

fn pixel_index(camera: &Camera, p: [f64; 2]) -> [i32; 2] {
    let [c, r] = camera.world_to_pixel(p);
    [c.round() as i32, r.round() as i32]
}

fn rasterize(scene: &SceneState, arm: &ArmModel, camera: &Camera, style: Style) -> Vec<u8> {
    let mut canvas = Canvas::new(style.shift);
    let joints = arm.joint_positions(scene.q).map(|p| pixel_index(camera, p));
    for seg in joints.windows(2) {
        canvas.line(seg[0], seg[1], style.thickness, LINK_LEVEL);
    }
    canvas.disc(pixel_index(camera, scene.target), style.radius, TARGET_LEVEL);
    canvas.square(joints[3], 1, EFFECTOR_LEVEL);
    canvas.px
}

/// Clean simulated observation. Targets outside the viewport are clipped.
pub fn render(scene: &SceneState, arm: &ArmModel, camera: &Camera) -> ImageFrame {
    ImageFrame {
        pixels: rasterize(scene, arm, camera, Style::default()),
        domain: Domain::Sim,
    }
}

/// `render` with seeded geometric and photometric perturbations applied.
pub fn render_pseudo_real<R: Rng + ?Sized>(
    scene: &SceneState,
    arm: &ArmModel,
    camera: &Camera,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> ImageFrame {
    let t = spec.thickness as i32;
    let s = spec.translation as i32;
    let dt = rng.random_range(-t..=t);
    let style = Style {
        thickness: (LINK_THICKNESS + dt).max(1),
        radius: (TARGET_RADIUS + dt).max(1),
        shift: [rng.random_range(-s..=s), rng.random_range(-s..=s)],
    };
    let mut pixels = rasterize(scene, arm, camera, style);
    let offset = if spec.brightness > 0.0 {
        rng.random_range(-spec.brightness..=spec.brightness)
    } else {
        0.0
    };
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma is positive"));
    if offset != 0.0 || noise.is_some() {
        for p in &mut pixels {
            let mut v = *p as f64 / 255.0 + offset;
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    ImageFrame {
        pixels,
        domain: Domain::PseudoReal,
    }
}

/// Bottleneck vector `[x*_x, x*_y, q1, q2, q3]`, each mapped to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaVec(pub [f64; 5]);

impl ThetaVec {
    pub fn to_f32(&self) -> [f32; 5] {
        self.0.map(|v| v as f32)
    }

    pub fn from_f32(v: &[f32]) -> Self {
        let mut out = [0.0; 5];
        for (o, &x) in out.iter_mut().zip(v) {
            *o = x as f64;
        }
        ThetaVec(out)
    }
}

pub fn normalize_theta(scene: &SceneState, arm: &ArmModel, camera: &Camera) -> ThetaVec {
    let min = camera.viewport.min();
    let w = camera.viewport.width;
    let mut t = [0.0; 5];
    t[0] = (scene.target[0] - min[0]) / w;
    t[1] = (scene.target[1] - min[1]) / w;
    for j in 0..3 {
        let [lo, hi] = arm.joint_limits[j];
        t[2 + j] = (scene.q[j] - lo) / (hi - lo);
    }
    ThetaVec(t)
}

/// Inverse of [`normalize_theta`]: returns `(target, q)`.
pub fn denormalize_theta(
    theta: &ThetaVec,
    arm: &ArmModel,
    camera: &Camera,
) -> Result<([f64; 2], [f64; 3]), RenderError> {
    for (index, &value) in theta.0.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(RenderError::Range { index, value });
        }
    }
    let min = camera.viewport.min();
    let w = camera.viewport.width;
    let target = [min[0] + theta.0[0] * w, min[1] + theta.0[1] * w];
    let mut q = [0.0; 3];
    for j in 0..3 {
        let [lo, hi] = arm.joint_limits[j];
        q[j] = lo + theta.0[2 + j] * (hi - lo);
    }
    Ok((target, q))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame: ImageFrame,
    pub theta: ThetaVec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub n_sim: usize,
    pub n_pseudo_real: usize,
    pub seed: u64,
    pub camera: Camera,
    pub perturbation: PerturbationSpec,
}

/// Labelled frames: `n_sim` clean frames followed by `n_pseudo_real`
/// perturbed ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub items: Vec<Sample>,
}

/// RNG for item `index` of a seeded stream family.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Probability that a dataset scene gets a target drawn independently of its
/// arm rollout; breaks the end-effector-at-target correlation of dwell frames.
pub const RETARGET_PROBABILITY: f64 = 0.75;

/// Scene for a dataset item: a sampled task advanced a uniformly random
/// number of steps along an ε-perturbed guided rollout, so arm poses cover the
/// states a reaching policy actually visits.
pub fn dataset_scene<R: Rng + ?Sized>(rng: &mut R, arm: &ArmModel, viewport: &Viewport) -> Result<SceneState, SimError> {
    let mut s = arm.sample_task(rng, viewport)?;
    let steps = rng.random_range(0..HORIZON);
    for _ in 0..steps {
        let a = if rng.random::<f64>() < 0.1 {
            ReachAction::from_id(rng.random_range(0..NUM_ACTIONS))?
        } else {
            arm.guided_action(&s)
        };
        s = arm.apply_action(&s, a);
    }
    if rng.random::<f64>() < RETARGET_PROBABILITY {
        s.target = arm.sample_task(rng, viewport)?.target;
    }
    Ok(s)
}

pub fn build_dataset(
    n_sim: usize,
    n_pseudo_real: usize,
    seed: u64,
    arm: &ArmModel,
    camera: &Camera,
    perturbation: &PerturbationSpec,
) -> Result<Dataset, RenderError> {
    let mut items = Vec::with_capacity(n_sim + n_pseudo_real);
    for i in 0..n_sim + n_pseudo_real {
        let mut rng = item_rng(seed, i as u64);
        let scene = dataset_scene(&mut rng, arm, &camera.viewport)?;
        let frame = if i < n_sim {
            render(&scene, arm, camera)
        } else {
            render_pseudo_real(&scene, arm, camera, perturbation, &mut rng)
        };
        items.push(Sample {
            frame,
            theta: normalize_theta(&scene, arm, camera),
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            n_sim,
            n_pseudo_real,
            seed,
            camera: *camera,
            perturbation: *perturbation,
        },
        items,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"HEDS";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Indices of all items in `domain`, in file order.
    pub fn indices(&self, domain: Domain) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, s)| s.frame.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// Little-endian layout:
    ///
    /// ```text
    /// b"HEDS", u32 version, u64 n_sim, u64 n_pseudo_real, u64 seed,
    /// f64 center_x, f64 center_y, f64 width, u32 resolution,
    /// f64 noise_sigma, f64 brightness, u32 thickness, u32 translation,
    /// records: u8 domain (0 sim, 1 pseudo-real), 84*84 u8 pixels, 5 x f64 theta
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(96 + self.items.len() * (1 + FRAME_LEN + 40));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.n_sim as u64).to_le_bytes());
        out.extend_from_slice(&(h.n_pseudo_real as u64).to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
        for v in [h.camera.viewport.center[0], h.camera.viewport.center[1], h.camera.viewport.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(h.camera.resolution as u32).to_le_bytes());
        out.extend_from_slice(&h.perturbation.noise_sigma.to_le_bytes());
        out.extend_from_slice(&h.perturbation.brightness.to_le_bytes());
        out.extend_from_slice(&h.perturbation.thickness.to_le_bytes());
        out.extend_from_slice(&h.perturbation.translation.to_le_bytes());
        for s in &self.items {
            out.push(match s.frame.domain {
                Domain::Sim => 0,
                Domain::PseudoReal => 1,
            });
            out.extend_from_slice(&s.frame.pixels);
            for v in s.theta.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RenderError> {
        let bad = |m: &str| RenderError::Format(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], RenderError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != DATASET_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let f64_of = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        let version = u32_of(take(4)?);
        if version != DATASET_VERSION {
            return Err(RenderError::Format(format!("unsupported version {version}")));
        }
        let n_sim = u64_of(take(8)?) as usize;
        let n_pseudo_real = u64_of(take(8)?) as usize;
        let seed = u64_of(take(8)?);
        let center = [f64_of(take(8)?), f64_of(take(8)?)];
        let width = f64_of(take(8)?);
        let resolution = u32_of(take(4)?) as usize;
        if resolution != RESOLUTION {
            return Err(RenderError::Format(format!("unsupported resolution {resolution}")));
        }
        let perturbation = PerturbationSpec {
            noise_sigma: f64_of(take(8)?),
            brightness: f64_of(take(8)?),
            thickness: u32_of(take(4)?),
            translation: u32_of(take(4)?),
        };
        let n = n_sim
            .checked_add(n_pseudo_real)
            .ok_or_else(|| bad("record count overflow"))?;
        let mut items = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let domain = match take(1)?[0] {
                0 => Domain::Sim,
                1 => Domain::PseudoReal,
                d => return Err(RenderError::Format(format!("unknown domain tag {d}"))),
            };
            let pixels = take(FRAME_LEN)?.to_vec();
            let mut theta = [0.0; 5];
            for t in &mut theta {
                *t = f64_of(take(8)?);
            }
            items.push(Sample {
                frame: ImageFrame { pixels, domain },
                theta: ThetaVec(theta),
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Dataset {
            header: DatasetHeader {
                n_sim,
                n_pseudo_real,
                seed,
                camera: Camera {
                    viewport: Viewport { center, width },
                    resolution,
                },
                perturbation,
            },
            items,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RenderError> {
        let io = |source| RenderError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let bytes = std::fs::read(path).map_err(|source| RenderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};
    use sha2::{Digest, Sha256};

    fn arm() -> ArmModel {
        ArmModel::default()
    }

    fn scene_at(target: [f64; 2]) -> SceneState {
        // arm folded well away from the positive-x half of the frame
        SceneState {
            q: [2.6, 0.3, 0.2],
            target,
        }
    }

    fn target_centroid(frame: &ImageFrame) -> [f64; 2] {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for r in 0..RESOLUTION {
            for c in 0..RESOLUTION {
                if frame.pixels[r * RESOLUTION + c] == TARGET_LEVEL {
                    sx += c as f64;
                    sy += r as f64;
                    n += 1.0;
                }
            }
        }
        [sx / n, sy / n]
    }

    #[test]
    fn camera_scale_is_42_px_per_metre() {
        let cam = Camera::default();
        assert_eq!(cam.scale(), 42.0);
        assert!((cam.px_per_cm() - 0.42).abs() < 1e-15);
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let s = scene_at([0.4, -0.2]);
        let a = render(&s, &arm(), &Camera::default());
        let b = render(&s, &arm(), &Camera::default());
        assert_eq!(a, b);
        assert_eq!(a.pixels.len(), FRAME_LEN);
        assert_eq!(a.domain, Domain::Sim);
        assert!(a.values().all(|v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn centered_target_lands_on_pixel_42() {
        let f = render(&scene_at([0.0, 0.0]), &arm(), &Camera::default());
        assert_eq!(target_centroid(&f), [42.0, 42.0]);
    }

    #[test]
    fn target_shift_of_10cm_moves_disc_4px() {
        let cam = Camera::default();
        let a = target_centroid(&render(&scene_at([0.3, -0.3]), &arm(), &cam));
        let b = target_centroid(&render(&scene_at([0.4, -0.3]), &arm(), &cam));
        assert_eq!(b[0] - a[0], 4.0);
        assert_eq!(b[1], a[1]);
        assert!((cam.world_to_pixel([0.1, 0.0])[0] - cam.world_to_pixel([0.0, 0.0])[0] - 4.2).abs() < 1e-12);
    }

    #[test]
    fn out_of_view_target_is_clipped() {
        let f = render(&scene_at([1.5, 0.0]), &arm(), &Camera::default());
        assert!(!f.pixels.contains(&TARGET_LEVEL));
    }

    #[test]
    fn null_perturbation_reproduces_clean_render() {
        let s = scene_at([0.2, 0.5]);
        let cam = Camera::default();
        let mut rng = item_rng(1, 0);
        let p = render_pseudo_real(&s, &arm(), &cam, &PerturbationSpec::none(), &mut rng);
        let c = render(&s, &arm(), &cam);
        assert_eq!(p.pixels, c.pixels);
        assert_eq!(p.domain, Domain::PseudoReal);
    }

    #[test]
    fn pseudo_real_is_seeded() {
        let s = scene_at([0.2, 0.5]);
        let cam = Camera::default();
        let spec = PerturbationSpec::default();
        let a = render_pseudo_real(&s, &arm(), &cam, &spec, &mut item_rng(5, 3));
        let b = render_pseudo_real(&s, &arm(), &cam, &spec, &mut item_rng(5, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn pseudo_real_shift_is_bounded() {
        let cam = Camera::default();
        let spec = PerturbationSpec::default();
        let mut total = 0.0;
        let vp = cam.viewport;
        for i in 0..100 {
            let mut rng = item_rng(77, i);
            let s = arm().sample_task(&mut rng, &vp).unwrap();
            let clean = render(&s, &arm(), &cam);
            let real = render_pseudo_real(&s, &arm(), &cam, &spec, &mut rng);
            total += real.mean_abs_diff(&clean);
        }
        let mean = total / 100.0;
        assert!(mean > 0.0 && mean < 0.2, "mean abs diff {mean}");
    }

    #[test]
    fn theta_endpoints_and_midpoint() {
        let cam = Camera::default();
        let arm = arm();
        let low = SceneState {
            q: [-2.8; 3],
            target: [-1.0, -1.0],
        };
        assert_eq!(normalize_theta(&low, &arm, &cam).0, [0.0; 5]);
        let mid = SceneState {
            q: [0.0; 3],
            target: [0.0, 0.0],
        };
        assert_eq!(normalize_theta(&mid, &arm, &cam).0, [0.5; 5]);
    }

    #[test]
    fn denormalize_rejects_out_of_range() {
        let r = denormalize_theta(&ThetaVec([0.5, 0.5, 1.2, 0.5, 0.5]), &arm(), &Camera::default());
        assert!(matches!(r, Err(RenderError::Range { index: 2, .. })));
    }

    #[test]
    fn dataset_counts_and_tags() {
        let cam = Camera::default();
        let empty = build_dataset(0, 0, 1, &arm(), &cam, &PerturbationSpec::default()).unwrap();
        assert!(empty.is_empty());
        let ds = build_dataset(100, 1418, 1, &arm(), &cam, &PerturbationSpec::default()).unwrap();
        assert_eq!(ds.len(), 1518);
        assert_eq!(ds.indices(Domain::PseudoReal).len(), 1418);
        assert_eq!(ds.indices(Domain::Sim), (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_file_is_byte_stable() {
        let cam = Camera::default();
        let spec = PerturbationSpec::default();
        let a = build_dataset(20, 10, 42, &arm(), &cam, &spec).unwrap().to_bytes();
        let b = build_dataset(20, 10, 42, &arm(), &cam, &spec).unwrap().to_bytes();
        assert_eq!(a, b);
        let back = Dataset::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes(), a);
        assert_eq!(back.header.n_pseudo_real, 10);
        assert_eq!(a.len(), 4 + 4 + 24 + 28 + 24 + 30 * (1 + FRAME_LEN + 40));
        let digest = hex::encode(Sha256::digest(&a));
        assert_eq!(digest, GOLDEN_DATASET_SHA256);
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let bytes = build_dataset(2, 1, 0, &arm(), &Camera::default(), &PerturbationSpec::default())
            .unwrap()
            .to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Dataset::from_bytes(b"XXXX").is_err());
    }

    // sha-256 of build_dataset(20, 10, seed 42) with default arm, camera and perturbations
    const GOLDEN_DATASET_SHA256: &str = "6e98eeae73d83c3aca12b4d1b6e018898a3c44d064758b6af4063ef6df515a65";

    proptest! {
        #[test]
        fn theta_round_trip(t in prop::array::uniform5(0.0f64..=1.0)) {
            let arm = arm();
            let cam = Camera::default();
            let (target, q) = denormalize_theta(&ThetaVec(t), &arm, &cam).unwrap();
            let back = normalize_theta(&SceneState { q, target }, &arm, &cam);
            for k in 0..5 {
                prop_assert!((back.0[k] - t[k]).abs() < 1e-6);
            }
        }

        #[test]
        fn disc_center_matches_projection(seed in 0u64..5000) {
            let arm = arm();
            let cam = Camera::default();
            let mut rng = item_rng(seed, 0);
            let s = dataset_scene(&mut rng, &arm, &cam.viewport).unwrap();
            let frame = render(&s, &arm, &cam);
            prop_assert!(frame.values().all(|v| (0.0..=1.0).contains(&v)));
            // the effector marker can cover part of the disc
            if arm.distance(&s) > 0.15 {
                let c = target_centroid(&frame);
                let p = cam.world_to_pixel(s.target);
                prop_assert!((c[0] - p[0]).abs() <= 1.0 && (c[1] - p[1]).abs() <= 1.0);
            }
        }
    }
}
