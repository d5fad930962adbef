//! Synthetic labeled scenes: color image, robot mask and 3D ground truth.
//!
//! Links are rendered as capsules (segments swept by a sphere) by casting one
//! ray per pixel. The mask is the union of the robot's capsules; an optional
//! distractor robot placed behind the scene only shows up in the color image.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{self, DatasetManifest, DatasetMeta, SampleRecord, SplitTag};
use crate::error::{Error, Result};
use crate::geometry::{forward_kinematics, look_at, PinholeCamera, Vec3};
use crate::robots::{Robot, RobotModel};

pub const RENDER_WIDTH: usize = 512;
pub const RENDER_HEIGHT: usize = 424;
pub const FOREGROUND_MIN: f64 = 0.06;
pub const FOREGROUND_MAX: f64 = 0.18;
pub const MAX_ATTEMPTS: usize = 64;

/// Capsules closer to the camera than this are rejected while sampling poses.
const NEAR_PLANE: f64 = 0.05;
const FOCAL: f64 = 365.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Camera distance to the look-at point, meters.
    pub camera_distance_range: [f64; 2],
    /// Camera elevation above the base plane, radians.
    pub camera_elevation_range: [f64; 2],
    pub background_id: u32,
    pub brightness: f64,
    /// Per-channel gain applied to the whole frame.
    #[serde(default = "neutral_balance")]
    pub white_balance: [f64; 3],
    pub seed: u64,
    /// Render a second, inert robot further back in the scene.
    #[serde(default)]
    pub distractor: bool,
}

impl SceneConfig {
    /// Camera placement tuned to the robot's size so that foreground
    /// fractions land inside the accepted envelope most of the time.
    pub fn for_robot(model: RobotModel, seed: u64) -> Self {
        let chain = model.chain();
        // Silhouette area scales with reach * radius, so this keeps coverage comparable.
        let scale = (chain.reach() * chain.mean_radius()).sqrt();
        Self {
            camera_distance_range: [2.85 * scale, 4.0 * scale],
            camera_elevation_range: [0.1, 0.7],
            background_id: 0,
            brightness: 1.0,
            white_balance: neutral_balance(),
            seed,
            distractor: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [dmin, dmax] = self.camera_distance_range;
        let [emin, emax] = self.camera_elevation_range;
        if !(dmin > 0.0 && dmin <= dmax) {
            return Err(Error::InvalidScene("camera distance range must satisfy 0 < min <= max".into()));
        }
        if !(emin <= emax && emin > -1.5 && emax < 1.5) {
            return Err(Error::InvalidScene("camera elevation range is invalid".into()));
        }
        if !(0.5..=1.5).contains(&self.brightness) {
            return Err(Error::InvalidScene(format!(
                "brightness {} outside [0.5, 1.5]",
                self.brightness
            )));
        }
        if self.white_balance.iter().any(|g| !(0.7..=1.3).contains(g)) {
            return Err(Error::InvalidScene(format!(
                "white balance {:?} outside [0.7, 1.3]",
                self.white_balance
            )));
        }
        Ok(())
    }
}

fn neutral_balance() -> [f64; 3] {
    [1.0; 3]
}

/// One rendered, labeled frame at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, `height * width * 3` bytes.
    pub color: Vec<u8>,
    /// Row-major, 1 = robot, 0 = background.
    pub mask: Vec<u8>,
    /// Base followed by every joint-frame origin, camera frame, meters.
    pub joints_3d: Vec<Vec3>,
    pub base_3d: Vec3,
    pub robot_type: usize,
    pub angles: Vec<f64>,
    pub camera: PinholeCamera,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f64 {
        foreground_fraction(&self.mask)
    }
}

pub fn foreground_fraction(mask: &[u8]) -> f64 {
    mask.iter().filter(|&&m| m != 0).count() as f64 / mask.len() as f64
}

/// Native capture camera with an identity extrinsic.
pub fn native_camera() -> PinholeCamera {
    PinholeCamera::new(
        FOCAL,
        FOCAL,
        RENDER_WIDTH as f64 / 2.0,
        RENDER_HEIGHT as f64 / 2.0,
        RENDER_WIDTH,
        RENDER_HEIGHT,
    )
    .expect("native intrinsics are valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    /// Nearest positive ray parameter where the ray `origin + t * dir`
    /// (`dir` unit length) enters the capsule.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let ba = self.b - self.a;
        let oa = origin - self.a;
        let baba = ba.dot(ba);
        let bard = ba.dot(dir);
        let baoa = ba.dot(oa);
        let rdoa = dir.dot(oa);
        let oaoa = oa.dot(oa);
        let r2 = self.radius * self.radius;

        let a = baba - bard * bard;
        if a > 1e-12 * baba.max(1e-300) {
            let b = baba * rdoa - baoa * bard;
            let c = baba * oaoa - baoa * baoa - r2 * baba;
            let h = b * b - a * c;
            if h < 0.0 {
                return None;
            }
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if y > 0.0 && y < baba {
                return (t > 0.0).then_some(t);
            }
            let center = if y <= 0.0 { self.a } else { self.b };
            return sphere_hit(origin, dir, center, r2);
        }
        // Ray (nearly) parallel to the axis: the caps decide.
        match (sphere_hit(origin, dir, self.a, r2), sphere_hit(origin, dir, self.b, r2)) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        }
    }

    /// Outward unit normal for a surface point.
    pub fn normal_at(&self, p: Vec3) -> Vec3 {
        let ba = self.b - self.a;
        let baba = ba.dot(ba);
        let h = if baba > 0.0 {
            ((p - self.a).dot(ba) / baba).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (self.a + ba * h)).normalized()
    }

    fn min_depth(&self) -> f64 {
        self.a.z.min(self.b.z) - self.radius
    }

    fn max_depth(&self) -> f64 {
        self.a.z.max(self.b.z) + self.radius
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` conservatively covering the
    /// projection, or `None` if it misses the image. Requires
    /// `min_depth() > 0`.
    fn pixel_bounds(&self, cam: &PinholeCamera) -> Option<[usize; 4]> {
        let r = self.radius;
        let lo = Vec3::new(self.a.x.min(self.b.x) - r, self.a.y.min(self.b.y) - r, self.min_depth());
        let hi = Vec3::new(self.a.x.max(self.b.x) + r, self.a.y.max(self.b.y) + r, self.max_depth());
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &x in &[lo.x, hi.x] {
            for &y in &[lo.y, hi.y] {
                for &z in &[lo.z, hi.z] {
                    let u = cam.fx * x / z + cam.cx;
                    let v = cam.fy * y / z + cam.cy;
                    umin = umin.min(u);
                    umax = umax.max(u);
                    vmin = vmin.min(v);
                    vmax = vmax.max(v);
                }
            }
        }
        let clamp = |x: f64, n: usize| x.floor().clamp(0.0, n as f64) as usize;
        let x0 = clamp(umin - 1.0, cam.width);
        let x1 = clamp(umax + 2.0, cam.width);
        let y0 = clamp(vmin - 1.0, cam.height);
        let y1 = clamp(vmax + 2.0, cam.height);
        (x0 < x1 && y0 < y1).then_some([x0, x1, y0, y1])
    }
}

fn sphere_hit(origin: Vec3, dir: Vec3, center: Vec3, r2: f64) -> Option<f64> {
    let oc = origin - center;
    let b = dir.dot(oc);
    let c = oc.dot(oc) - r2;
    let h = b * b - c;
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

/// Unit ray direction through the center of pixel `(col, row)`.
pub fn pixel_ray(cam: &PinholeCamera, col: usize, row: usize) -> Vec3 {
    cam.ray(col as f64 + 0.5, row as f64 + 0.5).normalized()
}

/// Per-pixel nearest hit among a set of camera-frame capsules.
#[derive(Debug, Clone)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Depth (camera z) of the nearest hit, `f64::INFINITY` where empty.
    pub depth: Vec<f64>,
    /// Index of the nearest capsule, `u16::MAX` where empty.
    pub link: Vec<u16>,
}

pub const NO_LINK: u16 = u16::MAX;

impl Raster {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
            link: vec![NO_LINK; width * height],
        }
    }

    pub fn mask(&self) -> Vec<u8> {
        self.link.iter().map(|&l| u8::from(l != NO_LINK)).collect()
    }

    pub fn coverage(&self) -> f64 {
        self.link.iter().filter(|&&l| l != NO_LINK).count() as f64 / self.link.len() as f64
    }
}

/// Rasterizes camera-frame capsules with a depth test. All capsules must
/// lie in front of the camera.
pub fn rasterize(cam: &PinholeCamera, capsules: &[Capsule]) -> Raster {
    let mut raster = Raster::empty(cam.width, cam.height);
    draw_capsules(cam, capsules, &mut raster);
    raster
}

fn draw_capsules(cam: &PinholeCamera, capsules: &[Capsule], raster: &mut Raster) {
    for (idx, cap) in capsules.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = cap.pixel_bounds(cam) else {
            continue;
        };
        for row in y0..y1 {
            for col in x0..x1 {
                let dir = pixel_ray(cam, col, row);
                if let Some(t) = cap.intersect(Vec3::ZERO, dir) {
                    let z = t * dir.z;
                    let i = row * cam.width + col;
                    if z < raster.depth[i] {
                        raster.depth[i] = z;
                        raster.link[i] = idx as u16;
                    }
                }
            }
        }
    }
}

/// Capsules for each link: link `i` joins frame origins `i` and `i + 1` and
/// takes the radius of joint `i`.
pub fn link_capsules(robot: &Robot, points_cam: &[Vec3]) -> Vec<Capsule> {
    robot
        .chain
        .joints()
        .iter()
        .zip(points_cam.windows(2))
        .map(|(j, w)| Capsule {
            a: w[0],
            b: w[1],
            radius: j.radius,
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Background {
    Gradient { top: [f64; 3], bottom: [f64; 3] },
    Checker { cell: usize, a: [f64; 3], b: [f64; 3] },
    Noise { cell: usize, a: [f64; 3], b: [f64; 3], seed: u64 },
}

impl Background {
    fn new(id: u32, rng: &mut ChaCha8Rng) -> Self {
        let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
            [rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0)]
        };
        match id % 3 {
            0 => Background::Gradient {
                top: color(rng),
                bottom: color(rng),
            },
            1 => Background::Checker {
                cell: rng.gen_range(16..64),
                a: color(rng),
                b: color(rng),
            },
            _ => Background::Noise {
                cell: rng.gen_range(24..72),
                a: color(rng),
                b: color(rng),
                seed: rng.gen(),
            },
        }
    }

    fn color(&self, col: usize, row: usize, height: usize) -> [f64; 3] {
        match *self {
            Background::Gradient { top, bottom } => {
                let t = row as f64 / (height - 1) as f64;
                lerp3(top, bottom, t)
            }
            Background::Checker { cell, a, b } => {
                if (col / cell + row / cell) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
            Background::Noise { cell, a, b, seed } => {
                let gx = col as f64 / cell as f64;
                let gy = row as f64 / cell as f64;
                let (ix, iy) = (gx.floor() as u64, gy.floor() as u64);
                let (fx, fy) = (gx.fract(), gy.fract());
                let v = |x: u64, y: u64| lattice_value(seed, x, y);
                let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
                let bot = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
                lerp3(a, b, top * (1.0 - fy) + bot * fy)
            }
        }
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn lattice_value(seed: u64, x: u64, y: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(x.wrapping_mul(0x9E37_79B9) ^ (y << 32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// SplitMix64 finalizer; used to derive independent per-item seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}

struct Pose {
    angles: Vec<f64>,
    camera: PinholeCamera,
    points_cam: Vec<Vec3>,
    capsules: Vec<Capsule>,
}

fn sample_angles(robot: &Robot, rng: &mut ChaCha8Rng) -> Vec<f64> {
    robot
        .chain
        .joints()
        .iter()
        .map(|j| rng.gen_range(j.limits[0]..=j.limits[1]))
        .collect()
}

fn sample_pose(robot: &Robot, scene: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Option<Pose>> {
    let angles = sample_angles(robot, rng);
    let points = forward_kinematics(&robot.chain, &angles)?;
    let reach = robot.chain.reach();

    let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
    let [emin, emax] = scene.camera_elevation_range;
    let elevation = rng.gen_range(emin..=emax);
    let [dmin, dmax] = scene.camera_distance_range;
    let distance = rng.gen_range(dmin..=dmax);
    let jitter = 0.12 * reach;
    let centroid = points.iter().fold(Vec3::ZERO, |acc, &p| acc + p) * (1.0 / points.len() as f64);
    let target = centroid
        + Vec3::new(
            rng.gen_range(-jitter..=jitter),
            rng.gen_range(-jitter..=jitter),
            rng.gen_range(-jitter..=jitter),
        );
    // Arms standing on a floor never dip below their base plane.
    if points[1..].iter().any(|p| p.z < 0.0) {
        return Ok(None);
    }

    let dir = Vec3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    );
    let eye = target + dir * distance;
    let camera = native_camera().with_extrinsic(look_at(eye, target, Vec3::new(0.0, 0.0, 1.0)));
    let points_cam = crate::geometry::to_camera_frame(&points, &camera);
    let capsules = link_capsules(robot, &points_cam);
    if capsules.iter().any(|c| c.min_depth() <= NEAR_PLANE) {
        return Ok(None);
    }
    Ok(Some(Pose {
        angles,
        camera,
        points_cam,
        capsules,
    }))
}

/// Renders one labeled frame. Deterministic in `scene.seed`.
pub fn render_sample(robot: &Robot, scene: &SceneConfig) -> Result<Sample> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let background = Background::new(scene.background_id, &mut rng);

    for _ in 0..MAX_ATTEMPTS {
        let Some(pose) = sample_pose(robot, scene, &mut rng)? else {
            continue;
        };
        let raster = rasterize(&pose.camera, &pose.capsules);
        let fraction = raster.coverage();
        if !(FOREGROUND_MIN..=FOREGROUND_MAX).contains(&fraction) {
            continue;
        }
        let distractor = if scene.distractor {
            distractor_capsules(robot, &raster, &mut rng)?
        } else {
            Vec::new()
        };
        let color = shade(robot, &pose, &raster, &distractor, &background, scene);
        return Ok(Sample {
            width: RENDER_WIDTH,
            height: RENDER_HEIGHT,
            color,
            mask: raster.mask(),
            base_3d: pose.points_cam[0],
            joints_3d: pose.points_cam,
            robot_type: robot.type_label,
            angles: pose.angles,
            camera: pose.camera,
        });
    }
    Err(Error::UnreachableForegroundFraction {
        attempts: MAX_ATTEMPTS,
        min: FOREGROUND_MIN,
        max: FOREGROUND_MAX,
    })
}

/// A second copy of the robot standing behind everything already drawn.
fn distractor_capsules(robot: &Robot, raster: &Raster, rng: &mut ChaCha8Rng) -> Result<Vec<Capsule>> {
    let far = raster
        .depth
        .iter()
        .copied()
        .filter(|d| d.is_finite())
        .fold(0.0_f64, f64::max);
    let reach = robot.chain.reach();
    let angles = sample_angles(robot, rng);
    let base = Vec3::new(
        rng.gen_range(-0.6..=0.6) * far,
        rng.gen_range(0.1..=0.3) * far,
        far + reach * rng.gen_range(1.2..=2.0),
    );
    let points = forward_kinematics(&robot.chain, &angles)?;
    // Stand it upright: base-frame z maps to image up (-y).
    let pts: Vec<Vec3> = points
        .iter()
        .map(|p| base + Vec3::new(p.x, -p.z, p.y))
        .collect();
    Ok(link_capsules(robot, &pts)
        .into_iter()
        .filter(|c| c.min_depth() > far)
        .collect())
}

fn shade(
    robot: &Robot,
    pose: &Pose,
    raster: &Raster,
    distractor: &[Capsule],
    background: &Background,
    scene: &SceneConfig,
) -> Vec<u8> {
    let gain = scene.white_balance.map(|g| g * scene.brightness);
    let n_links = pose.capsules.len();
    let cam = &pose.camera;
    let (w, h) = (cam.width, cam.height);
    let light = Vec3::new(-0.4, -0.6, -0.7).normalized();
    let back = if distractor.is_empty() {
        None
    } else {
        Some(rasterize(cam, distractor))
    };
    let lit = |cap: &Capsule, color: [u8; 3], dir: Vec3, t: f64| -> [f64; 3] {
        let n = cap.normal_at(dir * t);
        let k = 0.3 + 0.7 * n.dot(light).max(0.0);
        [color[0] as f64 * k, color[1] as f64 * k, color[2] as f64 * k]
    };

    let mut out = vec![0u8; w * h * 3];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let rgb = if raster.link[i] != NO_LINK {
                let link = raster.link[i] as usize;
                let dir = pixel_ray(cam, col, row);
                let t = raster.depth[i] / dir.z;
                lit(&pose.capsules[link], robot.palette.link_color(link, n_links), dir, t)
            } else if let Some(b) = back.as_ref().filter(|b| b.link[i] != NO_LINK) {
                let link = b.link[i] as usize;
                let dir = pixel_ray(cam, col, row);
                let t = b.depth[i] / dir.z;
                lit(&distractor[link], robot.palette.link_color(link, n_links), dir, t)
            } else {
                background.color(col, row, h)
            };
            for c in 0..3 {
                out[i * 3 + c] = (rgb[c] * gain[c]).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Per-sample scene derived from a dataset-level configuration.
pub fn scene_for_index(base: &SceneConfig, index: usize) -> SceneConfig {
    let seed = derive_seed(base.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_BA5E);
    SceneConfig {
        seed,
        background_id: base.background_id.wrapping_add(rng.gen_range(0..3)),
        brightness: (base.brightness * rng.gen_range(0.6..=1.4)).clamp(0.5, 1.5),
        white_balance: base.white_balance.map(|g| (g * rng.gen_range(0.85..=1.15)).clamp(0.7, 1.3)),
        ..base.clone()
    }
}

/// Renders `n` samples and writes them, with a manifest, under `out_dir`.
pub fn generate_dataset(
    robot: &Robot,
    n: usize,
    base: &SceneConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    base.validate()?;
    datastore::prepare_dataset_dir(out_dir)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene = scene_for_index(base, i);
        let sample = render_sample(robot, &scene)?;
        let id = format!("{}-{:05}", robot.model.name(), i);
        let (color_path, mask_path) = datastore::write_sample_images(out_dir, &id, &sample)?;
        records.push(SampleRecord {
            id,
            color_path,
            mask_path,
            joints_3d: sample.joints_3d.iter().map(|p| p.to_array()).collect(),
            base_3d: sample.base_3d.to_array(),
            angles: sample.angles,
            split_tag: SplitTag::Train,
        });
    }
    let manifest = DatasetManifest {
        records,
        robot_type: robot.type_label,
        split_seed: base.seed,
    };
    let manifest = datastore::split(manifest, datastore::TRAIN_FRACTION, base.seed)?;
    let meta = DatasetMeta {
        robot: robot.model,
        robot_type: robot.type_label,
        n_joints: robot.chain.n_joints(),
        count: n,
        scene: base.clone(),
    };
    datastore::write_manifest(out_dir, &manifest, &meta)?;
    Ok(manifest)
}
