//! Synthetic surround-camera scenes: oriented boxes resting on the ground,
//! two ego poses, analytic depth and feature rendering, BEV occupancy labels.
//!
//! Boxes are static in the world and stored in the current ego frame.
//! Rendered depth is the camera-frame `z` of the first hit along each pixel
//! centre ray, matching the frustum's depth parameterisation.

mod dataset;
mod footprint;

pub use dataset::{read_dataset, scenes_from_bytes, scenes_to_bytes, write_dataset};
pub use footprint::footprint_iou;

use std::f64::consts::PI;

use nalgebra::Vector3;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraRig, RigidTransform, VoxelGridSpec};
use crate::kernel::FeatureMap;
use crate::real::Real;

/// Number of box classes.
pub const NUM_CLASSES: usize = 3;

/// Nominal `(length, width, height)` per class, jittered by ±15 % at sampling.
pub const CLASS_SIZES: [[f64; 3]; NUM_CLASSES] = [[4.2, 1.9, 1.6], [2.0, 1.0, 1.5], [6.0, 2.5, 2.5]];

const SIZE_JITTER: f64 = 0.15;
const MAX_ATTEMPTS: usize = 1000;
const MAX_FOOTPRINT_IOU: f64 = 0.3;
/// Minimum footprint distance from either ego origin, so no camera sits inside a box.
const EGO_CLEARANCE: f64 = 1.0;

/// Which of the two frames of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Timestamp {
    Previous,
    Current,
}

/// Oriented box; `center` is the box centre, `size` is `(length, width, height)`
/// along the box's own x, y, z axes and `yaw` rotates about ego z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u8,
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("box", format!("size must be positive, got {:?}", self.size)));
        }
        if !(-PI..PI).contains(&self.yaw) {
            return Err(Error::invalid("box", format!("yaw {} outside [-π, π)", self.yaw)));
        }
        if usize::from(self.class_id) >= NUM_CLASSES {
            return Err(Error::invalid("box", format!("class {} out of range", self.class_id)));
        }
        Ok(())
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }

    fn to_local_xy(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Whether `(x, y)` lies in the (closed) footprint rectangle.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let [lx, ly] = self.to_local_xy(x, y);
        lx.abs() <= 0.5 * self.size[0] && ly.abs() <= 0.5 * self.size[1]
    }

    /// Distance from `(x, y)` to the footprint (zero inside).
    pub fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        let [lx, ly] = self.to_local_xy(x, y);
        let dx = (lx.abs() - 0.5 * self.size[0]).max(0.0);
        let dy = (ly.abs() - 0.5 * self.size[1]).max(0.0);
        dx.hypot(dy)
    }

    /// The box expressed in another frame; `t` must be a rotation about z.
    pub fn transformed(&self, t: &RigidTransform) -> Box3D {
        let c = t.apply(&Vector3::from(self.center));
        let dyaw = t.rotation[(1, 0)].atan2(t.rotation[(0, 0)]);
        Box3D {
            center: [c.x, c.y, c.z],
            yaw: wrap_angle(self.yaw + dyaw),
            ..*self
        }
    }

    /// Smallest positive ray parameter `t` with `origin + t·dir` on the box
    /// surface (slab test in the box frame).
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let (s, c) = self.yaw.sin_cos();
        let rel = origin - Vector3::from(self.center);
        let o = [c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z];
        let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
        let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let half = 0.5 * self.size[a];
            if d[a].abs() < 1e-300 {
                if o[a].abs() > half {
                    return None;
                }
                continue;
            }
            let t1 = (-half - o[a]) / d[a];
            let t2 = (half - o[a]) / d[a];
            t_near = t_near.max(t1.min(t2));
            t_far = t_far.min(t1.max(t2));
        }
        if t_far < t_near || t_far <= 0.0 {
            None
        } else if t_near > 0.0 {
            Some(t_near)
        } else {
            Some(t_far)
        }
    }
}

/// A static world observed from two ego poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Boxes in the current ego frame.
    pub boxes: Vec<Box3D>,
    /// Ego→world at the previous timestamp.
    pub ego_pose_prev: RigidTransform,
    /// Ego→world at the current timestamp.
    pub ego_pose_curr: RigidTransform,
    pub rig: CameraRig,
    pub seed: u64,
}

impl Scene {
    /// Maps previous-ego coordinates to current-ego coordinates.
    pub fn prev_to_curr(&self) -> RigidTransform {
        self.ego_pose_curr.inverse().compose(&self.ego_pose_prev)
    }

    /// Boxes expressed in the ego frame of `ts`.
    pub fn boxes_at(&self, ts: Timestamp) -> Vec<Box3D> {
        match ts {
            Timestamp::Current => self.boxes.clone(),
            Timestamp::Previous => {
                let to_prev = self.prev_to_curr().inverse();
                self.boxes.iter().map(|b| b.transformed(&to_prev)).collect()
            }
        }
    }
}

/// Knobs for [`generate_scene_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub n_boxes: usize,
    /// Upper bound on the planar ego translation between timestamps (m).
    pub max_translation: f64,
    /// Upper bound on the ego yaw change between timestamps (rad).
    pub max_yaw: f64,
}

impl SceneOptions {
    pub fn with_boxes(n_boxes: usize) -> Self {
        Self {
            n_boxes,
            max_translation: 2.0,
            max_yaw: 0.1,
        }
    }
}

/// [`generate_scene_with`] using the default ego motion bounds.
pub fn generate_scene(seed: u64, n_boxes: usize, rig: &CameraRig, grid: &VoxelGridSpec) -> Result<Scene> {
    generate_scene_with(seed, &SceneOptions::with_boxes(n_boxes), rig, grid)
}

/// Samples ego motion, then places boxes one by one by rejection: the
/// footprint must lie inside the grid's x/y extents, keep clear of both ego
/// origins and overlap every earlier box by at most 0.3 IoU.
pub fn generate_scene_with(seed: u64, opts: &SceneOptions, rig: &CameraRig, grid: &VoxelGridSpec) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego_pose_prev = RigidTransform::from_yaw(
        rng.random_range(-PI..PI),
        Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0),
    );
    let radius = opts.max_translation * rng.random_range(0.0..=1.0f64).sqrt();
    let heading = rng.random_range(-PI..PI);
    let yaw = if opts.max_yaw > 0.0 {
        rng.random_range(-opts.max_yaw..=opts.max_yaw)
    } else {
        0.0
    };
    let motion = RigidTransform::from_yaw(yaw, Vector3::new(radius * heading.cos(), radius * heading.sin(), 0.0));
    let ego_pose_curr = ego_pose_prev.compose(&motion);
    let prev_origin = motion.inverse().translation;

    let [x0, y0, z0] = grid.min_bound;
    let [x1, y1, z1] = grid.max_bound;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(opts.n_boxes);
    for index in 0..opts.n_boxes {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let class_id = rng.random_range(0..NUM_CLASSES);
            let size = CLASS_SIZES[class_id].map(|s| s * rng.random_range(1.0 - SIZE_JITTER..=1.0 + SIZE_JITTER));
            let base = 0f64.clamp(z0, (z1 - size[2]).max(z0));
            let candidate = Box3D {
                center: [rng.random_range(x0..x1), rng.random_range(y0..y1), base + 0.5 * size[2]],
                size,
                yaw: rng.random_range(-PI..PI),
                class_id: class_id as u8,
            };
            let inside = candidate
                .footprint()
                .iter()
                .all(|[x, y]| (x0..x1).contains(x) && (y0..y1).contains(y));
            let clear = candidate.footprint_distance(0.0, 0.0) >= EGO_CLEARANCE
                && candidate.footprint_distance(prev_origin.x, prev_origin.y) >= EGO_CLEARANCE;
            if inside && clear && boxes.iter().all(|b| footprint_iou(b, &candidate) <= MAX_FOOTPRINT_IOU) {
                placed = Some(candidate);
                break;
            }
        }
        boxes.push(placed.ok_or(Error::PlacementFailure {
            index,
            attempts: MAX_ATTEMPTS,
        })?);
    }
    Ok(Scene {
        boxes,
        ego_pose_prev,
        ego_pose_curr,
        rig: rig.clone(),
        seed,
    })
}

/// Seed of corpus entry `i`: a splitmix64 step of `seed + i`.
pub fn scene_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes with seeds derived from `seed` by [`scene_seed`].
pub fn generate_corpus(
    seed: u64,
    count: usize,
    opts: &SceneOptions,
    rig: &CameraRig,
    grid: &VoxelGridSpec,
) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene_with(scene_seed(seed, i), opts, rig, grid))
        .collect()
}

/// Ego-frame ray through the centre of pixel `(h, w)`; the direction is
/// scaled so that the ray parameter equals camera-frame depth.
pub fn pixel_ray(cam: &Camera, h: usize, w: usize) -> (Vector3<f64>, Vector3<f64>) {
    let dir_cam = cam.intrinsics.unproject(w as f64 + 0.5, h as f64 + 0.5, 1.0);
    (cam.cam_to_ego.translation, cam.cam_to_ego.rotation * dir_cam)
}

/// Nearest hit `(depth, class)` per pixel.
fn cast(scene: &Scene, camera: usize, ts: Timestamp) -> Array2<Option<(f64, u8)>> {
    let cam = &scene.rig.cameras[camera];
    let boxes = scene.boxes_at(ts);
    Array2::from_shape_fn((scene.rig.image_h, scene.rig.image_w), |(h, w)| {
        let (o, d) = pixel_ray(cam, h, w);
        boxes
            .iter()
            .filter_map(|b| b.ray_hit(&o, &d).map(|t| (t, b.class_id)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    })
}

/// Camera-frame depth of the nearest box along each pixel centre ray,
/// `+∞` where the ray hits nothing. Shape `H×W`.
pub fn render_depth(scene: &Scene, camera: usize, ts: Timestamp) -> Array2<f64> {
    cast(scene, camera, ts).mapv(|hit| hit.map_or(f64::INFINITY, |(t, _)| t))
}

/// `H×W×L` features: one-hot class of the nearest hit (zero for background),
/// then `2(w + ½)/W − 1` and `2(h + ½)/H − 1`, remaining channels zero.
pub fn render_features<T: Real>(scene: &Scene, camera: usize, ts: Timestamp, channels: usize) -> Result<Array3<T>> {
    if channels < NUM_CLASSES + 2 {
        return Err(Error::invalid(
            "feature channels",
            format!("need at least {} channels, got {channels}", NUM_CLASSES + 2),
        ));
    }
    let hits = cast(scene, camera, ts);
    let (hh, ww) = (scene.rig.image_h as f64, scene.rig.image_w as f64);
    Ok(Array3::from_shape_fn((scene.rig.image_h, scene.rig.image_w, channels), |(h, w, c)| {
        let v = match c {
            c if c < NUM_CLASSES => match hits[[h, w]] {
                Some((_, k)) if usize::from(k) == c => 1.0,
                _ => 0.0,
            },
            c if c == NUM_CLASSES => 2.0 * (w as f64 + 0.5) / ww - 1.0,
            c if c == NUM_CLASSES + 1 => 2.0 * (h as f64 + 0.5) / hh - 1.0,
            _ => 0.0,
        };
        T::narrow(v)
    }))
}

/// `X×Y` labels: a cell is occupied iff its centre lies in some current-frame
/// box footprint.
pub fn bev_occupancy_gt(scene: &Scene, grid: &VoxelGridSpec) -> Array2<bool> {
    let [nx, ny, _] = grid.dims;
    Array2::from_shape_fn((nx, ny), |(i, j)| {
        let [x, y, _] = grid.cell_center([i, j, 0]);
        scene.boxes.iter().any(|b| b.contains_xy(x, y))
    })
}

/// Everything the trainer needs from one scene.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub features_prev: FeatureMap<T>,
    pub features_curr: FeatureMap<T>,
    /// `N×H×W` metric depth, `+∞` for background.
    pub depth_gt_prev: Array3<f64>,
    pub depth_gt_curr: Array3<f64>,
    pub bev_occupancy_gt: Array2<bool>,
}

fn render_frame<T: Real>(scene: &Scene, ts: Timestamp, channels: usize) -> Result<(FeatureMap<T>, Array3<f64>)> {
    let (n, h, w) = (scene.rig.num_cameras(), scene.rig.image_h, scene.rig.image_w);
    let mut features = Array4::zeros((n, h, w, channels));
    let mut depth = Array3::zeros((n, h, w));
    for cam in 0..n {
        features
            .index_axis_mut(ndarray::Axis(0), cam)
            .assign(&render_features::<T>(scene, cam, ts, channels)?);
        depth
            .index_axis_mut(ndarray::Axis(0), cam)
            .assign(&render_depth(scene, cam, ts));
    }
    Ok((FeatureMap::new(features), depth))
}

pub fn render_sample<T: Real>(scene: &Scene, grid: &VoxelGridSpec, channels: usize) -> Result<Sample<T>> {
    let (features_prev, depth_gt_prev) = render_frame(scene, Timestamp::Previous, channels)?;
    let (features_curr, depth_gt_curr) = render_frame(scene, Timestamp::Current, channels)?;
    Ok(Sample {
        features_prev,
        features_curr,
        depth_gt_prev,
        depth_gt_curr,
        bev_occupancy_gt: bev_occupancy_gt(scene, grid),
    })
}
