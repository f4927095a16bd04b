//! Kinematic highway scenarios and a pinhole renderer that turns their
//! ground-truth boxes into 2D detections and shaded patches.
//!
//! Scenario scripts live in the ego frame (x lateral, y longitudinal,
//! meters); the camera sits `camera_height` above a flat road.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{ray_angle, wrap_angle, Box2D, Box3D, CameraIntrinsics, GeometryError, TRUNCATION_MARGIN_PX};
use crate::track_assembly::{assemble, Observation, TrackError, TrackSet};

/// Patch side length in pixels.
pub const PATCH_SIZE: usize = 16;
/// Patch pixels plus aspect ratio, area fraction and horizontal centre.
pub const PATCH_FEATURES: usize = PATCH_SIZE * PATCH_SIZE + 3;
/// Smallest allowed distance between two vehicle centres, meters.
pub const MIN_GAP_M: f64 = 2.0;
/// Mean car dimensions (width, height, length), meters.
pub const CAR_DIMS: [f64; 3] = [1.8, 1.6, 4.5];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error("vehicles {a} and {b} are {gap:.3} m apart at frame {frame} (minimum {MIN_GAP_M} m)")]
    Collision { a: u64, b: u64, frame: i64, gap: f64 },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Track(#[from] TrackError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Motion relative to the ego vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    ConstantVelocity {
        vx: f64,
        vy: f64,
    },
    ConstantAcceleration {
        vx: f64,
        vy: f64,
        ax: f64,
        ay: f64,
    },
    /// Longitudinal constant velocity with a logistic lateral move of
    /// `offset` meters between `start_s` and `start_s + duration_s`.
    LaneChange {
        vy: f64,
        start_s: f64,
        duration_s: f64,
        offset: f64,
    },
}

/// Steepness of the lane-change logistic over its unit interval.
const LANE_CHANGE_STEEPNESS: f64 = 10.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic ramp from 0 at `s = 0` to exactly 1 at `s = 1`, and its slope.
fn ramp(s: f64) -> (f64, f64) {
    let k = LANE_CHANGE_STEEPNESS;
    let lo = sigmoid(-k / 2.0);
    let norm = sigmoid(k / 2.0) - lo;
    if s <= 0.0 {
        (0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0)
    } else {
        let g = sigmoid(k * (s - 0.5));
        ((g - lo) / norm, k * g * (1.0 - g) / norm)
    }
}

impl Motion {
    /// Offset from the start position and velocity at time `t`.
    pub fn state(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        match *self {
            Motion::ConstantVelocity { vx, vy } => ([vx * t, vy * t], [vx, vy]),
            Motion::ConstantAcceleration { vx, vy, ax, ay } => (
                [vx * t + 0.5 * ax * t * t, vy * t + 0.5 * ay * t * t],
                [vx + ax * t, vy + ay * t],
            ),
            Motion::LaneChange {
                vy,
                start_s,
                duration_s,
                offset,
            } => {
                let (r, dr) = ramp((t - start_s) / duration_s);
                ([offset * r, vy * t], [offset * dr / duration_s, vy])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleScript {
    pub id: u64,
    pub x0: f64,
    pub y0: f64,
    #[serde(default = "default_dims")]
    pub dims: [f64; 3],
    pub motion: Motion,
}

fn default_dims() -> [f64; 3] {
    CAR_DIMS
}

/// Seeded perturbation of each script's start state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    pub position_m: f64,
    pub speed_mps: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            position_m: 0.3,
            speed_mps: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub duration_s: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Ego speed, m/s; sets vehicle headings from their relative motion.
    #[serde(default = "default_ego_speed")]
    pub ego_speed: f64,
    #[serde(default = "default_camera_height")]
    pub camera_height: f64,
    #[serde(default = "default_camera")]
    pub camera: CameraIntrinsics,
    #[serde(default)]
    pub jitter: Jitter,
    pub vehicles: Vec<VehicleScript>,
}

fn default_dt() -> f64 {
    0.5
}
fn default_ego_speed() -> f64 {
    25.0
}
fn default_camera_height() -> f64 {
    1.5
}

pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0)
        .expect("valid intrinsics")
        .with_image_size(1920.0, 1080.0)
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if !(self.duration_s > 0.0 && self.dt > 0.0) {
            return bad(format!("duration {} and dt {} must be positive", self.duration_s, self.dt));
        }
        if self.vehicles.is_empty() {
            return bad("no vehicles".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.vehicles {
            if !seen.insert(v.id) {
                return bad(format!("duplicate vehicle id {}", v.id));
            }
            if v.dims.iter().any(|d| !(*d > 0.0)) {
                return bad(format!("vehicle {} has non-positive dims", v.id));
            }
            if let Motion::LaneChange { duration_s, .. } = v.motion {
                if !(duration_s > 0.0) {
                    return bad(format!("vehicle {} lane change needs positive duration", v.id));
                }
            }
        }
        self.camera.validate()?;
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s / self.dt + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTruth {
    pub track_id: u64,
    /// Ego-frame position, meters.
    pub position: [f64; 2],
    pub box3d: Box3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: i64,
    pub vehicles: Vec<VehicleTruth>,
}

/// Ground truth for one or more concatenated scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dt: f64,
    pub camera: CameraIntrinsics,
    pub frames: Vec<FrameTruth>,
}

impl Dataset {
    pub fn observations(&self) -> Vec<Observation> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.vehicles.iter().map(move |v| Observation {
                    frame: f.frame,
                    track_id: v.track_id,
                    x: v.position[0],
                    y: v.position[1],
                })
            })
            .collect()
    }

    pub fn track_set(&self) -> Result<TrackSet> {
        Ok(assemble(&self.observations(), self.dt)?)
    }

    /// Appends `other` after a gap of frames, offsetting its frames and ids
    /// so no track or neighbourhood spans the two.
    pub fn append(&mut self, other: Dataset) {
        const FRAME_GAP: i64 = 10;
        let frame_offset = self.frames.last().map_or(0, |f| f.frame + FRAME_GAP);
        let id_offset = self
            .frames
            .iter()
            .flat_map(|f| f.vehicles.iter().map(|v| v.track_id + 1))
            .max()
            .unwrap_or(0);
        for mut f in other.frames {
            f.frame += frame_offset;
            for v in &mut f.vehicles {
                v.track_id += id_offset;
            }
            self.frames.push(f);
        }
    }

    pub fn truth_by_key(&self) -> BTreeMap<(i64, u64), Box3D> {
        self.frames
            .iter()
            .flat_map(|f| f.vehicles.iter().map(move |v| ((f.frame, v.track_id), v.box3d)))
            .collect()
    }
}

/// Samples `scenario` at its `dt`. Start states are jittered from `seed`.
pub fn generate(scenario: &Scenario, seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_noise = Normal::new(0.0, scenario.jitter.position_m.max(0.0)).expect("finite sigma");
    let speed_noise = Normal::new(0.0, scenario.jitter.speed_mps.max(0.0)).expect("finite sigma");
    let starts: Vec<([f64; 2], f64)> = scenario
        .vehicles
        .iter()
        .map(|v| {
            (
                [v.x0 + pos_noise.sample(&mut rng), v.y0 + pos_noise.sample(&mut rng)],
                speed_noise.sample(&mut rng),
            )
        })
        .collect();

    let mut frames = Vec::with_capacity(scenario.frame_count());
    for frame in 0..scenario.frame_count() {
        let t = frame as f64 * scenario.dt;
        let mut vehicles = Vec::with_capacity(scenario.vehicles.len());
        for (v, (start, dv)) in scenario.vehicles.iter().zip(&starts) {
            let (offset, vel) = v.motion.state(t);
            let position = [start[0] + offset[0], start[1] + offset[1] + dv * t];
            let heading_speed = [vel[0], vel[1] + dv + scenario.ego_speed];
            let yaw = wrap_angle(heading_speed[0].atan2(heading_speed[1]));
            let translation = [position[0], scenario.camera_height - v.dims[1] / 2.0, position[1]];
            vehicles.push(VehicleTruth {
                track_id: v.id,
                position,
                box3d: Box3D::new(translation, v.dims, yaw)?,
            });
        }
        for i in 0..vehicles.len() {
            for j in i + 1..vehicles.len() {
                let (a, b) = (vehicles[i].position, vehicles[j].position);
                let gap = (a[0] - b[0]).hypot(a[1] - b[1]);
                if gap < MIN_GAP_M {
                    return Err(SynthError::Collision {
                        a: vehicles[i].track_id,
                        b: vehicles[j].track_id,
                        frame: frame as i64,
                        gap,
                    });
                }
            }
        }
        frames.push(FrameTruth {
            frame: frame as i64,
            vehicles,
        });
    }
    Ok(Dataset {
        dt: scenario.dt,
        camera: scenario.camera,
        frames,
    })
}

/// Flattened 16×16 patch plus normalised box geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFeatures(pub Vec<f64>);

impl PatchFeatures {
    pub fn pixels(&self) -> &[f64] {
        &self.0[..PATCH_SIZE * PATCH_SIZE]
    }

    pub fn geometry(&self) -> &[f64] {
        &self.0[PATCH_SIZE * PATCH_SIZE..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedDetection {
    pub frame: i64,
    pub track_id: u64,
    /// Possibly noisy 2D box.
    pub box2d: Box2D,
    /// Noise-free hull of the projected vertices.
    pub clean_box2d: Box2D,
    pub patch: PatchFeatures,
    pub truth: Box3D,
    /// Local orientation relative to the ray through the clean box centre.
    pub theta_local: f64,
    pub visible: bool,
}

/// Face shades by outward local normal: front (+z), back, right (+x),
/// left, top (−y), bottom.
const FACE_SHADES: [(usize, f64, f64); 6] = [
    (2, 1.0, 1.0),
    (2, -1.0, 0.35),
    (0, 1.0, 0.7),
    (0, -1.0, 0.55),
    (1, -1.0, 0.85),
    (1, 1.0, 0.2),
];

/// Gaussian pixel noise on rendered 2D box sides.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderNoise {
    pub pixel_sigma: f64,
}

/// Projects each vehicle of `frame`. Boxes behind the camera or not fully
/// inside the image come back with `visible = false` and an empty patch.
pub fn render_frame(
    frame: &FrameTruth,
    k: &CameraIntrinsics,
    noise: RenderNoise,
    rng: &mut impl Rng,
) -> Vec<RenderedDetection> {
    let pixel = Normal::new(0.0, noise.pixel_sigma.max(0.0)).expect("finite sigma");
    frame
        .vehicles
        .iter()
        .map(|v| {
            let Ok(clean) = v.box3d.project_hull(k) else {
                return invisible(frame.frame, v);
            };
            if !k.contains(&clean, TRUNCATION_MARGIN_PX) {
                return invisible(frame.frame, v);
            }
            let mut sides = clean.sides();
            if noise.pixel_sigma > 0.0 {
                sides.iter_mut().for_each(|s| *s += pixel.sample(rng));
            }
            let box2d = Box2D::new(sides[0], sides[1], sides[2], sides[3].max(sides[1] + 1.0))
                .or_else(|_| Box2D::new(sides[0], sides[1], sides[0].max(sides[2]) + 1.0, sides[3].max(sides[1] + 1.0)))
                .unwrap_or(clean);
            let (u, _) = clean.center();
            RenderedDetection {
                frame: frame.frame,
                track_id: v.track_id,
                box2d,
                clean_box2d: clean,
                patch: render_patch(&v.box3d, k, &box2d),
                truth: v.box3d,
                theta_local: wrap_angle(v.box3d.yaw - ray_angle(k, u)),
                visible: true,
            }
        })
        .collect()
}

fn invisible(frame: i64, v: &VehicleTruth) -> RenderedDetection {
    let empty = Box2D {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 0.0,
        y_max: 0.0,
    };
    RenderedDetection {
        frame,
        track_id: v.track_id,
        box2d: empty,
        clean_box2d: empty,
        patch: PatchFeatures(vec![0.0; PATCH_FEATURES]),
        truth: v.box3d,
        theta_local: 0.0,
        visible: false,
    }
}

/// Renders all frames of `data`; visible detections only.
pub fn render(data: &Dataset, noise: RenderNoise, seed: u64) -> Vec<RenderedDetection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.frames
        .iter()
        .flat_map(|f| render_frame(f, &data.camera, noise, &mut rng))
        .filter(|d| d.visible)
        .collect()
}

/// Shaded silhouette of `b` sampled on a 16×16 grid over `window`, plus
/// box geometry normalised by the image size.
pub fn render_patch(b: &Box3D, k: &CameraIntrinsics, window: &Box2D) -> PatchFeatures {
    let r = crate::geometry3d::rotation_from_yaw(b.yaw);
    let t = b.translation_vec();
    let half = Vector3::new(b.dims[0], b.dims[1], b.dims[2]) * 0.5;
    let mut faces: Vec<(Vec<[f64; 2]>, f64)> = Vec::new();
    for &(axis, sign, shade) in &FACE_SHADES {
        let mut normal = Vector3::zeros();
        normal[axis] = sign;
        let centre = r * normal.component_mul(&half) + t;
        if (r * normal).dot(&centre) >= 0.0 {
            continue;
        }
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut quad = Vec::with_capacity(4);
        for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)] {
            let mut local = normal.component_mul(&half);
            local[a1] = s1 * half[a1];
            local[a2] = s2 * half[a2];
            let p = r * local + t;
            if p.z <= 1e-6 {
                quad.clear();
                break;
            }
            quad.push([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy]);
        }
        if quad.len() == 4 {
            faces.push((quad, shade));
        }
    }
    let mut features = Vec::with_capacity(PATCH_FEATURES);
    let (w, h) = (window.width(), window.height());
    for row in 0..PATCH_SIZE {
        for col in 0..PATCH_SIZE {
            let u = window.x_min + (col as f64 + 0.5) / PATCH_SIZE as f64 * w;
            let v = window.y_min + (row as f64 + 0.5) / PATCH_SIZE as f64 * h;
            let shade = faces
                .iter()
                .find(|(quad, _)| inside_convex(quad, [u, v]))
                .map_or(0.0, |(_, s)| *s);
            features.push(shade);
        }
    }
    let (img_w, img_h) = (
        k.width.unwrap_or(2.0 * k.cx),
        k.height.unwrap_or(2.0 * k.cy),
    );
    let (cu, _) = window.center();
    features.push(w / (w + h));
    features.push((w * h / (img_w * img_h)).clamp(0.0, 1.0));
    features.push((cu / img_w).clamp(0.0, 1.0));
    PatchFeatures(features)
}

/// Point-in-polygon for a convex quad given in either winding.
fn inside_convex(quad: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..quad.len() {
        let (a, b) = (quad[i], quad[(i + 1) % quad.len()]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

pub const PRESETS: [&str; 6] = ["platoon-3", "platoon-8", "cut-in", "lane-change", "merge", "sparse"];

fn cv(id: u64, x0: f64, y0: f64, vx: f64, vy: f64) -> VehicleScript {
    VehicleScript {
        id,
        x0,
        y0,
        dims: CAR_DIMS,
        motion: Motion::ConstantVelocity { vx, vy },
    }
}

fn lane_change(id: u64, x0: f64, y0: f64, vy: f64, start_s: f64, duration_s: f64, offset: f64) -> VehicleScript {
    VehicleScript {
        id,
        x0,
        y0,
        dims: CAR_DIMS,
        motion: Motion::LaneChange {
            vy,
            start_s,
            duration_s,
            offset,
        },
    }
}

fn scenario(name: &str, vehicles: Vec<VehicleScript>) -> Scenario {
    Scenario {
        name: name.to_string(),
        duration_s: 20.0,
        dt: default_dt(),
        ego_speed: default_ego_speed(),
        camera_height: default_camera_height(),
        camera: default_camera(),
        jitter: Jitter::default(),
        vehicles,
    }
}

/// Named scenario from the built-in library.
pub fn preset(name: &str) -> Result<Scenario> {
    let vehicles = match name {
        "platoon-3" => vec![cv(0, 0.0, 12.0, 0.0, 0.3), cv(1, 0.0, 24.0, 0.0, 0.0), cv(2, 0.0, 36.0, 0.0, -0.3)],
        "platoon-8" => vec![
            cv(0, 0.0, 12.0, 0.0, 0.2),
            cv(1, 0.0, 24.0, 0.0, 0.0),
            cv(2, 0.0, 36.0, 0.0, -0.2),
            cv(3, 3.5, 10.0, 0.0, 0.6),
            cv(4, 3.5, 22.0, 0.0, 0.5),
            cv(5, 3.5, 34.0, 0.0, 0.4),
            cv(6, -3.5, 16.0, 0.0, -0.3),
            cv(7, -3.5, 28.0, 0.0, -0.4),
        ],
        "cut-in" => vec![
            lane_change(0, 3.5, 14.0, 0.4, 5.0, 4.0, -3.5),
            cv(1, 0.0, 34.0, 0.0, 0.0),
            cv(2, 3.5, 30.0, 0.0, 0.2),
        ],
        "lane-change" => vec![
            lane_change(0, 0.0, 20.0, 0.3, 6.0, 4.0, 3.5),
            cv(1, 0.0, 36.0, 0.0, -0.2),
            cv(2, 3.5, 8.0, 0.0, 0.2),
        ],
        "merge" => vec![
            VehicleScript {
                id: 0,
                x0: 7.0,
                y0: 12.0,
                dims: CAR_DIMS,
                motion: Motion::ConstantAcceleration {
                    vx: 0.0,
                    vy: -1.0,
                    ax: 0.0,
                    ay: 0.2,
                },
            },
            lane_change(1, 7.0, 30.0, 0.0, 4.0, 5.0, -3.5),
            cv(2, 3.5, 20.0, 0.0, 0.1),
        ],
        "sparse" => vec![cv(0, -3.5, 25.0, 0.0, 0.5), cv(1, 3.5, 45.0, 0.0, -0.5)],
        other => return Err(SynthError::UnknownPreset(other.to_string())),
    };
    Ok(scenario(name, vehicles))
}

/// Kinds of randomised scenario drawn by [`random_scenario`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Platoon,
    LaneChange,
}

/// Randomised scenario with three lanes and 3–6 vehicles. Lane-change
/// scenarios move one or two vehicles to an adjacent lane.
pub fn random_scenario(kind: ScenarioKind, rng: &mut impl Rng) -> Scenario {
    const LANES: [f64; 3] = [-3.5, 0.0, 3.5];
    let count = rng.gen_range(3..=6);
    let mut vehicles = Vec::with_capacity(count);
    let mut lane_y = [8.0 + rng.gen_range(0.0..6.0); 3];
    for lane_y in lane_y.iter_mut().skip(1) {
        *lane_y = 8.0 + rng.gen_range(0.0..6.0);
    }
    let changers = match kind {
        ScenarioKind::Platoon => 0,
        ScenarioKind::LaneChange => rng.gen_range(1..=2),
    };
    for id in 0..count as u64 {
        let lane = rng.gen_range(0..3);
        let y0 = lane_y[lane];
        lane_y[lane] += rng.gen_range(14.0..22.0);
        // Same-lane speeds drift within a small band so gaps stay open.
        let vy = rng.gen_range(-0.3..0.3);
        let script = if (id as usize) < changers {
            let dir = if lane == 0 {
                1.0
            } else if lane == 2 {
                -1.0
            } else if rng.gen_bool(0.5) {
                1.0
            } else {
                -1.0
            };
            lane_change(
                id,
                LANES[lane],
                y0,
                vy,
                rng.gen_range(2.0..14.0),
                rng.gen_range(3.0..5.0),
                3.5 * dir,
            )
        } else {
            cv(id, LANES[lane], y0, rng.gen_range(-0.05..0.05), vy)
        };
        vehicles.push(script);
    }
    let name = match kind {
        ScenarioKind::Platoon => "random-platoon",
        ScenarioKind::LaneChange => "random-lane-change",
    };
    scenario(name, vehicles)
}

/// Concatenates randomised scenarios of the given kinds, cycling through
/// them, until `scenarios` of them are generated without collision.
pub fn mixed_dataset(kinds: &[ScenarioKind], scenarios: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Option<Dataset> = None;
    let mut made = 0;
    while made < scenarios {
        let kind = kinds[made % kinds.len()];
        let s = random_scenario(kind, &mut rng);
        let Ok(data) = generate(&s, rng.gen()) else {
            continue;
        };
        match out.as_mut() {
            Some(d) => d.append(data),
            None => out = Some(data),
        }
        made += 1;
    }
    out.expect("at least one scenario")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(vehicles: Vec<VehicleScript>) -> Scenario {
        let mut s = scenario("test", vehicles);
        s.jitter = Jitter {
            position_m: 0.0,
            speed_mps: 0.0,
        };
        s
    }

    #[test]
    fn constant_velocity_advances_sixty_meters() {
        let mut s = still(vec![cv(0, 0.0, 10.0, 0.0, 20.0)]);
        s.duration_s = 3.0;
        let d = generate(&s, 0).unwrap();
        let (first, last) = (&d.frames[0].vehicles[0], &d.frames.last().unwrap().vehicles[0]);
        assert!((last.position[1] - first.position[1] - 60.0).abs() < 1e-9);
    }

    #[test]
    fn lane_change_ends_exactly_at_offset() {
        let mut s = still(vec![lane_change(0, 0.0, 20.0, 0.0, 1.0, 4.0, 3.5)]);
        s.duration_s = 6.0;
        let d = generate(&s, 0).unwrap();
        let end = d.frames.last().unwrap().vehicles[0].position[0];
        assert!((end - 3.5).abs() < 1e-9);
        assert_eq!(d.frames[0].vehicles[0].position[0], 0.0);
    }

    #[test]
    fn collision_is_an_error() {
        let s = still(vec![cv(0, 0.0, 10.0, 0.0, 0.0), cv(1, 0.0, 14.0, 0.0, -1.0)]);
        assert!(matches!(generate(&s, 0), Err(SynthError::Collision { .. })));
    }

    #[test]
    fn presets_generate_and_differ_by_seed() {
        for name in PRESETS {
            let s = preset(name).unwrap();
            let a = generate(&s, 1).unwrap();
            assert_eq!(a, generate(&s, 1).unwrap(), "{name}");
            assert_ne!(a, generate(&s, 2).unwrap(), "{name}");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn box_on_axis_renders_centred() {
        let frame = FrameTruth {
            frame: 0,
            vehicles: vec![VehicleTruth {
                track_id: 0,
                position: [0.0, 20.0],
                box3d: Box3D::new([0.0, 0.0, 20.0], CAR_DIMS, 0.0).unwrap(),
            }],
        };
        let k = default_camera();
        let det = &render_frame(&frame, &k, RenderNoise::default(), &mut ChaCha8Rng::seed_from_u64(0))[0];
        let (u, v) = det.box2d.center();
        assert!((u - 960.0).abs() < 1e-9 && (v - 540.0).abs() < 1e-9);
        assert_eq!(det.patch.0.len(), PATCH_FEATURES);
        // Head-on view of the back face fills the patch with its shade.
        assert!(det.patch.pixels().iter().all(|&p| p == 0.35));
    }

    #[test]
    fn doubling_depth_halves_width() {
        let k = default_camera();
        let near = Box3D::new([2.0, 0.7, 15.0], CAR_DIMS, 0.2).unwrap().project_hull(&k).unwrap();
        let far = Box3D::new([4.0, 1.4, 30.0], CAR_DIMS.map(|d| d * 2.0), 0.2)
            .unwrap()
            .project_hull(&k)
            .unwrap();
        assert!((far.width() / near.width() - 1.0).abs() < 0.01);
        // A thin plate isolates the perspective factor from the box's own depth.
        let plate = [1.8, 1.6, 0.01];
        let a = Box3D::new([0.0, 0.7, 20.0], plate, 0.0).unwrap().project_hull(&k).unwrap();
        let b = Box3D::new([0.0, 0.7, 40.0], plate, 0.0).unwrap().project_hull(&k).unwrap();
        assert!((b.width() / a.width() - 0.5).abs() < 0.005);
    }
}
