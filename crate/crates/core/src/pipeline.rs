//! From 2D detections to ego-frame trajectories: pose estimates, per-box
//! translation recovery, and track assembly of the recovered positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry3d::{
    local_to_global_yaw, ray_angle, recover_box3d, Box2D, Box3D, CameraIntrinsics, SolveOptions,
    TRUNCATION_MARGIN_PX,
};
use crate::pose_regressor::{oracle_estimate, NoiseSpec, PoseEstimate};
use crate::synth::{render, Dataset, RenderNoise, RenderedDetection};
use crate::track_assembly::{
    assemble, extract_windows, Observation, TrackError, TrackSet, TrajectoryWindow, WindowConfig,
};

/// One row of the detections file. Pose columns are optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: i64,
    pub track_id: u64,
    pub box2d: Box2D,
    pub pose: Option<PoseEstimate>,
}

impl Detection {
    pub fn from_rendered(r: &RenderedDetection, with_pose: bool) -> Self {
        Self {
            frame: r.frame,
            track_id: r.track_id,
            box2d: r.box2d,
            pose: with_pose.then_some(PoseEstimate {
                d: r.truth.dims,
                theta_local: r.theta_local,
                confidence: 1.0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvedDetection {
    pub frame: i64,
    pub track_id: u64,
    pub translation: Option<[f64; 3]>,
    pub config_index: Option<usize>,
    pub residual: Option<f64>,
    /// Why no translation was produced.
    pub flag: Option<String>,
}

impl SolvedDetection {
    fn flagged(d: &Detection, why: String) -> Self {
        Self {
            frame: d.frame,
            track_id: d.track_id,
            translation: None,
            config_index: None,
            residual: None,
            flag: Some(why),
        }
    }

    pub fn recovered_box(&self, pose: &PoseEstimate, k: &CameraIntrinsics, box2d: &Box2D) -> Option<Box3D> {
        let t = self.translation?;
        let yaw = local_to_global_yaw(pose.theta_local, ray_angle(k, box2d.center().0));
        Box3D::new(t, pose.d, yaw).ok()
    }
}

/// Recovers the 3D position of one detection. Truncated boxes and
/// unsolvable systems are flagged rather than failing the run.
pub fn solve_detection(k: &CameraIntrinsics, det: &Detection, pose: Option<&PoseEstimate>) -> SolvedDetection {
    let Some(pose) = pose.or(det.pose.as_ref()) else {
        return SolvedDetection::flagged(det, "no pose estimate".into());
    };
    if !k.contains(&det.box2d, TRUNCATION_MARGIN_PX) {
        return SolvedDetection::flagged(det, "truncated at image border".into());
    }
    let yaw = local_to_global_yaw(pose.theta_local, ray_angle(k, det.box2d.center().0));
    match recover_box3d(k, yaw, &pose.d, &det.box2d, SolveOptions::default()) {
        Ok(r) => SolvedDetection {
            frame: det.frame,
            track_id: det.track_id,
            translation: Some(r.box3d.translation),
            config_index: Some(r.config_index),
            residual: Some(r.residual),
            flag: None,
        },
        Err(e) => SolvedDetection::flagged(det, e.to_string()),
    }
}

/// Ego-frame observations (lateral = camera x, longitudinal = camera z)
/// of the solved rows.
pub fn observations(solved: &[SolvedDetection]) -> Vec<Observation> {
    solved
        .iter()
        .filter_map(|s| {
            let t = s.translation?;
            Some(Observation {
                frame: s.frame,
                track_id: s.track_id,
                x: t[0],
                y: t[2],
            })
        })
        .collect()
}

/// Output of the geometry stage over a rendered sequence.
#[derive(Debug, Clone)]
pub struct Recovered {
    pub tracks: TrackSet,
    pub solved: Vec<SolvedDetection>,
    /// (estimate, truth) for every solved detection.
    pub boxes: Vec<(Box3D, Box3D)>,
}

/// Runs the geometry stage with oracle poses perturbed by `noise`.
pub fn recover_with_oracle(
    rendered: &[RenderedDetection],
    k: &CameraIntrinsics,
    noise: NoiseSpec,
    seed: u64,
    dt: f64,
) -> Result<Recovered, TrackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut solved = Vec::with_capacity(rendered.len());
    let mut boxes = Vec::with_capacity(rendered.len());
    for r in rendered {
        let det = Detection::from_rendered(r, false);
        let pose = oracle_estimate(&r.truth, ray_angle(k, r.clean_box2d.center().0), noise, &mut rng);
        let s = solve_detection(k, &det, Some(&pose));
        if let Some(b) = s.recovered_box(&pose, k, &det.box2d) {
            boxes.push((b, r.truth));
        }
        solved.push(s);
    }
    let tracks = assemble(&observations(&solved), dt)?;
    Ok(Recovered { tracks, solved, boxes })
}

/// Geometry noise applied when recovering trajectories from a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeometryNoise {
    pub render: RenderNoise,
    pub pose: NoiseSpec,
}

/// Ground-truth windows and the same windows with positions recovered
/// through rendering and the geometry stage. Windows whose target was not
/// recovered at the last observed frame are dropped from both lists.
pub fn paired_windows(
    data: &Dataset,
    noise: GeometryNoise,
    cfg: &WindowConfig,
    stride: usize,
    seed: u64,
) -> Result<(Vec<TrajectoryWindow>, Vec<TrajectoryWindow>), TrackError> {
    let truth = assemble(&data.observations(), data.dt)?;
    let rendered = render(data, noise.render, seed);
    let recovered = recover_with_oracle(&rendered, &data.camera, noise.pose, seed, data.dt)?;
    Ok(pair_with(extract_windows(&truth, cfg, stride), &recovered.tracks))
}

/// Pairs each truth window with its positions taken from `recovered`,
/// dropping windows whose target is missing there at the last observed step.
pub fn pair_with(
    truths: Vec<TrajectoryWindow>,
    recovered: &TrackSet,
) -> (Vec<TrajectoryWindow>, Vec<TrajectoryWindow>) {
    let mut kept = Vec::with_capacity(truths.len());
    let mut inputs = Vec::with_capacity(truths.len());
    for w in truths {
        let r = w.with_positions_from(recovered);
        if r.is_present(w.t_steps - 1, 0) {
            kept.push(w);
            inputs.push(r);
        }
    }
    (kept, inputs)
}
