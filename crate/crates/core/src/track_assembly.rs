//! Per-frame positions → gap-free tracks → fixed-size past/future windows,
//! interaction graphs and coordinate scaling.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest run of missing frames bridged by linear interpolation.
pub const MAX_INTERPOLATED_GAP: i64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("duplicate observation for track {track_id} at frame {frame}")]
    Duplicate { frame: i64, track_id: u64 },
    #[error("no window for track {track_id} ending at frame {frame}: {reason}")]
    NoWindow {
        track_id: u64,
        frame: i64,
        reason: &'static str,
    },
    #[error("timestep {t} out of range for a window of {len} steps")]
    Timestep { t: usize, len: usize },
}

/// One recovered ego-frame position: `x` lateral (right positive), `y`
/// longitudinal (forward positive), meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: i64,
    pub track_id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
}

/// A run of consecutive frames for one track id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    /// Segment counter; a track split at a long gap continues as segment 1, 2, ...
    pub segment: u32,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub dt: f64,
    tracks: Vec<Track>,
    index: HashMap<(u64, i64), [f64; 2]>,
    by_frame: BTreeMap<i64, Vec<u64>>,
}

impl TrackSet {
    fn from_tracks(dt: f64, tracks: Vec<Track>) -> Self {
        let mut index = HashMap::new();
        let mut by_frame: BTreeMap<i64, Vec<u64>> = BTreeMap::new();
        for t in &tracks {
            for s in &t.samples {
                index.insert((t.id, s.frame), [s.x, s.y]);
                by_frame.entry(s.frame).or_default().push(t.id);
            }
        }
        by_frame.values_mut().for_each(|ids| ids.sort_unstable());
        Self {
            dt,
            tracks,
            index,
            by_frame,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Distinct track ids in ascending order.
    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.tracks.iter().map(|t| t.id).collect();
        ids.dedup();
        ids
    }

    pub fn position(&self, id: u64, frame: i64) -> Option<[f64; 2]> {
        self.index.get(&(id, frame)).copied()
    }

    /// Ids present at `frame`, ascending.
    pub fn ids_at(&self, frame: i64) -> &[u64] {
        self.by_frame.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn frames(&self) -> impl Iterator<Item = i64> + '_ {
        self.by_frame.keys().copied()
    }

    /// Flattens back to observations, ordered by frame then id.
    pub fn observations(&self) -> Vec<Observation> {
        let mut out: Vec<Observation> = self
            .tracks
            .iter()
            .flat_map(|t| {
                t.samples.iter().map(move |s| Observation {
                    frame: s.frame,
                    track_id: t.id,
                    x: s.x,
                    y: s.y,
                })
            })
            .collect();
        out.sort_by_key(|o| (o.frame, o.track_id));
        out
    }
}

/// Groups observations into tracks. Gaps of up to [`MAX_INTERPOLATED_GAP`]
/// frames are filled by linear interpolation; longer gaps split the track.
pub fn assemble(observations: &[Observation], dt: f64) -> Result<TrackSet, TrackError> {
    let mut grouped: BTreeMap<u64, Vec<Sample>> = BTreeMap::new();
    for o in observations {
        grouped.entry(o.track_id).or_default().push(Sample {
            frame: o.frame,
            x: o.x,
            y: o.y,
        });
    }
    let mut tracks = Vec::new();
    for (id, mut samples) in grouped {
        samples.sort_by_key(|s| s.frame);
        if let Some(w) = samples.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(TrackError::Duplicate {
                frame: w[0].frame,
                track_id: id,
            });
        }
        let mut segment = 0;
        let mut current = vec![samples[0]];
        for pair in samples.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let gap = b.frame - a.frame - 1;
            if gap > MAX_INTERPOLATED_GAP {
                tracks.push(Track {
                    id,
                    segment,
                    samples: std::mem::take(&mut current),
                });
                segment += 1;
            } else {
                for k in 1..=gap {
                    let s = k as f64 / (gap + 1) as f64;
                    current.push(Sample {
                        frame: a.frame + k,
                        x: a.x + s * (b.x - a.x),
                        y: a.y + s * (b.y - a.y),
                    });
                }
            }
            current.push(b);
        }
        tracks.push(Track {
            id,
            segment,
            samples: current,
        });
    }
    Ok(TrackSet::from_tracks(dt, tracks))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Observed steps (3 s at 0.5 s).
    pub t_steps: usize,
    /// Predicted steps (5 s at 0.5 s).
    pub f_steps: usize,
    /// Neighborhood radius around the target at the last observed frame, meters.
    pub radius: f64,
    /// Cap on vehicles per window, target included; nearest kept first.
    pub max_neighbors: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_steps: 6,
            f_steps: 10,
            radius: 30.0,
            max_neighbors: 16,
        }
    }
}

/// Past and future positions of a target and its neighbors.
///
/// `positions` and `present` are indexed `[step][vehicle]` over
/// `t_steps + f_steps` steps; vehicle 0 is the target. Absent entries are
/// zero-filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub end_frame: i64,
    pub ids: Vec<u64>,
    pub t_steps: usize,
    pub f_steps: usize,
    pub positions: Vec<[f64; 2]>,
    pub present: Vec<bool>,
}

impl TrajectoryWindow {
    pub fn n_vehicles(&self) -> usize {
        self.ids.len()
    }

    pub fn steps(&self) -> usize {
        self.t_steps + self.f_steps
    }

    pub fn at(&self, step: usize, vehicle: usize) -> [f64; 2] {
        self.positions[step * self.ids.len() + vehicle]
    }

    pub fn is_present(&self, step: usize, vehicle: usize) -> bool {
        self.present[step * self.ids.len() + vehicle]
    }

    pub fn past(&self, t: usize, vehicle: usize) -> Option<[f64; 2]> {
        (t < self.t_steps && self.is_present(t, vehicle)).then(|| self.at(t, vehicle))
    }

    pub fn future(&self, s: usize, vehicle: usize) -> Option<[f64; 2]> {
        let step = self.t_steps + s;
        (s < self.f_steps && self.is_present(step, vehicle)).then(|| self.at(step, vehicle))
    }

    /// Same window with positions replaced from another source (e.g. ground
    /// truth for the same ids and frames). Missing entries become absent.
    pub fn with_positions_from(&self, tracks: &TrackSet) -> TrajectoryWindow {
        let n = self.ids.len();
        let first = self.end_frame - self.t_steps as i64 + 1;
        let mut out = self.clone();
        for step in 0..self.steps() {
            for (v, &id) in self.ids.iter().enumerate() {
                let i = step * n + v;
                match tracks.position(id, first + step as i64) {
                    Some(p) if self.present[i] => out.positions[i] = p,
                    _ => {
                        out.positions[i] = [0.0, 0.0];
                        out.present[i] = false;
                    }
                }
            }
        }
        out
    }
}

/// Builds the window whose last observed frame is `end_frame`.
pub fn window(
    tracks: &TrackSet,
    target_id: u64,
    end_frame: i64,
    cfg: &WindowConfig,
) -> Result<TrajectoryWindow, TrackError> {
    let no_window = |reason| TrackError::NoWindow {
        track_id: target_id,
        frame: end_frame,
        reason,
    };
    if cfg.t_steps == 0 {
        return Err(no_window("window needs at least one observed step"));
    }
    let first = end_frame - cfg.t_steps as i64 + 1;
    if (first..=end_frame).any(|f| tracks.position(target_id, f).is_none()) {
        return Err(no_window("target not present through the observed steps"));
    }
    let anchor = tracks.position(target_id, end_frame).expect("checked above");
    let mut neighbors: Vec<(f64, u64)> = tracks
        .ids_at(end_frame)
        .iter()
        .filter(|&&id| id != target_id)
        .filter_map(|&id| {
            let p = tracks.position(id, end_frame)?;
            let d = (p[0] - anchor[0]).hypot(p[1] - anchor[1]);
            (d <= cfg.radius).then_some((d, id))
        })
        .collect();
    neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut ids = vec![target_id];
    ids.extend(
        neighbors
            .iter()
            .take(cfg.max_neighbors.saturating_sub(1))
            .map(|&(_, id)| id),
    );
    let steps = cfg.t_steps + cfg.f_steps;
    let mut positions = Vec::with_capacity(steps * ids.len());
    let mut present = Vec::with_capacity(steps * ids.len());
    for step in 0..steps {
        for &id in &ids {
            match tracks.position(id, first + step as i64) {
                Some(p) => {
                    positions.push(p);
                    present.push(true);
                }
                None => {
                    positions.push([0.0, 0.0]);
                    present.push(false);
                }
            }
        }
    }
    Ok(TrajectoryWindow {
        end_frame,
        ids,
        t_steps: cfg.t_steps,
        f_steps: cfg.f_steps,
        positions,
        present,
    })
}

/// Every window whose target is present over all observed and future steps,
/// taking end frames every `stride` frames per track.
pub fn extract_windows(tracks: &TrackSet, cfg: &WindowConfig, stride: usize) -> Vec<TrajectoryWindow> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for track in tracks.tracks() {
        let n = track.samples.len();
        let span = cfg.t_steps + cfg.f_steps;
        if n < span || cfg.t_steps == 0 {
            continue;
        }
        for start in (0..=n - span).step_by(stride) {
            let end_frame = track.samples[start + cfg.t_steps - 1].frame;
            if let Ok(w) = window(tracks, track.id, end_frame, cfg) {
                out.push(w);
            }
        }
    }
    out
}

/// Binary adjacency at one timestep. Absent vehicles connect only to
/// themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    pub n: usize,
    pub adjacency: Vec<bool>,
}

impl InteractionGraph {
    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn identity(n: usize) -> Self {
        let mut adjacency = vec![false; n * n];
        (0..n).for_each(|i| adjacency[i * n + i] = true);
        Self { n, adjacency }
    }

    /// Edge iff both vehicles are present and within `d_near` meters.
    pub fn from_positions(positions: &[[f64; 2]], present: &[bool], d_near: f64) -> Self {
        let n = positions.len();
        let mut g = Self::identity(n);
        for i in 0..n {
            for j in i + 1..n {
                if !(present[i] && present[j]) {
                    continue;
                }
                let (a, b) = (positions[i], positions[j]);
                if (a[0] - b[0]).hypot(a[1] - b[1]) <= d_near {
                    g.adjacency[i * n + j] = true;
                    g.adjacency[j * n + i] = true;
                }
            }
        }
        g
    }
}

/// Interaction graph of `window` at step `t` (past or future).
pub fn build_graph(w: &TrajectoryWindow, t: usize, d_near: f64) -> Result<InteractionGraph, TrackError> {
    if t >= w.steps() {
        return Err(TrackError::Timestep { t, len: w.steps() });
    }
    let n = w.n_vehicles();
    Ok(InteractionGraph::from_positions(
        &w.positions[t * n..(t + 1) * n],
        &w.present[t * n..(t + 1) * n],
        d_near,
    ))
}

/// Graphs for the observed steps of `w`.
pub fn past_graphs(w: &TrajectoryWindow, d_near: f64) -> Vec<InteractionGraph> {
    (0..w.t_steps)
        .map(|t| build_graph(w, t, d_near).expect("t < t_steps"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisScale {
    pub offset: f64,
    pub gain: f64,
}

/// Per-axis affine map from meters to `[−1, 1]` over a fitted corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub x: AxisScale,
    pub y: AxisScale,
}

impl ScaleSpec {
    /// Fits min/max per axis. A constant axis gets unit gain.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a [f64; 2]>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = |a: usize| {
            if !lo[a].is_finite() || hi[a] <= lo[a] {
                let offset = if lo[a].is_finite() { lo[a] } else { 0.0 };
                AxisScale { offset, gain: 1.0 }
            } else {
                AxisScale {
                    offset: 0.5 * (lo[a] + hi[a]),
                    gain: 2.0 / (hi[a] - lo[a]),
                }
            }
        };
        Self { x: axis(0), y: axis(1) }
    }

    /// Fits on the present positions of every window.
    pub fn fit_windows(windows: &[TrajectoryWindow]) -> Self {
        Self::fit(windows.iter().flat_map(|w| {
            w.positions
                .iter()
                .zip(&w.present)
                .filter(|(_, &p)| p)
                .map(|(pos, _)| pos)
        }))
    }

    /// Same offsets, both axes at the smaller gain, so scaled distances are
    /// proportional to meters and the wider axis spans `[−1, 1]`.
    pub fn isotropic(self) -> Self {
        let gain = self.x.gain.min(self.y.gain);
        Self {
            x: AxisScale { gain, ..self.x },
            y: AxisScale { gain, ..self.y },
        }
    }

    pub fn scale(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.x.offset) * self.x.gain,
            (p[1] - self.y.offset) * self.y.gain,
        ]
    }

    pub fn unscale(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] / self.x.gain + self.x.offset,
            p[1] / self.y.gain + self.y.offset,
        ]
    }
}
