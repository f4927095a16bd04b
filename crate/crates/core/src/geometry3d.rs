//! 3D box recovery from a 2D detection, known dimensions and yaw.
//!
//! Camera frame: x right, y down, z forward. A box's local axes coincide with
//! the camera axes at zero yaw, so `dims = (d_x, d_y, d_z)` are the lateral,
//! vertical and longitudinal extents. Yaw rotates about the vertical (y) axis;
//! positive yaw turns the box's +z axis toward +x.
//!
//! Each of the four 2D box sides is touched by one projected vertex. Given
//! the vertex-to-side assignment (a [`VertexConfiguration`]), every side gives
//! one equation that is linear in the translation once multiplied through by
//! depth, so the translation is a 4×3 linear least-squares problem.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix4x3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum camera-frame depth accepted for a projected point, in meters.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("box dimensions must be positive, got {0:?}")]
    NonPositiveDimension([f64; 3]),
    #[error("invalid 2D box {0:?}: need x_min < x_max and y_min < y_max")]
    InvalidBox2D([f64; 4]),
    #[error("point at depth {0} is behind the camera")]
    BehindCamera(f64),
    #[error("degenerate geometry: constraint system has rank < 3")]
    Degenerate,
    #[error("no configuration yields a valid box in front of the camera")]
    NoSolution,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// A 2D box closer than this to the image border counts as truncated.
pub const TRUNCATION_MARGIN_PX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image extent in pixels, when known; used for truncation checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width: None,
            height: None,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn with_image_size(mut self, width: f64, height: f64) -> Self {
        self.width = Some(width);
        self.height = Some(height);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0 && self.fy > 0.0 {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics {
                fx: self.fx,
                fy: self.fy,
            })
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// True when `b` lies inside the image with at least `margin` pixels to
    /// spare. Always true when the image size is unknown.
    pub fn contains(&self, b: &Box2D, margin: f64) -> bool {
        match (self.width, self.height) {
            (Some(w), Some(h)) => {
                b.x_min >= margin && b.y_min >= margin && b.x_max <= w - margin && b.y_max <= h - margin
            }
            _ => true,
        }
    }
}

/// Upright 3D box: translation in the camera frame, extents, and yaw.
/// Roll and pitch are zero by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub translation: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(translation: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        check_dims(&dims)?;
        Ok(Self {
            translation,
            dims,
            yaw,
        })
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    /// Camera-frame coordinates of the eight vertices, in [`box_vertices`] order.
    pub fn world_vertices(&self) -> Result<[Vector3<f64>; 8]> {
        let r = rotation_from_yaw(self.yaw);
        let t = self.translation_vec();
        Ok(box_vertices(&self.dims)?.map(|v| r * v + t))
    }

    /// Axis-aligned hull of the projected vertices.
    pub fn project_hull(&self, k: &CameraIntrinsics) -> Result<Box2D> {
        let r = rotation_from_yaw(self.yaw);
        let t = self.translation_vec();
        let mut hull = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for v in box_vertices(&self.dims)? {
            let p = project(k, &r, &t, &v)?;
            hull[0] = hull[0].min(p.x);
            hull[1] = hull[1].min(p.y);
            hull[2] = hull[2].max(p.x);
            hull[3] = hull[3].max(p.y);
        }
        Ok(Box2D {
            x_min: hull[0],
            y_min: hull[1],
            x_max: hull[2],
            y_max: hull[3],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox2D(self.sides()))
        }
    }

    /// `[x_min, y_min, x_max, y_max]`.
    pub fn sides(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Sum of absolute side differences.
    pub fn l1_distance(&self, other: &Box2D) -> f64 {
        self.sides()
            .iter()
            .zip(other.sides())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Largest absolute side difference.
    pub fn max_side_error(&self, other: &Box2D) -> f64 {
        self.sides()
            .iter()
            .zip(other.sides())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_dims(d: &[f64; 3]) -> Result<()> {
    if d.iter().all(|&v| v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::NonPositiveDimension(*d))
    }
}

/// Rotation about the camera's vertical axis.
pub fn rotation_from_yaw(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// The eight corners `(±d_x/2, ±d_y/2, ±d_z/2)` of a box centred at the
/// origin. Index bits (x, y, z) from most to least significant select the
/// negative sign, so vertex 0 is `(+,+,+)` and vertex 7 is `(−,−,−)`.
pub fn box_vertices(d: &[f64; 3]) -> Result<[Vector3<f64>; 8]> {
    check_dims(d)?;
    let half = Vector3::new(d[0], d[1], d[2]) * 0.5;
    Ok(std::array::from_fn(|i| {
        let sign = |bit: usize| if i >> bit & 1 == 1 { -1.0 } else { 1.0 };
        Vector3::new(sign(2) * half.x, sign(1) * half.y, sign(0) * half.z)
    }))
}

/// Pinhole projection `K [R | T] X` followed by perspective division.
pub fn project(
    k: &CameraIntrinsics,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>> {
    let p = r * x + t;
    if p.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Global yaw from the appearance (local) angle and the viewing-ray angle.
pub fn local_to_global_yaw(theta_local: f64, theta_ray: f64) -> f64 {
    wrap_angle(theta_ray + theta_local)
}

/// Horizontal angle of the back-projected ray through pixel column `u`.
pub fn ray_angle(k: &CameraIntrinsics, u: f64) -> f64 {
    (u - k.cx).atan2(k.fx)
}

/// Vertex indices touching the left, right, top and bottom 2D box sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VertexConfiguration {
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

impl VertexConfiguration {
    pub fn as_array(&self) -> [usize; 4] {
        [self.left, self.right, self.top, self.bottom]
    }
}

/// Footprint corner `(x sign bit, z sign bit)` lifted to a vertex index.
fn corner_vertex(corner: usize, upper: bool) -> usize {
    ((corner >> 1) << 2) | (usize::from(upper) << 1) | (corner & 1)
}

/// Footprint corner of a vertex (drops the vertical bit).
pub fn vertex_corner(vertex: usize) -> usize {
    ((vertex >> 2) << 1) | (vertex & 1)
}

/// Whether a vertex lies on the upper face (negative y in the y-down frame).
pub fn is_upper_vertex(vertex: usize) -> bool {
    vertex >> 1 & 1 == 1
}

/// Ordered (left, right) footprint-corner pairs that can bound a rectangle's
/// silhouette. Corners: 0 = (+x,+z), 1 = (+x,−z), 2 = (−x,+z), 3 = (−x,−z).
/// A single visible face yields its two ends in a fixed order; two visible
/// faces yield a diagonal pair in either order.
const SILHOUETTE_PAIRS: [(usize, usize); 8] = [
    (1, 0),
    (2, 3),
    (0, 2),
    (3, 1),
    (0, 3),
    (3, 0),
    (1, 2),
    (2, 1),
];

/// The 64 admissible vertex-to-side assignments for an upright box on a flat
/// road seen from above its bottom face.
///
/// The bottom side is the lower vertex of the depth-nearest footprint corner;
/// the top side is the upper vertex of either that corner or the opposite one
/// (roof above or below the camera); left/right are one of the eight
/// silhouette pairs. Left/right use lower vertices: the vertical sign does not
/// enter a horizontal constraint.
pub fn enumerate_configurations() -> &'static [VertexConfiguration] {
    static CONFIGS: OnceLock<Vec<VertexConfiguration>> = OnceLock::new();
    CONFIGS.get_or_init(|| {
        let mut out = Vec::with_capacity(64);
        for nearest in 0..4 {
            for top_corner in [nearest, nearest ^ 3] {
                for &(l, r) in &SILHOUETTE_PAIRS {
                    out.push(VertexConfiguration {
                        left: corner_vertex(l, false),
                        right: corner_vertex(r, false),
                        top: corner_vertex(top_corner, true),
                        bottom: corner_vertex(nearest, false),
                    });
                }
            }
        }
        out
    })
}

/// Options for [`solve_translation`] and [`recover_box3d`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveOptions {
    /// Refine the linear solution with Gauss–Newton on pixel residuals.
    pub refine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationSolution {
    pub translation: Vector3<f64>,
    /// RMS pixel error of the four assigned vertices against their sides.
    pub residual: f64,
}

fn side_residuals(
    k: &CameraIntrinsics,
    offsets: &[Vector3<f64>; 4],
    box2d: &Box2D,
    t: &Vector3<f64>,
) -> Result<Vector4<f64>> {
    let targets = [box2d.x_min, box2d.x_max, box2d.y_min, box2d.y_max];
    let mut r = Vector4::zeros();
    for side in 0..4 {
        let p = offsets[side] + t;
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(p.z));
        }
        let proj = if side < 2 {
            k.fx * p.x / p.z + k.cx
        } else {
            k.fy * p.y / p.z + k.cy
        };
        r[side] = proj - targets[side];
    }
    Ok(r)
}

fn gauss_newton(
    k: &CameraIntrinsics,
    offsets: &[Vector3<f64>; 4],
    box2d: &Box2D,
    start: Vector3<f64>,
) -> Result<Vector3<f64>> {
    let mut t = start;
    let mut cost = side_residuals(k, offsets, box2d, &t)?.norm_squared();
    for _ in 0..20 {
        let r = side_residuals(k, offsets, box2d, &t)?;
        let mut jac = Matrix4x3::zeros();
        for side in 0..4 {
            let p = offsets[side] + t;
            let (f, num) = if side < 2 { (k.fx, p.x) } else { (k.fy, p.y) };
            let axis = if side < 2 { 0 } else { 1 };
            jac[(side, axis)] = f / p.z;
            jac[(side, 2)] = -f * num / (p.z * p.z);
        }
        let jtj = jac.transpose() * jac;
        let Some(step) = jtj.try_inverse().map(|inv| inv * jac.transpose() * r) else {
            break;
        };
        let candidate = t - step;
        match side_residuals(k, offsets, box2d, &candidate) {
            Ok(rc) if rc.norm_squared() < cost => {
                cost = rc.norm_squared();
                t = candidate;
                if step.norm() < 1e-12 {
                    break;
                }
            }
            _ => break,
        }
    }
    Ok(t)
}

/// Least-squares translation for one vertex configuration.
///
/// Each side constraint `pixel = f·(a + T)_axis / (a + T)_z + c` is multiplied
/// through by depth to give a linear equation in `T`.
pub fn solve_translation(
    k: &CameraIntrinsics,
    yaw: f64,
    d: &[f64; 3],
    box2d: &Box2D,
    config: &VertexConfiguration,
    options: SolveOptions,
) -> Result<TranslationSolution> {
    k.validate()?;
    box2d.validate()?;
    let verts = box_vertices(d)?;
    let rot = rotation_from_yaw(yaw);
    let offsets = config.as_array().map(|v| rot * verts[v]);
    let sides = [
        (box2d.x_min, 0usize),
        (box2d.x_max, 0),
        (box2d.y_min, 1),
        (box2d.y_max, 1),
    ];
    let mut a = Matrix4x3::zeros();
    let mut b = Vector4::zeros();
    for (row, (&(pixel, axis), off)) in sides.iter().zip(&offsets).enumerate() {
        let (f, c) = if axis == 0 { (k.fx, k.cx) } else { (k.fy, k.cy) };
        a[(row, axis)] = f;
        a[(row, 2)] = c - pixel;
        b[row] = (pixel - c) * off.z - f * off[axis];
    }
    let qr = a.qr();
    let r = qr.r();
    let diag = r.diagonal().abs();
    if !(diag.max() > 0.0) || diag.min() <= diag.max() * 1e-12 {
        return Err(GeometryError::Degenerate);
    }
    let mut t = r
        .solve_upper_triangular(&(qr.q().transpose() * b))
        .ok_or(GeometryError::Degenerate)?;
    for v in &verts {
        let z = (rot * v + t).z;
        if z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(z));
        }
    }
    if options.refine {
        t = gauss_newton(k, &offsets, box2d, t)?;
    }
    let residual = side_residuals(k, &offsets, box2d, &t)?.norm() / 2.0;
    Ok(TranslationSolution {
        translation: t,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    pub box3d: Box3D,
    /// Index into [`enumerate_configurations`].
    pub config_index: usize,
    /// RMS pixel residual of the chosen configuration's side constraints.
    pub residual: f64,
    /// Sum of absolute side differences between the input box and the hull
    /// of the re-projected 3D box.
    pub hull_error: f64,
}

/// Solves every configuration and keeps the one whose re-projected hull best
/// matches `box2d` (smallest summed absolute side error).
pub fn recover_box3d(
    k: &CameraIntrinsics,
    yaw: f64,
    d: &[f64; 3],
    box2d: &Box2D,
    options: SolveOptions,
) -> Result<Recovery> {
    check_dims(d)?;
    k.validate()?;
    box2d.validate()?;
    let mut best: Option<Recovery> = None;
    for (index, config) in enumerate_configurations().iter().enumerate() {
        let Ok(sol) = solve_translation(k, yaw, d, box2d, config, options) else {
            continue;
        };
        let candidate = Box3D {
            translation: sol.translation.into(),
            dims: *d,
            yaw,
        };
        let Ok(hull) = candidate.project_hull(k) else {
            continue;
        };
        let hull_error = hull.l1_distance(box2d);
        if best.is_none_or(|b| hull_error < b.hull_error) {
            best = Some(Recovery {
                box3d: candidate,
                config_index: index,
                residual: sol.residual,
                hull_error,
            });
        }
    }
    best.ok_or(GeometryError::NoSolution)
}

/// Signed area of a simple polygon (positive when counter-clockwise).
fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        * 0.5
}

/// Clips convex `subject` against convex counter-clockwise `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| {
            let d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let d2 = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
            let s = d1 / (d1 - d2);
            [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]
        };
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let (cur, next) = (input[j], input[(j + 1) % m]);
            match (inside(cur), inside(next)) {
                (true, true) => out.push(next),
                (true, false) => out.push(intersect(cur, next)),
                (false, true) => {
                    out.push(intersect(cur, next));
                    out.push(next);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Ground-plane (x, z) footprint, counter-clockwise.
fn footprint(b: &Box3D) -> Vec<[f64; 2]> {
    let r = rotation_from_yaw(b.yaw);
    let (hx, hz) = (0.5 * b.dims[0], 0.5 * b.dims[2]);
    let mut poly: Vec<[f64; 2]> = [(hx, hz), (-hx, hz), (-hx, -hz), (hx, -hz)]
        .iter()
        .map(|&(x, z)| {
            let p = r * Vector3::new(x, 0.0, z);
            [p.x + b.translation[0], p.z + b.translation[2]]
        })
        .collect();
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Volume IoU of two upright yawed boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter_poly = clip_convex(&footprint(a), &footprint(b));
    let area = if inter_poly.len() >= 3 {
        signed_area(&inter_poly).abs()
    } else {
        0.0
    };
    let (a_lo, a_hi) = (a.translation[1] - 0.5 * a.dims[1], a.translation[1] + 0.5 * a.dims[1]);
    let (b_lo, b_hi) = (b.translation[1] - 0.5 * b.dims[1], b.translation[1] + 0.5 * b.dims[1]);
    let overlap = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    let inter = area * overlap;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3x4, Rotation3, Unit};

    fn unit_k() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    fn dashcam() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0)
            .unwrap()
            .with_image_size(1920.0, 1080.0)
    }

    #[test]
    fn yaw_rotation_closed_forms() {
        assert_eq!(rotation_from_yaw(0.0), Matrix3::identity());
        let q = rotation_from_yaw(PI / 2.0);
        assert!((q * q.transpose() - Matrix3::identity()).abs().max() < 1e-12);
        assert!((q * Vector3::z() - Vector3::x()).norm() < 1e-12);
        assert!((q.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_rotation_matches_angle_axis() {
        for theta in [-2.9, -1.0, 0.3, 1.7, 3.1] {
            let axis = Unit::new_normalize(Vector3::y());
            let oracle = Rotation3::from_axis_angle(&axis, theta);
            let diff = rotation_from_yaw(theta) - oracle.matrix();
            assert!(diff.abs().max() < 1e-12);
        }
    }

    #[test]
    fn vertices_follow_sign_convention() {
        let v = box_vertices(&[2.0, 2.0, 2.0]).unwrap();
        for p in &v {
            assert!(p.iter().all(|c| c.abs() == 1.0));
        }
        let centroid: Vector3<f64> = v.iter().sum::<Vector3<f64>>() / 8.0;
        assert!(centroid.norm() < 1e-15);
        let v = box_vertices(&[4.5, 1.8, 1.6]).unwrap();
        assert_eq!(v[0], Vector3::new(2.25, 0.9, 0.8));
        assert_eq!(v[7], Vector3::new(-2.25, -0.9, -0.8));
        assert!(box_vertices(&[0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn projection_closed_forms() {
        let k = unit_k();
        let r = Matrix3::identity();
        let t = Vector3::zeros();
        assert_eq!(project(&k, &r, &t, &Vector3::new(0.0, 0.0, 5.0)).unwrap(), Vector2::new(0.0, 0.0));
        assert_eq!(project(&k, &r, &t, &Vector3::new(1.0, 0.0, 2.0)).unwrap(), Vector2::new(0.5, 0.0));
        assert!(matches!(
            project(&k, &r, &t, &Vector3::new(1.0, 0.0, -2.0)),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let k = dashcam();
        let r = rotation_from_yaw(0.7);
        let t = Vector3::new(1.5, 1.2, 18.0);
        let x = Vector3::new(0.9, -0.4, 2.1);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        rt.set_column(3, &t);
        let h = k.matrix() * rt * nalgebra::Vector4::new(x.x, x.y, x.z, 1.0);
        let p = project(&k, &r, &t, &x).unwrap();
        assert!((p.x - h.x / h.z).abs() < 1e-9 && (p.y - h.y / h.z).abs() < 1e-9);
    }

    #[test]
    fn yaw_wrapping() {
        assert!((local_to_global_yaw(0.3, 0.2) - 0.5).abs() < 1e-15);
        assert_eq!(local_to_global_yaw(PI, PI), 0.0);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
    }

    #[test]
    fn ray_angle_cases() {
        let k = dashcam();
        assert_eq!(ray_angle(&k, k.cx), 0.0);
        assert!((ray_angle(&k, k.cx + k.fx) - PI / 4.0).abs() < 1e-15);
        // The ray through (u, cy) back-projects to direction ((u-cx)/fx, 0, 1).
        let u = 1403.7;
        let dir = Vector3::new((u - k.cx) / k.fx, 0.0, 1.0);
        assert!((ray_angle(&k, u) - dir.x.atan2(dir.z)).abs() < 1e-15);
    }

    #[test]
    fn sixty_four_distinct_upright_configurations() {
        let configs = enumerate_configurations();
        assert_eq!(configs.len(), 64);
        let unique: std::collections::HashSet<_> = configs.iter().map(|c| c.as_array()).collect();
        assert_eq!(unique.len(), 64);
        for c in configs {
            assert!(is_upper_vertex(c.top), "{c:?}");
            assert!(!is_upper_vertex(c.bottom), "{c:?}");
            assert_ne!(vertex_corner(c.left), vertex_corner(c.right));
        }
    }

    #[test]
    fn noise_free_render_then_recover() {
        let k = dashcam();
        let truth = Box3D::new([1.0, 0.0, 20.0], [4.5, 1.8, 1.6], 0.2).unwrap();
        let b2 = truth.project_hull(&k).unwrap();
        let rec = recover_box3d(&k, truth.yaw, &truth.dims, &b2, SolveOptions::default()).unwrap();
        let err = (rec.box3d.translation_vec() - truth.translation_vec()).norm();
        assert!(err < 1e-6, "{err}");
        let true_t = truth.translation_vec();
        let cfg = enumerate_configurations()[rec.config_index];
        let sol = solve_translation(&k, truth.yaw, &truth.dims, &b2, &cfg, SolveOptions::default()).unwrap();
        assert!(sol.residual < 1e-9);
        assert!((sol.translation - true_t).norm() < 1e-6);
    }

    #[test]
    fn centered_box_has_zero_lateral_offset() {
        let k = dashcam();
        let truth = Box3D::new([0.0, 0.7, 25.0], [1.8, 1.5, 4.5], 0.0).unwrap();
        let b2 = truth.project_hull(&k).unwrap();
        let rec = recover_box3d(&k, 0.0, &truth.dims, &b2, SolveOptions::default()).unwrap();
        assert!(rec.box3d.translation[0].abs() < 1e-9);
    }

    #[test]
    fn refinement_does_not_move_exact_solution() {
        let k = dashcam();
        let truth = Box3D::new([-3.0, 1.0, 35.0], [1.9, 1.6, 4.7], -0.8).unwrap();
        let b2 = truth.project_hull(&k).unwrap();
        let rec = recover_box3d(&k, truth.yaw, &truth.dims, &b2, SolveOptions { refine: true }).unwrap();
        assert!((rec.box3d.translation_vec() - truth.translation_vec()).norm() < 1e-6);
    }

    #[test]
    fn refinement_lowers_pixel_residual_under_noise() {
        let k = dashcam();
        let truth = Box3D::new([2.0, 1.0, 30.0], [1.8, 1.5, 4.5], 0.5).unwrap();
        let mut b2 = truth.project_hull(&k).unwrap();
        b2.x_min += 1.5;
        b2.y_max -= 2.0;
        let linear = recover_box3d(&k, truth.yaw, &truth.dims, &b2, SolveOptions::default()).unwrap();
        let cfg = enumerate_configurations()[linear.config_index];
        let refined = solve_translation(&k, truth.yaw, &truth.dims, &b2, &cfg, SolveOptions { refine: true }).unwrap();
        assert!(refined.residual <= linear.residual + 1e-12);
    }

    #[test]
    fn flat_box_is_a_contract_error() {
        let k = dashcam();
        let b2 = Box2D::new(900.0, 500.0, 1000.0, 560.0).unwrap();
        assert_eq!(
            recover_box3d(&k, 0.0, &[0.0, 1.5, 4.0], &b2, SolveOptions::default()).unwrap_err(),
            GeometryError::NonPositiveDimension([0.0, 1.5, 4.0])
        );
    }

    #[test]
    fn iou_closed_forms() {
        let a = Box3D::new([0.0, 0.0, 10.0], [2.0, 2.0, 4.0], 0.3).unwrap();
        assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
        let far = Box3D::new([20.0, 0.0, 10.0], [4.0, 2.0, 4.0], 0.0).unwrap();
        assert_eq!(iou3d(&a, &far), 0.0);
        // Shift by half the extent along x: overlap 1/2 of each, IoU = 1/3.
        let b = Box3D::new([0.0, 0.0, 10.0], [2.0, 2.0, 4.0], 0.0).unwrap();
        let c = Box3D::new([1.0, 0.0, 10.0], [2.0, 2.0, 4.0], 0.0).unwrap();
        assert!((iou3d(&b, &c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_vertical_offset_only() {
        let b = Box3D::new([0.0, 0.0, 10.0], [2.0, 2.0, 4.0], 0.0).unwrap();
        let c = Box3D::new([0.0, 1.0, 10.0], [2.0, 2.0, 4.0], 0.0).unwrap();
        assert!((iou3d(&b, &c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn projected_configuration_is_always_enumerated() {
        use rand::{Rng, SeedableRng};
        let k = dashcam();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let configs = enumerate_configurations();
        let mut checked = 0;
        while checked < 2000 {
            let dims = [rng.gen_range(1.5..2.6), rng.gen_range(1.2..3.5), rng.gen_range(3.5..12.0)];
            let z = rng.gen_range(5.0..60.0);
            let x = rng.gen_range(-0.8..0.8) * z;
            let t = [x, 1.5 - dims[1] / 2.0, z];
            let b = Box3D::new(t, dims, rng.gen_range(-PI..PI)).unwrap();
            let Ok(hull) = b.project_hull(&k) else { continue };
            if !k.contains(&hull, 0.0) {
                continue;
            }
            let verts = box_vertices(&dims).unwrap();
            let r = rotation_from_yaw(b.yaw);
            let px: Vec<Vector2<f64>> = verts
                .iter()
                .map(|v| project(&k, &r, &b.translation_vec(), v).unwrap())
                .collect();
            let arg = |key: &dyn Fn(&Vector2<f64>) -> f64| {
                (0..8).min_by(|&i, &j| key(&px[i]).total_cmp(&key(&px[j]))).unwrap()
            };
            let left = arg(&|p| p.x);
            let right = arg(&|p| -p.x);
            let top = arg(&|p| p.y);
            let bottom = arg(&|p| -p.y);
            let found = configs.iter().any(|c| {
                vertex_corner(c.left) == vertex_corner(left)
                    && vertex_corner(c.right) == vertex_corner(right)
                    && c.top == top
                    && c.bottom == bottom
            });
            assert!(found, "box {b:?} realises {left} {right} {top} {bottom}");
            checked += 1;
        }
    }
}
