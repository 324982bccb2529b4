//! Windshield projection geometry.
//!
//! Reference frame: X right, Y down, Z forward (right-handed), metres. The
//! windshield is a rectangle hinged on its lower edge, which runs along +X
//! from the mount corner; `tilt_rad` is the angle between the horizontal
//! plane and the glass, measured so that a tilt below 90° leans the top edge
//! back toward the driver.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindshieldGeometry {
    pub width_m: f64,
    pub height_m: f64,
    pub tilt_rad: f64,
    /// Lower-left corner of the glass.
    pub mount: Vec3,
}

impl WindshieldGeometry {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width_m > 0.0
            && self.height_m > 0.0
            && self.tilt_rad > 0.0
            && self.tilt_rad < std::f64::consts::PI
            && self.mount.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid windshield geometry {self:?}")))
        }
    }

    /// Unit vector along the lower edge.
    pub fn edge_axis(&self) -> Vec3 {
        [1.0, 0.0, 0.0]
    }

    /// Unit vector from the lower edge toward the upper edge, in the glass.
    pub fn rise_axis(&self) -> Vec3 {
        [0.0, -self.tilt_rad.sin(), -self.tilt_rad.cos()]
    }

    pub fn normal(&self) -> Vec3 {
        cross(self.edge_axis(), self.rise_axis())
    }

    /// Plane as (n, c) with n·P = c.
    pub fn plane(&self) -> (Vec3, f64) {
        let n = self.normal();
        (n, dot(n, self.mount))
    }

    /// Glass coordinates (along edge, along rise) of a point in the plane.
    pub fn to_plane_coords(&self, p: Vec3) -> [f64; 2] {
        let r = sub(p, self.mount);
        [dot(r, self.edge_axis()), dot(r, self.rise_axis())]
    }

    pub fn contains(&self, st: [f64; 2]) -> bool {
        (0.0..=self.width_m).contains(&st[0]) && (0.0..=self.height_m).contains(&st[1])
    }
}

/// Driver forehead position in the reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForeheadPose {
    pub position: Vec3,
}

/// Bearing of the POI centroid seen from the camera, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoiBearing {
    pub alpha_x: f64,
    pub alpha_y: f64,
}

impl PoiBearing {
    pub fn validate(&self) -> Result<()> {
        let half = std::f64::consts::FRAC_PI_2;
        if self.alpha_x.abs() < half && self.alpha_y.abs() < half {
            Ok(())
        } else {
            Err(Error::invalid(format!("bearing {self:?} must be within ±π/2")))
        }
    }

    /// Ray direction (tan αx, tan αy, 1) in the camera frame.
    pub fn direction(&self) -> Vec3 {
        [self.alpha_x.tan(), self.alpha_y.tan(), 1.0]
    }
}

/// Rigid transform from the sensor frame into the reference frame. The
/// identity means camera, depth sensor and reference frame coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Default for SensorTransform {
    fn default() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }
}

impl SensorTransform {
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let q = self.rotate(p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPoint {
    pub position: Vec3,
    /// Coordinates within the glass: along the lower edge, then up the glass.
    pub plane: [f64; 2],
    pub inside_bounds: bool,
    /// Ray parameter: position = forehead + t · direction.
    pub t: f64,
}

/// Intersection of the forehead→POI ray with the windshield plane.
pub fn patch_point(
    geometry: &WindshieldGeometry,
    forehead: &ForeheadPose,
    bearing: &PoiBearing,
    transform: &SensorTransform,
) -> Result<PatchPoint> {
    geometry.validate()?;
    bearing.validate()?;
    let d = transform.apply(forehead.position);
    let dir = transform.rotate(bearing.direction());
    let (n, c) = geometry.plane();
    let denom = dot(n, dir);
    if denom.abs() <= 1e-12 * norm(dir) {
        return Err(Error::NoIntersection);
    }
    let t = (c - dot(n, d)) / denom;
    if t < 0.0 {
        return Err(Error::BehindDriver(t));
    }
    let position = [d[0] + t * dir[0], d[1] + t * dir[1], d[2] + t * dir[2]];
    let plane = geometry.to_plane_coords(position);
    Ok(PatchPoint {
        position,
        plane,
        inside_bounds: geometry.contains(plane),
        t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fov_x_rad: f64,
    pub fov_y_rad: f64,
    pub width_px: f64,
    pub height_px: f64,
}

/// Pinhole bearing of pixel `(u, v)`; the image centre maps to (0, 0) and the
/// right/bottom edges to half the field of view.
pub fn bearing_from_pixel(k: &CameraIntrinsics, centroid: [f64; 2]) -> Result<PoiBearing> {
    let [u, v] = centroid;
    if !(0.0..=k.width_px).contains(&u) || !(0.0..=k.height_px).contains(&v) {
        return Err(Error::invalid(format!("centroid ({u}, {v}) outside the raster")));
    }
    let (hw, hh) = (k.width_px / 2.0, k.height_px / 2.0);
    Ok(PoiBearing {
        alpha_x: ((u - hw) / hw * (k.fov_x_rad / 2.0).tan()).atan(),
        alpha_y: ((v - hh) / hh * (k.fov_y_rad / 2.0).tan()).atan(),
    })
}

/// Planar projective map, scaled so the bottom-right entry is 1 when nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Homography::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("homography has non-finite entries".into()));
        }
        let scale = matrix[(2, 2)];
        let m = if scale != 0.0 { matrix / scale } else { matrix };
        let det = m.determinant();
        if det.abs() <= 1e-12 * m.norm().powi(3) {
            return Err(Error::Degenerate("singular homography".into()));
        }
        Ok(Self { matrix: m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.matrix[(r, c)]))
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]).expect("translation is invertible")
    }

    pub fn apply(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let q = self.matrix * Vector3::new(p[0], p[1], 1.0);
        if q.z.abs() < 1e-15 {
            return Err(Error::Degenerate(format!("point ({}, {}) maps to infinity", p[0], p[1])));
        }
        Ok([q.x / q.z, q.y / q.z])
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("singular homography".into()))?;
        Self::new(inv)
    }

    /// Least-squares normalised DLT from point pairs (source, destination);
    /// returns the estimate and its reprojection RMS.
    pub fn estimate(pairs: &[([f64; 2], [f64; 2])]) -> Result<(Self, f64)> {
        if pairs.len() < 4 {
            return Err(Error::Degenerate(format!("need at least 4 correspondences, got {}", pairs.len())));
        }
        let src: Vec<[f64; 2]> = pairs.iter().map(|p| p.0).collect();
        let dst: Vec<[f64; 2]> = pairs.iter().map(|p| p.1).collect();
        if pairs.iter().flat_map(|(a, b)| a.iter().chain(b)).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite correspondence"));
        }
        if pairs.len() == 4 && (has_collinear_triple(&src) || has_collinear_triple(&dst)) {
            return Err(Error::Degenerate("three correspondences are collinear".into()));
        }
        let (ts, ns) = normaliser(&src)?;
        let (td, nd) = normaliser(&dst)?;
        let rows = (2 * pairs.len()).max(9);
        let mut a = DMatrix::<f64>::zeros(rows, 9);
        for (i, (s, d)) in ns.iter().zip(&nd).enumerate() {
            let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
            let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
            let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
            for c in 0..9 {
                a[(2 * i, c)] = r0[c];
                a[(2 * i + 1, c)] = r1[c];
            }
        }
        let svd = a.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
        if sv[order[1]] <= 1e-10 * sv[order[8]] {
            return Err(Error::Degenerate("correspondences do not determine a unique homography".into()));
        }
        let h = vt.row(order[0]);
        let hn = Matrix3::from_fn(|r, c| h[r * 3 + c]);
        let inv_td = td
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("destination normalisation failed".into()))?;
        let hom = Self::new(inv_td * hn * ts)?;
        let mut sq = 0.0;
        for (s, d) in &src.iter().zip(&dst).collect::<Vec<_>>() {
            let p = hom.apply(**s)?;
            sq += (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2);
        }
        Ok((hom, (sq / pairs.len() as f64).sqrt()))
    }
}

fn has_collinear_triple(pts: &[[f64; 2]]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                if area.abs() <= 1e-12 * scale * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normaliser(pts: &[[f64; 2]]) -> Result<(Matrix3<f64>, Vec<[f64; 2]>)> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_d = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    if mean_d <= 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_d;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    Ok((t, pts.iter().map(|p| [s * (p[0] - cx), s * (p[1] - cy)]).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    FixedHeadMovingPoi,
    MovingHeadFixedPoi,
    BothMoving,
}

/// Explicit waypoints or an evenly spaced sweep between two endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Trajectory<T> {
    Points(Vec<T>),
    Sweep { start: T, end: T, steps: usize },
}

pub trait Lerp: Copy {
    fn lerp(a: Self, b: Self, f: f64) -> Self;
}

impl Lerp for Vec3 {
    fn lerp(a: Self, b: Self, f: f64) -> Self {
        std::array::from_fn(|i| a[i] + (b[i] - a[i]) * f)
    }
}

impl Lerp for PoiBearing {
    fn lerp(a: Self, b: Self, f: f64) -> Self {
        PoiBearing {
            alpha_x: a.alpha_x + (b.alpha_x - a.alpha_x) * f,
            alpha_y: a.alpha_y + (b.alpha_y - a.alpha_y) * f,
        }
    }
}

impl<T: Lerp> Trajectory<T> {
    pub fn samples(&self) -> Vec<T> {
        match self {
            Trajectory::Points(p) => p.clone(),
            Trajectory::Sweep { start, end, steps } => match steps {
                0 => Vec::new(),
                1 => vec![*start],
                n => (0..*n)
                    .map(|i| T::lerp(*start, *end, i as f64 / (n - 1) as f64))
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    pub geometry: WindshieldGeometry,
    #[serde(default)]
    pub sensor: SensorTransform,
    /// Forehead positions; a single entry when the head is fixed.
    pub heads: Trajectory<Vec3>,
    /// POI bearings; a single entry when the POI is fixed.
    pub bearings: Trajectory<PoiBearing>,
    /// Optional glass → projector correction.
    #[serde(default)]
    pub homography: Option<Homography>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStep {
    pub step: usize,
    pub point: PatchPoint,
    pub projector: Option<[f64; 2]>,
}

/// Patch points along the scenario trajectory.
pub fn simulate(config: &SimulationConfig) -> Result<Vec<SimStep>> {
    config.geometry.validate()?;
    let heads = config.heads.samples();
    let bearings = config.bearings.samples();
    let pairs: Vec<(Vec3, PoiBearing)> = match config.scenario {
        Scenario::FixedHeadMovingPoi => {
            let [head] = heads[..] else {
                return Err(Error::Config("fixed_head_moving_poi needs exactly one head position".into()));
            };
            bearings.into_iter().map(|b| (head, b)).collect()
        }
        Scenario::MovingHeadFixedPoi => {
            let [bearing] = bearings[..] else {
                return Err(Error::Config("moving_head_fixed_poi needs exactly one bearing".into()));
            };
            heads.into_iter().map(|h| (h, bearing)).collect()
        }
        Scenario::BothMoving => {
            if heads.len() != bearings.len() {
                return Err(Error::Config(format!(
                    "both_moving needs equal-length trajectories, got {} heads and {} bearings",
                    heads.len(),
                    bearings.len()
                )));
            }
            heads.into_iter().zip(bearings).collect()
        }
    };
    pairs
        .into_iter()
        .enumerate()
        .map(|(step, (head, bearing))| {
            let point = patch_point(&config.geometry, &ForeheadPose { position: head }, &bearing, &config.sensor)?;
            let projector = match &config.homography {
                Some(h) if point.inside_bounds => Some(h.apply(point.plane)?),
                _ => None,
            };
            Ok(SimStep { step, point, projector })
        })
        .collect()
}

/// Steps whose patch point falls on the glass.
pub fn notification_set(steps: &[SimStep]) -> Vec<&SimStep> {
    steps.iter().filter(|s| s.point.inside_bounds).collect()
}

/// `step,Xi,Yi,Zi,inside`
pub fn write_trajectory_csv<W: Write>(writer: W, steps: &[SimStep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "Xi", "Yi", "Zi", "inside"])?;
    for s in steps {
        let p = s.point.position;
        w.write_record([
            s.step.to_string(),
            p[0].to_string(),
            p[1].to_string(),
            p[2].to_string(),
            s.point.inside_bounds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Glass-plane 2-D coordinates for plotting: `step,s,t,inside,proj_x,proj_y`.
pub fn write_plot_csv<W: Write>(writer: W, steps: &[SimStep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "s", "t", "inside", "proj_x", "proj_y"])?;
    for s in steps {
        let (px, py) = match s.projector {
            Some([x, y]) => (x.to_string(), y.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            s.step.to_string(),
            s.point.plane[0].to_string(),
            s.point.plane[1].to_string(),
            s.point.inside_bounds.to_string(),
            px,
            py,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn upright() -> WindshieldGeometry {
        WindshieldGeometry {
            width_m: 1.4,
            height_m: 0.8,
            tilt_rad: FRAC_PI_2,
            mount: [-0.7, 0.0, 1.0],
        }
    }

    #[test]
    fn straight_ahead_hits_foot_point() {
        let g = upright();
        let p = patch_point(
            &g,
            &ForeheadPose { position: [0.1, -0.3, 0.2] },
            &PoiBearing { alpha_x: 0.0, alpha_y: 0.0 },
            &SensorTransform::default(),
        )
        .unwrap();
        let expect = [0.1, -0.3, 1.0];
        for i in 0..3 {
            assert!((p.position[i] - expect[i]).abs() < 1e-12);
        }
        assert!(p.inside_bounds);
        assert!((p.plane[0] - 0.8).abs() < 1e-12 && (p.plane[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn parallel_and_behind() {
        let g = upright();
        let b = PoiBearing { alpha_x: 0.0, alpha_y: 0.0 };
        let behind = ForeheadPose { position: [0.0, 0.0, 2.0] };
        assert!(matches!(patch_point(&g, &behind, &b, &SensorTransform::default()), Err(Error::BehindDriver(_))));
        // Nearly horizontal glass is parallel to a forward ray.
        let level = WindshieldGeometry { tilt_rad: 1e-13, ..g };
        let head = ForeheadPose { position: [0.0, -1.0, 0.0] };
        assert!(matches!(patch_point(&level, &head, &b, &SensorTransform::default()), Err(Error::NoIntersection)));
    }

    #[test]
    fn bearings() {
        let k = CameraIntrinsics {
            fov_x_rad: FRAC_PI_2,
            fov_y_rad: 1.0,
            width_px: 640.0,
            height_px: 480.0,
        };
        let c = bearing_from_pixel(&k, [320.0, 240.0]).unwrap();
        assert_eq!((c.alpha_x, c.alpha_y), (0.0, 0.0));
        let r = bearing_from_pixel(&k, [640.0, 240.0]).unwrap();
        assert!((r.alpha_x - FRAC_PI_2 / 2.0).abs() < 1e-12);
        let q = bearing_from_pixel(&k, [480.0, 240.0]).unwrap();
        assert!((q.alpha_x - 0.5f64.atan()).abs() < 1e-12);
        assert!((q.alpha_x - 0.4636).abs() < 1e-4);
        assert!(bearing_from_pixel(&k, [700.0, 0.0]).is_err());
    }

    #[test]
    fn homography_basics() {
        let id = Homography::identity();
        assert_eq!(id.apply([3.0, -2.0]).unwrap(), [3.0, -2.0]);
        let t = Homography::translation(1.5, -2.0);
        assert_eq!(t.apply([1.0, 1.0]).unwrap(), [2.5, -1.0]);
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let (h, rms) = Homography::estimate(&sq.map(|p| (p, p))).unwrap();
        assert!(rms < 1e-12);
        assert!((h.matrix - Matrix3::identity()).norm() < 1e-9);
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 1.0]];
        assert!(Homography::estimate(&line.map(|p| (p, p))).is_err());
        assert!(Homography::from_rows([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn empty_and_symmetric_sweeps() {
        let g = upright();
        let cfg = SimulationConfig {
            scenario: Scenario::FixedHeadMovingPoi,
            geometry: g,
            sensor: SensorTransform::default(),
            heads: Trajectory::Points(vec![[0.0, -0.3, 0.0]]),
            bearings: Trajectory::Sweep {
                start: PoiBearing { alpha_x: -0.4, alpha_y: 0.1 },
                end: PoiBearing { alpha_x: 0.4, alpha_y: 0.1 },
                steps: 9,
            },
            homography: None,
        };
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.len(), 9);
        for i in 0..9 {
            let (a, b) = (out[i].point.position, out[8 - i].point.position);
            assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        let empty = SimulationConfig {
            bearings: Trajectory::Points(vec![]),
            ..cfg
        };
        assert!(simulate(&empty).unwrap().is_empty());
    }
}
