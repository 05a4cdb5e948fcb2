//! 2D/3D box algebra: GIoU, rotated bird's-eye-view IoU, oriented 3D IoU and
//! pinhole projection in the KITTI camera frame (x right, y down, z forward).

use serde::{Deserialize, Serialize};

pub type GeometryResult<T> = Result<T, GeometryError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("degenerate zero-area box")]
    DegenerateBox,
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
}

/// Cross-product epsilon for near-parallel clip edges.
const CLIP_EPS: f64 = 1e-12;

/// 2D box stored as distances from a reference point (usually the projected
/// 3D center) to the left/right/top/bottom edges, in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub l: f64,
    pub r: f64,
    pub t: f64,
    pub b: f64,
}

impl Box2D {
    pub fn new(l: f64, r: f64, t: f64, b: f64) -> Self {
        Self { l, r, t, b }
    }

    pub fn width(&self) -> f64 {
        self.l + self.r
    }

    pub fn height(&self) -> f64 {
        self.t + self.b
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// The normalized-coordinate invariants hold for ground-truth boxes;
    /// model outputs are allowed to violate them transiently.
    pub fn validate_normalized(&self) -> GeometryResult<()> {
        if self.l < 0.0 || self.r < 0.0 || self.t < 0.0 || self.b < 0.0 {
            return Err(GeometryError::Invalid {
                what: "Box2D",
                msg: format!("negative edge distance in {:?}", self),
            });
        }
        if self.width() > 1.0 + 1e-12 || self.height() > 1.0 + 1e-12 {
            return Err(GeometryError::Invalid {
                what: "Box2D",
                msg: format!("width/height exceed normalized bounds in {:?}", self),
            });
        }
        Ok(())
    }

    /// Corner extents around a reference point: (x1, y1, x2, y2).
    pub fn extents(&self, center: (f64, f64)) -> (f64, f64, f64, f64) {
        (center.0 - self.l, center.1 - self.t, center.0 + self.r, center.1 + self.b)
    }
}

/// Upright 3D box: geometric center in camera coordinates, dims
/// (length, width, height) in meters, yaw about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// (l3d, w3d, h3d)
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> GeometryResult<Self> {
        if dims.iter().any(|&d| d <= 0.0) {
            return Err(GeometryError::Invalid {
                what: "Box3D",
                msg: format!("non-positive dims {:?}", dims),
            });
        }
        if !(-std::f64::consts::PI < yaw && yaw <= std::f64::consts::PI) {
            return Err(GeometryError::Invalid {
                what: "Box3D",
                msg: format!("yaw {} outside (-pi, pi]", yaw),
            });
        }
        Ok(Self { center, dims, yaw })
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Bird's-eye-view footprint corners in the (x, z) ground plane,
    /// counter-clockwise in that plane.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (cx, cz) = (self.center[0], self.center[2]);
        let (hl, hw) = (self.dims[0] / 2.0, self.dims[1] / 2.0);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        // local u along the length axis, v across; world = center + R(u, v)
        let rot = |u: f64, v: f64| [cx + u * c + v * s, cz - u * s + v * c];
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    /// Vertical extent (lo, hi) along the y axis.
    pub fn y_extent(&self) -> (f64, f64) {
        let h = self.dims[2] / 2.0;
        (self.center[1] - h, self.center[1] + h)
    }

    /// All eight corners in camera coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let (ylo, yhi) = self.y_extent();
        let mut out = [[0.0; 3]; 8];
        for (i, c) in bev.iter().enumerate() {
            out[i] = [c[0], ylo, c[1]];
            out[i + 4] = [c[0], yhi, c[1]];
        }
        out
    }

    /// Point-membership test via inverse rotation; used by the Monte-Carlo
    /// oracle, never by the analytic IoU path.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (ylo, yhi) = self.y_extent();
        if p[1] < ylo || p[1] > yhi {
            return false;
        }
        let dx = p[0] - self.center[0];
        let dz = p[2] - self.center[2];
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let u = dx * c - dz * s;
        let v = dx * s + dz * c;
        u.abs() <= self.dims[0] / 2.0 && v.abs() <= self.dims[1] / 2.0
    }
}

/// KITTI-convention 3x4 projection matrix (P2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub p2: [[f64; 4]; 3],
}

impl Calibration {
    pub fn new(p2: [[f64; 4]; 3]) -> GeometryResult<Self> {
        if p2[0][0] <= 0.0 || p2[1][1] <= 0.0 {
            return Err(GeometryError::Invalid {
                what: "Calibration",
                msg: format!("non-positive focal lengths ({}, {})", p2[0][0], p2[1][1]),
            });
        }
        Ok(Self { p2 })
    }

    /// Intrinsics-only calibration from focal lengths and principal point.
    pub fn from_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> GeometryResult<Self> {
        Self::new([
            [fx, 0.0, cx, 0.0],
            [0.0, fy, cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
    }

    pub fn fx(&self) -> f64 {
        self.p2[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.p2[1][1]
    }
}

/// Projects a camera-frame point to normalized image coordinates.
/// The result may fall outside [0,1] for points projecting off-image.
pub fn project_point(
    p: [f64; 3],
    calib: &Calibration,
    image_size: (u32, u32),
) -> GeometryResult<(f64, f64)> {
    if p[2] <= 0.0 {
        return Err(GeometryError::BehindCamera { z: p[2] });
    }
    let m = &calib.p2;
    let hom = [p[0], p[1], p[2], 1.0];
    let dot = |row: &[f64; 4]| row.iter().zip(&hom).map(|(a, b)| a * b).sum::<f64>();
    let w = dot(&m[2]);
    let u = dot(&m[0]) / w;
    let v = dot(&m[1]) / w;
    Ok((u / image_size.0 as f64, v / image_size.1 as f64))
}

/// Projected 3D center of a box, normalized by image size.
pub fn project_center(
    b: &Box3D,
    calib: &Calibration,
    image_size: (u32, u32),
) -> GeometryResult<(f64, f64)> {
    project_point(b.center, calib, image_size)
}

/// Recovers a camera-frame point from a normalized projection and its depth.
/// Assumes the standard KITTI P2 layout with third row [0, 0, 1, tz].
pub fn invert_projection(
    center_norm: (f64, f64),
    depth: f64,
    calib: &Calibration,
    image_size: (u32, u32),
) -> [f64; 3] {
    let m = &calib.p2;
    let w = depth + m[2][3];
    let u = center_norm.0 * image_size.0 as f64;
    let v = center_norm.1 * image_size.1 as f64;
    let x = (u * w - m[0][2] * depth - m[0][3]) / m[0][0];
    let y = (v * w - m[1][2] * depth - m[1][3]) / m[1][1];
    [x, y, depth]
}

/// Generalized IoU of two 2D boxes given their reference centers.
/// Returns a value in (-1, 1]; 1 iff the boxes coincide.
pub fn giou_2d(
    a: &Box2D,
    center_a: (f64, f64),
    b: &Box2D,
    center_b: (f64, f64),
) -> GeometryResult<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(GeometryError::DegenerateBox);
    }
    let (ax1, ay1, ax2, ay2) = a.extents(center_a);
    let (bx1, by1, bx2, by2) = b.extents(center_b);

    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;

    let hw = ax2.max(bx2) - ax1.min(bx1);
    let hh = ay2.max(by2) - ay1.min(by1);
    let hull = hw * hh;

    Ok(inter / union - (hull - union) / hull)
}

/// Plain IoU of two 2D boxes (used to cross-check GIoU bounds).
pub fn iou_2d(a: &Box2D, center_a: (f64, f64), b: &Box2D, center_b: (f64, f64)) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.extents(center_a);
    let (bx1, by1, bx2, by2) = b.extents(center_b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Exact intersection area of two (convex) BEV rectangles via
/// Sutherland–Hodgman clipping of one against the other.
///
/// Identical footprints short-circuit to the analytic area, and the clip
/// direction is canonicalized so the result is bitwise symmetric in (a, b).
fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    if footprint_key(a) == footprint_key(b) {
        return a.dims[0] * a.dims[1];
    }
    let (first, second) = if footprint_key(a) <= footprint_key(b) { (a, b) } else { (b, a) };
    let subject = first.bev_corners().to_vec();
    let clip = ensure_ccw(second.bev_corners().to_vec());
    let poly = clip_polygon(subject, &clip);
    polygon_area(&poly)
}

/// Total order on BEV footprints (bit-level on the defining fields; any
/// deterministic order works, monotonicity is irrelevant).
fn footprint_key(b: &Box3D) -> [u64; 5] {
    [
        b.center[0].to_bits(),
        b.center[2].to_bits(),
        b.dims[0].to_bits(),
        b.dims[1].to_bits(),
        b.yaw.to_bits(),
    ]
}

/// IoU of the ground-plane footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    if footprint_key(a) == footprint_key(b) {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    let area_a = a.dims[0] * a.dims[1];
    let area_b = b.dims[0] * b.dims[1];
    inter / (area_a + area_b - inter)
}

/// Oriented 3D IoU: BEV polygon intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter_area = bev_intersection_area(a, b);
    let (alo, ahi) = a.y_extent();
    let (blo, bhi) = b.y_extent();
    let y_overlap = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let inter = inter_area * y_overlap;
    inter / (a.volume() + b.volume() - inter)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc.abs() / 2.0
}

fn ensure_ccw(mut poly: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let mut signed = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        signed += p[0] * q[1] - q[0] * p[1];
    }
    if signed < 0.0 {
        poly.reverse();
    }
    poly
}

/// Sutherland–Hodgman: clips `subject` against each edge of the convex,
/// counter-clockwise `clip` polygon.
fn clip_polygon(mut subject: Vec<[f64; 2]>, clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    for i in 0..clip.len() {
        if subject.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let mut output = Vec::with_capacity(subject.len() + 2);
        for j in 0..subject.len() {
            let p = subject[j];
            let q = subject[(j + 1) % subject.len()];
            let p_in = side(a, b, p) >= -CLIP_EPS;
            let q_in = side(a, b, q) >= -CLIP_EPS;
            if p_in {
                output.push(p);
                if !q_in {
                    if let Some(x) = edge_intersection(a, b, p, q) {
                        output.push(x);
                    }
                }
            } else if q_in {
                if let Some(x) = edge_intersection(a, b, p, q) {
                    output.push(x);
                }
            }
        }
        subject = output;
    }
    subject
}

/// Signed area cross product: positive when `p` is left of a→b.
fn side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn edge_intersection(a: [f64; 2], b: [f64; 2], p: [f64; 2], q: [f64; 2]) -> Option<[f64; 2]> {
    let r = [b[0] - a[0], b[1] - a[1]];
    let s = [q[0] - p[0], q[1] - p[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() <= CLIP_EPS {
        // parallel within tolerance: no single crossing point
        return None;
    }
    let t = ((p[0] - a[0]) * s[1] - (p[1] - a[1]) * s[0]) / denom;
    Some([a[0] + t * r[0], a[1] + t * r[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square_at(x: f64, y: f64) -> (Box2D, (f64, f64)) {
        (Box2D::new(0.5, 0.5, 0.5, 0.5), (x, y))
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let calib = Calibration::from_intrinsics(500.0, 500.0, 620.0, 185.0).unwrap();
        let b = Box3D::new([0.0, 0.0, 12.0], [4.0, 1.6, 1.5], 0.0).unwrap();
        let (u, v) = project_center(&b, &calib, (1240, 370)).unwrap();
        assert!((u - 0.5).abs() < 1e-12);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn project_hand_pinhole_case() {
        let calib = Calibration::from_intrinsics(500.0, 500.0, 620.0, 185.0).unwrap();
        let b = Box3D::new([2.0, 0.0, 10.0], [4.0, 1.6, 1.5], 0.0).unwrap();
        let (u, _) = project_center(&b, &calib, (1240, 370)).unwrap();
        assert!((u - 720.0 / 1240.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_depth_halves_offset_from_principal_point() {
        let calib = Calibration::from_intrinsics(500.0, 480.0, 620.0, 185.0).unwrap();
        let size = (1240, 370);
        let near = Box3D::new([1.5, 0.4, 8.0], [4.0, 1.6, 1.5], 0.0).unwrap();
        let far = Box3D::new([1.5, 0.4, 16.0], [4.0, 1.6, 1.5], 0.0).unwrap();
        let (un, vn) = project_center(&near, &calib, size).unwrap();
        let (uf, vf) = project_center(&far, &calib, size).unwrap();
        let (cu, cv) = (620.0 / 1240.0, 185.0 / 370.0);
        assert!(((un - cu) / (uf - cu) - 2.0).abs() < 1e-9);
        assert!(((vn - cv) / (vf - cv) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_rejected() {
        let calib = Calibration::from_intrinsics(500.0, 500.0, 620.0, 185.0).unwrap();
        let err = project_point([0.0, 0.0, -1.0], &calib, (1240, 370)).unwrap_err();
        assert_eq!(err, GeometryError::BehindCamera { z: -1.0 });
    }

    #[test]
    fn projection_round_trip() {
        let calib = Calibration::new([
            [721.5, 0.0, 609.6, 44.9],
            [0.0, 721.5, 172.9, 0.2],
            [0.0, 0.0, 1.0, 0.003],
        ])
        .unwrap();
        let p = [1.84, 1.47, 8.41];
        let size = (1242, 375);
        let uv = project_point(p, &calib, size).unwrap();
        let back = invert_projection(uv, p[2], &calib, size);
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-9, "{} vs {}", back[i], p[i]);
        }
    }

    #[test]
    fn giou_identity_is_one() {
        let (b, c) = unit_square_at(0.5, 0.5);
        assert_eq!(giou_2d(&b, c, &b, c).unwrap(), 1.0);
    }

    #[test]
    fn giou_half_overlapping_unit_squares() {
        // shifted by 0.5: IoU = 1/3, hull equals union, GIoU = 1/3
        let (a, ca) = unit_square_at(0.5, 0.5);
        let (b, cb) = unit_square_at(1.0, 0.5);
        let g = giou_2d(&a, ca, &b, cb).unwrap();
        assert!((g - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_approaches_minus_one_for_distant_boxes() {
        let (a, ca) = unit_square_at(0.0, 0.0);
        let (b, _) = unit_square_at(0.0, 0.0);
        let g_far = giou_2d(&a, ca, &b, (50.0, 0.0)).unwrap();
        let g_farther = giou_2d(&a, ca, &b, (500.0, 0.0)).unwrap();
        assert!(g_far < -0.9);
        assert!(g_farther < g_far);
        assert!(g_farther > -1.0);
    }

    #[test]
    fn giou_zero_area_rejected() {
        let zero = Box2D::new(0.0, 0.0, 0.3, 0.3);
        let (b, c) = unit_square_at(0.5, 0.5);
        assert_eq!(giou_2d(&zero, c, &b, c).unwrap_err(), GeometryError::DegenerateBox);
    }

    #[test]
    fn giou_never_exceeds_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let mk = |rng: &mut ChaCha8Rng| {
                (
                    Box2D::new(
                        rng.gen_range(0.01..0.5),
                        rng.gen_range(0.01..0.5),
                        rng.gen_range(0.01..0.5),
                        rng.gen_range(0.01..0.5),
                    ),
                    (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                )
            };
            let (a, ca) = mk(&mut rng);
            let (b, cb) = mk(&mut rng);
            let g = giou_2d(&a, ca, &b, cb).unwrap();
            let i = iou_2d(&a, ca, &b, cb);
            assert!(g <= i + 1e-12, "giou {} > iou {}", g, i);
        }
    }

    #[test]
    fn iou3d_identity_any_yaw() {
        let b = Box3D::new([1.0, -0.5, 14.0], [4.2, 1.7, 1.5], 0.83).unwrap();
        assert_eq!(iou_3d(&b, &b), 1.0);
        assert_eq!(iou_bev(&b, &b), 1.0);
    }

    #[test]
    fn iou3d_vertically_disjoint_is_zero() {
        let a = Box3D::new([0.0, 0.0, 10.0], [2.0, 2.0, 1.0], 0.4).unwrap();
        let b = Box3D::new([0.0, 5.0, 10.0], [2.0, 2.0, 1.0], 0.4).unwrap();
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn iou3d_axis_aligned_hand_case() {
        // unit cubes offset by 0.5 along x: IoU = 0.5 / 1.5 = 1/3
        let a = Box3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D::new([0.5, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    /// Closed-form IoU for yaw = 0 boxes.
    fn axis_aligned_iou3d(a: &Box3D, b: &Box3D) -> f64 {
        let overlap = |ca: f64, da: f64, cb: f64, db: f64| {
            ((ca + da / 2.0).min(cb + db / 2.0) - (ca - da / 2.0).max(cb - db / 2.0)).max(0.0)
        };
        let ix = overlap(a.center[0], a.dims[0], b.center[0], b.dims[0]);
        let iz = overlap(a.center[2], a.dims[1], b.center[2], b.dims[1]);
        let iy = overlap(a.center[1], a.dims[2], b.center[1], b.dims[2]);
        let inter = ix * iy * iz;
        inter / (a.volume() + b.volume() - inter)
    }

    #[test]
    fn iou3d_matches_closed_form_for_axis_aligned_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    [rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(8.0..12.0)],
                    [rng.gen_range(0.5..4.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
                    0.0,
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let diff = (iou_3d(&a, &b) - axis_aligned_iou3d(&a, &b)).abs();
            assert!(diff < 1e-12, "diff {}", diff);
        }
    }

    #[test]
    fn iou3d_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(8.0..11.0)],
                    [rng.gen_range(0.5..4.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
                    rng.gen_range(-std::f64::consts::PI * 0.999..std::f64::consts::PI),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(iou_3d(&a, &b), iou_3d(&b, &a));
            assert_eq!(iou_bev(&a, &b), iou_bev(&b, &a));
        }
    }

    #[test]
    fn iou3d_invariant_under_joint_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(8.0..11.0)],
                    [rng.gen_range(0.5..4.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
                    rng.gen_range(-1.5..1.5),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let base = iou_3d(&a, &b);

            let delta: f64 = rng.gen_range(-1.0..1.0);
            let shift = [rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0)];
            let transform = |bx: &Box3D| {
                let (c, s) = (delta.cos(), delta.sin());
                let x = bx.center[0] * c + bx.center[2] * s + shift[0];
                let z = -bx.center[0] * s + bx.center[2] * c + shift[2];
                Box3D {
                    center: [x, bx.center[1] + shift[1], z],
                    dims: bx.dims,
                    yaw: bx.yaw + delta,
                }
            };
            let moved = (iou_3d(&transform(&a), &transform(&b)) - base).abs();
            assert!(moved < 1e-9, "IoU changed by {} under rigid motion", moved);
        }
    }

    /// Monte-Carlo intersection-volume oracle: samples the AABB overlap region
    /// and tests membership in both boxes analytically.
    pub(crate) fn monte_carlo_iou3d(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
        let ca = a.corners();
        let cb = b.corners();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in ca.iter() {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let mut lob = [f64::INFINITY; 3];
        let mut hib = [f64::NEG_INFINITY; 3];
        for c in cb.iter() {
            for k in 0..3 {
                lob[k] = lob[k].min(c[k]);
                hib[k] = hib[k].max(c[k]);
            }
        }
        let mut region_lo = [0.0; 3];
        let mut region_hi = [0.0; 3];
        let mut vol_region = 1.0;
        for k in 0..3 {
            region_lo[k] = lo[k].max(lob[k]);
            region_hi[k] = hi[k].min(hib[k]);
            let w = region_hi[k] - region_lo[k];
            if w <= 0.0 {
                vol_region = 0.0;
            } else {
                vol_region *= w;
            }
        }
        let inter = if vol_region == 0.0 {
            0.0
        } else {
            let mut hits = 0usize;
            for _ in 0..samples {
                let p = [
                    rng.gen_range(region_lo[0]..region_hi[0]),
                    rng.gen_range(region_lo[1]..region_hi[1]),
                    rng.gen_range(region_lo[2]..region_hi[2]),
                ];
                if a.contains(p) && b.contains(p) {
                    hits += 1;
                }
            }
            vol_region * hits as f64 / samples as f64
        };
        inter / (a.volume() + b.volume() - inter)
    }

    #[test]
    fn iou3d_agrees_with_monte_carlo_smoke() {
        // the full 200-pair, 1e6-sample comparison lives in the acceptance suite
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    [rng.gen_range(-0.8..0.8), rng.gen_range(-0.5..0.5), rng.gen_range(9.0..10.5)],
                    [rng.gen_range(1.0..4.0), rng.gen_range(1.0..2.0), rng.gen_range(1.0..2.0)],
                    rng.gen_range(-std::f64::consts::PI * 0.99..std::f64::consts::PI),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let analytic = iou_3d(&a, &b);
            let mc = monte_carlo_iou3d(&a, &b, 200_000, &mut rng);
            assert!((analytic - mc).abs() < 0.02, "analytic {} mc {}", analytic, mc);
        }
    }

    #[test]
    fn bev_intersection_of_crossed_rectangles() {
        // two 4x1 slabs crossed at 90 degrees intersect in a 1x1 square
        let a = Box3D::new([0.0, 0.0, 10.0], [4.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D::new([0.0, 0.0, 10.0], [4.0, 1.0, 1.0], std::f64::consts::FRAC_PI_2).unwrap();
        let inter = bev_intersection_area(&a, &b);
        assert!((inter - 1.0).abs() < 1e-9);
        let expect = 1.0 / (4.0 + 4.0 - 1.0);
        assert!((iou_bev(&a, &b) - expect).abs() < 1e-9);
    }
}
