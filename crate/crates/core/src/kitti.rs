//! KITTI-format label and calibration ingestion plus reproducible synthetic
//! scenes. Pixels exist only at this boundary; everything downstream works in
//! normalized image coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    project_point, Box2D, Box3D, Calibration, GeometryError,
};

pub type KittiResult<T> = Result<T, KittiError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KittiError {
    #[error("label line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("calibration: {0}")]
    Calib(String),
    #[error("could not place object {object} in frame after {attempts} attempts")]
    Placement { object: usize, attempts: usize },
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// KITTI object categories (DontCare lines are filtered at parse time).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Car,
    Pedestrian,
    Cyclist,
    Van,
    Truck,
    PersonSitting,
    Tram,
    Misc,
}

pub const ALL_CATEGORIES: [Category; 8] = [
    Category::Car,
    Category::Pedestrian,
    Category::Cyclist,
    Category::Van,
    Category::Truck,
    Category::PersonSitting,
    Category::Tram,
    Category::Misc,
];

impl Category {
    pub fn from_kitti(s: &str) -> Option<Self> {
        match s {
            "Car" => Some(Self::Car),
            "Pedestrian" => Some(Self::Pedestrian),
            "Cyclist" => Some(Self::Cyclist),
            "Van" => Some(Self::Van),
            "Truck" => Some(Self::Truck),
            "Person_sitting" => Some(Self::PersonSitting),
            "Tram" => Some(Self::Tram),
            "Misc" => Some(Self::Misc),
            _ => None,
        }
    }

    pub fn kitti_name(&self) -> &'static str {
        match self {
            Self::Car => "Car",
            Self::Pedestrian => "Pedestrian",
            Self::Cyclist => "Cyclist",
            Self::Van => "Van",
            Self::Truck => "Truck",
            Self::PersonSitting => "Person_sitting",
            Self::Tram => "Tram",
            Self::Misc => "Misc",
        }
    }

    pub fn index(&self) -> usize {
        ALL_CATEGORIES.iter().position(|c| c == self).expect("category in table")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        ALL_CATEGORIES.get(i).copied()
    }
}

pub const NUM_CATEGORIES: usize = ALL_CATEGORIES.len();

/// Pass-through KITTI fields that do not feed any computation but are needed
/// to re-serialize a parsed label faithfully.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelMeta {
    pub truncated: f64,
    pub occluded: f64,
    pub alpha: f64,
}

/// One ground-truth (or pseudo-prediction) object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object3D {
    pub category: Category,
    /// Projection of the 3D box center, normalized by image size.
    pub center_proj: (f64, f64),
    /// Edge distances from `center_proj`, normalized.
    pub box2d: Box2D,
    /// (l3d, w3d, h3d) in meters.
    pub dims: [f64; 3],
    /// Depth of the 3D center (camera z), meters.
    pub depth: f64,
    pub yaw: f64,
    pub orientation_bin: usize,
    pub orientation_residual: f64,
    /// KITTI-convention location: bottom-face center in camera coordinates.
    pub location: [f64; 3],
    /// Raw pixel box (x1, y1, x2, y2) as read from (or written to) the label.
    pub bbox_px: [f64; 4],
    pub meta: LabelMeta,
}

impl Object3D {
    /// Geometric-center 3D box (camera frame, y down).
    pub fn box3d(&self) -> Box3D {
        Box3D {
            center: [self.location[0], self.location[1] - self.dims[2] / 2.0, self.location[2]],
            dims: self.dims,
            yaw: self.yaw,
        }
    }
}

/// Splits a yaw in (-pi, pi] into a discrete bin plus a continuous residual
/// relative to the bin center.
pub fn decompose_yaw(yaw: f64, bins: usize) -> (usize, f64) {
    let width = TWO_PI / bins as f64;
    let shifted = yaw + std::f64::consts::PI; // (0, 2*pi]
    let mut bin = (shifted / width).floor() as isize;
    if bin < 0 {
        bin = 0;
    }
    let bin = (bin as usize).min(bins - 1);
    let residual = yaw - bin_center(bin, bins);
    (bin, residual)
}

/// Center angle of a bin.
pub fn bin_center(bin: usize, bins: usize) -> f64 {
    let width = TWO_PI / bins as f64;
    -std::f64::consts::PI + (bin as f64 + 0.5) * width
}

pub fn compose_yaw(bin: usize, residual: f64, bins: usize) -> f64 {
    bin_center(bin, bins) + residual
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLabels {
    pub objects: Vec<Object3D>,
    pub warnings: Vec<ParseWarning>,
}

/// Parses KITTI label text: one object per line,
/// `type truncated occluded alpha x1 y1 x2 y2 h w l x y z ry [score]`.
/// DontCare lines are dropped; unknown categories are skipped with a warning.
pub fn parse_label_file(
    text: &str,
    calib: &Calibration,
    image_size: (u32, u32),
    orientation_bins: usize,
) -> KittiResult<ParsedLabels> {
    let mut objects = Vec::new();
    let mut warnings = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] == "DontCare" {
            continue;
        }
        let category = match Category::from_kitti(fields[0]) {
            Some(c) => c,
            None => {
                warnings.push(ParseWarning {
                    line,
                    message: format!("unknown category '{}', skipped", fields[0]),
                });
                continue;
            }
        };
        if fields.len() != 15 && fields.len() != 16 {
            return Err(KittiError::Parse {
                line,
                msg: format!("expected 15 or 16 fields, got {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 14];
        for (k, f) in fields[1..15].iter().enumerate() {
            nums[k] = f.parse::<f64>().map_err(|e| KittiError::Parse {
                line,
                msg: format!("field {} ('{}'): {}", k + 1, f, e),
            })?;
        }
        let meta = LabelMeta { truncated: nums[0], occluded: nums[1], alpha: nums[2] };
        let bbox_px = [nums[3], nums[4], nums[5], nums[6]];
        let (h, w, l) = (nums[7], nums[8], nums[9]);
        let location = [nums[10], nums[11], nums[12]];
        let ry = nums[13];

        let obj = object_from_label(
            category, meta, bbox_px, [l, w, h], location, ry, calib, image_size,
            orientation_bins,
        )
        .map_err(|e| KittiError::Parse { line, msg: e.to_string() })?;
        objects.push(obj);
    }
    Ok(ParsedLabels { objects, warnings })
}

/// Builds an `Object3D` from raw KITTI fields (dims already reordered to
/// (l3d, w3d, h3d)).
#[allow(clippy::too_many_arguments)]
pub fn object_from_label(
    category: Category,
    meta: LabelMeta,
    bbox_px: [f64; 4],
    dims: [f64; 3],
    location: [f64; 3],
    ry: f64,
    calib: &Calibration,
    image_size: (u32, u32),
    orientation_bins: usize,
) -> KittiResult<Object3D> {
    if location[2] <= 0.0 {
        return Err(KittiError::Precondition(format!("depth {} not positive", location[2])));
    }
    let center3d = [location[0], location[1] - dims[2] / 2.0, location[2]];
    let center_proj = project_point(center3d, calib, image_size)?;
    let (wpx, hpx) = (image_size.0 as f64, image_size.1 as f64);
    let box2d = Box2D {
        l: (center_proj.0 - bbox_px[0] / wpx).max(0.0),
        r: (bbox_px[2] / wpx - center_proj.0).max(0.0),
        t: (center_proj.1 - bbox_px[1] / hpx).max(0.0),
        b: (bbox_px[3] / hpx - center_proj.1).max(0.0),
    };
    let yaw = normalize_angle(ry);
    let (orientation_bin, orientation_residual) = decompose_yaw(yaw, orientation_bins);
    Ok(Object3D {
        category,
        center_proj,
        box2d,
        dims,
        depth: location[2],
        yaw,
        orientation_bin,
        orientation_residual,
        location,
        bbox_px,
        meta,
    })
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut x = a % TWO_PI;
    if x <= -std::f64::consts::PI {
        x += TWO_PI;
    } else if x > std::f64::consts::PI {
        x -= TWO_PI;
    }
    x
}

/// Serializes objects back into KITTI label lines. Floats use the shortest
/// round-trip representation, so parse -> write -> parse is value-exact.
pub fn write_label_file(objects: &[Object3D]) -> String {
    let mut out = String::new();
    for o in objects {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            o.category.kitti_name(),
            o.meta.truncated,
            o.meta.occluded,
            o.meta.alpha,
            o.bbox_px[0],
            o.bbox_px[1],
            o.bbox_px[2],
            o.bbox_px[3],
            o.dims[2], // h
            o.dims[1], // w
            o.dims[0], // l
            o.location[0],
            o.location[1],
            o.location[2],
            o.yaw,
        ));
    }
    out
}

/// Parses a KITTI calib file; only the P2 line is used.
pub fn parse_calib_file(text: &str) -> KittiResult<Calibration> {
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("P2:") {
            let vals: Result<Vec<f64>, _> = rest.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|e| KittiError::Calib(format!("bad P2 value: {}", e)))?;
            if vals.len() != 12 {
                return Err(KittiError::Calib(format!("P2 needs 12 values, got {}", vals.len())));
            }
            let mut p2 = [[0.0; 4]; 3];
            for r in 0..3 {
                for c in 0..4 {
                    p2[r][c] = vals[r * 4 + c];
                }
            }
            return Ok(Calibration::new(p2)?);
        }
    }
    Err(KittiError::Calib("no P2 line found".into()))
}

pub fn write_calib_file(calib: &Calibration) -> String {
    let f: Vec<String> = calib.p2.iter().flatten().map(|v| v.to_string()).collect();
    format!("P2: {}\n", f.join(" "))
}

/// Value ranges for synthetic scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub depth_range: (f64, f64),
    pub lateral_range: (f64, f64),
    /// Camera-frame y of the 3D center (y grows downward).
    pub height_range: (f64, f64),
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub tall_range: (f64, f64),
    pub categories: Vec<Category>,
    pub image_size: (u32, u32),
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub orientation_bins: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            depth_range: (8.0, 35.0),
            lateral_range: (-8.0, 8.0),
            height_range: (0.2, 1.4),
            length_range: (2.8, 4.6),
            width_range: (1.4, 1.9),
            tall_range: (1.3, 1.8),
            categories: vec![Category::Car, Category::Pedestrian, Category::Cyclist],
            image_size: (1242, 375),
            fx: 721.5377,
            fy: 721.5377,
            cx: 609.5593,
            cy: 172.854,
            orientation_bins: 12,
        }
    }
}

impl SceneGenConfig {
    pub fn calibration(&self) -> Calibration {
        Calibration::from_intrinsics(self.fx, self.fy, self.cx, self.cy)
            .expect("positive focals")
    }

    pub fn validate(&self) -> KittiResult<()> {
        let ordered = |r: (f64, f64)| r.0 < r.1 && r.0.is_finite() && r.1.is_finite();
        if !ordered(self.depth_range) || self.depth_range.0 <= 0.0 {
            return Err(KittiError::Precondition(format!(
                "depth_range {:?} must be ordered and positive",
                self.depth_range
            )));
        }
        for (name, r) in [
            ("lateral_range", self.lateral_range),
            ("height_range", self.height_range),
            ("length_range", self.length_range),
            ("width_range", self.width_range),
            ("tall_range", self.tall_range),
        ] {
            if !ordered(r) {
                return Err(KittiError::Precondition(format!("{} {:?} must be ordered", name, r)));
            }
        }
        if self.categories.is_empty() {
            return Err(KittiError::Precondition("categories must be non-empty".into()));
        }
        if self.orientation_bins < 2 {
            return Err(KittiError::Precondition("orientation_bins must be >= 2".into()));
        }
        Ok(())
    }
}

/// A set of objects plus the camera that sees them. `feature_seed` drives the
/// synthetic visual-feature grid standing in for a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object3D>,
    pub calib: Calibration,
    pub image_size: (u32, u32),
    pub feature_seed: u64,
}

impl Scene {
    pub fn k(&self) -> usize {
        self.objects.len()
    }

    /// Seeded stand-in for encoder features: `tokens` x `dim` values in
    /// [-1, 1], bit-reproducible per (feature_seed, tokens, dim).
    pub fn synthetic_features(&self, tokens: usize, dim: usize) -> crate::numeric::Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.feature_seed);
        let data: Vec<f64> = (0..tokens * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        crate::numeric::Tensor::new(vec![tokens, dim], data).expect("feature shape")
    }
}

/// Draws `k` objects whose projected centers land strictly inside the image.
/// Rejection-samples placements; deterministic per seed.
pub fn generate_scene(seed: u64, k: usize, cfg: &SceneGenConfig) -> KittiResult<Scene> {
    if k == 0 {
        return Err(KittiError::Precondition("scene needs at least one object (K >= 1)".into()));
    }
    cfg.validate()?;
    let calib = cfg.calibration();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feature_seed = rng.gen::<u64>();
    let mut objects = Vec::with_capacity(k);
    for obj_idx in 0..k {
        let mut placed = None;
        for _attempt in 0..1000 {
            let z = rng.gen_range(cfg.depth_range.0..cfg.depth_range.1);
            let x = rng.gen_range(cfg.lateral_range.0..cfg.lateral_range.1);
            let y = rng.gen_range(cfg.height_range.0..cfg.height_range.1);
            let dims = [
                rng.gen_range(cfg.length_range.0..cfg.length_range.1),
                rng.gen_range(cfg.width_range.0..cfg.width_range.1),
                rng.gen_range(cfg.tall_range.0..cfg.tall_range.1),
            ];
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let yaw = if yaw == -std::f64::consts::PI { std::f64::consts::PI } else { yaw };
            let category = cfg.categories[rng.gen_range(0..cfg.categories.len())];

            let center = [x, y, z];
            let Ok(center_proj) = project_point(center, &calib, cfg.image_size) else {
                continue;
            };
            if !(center_proj.0 > 0.0 && center_proj.0 < 1.0 && center_proj.1 > 0.0 && center_proj.1 < 1.0)
            {
                continue;
            }
            let b3d = Box3D { center, dims, yaw };
            let Some(bbox_norm) = projected_aabb(&b3d, &calib, cfg.image_size) else {
                continue;
            };
            let clipped = [
                bbox_norm[0].clamp(0.0, 1.0),
                bbox_norm[1].clamp(0.0, 1.0),
                bbox_norm[2].clamp(0.0, 1.0),
                bbox_norm[3].clamp(0.0, 1.0),
            ];
            let box2d = Box2D {
                l: (center_proj.0 - clipped[0]).max(0.0),
                r: (clipped[2] - center_proj.0).max(0.0),
                t: (center_proj.1 - clipped[1]).max(0.0),
                b: (clipped[3] - center_proj.1).max(0.0),
            };
            if box2d.area() <= 1e-8 {
                continue;
            }
            let (wpx, hpx) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
            let (bin, residual) = decompose_yaw(yaw, cfg.orientation_bins);
            placed = Some(Object3D {
                category,
                center_proj,
                box2d,
                dims,
                depth: z,
                yaw,
                orientation_bin: bin,
                orientation_residual: residual,
                location: [x, y + dims[2] / 2.0, z],
                bbox_px: [
                    clipped[0] * wpx,
                    clipped[1] * hpx,
                    clipped[2] * wpx,
                    clipped[3] * hpx,
                ],
                meta: LabelMeta::default(),
            });
            break;
        }
        match placed {
            Some(o) => objects.push(o),
            None => return Err(KittiError::Placement { object: obj_idx, attempts: 1000 }),
        }
    }
    Ok(Scene { objects, calib, image_size: cfg.image_size, feature_seed })
}

/// Normalized AABB of the eight projected box corners, or None if any corner
/// falls behind the camera.
fn projected_aabb(b: &Box3D, calib: &Calibration, image_size: (u32, u32)) -> Option<[f64; 4]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for corner in b.corners() {
        let (u, v) = project_point(corner, calib, image_size).ok()?;
        lo[0] = lo[0].min(u);
        lo[1] = lo[1].min(v);
        hi[0] = hi[0].max(u);
        hi[1] = hi[1].max(v);
    }
    Some([lo[0], lo[1], hi[0], hi[1]])
}
