//! Procedural scenes with closed-form geometry and appearance.
//!
//! Every scene lives in the canonical box `[-0.5, 0.5]³` and is built from at
//! most three primitives (sphere, cube, cylinder, torus) painted with one of
//! five palette colors. Because the geometry is analytic, the module can answer
//! point queries, render exact views (first-hit ray casting, no sampling) and
//! rasterize exact orthographic silhouettes, which makes it the ground truth
//! for every quality metric in the crate.
//!
//! Captions follow a closed grammar (see [`Caption`]):
//!
//! ```text
//! caption ::= object | object "on" object
//! object  ::= color shape
//! color   ::= "red" | "green" | "blue" | "yellow" | "white"
//! shape   ::= "sphere" | "cube" | "cylinder" | "torus"
//! ```
//!
//! Stacks are listed top first: "red sphere on blue cube" puts the sphere on
//! top of the cube.

use std::fmt;
use std::str::FromStr;

use glam::{DVec2, DVec3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::triplane::Plane;

/// Half extent of the canonical bounding box.
pub const BOX_HALF: f64 = 0.5;
/// Density assigned to the interior of every primitive, per scene unit.
pub const SIGMA_SOLID: f64 = 40.0;
/// Default silhouette dilation of the hull masks, texels.
pub const DEFAULT_HULL_DILATION: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 5] = [Self::Red, Self::Green, Self::Blue, Self::Yellow, Self::White];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [1.0, 0.0, 0.0],
            Self::Green => [0.0, 1.0, 0.0],
            Self::Blue => [0.0, 0.0, 1.0],
            Self::Yellow => [1.0, 1.0, 0.0],
            Self::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::White => "white",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Sphere, Self::Cube, Self::Cylinder, Self::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Cylinder => "cylinder",
            Self::Torus => "torus",
        }
    }
}

/// Kind-specific dimensions. Cylinders and tori have their axis along +y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Geometry {
    Sphere { radius: f64 },
    Cube { half: f64 },
    Cylinder { radius: f64, half_height: f64 },
    Torus { major: f64, minor: f64 },
}

impl Geometry {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Self::Sphere { .. } => ShapeKind::Sphere,
            Self::Cube { .. } => ShapeKind::Cube,
            Self::Cylinder { .. } => ShapeKind::Cylinder,
            Self::Torus { .. } => ShapeKind::Torus,
        }
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Self::Sphere { radius } => vec![radius],
            Self::Cube { half } => vec![half],
            Self::Cylinder { radius, half_height } => vec![radius, half_height],
            Self::Torus { major, minor } => vec![major, minor],
        }
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> DVec3 {
        match *self {
            Self::Sphere { radius } => DVec3::splat(radius),
            Self::Cube { half } => DVec3::splat(half),
            Self::Cylinder { radius, half_height } => DVec3::new(radius, half_height, radius),
            Self::Torus { major, minor } => DVec3::new(major + minor, minor, major + minor),
        }
    }

    /// Signed distance in the primitive's local frame.
    pub fn sdf(&self, q: DVec3) -> f64 {
        match *self {
            Self::Sphere { radius } => q.length() - radius,
            Self::Cube { half } => {
                let d = q.abs() - DVec3::splat(half);
                d.max(DVec3::ZERO).length() + d.max_element().min(0.0)
            }
            Self::Cylinder { radius, half_height } => {
                let d = DVec2::new(DVec2::new(q.x, q.z).length() - radius, q.y.abs() - half_height);
                d.max(DVec2::ZERO).length() + d.max_element().min(0.0)
            }
            Self::Torus { major, minor } => DVec2::new(DVec2::new(q.x, q.z).length() - major, q.y).length() - minor,
        }
    }

    /// Signed distance of the orthographic projection onto `plane`; `uv` are the
    /// local coordinates along the plane's (first, second) axes.
    pub fn projected_sdf(&self, plane: Plane, uv: DVec2) -> f64 {
        // (horizontal, vertical) split for y-axis primitives: on xz both axes
        // are horizontal; on xy and yz the y axis is vertical.
        let (h, v) = match plane {
            Plane::Xy => (uv.x, uv.y),
            Plane::Yz => (uv.y, uv.x),
            Plane::Xz => (uv.x, uv.y),
        };
        match *self {
            Self::Sphere { radius } => uv.length() - radius,
            Self::Cube { half } => box2d(uv, DVec2::splat(half)),
            Self::Cylinder { radius, half_height } => match plane {
                Plane::Xz => uv.length() - radius,
                _ => box2d(DVec2::new(h, v), DVec2::new(radius, half_height)),
            },
            Self::Torus { major, minor } => match plane {
                Plane::Xz => (uv.length() - major).abs() - minor,
                // side view: capsule around the segment [-major, major] on the horizontal axis
                _ => DVec2::new((h.abs() - major).max(0.0), v).length() - minor,
            },
        }
    }

    /// First entering hit distance of a ray whose origin lies outside the primitive.
    fn intersect(&self, o: DVec3, d: DVec3) -> Option<f64> {
        match *self {
            Self::Sphere { radius } => {
                let b = o.dot(d);
                let c = o.length_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = -b - s;
                let t1 = -b + s;
                if t0 >= 0.0 {
                    Some(t0)
                } else if t1 >= 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            }
            Self::Cube { half } => slab(o, d, DVec3::splat(half)).map(|(t0, _)| t0.max(0.0)),
            Self::Cylinder { radius, half_height } => {
                let (ya, yb) = slab_1d(o.y, d.y, half_height)?;
                let a = d.x * d.x + d.z * d.z;
                let b = o.x * d.x + o.z * d.z;
                let c = o.x * o.x + o.z * o.z - radius * radius;
                let (ra, rb) = if a < 1e-300 {
                    if c < 0.0 {
                        (f64::NEG_INFINITY, f64::INFINITY)
                    } else {
                        return None;
                    }
                } else {
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    ((-b - s) / a, (-b + s) / a)
                };
                let t0 = ya.max(ra);
                let t1 = yb.min(rb);
                (t0 <= t1 && t1 >= 0.0).then(|| t0.max(0.0))
            }
            Self::Torus { .. } => {
                // Sphere tracing with the exact torus distance never overshoots
                // the first root; it converges to it geometrically.
                let (t0, t1) = slab(o, d, self.half_extents())?;
                let mut t = t0.max(0.0);
                for _ in 0..100_000 {
                    if t > t1 {
                        return None;
                    }
                    let dist = self.sdf(o + d * t);
                    if dist < 1e-13 {
                        return Some(t);
                    }
                    t += dist;
                }
                None
            }
        }
    }
}

fn box2d(p: DVec2, half: DVec2) -> f64 {
    let d = p.abs() - half;
    d.max(DVec2::ZERO).length() + d.max_element().min(0.0)
}

fn slab_1d(o: f64, d: f64, half: f64) -> Option<(f64, f64)> {
    if d.abs() < 1e-300 {
        return (o.abs() <= half).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let a = (-half - o) / d;
    let b = (half - o) / d;
    Some((a.min(b), a.max(b)))
}

/// Ray / centered AABB interval, `None` when empty or fully behind the origin.
pub fn slab(o: DVec3, d: DVec3, half: DVec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let (a, b) = slab_1d(o[k], d[k], half[k])?;
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 <= t1 && t1 >= 0.0).then_some((t0, t1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub geometry: Geometry,
    pub center: DVec3,
    pub color: PaletteColor,
}

impl PrimitiveSpec {
    pub fn sdf(&self, p: DVec3) -> f64 {
        self.geometry.sdf(p - self.center)
    }

    pub fn contains(&self, p: DVec3) -> bool {
        self.sdf(p) < 0.0
    }

    pub fn intersect(&self, origin: DVec3, dir: DVec3) -> Option<f64> {
        self.geometry.intersect(origin - self.center, dir)
    }

    fn validate(&self) -> Result<()> {
        if self.geometry.dims().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidScene(format!("non-positive size in {:?}", self.geometry)));
        }
        if let Geometry::Torus { major, minor } = self.geometry {
            if minor >= major {
                return Err(Error::InvalidScene("torus minor radius must be below the major radius".into()));
            }
        }
        let hi = self.center.abs() + self.geometry.half_extents();
        if hi.max_element() > BOX_HALF {
            return Err(Error::InvalidScene(format!("{:?} leaves the canonical box", self.geometry)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaptionToken {
    Color(PaletteColor),
    Shape(ShapeKind),
    On,
}

/// A caption of the closed grammar: one to three `color shape` objects joined by "on".
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Caption(Vec<CaptionToken>);

impl Caption {
    /// Objects top first.
    pub fn objects(objects: &[(PaletteColor, ShapeKind)]) -> Self {
        let mut tokens = Vec::new();
        for (i, &(c, s)) in objects.iter().enumerate() {
            if i > 0 {
                tokens.push(CaptionToken::On);
            }
            tokens.push(CaptionToken::Color(c));
            tokens.push(CaptionToken::Shape(s));
        }
        Self(tokens)
    }

    pub fn tokens(&self) -> &[CaptionToken] {
        &self.0
    }

    /// `(color, shape)` pairs, top first.
    pub fn parse_objects(&self) -> Vec<(PaletteColor, ShapeKind)> {
        self.0
            .chunks(3)
            .map(|c| match (c[0], c[1]) {
                (CaptionToken::Color(col), CaptionToken::Shape(s)) => (col, s),
                _ => unreachable!("captions are validated on construction"),
            })
            .collect()
    }

    pub fn num_objects(&self) -> usize {
        self.0.len().div_ceil(3)
    }

    /// Every one- and two-object caption: 20 singles, then 400 stacks.
    pub fn enumerate() -> Vec<Caption> {
        let singles: Vec<_> = PaletteColor::ALL
            .iter()
            .flat_map(|&c| ShapeKind::ALL.iter().map(move |&s| (c, s)))
            .collect();
        let mut out: Vec<_> = singles.iter().map(|&o| Caption::objects(&[o])).collect();
        for &top in &singles {
            for &bottom in &singles {
                out.push(Caption::objects(&[top, bottom]));
            }
        }
        out
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self
            .0
            .iter()
            .map(|t| match t {
                CaptionToken::Color(c) => c.name(),
                CaptionToken::Shape(s) => s.name(),
                CaptionToken::On => "on",
            })
            .collect();
        f.write_str(&words.join(" "))
    }
}

impl FromStr for Caption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Caption(s.to_string());
        if words.is_empty() || words.len() % 3 != 2 || words.len() > 8 {
            return Err(bad());
        }
        let mut objects = Vec::new();
        for (i, chunk) in words.chunks(3).enumerate() {
            if i > 0 && chunk.len() < 2 {
                return Err(bad());
            }
            let color = PaletteColor::ALL.into_iter().find(|c| c.name() == chunk[0]).ok_or_else(bad)?;
            let shape = ShapeKind::ALL.into_iter().find(|k| k.name() == chunk[1]).ok_or_else(bad)?;
            if chunk.len() == 3 && chunk[2] != "on" {
                return Err(bad());
            }
            objects.push((color, shape));
        }
        Ok(Caption::objects(&objects))
    }
}

impl Serialize for Caption {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Caption {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub caption: Caption,
    /// Bottom to top; later primitives win color ties on overlap.
    pub primitives: Vec<PrimitiveSpec>,
    pub seed: u64,
}

/// How primitive dimensions are chosen when building a scene for a caption.
pub enum Sizing<'a, R: Rng> {
    /// Midpoint of every dimension range.
    Canonical,
    Random(&'a mut R),
}

fn dim_ranges(shape: ShapeKind, stacked: usize) -> Vec<(f64, f64)> {
    let base: Vec<(f64, f64)> = match (shape, stacked) {
        (ShapeKind::Sphere, 1) => vec![(0.30, 0.40)],
        (ShapeKind::Cube, 1) => vec![(0.22, 0.30)],
        (ShapeKind::Cylinder, 1) => vec![(0.20, 0.30), (0.25, 0.40)],
        (ShapeKind::Torus, 1) => vec![(0.24, 0.30), (0.08, 0.12)],
        (ShapeKind::Sphere, _) => vec![(0.18, 0.22)],
        (ShapeKind::Cube, _) => vec![(0.15, 0.19)],
        (ShapeKind::Cylinder, _) => vec![(0.15, 0.20), (0.12, 0.20)],
        (ShapeKind::Torus, _) => vec![(0.18, 0.24), (0.06, 0.08)],
    };
    let shrink = if stacked >= 3 { 0.7 } else { 1.0 };
    base.into_iter().map(|(a, b)| (a * shrink, b * shrink)).collect()
}

impl SceneSpec {
    /// Builds and validates a scene; the caption is derived from the primitives.
    pub fn new(primitives: Vec<PrimitiveSpec>, seed: u64) -> Result<Self> {
        if primitives.is_empty() || primitives.len() > 3 {
            return Err(Error::InvalidScene(format!("{} primitives (expected 1..=3)", primitives.len())));
        }
        for p in &primitives {
            p.validate()?;
        }
        let objects: Vec<_> = primitives.iter().rev().map(|p| (p.color, p.geometry.kind())).collect();
        Ok(Self { caption: Caption::objects(&objects), primitives, seed })
    }

    /// A stacked scene matching `caption`, centered vertically in the box.
    pub fn for_caption<R: Rng>(caption: &Caption, sizing: Sizing<'_, R>, seed: u64) -> Result<Self> {
        let objects = caption.parse_objects();
        let n = objects.len();
        let mut sizing = sizing;
        let mut geoms = Vec::new();
        for &(_, shape) in objects.iter().rev() {
            let dims: Vec<f64> = dim_ranges(shape, n)
                .into_iter()
                .map(|(a, b)| match &mut sizing {
                    Sizing::Canonical => 0.5 * (a + b),
                    Sizing::Random(rng) => rng.random_range(a..=b),
                })
                .collect();
            geoms.push(match shape {
                ShapeKind::Sphere => Geometry::Sphere { radius: dims[0] },
                ShapeKind::Cube => Geometry::Cube { half: dims[0] },
                ShapeKind::Cylinder => Geometry::Cylinder { radius: dims[0], half_height: dims[1] },
                ShapeKind::Torus => Geometry::Torus { major: dims[0], minor: dims[1] },
            });
        }
        let total: f64 = geoms.iter().map(|g| 2.0 * g.half_extents().y).sum();
        let mut y = -0.5 * total;
        let primitives = geoms
            .into_iter()
            .zip(objects.iter().rev())
            .map(|(geometry, &(color, _))| {
                let hy = geometry.half_extents().y;
                let center = DVec3::new(0.0, y + hy, 0.0);
                y += 2.0 * hy;
                PrimitiveSpec { geometry, center, color }
            })
            .collect();
        Self::new(primitives, seed)
    }

    pub fn canonical(caption: &Caption) -> Self {
        Self::for_caption::<crate::rng::Rng>(caption, Sizing::Canonical, 0).expect("canonical scenes are valid")
    }
}

/// Density and color at `p`: `SIGMA_SOLID` and the color of the last containing
/// primitive, or zero density and black outside every primitive.
pub fn query_scene(spec: &SceneSpec, p: DVec3) -> (f64, [f64; 3]) {
    spec.primitives
        .iter()
        .rev()
        .find(|prim| prim.contains(p))
        .map_or((0.0, [0.0; 3]), |prim| (SIGMA_SOLID, prim.color.rgb()))
}

/// First hit of a ray against the scene: `(distance, color)`.
pub fn cast_ray(spec: &SceneSpec, origin: DVec3, dir: DVec3) -> Option<(f64, PaletteColor)> {
    let mut best: Option<(f64, PaletteColor)> = None;
    for prim in &spec.primitives {
        if let Some(t) = prim.intersect(origin, dir) {
            if best.is_none_or(|(bt, _)| t <= bt) {
                best = Some((t, prim.color));
            }
        }
    }
    best
}

/// One supervision view. Pixel arrays are row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub camera: CameraPose,
    pub height: usize,
    pub width: usize,
    /// `height · width · 3`, black where the mask is 0.
    pub rgb: Vec<f32>,
    pub mask: Vec<u8>,
    /// Hit distance, `+∞` where the mask is 0.
    pub depth: Vec<f32>,
}

impl ViewRecord {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Exact first-hit rendering of `spec` through `camera`.
pub fn render_oracle_view(spec: &SceneSpec, camera: &CameraPose, height: usize, width: usize) -> Result<ViewRecord> {
    camera.validate()?;
    let n = height * width;
    let mut rgb = vec![0.0f32; n * 3];
    let mut mask = vec![0u8; n];
    let mut depth = vec![f32::INFINITY; n];
    for row in 0..height {
        for col in 0..width {
            let (o, d) = camera.pixel_ray(row, col, height, width);
            if let Some((t, color)) = cast_ray(spec, o, d) {
                let i = row * width + col;
                mask[i] = 1;
                depth[i] = t as f32;
                let c = color.rgb();
                for k in 0..3 {
                    rgb[i * 3 + k] = c[k] as f32;
                }
            }
        }
    }
    Ok(ViewRecord { camera: *camera, height, width, rgb, mask, depth })
}

/// Orthographic silhouettes on the three triplane planes, in plane layout
/// (rows follow the plane's second axis, columns its first).
#[derive(Clone, Debug, PartialEq)]
pub struct HullMasks {
    pub resolution: usize,
    pub o_xy: Vec<u8>,
    pub o_xz: Vec<u8>,
    pub o_yz: Vec<u8>,
}

impl HullMasks {
    pub fn get(&self, plane: Plane) -> &[u8] {
        match plane {
            Plane::Xy => &self.o_xy,
            Plane::Xz => &self.o_xz,
            Plane::Yz => &self.o_yz,
        }
    }

    pub fn full(resolution: usize) -> Self {
        let ones = vec![1u8; resolution * resolution];
        Self { resolution, o_xy: ones.clone(), o_xz: ones.clone(), o_yz: ones }
    }
}

/// Conservative square/shape overlap test on a 1-Lipschitz signed distance:
/// decided exactly unless the boundary passes within 1/256 texel of the square.
fn square_hits(sdf: &dyn Fn(DVec2) -> f64, c: DVec2, half: f64, depth: u32) -> bool {
    let d = sdf(c);
    if d <= 0.0 {
        return true;
    }
    if d > half * std::f64::consts::SQRT_2 {
        return false;
    }
    if depth == 0 {
        return true;
    }
    let h = half * 0.5;
    [(-h, -h), (h, -h), (-h, h), (h, h)]
        .into_iter()
        .any(|(dx, dy)| square_hits(sdf, c + DVec2::new(dx, dy), h, depth - 1))
}

/// Texel center (scene units) for texel index `k` at `resolution`.
pub fn texel_center(k: usize, resolution: usize) -> f64 {
    k as f64 / (resolution - 1) as f64 - BOX_HALF
}

pub fn make_hull_masks(spec: &SceneSpec, resolution: usize, dilation: usize) -> HullMasks {
    assert!(resolution >= 2, "hull masks need at least 2 texels per side");
    let half = 0.5 / (resolution - 1) as f64;
    let silhouette = |plane: Plane| -> Vec<u8> {
        let (a, b) = plane.axes();
        let sdf = |q: DVec2| -> f64 {
            spec.primitives
                .iter()
                .map(|p| p.geometry.projected_sdf(plane, q - DVec2::new(p.center[a], p.center[b])))
                .fold(f64::INFINITY, f64::min)
        };
        let mut out = vec![0u8; resolution * resolution];
        for row in 0..resolution {
            for col in 0..resolution {
                let c = DVec2::new(texel_center(col, resolution), texel_center(row, resolution));
                out[row * resolution + col] = square_hits(&sdf, c, half, 8) as u8;
            }
        }
        dilate(&out, resolution, dilation)
    };
    HullMasks {
        resolution,
        o_xy: silhouette(Plane::Xy),
        o_xz: silhouette(Plane::Xz),
        o_yz: silhouette(Plane::Yz),
    }
}

/// Chebyshev (square-neighbourhood) dilation by `r` texels.
fn dilate(mask: &[u8], res: usize, r: usize) -> Vec<u8> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut out = vec![0u8; mask.len()];
    for row in 0..res {
        for col in 0..res {
            if mask[row * res + col] == 0 {
                continue;
            }
            for rr in row.saturating_sub(r)..=(row + r).min(res - 1) {
                for cc in col.saturating_sub(r)..=(col + r).min(res - 1) {
                    out[rr * res + cc] = 1;
                }
            }
        }
    }
    out
}

/// Random caption: a single object with probability `p_single`, otherwise a two-object stack.
pub fn random_caption(rng: &mut impl Rng, p_single: f64) -> Caption {
    let object = |rng: &mut _| {
        (
            PaletteColor::ALL[rand::Rng::random_range(rng, 0..5)],
            ShapeKind::ALL[rand::Rng::random_range(rng, 0..4)],
        )
    };
    if rng.random_bool(p_single) {
        Caption::objects(&[object(rng)])
    } else {
        let top = object(rng);
        let bottom = object(rng);
        Caption::objects(&[top, bottom])
    }
}
