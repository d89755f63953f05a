//! Scene layouts: labeled primitives, the text DSL, editing, local cropping
//! and a procedural street-scene generator.
//!
//! DSL, one statement per line (`#` starts a comment):
//!
//! ```text
//! palette <name> <r> <g> <b>
//! prim <label-name> <cuboid|ellipsoid|plane> <cx> <cy> <cz> <sx> <sy> <sz> <yaw_deg>
//! ```
//!
//! Palette lines assign ids in declaration order starting at 0.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::Point3;

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("{line}:{col}: {msg}")]
    Parse {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("unknown label id {0}")]
    UnknownLabel(u32),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("could not place {what} after {attempts} attempts")]
    Placement { what: &'static str, attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLabel {
    pub id: u32,
    pub name: String,
    pub color: [u8; 3],
}

pub const GROUND: u32 = 0;
pub const ROAD: u32 = 1;
pub const BUILDING: u32 = 2;
pub const CAR: u32 = 3;
pub const VEGETATION: u32 = 4;

/// ground, road, building, car, vegetation with their RGB colors.
pub fn default_palette() -> Vec<SemanticLabel> {
    [
        ("ground", [81, 0, 81]),
        ("road", [128, 64, 128]),
        ("building", [70, 70, 70]),
        ("car", [0, 0, 142]),
        ("vegetation", [107, 142, 35]),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (name, color))| SemanticLabel {
        id: i as u32,
        name: name.to_string(),
        color,
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Cuboid,
    Ellipsoid,
    Plane,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Cuboid => "cuboid",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Plane => "plane",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeKind> {
        match s {
            "cuboid" => Some(ShapeKind::Cuboid),
            "ellipsoid" => Some(ShapeKind::Ellipsoid),
            "plane" => Some(ShapeKind::Plane),
            _ => None,
        }
    }
}

/// One labeled solid. `extents` are full widths; an ellipsoid's semi-axes are
/// `extents / 2` and a plane is an `sx x sy` rectangle (`sz` unused).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticPrimitive {
    pub label: u32,
    pub shape: ShapeKind,
    pub center: Point3,
    pub extents: Point3,
    /// Radians about +z.
    pub yaw: f64,
}

impl SemanticPrimitive {
    pub fn new(label: u32, shape: ShapeKind, center: Point3, extents: Point3, yaw: f64) -> Self {
        Self {
            label,
            shape,
            center,
            extents,
            yaw,
        }
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        if !self.center.is_finite() || !self.extents.is_finite() || !self.yaw.is_finite() {
            return Err(LayoutError::InvalidPrimitive("non-finite value".into()));
        }
        let used_ok = match self.shape {
            ShapeKind::Plane => self.extents.x > 0.0 && self.extents.y > 0.0,
            _ => self.extents.x > 0.0 && self.extents.y > 0.0 && self.extents.z > 0.0,
        };
        if !used_ok {
            return Err(LayoutError::InvalidPrimitive(format!(
                "{} extents must be positive, got ({}, {}, {})",
                self.shape.as_str(),
                self.extents.x,
                self.extents.y,
                self.extents.z
            )));
        }
        Ok(())
    }

    /// Corners of the yaw-rotated footprint rectangle, counter-clockwise.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        footprint(self.center, self.extents, self.yaw, 0.0)
    }

    /// Whether `p` lies inside the oriented box grown by `margin` on every side.
    pub fn box_contains(&self, p: Point3, margin: f64) -> bool {
        let local = (p - self.center).rotate_z(-self.yaw);
        let h = self.extents * 0.5;
        let hz = if self.shape == ShapeKind::Plane {
            0.0
        } else {
            h.z
        };
        local.x.abs() <= h.x + margin
            && local.y.abs() <= h.y + margin
            && local.z.abs() <= hz + margin
    }
}

fn footprint(center: Point3, extents: Point3, yaw: f64, grow: f64) -> [(f64, f64); 4] {
    let (hx, hy) = (extents.x * 0.5 + grow, extents.y * 0.5 + grow);
    let (s, c) = yaw.sin_cos();
    let corner = |lx: f64, ly: f64| (center.x + c * lx - s * ly, center.y + s * lx + c * ly);
    [
        corner(-hx, -hy),
        corner(hx, -hy),
        corner(hx, hy),
        corner(-hx, hy),
    ]
}

/// Separating-axis overlap test for two convex quads.
fn quads_overlap(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % 4];
            let (nx, ny) = (y0 - y1, x1 - x0);
            let proj = |q: &[(f64, f64); 4]| {
                q.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
                        let d = nx * x + ny * y;
                        (lo.min(d), hi.max(d))
                    })
            };
            let (alo, ahi) = proj(a);
            let (blo, bhi) = proj(b);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

/// Ego pose in the layout frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: Point3,
    pub yaw: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Point3::ZERO,
            yaw: 0.0,
        }
    }

    pub fn new(translation: Point3, yaw: f64) -> Self {
        Self { translation, yaw }
    }

    /// World point expressed in the ego frame.
    pub fn to_local(&self, p: Point3) -> Point3 {
        (p - self.translation).rotate_z(-self.yaw)
    }

    pub fn to_world(&self, p: Point3) -> Point3 {
        p.rotate_z(self.yaw) + self.translation
    }

    /// Parses four numbers `x y z yaw_deg` separated by commas and/or whitespace.
    pub fn parse(s: &str) -> Result<Pose, String> {
        let nums: Vec<f64> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| format!("invalid number `{t}`"))
            })
            .collect::<Result<_, _>>()?;
        if nums.len() != 4 || nums.iter().any(|v| !v.is_finite()) {
            return Err(format!(
                "expected 4 finite values `x y z yaw_deg`, got `{s}`"
            ));
        }
        Ok(Pose::new(
            Point3::new(nums[0], nums[1], nums[2]),
            nums[3].to_radians(),
        ))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    pub palette: Vec<SemanticLabel>,
    pub primitives: Vec<SemanticPrimitive>,
}

impl Layout {
    pub fn new(palette: Vec<SemanticLabel>) -> Self {
        Self {
            palette,
            primitives: Vec::new(),
        }
    }

    pub fn label(&self, id: u32) -> Option<&SemanticLabel> {
        self.palette.iter().find(|l| l.id == id)
    }

    pub fn label_by_name(&self, name: &str) -> Option<&SemanticLabel> {
        self.palette.iter().find(|l| l.name == name)
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn count_label(&self, label: u32) -> usize {
        self.primitives.iter().filter(|p| p.label == label).count()
    }

    /// Appends `prim` in place.
    pub fn push(&mut self, prim: SemanticPrimitive) -> Result<(), LayoutError> {
        if self.label(prim.label).is_none() {
            return Err(LayoutError::UnknownLabel(prim.label));
        }
        prim.validate()?;
        self.primitives.push(prim);
        Ok(())
    }
}

/// Copy of `layout` with `prim` appended.
pub fn add_primitive(layout: &Layout, prim: SemanticPrimitive) -> Result<Layout, LayoutError> {
    let mut out = layout.clone();
    out.push(prim)?;
    Ok(out)
}

/// Copy of `layout` without the primitives for which `pred(index, prim)` holds.
pub fn remove_primitives<F>(layout: &Layout, mut pred: F) -> Layout
where
    F: FnMut(usize, &SemanticPrimitive) -> bool,
{
    Layout {
        palette: layout.palette.clone(),
        primitives: layout
            .primitives
            .iter()
            .enumerate()
            .filter(|(i, p)| !pred(*i, p))
            .map(|(_, p)| *p)
            .collect(),
    }
}

pub fn remove_label(layout: &Layout, label: u32) -> Layout {
    remove_primitives(layout, |_, p| p.label == label)
}

pub const DEFAULT_CROP_X: (f64, f64) = (-80.0, 80.0);
pub const DEFAULT_CROP_Y: (f64, f64) = (-20.0, 20.0);

fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Primitives expressed in the ego frame of `pose`, keeping those whose
/// center falls inside the given x/y bounds (inclusive).
pub fn crop_local(
    layout: &Layout,
    pose: &Pose,
    x_bounds: (f64, f64),
    y_bounds: (f64, f64),
) -> Layout {
    let primitives = layout
        .primitives
        .iter()
        .filter_map(|p| {
            let c = pose.to_local(p.center);
            let inside =
                c.x >= x_bounds.0 && c.x <= x_bounds.1 && c.y >= y_bounds.0 && c.y <= y_bounds.1;
            inside.then(|| SemanticPrimitive {
                center: c,
                yaw: wrap_angle(p.yaw - pose.yaw),
                ..*p
            })
        })
        .collect();
    Layout {
        palette: layout.palette.clone(),
        primitives,
    }
}

// ---------------------------------------------------------------------------
// DSL

fn parse_err(line: usize, col: usize, msg: impl Into<String>) -> LayoutError {
    LayoutError::Parse {
        line,
        col,
        msg: msg.into(),
    }
}

/// Whitespace-separated tokens with their 1-based character columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut col = 0;
    let mut start_col = 0;
    for (byte, ch) in line.char_indices() {
        col += 1;
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((start_col, &line[s..byte]));
            }
        } else if start.is_none() {
            start = Some(byte);
            start_col = col;
        }
    }
    if let Some(s) = start {
        out.push((start_col, &line[s..]));
    }
    out
}

pub fn parse_layout(text: &str) -> Result<Layout, LayoutError> {
    let mut layout = Layout::default();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let body = raw.split('#').next().unwrap_or("");
        let toks = tokens(body);
        let Some(&(kw_col, kw)) = toks.first() else {
            continue;
        };
        let end_col = body.chars().count() + 1;
        let num = |i: usize| -> Result<f64, LayoutError> {
            let (col, t) = toks[i];
            match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(parse_err(line_no, col, format!("non-finite number `{t}`"))),
                Err(_) => Err(parse_err(line_no, col, format!("invalid number `{t}`"))),
            }
        };
        match kw {
            "palette" => {
                if toks.len() != 5 {
                    let col = toks.get(5).map_or(end_col, |t| t.0);
                    return Err(parse_err(
                        line_no,
                        col,
                        format!(
                            "`palette` takes 4 arguments (name r g b), got {}",
                            toks.len() - 1
                        ),
                    ));
                }
                let (name_col, name) = toks[1];
                if layout.label_by_name(name).is_some() {
                    return Err(parse_err(
                        line_no,
                        name_col,
                        format!("duplicate label `{name}`"),
                    ));
                }
                let mut color = [0u8; 3];
                for k in 0..3 {
                    let (col, t) = toks[2 + k];
                    color[k] = t.parse::<u8>().map_err(|_| {
                        parse_err(
                            line_no,
                            col,
                            format!("color component `{t}` not in 0..=255"),
                        )
                    })?;
                }
                let id = layout.palette.len() as u32;
                layout.palette.push(SemanticLabel {
                    id,
                    name: name.to_string(),
                    color,
                });
            }
            "prim" => {
                if toks.len() != 10 {
                    let col = toks.get(10).map_or(end_col, |t| t.0);
                    return Err(parse_err(
                        line_no,
                        col,
                        format!("`prim` takes 9 arguments, got {}", toks.len() - 1),
                    ));
                }
                let (label_col, label_name) = toks[1];
                let label = layout
                    .label_by_name(label_name)
                    .ok_or_else(|| {
                        parse_err(line_no, label_col, format!("unknown label `{label_name}`"))
                    })?
                    .id;
                let (shape_col, shape_name) = toks[2];
                let shape = ShapeKind::parse(shape_name).ok_or_else(|| {
                    parse_err(
                        line_no,
                        shape_col,
                        format!("unknown shape kind `{shape_name}`"),
                    )
                })?;
                let v: Vec<f64> = (3..10).map(num).collect::<Result<_, _>>()?;
                let prim = SemanticPrimitive::new(
                    label,
                    shape,
                    Point3::new(v[0], v[1], v[2]),
                    Point3::new(v[3], v[4], v[5]),
                    v[6].to_radians(),
                );
                prim.validate()
                    .map_err(|e| parse_err(line_no, toks[6].0, e.to_string()))?;
                layout.primitives.push(prim);
            }
            other => {
                return Err(parse_err(
                    line_no,
                    kw_col,
                    format!("unknown statement `{other}`"),
                ));
            }
        }
    }
    Ok(layout)
}

/// Degrees text that parses back to exactly `yaw` radians whenever such a value exists.
fn yaw_degrees(yaw: f64) -> f64 {
    let d = yaw.to_degrees();
    if d.to_radians() == yaw {
        return d;
    }
    let (mut up, mut down) = (d, d);
    for _ in 0..64 {
        up = up.next_up();
        down = down.next_down();
        if up.to_radians() == yaw {
            return up;
        }
        if down.to_radians() == yaw {
            return down;
        }
    }
    d
}

pub const LAYOUT_HEADER: &str = "# layout v1";

pub fn serialize_layout(layout: &Layout) -> String {
    let mut out = String::new();
    out.push_str(LAYOUT_HEADER);
    out.push('\n');
    for l in &layout.palette {
        let _ = writeln!(
            out,
            "palette {} {} {} {}",
            l.name, l.color[0], l.color[1], l.color[2]
        );
    }
    for p in &layout.primitives {
        let name = layout.label(p.label).map_or("?", |l| l.name.as_str());
        let _ = writeln!(
            out,
            "prim {} {} {} {} {} {} {} {} {}",
            name,
            p.shape.as_str(),
            p.center.x,
            p.center.y,
            p.center.z,
            p.extents.x,
            p.extents.y,
            p.extents.z,
            yaw_degrees(p.yaw)
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Procedural scenes

/// Knobs for [`generate_random_scene`]. Count ranges are inclusive; the road
/// runs along x through the origin, where the ego vehicle sits.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub road_width: f64,
    pub car_count: (usize, usize),
    pub vegetation_count: (usize, usize),
    pub building_count: (usize, usize),
    pub area_x: (f64, f64),
    pub area_y: (f64, f64),
    /// Interval for car centers along the road, intersected with `area_x`.
    pub car_x: (f64, f64),
    /// Cars keep at least this much gap to each other and to the ego footprint.
    pub car_gap: f64,
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            road_width: 7.0,
            car_count: (1, 4),
            vegetation_count: (2, 6),
            building_count: (2, 5),
            area_x: (-40.0, 40.0),
            area_y: (-20.0, 20.0),
            car_x: (-40.0, 40.0),
            car_gap: 1.0,
            max_attempts: 500,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), LayoutError> {
        let bad = |m: &str| Err(LayoutError::InvalidParams(m.to_string()));
        if !(self.road_width > 0.0) {
            return bad("road_width must be positive");
        }
        for (name, r) in [
            ("car_count", self.car_count),
            ("vegetation_count", self.vegetation_count),
            ("building_count", self.building_count),
        ] {
            if r.0 > r.1 {
                return Err(LayoutError::InvalidParams(format!("{name} range is empty")));
            }
        }
        if !(self.area_x.0 < self.area_x.1 && self.area_y.0 < self.area_y.1) {
            return bad("area bounds must be proper intervals");
        }
        if self.car_x.0.max(self.area_x.0) + 5.0 > self.car_x.1.min(self.area_x.1) {
            return bad("car_x must overlap area_x by at least one car length");
        }
        if self.area_y.0 > -self.road_width / 2.0 || self.area_y.1 < self.road_width / 2.0 {
            return bad("area must contain the road");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        Ok(())
    }
}

/// Height of the road surface above the ground plane.
pub const ROAD_ELEVATION: f64 = 0.02;

const EGO_LENGTH: f64 = 4.5;
const EGO_WIDTH: f64 = 1.8;

/// Deterministic street scene for `seed`: ground plane, a road along x, cars
/// on the road, and vegetation and buildings beside it.
pub fn generate_random_scene(seed: u64, params: &SceneParams) -> Result<Layout, LayoutError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = Layout::new(default_palette());
    let (x0, x1) = params.area_x;
    let (y0, y1) = params.area_y;
    let half_road = params.road_width / 2.0;

    layout.push(SemanticPrimitive::new(
        GROUND,
        ShapeKind::Plane,
        Point3::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.0),
        Point3::new(x1 - x0, y1 - y0, 0.0),
        0.0,
    ))?;
    layout.push(SemanticPrimitive::new(
        ROAD,
        ShapeKind::Plane,
        Point3::new((x0 + x1) / 2.0, 0.0, ROAD_ELEVATION),
        Point3::new(x1 - x0, params.road_width, 0.0),
        0.0,
    ))?;

    let ego = footprint(
        Point3::ZERO,
        Point3::new(EGO_LENGTH, EGO_WIDTH, 0.0),
        0.0,
        params.car_gap,
    );
    let mut cars: Vec<[(f64, f64); 4]> = Vec::new();
    let (cx0, cx1) = (params.car_x.0.max(x0), params.car_x.1.min(x1));
    let n_cars = rng.random_range(params.car_count.0..=params.car_count.1);
    for _ in 0..n_cars {
        let mut placed = false;
        for _ in 0..params.max_attempts {
            let length = rng.random_range(3.8..4.8);
            let width = rng.random_range(1.6..1.9);
            let height = rng.random_range(1.4..1.7);
            let lane = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let y = lane * half_road / 2.0 + rng.random_range(-0.3..0.3);
            let x = rng.random_range(cx0 + length / 2.0..cx1 - length / 2.0);
            let heading: f64 = if rng.random_bool(0.5) { 0.0 } else { 180.0 };
            let yaw = (heading + rng.random_range(-4.0..4.0)).to_radians();
            let center = Point3::new(x, y, ROAD_ELEVATION + height / 2.0);
            let extents = Point3::new(length, width, height);
            let fp = footprint(center, extents, yaw, 0.0);
            if fp.iter().any(|&(_, cy)| cy.abs() > half_road) {
                continue;
            }
            let grown = footprint(center, extents, yaw, params.car_gap / 2.0);
            if quads_overlap(&grown, &ego) || cars.iter().any(|c| quads_overlap(&grown, c)) {
                continue;
            }
            cars.push(grown);
            layout.push(SemanticPrimitive::new(
                CAR,
                ShapeKind::Cuboid,
                center,
                extents,
                yaw,
            ))?;
            placed = true;
            break;
        }
        if !placed {
            return Err(LayoutError::Placement {
                what: "car",
                attempts: params.max_attempts,
            });
        }
    }

    // Roadside objects must clear the road strip and each other.
    let road = [
        (x0, -half_road),
        (x1, -half_road),
        (x1, half_road),
        (x0, half_road),
    ];
    let mut side: Vec<[(f64, f64); 4]> = Vec::new();
    let mut place_side = |rng: &mut ChaCha8Rng,
                          layout: &mut Layout,
                          label: u32,
                          shape: ShapeKind,
                          size: &dyn Fn(&mut ChaCha8Rng) -> Point3,
                          setback: (f64, f64),
                          what: &'static str|
     -> Result<(), LayoutError> {
        for _ in 0..params.max_attempts {
            let extents = size(rng);
            let side_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let offset = half_road + rng.random_range(setback.0..setback.1) + extents.y / 2.0;
            let y = side_sign * offset;
            if y - extents.y / 2.0 < y0 || y + extents.y / 2.0 > y1 {
                continue;
            }
            if x1 - x0 <= extents.x {
                continue;
            }
            let x = rng.random_range(x0 + extents.x / 2.0..x1 - extents.x / 2.0);
            let yaw: f64 = if shape == ShapeKind::Cuboid {
                rng.random_range(-3.0f64..3.0).to_radians()
            } else {
                0.0
            };
            let center = Point3::new(x, y, extents.z / 2.0);
            let fp = footprint(center, extents, yaw, 0.0);
            let grown = footprint(center, extents, yaw, 0.25);
            if quads_overlap(&fp, &road) || side.iter().any(|o| quads_overlap(&grown, o)) {
                continue;
            }
            side.push(grown);
            layout.push(SemanticPrimitive::new(label, shape, center, extents, yaw))?;
            return Ok(());
        }
        Err(LayoutError::Placement {
            what,
            attempts: params.max_attempts,
        })
    };

    let n_buildings = rng.random_range(params.building_count.0..=params.building_count.1);
    for _ in 0..n_buildings {
        place_side(
            &mut rng,
            &mut layout,
            BUILDING,
            ShapeKind::Cuboid,
            &|r| {
                Point3::new(
                    r.random_range(8.0..20.0),
                    r.random_range(6.0..12.0),
                    r.random_range(5.0..15.0),
                )
            },
            (3.0, 8.0),
            "building",
        )?;
    }
    let n_veg = rng.random_range(params.vegetation_count.0..=params.vegetation_count.1);
    for _ in 0..n_veg {
        place_side(
            &mut rng,
            &mut layout,
            VEGETATION,
            ShapeKind::Ellipsoid,
            &|r| {
                let d = r.random_range(2.0..5.0);
                Point3::new(d, d * r.random_range(0.8..1.2), r.random_range(3.0..7.0))
            },
            (0.5, 3.0),
            "vegetation",
        )?;
    }
    Ok(layout)
}
