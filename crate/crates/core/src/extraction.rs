//! Observations back to layouts: pinhole unprojection, DBSCAN and box fitting.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::LabeledPointCloud;
use crate::geom::Point3;
use crate::layout::{
    default_palette, Layout, SemanticLabel, SemanticPrimitive, ShapeKind, BUILDING, CAR, GROUND,
    ROAD, VEGETATION,
};

/// Smallest box extent emitted by [`fit_box`].
pub const MIN_EXTENT: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractionError {
    #[error("map has {found} pixels, intrinsics expect {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid cluster parameters: eps {eps}, min_pts {min_pts}")]
    InvalidClusterParams { eps: f64, min_pts: usize },
    #[error("invalid size prior: {0}")]
    InvalidSizePrior(String),
    #[error("cannot fit a box to zero points")]
    EmptyInput,
}

/// Pinhole camera model in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, ExtractionError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(ExtractionError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ExtractionError::InvalidIntrinsics(
                "image size must be non-zero".into(),
            ));
        }
        let inside = (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if !inside {
            return Err(ExtractionError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Lifts every pixel with positive depth into the sensor frame
/// (camera +z forward becomes +x, camera +x becomes -y, camera +y becomes -z).
pub fn unproject_depth_semantic(
    depth: &[f32],
    semantics: &[u32],
    intr: &CameraIntrinsics,
) -> Result<LabeledPointCloud, ExtractionError> {
    intr.validate()?;
    let expected = intr.width * intr.height;
    for found in [depth.len(), semantics.len()] {
        if found != expected {
            return Err(ExtractionError::DimensionMismatch { expected, found });
        }
    }
    let mut cloud = LabeledPointCloud::new();
    for v in 0..intr.height {
        for u in 0..intr.width {
            let i = v * intr.width + u;
            let d = depth[i] as f64;
            if !(d > 0.0) {
                continue;
            }
            let xc = (u as f64 - intr.cx) * d / intr.fx;
            let yc = (v as f64 - intr.cy) * d / intr.fy;
            cloud.push(Point3::new(d, -xc, -yc), semantics[i]);
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self, ExtractionError> {
        let p = Self { eps, min_pts };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.eps > 0.0 && self.eps.is_finite() && self.min_pts >= 1 {
            Ok(())
        } else {
            Err(ExtractionError::InvalidClusterParams {
                eps: self.eps,
                min_pts: self.min_pts,
            })
        }
    }

    /// Defaults per label id; `None` for planar labels, which are not clustered.
    pub fn default_for(label: u32) -> Option<ClusterParams> {
        match label {
            GROUND | ROAD => None,
            CAR => Some(ClusterParams {
                eps: 0.8,
                min_pts: 10,
            }),
            VEGETATION => Some(ClusterParams {
                eps: 1.5,
                min_pts: 10,
            }),
            BUILDING => Some(ClusterParams {
                eps: 2.0,
                min_pts: 20,
            }),
            _ => Some(ClusterParams {
                eps: 1.0,
                min_pts: 10,
            }),
        }
    }
}

/// Label assigned to noise points by [`dbscan`].
pub const NOISE: i32 = -1;

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Point3], cell: f64) -> Grid {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Grid { cell, cells }
    }

    fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    fn for_each_within(&self, points: &[Point3], q: &Point3, r2: f64, mut f: impl FnMut(usize)) {
        let (kx, ky, kz) = Self::key(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &j in ids {
                            if (points[j] - *q).norm_squared() <= r2 {
                                f(j);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// DBSCAN with a grid neighbor index. Clusters are numbered in the order of
/// their lowest-index core point; a border point joins the first cluster to reach it.
pub fn dbscan(points: &[Point3], params: &ClusterParams) -> Vec<i32> {
    let n = points.len();
    let grid = Grid::new(points, params.eps);
    let r2 = params.eps * params.eps;
    let core: Vec<bool> = points
        .par_iter()
        .map(|p| {
            let mut count = 0;
            grid.for_each_within(points, p, r2, |_| count += 1);
            count >= params.min_pts
        })
        .collect();

    let mut ids = vec![NOISE; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || ids[seed] != NOISE {
            continue;
        }
        ids[seed] = next;
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            grid.for_each_within(points, &points[i], r2, |j| {
                if ids[j] == NOISE {
                    ids[j] = next;
                    if core[j] {
                        queue.push_back(j);
                    }
                }
            });
        }
        next += 1;
    }
    ids
}

/// Yaw-oriented box: extents are full side lengths in the rotated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point3,
    pub extents: Point3,
    pub yaw: f64,
}

/// Wraps into `[-pi/2, pi/2)`.
fn canonical_axis_yaw(yaw: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let y = (yaw + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if y >= FRAC_PI_2 {
        y - PI
    } else {
        y
    }
}

/// Box whose x axis follows the major principal direction of the XY spread.
pub fn fit_box(points: &[Point3]) -> Result<OrientedBox, ExtractionError> {
    if points.is_empty() {
        return Err(ExtractionError::EmptyInput);
    }
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    let half_gap = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let trace = sxx + syy;
    let yaw = if 2.0 * half_gap <= 1e-9 * trace + 1e-12 {
        0.0
    } else {
        canonical_axis_yaw(0.5 * (2.0 * sxy).atan2(sxx - syy))
    };

    Ok(box_at_yaw(points, yaw))
}

/// Yaw-rotated AABB of non-empty `points`.
fn box_at_yaw(points: &[Point3], yaw: f64) -> OrientedBox {
    let (s, c) = yaw.sin_cos();
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        let q = Point3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z);
        lo = lo.min(q);
        hi = hi.max(q);
    }
    let mid = (lo + hi) * 0.5;
    let ext = hi - lo;
    OrientedBox {
        center: Point3::new(c * mid.x - s * mid.y, s * mid.x + c * mid.y, mid.z),
        extents: Point3::new(
            ext.x.max(MIN_EXTENT),
            ext.y.max(MIN_EXTENT),
            ext.z.max(MIN_EXTENT),
        ),
        yaw,
    }
}

fn cross_xy(o: Point3, a: Point3, b: Point3) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull of the XY projection, counter-clockwise (monotone chain).
fn hull_xy(points: &[Point3]) -> Vec<Point3> {
    let mut pts: Vec<Point3> = points.iter().map(|p| Point3::new(p.x, p.y, 0.0)).collect();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point3> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point3>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross_xy(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Candidate yaws tried by [`fit_box_edges`] besides the hull edge directions.
const EDGE_FIT_GRID: usize = 90;

/// Box whose yaw minimizes the summed XY distance of points to their nearest
/// box side, over a 1 degree grid and the hull edge directions. Suits partially
/// seen rectangular objects, where PCA of an L-shaped return follows the diagonal.
pub fn fit_box_edges(points: &[Point3]) -> Result<OrientedBox, ExtractionError> {
    if points.is_empty() {
        return Err(ExtractionError::EmptyInput);
    }
    let hull = hull_xy(points);
    let mut yaws: Vec<f64> = (0..EDGE_FIT_GRID)
        .map(|k| canonical_axis_yaw(k as f64 * std::f64::consts::FRAC_PI_2 / EDGE_FIT_GRID as f64))
        .collect();
    if hull.len() >= 3 {
        for i in 0..hull.len() {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            yaws.push(canonical_axis_yaw((b.y - a.y).atan2(b.x - a.x)));
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for yaw in yaws {
        let (s, c) = yaw.sin_cos();
        let uv: Vec<(f64, f64)> = points
            .iter()
            .map(|p| (c * p.x + s * p.y, -s * p.x + c * p.y))
            .collect();
        let (mut lx, mut hx, mut ly, mut hy) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &(u, v) in &uv {
            lx = lx.min(u);
            hx = hx.max(u);
            ly = ly.min(v);
            hy = hy.max(v);
        }
        let cost: f64 = uv
            .iter()
            .map(|&(u, v)| (u - lx).min(hx - u).min(v - ly).min(hy - v))
            .sum();
        if best.is_none_or(|(c0, _)| cost < c0 - 1e-9) {
            best = Some((cost, yaw));
        }
    }
    let (_, yaw) = best.expect("at least one candidate yaw");
    Ok(box_at_yaw(points, yaw))
}

/// Footprint of one typical object of a label. Clusters are merged while their
/// union fits within `length + slack` by `width + slack`, and smaller boxes are
/// grown to the footprint on the side facing away from the viewpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizePrior {
    pub length: f64,
    pub width: f64,
    pub slack: f64,
}

impl SizePrior {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        let ok = self.width > 0.0
            && self.length >= self.width
            && self.length.is_finite()
            && self.slack >= 0.0
            && self.slack.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ExtractionError::InvalidSizePrior(format!(
                "length {} width {} slack {}, need length >= width > 0 and slack >= 0",
                self.length, self.width, self.slack
            )))
        }
    }

    /// Defaults per label id; only cars have a predictable footprint.
    pub fn default_for(label: u32) -> Option<SizePrior> {
        match label {
            CAR => Some(SizePrior {
                length: 4.4,
                width: 1.8,
                slack: 0.6,
            }),
            _ => None,
        }
    }

    fn admits(&self, b: &OrientedBox) -> bool {
        let (major, minor) = if b.extents.x >= b.extents.y {
            (b.extents.x, b.extents.y)
        } else {
            (b.extents.y, b.extents.x)
        };
        major <= self.length + self.slack && minor <= self.width + self.slack
    }
}

fn bev_gap(a: &[Point3], b: &[Point3]) -> f64 {
    let mut best = f64::INFINITY;
    for p in a {
        for q in b {
            best = best.min((p.x - q.x).powi(2) + (p.y - q.y).powi(2));
        }
    }
    best.sqrt()
}

/// Greedy agglomeration: largest cluster first, each absorbing the nearest
/// remaining cluster (within one prior length) whose union the prior admits.
fn merge_fragments(mut groups: Vec<Vec<Point3>>, prior: &SizePrior) -> Vec<Vec<Point3>> {
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let mut pending: Vec<Option<Vec<Point3>>> = groups.into_iter().map(Some).collect();
    let mut out = Vec::new();
    for i in 0..pending.len() {
        let Some(mut acc) = pending[i].take() else {
            continue;
        };
        loop {
            let mut near: Vec<(f64, usize)> = pending
                .iter()
                .enumerate()
                .filter_map(|(j, g)| g.as_ref().map(|g| (bev_gap(&acc, g), j)))
                .filter(|&(d, _)| d <= prior.length)
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let absorbed = near.into_iter().find_map(|(_, j)| {
                let mut union = acc.clone();
                union.extend_from_slice(pending[j].as_ref().expect("pending"));
                let b = fit_box_edges(&union).expect("union is non-empty");
                prior.admits(&b).then_some((j, union))
            });
            match absorbed {
                Some((j, union)) => {
                    pending[j] = None;
                    acc = union;
                }
                None => break,
            }
        }
        out.push(acc);
    }
    out
}

/// Grows the XY extents of `b` to `(tx, ty)` on the sides facing away from `viewpoint`.
fn grow_box(b: &OrientedBox, tx: f64, ty: f64, viewpoint: Point3) -> OrientedBox {
    let (s, c) = b.yaw.sin_cos();
    let away = Point3::new(b.center.x - viewpoint.x, b.center.y - viewpoint.y, 0.0);
    let mut out = *b;
    for (u, target, current) in [
        (Point3::new(c, s, 0.0), tx, &mut out.extents.x),
        (Point3::new(-s, c, 0.0), ty, &mut out.extents.y),
    ] {
        if *current >= target {
            continue;
        }
        let side = if away.dot(u) < 0.0 { -1.0 } else { 1.0 };
        out.center += u * (side * 0.5 * (target - *current));
        *current = target;
    }
    out
}

/// Width in radians of the azimuth interval covered by `points` seen from `viewpoint`,
/// measured around the direction to `towards`.
fn azimuth_span(points: impl Iterator<Item = Point3>, viewpoint: Point3, towards: Point3) -> f64 {
    let base = (towards.y - viewpoint.y).atan2(towards.x - viewpoint.x);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        let a = (p.y - viewpoint.y).atan2(p.x - viewpoint.x) - base;
        let a = (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        lo = lo.min(a);
        hi = hi.max(a);
    }
    hi - lo
}

fn corners_xy(b: &OrientedBox) -> impl Iterator<Item = Point3> + '_ {
    let (s, c) = b.yaw.sin_cos();
    [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
        .into_iter()
        .map(move |(fx, fy)| {
            let (u, v) = (fx * b.extents.x, fy * b.extents.y);
            Point3::new(b.center.x + c * u - s * v, b.center.y + s * u + c * v, 0.0)
        })
}

/// Grows a box fitted to `points` to the prior footprint. Of the two ways to
/// assign length and width to the box axes, keeps the one whose grown box adds
/// the least azimuth to what the points already cover, since unseen parts
/// must hide behind the observed surface.
fn complete_box(
    b: OrientedBox,
    points: &[Point3],
    prior: &SizePrior,
    viewpoint: Point3,
) -> OrientedBox {
    let observed = azimuth_span(points.iter().copied(), viewpoint, b.center);
    let candidates = [
        grow_box(&b, prior.length, prior.width, viewpoint),
        grow_box(&b, prior.width, prior.length, viewpoint),
    ];
    let excess = |g: &OrientedBox| azimuth_span(corners_xy(g), viewpoint, b.center) - observed;
    let (e0, e1) = (excess(&candidates[0]), excess(&candidates[1]));
    if e1 < e0 - 1e-9 {
        candidates[1]
    } else {
        candidates[0]
    }
}

/// Per-label clustering and shape choices for [`extract_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub palette: Vec<SemanticLabel>,
    /// Overrides of [`ClusterParams::default_for`].
    pub cluster: BTreeMap<u32, ClusterParams>,
    /// Overrides of [`default_shape`].
    pub shapes: BTreeMap<u32, ShapeKind>,
    /// Overrides of [`SizePrior::default_for`]; `None` disables the prior.
    pub priors: BTreeMap<u32, Option<SizePrior>>,
    /// Cloud-frame position of the sensor, used to decide which box sides were unseen.
    pub viewpoint: Point3,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            palette: default_palette(),
            cluster: BTreeMap::new(),
            shapes: BTreeMap::new(),
            priors: BTreeMap::new(),
            viewpoint: Point3::ZERO,
        }
    }
}

impl ExtractionConfig {
    pub fn cluster_params(&self, label: u32) -> Option<ClusterParams> {
        self.cluster
            .get(&label)
            .copied()
            .or_else(|| ClusterParams::default_for(label))
    }

    pub fn size_prior(&self, label: u32) -> Option<SizePrior> {
        self.priors
            .get(&label)
            .copied()
            .unwrap_or_else(|| SizePrior::default_for(label))
    }

    pub fn shape(&self, label: u32) -> ShapeKind {
        self.shapes
            .get(&label)
            .copied()
            .unwrap_or_else(|| default_shape(label))
    }
}

pub fn default_shape(label: u32) -> ShapeKind {
    match label {
        GROUND | ROAD => ShapeKind::Plane,
        VEGETATION => ShapeKind::Ellipsoid,
        _ => ShapeKind::Cuboid,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn plane_primitive(label: u32, points: &[Point3]) -> SemanticPrimitive {
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.min(*p);
        hi = hi.max(*p);
    }
    let z = median(points.iter().map(|p| p.z).collect());
    SemanticPrimitive::new(
        label,
        ShapeKind::Plane,
        Point3::new(0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y), z),
        Point3::new(
            (hi.x - lo.x).max(MIN_EXTENT),
            (hi.y - lo.y).max(MIN_EXTENT),
            0.0,
        ),
        0.0,
    )
}

/// Labels absent from the palette are skipped. Primitives come out ordered by
/// label id, then cluster id (descending merged size for labels with a size prior).
pub fn extract_layout(cloud: &LabeledPointCloud, config: &ExtractionConfig) -> Layout {
    let mut layout = Layout::new(config.palette.clone());
    for label in cloud.label_set() {
        if layout.label(label).is_none() {
            continue;
        }
        let points = cloud.points_with_label(label);
        let shape = config.shape(label);
        let params = config.cluster_params(label);
        let prims = match (shape, params) {
            (ShapeKind::Plane, _) | (_, None) => vec![plane_primitive(label, &points)],
            (_, Some(params)) => {
                let ids = dbscan(&points, &params);
                let count = ids
                    .iter()
                    .copied()
                    .max()
                    .map_or(0, |m| (m + 1).max(0) as usize);
                let mut groups = vec![Vec::new(); count];
                for (p, &id) in points.iter().zip(&ids) {
                    if id >= 0 {
                        groups[id as usize].push(*p);
                    }
                }
                groups.retain(|g| g.len() >= params.min_pts);
                let prior = config.size_prior(label);
                if let Some(prior) = &prior {
                    groups = merge_fragments(groups, prior);
                }
                groups
                    .into_iter()
                    .map(|g| {
                        let b = match &prior {
                            Some(prior) => complete_box(
                                fit_box_edges(&g).expect("cluster is non-empty"),
                                &g,
                                prior,
                                config.viewpoint,
                            ),
                            None => fit_box(&g).expect("cluster is non-empty"),
                        };
                        SemanticPrimitive::new(label, shape, b.center, b.extents, b.yaw)
                    })
                    .collect()
            }
        };
        for p in prims {
            layout.push(p).expect("extracted primitive is valid");
        }
    }
    layout
}
