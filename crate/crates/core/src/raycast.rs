//! Raycasting layouts into conditional range images.
//!
//! Hits are resolved by a fixed rule shared by the BVH and the brute-force
//! scan: take the smallest `t` in `(T_MIN, t_max]`, then among triangles whose
//! `t` lies within [`TIE_EPS`] of it, the lowest triangle index wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::LabeledPointCloud;
use crate::geom::{Aabb, Point3};
use crate::layout::{Layout, Pose};
use crate::meshing::{mesh_layout, MeshError, TriangleMesh, DEFAULT_TESSELLATION};
use crate::sensor::{RangeImage, Ray, SensorSpec, DEPTH_CHANNEL, SEMANTIC_CHANNEL};

/// Self-hit epsilon: intersections closer than this are ignored.
pub const T_MIN: f64 = 1e-4;
/// Hits closer than this in `t` count as ties.
pub const TIE_EPS: f64 = 1e-9;

const LEAF_SIZE: usize = 4;
const BOX_PAD: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle: usize,
    pub label: u32,
    pub barycentric: [f64; 3],
    /// Unit geometric normal (winding order, not facing-corrected).
    pub normal: Point3,
}

/// Two-sided Moller-Trumbore. Returns `(t, u, v)` for any `t`.
#[inline]
pub fn intersect_triangle(ray: &Ray, a: Point3, b: Point3, c: Point3) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let p = ray.dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() <= 1e-14 * e1.norm() * e2.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - a;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some((e2.dot(q) * inv, u, v))
}

fn make_hit(mesh: &TriangleMesh, tri: usize, t: f64, u: f64, v: f64) -> Hit {
    let [a, b, c] = mesh.corners(tri);
    Hit {
        t,
        triangle: tri,
        label: mesh.triangle_labels[tri],
        barycentric: [1.0 - u - v, u, v],
        normal: (b - a).cross(c - a).normalized(),
    }
}

#[inline]
fn valid_t(t: f64, t_max: f64) -> bool {
    t > T_MIN && t <= t_max
}

/// Reference query: every triangle is tested.
pub fn intersect_brute_force(mesh: &TriangleMesh, ray: &Ray, t_max: f64) -> Option<Hit> {
    let hits: Vec<(usize, f64, f64, f64)> = (0..mesh.triangle_count())
        .filter_map(|i| {
            let [a, b, c] = mesh.corners(i);
            intersect_triangle(ray, a, b, c)
                .filter(|&(t, _, _)| valid_t(t, t_max))
                .map(|(t, u, v)| (i, t, u, v))
        })
        .collect();
    let best_t = hits.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
    hits.into_iter()
        .filter(|h| h.1 <= best_t + TIE_EPS)
        .min_by_key(|h| h.0)
        .map(|(i, t, u, v)| make_hit(mesh, i, t, u, v))
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Median-split bounding volume hierarchy over a mesh's triangles.
#[derive(Debug, Clone, Default)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Bvh {
        let n = mesh.triangle_count();
        if n == 0 {
            return Bvh::default();
        }
        let boxes: Vec<Aabb> = (0..n).map(|t| Aabb::from_points(mesh.corners(t))).collect();
        let centroids: Vec<Point3> = boxes.iter().map(|b| b.center()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        build_node(&mut nodes, &mut order, 0, n, &boxes, &centroids);
        Bvh { nodes, order }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(b: &Bvh, i: usize) -> usize {
            match b.nodes[i].kind {
                NodeKind::Leaf { .. } => 1,
                NodeKind::Inner { left, right } => 1 + walk(b, left).max(walk(b, right)),
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            walk(self, 0)
        }
    }

    /// Leaves as `(bounds, triangle ids)`, plus parent/child box pairs, for invariant checks.
    pub fn leaves(&self) -> Vec<(Aabb, Vec<usize>)> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Leaf { start, count } => {
                    Some((n.bounds, self.order[start..start + count].to_vec()))
                }
                NodeKind::Inner { .. } => None,
            })
            .collect()
    }

    pub fn parent_child_boxes(&self) -> Vec<(Aabb, Aabb)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let NodeKind::Inner { left, right } = n.kind {
                out.push((n.bounds, self.nodes[left].bounds));
                out.push((n.bounds, self.nodes[right].bounds));
            }
        }
        out
    }

    /// Nearest hit along `ray` with `T_MIN < t <= t_max`.
    pub fn intersect(&self, mesh: &TriangleMesh, ray: &Ray, t_max: f64) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Point3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best_t = f64::INFINITY;
        self.visit(ray, inv, t_max, |tri, limit| {
            let [a, b, c] = mesh.corners(tri);
            if let Some((t, _, _)) = intersect_triangle(ray, a, b, c) {
                if valid_t(t, t_max) && t < best_t {
                    best_t = t;
                    *limit = t;
                }
            }
        });
        if !best_t.is_finite() {
            return None;
        }
        let tie = best_t + TIE_EPS;
        let mut best: Option<(usize, f64, f64, f64)> = None;
        self.visit(ray, inv, tie.min(t_max), |tri, _| {
            if best.is_some_and(|b| b.0 <= tri) {
                return;
            }
            let [a, b, c] = mesh.corners(tri);
            if let Some((t, u, v)) = intersect_triangle(ray, a, b, c) {
                if valid_t(t, t_max) && t <= tie {
                    best = Some((tri, t, u, v));
                }
            }
        });
        best.map(|(i, t, u, v)| make_hit(mesh, i, t, u, v))
    }

    /// Depth-first traversal, near child first. `on_triangle` may shrink the limit.
    fn visit(
        &self,
        ray: &Ray,
        inv: Point3,
        t_max: f64,
        mut on_triangle: impl FnMut(usize, &mut f64),
    ) {
        let mut limit = t_max;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if slab(&node.bounds, ray, inv, limit).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &tri in &self.order[start..start + count] {
                        on_triangle(tri, &mut limit);
                    }
                }
                NodeKind::Inner { left, right } => {
                    let el = slab(&self.nodes[left].bounds, ray, inv, limit);
                    let er = slab(&self.nodes[right].bounds, ray, inv, limit);
                    match (el, er) {
                        (Some(a), Some(b)) => {
                            if a <= b {
                                stack.push(right);
                                stack.push(left);
                            } else {
                                stack.push(left);
                                stack.push(right);
                            }
                        }
                        (Some(_), None) => stack.push(left),
                        (None, Some(_)) => stack.push(right),
                        (None, None) => {}
                    }
                }
            }
        }
    }
}

/// Entry distance of `ray` into the padded box if it is reached before `t_max`.
#[inline]
fn slab(b: &Aabb, ray: &Ray, inv: Point3, t_max: f64) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let lo = (b.min[axis] - BOX_PAD - ray.origin[axis]) * inv[axis];
        let hi = (b.max[axis] + BOX_PAD - ray.origin[axis]) * inv[axis];
        // NaN (origin on the slab plane with a parallel ray) leaves the interval unchanged.
        t0 = t0.max(lo.min(hi));
        t1 = t1.min(lo.max(hi));
    }
    (t0 <= t1 && t1 >= 0.0 && t0 <= t_max).then_some(t0)
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    start: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[Point3],
) -> usize {
    let bounds = order[start..end]
        .iter()
        .fold(Aabb::EMPTY, |b, &t| b.union(boxes[t]));
    let idx = nodes.len();
    nodes.push(Node {
        bounds,
        kind: NodeKind::Leaf {
            start,
            count: end - start,
        },
    });
    if end - start <= LEAF_SIZE {
        return idx;
    }
    let cb = Aabb::from_points(order[start..end].iter().map(|&t| centroids[t]));
    let axis = cb.longest_axis();
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    let left = build_node(nodes, order, start, mid, boxes, centroids);
    let right = build_node(nodes, order, mid, end, boxes, centroids);
    nodes[idx].kind = NodeKind::Inner { left, right };
    idx
}

/// Free-function form of [`Bvh::intersect`].
pub fn intersect(bvh: &Bvh, mesh: &TriangleMesh, ray: &Ray, t_max: f64) -> Option<Hit> {
    bvh.intersect(mesh, ray, t_max)
}

/// A meshed layout with its acceleration structure.
#[derive(Debug, Clone)]
pub struct RaycastScene {
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
}

/// Per-pixel render products beyond the image itself.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// Channels: depth (m), semantic label id.
    pub image: RangeImage,
    /// |cos| of the angle between ray and surface normal; 0 on misses.
    pub incidence_cos: Vec<f32>,
    /// Index of the layout primitive hit by each pixel, `-1` on misses.
    pub sources: Vec<i32>,
}

impl RaycastScene {
    pub fn new(layout: &Layout) -> Result<Self, MeshError> {
        Self::with_tessellation(layout, DEFAULT_TESSELLATION)
    }

    pub fn with_tessellation(layout: &Layout, tessellation: usize) -> Result<Self, MeshError> {
        let mesh = mesh_layout(layout, tessellation)?;
        Ok(Self::from_mesh(mesh))
    }

    pub fn from_mesh(mesh: TriangleMesh) -> Self {
        let bvh = Bvh::build(&mesh);
        Self { mesh, bvh }
    }

    pub fn intersect(&self, ray: &Ray, t_max: f64) -> Option<Hit> {
        self.bvh.intersect(&self.mesh, ray, t_max)
    }

    /// One ray per pixel from `pose` lifted by the sensor height.
    pub fn render(&self, spec: &SensorSpec, pose: &Pose) -> RenderOutput {
        let origin = pose.translation + Point3::new(0.0, 0.0, spec.origin_height);
        let (rows, cols) = (spec.rows, spec.cols);
        let per_row: Vec<Vec<(f32, f32, f32, i32)>> = (0..rows)
            .into_par_iter()
            .map(|v| {
                (0..cols)
                    .map(|u| {
                        let (yaw, pitch) = spec.center_angles(u, v);
                        let mut ray = Ray::from_angles(origin, yaw, pitch);
                        ray.dir = ray.dir.rotate_z(pose.yaw);
                        match self.intersect(&ray, spec.max_range) {
                            Some(h) => (
                                h.t as f32,
                                h.label as f32,
                                h.normal.dot(ray.dir).abs() as f32,
                                self.mesh.triangle_sources[h.triangle] as i32,
                            ),
                            None => (0.0, 0.0, 0.0, -1),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut image = RangeImage::zeros(*spec, 2);
        let mut incidence_cos = vec![0.0; spec.pixel_count()];
        let mut sources = vec![-1; spec.pixel_count()];
        for (v, row) in per_row.into_iter().enumerate() {
            for (u, (d, l, c, s)) in row.into_iter().enumerate() {
                image.set(DEPTH_CHANNEL, u, v, d);
                image.set(SEMANTIC_CHANNEL, u, v, l);
                incidence_cos[v * cols + u] = c;
                sources[v * cols + u] = s;
            }
        }
        RenderOutput {
            image,
            incidence_cos,
            sources,
        }
    }
}

/// Two-channel (depth, semantic) conditional image of `layout` seen from `pose`.
pub fn render_conditional(
    layout: &Layout,
    spec: &SensorSpec,
    pose: &Pose,
) -> Result<RangeImage, MeshError> {
    Ok(RaycastScene::new(layout)?.render(spec, pose).image)
}

/// Area-weighted uniform samples on the mesh surface; `round(area * density)` points.
pub fn surface_sample(mesh: &TriangleMesh, points_per_m2: f64, seed: u64) -> LabeledPointCloud {
    let mut cdf = Vec::with_capacity(mesh.triangle_count());
    let mut acc = 0.0;
    for t in 0..mesh.triangle_count() {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    if !(points_per_m2 > 0.0) || acc <= 0.0 {
        return LabeledPointCloud::new();
    }
    let n = (acc * points_per_m2).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = LabeledPointCloud::with_capacity(n);
    for _ in 0..n {
        let r = rng.random::<f64>() * acc;
        let tri = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        let [a, b, c] = mesh.corners(tri);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
        cloud.push(p, mesh.triangle_labels[tri]);
    }
    cloud
}

/// Linear dropout model in normalized range and incidence angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaydropParams {
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Default for RaydropParams {
    fn default() -> Self {
        Self {
            p0: 0.02,
            p1: 0.08,
            p2: 0.15,
        }
    }
}

impl RaydropParams {
    pub const NONE: RaydropParams = RaydropParams {
        p0: 0.0,
        p1: 0.0,
        p2: 0.0,
    };

    pub fn probability(&self, depth: f64, max_range: f64, incidence_cos: f64) -> f64 {
        (self.p0 + self.p1 * (depth / max_range) + self.p2 * (1.0 - incidence_cos.abs()))
            .clamp(0.0, 1.0)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` keyed by `(seed, u, v)`.
#[inline]
pub(crate) fn pixel_uniform(seed: u64, u: usize, v: usize) -> f64 {
    let h = splitmix64(splitmix64(seed ^ 0x5eed_0000_0000_0000) ^ ((v as u64) << 32 | u as u64));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Drops returns from the depth channel only. Without `incidence_cos` the
/// incidence term is treated as head-on.
pub fn apply_raydrop(
    img: &RangeImage,
    params: &RaydropParams,
    incidence_cos: Option<&[f32]>,
    seed: u64,
) -> RangeImage {
    let mut out = img.clone();
    let spec = img.spec;
    for v in 0..spec.rows {
        for u in 0..spec.cols {
            let d = img.depth(u, v) as f64;
            if d <= 0.0 {
                continue;
            }
            let c = incidence_cos.map_or(1.0, |ic| ic[v * spec.cols + u] as f64);
            let p = params.probability(d, spec.max_range, c);
            if pixel_uniform(seed, u, v) < p {
                out.set(DEPTH_CHANNEL, u, v, 0.0);
            }
        }
    }
    out
}
