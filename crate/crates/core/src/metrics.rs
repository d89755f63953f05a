//! Distribution metrics for generated clouds and range images.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::LabeledPointCloud;
use crate::geom::Point3;
use crate::layout::{Layout, Pose, CAR};
use crate::meshing::MeshError;
use crate::raycast::RaycastScene;
use crate::sensor::{normalize_depth, range_image_to_point_cloud, RangeImage, SensorSpec};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("histogram grids differ")]
    GridMismatch,
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least 2 feature vectors, got {0}")]
    TooFewSamples(usize),
    #[error("feature rows have inconsistent or non-finite entries")]
    InvalidFeatures,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Axis-aligned XY binning window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub bins_x: usize,
    pub bins_y: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            x_min: -80.0,
            x_max: 80.0,
            y_min: -80.0,
            y_max: 80.0,
            bins_x: 100,
            bins_y: 100,
        }
    }
}

impl BevGrid {
    /// Square window of half-width `half` around `(cx, cy)` with `cell`-sized bins.
    pub fn centered(cx: f64, cy: f64, half: f64, cell: f64) -> Result<Self, MetricsError> {
        let bins = (2.0 * half / cell).round();
        if !(bins >= 1.0) {
            return Err(MetricsError::InvalidGrid(format!(
                "half-width {half} with cell {cell}"
            )));
        }
        Ok(Self {
            x_min: cx - half,
            x_max: cx + half,
            y_min: cy - half,
            y_max: cy + half,
            bins_x: bins as usize,
            bins_y: bins as usize,
        })
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.bins_x == 0 || self.bins_y == 0 {
            return Err(MetricsError::InvalidGrid(
                "bin counts must be at least 1".into(),
            ));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(MetricsError::InvalidGrid(
                "bounds must be increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let ix = ((x - self.x_min) / (self.x_max - self.x_min) * self.bins_x as f64) as usize;
        let iy = ((y - self.y_min) / (self.y_max - self.y_min) * self.bins_y as f64) as usize;
        Some(iy.min(self.bins_y - 1) * self.bins_x + ix.min(self.bins_x - 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub grid: BevGrid,
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
    /// True when no point fell inside the grid.
    pub empty: bool,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
    }
}

pub fn bev_histogram(points: &[Point3], grid: &BevGrid) -> Result<Histogram, MetricsError> {
    grid.validate()?;
    let mut counts = vec![0u64; grid.bins_x * grid.bins_y];
    for p in points {
        if let Some(c) = grid.cell_of(p.x, p.y) {
            counts[c] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let probabilities = if total == 0 {
        vec![0.0; counts.len()]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    Ok(Histogram {
        grid: *grid,
        counts,
        probabilities,
        empty: total == 0,
    })
}

fn kl_to_mixture(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / (0.5 * (a + b))).ln())
        .sum()
}

/// Jensen-Shannon divergence between probability vectors, in nats.
pub fn jsd_probabilities(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::GridMismatch);
    }
    let v = 0.5 * kl_to_mixture(p, q) + 0.5 * kl_to_mixture(q, p);
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}

pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64, MetricsError> {
    if p.grid != q.grid {
        return Err(MetricsError::GridMismatch);
    }
    jsd_probabilities(&p.probabilities, &q.probabilities)
}

/// Uniform-cell spatial hash answering exact nearest-neighbor queries.
pub struct NearestGrid<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    keys: Vec<(i64, i64, i64)>,
    lo: (i64, i64, i64),
    hi: (i64, i64, i64),
}

impl<'a> NearestGrid<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for p in points {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        let ext = if points.is_empty() {
            Point3::ZERO
        } else {
            hi - lo
        };
        // about two points per occupied cell for surface-like clouds
        let area = (ext.x * ext.y + ext.y * ext.z + ext.x * ext.z).max(1e-12);
        let cell = (2.0 * area / points.len().max(1) as f64).sqrt().max(1e-6);
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i as u32);
        }
        let keys: Vec<_> = cells.keys().copied().collect();
        let (klo, khi) = if points.is_empty() {
            ((0, 0, 0), (0, 0, 0))
        } else {
            (key(&lo, cell), key(&hi, cell))
        };
        Self {
            points,
            cell,
            cells,
            keys,
            lo: klo,
            hi: khi,
        }
    }

    /// Squared distance to the closest point, `None` for an empty set.
    pub fn nearest_squared(&self, q: &Point3) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let k = key(q, self.cell);
        let reach = [
            (k.0 - self.lo.0).abs().max((k.0 - self.hi.0).abs()),
            (k.1 - self.lo.1).abs().max((k.1 - self.hi.1).abs()),
            (k.2 - self.lo.2).abs().max((k.2 - self.hi.2).abs()),
        ]
        .into_iter()
        .max()
        .unwrap();
        let mut best = f64::INFINITY;
        let visit = |ids: &Vec<u32>, best: &mut f64| {
            for &i in ids {
                let d = (self.points[i as usize] - *q).norm_squared();
                if d < *best {
                    *best = d;
                }
            }
        };
        for r in 0..=reach {
            let shell = if r == 0 {
                1
            } else {
                (2 * r + 1).pow(3) - (2 * r - 1).pow(3)
            };
            if shell as usize > self.keys.len() {
                // cheaper to finish with every remaining cell than to walk sparse shells
                for c in &self.keys {
                    let cheb = (c.0 - k.0)
                        .abs()
                        .max((c.1 - k.1).abs())
                        .max((c.2 - k.2).abs());
                    if cheb >= r {
                        visit(&self.cells[c], &mut best);
                    }
                }
                break;
            } else {
                for dx in -r..=r {
                    for dy in -r..=r {
                        let edge = dx.abs() == r || dy.abs() == r;
                        let dzs: Vec<i64> = if edge {
                            (-r..=r).collect()
                        } else {
                            vec![-r, r]
                        };
                        for dz in dzs {
                            if let Some(ids) = self.cells.get(&(k.0 + dx, k.1 + dy, k.2 + dz)) {
                                visit(ids, &mut best);
                            }
                        }
                    }
                }
            }
            let cleared = r as f64 * self.cell;
            if best <= cleared * cleared {
                break;
            }
        }
        Some(best)
    }
}

fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

fn mean_nearest(queries: &[Point3], grid: &NearestGrid) -> f64 {
    let d: Vec<f64> = queries
        .par_iter()
        .map(|q| grid.nearest_squared(q).unwrap())
        .collect();
    d.iter().sum::<f64>() / queries.len() as f64
}

/// Mean squared nearest-neighbor distance in both directions, summed.
pub fn chamfer(x: &[Point3], y: &[Point3]) -> Result<f64, MetricsError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::Empty("chamfer point set"));
    }
    Ok(mean_nearest(x, &NearestGrid::new(y)) + mean_nearest(y, &NearestGrid::new(x)))
}

/// For each reference cloud, the closest generated cloud by Chamfer distance, averaged.
pub fn mmd(generated: &[Vec<Point3>], reference: &[Vec<Point3>]) -> Result<f64, MetricsError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty("cloud set"));
    }
    if generated.iter().chain(reference).any(|c| c.is_empty()) {
        return Err(MetricsError::Empty("cloud in set"));
    }
    let grids: Vec<NearestGrid> = generated.iter().map(|c| NearestGrid::new(c)).collect();
    let mut total = 0.0;
    for y in reference {
        let gy = NearestGrid::new(y);
        let best = generated
            .iter()
            .zip(&grids)
            .map(|(x, gx)| mean_nearest(x, &gy) + mean_nearest(y, gx))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / reference.len() as f64)
}

/// `N x D` matrix of feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows
            .iter()
            .any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite()))
        {
            return Err(MetricsError::InvalidFeatures);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>), MetricsError> {
        if self.rows < 2 {
            return Err(MetricsError::TooFewSamples(self.rows));
        }
        let m = DMatrix::from_row_slice(self.rows, self.dim, &self.data);
        let mean = DVector::from_iterator(self.dim, m.column_iter().map(|c| c.mean()));
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (self.rows as f64 - 1.0);
        Ok((mean, cov))
    }
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians given by their moments.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let d = mu_a.len();
    for n in [
        mu_b.len(),
        cov_a.nrows(),
        cov_a.ncols(),
        cov_b.nrows(),
        cov_b.ncols(),
    ] {
        if n != d {
            return Err(MetricsError::DimensionMismatch(d, n));
        }
    }
    let root_a = sym_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = inner
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(value.max(0.0))
}

pub fn frechet(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    if a.dim != b.dim {
        return Err(MetricsError::DimensionMismatch(a.dim, b.dim));
    }
    let (ma, ca) = a.moments()?;
    let (mb, cb) = b.moments()?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

pub const LOG_DEPTH_BINS: usize = 64;

/// Histogram of normalized log depth over returned pixels, as fractions of all pixels.
/// A stand-in feature for range-image Frechet comparisons, not a learned embedding.
pub fn log_depth_features(img: &RangeImage) -> Vec<f64> {
    let mut f = vec![0.0; LOG_DEPTH_BINS];
    let n = img.spec.pixel_count() as f64;
    for &d in img.channel(crate::sensor::DEPTH_CHANNEL) {
        if d > 0.0 {
            let max = img.spec.max_range;
            let x = normalize_depth((d as f64).min(max), max).unwrap_or(1.0);
            let b = ((x * LOG_DEPTH_BINS as f64) as usize).min(LOG_DEPTH_BINS - 1);
            f[b] += 1.0 / n;
        }
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutConsistency {
    pub box_recall: f64,
    pub bev_iou: f64,
}

/// Horizontal and upward dilation of car boxes in [`layout_consistency`].
pub const BOX_MARGIN: f64 = 0.5;
/// Returns closer than this to a car's base are ignored so ground under a
/// missing car does not count as the car.
pub const BASE_CLEARANCE: f64 = 0.3;
pub const MIN_BOX_POINTS: usize = 20;

/// Sensor-frame points of a cloud observed from `pose`, expressed in the layout frame.
pub fn sensor_to_world(points: &[Point3], spec: &SensorSpec, pose: &Pose) -> Vec<Point3> {
    let lift = Point3::new(0.0, 0.0, spec.origin_height);
    points
        .iter()
        .map(|p| p.rotate_z(pose.yaw) + pose.translation + lift)
        .collect()
}

/// How well a sensor-frame cloud taken at `pose` reflects `layout`: the share of
/// cars with enough supporting points and the BEV IoU against the layout's own render.
pub fn layout_consistency(
    layout: &Layout,
    cloud: &LabeledPointCloud,
    spec: &SensorSpec,
    pose: &Pose,
) -> Result<LayoutConsistency, MeshError> {
    let reference =
        range_image_to_point_cloud(&RaycastScene::new(layout)?.render(spec, pose).image);
    Ok(layout_consistency_against(
        layout, cloud, &reference, spec, pose,
    ))
}

/// [`layout_consistency`] with a precomputed sensor-frame reference cloud.
pub fn layout_consistency_against(
    layout: &Layout,
    cloud: &LabeledPointCloud,
    reference: &LabeledPointCloud,
    spec: &SensorSpec,
    pose: &Pose,
) -> LayoutConsistency {
    if cloud.is_empty() {
        return LayoutConsistency {
            box_recall: 0.0,
            bev_iou: 0.0,
        };
    }
    let world = sensor_to_world(&cloud.points, spec, pose);
    let cars: Vec<_> = layout
        .primitives
        .iter()
        .filter(|p| p.label == CAR)
        .collect();
    let box_recall = if cars.is_empty() {
        1.0
    } else {
        let hit = cars
            .iter()
            .filter(|car| {
                let floor = car.center.z - 0.5 * car.extents.z + BASE_CLEARANCE;
                world
                    .iter()
                    .filter(|p| p.z >= floor && car.box_contains(**p, BOX_MARGIN))
                    .take(MIN_BOX_POINTS)
                    .count()
                    >= MIN_BOX_POINTS
            })
            .count();
        hit as f64 / cars.len() as f64
    };

    let grid = BevGrid::centered(pose.translation.x, pose.translation.y, 80.0, 1.0)
        .expect("fixed grid is valid");
    let a = bev_histogram(&world, &grid).expect("valid grid");
    let b =
        bev_histogram(&sensor_to_world(&reference.points, spec, pose), &grid).expect("valid grid");
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.counts.iter().zip(&b.counts) {
        inter += (*x > 0 && *y > 0) as usize;
        union += (*x > 0 || *y > 0) as usize;
    }
    let bev_iou = if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    };
    LayoutConsistency {
        box_recall,
        bev_iou,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{
        default_palette, generate_random_scene, remove_primitives, SceneParams, SemanticPrimitive,
        ShapeKind, GROUND,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_chamfer(x: &[Point3], y: &[Point3]) -> f64 {
        let side = |a: &[Point3], b: &[Point3]| {
            a.iter()
                .map(|p| {
                    b.iter()
                        .map(|q| (*q - *p).norm_squared())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / a.len() as f64
        };
        side(x, y) + side(y, x)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64, offset: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-spread..spread) + offset,
                    rng.random_range(-spread..spread),
                    rng.random_range(-0.2 * spread..0.2 * spread),
                )
            })
            .collect()
    }

    #[test]
    fn histogram_trivia() {
        let g = BevGrid::default();
        let h = bev_histogram(&[Point3::new(1.0, 1.0, 0.0); 5], &g).unwrap();
        assert_eq!(h.probabilities.iter().filter(|&&p| p == 1.0).count(), 1);
        assert!(!h.empty);
        let e = bev_histogram(&[], &g).unwrap();
        assert!(e.empty && e.probabilities.iter().all(|&p| p == 0.0));
        assert!(bev_histogram(&[], &BevGrid { bins_x: 0, ..g }).is_err());
    }

    #[test]
    fn histogram_mass_equals_in_bounds_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = BevGrid::default();
        for _ in 0..10 {
            let pts = random_cloud(&mut rng, 1000, 120.0, 0.0);
            let h = bev_histogram(&pts, &g).unwrap();
            let inside = pts
                .iter()
                .filter(|p| p.x.abs() < 80.0 && p.y.abs() < 80.0 && p.x != 80.0)
                .count();
            assert_eq!(h.total() as usize, inside);
            assert!((h.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jsd_values() {
        assert_eq!(jsd_probabilities(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(
            (jsd_probabilities(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-15
        );
        // M = (0.75, 0.25): 0.5*(0.5 ln(2/3) + 0.5 ln 2) + 0.5*ln(4/3)
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (1.0f64 / 0.75).ln();
        let v = jsd_probabilities(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.215_761_554_338_835_65).abs() < 1e-15);
        let g = BevGrid::default();
        let a = bev_histogram(&[Point3::ZERO], &g).unwrap();
        let b = bev_histogram(&[Point3::ZERO], &BevGrid { bins_x: 10, ..g }).unwrap();
        assert_eq!(jsd(&a, &b), Err(MetricsError::GridMismatch));
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
            let sp: f64 = raw.iter().map(|r| r.0).sum::<f64>() + 1e-12;
            let sq: f64 = raw.iter().map(|r| r.1).sum::<f64>() + 1e-12;
            let p: Vec<f64> = raw.iter().map(|r| r.0 / sp).collect();
            let q: Vec<f64> = raw.iter().map(|r| r.1 / sq).collect();
            let a = jsd_probabilities(&p, &q).unwrap();
            prop_assert!((a - jsd_probabilities(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
            prop_assert_eq!(jsd_probabilities(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn chamfer_values() {
        let x = vec![Point3::ZERO];
        let y = vec![Point3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer(&x, &y).unwrap(), 2.0);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert!(chamfer(&x, &[]).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (n, m, offset) in [
            (1, 1, 0.0),
            (50, 2000, 0.0),
            (2000, 300, 5.0),
            (700, 700, 400.0),
            (10, 1500, -30.0),
        ] {
            let x = random_cloud(&mut rng, n, 20.0, 0.0);
            let y = random_cloud(&mut rng, m, 10.0, offset);
            let fast = chamfer(&x, &y).unwrap();
            assert_eq!(fast, brute_chamfer(&x, &y));
            assert_eq!(fast, chamfer(&y, &x).unwrap());
        }
    }

    #[test]
    fn mmd_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clouds: Vec<Vec<Point3>> = (0..5)
            .map(|i| random_cloud(&mut rng, 100, 5.0, i as f64))
            .collect();
        let others: Vec<Vec<Point3>> = (0..5)
            .map(|i| random_cloud(&mut rng, 80, 5.0, 2.0 * i as f64))
            .collect();
        assert_eq!(mmd(&clouds, &clouds).unwrap(), 0.0);
        let mut superset = clouds.clone();
        superset.extend(others.clone());
        assert_eq!(mmd(&superset, &clouds).unwrap(), 0.0);

        let single = mmd(&clouds[..1], &others).unwrap();
        let mean: f64 = others
            .iter()
            .map(|y| brute_chamfer(&clouds[0], y))
            .sum::<f64>()
            / 5.0;
        assert!((single - mean).abs() < 1e-12);

        let mut total = 0.0;
        for y in &others {
            let mut best = f64::INFINITY;
            for x in &clouds {
                best = best.min(brute_chamfer(x, y));
            }
            total += best;
        }
        assert!((mmd(&clouds, &others).unwrap() - total / 5.0).abs() < 1e-12);
        assert!(mmd(&[], &others).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let mu_a = DVector::from_vec(vec![0.0]);
        let mu_b = DVector::from_vec(vec![3.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(frechet_from_moments(&mu_a, &one, &mu_b, &one).unwrap(), 9.0);

        let mu: DVector<f64> = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let nu: DVector<f64> = DVector::from_vec(vec![0.0, 1.0, 0.5]);
        let s: [f64; 3] = [0.5, 2.0, 1.0];
        let t: [f64; 3] = [1.5, 1.0, 3.0];
        let ca = DMatrix::from_diagonal(&DVector::from_iterator(3, s.iter().map(|v| v * v)));
        let cb = DMatrix::from_diagonal(&DVector::from_iterator(3, t.iter().map(|v| v * v)));
        let closed: f64 = (0..3)
            .map(|d| (mu[d] - nu[d]).powi(2_i32) + (s[d] - t[d]).powi(2))
            .sum();
        assert!((frechet_from_moments(&mu, &ca, &nu, &cb).unwrap() - closed).abs() < 1e-9);
    }

    #[test]
    fn frechet_sample_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..200)
                .map(|_| {
                    let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
                    vec![z[0] + shift, 0.5 * z[0] + z[1], z[2] * 2.0, z[3] - z[1]]
                })
                .collect()
        };
        let a = FeatureSet::from_rows(&rows(&mut rng, 0.0)).unwrap();
        let b = FeatureSet::from_rows(&rows(&mut rng, 1.0)).unwrap();
        assert!(frechet(&a, &a).unwrap() <= 1e-6);
        let ab = frechet(&a, &b).unwrap();
        assert!((ab - frechet(&b, &a).unwrap()).abs() < 1e-6);
        assert!(ab > 0.5);
        let short = FeatureSet::from_rows(&[vec![1.0; 4]]).unwrap();
        assert_eq!(frechet(&a, &short), Err(MetricsError::TooFewSamples(1)));
        let narrow = FeatureSet::from_rows(&[vec![1.0; 3], vec![2.0; 3]]).unwrap();
        assert_eq!(
            frechet(&a, &narrow),
            Err(MetricsError::DimensionMismatch(4, 3))
        );
        assert!(FeatureSet::from_rows(&[vec![1.0], vec![f64::NAN]]).is_err());
    }

    #[test]
    fn log_depth_features_sum_to_return_fraction() {
        let spec = SensorSpec::hdl64e().with_resolution(4, 8).unwrap();
        let mut img = RangeImage::zeros(spec, 1);
        img.set(0, 0, 0, 1.0);
        img.set(0, 1, 0, 79.0);
        let f = log_depth_features(&img);
        assert_eq!(f.len(), LOG_DEPTH_BINS);
        assert!((f.iter().sum::<f64>() - 2.0 / 32.0).abs() < 1e-12);
        assert!(f[LOG_DEPTH_BINS - 1] > 0.0);
    }

    fn car_scene(n: usize) -> Layout {
        let mut l = Layout::new(default_palette());
        l.push(SemanticPrimitive::new(
            GROUND,
            ShapeKind::Plane,
            Point3::ZERO,
            Point3::new(160.0, 160.0, 0.0),
            0.0,
        ))
        .unwrap();
        for i in 0..n {
            let c = Point3::new(
                8.0 + 7.0 * i as f64,
                if i % 2 == 0 { 3.5 } else { -3.5 },
                0.75,
            );
            l.push(SemanticPrimitive::new(
                CAR,
                ShapeKind::Cuboid,
                c,
                Point3::new(4.5, 1.8, 1.5),
                0.0,
            ))
            .unwrap();
        }
        l
    }

    #[test]
    fn self_consistency_and_removed_car() {
        let spec = SensorSpec::hdl64e().with_resolution(32, 512).unwrap();
        for pose in [
            Pose::identity(),
            Pose::new(Point3::new(2.0, -1.0, 0.0), 0.3),
        ] {
            let l = car_scene(3);
            let own = range_image_to_point_cloud(
                &RaycastScene::new(&l).unwrap().render(&spec, &pose).image,
            );
            let c = layout_consistency(&l, &own, &spec, &pose).unwrap();
            assert_eq!(
                c,
                LayoutConsistency {
                    box_recall: 1.0,
                    bev_iou: 1.0
                }
            );

            let mut seen = 0;
            let fewer = remove_primitives(&l, |_, p| {
                seen += (p.label == CAR) as usize;
                p.label == CAR && seen == 2
            });
            let without = range_image_to_point_cloud(
                &RaycastScene::new(&fewer)
                    .unwrap()
                    .render(&spec, &pose)
                    .image,
            );
            let c = layout_consistency(&l, &without, &spec, &pose).unwrap();
            assert!((c.box_recall - 2.0 / 3.0).abs() < 1e-12);
            assert!(c.bev_iou < 1.0);
        }
        let l = car_scene(2);
        let empty =
            layout_consistency(&l, &LabeledPointCloud::new(), &spec, &Pose::identity()).unwrap();
        assert_eq!(
            empty,
            LayoutConsistency {
                box_recall: 0.0,
                bev_iou: 0.0
            }
        );
    }

    #[test]
    fn random_scene_self_consistency() {
        let spec = SensorSpec::hdl64e().with_resolution(32, 256).unwrap();
        let l = generate_random_scene(3, &SceneParams::default()).unwrap();
        let own = range_image_to_point_cloud(
            &RaycastScene::new(&l)
                .unwrap()
                .render(&spec, &Pose::identity())
                .image,
        );
        let c = layout_consistency(&l, &own, &spec, &Pose::identity()).unwrap();
        assert_eq!(c.bev_iou, 1.0);
    }
}
