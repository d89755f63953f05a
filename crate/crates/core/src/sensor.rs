//! Virtual LiDAR angular grid and range-image <-> point conversions.
//!
//! Pixel `(u, v)` is column `u` and row `v`. Columns sweep yaw from `+pi`
//! (left edge) toward `-pi`, and row 0 is the topmost beam. Angles are taken
//! at pixel centers, so the mapping is a bijection onto the center grid.
//!
//! A point at `(yaw, pitch, depth)` sits at
//! `(cos yaw cos pitch, -sin yaw cos pitch, sin pitch) * depth`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use thiserror::Error;

use crate::cloud::LabeledPointCloud;
use crate::geom::Point3;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("invalid sensor spec: {0}")]
    InvalidSpec(String),
    #[error("pixel ({u}, {v}) outside {cols}x{rows} grid")]
    PixelOutOfBounds {
        u: usize,
        v: usize,
        cols: usize,
        rows: usize,
    },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("depth {depth} outside [0, {max_range}]")]
    DepthOutOfRange { depth: f64, max_range: f64 },
    #[error("cannot project a zero-length point")]
    ZeroLengthPoint,
    #[error("range image format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Angular layout of the virtual sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSpec {
    pub rows: usize,
    pub cols: usize,
    /// Pitch of the top edge of the field of view, radians.
    pub pitch_max: f64,
    /// Pitch of the bottom edge, radians.
    pub pitch_min: f64,
    pub max_range: f64,
    /// Sensor height above the ground plane, meters.
    pub origin_height: f64,
}

pub const DEFAULT_PITCH_MAX_DEG: f64 = 2.0;
pub const DEFAULT_PITCH_MIN_DEG: f64 = -24.8;
pub const DEFAULT_MAX_RANGE: f64 = 80.0;
pub const DEFAULT_ORIGIN_HEIGHT: f64 = 1.73;

impl SensorSpec {
    pub fn new(
        rows: usize,
        cols: usize,
        pitch_max: f64,
        pitch_min: f64,
        max_range: f64,
    ) -> Result<Self, SensorError> {
        let spec = Self {
            rows,
            cols,
            pitch_max,
            pitch_min,
            max_range,
            origin_height: DEFAULT_ORIGIN_HEIGHT,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// HDL-64E style 64x1024 grid.
    pub fn hdl64e() -> Self {
        Self {
            rows: 64,
            cols: 1024,
            pitch_max: DEFAULT_PITCH_MAX_DEG.to_radians(),
            pitch_min: DEFAULT_PITCH_MIN_DEG.to_radians(),
            max_range: DEFAULT_MAX_RANGE,
            origin_height: DEFAULT_ORIGIN_HEIGHT,
        }
    }

    /// The same field of view sampled on a coarser grid.
    pub fn with_resolution(self, rows: usize, cols: usize) -> Result<Self, SensorError> {
        let spec = Self { rows, cols, ..self };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_origin_height(self, origin_height: f64) -> Self {
        Self {
            origin_height,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(SensorError::InvalidSpec(format!(
                "grid must be non-empty, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.pitch_max.is_finite() && self.pitch_min.is_finite())
            || self.pitch_max <= self.pitch_min
        {
            return Err(SensorError::InvalidSpec(format!(
                "pitch_max ({}) must exceed pitch_min ({})",
                self.pitch_max, self.pitch_min
            )));
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return Err(SensorError::InvalidSpec(format!(
                "max_range must be positive, got {}",
                self.max_range
            )));
        }
        if !self.origin_height.is_finite() {
            return Err(SensorError::InvalidSpec(
                "origin_height must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Yaw and pitch of the center of pixel `(u, v)`.
    pub fn pixel_to_angles(&self, u: usize, v: usize) -> Result<(f64, f64), SensorError> {
        if u >= self.cols || v >= self.rows {
            return Err(SensorError::PixelOutOfBounds {
                u,
                v,
                cols: self.cols,
                rows: self.rows,
            });
        }
        Ok(self.center_angles(u, v))
    }

    #[inline]
    pub(crate) fn center_angles(&self, u: usize, v: usize) -> (f64, f64) {
        let yaw = PI - 2.0 * PI * (u as f64 + 0.5) / self.cols as f64;
        let pitch = self.pitch_max
            - (v as f64 + 0.5) * (self.pitch_max - self.pitch_min) / self.rows as f64;
        (yaw, pitch)
    }

    /// Pixel containing direction `(yaw, pitch)`, or `None` outside the vertical field of view.
    pub fn angles_to_pixel(&self, yaw: f64, pitch: f64) -> Option<(usize, usize)> {
        if !(pitch >= self.pitch_min && pitch <= self.pitch_max) {
            return None;
        }
        let w = self.cols as f64;
        let uf = ((PI - yaw) / (2.0 * PI) * w).floor();
        let u = (uf as i64).rem_euclid(self.cols as i64) as usize;
        let vf = ((self.pitch_max - pitch) / (self.pitch_max - self.pitch_min) * self.rows as f64)
            .floor();
        let v = (vf.max(0.0) as usize).min(self.rows - 1);
        Some((u, v))
    }
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self::hdl64e()
    }
}

/// Free-function form of [`SensorSpec::pixel_to_angles`].
pub fn pixel_to_angles(u: usize, v: usize, spec: &SensorSpec) -> Result<(f64, f64), SensorError> {
    spec.pixel_to_angles(u, v)
}

#[inline]
pub(crate) fn direction(yaw: f64, pitch: f64) -> Point3 {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    Point3::new(cy * cp, -sy * cp, sp)
}

/// Sensor-frame point at `depth` meters along direction `(yaw, pitch)`.
pub fn unproject(yaw: f64, pitch: f64, depth: f64) -> Result<Point3, SensorError> {
    if !(depth > 0.0) {
        return Err(SensorError::NonPositiveDepth(depth));
    }
    Ok(direction(yaw, pitch) * depth)
}

/// Result of projecting a point into the range image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InView { u: usize, v: usize, depth: f64 },
    OutOfView,
}

pub fn project(p: Point3, spec: &SensorSpec) -> Result<Projection, SensorError> {
    let depth = p.norm();
    if !(depth > 0.0) {
        return Err(SensorError::ZeroLengthPoint);
    }
    if depth > spec.max_range {
        return Ok(Projection::OutOfView);
    }
    let yaw = (-p.y).atan2(p.x);
    let pitch = (p.z / depth).clamp(-1.0, 1.0).asin();
    Ok(match spec.angles_to_pixel(yaw, pitch) {
        Some((u, v)) => Projection::InView { u, v, depth },
        None => Projection::OutOfView,
    })
}

/// A sensor ray. `dir` is unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub yaw: f64,
    pub pitch: f64,
    pub dir: Point3,
}

impl Ray {
    pub fn from_angles(origin: Point3, yaw: f64, pitch: f64) -> Self {
        Self {
            origin,
            yaw,
            pitch,
            dir: direction(yaw, pitch),
        }
    }

    /// Ray along an arbitrary non-zero direction (normalized here).
    pub fn new(origin: Point3, dir: Point3) -> Self {
        let dir = dir.normalized();
        Self {
            origin,
            yaw: (-dir.y).atan2(dir.x),
            pitch: dir.z.clamp(-1.0, 1.0).asin(),
            dir,
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.dir * t
    }
}

/// `C x H x W` grid: channel 0 is depth in meters (0 = no return), channel 1
/// (when present) holds semantic label ids stored as reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub spec: SensorSpec,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub const DEPTH_CHANNEL: usize = 0;
pub const SEMANTIC_CHANNEL: usize = 1;

impl RangeImage {
    pub fn zeros(spec: SensorSpec, channels: usize) -> Self {
        assert!(channels >= 1, "a range image needs a depth channel");
        Self {
            spec,
            channels,
            data: vec![0.0; channels * spec.pixel_count()],
        }
    }

    pub fn from_data(
        spec: SensorSpec,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, SensorError> {
        if channels == 0 || data.len() != channels * spec.pixel_count() {
            return Err(SensorError::Format(format!(
                "expected {} values for {} channel(s), got {}",
                channels * spec.pixel_count(),
                channels,
                data.len()
            )));
        }
        Ok(Self {
            spec,
            channels,
            data,
        })
    }

    #[inline]
    fn idx(&self, c: usize, u: usize, v: usize) -> usize {
        (c * self.spec.rows + v) * self.spec.cols + u
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[self.idx(c, u, v)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, value: f32) {
        let i = self.idx(c, u, v);
        self.data[i] = value;
    }

    pub fn depth(&self, u: usize, v: usize) -> f32 {
        self.get(DEPTH_CHANNEL, u, v)
    }

    pub fn has_semantics(&self) -> bool {
        self.channels > SEMANTIC_CHANNEL
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spec.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spec.pixel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn depth_only(&self) -> RangeImage {
        RangeImage {
            spec: self.spec,
            channels: 1,
            data: self.channel(DEPTH_CHANNEL).to_vec(),
        }
    }

    pub fn returned_pixels(&self) -> usize {
        self.channel(DEPTH_CHANNEL)
            .iter()
            .filter(|&&d| d > 0.0)
            .count()
    }

    /// Writes the `LRI1` binary layout.
    pub fn write_lri<W: Write>(&self, mut w: W) -> Result<(), SensorError> {
        let mut buf = Vec::with_capacity(40 + 4 * self.data.len());
        buf.extend_from_slice(b"LRI1");
        buf.extend_from_slice(&(self.spec.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.cols as u32).to_le_bytes());
        buf.extend_from_slice(&(self.channels as u32).to_le_bytes());
        buf.extend_from_slice(&self.spec.pitch_max.to_le_bytes());
        buf.extend_from_slice(&self.spec.pitch_min.to_le_bytes());
        buf.extend_from_slice(&self.spec.max_range.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads an `LRI1` file. The sensor height is not stored and comes back as the default.
    pub fn read_lri<R: Read>(mut r: R) -> Result<RangeImage, SensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let header = 4 + 12 + 24;
        if bytes.len() < header {
            return Err(SensorError::Format("truncated header".into()));
        }
        if &bytes[..4] != b"LRI1" {
            return Err(SensorError::Format("bad magic, expected LRI1".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (rows, cols, channels) = (u32_at(4), u32_at(8), u32_at(12));
        let spec = SensorSpec::new(rows, cols, f64_at(16), f64_at(24), f64_at(32))?;
        let n = channels
            .checked_mul(rows * cols)
            .ok_or_else(|| SensorError::Format("dimension overflow".into()))?;
        if channels == 0 {
            return Err(SensorError::Format("zero channels".into()));
        }
        if bytes.len() != header + 4 * n {
            return Err(SensorError::Format(format!(
                "expected {} data bytes, found {}",
                4 * n,
                bytes.len() - header
            )));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        RangeImage::from_data(spec, channels, data)
    }

    /// 16-bit binary PGM of the depth channel, linearly scaled so `max_range` maps to 65535.
    pub fn write_depth_pgm<W: Write>(&self, mut w: W) -> Result<(), SensorError> {
        write!(w, "P5\n{} {}\n65535\n", self.spec.cols, self.spec.rows)?;
        let mut buf = Vec::with_capacity(2 * self.spec.pixel_count());
        for &d in self.channel(DEPTH_CHANNEL) {
            let s = (d as f64 / self.spec.max_range).clamp(0.0, 1.0) * 65535.0;
            buf.extend_from_slice(&(s.round() as u16).to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

/// One point per returned pixel, in the sensor frame.
pub fn range_image_to_point_cloud(img: &RangeImage) -> LabeledPointCloud {
    let spec = &img.spec;
    let mut cloud = LabeledPointCloud::with_capacity(img.returned_pixels());
    for v in 0..spec.rows {
        for u in 0..spec.cols {
            let d = img.depth(u, v) as f64;
            if d > 0.0 {
                let (yaw, pitch) = spec.center_angles(u, v);
                let label = if img.has_semantics() {
                    img.get(SEMANTIC_CHANNEL, u, v) as u32
                } else {
                    0
                };
                cloud.push(direction(yaw, pitch) * d, label);
            }
        }
    }
    cloud
}

/// Z-buffered projection of a sensor-frame cloud into a two-channel image.
pub fn point_cloud_to_range_image(cloud: &LabeledPointCloud, spec: &SensorSpec) -> RangeImage {
    let mut img = RangeImage::zeros(*spec, 2);
    let n = spec.pixel_count();
    let mut best = vec![f64::INFINITY; n];
    for (p, &label) in cloud.points.iter().zip(&cloud.labels) {
        if let Ok(Projection::InView { u, v, depth }) = project(*p, spec) {
            let i = v * spec.cols + u;
            if depth < best[i] {
                best[i] = depth;
                img.data[i] = depth as f32;
                img.data[n + i] = label as f32;
            }
        }
    }
    img
}

/// Log-scaled depth in `[0, 1]`: `ln(d + 1) / ln(max_range + 1)`.
pub fn normalize_depth(d: f64, max_range: f64) -> Result<f64, SensorError> {
    if !(0.0..=max_range).contains(&d) {
        return Err(SensorError::DepthOutOfRange {
            depth: d,
            max_range,
        });
    }
    Ok((d + 1.0).ln() / (max_range + 1.0).ln())
}

/// Inverse of [`normalize_depth`].
pub fn denormalize_depth(n: f64, max_range: f64) -> Result<f64, SensorError> {
    if !(0.0..=1.0).contains(&n) {
        return Err(SensorError::DepthOutOfRange {
            depth: n,
            max_range: 1.0,
        });
    }
    Ok(((n * (max_range + 1.0).ln()).exp() - 1.0).clamp(0.0, max_range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> SensorSpec {
        SensorSpec::new(2, 4, PI / 6.0, -PI / 6.0, 80.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pixel_angles_examples() {
        let s = small_spec();
        let (yaw, pitch) = s.pixel_to_angles(0, 0).unwrap();
        assert!(close(yaw, 3.0 * PI / 4.0, 1e-12));
        assert!(close(pitch, PI / 12.0, 1e-12));
        let (yaw, _) = s.pixel_to_angles(1, 0).unwrap();
        assert!(close(yaw, PI / 4.0, 1e-12));
        assert!(matches!(
            s.pixel_to_angles(4, 0),
            Err(SensorError::PixelOutOfBounds { .. })
        ));
        assert!(s.pixel_to_angles(0, 2).is_err());
    }

    #[test]
    fn pixel_angles_are_unique_on_full_grid() {
        let s = SensorSpec::hdl64e();
        let mut seen = std::collections::HashSet::new();
        for v in 0..s.rows {
            for u in 0..s.cols {
                let (yaw, pitch) = s.pixel_to_angles(u, v).unwrap();
                assert!(seen.insert((yaw.to_bits(), pitch.to_bits())));
            }
        }
        assert_eq!(seen.len(), 65_536);
    }

    #[test]
    fn unproject_examples() {
        let p = unproject(0.0, 0.0, 5.0).unwrap();
        assert_eq!(p, Point3::new(5.0, 0.0, 0.0));
        let p = unproject(PI / 2.0, 0.0, 2.0).unwrap();
        assert!(close(p.x, 0.0, 1e-12) && close(p.y, -2.0, 1e-12) && p.z == 0.0);
        let p = unproject(0.0, PI / 6.0, 2.0).unwrap();
        assert!(close(p.x, 3f64.sqrt(), 1e-12) && p.y == 0.0 && close(p.z, 1.0, 1e-12));
        assert!(matches!(
            unproject(0.0, 0.0, 0.0),
            Err(SensorError::NonPositiveDepth(_))
        ));
        assert!(unproject(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn project_examples() {
        let s = SensorSpec::hdl64e();
        match project(Point3::new(5.0, 0.0, 0.0), &s).unwrap() {
            Projection::InView { u, v, depth } => {
                // yaw 0 is the boundary between the two middle columns
                assert!(u == s.cols / 2 || u == s.cols / 2 - 1);
                let expect_v =
                    ((s.pitch_max / (s.pitch_max - s.pitch_min)) * 64.0).floor() as usize;
                assert_eq!(v, expect_v);
                assert_eq!(depth, 5.0);
            }
            Projection::OutOfView => panic!("should be in view"),
        }
        let above = Point3::new(1.0, 0.0, 1.0);
        assert_eq!(project(above, &s).unwrap(), Projection::OutOfView);
        let far = Point3::new(100.0, 0.0, 0.0);
        assert_eq!(project(far, &s).unwrap(), Projection::OutOfView);
        assert!(matches!(
            project(Point3::ZERO, &s),
            Err(SensorError::ZeroLengthPoint)
        ));
    }

    #[test]
    fn project_recovers_every_pixel() {
        let s = SensorSpec::hdl64e().with_resolution(64, 256).unwrap();
        for v in 0..s.rows {
            for u in 0..s.cols {
                let (yaw, pitch) = s.pixel_to_angles(u, v).unwrap();
                for d in [1.0, 10.0, 79.0] {
                    let p = unproject(yaw, pitch, d).unwrap();
                    match project(p, &s).unwrap() {
                        Projection::InView {
                            u: pu,
                            v: pv,
                            depth,
                        } => {
                            assert_eq!((pu, pv), (u, v));
                            assert!((depth - d).abs() < 1e-9);
                        }
                        Projection::OutOfView => panic!("pixel ({u},{v}) lost"),
                    }
                }
            }
        }
    }

    #[test]
    fn image_to_cloud_examples() {
        let s = SensorSpec::hdl64e().with_resolution(8, 32).unwrap();
        let img = RangeImage::zeros(s, 2);
        assert!(range_image_to_point_cloud(&img).is_empty());

        let mut img = RangeImage::zeros(s, 1);
        img.set(0, 5, 3, 12.5);
        let cloud = range_image_to_point_cloud(&img);
        assert_eq!(cloud.len(), 1);
        let (yaw, pitch) = s.pixel_to_angles(5, 3).unwrap();
        let expect = unproject(yaw, pitch, 12.5).unwrap();
        assert!(cloud.points[0].distance(expect) < 1e-12);
        assert_eq!(cloud.labels, vec![0]);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let s = SensorSpec::hdl64e().with_resolution(8, 32).unwrap();
        let (yaw, pitch) = s.pixel_to_angles(7, 4).unwrap();
        let mut cloud = LabeledPointCloud::new();
        cloud.push(unproject(yaw, pitch, 7.0).unwrap(), 2);
        cloud.push(unproject(yaw, pitch, 4.0).unwrap(), 3);
        let img = point_cloud_to_range_image(&cloud, &s);
        assert!((img.depth(7, 4) - 4.0).abs() < 1e-6);
        assert_eq!(img.get(SEMANTIC_CHANNEL, 7, 4), 3.0);
        assert_eq!(img.returned_pixels(), 1);

        let empty = point_cloud_to_range_image(&LabeledPointCloud::new(), &s);
        assert!(empty.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_depth(0.0, 80.0).unwrap(), 0.0);
        assert!(close(normalize_depth(80.0, 80.0).unwrap(), 1.0, 1e-15));
        assert!(close(normalize_depth(7.0, 63.0).unwrap(), 0.5, 1e-15));
        assert!(normalize_depth(-0.1, 80.0).is_err());
        assert!(normalize_depth(80.1, 80.0).is_err());
        assert!(denormalize_depth(1.5, 80.0).is_err());
    }

    #[test]
    fn normalize_round_trip_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let d: f64 = rng.random_range(0.0..80.0);
            let back = denormalize_depth(normalize_depth(d, 80.0).unwrap(), 80.0).unwrap();
            assert!(
                (back - d).abs() <= 1e-6 * d.max(1e-12) + 1e-12,
                "{d} -> {back}"
            );
        }
    }

    #[test]
    fn lri_round_trip_and_errors() {
        let s = SensorSpec::hdl64e().with_resolution(4, 8).unwrap();
        let mut img = RangeImage::zeros(s, 2);
        img.set(0, 1, 2, 3.25);
        img.set(1, 1, 2, 4.0);
        let mut buf = Vec::new();
        img.write_lri(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 4 * 2 * 32);
        let back = RangeImage::read_lri(buf.as_slice()).unwrap();
        assert_eq!(back, img);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(RangeImage::read_lri(bad.as_slice()).is_err());
        assert!(RangeImage::read_lri(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn pgm_header() {
        let s = SensorSpec::hdl64e().with_resolution(2, 3).unwrap();
        let mut img = RangeImage::zeros(s, 1);
        img.set(0, 0, 0, 80.0);
        let mut buf = Vec::new();
        img.write_depth_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n65535\n"));
        let body = &buf[b"P5\n3 2\n65535\n".len()..];
        assert_eq!(body.len(), 12);
        assert_eq!(&body[..2], &[0xff, 0xff]);
    }

    proptest! {
        #[test]
        fn unproject_preserves_norm(yaw in -PI..PI, pitch in -1.5f64..1.5, d in 1e-3f64..500.0) {
            let p = unproject(yaw, pitch, d).unwrap();
            prop_assert!((p.norm() - d).abs() <= 1e-9 * d);
        }

        #[test]
        fn normalize_is_monotone(a in 0.0f64..80.0, b in 0.0f64..80.0) {
            let (na, nb) = (normalize_depth(a, 80.0).unwrap(), normalize_depth(b, 80.0).unwrap());
            if a < b { prop_assert!(na < nb); }
            if a > b { prop_assert!(na > nb); }
        }

        #[test]
        fn image_cloud_image_is_identity(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = SensorSpec::hdl64e().with_resolution(16, 64).unwrap();
            let mut img = RangeImage::zeros(s, 2);
            for v in 0..s.rows {
                for u in 0..s.cols {
                    if rng.random_bool(0.7) {
                        img.set(0, u, v, rng.random_range(0.5f32..79.9));
                        img.set(1, u, v, rng.random_range(0..5u32) as f32);
                    }
                }
            }
            let cloud = range_image_to_point_cloud(&img);
            prop_assert_eq!(cloud.len(), img.returned_pixels());
            let back = point_cloud_to_range_image(&cloud, &s);
            prop_assert_eq!(back.channel(1), img.channel(1));
            for (a, b) in back.channel(0).iter().zip(img.channel(0)) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
