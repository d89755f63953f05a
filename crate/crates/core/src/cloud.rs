//! Labeled point clouds and their `x y z label_id` text format.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geom::Point3;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Points in meters with one semantic label id per point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<Point3>,
    pub labels: Vec<u32>,
}

impl LabeledPointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            points: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        }
    }

    /// Cloud where every point carries `label`.
    pub fn unlabeled(points: Vec<Point3>, label: u32) -> Self {
        let labels = vec![label; points.len()];
        Self { points, labels }
    }

    pub fn push(&mut self, p: Point3, label: u32) {
        self.points.push(p);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: &LabeledPointCloud) {
        self.points.extend_from_slice(&other.points);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Points carrying `label`, in cloud order.
    pub fn points_with_label(&self, label: u32) -> Vec<Point3> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Sorted, deduplicated label ids present in the cloud.
    pub fn label_set(&self) -> Vec<u32> {
        let mut ls = self.labels.clone();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    /// Rigid yaw rotation followed by translation applied to every point.
    pub fn transformed(&self, yaw: f64, translation: Point3) -> LabeledPointCloud {
        LabeledPointCloud {
            points: self
                .points
                .iter()
                .map(|p| p.rotate_z(yaw) + translation)
                .collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), CloudError> {
        writeln!(w, "# x y z label_id")?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            writeln!(w, "{} {} {} {}", p.x, p.y, p.z, l)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<LabeledPointCloud, CloudError> {
        let mut cloud = LabeledPointCloud::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| CloudError::Parse { line: i + 1, msg };
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let mut xyz = [0.0; 3];
            for (k, f) in fields[..3].iter().enumerate() {
                xyz[k] = f
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("invalid coordinate `{f}`")))?;
            }
            let label = fields[3]
                .parse::<u32>()
                .map_err(|_| err(format!("invalid label id `{}`", fields[3])))?;
            cloud.push(Point3::new(xyz[0], xyz[1], xyz[2]), label);
        }
        Ok(cloud)
    }
}
