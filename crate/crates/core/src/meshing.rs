//! Triangle meshes for layout primitives.

use std::f64::consts::PI;
use std::io::Write;

use thiserror::Error;

use crate::geom::Point3;
use crate::layout::{Layout, LayoutError, SemanticPrimitive, ShapeKind};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error(transparent)]
    Primitive(#[from] LayoutError),
    #[error("ellipsoid tessellation must be at least 3, got {0}")]
    Tessellation(usize),
}

/// Segments around an ellipsoid; rings are half as many.
pub const DEFAULT_TESSELLATION: usize = 32;

/// Labeled triangle soup. `triangle_sources` records which layout primitive
/// produced each triangle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    pub triangle_labels: Vec<u32>,
    pub triangle_sources: Vec<u32>,
}

impl TriangleMesh {
    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn corners(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangle_count())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Volume enclosed by a closed, outward-oriented mesh (signed tetrahedra).
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangle_count())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    /// Appends `other`, re-indexing its vertices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|&[a, b, c]| [a + base, b + base, c + base]),
        );
        self.triangle_labels
            .extend_from_slice(&other.triangle_labels);
        self.triangle_sources
            .extend_from_slice(&other.triangle_sources);
    }

    /// ASCII OFF dump for external viewers.
    pub fn write_off<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "OFF")?;
        writeln!(w, "{} {} 0", self.vertices.len(), self.triangles.len())?;
        for v in &self.vertices {
            writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
        }
        for [a, b, c] in &self.triangles {
            writeln!(w, "3 {a} {b} {c}")?;
        }
        Ok(())
    }
}

fn placed(prim: &SemanticPrimitive, local: Point3) -> Point3 {
    local.rotate_z(prim.yaw) + prim.center
}

pub fn mesh_primitive(
    prim: &SemanticPrimitive,
    tessellation: usize,
) -> Result<TriangleMesh, MeshError> {
    prim.validate()?;
    let h = prim.extents * 0.5;
    let (local, triangles): (Vec<Point3>, Vec<[u32; 3]>) = match prim.shape {
        ShapeKind::Cuboid => {
            let v = (0..8)
                .map(|i| {
                    Point3::new(
                        if i & 1 == 0 { -h.x } else { h.x },
                        if i & 2 == 0 { -h.y } else { h.y },
                        if i & 4 == 0 { -h.z } else { h.z },
                    )
                })
                .collect();
            // Counter-clockwise seen from outside.
            let t = vec![
                [0, 2, 3],
                [0, 3, 1], // -z
                [4, 5, 7],
                [4, 7, 6], // +z
                [0, 1, 5],
                [0, 5, 4], // -y
                [2, 6, 7],
                [2, 7, 3], // +y
                [0, 4, 6],
                [0, 6, 2], // -x
                [1, 3, 7],
                [1, 7, 5], // +x
            ];
            (v, t)
        }
        ShapeKind::Plane => {
            let v = vec![
                Point3::new(-h.x, -h.y, 0.0),
                Point3::new(h.x, -h.y, 0.0),
                Point3::new(h.x, h.y, 0.0),
                Point3::new(-h.x, h.y, 0.0),
            ];
            (v, vec![[0, 1, 2], [0, 2, 3]])
        }
        ShapeKind::Ellipsoid => {
            if tessellation < 3 {
                return Err(MeshError::Tessellation(tessellation));
            }
            let segments = tessellation;
            let rings = (tessellation / 2).max(2);
            let mut v = Vec::with_capacity(2 + (rings - 1) * segments);
            v.push(Point3::new(0.0, 0.0, h.z));
            for r in 1..rings {
                let theta = PI * r as f64 / rings as f64;
                let (st, ct) = theta.sin_cos();
                for s in 0..segments {
                    let phi = 2.0 * PI * s as f64 / segments as f64;
                    let (sp, cp) = phi.sin_cos();
                    v.push(Point3::new(h.x * st * cp, h.y * st * sp, h.z * ct));
                }
            }
            v.push(Point3::new(0.0, 0.0, -h.z));
            let bottom = (v.len() - 1) as u32;
            let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
            let mut t = Vec::with_capacity(2 * segments * (rings - 1));
            for s in 0..segments {
                t.push([0, ring(1, s), ring(1, s + 1)]);
            }
            for r in 1..rings - 1 {
                for s in 0..segments {
                    let (a, b) = (ring(r, s), ring(r, s + 1));
                    let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
                    t.push([a, c, d]);
                    t.push([a, d, b]);
                }
            }
            for s in 0..segments {
                t.push([bottom, ring(rings - 1, s + 1), ring(rings - 1, s)]);
            }
            (v, t)
        }
    };
    let n = triangles.len();
    Ok(TriangleMesh {
        vertices: local.into_iter().map(|p| placed(prim, p)).collect(),
        triangles,
        triangle_labels: vec![prim.label; n],
        triangle_sources: vec![0; n],
    })
}

/// All primitives meshed in layout order.
pub fn mesh_layout(layout: &Layout, tessellation: usize) -> Result<TriangleMesh, MeshError> {
    let mut mesh = TriangleMesh::default();
    for (i, prim) in layout.primitives.iter().enumerate() {
        let mut m = mesh_primitive(prim, tessellation)?;
        m.triangle_sources.iter_mut().for_each(|s| *s = i as u32);
        mesh.append(&m);
    }
    Ok(mesh)
}
