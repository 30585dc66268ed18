//! Triangle meshes: OFF ingestion, area-weighted surface sampling and a few
//! procedural solids used as stand-ins for object corpora.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Point3, Rotation3, Vector3};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

/// Faces with area below this are dropped on construction.
const MIN_FACE_AREA: f64 = 1e-14;

impl TriangleMesh {
    /// Validates indices and drops zero-area faces.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::InvalidInput(format!(
                "face {f:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        if !vertices.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("non-finite vertex".into()));
        }
        let faces: Vec<[usize; 3]> = faces
            .into_iter()
            .filter(|f| triangle_area(&[vertices[f[0]], vertices[f[1]], vertices[f[2]]]) > MIN_FACE_AREA)
            .collect();
        let mesh = Self { vertices, faces };
        if mesh.faces.is_empty() {
            return Err(Error::InvalidInput("mesh has no non-degenerate face".into()));
        }
        Ok(mesh)
    }

    pub fn corners(&self, f: [usize; 3]) -> [Point3<f64>; 3] {
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    pub fn triangles(&self) -> impl Iterator<Item = [Point3<f64>; 3]> + '_ {
        self.faces.iter().map(|&f| self.corners(f))
    }

    pub fn face_areas(&self) -> Vec<f64> {
        self.triangles().map(|t| triangle_area(&t)).collect()
    }

    pub fn area(&self) -> f64 {
        self.face_areas().iter().sum()
    }

    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }

    /// Applies `rotation` then `translation` to every vertex.
    pub fn transformed(&self, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| rotation * v + translation).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| Point3::from(v.coords * s)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Concatenates meshes, each shifted by its offset.
    pub fn merge(parts: &[(TriangleMesh, Vector3<f64>)]) -> Self {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (m, off) in parts {
            let base = vertices.len();
            vertices.extend(m.vertices.iter().map(|v| v + off));
            faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        }
        Self { vertices, faces }
    }
}

pub fn triangle_area(t: &[Point3<f64>; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

// ---------------------------------------------------------------------------
// OFF

pub fn load_off_mesh(path: &Path) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path)?;
    parse_off(&text, path)
}

/// Parses OFF text. Comments (`#`) and blank lines are skipped; polygons are
/// fan-triangulated from their first vertex.
pub fn parse_off(text: &str, path: &Path) -> Result<TriangleMesh> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    // premature end of file is reported against the last line
    let eof_line = text.lines().count().max(1);
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    // some writers glue the counts onto the header: "OFF8 6 0"
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| err(hline, format!("expected OFF header, found {header:?}")))?
        .trim();
    let (cline, counts) = if rest.is_empty() {
        lines.next().ok_or_else(|| err(hline + 1, "missing counts line".into()))?
    } else {
        (hline, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(cline, format!("bad counts: {e}")))?;
    if counts.len() < 2 {
        return Err(err(cline, "counts line needs vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv.min(1 << 20));
    for k in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(eof_line, format!("file ends after {k} of {nv} declared vertices")))?;
        let xyz: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(ln, format!("bad vertex: {e}")))?;
        if xyz.len() != 3 {
            return Err(err(ln, format!("vertex needs 3 coordinates, found {}", xyz.len())));
        }
        vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }

    let mut faces = Vec::with_capacity(nf.min(1 << 20));
    for k in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| err(eof_line, format!("file ends after {k} of {nf} declared faces")))?;
        let mut toks = l.split_whitespace();
        let n: usize = toks
            .next()
            .unwrap()
            .parse()
            .map_err(|e| err(ln, format!("bad face size: {e}")))?;
        if n < 3 {
            return Err(err(ln, format!("face with {n} vertices")));
        }
        let idx: Vec<usize> = toks
            .take(n)
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(ln, format!("bad face index: {e}")))?;
        if idx.len() != n {
            return Err(err(ln, format!("face declares {n} vertices, lists {}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(err(ln, format!("vertex index {bad} out of range ({nv} vertices)")));
        }
        for j in 1..n - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, format!("unexpected content after {nv} vertices and {nf} faces")));
    }
    TriangleMesh::new(vertices, faces).map_err(|e| err(cline, e.to_string()))
}

pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        s.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    s
}

// ---------------------------------------------------------------------------
// sampling

/// Area-weighted face choice, then a uniform barycentric point in the face.
pub fn sample_mesh_uniform(mesh: &TriangleMesh, n: usize, seed: u64) -> PointCloud {
    sample_mesh_labeled(mesh, n, seed).0
}

/// As [`sample_mesh_uniform`], also returning the face each point came from.
pub fn sample_mesh_labeled(mesh: &TriangleMesh, n: usize, seed: u64) -> (PointCloud, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(mesh.face_areas()).expect("validated mesh has positive area");
    let mut faces = Vec::with_capacity(n);
    let pts = (0..n)
        .map(|_| {
            let f = dist.sample(&mut rng);
            faces.push(f);
            let [a, b, c] = mesh.corners(mesh.faces[f]);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect();
    (PointCloud::new(pts), faces)
}

// ---------------------------------------------------------------------------
// procedural solids, all centered on the origin

pub fn box_mesh(half: Vector3<f64>) -> TriangleMesh {
    let v: Vec<Point3<f64>> = (0..8)
        .map(|i| {
            Point3::new(
                if i & 1 == 0 { -half.x } else { half.x },
                if i & 2 == 0 { -half.y } else { half.y },
                if i & 4 == 0 { -half.z } else { half.z },
            )
        })
        .collect();
    // two outward-wound triangles per face
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriangleMesh { vertices: v, faces }
}

/// Closed cylinder along z.
pub fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> TriangleMesh {
    let h = height / 2.0;
    let mut v = vec![Point3::new(0.0, 0.0, -h), Point3::new(0.0, 0.0, h)];
    for i in 0..segments {
        let a = 2.0 * PI * i as f64 / segments as f64;
        v.push(Point3::new(radius * a.cos(), radius * a.sin(), -h));
        v.push(Point3::new(radius * a.cos(), radius * a.sin(), h));
    }
    let mut faces = Vec::new();
    for i in 0..segments {
        let j = (i + 1) % segments;
        let (b0, t0, b1, t1) = (2 + 2 * i, 3 + 2 * i, 2 + 2 * j, 3 + 2 * j);
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
        faces.push([0, b1, b0]);
        faces.push([1, t0, t1]);
    }
    TriangleMesh { vertices: v, faces }
}

/// Cone with its base at `-height/2` and apex at `+height/2`.
pub fn cone_mesh(radius: f64, height: f64, segments: usize) -> TriangleMesh {
    let h = height / 2.0;
    let mut v = vec![Point3::new(0.0, 0.0, -h), Point3::new(0.0, 0.0, h)];
    for i in 0..segments {
        let a = 2.0 * PI * i as f64 / segments as f64;
        v.push(Point3::new(radius * a.cos(), radius * a.sin(), -h));
    }
    let mut faces = Vec::new();
    for i in 0..segments {
        let j = (i + 1) % segments;
        faces.push([0, 2 + j, 2 + i]);
        faces.push([1, 2 + i, 2 + j]);
    }
    TriangleMesh { vertices: v, faces }
}

pub fn sphere_mesh(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let mut v = vec![Point3::new(0.0, 0.0, -radius), Point3::new(0.0, 0.0, radius)];
    for r in 1..rings {
        let el = -PI / 2.0 + PI * r as f64 / rings as f64;
        for s in 0..segments {
            let az = 2.0 * PI * s as f64 / segments as f64;
            v.push(Point3::new(radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin()));
        }
    }
    let at = |r: usize, s: usize| 2 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, at(1, s + 1), at(1, s)]);
        faces.push([1, at(rings - 1, s), at(rings - 1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            faces.push([at(r, s), at(r, s + 1), at(r + 1, s + 1)]);
            faces.push([at(r, s), at(r + 1, s + 1), at(r + 1, s)]);
        }
    }
    TriangleMesh { vertices: v, faces }
}

/// Small catalogue of object-like shapes roughly one meter across.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Crate,
    Barrel,
    Ball,
    Cone,
    Table,
    Chair,
    Ell,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 7] = [
        ObjectKind::Crate,
        ObjectKind::Barrel,
        ObjectKind::Ball,
        ObjectKind::Cone,
        ObjectKind::Table,
        ObjectKind::Chair,
        ObjectKind::Ell,
    ];

    pub fn mesh(self) -> TriangleMesh {
        let b = |x: f64, y: f64, z: f64| box_mesh(Vector3::new(x, y, z));
        match self {
            ObjectKind::Crate => b(0.5, 0.35, 0.3),
            ObjectKind::Barrel => cylinder_mesh(0.3, 0.9, 24),
            ObjectKind::Ball => sphere_mesh(0.45, 12, 24),
            ObjectKind::Cone => cone_mesh(0.4, 0.9, 24),
            ObjectKind::Table => {
                let leg = b(0.04, 0.04, 0.35);
                TriangleMesh::merge(&[
                    (b(0.55, 0.35, 0.03), Vector3::new(0.0, 0.0, 0.38)),
                    (leg.clone(), Vector3::new(0.48, 0.28, 0.0)),
                    (leg.clone(), Vector3::new(-0.48, 0.28, 0.0)),
                    (leg.clone(), Vector3::new(0.48, -0.28, 0.0)),
                    (leg, Vector3::new(-0.48, -0.28, 0.0)),
                ])
            }
            ObjectKind::Chair => {
                let leg = b(0.03, 0.03, 0.22);
                TriangleMesh::merge(&[
                    (b(0.25, 0.25, 0.03), Vector3::new(0.0, 0.0, 0.0)),
                    (b(0.03, 0.25, 0.3), Vector3::new(-0.22, 0.0, 0.33)),
                    (leg.clone(), Vector3::new(0.2, 0.2, -0.25)),
                    (leg.clone(), Vector3::new(-0.2, 0.2, -0.25)),
                    (leg.clone(), Vector3::new(0.2, -0.2, -0.25)),
                    (leg, Vector3::new(-0.2, -0.2, -0.25)),
                ])
            }
            ObjectKind::Ell => TriangleMesh::merge(&[
                (b(0.5, 0.15, 0.4), Vector3::new(0.0, -0.3, 0.0)),
                (b(0.15, 0.3, 0.4), Vector3::new(-0.35, 0.15, 0.0)),
            ]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off(text: &str) -> Result<TriangleMesh> {
        parse_off(text, Path::new("t.off"))
    }

    #[test]
    fn minimal_triangle() {
        let m = off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn quad_is_fan_split() {
        let m = off("OFF\n# comment\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        let glued = off("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap();
        assert_eq!(glued, m);
    }

    #[test]
    fn malformed_files_report_lines() {
        // declares 4 vertices, lists 3
        match off("OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        match off("PLY\n3 1 0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match off("OFF\nthree one zero\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n"), Err(Error::Parse { line: 6, .. })));
        assert!(matches!(off(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn degenerate_faces_are_dropped() {
        let m = off("OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n2 0 0\n3 0 1 2\n3 0 1 3\n").unwrap();
        assert_eq!(m.faces.len(), 1);
    }

    #[test]
    fn off_text_round_trip() {
        let m = ObjectKind::Chair.mesh();
        let back = off(&write_off(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn samples_lie_in_the_triangle() {
        let m = TriangleMesh::new(
            vec![Point3::new(0.0, 0.0, 1.0), Point3::new(2.0, 0.0, 1.0), Point3::new(0.0, 3.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let c = sample_mesh_uniform(&m, 1000, 1);
        for p in &c.points {
            assert!((p.z - 1.0).abs() < 1e-12);
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x / 2.0 + p.y / 3.0 <= 1.0 + 1e-12);
        }
        assert_eq!(c.points, sample_mesh_uniform(&m, 1000, 1).points);
    }

    #[test]
    fn procedural_solids_are_closed_and_sized() {
        // closed surfaces: every edge is shared by exactly two faces
        for kind in [ObjectKind::Crate, ObjectKind::Barrel, ObjectKind::Ball, ObjectKind::Cone] {
            let m = kind.mesh();
            let mut edges = std::collections::BTreeMap::new();
            for f in &m.faces {
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
            assert!(edges.values().all(|&c| c == 2), "{kind:?}");
        }
        let area = sphere_mesh(1.0, 32, 64).area();
        assert!((area - 4.0 * PI).abs() < 0.05 * 4.0 * PI);
        assert!((box_mesh(Vector3::new(1.0, 2.0, 3.0)).area() - 8.0 * (2.0 + 6.0 + 3.0)).abs() < 1e-9);
        for kind in ObjectKind::ALL {
            let (lo, hi) = kind.mesh().bounds();
            assert!((hi - lo).max() <= 1.2, "{kind:?}");
        }
    }
}
