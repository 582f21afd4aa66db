//! Point clouds, knn graphs, similarity transforms, and displacement fields.
//!
//! Coordinates live in normalized units (roughly [-1, 1]^3). Augmentation
//! transforms act as `x' = s R x + t`; because both clouds of a pair are
//! transformed together, the induced action on a correspondence displacement
//! is `d' = s R d`, with exact inverse `(1/s) R^T d`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub(crate) fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Keypoint coordinates, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "point cloud",
            });
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    /// Flattened row-major coordinates, e.g. for feeding the feature network.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Fixed-k nearest-neighbor structure over one cloud. Rows are sorted by
/// ascending distance; ties break toward the lower index; self is excluded.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_points(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Undirected edge set: the union of knn directions, each pair once,
    /// sorted for determinism.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(self.neighbors.len());
        for i in 0..self.n_points() {
            for &j in self.row(i) {
                edges.push((i.min(j), i.max(j)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

/// Exact Euclidean k-nearest neighbors per point (brute force).
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
    let n = cloud.len();
    if k >= n {
        return Err(Error::KnnTooLarge { k, n });
    }
    let pts = cloud.points();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        for (j, p) in pts.iter().enumerate() {
            if j != i {
                scratch.push((dist2(&pts[i], p), j));
            }
        }
        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        neighbors.extend(scratch[..k].iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph { k, neighbors })
}

/// Rotation + isotropic scale + translation: `x' = s R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    rotation: Mat3,
    scale: f64,
    translation: Vec3,
}

impl SimilarityTransform {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn new(rotation: Mat3, scale: f64, translation: Vec3) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::NonPositiveScale(scale));
        }
        let rt_r = mat_mul(&transpose(&rotation), &rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rt_r[i][j] - expect).abs() > Self::ORTHO_TOL {
                    return Err(Error::InvalidRotation {
                        detail: format!("R^T R deviates from identity at ({i}, {j})"),
                    });
                }
            }
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > Self::ORTHO_TOL {
            return Err(Error::InvalidRotation {
                detail: format!("det(R) = {det} != 1"),
            });
        }
        Ok(Self {
            rotation,
            scale,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            scale: 1.0,
            translation: [0.0; 3],
        }
    }

    /// Intrinsic rotations composed as `Rz(rz) Ry(ry) Rx(rx)`, angles in
    /// radians.
    pub fn from_euler(rx: f64, ry: f64, rz: f64, scale: f64, translation: Vec3) -> Result<Self> {
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let rot_x = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let rot_y = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rot_z = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        Self::new(mat_mul(&rot_z, &mat_mul(&rot_y, &rot_x)), scale, translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let inv_s = 1.0 / self.scale;
        let rt_t = mat_vec(&rt, &self.translation);
        Self {
            rotation: rt,
            scale: inv_s,
            translation: [-inv_s * rt_t[0], -inv_s * rt_t[1], -inv_s * rt_t[2]],
        }
    }
}

/// Per-keypoint 3-vectors, aligned index-for-index with a fixed cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    vectors: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(vectors: Vec<Vec3>) -> Result<Self> {
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "displacement field",
            });
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn flat(&self) -> Vec<f64> {
        self.vectors.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::RowCountMismatch {
                what: "displacement-from-flat",
                expected: flat.len() / 3 * 3,
                got: flat.len(),
            });
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Apply the augmentation to every point: `x' = s R x + t`.
pub fn apply_transform(cloud: &PointCloud, t: &SimilarityTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
    }
}

/// Forward action of an augmentation on displacement vectors: `d' = s R d`.
/// Translation drops out because both clouds of a pair move together.
pub fn transform_displacements(
    d: &DisplacementField,
    t: &SimilarityTransform,
) -> DisplacementField {
    DisplacementField {
        vectors: d
            .vectors
            .iter()
            .map(|v| {
                let r = mat_vec(&t.rotation, v);
                [t.scale * r[0], t.scale * r[1], t.scale * r[2]]
            })
            .collect(),
    }
}

/// Undo the augmentation on predicted displacements: `d = (1/s) R^T d'`.
pub fn invert_displacements(d: &DisplacementField, t: &SimilarityTransform) -> DisplacementField {
    let rt = transpose(&t.rotation);
    let inv_s = 1.0 / t.scale;
    DisplacementField {
        vectors: d
            .vectors
            .iter()
            .map(|v| {
                let r = mat_vec(&rt, v);
                [inv_s * r[0], inv_s * r[1], inv_s * r[2]]
            })
            .collect(),
    }
}

/// Draw a random augmentation: Euler angles (degrees) uniform in
/// `[-rot_range_deg, rot_range_deg]` per axis, scale uniform in
/// `scale_range`, translation components uniform in
/// `[-trans_range, trans_range]`. Draw order is rx, ry, rz, s, t.
pub fn sample_transform(
    rng: &mut impl Rng,
    rot_range_deg: f64,
    scale_range: (f64, f64),
    trans_range: f64,
) -> SimilarityTransform {
    let deg = rot_range_deg.abs();
    let rx = rng.gen_range(-deg..=deg).to_radians();
    let ry = rng.gen_range(-deg..=deg).to_radians();
    let rz = rng.gen_range(-deg..=deg).to_radians();
    let s = rng.gen_range(scale_range.0..=scale_range.1);
    let tr = trans_range.abs();
    let t = [
        rng.gen_range(-tr..=tr),
        rng.gen_range(-tr..=tr),
        rng.gen_range(-tr..=tr),
    ];
    SimilarityTransform::from_euler(rx, ry, rz, s, t).expect("euler rotations are orthonormal")
}

fn format_rows(n: usize, rows: impl Iterator<Item = Vec3>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{n} 3");
    for r in rows {
        let _ = writeln!(out, "{} {} {}", r[0], r[1], r[2]);
    }
    out
}

fn parse_rows(path: &Path, text: &str) -> Result<Vec<Vec3>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 || head[1] != "3" {
        return Err(err(1, format!("expected header 'N 3', got '{header}'")));
    }
    let n: usize = head[0]
        .parse()
        .map_err(|e| err(1, format!("bad row count: {e}")))?;
    let mut rows = Vec::with_capacity(n);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = [0.0; 3];
        let mut parts = line.split_whitespace();
        for v in &mut vals {
            let tok = parts
                .next()
                .ok_or_else(|| err(idx + 1, "expected 3 values".into()))?;
            *v = tok
                .parse()
                .map_err(|e| err(idx + 1, format!("bad float '{tok}': {e}")))?;
        }
        if parts.next().is_some() {
            return Err(err(idx + 1, "trailing values".into()));
        }
        rows.push(vals);
    }
    if rows.len() != n {
        return Err(err(
            1,
            format!("header promised {n} rows, found {}", rows.len()),
        ));
    }
    Ok(rows)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, format_rows(cloud.len(), cloud.points.iter().copied()))?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    PointCloud::new(parse_rows(path, &text)?)
}

pub fn write_displacements(path: &Path, d: &DisplacementField) -> Result<()> {
    std::fs::write(path, format_rows(d.len(), d.vectors.iter().copied()))?;
    Ok(())
}

pub fn read_displacements(path: &Path) -> Result<DisplacementField> {
    let text = std::fs::read_to_string(path)?;
    DisplacementField::new(parse_rows(path, &text)?)
}
