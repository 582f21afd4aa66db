//! Keypoint extraction from scalar volumes: structure-tensor distinctiveness
//! scoring plus non-maximum suppression.
//!
//! The score is `1 / trace((S + eps I)^-1)` of the Gaussian-integrated
//! structure tensor `S = G_sw * (grad v grad v^T)`, which is large only where
//! all three eigenvalues are large (corner-like in every direction). Selected
//! voxels are strict score maxima within `nms_radius` (world units).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{PointCloud, Vec3};
use crate::{Error, Result};

/// Dense scalar volume with anisotropic voxel spacing (world units/voxel).
/// Voxels are stored x-fastest: `idx = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: Vec3,
    voxels: Vec<f64>,
}

impl Volume {
    pub const MIN_DIM: usize = 8;

    pub fn new(dims: (usize, usize, usize), spacing: Vec3, voxels: Vec<f64>) -> Result<Self> {
        if dims.0 < Self::MIN_DIM || dims.1 < Self::MIN_DIM || dims.2 < Self::MIN_DIM {
            return Err(Error::VolumeTooSmall { dims });
        }
        let expected = dims.0 * dims.1 * dims.2;
        if voxels.len() != expected {
            return Err(Error::RowCountMismatch {
                what: "volume voxels",
                expected,
                got: voxels.len(),
            });
        }
        if voxels.iter().any(|v| !v.is_finite()) || spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::NonFinite { what: "volume" });
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        spacing: Vec3,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    /// World extent per axis: `(n - 1) * spacing`.
    pub fn extent(&self) -> Vec3 {
        [
            (self.dims.0 - 1) as f64 * self.spacing[0],
            (self.dims.1 - 1) as f64 * self.spacing[1],
            (self.dims.2 - 1) as f64 * self.spacing[2],
        ]
    }

    /// Map voxel coordinates into the normalized cube. The volume center
    /// goes to the origin and the largest axis spans [-1, 1]; aspect ratio
    /// is preserved.
    pub fn voxel_to_normalized(&self, v: Vec3) -> Vec3 {
        let ext = self.extent();
        let max_ext = ext[0].max(ext[1]).max(ext[2]);
        let scale = 2.0 / max_ext;
        [
            (v[0] * self.spacing[0] - ext[0] / 2.0) * scale,
            (v[1] * self.spacing[1] - ext[1] / 2.0) * scale,
            (v[2] * self.spacing[2] - ext[2] / 2.0) * scale,
        ]
    }

    pub fn normalized_to_voxel(&self, p: Vec3) -> Vec3 {
        let ext = self.extent();
        let max_ext = ext[0].max(ext[1]).max(ext[2]);
        let scale = max_ext / 2.0;
        [
            (p[0] * scale + ext[0] / 2.0) / self.spacing[0],
            (p[1] * scale + ext[1] / 2.0) / self.spacing[1],
            (p[2] * scale + ext[2] / 2.0) / self.spacing[2],
        ]
    }
}

/// Detector parameters. Gaussian scales are in voxels, `nms_radius` in world
/// units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeypointConfig {
    pub sigma_grad: f64,
    pub sigma_window: f64,
    pub nms_radius: f64,
    pub max_points: usize,
    pub epsilon: f64,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        Self {
            sigma_grad: 1.0,
            sigma_window: 2.0,
            nms_radius: 3.0,
            max_points: 512,
            epsilon: 1e-6,
        }
    }
}

impl KeypointConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_grad", self.sigma_grad),
            ("sigma_window", self.sigma_window),
            ("nms_radius", self.nms_radius),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("keypoints.{name} must be positive")));
            }
        }
        if self.max_points == 0 {
            return Err(Error::Config("keypoints.max_points must be positive".into()));
        }
        Ok(())
    }
}

/// Symmetric 3x3 tensor per voxel, packed as [xx, xy, xz, yy, yz, zz].
#[derive(Debug, Clone)]
pub struct TensorField {
    pub dims: (usize, usize, usize),
    pub data: Vec<[f64; 6]>,
}

/// Truncated normalized Gaussian taps, radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable convolution along one axis with clamped (replicate) borders.
fn blur_axis(data: &[f64], dims: (usize, usize, usize), kernel: &[f64], axis: usize) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let radius = kernel.len() / 2;
    let mut out = vec![0.0; data.len()];
    let n_axis = [nx, ny, nz][axis] as isize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    let off = t as isize - radius as isize;
                    let (mut sx, mut sy, mut sz) = (x as isize, y as isize, z as isize);
                    match axis {
                        0 => sx += off,
                        1 => sy += off,
                        _ => sz += off,
                    }
                    let clamp = |v: isize| v.clamp(0, n_axis - 1) as usize;
                    let (cx, cy, cz) = match axis {
                        0 => (clamp(sx), sy as usize, sz as usize),
                        1 => (sx as usize, clamp(sy), sz as usize),
                        _ => (sx as usize, sy as usize, clamp(sz)),
                    };
                    acc += w * data[cx + nx * (cy + ny * cz)];
                }
                out[x + nx * (y + ny * z)] = acc;
            }
        }
    }
    out
}

pub(crate) fn gaussian_blur(data: &[f64], dims: (usize, usize, usize), sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let a = blur_axis(data, dims, &kernel, 0);
    let b = blur_axis(&a, dims, &kernel, 1);
    blur_axis(&b, dims, &kernel, 2)
}

/// Gaussian-integrated outer product of smoothed central-difference
/// gradients: `S = G_sw * (grad v grad v^T)` with `grad` at scale
/// `sigma_grad`. Border voxels use clamped sampling throughout.
pub fn structure_tensor(v: &Volume, cfg: &KeypointConfig) -> TensorField {
    let (nx, ny, nz) = v.dims;
    let smoothed = gaussian_blur(&v.voxels, v.dims, cfg.sigma_grad);
    let at = |x: isize, y: isize, z: isize| -> f64 {
        let cx = x.clamp(0, nx as isize - 1) as usize;
        let cy = y.clamp(0, ny as isize - 1) as usize;
        let cz = z.clamp(0, nz as isize - 1) as usize;
        smoothed[cx + nx * (cy + ny * cz)]
    };
    let mut chans: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; v.voxels.len()]);
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let gx = (at(x + 1, y, z) - at(x - 1, y, z)) / (2.0 * v.spacing[0]);
                let gy = (at(x, y + 1, z) - at(x, y - 1, z)) / (2.0 * v.spacing[1]);
                let gz = (at(x, y, z + 1) - at(x, y, z - 1)) / (2.0 * v.spacing[2]);
                let i = x as usize + nx * (y as usize + ny * z as usize);
                chans[0][i] = gx * gx;
                chans[1][i] = gx * gy;
                chans[2][i] = gx * gz;
                chans[3][i] = gy * gy;
                chans[4][i] = gy * gz;
                chans[5][i] = gz * gz;
            }
        }
    }
    let blurred: Vec<Vec<f64>> = chans
        .iter()
        .map(|c| gaussian_blur(c, v.dims, cfg.sigma_window))
        .collect();
    let data = (0..v.voxels.len())
        .map(|i| std::array::from_fn(|c| blurred[c][i]))
        .collect();
    TensorField { dims: v.dims, data }
}

/// Distinctiveness per voxel: `1 / trace((S + eps I)^-1)`, i.e. the harmonic
/// combination `1 / sum_i 1/(lambda_i + eps)` of the tensor eigenvalues.
pub fn foerstner_score(field: &TensorField, epsilon: f64) -> Vec<f64> {
    field
        .data
        .iter()
        .map(|s| {
            let (a, b, c, d, e, f) = (
                s[0] + epsilon,
                s[1],
                s[2],
                s[3] + epsilon,
                s[4],
                s[5] + epsilon,
            );
            // trace(adj(A)) and det(A) for the symmetric matrix
            // [[a, b, c], [b, d, e], [c, e, f]]
            let trace_adj = (d * f - e * e) + (a * f - c * c) + (a * d - b * b);
            let det = a * (d * f - e * e) - b * (b * f - e * c) + c * (b * e - d * c);
            det / trace_adj
        })
        .collect()
}

/// Strict score maxima within `nms_radius`, as flat voxel indices with their
/// scores, sorted by descending score (ties toward the lower index).
pub fn nms_voxel_maxima(scores: &[f64], v: &Volume, cfg: &KeypointConfig) -> Vec<(usize, f64)> {
    let (nx, ny, nz) = v.dims;
    assert_eq!(scores.len(), v.voxels.len(), "score field must match volume");
    let r = cfg.nms_radius;
    let reach = |s: f64| (r / s).floor() as isize;
    let (rx, ry, rz) = (reach(v.spacing[0]), reach(v.spacing[1]), reach(v.spacing[2]));
    let mut offsets = Vec::new();
    for dz in -rz..=rz {
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let wx = dx as f64 * v.spacing[0];
                let wy = dy as f64 * v.spacing[1];
                let wz = dz as f64 * v.spacing[2];
                if wx * wx + wy * wy + wz * wz <= r * r {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    let mut maxima = Vec::new();
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            'next: for x in 0..nx as isize {
                let i = x as usize + nx * (y as usize + ny * z as usize);
                let s = scores[i];
                for &(dx, dy, dz) in &offsets {
                    let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                    if qx < 0
                        || qy < 0
                        || qz < 0
                        || qx >= nx as isize
                        || qy >= ny as isize
                        || qz >= nz as isize
                    {
                        continue;
                    }
                    if scores[qx as usize + nx * (qy as usize + ny * qz as usize)] >= s {
                        continue 'next;
                    }
                }
                maxima.push((i, s));
            }
        }
    }
    maxima.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    maxima
}

/// Run NMS on a score field and return the surviving voxels (capped at
/// `max_points`) as a normalized-coordinate point cloud.
pub fn nms_select(scores: &[f64], v: &Volume, cfg: &KeypointConfig) -> PointCloud {
    let maxima = nms_voxel_maxima(scores, v, cfg);
    let (nx, ny) = (v.dims.0, v.dims.1);
    let points = maxima
        .iter()
        .take(cfg.max_points)
        .map(|&(i, _)| {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            v.voxel_to_normalized([x as f64, y as f64, z as f64])
        })
        .collect();
    PointCloud::new(points).expect("voxel coordinates are finite")
}

/// Full detector: structure tensor, distinctiveness score, NMS.
pub fn detect_keypoints(v: &Volume, cfg: &KeypointConfig) -> PointCloud {
    let field = structure_tensor(v, cfg);
    let scores = foerstner_score(&field, cfg.epsilon);
    nms_select(&scores, v, cfg)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {} {} {}",
        v.dims.0, v.dims.1, v.dims.2, v.spacing[0], v.spacing[1], v.spacing[2]
    );
    for chunk in v.voxels.chunks(v.dims.0) {
        let row: Vec<String> = chunk.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 6 {
        return Err(err(1, "expected header 'H W D sx sy sz'".into()));
    }
    let dim = |i: usize| -> Result<usize> {
        head[i]
            .parse()
            .map_err(|e| err(1, format!("bad dim '{}': {e}", head[i])))
    };
    let sp = |i: usize| -> Result<f64> {
        head[i]
            .parse()
            .map_err(|e| err(1, format!("bad spacing '{}': {e}", head[i])))
    };
    let dims = (dim(0)?, dim(1)?, dim(2)?);
    let spacing = [sp(3)?, sp(4)?, sp(5)?];
    let mut voxels = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    for (i, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            voxels.push(
                tok.parse()
                    .map_err(|e| err(i + 2, format!("bad voxel '{tok}': {e}")))?,
            );
        }
    }
    Volume::new(dims, spacing, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cfg() -> KeypointConfig {
        KeypointConfig::default()
    }

    #[test]
    fn constant_volume_has_zero_tensor() {
        let v = Volume::from_fn((10, 10, 10), [1.0; 3], |_, _, _| 4.2).unwrap();
        let field = structure_tensor(&v, &unit_cfg());
        for t in &field.data {
            for c in t {
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_ramp_concentrates_in_s11() {
        let v = Volume::from_fn((12, 12, 12), [1.0; 3], |x, _, _| x as f64).unwrap();
        let field = structure_tensor(&v, &unit_cfg());
        // interior voxel: only the xx entry is nonzero
        let i = v.index(6, 6, 6);
        let t = field.data[i];
        assert!(t[0] > 0.5, "S11 = {}", t[0]);
        for c in &t[1..] {
            assert!(c.abs() < 1e-9, "off entries {t:?}");
        }
    }

    #[test]
    fn foerstner_score_closed_forms() {
        let eps = 1e-6;
        let zero = TensorField {
            dims: (8, 8, 8),
            data: vec![[0.0; 6]],
        };
        let s = foerstner_score(&zero, eps);
        assert!((s[0] - eps / 3.0).abs() < 1e-18);

        let c = 0.7;
        let iso = TensorField {
            dims: (8, 8, 8),
            data: vec![[c, 0.0, 0.0, c, 0.0, c]],
        };
        let s = foerstner_score(&iso, eps);
        assert!((s[0] - (c + eps) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_score_field_yields_no_maxima() {
        let v = Volume::from_fn((10, 10, 10), [1.0; 3], |_, _, _| 0.0).unwrap();
        let scores = vec![1.0; 1000];
        let maxima = nms_voxel_maxima(&scores, &v, &unit_cfg());
        assert!(maxima.is_empty());
    }

    #[test]
    fn volume_io_round_trip() {
        let dir = std::env::temp_dir().join("pointreg-vol-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vol.txt");
        let v = Volume::from_fn((8, 9, 10), [1.0, 0.5, 2.0], |x, y, z| {
            (x * 31 + y * 7 + z) as f64 * 0.125
        })
        .unwrap();
        write_volume(&path, &v).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn rejects_small_volumes() {
        let r = Volume::new((4, 8, 8), [1.0; 3], vec![0.0; 4 * 8 * 8]);
        assert!(matches!(r, Err(Error::VolumeTooSmall { .. })));
    }

    #[test]
    fn normalized_round_trip() {
        let v = Volume::from_fn((8, 16, 12), [1.0, 0.5, 2.0], |_, _, _| 0.0).unwrap();
        let p = [3.0, 11.0, 7.5];
        let n = v.voxel_to_normalized(p);
        let back = v.normalized_to_voxel(n);
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
        // largest axis spans [-1, 1]
        let lo = v.voxel_to_normalized([0.0, 0.0, 0.0]);
        let hi = v.voxel_to_normalized([7.0, 15.0, 11.0]);
        assert!((lo[2] + 1.0).abs() < 1e-12 && (hi[2] - 1.0).abs() < 1e-12);
    }
}
