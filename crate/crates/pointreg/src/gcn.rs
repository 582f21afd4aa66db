//! Edge-convolution graph network mapping raw keypoint coordinates to
//! point-wise geometric features.
//!
//! Per layer, each directed knn edge (i, j) computes
//! `e_ij = LeakyReLU(W [h_i ; h_j - h_i] + b)` and node i aggregates by
//! channelwise max over its neighbors. The knn graph is built once from the
//! input coordinates and kept static across layers. A final per-point linear
//! layer maps to the feature dimension.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor};

use crate::geometry::{knn_graph, KnnGraph, PointCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcnConfig {
    /// Channel counts through the edge-conv stack, input first.
    pub layer_dims: Vec<usize>,
    /// Output channels of the final per-point linear layer.
    pub feature_dim: usize,
    pub knn_k: usize,
    pub leaky_slope: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![3, 32, 64, 64],
            feature_dim: 64,
            knn_k: 9,
            leaky_slope: 0.2,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("gcn.layer_dims needs at least two entries".into()));
        }
        if self.layer_dims[0] != 3 {
            return Err(Error::Config(format!(
                "gcn.layer_dims must start at 3 (raw coordinates), got {}",
                self.layer_dims[0]
            )));
        }
        if self.layer_dims.iter().any(|&d| d == 0) || self.feature_dim == 0 {
            return Err(Error::Config("gcn dims must be positive".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("gcn.knn_k must be positive".into()));
        }
        Ok(())
    }

    /// (name, shape) pairs of the parameter set this config implies.
    fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for (i, pair) in self.layer_dims.windows(2).enumerate() {
            let (c_in, c_out) = (pair[0], pair[1]);
            specs.push((format!("edge_conv{i}.weight"), vec![2 * c_in, c_out]));
            specs.push((format!("edge_conv{i}.bias"), vec![c_out]));
        }
        let last = *self.layer_dims.last().unwrap();
        specs.push(("head.weight".into(), vec![last, self.feature_dim]));
        specs.push(("head.bias".into(), vec![self.feature_dim]));
        specs
    }
}

/// Ordered, named parameter tensors. The ordering is stable across clone,
/// save, and load, so optimizer state and EMA blending can align by index.
#[derive(Debug, Clone)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Seeded uniform init in [-a, a] with a = 1/sqrt(fan_in). Weights draw
    /// row-major, bias after its weight, layers in order.
    pub fn init(cfg: &GcnConfig, rng: &mut impl Rng) -> Self {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (name, shape) in cfg.parameter_specs() {
            // bias bound follows its layer's fan-in (the weight pushed just
            // before it), not the bias length
            let fan_in = if name.ends_with(".bias") {
                bias_fan_in(&entries)
            } else {
                shape[0]
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            entries.push((name, Tensor::new(&shape, values).expect("spec shape")));
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Attach every tensor to `tape` as a differentiable leaf.
    pub fn attach(&self, tape: &mut Tape) -> Result<ModelParams> {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), tape.leaf(&t.detach())?)))
            .collect::<Result<_>>()?;
        Ok(ModelParams { entries })
    }

    /// Replace values positionally, keeping names; shapes must match.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<ModelParams> {
        if values.len() != self.entries.len() {
            return Err(Error::RowCountMismatch {
                what: "model parameters",
                expected: self.entries.len(),
                got: values.len(),
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|((n, old), new)| {
                if old.shape() != new.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {n}: shape {:?} cannot replace {:?}",
                        new.shape(),
                        old.shape()
                    )));
                }
                Ok((n.clone(), new))
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "tensors {}", self.entries.len());
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {} {}", t.shape().len(), dims.join(" "));
            let vals: Vec<String> = t.values().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let text = std::fs::read_to_string(path)?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let count: usize = header
            .strip_prefix("tensors ")
            .ok_or_else(|| bad(format!("bad header '{header}'")))?
            .parse()
            .map_err(|e| bad(format!("bad tensor count: {e}")))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let meta = lines.next().ok_or_else(|| bad("truncated file".into()))?;
            let parts: Vec<&str> = meta.split_whitespace().collect();
            if parts.len() < 3 || parts[0] != "tensor" {
                return Err(bad(format!("bad tensor header '{meta}'")));
            }
            let name = parts[1].to_string();
            let ndim: usize = parts[2]
                .parse()
                .map_err(|e| bad(format!("bad ndim: {e}")))?;
            if parts.len() != 3 + ndim {
                return Err(bad(format!("tensor {name}: expected {ndim} dims")));
            }
            let shape: Vec<usize> = parts[3..]
                .iter()
                .map(|d| d.parse().map_err(|e| bad(format!("bad dim: {e}"))))
                .collect::<Result<_>>()?;
            let data = lines.next().ok_or_else(|| bad("missing values".into()))?;
            let values: Vec<f64> = data
                .split_whitespace()
                .map(|v| v.parse().map_err(|e| bad(format!("bad value: {e}"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(&shape, values).map_err(|e| bad(e.to_string()))?;
            entries.push((name, t));
        }
        Ok(ModelParams { entries })
    }

    /// Reject checkpoints whose names or shapes do not match the config.
    pub fn validate_for(&self, cfg: &GcnConfig) -> Result<()> {
        let specs = cfg.parameter_specs();
        if specs.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                specs.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (got_name, got)) in specs.iter().zip(&self.entries) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(())
    }
}

fn bias_fan_in(entries: &[(String, Tensor)]) -> usize {
    // the weight pushed just before this bias
    entries
        .last()
        .map(|(_, t)| t.shape()[0])
        .unwrap_or(1)
}

/// Directed edge lists of a knn graph: (centers, neighbors), grouped by
/// center in row order.
pub(crate) fn edge_lists(graph: &KnnGraph) -> (Vec<usize>, Vec<usize>) {
    let n = graph.n_points();
    let k = graph.k();
    let mut centers = Vec::with_capacity(n * k);
    let mut nbrs = Vec::with_capacity(n * k);
    for i in 0..n {
        for &j in graph.row(i) {
            centers.push(i);
            nbrs.push(j);
        }
    }
    (centers, nbrs)
}

/// One edge-convolution layer over precomputed edge lists.
pub fn edge_conv(
    tape: &mut Tape,
    h: &Tensor,
    centers: &[usize],
    nbrs: &[usize],
    weight: &Tensor,
    bias: &Tensor,
    slope: f64,
    n_points: usize,
) -> Result<Tensor> {
    let h_c = tape.gather_rows(h, centers)?;
    let h_n = tape.gather_rows(h, nbrs)?;
    let diff = tape.sub(&h_n, &h_c)?;
    let edge = tape.concat_cols(&h_c, &diff)?;
    let lin = tape.matmul(&edge, weight)?;
    let lin = tape.add_bias(&lin, bias)?;
    let act = tape.leaky_relu(&lin, slope)?;
    Ok(tape.segment_max(&act, centers, n_points)?)
}

/// Feature extraction with a caller-provided graph (must be built over the
/// same cloud).
pub fn forward_with_graph(
    tape: &mut Tape,
    cloud: &PointCloud,
    graph: &KnnGraph,
    params: &ModelParams,
    cfg: &GcnConfig,
) -> Result<Tensor> {
    let n = cloud.len();
    let (centers, nbrs) = edge_lists(graph);
    let mut h = Tensor::new(&[n, 3], cloud.flat())?;
    for i in 0..cfg.layer_dims.len() - 1 {
        let weight = params
            .get(&format!("edge_conv{i}.weight"))
            .ok_or_else(|| Error::Checkpoint(format!("missing edge_conv{i}.weight")))?;
        let bias = params
            .get(&format!("edge_conv{i}.bias"))
            .ok_or_else(|| Error::Checkpoint(format!("missing edge_conv{i}.bias")))?;
        h = edge_conv(tape, &h, &centers, &nbrs, weight, bias, cfg.leaky_slope, n)?;
    }
    let w = params
        .get("head.weight")
        .ok_or_else(|| Error::Checkpoint("missing head.weight".into()))?;
    let b = params
        .get("head.bias")
        .ok_or_else(|| Error::Checkpoint("missing head.bias".into()))?;
    let out = tape.matmul(&h, w)?;
    Ok(tape.add_bias(&out, b)?)
}

/// Per-point geometric features of a cloud: builds the static knn graph from
/// the input coordinates, stacks the edge-conv layers, applies the head.
pub fn forward(
    tape: &mut Tape,
    cloud: &PointCloud,
    params: &ModelParams,
    cfg: &GcnConfig,
) -> Result<Tensor> {
    if cloud.len() <= cfg.knn_k {
        return Err(Error::CloudTooSmall {
            n: cloud.len(),
            required: cfg.knn_k + 1,
            what: "gcn forward",
        });
    }
    let graph = knn_graph(cloud, cfg.knn_k)?;
    forward_with_graph(tape, cloud, &graph, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> GcnConfig {
        GcnConfig {
            layer_dims: vec![3, 4, 4],
            feature_dim: 4,
            knn_k: 2,
            leaky_slope: 0.2,
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(&cfg, &mut rng);
        let zeroed = params
            .with_values(
                params
                    .entries()
                    .iter()
                    .map(|(_, t)| Tensor::zeros(t.shape()))
                    .collect(),
            )
            .unwrap();
        let cloud = random_cloud(8, 1);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &cloud, &zeroed, &cfg).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_single_edge() {
        // two mutually nearest points, one layer with C_in = 1, C_out = 2
        let mut tape = Tape::new();
        let h = Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        let weight = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 0.25]]).unwrap();
        let bias = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
        let out = edge_conv(&mut tape, &h, &[0, 1], &[1, 0], &weight, &bias, 0.2, 2).unwrap();
        // edge 0->1: [h0, h1 - h0] = [2, 3]; W^T rows: [2*1 + 3*0.5, 2*-1 + 3*0.25] = [3.5, -1.25]
        // + bias = [3.6, -1.45]; leaky: [3.6, -0.29]
        // edge 1->0: [5, -3] -> [5 - 1.5, -5 - 0.75] = [3.5, -5.75] + bias = [3.6, -5.95] -> [3.6, -1.19]
        let expect = [3.6, -0.29, 3.6, -1.19];
        for (got, want) in out.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&cfg, &mut rng);
        let cloud = random_cloud(10, 2);

        let mut tape = Tape::new();
        let base = forward(&mut tape, &cloud, &params, &cfg).unwrap();

        // reverse the point order (a permutation with no knn ties in random data)
        let permuted: Vec<_> = cloud.points().iter().rev().copied().collect();
        let permuted = PointCloud::new(permuted).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &permuted, &params, &cfg).unwrap();

        let c = cfg.feature_dim;
        let n = cloud.len();
        for i in 0..n {
            let a = &base.values()[i * c..(i + 1) * c];
            let b = &out.values()[(n - 1 - i) * c..(n - i) * c];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(&cfg, &mut rng);
        let cloud = random_cloud(12, 3);
        let run = || {
            let mut tape = Tape::new();
            forward(&mut tape, &cloud, &params, &cfg)
                .unwrap()
                .values()
                .to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_small_cloud() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(&cfg, &mut rng);
        let cloud = random_cloud(2, 4);
        assert!(matches!(
            forward(&mut Tape::new(), &cloud, &params, &cfg),
            Err(Error::CloudTooSmall { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(&cfg, &mut rng);
        let dir = std::env::temp_dir().join("pointreg-gcn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.ckpt");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        loaded.validate_for(&cfg).unwrap();
        for ((n1, t1), (n2, t2)) in params.entries().iter().zip(loaded.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.values(), t2.values());
        }

        let other = GcnConfig {
            layer_dims: vec![3, 8, 4],
            ..small_cfg()
        };
        assert!(loaded.validate_for(&other).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small_cfg();
        let a = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let b = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        for ((_, t1), (_, t2)) in a.entries().iter().zip(b.entries()) {
            assert_eq!(t1.values(), t2.values());
        }
    }
}
