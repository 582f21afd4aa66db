//! Differentiable correspondence inference: nearest-neighbor candidate sets,
//! feature-distance data costs, min-sum loopy belief propagation with a
//! quadratic smoothness regularizer, and soft displacement readout.
//!
//! Messages use a synchronous (flooding) schedule and are min-normalized for
//! stability. Gradients flow through the min via its argmin and through the
//! smooth quadratic and softmax parts exactly, so the whole block is
//! tape-differentiable end to end.

use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor};

use crate::gcn::{self, GcnConfig, ModelParams};
use crate::geometry::{dist2, knn_graph, DisplacementField, KnnGraph, PointCloud, SimilarityTransform};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbpConfig {
    /// Candidates per fixed point (L).
    pub n_candidates: usize,
    pub n_iters: usize,
    /// Smoothness weight on squared candidate-displacement differences.
    pub alpha_reg: f64,
    /// Softmax temperature of the displacement readout.
    pub temperature: f64,
    /// Message damping in [0, 1); 0 disables.
    pub damping: f64,
    /// knn over the fixed cloud for the message edges.
    pub graph_k: usize,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            n_candidates: 16,
            n_iters: 10,
            alpha_reg: 1.0,
            temperature: 1.0,
            damping: 0.0,
            graph_k: 9,
        }
    }
}

impl LbpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 || self.n_iters == 0 || self.graph_k == 0 {
            return Err(Error::Config("lbp counts must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("lbp.temperature must be positive".into()));
        }
        if !(self.alpha_reg >= 0.0) {
            return Err(Error::Config("lbp.alpha_reg must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config("lbp.damping must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// L candidate correspondences per fixed point: moving-cloud indices plus
/// the displacement (candidate minus fixed point) each one encodes.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    n: usize,
    l: usize,
    indices: Vec<usize>,
    displacements: Vec<f64>,
}

impl CandidateSet {
    pub fn n_fixed(&self) -> usize {
        self.n
    }

    pub fn n_candidates(&self) -> usize {
        self.l
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn index(&self, i: usize, l: usize) -> usize {
        self.indices[i * self.l + l]
    }

    pub fn displacement(&self, i: usize, l: usize) -> [f64; 3] {
        let o = (i * self.l + l) * 3;
        [
            self.displacements[o],
            self.displacements[o + 1],
            self.displacements[o + 2],
        ]
    }

    /// Displacement table as an N x L x 3 constant tensor.
    pub fn displacement_tensor(&self) -> Tensor {
        Tensor::new(&[self.n, self.l, 3], self.displacements.clone()).expect("table shape")
    }

    /// Candidate set of the same pair after both clouds map through `t`:
    /// indices are preserved and displacements become `s R d`.
    pub fn transformed(&self, t: &SimilarityTransform) -> CandidateSet {
        let mut displacements = Vec::with_capacity(self.displacements.len());
        for d in self.displacements.chunks_exact(3) {
            let r = crate::geometry::mat_vec(t.rotation(), &[d[0], d[1], d[2]]);
            let s = t.scale();
            displacements.extend_from_slice(&[s * r[0], s * r[1], s * r[2]]);
        }
        CandidateSet {
            n: self.n,
            l: self.l,
            indices: self.indices.clone(),
            displacements,
        }
    }
}

/// For each fixed point, its L Euclidean-nearest moving points (ties toward
/// the lower index).
pub fn build_candidates(fixed: &PointCloud, moving: &PointCloud, l: usize) -> Result<CandidateSet> {
    let n = fixed.len();
    let m = moving.len();
    if l == 0 || l > m {
        return Err(Error::CloudTooSmall {
            n: m,
            required: l.max(1),
            what: "candidate construction",
        });
    }
    let mut indices = Vec::with_capacity(n * l);
    let mut displacements = Vec::with_capacity(n * l * 3);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(m);
    for fp in fixed.points() {
        scratch.clear();
        for (j, mp) in moving.points().iter().enumerate() {
            scratch.push((dist2(fp, mp), j));
        }
        scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        for &(_, j) in &scratch[..l] {
            indices.push(j);
            let mp = moving.point(j);
            displacements.extend_from_slice(&[mp[0] - fp[0], mp[1] - fp[1], mp[2] - fp[2]]);
        }
    }
    Ok(CandidateSet {
        n,
        l,
        indices,
        displacements,
    })
}

/// Channel-normalized squared feature distance per candidate:
/// `d_i(l) = ||feat_f[i] - feat_m[cand(i, l)]||^2 / C`.
pub fn data_cost(
    tape: &mut Tape,
    feat_f: &Tensor,
    feat_m: &Tensor,
    cand: &CandidateSet,
) -> Result<Tensor> {
    let &[n, c] = feat_f.shape() else {
        return Err(Error::Config("feat_f must be 2-D".into()));
    };
    let &[_, c_m] = feat_m.shape() else {
        return Err(Error::Config("feat_m must be 2-D".into()));
    };
    if c != c_m {
        return Err(Error::RowCountMismatch {
            what: "feature channels",
            expected: c,
            got: c_m,
        });
    }
    if n != cand.n_fixed() {
        return Err(Error::RowCountMismatch {
            what: "data cost rows",
            expected: cand.n_fixed(),
            got: n,
        });
    }
    let l = cand.n_candidates();
    let idx_f: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(l)).collect();
    let ff = tape.gather_rows(feat_f, &idx_f)?;
    let fm = tape.gather_rows(feat_m, cand.indices())?;
    let diff = tape.sub(&ff, &fm)?;
    let sq = tape.mul(&diff, &diff)?;
    let sums = tape.row_sum(&sq)?;
    let grid = tape.reshape(&sums, &[n, l])?;
    Ok(tape.scale(&grid, 1.0 / c as f64)?)
}

/// Message-passing structure: directed edges with reverse-edge lookup.
#[derive(Debug, Clone)]
pub struct MatchGraph {
    n: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    rev: Vec<usize>,
}

impl MatchGraph {
    /// Both directions of each undirected edge; edges must be deduplicated.
    pub fn from_undirected(n: usize, edges: &[(usize, usize)]) -> MatchGraph {
        let mut src = Vec::with_capacity(edges.len() * 2);
        let mut dst = Vec::with_capacity(edges.len() * 2);
        let mut rev = Vec::with_capacity(edges.len() * 2);
        for (e, &(i, j)) in edges.iter().enumerate() {
            src.push(i);
            dst.push(j);
            src.push(j);
            dst.push(i);
            rev.push(2 * e + 1);
            rev.push(2 * e);
        }
        MatchGraph { n, src, dst, rev }
    }

    /// Symmetrized knn connectivity (union of knn directions).
    pub fn from_knn(graph: &KnnGraph) -> MatchGraph {
        Self::from_undirected(graph.n_points(), &graph.undirected_edges())
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_directed(&self) -> usize {
        self.src.len()
    }
}

/// Pairwise smoothness costs per directed edge:
/// `P[e][l_src][l_dst] = alpha * ||delta_src(l_src) - delta_dst(l_dst)||^2`.
pub fn build_pairwise(cand: &CandidateSet, graph: &MatchGraph, alpha: f64) -> Tensor {
    let l = cand.n_candidates();
    let e_dir = graph.n_directed();
    let mut data = vec![0.0; e_dir * l * l];
    for e in 0..e_dir {
        let (i, j) = (graph.src[e], graph.dst[e]);
        for li in 0..l {
            let di = cand.displacement(i, li);
            for lj in 0..l {
                let dj = cand.displacement(j, lj);
                let dx = di[0] - dj[0];
                let dy = di[1] - dj[1];
                let dz = di[2] - dj[2];
                data[(e * l + li) * l + lj] = alpha * (dx * dx + dy * dy + dz * dz);
            }
        }
    }
    Tensor::new(&[e_dir, l, l], data).expect("pairwise shape")
}

/// Cost-domain beliefs, min-normalized per row (row minimum = 0); lower
/// means more likely.
#[derive(Debug, Clone)]
pub struct Beliefs(pub Tensor);

/// Min-sum belief propagation with an explicit message graph and
/// precomputed pairwise costs.
///
/// Per directed edge (i -> j):
/// `m(l_j) = min_{l_i} [ d_i(l_i) + P(l_i, l_j) + sum_{k in N(i) \ j} m_ki(l_i) ]`,
/// min-normalized, optionally damped against the previous iterate. After
/// `n_iters`, `b_i = d_i + sum_in m`, min-normalized per row.
pub fn lbp_min_sum_core(
    tape: &mut Tape,
    data: &Tensor,
    graph: &MatchGraph,
    pairwise: &Tensor,
    cfg: &LbpConfig,
) -> Result<Beliefs> {
    let &[n, l] = data.shape() else {
        return Err(Error::Config("data cost must be 2-D".into()));
    };
    if n != graph.n_nodes() {
        return Err(Error::RowCountMismatch {
            what: "lbp nodes",
            expected: graph.n_nodes(),
            got: n,
        });
    }
    if data.values().iter().any(|v| !v.is_finite())
        || pairwise.values().iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite { what: "lbp costs" });
    }
    let e_dir = graph.n_directed();
    if pairwise.shape() != [e_dir, l, l] {
        return Err(Error::RowCountMismatch {
            what: "pairwise blocks",
            expected: e_dir,
            got: pairwise.shape().first().copied().unwrap_or(0),
        });
    }

    let mut msg = Tensor::zeros(&[e_dir, l]);
    for _ in 0..cfg.n_iters {
        let incoming = tape.segment_sum(&msg, &graph.dst, n)?;
        let node_total = tape.add(data, &incoming)?;
        let at_src = tape.gather_rows(&node_total, &graph.src)?;
        let rev = tape.gather_rows(&msg, &graph.rev)?;
        let excl = tape.sub(&at_src, &rev)?;
        let fresh = tape.min_plus(&excl, pairwise)?;
        let fresh = tape.row_min_normalize(&fresh)?;
        msg = if cfg.damping > 0.0 {
            let new_part = tape.scale(&fresh, 1.0 - cfg.damping)?;
            let old_part = tape.scale(&msg, cfg.damping)?;
            tape.add(&new_part, &old_part)?
        } else {
            fresh
        };
    }
    let incoming = tape.segment_sum(&msg, &graph.dst, n)?;
    let raw = tape.add(data, &incoming)?;
    Ok(Beliefs(tape.row_min_normalize(&raw)?))
}

/// Belief propagation over the symmetrized knn graph of the fixed cloud.
pub fn lbp_min_sum(
    tape: &mut Tape,
    data: &Tensor,
    cand: &CandidateSet,
    fixed_graph: &KnnGraph,
    cfg: &LbpConfig,
) -> Result<Beliefs> {
    let graph = MatchGraph::from_knn(fixed_graph);
    let pairwise = build_pairwise(cand, &graph, cfg.alpha_reg);
    lbp_min_sum_core(tape, data, &graph, &pairwise, cfg)
}

/// Probability-weighted displacement readout:
/// `p_i = softmax(-b_i / tau)`, `phi_i = sum_l p_i(l) delta_i(l)`.
pub fn soft_displacements(
    tape: &mut Tape,
    beliefs: &Beliefs,
    cand: &CandidateSet,
    temperature: f64,
) -> Result<Tensor> {
    let scaled = tape.scale(&beliefs.0, -1.0 / temperature)?;
    let probs = tape.softmax(&scaled, 1)?;
    Ok(tape.weighted_sum(&probs, &cand.displacement_tensor())?)
}

/// Everything needed to run registration on a pair repeatedly: the
/// theta-independent structures, computed once.
pub struct PairGeometry {
    pub fixed_graph: KnnGraph,
    pub moving_graph: KnnGraph,
    pub match_graph: MatchGraph,
    pub candidates: CandidateSet,
    /// Pairwise costs at unit augmentation scale.
    pub pairwise: Tensor,
}

impl PairGeometry {
    pub fn build(
        fixed: &PointCloud,
        moving: &PointCloud,
        gcn_cfg: &GcnConfig,
        lbp_cfg: &LbpConfig,
    ) -> Result<PairGeometry> {
        let min_fixed = gcn_cfg.knn_k.max(lbp_cfg.graph_k) + 1;
        if fixed.len() < min_fixed {
            return Err(Error::CloudTooSmall {
                n: fixed.len(),
                required: min_fixed,
                what: "registration (fixed cloud)",
            });
        }
        let min_moving = (gcn_cfg.knn_k + 1).max(lbp_cfg.n_candidates);
        if moving.len() < min_moving {
            return Err(Error::CloudTooSmall {
                n: moving.len(),
                required: min_moving,
                what: "registration (moving cloud)",
            });
        }
        let fixed_graph = knn_graph(fixed, gcn_cfg.knn_k)?;
        let moving_graph = knn_graph(moving, gcn_cfg.knn_k)?;
        let lbp_knn = if lbp_cfg.graph_k == gcn_cfg.knn_k {
            fixed_graph.clone()
        } else {
            knn_graph(fixed, lbp_cfg.graph_k)?
        };
        let match_graph = MatchGraph::from_knn(&lbp_knn);
        let candidates = build_candidates(fixed, moving, lbp_cfg.n_candidates)?;
        let pairwise = build_pairwise(&candidates, &match_graph, lbp_cfg.alpha_reg);
        Ok(PairGeometry {
            fixed_graph,
            moving_graph,
            match_graph,
            candidates,
            pairwise,
        })
    }

    /// Geometry of the same pair after both clouds map through `t`. knn
    /// structure and candidate indices are invariant under a similarity
    /// transform; displacements scale by `s R` and pairwise costs by `s^2`.
    pub fn transformed(&self, t: &SimilarityTransform) -> PairGeometry {
        let s2 = t.scale() * t.scale();
        let pairwise = Tensor::new(
            self.pairwise.shape(),
            self.pairwise.values().iter().map(|&v| v * s2).collect(),
        )
        .expect("pairwise shape");
        PairGeometry {
            fixed_graph: self.fixed_graph.clone(),
            moving_graph: self.moving_graph.clone(),
            match_graph: self.match_graph.clone(),
            candidates: self.candidates.transformed(t),
            pairwise,
        }
    }
}

/// Registration with precomputed pair geometry (clouds must be the ones the
/// geometry was built from).
pub fn register_with_geometry(
    tape: &mut Tape,
    fixed: &PointCloud,
    moving: &PointCloud,
    geo: &PairGeometry,
    params: &ModelParams,
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
) -> Result<Tensor> {
    let feat_f = gcn::forward_with_graph(tape, fixed, &geo.fixed_graph, params, gcn_cfg)?;
    let feat_m = gcn::forward_with_graph(tape, moving, &geo.moving_graph, params, gcn_cfg)?;
    let d = data_cost(tape, &feat_f, &feat_m, &geo.candidates)?;
    let beliefs = lbp_min_sum_core(tape, &d, &geo.match_graph, &geo.pairwise, lbp_cfg)?;
    soft_displacements(tape, &beliefs, &geo.candidates, lbp_cfg.temperature)
}

/// Full pipeline: features, candidates, belief propagation, soft readout.
/// The output is an N_f x 3 tensor, differentiable with respect to `params`
/// when those are tape-attached.
pub fn register(
    tape: &mut Tape,
    fixed: &PointCloud,
    moving: &PointCloud,
    params: &ModelParams,
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
) -> Result<Tensor> {
    let geo = PairGeometry::build(fixed, moving, gcn_cfg, lbp_cfg)?;
    register_with_geometry(tape, fixed, moving, &geo, params, gcn_cfg, lbp_cfg)
}

/// Inference convenience: run registration detached and return the field.
pub fn register_field(
    fixed: &PointCloud,
    moving: &PointCloud,
    params: &ModelParams,
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
) -> Result<DisplacementField> {
    let mut tape = Tape::new();
    let pred = register(&mut tape, fixed, moving, params, gcn_cfg, lbp_cfg)?;
    DisplacementField::from_flat(pred.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud(
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
    }

    #[test]
    fn coincident_clouds_have_zero_displacement_candidates() {
        let c = random_cloud(6, 1);
        let cand = build_candidates(&c, &c, 1).unwrap();
        for i in 0..6 {
            assert_eq!(cand.index(i, 0), i);
            assert_eq!(cand.displacement(i, 0), [0.0; 3]);
        }
    }

    #[test]
    fn constant_offset_candidates() {
        let fixed = random_cloud(6, 2);
        let offset = [0.05, -0.03, 0.02];
        let moving = cloud(
            fixed
                .points()
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        );
        let cand = build_candidates(&fixed, &moving, 1).unwrap();
        for i in 0..6 {
            let d = cand.displacement(i, 0);
            for a in 0..3 {
                assert!((d[a] - offset[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn candidates_reject_l_above_moving_size() {
        let fixed = random_cloud(4, 3);
        let moving = random_cloud(3, 4);
        assert!(build_candidates(&fixed, &moving, 4).is_err());
    }

    #[test]
    fn data_cost_examples() {
        let mut tape = Tape::new();
        // identical features: zero cost
        let f = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let cand = build_candidates(
            &cloud(vec![[0.0; 3]]),
            &cloud(vec![[0.0; 3]]),
            1,
        )
        .unwrap();
        let d = data_cost(&mut tape, &f, &f, &cand).unwrap();
        assert_eq!(d.values(), &[0.0]);

        // unit basis vs zero with C = 4 costs 1/4
        let ff = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let fm = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap();
        let d = data_cost(&mut tape, &ff, &fm, &cand).unwrap();
        assert_eq!(d.values(), &[0.25]);
    }

    #[test]
    fn single_node_beliefs_equal_normalized_data_cost() {
        let mut tape = Tape::new();
        let d = Tensor::from_rows(&[vec![3.0, 1.0, 2.0]]).unwrap();
        let graph = MatchGraph::from_undirected(1, &[]);
        let pairwise = Tensor::zeros(&[0, 3, 3]);
        let b = lbp_min_sum_core(&mut tape, &d, &graph, &pairwise, &LbpConfig::default())
            .unwrap();
        assert_eq!(b.0.values(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_alpha_decouples_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let l = 3;
        let data = Tensor::new(
            &[n, l],
            (0..n * l).map(|_| rng.gen_range(0.0..4.0)).collect(),
        )
        .unwrap();
        let fixed = random_cloud(n, 6);
        let moving = random_cloud(8, 7);
        let cand = build_candidates(&fixed, &moving, l).unwrap();
        let graph = MatchGraph::from_undirected(n, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]);
        let pairwise = build_pairwise(&cand, &graph, 0.0);
        let cfg = LbpConfig {
            alpha_reg: 0.0,
            ..LbpConfig::default()
        };
        let mut tape = Tape::new();
        let b = lbp_min_sum_core(&mut tape, &data, &graph, &pairwise, &cfg).unwrap();
        for i in 0..n {
            let row = &data.values()[i * l..(i + 1) * l];
            let min = row.iter().fold(f64::INFINITY, |a, &v| a.min(v));
            for c in 0..l {
                assert!((b.0.values()[i * l + c] - (row[c] - min)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lbp_rejects_non_finite_costs() {
        let mut tape = Tape::new();
        let d = Tensor::from_rows(&[vec![f64::NAN, 1.0]]).unwrap();
        let graph = MatchGraph::from_undirected(1, &[]);
        let pairwise = Tensor::zeros(&[0, 2, 2]);
        let err =
            lbp_min_sum_core(&mut tape, &d, &graph, &pairwise, &LbpConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn soft_readout_single_candidate_is_exact() {
        let fixed = cloud(vec![[0.0; 3], [0.2, 0.0, 0.0]]);
        let moving = cloud(vec![[0.1, 0.05, 0.0], [0.3, -0.05, 0.0]]);
        let cand = build_candidates(&fixed, &moving, 1).unwrap();
        let beliefs = Beliefs(Tensor::zeros(&[2, 1]));
        let mut tape = Tape::new();
        let phi = soft_displacements(&mut tape, &beliefs, &cand, 1.0).unwrap();
        for i in 0..2 {
            let d = cand.displacement(i, 0);
            for a in 0..3 {
                assert_eq!(phi.values()[i * 3 + a], d[a]);
            }
        }
    }

    #[test]
    fn equal_beliefs_average_two_candidates() {
        let fixed = cloud(vec![[0.0; 3]; 4]);
        let moving = cloud(vec![[0.1, 0.0, 0.0], [-0.3, 0.0, 0.0], [5.0, 5.0, 5.0], [6.0, 6.0, 6.0]]);
        let cand = build_candidates(&fixed, &moving, 2).unwrap();
        let beliefs = Beliefs(Tensor::zeros(&[4, 2]));
        let mut tape = Tape::new();
        let phi = soft_displacements(&mut tape, &beliefs, &cand, 1.0).unwrap();
        for i in 0..4 {
            let a = cand.displacement(i, 0);
            let b = cand.displacement(i, 1);
            for c in 0..3 {
                let mid = 0.5 * (a[c] + b[c]);
                assert!((phi.values()[i * 3 + c] - mid).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cold_readout_approaches_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fixed = random_cloud(5, 12);
        let moving = random_cloud(9, 13);
        let l = 4;
        let cand = build_candidates(&fixed, &moving, l).unwrap();
        // tie-free beliefs
        let vals: Vec<f64> = (0..5 * l).map(|_| rng.gen_range(0.0..3.0)).collect();
        let beliefs = Beliefs(Tensor::new(&[5, l], vals.clone()).unwrap());
        let mut tape = Tape::new();
        let phi = soft_displacements(&mut tape, &beliefs, &cand, 1e-3).unwrap();
        for i in 0..5 {
            let row = &vals[i * l..(i + 1) * l];
            let best = row
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let d = cand.displacement(i, best);
            for c in 0..3 {
                assert!(
                    (phi.values()[i * 3 + c] - d[c]).abs() < 1e-6,
                    "row {i} not argmin-like"
                );
            }
        }
    }

    #[test]
    fn register_alpha_zero_single_candidate_returns_candidates() {
        let cfg = GcnConfig {
            layer_dims: vec![3, 4],
            feature_dim: 4,
            knn_k: 2,
            leaky_slope: 0.2,
        };
        let lbp = LbpConfig {
            n_candidates: 1,
            alpha_reg: 0.0,
            graph_k: 2,
            ..LbpConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ModelParams::init(&cfg, &mut rng);
        let fixed = random_cloud(8, 22);
        let moving = random_cloud(8, 23);
        let mut tape = Tape::new();
        let out = register(&mut tape, &fixed, &moving, &params, &cfg, &lbp).unwrap();
        let cand = build_candidates(&fixed, &moving, 1).unwrap();
        for i in 0..8 {
            let d = cand.displacement(i, 0);
            for c in 0..3 {
                assert!((out.values()[i * 3 + c] - d[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn register_coincident_clouds_bounded_by_soft_average() {
        let cfg = GcnConfig {
            layer_dims: vec![3, 4, 4],
            feature_dim: 4,
            knn_k: 3,
            leaky_slope: 0.2,
        };
        let lbp = LbpConfig {
            n_candidates: 4,
            graph_k: 3,
            ..LbpConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = ModelParams::init(&cfg, &mut rng);
        let c = random_cloud(10, 32);
        let mut tape = Tape::new();
        let out = register(&mut tape, &c, &c, &params, &cfg, &lbp).unwrap();

        // recompute the readout probabilities to bound the prediction by the
        // soft average of the non-coincident candidates
        let geo = PairGeometry::build(&c, &c, &cfg, &lbp).unwrap();
        let feat = {
            let mut t = Tape::new();
            gcn::forward_with_graph(&mut t, &c, &geo.fixed_graph, &params, &cfg).unwrap()
        };
        let mut t2 = Tape::new();
        let d = data_cost(&mut t2, &feat, &feat, &geo.candidates).unwrap();
        let beliefs =
            lbp_min_sum_core(&mut t2, &d, &geo.match_graph, &geo.pairwise, &lbp).unwrap();
        let scaled = t2.scale(&beliefs.0, -1.0).unwrap();
        let probs = t2.softmax(&scaled, 1).unwrap();
        for i in 0..10 {
            // the coincident candidate (zero cost) is index 0 of each row
            assert_eq!(geo.candidates.index(i, 0), i);
            let p0 = probs.values()[i * 4];
            let mut others = [0.0; 3];
            let mut weight = 0.0;
            for l in 1..4 {
                let p = probs.values()[i * 4 + l];
                weight += p;
                let dl = geo.candidates.displacement(i, l);
                for c3 in 0..3 {
                    others[c3] += p * dl[c3];
                }
            }
            let norm_pred: f64 = (0..3)
                .map(|c3| out.values()[i * 3 + c3].powi(2))
                .sum::<f64>()
                .sqrt();
            let avg_others: f64 = if weight > 0.0 {
                (others.iter().map(|v| (v / weight).powi(2)).sum::<f64>()).sqrt()
            } else {
                0.0
            };
            assert!(p0 > 0.0);
            assert!(
                norm_pred <= avg_others + 1e-12,
                "row {i}: {norm_pred} > {avg_others}"
            );
        }
    }
}
