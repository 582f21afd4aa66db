//! Supervised training and student/teacher domain adaptation.
//!
//! The student minimizes an L1 displacement loss on labeled source pairs
//! plus, during adaptation, a consistency loss against a teacher whose
//! weights are the exponential moving average of the student's. Each branch
//! of the consistency term augments both clouds of an unlabeled target pair
//! with its own similarity transform and undoes the transform on the
//! predicted displacements, so the two predictions are compared in the
//! original frame. Gradients reach only the student; the teacher moves only
//! through the EMA update.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Gradients, Tape, Tensor};

use crate::gcn::{GcnConfig, ModelParams};
use crate::geometry::{apply_transform, sample_transform, DisplacementField, PointCloud};
use crate::lbp::{register_with_geometry, LbpConfig, PairGeometry};
use crate::stream::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Final consistency weight.
    pub lambda0: f64,
    /// EMA momentum of the teacher.
    pub alpha_ema: f64,
    /// Epochs over which the consistency weight ramps up.
    pub ramp_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Augmentation: rotation range in degrees per Euler axis.
    pub rot_range_deg: f64,
    /// Augmentation: uniform scale range.
    pub scale_range: (f64, f64),
    /// Augmentation: translation range per component.
    pub trans_range: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            alpha_ema: 0.98,
            ramp_epochs: 20,
            epochs: 100,
            lr: 0.01,
            batch_source: 2,
            batch_target: 2,
            rot_range_deg: 10.0,
            scale_range: (0.9, 1.1),
            trans_range: 0.1,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha_ema) {
            return Err(Error::Config("train.alpha_ema must lie in [0, 1)".into()));
        }
        if !(self.lambda0 >= 0.0) {
            return Err(Error::Config("train.lambda0 must be non-negative".into()));
        }
        if self.ramp_epochs > self.epochs {
            return Err(Error::Config(
                "train.ramp_epochs must not exceed train.epochs".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::Config("train batch sizes must be positive".into()));
        }
        if self.scale_range.0 > self.scale_range.1 || self.scale_range.0 <= 0.0 {
            return Err(Error::Config(
                "train.scale_range must be positive and ordered".into(),
            ));
        }
        Ok(())
    }
}

/// One registration pair; ground truth present exactly on source-domain
/// samples.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub fixed: PointCloud,
    pub moving: PointCloud,
    pub gt: Option<DisplacementField>,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(gt) = &self.gt {
            if gt.len() != self.fixed.len() {
                return Err(Error::RowCountMismatch {
                    what: "ground-truth displacements",
                    expected: self.fixed.len(),
                    got: gt.len(),
                });
            }
        }
        Ok(())
    }
}

/// L1 between prediction and ground truth (mean over keypoints, sum over
/// components).
pub fn supervised_loss(tape: &mut Tape, pred: &Tensor, gt: &DisplacementField) -> Result<Tensor> {
    let target = Tensor::new(&[gt.len(), 3], gt.flat())?;
    Ok(tape.l1_loss(pred, &target)?)
}

/// One EMA step: `theta' <- alpha * theta' + (1 - alpha) * theta`, applied
/// once per optimizer step.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f64) -> Result<ModelParams> {
    if teacher.len() != student.len() {
        return Err(Error::RowCountMismatch {
            what: "ema parameter lists",
            expected: teacher.len(),
            got: student.len(),
        });
    }
    let values = teacher
        .entries()
        .iter()
        .zip(student.entries())
        .map(|((tn, t), (sn, s))| {
            if tn != sn || t.shape() != s.shape() {
                return Err(Error::Checkpoint(format!(
                    "ema mismatch: {tn} {:?} vs {sn} {:?}",
                    t.shape(),
                    s.shape()
                )));
            }
            let blended: Vec<f64> = t
                .values()
                .iter()
                .zip(s.values())
                .map(|(&tv, &sv)| alpha * tv + (1.0 - alpha) * sv)
                .collect();
            Ok(Tensor::new(t.shape(), blended)?)
        })
        .collect::<Result<Vec<_>>>()?;
    teacher.with_values(values)
}

/// Consistency ramp-up: `lambda(t) = lambda0 * exp(-5 (1 - min(t/T, 1))^2)`,
/// so `lambda(0) = lambda0 e^-5` and `lambda(t >= T) = lambda0` exactly.
pub fn lambda_schedule(epoch: usize, cfg: &AdaptConfig) -> f64 {
    let t = cfg.ramp_epochs;
    let ratio = if t == 0 {
        1.0
    } else {
        (epoch as f64 / t as f64).min(1.0)
    };
    if ratio >= 1.0 {
        cfg.lambda0
    } else {
        cfg.lambda0 * (-5.0 * (1.0 - ratio) * (1.0 - ratio)).exp()
    }
}

/// Adam moments, aligned index-for-index with the parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params
                .entries()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update; returns the new parameters.
pub fn adam_step(
    params: &ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<ModelParams> {
    if grads.len() != params.len() {
        return Err(Error::RowCountMismatch {
            what: "adam gradients",
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - AdamState::BETA1.powi(state.step as i32);
    let bc2 = 1.0 - AdamState::BETA2.powi(state.step as i32);
    let mut new_values = Vec::with_capacity(params.len());
    for (i, ((_, p), g)) in params.entries().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Checkpoint(format!(
                "adam: gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut out = Vec::with_capacity(p.len());
        for (j, (&pv, &gv)) in p.values().iter().zip(g.values()).enumerate() {
            m[j] = AdamState::BETA1 * m[j] + (1.0 - AdamState::BETA1) * gv;
            v[j] = AdamState::BETA2 * v[j] + (1.0 - AdamState::BETA2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            out.push(pv - lr * m_hat / (v_hat.sqrt() + AdamState::EPS));
        }
        new_values.push(Tensor::new(p.shape(), out)?);
    }
    params.with_values(new_values)
}

/// Per-epoch log line.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_con: f64,
    pub lambda: f64,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,l_sup,l_con,lambda,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.l_sup, self.l_con, self.lambda, self.lr
        )
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub logs: Vec<EpochLog>,
}

pub struct AdaptOutcome {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub logs: Vec<EpochLog>,
}

fn build_geometries(
    samples: &[TrainSample],
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
) -> Result<Vec<PairGeometry>> {
    samples
        .iter()
        .map(|s| {
            s.validate()?;
            PairGeometry::build(&s.fixed, &s.moving, gcn_cfg, lbp_cfg)
        })
        .collect()
}

/// Mean supervised loss over one source batch, on the tape.
fn supervised_batch_loss(
    tape: &mut Tape,
    student: &ModelParams,
    batch: &[usize],
    samples: &[TrainSample],
    geos: &[PairGeometry],
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &i in batch {
        let s = &samples[i];
        let gt = s.gt.as_ref().ok_or_else(|| Error::Sample {
            id: format!("#{i}"),
            msg: "supervised training requires ground truth".into(),
        })?;
        let pred =
            register_with_geometry(tape, &s.fixed, &s.moving, &geos[i], student, gcn_cfg, lbp_cfg)?;
        let loss = supervised_loss(tape, &pred, gt)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(&acc, &loss)?,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(&total, 1.0 / batch.len() as f64)?)
}

/// Consistency loss for one unlabeled pair: two independently augmented
/// branches, student on the tape, teacher detached, transforms undone on the
/// outputs, L1 between the two inverted predictions.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss(
    tape: &mut Tape,
    sample: &TrainSample,
    geo: &PairGeometry,
    student: &ModelParams,
    teacher: &ModelParams,
    rng: &mut impl Rng,
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
    cfg: &AdaptConfig,
) -> Result<Tensor> {
    let t1 = sample_transform(rng, cfg.rot_range_deg, cfg.scale_range, cfg.trans_range);
    let t2 = sample_transform(rng, cfg.rot_range_deg, cfg.scale_range, cfg.trans_range);

    let mut branch = |params: &ModelParams,
                      t: &crate::geometry::SimilarityTransform,
                      tape: &mut Tape|
     -> Result<Tensor> {
        let fixed = apply_transform(&sample.fixed, t);
        let moving = apply_transform(&sample.moving, t);
        let geo_t = geo.transformed(t);
        let pred =
            register_with_geometry(tape, &fixed, &moving, &geo_t, params, gcn_cfg, lbp_cfg)?;
        // undo the augmentation on row vectors: d = (1/s) R^T d'  <=>  D R / s
        let rot = t.rotation();
        let rot_t = Tensor::new(&[3, 3], rot.iter().flatten().copied().collect())?;
        let rotated = tape.matmul(&pred, &rot_t)?;
        Ok(tape.scale(&rotated, 1.0 / t.scale())?)
    };

    let student_pred = branch(student, &t1, tape)?;
    let teacher_pred = branch(teacher, &t2, tape)?;
    debug_assert!(
        teacher_pred.node().is_none(),
        "teacher branch must stay off the tape"
    );
    Ok(tape.l1_loss(&student_pred, &teacher_pred)?)
}

fn extract_grads(grads: &Gradients, attached: &ModelParams) -> Vec<Tensor> {
    attached
        .entries()
        .iter()
        .map(|(_, t)| grads.wrt(t).expect("attached parameter"))
        .collect()
}

/// Supervised training on labeled pairs. Parameters initialize from the
/// `init` stream of `cfg.seed`; sample order shuffles per epoch from the
/// `data` stream.
pub fn train_supervised(
    source: &[TrainSample],
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
    cfg: &AdaptConfig,
) -> Result<TrainOutcome> {
    train_supervised_from(None, source, gcn_cfg, lbp_cfg, cfg)
}

/// Supervised training continuing from `init` parameters when given.
pub fn train_supervised_from(
    init: Option<ModelParams>,
    source: &[TrainSample],
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
    cfg: &AdaptConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    gcn_cfg.validate()?;
    lbp_cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset("source training set".into()));
    }
    let geos = build_geometries(source, gcn_cfg, lbp_cfg)?;
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(gcn_cfg, &mut substream(cfg.seed, "init")),
    };
    let mut adam = AdamState::new(&params);
    let mut data_rng = substream(cfg.seed, "data");
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for batch in order.chunks(cfg.batch_source) {
            let mut tape = Tape::new();
            let student = params.attach(&mut tape)?;
            let loss =
                supervised_batch_loss(&mut tape, &student, batch, source, &geos, gcn_cfg, lbp_cfg)?;
            let grads = tape.backward(&loss)?;
            params = adam_step(&params, &extract_grads(&grads, &student), &mut adam, cfg.lr)?;
            epoch_loss += loss.item();
            batches += 1.0;
        }
        logs.push(EpochLog {
            epoch,
            l_sup: epoch_loss / batches,
            l_con: 0.0,
            lambda: 0.0,
            lr: cfg.lr,
        });
    }
    Ok(TrainOutcome { params, logs })
}

/// Mean-teacher adaptation: supervised batches from the labeled source set
/// plus ramped consistency batches from the unlabeled target set. The
/// teacher starts as a copy of the student and follows it by EMA; evaluation
/// normally uses the teacher.
pub fn adapt(
    source: &[TrainSample],
    target: &[TrainSample],
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    adapt_from(None, source, target, gcn_cfg, lbp_cfg, cfg)
}

pub fn adapt_from(
    init: Option<ModelParams>,
    source: &[TrainSample],
    target: &[TrainSample],
    gcn_cfg: &GcnConfig,
    lbp_cfg: &LbpConfig,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    gcn_cfg.validate()?;
    lbp_cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset("source training set".into()));
    }
    if target.is_empty() {
        return Err(Error::EmptyDataset("target training set".into()));
    }
    if let Some(s) = target.iter().position(|s| s.gt.is_some()) {
        return Err(Error::Sample {
            id: format!("target #{s}"),
            msg: "target samples must not carry ground truth".into(),
        });
    }
    let source_geos = build_geometries(source, gcn_cfg, lbp_cfg)?;
    let target_geos = build_geometries(target, gcn_cfg, lbp_cfg)?;

    let mut student = match init {
        Some(p) => p,
        None => ModelParams::init(gcn_cfg, &mut substream(cfg.seed, "init")),
    };
    let mut teacher = student.clone();
    let mut adam = AdamState::new(&student);
    let mut source_rng = substream(cfg.seed, "data");
    let mut target_rng = substream(cfg.seed, "data-target");
    let mut aug_rng = substream(cfg.seed, "augment");
    let use_consistency = cfg.lambda0 > 0.0;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule(epoch, cfg);
        let mut source_order: Vec<usize> = (0..source.len()).collect();
        source_order.shuffle(&mut source_rng);
        let mut target_order: Vec<usize> = (0..target.len()).collect();
        target_order.shuffle(&mut target_rng);
        let mut target_cursor = 0usize;

        let mut epoch_sup = 0.0;
        let mut epoch_con = 0.0;
        let mut batches = 0.0;
        for batch in source_order.chunks(cfg.batch_source) {
            let mut tape = Tape::new();
            let attached = student.attach(&mut tape)?;
            let sup = supervised_batch_loss(
                &mut tape,
                &attached,
                batch,
                source,
                &source_geos,
                gcn_cfg,
                lbp_cfg,
            )?;
            let mut con_value = 0.0;
            let total = if use_consistency {
                let mut con: Option<Tensor> = None;
                for _ in 0..cfg.batch_target {
                    let i = target_order[target_cursor];
                    target_cursor = (target_cursor + 1) % target_order.len();
                    let l = consistency_loss(
                        &mut tape,
                        &target[i],
                        &target_geos[i],
                        &attached,
                        &teacher,
                        &mut aug_rng,
                        gcn_cfg,
                        lbp_cfg,
                        cfg,
                    )?;
                    con = Some(match con {
                        None => l,
                        Some(acc) => tape.add(&acc, &l)?,
                    });
                }
                let con = con.expect("batch_target >= 1");
                let con_mean = tape.scale(&con, 1.0 / cfg.batch_target as f64)?;
                con_value = con_mean.item();
                let weighted = tape.scale(&con_mean, lambda)?;
                tape.add(&sup, &weighted)?
            } else {
                sup.clone()
            };
            let grads = tape.backward(&total)?;
            student = adam_step(&student, &extract_grads(&grads, &attached), &mut adam, cfg.lr)?;
            teacher = ema_update(&teacher, &student, cfg.alpha_ema)?;
            epoch_sup += sup.item();
            epoch_con += con_value;
            batches += 1.0;
        }
        logs.push(EpochLog {
            epoch,
            l_sup: epoch_sup / batches,
            l_con: epoch_con / batches,
            lambda,
            lr: cfg.lr,
        });
    }
    Ok(AdaptOutcome {
        student,
        teacher,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_gcn() -> GcnConfig {
        GcnConfig {
            layer_dims: vec![3, 4],
            feature_dim: 4,
            knn_k: 2,
            leaky_slope: 0.2,
        }
    }

    fn tiny_lbp() -> LbpConfig {
        LbpConfig {
            n_candidates: 2,
            n_iters: 3,
            graph_k: 2,
            ..LbpConfig::default()
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
    fn ema_alpha_zero_copies_student() {
        let cfg = tiny_gcn();
        let teacher = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let student = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let out = ema_update(&teacher, &student, 0.0).unwrap();
        for ((_, o), (_, s)) in out.entries().iter().zip(student.entries()) {
            assert_eq!(o.values(), s.values());
        }
    }

    #[test]
    fn ema_blend_arithmetic() {
        let cfg = tiny_gcn();
        let base = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let zeros = base
            .with_values(
                base.entries()
                    .iter()
                    .map(|(_, t)| Tensor::zeros(t.shape()))
                    .collect(),
            )
            .unwrap();
        let ones = base
            .with_values(
                base.entries()
                    .iter()
                    .map(|(_, t)| Tensor::new(t.shape(), vec![1.0; t.len()]).unwrap())
                    .collect(),
            )
            .unwrap();
        let out = ema_update(&zeros, &ones, 0.98).unwrap();
        for (_, t) in out.entries() {
            for &v in t.values() {
                assert!((v - 0.02).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lambda_schedule_endpoints() {
        let cfg = AdaptConfig {
            lambda0: 2.0,
            ramp_epochs: 20,
            epochs: 100,
            ..AdaptConfig::default()
        };
        assert_eq!(lambda_schedule(20, &cfg), 2.0);
        assert_eq!(lambda_schedule(40, &cfg), 2.0);
        let l0 = lambda_schedule(0, &cfg);
        assert!((l0 - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
        // monotone non-decreasing
        let mut prev = 0.0;
        for t in 0..41 {
            let l = lambda_schedule(t, &cfg);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = tiny_gcn();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let grads: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut state = AdamState::new(&params);
        let out = adam_step(&params, &grads, &mut state, 0.01).unwrap();
        for ((_, a), (_, b)) in params.entries().iter().zip(out.entries()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        // g = 1 everywhere: bias-corrected first step is lr / (1 + eps)
        let cfg = tiny_gcn();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let grads: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::new(t.shape(), vec![1.0; t.len()]).unwrap())
            .collect();
        let mut state = AdamState::new(&params);
        let out = adam_step(&params, &grads, &mut state, 0.01).unwrap();
        for ((_, a), (_, b)) in params.entries().iter().zip(out.entries()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                let delta = x - y;
                assert!((delta - 0.01).abs() < 1e-9, "delta {delta}");
            }
        }
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let cfg = tiny_gcn();
        let run = || {
            let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6));
            let mut state = AdamState::new(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..5 {
                let grads: Vec<Tensor> = params
                    .entries()
                    .iter()
                    .map(|(_, t)| {
                        Tensor::new(
                            t.shape(),
                            (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        )
                        .unwrap()
                    })
                    .collect();
                params = adam_step(&params, &grads, &mut state, 0.01).unwrap();
            }
            params
                .entries()
                .iter()
                .flat_map(|(_, t)| t.values().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn supervised_loss_examples() {
        let mut tape = Tape::new();
        let pred = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![2.0, 1.0, 0.0]]).unwrap();
        let gt = DisplacementField::new(vec![[1.0, 0.0, 0.0], [2.0, 1.0, 0.0]]).unwrap();
        assert_eq!(supervised_loss(&mut tape, &pred, &gt).unwrap().item(), 0.0);

        let shifted = DisplacementField::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(
            supervised_loss(&mut tape, &pred, &shifted).unwrap().item(),
            1.0
        );
    }

    #[test]
    fn consistency_zero_for_shared_weights_and_identity_augmentation() {
        let gcn_cfg = tiny_gcn();
        let lbp_cfg = tiny_lbp();
        let cfg = AdaptConfig {
            rot_range_deg: 0.0,
            scale_range: (1.0, 1.0),
            trans_range: 0.0,
            ..AdaptConfig::default()
        };
        let params = ModelParams::init(&gcn_cfg, &mut ChaCha8Rng::seed_from_u64(6));
        let sample = TrainSample {
            fixed: random_cloud(8, 7),
            moving: random_cloud(8, 8),
            gt: None,
        };
        let geo = PairGeometry::build(&sample.fixed, &sample.moving, &gcn_cfg, &lbp_cfg).unwrap();
        let mut tape = Tape::new();
        let student = params.attach(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loss = consistency_loss(
            &mut tape, &sample, &geo, &student, &params, &mut rng, &gcn_cfg, &lbp_cfg, &cfg,
        )
        .unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn teacher_untouched_by_backward() {
        let gcn_cfg = tiny_gcn();
        let lbp_cfg = tiny_lbp();
        let cfg = AdaptConfig::default();
        let student_src = ModelParams::init(&gcn_cfg, &mut ChaCha8Rng::seed_from_u64(10));
        let teacher = ModelParams::init(&gcn_cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let before: Vec<Vec<f64>> = teacher
            .entries()
            .iter()
            .map(|(_, t)| t.values().to_vec())
            .collect();
        let sample = TrainSample {
            fixed: random_cloud(8, 12),
            moving: random_cloud(8, 13),
            gt: None,
        };
        let geo = PairGeometry::build(&sample.fixed, &sample.moving, &gcn_cfg, &lbp_cfg).unwrap();
        let mut tape = Tape::new();
        let student = student_src.attach(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let loss = consistency_loss(
            &mut tape, &sample, &geo, &student, &teacher, &mut rng, &gcn_cfg, &lbp_cfg, &cfg,
        )
        .unwrap();
        let grads = tape.backward(&loss).unwrap();
        for ((_, t), b) in teacher.entries().iter().zip(&before) {
            assert_eq!(t.values(), b.as_slice());
            assert!(grads.wrt(t).is_none(), "teacher must not be on the tape");
        }
        // generic case: the loss is positive and the student sees gradient
        assert!(loss.item() > 0.0);
        let any_nonzero = student
            .entries()
            .iter()
            .any(|(_, t)| grads.wrt(t).unwrap().values().iter().any(|&g| g != 0.0));
        assert!(any_nonzero);
    }

    #[test]
    fn decoupled_prediction_keeps_loss_constant_in_theta() {
        // L = 1 and alpha_reg = 0 make the prediction independent of features
        let gcn_cfg = tiny_gcn();
        let lbp_cfg = LbpConfig {
            n_candidates: 1,
            alpha_reg: 0.0,
            graph_k: 2,
            n_iters: 3,
            ..LbpConfig::default()
        };
        let cfg = AdaptConfig {
            epochs: 3,
            batch_source: 1,
            ..AdaptConfig::default()
        };
        let fixed = random_cloud(8, 15);
        let moving = random_cloud(8, 16);
        let gt = DisplacementField::zeros(8);
        let samples = vec![TrainSample {
            fixed,
            moving,
            gt: Some(gt),
        }];
        let out = train_supervised(&samples, &gcn_cfg, &lbp_cfg, &cfg).unwrap();
        let first = out.logs[0].l_sup;
        for log in &out.logs {
            assert_eq!(log.l_sup, first, "loss must not depend on theta here");
        }
    }

    #[test]
    fn adapt_rejects_labeled_target() {
        let gcn_cfg = tiny_gcn();
        let lbp_cfg = tiny_lbp();
        let cfg = AdaptConfig {
            epochs: 1,
            ..AdaptConfig::default()
        };
        let labeled = TrainSample {
            fixed: random_cloud(8, 20),
            moving: random_cloud(8, 21),
            gt: Some(DisplacementField::zeros(8)),
        };
        let err = adapt(
            &[labeled.clone()],
            &[labeled],
            &gcn_cfg,
            &lbp_cfg,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Sample { .. }));
    }
}
