//! Pose-estimation metrics, the evaluation driver, and the comparison
//! harnesses: positional-offset sweep, FoV-strategy grid, and the three
//! shape-reconstruction strategies.
//!
//! Units follow the reporting convention: positions in cm, velocities in
//! cm/s. Aggregates are frame-weighted means of per-sequence values, with
//! each sequence weighted by its evaluated frame count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::features::{build_window_features_in_mode, FeatureError};
use crate::fov::{visibility_mask, FovConfig, VisibilityMask};
use crate::ingest::{extract_three_point, MotionSequence};
use crate::math::{rot6d_to_matrix, MathError};
use crate::network::{ModelConfig, Network, NetworkError, PoseOutput, WeightSet};
use crate::skeleton::{
    forward_kinematics, proxy_vertices, root_from_head, scaled_model, t_pose_measurements,
    BodyPose, ShapeParams, SkeletonModel,
};
use crate::training::{calibrate_scale, median_shape, TrainError};
use crate::{Mat3d, Vec3d, NUM_JOINTS, NUM_LOCAL_JOINTS};

/// CSV schema version stamped into every emitted row.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Window count feeding the median-β estimate, per sequence.
const SHAPE_ESTIMATE_WINDOWS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing weights for strategy {0}")]
    MissingWeights(String),
    #[error("degenerate rotation in network output: {0}")]
    Math(#[from] MathError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Mean per-joint position error in cm.
pub fn mpjpe(
    pred: &[[Vec3d; NUM_JOINTS]],
    gt: &[[Vec3d; NUM_JOINTS]],
) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} pred frames vs {} gt frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (pf, gf) in pred.iter().zip(gt) {
        for (p, g) in pf.iter().zip(gf) {
            sum += (*p - *g).norm();
        }
    }
    Ok(sum / (pred.len() * NUM_JOINTS) as f64 * 100.0)
}

/// Mean per-joint velocity error in cm/s. Velocities are forward differences
/// scaled by fps; the first frame has no velocity and is excluded.
pub fn mpjve(
    pred: &[[Vec3d; NUM_JOINTS]],
    gt: &[[Vec3d; NUM_JOINTS]],
    fps: f64,
) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} pred frames vs {} gt frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(EvalError::ShapeMismatch(
            "velocity error needs at least 2 frames".into(),
        ));
    }
    let mut sum = 0.0;
    for t in 1..pred.len() {
        for j in 0..NUM_JOINTS {
            let vp = (pred[t][j] - pred[t - 1][j]).scale(fps);
            let vg = (gt[t][j] - gt[t - 1][j]).scale(fps);
            sum += (vp - vg).norm();
        }
    }
    Ok(sum / ((pred.len() - 1) * NUM_JOINTS) as f64 * 100.0)
}

/// Mean proxy-vertex error in cm.
pub fn mve(pred: &[Vec<Vec3d>], gt: &[Vec<Vec3d>]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} pred frames vs {} gt frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pf, gf) in pred.iter().zip(gt) {
        if pf.len() != gf.len() {
            return Err(EvalError::ShapeMismatch(format!(
                "{} pred vertices vs {} gt vertices",
                pf.len(),
                gf.len()
            )));
        }
        for (p, g) in pf.iter().zip(gf) {
            sum += (*p - *g).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64 * 100.0)
}

/// Ground penetration in cm: mean depth over every below-ground vertex, taken
/// across all frames; 0 when nothing penetrates.
pub fn ground_penetration(vertices_per_frame: &[Vec<Vec3d>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for frame in vertices_per_frame {
        for v in frame {
            if v.z < 0.0 {
                sum += -v.z;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64 * 100.0
    }
}

/// Floating feet in cm: mean height of the lowest vertex over frames whose
/// vertices are all strictly above ground; 0 when no frame qualifies.
pub fn floating_feet(vertices_per_frame: &[Vec<Vec3d>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for frame in vertices_per_frame {
        if frame.is_empty() {
            continue;
        }
        let mut min_z = f64::INFINITY;
        for v in frame {
            min_z = min_z.min(v.z);
        }
        if min_z > 0.0 {
            sum += min_z;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64 * 100.0
    }
}

/// Absolute T-pose height and arm-length errors in cm between two shapes on
/// the same skeleton.
pub fn body_dimension_errors(
    pred_beta: &ShapeParams,
    gt_beta: &ShapeParams,
    model: &SkeletonModel,
) -> (f64, f64) {
    let (ph, pa) = t_pose_measurements(model, pred_beta);
    let (gh, ga) = t_pose_measurements(model, gt_beta);
    ((ph - gh).abs() * 100.0, (pa - ga).abs() * 100.0)
}

/// How predicted shape is turned into the reconstruction skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeStrategy {
    /// Mean shape: β = 0, no personalization.
    Mean,
    /// Uniform skeleton scale from measured height and arm length.
    Calib,
    /// Median of the network's per-window β estimates.
    Estimate,
}

impl fmt::Display for ShapeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeStrategy::Mean => "mean",
            ShapeStrategy::Calib => "calib",
            ShapeStrategy::Estimate => "estimate",
        };
        f.write_str(s)
    }
}

impl FromStr for ShapeStrategy {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "mean" => Ok(ShapeStrategy::Mean),
            "calib" => Ok(ShapeStrategy::Calib),
            "estimate" => Ok(ShapeStrategy::Estimate),
            other => Err(EvalError::ShapeMismatch(format!(
                "unknown shape strategy {other:?} (expected mean, calib or estimate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mpjpe_cm: f64,
    pub mpjve_cm_s: f64,
    pub mve_cm: f64,
    pub height_err_cm: f64,
    pub arm_err_cm: f64,
    pub gp_cm: f64,
    pub ff_cm: f64,
}

impl MetricSet {
    fn zero() -> MetricSet {
        MetricSet {
            mpjpe_cm: 0.0,
            mpjve_cm_s: 0.0,
            mve_cm: 0.0,
            height_err_cm: 0.0,
            arm_err_cm: 0.0,
            gp_cm: 0.0,
            ff_cm: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEval {
    pub subject_id: u32,
    pub sequence_id: u32,
    /// Evaluated frame count (frames with a full window behind them).
    pub frames: usize,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OffsetRow {
    pub offset_m: [f64; 3],
    pub frames: usize,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub csv_schema_version: u32,
    pub config: ModelConfig,
    pub shape_strategy: ShapeStrategy,
    /// Horizontal FoV in degrees when an eval-time mask was applied.
    pub eval_fov_deg: Option<f64>,
    pub per_sequence: Vec<SequenceEval>,
    pub aggregate: MetricSet,
    pub aggregate_frames: usize,
    /// Filled by the offset sweep; empty for plain evaluation.
    pub offset_table: Vec<OffsetRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub shape_strategy: ShapeStrategy,
    /// Hands outside this frustum are masked from the features at eval time.
    pub eval_fov: Option<FovConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { shape_strategy: ShapeStrategy::Mean, eval_fov: None }
    }
}

/// Frame-weighted mean of per-sequence metrics.
pub fn aggregate_metrics(rows: &[SequenceEval]) -> (MetricSet, usize) {
    let total: usize = rows.iter().map(|r| r.frames).sum();
    if total == 0 {
        return (MetricSet::zero(), 0);
    }
    let mut agg = MetricSet::zero();
    for r in rows {
        let w = r.frames as f64 / total as f64;
        agg.mpjpe_cm += w * r.metrics.mpjpe_cm;
        agg.mpjve_cm_s += w * r.metrics.mpjve_cm_s;
        agg.mve_cm += w * r.metrics.mve_cm;
        agg.height_err_cm += w * r.metrics.height_err_cm;
        agg.arm_err_cm += w * r.metrics.arm_err_cm;
        agg.gp_cm += w * r.metrics.gp_cm;
        agg.ff_cm += w * r.metrics.ff_cm;
    }
    (agg, total)
}

/// Evaluates one sequence under a world offset applied to both the tracking
/// input and the ground truth. The offset shifts the tracks exactly (tracked
/// positions live on a dyadic grid); ground-truth joints take the same shift
/// in plain float arithmetic.
pub fn evaluate_sequence_offset(
    model: &SkeletonModel,
    net: &Network<f32>,
    seq: &MotionSequence,
    opts: &EvalOptions,
    offset: Vec3d,
) -> Result<SequenceEval, EvalError> {
    let tau = net.cfg.tau;
    if seq.len() < tau {
        return Err(EvalError::ShapeMismatch(format!(
            "sequence has {} frames, window needs {tau}",
            seq.len()
        )));
    }
    let track = extract_three_point(seq, model).apply_offset(offset);
    let mask: Option<VisibilityMask> = opts.eval_fov.map(|cfg| visibility_mask(&cfg, &track));

    // One forward pass per evaluated frame.
    let n_eval = seq.len() - tau + 1;
    let mut outputs: Vec<PoseOutput> = Vec::with_capacity(n_eval);
    for end in (tau - 1)..seq.len() {
        let start = end + 1 - tau;
        let over = mask
            .as_ref()
            .map(|m| (&m.left[start..start + tau], &m.right[start..start + tau]));
        let window =
            build_window_features_in_mode(&track, start, tau, over, net.cfg.feature_mode)?;
        let out = net.forward(&window.frames)?;
        outputs.push(crate::network::split_output(&out));
    }

    // Shape strategy decides the reconstruction skeleton and β.
    let (eval_model, beta_used): (SkeletonModel, ShapeParams) = match opts.shape_strategy {
        ShapeStrategy::Mean => (model.clone(), ShapeParams::zero()),
        ShapeStrategy::Calib => {
            let (gh, ga) = t_pose_measurements(model, &seq.shape);
            let s = calibrate_scale(gh, ga, model)?;
            (scaled_model(model, s), ShapeParams::zero())
        }
        ShapeStrategy::Estimate => {
            let n = outputs.len().min(SHAPE_ESTIMATE_WINDOWS);
            let estimates: Vec<ShapeParams> = outputs[..n].iter().map(|o| o.shape).collect();
            (model.clone(), median_shape(&estimates))
        }
    };

    let mut pred_joints: Vec<[Vec3d; NUM_JOINTS]> = Vec::with_capacity(n_eval);
    let mut gt_joints: Vec<[Vec3d; NUM_JOINTS]> = Vec::with_capacity(n_eval);
    let mut pred_verts: Vec<Vec<Vec3d>> = Vec::with_capacity(n_eval);
    let mut gt_verts: Vec<Vec<Vec3d>> = Vec::with_capacity(n_eval);

    for (i, end) in ((tau - 1)..seq.len()).enumerate() {
        let pred = &outputs[i];
        let root_orientation = rot6d_to_matrix(&pred.root_orientation)?;
        let mut local_rotations = [Mat3d::identity(); NUM_LOCAL_JOINTS];
        for (j, rot) in local_rotations.iter_mut().enumerate() {
            *rot = rot6d_to_matrix(&pred.local_rotations[j])?;
        }
        let root_position = root_from_head(
            &eval_model,
            track.head[end].position,
            &root_orientation,
            &local_rotations,
            &beta_used,
        );
        let pose = BodyPose { root_position, root_orientation, local_rotations };
        let fk = forward_kinematics(&eval_model, &pose, &beta_used);
        pred_joints.push(fk.joint_position);
        pred_verts.push(proxy_vertices(&eval_model, &fk, &beta_used));

        let gt_fk = forward_kinematics(model, &seq.frames[end], &seq.shape);
        let mut gj = gt_fk.joint_position;
        for p in gj.iter_mut() {
            *p += offset;
        }
        gt_joints.push(gj);
        let mut gv = proxy_vertices(model, &gt_fk, &seq.shape);
        for p in gv.iter_mut() {
            *p += offset;
        }
        gt_verts.push(gv);
    }

    let (height_err_cm, arm_err_cm) = {
        let (ph, pa) = t_pose_measurements(&eval_model, &beta_used);
        let (gh, ga) = t_pose_measurements(model, &seq.shape);
        ((ph - gh).abs() * 100.0, (pa - ga).abs() * 100.0)
    };

    let metrics = MetricSet {
        mpjpe_cm: mpjpe(&pred_joints, &gt_joints)?,
        mpjve_cm_s: if pred_joints.len() >= 2 {
            mpjve(&pred_joints, &gt_joints, seq.fps)?
        } else {
            0.0
        },
        mve_cm: mve(&pred_verts, &gt_verts)?,
        height_err_cm,
        arm_err_cm,
        gp_cm: ground_penetration(&pred_verts),
        ff_cm: floating_feet(&pred_verts),
    };
    Ok(SequenceEval {
        subject_id: seq.subject_id,
        sequence_id: seq.sequence_id,
        frames: n_eval,
        metrics,
    })
}

pub fn evaluate_sequence(
    model: &SkeletonModel,
    net: &Network<f32>,
    seq: &MotionSequence,
    opts: &EvalOptions,
) -> Result<SequenceEval, EvalError> {
    evaluate_sequence_offset(model, net, seq, opts, Vec3d::zero())
}

fn eval_rows_offset(
    model: &SkeletonModel,
    net: &Network<f32>,
    dataset: &[MotionSequence],
    opts: &EvalOptions,
    offset: Vec3d,
) -> Result<Vec<SequenceEval>, EvalError> {
    let usable: Vec<&MotionSequence> =
        dataset.iter().filter(|s| s.len() >= net.cfg.tau).collect();
    if usable.is_empty() {
        return Err(EvalError::ShapeMismatch(
            "no sequence is long enough for the model window".into(),
        ));
    }
    // Sequences evaluate independently; spread them over threads and collect
    // by index so the report order never depends on scheduling.
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(usable.len());
    if threads <= 1 {
        return usable
            .iter()
            .map(|s| evaluate_sequence_offset(model, net, s, opts, offset))
            .collect();
    }
    let mut slots: Vec<Option<Result<SequenceEval, EvalError>>> =
        (0..usable.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<Result<SequenceEval, EvalError>>] = &mut slots;
        let per = usable.len().div_ceil(threads);
        let mut at = 0usize;
        while !rest.is_empty() {
            let take = per.min(rest.len());
            let (chunk, tail) = rest.split_at_mut(take);
            rest = tail;
            let seqs = &usable[at..at + take];
            at += take;
            scope.spawn(move || {
                for (slot, seq) in chunk.iter_mut().zip(seqs) {
                    *slot = Some(evaluate_sequence_offset(model, net, seq, opts, offset));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

/// Plain evaluation of a dataset with given weights.
pub fn evaluate_dataset(
    model: &SkeletonModel,
    weights: &WeightSet,
    dataset: &[MotionSequence],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let net: Network<f32> = Network::from_weights(weights)?;
    let rows = eval_rows_offset(model, &net, dataset, opts, Vec3d::zero())?;
    let (aggregate, aggregate_frames) = aggregate_metrics(&rows);
    Ok(EvalReport {
        csv_schema_version: CSV_SCHEMA_VERSION,
        config: weights.config.clone(),
        shape_strategy: opts.shape_strategy,
        eval_fov_deg: opts.eval_fov.map(|f| f.alpha_h_deg),
        per_sequence: rows,
        aggregate,
        aggregate_frames,
        offset_table: Vec::new(),
    })
}

pub const DEFAULT_OFFSETS_M: [f64; 5] = [0.0, 2.0, 5.0, 10.0, 50.0];

/// Evaluates the same weights on world-offset copies of the test set. Offsets
/// are applied along +x. The report's per-sequence block comes from the zero
/// offset; the offset table holds one aggregate row per offset.
pub fn offset_sweep(
    model: &SkeletonModel,
    weights: &WeightSet,
    dataset: &[MotionSequence],
    offsets_m: &[f64],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let net: Network<f32> = Network::from_weights(weights)?;
    let mut report = evaluate_dataset(model, weights, dataset, opts)?;
    for &d in offsets_m {
        let offset = Vec3d::new(d, 0.0, 0.0);
        let rows = if d == 0.0 {
            report.per_sequence.clone()
        } else {
            eval_rows_offset(model, &net, dataset, opts, offset)?
        };
        let (metrics, frames) = aggregate_metrics(&rows);
        report.offset_table.push(OffsetRow { offset_m: offset.to_array(), frames, metrics });
    }
    Ok(report)
}

/// Weights for the three masking-strategy variants of the FoV comparison.
#[derive(Debug, Clone, Default)]
pub struct StrategyWeights {
    pub full: Option<WeightSet>,
    pub random: Option<WeightSet>,
    pub fov: Option<WeightSet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FovCompareCell {
    pub strategy: String,
    pub fov_h_deg: f64,
    pub mpjpe_cm: f64,
    pub mpjve_cm_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FovCompareTable {
    pub csv_schema_version: u32,
    pub cells: Vec<FovCompareCell>,
}

/// Grid of strategy × evaluation FoV, reporting MPJPE/MPJVE per cell.
pub fn fov_strategy_compare(
    model: &SkeletonModel,
    weights: &StrategyWeights,
    dataset: &[MotionSequence],
    fovs: &[FovConfig],
    shape_strategy: ShapeStrategy,
) -> Result<FovCompareTable, EvalError> {
    let entries: [(&str, &Option<WeightSet>); 3] = [
        ("full", &weights.full),
        ("random", &weights.random),
        ("fov", &weights.fov),
    ];
    let mut cells = Vec::new();
    for (name, ws) in entries {
        let ws = ws
            .as_ref()
            .ok_or_else(|| EvalError::MissingWeights(name.to_string()))?;
        for fov in fovs {
            let opts = EvalOptions { shape_strategy, eval_fov: Some(*fov) };
            let report = evaluate_dataset(model, ws, dataset, &opts)?;
            cells.push(FovCompareCell {
                strategy: name.to_string(),
                fov_h_deg: fov.alpha_h_deg,
                mpjpe_cm: report.aggregate.mpjpe_cm,
                mpjve_cm_s: report.aggregate.mpjve_cm_s,
            });
        }
    }
    Ok(FovCompareTable { csv_schema_version: CSV_SCHEMA_VERSION, cells })
}

fn metric_cells(m: &MetricSet) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.mpjpe_cm, m.mpjve_cm_s, m.mve_cm, m.height_err_cm, m.arm_err_cm, m.gp_cm, m.ff_cm
    )
}

/// Per-sequence CSV with a trailing aggregate row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "schema_version,subject_id,sequence_id,frames,mpjpe_cm,mpjve_cm_s,mve_cm,\
         height_err_cm,arm_err_cm,gp_cm,ff_cm\n",
    );
    for row in &report.per_sequence {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.csv_schema_version,
            row.subject_id,
            row.sequence_id,
            row.frames,
            metric_cells(&row.metrics)
        ));
    }
    out.push_str(&format!(
        "{},,aggregate,{},{}\n",
        report.csv_schema_version,
        report.aggregate_frames,
        metric_cells(&report.aggregate)
    ));
    out
}

/// One row per offset of the sweep table.
pub fn offset_table_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "schema_version,offset_x_m,offset_y_m,offset_z_m,frames,mpjpe_cm,mpjve_cm_s,mve_cm,\
         height_err_cm,arm_err_cm,gp_cm,ff_cm\n",
    );
    for row in &report.offset_table {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.csv_schema_version,
            row.offset_m[0],
            row.offset_m[1],
            row.offset_m[2],
            row.frames,
            metric_cells(&row.metrics)
        ));
    }
    out
}

pub fn fov_table_csv(table: &FovCompareTable) -> String {
    let mut out = String::from("schema_version,strategy,fov_h_deg,mpjpe_cm,mpjve_cm_s\n");
    for c in &table.cells {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            table.csv_schema_version, c.strategy, c.fov_h_deg, c.mpjpe_cm, c.mpjve_cm_s
        ));
    }
    out
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}
