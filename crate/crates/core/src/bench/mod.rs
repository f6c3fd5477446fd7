//! Evaluation protocol: ICP alignment, visibility filtering, thresholded
//! precision / recall / F1, threshold selection, AUC and the early-checkpoint
//! rule.

use std::fmt::Write as _;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::geometry::{Mat3, SparseVoxelGrid, Vec3};
use crate::{Error, Exec, Result};

/// F1 level (percent) that defines `theta_max`.
pub const F1_TARGET: f64 = 80.0;
/// Fraction of the final score an early checkpoint must reach.
pub const EARLY_FRACTION: f64 = 0.95;

/// Nearest-neighbour index over an immutable point set.
pub struct NnIndex {
    tree: ImmutableKdTree<f64, 3>,
    points: Vec<Vec3>,
}

impl NnIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("nearest-neighbour index"));
        }
        let entries: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&entries)
            .map_err(|e| Error::Config(format!("kd-tree construction failed: {e:?}")))?;
        Ok(NnIndex { tree, points: points.to_vec() })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index and Euclidean distance of the nearest indexed point. The distance
    /// is recomputed from the coordinates so it matches a brute-force scan.
    pub fn nearest(&self, p: &Vec3) -> (usize, f64) {
        let hit = self.tree.query(&[p.x, p.y, p.z]).nearest_one::<SquaredEuclidean<f64>>().execute();
        let i = hit.item as usize;
        (i, (p - self.points[i]).norm())
    }

    pub fn distances(&self, queries: &[Vec3], exec: Exec) -> Vec<f64> {
        exec.map(queries, |q| self.nearest(q).1)
    }
}

/// Similarity `p -> scale * rotation * p + translation`; scale is 1 for the
/// rigid fits produced here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Mat3::identity(), translation: Vec3::zeros(), scale: 1.0 }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        RigidTransform { rotation, translation, scale: 1.0 }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_all(&self, pts: &[Vec3]) -> Vec<Vec3> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation * self.scale + self.translation,
            scale: self.scale * first.scale,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) / self.scale, scale: 1.0 / self.scale }
    }

    /// Largest deviation of `rotation` from orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max()
    }

    pub fn to_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Closed-form least-squares rigid fit mapping `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
    let v = vt.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if sign < 0.0 { -1.0 } else { 1.0 }));
    let rotation = v * fix * u.transpose();
    RigidTransform::new(rotation, cd - rotation * cs)
}

/// Correspondence rejection rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Cutoff {
    None,
    /// Fixed distance in scene units.
    Absolute(f64),
    /// Multiple of the median match distance of the current iteration.
    MedianMultiple(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    pub max_iterations: usize,
    pub cutoff: Cutoff,
    pub epsilon: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams { max_iterations: 50, cutoff: Cutoff::MedianMultiple(5.0), epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rmse: f64,
    pub iterations: usize,
    pub inliers: usize,
    pub converged: bool,
}

struct Matches {
    src: Vec<Vec3>,
    dst: Vec<Vec3>,
    rmse: f64,
}

fn extent(points: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

fn match_pairs(
    source: &[Vec3],
    transform: &RigidTransform,
    index: &NnIndex,
    cutoff: Cutoff,
    floor: f64,
    exec: Exec,
) -> Result<Matches> {
    let hits = exec.map(source, |p| index.nearest(&transform.apply(p)));
    let limit = match cutoff {
        Cutoff::None => f64::INFINITY,
        Cutoff::Absolute(d) => d,
        Cutoff::MedianMultiple(k) => {
            let mut d: Vec<f64> = hits.iter().map(|h| h.1).collect();
            let mid = d.len() / 2;
            let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
            (k * *median).max(floor)
        }
    };
    let mut m = Matches { src: Vec::new(), dst: Vec::new(), rmse: 0.0 };
    let mut sq = 0.0;
    for (p, (i, d)) in source.iter().zip(&hits) {
        if *d <= limit {
            m.src.push(*p);
            m.dst.push(index.points()[*i]);
            sq += d * d;
        }
    }
    if m.src.len() < 3 {
        return Err(Error::TooFewCorrespondences(m.src.len()));
    }
    m.rmse = (sq / m.src.len() as f64).sqrt();
    Ok(m)
}

/// RMSE of `transform` applied to `source` against `target` under the same
/// matching rule `icp_align` uses.
pub fn alignment_rmse(
    source: &[Vec3],
    target: &[Vec3],
    transform: &RigidTransform,
    cutoff: Cutoff,
    exec: Exec,
) -> Result<f64> {
    let index = NnIndex::new(target)?;
    Ok(match_pairs(source, transform, &index, cutoff, 1e-12 * extent(target), exec)?.rmse)
}

/// Point-to-point ICP from the identity. Returns the transform mapping
/// `source` onto `target` and the RMSE of its own final matching.
pub fn icp_align(source: &[Vec3], target: &[Vec3], params: &IcpParams, exec: Exec) -> Result<IcpResult> {
    if source.is_empty() {
        return Err(Error::EmptyCloud("icp source"));
    }
    let index = NnIndex::new(target)?;
    let floor = 1e-12 * extent(target);
    let mut transform = RigidTransform::identity();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let m = match_pairs(source, &transform, &index, params.cutoff, floor, exec)?;
        let converged = m.rmse == 0.0 || (prev - m.rmse).abs() < params.epsilon;
        if converged || iterations == params.max_iterations {
            return Ok(IcpResult { transform, rmse: m.rmse, iterations, inliers: m.src.len(), converged });
        }
        prev = m.rmse;
        transform = kabsch(&m.src, &m.dst);
        iterations += 1;
    }
}

/// Keeps the candidates that fall inside the voxel envelope of `reference`
/// (grid origin at zero, dilated by `dilation` cells).
pub fn visibility_filter(reference: &[Vec3], candidates: &[Vec3], voxel_size: f64, dilation: u32) -> Result<Vec<Vec3>> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Config("voxel size must be positive".into()));
    }
    let grid = SparseVoxelGrid::from_points(reference, voxel_size, Vec3::zeros()).dilate(dilation);
    Ok(candidates.iter().filter(|p| grid.contains_point(p)).copied().collect())
}

/// Precision, recall and F1 in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

/// Sorted nearest-neighbour distances in both directions, so any threshold
/// can be evaluated by binary search.
#[derive(Clone, Debug)]
pub struct DistanceProfile {
    pred_to_gt: Vec<f64>,
    gt_to_pred: Vec<f64>,
}

fn percent_within(sorted: &[f64], tau: f64) -> f64 {
    100.0 * sorted.partition_point(|d| *d <= tau) as f64 / sorted.len() as f64
}

impl DistanceProfile {
    pub fn new(pred: &[Vec3], gt: &[Vec3], exec: Exec) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::EmptyCloud("prediction"));
        }
        if gt.is_empty() {
            return Err(Error::EmptyCloud("ground truth"));
        }
        let mut pred_to_gt = NnIndex::new(gt)?.distances(pred, exec);
        let mut gt_to_pred = NnIndex::new(pred)?.distances(gt, exec);
        pred_to_gt.sort_by(f64::total_cmp);
        gt_to_pred.sort_by(f64::total_cmp);
        Ok(DistanceProfile { pred_to_gt, gt_to_pred })
    }

    pub fn at(&self, tau: f64) -> Prf {
        Prf::new(percent_within(&self.pred_to_gt, tau), percent_within(&self.gt_to_pred, tau))
    }

    pub fn curve(&self, ladder: &[f64]) -> Vec<Prf> {
        ladder.iter().map(|t| self.at(*t)).collect()
    }
}

pub fn precision_recall_f1(pred: &[Vec3], gt: &[Vec3], tau: f64, exec: Exec) -> Result<Prf> {
    if !(tau > 0.0) {
        return Err(Error::Config("threshold must be positive".into()));
    }
    Ok(DistanceProfile::new(pred, gt, exec)?.at(tau))
}

/// `n + 1` evenly spaced thresholds `0, max/n, ..., max`.
pub fn threshold_ladder(max: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|k| max * k as f64 / n as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub theta_max: f64,
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl Thresholds {
    pub fn from_theta_max(theta_max: f64) -> Self {
        Thresholds { theta_max, low: 0.25 * theta_max, medium: 0.5 * theta_max, high: 0.75 * theta_max }
    }
}

/// `theta_max` is the first positive rung where F1 reaches 80; the reported
/// thresholds sit at its interior quartiles.
pub fn select_thresholds(ladder: &[f64], f1: &[f64]) -> Result<Thresholds> {
    assert_eq!(ladder.len(), f1.len());
    let hit = ladder.iter().zip(f1).find(|(t, f)| **t > 0.0 && **f >= F1_TARGET);
    match hit {
        Some((t, _)) => Ok(Thresholds::from_theta_max(*t)),
        None => {
            let (at, best) = ladder
                .iter()
                .zip(f1)
                .fold((f64::NAN, f64::NEG_INFINITY), |acc, (t, f)| if *f > acc.1 { (*t, *f) } else { acc });
            Err(Error::ThresholdNotReached { target: F1_TARGET, best, at })
        }
    }
}

/// Trapezoidal integral of the piecewise-linear curve through `(taus, values)`
/// over `[0, theta_max]`. The curve is held constant outside the samples.
pub fn auc_raw(taus: &[f64], values: &[f64], theta_max: f64) -> f64 {
    assert_eq!(taus.len(), values.len());
    assert!(!taus.is_empty());
    let value_at = |x: f64| -> f64 {
        let k = taus.partition_point(|t| *t <= x);
        if k == 0 {
            values[0]
        } else if k == taus.len() {
            values[k - 1]
        } else {
            let (t0, t1) = (taus[k - 1], taus[k]);
            let w = (x - t0) / (t1 - t0);
            values[k - 1] + w * (values[k] - values[k - 1])
        }
    };
    let mut knots = vec![0.0];
    knots.extend(taus.iter().copied().filter(|t| *t > 0.0 && *t < theta_max));
    knots.push(theta_max);
    knots.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (value_at(w[0]) + value_at(w[1]))).sum()
}

/// `auc_raw` divided by `theta_max`, so a constant curve scores its value.
pub fn auc(taus: &[f64], values: &[f64], theta_max: f64) -> f64 {
    auc_raw(taus, values, theta_max) / theta_max
}

/// Index of the earliest checkpoint scoring at least 95% of the last one.
pub fn early_checkpoint(scores: &[f64]) -> Option<usize> {
    let last = *scores.last()?;
    scores.iter().position(|s| *s >= EARLY_FRACTION * last)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Auc {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Thresholds,
    pub low: Prf,
    pub medium: Prf,
    pub high: Prf,
    /// Normalized by `theta_max`, in percent.
    pub auc: Auc,
    /// Unnormalized integrals in percent times scene units.
    pub auc_raw: Auc,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl EvalReport {
    /// Report at a fixed `theta_max`, integrating on `rungs` even steps.
    pub fn at_theta_max(profile: &DistanceProfile, theta_max: f64, rungs: usize) -> Self {
        let th = Thresholds::from_theta_max(theta_max);
        let ladder = threshold_ladder(theta_max, rungs);
        let curve = profile.curve(&ladder);
        let pick = |f: fn(&Prf) -> f64| curve.iter().map(f).collect::<Vec<_>>();
        let (p, r, f) = (pick(|c| c.precision), pick(|c| c.recall), pick(|c| c.f1));
        EvalReport {
            thresholds: th,
            low: profile.at(th.low),
            medium: profile.at(th.medium),
            high: profile.at(th.high),
            auc: Auc {
                precision: auc(&ladder, &p, theta_max),
                recall: auc(&ladder, &r, theta_max),
                f1: auc(&ladder, &f, theta_max),
            },
            auc_raw: Auc {
                precision: auc_raw(&ladder, &p, theta_max),
                recall: auc_raw(&ladder, &r, theta_max),
                f1: auc_raw(&ladder, &f, theta_max),
            },
            n_pred: profile.pred_to_gt.len(),
            n_gt: profile.gt_to_pred.len(),
        }
    }

    /// Aligned text table: one row per threshold plus the AUC row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10} {:>9} {:>9} {:>9}", "", "tau", "P", "R", "F1");
        let t = &self.thresholds;
        for (name, tau, v) in [("Low", t.low, &self.low), ("Medium", t.medium, &self.medium), ("High", t.high, &self.high)] {
            let _ = writeln!(s, "{name:<8} {tau:>10.5} {:>9.2} {:>9.2} {:>9.2}", v.precision, v.recall, v.f1);
        }
        let a = &self.auc;
        let _ = writeln!(s, "{:<8} {:>10.5} {:>9.2} {:>9.2} {:>9.2}", "AUC", t.theta_max, a.precision, a.recall, a.f1);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Top of the threshold search ladder; `None` uses 10% of the ground-truth
    /// bounding diagonal.
    pub ladder_max: Option<f64>,
    pub ladder_rungs: usize,
    /// Rungs used when integrating over `[0, theta_max]`.
    pub auc_rungs: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { ladder_max: None, ladder_rungs: 400, auc_rungs: 200 }
    }
}

/// Selects `theta_max` from the F1 curve, then builds the report.
pub fn evaluate(pred: &[Vec3], gt: &[Vec3], params: &EvalParams, exec: Exec) -> Result<EvalReport> {
    let profile = DistanceProfile::new(pred, gt, exec)?;
    let max = params.ladder_max.unwrap_or_else(|| 0.1 * extent(gt));
    let ladder = threshold_ladder(max, params.ladder_rungs);
    let f1: Vec<f64> = profile.curve(&ladder).iter().map(|c| c.f1).collect();
    let th = select_thresholds(&ladder, &f1)?;
    Ok(EvalReport::at_theta_max(&profile, th.theta_max, params.auc_rungs))
}

/// Points per unit area when sampling a predicted mesh: 10^4 per squared
/// longest side of the ground-truth bounding box.
pub fn default_mesh_density(gt: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in gt {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let side = (hi - lo).max();
    if side > 0.0 && side.is_finite() {
        1e4 / (side * side)
    } else {
        1e4
    }
}
