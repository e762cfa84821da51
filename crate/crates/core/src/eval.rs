//! Trajectory error metrics: time association, absolute pose error with
//! optional planar alignment, and relative pose error over arc-length
//! intervals.
//!
//! Translation and rotation errors are also folded into a combined scalar
//! `sqrt(e_t² + e_r²)` with 1 m weighted like 1 rad.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rigid_fit_2d, so3_log, Pose2, Pose3};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<(f64, Pose3)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose3)>) -> Result<Self> {
        if let Some(w) = samples.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument(format!(
                "trajectory stamps must increase strictly ({} then {})",
                w[0].0, w[1].0
            )));
        }
        Ok(Trajectory { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn nearest(&self, t: f64) -> Option<usize> {
        let s = &self.samples;
        let k = s.partition_point(|(st, _)| *st < t);
        [k.checked_sub(1), (k < s.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (s[a].0 - t).abs().total_cmp(&(s[b].0 - t).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair {
    pub stamp: f64,
    pub est: Pose3,
    pub gt: Pose3,
}

/// Pairs each estimate with the nearest ground-truth stamp within `max_dt`.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<PosePair>> {
    let pairs: Vec<PosePair> = est
        .samples
        .iter()
        .filter_map(|(t, pose)| {
            let k = gt.nearest(*t)?;
            ((gt.samples[k].0 - t).abs() <= max_dt).then_some(PosePair {
                stamp: *t,
                est: *pose,
                gt: gt.samples[k].1,
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyAssociation(format!(
            "no estimate within {max_dt} s of a ground-truth stamp"
        )));
    }
    Ok(pairs)
}

/// Summary statistics of a list of non-negative errors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub count: usize,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub rmse: f64,
    pub sse: f64,
    pub std: f64,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return ErrorStats::default();
        }
        let n = errors.len() as f64;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        let sse: f64 = errors.iter().map(|e| e * e).sum();
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        ErrorStats {
            count: errors.len(),
            max: sorted[sorted.len() - 1],
            mean,
            median,
            min: sorted[0],
            rmse: (sse / n).sqrt(),
            sse,
            std: var.sqrt(),
        }
    }

    fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("max", self.max),
            ("mean", self.mean),
            ("median", self.median),
            ("min", self.min),
            ("rmse", self.rmse),
            ("sse", self.sse),
            ("std", self.std),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseErrorReport {
    pub trans: ErrorStats,
    /// Radians.
    pub rot: ErrorStats,
    pub combined: ErrorStats,
}

impl PoseErrorReport {
    fn from_errors(trans: &[f64], rot: &[f64]) -> Self {
        let combined: Vec<f64> = trans.iter().zip(rot).map(|(t, r)| t.hypot(*r)).collect();
        PoseErrorReport {
            trans: ErrorStats::from_errors(trans),
            rot: ErrorStats::from_errors(rot),
            combined: ErrorStats::from_errors(&combined),
        }
    }

    pub fn trans_rmse(&self) -> f64 {
        self.trans.rmse
    }

    pub fn rot_rmse(&self) -> f64 {
        self.rot.rmse
    }

    pub fn combined_rmse(&self) -> f64 {
        self.combined.rmse
    }

    /// Flat `prefix.component.stat` entries; rotation also in degrees.
    pub fn entries(&self, prefix: &str) -> Vec<(String, f64)> {
        let mut out = vec![(format!("{prefix}.count"), self.trans.count as f64)];
        for (name, stats, scale) in [
            ("trans", &self.trans, 1.0),
            ("rot", &self.rot, 1.0),
            ("rot_deg", &self.rot, 180.0 / std::f64::consts::PI),
            ("combined", &self.combined, 1.0),
        ] {
            for (stat, v) in stats.fields() {
                // sse scales quadratically
                let v = if stat == "sse" { v * scale * scale } else { v * scale };
                out.push((format!("{prefix}.{name}.{stat}"), v));
            }
        }
        out
    }
}

/// Planar rigid motion best mapping the estimate onto ground truth.
pub fn planar_alignment(pairs: &[PosePair]) -> Result<Pose2> {
    let src: Vec<Vector2<f64>> = pairs.iter().map(|p| p.est.translation.xy()).collect();
    let dst: Vec<Vector2<f64>> = pairs.iter().map(|p| p.gt.translation.xy()).collect();
    rigid_fit_2d(&src, &dst)
}

fn rotation_error(a: &Pose3, b: &Pose3) -> f64 {
    so3_log(&(a.rotation.transpose() * b.rotation)).norm()
}

pub fn ape(pairs: &[PosePair], align: bool) -> Result<PoseErrorReport> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!("APE needs at least 2 pairs, got {}", pairs.len())));
    }
    let t = if align { planar_alignment(pairs)?.to_pose3() } else { Pose3::identity() };
    let (mut trans, mut rot) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
    for p in pairs {
        let est = t.compose(&p.est);
        trans.push((est.translation - p.gt.translation).norm());
        rot.push(rotation_error(&p.gt, &est));
    }
    Ok(PoseErrorReport::from_errors(&trans, &rot))
}

/// Relative errors between pair `i` and the first later pair at least
/// `delta` metres further along the ground-truth path.
pub fn rpe(pairs: &[PosePair], delta: f64) -> Result<PoseErrorReport> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("RPE interval must be positive, got {delta}")));
    }
    let mut arc = vec![0.0; pairs.len()];
    for k in 1..pairs.len() {
        arc[k] = arc[k - 1] + (pairs[k].gt.translation - pairs[k - 1].gt.translation).norm();
    }
    let total = arc.last().copied().unwrap_or(0.0);
    if total < delta {
        return Err(Error::InvalidArgument(format!(
            "trajectory length {total:.3} m is shorter than the RPE interval {delta} m"
        )));
    }
    // tolerate summation round-off on evenly spaced samples
    let reach = delta * (1.0 - 1e-9);
    let (mut trans, mut rot) = (Vec::new(), Vec::new());
    for i in 0..pairs.len() {
        let j = i + arc[i..].partition_point(|s| s - arc[i] < reach);
        if j >= pairs.len() {
            break;
        }
        let d_gt = pairs[i].gt.between(&pairs[j].gt);
        let d_est = pairs[i].est.between(&pairs[j].est);
        let e = d_gt.between(&d_est);
        trans.push(e.translation.norm());
        rot.push(so3_log(&e.rotation).norm());
    }
    Ok(PoseErrorReport::from_errors(&trans, &rot))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub max_dt: f64,
    pub align: bool,
    pub rpe_delta: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_dt: 0.02,
            align: true,
            rpe_delta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub ape: PoseErrorReport,
    pub rpe: PoseErrorReport,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory, opts: &EvalOptions) -> Result<EvalReport> {
    let pairs = associate(est, gt, opts.max_dt)?;
    Ok(EvalReport {
        pairs: pairs.len(),
        ape: ape(&pairs, opts.align)?,
        rpe: rpe(&pairs, opts.rpe_delta)?,
    })
}

impl EvalReport {
    pub fn entries(&self) -> BTreeMap<String, f64> {
        let mut map: BTreeMap<String, f64> = self.ape.entries("ape").into_iter().collect();
        map.extend(self.rpe.entries("rpe"));
        map.insert("pairs".into(), self.pairs as f64);
        map
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Header and value rows with the same key order as [`EvalReport::to_text`].
    pub fn to_csv(&self) -> String {
        let e = self.entries();
        let keys: Vec<&str> = e.keys().map(String::as_str).collect();
        let vals: Vec<String> = e.values().map(|v| v.to_string()).collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }

    /// Keys whose value exceeds its gate. Short keys `ape`, `rpe`, `ape_rot`
    /// and `rpe_rot` name the translation and rotation RMSEs.
    pub fn violations(&self, gates: &[(String, f64)]) -> Result<Vec<(String, f64, f64)>> {
        let entries = self.entries();
        let mut out = Vec::new();
        for (key, limit) in gates {
            let full = match key.as_str() {
                "ape" => "ape.trans.rmse",
                "rpe" => "rpe.trans.rmse",
                "ape_rot" => "ape.rot.rmse",
                "rpe_rot" => "rpe.rot.rmse",
                other => other,
            };
            let v = *entries
                .get(full)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown gate key {key}")))?;
            if v > *limit {
                out.push((key.clone(), v, *limit));
            }
        }
        Ok(out)
    }
}

/// Parses `key=value` gate specifications.
pub fn parse_gate(spec: &str) -> Result<(String, f64)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("gate {spec:?} is not key=value")))?;
    let v: f64 = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("gate {spec:?} has a non-numeric limit")))?;
    Ok((k.trim().to_string(), v))
}

pub fn trajectory_length(traj: &Trajectory) -> f64 {
    traj.samples
        .windows(2)
        .map(|w| (w[1].1.translation - w[0].1.translation).norm())
        .sum()
}

/// Applies a planar rigid motion to every pose (left composition).
pub fn transform_trajectory(traj: &Trajectory, t: &Pose2) -> Trajectory {
    let t3 = t.to_pose3();
    Trajectory {
        samples: traj.samples.iter().map(|(s, p)| (*s, t3.compose(p))).collect(),
    }
}
