//! Corner-descriptor place recognition.
//!
//! Every corner of a keyframe gets a descriptor listing the discretized
//! distance and bearing to all other corners. Two frames are matched by
//! trying a few random anchors (enough to hit the shared region with
//! probability `p`), voting on the common bearing offset, solving the
//! rigid transform and verifying it with ICP on the scan points.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rigid_fit_2d, Pose2};
use crate::solver::{self, Factor, Loss, Manifold, Problem, ResidualBlock, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub d_res: f64,
    pub a_res: f64,
    /// Minimum number of matched corner pairs.
    pub t_min: usize,
    /// Target probability of sampling at least one shared anchor.
    pub p: f64,
    /// Assumed shared fraction of corners when sizing the trial count.
    pub overlap_guess: f64,
    /// Most recent keyframes never considered as loop candidates.
    pub exclusion_window: usize,
    /// Maximum post-ICP RMS (m).
    pub icp_gate: f64,
    /// Minimum fraction of query points with an ICP correspondence.
    pub icp_min_inliers: f64,
    pub icp_max_iters: usize,
    /// ICP correspondence radius (m).
    pub icp_max_dist: f64,
    /// Minimum normalized distance-histogram intersection.
    pub fast_filter: f64,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            d_res: 0.2,
            a_res: 5f64.to_radians(),
            t_min: 6,
            p: 0.95,
            overlap_guess: 0.5,
            exclusion_window: 30,
            icp_gate: 0.1,
            icp_min_inliers: 0.6,
            icp_max_iters: 30,
            icp_max_dist: 0.3,
            fast_filter: 0.3,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn angle_bins(&self) -> i64 {
        (2.0 * PI / self.a_res).round() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DescriptorEntry {
    pub d_int: i64,
    pub a_int: i64,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerDescriptor {
    pub anchor_index: usize,
    /// Sorted by `d_int`, then `a_int`.
    pub entries: Vec<DescriptorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub keyframe_id: u64,
    pub descriptors: Vec<CornerDescriptor>,
    pub corner_positions: Vec<Vector2<f64>>,
    pub d_res: f64,
    pub a_res: f64,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.corner_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Counts of `d_int` over unordered corner pairs.
    pub fn distance_histogram(&self) -> BTreeMap<i64, u32> {
        let mut h = BTreeMap::new();
        for d in &self.descriptors {
            for e in d.entries.iter().filter(|e| e.j > d.anchor_index) {
                *h.entry(e.d_int).or_insert(0) += 1;
            }
        }
        h
    }
}

/// Descriptor set over `corners`. Bearings are those of `P_i − P_j`.
pub fn build_descriptors(keyframe_id: u64, corners: &[Vector2<f64>], d_res: f64, a_res: f64) -> DescriptorSet {
    let n = corners.len();
    let descriptors = if n < 2 {
        Vec::new()
    } else {
        (0..n)
            .map(|i| {
                let mut entries: Vec<DescriptorEntry> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let v = corners[i] - corners[j];
                        DescriptorEntry {
                            d_int: (v.norm() / d_res).round() as i64,
                            a_int: (v.y.atan2(v.x) / a_res).round() as i64,
                            j,
                        }
                    })
                    .collect();
                entries.sort();
                CornerDescriptor { anchor_index: i, entries }
            })
            .collect()
    };
    DescriptorSet {
        keyframe_id,
        descriptors,
        corner_positions: corners.to_vec(),
        d_res,
        a_res,
    }
}

/// Bearing difference folded into `(−bins/2, bins/2]`.
fn norm_bins(diff: i64, bins: i64) -> i64 {
    let half = bins / 2;
    let r = diff.rem_euclid(bins);
    if r > half {
        r - bins
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatch {
    /// `(index in a's set, index in b's set)`, anchors first.
    pub pairs: Vec<(usize, usize)>,
    /// Winning bearing difference `a − b` in angle bins.
    pub diff_bin: i64,
}

/// Pairs entries of equal distance bins that agree on one bearing offset.
pub fn match_descriptors(a: &CornerDescriptor, b: &CornerDescriptor, t_min: usize, bins: i64) -> Option<DescriptorMatch> {
    let (ea, eb) = (&a.entries, &b.entries);
    let mut candidates: Vec<(usize, usize, i64)> = Vec::new();
    let (mut i, mut k) = (0, 0);
    while i < ea.len() && k < eb.len() {
        let (da, db) = (ea[i].d_int, eb[k].d_int);
        if da < db {
            i += 1;
        } else if db < da {
            k += 1;
        } else {
            let i_end = i + ea[i..].partition_point(|e| e.d_int == da);
            let k_end = k + eb[k..].partition_point(|e| e.d_int == db);
            for x in &ea[i..i_end] {
                for y in &eb[k..k_end] {
                    candidates.push((x.j, y.j, norm_bins(x.a_int - y.a_int, bins)));
                }
            }
            i = i_end;
            k = k_end;
        }
    }
    if candidates.len() + 1 < t_min {
        return None;
    }
    // votes indexed by offset + half, offsets lie in (−bins/2, bins/2]
    let half = bins / 2;
    let mut votes = vec![0usize; bins as usize];
    let slot = |bin: i64| (norm_bins(bin, bins) + half).rem_euclid(bins) as usize;
    for c in &candidates {
        votes[slot(c.2)] += 1;
    }
    // neighbouring bins share votes so that a rounding boundary does not
    // split one consistent offset
    let score = |bin: i64| -> usize { (-1..=1).map(|o| votes[slot(bin + o)]).sum() };
    let best = (-half + 1 - bins % 2..=half)
        .filter(|&bin| votes[slot(bin)] > 0)
        .max_by_key(|&bin| (score(bin), votes[slot(bin)], -bin.abs()))?;
    let mut used_a = vec![a.anchor_index];
    let mut used_b = vec![b.anchor_index];
    let mut pairs = vec![(a.anchor_index, b.anchor_index)];
    let mut consistent: Vec<&(usize, usize, i64)> = candidates
        .iter()
        .filter(|c| norm_bins(c.2 - best, bins).abs() <= 1)
        .collect();
    consistent.sort_by_key(|c| norm_bins(c.2 - best, bins).abs());
    for &(ja, jb, _) in consistent {
        if !used_a.contains(&ja) && !used_b.contains(&jb) {
            used_a.push(ja);
            used_b.push(jb);
            pairs.push((ja, jb));
        }
    }
    (pairs.len() >= t_min).then_some(DescriptorMatch { pairs, diff_bin: best })
}

/// Smallest γ with `1 − (1 − c/m)^γ ≥ p`.
pub fn num_trials(p: f64, m: usize, c: f64) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("success probability {p} outside (0, 1)")));
    }
    if !(c > 0.0) {
        return Err(Error::Infeasible(format!("overlap {c} leaves no shared anchor")));
    }
    let m = m as f64;
    if c > m {
        return Err(Error::InvalidArgument(format!("overlap {c} exceeds set size {m}")));
    }
    if c == m {
        return Ok(1);
    }
    let g = (1.0 - p).ln() / (1.0 - c / m).ln();
    Ok(((g - 1e-12).ceil() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// `(index in M, index in N)`.
    pub pairs: Vec<(usize, usize)>,
    /// Anchors of M tried before success.
    pub trials: usize,
}

/// Randomized anchor search of M against every anchor of N.
pub fn match_frames<R: Rng>(m: &DescriptorSet, n: &DescriptorSet, cfg: &LoopConfig, rng: &mut R) -> Option<FrameMatch> {
    if m.is_empty() || n.is_empty() {
        return None;
    }
    let bins = cfg.angle_bins();
    let c = (cfg.overlap_guess * m.len().min(n.len()) as f64).max(1.0).min(m.len() as f64);
    let gamma = num_trials(cfg.p, m.len(), c).ok()?.min(m.len());
    let anchors = rand::seq::index::sample(rng, m.len(), gamma);
    for (trial, ai) in anchors.iter().enumerate() {
        let da = &m.descriptors[ai];
        let mut found: Vec<DescriptorMatch> = n
            .descriptors
            .iter()
            .filter_map(|db| match_descriptors(da, db, cfg.t_min, bins))
            .collect();
        found.sort_by_key(|mt| std::cmp::Reverse(mt.pairs.len()));
        if let Some(pairs) = found.iter().find_map(|mt| rigid_inliers(m, n, &mt.pairs, cfg.d_res, cfg.t_min)) {
            let pairs = augment_pairs(m, n, &pairs, cfg.d_res);
            return Some(FrameMatch { pairs, trials: trial + 1 });
        }
    }
    None
}

/// Pairs that agree with one rigid motion to within `tol`, refitted once on
/// the survivors. The anchor pair (first) must survive.
fn rigid_inliers(
    m: &DescriptorSet,
    n: &DescriptorSet,
    pairs: &[(usize, usize)],
    tol: f64,
    t_min: usize,
) -> Option<Vec<(usize, usize)>> {
    let mut kept = pairs.to_vec();
    for _ in 0..2 {
        let (t, _) = solve_relative_pose(&point_pairs(m, n, &kept)).ok()?;
        kept = pairs
            .iter()
            .copied()
            .filter(|&(i, j)| (m.corner_positions[i] - t.transform_point(&n.corner_positions[j])).norm() <= tol)
            .collect();
        if kept.len() < t_min || kept.first() != pairs.first() {
            return None;
        }
    }
    Some(kept)
}

/// Adds corners of N that land within `tol` of an unpaired corner of M under
/// the transform implied by `pairs`.
fn augment_pairs(m: &DescriptorSet, n: &DescriptorSet, pairs: &[(usize, usize)], tol: f64) -> Vec<(usize, usize)> {
    let mut out = pairs.to_vec();
    let Ok((t, _)) = solve_relative_pose(&point_pairs(m, n, pairs)) else {
        return out;
    };
    for (jn, pn) in n.corner_positions.iter().enumerate() {
        if out.iter().any(|p| p.1 == jn) {
            continue;
        }
        let q = t.transform_point(pn);
        let nearest = m
            .corner_positions
            .iter()
            .enumerate()
            .filter(|(jm, _)| !out.iter().any(|p| p.0 == *jm))
            .map(|(jm, pm)| (jm, (pm - q).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((jm, d)) = nearest {
            if d <= tol {
                out.push((jm, jn));
            }
        }
    }
    out
}

pub fn point_pairs(m: &DescriptorSet, n: &DescriptorSet, pairs: &[(usize, usize)]) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    pairs
        .iter()
        .map(|&(i, j)| (m.corner_positions[i], n.corner_positions[j]))
        .collect()
}

/// `P^M − T·P^N` for one corner pair; the slot holds `[x, y, yaw]` of `T`.
pub struct PointPairFactor {
    pub pm: Vector2<f64>,
    pub pn: Vector2<f64>,
}

impl Factor for PointPairFactor {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let x = params[0];
        let (s, c) = x[2].sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let r = self.pm - (rot * self.pn + Vector2::new(x[0], x[1]));
        if let Some(j) = jacobians {
            let d_rot = Matrix2::new(-s, -c, c, -s) * self.pn;
            j[0].copy_from_slice(&[-1.0, 0.0, 0.0, -1.0, -d_rot.x, -d_rot.y]);
        }
        DVector::from_column_slice(r.as_slice())
    }
}

/// Rigid `T` with `P^M ≈ T·P^N`, and the residual RMS.
pub fn solve_relative_pose(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Result<(Pose2, f64)> {
    if pairs.len() < 2 {
        return Err(Error::RankDeficient(format!("{} point pairs", pairs.len())));
    }
    let n = pairs.len() as f64;
    let centroid = pairs.iter().map(|p| p.1).sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for (_, q) in pairs {
        let d = q - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(hi > 1e-18) || lo < 1e-10 * hi {
        return Err(Error::RankDeficient("corner pairs are collinear".into()));
    }
    let (src, dst): (Vec<_>, Vec<_>) = pairs.iter().map(|(m, n)| (*n, *m)).unzip();
    let mut pose = rigid_fit_2d(&src, &dst)?;
    if pairs.len() > 10 {
        let mut problem = Problem::new();
        let slot = problem.add_slot(Manifold::Euclidean(3), &[pose.xy.x, pose.xy.y, pose.yaw]);
        for (pm, pn) in pairs {
            problem.add_block(
                ResidualBlock::unweighted(vec![slot], Box::new(PointPairFactor { pm: *pm, pn: *pn })).with_loss(Loss::Huber(0.1)),
            );
        }
        solver::solve(&mut problem, &SolverOptions::default())?;
        let x = problem.value(slot);
        pose = Pose2::new(x[2], x[0], x[1]);
    }
    let sse: f64 = pairs.iter().map(|(m, q)| (m - pose.transform_point(q)).norm_squared()).sum();
    Ok((pose, (sse / n).sqrt()))
}

/// Uniform grid over 2D points for radius queries.
pub struct PointGrid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    points: Vec<Vector2<f64>>,
}

impl PointGrid {
    pub fn new(points: &[Vector2<f64>], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid {
            cell,
            cells,
            points: points.to_vec(),
        }
    }

    fn key(p: &Vector2<f64>, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Nearest point within one cell size of `q`.
    pub fn nearest(&self, q: &Vector2<f64>) -> Option<(usize, f64)> {
        let (cx, cy) = Self::key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &i in self.cells.get(&(cx + dx, cy + dy)).into_iter().flatten() {
                    let d = (self.points[i] - q).norm();
                    if d <= self.cell && best.is_none_or(|b| d < b.1) {
                        best = Some((i, d));
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps `points_b` onto `points_a`.
    pub pose: Pose2,
    pub rms: f64,
    pub inlier_ratio: f64,
    pub iterations: usize,
    /// Inlier RMS after each accepted iteration.
    pub rms_history: Vec<f64>,
}

/// Point-to-point ICP of `points_b` onto `points_a`.
pub fn icp_refine(
    points_a: &[Vector2<f64>],
    points_b: &[Vector2<f64>],
    initial: &Pose2,
    max_iters: usize,
    max_dist: f64,
) -> Result<IcpResult> {
    icp_refine_gated(points_a, points_b, initial, max_iters, max_dist, 0.0)
}

/// As [`icp_refine`], but gives up before iterating when fewer than
/// `min_initial_ratio` of `points_b` find a partner at `initial`.
pub fn icp_refine_gated(
    points_a: &[Vector2<f64>],
    points_b: &[Vector2<f64>],
    initial: &Pose2,
    max_iters: usize,
    max_dist: f64,
    min_initial_ratio: f64,
) -> Result<IcpResult> {
    if points_a.len() < 20 || points_b.len() < 20 {
        return Err(Error::InvalidArgument(format!(
            "ICP needs at least 20 points per cloud, got {} and {}",
            points_a.len(),
            points_b.len()
        )));
    }
    let grid = PointGrid::new(points_a, max_dist);
    let correspond = |pose: &Pose2| {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut sse = 0.0;
        for p in points_b {
            let q = pose.transform_point(p);
            if let Some((i, d)) = grid.nearest(&q) {
                src.push(*p);
                dst.push(points_a[i]);
                sse += d * d;
            }
        }
        let rms = if src.is_empty() { f64::INFINITY } else { (sse / src.len() as f64).sqrt() };
        (src, dst, rms)
    };
    let (mut src, mut dst, mut rms) = correspond(initial);
    if src.is_empty() {
        return Err(Error::NoOverlap("no ICP correspondences within the gating radius".into()));
    }
    let initial_ratio = src.len() as f64 / points_b.len() as f64;
    if initial_ratio < min_initial_ratio {
        return Err(Error::NoOverlap(format!("initial overlap {initial_ratio:.2} below {min_initial_ratio}")));
    }
    let mut pose = *initial;
    let mut history = vec![rms];
    let mut iterations = 0;
    let mut inliers = src.len();
    while iterations < max_iters {
        let candidate = rigid_fit_2d(&src, &dst)?;
        let (s2, d2, r2) = correspond(&candidate);
        // keep the trajectory monotone; a worse or emptier set ends the search
        if s2.is_empty() || r2 > rms {
            break;
        }
        iterations += 1;
        let delta = rms - r2;
        pose = candidate;
        rms = r2;
        inliers = s2.len();
        history.push(rms);
        src = s2;
        dst = d2;
        if delta < 1e-6 {
            break;
        }
    }
    Ok(IcpResult {
        pose,
        rms,
        inlier_ratio: inliers as f64 / points_b.len() as f64,
        iterations,
        rms_history: history,
    })
}

/// Keyframe as stored in the place-recognition database. Corners and points
/// are in the keyframe's LiDAR frame; `pose` is the LiDAR pose in the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub id: u64,
    pub stamp: f64,
    pub pose: Pose2,
    pub corners: Vec<Vector2<f64>>,
    pub points: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConstraint {
    /// Earlier (database) keyframe.
    pub from_id: u64,
    /// Query keyframe.
    pub to_id: u64,
    /// Query LiDAR pose in the frame of `from_id`.
    pub relative_pose: Pose2,
    pub match_count: usize,
    pub post_icp_rms: f64,
}

struct DbEntry {
    record: KeyframeRecord,
    set: DescriptorSet,
    hist: BTreeMap<i64, u32>,
}

/// Append-only keyframe database.
pub struct LoopDatabase {
    cfg: LoopConfig,
    entries: Vec<DbEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectStats {
    pub candidates: usize,
    pub after_filter: usize,
    pub descriptor_matches: usize,
    pub icp_runs: usize,
}

/// Normalized intersection of two distance histograms.
pub fn histogram_overlap(a: &BTreeMap<i64, u32>, b: &BTreeMap<i64, u32>) -> f64 {
    histogram_scores(a, b).0
}

/// Intersection over the smaller mass (filter score) and over the geometric
/// mean of both masses (ranking score, which does not favour small sets).
fn histogram_scores(a: &BTreeMap<i64, u32>, b: &BTreeMap<i64, u32>) -> (f64, f64) {
    let (na, nb): (u32, u32) = (a.values().sum(), b.values().sum());
    if na == 0 || nb == 0 {
        return (0.0, 0.0);
    }
    let inter = a.iter().map(|(k, v)| (*v).min(*b.get(k).unwrap_or(&0))).sum::<u32>() as f64;
    (inter / na.min(nb) as f64, inter / (na as f64 * nb as f64).sqrt())
}

impl LoopDatabase {
    pub fn new(cfg: LoopConfig) -> Self {
        LoopDatabase { cfg, entries: Vec::new() }
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &KeyframeRecord> {
        self.entries.iter().map(|e| &e.record)
    }

    pub fn get(&self, id: u64) -> Option<&KeyframeRecord> {
        self.entries.iter().find(|e| e.record.id == id).map(|e| &e.record)
    }

    pub fn descriptors(&self, record: &KeyframeRecord) -> DescriptorSet {
        build_descriptors(record.id, &record.corners, self.cfg.d_res, self.cfg.a_res)
    }

    pub fn insert(&mut self, record: KeyframeRecord) {
        let set = self.descriptors(&record);
        let hist = set.distance_histogram();
        self.entries.push(DbEntry { record, set, hist });
    }

    pub fn set_pose(&mut self, id: u64, pose: Pose2) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.record.id == id) {
            e.record.pose = pose;
        }
    }

    /// Loop constraint for `query` against entries older than the exclusion
    /// window (`exclude_recent = false` searches everything).
    pub fn detect<R: Rng>(&self, query: &KeyframeRecord, exclude_recent: bool, rng: &mut R) -> (Option<LoopConstraint>, DetectStats) {
        let cfg = &self.cfg;
        let mut stats = DetectStats::default();
        let qset = self.descriptors(query);
        if qset.len() < cfg.t_min {
            return (None, stats);
        }
        let qhist = qset.distance_histogram();
        let mut candidates: Vec<(f64, &DbEntry)> = self
            .entries
            .iter()
            .filter(|e| !exclude_recent || e.record.id + cfg.exclusion_window as u64 <= query.id)
            .filter(|e| e.set.len() >= cfg.t_min)
            .inspect(|_| stats.candidates += 1)
            .map(|e| (histogram_scores(&qhist, &e.hist), e))
            .filter(|((pass, _), _)| *pass >= cfg.fast_filter)
            .map(|((_, rank), e)| (rank, e))
            .collect();
        stats.after_filter = candidates.len();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.record.id.cmp(&a.1.record.id)));
        for (_, entry) in candidates {
            let Some(fm) = match_frames(&entry.set, &qset, cfg, rng) else {
                continue;
            };
            stats.descriptor_matches += 1;
            let Ok((init, _)) = solve_relative_pose(&point_pairs(&entry.set, &qset, &fm.pairs)) else {
                continue;
            };
            stats.icp_runs += 1;
            let Ok(icp) = icp_refine_gated(
                &entry.record.points,
                &query.points,
                &init,
                cfg.icp_max_iters,
                cfg.icp_max_dist,
                0.5 * cfg.icp_min_inliers,
            ) else {
                continue;
            };
            if icp.rms <= cfg.icp_gate && icp.inlier_ratio >= cfg.icp_min_inliers {
                let c = LoopConstraint {
                    from_id: entry.record.id,
                    to_id: query.id,
                    relative_pose: icp.pose,
                    match_count: fm.pairs.len(),
                    post_icp_rms: icp.rms,
                };
                return (Some(c), stats);
            }
        }
        (None, stats)
    }

    pub fn to_text(&self) -> String {
        keyframes_to_text(self.records())
    }
}

fn push_points(s: &mut String, tag: &str, pts: &[Vector2<f64>]) {
    let _ = write!(s, "{tag} {}", pts.len());
    for p in pts {
        let _ = write!(s, " {} {}", p.x, p.y);
    }
    s.push('\n');
}

/// Line-oriented keyframe database:
/// `keyframe id stamp x y yaw`, `corners n x y ...`, `points n x y ...`.
pub fn keyframes_to_text<'a>(records: impl Iterator<Item = &'a KeyframeRecord>) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "keyframe {} {} {} {} {}", r.id, r.stamp, r.pose.xy.x, r.pose.xy.y, r.pose.yaw);
        push_points(&mut s, "corners", &r.corners);
        push_points(&mut s, "points", &r.points);
    }
    s
}

pub fn parse_keyframes(text: &str, file: &str) -> Result<Vec<KeyframeRecord>> {
    let mut out: Vec<KeyframeRecord> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let lineno = ln as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap_or_default();
        let nums: Vec<f64> = it
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(file, lineno, "non-numeric field"))?;
        match tag {
            "keyframe" => {
                if nums.len() != 5 {
                    return Err(Error::format(file, lineno, "keyframe line needs id stamp x y yaw"));
                }
                out.push(KeyframeRecord {
                    id: nums[0] as u64,
                    stamp: nums[1],
                    pose: Pose2::new(nums[4], nums[2], nums[3]),
                    corners: Vec::new(),
                    points: Vec::new(),
                });
            }
            "corners" | "points" => {
                let rec = out
                    .last_mut()
                    .ok_or_else(|| Error::format(file, lineno, format!("{tag} before any keyframe")))?;
                let n = nums.first().copied().unwrap_or(-1.0);
                if n < 0.0 || nums.len() != 1 + 2 * n as usize {
                    return Err(Error::format(file, lineno, format!("{tag} count does not match its coordinates")));
                }
                let pts = nums[1..].chunks(2).map(|c| Vector2::new(c[0], c[1])).collect();
                if tag == "corners" {
                    rec.corners = pts;
                } else {
                    rec.points = pts;
                }
            }
            other => return Err(Error::format(file, lineno, format!("unknown record {other:?}"))),
        }
    }
    Ok(out)
}

pub fn load_keyframes(path: &Path) -> Result<Vec<KeyframeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_keyframes(&text, &path.display().to_string())
}

/// Loop log row: `from_id,to_id,dx,dy,dyaw,match_count,icp_rms`.
pub fn loops_to_csv(loops: &[LoopConstraint]) -> String {
    let mut s = String::from("from_id,to_id,dx,dy,dyaw,match_count,icp_rms\n");
    for l in loops {
        let p = &l.relative_pose;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            l.from_id, l.to_id, p.xy.x, p.xy.y, p.yaw, l.match_count, l.post_icp_rms
        );
    }
    s
}
