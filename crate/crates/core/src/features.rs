//! Line and corner extraction from a single scan.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dataio::{scan_to_points, LaserScan, ScanPoint};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Max gap between consecutive points of one set (m).
    pub d_break: f64,
    /// Neighbor offset for vertex angles (beams).
    pub skip: usize,
    /// Minimum interior angle for points to stay on one line (rad).
    pub theta_line: f64,
    /// Minimum inter-line angle for a corner (rad).
    pub theta_corner: f64,
    pub n_min: usize,
    pub len_min: f64,
    pub d_adjacent: f64,
    pub nms_window: usize,
    /// Endpoint trimming tolerance (m).
    pub fit_tol: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            d_break: 0.25,
            skip: 5,
            theta_line: 170f64.to_radians(),
            theta_corner: 30f64.to_radians(),
            n_min: 8,
            len_min: 0.15,
            d_adjacent: 0.3,
            nms_window: 5,
            fit_tol: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    pub points: Vec<Vector2<f64>>,
    pub beam_indices: Vec<usize>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn push(&mut self, p: &ScanPoint) {
        self.points.push(p.xy);
        self.beam_indices.push(p.beam);
    }
}

/// Line `a·x + b·y + c = 0` with `a² + b² = 1`, bounded by the projections of
/// its first and last supporting points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub coeffs: [f64; 3],
    pub p_start: Vector2<f64>,
    pub p_end: Vector2<f64>,
    pub support: usize,
    pub frame_stamp: f64,
}

impl LineSegment {
    /// Builds a segment through two distinct points.
    pub fn from_endpoints(p_start: Vector2<f64>, p_end: Vector2<f64>, support: usize, frame_stamp: f64) -> Result<Self> {
        let d = p_end - p_start;
        let len = d.norm();
        if !(len > 1e-12) {
            return Err(Error::DegenerateGeometry("segment endpoints coincide".into()));
        }
        let n = Vector2::new(-d.y, d.x) / len;
        Ok(LineSegment {
            coeffs: [n.x, n.y, -n.dot(&p_start)],
            p_start,
            p_end,
            support,
            frame_stamp,
        })
    }

    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(self.coeffs[0], self.coeffs[1])
    }

    pub fn direction(&self) -> Vector2<f64> {
        (self.p_end - self.p_start).normalize()
    }

    pub fn length(&self) -> f64 {
        (self.p_end - self.p_start).norm()
    }

    pub fn midpoint(&self) -> Vector2<f64> {
        (self.p_start + self.p_end) * 0.5
    }

    pub fn signed_distance(&self, p: &Vector2<f64>) -> f64 {
        self.coeffs[0] * p.x + self.coeffs[1] * p.y + self.coeffs[2]
    }

    pub fn project(&self, p: &Vector2<f64>) -> Vector2<f64> {
        p - self.normal() * self.signed_distance(p)
    }

    /// Direction angle folded into `[0, π)`.
    pub fn undirected_angle(&self) -> f64 {
        let d = self.p_end - self.p_start;
        d.y.atan2(d.x).rem_euclid(PI)
    }

    /// Distance from `p` to the closed segment.
    pub fn distance_to_segment(&self, p: &Vector2<f64>) -> f64 {
        let d = self.p_end - self.p_start;
        let s = ((p - self.p_start).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (p - (self.p_start + d * s)).norm()
    }

    pub fn reversed(&self) -> Self {
        LineSegment {
            coeffs: [-self.coeffs[0], -self.coeffs[1], -self.coeffs[2]],
            p_start: self.p_end,
            p_end: self.p_start,
            ..*self
        }
    }

    /// Applies the planar rigid motion `p ↦ R·p + t`.
    pub fn transformed(&self, rot: &Matrix2<f64>, t: &Vector2<f64>) -> Self {
        let a = rot * self.p_start + t;
        let b = rot * self.p_end + t;
        let n = rot * self.normal();
        LineSegment {
            coeffs: [n.x, n.y, -n.dot(&a)],
            p_start: a,
            p_end: b,
            ..*self
        }
    }
}

/// Acute angle between two undirected lines, in `[0, π/2]`.
pub fn line_angle(a: &LineSegment, b: &LineSegment) -> f64 {
    let (na, nb) = (a.normal(), b.normal());
    (na.x * nb.y - na.y * nb.x).abs().atan2(na.dot(&nb).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    pub position: Vector2<f64>,
    pub incident_angle: f64,
}

pub fn split_continuous(points: &[ScanPoint], cfg: &FeatureConfig) -> Vec<PointSet> {
    let mut sets = Vec::new();
    let mut cur = PointSet::default();
    for (i, p) in points.iter().enumerate() {
        if i > 0 && (p.xy - points[i - 1].xy).norm() > cfg.d_break {
            sets.push(std::mem::take(&mut cur));
        }
        cur.push(p);
    }
    if !cur.is_empty() {
        sets.push(cur);
    }
    sets.retain(|s| s.len() >= cfg.n_min);
    sets
}

/// Interior angle at `P_i` between the rays to `P_{i−skip}` and `P_{i+skip}`.
pub fn vertex_angle(set: &PointSet, i: usize, skip: usize) -> Result<f64> {
    if skip == 0 || i < skip || i + skip >= set.len() {
        return Err(Error::InvalidArgument(format!(
            "vertex index {i} with skip {skip} outside set of {}",
            set.len()
        )));
    }
    interior_angle(&set.points[i - skip], &set.points[i], &set.points[i + skip])
}

fn interior_angle(prev: &Vector2<f64>, at: &Vector2<f64>, next: &Vector2<f64>) -> Result<f64> {
    let a = prev - at;
    let b = next - at;
    if a.norm() < 1e-12 || b.norm() < 1e-12 {
        return Err(Error::DegenerateGeometry("zero-length ray".into()));
    }
    Ok((a.x * b.y - a.y * b.x).abs().atan2(a.dot(&b)))
}

/// Indices whose deviation `|π − θ|` is strictly the largest within ±window.
pub fn nms_angles(angles: &[f64], window: usize) -> Vec<usize> {
    let dev: Vec<f64> = angles.iter().map(|a| (PI - a).abs()).collect();
    (0..dev.len())
        .filter(|&i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(dev.len() - 1);
            (lo..=hi).all(|j| j == i || dev[j] < dev[i])
        })
        .collect()
}

struct Fit {
    normal: Vector2<f64>,
    centroid: Vector2<f64>,
}

impl Fit {
    fn residual(&self, p: &Vector2<f64>) -> f64 {
        self.normal.dot(&(p - self.centroid))
    }
}

fn tls(points: &[Vector2<f64>]) -> Result<Fit> {
    if points.len() < 2 {
        return Err(Error::DegenerateGeometry("line fit needs two points".into()));
    }
    let centroid = points.iter().sum::<Vector2<f64>>() / points.len() as f64;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    if cov.trace() < 1e-24 {
        return Err(Error::DegenerateGeometry("all points coincide".into()));
    }
    let eig = cov.symmetric_eigen();
    let k = if eig.eigenvalues[0] <= eig.eigenvalues[1] { 0 } else { 1 };
    let normal: Vector2<f64> = eig.eigenvectors.column(k).into_owned();
    Ok(Fit {
        normal: normal.normalize(),
        centroid,
    })
}

/// Total-least-squares fit; endpoints are projections of the first and last
/// points.
pub fn fit_line(points: &[Vector2<f64>]) -> Result<LineSegment> {
    let fit = tls(points)?;
    let first = points[0];
    let last = points[points.len() - 1];
    let a = first - fit.normal * fit.residual(&first);
    let b = last - fit.normal * fit.residual(&last);
    let mut seg = LineSegment::from_endpoints(a, b, points.len(), 0.0)?;
    // keep the fitted normal exactly, not the one re-derived from endpoints
    let n = if seg.normal().dot(&fit.normal) < 0.0 { -fit.normal } else { fit.normal };
    seg.coeffs = [n.x, n.y, -n.dot(&fit.centroid)];
    seg.p_start = first - n * seg.signed_distance(&first);
    seg.p_end = last - n * seg.signed_distance(&last);
    Ok(seg)
}

fn rms_residual(points: &[Vector2<f64>], seg: &LineSegment) -> f64 {
    (points.iter().map(|p| seg.signed_distance(p).powi(2)).sum::<f64>() / points.len() as f64).sqrt()
}

/// Compares the directions of the two halves, allowing for fit noise.
fn straight_enough(points: &[Vector2<f64>], cfg: &FeatureConfig) -> bool {
    let n = points.len();
    if n < 6 {
        return true;
    }
    let mid = n / 2;
    let halves = [&points[..=mid], &points[mid..]];
    let mut dirs = Vec::with_capacity(2);
    let mut var = 0.0;
    for h in halves {
        let Ok(seg) = fit_line(h) else { return false };
        let len = seg.length().max(1e-9);
        let rms = rms_residual(h, &seg);
        var += (rms * (12.0 / h.len() as f64).sqrt() / len).powi(2);
        dirs.push(seg);
    }
    line_angle(&dirs[0], &dirs[1]) <= (PI - cfg.theta_line) + 3.0 * var.sqrt()
}

fn emit_segments(points: &[Vector2<f64>], cfg: &FeatureConfig, out: &mut Vec<LineSegment>) {
    let mut lo = 0;
    let mut hi = points.len();
    let seg = loop {
        if hi - lo < cfg.n_min.max(2) {
            return;
        }
        let Ok(seg) = fit_line(&points[lo..hi]) else { return };
        if seg.signed_distance(&points[lo]).abs() > cfg.fit_tol {
            lo += 1;
        } else if seg.signed_distance(&points[hi - 1]).abs() > cfg.fit_tol {
            hi -= 1;
        } else {
            break seg;
        }
    };
    let Some((seg, lo, hi)) = trim_foreign_ends(points, seg, lo, hi, cfg) else { return };
    let pts = &points[lo..hi];
    let worst = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, seg.signed_distance(p).abs()))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if worst.1 > cfg.fit_tol || !straight_enough(pts, cfg) {
        let k = worst.0.clamp(1, pts.len() - 2);
        emit_segments(&pts[..=k], cfg, out);
        emit_segments(&pts[k..], cfg, out);
        return;
    }
    if seg.length() >= cfg.len_min {
        out.push(seg);
    }
}

/// Drops end points far off the fit relative to the remaining scatter, such
/// as a corner point shared with the neighbouring wall. `None` when the
/// segment would fall below `n_min` points.
fn trim_foreign_ends(
    points: &[Vector2<f64>],
    mut seg: LineSegment,
    mut lo: usize,
    mut hi: usize,
    cfg: &FeatureConfig,
) -> Option<(LineSegment, usize, usize)> {
    let (mut cut_lo, mut cut_hi) = (0, 0);
    loop {
        if hi - lo < 3 {
            break;
        }
        let r: Vec<f64> = points[lo..hi].iter().map(|p| seg.signed_distance(p).abs()).collect();
        let rms_without = |skip: usize| {
            let (sum, n) = r
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .fold((0.0, 0usize), |acc, (_, x)| (acc.0 + x * x, acc.1 + 1));
            (sum / n as f64).sqrt()
        };
        let last = r.len() - 1;
        let foreign = |i: usize| r[i] > 3.0 * rms_without(i) + 1e-12;
        if cut_lo < cfg.skip && foreign(0) && r[0] >= r[last] {
            lo += 1;
            cut_lo += 1;
        } else if cut_hi < cfg.skip && foreign(last) {
            hi -= 1;
            cut_hi += 1;
        } else if cut_lo < cfg.skip && foreign(0) {
            lo += 1;
            cut_lo += 1;
        } else {
            break;
        }
        if hi - lo < cfg.n_min.max(2) {
            return None;
        }
        seg = fit_line(&points[lo..hi]).ok()?;
    }
    Some((seg, lo, hi))
}

/// Indices of potential endpoints: set boundaries plus NMS-retained vertices
/// whose angle falls below `theta_line`.
fn potential_endpoints(set: &PointSet, cfg: &FeatureConfig) -> Vec<usize> {
    let n = set.len();
    let angles: Vec<f64> = (0..n)
        .map(|i| vertex_angle(set, i, cfg.skip).unwrap_or(PI))
        .collect();
    let mut idx = vec![0];
    idx.extend(
        nms_angles(&angles, cfg.nms_window)
            .into_iter()
            .filter(|&i| i > 0 && i + 1 < n && angles[i] < cfg.theta_line),
    );
    idx.push(n - 1);
    idx.dedup();
    idx
}

pub fn extract_lines(set: &PointSet, cfg: &FeatureConfig) -> Vec<LineSegment> {
    let mut out = Vec::new();
    if set.len() < cfg.n_min.max(2) {
        return out;
    }
    let ends = potential_endpoints(set, cfg);
    let mut s = 0;
    let mut k = 1;
    while k < ends.len() {
        let start = ends[s];
        let mut c = k;
        while c + 1 < ends.len() {
            let theta = interior_angle(&set.points[start], &set.points[ends[c]], &set.points[ends[c + 1]]).unwrap_or(0.0);
            if theta < cfg.theta_line {
                break;
            }
            c += 1;
        }
        emit_segments(&set.points[start..=ends[c]], cfg, &mut out);
        s = c;
        k = c + 1;
    }
    out
}

/// Intersections of adjacent segments meeting at a sharp enough angle.
pub fn extract_corners(lines: &[LineSegment], cfg: &FeatureConfig) -> Vec<Corner> {
    let min_angle = cfg.theta_corner.max(1f64.to_radians());
    let mut out = Vec::new();
    for w in lines.windows(2) {
        if let Some(c) = corner_between(&w[0], &w[1], min_angle, cfg.d_adjacent) {
            out.push(c);
        }
    }
    out
}

fn corner_between(a: &LineSegment, b: &LineSegment, min_angle: f64, d_adjacent: f64) -> Option<Corner> {
    if (a.p_end - b.p_start).norm() >= d_adjacent {
        return None;
    }
    let angle = line_angle(a, b);
    if angle < min_angle {
        return None;
    }
    let m = Matrix2::new(a.coeffs[0], a.coeffs[1], b.coeffs[0], b.coeffs[1]);
    let p = m.try_inverse()? * Vector2::new(-a.coeffs[2], -b.coeffs[2]);
    Some(Corner {
        position: p,
        incident_angle: angle,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanFeatures {
    pub stamp: f64,
    pub lines: Vec<LineSegment>,
    pub corners: Vec<Corner>,
}

/// Full per-scan pipeline. Sets that wrap around a 360° scan are joined.
pub fn extract_features(scan: &LaserScan, cfg: &FeatureConfig) -> ScanFeatures {
    let points = scan_to_points(scan);
    let mut sets = split_continuous(&points, &FeatureConfig { n_min: 1, ..*cfg });
    if scan.is_full_circle() && sets.len() >= 2 {
        let first = sets[0].points[0];
        let last = *sets.last().unwrap().points.last().unwrap();
        if (first - last).norm() <= cfg.d_break {
            let head = sets.remove(0);
            let tail = sets.last_mut().unwrap();
            tail.points.extend(head.points);
            tail.beam_indices.extend(head.beam_indices);
        }
    }
    sets.retain(|s| s.len() >= cfg.n_min);
    let mut lines = Vec::new();
    for set in &sets {
        lines.extend(extract_lines(set, cfg));
    }
    for l in &mut lines {
        l.frame_stamp = scan.stamp;
    }
    let corners = extract_corners(&lines, cfg);
    ScanFeatures {
        stamp: scan.stamp,
        lines,
        corners,
    }
}

/// Appends one JSON record per scan.
pub fn write_features_jsonl<W: Write>(out: &mut W, features: &ScanFeatures) -> Result<()> {
    serde_json::to_writer(&mut *out, features).map_err(|e| Error::Io(e.into()))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub const LINE_BUCKETS: usize = 64;

/// Segments bucketed by undirected direction angle for candidate lookup.
#[derive(Debug, Clone)]
pub struct LineIndex {
    buckets: Vec<Vec<usize>>,
}

impl LineIndex {
    pub fn build(lines: &[LineSegment]) -> Self {
        let mut buckets = vec![Vec::new(); LINE_BUCKETS];
        for (i, l) in lines.iter().enumerate() {
            buckets[Self::bucket(l.undirected_angle())].push(i);
        }
        LineIndex { buckets }
    }

    fn bucket(angle: f64) -> usize {
        ((angle.rem_euclid(PI) / PI * LINE_BUCKETS as f64) as usize).min(LINE_BUCKETS - 1)
    }

    /// Indices of segments whose direction may lie within `tol` of `angle`.
    pub fn candidates(&self, angle: f64, tol: f64) -> Vec<usize> {
        let width = PI / LINE_BUCKETS as f64;
        let reach = (tol / width).ceil() as isize + 1;
        let center = Self::bucket(angle) as isize;
        let mut out = Vec::new();
        let span = reach.min(LINE_BUCKETS as isize / 2);
        for off in -span..=span {
            if off == span && 2 * span == LINE_BUCKETS as isize {
                continue;
            }
            let b = (center + off).rem_euclid(LINE_BUCKETS as isize) as usize;
            out.extend_from_slice(&self.buckets[b]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::FRAC_PI_2;

    fn set_of(points: Vec<Vector2<f64>>) -> PointSet {
        let n = points.len();
        PointSet {
            points,
            beam_indices: (0..n).collect(),
        }
    }

    fn scan_points(points: &[Vector2<f64>]) -> Vec<ScanPoint> {
        points
            .iter()
            .enumerate()
            .map(|(i, &xy)| ScanPoint { xy, beam: i })
            .collect()
    }

    fn l_shape() -> Vec<Vector2<f64>> {
        // wall along +y down to the origin, then along +x
        let mut pts: Vec<Vector2<f64>> = (0..50).map(|i| Vector2::new(0.0, 2.45 - 0.05 * i as f64)).collect();
        pts.extend((1..=50).map(|i| Vector2::new(0.05 * i as f64, 0.0)));
        pts
    }

    #[test]
    fn continuity_split() {
        let cfg = FeatureConfig {
            d_break: 0.2,
            ..Default::default()
        };
        let line: Vec<Vector2<f64>> = (0..40).map(|i| Vector2::new(0.05 * i as f64, 1.0)).collect();
        assert_eq!(split_continuous(&scan_points(&line), &cfg).len(), 1);
        let mut gapped = line.clone();
        for p in gapped.iter_mut().skip(20) {
            p.x += 0.45;
        }
        let sets = split_continuous(&scan_points(&gapped), &cfg);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[1].beam_indices[0], 20);
    }

    #[test]
    fn vertex_angles() {
        let s = set_of(vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(2.0, 0.0)]);
        assert_relative_eq!(vertex_angle(&s, 1, 1).unwrap(), PI);
        let s = set_of(vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(1.0, 1.0)]);
        assert_relative_eq!(vertex_angle(&s, 1, 1).unwrap(), FRAC_PI_2, epsilon = 1e-15);
        let s = set_of(vec![Vector2::new(0.0, 0.0), Vector2::new(0.0, 0.0), Vector2::new(1.0, 1.0)]);
        assert!(matches!(vertex_angle(&s, 1, 1), Err(Error::DegenerateGeometry(_))));
        assert!(vertex_angle(&s, 0, 1).is_err());
    }

    #[test]
    fn noisy_wall_angles_stay_near_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        // 1° beams against a wall 6 m away
        let pts: Vec<Vector2<f64>> = (-30..=30)
            .map(|k| {
                let a = (k as f64).to_radians();
                let r = 6.0 / a.cos() + noise.sample(&mut rng);
                Vector2::new(r * a.cos(), r * a.sin())
            })
            .collect();
        let s = set_of(pts);
        for i in 5..s.len() - 5 {
            let a = vertex_angle(&s, i, 5).unwrap();
            assert!(a >= PI - 0.15 && a <= PI, "{i}: {a}");
        }
    }

    #[test]
    fn nms_spikes() {
        let mut a = vec![PI; 30];
        a[12] = 2.0;
        assert_eq!(nms_angles(&a, 5), vec![12]);
        a[22] = 2.0;
        assert_eq!(nms_angles(&a, 5), vec![12, 22]);
    }

    fn nms_oracle(angles: &[f64], window: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..angles.len() {
            let di = (PI - angles[i]).abs();
            let mut best = true;
            for j in 0..angles.len() {
                if j != i && (j as isize - i as isize).unsigned_abs() <= window && (PI - angles[j]).abs() >= di {
                    best = false;
                }
            }
            if best {
                out.push(i);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn nms_matches_brute_force(angles in prop::collection::vec(0.0f64..PI, 1..80), window in 1usize..8) {
            prop_assert_eq!(nms_angles(&angles, window), nms_oracle(&angles, window));
        }
    }

    #[test]
    fn fit_line_axes() {
        let seg = fit_line(&[Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(2.0, 0.0)]).unwrap();
        assert_relative_eq!(seg.coeffs[0], 0.0);
        assert_relative_eq!(seg.coeffs[1].abs(), 1.0);
        assert_relative_eq!(seg.coeffs[2], 0.0);
        assert_relative_eq!(seg.p_start, Vector2::new(0.0, 0.0));
        assert_relative_eq!(seg.p_end, Vector2::new(2.0, 0.0));
        let seg = fit_line(&[Vector2::new(0.0, 0.0), Vector2::new(0.0, 1.0), Vector2::new(0.0, 2.0)]).unwrap();
        assert_relative_eq!(seg.coeffs[0].abs(), 1.0);
        assert_relative_eq!(seg.coeffs[2], 0.0);
        assert!(matches!(
            fit_line(&[Vector2::new(1.0, 1.0), Vector2::new(1.0, 1.0)]),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn fit_line_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<Vector2<f64>> = (0..100)
            .map(|i| {
                let x = i as f64 * 0.03;
                Vector2::new(x, 0.5 * x + 1.0 + noise.sample(&mut rng))
            })
            .collect();
        let seg = fit_line(&pts).unwrap();
        let truth = 0.5f64.atan();
        let got = seg.undirected_angle();
        assert!((got - truth).abs() < 0.01, "{got}");
        for p in [seg.p_start, seg.p_end] {
            assert!(seg.signed_distance(&p).abs() < 1e-9);
        }
    }

    #[test]
    fn l_shape_gives_two_exact_segments() {
        let cfg = FeatureConfig::default();
        let set = set_of(l_shape());
        let lines = extract_lines(&set, &cfg);
        assert_eq!(lines.len(), 2);
        assert!((lines[0].p_start - Vector2::new(0.0, 2.45)).norm() < 1e-9);
        assert!(lines[0].p_end.norm() < 1e-9);
        assert!(lines[1].p_start.norm() < 1e-9);
        assert!((lines[1].p_end - Vector2::new(2.5, 0.0)).norm() < 1e-9);
        let corners = extract_corners(&lines, &cfg);
        assert_eq!(corners.len(), 1);
        assert!(corners[0].position.norm() < 1e-9);
        assert_relative_eq!(corners[0].incident_angle, FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn unsampled_corner_point_stays_off_the_other_wall() {
        // neither wall is sampled at the vertex; the first point past the
        // corner must not tilt the preceding fit
        let mut pts: Vec<Vector2<f64>> = (0..50).map(|i| Vector2::new(0.0, 2.47 - 0.05 * i as f64)).collect();
        pts.extend((0..50).map(|i| Vector2::new(0.03 + 0.05 * i as f64, 0.0)));
        let lines = extract_lines(&set_of(pts), &FeatureConfig::default());
        assert_eq!(lines.len(), 2);
        assert!(lines[0].p_start.x.abs() < 1e-9 && lines[0].p_end.x.abs() < 1e-9, "{:?}", lines[0]);
        assert!(lines[1].p_start.y.abs() < 1e-9 && lines[1].p_end.y.abs() < 1e-9, "{:?}", lines[1]);
    }

    #[test]
    fn end_trim_drops_foreign_points_only() {
        let cfg = FeatureConfig::default();
        let mut pts: Vec<Vector2<f64>> = (0..20).map(|i| Vector2::new(0.05 * i as f64, 0.0)).collect();
        pts.push(Vector2::new(1.0, 0.004));
        let seg = fit_line(&pts).unwrap();
        let (seg, lo, hi) = trim_foreign_ends(&pts, seg, 0, pts.len(), &cfg).unwrap();
        assert_eq!((lo, hi), (0, 20));
        assert!(seg.signed_distance(&Vector2::new(3.0, 0.0)).abs() < 1e-12);

        // plain noise is left alone almost always
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut trimmed = 0;
        for _ in 0..200 {
            let pts: Vec<Vector2<f64>> = (0..30).map(|i| Vector2::new(0.05 * i as f64, noise.sample(&mut rng))).collect();
            let seg = fit_line(&pts).unwrap();
            if trim_foreign_ends(&pts, seg, 0, pts.len(), &cfg).is_none_or(|(_, lo, hi)| (lo, hi) != (0, 30)) {
                trimmed += 1;
            }
        }
        assert!(trimmed <= 10, "{trimmed} of 200 noisy walls trimmed");

        // at the size floor a foreign end discards the segment
        let mut short: Vec<Vector2<f64>> = (0..cfg.n_min).map(|i| Vector2::new(0.05 * i as f64, 0.0)).collect();
        short.push(Vector2::new(0.4, 0.004));
        short.remove(0);
        let seg = fit_line(&short).unwrap();
        assert!(trim_foreign_ends(&short, seg, 0, short.len(), &cfg).is_none());
    }

    #[test]
    fn small_circle_gives_no_segments() {
        // 90 points on r = 0.3: any 8-point run spans 28°, so its halves
        // differ by 14° and break the 170° rule.
        let cfg = FeatureConfig::default();
        let pts: Vec<Vector2<f64>> = (0..90)
            .map(|i| {
                let a = i as f64 * 4f64.to_radians();
                Vector2::new(0.3 * a.cos(), 0.3 * a.sin())
            })
            .collect();
        assert!(extract_lines(&set_of(pts), &cfg).is_empty());
    }

    #[test]
    fn parallel_walls_make_no_corner() {
        let cfg = FeatureConfig::default();
        let a = LineSegment::from_endpoints(Vector2::new(0.0, 1.0), Vector2::new(2.0, 1.0), 20, 0.0).unwrap();
        let b = LineSegment::from_endpoints(Vector2::new(2.2, 1.0), Vector2::new(4.0, 1.0), 20, 0.0).unwrap();
        assert!(extract_corners(&[a, b], &cfg).is_empty());
    }

    #[test]
    fn reverse_traversal_gives_same_corners() {
        let cfg = FeatureConfig::default();
        let mut pts = l_shape();
        pts.extend((1..40).map(|i| Vector2::new(2.5, 0.05 * i as f64)));
        let fwd = extract_corners(&extract_lines(&set_of(pts.clone()), &cfg), &cfg);
        pts.reverse();
        let rev = extract_corners(&extract_lines(&set_of(pts), &cfg), &cfg);
        assert_eq!(fwd.len(), 2);
        assert_eq!(rev.len(), 2);
        for c in &fwd {
            assert!(rev.iter().any(|r| (r.position - c.position).norm() < 1e-9));
        }
    }

    proptest! {
        #[test]
        fn rigid_invariance(yaw in -PI..PI, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let cfg = FeatureConfig::default();
            let (s, c) = yaw.sin_cos();
            let rot = Matrix2::new(c, -s, s, c);
            let t = Vector2::new(tx, ty);
            let base = l_shape();
            let moved: Vec<Vector2<f64>> = base.iter().map(|p| rot * p + t).collect();
            let a = extract_lines(&set_of(base), &cfg);
            let b = extract_lines(&set_of(moved), &cfg);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                let xt = x.transformed(&rot, &t);
                prop_assert!((xt.p_start - y.p_start).norm() < 1e-9);
                prop_assert!((xt.p_end - y.p_end).norm() < 1e-9);
            }
            let ca = extract_corners(&a, &cfg);
            let cb = extract_corners(&b, &cfg);
            prop_assert_eq!(ca.len(), cb.len());
            for (x, y) in ca.iter().zip(&cb) {
                prop_assert!((rot * x.position + t - y.position).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn line_index_finds_similar_directions() {
        let mk = |deg: f64| {
            let a = deg.to_radians();
            LineSegment::from_endpoints(Vector2::zeros(), Vector2::new(a.cos(), a.sin()), 10, 0.0).unwrap()
        };
        let lines = vec![mk(0.0), mk(45.0), mk(90.0), mk(178.0), mk(-3.0)];
        let idx = LineIndex::build(&lines);
        let mut got = idx.candidates(1f64.to_radians(), 10f64.to_radians());
        got.sort();
        for want in [0, 3, 4] {
            assert!(got.contains(&want));
        }
        assert!(!got.contains(&2));
    }

    #[test]
    fn jsonl_dump_round_trips() {
        let cfg = FeatureConfig::default();
        let lines = extract_lines(&set_of(l_shape()), &cfg);
        let f = ScanFeatures {
            stamp: 1.5,
            corners: extract_corners(&lines, &cfg),
            lines,
        };
        let mut buf = Vec::new();
        write_features_jsonl(&mut buf, &f).unwrap();
        let back: ScanFeatures = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, f);
    }
}
