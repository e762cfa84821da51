//! Log-odds occupancy grid built from keyframe scans.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2;

/// Growth granularity in cells.
pub const CHUNK: i64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub resolution: f64,
    pub p_hit: f64,
    pub p_miss: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Gaussian smoothing at export, in cells (0 disables).
    pub smooth_sigma: f64,
    pub occupied_thresh: f64,
    pub free_thresh: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            resolution: 0.05,
            p_hit: 0.55,
            p_miss: 0.49,
            p_min: 0.12,
            p_max: 0.971,
            smooth_sigma: 0.5,
            occupied_thresh: 0.65,
            free_thresh: 0.35,
        }
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Occupied,
    Free,
    Unknown,
}

/// Grid whose cell `(0, 0)` has its lower-left corner at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub cfg: MapConfig,
    pub origin: Vector2<f64>,
    pub width: usize,
    pub height: usize,
    log_odds: Vec<f64>,
    observed: Vec<bool>,
}

impl GridMap {
    pub fn new(cfg: MapConfig) -> Self {
        GridMap {
            cfg,
            origin: Vector2::zeros(),
            width: 0,
            height: 0,
            log_odds: Vec::new(),
            observed: Vec::new(),
        }
    }

    /// Fixed-extent map, all cells unknown.
    pub fn with_extent(cfg: MapConfig, origin: Vector2<f64>, width: usize, height: usize) -> Self {
        GridMap {
            cfg,
            origin,
            width,
            height,
            log_odds: vec![0.0; width * height],
            observed: vec![false; width * height],
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.observed.iter().any(|o| *o)
    }

    fn l_bounds(&self) -> (f64, f64) {
        (logit(self.cfg.p_min), logit(self.cfg.p_max))
    }

    /// Cell containing a world point (may be outside the grid).
    pub fn cell_of(&self, p: &Vector2<f64>) -> (i64, i64) {
        let q = (p - self.origin) / self.cfg.resolution;
        (q.x.floor() as i64, q.y.floor() as i64)
    }

    pub fn cell_center(&self, ix: i64, iy: i64) -> Vector2<f64> {
        self.origin + Vector2::new(ix as f64 + 0.5, iy as f64 + 0.5) * self.cfg.resolution
    }

    fn index(&self, ix: i64, iy: i64) -> Option<usize> {
        (ix >= 0 && iy >= 0 && (ix as usize) < self.width && (iy as usize) < self.height)
            .then(|| iy as usize * self.width + ix as usize)
    }

    pub fn probability(&self, ix: i64, iy: i64) -> Option<f64> {
        let i = self.index(ix, iy)?;
        self.observed[i].then(|| sigmoid(self.log_odds[i]))
    }

    pub fn classify(&self, ix: i64, iy: i64) -> CellClass {
        match self.probability(ix, iy) {
            Some(p) if p > self.cfg.occupied_thresh => CellClass::Occupied,
            Some(p) if p < self.cfg.free_thresh => CellClass::Free,
            _ => CellClass::Unknown,
        }
    }

    /// Grows the grid in whole chunks so that both world points are inside.
    pub fn ensure_contains(&mut self, lo: &Vector2<f64>, hi: &Vector2<f64>) {
        let chunk = CHUNK as f64 * self.cfg.resolution;
        if self.width == 0 {
            self.origin = Vector2::new((lo.x / chunk).floor(), (lo.y / chunk).floor()) * chunk;
            self.width = CHUNK as usize;
            self.height = CHUNK as usize;
            self.log_odds = vec![0.0; self.width * self.height];
            self.observed = vec![false; self.width * self.height];
        }
        let (lx, ly) = self.cell_of(lo);
        let (hx, hy) = self.cell_of(hi);
        let grow_lo = |c: i64| if c < 0 { (-c + CHUNK - 1) / CHUNK * CHUNK } else { 0 };
        let grow_hi = |c: i64, n: usize| if c >= n as i64 { (c - n as i64 + CHUNK) / CHUNK * CHUNK } else { 0 };
        let (gx0, gy0) = (grow_lo(lx), grow_lo(ly));
        let (gx1, gy1) = (grow_hi(hx, self.width), grow_hi(hy, self.height));
        if gx0 + gy0 + gx1 + gy1 == 0 {
            return;
        }
        let w = self.width + (gx0 + gx1) as usize;
        let h = self.height + (gy0 + gy1) as usize;
        let mut lo_new = vec![0.0; w * h];
        let mut ob_new = vec![false; w * h];
        for y in 0..self.height {
            let src = y * self.width;
            let dst = (y + gy0 as usize) * w + gx0 as usize;
            lo_new[dst..dst + self.width].copy_from_slice(&self.log_odds[src..src + self.width]);
            ob_new[dst..dst + self.width].copy_from_slice(&self.observed[src..src + self.width]);
        }
        self.origin -= Vector2::new(gx0 as f64, gy0 as f64) * self.cfg.resolution;
        self.width = w;
        self.height = h;
        self.log_odds = lo_new;
        self.observed = ob_new;
    }

    /// One hit or miss update of a cell inside the grid.
    pub fn update_cell(&mut self, ix: i64, iy: i64, hit: bool) -> Result<()> {
        let i = self
            .index(ix, iy)
            .ok_or_else(|| Error::OutOfRange(format!("cell ({ix}, {iy}) outside {}×{} grid", self.width, self.height)))?;
        let (lmin, lmax) = self.l_bounds();
        let p = if hit { self.cfg.p_hit } else { self.cfg.p_miss };
        self.log_odds[i] = (self.log_odds[i] + logit(p)).clamp(lmin, lmax);
        self.observed[i] = true;
        Ok(())
    }

    /// Integrates one scan taken from `sensor` (LiDAR pose in the map) with
    /// `points` in the sensor frame. Each cell changes at most once per scan
    /// and a hit overrides misses.
    pub fn integrate_scan(&mut self, sensor: &Pose2, points: &[Vector2<f64>]) {
        if points.is_empty() || !sensor.xy.iter().all(|v| v.is_finite()) || !sensor.yaw.is_finite() {
            return;
        }
        let world: Vec<Vector2<f64>> = points.iter().map(|p| sensor.transform_point(p)).collect();
        let mut lo = sensor.xy;
        let mut hi = sensor.xy;
        for p in &world {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        self.ensure_contains(&lo, &hi);
        let start = self.cell_of(&sensor.xy);
        let mut hits: HashSet<(i64, i64)> = HashSet::new();
        let mut misses: HashSet<(i64, i64)> = HashSet::new();
        for p in &world {
            let end = self.cell_of(p);
            hits.insert(end);
            bresenham(start, end, |c| {
                if c != end {
                    misses.insert(c);
                }
            });
        }
        let mut cells: Vec<((i64, i64), bool)> = hits.iter().map(|c| (*c, true)).collect();
        cells.extend(misses.iter().filter(|c| !hits.contains(c)).map(|c| (*c, false)));
        cells.sort();
        for (c, hit) in cells {
            // cells are inside by construction
            let _ = self.update_cell(c.0, c.1, hit);
        }
    }

    /// Gaussian blur of the probability field over observed cells only; the
    /// kernel is renormalized over the observed neighbourhood.
    pub fn smooth(&self, sigma_cells: f64) -> GridMap {
        if !(sigma_cells > 0.0) || self.width == 0 {
            return self.clone();
        }
        let r = (3.0 * sigma_cells).ceil() as i64;
        let kernel: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / sigma_cells).powi(2)).exp()).collect();
        let (w, h) = (self.width as i64, self.height as i64);
        let mut num = vec![0.0; self.log_odds.len()];
        let mut den = vec![0.0; self.log_odds.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut n, mut d) = (0.0, 0.0);
                for (k, wk) in kernel.iter().enumerate() {
                    let xx = x + k as i64 - r;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let i = (y * w + xx) as usize;
                    if self.observed[i] {
                        n += wk * sigmoid(self.log_odds[i]);
                        d += wk;
                    }
                }
                let i = (y * w + x) as usize;
                num[i] = n;
                den[i] = d;
            }
        }
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if !self.observed[i] {
                    continue;
                }
                let (mut n, mut d) = (0.0, 0.0);
                for (k, wk) in kernel.iter().enumerate() {
                    let yy = y + k as i64 - r;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    let j = (yy * w + x) as usize;
                    n += wk * num[j];
                    d += wk * den[j];
                }
                out.log_odds[i] = logit(n / d);
            }
        }
        out
    }

    /// Map image rows from top (max y) to bottom.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in (0..self.height as i64).rev() {
            for x in 0..self.width as i64 {
                out.push(match self.classify(x, y) {
                    CellClass::Occupied => 0,
                    CellClass::Free => 254,
                    CellClass::Unknown => 205,
                });
            }
        }
        out
    }

    pub fn metadata(&self, image: &str) -> MapMetadata {
        MapMetadata {
            image: image.to_string(),
            resolution: self.cfg.resolution,
            origin_x: self.origin.x,
            origin_y: self.origin.y,
            origin_yaw: 0.0,
            occupied_thresh: self.cfg.occupied_thresh,
            free_thresh: self.cfg.free_thresh,
            width: self.width,
            height: self.height,
        }
    }

    /// Writes `path` (PGM, smoothed when configured) and its metadata next to
    /// it with the extension `meta`. Returns the metadata path.
    pub fn export(&self, path: &Path) -> Result<PathBuf> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("map has no observed cells".into()));
        }
        let map = self.smooth(self.cfg.smooth_sigma);
        std::fs::write(path, map.to_pgm())?;
        let meta_path = path.with_extension("meta");
        let image = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        std::fs::write(&meta_path, map.metadata(&image).to_text())?;
        Ok(meta_path)
    }
}

/// Grid cells on the segment between two cells, both ends included.
pub fn bresenham(a: (i64, i64), b: (i64, i64), mut visit: impl FnMut((i64, i64))) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        visit((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapMetadata {
    pub image: String,
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub origin_yaw: f64,
    pub occupied_thresh: f64,
    pub free_thresh: f64,
    pub width: usize,
    pub height: usize,
}

impl MapMetadata {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image={}", self.image);
        let _ = writeln!(s, "resolution={}", self.resolution);
        let _ = writeln!(s, "origin_x={}", self.origin_x);
        let _ = writeln!(s, "origin_y={}", self.origin_y);
        let _ = writeln!(s, "origin_yaw={}", self.origin_yaw);
        let _ = writeln!(s, "occupied_thresh={}", self.occupied_thresh);
        let _ = writeln!(s, "free_thresh={}", self.free_thresh);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        s
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut m = MapMetadata {
            image: String::new(),
            resolution: f64::NAN,
            origin_x: f64::NAN,
            origin_y: f64::NAN,
            origin_yaw: f64::NAN,
            occupied_thresh: f64::NAN,
            free_thresh: f64::NAN,
            width: 0,
            height: 0,
        };
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let ln = k as u64 + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(file, ln, "expected key=value"))?;
            let num = || value.parse::<f64>().map_err(|_| Error::format(file, ln, format!("bad number for {key}")));
            let int = || value.parse::<usize>().map_err(|_| Error::format(file, ln, format!("bad integer for {key}")));
            match key {
                "image" => m.image = value.to_string(),
                "resolution" => m.resolution = num()?,
                "origin_x" => m.origin_x = num()?,
                "origin_y" => m.origin_y = num()?,
                "origin_yaw" => m.origin_yaw = num()?,
                "occupied_thresh" => m.occupied_thresh = num()?,
                "free_thresh" => m.free_thresh = num()?,
                "width" => m.width = int()?,
                "height" => m.height = int()?,
                other => return Err(Error::format(file, ln, format!("unknown key {other}"))),
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_cell() -> GridMap {
        GridMap::with_extent(MapConfig::default(), Vector2::zeros(), 1, 1)
    }

    #[test]
    fn odds_product_updates() {
        let mut m = one_cell();
        m.update_cell(0, 0, true).unwrap();
        assert_relative_eq!(m.probability(0, 0).unwrap(), 0.55, epsilon = 1e-12);
        m.update_cell(0, 0, false).unwrap();
        let odds = 0.55 / 0.45 * (0.49 / 0.51);
        assert_relative_eq!(m.probability(0, 0).unwrap(), odds / (1.0 + odds), epsilon = 1e-12);
        assert_relative_eq!(m.probability(0, 0).unwrap(), 0.5401, epsilon = 1e-4);
        for _ in 0..200 {
            m.update_cell(0, 0, true).unwrap();
        }
        assert_relative_eq!(m.probability(0, 0).unwrap(), 0.971, epsilon = 1e-12);
        assert!(m.update_cell(1, 0, true).is_err());
    }

    #[test]
    fn unknown_is_not_half() {
        let mut m = one_cell();
        assert_eq!(m.probability(0, 0), None);
        m.update_cell(0, 0, true).unwrap();
        m.update_cell(0, 0, false).unwrap();
        m.update_cell(0, 0, false).unwrap();
        assert!(m.probability(0, 0).is_some());
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let mut cells = Vec::new();
        bresenham((0, 0), (7, -3), |c| cells.push(c));
        assert_eq!(cells.first(), Some(&(0, 0)));
        assert_eq!(cells.last(), Some(&(7, -3)));
        assert!(cells.windows(2).all(|w| (w[1].0 - w[0].0).abs() <= 1 && (w[1].1 - w[0].1).abs() <= 1));
    }

    #[test]
    fn smoothing_cases() {
        let cfg = MapConfig::default();
        let mut uniform = GridMap::with_extent(cfg, Vector2::zeros(), 9, 9);
        for y in 0..9 {
            for x in 0..9 {
                uniform.update_cell(x, y, false).unwrap();
            }
        }
        let s = uniform.smooth(1.0);
        for y in 0..9 {
            for x in 0..9 {
                assert_relative_eq!(s.probability(x, y).unwrap(), uniform.probability(x, y).unwrap(), epsilon = 1e-12);
            }
        }

        let mut spot = uniform.clone();
        for _ in 0..20 {
            spot.update_cell(4, 4, true).unwrap();
        }
        let s = spot.smooth(1.0);
        // direct 2D convolution oracle
        let (pc, pf) = (spot.probability(4, 4).unwrap(), spot.probability(0, 0).unwrap());
        let mut wsum = 0.0;
        let mut center_w = 0.0;
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let w = (-0.5 * ((dx * dx + dy * dy) as f64)).exp();
                wsum += w;
                if dx == 0 && dy == 0 {
                    center_w = w;
                }
            }
        }
        let expected = (center_w * pc + (wsum - center_w) * pf) / wsum;
        assert_relative_eq!(s.probability(4, 4).unwrap(), expected, epsilon = 1e-12);

        let mut partial = GridMap::with_extent(cfg, Vector2::zeros(), 5, 1);
        partial.update_cell(1, 0, true).unwrap();
        partial.update_cell(2, 0, false).unwrap();
        let s = partial.smooth(1.0);
        assert_eq!(s.probability(0, 0), None);
        assert_eq!(s.probability(4, 0), None);
    }

    #[test]
    fn export_single_occupied_cell() {
        let mut m = one_cell();
        for _ in 0..10 {
            m.update_cell(0, 0, true).unwrap();
        }
        let pgm = m.to_pgm();
        assert_eq!(pgm, b"P5\n1 1\n255\n\x00".to_vec());
        let dir = tempfile::tempdir().unwrap();
        let meta = m.export(&dir.path().join("map.pgm")).unwrap();
        let text = std::fs::read_to_string(&meta).unwrap();
        let parsed = MapMetadata::parse(&text, "map.meta").unwrap();
        assert_eq!(parsed, m.metadata("map.pgm"));
        assert_eq!(parsed.to_text(), text);
        assert!(GridMap::new(MapConfig::default()).export(&dir.path().join("e.pgm")).is_err());
    }

    #[test]
    fn growth_keeps_cells() {
        let mut m = GridMap::new(MapConfig::default());
        m.integrate_scan(&Pose2::identity(), &[Vector2::new(1.0, 0.0)]);
        let c = m.cell_of(&Vector2::new(1.0, 0.0));
        let p = m.probability(c.0, c.1).unwrap();
        m.integrate_scan(&Pose2::new(0.0, -20.0, -20.0), &[Vector2::new(0.5, 0.0)]);
        let c = m.cell_of(&Vector2::new(1.0, 0.0));
        assert_eq!(m.probability(c.0, c.1), Some(p));
        assert_eq!(m.width as i64 % CHUNK, 0);
        assert_eq!(m.height as i64 % CHUNK, 0);
    }

    proptest! {
        #[test]
        fn traversed_cells_stay_below_half(k in 1usize..20, angle in 0.0f64..std::f64::consts::TAU) {
            let mut m = GridMap::new(MapConfig::default());
            let end = Vector2::new(3.0 * angle.cos(), 3.0 * angle.sin());
            for _ in 0..k {
                m.integrate_scan(&Pose2::identity(), &[end]);
            }
            let mut path = Vec::new();
            bresenham(m.cell_of(&Vector2::zeros()), m.cell_of(&end), |c| path.push(c));
            for c in &path[..path.len() - 1] {
                prop_assert!(m.probability(c.0, c.1).unwrap() < 0.5);
            }
        }

        #[test]
        fn scan_order_commutes(a in 0.0f64..std::f64::consts::TAU, b in 0.0f64..std::f64::consts::TAU) {
            let scan = |t: f64| vec![Vector2::new(2.0 * t.cos(), 2.0 * t.sin()), Vector2::new(1.0, 0.5)];
            let mut m1 = GridMap::new(MapConfig::default());
            let mut m2 = GridMap::new(MapConfig::default());
            m1.integrate_scan(&Pose2::identity(), &scan(a));
            m1.integrate_scan(&Pose2::new(0.3, 0.2, 0.1), &scan(b));
            m2.integrate_scan(&Pose2::new(0.3, 0.2, 0.1), &scan(b));
            m2.integrate_scan(&Pose2::identity(), &scan(a));
            let m2_on_m1 = |x: i64, y: i64| {
                let c = m2.cell_of(&m1.cell_center(x, y));
                m2.probability(c.0, c.1)
            };
            for y in 0..m1.height as i64 {
                for x in 0..m1.width as i64 {
                    match (m1.probability(x, y), m2_on_m1(x, y)) {
                        (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-12),
                        (None, None) => {}
                        other => prop_assert!(false, "{:?}", other),
                    }
                }
            }
        }
    }
}
