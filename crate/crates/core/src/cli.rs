//! Command implementations behind the `liwslam` binary. Argument parsing
//! lives in `main.rs`; everything here takes typed inputs and writes its
//! human-readable output to the supplied writer.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{Backend, OdomNoise};
use crate::dataio::{self, scan_to_points, Dataset, CALIB_FILE};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, Trajectory};
use crate::features::extract_features;
use crate::frontend::{decimate_points, run_dataset, FrontendConfig, RunOutput};
use crate::geometry::Pose2;
use crate::loopdetect::{self, DetectStats, KeyframeRecord, LoopConfig, LoopConstraint, LoopDatabase};
use crate::mapping::{GridMap, MapConfig};
use crate::simgen::{self, TRUTH_FILE};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Every tunable threshold, addressable as `section.field[.sub]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub loops: LoopConfig,
    pub odom: OdomNoise,
    pub map: MapConfig,
    pub eval: EvalOptions,
}

impl PipelineConfig {
    /// Sets one leaf from `key=value`. The value is read as JSON when it
    /// parses, otherwise as a bare string.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override {spec:?} is not key=value")))?;
        let key = key.trim();
        let mut tree = serde_json::to_value(&*self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown config key {key}")))?;
        }
        if node.is_object() {
            return Err(Error::InvalidArgument(format!("config key {key} is a section")));
        }
        let raw = raw.trim();
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(tree).map_err(|e| Error::InvalidArgument(format!("bad value for {key}: {e}")))?;
        Ok(())
    }

    pub fn with_overrides<'a>(mut self, specs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        for s in specs {
            self.set(s)?;
        }
        Ok(self)
    }

    /// Sorted `key=value` lines covering every leaf.
    pub fn to_text(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut String) {
            match v {
                Value::Object(map) => {
                    let mut keys: Vec<&String> = map.keys().collect();
                    keys.sort();
                    for k in keys {
                        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&p, &map[k], out);
                    }
                }
                leaf => {
                    let _ = writeln!(out, "{prefix}={leaf}");
                }
            }
        }
        let mut s = String::new();
        walk("", &serde_json::to_value(self).unwrap_or(Value::Null), &mut s);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    /// Defaults to the dataset's own calibration file.
    pub calib_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub loop_closure: bool,
    pub wheel_factor: bool,
    pub ground_factor: bool,
    /// Returns beyond this range (m) are dropped before tracking.
    pub range_clip: Option<f64>,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset_dir: dataset_dir.into(),
            calib_path: None,
            output_dir: output_dir.into(),
            loop_closure: true,
            wheel_factor: true,
            ground_factor: true,
            range_clip: None,
            pipeline: PipelineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_dir.is_dir() {
            return Err(Error::NotFound(self.dataset_dir.clone()));
        }
        let calib = self.calib_file();
        if !calib.is_file() {
            return Err(Error::NotFound(calib));
        }
        if let Some(c) = self.range_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("range clip {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn calib_file(&self) -> PathBuf {
        self.calib_path.clone().unwrap_or_else(|| self.dataset_dir.join(CALIB_FILE))
    }

    /// Frontend settings with the toggles folded in.
    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig {
            use_wheel: self.wheel_factor,
            use_ground: self.ground_factor,
            ..self.pipeline.frontend
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset_dir={}", self.dataset_dir.display());
        let _ = writeln!(s, "calib_path={}", self.calib_file().display());
        let _ = writeln!(s, "output_dir={}", self.output_dir.display());
        let _ = writeln!(s, "loop_closure={}", self.loop_closure);
        let _ = writeln!(s, "wheel_factor={}", self.wheel_factor);
        let _ = writeln!(s, "ground_factor={}", self.ground_factor);
        let clip = self.range_clip.map_or_else(|| "none".to_string(), |c| c.to_string());
        let _ = writeln!(s, "range_clip={clip}");
        s.push_str(&self.pipeline.to_text());
        s
    }
}

/// Exit code for a library error: bad inputs are usage errors.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::NotFound(_) | Error::Format { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Drops returns beyond `clip` and lowers the scan's maximum range.
pub fn clip_ranges(data: &mut Dataset, clip: f64) {
    for scan in &mut data.scans {
        for r in &mut scan.ranges {
            if *r > clip {
                *r = f64::NAN;
            }
        }
        scan.range_max = scan.range_max.min(clip).max(scan.range_min + f64::EPSILON);
    }
}

pub fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut data = dataio::load_dataset_with_calib(&cfg.dataset_dir, &cfg.calib_file())?;
    if let Some(clip) = cfg.range_clip {
        clip_ranges(&mut data, clip);
    }
    Ok(data)
}

/// Runs the full pipeline on an already loaded dataset.
pub fn run_pipeline(data: &Dataset, cfg: &RunConfig) -> Result<RunOutput> {
    let p = &cfg.pipeline;
    let backend = Backend::new(p.loops, p.odom, cfg.loop_closure);
    run_dataset(data, cfg.frontend(), backend)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn max(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, f64::max)
}

/// Tracking and loop-search statistics as `key=value` lines.
pub fn run_stats(out: &RunOutput, duration: f64) -> String {
    let f = &out.frames;
    let b = &out.backend;
    let total_time: f64 = f.iter().map(|x| x.time).sum();
    let mut s = String::new();
    let _ = writeln!(s, "frames={}", f.len());
    let _ = writeln!(s, "init_attempts={}", out.init_attempts);
    let _ = writeln!(s, "degraded_frames={}", f.iter().filter(|x| x.degraded).count());
    let _ = writeln!(s, "lines_extracted_mean={:.3}", mean(f.iter().map(|x| x.lines as f64)));
    let _ = writeln!(s, "lines_matched_mean={:.3}", mean(f.iter().map(|x| x.matches as f64)));
    let _ = writeln!(s, "track_time_mean_ms={:.3}", 1e3 * mean(f.iter().map(|x| x.time)));
    let _ = writeln!(s, "track_time_max_ms={:.3}", 1e3 * max(f.iter().map(|x| x.time)));
    if total_time > 0.0 {
        let _ = writeln!(s, "realtime_factor={:.3}", duration / total_time);
    }
    let _ = writeln!(s, "keyframes={}", b.db.len());
    let _ = writeln!(s, "loops={}", b.loops.len());
    let _ = writeln!(s, "loop_search_mean_ms={:.3}", 1e3 * mean(b.detect_times.iter().copied()));
    let _ = writeln!(s, "loop_search_max_ms={:.3}", 1e3 * max(b.detect_times.iter().copied()));
    let sum = |g: fn(&DetectStats) -> usize| b.detect_stats.iter().map(g).sum::<usize>();
    let _ = writeln!(s, "loop_candidates={}", sum(|d| d.candidates));
    let _ = writeln!(s, "loop_after_filter={}", sum(|d| d.after_filter));
    let _ = writeln!(s, "loop_descriptor_matches={}", sum(|d| d.descriptor_matches));
    let _ = writeln!(s, "loop_icp_runs={}", sum(|d| d.icp_runs));
    s
}

fn frames_csv(out: &RunOutput) -> String {
    let mut s = String::from("stamp,lines,matches,degraded,time_ms\n");
    for f in &out.frames {
        let _ = writeln!(s, "{},{},{},{},{:.4}", f.stamp, f.lines, f.matches, f.degraded as u8, 1e3 * f.time);
    }
    s
}

pub const FRONTEND_TUM: &str = "frontend.tum";
pub const OPTIMIZED_TUM: &str = "optimized.tum";
pub const LOOPS_CSV: &str = "loops.csv";
pub const KEYFRAMES_TXT: &str = "keyframes.txt";
pub const MAP_PGM: &str = "map.pgm";
pub const FRAMES_CSV: &str = "frames.csv";
pub const STATS_TXT: &str = "stats.txt";
pub const CONFIG_TXT: &str = "config.txt";

/// Replays a dataset and writes every artifact into the output directory.
pub fn cmd_run(cfg: &RunConfig, w: &mut dyn Write) -> Result<u8> {
    writeln!(w, "{}", cfg.to_text())?;
    let data = load_run_dataset(cfg)?;
    let start = Instant::now();
    let out = run_pipeline(&data, cfg)?;
    let wall = start.elapsed().as_secs_f64();
    if out.initial_state.is_none() {
        writeln!(
            w,
            "initialization never succeeded ({} attempts over {} scans)",
            out.init_attempts,
            data.scans.len()
        )?;
        return Ok(EXIT_FAILURE);
    }
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_TXT), cfg.to_text())?;
    let frontend = out.frontend_trajectory();
    let optimized = out.optimized_trajectory();
    dataio::write_tum(&dir.join(FRONTEND_TUM), &frontend)?;
    dataio::write_tum(&dir.join(OPTIMIZED_TUM), &optimized)?;
    fs::write(dir.join(LOOPS_CSV), loopdetect::loops_to_csv(&out.backend.loops))?;
    fs::write(dir.join(KEYFRAMES_TXT), out.backend.db.to_text())?;
    fs::write(dir.join(FRAMES_CSV), frames_csv(&out))?;
    let map = out.build_map(cfg.pipeline.map);
    if !map.is_empty() {
        map.export(&dir.join(MAP_PGM))?;
    }
    let duration = match (data.scans.first(), data.scans.last()) {
        (Some(a), Some(b)) => b.stamp - a.stamp,
        _ => 0.0,
    };
    let mut stats = run_stats(&out, duration);
    let _ = writeln!(stats, "wall_time_s={wall:.3}");
    let gt_path = cfg.dataset_dir.join(TRUTH_FILE);
    if gt_path.is_file() {
        let gt = Trajectory::new(dataio::load_tum(&gt_path)?)?;
        for (name, traj) in [("frontend", frontend), ("optimized", optimized)] {
            let report = eval::evaluate(&Trajectory::new(traj)?, &gt, &cfg.pipeline.eval)?;
            let _ = writeln!(stats, "{name}_ape_rmse={}", report.ape.trans_rmse());
        }
    }
    fs::write(dir.join(STATS_TXT), &stats)?;
    w.write_all(stats.as_bytes())?;
    Ok(EXIT_OK)
}

/// Writes a scenario's dataset and ground truth.
pub fn cmd_simulate(scenario: &str, seed: u64, out_dir: &Path, w: &mut dyn Write) -> Result<u8> {
    let sc = simgen::scenario(scenario, seed)?;
    let out = simgen::simulate(&sc)?;
    simgen::export_dataset(&out, out_dir)?;
    writeln!(
        w,
        "{scenario} seed={seed}: {} scans, {} imu, {} wheel samples -> {}",
        out.dataset.scans.len(),
        out.dataset.imu.len(),
        out.dataset.wheel.len(),
        out_dir.display()
    )?;
    Ok(EXIT_OK)
}

/// Prints the APE/RPE report and checks the gates.
pub fn cmd_evaluate(
    est_path: &Path,
    gt_path: &Path,
    opts: &EvalOptions,
    gates: &[(String, f64)],
    csv_path: Option<&Path>,
    w: &mut dyn Write,
) -> Result<u8> {
    let est = Trajectory::new(dataio::load_tum(est_path)?)?;
    let gt = Trajectory::new(dataio::load_tum(gt_path)?)?;
    let report = eval::evaluate(&est, &gt, opts)?;
    w.write_all(report.to_text().as_bytes())?;
    if let Some(p) = csv_path {
        fs::write(p, report.to_csv())?;
    }
    let violated = report.violations(gates)?;
    for (key, value, limit) in &violated {
        writeln!(w, "gate violated: {key}={value} > {limit}")?;
    }
    Ok(if violated.is_empty() { EXIT_OK } else { EXIT_FAILURE })
}

/// Rasterizes a keyframe database at its stored poses.
pub fn cmd_export_map(keyframes_path: &Path, out_path: &Path, cfg: MapConfig, w: &mut dyn Write) -> Result<u8> {
    let records = loopdetect::load_keyframes(keyframes_path)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no keyframes", keyframes_path.display())));
    }
    let mut map = GridMap::new(cfg);
    for r in &records {
        map.integrate_scan(&r.pose, &r.points);
    }
    let meta = map.export(out_path)?;
    writeln!(w, "{} keyframes -> {} ({})", records.len(), out_path.display(), meta.display())?;
    Ok(EXIT_OK)
}

/// Query keyframe built from a single scan in its own LiDAR frame.
pub fn query_from_scan(scan: &dataio::LaserScan, cfg: &FrontendConfig) -> KeyframeRecord {
    let feats = extract_features(scan, &cfg.features);
    let pts: Vec<_> = scan_to_points(scan).iter().map(|p| p.xy).collect();
    KeyframeRecord {
        id: u64::MAX,
        stamp: scan.stamp,
        pose: Pose2::identity(),
        corners: feats.corners.iter().map(|c| c.position).collect(),
        points: decimate_points(&pts, cfg.point_spacing),
    }
}

/// Reads a query that is either a keyframe file (first record) or a scan CSV
/// (first scan).
pub fn load_query(path: &Path, cfg: &FrontendConfig) -> Result<KeyframeRecord> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let label = path.display().to_string();
    if text.trim_start().starts_with("keyframe") {
        let mut recs = loopdetect::parse_keyframes(&text, &label)?;
        if recs.is_empty() {
            return Err(Error::InvalidArgument(format!("{label} holds no keyframes")));
        }
        let mut q = recs.swap_remove(0);
        q.id = u64::MAX;
        q.pose = Pose2::identity();
        Ok(q)
    } else {
        let scans = dataio::parse_scans(&text, &label)?;
        let scan = scans
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{label} holds no scans")))?;
        Ok(query_from_scan(scan, cfg))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Query LiDAR pose in the map.
    pub pose: Pose2,
    pub constraint: LoopConstraint,
}

/// One global localization query against the whole database.
pub fn localize(db: &LoopDatabase, query: &KeyframeRecord, seed: u64) -> (Option<Localization>, DetectStats, Duration) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let (found, stats) = db.detect(query, false, &mut rng);
    let elapsed = start.elapsed();
    let loc = found.and_then(|c| {
        let from = db.get(c.from_id)?;
        Some(Localization {
            pose: from.pose.compose(&c.relative_pose),
            constraint: c,
        })
    });
    (loc, stats, elapsed)
}

pub fn cmd_localize(map_keyframes_path: &Path, query_path: &Path, cfg: &PipelineConfig, w: &mut dyn Write) -> Result<u8> {
    let records = loopdetect::load_keyframes(map_keyframes_path)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} holds no keyframes",
            map_keyframes_path.display()
        )));
    }
    let mut db = LoopDatabase::new(cfg.loops);
    for r in records {
        db.insert(r);
    }
    let query = load_query(query_path, &cfg.frontend)?;
    let (loc, stats, elapsed) = localize(&db, &query, cfg.loops.seed);
    writeln!(
        w,
        "query_corners={} candidates={} after_filter={} descriptor_matches={} icp_runs={}",
        query.corners.len(),
        stats.candidates,
        stats.after_filter,
        stats.descriptor_matches,
        stats.icp_runs
    )?;
    writeln!(w, "time_ms={:.3}", elapsed.as_secs_f64() * 1e3)?;
    match loc {
        Some(l) => {
            writeln!(
                w,
                "match keyframe={} x={} y={} yaw={} icp_rms={}",
                l.constraint.from_id, l.pose.xy.x, l.pose.xy.y, l.pose.yaw, l.constraint.post_icp_rms
            )?;
            Ok(EXIT_OK)
        }
        None => {
            writeln!(w, "no match")?;
            Ok(EXIT_FAILURE)
        }
    }
}
