//! Sensor stream ingestion: CSV scans, IMU and wheel odometry, plus the flat
//! `key=value` calibration file.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so an exported dataset reloads identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose3, RotVec};

pub const SCAN_FILE: &str = "scan.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const WHEEL_FILE: &str = "wheel.csv";
pub const CALIB_FILE: &str = "calib.txt";

const SCAN_HEADER: [&str; 7] = [
    "stamp",
    "angle_min",
    "angle_max",
    "angle_increment",
    "range_min",
    "range_max",
    "ranges",
];
const IMU_HEADER: [&str; 7] = ["stamp", "ax", "ay", "az", "gx", "gy", "gz"];
const WHEEL_HEADER: [&str; 7] = ["stamp", "x", "y", "z", "rx", "ry", "rz"];

/// Largest tolerated spacing between IMU samples inside a window.
pub const IMU_MAX_GAP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan {
    pub stamp: f64,
    pub angle_min: f64,
    pub angle_max: f64,
    pub angle_increment: f64,
    pub range_min: f64,
    pub range_max: f64,
    /// Meters; non-finite entries mean no return.
    pub ranges: Vec<f64>,
}

impl LaserScan {
    pub fn expected_len(angle_min: f64, angle_max: f64, angle_increment: f64) -> usize {
        ((angle_max - angle_min) / angle_increment).round() as usize + 1
    }

    pub fn beam_angle(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment
    }

    /// True when the beams close a full revolution.
    pub fn is_full_circle(&self) -> bool {
        let span = self.angle_increment * self.ranges.len() as f64;
        span >= 2.0 * std::f64::consts::PI - 0.5 * self.angle_increment
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.angle_increment > 0.0) || !(self.angle_max > self.angle_min) {
            return Err("bad angular limits".into());
        }
        let n = Self::expected_len(self.angle_min, self.angle_max, self.angle_increment);
        if n != self.ranges.len() {
            return Err(format!("expected {n} ranges, found {}", self.ranges.len()));
        }
        if !(self.range_min >= 0.0 && self.range_max > self.range_min) {
            return Err("bad range limits".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub stamp: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelOdomSample {
    pub stamp: f64,
    pub pose: Pose3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// m/s²/√Hz
    pub accel_density: f64,
    /// rad/s/√Hz
    pub gyro_density: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelSigma {
    pub d: f64,
    pub theta_d: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundSigma {
    pub z_m: f64,
    pub tilt_rad: f64,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// LiDAR pose in the chassis (wheel odometry) frame.
    pub T_base_lidar: Pose3,
    /// Chassis pose in the IMU body frame.
    pub T_imu_base: Pose3,
    pub gravity_magnitude: f64,
    pub imu_noise: ImuNoise,
    pub wheel_sigma: WheelSigma,
    pub ground_sigma: GroundSigma,
    pub line_sigma: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            T_base_lidar: Pose3::from_translation(Vector3::new(0.1, 0.0, 0.2)),
            T_imu_base: Pose3::from_translation(Vector3::new(-0.05, 0.02, -0.1)),
            gravity_magnitude: 9.81,
            imu_noise: ImuNoise {
                accel_density: 0.02,
                gyro_density: 0.002,
                accel_bias_walk: 0.002,
                gyro_bias_walk: 0.0002,
            },
            wheel_sigma: WheelSigma {
                d: 0.05,
                theta_d: 0.05,
                theta: 0.05,
            },
            ground_sigma: GroundSigma {
                z_m: 0.001,
                tilt_rad: 0.001,
            },
            line_sigma: 0.02,
        }
    }
}

impl Calibration {
    /// LiDAR pose in the IMU body frame.
    pub fn imu_lidar(&self) -> Pose3 {
        self.T_imu_base.compose(&self.T_base_lidar)
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.imu_noise.accel_density,
            self.imu_noise.gyro_density,
            self.imu_noise.accel_bias_walk,
            self.imu_noise.gyro_bias_walk,
            self.wheel_sigma.d,
            self.wheel_sigma.theta_d,
            self.wheel_sigma.theta,
            self.ground_sigma.z_m,
            self.ground_sigma.tilt_rad,
            self.line_sigma,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("calibration sigmas must be positive".into()));
        }
        if !(9.0..=10.5).contains(&self.gravity_magnitude) {
            return Err(Error::InvalidArgument(format!(
                "gravity magnitude {} outside [9.0, 10.5]",
                self.gravity_magnitude
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let v3 = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("T_base_lidar.xyz", v3(&self.T_base_lidar.translation));
        kv("T_base_lidar.rotvec", v3(&self.T_base_lidar.rotvec().0));
        kv("T_imu_base.xyz", v3(&self.T_imu_base.translation));
        kv("T_imu_base.rotvec", v3(&self.T_imu_base.rotvec().0));
        kv("gravity_magnitude", self.gravity_magnitude.to_string());
        kv("imu_noise.accel_density", self.imu_noise.accel_density.to_string());
        kv("imu_noise.gyro_density", self.imu_noise.gyro_density.to_string());
        kv("imu_noise.accel_bias_walk", self.imu_noise.accel_bias_walk.to_string());
        kv("imu_noise.gyro_bias_walk", self.imu_noise.gyro_bias_walk.to_string());
        kv("wheel_sigma.d", self.wheel_sigma.d.to_string());
        kv("wheel_sigma.theta_d", self.wheel_sigma.theta_d.to_string());
        kv("wheel_sigma.theta", self.wheel_sigma.theta.to_string());
        kv("ground_sigma.z_m", self.ground_sigma.z_m.to_string());
        kv("ground_sigma.tilt_rad", self.ground_sigma.tilt_rad.to_string());
        kv("line_sigma", self.line_sigma.to_string());
        out
    }

    /// Parses the flat `key=value` format. Unknown keys are rejected, missing
    /// keys keep their defaults.
    pub fn parse(text: &str, file: &str) -> Result<Calibration> {
        let mut cal = Calibration::default();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx as u64 + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(file, line_no, "expected key=value"))?;
            let key = key.trim();
            let nums: Vec<f64> = value
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(file, line_no, format!("{key}: {e}")))?;
            let scalar = || -> Result<f64> {
                match nums.as_slice() {
                    [x] => Ok(*x),
                    _ => Err(Error::format(file, line_no, format!("{key} expects one number"))),
                }
            };
            let vec3 = || -> Result<Vector3<f64>> {
                match nums.as_slice() {
                    [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
                    _ => Err(Error::format(file, line_no, format!("{key} expects three numbers"))),
                }
            };
            match key {
                "T_base_lidar.xyz" => cal.T_base_lidar.translation = vec3()?,
                "T_base_lidar.rotvec" => cal.T_base_lidar.rotation = RotVec::from_vector(vec3()?).to_matrix(),
                "T_imu_base.xyz" => cal.T_imu_base.translation = vec3()?,
                "T_imu_base.rotvec" => cal.T_imu_base.rotation = RotVec::from_vector(vec3()?).to_matrix(),
                "gravity_magnitude" => cal.gravity_magnitude = scalar()?,
                "imu_noise.accel_density" => cal.imu_noise.accel_density = scalar()?,
                "imu_noise.gyro_density" => cal.imu_noise.gyro_density = scalar()?,
                "imu_noise.accel_bias_walk" => cal.imu_noise.accel_bias_walk = scalar()?,
                "imu_noise.gyro_bias_walk" => cal.imu_noise.gyro_bias_walk = scalar()?,
                "wheel_sigma.d" => cal.wheel_sigma.d = scalar()?,
                "wheel_sigma.theta_d" => cal.wheel_sigma.theta_d = scalar()?,
                "wheel_sigma.theta" => cal.wheel_sigma.theta = scalar()?,
                "ground_sigma.z_m" => cal.ground_sigma.z_m = scalar()?,
                "ground_sigma.tilt_rad" => cal.ground_sigma.tilt_rad = scalar()?,
                "line_sigma" => cal.line_sigma = scalar()?,
                other => return Err(Error::format(file, line_no, format!("unknown key {other}"))),
            }
            seen.insert(key.to_string(), line_no);
        }
        cal.validate()?;
        Ok(cal)
    }

    pub fn load(path: &Path) -> Result<Calibration> {
        let text = read_file(path)?;
        Calibration::parse(&text, &file_label(path))
    }
}

/// All three streams plus calibration, sorted by stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scans: Vec<LaserScan>,
    pub imu: Vec<ImuSample>,
    pub wheel: Vec<WheelOdomSample>,
    pub calib: Calibration,
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_file(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

fn csv_rows(text: &str, file: &str, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(file, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(Error::format(file, 1, format!("expected header {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::format(file, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse_num(s: &str, file: &str, line: u64, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::format(file, line, format!("bad {what} '{s}'")))
}

fn check_monotone(prev: Option<f64>, stamp: f64, file: &str, line: u64) -> Result<()> {
    if !stamp.is_finite() {
        return Err(Error::format(file, line, "non-finite stamp"));
    }
    if let Some(p) = prev {
        if stamp <= p {
            return Err(Error::format(file, line, "non-monotone stamp"));
        }
    }
    Ok(())
}

pub fn parse_scans(text: &str, file: &str) -> Result<Vec<LaserScan>> {
    let mut out: Vec<LaserScan> = Vec::new();
    for (line, row) in csv_rows(text, file, &SCAN_HEADER)? {
        if row.len() != SCAN_HEADER.len() {
            return Err(Error::format(file, line, "wrong field count"));
        }
        let f = |i: usize, what: &str| parse_num(&row[i], file, line, what);
        let ranges = if row[6].trim().is_empty() {
            Vec::new()
        } else {
            row[6]
                .split(';')
                .map(|r| parse_num(r, file, line, "range"))
                .collect::<Result<Vec<_>>>()?
        };
        let scan = LaserScan {
            stamp: f(0, "stamp")?,
            angle_min: f(1, "angle_min")?,
            angle_max: f(2, "angle_max")?,
            angle_increment: f(3, "angle_increment")?,
            range_min: f(4, "range_min")?,
            range_max: f(5, "range_max")?,
            ranges,
        };
        scan.validate().map_err(|m| Error::format(file, line, m))?;
        check_monotone(out.last().map(|s| s.stamp), scan.stamp, file, line)?;
        out.push(scan);
    }
    Ok(out)
}

pub fn parse_imu(text: &str, file: &str) -> Result<Vec<ImuSample>> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, row) in csv_rows(text, file, &IMU_HEADER)? {
        if row.len() != 7 {
            return Err(Error::format(file, line, "wrong field count"));
        }
        let v: Vec<f64> = row
            .iter()
            .map(|s| parse_num(s, file, line, "value"))
            .collect::<Result<_>>()?;
        check_monotone(out.last().map(|s| s.stamp), v[0], file, line)?;
        out.push(ImuSample {
            stamp: v[0],
            accel: Vector3::new(v[1], v[2], v[3]),
            gyro: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

pub fn parse_wheel(text: &str, file: &str) -> Result<Vec<WheelOdomSample>> {
    let mut out: Vec<WheelOdomSample> = Vec::new();
    for (line, row) in csv_rows(text, file, &WHEEL_HEADER)? {
        if row.len() != 7 {
            return Err(Error::format(file, line, "wrong field count"));
        }
        let v: Vec<f64> = row
            .iter()
            .map(|s| parse_num(s, file, line, "value"))
            .collect::<Result<_>>()?;
        check_monotone(out.last().map(|s| s.stamp), v[0], file, line)?;
        out.push(WheelOdomSample {
            stamp: v[0],
            pose: Pose3::new(RotVec::new(v[4], v[5], v[6]), Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

pub fn scans_to_csv(scans: &[LaserScan]) -> String {
    let mut s = SCAN_HEADER.join(",");
    s.push('\n');
    for sc in scans {
        let ranges: Vec<String> = sc.ranges.iter().map(|r| r.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            sc.stamp,
            sc.angle_min,
            sc.angle_max,
            sc.angle_increment,
            sc.range_min,
            sc.range_max,
            ranges.join(";")
        ));
    }
    s
}

pub fn imu_to_csv(imu: &[ImuSample]) -> String {
    let mut s = IMU_HEADER.join(",");
    s.push('\n');
    for m in imu {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.stamp, m.accel.x, m.accel.y, m.accel.z, m.gyro.x, m.gyro.y, m.gyro.z
        ));
    }
    s
}

/// Wheel poses are written as translation + rotation vector.
pub fn wheel_to_csv(wheel: &[WheelOdomSample]) -> String {
    let mut s = WHEEL_HEADER.join(",");
    s.push('\n');
    for w in wheel {
        let r = w.pose.rotvec().0;
        let t = w.pose.translation;
        s.push_str(&format!("{},{},{},{},{},{},{}\n", w.stamp, t.x, t.y, t.z, r.x, r.y, r.z));
    }
    s
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset_with_calib(dir, &dir.join(CALIB_FILE))
}

/// Streams from `dir`, calibration from `calib`.
pub fn load_dataset_with_calib(dir: &Path, calib: &Path) -> Result<Dataset> {
    let read = |name: &str| read_file(&dir.join(name));
    let scans = parse_scans(&read(SCAN_FILE)?, SCAN_FILE)?;
    let imu = parse_imu(&read(IMU_FILE)?, IMU_FILE)?;
    let wheel = parse_wheel(&read(WHEEL_FILE)?, WHEEL_FILE)?;
    let calib = Calibration::parse(&read_file(calib)?, &file_label(calib))?;
    Ok(Dataset {
        scans,
        imu,
        wheel,
        calib,
    })
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let write = |name: &str, body: String| -> Result<()> {
        let mut f = fs::File::create(dir.join(name))?;
        f.write_all(body.as_bytes())?;
        Ok(())
    };
    write(SCAN_FILE, scans_to_csv(&data.scans))?;
    write(IMU_FILE, imu_to_csv(&data.imu))?;
    write(WHEEL_FILE, wheel_to_csv(&data.wheel))?;
    write(CALIB_FILE, data.calib.to_text())?;
    Ok(())
}

/// A scan return in the LiDAR frame with its original beam index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub xy: Vector2<f64>,
    pub beam: usize,
}

pub fn scan_to_points(scan: &LaserScan) -> Vec<ScanPoint> {
    scan.ranges
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_finite() && **r >= scan.range_min && **r <= scan.range_max)
        .map(|(i, &r)| {
            let (s, c) = scan.beam_angle(i).sin_cos();
            ScanPoint {
                xy: Vector2::new(r * c, r * s),
                beam: i,
            }
        })
        .collect()
}

const STAMP_EPS: f64 = 1e-9;

/// Odometry-frame pose at `t`, interpolated between bracketing samples.
pub fn wheel_pose_at(stream: &[WheelOdomSample], t: f64) -> Result<Pose3> {
    let (first, last) = match (stream.first(), stream.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::OutOfRange("empty wheel stream".into())),
    };
    if t < first.stamp - STAMP_EPS || t > last.stamp + STAMP_EPS {
        return Err(Error::OutOfRange(format!(
            "t={t} outside wheel coverage [{}, {}]",
            first.stamp, last.stamp
        )));
    }
    let idx = stream.partition_point(|s| s.stamp < t);
    if idx < stream.len() && (stream[idx].stamp - t).abs() <= STAMP_EPS {
        return Ok(stream[idx].pose);
    }
    if idx == 0 {
        return Ok(first.pose);
    }
    if idx >= stream.len() {
        return Ok(last.pose);
    }
    let (a, b) = (&stream[idx - 1], &stream[idx]);
    let s = (t - a.stamp) / (b.stamp - a.stamp);
    Ok(a.pose.interpolate(&b.pose, s))
}

fn lerp_imu(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let s = (t - a.stamp) / (b.stamp - a.stamp);
    ImuSample {
        stamp: t,
        accel: a.accel + (b.accel - a.accel) * s,
        gyro: a.gyro + (b.gyro - a.gyro) * s,
    }
}

/// Samples covering `[t0, t1]` with interpolated boundary samples.
pub fn imu_window(stream: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("empty IMU window [{t0}, {t1}]")));
    }
    let (first, last) = match (stream.first(), stream.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::OutOfRange("empty IMU stream".into())),
    };
    if t0 < first.stamp - STAMP_EPS || t1 > last.stamp + STAMP_EPS {
        return Err(Error::OutOfRange(format!(
            "[{t0}, {t1}] outside IMU coverage [{}, {}]",
            first.stamp, last.stamp
        )));
    }
    let sample_at = |t: f64| -> ImuSample {
        let idx = stream.partition_point(|s| s.stamp < t);
        if idx < stream.len() && (stream[idx].stamp - t).abs() <= STAMP_EPS {
            let mut s = stream[idx];
            s.stamp = t;
            return s;
        }
        if idx == 0 {
            return ImuSample { stamp: t, ..*first };
        }
        if idx >= stream.len() {
            return ImuSample { stamp: t, ..*last };
        }
        lerp_imu(&stream[idx - 1], &stream[idx], t)
    };
    let mut out = vec![sample_at(t0)];
    let lo = stream.partition_point(|s| s.stamp <= t0 + STAMP_EPS);
    let hi = stream.partition_point(|s| s.stamp < t1 - STAMP_EPS);
    out.extend_from_slice(&stream[lo..hi.max(lo)]);
    out.push(sample_at(t1));
    // gaps are judged against the raw stream around the window
    let raw_lo = lo.saturating_sub(1);
    let raw_hi = (hi + 1).min(stream.len());
    for w in stream[raw_lo..raw_hi].windows(2) {
        let gap = w[1].stamp - w[0].stamp;
        if gap > IMU_MAX_GAP && w[1].stamp > t0 && w[0].stamp < t1 {
            return Err(Error::DataGap { at: w[0].stamp, gap });
        }
    }
    Ok(out)
}

/// `stamp tx ty tz qx qy qz qw` lines.
pub fn tum_to_string(poses: &[(f64, Pose3)]) -> String {
    let mut s = String::new();
    for (t, p) in poses {
        let q = p.quaternion_xyzw();
        let v = p.translation;
        s.push_str(&format!("{} {} {} {} {} {} {} {}\n", t, v.x, v.y, v.z, q[0], q[1], q[2], q[3]));
    }
    s
}

pub fn parse_tum(text: &str, file: &str) -> Result<Vec<(f64, Pose3)>> {
    let mut out: Vec<(f64, Pose3)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_num(t, file, line_no, "value"))
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(Error::format(file, line_no, format!("expected 8 fields, found {}", v.len())));
        }
        check_monotone(out.last().map(|p| p.0), v[0], file, line_no)?;
        let q = [v[4], v[5], v[6], v[7]];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::format(file, line_no, "quaternion is not unit length"));
        }
        out.push((v[0], Pose3::from_quaternion_xyzw(Vector3::new(v[1], v[2], v[3]), q)));
    }
    Ok(out)
}

pub fn write_tum(path: &Path, poses: &[(f64, Pose3)]) -> Result<()> {
    fs::write(path, tum_to_string(poses))?;
    Ok(())
}

pub fn load_tum(path: &Path) -> Result<Vec<(f64, Pose3)>> {
    parse_tum(&read_file(path)?, &file_label(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    const SCAN_FIXTURE: &str = "stamp,angle_min,angle_max,angle_increment,range_min,range_max,ranges
0.1,0,1,0.5,0.1,10,1;2;nan
0.2,0,1,0.5,0.1,10,1.5;2.5;3.5
0.3,0,1,0.5,0.1,10,inf;0.05;4
";
    const IMU_FIXTURE: &str = "stamp,ax,ay,az,gx,gy,gz
0.000,0.1,0.2,9.81,0.01,0.02,0.03
0.005,0.2,0.3,9.80,0.02,0.03,0.04
0.010,0.3,0.4,9.79,0.03,0.04,0.05
";
    const WHEEL_FIXTURE: &str = "stamp,x,y,z,rx,ry,rz
0.00,0,0,0,0,0,0
0.02,0.01,0,0,0,0,0.001
0.04,0.02,0.0005,0,0,0,0.002
";

    #[test]
    fn parses_fixture_rows() {
        let scans = parse_scans(SCAN_FIXTURE, "scan.csv").unwrap();
        assert_eq!(scans.len(), 3);
        assert_eq!(scans[1].ranges, vec![1.5, 2.5, 3.5]);
        assert!(scans[0].ranges[2].is_nan());
        assert_eq!(scans[2].ranges[0], f64::INFINITY);
        let imu = parse_imu(IMU_FIXTURE, "imu.csv").unwrap();
        assert_eq!(imu.len(), 3);
        assert_eq!(imu[1].accel, Vector3::new(0.2, 0.3, 9.80));
        assert_eq!(imu[2].gyro, Vector3::new(0.03, 0.04, 0.05));
        let wheel = parse_wheel(WHEEL_FIXTURE, "wheel.csv").unwrap();
        assert_eq!(wheel.len(), 3);
        assert_eq!(wheel[2].pose.translation, Vector3::new(0.02, 0.0005, 0.0));
        assert_relative_eq!(wheel[2].pose.rotvec().0.z, 0.002, epsilon = 1e-15);
    }

    #[test]
    fn reports_non_monotone_row() {
        let mut text = String::from("stamp,ax,ay,az,gx,gy,gz\n");
        for (i, t) in [0.0, 0.01, 0.02, 0.03, 0.04, 0.035, 0.05].iter().enumerate() {
            let _ = i;
            text.push_str(&format!("{t},0,0,9.8,0,0,0\n"));
        }
        let err = parse_imu(&text, "imu.csv").unwrap_err().to_string();
        assert!(err.contains("imu.csv:7 non-monotone"), "{err}");
    }

    #[test]
    fn rejects_bad_header_and_missing_files() {
        assert!(parse_imu("t,ax\n", "imu.csv").is_err());
        let dir = tempfile::tempdir().unwrap();
        match load_dataset(dir.path()) {
            Err(Error::NotFound(p)) => assert!(p.ends_with(SCAN_FILE)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_beam_count() {
        let text = "stamp,angle_min,angle_max,angle_increment,range_min,range_max,ranges\n0,0,1,0.5,0.1,10,1;2\n";
        let err = parse_scans(text, "scan.csv").unwrap_err().to_string();
        assert!(err.starts_with("scan.csv:2"), "{err}");
    }

    #[test]
    fn calibration_round_trip() {
        let mut cal = Calibration::default();
        cal.T_base_lidar = Pose3::new(RotVec::new(0.0, 0.0, 0.3), Vector3::new(0.2, -0.1, 0.3));
        cal.line_sigma = 0.013;
        let text = cal.to_text();
        let back = Calibration::parse(&text, "calib.txt").unwrap();
        assert_eq!(back.to_text(), text);
        assert!((back.T_base_lidar.rotation - cal.T_base_lidar.rotation).abs().max() < 1e-15);
        assert!(Calibration::parse("gravity_magnitude=12\n", "c").is_err());
        assert!(Calibration::parse("line_sigma=0\n", "c").is_err());
        assert!(Calibration::parse("bogus=1\n", "c").is_err());
    }

    #[test]
    fn dataset_write_read_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset {
            scans: parse_scans(SCAN_FIXTURE, "scan.csv").unwrap(),
            imu: vec![
                ImuSample {
                    stamp: 0.1 + 0.2,
                    accel: Vector3::new(1.0 / 3.0, -2.0e-17, 9.81),
                    gyro: Vector3::new(PI, 1e-300, -0.0),
                },
                ImuSample {
                    stamp: 0.4,
                    accel: Vector3::new(0.7, 0.1, 9.8),
                    gyro: Vector3::zeros(),
                },
            ],
            wheel: vec![WheelOdomSample {
                stamp: 1.0 / 7.0,
                pose: Pose3::from_translation(Vector3::new(0.1, 0.2, 0.0)),
            }],
            calib: Calibration::default(),
        };
        write_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.imu, data.imu);
        assert_eq!(back.wheel, data.wheel);
        assert_eq!(back.scans.len(), data.scans.len());
        for (a, b) in back.scans.iter().zip(&data.scans) {
            assert_eq!(a.stamp, b.stamp);
            for (x, y) in a.ranges.iter().zip(&b.ranges) {
                assert!(x == y || (x.is_nan() && y.is_nan()));
            }
        }
    }

    #[test]
    fn tum_round_trip() {
        let poses = vec![
            (0.5, Pose3::new(RotVec::new(0.1, -0.2, 2.0), Vector3::new(1.0, 2.0, 3.0))),
            (0.75, Pose3::identity()),
        ];
        let back = parse_tum(&tum_to_string(&poses), "gt.tum").unwrap();
        for (a, b) in back.iter().zip(&poses) {
            assert_eq!(a.0, b.0);
            assert!((a.1.rotation - b.1.rotation).abs().max() < 1e-12);
            assert_eq!(a.1.translation, b.1.translation);
        }
        assert!(parse_tum("1 2 3\n", "gt.tum").is_err());
        assert!(parse_tum("1 0 0 0 0 0 0 2\n", "gt.tum").is_err());
    }

    #[test]
    fn scan_points_basic() {
        let scan = LaserScan {
            stamp: 0.0,
            angle_min: 0.0,
            angle_max: FRAC_PI_4,
            angle_increment: FRAC_PI_4,
            range_min: 0.1,
            range_max: 10.0,
            ranges: vec![2.0, 2f64.sqrt()],
        };
        let pts = scan_to_points(&scan);
        assert_eq!(pts[0].xy, Vector2::new(2.0, 0.0));
        assert_relative_eq!(pts[1].xy, Vector2::new(1.0, 1.0), epsilon = 1e-12);
        assert_eq!(pts[1].beam, 1);
    }

    #[test]
    fn scan_points_drop_invalid_and_keep_order() {
        let scan = LaserScan {
            stamp: 0.0,
            angle_min: -1.0,
            angle_max: 1.0,
            angle_increment: 0.5,
            range_min: 0.2,
            range_max: 5.0,
            ranges: vec![1.0, f64::NAN, 0.1, 6.0, 3.0],
        };
        let pts = scan_to_points(&scan);
        let beams: Vec<usize> = pts.iter().map(|p| p.beam).collect();
        assert_eq!(beams, vec![0, 4]);
    }

    #[test]
    fn wheel_interpolation() {
        let stream = vec![
            WheelOdomSample {
                stamp: 0.0,
                pose: Pose3::identity(),
            },
            WheelOdomSample {
                stamp: 1.0,
                pose: Pose3::new(RotVec::new(0.0, 0.0, FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0)),
            },
        ];
        assert_eq!(wheel_pose_at(&stream, 1.0).unwrap(), stream[1].pose);
        let mid = wheel_pose_at(&stream, 0.5).unwrap();
        assert_relative_eq!(mid.translation, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-15);
        // geodesic oracle: exp(½·log(R0ᵀR1))
        assert_relative_eq!(mid.rotvec().0, Vector3::new(0.0, 0.0, FRAC_PI_4), epsilon = 1e-12);
        assert!(matches!(wheel_pose_at(&stream, 1.5), Err(Error::OutOfRange(_))));
    }

    fn constant_rate_stream(n: usize, dt: f64) -> Vec<ImuSample> {
        (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                ImuSample {
                    stamp: t,
                    accel: Vector3::new(t.sin(), 1.0 + t, 9.8),
                    gyro: Vector3::new(0.0, 0.1 * t, t.cos()),
                }
            })
            .collect()
    }

    fn trapezoid(samples: &[ImuSample]) -> Vector3<f64> {
        samples
            .windows(2)
            .map(|w| (w[0].gyro + w[1].gyro) * 0.5 * (w[1].stamp - w[0].stamp))
            .sum()
    }

    #[test]
    fn imu_window_aligned_and_interpolated() {
        let stream = constant_rate_stream(100, 0.01);
        let w = imu_window(&stream, 0.1, 0.2).unwrap();
        assert_eq!(w.len(), 11);
        assert_eq!(w[0].stamp, 0.1);
        assert_eq!(w[10].stamp, 0.2);
        assert_eq!(&w[1..10], &stream[11..20]);
        let w = imu_window(&stream, 0.105, 0.2).unwrap();
        assert_eq!(w[0].stamp, 0.105);
        let expect = (stream[10].accel + stream[11].accel) * 0.5;
        assert_relative_eq!(w[0].accel, expect, epsilon = 1e-12);
        assert_eq!(w[1], stream[11]);
    }

    #[test]
    fn imu_window_is_additive() {
        let stream = constant_rate_stream(300, 0.005);
        let mut rng_state = 17u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let t0 = next() * 0.5;
            let t1 = t0 + 0.2 + next() * 0.7;
            let tm = t0 + (t1 - t0) * next().clamp(0.05, 0.95);
            let whole = trapezoid(&imu_window(&stream, t0, t1).unwrap());
            let parts = trapezoid(&imu_window(&stream, t0, tm).unwrap()) + trapezoid(&imu_window(&stream, tm, t1).unwrap());
            assert!((whole - parts).norm() < 1e-12);
        }
    }

    #[test]
    fn imu_window_detects_gap() {
        let mut stream = constant_rate_stream(100, 0.01);
        stream.retain(|s| !(s.stamp > 0.3 && s.stamp < 0.45));
        assert!(matches!(imu_window(&stream, 0.2, 0.6), Err(Error::DataGap { .. })));
        assert!(imu_window(&stream, 0.5, 0.6).is_ok());
        assert!(matches!(imu_window(&stream, 0.5, 2.0), Err(Error::OutOfRange(_))));
    }
}
