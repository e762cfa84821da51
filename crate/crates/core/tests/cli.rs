use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use liwslam::cli::{self, RunConfig};
use liwslam::dataio::{load_dataset, Dataset};
use liwslam::geometry::{wrap_angle, Pose2};
use liwslam::loopdetect::{keyframes_to_text, KeyframeRecord, LoopConfig};
use liwslam::simgen::{scenario, simulate, SimOutput};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn liwslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liwslam")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate_into(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let d = dir.join(format!("{name}_{seed}"));
    let o = liwslam(&["simulate", name, "--seed", &seed.to_string(), "-o", p(&d)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    d
}

fn stat(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse()
        .unwrap()
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        assert!(liwslam(&["simulate", "square_loop", "--seed", "7", "-o", p(d)]).status.success());
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 5);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = liwslam(&["simulate", "moon_base", "-o", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corridor_scans_never_exceed_three_meters() {
    let tmp = tempfile::tempdir().unwrap();
    let d = simulate_into(tmp.path(), "corridor_clip", 0);
    let data: Dataset = load_dataset(&d).unwrap();
    assert!(!data.scans.is_empty());
    for s in &data.scans {
        assert!(s.range_max <= 3.0);
        assert!(s.ranges.iter().filter(|r| r.is_finite()).all(|r| *r <= 3.0));
    }
}

#[test]
fn run_writes_artifacts_deterministically_and_loops_help() {
    let tmp = tempfile::tempdir().unwrap();
    let d = simulate_into(tmp.path(), "square_loop", 0);
    let (a, b) = (tmp.path().join("out_a"), tmp.path().join("out_b"));
    let oa = liwslam(&["run", p(&d), "-o", p(&a)]);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    let text = stdout(&oa);
    assert!(text.contains("frontend.window=5"), "config not printed");
    for f in [
        cli::FRONTEND_TUM,
        cli::OPTIMIZED_TUM,
        cli::LOOPS_CSV,
        cli::KEYFRAMES_TXT,
        cli::MAP_PGM,
        "map.meta",
        cli::FRAMES_CSV,
        cli::STATS_TXT,
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert!(fs::read(a.join(cli::MAP_PGM)).unwrap().starts_with(b"P5\n"));
    let stats = fs::read_to_string(a.join(cli::STATS_TXT)).unwrap();
    assert!(stat(&stats, "loops") >= 1.0);
    assert!(stat(&stats, "optimized_ape_rmse") < stat(&stats, "frontend_ape_rmse"));

    assert!(liwslam(&["run", p(&d), "-o", p(&b)]).status.success());
    for f in [cli::FRONTEND_TUM, cli::OPTIMIZED_TUM, cli::LOOPS_CSV, cli::KEYFRAMES_TXT] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn no_loop_leaves_the_frontend_trajectory_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let d = simulate_into(tmp.path(), "square_loop", 1);
    let out = tmp.path().join("out");
    assert!(liwslam(&["run", p(&d), "-o", p(&out), "--no-loop"]).status.success());
    let loops = fs::read_to_string(out.join(cli::LOOPS_CSV)).unwrap();
    assert_eq!(loops.lines().count(), 1, "only the header");
    assert_eq!(
        fs::read(out.join(cli::FRONTEND_TUM)).unwrap(),
        fs::read(out.join(cli::OPTIMIZED_TUM)).unwrap()
    );
}

#[test]
fn missing_inputs_and_bad_overrides_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = simulate_into(tmp.path(), "two_rooms", 0);
    let out = tmp.path().join("out");
    let o = liwslam(&["run", p(&d), "-o", p(&out), "--calib", "/nonexistent/calib.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("calib.txt"));
    fs::remove_file(d.join("calib.txt")).unwrap();
    assert_eq!(liwslam(&["run", p(&d), "-o", p(&out)]).status.code(), Some(2));
    let o = liwslam(&["run", p(&d), "-o", p(&out), "--set", "frontend.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn evaluate_reports_and_gates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = simulate_into(tmp.path(), "two_rooms", 0);
    let gt = d.join("gt.tum");
    let csv = tmp.path().join("report.csv");
    let o = liwslam(&["evaluate", p(&gt), p(&gt), "--gate", "ape=0.05", "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for stat_name in ["max", "mean", "median", "min", "rmse", "sse", "std"] {
        let key = format!("rpe.trans.{stat_name}");
        assert!(stat(&text, &key).abs() < 1e-9, "{key}");
        assert!(stat(&text, &format!("ape.trans.{stat_name}")).abs() < 1e-9);
    }
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 2);

    // Shift the estimate by 10 cm in x without alignment.
    let shifted: String = fs::read_to_string(&gt)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f: Vec<f64> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
            f[1] += 0.1;
            f.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n"
        })
        .collect();
    let est = tmp.path().join("est.tum");
    fs::write(&est, shifted).unwrap();
    let o = liwslam(&["evaluate", p(&est), p(&gt), "--gate", "ape=0.05", "--set", "eval.align=false"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("gate violated: ape="));

    let far = tmp.path().join("far.tum");
    fs::write(&far, "1000.0 0 0 0 0 0 0 1\n").unwrap();
    assert_ne!(liwslam(&["evaluate", p(&far), p(&gt)]).status.code(), Some(0));
}

fn lidar_truth(out: &SimOutput, stamp: f64) -> Pose2 {
    out.scan_truth
        .iter()
        .find(|s| (s.stamp - stamp).abs() < 1e-9)
        .unwrap()
        .lidar
        .to_pose2()
}

#[test]
fn localize_finds_revisits_and_rejects_strangers() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(&scenario("two_rooms", 0).unwrap()).unwrap();
    let run = cli::run_pipeline(&sim.dataset, &RunConfig::new(tmp.path(), tmp.path())).unwrap();
    let cfg = LoopConfig::default();
    let records: Vec<&KeyframeRecord> = run.keyframes();
    let db_path = tmp.path().join("db.txt");
    let query_path = tmp.path().join("query.txt");

    // Self query against the full database.
    fs::write(&db_path, keyframes_to_text(records.iter().copied())).unwrap();
    let q = records[records.len() / 2..]
        .iter()
        .copied()
        .find(|r| r.corners.len() >= cfg.t_min + 2)
        .unwrap();
    fs::write(&query_path, keyframes_to_text([q].into_iter())).unwrap();
    let o = liwslam(&["localize", p(&db_path), p(&query_path)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("match")).unwrap().to_string();
    let field = |k: &str| -> f64 {
        line.split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((Vector2::new(field("x"), field("y")) - q.pose.xy).norm() < 0.05);

    // Revisit query against keyframes recorded before it.
    let revisit = run.backend.loops.first().expect("two_rooms closes a loop");
    let q = run.backend.db.get(revisit.to_id).unwrap();
    let older: Vec<&KeyframeRecord> = records
        .iter()
        .copied()
        .filter(|r| r.id + cfg.exclusion_window as u64 <= q.id)
        .collect();
    fs::write(&db_path, keyframes_to_text(older.iter().copied())).unwrap();
    fs::write(&query_path, keyframes_to_text([q].into_iter())).unwrap();
    let o = liwslam(&["localize", p(&db_path), p(&query_path)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("match")).unwrap().to_string();
    let num = |k: &str| -> f64 {
        line.split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let from = run.backend.db.get(num("keyframe") as u64).unwrap();
    let est = from.pose.inverse().compose(&Pose2::new(num("yaw"), num("x"), num("y")));
    let truth = lidar_truth(&sim, from.stamp).inverse().compose(&lidar_truth(&sim, q.stamp));
    assert!((est.xy - truth.xy).norm() < cfg.d_res, "{est:?} vs {truth:?}");
    assert!(wrap_angle(est.yaw - truth.yaw).abs() < cfg.a_res);

    // Random corners and points match nothing.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pts = || -> Vec<Vector2<f64>> {
        (0..300)
            .map(|_| Vector2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)))
            .collect()
    };
    let stranger = KeyframeRecord {
        id: 0,
        stamp: 0.0,
        pose: Pose2::identity(),
        corners: pts()[..10].to_vec(),
        points: pts(),
    };
    fs::write(&query_path, keyframes_to_text([&stranger].into_iter())).unwrap();
    let o = liwslam(&["localize", p(&db_path), p(&query_path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("no match"));

    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert_eq!(liwslam(&["localize", p(&empty), p(&query_path)]).status.code(), Some(2));

    // The database also rebuilds a map.
    let map = tmp.path().join("m.pgm");
    fs::write(&db_path, keyframes_to_text(records.iter().copied())).unwrap();
    assert!(liwslam(&["export-map", p(&db_path), "-o", p(&map)]).status.success());
    assert!(fs::read(&map).unwrap().starts_with(b"P5\n"));
    assert!(tmp.path().join("m.meta").is_file());
}
