//! Planar pose graph over keyframes with odometry chain and loop edges.

use std::sync::mpsc;
use std::thread;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2};
use crate::loopdetect::{DetectStats, KeyframeRecord, LoopConfig, LoopConstraint, LoopDatabase};
use crate::solver::{self, Factor, Manifold, Problem, ResidualBlock, SolverOptions};

/// Odometry edge noise: `σ_xy = base_xy + per_m·dist`, `σ_yaw = base_yaw + per_rad·|Δyaw|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdomNoise {
    pub base_xy: f64,
    pub xy_per_m: f64,
    pub base_yaw: f64,
    pub yaw_per_rad: f64,
}

impl Default for OdomNoise {
    fn default() -> Self {
        OdomNoise {
            base_xy: 0.02,
            xy_per_m: 0.01,
            base_yaw: 0.5f64.to_radians(),
            yaw_per_rad: 0.01,
        }
    }
}

impl OdomNoise {
    pub fn sqrt_info(&self, z: &Pose2) -> Matrix3<f64> {
        let sxy = self.base_xy + self.xy_per_m * z.xy.norm();
        let syaw = self.base_yaw + self.yaw_per_rad * z.yaw.abs();
        Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0 / sxy, 1.0 / sxy, 1.0 / syaw))
    }
}

/// Loop edge noise from the ICP fit: `σ_xy = max(rms, floor)`, and the same
/// value over a 1 m lever arm for yaw.
pub fn loop_sqrt_info(rms: f64) -> Matrix3<f64> {
    let s = rms.max(0.01);
    Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0 / s, 1.0 / s, 1.0 / s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Measured `X_from⁻¹ ∘ X_to`.
    pub z: Pose2,
    pub sqrt_info: Matrix3<f64>,
}

/// `Z⁻¹ ∘ X_i⁻¹ ∘ X_j` as `(x, y, yaw)`; slots hold `[x, y, yaw]`.
pub struct BetweenFactor {
    pub z: Pose2,
}

fn rot(yaw: f64) -> Matrix2<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix2::new(c, -s, s, c)
}

impl Factor for BetweenFactor {
    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let (xi, xj) = (params[0], params[1]);
        let ti = Vector2::new(xi[0], xi[1]);
        let tj = Vector2::new(xj[0], xj[1]);
        let rz_t = self.z.rotation().transpose();
        let ri_t = rot(xi[2]).transpose();
        let d = tj - ti;
        let et = rz_t * (ri_t * d - self.z.xy);
        let eyaw = wrap_angle(xj[2] - xi[2] - self.z.yaw);
        if let Some(j) = jacobians {
            let (s, c) = xi[2].sin_cos();
            let d_ri_t = Matrix2::new(-s, c, -c, -s);
            let a = rz_t * ri_t;
            let dth = rz_t * d_ri_t * d;
            j[0] = DMatrix::from_row_slice(3, 3, &[
                -a[(0, 0)], -a[(0, 1)], dth.x,
                -a[(1, 0)], -a[(1, 1)], dth.y,
                0.0, 0.0, -1.0,
            ]);
            j[1] = DMatrix::from_row_slice(3, 3, &[
                a[(0, 0)], a[(0, 1)], 0.0,
                a[(1, 0)], a[(1, 1)], 0.0,
                0.0, 0.0, 1.0,
            ]);
        }
        DVector::from_column_slice(&[et.x, et.y, eyaw])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// `X_last(after) ∘ X_last(before)⁻¹`.
    pub correction: Pose2,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    ids: Vec<u64>,
    nodes: Vec<Pose2>,
    odom: Vec<Edge>,
    loops: Vec<(LoopConstraint, Edge)>,
    noise: OdomNoise,
}

impl PoseGraph {
    pub fn new(noise: OdomNoise) -> Self {
        PoseGraph {
            noise,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Pose2] {
        &self.nodes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn odom_edges(&self) -> &[Edge] {
        &self.odom
    }

    pub fn loop_constraints(&self) -> impl Iterator<Item = &LoopConstraint> {
        self.loops.iter().map(|(c, _)| c)
    }

    fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    /// Appends a node at `pose`, chained to the previous node by the
    /// relative motion between their front-end poses.
    pub fn add_keyframe(&mut self, id: u64, pose: Pose2) -> Result<()> {
        if let Some(&last) = self.ids.last() {
            if id != last + 1 {
                return Err(Error::Protocol(format!("keyframe id {id} does not follow {last}")));
            }
            let prev = *self.nodes.last().unwrap();
            let z = prev.between(&pose);
            self.odom.push(Edge {
                from: self.nodes.len() - 1,
                to: self.nodes.len(),
                z,
                sqrt_info: self.noise.sqrt_info(&z),
            });
        }
        self.ids.push(id);
        self.nodes.push(pose);
        Ok(())
    }

    /// Appends a node whose odometry edge is `z` from the previous node; the
    /// node is placed at `previous ∘ z`.
    pub fn add_relative(&mut self, id: u64, z: Pose2) -> Result<()> {
        let prev = *self
            .nodes
            .last()
            .ok_or_else(|| Error::Protocol("relative keyframe on an empty graph".into()))?;
        self.add_keyframe(id, prev.compose(&z))
    }

    pub fn add_loop(&mut self, c: LoopConstraint) -> Result<()> {
        self.add_loop_weighted(c.clone(), loop_sqrt_info(c.post_icp_rms))
    }

    pub fn add_loop_weighted(&mut self, c: LoopConstraint, sqrt_info: Matrix3<f64>) -> Result<()> {
        let (from, to) = match (self.index_of(c.from_id), self.index_of(c.to_id)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Protocol(format!(
                    "loop edge {} -> {} references an unknown keyframe",
                    c.from_id, c.to_id
                )))
            }
        };
        let edge = Edge {
            from,
            to,
            z: c.relative_pose,
            sqrt_info,
        };
        self.loops.push((c, edge));
        Ok(())
    }

    fn problem(&self) -> (Problem, Vec<usize>) {
        let mut problem = Problem::new();
        let slots: Vec<usize> = self
            .nodes
            .iter()
            .map(|n| problem.add_slot(Manifold::Euclidean(3), &[n.xy.x, n.xy.y, n.yaw]))
            .collect();
        if let Some(&s0) = slots.first() {
            problem.set_fixed(s0, true);
        }
        for e in self.odom.iter().chain(self.loops.iter().map(|(_, e)| e)) {
            problem.add_block(ResidualBlock::new(
                vec![slots[e.from], slots[e.to]],
                Box::new(BetweenFactor { z: e.z }),
                DMatrix::from_iterator(3, 3, e.sqrt_info.iter().copied()),
            ));
        }
        (problem, slots)
    }

    /// Total weighted squared error of all edges at the current nodes.
    pub fn cost(&self) -> f64 {
        self.problem().0.cost()
    }

    /// Re-solves all node poses (node 0 fixed). A graph without loop edges
    /// is already optimal and is left untouched.
    pub fn optimize(&mut self) -> Result<OptimizeSummary> {
        let before = self.nodes.last().copied().unwrap_or_default();
        if self.loops.is_empty() {
            let c = self.cost();
            return Ok(OptimizeSummary {
                initial_cost: c,
                final_cost: c,
                correction: Pose2::identity(),
                iterations: 0,
            });
        }
        let (mut problem, slots) = self.problem();
        let opts = SolverOptions {
            max_iters: 100,
            ..SolverOptions::default()
        };
        let summary = solver::solve(&mut problem, &opts)?;
        for (k, s) in slots.iter().enumerate().skip(1) {
            let x = problem.value(*s);
            self.nodes[k] = Pose2::new(x[2], x[0], x[1]);
        }
        let after = *self.nodes.last().unwrap();
        Ok(OptimizeSummary {
            initial_cost: summary.initial_cost,
            final_cost: summary.final_cost,
            correction: after.compose(&before.inverse()),
            iterations: summary.iters,
        })
    }
}

/// Place recognition plus pose graph, fed one keyframe at a time.
pub struct Backend {
    pub graph: PoseGraph,
    pub db: LoopDatabase,
    loop_closure: bool,
    rng: ChaCha8Rng,
    pub loops: Vec<LoopConstraint>,
    pub detect_stats: Vec<DetectStats>,
    pub detect_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub keyframe_id: u64,
    pub loop_found: Option<LoopConstraint>,
    /// Offset to left-compose onto live front-end poses.
    pub correction: Option<Pose2>,
}

impl Backend {
    pub fn new(cfg: LoopConfig, noise: OdomNoise, loop_closure: bool) -> Self {
        Backend {
            graph: PoseGraph::new(noise),
            db: LoopDatabase::new(cfg),
            loop_closure,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            loops: Vec::new(),
            detect_stats: Vec::new(),
            detect_times: Vec::new(),
        }
    }

    /// `kf.pose` is the front-end LiDAR pose (already including earlier
    /// corrections).
    pub fn add_keyframe(&mut self, kf: KeyframeRecord) -> Result<BackendReply> {
        self.graph.add_keyframe(kf.id, kf.pose)?;
        let mut record = kf;
        record.pose = *self.graph.nodes().last().unwrap();
        let id = record.id;
        let mut reply = BackendReply {
            keyframe_id: id,
            loop_found: None,
            correction: None,
        };
        if self.loop_closure {
            let start = std::time::Instant::now();
            let (found, stats) = self.db.detect(&record, true, &mut self.rng);
            self.detect_times.push(start.elapsed().as_secs_f64());
            self.detect_stats.push(stats);
            if let Some(c) = found {
                self.graph.add_loop(c.clone())?;
                let summary = self.graph.optimize()?;
                for (kid, pose) in self.graph.ids().iter().zip(self.graph.nodes()) {
                    self.db.set_pose(*kid, *pose);
                }
                record.pose = *self.graph.nodes().last().unwrap();
                self.loops.push(c.clone());
                reply.loop_found = Some(c);
                reply.correction = Some(summary.correction);
            }
        }
        self.db.insert(record);
        Ok(reply)
    }

    /// Optimized keyframe poses with their ids and stamps.
    pub fn trajectory(&self) -> Vec<(u64, f64, Pose2)> {
        self.db.records().map(|r| (r.id, r.stamp, r.pose)).collect()
    }
}

/// Back-end on its own thread. Every submitted keyframe gets exactly one
/// reply, in order.
pub struct BackendWorker {
    tx: Option<mpsc::Sender<KeyframeRecord>>,
    rx: mpsc::Receiver<Result<BackendReply>>,
    handle: Option<thread::JoinHandle<Backend>>,
}

impl BackendWorker {
    pub fn spawn(backend: Backend) -> Self {
        let (tx, worker_rx) = mpsc::channel::<KeyframeRecord>();
        let (worker_tx, rx) = mpsc::channel();
        let handle = thread::spawn(move || {
            let mut backend = backend;
            for kf in worker_rx {
                if worker_tx.send(backend.add_keyframe(kf)).is_err() {
                    break;
                }
            }
            backend
        });
        BackendWorker {
            tx: Some(tx),
            rx,
            handle: Some(handle),
        }
    }

    pub fn submit(&self, kf: KeyframeRecord) -> Result<()> {
        self.tx
            .as_ref()
            .and_then(|tx| tx.send(kf).ok())
            .ok_or_else(|| Error::Protocol("back-end thread has stopped".into()))
    }

    /// Next reply without blocking.
    pub fn poll(&self) -> Option<Result<BackendReply>> {
        self.rx.try_recv().ok()
    }

    /// Blocks for the next reply.
    pub fn wait(&self) -> Result<BackendReply> {
        self.rx
            .recv()
            .map_err(|_| Error::Protocol("back-end thread has stopped".into()))?
    }

    /// Closes the queue and returns the back-end state.
    pub fn join(mut self) -> Result<Backend> {
        drop(self.tx.take());
        self.handle
            .take()
            .unwrap()
            .join()
            .map_err(|_| Error::Protocol("back-end thread panicked".into()))
    }
}
