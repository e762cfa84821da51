//! Sparse Levenberg–Marquardt over manifold-valued parameter slots.
//!
//! A [`Problem`] owns parameter slots (Euclidean vectors or rotation vectors)
//! and residual blocks. Each block wraps a [`Factor`] that returns the raw
//! residual and its Jacobians with respect to the tangent space of every slot
//! it references; the block's square-root information matrix whitens both.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::geometry::boxplus_rotvec;

pub type SlotId = usize;

/// Parameterization of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean(usize),
    /// Rotation vector, retracted by `log(exp(θ)·exp(δ))`.
    RotVec,
}

impl Manifold {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::RotVec => 3,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        self.ambient_dim()
    }

    pub fn retract(&self, x: &[f64], delta: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Euclidean(_) => x.iter().zip(delta).map(|(a, b)| a + b).collect(),
            Manifold::RotVec => {
                let t = boxplus_rotvec(&Vector3::from_column_slice(x), &Vector3::from_column_slice(delta));
                t.as_slice().to_vec()
            }
        }
    }
}

/// Residual + Jacobian evaluator. Jacobian matrices arrive pre-sized as
/// `dim() × tangent_dim(slot)` for every referenced slot.
pub trait Factor: Send + Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Trivial,
    /// Huber with threshold δ on the whitened residual norm.
    Huber(f64),
}

impl Loss {
    /// Returns `(ρ(s), ρ'(s))` for the squared norm `s`.
    fn apply(&self, s: f64) -> (f64, f64) {
        match *self {
            Loss::Trivial => (s, 1.0),
            Loss::Huber(delta) => {
                let d2 = delta * delta;
                if s <= d2 {
                    (s, 1.0)
                } else {
                    let r = s.sqrt();
                    (2.0 * delta * r - d2, delta / r)
                }
            }
        }
    }
}

pub struct ResidualBlock {
    pub slots: Vec<SlotId>,
    pub factor: Box<dyn Factor>,
    /// Upper-triangular square-root information matrix.
    pub sqrt_info: DMatrix<f64>,
    pub loss: Loss,
}

impl ResidualBlock {
    pub fn new(slots: Vec<SlotId>, factor: Box<dyn Factor>, sqrt_info: DMatrix<f64>) -> Self {
        ResidualBlock {
            slots,
            factor,
            sqrt_info,
            loss: Loss::Trivial,
        }
    }

    pub fn unweighted(slots: Vec<SlotId>, factor: Box<dyn Factor>) -> Self {
        let n = factor.dim();
        Self::new(slots, factor, DMatrix::identity(n, n))
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    fn whitened(&self, params: &[&[f64]], jac: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        match jac {
            Some(j) => {
                let r = self.factor.evaluate(params, Some(&mut *j));
                for m in j.iter_mut() {
                    *m = &self.sqrt_info * &*m;
                }
                &self.sqrt_info * r
            }
            None => &self.sqrt_info * self.factor.evaluate(params, None),
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    value: Vec<f64>,
    manifold: Manifold,
    fixed: bool,
}

#[derive(Default)]
pub struct Problem {
    slots: Vec<Slot>,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol_grad: f64,
    pub tol_step: f64,
    pub lm_init_lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 50,
            tol_grad: 1e-10,
            tol_step: 1e-12,
            lm_init_lambda: 1e-6,
            lambda_min: 1e-9,
            lambda_max: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted LM steps.
    pub iters: usize,
    pub converged: bool,
    /// Costs after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_slot(&mut self, manifold: Manifold, value: &[f64]) -> SlotId {
        assert_eq!(value.len(), manifold.ambient_dim(), "slot value length");
        self.slots.push(Slot {
            value: value.to_vec(),
            manifold,
            fixed: false,
        });
        self.slots.len() - 1
    }

    pub fn set_fixed(&mut self, slot: SlotId, fixed: bool) {
        self.slots[slot].fixed = fixed;
    }

    pub fn is_fixed(&self, slot: SlotId) -> bool {
        self.slots[slot].fixed
    }

    pub fn value(&self, slot: SlotId) -> &[f64] {
        &self.slots[slot].value
    }

    pub fn set_value(&mut self, slot: SlotId, value: &[f64]) {
        self.slots[slot].value.copy_from_slice(value);
    }

    pub fn manifold(&self, slot: SlotId) -> Manifold {
        self.slots[slot].manifold
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn add_block(&mut self, block: ResidualBlock) -> usize {
        for &s in &block.slots {
            assert!(s < self.slots.len(), "block references missing slot {s}");
        }
        assert_eq!(block.sqrt_info.nrows(), block.factor.dim());
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    fn params<'a>(&'a self, block: &ResidualBlock, values: &'a [Vec<f64>]) -> Vec<&'a [f64]> {
        block.slots.iter().map(|&s| values[s].as_slice()).collect()
    }

    fn cost_at(&self, values: &[Vec<f64>]) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let r = b.whitened(&self.params(b, values), None);
                0.5 * b.loss.apply(r.norm_squared()).0
            })
            .sum()
    }

    /// Total cost `½ Σ ρ(‖W r‖²)` at the current values.
    pub fn cost(&self) -> f64 {
        let values: Vec<Vec<f64>> = self.slots.iter().map(|s| s.value.clone()).collect();
        self.cost_at(&values)
    }

    pub fn evaluate_block(&self, index: usize) -> DVector<f64> {
        let values: Vec<Vec<f64>> = self.slots.iter().map(|s| s.value.clone()).collect();
        let b = &self.blocks[index];
        b.whitened(&self.params(b, &values), None)
    }
}

struct Linearization {
    h_blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    gradient: DVector<f64>,
}

fn tangent_layout(problem: &Problem) -> (Vec<Option<usize>>, usize) {
    let mut offsets = Vec::with_capacity(problem.slots.len());
    let mut n = 0;
    for s in &problem.slots {
        if s.fixed {
            offsets.push(None);
        } else {
            offsets.push(Some(n));
            n += s.manifold.tangent_dim();
        }
    }
    (offsets, n)
}

fn linearize(problem: &Problem, values: &[Vec<f64>], offsets: &[Option<usize>], n: usize) -> Result<Linearization> {
    let mut h_blocks: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
    let mut gradient = DVector::zeros(n);
    for block in &problem.blocks {
        let params = problem.params(block, values);
        let dim = block.factor.dim();
        let mut jacs: Vec<DMatrix<f64>> = block
            .slots
            .iter()
            .map(|&s| DMatrix::zeros(dim, problem.slots[s].manifold.tangent_dim()))
            .collect();
        let mut r = block.whitened(&params, Some(&mut jacs));
        if !r.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite residual".into()));
        }
        let (_, drho) = block.loss.apply(r.norm_squared());
        if drho != 1.0 {
            let w = drho.sqrt();
            r *= w;
            for j in jacs.iter_mut() {
                *j *= w;
            }
        }
        for (a, &sa) in block.slots.iter().enumerate() {
            let Some(oa) = offsets[sa] else { continue };
            let ja = &jacs[a];
            let g = ja.transpose() * &r;
            let mut seg = gradient.rows_mut(oa, g.len());
            seg += g;
            for (b, &sb) in block.slots.iter().enumerate() {
                let Some(ob) = offsets[sb] else { continue };
                if ob < oa {
                    continue;
                }
                let hab = ja.transpose() * &jacs[b];
                h_blocks
                    .entry((sa, sb))
                    .and_modify(|m| *m += &hab)
                    .or_insert(hab);
            }
        }
    }
    Ok(Linearization { h_blocks, gradient })
}

fn assemble(lin: &Linearization, offsets: &[Option<usize>], n: usize, lambda: f64) -> CscMatrix<f64> {
    let mut diag = vec![0.0; n];
    let mut coo = CooMatrix::new(n, n);
    for (&(sa, sb), m) in &lin.h_blocks {
        let oa = offsets[sa].unwrap();
        let ob = offsets[sb].unwrap();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if oa + i == ob + j {
                    diag[oa + i] += v;
                    continue;
                }
                if v == 0.0 && sa != sb {
                    continue;
                }
                if sa == sb {
                    // diagonal blocks already hold both triangles
                    coo.push(oa + i, ob + j, v);
                } else {
                    coo.push(oa + i, ob + j, v);
                    coo.push(ob + j, oa + i, v);
                }
            }
        }
    }
    for (i, d) in diag.iter().enumerate() {
        let damp = d.clamp(1e-6, 1e32);
        coo.push(i, i, d + lambda * damp);
    }
    CscMatrix::from(&coo)
}

fn retract_all(problem: &Problem, values: &[Vec<f64>], offsets: &[Option<usize>], delta: &DVector<f64>) -> Vec<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| match offsets[i] {
            None => v.clone(),
            Some(o) => {
                let m = problem.slots[i].manifold;
                m.retract(v, &delta.as_slice()[o..o + m.tangent_dim()])
            }
        })
        .collect()
}

/// Minimizes the problem in place with Levenberg–Marquardt.
pub fn solve(problem: &mut Problem, opts: &SolverOptions) -> Result<SolveSummary> {
    let (offsets, n) = tangent_layout(problem);
    if n == 0 {
        return Err(Error::InvalidArgument("problem has no free slots".into()));
    }
    let mut values: Vec<Vec<f64>> = problem.slots.iter().map(|s| s.value.clone()).collect();
    let initial_cost = problem.cost_at(&values);
    if !initial_cost.is_finite() {
        return Err(Error::InvalidArgument("non-finite initial cost".into()));
    }
    let mut cost = initial_cost;
    let mut history = vec![cost];
    let mut lambda = opts.lm_init_lambda.clamp(opts.lambda_min, opts.lambda_max);
    let mut converged = false;
    let mut iters = 0;
    let mut linearizations = 0;

    'outer: while linearizations < opts.max_iters {
        linearizations += 1;
        let lin = linearize(problem, &values, &offsets, n)?;
        if lin.gradient.amax() <= opts.tol_grad {
            converged = true;
            break;
        }
        loop {
            let h = assemble(&lin, &offsets, n, lambda);
            let chol = match CscCholesky::factor(&h) {
                Ok(c) => c,
                Err(_) => {
                    if lambda >= opts.lambda_max {
                        let diag: Vec<f64> = (0..n).map(|i| h.get_entry(i, i).map(|e| e.into_value()).unwrap_or(0.0)).collect();
                        return Err(Error::SingularSystem {
                            lambda,
                            min_diag: diag.iter().cloned().fold(f64::INFINITY, f64::min),
                            max_diag: diag.iter().cloned().fold(0.0, f64::max),
                        });
                    }
                    lambda = (lambda * 10.0).min(opts.lambda_max);
                    continue;
                }
            };
            let rhs = DMatrix::from_column_slice(n, 1, (-&lin.gradient).as_slice());
            let delta = DVector::from_column_slice(chol.solve(&rhs).as_slice());
            if !delta.iter().all(|x| x.is_finite()) {
                lambda = (lambda * 10.0).min(opts.lambda_max);
                if lambda >= opts.lambda_max {
                    break 'outer;
                }
                continue;
            }
            let x_norm: f64 = values
                .iter()
                .enumerate()
                .filter(|(i, _)| offsets[*i].is_some())
                .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if delta.norm() <= opts.tol_step * (x_norm + opts.tol_step) {
                converged = true;
                break 'outer;
            }
            let candidate = retract_all(problem, &values, &offsets, &delta);
            let new_cost = problem.cost_at(&candidate);
            if new_cost.is_finite() && new_cost < cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                values = candidate;
                cost = new_cost;
                history.push(cost);
                iters += 1;
                lambda = (lambda / 10.0).max(opts.lambda_min);
                if rel < 1e-15 || cost == 0.0 {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            if lambda >= opts.lambda_max {
                // no descent possible at maximal damping: a local minimum to
                // working precision
                converged = true;
                break 'outer;
            }
            lambda = (lambda * 10.0).min(opts.lambda_max);
        }
    }

    for (slot, v) in problem.slots.iter_mut().zip(values) {
        if !slot.fixed {
            slot.value = v;
        }
    }
    Ok(SolveSummary {
        initial_cost,
        final_cost: cost,
        iters,
        converged,
        cost_history: history,
    })
}

/// Maximum absolute difference between the block's analytic (whitened)
/// Jacobian and a central difference on the tangent space, step 1e-6.
pub fn check_jacobian(problem: &Problem, block_index: usize) -> Result<f64> {
    const STEP: f64 = 1e-6;
    let block = &problem.blocks[block_index];
    let values: Vec<Vec<f64>> = problem.slots.iter().map(|s| s.value.clone()).collect();
    let params = problem.params(block, &values);
    let dim = block.factor.dim();
    let mut jacs: Vec<DMatrix<f64>> = block
        .slots
        .iter()
        .map(|&s| DMatrix::zeros(dim, problem.slots[s].manifold.tangent_dim()))
        .collect();
    let r0 = block.whitened(&params, Some(&mut jacs));
    if !r0.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite residual at linearization point".into()));
    }
    let mut max_err: f64 = 0.0;
    for (a, &slot) in block.slots.iter().enumerate() {
        let m = problem.slots[slot].manifold;
        for k in 0..m.tangent_dim() {
            let mut e = vec![0.0; m.tangent_dim()];
            e[k] = STEP;
            let plus = m.retract(&values[slot], &e);
            e[k] = -STEP;
            let minus = m.retract(&values[slot], &e);
            let eval = |x: &Vec<f64>| {
                let p: Vec<&[f64]> = block
                    .slots
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| if i == a { x.as_slice() } else { values[s].as_slice() })
                    .collect();
                block.whitened(&p, None)
            };
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            for row in 0..dim {
                max_err = max_err.max((numeric[row] - jacs[a][(row, k)]).abs());
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};

    /// Linear residual `A x − b`.
    struct Affine {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Factor for Affine {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            if let Some(j) = jacobians {
                j[0].copy_from(&self.a);
            }
            &self.a * DVector::from_column_slice(params[0]) - &self.b
        }
    }

    struct Rosenbrock;

    impl Factor for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            let (x, y) = (params[0][0], params[0][1]);
            if let Some(j) = jacobians {
                j[0].copy_from(&DMatrix::from_row_slice(2, 2, &[-20.0 * x, 10.0, -1.0, 0.0]));
            }
            DVector::from_vec(vec![10.0 * (y - x * x), 1.0 - x])
        }
    }

    /// Planar point registration: `R(ψ)·q + t − p`.
    struct PointPair {
        p: Vector2<f64>,
        q: Vector2<f64>,
    }

    impl Factor for PointPair {
        fn dim(&self) -> usize {
            2
        }
        fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            let (x, y, yaw) = (params[0][0], params[0][1], params[0][2]);
            let (s, c) = yaw.sin_cos();
            let r = Matrix2::new(c, -s, s, c);
            let pred = r * self.q + Vector2::new(x, y);
            if let Some(j) = jacobians {
                let dr = Matrix2::new(-s, -c, c, -s) * self.q;
                j[0].copy_from(&DMatrix::from_row_slice(2, 3, &[1.0, 0.0, dr.x, 0.0, 1.0, dr.y]));
            }
            DVector::from_column_slice((pred - self.p).as_slice())
        }
    }

    #[test]
    fn scalar_quadratic_converges_immediately() {
        let mut p = Problem::new();
        let x = p.add_slot(Manifold::Euclidean(1), &[0.0]);
        p.add_block(ResidualBlock::unweighted(
            vec![x],
            Box::new(Affine {
                a: DMatrix::identity(1, 1),
                b: DVector::from_vec(vec![3.0]),
            }),
        ));
        let s = solve(&mut p, &SolverOptions::default()).unwrap();
        assert!((p.value(x)[0] - 3.0).abs() < 1e-9);
        assert!(s.final_cost < 1e-18);
        assert!(s.iters <= 2, "iters {}", s.iters);
    }

    #[test]
    fn rosenbrock_reaches_global_minimum() {
        let mut p = Problem::new();
        let x = p.add_slot(Manifold::Euclidean(2), &[-1.2, 1.0]);
        p.add_block(ResidualBlock::unweighted(vec![x], Box::new(Rosenbrock)));
        let opts = SolverOptions {
            max_iters: 200,
            ..Default::default()
        };
        let s = solve(&mut p, &opts).unwrap();
        assert!((p.value(x)[0] - 1.0).abs() < 1e-6);
        assert!((p.value(x)[1] - 1.0).abs() < 1e-6);
        assert!(s.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn point_registration_recovers_pose() {
        let truth: (f64, f64, f64) = (0.7, -1.3, 0.45);
        let (s, c) = truth.2.sin_cos();
        let r = Matrix2::new(c, -s, s, c);
        let mut p = Problem::new();
        let pose = p.add_slot(Manifold::Euclidean(3), &[0.0, 0.0, 0.0]);
        for i in 0..12 {
            let q = Vector2::new((i as f64 * 0.7).cos() * 3.0, (i as f64 * 1.3).sin() * 2.0 + i as f64 * 0.1);
            let pt = r * q + Vector2::new(truth.0, truth.1);
            p.add_block(ResidualBlock::unweighted(vec![pose], Box::new(PointPair { p: pt, q })));
        }
        solve(&mut p, &SolverOptions::default()).unwrap();
        let v = p.value(pose);
        assert!((v[0] - truth.0).abs() < 1e-9);
        assert!((v[1] - truth.1).abs() < 1e-9);
        assert!((v[2] - truth.2).abs() < 1e-9);
    }

    #[test]
    fn linear_jacobian_check_is_exact() {
        let mut p = Problem::new();
        let x = p.add_slot(Manifold::Euclidean(3), &[0.3, -0.1, 2.0]);
        p.add_block(ResidualBlock::unweighted(
            vec![x],
            Box::new(Affine {
                a: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]),
                b: DVector::from_vec(vec![1.0, 2.0]),
            }),
        ));
        assert!(check_jacobian(&p, 0).unwrap() <= 1e-9);
    }

    #[test]
    fn fixed_slots_are_untouched() {
        let mut p = Problem::new();
        let x = p.add_slot(Manifold::Euclidean(1), &[5.0]);
        let y = p.add_slot(Manifold::Euclidean(1), &[0.0]);
        p.set_fixed(x, true);
        // y - x = 1
        p.add_block(ResidualBlock::unweighted(
            vec![x, y],
            Box::new(Affine2 {}),
        ));
        solve(&mut p, &SolverOptions::default()).unwrap();
        assert_eq!(p.value(x), &[5.0]);
        assert!((p.value(y)[0] - 6.0).abs() < 1e-9);
    }

    struct Affine2 {}

    impl Factor for Affine2 {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            if let Some(j) = jacobians {
                j[0][(0, 0)] = -1.0;
                j[1][(0, 0)] = 1.0;
            }
            DVector::from_vec(vec![params[1][0] - params[0][0] - 1.0])
        }
    }

    #[test]
    fn all_fixed_is_rejected() {
        let mut p = Problem::new();
        let x = p.add_slot(Manifold::Euclidean(1), &[5.0]);
        p.set_fixed(x, true);
        assert!(solve(&mut p, &SolverOptions::default()).is_err());
    }

    #[test]
    fn solution_is_invariant_to_block_order() {
        let build = |reverse: bool| {
            let mut p = Problem::new();
            let x = p.add_slot(Manifold::Euclidean(2), &[-1.2, 1.0]);
            let pose = p.add_slot(Manifold::Euclidean(3), &[0.1, 0.1, 0.1]);
            let mut blocks: Vec<ResidualBlock> = vec![ResidualBlock::unweighted(vec![x], Box::new(Rosenbrock))];
            for i in 0..5 {
                let q = Vector2::new(i as f64, (i * i) as f64 * 0.3);
                blocks.push(ResidualBlock::unweighted(
                    vec![pose],
                    Box::new(PointPair { p: q + Vector2::new(1.0, 2.0), q }),
                ));
            }
            if reverse {
                blocks.reverse();
            }
            for b in blocks {
                p.add_block(b);
            }
            solve(&mut p, &SolverOptions { max_iters: 200, ..Default::default() }).unwrap();
            (p.value(x).to_vec(), p.value(pose).to_vec())
        };
        let (a1, b1) = build(false);
        let (a2, b2) = build(true);
        for (u, v) in a1.iter().chain(&b1).zip(a2.iter().chain(&b2)) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn huber_downweights_outlier() {
        let mut p = Problem::new();
        let x = p.add_slot(Manifold::Euclidean(1), &[0.0]);
        for target in [1.0, 1.0, 1.0, 100.0] {
            p.add_block(
                ResidualBlock::unweighted(
                    vec![x],
                    Box::new(Affine {
                        a: DMatrix::identity(1, 1),
                        b: DVector::from_vec(vec![target]),
                    }),
                )
                .with_loss(Loss::Huber(1.0)),
            );
        }
        let s = solve(&mut p, &SolverOptions::default()).unwrap();
        // three inliers pull with unit slope, the outlier with slope 1
        assert!((p.value(x)[0] - 4.0 / 3.0).abs() < 1e-6, "{}", p.value(x)[0]);
        assert!(s.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rotation_slot_retracts_on_manifold() {
        let m = Manifold::RotVec;
        let x = m.retract(&[0.0, 0.0, 3.0], &[0.0, 0.0, 0.3]);
        let n = Vector3::from_column_slice(&x).norm();
        assert!(n <= std::f64::consts::PI);
        assert!((x[2] - (3.3 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }
}
