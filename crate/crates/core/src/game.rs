//! Three-player feedback Stackelberg learning dynamics.
//!
//! Player 1 leads, player 2 responds to player 1, player 3 responds to
//! both. Follower responses are differentiated implicitly from the
//! first-order conditions; every Jacobian maps leader perturbations to
//! follower responses (`D1h: m3×m1`, `D2h: m3×m2`, `D1r: m2×m1`).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Condition number above which a Hessian block is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Step for finite differences of ω along the response manifold.
pub const OMEGA_FD_STEP: f64 = 1e-5;
/// Smallest eigenvalue a curvature block needs to count as positive definite.
pub const PD_TOL: f64 = 1e-8;
/// Norm of the joint point beyond which dynamics are declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e9;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
const POWER_ITER_MAX: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("{which} is singular (condition number {cond:e})")]
    Singular { which: &'static str, cond: f64 },
    #[error("dynamics diverged at iteration {iteration} (|x| = {norm:e})")]
    Diverged { iteration: usize, norm: f64 },
    #[error("power iteration did not converge in {0} steps")]
    PowerIteration(usize),
    #[error("invalid learning rates: {0}")]
    InvalidRates(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    Leader,
    Middle,
    Follower,
}

impl Player {
    pub const ALL: [Player; 3] = [Player::Leader, Player::Middle, Player::Follower];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Joint strategy `(x1, x2, x3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPoint {
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
    pub x3: DVector<f64>,
}

impl JointPoint {
    pub fn new(x1: DVector<f64>, x2: DVector<f64>, x3: DVector<f64>) -> Result<Self, GameError> {
        let p = Self { x1, x2, x3 };
        if p.blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(GameError::NonFinite("joint point"));
        }
        Ok(p)
    }

    pub fn from_slices(x1: &[f64], x2: &[f64], x3: &[f64]) -> Result<Self, GameError> {
        Self::new(
            DVector::from_column_slice(x1),
            DVector::from_column_slice(x2),
            DVector::from_column_slice(x3),
        )
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            x1: DVector::zeros(dims[0]),
            x2: DVector::zeros(dims[1]),
            x3: DVector::zeros(dims[2]),
        }
    }

    /// Splits a stacked vector into blocks of the given sizes.
    pub fn from_flat(dims: [usize; 3], flat: &DVector<f64>) -> Result<Self, GameError> {
        if flat.len() != dims.iter().sum::<usize>() {
            return Err(GameError::Shape(format!(
                "{} values for dims {dims:?}",
                flat.len()
            )));
        }
        Self::new(
            flat.rows(0, dims[0]).into_owned(),
            flat.rows(dims[0], dims[1]).into_owned(),
            flat.rows(dims[0] + dims[1], dims[2]).into_owned(),
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.x1.len(), self.x2.len(), self.x3.len()]
    }

    pub fn blocks(&self) -> [&DVector<f64>; 3] {
        [&self.x1, &self.x2, &self.x3]
    }

    pub fn block(&self, p: Player) -> &DVector<f64> {
        self.blocks()[p.index()]
    }

    pub fn block_mut(&mut self, p: Player) -> &mut DVector<f64> {
        match p {
            Player::Leader => &mut self.x1,
            Player::Middle => &mut self.x2,
            Player::Follower => &mut self.x3,
        }
    }

    pub fn flat(&self) -> DVector<f64> {
        let v: Vec<f64> = self
            .blocks()
            .iter()
            .flat_map(|b| b.iter().copied())
            .collect();
        DVector::from_vec(v)
    }

    pub fn norm(&self) -> f64 {
        self.flat().norm()
    }

    pub fn distance(&self, other: &JointPoint) -> f64 {
        (self.flat() - other.flat()).norm()
    }

    /// `self + s·d`, blockwise.
    pub fn offset(&self, d: &JointPoint, s: f64) -> JointPoint {
        JointPoint {
            x1: &self.x1 + &d.x1 * s,
            x2: &self.x2 + &d.x2 * s,
            x3: &self.x3 + &d.x3 * s,
        }
    }
}

/// Losses and derivative oracles of a three-player game.
///
/// Only `dims` and `loss` are required; gradients default to central
/// differences of the loss and Hessian blocks to central differences of
/// the gradient. `hess(p, r, c, x)` is `∂²l_p / ∂x_r ∂x_c` with shape
/// `m_r × m_c`.
pub trait ThreePlayerGame: Sync {
    fn dims(&self) -> [usize; 3];

    fn loss(&self, p: Player, x: &JointPoint) -> f64;

    fn grad(&self, p: Player, block: Player, x: &JointPoint) -> DVector<f64> {
        fd_gradient(|y| self.loss(p, y), x, block, 1e-5)
    }

    fn hess(&self, p: Player, row: Player, col: Player, x: &JointPoint) -> DMatrix<f64> {
        fd_jacobian(|y| self.grad(p, row, y), x, col, 1e-5)
    }

    fn name(&self) -> &str {
        "game"
    }
}

/// Central-difference gradient of `f` with respect to one block.
pub fn fd_gradient(
    f: impl Fn(&JointPoint) -> f64,
    x: &JointPoint,
    block: Player,
    step: f64,
) -> DVector<f64> {
    let m = x.block(block).len();
    let mut y = x.clone();
    DVector::from_fn(m, |j, _| {
        let orig = x.block(block)[j];
        y.block_mut(block)[j] = orig + step;
        let plus = f(&y);
        y.block_mut(block)[j] = orig - step;
        let minus = f(&y);
        y.block_mut(block)[j] = orig;
        (plus - minus) / (2.0 * step)
    })
}

/// Central-difference Jacobian of a vector map with respect to one block.
pub fn fd_jacobian(
    f: impl Fn(&JointPoint) -> DVector<f64>,
    x: &JointPoint,
    block: Player,
    step: f64,
) -> DMatrix<f64> {
    let m = x.block(block).len();
    let mut y = x.clone();
    let mut cols = Vec::with_capacity(m);
    for j in 0..m {
        let orig = x.block(block)[j];
        y.block_mut(block)[j] = orig + step;
        let plus = f(&y);
        y.block_mut(block)[j] = orig - step;
        let minus = f(&y);
        y.block_mut(block)[j] = orig;
        cols.push((plus - minus) / (2.0 * step));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Per-player learning rates with `λ3 > λ2 > λ1 > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnRates {
    l1: f64,
    l2: f64,
    l3: f64,
}

impl LearnRates {
    pub fn new(l1: f64, l2: f64, l3: f64) -> Result<Self, GameError> {
        if ![l1, l2, l3].iter().all(|v| v.is_finite()) {
            return Err(GameError::InvalidRates(format!(
                "({l1}, {l2}, {l3}) not finite"
            )));
        }
        if !(l3 > l2 && l2 > l1 && l1 > 0.0) {
            return Err(GameError::InvalidRates(format!(
                "need λ3 > λ2 > λ1 > 0, got ({l1}, {l2}, {l3})"
            )));
        }
        Ok(Self { l1, l2, l3 })
    }

    /// Rates from the follower rate and the timescale ratios `τ1 > τ2 > 1`.
    pub fn from_timescales(l3: f64, tau1: f64, tau2: f64) -> Result<Self, GameError> {
        Self::new(l3 / tau1, l3 / tau2, l3)
    }

    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn l3(&self) -> f64 {
        self.l3
    }

    pub fn tau1(&self) -> f64 {
        self.l3 / self.l1
    }

    pub fn tau2(&self) -> f64 {
        self.l3 / self.l2
    }
}

/// How the middle player's response Jacobian is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResponseFormula {
    /// Implicit function theorem on the reduced problem
    /// `y ↦ l2(x1, y, h(x1, y))`, so `l2`'s dependence on `x3` is counted.
    #[default]
    Exact,
    /// `−(D2²l2)⁻¹(D21 l2 + D23 l2·D1h)`; ignores the follower's reaction
    /// to `x2` and matches `Exact` only when `l2` does not depend on `x3`.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitJacobians {
    pub d1h: DMatrix<f64>,
    pub d2h: DMatrix<f64>,
    pub d1r: DMatrix<f64>,
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `a·X = b` after checking the conditioning of `a`.
fn checked_solve(
    which: &'static str,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>, GameError> {
    let cond = condition_number(a);
    if !(cond < MAX_CONDITION) {
        return Err(GameError::Singular { which, cond });
    }
    a.clone()
        .col_piv_qr()
        .solve(b)
        .ok_or(GameError::Singular { which, cond })
}

pub fn implicit_jacobians<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
) -> Result<ImplicitJacobians, GameError> {
    implicit_jacobians_with(game, x, ResponseFormula::Exact)
}

pub fn implicit_jacobians_with<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
    formula: ResponseFormula,
) -> Result<ImplicitJacobians, GameError> {
    use Player::{Follower as P3, Leader as P1, Middle as P2};
    let d33 = game.hess(P3, P3, P3, x);
    let d1h = -checked_solve("D3²l3", &d33, &game.hess(P3, P3, P1, x))?;
    let d2h = -checked_solve("D3²l3", &d33, &game.hess(P3, P3, P2, x))?;

    let d22 = game.hess(P2, P2, P2, x);
    let d21 = game.hess(P2, P2, P1, x);
    let d23 = game.hess(P2, P2, P3, x);
    let (a, b) = match formula {
        ResponseFormula::Literal => (d22, d21 + &d23 * &d1h),
        ResponseFormula::Exact => {
            let d32 = game.hess(P2, P3, P2, x);
            let d31 = game.hess(P2, P3, P1, x);
            let d33l2 = game.hess(P2, P3, P3, x);
            let d2ht = d2h.transpose();
            let a = &d22 + &d23 * &d2h + &d2ht * &d32 + &d2ht * &d33l2 * &d2h;
            let b = &d21 + &d23 * &d1h + &d2ht * &d31 + &d2ht * &d33l2 * &d1h;
            (a, b)
        }
    };
    let d1r = -checked_solve("D2²l2", &a, &b)?;
    Ok(ImplicitJacobians { d1h, d2h, d1r })
}

/// Total-derivative gradients `(ω1, ω2, ω3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Omega {
    pub w1: DVector<f64>,
    pub w2: DVector<f64>,
    pub w3: DVector<f64>,
}

impl Omega {
    pub fn norm(&self) -> f64 {
        (self.w1.norm_squared() + self.w2.norm_squared() + self.w3.norm_squared()).sqrt()
    }

    pub fn flat(&self) -> DVector<f64> {
        let v: Vec<f64> = self
            .w1
            .iter()
            .chain(self.w2.iter())
            .chain(self.w3.iter())
            .copied()
            .collect();
        DVector::from_vec(v)
    }

    pub fn block(&self, p: Player) -> &DVector<f64> {
        match p {
            Player::Leader => &self.w1,
            Player::Middle => &self.w2,
            Player::Follower => &self.w3,
        }
    }
}

pub fn stackelberg_gradients<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
) -> Result<Omega, GameError> {
    let jac = implicit_jacobians(game, x)?;
    Ok(omega_from(game, x, &jac))
}

fn omega_from<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
    jac: &ImplicitJacobians,
) -> Omega {
    use Player::{Follower as P3, Leader as P1, Middle as P2};
    let total_h = &jac.d1h + &jac.d2h * &jac.d1r;
    let w1 = game.grad(P1, P1, x)
        + jac.d1r.tr_mul(&game.grad(P1, P2, x))
        + total_h.tr_mul(&game.grad(P1, P3, x));
    let w2 = game.grad(P2, P2, x) + jac.d2h.tr_mul(&game.grad(P2, P3, x));
    let w3 = game.grad(P3, P3, x);
    Omega { w1, w2, w3 }
}

/// One simultaneous update `x − λ3·(ω1/τ1, ω2/τ2, ω3)`.
pub fn stackelberg_step<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
    rates: &LearnRates,
) -> Result<JointPoint, GameError> {
    let w = stackelberg_gradients(game, x)?;
    Ok(apply_step(x, &w, rates))
}

fn apply_step(x: &JointPoint, w: &Omega, rates: &LearnRates) -> JointPoint {
    let l3 = rates.l3();
    JointPoint {
        x1: &x.x1 - (&w.w1 / rates.tau1()) * l3,
        x2: &x.x2 - (&w.w2 / rates.tau2()) * l3,
        x3: &x.x3 - &w.w3 * l3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Dfse,
    StationaryNotDfse,
    NonStationary,
}

impl Classification {
    pub fn name(self) -> &'static str {
        match self {
            Classification::Dfse => "DFSE",
            Classification::StationaryNotDfse => "stationary-not-DFSE",
            Classification::NonStationary => "non-stationary",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsTrace {
    /// `x_0, x_1, …`; each entry had its ω evaluated.
    pub iterates: Vec<JointPoint>,
    /// `‖ω(x_k)‖` aligned with `iterates`.
    pub omega_norms: Vec<f64>,
    pub termination: Termination,
    /// Classification of the last iterate, if the curvature blocks could be
    /// formed there.
    pub classification: Option<Classification>,
}

impl DynamicsTrace {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn last(&self) -> &JointPoint {
        self.iterates
            .last()
            .expect("trace holds at least the start point")
    }

    pub fn final_omega_norm(&self) -> f64 {
        *self
            .omega_norms
            .last()
            .expect("trace holds at least one norm")
    }
}

pub fn run_dynamics<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x0: &JointPoint,
    rates: &LearnRates,
    max_iters: usize,
    tol: f64,
) -> Result<DynamicsTrace, GameError> {
    run_dynamics_inner(game, x0, rates, max_iters, tol, true)
}

fn run_dynamics_inner<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x0: &JointPoint,
    rates: &LearnRates,
    max_iters: usize,
    tol: f64,
    keep_trace: bool,
) -> Result<DynamicsTrace, GameError> {
    if !(tol > 0.0) {
        return Err(GameError::Shape(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if max_iters == 0 {
        return Err(GameError::Shape("max_iters must be at least 1".into()));
    }
    let mut iterates = Vec::new();
    let mut norms = Vec::new();
    let mut x = x0.clone();
    let mut termination = Termination::MaxIters;
    for k in 0..max_iters {
        let norm_x = x.norm();
        if !(norm_x <= DIVERGENCE_NORM) {
            return Err(GameError::Diverged {
                iteration: k,
                norm: norm_x,
            });
        }
        let w = stackelberg_gradients(game, &x)?;
        let wn = w.norm();
        let next = apply_step(&x, &w, rates);
        if keep_trace || k + 1 == max_iters || wn < tol {
            iterates.push(x);
            norms.push(wn);
        }
        if wn < tol {
            termination = Termination::Converged;
            break;
        }
        x = next;
    }
    let classification = if termination == Termination::Converged {
        dfse_check(game, iterates.last().expect("non-empty"), tol).ok()
    } else {
        None
    };
    Ok(DynamicsTrace {
        iterates,
        omega_norms: norms,
        termination,
        classification,
    })
}

/// Curvature of each player's loss along the response manifold.
#[derive(Debug, Clone)]
pub struct CurvatureBlocks {
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub d3: DMatrix<f64>,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m.clone())).eigenvalues.min()
}

/// Second derivatives of `l1` along `(e_j, D1r e_j, (D1h + D2h D1r) e_j)`,
/// of `l2` along `(0, e_j, D2h e_j)`, and `D3²l3`.
pub fn curvature_blocks<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
) -> Result<CurvatureBlocks, GameError> {
    let jac = implicit_jacobians(game, x)?;
    let [m1, m2, m3] = x.dims();
    let total_h = &jac.d1h + &jac.d2h * &jac.d1r;
    let eps = OMEGA_FD_STEP;

    let directional = |dir: &JointPoint, p: Player| -> Result<DVector<f64>, GameError> {
        let plus = stackelberg_gradients(game, &x.offset(dir, eps))?;
        let minus = stackelberg_gradients(game, &x.offset(dir, -eps))?;
        Ok((plus.block(p) - minus.block(p)) / (2.0 * eps))
    };

    let mut d1 = DMatrix::zeros(m1, m1);
    for j in 0..m1 {
        let dir = JointPoint {
            x1: DVector::from_fn(m1, |i, _| if i == j { 1.0 } else { 0.0 }),
            x2: jac.d1r.column(j).into_owned(),
            x3: total_h.column(j).into_owned(),
        };
        d1.set_column(j, &directional(&dir, Player::Leader)?);
    }
    let mut d2 = DMatrix::zeros(m2, m2);
    for j in 0..m2 {
        let dir = JointPoint {
            x1: DVector::zeros(m1),
            x2: DVector::from_fn(m2, |i, _| if i == j { 1.0 } else { 0.0 }),
            x3: jac.d2h.column(j).into_owned(),
        };
        d2.set_column(j, &directional(&dir, Player::Middle)?);
    }
    let d3 = game.hess(Player::Follower, Player::Follower, Player::Follower, x);
    debug_assert_eq!(d3.shape(), (m3, m3));
    Ok(CurvatureBlocks { d1, d2, d3 })
}

#[derive(Debug, Clone)]
pub struct DfseReport {
    pub omega_norm: f64,
    /// Smallest eigenvalue of each symmetrized curvature block.
    pub min_curvature: [f64; 3],
    pub classification: Classification,
}

pub fn dfse_report<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
    tol: f64,
) -> Result<DfseReport, GameError> {
    let omega_norm = stackelberg_gradients(game, x)?.norm();
    let c = curvature_blocks(game, x)?;
    let min_curvature = [
        min_eigenvalue(&c.d1),
        min_eigenvalue(&c.d2),
        min_eigenvalue(&c.d3),
    ];
    let classification = if !(omega_norm < tol) {
        Classification::NonStationary
    } else if min_curvature.iter().all(|&v| v > PD_TOL) {
        Classification::Dfse
    } else {
        Classification::StationaryNotDfse
    };
    Ok(DfseReport {
        omega_norm,
        min_curvature,
        classification,
    })
}

pub fn dfse_check<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
    tol: f64,
) -> Result<Classification, GameError> {
    Ok(dfse_report(game, x, tol)?.classification)
}

/// Jacobian of the scaled update direction `(ω1/τ1, ω2/τ2, ω3)`, by central
/// differences of ω.
pub fn game_jacobian<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
    rates: &LearnRates,
) -> Result<DMatrix<f64>, GameError> {
    let dims = x.dims();
    let m: usize = dims.iter().sum();
    let base = x.flat();
    let mut jac = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut plus = base.clone();
        plus[j] += OMEGA_FD_STEP;
        let mut minus = base.clone();
        minus[j] -= OMEGA_FD_STEP;
        let wp = stackelberg_gradients(game, &JointPoint::from_flat(dims, &plus)?)?.flat();
        let wm = stackelberg_gradients(game, &JointPoint::from_flat(dims, &minus)?)?.flat();
        jac.set_column(j, &((wp - wm) / (2.0 * OMEGA_FD_STEP)));
    }
    let (s1, s2) = (1.0 / rates.tau1(), 1.0 / rates.tau2());
    for r in 0..dims[0] {
        jac.row_mut(r).scale_mut(s1);
    }
    for r in dims[0]..dims[0] + dims[1] {
        jac.row_mut(r).scale_mut(s2);
    }
    Ok(jac)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// `‖m‖₂` by power iteration on `mᵀm`.
pub fn operator_norm(m: &DMatrix<f64>) -> Result<f64, GameError> {
    let n = m.ncols();
    if n == 0 {
        return Ok(0.0);
    }
    let gram = m.transpose() * m;
    // start off every eigenvector with a deterministic, non-symmetric vector
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * (i as f64 + 1.0).sqrt());
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let w = &gram * &v;
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        v = w / wn;
        if (next - lambda).abs() <= 1e-13 * next.abs().max(f64::MIN_POSITIVE) {
            return Ok(next.max(0.0).sqrt());
        }
        lambda = next;
    }
    Err(GameError::PowerIteration(POWER_ITER_MAX))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffeomorphismCheck {
    /// `ρ(λ3·J)`.
    pub rho: f64,
    /// `‖λ3·J‖₂`.
    pub norm: f64,
    /// `det(I − λ3·J)`.
    pub det: f64,
    pub holds: bool,
}

/// Whether `x ↦ x − λ3·(ω1/τ1, ω2/τ2, ω3)` is locally a diffeomorphism in
/// the sense `ρ(λ3·J) < 1`.
pub fn diffeomorphism_check<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x: &JointPoint,
    rates: &LearnRates,
) -> Result<DiffeomorphismCheck, GameError> {
    let j = game_jacobian(game, x, rates)? * rates.l3();
    let rho = spectral_radius(&j);
    let norm = operator_norm(&j)?;
    let det = (DMatrix::identity(j.nrows(), j.ncols()) - &j).determinant();
    Ok(DiffeomorphismCheck {
        rho,
        norm,
        det,
        holds: rho < 1.0,
    })
}

#[derive(Debug, Clone)]
pub struct SaddleAvoidance {
    pub trials: usize,
    pub avoided: usize,
    pub diverged: usize,
    /// Distance of each terminus from the saddle; infinite for divergence.
    pub distances: Vec<f64>,
}

impl SaddleAvoidance {
    pub fn fraction(&self) -> f64 {
        if self.trials == 0 {
            1.0
        } else {
            self.avoided as f64 / self.trials as f64
        }
    }
}

/// Distance of the terminus of one trajectory from `saddle`; divergence
/// counts as infinitely far.
pub fn terminus_distance<G: ThreePlayerGame + ?Sized>(
    game: &G,
    x0: &JointPoint,
    saddle: &JointPoint,
    rates: &LearnRates,
    max_iters: usize,
) -> Result<f64, GameError> {
    match run_dynamics_inner(game, x0, rates, max_iters, DEFAULT_TOL, false) {
        Ok(t) => Ok(t.last().distance(saddle)),
        Err(GameError::Diverged { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Runs the dynamics from `n_inits` points drawn uniformly from `[−1, 1]^m`
/// and counts the trajectories ending at least 0.1 from `saddle`.
pub fn saddle_avoidance_experiment<G: ThreePlayerGame + ?Sized>(
    game: &G,
    saddle: &JointPoint,
    n_inits: usize,
    rates: &LearnRates,
    max_iters: usize,
    seed: u64,
) -> Result<SaddleAvoidance, GameError> {
    let dims = game.dims();
    let m: usize = dims.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inits: Vec<JointPoint> = (0..n_inits)
        .map(|_| {
            JointPoint::from_flat(
                dims,
                &DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            )
        })
        .collect::<Result<_, _>>()?;
    let distances: Vec<f64> = inits
        .par_iter()
        .map(|x0| terminus_distance(game, x0, saddle, rates, max_iters))
        .collect::<Result<_, _>>()?;
    Ok(SaddleAvoidance {
        trials: n_inits,
        avoided: distances.iter().filter(|&&d| d >= 0.1).count(),
        diverged: distances.iter().filter(|d| d.is_infinite()).count(),
        distances,
    })
}

/// Every player's loss is `½xᵀQ_p x + c_pᵀx` over the stacked point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGame {
    dims: [usize; 3],
    q: [DMatrix<f64>; 3],
    c: [DVector<f64>; 3],
    name: String,
}

impl QuadraticGame {
    pub fn new(
        dims: [usize; 3],
        q: [DMatrix<f64>; 3],
        c: [DVector<f64>; 3],
    ) -> Result<Self, GameError> {
        let m: usize = dims.iter().sum();
        for (qp, cp) in q.iter().zip(&c) {
            if qp.shape() != (m, m) || cp.len() != m {
                return Err(GameError::Shape(format!(
                    "Q {:?}, c {} for total dimension {m}",
                    qp.shape(),
                    cp.len()
                )));
            }
        }
        let q = q.map(symmetrize);
        Ok(Self {
            dims,
            q,
            c,
            name: "quadratic".into(),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn offset(&self, p: Player) -> usize {
        self.dims[..p.index()].iter().sum()
    }

    pub fn q(&self, p: Player) -> &DMatrix<f64> {
        &self.q[p.index()]
    }

    pub fn c(&self, p: Player) -> &DVector<f64> {
        &self.c[p.index()]
    }

    /// `l3 = ½(x3 − x1 − x2)²`, `l2 = ½(x2 − 2x1)² + ½(x3 − 1)²`,
    /// `l1 = ½(x1² + x2² + x3²)`; equilibrium `(−2/7, 5/14, 1/14)`.
    pub fn reference() -> Self {
        let v = DVector::from_vec(vec![-1.0, -1.0, 1.0]);
        let a = DVector::from_vec(vec![-2.0, 1.0, 0.0]);
        let e3 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let q3 = &v * v.transpose();
        let q2 = &a * a.transpose() + &e3 * e3.transpose();
        let q1 = DMatrix::identity(3, 3);
        let c = [
            DVector::zeros(3),
            DVector::from_vec(vec![0.0, 0.0, -1.0]),
            DVector::zeros(3),
        ];
        Self::new([1, 1, 1], [q1, q2, q3], c)
            .expect("reference game is well formed")
            .with_name("reference")
    }

    /// Closed-form equilibrium of [`QuadraticGame::reference`].
    pub fn reference_equilibrium() -> JointPoint {
        JointPoint::from_slices(&[-2.0 / 7.0], &[5.0 / 14.0], &[1.0 / 14.0]).expect("finite")
    }

    /// `l_p = ½‖x_p‖²` with no coupling.
    pub fn decoupled(dims: [usize; 3]) -> Self {
        let m: usize = dims.iter().sum();
        let mut q = [
            DMatrix::zeros(m, m),
            DMatrix::zeros(m, m),
            DMatrix::zeros(m, m),
        ];
        let mut off = 0;
        for (p, &d) in dims.iter().enumerate() {
            for i in off..off + d {
                q[p][(i, i)] = 1.0;
            }
            off += d;
        }
        let c = [DVector::zeros(m), DVector::zeros(m), DVector::zeros(m)];
        Self::new(dims, q, c)
            .expect("well formed")
            .with_name("decoupled")
    }

    /// `Q_p = BᵀB + δI` with standard-normal `B` and linear terms uniform in
    /// `[−1, 1]`.
    pub fn random_positive_definite<R: Rng + ?Sized>(
        rng: &mut R,
        dims: [usize; 3],
        delta: f64,
    ) -> Self {
        let m: usize = dims.iter().sum();
        let mut draw = || -> DMatrix<f64> {
            let b = DMatrix::from_fn(m, m, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            b.transpose() * &b + DMatrix::identity(m, m) * delta
        };
        let q = [draw(), draw(), draw()];
        let c = [
            DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
        ];
        Self::new(dims, q, c)
            .expect("well formed")
            .with_name("random-pd")
    }

    /// Zero of ω. Since ω is affine for quadratic losses, its Jacobian is
    /// read off from differences against unit vectors.
    pub fn stationary_point(&self) -> Result<JointPoint, GameError> {
        let m: usize = self.dims.iter().sum();
        let origin = JointPoint::zeros(self.dims);
        let w0 = stackelberg_gradients(self, &origin)?.flat();
        let mut jac = DMatrix::zeros(m, m);
        for j in 0..m {
            let e = DVector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 });
            let w = stackelberg_gradients(self, &JointPoint::from_flat(self.dims, &e)?)?.flat();
            jac.set_column(j, &(w - &w0));
        }
        let sol = checked_solve(
            "game Jacobian",
            &jac,
            &DMatrix::from_column_slice(m, 1, (-w0).as_slice()),
        )?;
        JointPoint::from_flat(self.dims, &sol.column(0).into_owned())
    }
}

impl ThreePlayerGame for QuadraticGame {
    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn loss(&self, p: Player, x: &JointPoint) -> f64 {
        let v = x.flat();
        0.5 * v.dot(&(self.q(p) * &v)) + self.c(p).dot(&v)
    }

    fn grad(&self, p: Player, block: Player, x: &JointPoint) -> DVector<f64> {
        let v = x.flat();
        let g = self.q(p) * &v + self.c(p);
        g.rows(self.offset(block), self.dims[block.index()])
            .into_owned()
    }

    fn hess(&self, p: Player, row: Player, col: Player, _x: &JointPoint) -> DMatrix<f64> {
        self.q(p)
            .view(
                (self.offset(row), self.offset(col)),
                (self.dims[row.index()], self.dims[col.index()]),
            )
            .into_owned()
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Scalar game with a strict saddle of the leader's reduced loss at the
/// origin:
/// `l3 = ½(x3 − x1 − x2)²`, `l2 = ½x2² + ½(x3 − x1)²`,
/// `l1 = −½x1² + ¼x1⁴ + ½x2² + ½x3² − x1·x3`.
///
/// Here `h = x1 + x2`, `r ≡ 0` and `ω1 = x1³ − 2x1`, so the stationary
/// points are the origin and `(±√2, 0, ±√2)`; the plane `x1 = 0` is the
/// origin's stable set.
#[derive(Debug, Clone, Copy, Default)]
pub struct SaddleGame;

impl SaddleGame {
    pub fn saddle() -> JointPoint {
        JointPoint::zeros([1, 1, 1])
    }
}

impl ThreePlayerGame for SaddleGame {
    fn dims(&self) -> [usize; 3] {
        [1, 1, 1]
    }

    fn loss(&self, p: Player, x: &JointPoint) -> f64 {
        let (a, b, c) = (x.x1[0], x.x2[0], x.x3[0]);
        match p {
            Player::Follower => 0.5 * (c - a - b).powi(2),
            Player::Middle => 0.5 * b * b + 0.5 * (c - a).powi(2),
            Player::Leader => -0.5 * a * a + 0.25 * a.powi(4) + 0.5 * b * b + 0.5 * c * c - a * c,
        }
    }

    fn grad(&self, p: Player, block: Player, x: &JointPoint) -> DVector<f64> {
        let (a, b, c) = (x.x1[0], x.x2[0], x.x3[0]);
        let g = match (p, block) {
            (Player::Follower, Player::Follower) => c - a - b,
            (Player::Follower, _) => -(c - a - b),
            (Player::Middle, Player::Leader) => -(c - a),
            (Player::Middle, Player::Middle) => b,
            (Player::Middle, Player::Follower) => c - a,
            (Player::Leader, Player::Leader) => -a + a.powi(3) - c,
            (Player::Leader, Player::Middle) => b,
            (Player::Leader, Player::Follower) => c - a,
        };
        DVector::from_element(1, g)
    }

    fn name(&self) -> &str {
        "saddle"
    }
}
