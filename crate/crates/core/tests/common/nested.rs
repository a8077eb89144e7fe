//! Follower responses by brute nested minimization, using loss values only.
//!
//! Derivatives come from central differences with a wide step. For the
//! quadratic games these oracles are used on, central differences have no
//! truncation error, so a wide step only shrinks rounding error.

use mafenn_core::game::{JointPoint, Player, ThreePlayerGame};
use nalgebra::{DMatrix, DVector};

const INNER_STEP: f64 = 1e-2;
const OUTER_STEP: f64 = 1e-3;
const NEWTON_ITERS: usize = 6;

/// Newton minimization of `f` over `R^n` with finite-difference derivatives.
pub fn minimize(f: impl Fn(&DVector<f64>) -> f64, start: DVector<f64>) -> DVector<f64> {
    let n = start.len();
    let h = INNER_STEP;
    let mut y = start;
    for _ in 0..NEWTON_ITERS {
        let e = |i: usize| DVector::from_fn(n, |k, _| if k == i { h } else { 0.0 });
        let g = DVector::from_fn(n, |i, _| (f(&(&y + e(i))) - f(&(&y - e(i)))) / (2.0 * h));
        let hess = DMatrix::from_fn(n, n, |i, j| {
            let (ei, ej) = (e(i), e(j));
            (f(&(&y + &ei + &ej)) - f(&(&y + &ei - &ej)) - f(&(&y - &ei + &ej))
                + f(&(&y - &ei - &ej)))
                / (4.0 * h * h)
        });
        let step = hess.lu().solve(&g).expect("oracle Hessian invertible");
        y -= step;
    }
    y
}

/// `h(x1, x2) = argmin_x3 l3`.
pub fn follower<G: ThreePlayerGame>(
    game: &G,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
) -> DVector<f64> {
    let m3 = game.dims()[2];
    minimize(
        |x3| {
            let p = JointPoint {
                x1: x1.clone(),
                x2: x2.clone(),
                x3: x3.clone(),
            };
            game.loss(Player::Follower, &p)
        },
        DVector::zeros(m3),
    )
}

/// `r(x1) = argmin_y l2(x1, y, h(x1, y))`.
pub fn middle<G: ThreePlayerGame>(game: &G, x1: &DVector<f64>) -> DVector<f64> {
    let m2 = game.dims()[1];
    minimize(
        |y| {
            let x3 = follower(game, x1, y);
            let p = JointPoint {
                x1: x1.clone(),
                x2: y.clone(),
                x3,
            };
            game.loss(Player::Middle, &p)
        },
        DVector::zeros(m2),
    )
}

/// The point on the response manifold above `x1`.
pub fn on_manifold<G: ThreePlayerGame>(game: &G, x1: &DVector<f64>) -> JointPoint {
    let x2 = middle(game, x1);
    let x3 = follower(game, x1, &x2);
    JointPoint {
        x1: x1.clone(),
        x2,
        x3,
    }
}

fn slope(f: impl Fn(&DVector<f64>) -> DVector<f64>, at: &DVector<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..at.len())
        .map(|j| {
            let mut p = at.clone();
            p[j] += OUTER_STEP;
            let mut m = at.clone();
            m[j] -= OUTER_STEP;
            (f(&p) - f(&m)) / (2.0 * OUTER_STEP)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// `(D1h, D2h, D1r)` as slopes of the argmin maps at `x`.
pub fn response_slopes<G: ThreePlayerGame>(
    game: &G,
    x: &JointPoint,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d1h = slope(|x1| follower(game, x1, &x.x2), &x.x1);
    let d2h = slope(|x2| follower(game, &x.x1, x2), &x.x2);
    let d1r = slope(|x1| middle(game, x1), &x.x1);
    (d1h, d2h, d1r)
}

/// Gradient of the leader's reduced loss `x1 ↦ l1(x1, r(x1), h(x1, r(x1)))`.
pub fn leader_total_gradient<G: ThreePlayerGame>(game: &G, x1: &DVector<f64>) -> DVector<f64> {
    let reduced = |x1: &DVector<f64>| {
        DVector::from_element(1, game.loss(Player::Leader, &on_manifold(game, x1)))
    };
    slope(reduced, x1).row(0).transpose()
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}
