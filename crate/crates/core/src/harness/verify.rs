use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::game::{
    diffeomorphism_check, game_jacobian, implicit_jacobians, operator_norm, run_dynamics,
    saddle_avoidance_experiment, Classification, JointPoint, LearnRates, Player, QuadraticGame,
    SaddleGame, ThreePlayerGame,
};

pub const RANDOM_GAMES: usize = 50;
pub const JACOBIAN_POINTS: usize = 100;
pub const SADDLE_INITS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameCheck {
    pub check_name: String,
    pub game_id: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl GameCheck {
    fn below(name: &str, game: &str, value: f64, threshold: f64) -> Self {
        Self {
            check_name: name.into(),
            game_id: game.into(),
            value,
            threshold,
            pass: value < threshold,
        }
    }

    fn at_least(name: &str, game: &str, value: f64, threshold: f64) -> Self {
        Self {
            check_name: name.into(),
            game_id: game.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }
}

fn rates() -> LearnRates {
    LearnRates::new(0.1, 0.2, 0.4).expect("ordered rates")
}

fn random_point<R: Rng + ?Sized>(
    rng: &mut R,
    dims: [usize; 3],
) -> Result<JointPoint, HarnessError> {
    let m: usize = dims.iter().sum();
    Ok(JointPoint::from_flat(
        dims,
        &DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
    )?)
}

/// Runs every game-dynamics check; `seed` drives the random games, the
/// sampled points and the saddle initializations.
pub fn game_verify(seed: u64) -> Result<Vec<GameCheck>, HarnessError> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let g = QuadraticGame::reference();
    let start = JointPoint::from_slices(&[1.0], &[-1.0], &[0.5])?;
    let trace = run_dynamics(&g, &start, &rates(), 10_000, 1e-11)?;
    let dist = trace
        .last()
        .distance(&QuadraticGame::reference_equilibrium());
    out.push(GameCheck::below(
        "converged_distance",
        "reference",
        dist,
        1e-6,
    ));
    out.push(GameCheck::below(
        "iterations",
        "reference",
        trace.iterates.len() as f64,
        10_001.0,
    ));
    out.push(GameCheck::below(
        "omega_norm",
        "reference",
        trace.final_omega_norm(),
        1e-10,
    ));
    let dfse = trace.classification == Some(Classification::Dfse);
    out.push(GameCheck::at_least(
        "is_dfse",
        "reference",
        if dfse { 1.0 } else { 0.0 },
        1.0,
    ));

    for i in 0..RANDOM_GAMES {
        let dims = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        ];
        let game = QuadraticGame::random_positive_definite(&mut rng, dims, 0.5);
        let x = random_point(&mut rng, dims)?;
        let j = implicit_jacobians(&game, &x)?;
        let (d1h, d2h, d1r) = nested::response_slopes(&game, &x)?;
        let id = format!("random-{i}");
        out.push(GameCheck::below(
            "d1h_rel_err",
            &id,
            nested::rel_err(&j.d1h, &d1h),
            1e-5,
        ));
        out.push(GameCheck::below(
            "d2h_rel_err",
            &id,
            nested::rel_err(&j.d2h, &d2h),
            1e-5,
        ));
        out.push(GameCheck::below(
            "d1r_rel_err",
            &id,
            nested::rel_err(&j.d1r, &d1r),
            1e-5,
        ));
    }

    let unit = LearnRates::from_timescales(1.0, rates().tau1(), rates().tau2())?;
    let points: Vec<JointPoint> = (0..JACOBIAN_POINTS)
        .map(|_| random_point(&mut rng, g.dims()))
        .collect::<Result<_, _>>()?;
    let mut l = 0.0f64;
    for x in &points {
        l = l.max(operator_norm(&game_jacobian(&g, x, &unit)?)?);
    }
    for (name, scale) in [("small_step_max_rho", 0.5), ("large_step_min_rho", 1e3)] {
        let r = LearnRates::from_timescales(scale / l, unit.tau1(), unit.tau2())?;
        let rhos: Vec<f64> = points
            .iter()
            .map(|x| diffeomorphism_check(&g, x, &r).map(|d| d.rho))
            .collect::<Result<_, _>>()?;
        out.push(if scale < 1.0 {
            GameCheck::below(
                name,
                "reference",
                rhos.iter().cloned().fold(0.0, f64::max),
                1.0,
            )
        } else {
            GameCheck::at_least(
                name,
                "reference",
                rhos.iter().cloned().fold(f64::INFINITY, f64::min),
                1.0,
            )
        });
    }

    let s = saddle_avoidance_experiment(
        &SaddleGame,
        &SaddleGame::saddle(),
        SADDLE_INITS,
        &rates(),
        10_000,
        rng.random(),
    )?;
    out.push(GameCheck::at_least(
        "saddle_avoided",
        "saddle",
        s.avoided as f64,
        99.0,
    ));
    Ok(out)
}

pub fn emit_game_checks<W: Write>(checks: &[GameCheck], w: W) -> Result<(), HarnessError> {
    let mut wr = csv::Writer::from_writer(w);
    for c in checks {
        wr.serialize(c)?;
    }
    wr.flush()?;
    Ok(())
}

/// Follower responses by nested Newton minimization on loss values.
mod nested {
    use super::*;
    use crate::game::GameError;

    const INNER_STEP: f64 = 1e-2;
    const OUTER_STEP: f64 = 1e-3;
    const NEWTON_ITERS: usize = 6;

    fn minimize(
        f: impl Fn(&DVector<f64>) -> f64,
        start: DVector<f64>,
    ) -> Result<DVector<f64>, GameError> {
        let n = start.len();
        let h = INNER_STEP;
        let e = |i: usize| DVector::from_fn(n, |k, _| if k == i { h } else { 0.0 });
        let mut y = start;
        for _ in 0..NEWTON_ITERS {
            let g = DVector::from_fn(n, |i, _| (f(&(&y + e(i))) - f(&(&y - e(i)))) / (2.0 * h));
            let hess = DMatrix::from_fn(n, n, |i, j| {
                let (ei, ej) = (e(i), e(j));
                (f(&(&y + &ei + &ej)) - f(&(&y + &ei - &ej)) - f(&(&y - &ei + &ej))
                    + f(&(&y - &ei - &ej)))
                    / (4.0 * h * h)
            });
            let step = hess.lu().solve(&g).ok_or(GameError::Singular {
                which: "nested Hessian",
                cond: f64::INFINITY,
            })?;
            y -= step;
        }
        Ok(y)
    }

    fn follower<G: ThreePlayerGame>(
        game: &G,
        x1: &DVector<f64>,
        x2: &DVector<f64>,
    ) -> Result<DVector<f64>, GameError> {
        minimize(
            |x3| {
                let p = JointPoint {
                    x1: x1.clone(),
                    x2: x2.clone(),
                    x3: x3.clone(),
                };
                game.loss(Player::Follower, &p)
            },
            DVector::zeros(game.dims()[2]),
        )
    }

    fn middle<G: ThreePlayerGame>(game: &G, x1: &DVector<f64>) -> Result<DVector<f64>, GameError> {
        // an inner failure becomes a NaN loss, which fails the comparison
        minimize(
            |y| match follower(game, x1, y) {
                Ok(x3) => game.loss(
                    Player::Middle,
                    &JointPoint {
                        x1: x1.clone(),
                        x2: y.clone(),
                        x3,
                    },
                ),
                Err(_) => f64::NAN,
            },
            DVector::zeros(game.dims()[1]),
        )
    }

    fn slope(
        f: impl Fn(&DVector<f64>) -> Result<DVector<f64>, GameError>,
        at: &DVector<f64>,
    ) -> Result<DMatrix<f64>, GameError> {
        let mut cols = Vec::with_capacity(at.len());
        for j in 0..at.len() {
            let mut p = at.clone();
            p[j] += OUTER_STEP;
            let mut m = at.clone();
            m[j] -= OUTER_STEP;
            cols.push((f(&p)? - f(&m)?) / (2.0 * OUTER_STEP));
        }
        Ok(DMatrix::from_columns(&cols))
    }

    type Slopes = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

    pub fn response_slopes<G: ThreePlayerGame>(
        game: &G,
        x: &JointPoint,
    ) -> Result<Slopes, GameError> {
        let d1h = slope(|x1| follower(game, x1, &x.x2), &x.x1)?;
        let d2h = slope(|x2| follower(game, &x.x1, x2), &x.x2)?;
        let d1r = slope(|x1| middle(game, x1), &x.x1)?;
        Ok((d1h, d2h, d1r))
    }

    pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }
}
