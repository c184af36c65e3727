//! Seeded random problem instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lqr::{validate, LqrProblem, Stage, StageCost, StageDynamics, TerminalCost};

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..=1.0))
}

fn uniform_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0))
}

fn stage(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Stage {
    let b = uniform_matrix(rng, m, m);
    let quu = &b * b.transpose() + DMatrix::identity(m, m);
    let c = uniform_matrix(rng, n, n);
    let psd = &c * c.transpose();
    let mut qux = uniform_matrix(rng, m, n) * 0.5;
    let quu_inv = quu.clone().cholesky().expect("Quu is positive definite").inverse();
    let r = uniform_matrix(rng, n, n);
    let row_sum = r.row_iter().map(|row| row.abs().sum()).fold(0.0, f64::max).max(1e-12);
    let fx = DMatrix::identity(n, n) * 0.6 + r * (0.45 / row_sum);
    let fu = uniform_matrix(rng, n, m);
    let f1 = uniform_vector(rng, n) * 0.5;
    let qx1 = uniform_vector(rng, n);
    let qu1 = uniform_vector(rng, m);

    // Qxx = CCᵀ + Quxᵀ Quu⁻¹ Qux keeps the Schur complement PSD; the cross
    // term is shrunk until round-off no longer breaks the check.
    for _ in 0..60 {
        let qxx = &psd + qux.transpose() * &quu_inv * &qux;
        let cost = StageCost::new(qxx, qux.clone(), quu.clone(), qx1.clone(), qu1.clone()).expect("consistent shapes");
        let dynamics = StageDynamics::new(fx.clone(), fu.clone(), f1.clone()).expect("consistent shapes");
        let st = Stage { cost, dynamics };
        let probe = LqrProblem::new(vec![st.clone()], TerminalCost::zero(n), DVector::zeros(n)).expect("shapes");
        if validate(&probe).is_ok() {
            return st;
        }
        qux *= 0.5;
    }
    let cost = StageCost::new(psd, DMatrix::zeros(m, n), quu, qx1, qu1).expect("consistent shapes");
    Stage {
        cost,
        dynamics: StageDynamics::new(fx, fu, f1).expect("consistent shapes"),
    }
}

/// Deterministic strictly convex instance with `‖Fx‖∞ ≤ 1.05`.
pub fn generate(n: usize, m: usize, horizon: usize, seed: u64) -> LqrProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = (0..horizon).map(|_| stage(&mut rng, n, m)).collect();
    let d = uniform_matrix(&mut rng, n, n);
    let terminal = TerminalCost::new(&d * d.transpose() + DMatrix::identity(n, n), uniform_vector(&mut rng, n))
        .expect("consistent shapes");
    let x_init = uniform_vector(&mut rng, n);
    LqrProblem::new(stages, terminal, x_init).expect("consistent shapes")
}
