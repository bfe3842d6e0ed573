//! Noiseless linear chains against the exact matrix exponential.

use nalgebra::DMatrix;
use num_complex::Complex64;
use twachain::engine::{Dynamics, Stepper};
use twachain::model::ChainParams;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Single-particle generator of the lossy, undriven, non-interacting chain.
fn generator(p: &ChainParams) -> DMatrix<Complex64> {
    let l = p.sites;
    let mut a = DMatrix::<Complex64>::zeros(l, l);
    for s in 0..l {
        a[(s, s)] = I * p.detuning;
        if s + 1 < l {
            a[(s, s + 1)] = I * p.hopping;
            a[(s + 1, s)] = I * p.hopping;
        }
    }
    a[(0, 0)] -= 0.5 * p.loss;
    a[(l - 1, l - 1)] -= 0.5 * p.loss;
    a
}

fn max_error(p: &ChainParams, dt: f64, t: f64) -> f64 {
    let l = p.sites;
    let init: Vec<Complex64> = (0..l).map(|s| Complex64::new(1.0 + 0.1 * s as f64, -0.3 * s as f64)).collect();
    let exact = (generator(p) * Complex64::new(t, 0.0)).exp() * nalgebra::DVector::from_vec(init.clone());
    let mut f = init;
    let mut st = Stepper::new(p, Dynamics::Gp, dt);
    for _ in 0..(t / dt).round() as usize {
        st.step(&mut f, None);
    }
    f.iter().zip(exact.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
}

#[test]
fn heun_matches_matrix_exponential() {
    let p = ChainParams::new(6, 2, 0.0, 0.5, 0.0).with_kerr(0.0);
    let err = max_error(&p, 1e-3, 5.0);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn error_is_second_order_at_reference_parameters() {
    let p = ChainParams::new(6, 2, 5.6, 2.2, 0.0).with_kerr(0.0);
    let coarse = max_error(&p, 2e-3, 5.0);
    let fine = max_error(&p, 1e-3, 5.0);
    let ratio = coarse / fine;
    assert!((3.6..4.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn single_lossy_site_decays_at_half_rate() {
    let p = ChainParams::new(1, 2, 1.3, 0.0, 0.0).with_kerr(0.0);
    let a0 = Complex64::new(0.8, 0.6);
    let mut f = vec![a0];
    let mut st = Stepper::new(&p, Dynamics::Gp, 1e-3);
    for _ in 0..2000 {
        st.step(&mut f, None);
    }
    let exact = a0 * (I * 1.3 * 2.0 - 0.5 * 2.0).exp();
    assert!((f[0] - exact).norm() < 1e-6);
}
