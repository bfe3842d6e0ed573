//! Closed chains: norm and classical energy along Gross-Pitaevskii trajectories.

use num_complex::Complex64;
use proptest::prelude::*;
use twachain::engine::{classical_energy, Dynamics, Stepper};
use twachain::model::ChainParams;

fn drift(p: &ChainParams, init: Vec<Complex64>, dt: f64, t: f64) -> (f64, f64) {
    let mut f = init;
    let n0: f64 = f.iter().map(|a| a.norm_sqr()).sum();
    let e0 = classical_energy(p, &f);
    let mut st = Stepper::new(p, Dynamics::Gp, dt);
    for _ in 0..(t / dt).round() as usize {
        st.step(&mut f, None);
    }
    let n1: f64 = f.iter().map(|a| a.norm_sqr()).sum();
    ((n1 / n0 - 1.0).abs(), ((classical_energy(p, &f) - e0) / e0).abs())
}

#[test]
fn closed_chain_conserves_norm_and_energy() {
    let p = ChainParams::new(8, 2, 5.6, 2.2, 0.0).with_kerr(0.1).with_loss(0.0);
    let init = (0..8).map(|s| Complex64::from_polar(2.0 + 0.3 * s as f64, 0.7 * s as f64)).collect();
    let (norm, energy) = drift(&p, init, 5e-5, 10.0);
    assert!(norm < 1e-8, "norm drift {norm:e}");
    assert!(energy < 1e-6, "energy drift {energy:e}");
}

#[test]
fn drift_shrinks_as_dt_cubed() {
    let p = ChainParams::new(8, 2, 5.6, 2.2, 0.0).with_kerr(0.1).with_loss(0.0);
    let init: Vec<Complex64> = (0..8).map(|s| Complex64::from_polar(2.0, 1.1 * s as f64)).collect();
    let (a, _) = drift(&p, init.clone(), 4e-4, 10.0);
    let (b, _) = drift(&p, init, 2e-4, 10.0);
    assert!((6.0..10.0).contains(&(a / b)), "{}", a / b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_closed_chains_conserve_norm(
        amps in prop::collection::vec((0.0f64..3.0, 0.0f64..6.3), 8),
        j in 0.1f64..3.0,
        u in 0.0f64..0.3,
    ) {
        let p = ChainParams::new(8, 2, 5.6, j, 0.0).with_kerr(u).with_loss(0.0);
        let init: Vec<Complex64> = amps.iter().map(|&(r, th)| Complex64::from_polar(r + 0.1, th)).collect();
        let (norm, _) = drift(&p, init, 1e-4, 2.0);
        prop_assert!(norm < 1e-6, "norm drift {norm:e}");
    }
}
