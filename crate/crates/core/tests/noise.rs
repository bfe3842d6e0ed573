//! Fluctuation-dissipation checks of the Wigner noise.

use num_complex::Complex64;
use twachain::engine::{Dynamics, FieldEnsemble, Stepper};
use twachain::model::{ChainParams, InitialCondition};
use twachain::oracle::ExpectationSeries;

/// Mean and standard error of `x`.
fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn evolve(p: &ChainParams, init: &InitialCondition, n_traj: usize, t: f64) -> FieldEnsemble {
    let dt = 5e-3;
    let (mut ens, mut noise) = FieldEnsemble::sample(init, p.sites, n_traj, 21);
    let st = Stepper::new(p, Dynamics::Twa, dt);
    for i in 0..n_traj {
        let mut s = st.clone();
        let f = ens.trajectory_mut(i);
        for _ in 0..(t / dt).round() as usize {
            s.step_with(f, &mut noise[i]);
        }
    }
    ens
}

#[test]
fn lossy_vacuum_stays_vacuum() {
    let p = ChainParams::new(3, 2, 5.6, 2.2, 0.0).with_kerr(0.0);
    let ens = evolve(&p, &InitialCondition::Vacuum, 4000, 6.0);
    for s in 0..3 {
        let x: Vec<f64> = ens.site_values(s).iter().map(|a| a.norm_sqr() - 0.5).collect();
        let (m, se) = mean_se(&x);
        assert!(m.abs() < 3.0 * se, "site {s}: n = {m} ± {se}");
    }
}

#[test]
fn coherent_state_decays_and_stays_poissonian() {
    let p = ChainParams::new(1, 2, 0.0, 0.0, 0.0).with_kerr(0.0);
    let a0 = Complex64::new(2.0, 0.0);
    let init = InitialCondition::Explicit {
        fields: vec![a0],
        vacuum_noise: true,
    };
    let t = 1.0;
    let ens = evolve(&p, &init, 4000, t);
    let x: Vec<f64> = ens.site_values(0).iter().map(|a| a.norm_sqr()).collect();
    let n: Vec<Vec<Vec<f64>>> = x.iter().map(|x| vec![vec![x - 0.5]]).collect();
    let m2: Vec<Vec<Vec<f64>>> = x.iter().map(|x| vec![vec![x * x - 2.0 * x + 0.5]]).collect();
    let s = ExpectationSeries::from_samples(vec![t], &n, &m2);
    let exact = a0.norm_sqr() * (-t).exp();
    assert!((s.n[0][0] - exact).abs() < 3.0 * s.n_se[0][0], "n = {} ± {}, exact {exact}", s.n[0][0], s.n_se[0][0]);
    // δn = ⟨a†²a²⟩ − n² vanishes for a coherent state.
    assert!(s.dn[0][0].abs() < 3.0 * s.dn_se[0][0], "δn = {} ± {}", s.dn[0][0], s.dn_se[0][0]);
}
