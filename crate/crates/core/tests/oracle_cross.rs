//! Quantum-jump trajectories against the exact master equation.

use twachain::model::ChainParams;
use twachain::oracle::{evolve_dense, evolve_mcwf, FockConfig, McwfOptions};

#[test]
fn single_site_jumps_match_master_equation() {
    let p = ChainParams::new(1, 2, 1.0, 0.0, 2.0).with_kerr(0.5);
    let grid: Vec<f64> = (0..=8).map(|i| 0.5 * i as f64).collect();
    let cfg = FockConfig::new(24, 1);
    let dense = evolve_dense(&p, cfg, &grid, None, None).unwrap();
    let mc = evolve_mcwf(&p, cfg, 1000, &grid, 3, &McwfOptions::default()).unwrap();
    for i in 1..grid.len() {
        let (m, se, exact) = (mc.series.n[0][i], mc.series.n_se[0][i], dense.series.n[0][i]);
        assert!((m - exact).abs() < 3.0 * se, "t={} n {m} ± {se} vs {exact}", grid[i]);
        let (m, se, exact) = (mc.series.dn[0][i], mc.series.dn_se[0][i], dense.series.dn[0][i]);
        assert!((m - exact).abs() < 3.0 * se, "t={} δn {m} ± {se} vs {exact}", grid[i]);
    }
}

#[test]
fn two_site_jumps_match_master_equation() {
    let p = ChainParams::new(2, 2, 1.0, 1.0, 0.6).with_kerr(0.5);
    let grid: Vec<f64> = (0..=4).map(|i| 1.0 * i as f64).collect();
    let cfg = FockConfig::new(14, 2);
    let dense = evolve_dense(&p, cfg, &grid, None, None).unwrap();
    let mc = evolve_mcwf(&p, cfg, 600, &grid, 8, &McwfOptions::default()).unwrap();
    for site in 0..2 {
        for i in 1..grid.len() {
            let (m, se, exact) = (mc.series.n[site][i], mc.series.n_se[site][i], dense.series.n[site][i]);
            assert!((m - exact).abs() < 3.0 * se + 1e-9, "site {site} t={} n {m} ± {se} vs {exact}", grid[i]);
        }
    }
}
