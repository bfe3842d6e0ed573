//! Two-replica decorrelation on a chaotic chain.

use twachain::engine::{Dynamics, FieldEnsemble};
use twachain::harness::{run_point, RunConfig};
use twachain::otoc::{compute_otoc, OtocSpec};

const CHAOTIC: &str = r#"
[chain]
L = 16
n = 2
delta = 5.6
J = 2.2
U = 0.1
zeta = 10.0

[integration]
t_transient = 300.0
t_window = 1.0
n_traj = 24
master_seed = 4

[output]
wigner_sites = "none"
thermo = false
"#;

fn steady() -> (FieldEnsemble, Vec<twachain::engine::NoiseProcess>, twachain::model::ChainParams) {
    let cfg = RunConfig::from_toml_str(CHAOTIC).unwrap().resolved().unwrap();
    let r = run_point(&cfg).unwrap();
    let noise = (0..cfg.integration.n_traj as u64)
        .map(|i| twachain::engine::NoiseProcess::new(cfg.integration.master_seed ^ 0x5eed, i))
        .collect();
    (r.final_state, noise, cfg.chain)
}

#[test]
fn cone_bounds_and_null_kick() {
    let (state, noise, params) = steady();
    let l = params.sites;
    let spec = OtocSpec::uniform(0, 1e-2, 4.0, 0.1);
    let s = compute_otoc(&state, &mut noise.clone(), &spec, &params, Dynamics::Twa, 5e-3, true).unwrap();
    for row in &s.d {
        assert!(row.iter().all(|&d| (0.0..=2.0).contains(&d)));
    }
    // Only the kicked site starts decorrelated.
    assert!((s.d[0][0] - (1.0 - 1e-2f64.cos())).abs() < 1e-12);
    assert!(s.d[1..].iter().all(|row| row[0] == 0.0));
    // Information arrives at the far end after the near end.
    let first = |row: &Vec<f64>| row.iter().position(|&d| d >= 0.1);
    let near = first(&s.d[1]).expect("front reaches site 2");
    let far = first(&s.d[l - 1]).unwrap_or(usize::MAX);
    assert!(far > near);

    let null = OtocSpec::uniform(0, 0.0, 2.0, 0.5);
    let z = compute_otoc(&state, &mut noise.clone(), &null, &params, Dynamics::Twa, 5e-3, true).unwrap();
    assert!(z.d.iter().flatten().all(|&d| d == 0.0));
}

#[test]
fn early_decorrelation_scales_as_epsilon_squared() {
    let (state, noise, params) = steady();
    let at = |eps: f64| {
        let spec = OtocSpec::uniform(0, eps, 0.3, 0.1);
        let s = compute_otoc(&state, &mut noise.clone(), &spec, &params, Dynamics::Twa, 5e-3, true).unwrap();
        s.d[1][3]
    };
    let ratio = at(2e-3) / at(1e-3);
    assert!((3.8..4.2).contains(&ratio), "{ratio}");
}
