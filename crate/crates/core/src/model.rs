//! Physical parameters, integration controls and initial-condition policies.
//!
//! Every energy and rate is measured in units of the single-photon loss rate
//! `loss` (γ), and every time in units of 1/γ. The defaults `loss = 1` and
//! `kerr = 0.1` are applied when a configuration leaves them unset.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default Kerr strength U in units of γ.
pub const DEFAULT_KERR: f64 = 0.1;
/// Default single-photon loss rate γ (the energy unit).
pub const DEFAULT_LOSS: f64 = 1.0;
/// Default ring radius used by [`InitialCondition::RingState`].
pub const DEFAULT_RING_RADIUS: f64 = 10.0;
/// Default fixed integration step, in units of 1/γ.
pub const DEFAULT_DT: f64 = 5e-3;

fn default_kerr() -> f64 {
    DEFAULT_KERR
}

fn default_loss() -> f64 {
    DEFAULT_LOSS
}

/// Parameters of the n-photon driven, boundary-dissipative Bose-Hubbard chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    /// Number of sites L.
    #[serde(alias = "L")]
    pub sites: usize,
    /// Photon order n of the boundary drive.
    #[serde(alias = "n")]
    pub photon_order: u32,
    /// Detuning Δ between drive and cavity frequency.
    #[serde(alias = "delta")]
    pub detuning: f64,
    /// On-site Kerr strength U.
    #[serde(alias = "U", default = "default_kerr")]
    pub kerr: f64,
    /// Nearest-neighbour hopping J.
    #[serde(alias = "J")]
    pub hopping: f64,
    /// Drive amplitude ζ at site 1.
    #[serde(alias = "zeta")]
    pub drive: f64,
    /// Single-photon loss rate γ at sites 1 and L.
    #[serde(alias = "gamma", default = "default_loss")]
    pub loss: f64,
}

impl ChainParams {
    /// Parameters with the default Kerr strength and unit loss.
    pub fn new(sites: usize, photon_order: u32, detuning: f64, hopping: f64, drive: f64) -> Self {
        ChainParams {
            sites,
            photon_order,
            detuning,
            kerr: DEFAULT_KERR,
            hopping,
            drive,
            loss: DEFAULT_LOSS,
        }
    }

    pub fn with_kerr(mut self, kerr: f64) -> Self {
        self.kerr = kerr;
        self
    }

    pub fn with_loss(mut self, loss: f64) -> Self {
        self.loss = loss;
        self
    }

    /// Index of the last site. For a single-site chain the driven and the
    /// undriven edge coincide and the site is damped once.
    pub fn last(&self) -> usize {
        self.sites - 1
    }
}

/// Initial-state policy for the phase-space fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Bosonic vacuum: each α is complex Gaussian with ⟨|α|²⟩ = 1/2.
    Vacuum,
    /// α = r e^{iθ} + ξ with θ uniform and ξ vacuum noise. θ is drawn per
    /// site, or once per trajectory when `shared_phase` is set.
    RingState {
        #[serde(default = "default_ring_radius")]
        radius: f64,
        #[serde(default)]
        shared_phase: bool,
    },
    /// Prescribed fields, optionally dressed with vacuum noise.
    Explicit {
        fields: Vec<Complex64>,
        #[serde(default)]
        vacuum_noise: bool,
    },
}

fn default_ring_radius() -> f64 {
    DEFAULT_RING_RADIUS
}

impl InitialCondition {
    /// Policy used when the configuration leaves the initial state unset:
    /// the vacuum for n ≤ 2 and a ring of radius 10 for n ≥ 3, where the
    /// vacuum is a stable classical fixed point.
    pub fn default_for(photon_order: u32) -> Self {
        if photon_order >= 3 {
            InitialCondition::RingState {
                radius: DEFAULT_RING_RADIUS,
                shared_phase: false,
            }
        } else {
            InitialCondition::Vacuum
        }
    }

    /// Draws the initial fields of one trajectory.
    pub fn sample<R: Rng + ?Sized>(&self, sites: usize, rng: &mut R) -> Vec<Complex64> {
        match self {
            InitialCondition::Vacuum => (0..sites).map(|_| vacuum_noise(rng)).collect(),
            InitialCondition::RingState { radius, shared_phase } => {
                let shared = shared_phase.then(|| rng.gen_range(-PI..PI));
                (0..sites)
                    .map(|_| {
                        let theta = shared.unwrap_or_else(|| rng.gen_range(-PI..PI));
                        Complex64::from_polar(*radius, theta) + vacuum_noise(rng)
                    })
                    .collect()
            }
            InitialCondition::Explicit {
                fields,
                vacuum_noise: noisy,
            } => fields
                .iter()
                .map(|&a| if *noisy { a + vacuum_noise(rng) } else { a })
                .collect(),
        }
    }
}

/// Complex Gaussian with variance 1/4 per quadrature.
pub fn vacuum_noise<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(0.5 * re, 0.5 * im)
}

fn default_sample_interval() -> f64 {
    1.0
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

/// Numerical controls of a stochastic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationControls {
    /// Fixed time step (1/γ).
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Burn-in time discarded before averaging (1/γ).
    pub t_transient: f64,
    /// Steady-state averaging window Δτ (1/γ).
    pub t_window: f64,
    /// Number of independent trajectories.
    pub n_traj: usize,
    /// Master seed from which every trajectory stream is derived.
    #[serde(default)]
    pub master_seed: u64,
    /// Spacing of the sampling times inside the window (1/γ).
    #[serde(default = "default_sample_interval")]
    pub sample_interval: f64,
}

impl IntegrationControls {
    pub fn new(dt: f64, t_transient: f64, t_window: f64, n_traj: usize, master_seed: u64) -> Self {
        IntegrationControls {
            dt,
            t_transient,
            t_window,
            n_traj,
            master_seed,
            sample_interval: 1.0,
        }
    }

    /// Number of whole steps covering `duration`.
    pub fn steps_for(&self, duration: f64) -> usize {
        (duration / self.dt).round() as usize
    }
}

/// A single configuration problem reported by [`validate`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("drive amplitude must be non-negative, got {0}")]
    NegativeAmplitude(f64),
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("explicit initial fields have length {got}, chain has {expected} sites")]
    ExplicitFieldsLengthMismatch { expected: usize, got: usize },
}

/// Every violation found in a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Violations(pub Vec<ConfigError>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

impl std::error::Error for Violations {}

impl Violations {
    pub fn contains(&self, err: &ConfigError) -> bool {
        self.0.contains(err)
    }
}

/// A configuration that passed [`validate`]. Immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedConfig {
    params: ChainParams,
    initial: InitialCondition,
    controls: IntegrationControls,
}

impl ValidatedConfig {
    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn initial(&self) -> &InitialCondition {
        &self.initial
    }

    pub fn controls(&self) -> &IntegrationControls {
        &self.controls
    }

    /// Copy with a different master seed.
    pub fn with_seed(&self, master_seed: u64) -> Self {
        let mut out = self.clone();
        out.controls.master_seed = master_seed;
        out
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn check_finite(value: f64, name: &'static str, out: &mut Vec<ConfigError>) -> bool {
    if value.is_finite() {
        true
    } else {
        out.push(ConfigError::NonFinite(name));
        false
    }
}

/// Checks a parameter set and collects every violation.
pub fn validate(
    params: ChainParams,
    initial: InitialCondition,
    controls: IntegrationControls,
) -> Result<ValidatedConfig, Violations> {
    let mut errs = Vec::new();
    if params.sites == 0 {
        errs.push(ConfigError::NonPositive("L"));
    }
    if params.photon_order == 0 {
        errs.push(ConfigError::NonPositive("n"));
    }
    for (v, name) in [
        (params.detuning, "delta"),
        (params.hopping, "J"),
        (params.kerr, "U"),
        (params.drive, "zeta"),
        (params.loss, "gamma"),
    ] {
        check_finite(v, name, &mut errs);
    }
    if params.loss.is_finite() && params.loss <= 0.0 {
        errs.push(ConfigError::NonPositive("gamma"));
    }
    if params.kerr < 0.0 {
        errs.push(ConfigError::Negative("U"));
    }
    if params.drive < 0.0 {
        errs.push(ConfigError::NegativeAmplitude(params.drive));
    }
    match &initial {
        InitialCondition::Explicit { fields, .. } => {
            if params.sites > 0 && fields.len() != params.sites {
                errs.push(ConfigError::ExplicitFieldsLengthMismatch {
                    expected: params.sites,
                    got: fields.len(),
                });
            }
            if fields.iter().any(|a| !a.is_finite()) {
                errs.push(ConfigError::NonFinite("explicit fields"));
            }
        }
        InitialCondition::RingState { radius, .. } => {
            if check_finite(*radius, "ring radius", &mut errs) && *radius < 0.0 {
                errs.push(ConfigError::Negative("ring radius"));
            }
        }
        InitialCondition::Vacuum => {}
    }
    if !(controls.dt > 0.0) {
        errs.push(ConfigError::NonPositive("dt"));
    }
    if controls.n_traj == 0 {
        errs.push(ConfigError::NonPositive("n_traj"));
    }
    if check_finite(controls.t_window, "t_window", &mut errs) && controls.t_window < 0.0 {
        errs.push(ConfigError::Negative("t_window"));
    }
    if check_finite(controls.t_transient, "t_transient", &mut errs) && controls.t_transient < 0.0
    {
        errs.push(ConfigError::Negative("t_transient"));
    }
    if !(controls.sample_interval > 0.0) {
        errs.push(ConfigError::NonPositive("sample_interval"));
    }
    if errs.is_empty() {
        Ok(ValidatedConfig {
            params,
            initial,
            controls,
        })
    } else {
        Err(Violations(errs))
    }
}

/// Random stream of trajectory `index` under `master_seed`.
///
/// Each trajectory owns a distinct ChaCha8 stream, so its draws depend only on
/// `(master_seed, index)` and never on how trajectories are scheduled. The
/// 64-bit word counter can be saved and restored for checkpoints.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Derives an independent seed from a master seed and a label, e.g. a
/// sweep-point hash.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctrl() -> IntegrationControls {
        IntegrationControls::new(5e-3, 100.0, 100.0, 10, 7)
    }

    #[test]
    fn accepts_reference_parameter_sets() {
        let two = ChainParams::new(400, 2, 5.6, 2.2, 6.0);
        assert_eq!(two.kerr, 0.1);
        assert_eq!(two.loss, 1.0);
        assert!(validate(two, InitialCondition::Vacuum, ctrl()).is_ok());
        let three = ChainParams::new(20, 3, 7.0, 4.0, 1.4);
        assert!(validate(three, InitialCondition::default_for(3), ctrl()).is_ok());
    }

    #[test]
    fn rejects_empty_chain_and_collects_all_violations() {
        let mut p = ChainParams::new(0, 2, 5.6, 2.2, -1.0);
        p.loss = 0.0;
        let mut c = ctrl();
        c.dt = 0.0;
        let err = validate(p, InitialCondition::Vacuum, c).unwrap_err();
        assert!(err.contains(&ConfigError::NonPositive("L")));
        assert!(err.contains(&ConfigError::NonPositive("gamma")));
        assert!(err.contains(&ConfigError::NonPositive("dt")));
        assert!(err.contains(&ConfigError::NegativeAmplitude(-1.0)));
    }

    #[test]
    fn explicit_length_mismatch() {
        let p = ChainParams::new(3, 2, 5.6, 2.2, 1.0);
        let ic = InitialCondition::Explicit {
            fields: vec![Complex64::new(1.0, 0.0); 2],
            vacuum_noise: false,
        };
        let err = validate(p, ic, ctrl()).unwrap_err();
        assert_eq!(
            err.0,
            vec![ConfigError::ExplicitFieldsLengthMismatch {
                expected: 3,
                got: 2
            }]
        );
    }

    #[test]
    fn defaults_applied_when_unset_in_toml() {
        let p: ChainParams = toml::from_str("L = 5\nn = 2\ndelta = 5.6\nJ = 2.2\nzeta = 6.0\n").unwrap();
        assert_eq!(p.kerr, DEFAULT_KERR);
        assert_eq!(p.loss, DEFAULT_LOSS);
        assert_eq!(p.sites, 5);
    }

    #[test]
    fn higher_order_drives_default_to_ring() {
        assert_eq!(InitialCondition::default_for(2), InitialCondition::Vacuum);
        assert_eq!(
            InitialCondition::default_for(3),
            InitialCondition::RingState {
                radius: 10.0,
                shared_phase: false,
            }
        );
    }

    #[test]
    fn vacuum_sampling_statistics() {
        let mut rng = trajectory_rng(11, 0);
        let n = 200_000;
        let samples = InitialCondition::Vacuum.sample(n, &mut rng);
        let nf = n as f64;
        let abs2: Vec<f64> = samples.iter().map(|a| a.norm_sqr()).collect();
        let mean = abs2.iter().sum::<f64>() / nf;
        let var = abs2.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        assert!((mean - 0.5).abs() < 3.0 * (var / nf).sqrt(), "mean {mean}");
        let re = samples.iter().map(|a| a.re).sum::<f64>() / nf;
        let im = samples.iter().map(|a| a.im).sum::<f64>() / nf;
        let se = (0.25 / nf).sqrt();
        assert!(re.abs() < 3.0 * se && im.abs() < 3.0 * se);
    }

    #[test]
    fn ring_phases_fill_octants_uniformly() {
        let mut rng = trajectory_rng(3, 1);
        let n = 100_000;
        let samples = InitialCondition::RingState { radius: 10.0, shared_phase: false }.sample(n, &mut rng);
        let mut octants = [0usize; 8];
        for a in &samples {
            let k = (((a.arg() + PI) / (PI / 4.0)).floor() as usize).min(7);
            octants[k] += 1;
        }
        for c in octants {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.125).abs() < 0.01, "octant fraction {frac}");
        }
    }

    #[test]
    fn shared_ring_phase_is_common_to_all_sites() {
        let ring = InitialCondition::RingState { radius: 10.0, shared_phase: true };
        let mut thetas = Vec::new();
        for traj in 0..200 {
            let f = ring.sample(6, &mut trajectory_rng(8, traj));
            // Vacuum noise of width 1/√2 on radius 10 moves the phase by ≲ 0.5.
            let z: Complex64 = f.iter().map(|a| a / a.norm()).sum::<Complex64>() / 6.0;
            assert!(z.norm() > 0.9);
            thetas.push(z.arg());
        }
        let mean = thetas.iter().map(|t| Complex64::from_polar(1.0, *t)).sum::<Complex64>() / 200.0;
        assert!(mean.norm() < 0.25);
    }

    #[test]
    fn trajectory_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| trajectory_rng(5, 2).gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = trajectory_rng(5, 2).gen();
        let y: u64 = trajectory_rng(5, 3).gen();
        assert_ne!(x, y);
    }

    #[test]
    fn hash_changes_with_seed() {
        let cfg = validate(ChainParams::new(4, 2, 5.6, 2.2, 3.5), InitialCondition::Vacuum, ctrl()).unwrap();
        assert_eq!(cfg.hash(), cfg.clone().hash());
        assert_ne!(cfg.hash(), cfg.with_seed(8).hash());
    }
}
