//! Integration of the truncated-Wigner Langevin equations and of their
//! noiseless Gross-Pitaevskii limit.
//!
//! After multiplying the Langevin equations through by `-i`, the drift of the
//! fields reads
//!
//! ```text
//! dα₁/dt = i f(α₁) + iJ α₂ − iζ (α₁*)^(n−1) − (γ/2) α₁
//! dα_ℓ/dt = i f(α_ℓ) + iJ (α_{ℓ−1} + α_{ℓ+1})
//! dα_L/dt = i f(α_L) + iJ α_{L−1} − (γ/2) α_L
//! ```
//!
//! with `f(α) = Δα − U(|α|² − 1)α` for the Wigner dynamics and
//! `f(α) = Δα − U|α|²α` for the classical one. The two lossy edges receive the
//! additive noise `−i √(γ/2) dW` with `⟨|dW|²⟩ = dt`.
//!
//! Steps use a stochastic Heun (predictor-corrector) scheme: the noise is
//! additive, so the same increment enters both stages, and the deterministic
//! part is second order.

use std::io::{self, Read, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::model::{trajectory_rng, ChainParams, InitialCondition};

/// Default phase kick applied to the perturbed replica.
pub const DEFAULT_EPSILON: f64 = 1e-2;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("non-finite field in trajectory {traj} at site {site}, t = {time}")]
    NonFiniteField { traj: usize, site: usize, time: f64 },
    #[error("perturbed site {site} outside chain of {sites} sites")]
    PerturbSiteOutOfRange { site: usize, sites: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which equations of motion drive the fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Truncated Wigner: Weyl-corrected Kerr term plus boundary noise.
    Twa,
    /// Classical Gross-Pitaevskii: bare Kerr term, no noise.
    Gp,
}

impl Dynamics {
    fn kerr_shift(self) -> f64 {
        match self {
            Dynamics::Twa => 1.0,
            Dynamics::Gp => 0.0,
        }
    }
}

/// Drift of the Wigner Langevin equations.
pub fn drift(params: &ChainParams, fields: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); fields.len()];
    drift_into(params, Dynamics::Twa, fields, &mut out);
    out
}

/// Drift of the classical Gross-Pitaevskii equations.
pub fn drift_gp(params: &ChainParams, fields: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); fields.len()];
    drift_into(params, Dynamics::Gp, fields, &mut out);
    out
}

/// (α*)^(n−1) without going through `powc`.
#[inline]
fn conj_pow(a: Complex64, exp: u32) -> Complex64 {
    let c = a.conj();
    match exp {
        0 => Complex64::new(1.0, 0.0),
        1 => c,
        2 => c * c,
        _ => c.powu(exp),
    }
}

pub fn drift_into(params: &ChainParams, dynamics: Dynamics, fields: &[Complex64], out: &mut [Complex64]) {
    let l = fields.len();
    debug_assert_eq!(l, out.len());
    let shift = dynamics.kerr_shift();
    let delta = params.detuning;
    let u = params.kerr;
    let j = params.hopping;
    for s in 0..l {
        let a = fields[s];
        let mut neigh = Complex64::default();
        if s > 0 {
            neigh += fields[s - 1];
        }
        if s + 1 < l {
            neigh += fields[s + 1];
        }
        let freq = delta - u * (a.norm_sqr() - shift);
        out[s] = I * (a * freq + neigh * j);
    }
    let half_loss = 0.5 * params.loss;
    out[0] -= I * params.drive * conj_pow(fields[0], params.photon_order - 1);
    out[0] -= fields[0] * half_loss;
    if l > 1 {
        out[l - 1] -= fields[l - 1] * half_loss;
    }
}

/// Classical energy `Σ[−Δ|α|² + (U/2)|α|⁴] − J Σ(α*_{ℓ+1}α_ℓ + c.c.) + (ζ/n)(α₁*ⁿ + α₁ⁿ)`,
/// conserved by the Gross-Pitaevskii flow when γ = 0.
pub fn classical_energy(params: &ChainParams, fields: &[Complex64]) -> f64 {
    let mut e = 0.0;
    for a in fields {
        let n = a.norm_sqr();
        e += -params.detuning * n + 0.5 * params.kerr * n * n;
    }
    for w in fields.windows(2) {
        e -= 2.0 * params.hopping * (w[1].conj() * w[0]).re;
    }
    if let Some(a) = fields.first() {
        let order = params.photon_order;
        e += params.drive / order as f64 * 2.0 * a.powu(order).re;
    }
    e
}

/// Complex Wiener increments for the two lossy edges over one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoiseIncrement {
    pub first: Complex64,
    pub last: Complex64,
}

/// Per-trajectory source of boundary noise increments.
///
/// Each complex increment has independent real and imaginary parts of
/// variance `dt/2`, so `⟨|ΔW|²⟩ = dt`. Increments for site 1 are drawn before
/// those for site L at every step.
#[derive(Debug, Clone)]
pub struct NoiseProcess {
    rng: ChaCha8Rng,
    index: u64,
}

impl NoiseProcess {
    pub fn new(master_seed: u64, index: u64) -> Self {
        NoiseProcess {
            rng: trajectory_rng(master_seed, index),
            index,
        }
    }

    /// Wraps an existing stream (used after drawing initial conditions from it).
    pub fn from_rng(rng: ChaCha8Rng, index: u64) -> Self {
        NoiseProcess { rng, index }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Position of the underlying counter, for checkpoints.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    fn complex(&mut self, sd: f64) -> Complex64 {
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = self.rng.sample(StandardNormal);
        Complex64::new(sd * re, sd * im)
    }

    pub fn increment(&mut self, dt: f64) -> NoiseIncrement {
        let sd = (0.5 * dt).sqrt();
        NoiseIncrement {
            first: self.complex(sd),
            last: self.complex(sd),
        }
    }
}

/// Reusable Heun stepper for single trajectories.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: ChainParams,
    dynamics: Dynamics,
    dt: f64,
    k0: Vec<Complex64>,
    k1: Vec<Complex64>,
    trial: Vec<Complex64>,
}

impl Stepper {
    pub fn new(params: &ChainParams, dynamics: Dynamics, dt: f64) -> Self {
        let l = params.sites;
        Stepper {
            params: params.clone(),
            dynamics,
            dt,
            k0: vec![Complex64::default(); l],
            k1: vec![Complex64::default(); l],
            trial: vec![Complex64::default(); l],
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    /// Noise kicks `−i √(γ/2) ΔW` at the two lossy edges.
    fn kicks(&self, noise: &NoiseIncrement) -> (Complex64, Complex64) {
        let amp = (0.5 * self.params.loss).sqrt();
        (-I * amp * noise.first, -I * amp * noise.last)
    }

    /// Advances `fields` by one step. `noise` is ignored for classical dynamics.
    pub fn step(&mut self, fields: &mut [Complex64], noise: Option<&NoiseIncrement>) {
        let dt = self.dt;
        let l = fields.len();
        let (kick_first, kick_last) = match (self.dynamics, noise) {
            (Dynamics::Twa, Some(n)) => self.kicks(n),
            _ => (Complex64::default(), Complex64::default()),
        };
        drift_into(&self.params, self.dynamics, fields, &mut self.k0);
        for s in 0..l {
            self.trial[s] = fields[s] + self.k0[s] * dt;
        }
        self.trial[0] += kick_first;
        if l > 1 {
            self.trial[l - 1] += kick_last;
        }
        drift_into(&self.params, self.dynamics, &self.trial, &mut self.k1);
        let half = 0.5 * dt;
        for s in 0..l {
            fields[s] += (self.k0[s] + self.k1[s]) * half;
        }
        fields[0] += kick_first;
        if l > 1 {
            fields[l - 1] += kick_last;
        }
    }

    /// Draws the increment from `noise` (Wigner dynamics only) and steps.
    pub fn step_with(&mut self, fields: &mut [Complex64], noise: &mut NoiseProcess) {
        match self.dynamics {
            Dynamics::Twa => {
                let inc = noise.increment(self.dt);
                self.step(fields, Some(&inc));
            }
            Dynamics::Gp => self.step(fields, None),
        }
    }

    /// Advances two replicas with one shared noise increment.
    pub fn step_pair(&mut self, a: &mut [Complex64], b: &mut [Complex64], noise: &mut NoiseProcess) {
        match self.dynamics {
            Dynamics::Twa => {
                let inc = noise.increment(self.dt);
                self.step(a, Some(&inc));
                self.step(b, Some(&inc));
            }
            Dynamics::Gp => {
                self.step(a, None);
                self.step(b, None);
            }
        }
    }
}

/// First non-finite site, if any.
pub fn first_non_finite(fields: &[Complex64]) -> Option<usize> {
    fields.iter().position(|a| !a.is_finite())
}

/// Fields of many independent trajectories at a common time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEnsemble {
    sites: usize,
    fields: Vec<Complex64>,
    pub time: f64,
}

impl FieldEnsemble {
    pub fn new(sites: usize, n_traj: usize) -> Self {
        FieldEnsemble {
            sites,
            fields: vec![Complex64::default(); sites * n_traj],
            time: 0.0,
        }
    }

    pub fn from_trajectories(sites: usize, trajectories: Vec<Vec<Complex64>>, time: f64) -> Self {
        let mut fields = Vec::with_capacity(sites * trajectories.len());
        for t in trajectories {
            assert_eq!(t.len(), sites, "trajectory length");
            fields.extend(t);
        }
        FieldEnsemble { sites, fields, time }
    }

    /// Samples every trajectory's initial state; trajectory `i` draws from
    /// stream `i` of `master_seed`, and the returned noise processes continue
    /// those same streams.
    pub fn sample(
        initial: &InitialCondition,
        sites: usize,
        n_traj: usize,
        master_seed: u64,
    ) -> (Self, Vec<NoiseProcess>) {
        let mut ens = FieldEnsemble::new(sites, n_traj);
        let mut noises = Vec::with_capacity(n_traj);
        for i in 0..n_traj {
            let mut rng = trajectory_rng(master_seed, i as u64);
            let f = initial.sample(sites, &mut rng);
            ens.trajectory_mut(i).copy_from_slice(&f);
            noises.push(NoiseProcess::from_rng(rng, i as u64));
        }
        (ens, noises)
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn n_traj(&self) -> usize {
        if self.sites == 0 {
            0
        } else {
            self.fields.len() / self.sites
        }
    }

    pub fn trajectory(&self, i: usize) -> &[Complex64] {
        &self.fields[i * self.sites..(i + 1) * self.sites]
    }

    pub fn trajectory_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.fields[i * self.sites..(i + 1) * self.sites]
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &[Complex64]> {
        self.fields.chunks(self.sites)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.fields
    }

    /// Values of site `site` across trajectories.
    pub fn site_values(&self, site: usize) -> Vec<Complex64> {
        self.trajectories().map(|t| t[site]).collect()
    }

    fn check_finite(&self) -> Result<(), EngineError> {
        for (traj, t) in self.trajectories().enumerate() {
            if let Some(site) = first_non_finite(t) {
                return Err(EngineError::NonFiniteField {
                    traj,
                    site,
                    time: self.time,
                });
            }
        }
        Ok(())
    }

    /// Runs `n_steps` of `stepper` on every trajectory in parallel.
    fn advance(
        &mut self,
        stepper: &Stepper,
        noise: &mut [NoiseProcess],
        n_steps: usize,
    ) -> Result<(), EngineError> {
        let sites = self.sites;
        assert_eq!(noise.len(), self.n_traj(), "one noise process per trajectory");
        let t0 = self.time;
        let dt = stepper.dt();
        let failures: Vec<Option<EngineError>> = self
            .fields
            .par_chunks_mut(sites)
            .zip(noise.par_iter_mut())
            .enumerate()
            .map(|(traj, (fields, noise))| {
                let mut st = stepper.clone();
                for k in 0..n_steps {
                    st.step_with(fields, noise);
                    if let Some(site) = first_non_finite(fields) {
                        return Some(EngineError::NonFiniteField {
                            traj,
                            site,
                            time: t0 + (k + 1) as f64 * dt,
                        });
                    }
                }
                None
            })
            .collect();
        self.time = t0 + n_steps as f64 * dt;
        match failures.into_iter().flatten().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// One stochastic Heun step of the Wigner equations for every trajectory.
pub fn step_twa(
    state: &mut FieldEnsemble,
    params: &ChainParams,
    dt: f64,
    noise: &mut [NoiseProcess],
) -> Result<(), EngineError> {
    state.check_finite()?;
    let stepper = Stepper::new(params, Dynamics::Twa, dt);
    state.advance(&stepper, noise, 1)
}

/// Runs `n_steps` Wigner steps.
pub fn evolve_twa(
    state: &mut FieldEnsemble,
    params: &ChainParams,
    dt: f64,
    noise: &mut [NoiseProcess],
    n_steps: usize,
) -> Result<(), EngineError> {
    state.check_finite()?;
    let stepper = Stepper::new(params, Dynamics::Twa, dt);
    state.advance(&stepper, noise, n_steps)
}

/// One Heun step of the Gross-Pitaevskii equations for every trajectory.
pub fn step_gp(state: &mut FieldEnsemble, params: &ChainParams, dt: f64) -> Result<(), EngineError> {
    evolve_gp(state, params, dt, 1)
}

/// Runs `n_steps` Gross-Pitaevskii steps.
pub fn evolve_gp(
    state: &mut FieldEnsemble,
    params: &ChainParams,
    dt: f64,
    n_steps: usize,
) -> Result<(), EngineError> {
    state.check_finite()?;
    let stepper = Stepper::new(params, Dynamics::Gp, dt);
    let mut dummy: Vec<NoiseProcess> = (0..state.n_traj()).map(|i| NoiseProcess::new(0, i as u64)).collect();
    state.advance(&stepper, &mut dummy, n_steps)
}

/// Rotates the phase of site `site` by `epsilon`, keeping its modulus.
pub fn kick_phase(fields: &mut [Complex64], site: usize, epsilon: f64) {
    fields[site] *= Complex64::from_polar(1.0, epsilon);
}

/// Builds replica b from `state_a` by kicking the phase of site `site` by
/// `epsilon`, then advances both replicas for `n_steps` with the same noise
/// increments.
pub fn evolve_replicas(
    state_a: &FieldEnsemble,
    site: usize,
    epsilon: f64,
    params: &ChainParams,
    dynamics: Dynamics,
    dt: f64,
    noise: &mut [NoiseProcess],
    n_steps: usize,
) -> Result<(FieldEnsemble, FieldEnsemble), EngineError> {
    if site >= state_a.sites() {
        return Err(EngineError::PerturbSiteOutOfRange {
            site,
            sites: state_a.sites(),
        });
    }
    state_a.check_finite()?;
    let mut a = state_a.clone();
    let mut b = state_a.clone();
    let sites = a.sites;
    for i in 0..b.n_traj() {
        kick_phase(b.trajectory_mut(i), site, epsilon);
    }
    let stepper = Stepper::new(params, dynamics, dt);
    let t0 = a.time;
    let failures: Vec<Option<EngineError>> = a
        .fields
        .par_chunks_mut(sites)
        .zip(b.fields.par_chunks_mut(sites))
        .zip(noise.par_iter_mut())
        .enumerate()
        .map(|(traj, ((fa, fb), noise))| {
            let mut st = stepper.clone();
            for k in 0..n_steps {
                st.step_pair(fa, fb, noise);
                if let Some(site) = first_non_finite(fa).or_else(|| first_non_finite(fb)) {
                    return Some(EngineError::NonFiniteField {
                        traj,
                        site,
                        time: t0 + (k + 1) as f64 * dt,
                    });
                }
            }
            None
        })
        .collect();
    a.time = t0 + n_steps as f64 * dt;
    b.time = a.time;
    match failures.into_iter().flatten().next() {
        Some(e) => Err(e),
        None => Ok((a, b)),
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TWACKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Snapshot of an ensemble together with the counters of its noise streams.
///
/// Layout (little endian): magic `TWACKPT\0`, version `u32`, master seed
/// `u64`, sites `u64`, trajectories `u64`, time `f64`, then per trajectory
/// the stream index `u64`, the word counter `u128` and `sites` pairs of `f64`
/// (real, imaginary).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub master_seed: u64,
    pub ensemble: FieldEnsemble,
    pub streams: Vec<(u64, u128)>,
}

impl Checkpoint {
    pub fn capture(master_seed: u64, ensemble: &FieldEnsemble, noise: &[NoiseProcess]) -> Self {
        Checkpoint {
            master_seed,
            ensemble: ensemble.clone(),
            streams: noise.iter().map(|n| (n.index(), n.word_pos())).collect(),
        }
    }

    /// Noise processes positioned where the snapshot was taken.
    pub fn restore_noise(&self) -> Vec<NoiseProcess> {
        self.streams
            .iter()
            .map(|&(idx, pos)| {
                let mut n = NoiseProcess::new(self.master_seed, idx);
                n.set_word_pos(pos);
                n
            })
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.master_seed.to_le_bytes())?;
        w.write_all(&(self.ensemble.sites() as u64).to_le_bytes())?;
        w.write_all(&(self.ensemble.n_traj() as u64).to_le_bytes())?;
        w.write_all(&self.ensemble.time.to_le_bytes())?;
        for (i, traj) in self.ensemble.trajectories().enumerate() {
            let (idx, pos) = self.streams[i];
            w.write_all(&idx.to_le_bytes())?;
            w.write_all(&pos.to_le_bytes())?;
            for a in traj {
                w.write_all(&a.re.to_le_bytes())?;
                w.write_all(&a.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, EngineError> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], EngineError> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| EngineError::Checkpoint(e.to_string()))?;
            Ok(buf)
        }
        let magic: [u8; 8] = take(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(EngineError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(EngineError::Checkpoint(format!("unsupported version {version}")));
        }
        let master_seed = u64::from_le_bytes(take(&mut r)?);
        let sites = u64::from_le_bytes(take(&mut r)?) as usize;
        let n_traj = u64::from_le_bytes(take(&mut r)?) as usize;
        let time = f64::from_le_bytes(take(&mut r)?);
        let mut ensemble = FieldEnsemble::new(sites, n_traj);
        ensemble.time = time;
        let mut streams = Vec::with_capacity(n_traj);
        for i in 0..n_traj {
            let idx = u64::from_le_bytes(take(&mut r)?);
            let pos = u128::from_le_bytes(take(&mut r)?);
            streams.push((idx, pos));
            let traj = ensemble.trajectory_mut(i);
            for a in traj.iter_mut() {
                let re = f64::from_le_bytes(take(&mut r)?);
                let im = f64::from_le_bytes(take(&mut r)?);
                *a = Complex64::new(re, im);
            }
        }
        Ok(Checkpoint {
            master_seed,
            ensemble,
            streams,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn vacuum_is_a_fixed_point_for_two_photon_drive() {
        let p = ChainParams::new(5, 2, 5.6, 2.2, 6.0);
        let d = drift(&p, &vec![Complex64::default(); 5]);
        assert!(d.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn linear_two_site_drift_by_hand() {
        let p = ChainParams::new(2, 2, 5.6, 2.2, 0.0).with_kerr(0.0);
        let d = drift(&p, &[c(1.0, 0.0), c(0.0, 0.0)]);
        assert_abs_diff_eq!(d[0].re, -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d[0].im, 5.6, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1].re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1].im, 2.2, epsilon = 1e-15);
    }

    #[test]
    fn bulk_kerr_term_magnitude() {
        let p = ChainParams::new(3, 2, 5.6, 0.0, 0.0).with_kerr(0.3);
        let a = 2.5;
        let d = drift(&p, &[c(0.0, 0.0), c(a, 0.0), c(0.0, 0.0)]);
        assert_abs_diff_eq!(d[1].norm(), (5.6 - 0.3 * (a * a - 1.0)).abs() * a, epsilon = 1e-12);
        let g = drift_gp(&p, &[c(0.0, 0.0), c(a, 0.0), c(0.0, 0.0)]);
        assert_abs_diff_eq!(g[1].norm(), (5.6 - 0.3 * a * a).abs() * a, epsilon = 1e-12);
    }

    #[test]
    fn drive_term_matches_photon_order() {
        let a = c(0.7, -0.4);
        for n in 1..=4u32 {
            let p = ChainParams::new(1, n, 0.0, 0.0, 1.3).with_kerr(0.0).with_loss(1e-300);
            let d = drift(&p, &[a]);
            let expect = -I * 1.3 * a.conj().powu(n - 1);
            assert_abs_diff_eq!((d[0] - expect).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_site_linear_decay() {
        let p = ChainParams::new(1, 2, 5.6, 0.0, 0.0).with_kerr(0.0);
        let mut st = Stepper::new(&p, Dynamics::Gp, 1e-3);
        let mut f = vec![c(1.0, 0.0)];
        for _ in 0..1000 {
            st.step(&mut f, None);
        }
        // Heun is second order: O((ω dt)²) global error with ω dt = 5.6e-3.
        assert_abs_diff_eq!(f[0].norm(), (-0.5f64).exp(), epsilon = 2e-5);
        let exact = Complex64::from_polar((-0.5f64).exp(), 5.6);
        assert_abs_diff_eq!((f[0] - exact).norm(), 0.0, epsilon = 1e-4);
    }

    #[test]
    fn noise_increment_variance() {
        let mut np = NoiseProcess::new(9, 0);
        let dt = 0.01;
        let n = 100_000;
        let (mut sre, mut sim, mut sabs) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let inc = np.increment(dt);
            sre += inc.first.re * inc.first.re;
            sim += inc.first.im * inc.first.im;
            sabs += inc.last.norm_sqr();
        }
        let nf = n as f64;
        // var of x² estimate for Gaussian: 2σ⁴
        let se = (2.0 * (dt / 2.0).powi(2) / nf).sqrt();
        assert!((sre / nf - dt / 2.0).abs() < 4.0 * se);
        assert!((sim / nf - dt / 2.0).abs() < 4.0 * se);
        assert!((sabs / nf - dt).abs() < 4.0 * se * 2f64.sqrt());
    }

    #[test]
    fn zero_kick_replicas_are_identical() {
        let p = ChainParams::new(6, 2, 5.6, 2.2, 6.0);
        let (ens, mut noise) = FieldEnsemble::sample(&InitialCondition::Vacuum, 6, 4, 1);
        let (a, b) = evolve_replicas(&ens, 0, 0.0, &p, Dynamics::Twa, 5e-3, &mut noise, 400).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phase_kick_preserves_modulus() {
        let mut f = vec![c(1.3, -0.2), c(0.1, 0.4)];
        let before = f[0].norm();
        kick_phase(&mut f, 0, 1e-2);
        assert_abs_diff_eq!(f[0].norm(), before, epsilon = 1e-15);
        assert_abs_diff_eq!(f[0].arg() - c(1.3, -0.2).arg(), 1e-2, epsilon = 1e-14);
    }

    #[test]
    fn replica_site_out_of_range() {
        let p = ChainParams::new(3, 2, 5.6, 2.2, 6.0);
        let ens = FieldEnsemble::new(3, 2);
        let mut noise: Vec<_> = (0..2).map(|i| NoiseProcess::new(0, i)).collect();
        let err = evolve_replicas(&ens, 3, 1e-2, &p, Dynamics::Twa, 1e-3, &mut noise, 1).unwrap_err();
        assert_eq!(err, EngineError::PerturbSiteOutOfRange { site: 3, sites: 3 });
    }

    #[test]
    fn blow_up_is_reported() {
        let p = ChainParams::new(2, 2, 0.0, 0.0, 0.0).with_kerr(1.0);
        let mut ens = FieldEnsemble::from_trajectories(2, vec![vec![c(1e150, 0.0), c(0.0, 0.0)]], 0.0);
        let err = evolve_gp(&mut ens, &p, 0.1, 10).unwrap_err();
        assert!(matches!(err, EngineError::NonFiniteField { traj: 0, site: 0, .. }));
    }

    #[test]
    fn checkpoint_round_trip_resumes_bit_identically() {
        let p = ChainParams::new(4, 2, 5.6, 2.2, 4.0);
        let (mut ens, mut noise) = FieldEnsemble::sample(&InitialCondition::Vacuum, 4, 3, 42);
        evolve_twa(&mut ens, &p, 5e-3, &mut noise, 100).unwrap();
        let ck = Checkpoint::capture(42, &ens, &noise);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back, ck);

        let mut resumed = back.ensemble.clone();
        let mut rnoise = back.restore_noise();
        evolve_twa(&mut resumed, &p, 5e-3, &mut rnoise, 100).unwrap();
        evolve_twa(&mut ens, &p, 5e-3, &mut noise, 100).unwrap();
        assert_eq!(resumed, ens);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::read(&b"NOTACKPT0000"[..]).is_err());
    }
}
