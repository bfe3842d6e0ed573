//! Exact open-system dynamics for one- and two-site chains.
//!
//! Quantum-jump (Monte Carlo wave function) trajectories unravel the Lindblad
//! equation with jump operators `√γ a_1` and `√γ a_L`. Between jumps the
//! state follows `H_eff = H − (iγ/2)(n_1 + n_L)`; the diagonal part of
//! `H_eff` is integrated exactly and the sparse off-diagonal part by an
//! integrating-factor Runge-Kutta scheme. A dense integrator of the master
//! equation is provided for cross-checks on a single mode.

use std::f64::consts::PI;
use std::io::{self, Read, Write};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{derive_seed, trajectory_rng, ChainParams};
use crate::observables::{Grid2D, WignerHistogram};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const TINY: f64 = 1e-150;

/// Default cap on the Hilbert-space dimension.
pub const DEFAULT_DIMENSION_CAP: usize = 1 << 16;
/// Largest allowed mean population of the top Fock level.
pub const LEAKAGE_TOLERANCE: f64 = 1e-6;
/// Relative accuracy of jump times on the log-norm.
pub const JUMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("exact dynamics supports 1 or 2 sites, got {0}")]
    TooManySites(usize),
    #[error("Hilbert dimension {dim} exceeds cap {cap}")]
    DimensionCap { dim: usize, cap: usize },
    #[error("top Fock level holds {population:e} of the norm at t = {time} (site {site}); raise the cutoff")]
    CutoffLeakage { site: usize, time: f64, population: f64 },
    #[error("time grid must start at 0 and increase")]
    InvalidTimeGrid,
    #[error("initial Fock state {0:?} outside cutoff")]
    InvalidInitialState(Vec<usize>),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Truncated Fock space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FockConfig {
    /// Levels per site (photon numbers `0..cutoff`).
    pub cutoff: usize,
    pub sites: usize,
    pub dimension_cap: usize,
}

impl FockConfig {
    pub fn new(cutoff: usize, sites: usize) -> Self {
        FockConfig {
            cutoff,
            sites,
            dimension_cap: DEFAULT_DIMENSION_CAP,
        }
    }

    pub fn dim(&self) -> usize {
        self.cutoff.pow(self.sites as u32)
    }

    /// Photon number of `site` in basis state `idx` (site 0 most significant).
    pub fn occupation(&self, idx: usize, site: usize) -> usize {
        let shift = self.sites - 1 - site;
        (idx / self.cutoff.pow(shift as u32)) % self.cutoff
    }

    pub fn index(&self, occupations: &[usize]) -> usize {
        occupations.iter().fold(0, |acc, &n| acc * self.cutoff + n)
    }

    fn check(&self) -> Result<(), OracleError> {
        if self.sites == 0 || self.sites > 2 {
            return Err(OracleError::TooManySites(self.sites));
        }
        let dim = self.cutoff.checked_pow(self.sites as u32).unwrap_or(usize::MAX);
        if dim > self.dimension_cap {
            return Err(OracleError::DimensionCap {
                dim,
                cap: self.dimension_cap,
            });
        }
        Ok(())
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<Complex64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets, summing duplicates and
    /// dropping zeros.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, Complex64)>) -> Self {
        t.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; n + 1];
        let mut indices = Vec::with_capacity(t.len());
        let mut values: Vec<Complex64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        let mut m = Csr {
            n,
            indptr,
            indices,
            values,
        };
        m.prune();
        m
    }

    fn prune(&mut self) {
        let mut indptr = vec![0; self.n + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..self.n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.values[k] != ZERO {
                    indices.push(self.indices[k]);
                    values.push(self.values[k]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        (self.indptr[r]..self.indptr[r + 1])
            .find(|&k| self.indices[k] == c)
            .map(|k| self.values[k])
            .unwrap_or(ZERO)
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        assert!(x.len() >= self.n && y.len() >= self.n);
        for (r, out) in y[..self.n].iter_mut().enumerate() {
            let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
            let (mut re, mut im) = (0.0, 0.0);
            for (c, v) in self.indices[lo..hi].iter().zip(&self.values[lo..hi]) {
                let a = x[*c];
                re += v.re * a.re - v.im * a.im;
                im += v.re * a.im + v.im * a.re;
            }
            *out = Complex64::new(re, im);
        }
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<Complex64> {
        let mut d = vec![ZERO; self.n * self.n];
        for r in 0..self.n {
            for k in self.indptr[r]..self.indptr[r + 1] {
                d[r * self.n + self.indices[k]] = self.values[k];
            }
        }
        d
    }

    /// Largest absolute row sum, a bound on the spectral radius.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|r| (self.indptr[r]..self.indptr[r + 1]).map(|k| self.values[k].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `C = A B` with `B` dense row-major `n × n`.
    fn mul_dense(&self, b: &[Complex64], c: &mut [Complex64]) {
        let n = self.n;
        c.iter_mut().for_each(|x| *x = ZERO);
        for r in 0..n {
            let row = &mut c[r * n..(r + 1) * n];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let a = self.values[k];
                let src = &b[self.indices[k] * n..(self.indices[k] + 1) * n];
                for (x, y) in row.iter_mut().zip(src) {
                    *x += a * y;
                }
            }
        }
    }
}

/// Hamiltonian and jump operators in the truncated Fock basis.
#[derive(Debug, Clone)]
pub struct Generators {
    pub config: FockConfig,
    /// Full Hamiltonian.
    pub hamiltonian: Csr,
    /// Real diagonal of the Hamiltonian.
    pub h_diag: Vec<f64>,
    /// Off-diagonal part of the Hamiltonian.
    pub h_off: Csr,
    /// `(site, √γ a_site)` for each lossy site.
    pub jumps: Vec<(usize, Csr)>,
    /// Photon number of each site for every basis state.
    pub occupations: Vec<Vec<f64>>,
    pub loss: f64,
}

impl Generators {
    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Diagonal of `H_eff = H − (i/2) Σ L†L`.
    fn effective_diagonal(&self) -> Vec<Complex64> {
        (0..self.dim())
            .map(|i| {
                let decay: f64 = self.jumps.iter().map(|(s, _)| self.occupations[*s][i]).sum();
                Complex64::new(self.h_diag[i], -0.5 * self.loss * decay)
            })
            .collect()
    }
}

/// Builds `H = Σ(−Δ n + U/2 n(n−1)) − J(a₂†a₁ + h.c.) + (ζ/n)(a₁†ⁿ + a₁ⁿ)` and
/// the jump operators `√γ a₁`, `√γ a_L`.
pub fn build_generators(params: &ChainParams, cfg: FockConfig) -> Result<Generators, OracleError> {
    if params.sites != cfg.sites {
        return Err(OracleError::TooManySites(params.sites));
    }
    cfg.check()?;
    let d = cfg.cutoff;
    let dim = cfg.dim();
    let sites = cfg.sites;
    let occ = |i: usize, s: usize| cfg.occupation(i, s);
    let occupations: Vec<Vec<f64>> = (0..sites).map(|s| (0..dim).map(|i| occ(i, s) as f64).collect()).collect();

    let h_diag: Vec<f64> = (0..dim)
        .map(|i| {
            (0..sites)
                .map(|s| {
                    let n = occ(i, s) as f64;
                    -params.detuning * n + 0.5 * params.kerr * n * (n - 1.0)
                })
                .sum()
        })
        .collect();

    let mut off = Vec::new();
    let order = params.photon_order as usize;
    let drive = params.drive / order as f64;
    for i in 0..dim {
        // Drive on site 0: ⟨k+n| a†ⁿ |k⟩ = √((k+1)…(k+n)).
        let k = occ(i, 0);
        if k + order < d && drive != 0.0 {
            let amp: f64 = (1..=order).map(|j| ((k + j) as f64).sqrt()).product();
            let mut o: Vec<usize> = (0..sites).map(|s| occ(i, s)).collect();
            o[0] = k + order;
            let j = cfg.index(&o);
            off.push((j, i, Complex64::new(drive * amp, 0.0)));
            off.push((i, j, Complex64::new(drive * amp, 0.0)));
        }
        // Hopping: a₂†a₁ moves a photon from site 0 to site 1.
        if sites == 2 && params.hopping != 0.0 {
            let (n1, n2) = (occ(i, 0), occ(i, 1));
            if n1 > 0 && n2 + 1 < d {
                let j = cfg.index(&[n1 - 1, n2 + 1]);
                let amp = -params.hopping * ((n1 * (n2 + 1)) as f64).sqrt();
                off.push((j, i, Complex64::new(amp, 0.0)));
                off.push((i, j, Complex64::new(amp, 0.0)));
            }
        }
    }
    let h_off = Csr::from_triplets(dim, off.clone());
    let mut full = off;
    full.extend(h_diag.iter().enumerate().map(|(i, v)| (i, i, Complex64::new(*v, 0.0))));
    let hamiltonian = Csr::from_triplets(dim, full);

    let lossy: Vec<usize> = if sites == 1 { vec![0] } else { vec![0, sites - 1] };
    let jumps = lossy
        .into_iter()
        .map(|s| {
            let t = (0..dim)
                .filter(|&i| occ(i, s) > 0)
                .map(|i| {
                    let n = occ(i, s);
                    let mut o: Vec<usize> = (0..sites).map(|q| occ(i, q)).collect();
                    o[s] = n - 1;
                    (cfg.index(&o), i, Complex64::new((params.loss * n as f64).sqrt(), 0.0))
                })
                .collect();
            (s, Csr::from_triplets(dim, t))
        })
        .collect();

    Ok(Generators {
        config: cfg,
        hamiltonian,
        h_diag,
        h_off,
        jumps,
        occupations,
        loss: params.loss,
    })
}

/// Expectation values on a time grid, with standard errors where sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationSeries {
    pub times: Vec<f64>,
    /// `n[site][i]`.
    pub n: Vec<Vec<f64>>,
    pub n_se: Vec<Vec<f64>>,
    /// `δn = ⟨a†²a²⟩ − ⟨a†a⟩²`.
    pub dn: Vec<Vec<f64>>,
    pub dn_se: Vec<Vec<f64>>,
    pub samples: usize,
}

impl ExpectationSeries {
    pub fn sites(&self) -> usize {
        self.n.len()
    }

    /// CSV with `t, n_1, n_1_se, dn_1, dn_1_se, …` (time in 1/γ).
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t[1/gamma]".to_string()];
        for s in 1..=self.sites() {
            header.extend([format!("n_{s}"), format!("n_{s}_se"), format!("dn_{s}"), format!("dn_{s}_se")]);
        }
        wtr.write_record(&header)?;
        for (i, t) in self.times.iter().enumerate() {
            let mut rec = vec![format!("{t:.6}")];
            for s in 0..self.sites() {
                rec.push(format!("{:.10e}", self.n[s][i]));
                rec.push(format!("{:.4e}", self.n_se[s][i]));
                rec.push(format!("{:.10e}", self.dn[s][i]));
                rec.push(format!("{:.4e}", self.dn_se[s][i]));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Builds the series from per-sample values `n[sample][time][site]` and
    /// `m[sample][time][site] = ⟨a†²a²⟩`. The error of `δn` follows from the
    /// delta method.
    pub fn from_samples(times: Vec<f64>, n: &[Vec<Vec<f64>>], m: &[Vec<Vec<f64>>]) -> Self {
        let ns = n.len();
        let nt = times.len();
        let sites = n.first().and_then(|x| x.first()).map(|x| x.len()).unwrap_or(0);
        let nf = ns as f64;
        let mut out = ExpectationSeries {
            times,
            n: vec![vec![0.0; nt]; sites],
            n_se: vec![vec![f64::NAN; nt]; sites],
            dn: vec![vec![0.0; nt]; sites],
            dn_se: vec![vec![f64::NAN; nt]; sites],
            samples: ns,
        };
        for s in 0..sites {
            for i in 0..nt {
                let x: Vec<f64> = n.iter().map(|v| v[i][s]).collect();
                let y: Vec<f64> = m.iter().map(|v| v[i][s]).collect();
                let mx = x.iter().sum::<f64>() / nf;
                let my = y.iter().sum::<f64>() / nf;
                out.n[s][i] = mx;
                out.dn[s][i] = my - mx * mx;
                if ns > 1 {
                    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (nf - 1.0);
                    let vy = y.iter().map(|a| (a - my).powi(2)).sum::<f64>() / (nf - 1.0);
                    let cxy = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (nf - 1.0);
                    out.n_se[s][i] = (vx / nf).sqrt();
                    let v = vy - 4.0 * mx * cxy + 4.0 * mx * mx * vx;
                    out.dn_se[s][i] = (v.max(0.0) / nf).sqrt();
                }
            }
        }
        out
    }
}

fn check_grid(t: &[f64]) -> Result<(), OracleError> {
    if t.is_empty() || t[0] != 0.0 || t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OracleError::InvalidTimeGrid);
    }
    Ok(())
}

/// Phase-and-decay factors `e^{−iDh}` and `e^{−iDh/2}` for one step size.
struct Factors {
    h: f64,
    full: Vec<Complex64>,
    half: Vec<Complex64>,
}

impl Factors {
    fn new(dim: usize) -> Self {
        Factors {
            h: f64::NAN,
            full: vec![ZERO; dim],
            half: vec![ZERO; dim],
        }
    }

    fn set(&mut self, diag: &[Complex64], h: f64) {
        if h == self.h {
            return;
        }
        for (i, d) in diag.iter().enumerate() {
            self.half[i] = (-I * d * (0.5 * h)).exp();
            self.full[i] = self.half[i] * self.half[i];
        }
        self.h = h;
    }
}

/// Integrating-factor RK4 for `ψ' = −i D ψ − i V ψ` with diagonal `D`.
struct Propagator<'a> {
    gens: &'a Generators,
    diag: Vec<Complex64>,
    work: [Vec<Complex64>; 5],
    /// Factors of the regular step; `scratch` serves partial steps.
    main: Factors,
    scratch: Factors,
}

impl<'a> Propagator<'a> {
    fn new(gens: &'a Generators) -> Self {
        let dim = gens.dim();
        let z = || vec![ZERO; dim];
        Propagator {
            gens,
            diag: gens.effective_diagonal(),
            work: [z(), z(), z(), z(), z()],
            main: Factors::new(dim),
            scratch: Factors::new(dim),
        }
    }

    fn set_main(&mut self, h: f64) {
        self.main.set(&self.diag, h);
    }

    /// Advances `u` by `h` in place.
    fn step(&mut self, u: &mut [Complex64], h: f64) {
        let f = if h == self.main.h {
            &self.main
        } else {
            self.scratch.set(&self.diag, h);
            &self.scratch
        };
        let v = &self.gens.h_off;
        let (e, eh) = (&f.full, &f.half);
        // k_j hold V x; the factor −i is folded into the coefficients.
        let [k1, k2, k3, k4, tmp] = &mut self.work;
        let ch = -I * (0.5 * h);
        let cf = -I * h;
        v.matvec(u, k1);
        for i in 0..u.len() {
            tmp[i] = eh[i] * (u[i] + ch * k1[i]);
        }
        v.matvec(tmp, k2);
        for i in 0..u.len() {
            tmp[i] = eh[i] * u[i] + ch * k2[i];
        }
        v.matvec(tmp, k3);
        for i in 0..u.len() {
            tmp[i] = e[i] * u[i] + cf * eh[i] * k3[i];
        }
        v.matvec(tmp, k4);
        let c6 = cf / 6.0;
        for i in 0..u.len() {
            u[i] = e[i] * u[i] + c6 * (e[i] * k1[i] + 2.0 * eh[i] * (k2[i] + k3[i]) + k4[i]);
        }
        // Keep far tails out of the subnormal range, where arithmetic is slow.
        for x in u.iter_mut() {
            if x.re.abs() < TINY {
                x.re = 0.0;
            }
            if x.im.abs() < TINY {
                x.im = 0.0;
            }
        }
    }

    /// Writes `u` advanced by `h` into `out`.
    fn step_copy(&mut self, u: &[Complex64], h: f64, out: &mut Vec<Complex64>) {
        out.clear();
        out.extend_from_slice(u);
        self.step(out, h);
    }
}

fn norm_sqr(u: &[Complex64]) -> f64 {
    u.iter().map(|c| c.norm_sqr()).sum()
}

/// Settings of a quantum-jump run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McwfOptions {
    /// Largest inner step; `None` picks `min(2e-3, 1/‖V‖)`.
    pub max_step: Option<f64>,
    /// Initial Fock occupations, vacuum if absent.
    pub initial: Option<Vec<usize>>,
}

impl Default for McwfOptions {
    fn default() -> Self {
        McwfOptions {
            max_step: None,
            initial: None,
        }
    }
}

/// Per-trajectory output: `n[time][site]`, `⟨a†²a²⟩[time][site]` and the
/// top-level populations `[time][site]`.
struct TrajectoryRecord {
    n: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    top: Vec<Vec<f64>>,
}

fn record(gens: &Generators, u: &[Complex64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let norm = norm_sqr(u);
    let d = gens.config.cutoff as f64;
    let sites = gens.config.sites;
    let mut n = vec![0.0; sites];
    let mut m = vec![0.0; sites];
    let mut top = vec![0.0; sites];
    for (i, c) in u.iter().enumerate() {
        let p = c.norm_sqr() / norm;
        for s in 0..sites {
            let k = gens.occupations[s][i];
            n[s] += k * p;
            m[s] += k * (k - 1.0) * p;
            if k == d - 1.0 {
                top[s] += p;
            }
        }
    }
    (n, m, top)
}

/// `Σ_k ⟨ψ|L_k†L_k|ψ⟩` for an unnormalized state.
fn decay_rate(gens: &Generators, x: &[Complex64]) -> f64 {
    gens.jumps
        .iter()
        .map(|(site, _)| x.iter().zip(&gens.occupations[*site]).map(|(c, k)| c.norm_sqr() * k).sum::<f64>())
        .sum::<f64>()
        * gens.loss
}

/// Zero in `(0, h]` of the cubic Hermite interpolant with values `g0 > 0 ≥ g1`
/// and slopes `d0`, `d1`, found by bisection.
fn hermite_root(h: f64, g0: f64, d0: f64, g1: f64, d1: f64) -> f64 {
    let p = |s: f64| {
        let t = s / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * g0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * g1 + (t3 - t2) * h * d1
    };
    let (mut lo, mut hi) = (0.0, h);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if p(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn run_trajectory<R: Rng>(gens: &Generators, t_grid: &[f64], h_max: f64, init: usize, rng: &mut R) -> TrajectoryRecord {
    let dim = gens.dim();
    let mut prop = Propagator::new(gens);
    let mut u = vec![ZERO; dim];
    u[init] = Complex64::new(1.0, 0.0);
    let mut threshold: f64 = rng.gen::<f64>();
    let mut trial = Vec::with_capacity(dim);
    let mut jumped = vec![ZERO; dim];
    let mut rec = TrajectoryRecord {
        n: Vec::new(),
        m: Vec::new(),
        top: Vec::new(),
    };
    let push = |rec: &mut TrajectoryRecord, u: &[Complex64]| {
        let (n, m, top) = record(gens, u);
        rec.n.push(n);
        rec.m.push(m);
        rec.top.push(top);
    };
    push(&mut rec, &u);
    for w in t_grid.windows(2) {
        let span = w[1] - w[0];
        let n_steps = (span / h_max).ceil().max(1.0) as usize;
        let h = span / n_steps as f64;
        prop.set_main(h);
        for _ in 0..n_steps {
            let mut remaining = h;
            while remaining > 0.0 {
                prop.step_copy(&u, remaining, &mut trial);
                let ln_r = threshold.ln();
                if norm_sqr(&trial).ln() > ln_r {
                    u.copy_from_slice(&trial);
                    break;
                }
                // Root of g(s) = ln‖ψ(s)‖² − ln r: a cubic Hermite guess from
                // g and g' = −⟨Σ L†L⟩ at both ends, refined by Illinois.
                let (n0, n1) = (norm_sqr(&u), norm_sqr(&trial));
                let (ga0, gb0) = (n0.ln() - ln_r, n1.ln() - ln_r);
                let slope = |x: &[Complex64], n: f64| -decay_rate(gens, x) / n;
                let s_guess = hermite_root(remaining, ga0, slope(&u, n0), gb0, slope(&trial, n1));
                let (mut a, mut ga, mut b, mut gb) = (0.0, ga0, remaining, gb0);
                let mut side = 0i32;
                let mut s = s_guess;
                for _ in 0..100 {
                    prop.step_copy(&u, s, &mut trial);
                    let gs = norm_sqr(&trial).ln() - ln_r;
                    if gs.abs() < JUMP_TOLERANCE {
                        break;
                    }
                    if gs > 0.0 {
                        a = s;
                        ga = gs;
                        if side == 1 {
                            gb *= 0.5;
                        }
                        side = 1;
                    } else {
                        b = s;
                        gb = gs;
                        if side == -1 {
                            ga *= 0.5;
                        }
                        side = -1;
                    }
                    s = (a * gb - b * ga) / (gb - ga);
                }
                // Jump at t + s with channel probability ∝ ⟨L†L⟩.
                let rates: Vec<f64> = gens
                    .jumps
                    .iter()
                    .map(|(site, _)| {
                        trial
                            .iter()
                            .zip(&gens.occupations[*site])
                            .map(|(c, k)| c.norm_sqr() * k)
                            .sum::<f64>()
                    })
                    .collect();
                let total: f64 = rates.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut channel = rates.len() - 1;
                for (c, r) in rates.iter().enumerate() {
                    if pick < *r {
                        channel = c;
                        break;
                    }
                    pick -= r;
                }
                gens.jumps[channel].1.matvec(&trial, &mut jumped);
                let norm = norm_sqr(&jumped).sqrt();
                for (x, y) in u.iter_mut().zip(&jumped) {
                    *x = y / norm;
                }
                threshold = rng.gen::<f64>();
                remaining -= s;
                if remaining < 1e-12 * h {
                    break;
                }
            }
        }
        push(&mut rec, &u);
    }
    rec
}

fn default_step(gens: &Generators) -> f64 {
    (1.0 / gens.h_off.norm_inf().max(1e-12)).min(2e-3)
}

/// Result of a quantum-jump run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McwfResult {
    pub series: ExpectationSeries,
    pub cutoff: usize,
    pub step: f64,
    /// Largest ensemble-mean top-level population seen.
    pub max_top_population: f64,
    /// Per-trajectory `n[traj][time][site]`, kept for convergence checks.
    #[serde(skip)]
    pub per_trajectory_n: Vec<Vec<Vec<f64>>>,
}

/// Runs `n_traj` quantum-jump trajectories from vacuum (or
/// `opts.initial`) and records `n` and `δn` on `t_grid`.
pub fn evolve_mcwf(
    params: &ChainParams,
    cfg: FockConfig,
    n_traj: usize,
    t_grid: &[f64],
    seed: u64,
    opts: &McwfOptions,
) -> Result<McwfResult, OracleError> {
    check_grid(t_grid)?;
    let gens = build_generators(params, cfg)?;
    let init = match &opts.initial {
        None => 0,
        Some(o) => {
            if o.len() != cfg.sites || o.iter().any(|&k| k >= cfg.cutoff) {
                return Err(OracleError::InvalidInitialState(o.clone()));
            }
            cfg.index(o)
        }
    };
    let h_max = opts.max_step.unwrap_or_else(|| default_step(&gens));
    let stream = derive_seed(seed, "mcwf");
    let records: Vec<TrajectoryRecord> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(stream, i as u64);
            run_trajectory(&gens, t_grid, h_max, init, &mut rng)
        })
        .collect();

    let sites = cfg.sites;
    let mut max_top: f64 = 0.0;
    for (ti, t) in t_grid.iter().enumerate() {
        for s in 0..sites {
            let mean = records.iter().map(|r| r.top[ti][s]).sum::<f64>() / n_traj.max(1) as f64;
            max_top = max_top.max(mean);
            if mean > LEAKAGE_TOLERANCE {
                return Err(OracleError::CutoffLeakage {
                    site: s,
                    time: *t,
                    population: mean,
                });
            }
        }
    }
    let n: Vec<_> = records.iter().map(|r| r.n.clone()).collect();
    let m: Vec<_> = records.iter().map(|r| r.m.clone()).collect();
    Ok(McwfResult {
        series: ExpectationSeries::from_samples(t_grid.to_vec(), &n, &m),
        cutoff: cfg.cutoff,
        step: h_max,
        max_top_population: max_top,
        per_trajectory_n: n,
    })
}

/// Outcome of a cutoff doubling test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffConvergence {
    pub cutoff: usize,
    /// Largest relative change of the mean `n` over sites and times with
    /// `n > 0.1`.
    pub max_relative_change: f64,
    pub converged: bool,
}

/// Compares cutoff `d` with `2d` on the same trajectories (same seeds and
/// step), so the change is free of sampling noise.
pub fn check_cutoff_convergence(
    params: &ChainParams,
    cutoff: usize,
    n_traj: usize,
    t_grid: &[f64],
    seed: u64,
    tolerance: f64,
) -> Result<CutoffConvergence, OracleError> {
    let mut big_cfg = FockConfig::new(2 * cutoff, params.sites);
    big_cfg.dimension_cap = big_cfg.dimension_cap.max(big_cfg.dim());
    let step = default_step(&build_generators(params, big_cfg)?);
    let opts = McwfOptions {
        max_step: Some(step),
        initial: None,
    };
    let small = evolve_mcwf(params, FockConfig::new(cutoff, params.sites), n_traj, t_grid, seed, &opts)?;
    let big = evolve_mcwf(params, big_cfg, n_traj, t_grid, seed, &opts)?;
    let mut worst: f64 = 0.0;
    for s in 0..params.sites {
        for i in 0..t_grid.len() {
            let (a, b) = (small.series.n[s][i], big.series.n[s][i]);
            if b > 0.1 {
                worst = worst.max((a - b).abs() / b);
            }
        }
    }
    Ok(CutoffConvergence {
        cutoff,
        max_relative_change: worst,
        converged: worst < tolerance,
    })
}

/// Density matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub dim: usize,
    pub data: Vec<Complex64>,
    pub time: f64,
}

impl DensityMatrix {
    pub fn pure(dim: usize, idx: usize) -> Self {
        let mut data = vec![ZERO; dim * dim];
        data[idx * dim + idx] = Complex64::new(1.0, 0.0);
        DensityMatrix { dim, data, time: 0.0 }
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }

    /// `max |ρ − ρ†|`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim;
        let mut e: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                e = e.max((self.data[i * n + j] - self.data[j * n + i].conj()).norm());
            }
        }
        e
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    fn adjoint_in_place(buf: &mut [Complex64], n: usize) {
        for i in 0..n {
            buf[i * n + i] = buf[i * n + i].conj();
            for j in i + 1..n {
                let a = buf[i * n + j];
                buf[i * n + j] = buf[j * n + i].conj();
                buf[j * n + i] = a.conj();
            }
        }
    }

    const MAGIC: &'static [u8; 8] = b"TWARHO\0\0";
    const VERSION: u32 = 1;

    /// Layout (little endian): magic `TWARHO\0\0`, version `u32`, dimension
    /// `u64`, time `f64`, then `dim²` pairs of `f64` (real, imaginary) in row
    /// order.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.time.to_le_bytes())?;
        for c in &self.data {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, OracleError> {
        let err = |e: io::Error| OracleError::Snapshot(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(err)?;
        if &magic != Self::MAGIC {
            return Err(OracleError::Snapshot("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(err)?;
        if u32::from_le_bytes(b4) != Self::VERSION {
            return Err(OracleError::Snapshot("unsupported version".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(err)?;
        let dim = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(err)?;
        let time = f64::from_le_bytes(b8);
        let mut data = Vec::with_capacity(dim * dim);
        for _ in 0..dim * dim {
            r.read_exact(&mut b8).map_err(err)?;
            let re = f64::from_le_bytes(b8);
            r.read_exact(&mut b8).map_err(err)?;
            data.push(Complex64::new(re, f64::from_le_bytes(b8)));
        }
        Ok(DensityMatrix { dim, data, time })
    }
}

/// Result of a dense master-equation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseResult {
    pub series: ExpectationSeries,
    /// Largest `|Tr ρ − 1|` seen.
    pub max_trace_error: f64,
    /// Largest `max |ρ − ρ†|` seen.
    pub max_hermiticity_error: f64,
    /// State at every grid time.
    pub snapshots: Vec<DensityMatrix>,
}

struct Lindblad<'a> {
    gens: &'a Generators,
    h_eff: Csr,
    x: Vec<Complex64>,
    y: Vec<Complex64>,
    adj: Vec<Complex64>,
}

impl<'a> Lindblad<'a> {
    fn new(gens: &'a Generators) -> Self {
        let dim = gens.dim();
        let mut t: Vec<(usize, usize, Complex64)> = Vec::new();
        let dense = gens.h_off.to_dense();
        for (k, v) in dense.iter().enumerate() {
            if *v != ZERO {
                t.push((k / dim, k % dim, *v));
            }
        }
        for (i, d) in gens.effective_diagonal().into_iter().enumerate() {
            t.push((i, i, d));
        }
        Lindblad {
            gens,
            h_eff: Csr::from_triplets(dim, t),
            x: vec![ZERO; dim * dim],
            y: vec![ZERO; dim * dim],
            adj: vec![ZERO; dim * dim],
        }
    }

    /// `out = −i(H_eff ρ − ρ H_eff†) + Σ L ρ L†`.
    fn rhs(&mut self, rho: &[Complex64], out: &mut [Complex64]) {
        let n = self.gens.dim();
        self.adj.copy_from_slice(rho);
        DensityMatrix::adjoint_in_place(&mut self.adj, n);
        self.h_eff.mul_dense(rho, &mut self.x);
        // ρ H_eff† = (H_eff ρ†)†.
        self.h_eff.mul_dense(&self.adj, &mut self.y);
        DensityMatrix::adjoint_in_place(&mut self.y, n);
        for k in 0..n * n {
            out[k] = -I * (self.x[k] - self.y[k]);
        }
        for (_, l) in &self.gens.jumps {
            // L ρ L† = L (L ρ†)†.
            l.mul_dense(&self.adj, &mut self.x);
            DensityMatrix::adjoint_in_place(&mut self.x, n);
            l.mul_dense(&self.x, &mut self.y);
            for k in 0..n * n {
                out[k] += self.y[k];
            }
        }
    }
}

fn dense_observables(gens: &Generators, rho: &DensityMatrix) -> (Vec<f64>, Vec<f64>) {
    let sites = gens.config.sites;
    let mut n = vec![0.0; sites];
    let mut m = vec![0.0; sites];
    for i in 0..rho.dim {
        let p = rho.get(i, i).re;
        for s in 0..sites {
            let k = gens.occupations[s][i];
            n[s] += k * p;
            m[s] += k * (k - 1.0) * p;
        }
    }
    (n, m)
}

/// Integrates the master equation with classical RK4 from the Fock state
/// `initial` (vacuum if `None`).
pub fn evolve_dense(
    params: &ChainParams,
    cfg: FockConfig,
    t_grid: &[f64],
    initial: Option<&[usize]>,
    max_step: Option<f64>,
) -> Result<DenseResult, OracleError> {
    check_grid(t_grid)?;
    let gens = build_generators(params, cfg)?;
    let dim = gens.dim();
    let init = match initial {
        None => 0,
        Some(o) => {
            if o.len() != cfg.sites || o.iter().any(|&k| k >= cfg.cutoff) {
                return Err(OracleError::InvalidInitialState(o.to_vec()));
            }
            cfg.index(o)
        }
    };
    let mut lind = Lindblad::new(&gens);
    let h_max = max_step.unwrap_or_else(|| (0.5 / (2.0 * lind.h_eff.norm_inf() + params.loss * cfg.cutoff as f64)).min(0.01));
    let mut rho = DensityMatrix::pure(dim, init);
    let nn = dim * dim;
    let mut k = [vec![ZERO; nn], vec![ZERO; nn], vec![ZERO; nn], vec![ZERO; nn]];
    let mut tmp = vec![ZERO; nn];
    let mut snapshots = vec![rho.clone()];
    let mut trace_err: f64 = (rho.trace() - 1.0).norm();
    let mut herm_err: f64 = 0.0;
    let (n0, m0) = dense_observables(&gens, &rho);
    let mut ns = vec![n0];
    let mut ms = vec![m0];
    for w in t_grid.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / h_max).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for _ in 0..steps {
            lind.rhs(&rho.data, &mut k[0]);
            for j in 0..nn {
                tmp[j] = rho.data[j] + 0.5 * h * k[0][j];
            }
            lind.rhs(&tmp, &mut k[1]);
            for j in 0..nn {
                tmp[j] = rho.data[j] + 0.5 * h * k[1][j];
            }
            lind.rhs(&tmp, &mut k[2]);
            for j in 0..nn {
                tmp[j] = rho.data[j] + h * k[2][j];
            }
            lind.rhs(&tmp, &mut k[3]);
            for j in 0..nn {
                rho.data[j] += h / 6.0 * (k[0][j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]);
            }
        }
        rho.time = w[1];
        trace_err = trace_err.max((rho.trace() - 1.0).norm());
        herm_err = herm_err.max(rho.hermiticity_error());
        let (n, m) = dense_observables(&gens, &rho);
        ns.push(n);
        ms.push(m);
        snapshots.push(rho.clone());
    }
    let series = ExpectationSeries::from_samples(t_grid.to_vec(), &[ns], &[ms]);
    Ok(DenseResult {
        series,
        max_trace_error: trace_err,
        max_hermiticity_error: herm_err,
        snapshots,
    })
}

/// `ln Γ(k+1)` for integer `k`.
fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|j| (j as f64).ln()).sum()
}

/// Wigner function of a single-mode density matrix on `grid`, using
/// `W_{|m⟩⟨n|}(α) = (2/π)(−1)^n √(n!/m!) (2α*)^{m−n} e^{−2|α|²} L_n^{(m−n)}(4|α|²)`
/// for `m ≥ n` and its conjugate otherwise.
pub fn density_wigner(rho: &DensityMatrix, grid: &Grid2D) -> WignerHistogram {
    let d = rho.dim;
    let mut values = Vec::with_capacity(grid.len());
    let mut lag = vec![0.0; d];
    for alpha in grid.centers() {
        let r2 = alpha.norm_sqr();
        let x = 4.0 * r2;
        let phase = if r2 > 0.0 { alpha.conj() / r2.sqrt() } else { Complex64::new(1.0, 0.0) };
        let mut w = 0.0;
        for k in 0..d {
            // Generalized Laguerre L_n^{(k)}(x) for n = 0..d−k.
            let len = d - k;
            lag[0] = 1.0;
            if len > 1 {
                lag[1] = 1.0 + k as f64 - x;
            }
            for n in 1..len.saturating_sub(1) {
                let nf = n as f64;
                lag[n + 1] = ((2.0 * nf + 1.0 + k as f64 - x) * lag[n] - (nf + k as f64) * lag[n - 1]) / (nf + 1.0);
            }
            let rot = phase.powu(k as u32);
            for n in 0..len {
                let m = n + k;
                let ln_pref = 0.5 * (ln_factorial(n) - ln_factorial(m)) + k as f64 * (2.0 * r2.sqrt()).ln() - 2.0 * r2;
                let pref = if k == 0 { (-2.0 * r2 + 0.0).exp() } else if r2 > 0.0 { ln_pref.exp() } else { 0.0 };
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                let base = 2.0 / PI * sign * pref * lag[n];
                if k == 0 {
                    w += base * rho.get(m, n).re;
                } else {
                    // ρ_{mn} W_{mn} + ρ_{nm} W_{nm} = 2 Re(ρ_{mn} W_{mn}).
                    w += 2.0 * (rho.get(m, n) * rot * base).re;
                }
            }
        }
        values.push(w);
    }
    WignerHistogram::from_density(*grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn two_level_truncation() {
        let p = ChainParams::new(1, 2, 5.6, 0.0, 0.0).with_kerr(0.0);
        let g = build_generators(&p, FockConfig::new(2, 1)).unwrap();
        assert_eq!(g.hamiltonian.to_dense(), vec![c(0.0), c(0.0), c(0.0), c(-5.6)]);
    }

    #[test]
    fn number_operator_from_ladder() {
        let p = ChainParams::new(1, 2, 0.0, 0.0, 0.0).with_kerr(0.0);
        let g = build_generators(&p, FockConfig::new(6, 1)).unwrap();
        let a = &g.jumps[0].1;
        for k in 0..6 {
            // (a†a)_kk = Σ_j |a_jk|².
            let n: f64 = (0..6).map(|j| a.get(j, k).norm_sqr()).sum();
            assert_abs_diff_eq!(n, k as f64, epsilon = 1e-12);
            assert_eq!(g.occupations[0][k], k as f64);
        }
    }

    #[test]
    fn two_photon_drive_elements() {
        let p = ChainParams::new(1, 2, 0.0, 0.0, 1.7).with_kerr(0.0);
        let g = build_generators(&p, FockConfig::new(3, 1)).unwrap();
        let h = &g.hamiltonian;
        assert_abs_diff_eq!(h.get(2, 0).re, 1.7 * 2f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_eq!(h.get(0, 2), h.get(2, 0));
        assert_eq!(h.nnz(), 2);
    }

    #[test]
    fn hopping_elements_and_basis() {
        let p = ChainParams::new(2, 2, 0.0, 2.2, 0.0).with_kerr(0.0);
        let cfg = FockConfig::new(4, 2);
        let g = build_generators(&p, cfg).unwrap();
        let i = cfg.index(&[2, 1]);
        let j = cfg.index(&[1, 2]);
        assert_eq!(cfg.occupation(i, 0), 2);
        assert_eq!(cfg.occupation(i, 1), 1);
        assert_abs_diff_eq!(g.hamiltonian.get(j, i).re, -2.2 * 4f64.sqrt(), epsilon = 1e-12);
        assert_eq!(g.jumps.len(), 2);
        assert_eq!(g.jumps[1].0, 1);
    }

    #[test]
    fn caps_and_site_limits() {
        let p = ChainParams::new(3, 2, 0.0, 0.0, 0.0);
        assert_eq!(build_generators(&p, FockConfig::new(4, 3)).unwrap_err(), OracleError::TooManySites(3));
        let p = ChainParams::new(2, 2, 0.0, 0.0, 0.0);
        let mut cfg = FockConfig::new(100, 2);
        cfg.dimension_cap = 1000;
        assert!(matches!(build_generators(&p, cfg), Err(OracleError::DimensionCap { dim: 10000, .. })));
    }

    #[test]
    fn dark_vacuum() {
        let p = ChainParams::new(2, 2, 5.6, 2.2, 0.0);
        let r = evolve_mcwf(&p, FockConfig::new(5, 2), 4, &[0.0, 1.0, 2.0], 1, &McwfOptions::default()).unwrap();
        assert!(r.series.n.iter().flatten().all(|x| *x == 0.0));
        assert!(r.series.dn.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn single_photon_decay() {
        let p = ChainParams::new(1, 2, 0.0, 0.0, 0.0).with_kerr(0.0);
        let grid: Vec<f64> = (0..=10).map(|i| 0.3 * i as f64).collect();
        let opts = McwfOptions {
            max_step: None,
            initial: Some(vec![1]),
        };
        let r = evolve_mcwf(&p, FockConfig::new(3, 1), 4000, &grid, 2, &opts).unwrap();
        for (i, t) in grid.iter().enumerate() {
            let exact = (-t).exp();
            let se = (exact * (1.0 - exact) / 4000.0).sqrt().max(1e-12);
            assert!((r.series.n[0][i] - exact).abs() < 4.0 * se + 1e-9, "t={t}");
        }
        let d = evolve_dense(&p, FockConfig::new(3, 1), &grid, Some(&[1]), None).unwrap();
        for (i, t) in grid.iter().enumerate() {
            assert_abs_diff_eq!(d.series.n[0][i], (-t).exp(), epsilon = 1e-8);
        }
    }

    #[test]
    fn dense_trace_and_hermiticity() {
        let p = ChainParams::new(1, 2, 5.6, 0.0, 2.0).with_kerr(0.5);
        let grid: Vec<f64> = (0..=10).map(|i| 5.0 * i as f64).collect();
        let r = evolve_dense(&p, FockConfig::new(16, 1), &grid, None, None).unwrap();
        assert!(r.max_trace_error < 1e-8, "{}", r.max_trace_error);
        assert!(r.max_hermiticity_error < 1e-10, "{}", r.max_hermiticity_error);
    }

    #[test]
    fn leakage_is_detected() {
        let p = ChainParams::new(1, 2, 0.0, 0.0, 6.0).with_kerr(0.0);
        let err = evolve_mcwf(&p, FockConfig::new(4, 1), 4, &[0.0, 1.0], 1, &McwfOptions::default()).unwrap_err();
        assert!(matches!(err, OracleError::CutoffLeakage { .. }));
    }

    #[test]
    fn wigner_of_fock_and_coherent_states() {
        let grid = Grid2D::square(4.0, 81);
        let fock1 = DensityMatrix::pure(6, 1);
        let w = density_wigner(&fock1, &grid);
        assert_abs_diff_eq!(w.integral(), 1.0, epsilon = 1e-6);
        let centre = w.weights[40 * 81 + 40];
        assert_abs_diff_eq!(centre, -2.0 / PI, epsilon = 1e-12);

        // Coherent state β = 1.5i.
        let beta = Complex64::new(0.0, 1.5);
        let d = 25;
        let amps: Vec<Complex64> = (0..d)
            .map(|k| (-0.5 * beta.norm_sqr()).exp() * beta.powu(k as u32) / ln_factorial(k).mul_add(0.5, 0.0).exp())
            .collect();
        let mut rho = DensityMatrix::pure(d, 0);
        for i in 0..d {
            for j in 0..d {
                rho.data[i * d + j] = amps[i] * amps[j].conj();
            }
        }
        let w = density_wigner(&rho, &grid);
        let (imax, _) = w.weights.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let peak = grid.center(imax % 81, imax / 81);
        assert!((peak - beta).norm() < 0.1, "peak at {peak}");
        let expect = 2.0 / PI * (-2.0 * (peak - beta).norm_sqr()).exp();
        assert_abs_diff_eq!(w.weights[imax], expect, epsilon = 1e-9);
    }

    #[test]
    fn hermite_root_of_exponential_decay() {
        // ln N(s) = −3s against ln r = −0.004 on h = 2e-3.
        let g = |s: f64| -3.0 * s + 0.004;
        let root = hermite_root(2e-3, g(0.0), -3.0, g(2e-3), -3.0);
        assert_abs_diff_eq!(root, 0.004 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn cutoff_doubling_on_weak_drive() {
        let p = ChainParams::new(2, 2, 1.0, 1.0, 0.5);
        let grid = [0.0, 1.0, 2.0];
        let c = check_cutoff_convergence(&p, 12, 2, &grid, 3, 5e-3).unwrap();
        assert!(c.converged, "{c:?}");
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rho = DensityMatrix::pure(3, 1);
        rho.data[1] = Complex64::new(0.25, -0.5);
        rho.time = 3.5;
        let mut buf = Vec::new();
        rho.write(&mut buf).unwrap();
        assert_eq!(DensityMatrix::read(&buf[..]).unwrap(), rho);
        assert!(DensityMatrix::read(&b"nonsense"[..]).is_err());
    }

    #[test]
    fn delta_method_series() {
        // Two samples with deterministic n and ⟨a†²a²⟩.
        let n = vec![vec![vec![1.0]], vec![vec![3.0]]];
        let m = vec![vec![vec![0.0]], vec![vec![6.0]]];
        let s = ExpectationSeries::from_samples(vec![0.0], &n, &m);
        assert_eq!(s.n[0][0], 2.0);
        assert_eq!(s.dn[0][0], 3.0 - 4.0);
        assert!(s.dn_se[0][0] > 0.0);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t[1/gamma],n_1,n_1_se,dn_1,dn_1_se"));
    }
}
