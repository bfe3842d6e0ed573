//! Local thermodynamics from Wigner histograms.
//!
//! Three radially symmetric single-mode models are fitted to a local Wigner
//! histogram by minimizing the L² distance between the two functions:
//!
//! * the Gibbs state with weights `w_k ∝ exp[−(U k²/2 − μ k)/T]`,
//! * the one-parameter thermal state `w_k ∝ e^{ξ k}`,
//! * the steady state of a driven-dissipative impurity with incoherent gain
//!   `γ↑`, loss `γ↓`, dephasing `γ^φ` and two-photon loss `γ^s`.
//!
//! Every model is diagonal in Fock space, so its Wigner function is the
//! weighted sum `Σ w_k W_k` of Fock-state Wigner functions
//! `W_k(α) = (2/π)(−1)^k e^{−2|α|²} L_k(4|α|²)`.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::observables::{Grid2D, WignerHistogram};
use crate::simplex::{self, Options};

/// Largest Fock level any model may use.
pub const FOCK_CAP: usize = 256;
/// Weight allowed above the Fock cutoff.
pub const TAIL_TOLERANCE: f64 = 1e-8;
/// Population allowed in the top level of the impurity steady state.
pub const LEAKAGE_TOLERANCE: f64 = 1e-6;
/// Histograms with a circular moment above this are not fitted.
pub const MAX_CIRCULAR_MOMENT: f64 = 0.2;
/// Number of starts of the simplex search.
pub const N_STARTS: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("Fock cutoff too small: tail weight {tail:e}")]
    CutoffTooSmall { tail: f64 },
    #[error("no normalizable steady state for these rates")]
    NoSteadyState,
    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),
    #[error("histogram is phase ordered (C{m} = {value:.3}); radial models do not apply")]
    PhaseOrdered { m: usize, value: f64 },
    #[error("grids differ")]
    GridMismatch,
    #[error("no input samples")]
    EmptyInput,
    #[error("{got} samples, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },
}

/// `e^{−x/2} L_k(x)` for `k = 0..out.len()`, stable for large `x` and `k`.
pub fn laguerre_functions(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    const BIG: f64 = 1e150;
    let ln_big = BIG.ln();
    let mut log_scale = -0.5 * x;
    let mut prev = 0.0;
    let mut cur = 1.0;
    let emit = |v: f64, ls: f64| if v == 0.0 { 0.0 } else { v.signum() * (v.abs().ln() + ls).exp() };
    out[0] = emit(cur, log_scale);
    for k in 0..out.len() - 1 {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0 - x) * cur - kf * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
        if cur.abs() > BIG {
            cur /= BIG;
            prev /= BIG;
            log_scale += ln_big;
        }
        out[k + 1] = emit(cur, log_scale);
    }
}

/// Wigner function of the Fock state `|k⟩` at `|α|² = r2`.
pub fn fock_wigner(k: usize, r2: f64) -> f64 {
    let mut buf = vec![0.0; k + 1];
    laguerre_functions(4.0 * r2, &mut buf);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    2.0 / PI * sign * buf[k]
}

/// Wigner function of a thermal state with mean occupation `nbar`.
pub fn thermal_wigner(nbar: f64, r2: f64) -> f64 {
    let s = nbar + 0.5;
    (-r2 / s).exp() / (PI * s)
}

/// Normalizes log-weights, truncating where the tail drops below
/// [`TAIL_TOLERANCE`].
fn truncate_log_weights(logw: &[f64], cutoff: Option<usize>) -> Result<Vec<f64>, FitError> {
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(FitError::CutoffTooSmall { tail: f64::NAN });
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let w: Vec<f64> = w.into_iter().map(|x| x / total).collect();
    // Tail beyond the computed range must itself be negligible.
    if *w.last().unwrap() > 1e-3 * TAIL_TOLERANCE {
        return Err(FitError::CutoffTooSmall { tail: *w.last().unwrap() });
    }
    let mut tail = vec![0.0; w.len() + 1];
    for k in (0..w.len()).rev() {
        tail[k] = tail[k + 1] + w[k];
    }
    let k_max = match cutoff {
        Some(c) => {
            let c = c.min(w.len());
            if tail[c] >= TAIL_TOLERANCE {
                return Err(FitError::CutoffTooSmall { tail: tail[c] });
            }
            c
        }
        None => {
            let c = (1..=w.len()).find(|&c| tail[c] < TAIL_TOLERANCE).unwrap();
            if c > FOCK_CAP {
                return Err(FitError::CutoffTooSmall { tail: tail[FOCK_CAP] });
            }
            c
        }
    };
    let kept: f64 = w[..k_max].iter().sum();
    Ok(w[..k_max].iter().map(|x| x / kept).collect())
}

/// Gibbs state of the local Kerr oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsModel {
    pub temperature: f64,
    pub chemical_potential: f64,
    pub kerr: f64,
    /// Explicit number of Fock levels; chosen from the tail if absent.
    pub fock_cutoff: Option<usize>,
}

impl GibbsModel {
    pub fn new(temperature: f64, chemical_potential: f64, kerr: f64) -> Self {
        GibbsModel {
            temperature,
            chemical_potential,
            kerr,
            fock_cutoff: None,
        }
    }

    /// Normalized weights `w_0..w_{K−1}`.
    pub fn weights(&self) -> Result<Vec<f64>, FitError> {
        let range = 2 * FOCK_CAP.max(self.fock_cutoff.unwrap_or(0));
        let logw: Vec<f64> = (0..range)
            .map(|k| {
                let k = k as f64;
                -(0.5 * self.kerr * k * k - self.chemical_potential * k) / self.temperature
            })
            .collect();
        truncate_log_weights(&logw, self.fock_cutoff)
    }
}

/// Thermal weights `(1 − e^ξ) e^{ξk}`.
pub fn thermal_weights(xi: f64) -> Result<Vec<f64>, FitError> {
    let logw: Vec<f64> = (0..2 * FOCK_CAP).map(|k| xi * k as f64).collect();
    truncate_log_weights(&logw, None)
}

/// `n̄ = 1/(e^{−ξ} − 1)`.
pub fn thermal_occupation(xi: f64) -> f64 {
    1.0 / (-xi).exp_m1()
}

/// `ξ = ln(n̄/(n̄+1))`.
pub fn thermal_xi(nbar: f64) -> f64 {
    (nbar / (nbar + 1.0)).ln()
}

/// `−Σ w ln w`.
pub fn entropy(weights: &[f64]) -> f64 {
    weights.iter().filter(|w| **w > 0.0).map(|w| -w * w.ln()).sum()
}

pub fn mean_occupation(weights: &[f64]) -> f64 {
    weights.iter().enumerate().map(|(k, w)| k as f64 * w).sum()
}

/// Wigner function of the diagonal state `weights` on `grid`.
pub fn diagonal_wigner(weights: &[f64], grid: &Grid2D) -> WignerHistogram {
    let mut buf = vec![0.0; weights.len()];
    let values = grid
        .centers()
        .map(|c| {
            laguerre_functions(4.0 * c.norm_sqr(), &mut buf);
            let s: f64 = buf
                .iter()
                .zip(weights)
                .enumerate()
                .map(|(k, (l, w))| if k % 2 == 0 { w * l } else { -w * l })
                .sum();
            2.0 / PI * s
        })
        .collect();
    WignerHistogram::from_density(*grid, values)
}

/// Model Wigner function of a Gibbs state on `grid`.
pub fn gibbs_wigner(model: &GibbsModel, grid: &Grid2D) -> Result<WignerHistogram, FitError> {
    Ok(diagonal_wigner(&model.weights()?, grid))
}

/// Driven-dissipative single-mode impurity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpurityModel {
    pub rate_up: f64,
    pub rate_down: f64,
    pub rate_dephase: f64,
    pub rate_twophoton: f64,
    pub fock_cutoff: Option<usize>,
}

impl ImpurityModel {
    pub fn new(rate_up: f64, rate_down: f64, rate_dephase: f64, rate_twophoton: f64) -> Self {
        ImpurityModel {
            rate_up,
            rate_down,
            rate_dephase,
            rate_twophoton,
            fock_cutoff: None,
        }
    }

    /// `μ/T = ln(γ↑/γ↓)`.
    pub fn mu_over_t(&self) -> f64 {
        (self.rate_up / self.rate_down).ln()
    }
}

/// Diagonal steady state of an [`ImpurityModel`]. The generator conserves
/// the photon-number parity sectors of coherences, so off-diagonal elements
/// decay and only populations survive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpuritySteadyState {
    pub populations: Vec<f64>,
    /// Population of the top retained level.
    pub leakage: f64,
}

/// Populations on levels `0..levels` from zero net probability flux across
/// every cut `k | k+1`:
/// `γ↑(k+1)p_k = γ↓(k+1)p_{k+1} + γ^s(k+1)k p_{k+1} + γ^s(k+2)(k+1)p_{k+2}`,
/// solved downward from the top so every term stays positive.
fn flux_balance(m: &ImpurityModel, levels: usize) -> Vec<f64> {
    let mut p = vec![0.0; levels + 1];
    p[levels - 1] = 1.0;
    for k in (0..levels - 1).rev() {
        let kf = k as f64;
        let down = m.rate_down * (kf + 1.0) * p[k + 1]
            + m.rate_twophoton * (kf + 1.0) * kf * p[k + 1]
            + m.rate_twophoton * (kf + 2.0) * (kf + 1.0) * p[k + 2];
        p[k] = down / (m.rate_up * (kf + 1.0));
        if p[k] > 1e200 {
            for x in p[k..].iter_mut() {
                *x *= 1e-200;
            }
        }
    }
    p.truncate(levels);
    let total: f64 = p.iter().sum();
    p.into_iter().map(|x| x / total).collect()
}

pub fn impurity_steady_state(model: &ImpurityModel) -> Result<ImpuritySteadyState, FitError> {
    let m = model;
    if [m.rate_up, m.rate_down, m.rate_dephase, m.rate_twophoton]
        .iter()
        .any(|r| !(r.is_finite() && *r >= 0.0))
    {
        return Err(FitError::NoSteadyState);
    }
    if m.rate_up == 0.0 {
        let levels = m.fock_cutoff.unwrap_or(1).max(1);
        let mut populations = vec![0.0; levels];
        populations[0] = 1.0;
        return Ok(ImpuritySteadyState {
            populations,
            leakage: if levels == 1 { 1.0 } else { 0.0 },
        });
    }
    if m.rate_twophoton == 0.0 && m.rate_up >= m.rate_down {
        return Err(FitError::NoSteadyState);
    }
    let solve = |levels: usize| {
        let p = flux_balance(m, levels);
        let leak = *p.last().unwrap();
        ImpuritySteadyState {
            populations: p,
            leakage: leak,
        }
    };
    match m.fock_cutoff {
        Some(levels) => {
            let s = solve(levels.max(2));
            if s.leakage > LEAKAGE_TOLERANCE {
                Err(FitError::CutoffTooSmall { tail: s.leakage })
            } else {
                Ok(s)
            }
        }
        None => {
            let mut levels = 16;
            loop {
                let s = solve(levels);
                if s.leakage < 1e-3 * TAIL_TOLERANCE {
                    return Ok(s);
                }
                if levels >= 2 * FOCK_CAP {
                    return Err(FitError::CutoffTooSmall { tail: s.leakage });
                }
                levels *= 2;
            }
        }
    }
}

/// Model Wigner function of the impurity steady state on `grid`.
pub fn impurity_wigner(model: &ImpurityModel, grid: &Grid2D) -> Result<WignerHistogram, FitError> {
    Ok(diagonal_wigner(&impurity_steady_state(model)?.populations, grid))
}

/// `[∫ |W_a − W_b|² d²α]^{1/2}` with `d²α = dRe α dIm α`.
pub fn l2_norm(a: &WignerHistogram, b: &WignerHistogram) -> Result<f64, FitError> {
    if a.grid != b.grid {
        return Err(FitError::GridMismatch);
    }
    let s: f64 = a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s * a.grid.cell_area()).sqrt())
}

/// Histogram reduced to radial bins about the origin, with each model basis
/// function averaged over the same cells.
pub struct RadialData {
    grid: Grid2D,
    cells: Vec<f64>,
    target: Vec<f64>,
    /// Squared radius of every cell, grouped by bin.
    cell_r2: Vec<Vec<f64>>,
    k_max: usize,
    /// `basis[j * k_max + k]`: mean of `W_k` over bin `j`.
    basis: Vec<f64>,
    /// ⟨|α|²⟩ − 1/2 under the histogram.
    pub mean_photons: f64,
}

impl RadialData {
    pub fn new(hist: &WignerHistogram) -> Result<Self, FitError> {
        let grid = hist.grid;
        if grid.is_empty() || !hist.weights.iter().any(|w| *w > 0.0) {
            return Err(FitError::DegenerateHistogram("empty".into()));
        }
        let dr = grid.dx().min(grid.dy());
        let r_max = grid.centers().map(|c| c.norm()).fold(0.0, f64::max);
        let bins = ((r_max / dr).ceil() as usize).max(1);
        let k_max = FOCK_CAP.min((2.0 * r_max * r_max).ceil() as usize + 40);
        let mut cells = vec![0.0; bins];
        let mut target = vec![0.0; bins];
        let mut cell_r2 = vec![Vec::new(); bins];
        let mut basis = vec![0.0; bins * k_max];
        let mut buf = vec![0.0; k_max];
        for (c, w) in grid.centers().zip(&hist.weights) {
            let r2 = c.norm_sqr();
            let j = ((r2.sqrt() / dr) as usize).min(bins - 1);
            cells[j] += 1.0;
            target[j] += w;
            cell_r2[j].push(r2);
            laguerre_functions(4.0 * r2, &mut buf);
            let row = &mut basis[j * k_max..(j + 1) * k_max];
            for (k, (b, l)) in row.iter_mut().zip(&buf).enumerate() {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                *b += 2.0 / PI * sign * l;
            }
        }
        for j in 0..bins {
            if cells[j] > 0.0 {
                target[j] /= cells[j];
                for b in &mut basis[j * k_max..(j + 1) * k_max] {
                    *b /= cells[j];
                }
            }
        }
        Ok(RadialData {
            grid,
            cells,
            target,
            cell_r2,
            k_max,
            basis,
            mean_photons: hist.second_moment() - 0.5,
        })
    }

    fn residual(&self, model: impl Fn(usize) -> f64) -> f64 {
        let da = self.grid.cell_area();
        (0..self.cells.len())
            .filter(|&j| self.cells[j] > 0.0)
            .map(|j| self.cells[j] * da * (self.target[j] - model(j)).powi(2))
            .sum()
    }

    /// Squared radial L² of a diagonal state; `None` if it needs more levels
    /// than the basis holds.
    fn diagonal_residual(&self, weights: &[f64]) -> Option<f64> {
        if weights.len() > self.k_max {
            let beyond: f64 = weights[self.k_max..].iter().sum();
            if beyond > TAIL_TOLERANCE {
                return None;
            }
        }
        let k = weights.len().min(self.k_max);
        Some(self.residual(|j| {
            let row = &self.basis[j * self.k_max..j * self.k_max + k];
            row.iter().zip(weights).map(|(b, w)| b * w).sum()
        }))
    }

    fn thermal_residual(&self, nbar: f64) -> f64 {
        self.residual(|j| {
            let r = &self.cell_r2[j];
            r.iter().map(|&r2| thermal_wigner(nbar, r2)).sum::<f64>() / r.len() as f64
        })
    }
}

/// Which ansatz a report belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gibbs,
    OneParam,
    Impurity,
}

/// Result of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: ModelKind,
    pub temperature: Option<f64>,
    pub chemical_potential: Option<f64>,
    pub xi: Option<f64>,
    pub mu_over_t: Option<f64>,
    pub entropy: Option<f64>,
    pub mean_photons: f64,
    /// Impurity rates in units of `γ↓`.
    pub rate_up: Option<f64>,
    pub rate_down: Option<f64>,
    pub rate_twophoton: Option<f64>,
    pub l2_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub flags: Vec<String>,
}

impl FitReport {
    fn empty(kind: ModelKind) -> Self {
        FitReport {
            kind,
            temperature: None,
            chemical_potential: None,
            xi: None,
            mu_over_t: None,
            entropy: None,
            mean_photons: f64::NAN,
            rate_up: None,
            rate_down: None,
            rate_twophoton: None,
            l2_residual: f64::NAN,
            converged: false,
            iterations: 0,
            flags: Vec::new(),
        }
    }
}

fn check_symmetric(hist: &WignerHistogram) -> Result<(), FitError> {
    for m in 1..=3 {
        let c = hist.circular_moment(m);
        if c > MAX_CIRCULAR_MOMENT {
            return Err(FitError::PhaseOrdered { m, value: c });
        }
    }
    Ok(())
}

fn fit_options() -> Options {
    Options {
        max_iter: 2000,
        f_tol: 1e-12,
        x_tol: 1e-8,
        step: 0.3,
    }
}

/// Fits the thermal ansatz on `ln n̄ ∈ [−20, 10]`. The result is flagged
/// "vacuum_like" when `n̄ < 10⁻³`.
fn fit_thermal(data: &RadialData, hist: &WignerHistogram, kind: ModelKind) -> FitReport {
    let clamp = |s: f64| s.clamp(-20.0, 10.0);
    let n0 = data.mean_photons.max(1e-3);
    let starts: Vec<Vec<f64>> = [0.1, 0.5, 1.0, 2.0, 10.0].iter().map(|f| vec![clamp((f * n0).ln())]).collect();
    let best = simplex::multi_start(|x| data.thermal_residual(clamp(x[0]).exp()), &starts, fit_options());
    let nbar = clamp(best.x[0]).exp();
    let xi = thermal_xi(nbar);
    let model: Vec<f64> = hist.grid.centers().map(|c| thermal_wigner(nbar, c.norm_sqr())).collect();
    let model = WignerHistogram::from_density(hist.grid, model);
    let mut r = FitReport::empty(kind);
    r.xi = Some(xi);
    r.mu_over_t = Some(xi);
    r.mean_photons = nbar;
    r.entropy = Some((nbar + 1.0) * (nbar + 1.0).ln() - if nbar > 0.0 { nbar * nbar.ln() } else { 0.0 });
    r.l2_residual = l2_norm(hist, &model).unwrap();
    r.converged = best.converged;
    r.iterations = best.iterations;
    if nbar < 1e-3 {
        r.flags.push("vacuum_like".into());
    }
    if !best.converged {
        r.flags.push("not_converged".into());
    }
    r
}

/// Fits the Gibbs ansatz with fixed Kerr `kerr` over `(ln T, μ/T)`. With
/// `kerr = 0` only `ξ = μ/T` is identifiable and the thermal fit is returned.
pub fn fit_gibbs(hist: &WignerHistogram, kerr: f64) -> Result<FitReport, FitError> {
    check_symmetric(hist)?;
    let data = RadialData::new(hist)?;
    fit_gibbs_on(&data, hist, kerr)
}

fn fit_gibbs_on(data: &RadialData, hist: &WignerHistogram, kerr: f64) -> Result<FitReport, FitError> {
    if kerr == 0.0 {
        return Ok(fit_thermal(data, hist, ModelKind::Gibbs));
    }
    let n0 = data.mean_photons.max(0.1);
    let scale = kerr * n0.max(1.0).powi(2);
    let xi_th = thermal_xi(n0);
    let mut starts = Vec::new();
    for f in [0.01, 0.1, 1.0, 10.0, 100.0] {
        let t: f64 = scale * f;
        for xi in [xi_th, 0.5 * xi_th, kerr * n0 / t, 0.5 * kerr * n0 / t] {
            starts.push(vec![t.ln(), xi]);
        }
    }
    let weights_at = |x: &[f64]| {
        let t = x[0].exp();
        GibbsModel::new(t, x[1] * t, kerr).weights()
    };
    let best = simplex::multi_start(
        |x| match weights_at(x) {
            Ok(w) => data.diagonal_residual(&w).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        },
        &starts,
        fit_options(),
    );
    let w = weights_at(&best.x)?;
    let t = best.x[0].exp();
    let mut r = FitReport::empty(ModelKind::Gibbs);
    r.temperature = Some(t);
    r.chemical_potential = Some(best.x[1] * t);
    r.xi = Some(best.x[1]);
    r.mu_over_t = Some(best.x[1]);
    r.entropy = Some(entropy(&w));
    r.mean_photons = mean_occupation(&w);
    r.l2_residual = l2_norm(hist, &diagonal_wigner(&w, &hist.grid))?;
    r.converged = best.converged;
    r.iterations = best.iterations;
    if !best.converged {
        r.flags.push("not_converged".into());
    }
    Ok(r)
}

/// One-parameter thermal fit. When the equipartition temperature `t_eq` is
/// given, `μ = ξ T_eq` is reported as well.
pub fn fit_one_param(hist: &WignerHistogram, t_eq: Option<f64>) -> Result<FitReport, FitError> {
    check_symmetric(hist)?;
    let data = RadialData::new(hist)?;
    Ok(fit_one_param_on(&data, hist, t_eq))
}

fn fit_one_param_on(data: &RadialData, hist: &WignerHistogram, t_eq: Option<f64>) -> FitReport {
    let mut r = fit_thermal(data, hist, ModelKind::OneParam);
    if let Some(t) = t_eq {
        r.temperature = Some(t);
        r.chemical_potential = r.xi.map(|xi| xi * t);
    }
    r
}

/// Fits the impurity steady state over `(ln γ↑/γ↓, ln γ^s/γ↓)` with `γ^φ = 0`.
/// The steady state only depends on rate ratios, so `γ↓ = 1` sets the unit.
pub fn fit_impurity(hist: &WignerHistogram) -> Result<FitReport, FitError> {
    check_symmetric(hist)?;
    let data = RadialData::new(hist)?;
    fit_impurity_on(&data, hist)
}

fn impurity_at(x: &[f64]) -> ImpurityModel {
    let s = x[1].max(-30.0).exp();
    ImpurityModel::new(x[0].exp(), 1.0, 0.0, if x[1] <= -30.0 { 0.0 } else { s })
}

fn fit_impurity_on(data: &RadialData, hist: &WignerHistogram) -> Result<FitReport, FitError> {
    let n0 = data.mean_photons.max(1e-3);
    let r_th = n0 / (n0 + 1.0);
    let mut starts = Vec::new();
    for up in [0.5 * r_th, r_th, 0.5 * (1.0 + r_th), 1.5, 4.0] {
        for s in [1e-6, 1e-3, 1e-2, 1e-1] {
            starts.push(vec![f64::ln(up), f64::ln(s)]);
        }
    }
    let best = simplex::multi_start(
        |x| match impurity_steady_state(&impurity_at(x)) {
            Ok(s) => data.diagonal_residual(&s.populations).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        },
        &starts,
        fit_options(),
    );
    let model = impurity_at(&best.x);
    let state = impurity_steady_state(&model)?;
    let mut r = FitReport::empty(ModelKind::Impurity);
    r.rate_up = Some(model.rate_up);
    r.rate_down = Some(model.rate_down);
    r.rate_twophoton = Some(model.rate_twophoton);
    r.mu_over_t = Some(model.mu_over_t());
    r.entropy = Some(entropy(&state.populations));
    r.mean_photons = mean_occupation(&state.populations);
    r.l2_residual = l2_norm(hist, &diagonal_wigner(&state.populations, &hist.grid))?;
    r.converged = best.converged;
    r.iterations = best.iterations;
    let ratio = model.rate_up / model.rate_down;
    if !(0.1..=10.0).contains(&ratio) {
        r.flags.push("rates_not_comparable".into());
    }
    if model.rate_twophoton * (r.mean_photons + 1.0) > 0.1 * model.rate_up {
        r.flags.push("two_photon_loss_not_small".into());
    }
    if !best.converged {
        r.flags.push("not_converged".into());
    }
    Ok(r)
}

/// Empirical momentum distribution against the Maxwell-Boltzmann law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxwellBoltzmann {
    /// `T = |Δ| ⟨p²⟩`.
    pub temperature: f64,
    /// L¹ distance between the empirical and model densities.
    pub goodness: f64,
    pub degenerate: bool,
}

/// Compares the distribution of `p` with
/// `P(p) = √(|Δ|/2πT) exp(−|Δ| p²/2T)`, the normalized Gaussian whose
/// second moment is `T/|Δ| = ⟨p²⟩`.
pub fn maxwell_boltzmann_check(p: &[f64], detuning: f64) -> Result<MaxwellBoltzmann, FitError> {
    if p.is_empty() {
        return Err(FitError::EmptyInput);
    }
    if p.len() < 1000 {
        return Err(FitError::InsufficientSamples { got: p.len(), need: 1000 });
    }
    let n = p.len() as f64;
    let p2 = p.iter().map(|x| x * x).sum::<f64>() / n;
    let d = detuning.abs();
    let temperature = d * p2;
    if !(p2 > 0.0) {
        return Ok(MaxwellBoltzmann {
            temperature: 0.0,
            goodness: f64::NAN,
            degenerate: true,
        });
    }
    let sd = p2.sqrt();
    let bins = ((2.0 * n.cbrt()) as usize).clamp(20, 200);
    let h = crate::observables::Histogram1D::from_samples(p, -6.0 * sd, 6.0 * sd, bins);
    let w = h.bin_width();
    // The histogram is normalized over the samples it covers.
    let inside = p.iter().filter(|x| x.abs() < 6.0 * sd).count() as f64 / n;
    let model = |x: f64| (d / (2.0 * PI * temperature)).sqrt() * (-d * x * x / (2.0 * temperature)).exp();
    let l1: f64 = h
        .centers()
        .iter()
        .zip(&h.density)
        .map(|(x, rho)| (rho * inside - model(*x)).abs() * w)
        .sum::<f64>()
        + (1.0 - inside);
    Ok(MaxwellBoltzmann {
        temperature,
        goodness: l1,
        degenerate: false,
    })
}

/// All three fits at one site, as written to the profile table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermoRow {
    pub site: usize,
    pub t_eq: Option<f64>,
    pub gibbs: Option<FitReport>,
    pub one_param: Option<FitReport>,
    pub impurity: Option<FitReport>,
    pub flags: Vec<String>,
}

impl ThermoRow {
    /// μ/T from the Gibbs fit.
    pub fn mu_over_t(&self) -> Option<f64> {
        self.gibbs.as_ref().and_then(|g| g.mu_over_t)
    }
}

/// Runs every fit on one site's histogram. Failures become flags.
pub fn fit_site(site: usize, hist: &WignerHistogram, kerr: f64, t_eq: Option<f64>) -> ThermoRow {
    let mut row = ThermoRow {
        site,
        t_eq,
        gibbs: None,
        one_param: None,
        impurity: None,
        flags: Vec::new(),
    };
    if let Err(e) = check_symmetric(hist) {
        row.flags.push(format!("refused: {e}"));
        return row;
    }
    let data = match RadialData::new(hist) {
        Ok(d) => d,
        Err(e) => {
            row.flags.push(format!("refused: {e}"));
            return row;
        }
    };
    match fit_gibbs_on(&data, hist, kerr) {
        Ok(r) => row.gibbs = Some(r),
        Err(e) => row.flags.push(format!("gibbs: {e}")),
    }
    row.one_param = Some(fit_one_param_on(&data, hist, t_eq));
    match fit_impurity_on(&data, hist) {
        Ok(r) => row.impurity = Some(r),
        Err(e) => row.flags.push(format!("impurity: {e}")),
    }
    row
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

/// Per-site thermodynamic profile as CSV (energies in units of γ).
pub fn write_thermo_profile<W: Write>(rows: &[ThermoRow], w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "site",
        "T[gamma]",
        "mu[gamma]",
        "mu_over_T",
        "xi",
        "S",
        "L2_gibbs",
        "L2_thermal",
        "L2_impurity",
        "gamma_up[gamma_down]",
        "gamma_down",
        "gamma_s[gamma_down]",
        "mu_over_T_impurity",
        "T_eq[gamma]",
        "flags",
    ])?;
    for r in rows {
        let g = r.gibbs.as_ref();
        let o = r.one_param.as_ref();
        let i = r.impurity.as_ref();
        let mut flags = r.flags.clone();
        for rep in [g, o, i].into_iter().flatten() {
            flags.extend(rep.flags.iter().map(|f| format!("{:?}:{f}", rep.kind).to_lowercase()));
        }
        wtr.write_record(&[
            r.site.to_string(),
            cell(g.and_then(|x| x.temperature)),
            cell(g.and_then(|x| x.chemical_potential)),
            cell(g.and_then(|x| x.mu_over_t)),
            cell(o.and_then(|x| x.xi)),
            cell(g.and_then(|x| x.entropy)),
            cell(g.map(|x| x.l2_residual)),
            cell(o.map(|x| x.l2_residual)),
            cell(i.map(|x| x.l2_residual)),
            cell(i.and_then(|x| x.rate_up)),
            cell(i.and_then(|x| x.rate_down)),
            cell(i.and_then(|x| x.rate_twophoton)),
            cell(i.and_then(|x| x.mu_over_t)),
            cell(r.t_eq),
            flags.join(";"),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
