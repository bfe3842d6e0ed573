//! Semiclassical out-of-time-order correlator.
//!
//! Two replicas of each trajectory differ only by a phase kick `ε` at site
//! `k` and then share every noise increment. Their phase decorrelation
//!
//! `D_{k,ℓ}(τ) = 1 − ⟨cos(φᵃ_ℓ(t+τ) − φᵇ_ℓ(t+τ))⟩`
//!
//! spreads in a light cone whose edge gives the butterfly velocity and whose
//! early growth gives the Lyapunov rate.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{first_non_finite, kick_phase, Dynamics, EngineError, FieldEnsemble, NoiseProcess, Stepper};
use crate::model::ChainParams;

/// Default threshold defining the front of the cone.
pub const DEFAULT_FRONT_THRESHOLD: f64 = 0.1;
/// Default band of D values used for the exponential fit.
pub const DEFAULT_FIT_BAND: (f64, f64) = (1e-3, 1e-1);
/// Fraction of the τ grid averaged for the saturation value.
pub const SATURATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OtocError {
    #[error("ensemble not flagged as steady")]
    NotSteady,
    #[error("perturbed site {site} outside chain of {sites} sites")]
    PerturbSiteOutOfRange { site: usize, sites: usize },
    #[error("tau grid must be non-empty, non-negative and increasing")]
    InvalidTauGrid,
    #[error("front never reaches threshold at sites {0:?}")]
    FrontNotReached(Vec<usize>),
    #[error("site {site}: {points} points inside the fit band, need 3")]
    InsufficientBandPoints { site: usize, points: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// `D_{k,ℓ}(τ)` on a grid of lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtocSeries {
    pub perturb_site: usize,
    pub epsilon: f64,
    pub tau_grid: Vec<f64>,
    /// `d[ℓ][i]` is `D_{k,ℓ}(τ_i)`.
    pub d: Vec<Vec<f64>>,
    /// Standard error over trajectories, same layout as `d`.
    pub stderr: Vec<Vec<f64>>,
    pub n_pairs: usize,
}

impl OtocSeries {
    pub fn sites(&self) -> usize {
        self.d.len()
    }

    /// Mean of the last 20% of the τ grid for every site.
    pub fn saturation(&self) -> Vec<f64> {
        self.saturation_over(SATURATION_FRACTION)
    }

    pub fn saturation_over(&self, fraction: f64) -> Vec<f64> {
        let n = self.tau_grid.len();
        let start = n - ((fraction * n as f64).ceil() as usize).clamp(1, n);
        self.d
            .iter()
            .map(|row| row[start..].iter().sum::<f64>() / (n - start) as f64)
            .collect()
    }

    /// CSV with columns `site, tau, D, stderr` (sites 1-based, τ in 1/γ).
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["site", "tau[1/gamma]", "D", "stderr"])?;
        for (l, (row, se)) in self.d.iter().zip(&self.stderr).enumerate() {
            for (i, tau) in self.tau_grid.iter().enumerate() {
                wtr.write_record(&[
                    (l + 1).to_string(),
                    format!("{tau:.6}"),
                    format!("{:.10e}", row[i]),
                    format!("{:.4e}", se[i]),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// What to compute and how to average it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtocSpec {
    pub perturb_site: usize,
    pub epsilon: f64,
    pub tau_grid: Vec<f64>,
    /// Start times per trajectory, spaced by the last τ of the grid.
    pub n_starts: usize,
}

impl OtocSpec {
    /// Uniform grid `0, Δτ, …, τ_max` with a single start time.
    pub fn uniform(perturb_site: usize, epsilon: f64, tau_max: f64, d_tau: f64) -> Self {
        let n = (tau_max / d_tau).round() as usize;
        OtocSpec {
            perturb_site,
            epsilon,
            tau_grid: (0..=n).map(|i| i as f64 * d_tau).collect(),
            n_starts: 1,
        }
    }
}

/// cos of the phase difference; identical fields give exactly 1.
fn phase_cos(a: Complex64, b: Complex64) -> f64 {
    if a == b {
        return 1.0;
    }
    let den = (a.norm_sqr() * b.norm_sqr()).sqrt();
    if den > 0.0 {
        (a * b.conj()).re / den
    } else {
        1.0
    }
}

/// Computes `D_{k,ℓ}(τ)` from a steady ensemble. `noise` must continue the
/// ensemble's own streams; it is advanced by the run. With `n_starts > 1` the
/// unperturbed replica of one start becomes the reference state of the next.
pub fn compute_otoc(
    steady: &FieldEnsemble,
    noise: &mut [NoiseProcess],
    spec: &OtocSpec,
    params: &ChainParams,
    dynamics: Dynamics,
    dt: f64,
    is_steady: bool,
) -> Result<OtocSeries, OtocError> {
    if !is_steady {
        return Err(OtocError::NotSteady);
    }
    let sites = steady.sites();
    let k = spec.perturb_site;
    if k >= sites {
        return Err(OtocError::PerturbSiteOutOfRange { site: k, sites });
    }
    let grid = &spec.tau_grid;
    if grid.is_empty() || grid[0] < 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(OtocError::InvalidTauGrid);
    }
    let marks: Vec<usize> = grid.iter().map(|t| (t / dt).round() as usize).collect();
    let n_tau = grid.len();
    let total_steps = *marks.last().unwrap();
    let n_starts = spec.n_starts.max(1);
    let stepper = Stepper::new(params, dynamics, dt);
    let t0 = steady.time;

    // Per trajectory: mean over starts of cos, laid out [site][tau].
    let per_traj: Vec<Result<Vec<f64>, EngineError>> = steady
        .as_slice()
        .par_chunks(sites)
        .zip(noise.par_iter_mut())
        .enumerate()
        .map(|(traj, (init, noise))| {
            let mut st = stepper.clone();
            let mut a = init.to_vec();
            let mut b = vec![Complex64::default(); sites];
            let mut acc = vec![0.0; sites * n_tau];
            for s in 0..n_starts {
                b.copy_from_slice(&a);
                kick_phase(&mut b, k, spec.epsilon);
                let mut step = 0;
                for (i, &mark) in marks.iter().enumerate() {
                    while step < mark {
                        st.step_pair(&mut a, &mut b, noise);
                        step += 1;
                    }
                    if let Some(site) = first_non_finite(&a).or_else(|| first_non_finite(&b)) {
                        return Err(EngineError::NonFiniteField {
                            traj,
                            site,
                            time: t0 + (s * total_steps + step) as f64 * dt,
                        });
                    }
                    for l in 0..sites {
                        acc[l * n_tau + i] += phase_cos(a[l], b[l]);
                    }
                }
            }
            for x in &mut acc {
                *x /= n_starts as f64;
            }
            Ok(acc)
        })
        .collect();

    let n_traj = per_traj.len();
    let mut sum = vec![0.0; sites * n_tau];
    let mut sum2 = vec![0.0; sites * n_tau];
    for r in per_traj {
        let v = r?;
        for (j, x) in v.iter().enumerate() {
            sum[j] += x;
            sum2[j] += x * x;
        }
    }
    let nf = n_traj as f64;
    let mut d = vec![vec![0.0; n_tau]; sites];
    let mut se = vec![vec![f64::NAN; n_tau]; sites];
    for l in 0..sites {
        for i in 0..n_tau {
            let j = l * n_tau + i;
            let mean = sum[j] / nf;
            d[l][i] = (1.0 - mean).clamp(0.0, 2.0);
            if n_traj > 1 {
                let var = ((sum2[j] / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
                se[l][i] = (var / nf).sqrt();
            }
        }
    }
    Ok(OtocSeries {
        perturb_site: k,
        epsilon: spec.epsilon,
        tau_grid: grid.clone(),
        d,
        stderr: se,
        n_pairs: n_traj * n_starts,
    })
}

/// Late-time averaging of `D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LateTimeAveraging {
    /// `D` at one fixed lag, averaged over `starts` start times.
    StartTimes { lag: f64, starts: usize },
    /// Single start, mean over the last 20% of `[0, tau_max]`.
    LagWindow { tau_max: f64, d_tau: f64 },
}

/// `D_{k,ℓ}(τ → ∞)` for every site.
pub fn late_time_otoc(
    steady: &FieldEnsemble,
    noise: &mut [NoiseProcess],
    perturb_site: usize,
    epsilon: f64,
    mode: LateTimeAveraging,
    params: &ChainParams,
    dt: f64,
) -> Result<Vec<f64>, OtocError> {
    match mode {
        LateTimeAveraging::StartTimes { lag, starts } => {
            let spec = OtocSpec {
                perturb_site,
                epsilon,
                tau_grid: vec![lag],
                n_starts: starts,
            };
            let s = compute_otoc(steady, noise, &spec, params, Dynamics::Twa, dt, true)?;
            Ok(s.d.iter().map(|row| row[0]).collect())
        }
        LateTimeAveraging::LagWindow { tau_max, d_tau } => {
            let spec = OtocSpec::uniform(perturb_site, epsilon, tau_max, d_tau);
            let s = compute_otoc(steady, noise, &spec, params, Dynamics::Twa, dt, true)?;
            Ok(s.saturation())
        }
    }
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, rms residual)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
    (a, b, (rss / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButterflyFit {
    pub velocity: f64,
    pub intercept: f64,
    pub threshold: f64,
    /// `(site, first τ with D ≥ threshold)`.
    pub front_times: Vec<(usize, f64)>,
    pub residual: f64,
}

/// Butterfly velocity from the front arrival times at every site except the
/// perturbed one.
pub fn extract_butterfly_velocity(series: &OtocSeries, threshold: f64) -> Result<ButterflyFit, OtocError> {
    let sites: Vec<usize> = (0..series.sites()).filter(|&l| l != series.perturb_site).collect();
    extract_butterfly_velocity_on(series, threshold, &sites)
}

/// Butterfly velocity fitted on `sites` only: distance `|ℓ − k|` regressed on
/// front time.
pub fn extract_butterfly_velocity_on(series: &OtocSeries, threshold: f64, sites: &[usize]) -> Result<ButterflyFit, OtocError> {
    let mut fronts = Vec::new();
    let mut missing = Vec::new();
    for &l in sites {
        match series.d[l].iter().position(|&x| x >= threshold) {
            Some(i) => fronts.push((l, series.tau_grid[i])),
            None => missing.push(l),
        }
    }
    if !missing.is_empty() {
        return Err(OtocError::FrontNotReached(missing));
    }
    if fronts.len() < 2 {
        return Err(OtocError::FrontNotReached(sites.to_vec()));
    }
    let k = series.perturb_site as f64;
    let t: Vec<f64> = fronts.iter().map(|f| f.1).collect();
    let x: Vec<f64> = fronts.iter().map(|f| (f.0 as f64 - k).abs()).collect();
    let (a, b, res) = linear_fit(&t, &x);
    Ok(ButterflyFit {
        velocity: b.abs(),
        intercept: a,
        threshold,
        front_times: fronts,
        residual: res,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRate {
    pub site: usize,
    pub rate: f64,
    pub points: usize,
    pub tau_window: (f64, f64),
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovFit {
    pub lambda: f64,
    /// Standard deviation of the per-site rates.
    pub spread: f64,
    pub band: (f64, f64),
    pub per_site: Vec<SiteRate>,
}

/// Fits `ln D` linearly in τ on the first passage through `band` at each
/// site; λ is the mean rate.
pub fn extract_lyapunov(series: &OtocSeries, sites: &[usize], band: (f64, f64)) -> Result<LyapunovFit, OtocError> {
    let (lo, hi) = band;
    let mut per_site = Vec::new();
    for &l in sites {
        let row = &series.d[l];
        let end = row.iter().position(|&x| x > hi).unwrap_or(row.len());
        let idx: Vec<usize> = (0..end).filter(|&i| row[i] >= lo && row[i] <= hi).collect();
        if idx.len() < 3 {
            return Err(OtocError::InsufficientBandPoints {
                site: l,
                points: idx.len(),
            });
        }
        let t: Vec<f64> = idx.iter().map(|&i| series.tau_grid[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| row[i].ln()).collect();
        let (_, b, res) = linear_fit(&t, &y);
        per_site.push(SiteRate {
            site: l,
            rate: b,
            points: idx.len(),
            tau_window: (t[0], *t.last().unwrap()),
            residual: res,
        });
    }
    if per_site.is_empty() {
        return Err(OtocError::InsufficientBandPoints { site: 0, points: 0 });
    }
    let n = per_site.len() as f64;
    let lambda = per_site.iter().map(|s| s.rate).sum::<f64>() / n;
    let spread = (per_site.iter().map(|s| (s.rate - lambda).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LyapunovFit {
        lambda,
        spread,
        band,
        per_site,
    })
}

/// Everything extracted from one OTOC run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosDiagnostics {
    pub lyapunov: Option<LyapunovFit>,
    pub butterfly: Option<ButterflyFit>,
    pub saturation: Vec<f64>,
    pub n_pairs: usize,
    /// Why a fit was skipped, if one was.
    pub notes: Vec<String>,
}

impl ChaosDiagnostics {
    /// Runs both fits with the default threshold and band on `sites`.
    pub fn from_series(series: &OtocSeries, sites: &[usize]) -> Self {
        let mut notes = Vec::new();
        let butterfly = extract_butterfly_velocity_on(series, DEFAULT_FRONT_THRESHOLD, sites)
            .map_err(|e| notes.push(format!("butterfly velocity: {e}")))
            .ok();
        let lyapunov = extract_lyapunov(series, sites, DEFAULT_FIT_BAND)
            .map_err(|e| notes.push(format!("lyapunov rate: {e}")))
            .ok();
        ChaosDiagnostics {
            lyapunov,
            butterfly,
            saturation: series.saturation(),
            n_pairs: series.n_pairs,
            notes,
        }
    }

    pub fn lyapunov_rate(&self) -> Option<f64> {
        self.lyapunov.as_ref().map(|l| l.lambda)
    }

    pub fn butterfly_velocity(&self) -> Option<f64> {
        self.butterfly.as_ref().map(|b| b.velocity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitialCondition;
    use approx::assert_abs_diff_eq;

    fn synthetic(sites: usize, grid: Vec<f64>, f: impl Fn(usize, f64) -> f64) -> OtocSeries {
        let d: Vec<Vec<f64>> = (0..sites).map(|l| grid.iter().map(|&t| f(l, t)).collect()).collect();
        OtocSeries {
            perturb_site: 0,
            epsilon: 1e-2,
            stderr: vec![vec![0.0; grid.len()]; sites],
            tau_grid: grid,
            d,
            n_pairs: 1,
        }
    }

    #[test]
    fn step_cone_gives_exact_velocity() {
        let v0 = 4.4;
        let grid: Vec<f64> = (0..200).map(|i| i as f64 / v0).collect();
        let s = synthetic(30, grid, |l, t| if t >= l as f64 / v0 - 1e-12 { 1.0 } else { 0.0 });
        let fit = extract_butterfly_velocity(&s, 0.1).unwrap();
        assert_abs_diff_eq!(fit.velocity, v0, epsilon = 1e-9);
    }

    #[test]
    fn zero_series_never_fronts() {
        let s = synthetic(5, vec![0.0, 1.0, 2.0], |_, _| 0.0);
        match extract_butterfly_velocity(&s, 0.1) {
            Err(OtocError::FrontNotReached(sites)) => assert_eq!(sites, vec![1, 2, 3, 4]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            extract_lyapunov(&s, &[1], DEFAULT_FIT_BAND),
            Err(OtocError::InsufficientBandPoints { site: 1, points: 0 })
        ));
    }

    #[test]
    fn exponential_growth_rate() {
        let grid: Vec<f64> = (0..2000).map(|i| i as f64 * 0.01).collect();
        let s = synthetic(12, grid, |l, t| (3.0 * (t - l as f64 / 4.0)).exp().min(1.0));
        let fit = extract_lyapunov(&s, &[4, 7, 11], DEFAULT_FIT_BAND).unwrap();
        assert_abs_diff_eq!(fit.lambda, 3.0, epsilon = 1e-9);
        assert!(fit.spread < 1e-9);
        let sat = s.saturation();
        assert_abs_diff_eq!(sat[11], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn initial_row_and_null_kick() {
        let p = ChainParams::new(5, 2, 5.6, 2.2, 10.0);
        let (ens, mut noise) = FieldEnsemble::sample(&InitialCondition::Vacuum, 5, 20, 3);
        let spec = OtocSpec::uniform(2, 1e-2, 1.0, 0.1);
        let s = compute_otoc(&ens, &mut noise, &spec, &p, Dynamics::Twa, 5e-3, true).unwrap();
        for l in 0..5 {
            if l == 2 {
                assert_abs_diff_eq!(s.d[l][0], 1.0 - 1e-2f64.cos(), epsilon = 1e-15);
            } else {
                assert_eq!(s.d[l][0], 0.0);
            }
        }
        assert!(s.d.iter().flatten().all(|x| (0.0..=2.0).contains(x)));

        let (ens, mut noise) = FieldEnsemble::sample(&InitialCondition::Vacuum, 5, 20, 3);
        let zero = OtocSpec { epsilon: 0.0, ..spec.clone() };
        let s = compute_otoc(&ens, &mut noise, &zero, &p, Dynamics::Twa, 5e-3, true).unwrap();
        assert!(s.d.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ChainParams::new(3, 2, 5.6, 2.2, 10.0);
        let (ens, mut noise) = FieldEnsemble::sample(&InitialCondition::Vacuum, 3, 2, 3);
        let spec = OtocSpec::uniform(3, 1e-2, 1.0, 0.1);
        assert!(matches!(
            compute_otoc(&ens, &mut noise, &spec, &p, Dynamics::Twa, 5e-3, true),
            Err(OtocError::PerturbSiteOutOfRange { site: 3, sites: 3 })
        ));
        let spec = OtocSpec::uniform(0, 1e-2, 1.0, 0.1);
        assert_eq!(
            compute_otoc(&ens, &mut noise, &spec, &p, Dynamics::Twa, 5e-3, false),
            Err(OtocError::NotSteady)
        );
        let bad = OtocSpec { tau_grid: vec![1.0, 0.5], ..spec };
        assert_eq!(
            compute_otoc(&ens, &mut noise, &bad, &p, Dynamics::Twa, 5e-3, true),
            Err(OtocError::InvalidTauGrid)
        );
    }

    #[test]
    fn csv_has_one_row_per_entry() {
        let s = synthetic(3, vec![0.0, 0.5], |_, t| t);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 6);
    }
}
