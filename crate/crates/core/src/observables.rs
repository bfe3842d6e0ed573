//! Phase-space estimators of photon statistics, phase structure and local
//! Wigner functions.
//!
//! Wigner samples are symmetrically ordered, so normally ordered moments pick
//! up corrections: `⟨a†a⟩ = ⟨|α|²⟩ − 1/2` and
//! `⟨a†²a²⟩ = ⟨|α|⁴⟩ − 2⟨|α|²⟩ + 1/2`.
//!
//! A [`MomentAccumulator`] stores its sums in blocks, one per trajectory.
//! Time samples inside a trajectory are correlated, so standard errors come
//! from a jackknife over blocks rather than over individual samples.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObservableError {
    #[error("accumulator has too few samples at site {site}")]
    EmptyAccumulator { site: usize },
    #[error("site {site} out of range for {sites} sites")]
    SiteOutOfRange { site: usize, sites: usize },
    #[error("cross moment ({0}, {1}) not configured")]
    PairNotConfigured(usize, usize),
    #[error("Weyl-corrected population vanishes at site {site} (n = {n})")]
    VanishingPopulation { site: usize, n: f64 },
    #[error("circular order must be within 1..={max}, got {m}")]
    OrderOutOfRange { m: usize, max: usize },
    #[error("degenerate histogram grid: {0}")]
    DegenerateGrid(String),
    #[error("accumulator layouts differ")]
    LayoutMismatch,
}

/// Value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Raw sums for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSums {
    pub count: f64,
    pub abs2: f64,
    pub abs4: f64,
    pub re: f64,
    pub im: f64,
    pub im2: f64,
    /// Σ e^{imφ} for m = 1..=m_max.
    pub circ: Vec<Complex64>,
}

impl SiteSums {
    fn new(m_max: usize) -> Self {
        SiteSums {
            count: 0.0,
            abs2: 0.0,
            abs4: 0.0,
            re: 0.0,
            im: 0.0,
            im2: 0.0,
            circ: vec![Complex64::default(); m_max],
        }
    }

    fn push(&mut self, a: Complex64) {
        let n = a.norm_sqr();
        self.count += 1.0;
        self.abs2 += n;
        self.abs4 += n * n;
        self.re += a.re;
        self.im += a.im;
        self.im2 += a.im * a.im;
        if !self.circ.is_empty() {
            let unit = if n > 0.0 {
                a / n.sqrt()
            } else {
                Complex64::new(1.0, 0.0)
            };
            let mut pow = unit;
            for c in self.circ.iter_mut() {
                *c += pow;
                pow *= unit;
            }
        }
    }

    fn add(&mut self, other: &SiteSums) {
        self.count += other.count;
        self.abs2 += other.abs2;
        self.abs4 += other.abs4;
        self.re += other.re;
        self.im += other.im;
        self.im2 += other.im2;
        for (a, b) in self.circ.iter_mut().zip(&other.circ) {
            *a += *b;
        }
    }

    fn sub(&self, other: &SiteSums) -> SiteSums {
        SiteSums {
            count: self.count - other.count,
            abs2: self.abs2 - other.abs2,
            abs4: self.abs4 - other.abs4,
            re: self.re - other.re,
            im: self.im - other.im,
            im2: self.im2 - other.im2,
            circ: self.circ.iter().zip(&other.circ).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn photon_number(&self) -> f64 {
        self.abs2 / self.count - 0.5
    }

    pub fn photon_fluctuations(&self) -> f64 {
        let m2 = self.abs2 / self.count;
        let m4 = self.abs4 / self.count;
        let normal4 = m4 - 2.0 * m2 + 0.5;
        let n = m2 - 0.5;
        normal4 - n * n
    }

    pub fn second_order_coherence(&self) -> f64 {
        let m2 = self.abs2 / self.count;
        let m4 = self.abs4 / self.count;
        let n = m2 - 0.5;
        (m4 - 2.0 * m2 + 0.5) / (n * n)
    }

    pub fn circular_moment(&self, m: usize) -> f64 {
        (self.circ[m - 1] / self.count).norm()
    }

    /// Raw ⟨p²⟩ with p = √2 Im α.
    pub fn momentum_second_moment(&self) -> f64 {
        2.0 * self.im2 / self.count
    }

    pub fn momentum_mean(&self) -> f64 {
        2f64.sqrt() * self.im / self.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    sites: Vec<SiteSums>,
    cross: Vec<Complex64>,
}

impl Block {
    fn new(sites: usize, m_max: usize, pairs: usize) -> Self {
        Block {
            sites: vec![SiteSums::new(m_max); sites],
            cross: vec![Complex64::default(); pairs],
        }
    }
}

/// Mergeable running statistics for per-site moments, circular moments and
/// configured cross-site correlators `Σ α_k* α_ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    sites: usize,
    m_max: usize,
    pairs: Vec<(usize, usize)>,
    blocks: Vec<Block>,
}

impl MomentAccumulator {
    pub fn new(sites: usize, m_max: usize, pairs: Vec<(usize, usize)>) -> Self {
        MomentAccumulator {
            sites,
            m_max,
            pairs,
            blocks: Vec::new(),
        }
    }

    /// Accumulator tracking `g⁽¹⁾` between `reference` and every site.
    pub fn with_reference(sites: usize, m_max: usize, reference: usize) -> Self {
        let pairs = (0..sites).map(|l| (reference, l)).collect();
        Self::new(sites, m_max, pairs)
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Opens a new block; later samples go there.
    pub fn begin_block(&mut self) {
        self.blocks.push(Block::new(self.sites, self.m_max, self.pairs.len()));
    }

    /// Adds one sample of all sites to the current block.
    pub fn push(&mut self, fields: &[Complex64]) {
        assert_eq!(fields.len(), self.sites, "sample length");
        if self.blocks.is_empty() {
            self.begin_block();
        }
        let block = self.blocks.last_mut().unwrap();
        for (s, a) in block.sites.iter_mut().zip(fields) {
            s.push(*a);
        }
        for (c, &(k, l)) in block.cross.iter_mut().zip(&self.pairs) {
            *c += fields[k].conj() * fields[l];
        }
    }

    /// Concatenates the blocks of `other`.
    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<(), ObservableError> {
        if self.sites != other.sites || self.m_max != other.m_max || self.pairs != other.pairs {
            return Err(ObservableError::LayoutMismatch);
        }
        self.blocks.extend(other.blocks.iter().cloned());
        Ok(())
    }

    pub fn merged(mut self, other: &MomentAccumulator) -> Result<Self, ObservableError> {
        self.merge(other)?;
        Ok(self)
    }

    fn check_site(&self, site: usize) -> Result<(), ObservableError> {
        if site >= self.sites {
            Err(ObservableError::SiteOutOfRange {
                site,
                sites: self.sites,
            })
        } else {
            Ok(())
        }
    }

    /// Totals of `site` over every block.
    pub fn site_totals(&self, site: usize) -> Result<SiteSums, ObservableError> {
        self.check_site(site)?;
        let mut t = SiteSums::new(self.m_max);
        for b in &self.blocks {
            t.add(&b.sites[site]);
        }
        Ok(t)
    }

    pub fn count(&self, site: usize) -> f64 {
        self.site_totals(site).map(|t| t.count).unwrap_or(0.0)
    }

    /// Statistic with a jackknife standard error over blocks. With fewer than
    /// two blocks the error is NaN.
    fn jackknife<F: Fn(&SiteSums) -> f64>(&self, site: usize, min_count: f64, f: F) -> Result<Estimate, ObservableError> {
        let total = self.site_totals(site)?;
        if total.count < min_count {
            return Err(ObservableError::EmptyAccumulator { site });
        }
        let value = f(&total);
        let nb = self.blocks.iter().filter(|b| b.sites[site].count > 0.0).count();
        if nb < 2 {
            return Ok(Estimate {
                value,
                stderr: f64::NAN,
            });
        }
        let loo: Vec<f64> = self
            .blocks
            .iter()
            .filter(|b| b.sites[site].count > 0.0)
            .map(|b| f(&total.sub(&b.sites[site])))
            .collect();
        let nbf = nb as f64;
        let mean = loo.iter().sum::<f64>() / nbf;
        let var = loo.iter().map(|x| (x - mean).powi(2)).sum::<f64>() * (nbf - 1.0) / nbf;
        Ok(Estimate {
            value,
            stderr: var.sqrt(),
        })
    }

    fn pair_index(&self, k: usize, l: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (k, l))
    }

    fn cross_total(&self, idx: usize) -> Complex64 {
        self.blocks.iter().map(|b| b.cross[idx]).sum()
    }
}

/// `⟨a†a⟩ = ⟨|α|²⟩ − 1/2`. Not clamped: sampling noise may make it negative.
pub fn photon_number(acc: &MomentAccumulator, site: usize) -> Result<Estimate, ObservableError> {
    acc.jackknife(site, 1.0, SiteSums::photon_number)
}

/// `δn = ⟨a†²a²⟩ − ⟨a†a⟩²`; zero for coherent states, negative when
/// sub-Poissonian.
pub fn photon_fluctuations(acc: &MomentAccumulator, site: usize) -> Result<Estimate, ObservableError> {
    acc.jackknife(site, 2.0, SiteSums::photon_fluctuations)
}

/// `g⁽²⁾ = ⟨a†²a²⟩/n²`, only reported when `n > 0.1`.
pub fn second_order_coherence(acc: &MomentAccumulator, site: usize) -> Result<Option<Estimate>, ObservableError> {
    let n = photon_number(acc, site)?;
    if n.value > 0.1 {
        acc.jackknife(site, 2.0, SiteSums::second_order_coherence).map(Some)
    } else {
        Ok(None)
    }
}

/// `C⁽ᵐ⁾ = |⟨e^{imφ}⟩|` with φ = arg α.
pub fn circular_moment(acc: &MomentAccumulator, site: usize, m: usize) -> Result<Estimate, ObservableError> {
    if m == 0 || m > acc.m_max {
        return Err(ObservableError::OrderOutOfRange { m, max: acc.m_max });
    }
    acc.jackknife(site, 1.0, |s| s.circular_moment(m))
}

/// `Δφ⁽ᵐ⁾ = 1 − C⁽ᵐ⁾`, in [0, 1].
pub fn circular_variance(acc: &MomentAccumulator, site: usize, m: usize) -> Result<Estimate, ObservableError> {
    let c = circular_moment(acc, site, m)?;
    Ok(Estimate {
        value: 1.0 - c.value,
        stderr: c.stderr,
    })
}

/// `g⁽¹⁾_{k,ℓ} = (⟨α_k* α_ℓ⟩ − δ_{kℓ}/2) / √(n_k n_ℓ)`.
pub fn first_order_coherence(acc: &MomentAccumulator, k: usize, l: usize) -> Result<Complex64, ObservableError> {
    acc.check_site(k)?;
    acc.check_site(l)?;
    let nk = photon_number(acc, k)?.value;
    let nl = photon_number(acc, l)?.value;
    for (site, n) in [(k, nk), (l, nl)] {
        if !(n > 0.0) {
            return Err(ObservableError::VanishingPopulation { site, n });
        }
    }
    if k == l {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let idx = acc
        .pair_index(k, l)
        .ok_or(ObservableError::PairNotConfigured(k, l))?;
    let count = acc.site_totals(k)?.count;
    let corr = acc.cross_total(idx) / count;
    Ok(corr / (nk * nl).sqrt())
}

/// Regular 1D histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1D {
    pub min: f64,
    pub max: f64,
    /// Probability densities per bin (integrate to 1 over covered samples).
    pub density: Vec<f64>,
    pub total_samples: usize,
}

impl Histogram1D {
    pub fn from_samples(samples: &[f64], min: f64, max: f64, bins: usize) -> Self {
        let mut counts = vec![0.0; bins];
        let width = (max - min) / bins as f64;
        let mut inside = 0.0;
        for &x in samples {
            if x >= min && x < max {
                let i = (((x - min) / width) as usize).min(bins - 1);
                counts[i] += 1.0;
                inside += 1.0;
            }
        }
        let norm = if inside > 0.0 { 1.0 / (inside * width) } else { 0.0 };
        Histogram1D {
            min,
            max,
            density: counts.into_iter().map(|c| c * norm).collect(),
            total_samples: samples.len(),
        }
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.density.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.density.len()).map(|i| self.min + (i as f64 + 0.5) * w).collect()
    }
}

/// Momentum `p = √2 Im α` statistics and the equipartition temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumStats {
    /// Raw ⟨p²⟩, used for the temperature.
    pub p2: f64,
    /// ⟨p²⟩ − ⟨p⟩².
    pub p2_centered: f64,
    /// `T = |Δ| ⟨p²⟩`.
    pub temperature: f64,
    pub distribution: Option<Histogram1D>,
}

/// Momentum statistics from an accumulator.
pub fn momentum_statistics(acc: &MomentAccumulator, site: usize, detuning: f64) -> Result<MomentumStats, ObservableError> {
    let t = acc.site_totals(site)?;
    if t.count < 2.0 {
        return Err(ObservableError::EmptyAccumulator { site });
    }
    let p2 = t.momentum_second_moment();
    let pm = t.momentum_mean();
    Ok(MomentumStats {
        p2,
        p2_centered: p2 - pm * pm,
        temperature: detuning.abs() * p2,
        distribution: None,
    })
}

/// Momentum statistics from raw field samples, including the distribution of
/// p on `bins` bins spanning ±6 standard deviations.
pub fn momentum_statistics_from_samples(samples: &[Complex64], detuning: f64, bins: usize) -> Result<MomentumStats, ObservableError> {
    if samples.len() < 2 {
        return Err(ObservableError::EmptyAccumulator { site: 0 });
    }
    let p: Vec<f64> = samples.iter().map(|a| 2f64.sqrt() * a.im).collect();
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let p2 = p.iter().map(|x| x * x).sum::<f64>() / n;
    let sd = (p2 - mean * mean).max(0.0).sqrt();
    let distribution = if sd > 0.0 {
        Some(Histogram1D::from_samples(&p, mean - 6.0 * sd, mean + 6.0 * sd, bins))
    } else {
        None
    };
    Ok(MomentumStats {
        p2,
        p2_centered: p2 - mean * mean,
        temperature: detuning.abs() * p2,
        distribution,
    })
}

/// Rectangular grid over (Re α, Im α).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub bins_x: usize,
    pub bins_y: usize,
}

impl Grid2D {
    pub fn square(half_width: f64, bins: usize) -> Self {
        Grid2D {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            bins_x: bins,
            bins_y: bins,
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.bins_x as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.bins_y as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn len(&self) -> usize {
        self.bins_x * self.bins_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Center of cell `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> Complex64 {
        Complex64::new(
            self.x_min + (ix as f64 + 0.5) * self.dx(),
            self.y_min + (iy as f64 + 0.5) * self.dy(),
        )
    }

    /// Cell centers in storage order (row `iy`, column `ix`).
    pub fn centers(&self) -> impl Iterator<Item = Complex64> + '_ {
        (0..self.bins_y).flat_map(move |iy| (0..self.bins_x).map(move |ix| self.center(ix, iy)))
    }

    /// Cell containing `a`, row-major in `iy` then `ix`.
    pub fn index_of(&self, a: Complex64) -> Option<usize> {
        if a.re < self.x_min || a.re >= self.x_max || a.im < self.y_min || a.im >= self.y_max {
            return None;
        }
        let ix = (((a.re - self.x_min) / self.dx()) as usize).min(self.bins_x - 1);
        let iy = (((a.im - self.y_min) / self.dy()) as usize).min(self.bins_y - 1);
        Some(iy * self.bins_x + ix)
    }

    fn validate(&self) -> Result<(), ObservableError> {
        if self.bins_x == 0 || self.bins_y == 0 {
            return Err(ObservableError::DegenerateGrid("zero bins".into()));
        }
        if !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(ObservableError::DegenerateGrid("empty extent".into()));
        }
        Ok(())
    }

    /// Default grid: ±4 sample standard deviations around the sample mean,
    /// 201 × 201 bins.
    pub fn auto(samples: &[Complex64]) -> Result<Self, ObservableError> {
        Self::auto_with(samples, 4.0, 201)
    }

    pub fn auto_with(samples: &[Complex64], n_sd: f64, bins: usize) -> Result<Self, ObservableError> {
        if samples.is_empty() {
            return Err(ObservableError::DegenerateGrid("no samples".into()));
        }
        let n = samples.len() as f64;
        let mean: Complex64 = samples.iter().sum::<Complex64>() / n;
        let var = samples.iter().map(|a| (a - mean).norm_sqr()).sum::<f64>() / n;
        let sd = (0.5 * var).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(ObservableError::DegenerateGrid("zero spread".into()));
        }
        let half = n_sd * sd;
        Ok(Grid2D {
            x_min: mean.re - half,
            x_max: mean.re + half,
            y_min: mean.im - half,
            y_max: mean.im + half,
            bins_x: bins,
            bins_y: bins,
        })
    }

    /// Fraction of samples inside the grid.
    pub fn coverage(&self, samples: &[Complex64]) -> f64 {
        let inside = samples.iter().filter(|a| self.index_of(**a).is_some()).count();
        inside as f64 / samples.len().max(1) as f64
    }

    /// Smallest symmetric enlargement (same bin counts) covering at least
    /// `fraction` of the samples.
    fn expand_to_cover(&self, samples: &[Complex64], fraction: f64) -> Self {
        let cx = 0.5 * (self.x_min + self.x_max);
        let cy = 0.5 * (self.y_min + self.y_max);
        let hx = 0.5 * (self.x_max - self.x_min);
        let hy = 0.5 * (self.y_max - self.y_min);
        // Chebyshev distance in units of the half widths.
        let mut d: Vec<f64> = samples
            .iter()
            .map(|a| ((a.re - cx).abs() / hx).max((a.im - cy).abs() / hy))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = ((fraction * d.len() as f64).ceil() as usize).clamp(1, d.len()) - 1;
        let scale = (d[k] * 1.001).max(1.0);
        Grid2D {
            x_min: cx - hx * scale,
            x_max: cx + hx * scale,
            y_min: cy - hy * scale,
            y_max: cy + hy * scale,
            ..*self
        }
    }
}

/// Normalized 2D histogram estimating a local Wigner function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WignerHistogram {
    pub grid: Grid2D,
    /// Density per cell, row-major in `iy` then `ix`.
    pub weights: Vec<f64>,
    pub total_samples: usize,
    /// Samples that fell inside the grid.
    pub in_grid: usize,
}

/// Histograms `samples` on `grid` (or the default grid). A grid that misses
/// more than 1% of the samples is enlarged first.
pub fn wigner_histogram(samples: &[Complex64], grid: Option<Grid2D>) -> Result<WignerHistogram, ObservableError> {
    if samples.is_empty() {
        return Err(ObservableError::DegenerateGrid("no samples".into()));
    }
    let mut grid = match grid {
        Some(g) => g,
        None => Grid2D::auto(samples)?,
    };
    grid.validate()?;
    if grid.coverage(samples) < 0.99 {
        grid = grid.expand_to_cover(samples, 0.995);
    }
    let mut counts = vec![0.0; grid.len()];
    let mut inside = 0usize;
    for a in samples {
        if let Some(i) = grid.index_of(*a) {
            counts[i] += 1.0;
            inside += 1;
        }
    }
    let norm = 1.0 / (inside as f64 * grid.cell_area());
    Ok(WignerHistogram {
        grid,
        weights: counts.into_iter().map(|c| c * norm).collect(),
        total_samples: samples.len(),
        in_grid: inside,
    })
}

impl WignerHistogram {
    /// Normalizes raw cell counts; `total` includes samples outside the grid.
    pub fn from_counts(grid: Grid2D, counts: &[f64], total: usize) -> Result<Self, ObservableError> {
        grid.validate()?;
        if counts.len() != grid.len() {
            return Err(ObservableError::LayoutMismatch);
        }
        let inside: f64 = counts.iter().sum();
        if inside <= 0.0 {
            return Err(ObservableError::DegenerateGrid("no samples inside grid".into()));
        }
        let norm = 1.0 / (inside * grid.cell_area());
        Ok(WignerHistogram {
            grid,
            weights: counts.iter().map(|c| c * norm).collect(),
            total_samples: total,
            in_grid: inside as usize,
        })
    }

    /// Fraction of samples inside the grid.
    pub fn coverage(&self) -> f64 {
        self.in_grid as f64 / self.total_samples.max(1) as f64
    }

    /// Wraps an already normalized grid function (e.g. a model Wigner).
    pub fn from_density(grid: Grid2D, weights: Vec<f64>) -> Self {
        assert_eq!(grid.len(), weights.len());
        WignerHistogram {
            grid,
            weights,
            total_samples: 0,
            in_grid: 0,
        }
    }

    /// Cell-area-weighted sum of the weights.
    pub fn integral(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.grid.cell_area()
    }

    /// Rescales so the weights integrate to one.
    pub fn normalize(&mut self) {
        let s = self.integral();
        if s > 0.0 {
            for w in &mut self.weights {
                *w /= s;
            }
        }
    }

    /// Combines two histograms on the same grid, weighting by in-grid counts.
    pub fn merge(&mut self, other: &WignerHistogram) -> Result<(), ObservableError> {
        if self.grid != other.grid {
            return Err(ObservableError::DegenerateGrid("grids differ".into()));
        }
        let (na, nb) = (self.in_grid as f64, other.in_grid as f64);
        if na + nb > 0.0 {
            for (a, b) in self.weights.iter_mut().zip(&other.weights) {
                *a = (*a * na + b * nb) / (na + nb);
            }
        }
        self.in_grid += other.in_grid;
        self.total_samples += other.total_samples;
        Ok(())
    }

    /// ⟨|α|²⟩ under the histogram.
    pub fn second_moment(&self) -> f64 {
        let da = self.grid.cell_area();
        self.grid
            .centers()
            .zip(&self.weights)
            .map(|(c, w)| c.norm_sqr() * w * da)
            .sum()
    }

    /// `|⟨e^{imφ}⟩|` under the histogram.
    pub fn circular_moment(&self, m: usize) -> f64 {
        let da = self.grid.cell_area();
        let mut s = Complex64::default();
        for (c, w) in self.grid.centers().zip(&self.weights) {
            if c.norm() > 0.0 {
                s += Complex64::from_polar(1.0, m as f64 * c.arg()) * (w * da);
            }
        }
        s.norm()
    }

    /// Azimuthal average about the origin on `bins` radial bins out to the
    /// largest cell radius.
    pub fn radial_profile(&self, bins: usize) -> RadialProfile {
        let r_max = self
            .grid
            .centers()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        let dr = r_max / bins as f64;
        let mut sum = vec![0.0; bins];
        let mut cnt = vec![0.0; bins];
        for (c, w) in self.grid.centers().zip(&self.weights) {
            let i = ((c.norm() / dr) as usize).min(bins - 1);
            sum[i] += w;
            cnt[i] += 1.0;
        }
        let radii = (0..bins).map(|i| (i as f64 + 0.5) * dr).collect();
        let values = sum.iter().zip(&cnt).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect();
        RadialProfile {
            radii,
            values,
            cells: cnt,
            dr,
        }
    }

    /// Dense CSV grid: one row per `iy`, first column the Im α of the row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = &self.grid;
        write!(w, "im_alpha\\re_alpha")?;
        for ix in 0..g.bins_x {
            write!(w, ",{:.6e}", g.center(ix, 0).re)?;
        }
        writeln!(w)?;
        for iy in 0..g.bins_y {
            write!(w, "{:.6e}", g.center(0, iy).im)?;
            for ix in 0..g.bins_x {
                write!(w, ",{:.8e}", self.weights[iy * g.bins_x + ix])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// JSON metadata written next to the CSV grid.
    pub fn metadata(&self, site: usize) -> serde_json::Value {
        serde_json::json!({
            "site": site + 1,
            "grid": self.grid,
            "cell_area": self.grid.cell_area(),
            "total_samples": self.total_samples,
            "in_grid": self.in_grid,
        })
    }
}

/// Azimuthally averaged Wigner function.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    /// Number of grid cells averaged in each bin.
    pub cells: Vec<f64>,
    pub dr: f64,
}

/// One row of the per-site observable table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub site: usize,
    pub n: Estimate,
    pub dn: Estimate,
    pub g2: Option<f64>,
    pub circular_moments: Vec<Estimate>,
    pub g1_abs: Option<f64>,
    pub p2: f64,
    pub p2_centered: f64,
    pub t_eq: f64,
}

impl SiteRow {
    pub fn circular_variance(&self, m: usize) -> f64 {
        1.0 - self.circular_moments[m - 1].value
    }
}

/// Builds the per-site table; `g⁽¹⁾` is taken relative to `reference`.
pub fn site_table(acc: &MomentAccumulator, reference: usize, detuning: f64) -> Result<Vec<SiteRow>, ObservableError> {
    (0..acc.sites())
        .map(|l| {
            let mom = momentum_statistics(acc, l, detuning)?;
            let g1 = first_order_coherence(acc, reference, l).ok().map(|g| g.norm());
            Ok(SiteRow {
                site: l + 1,
                n: photon_number(acc, l)?,
                dn: photon_fluctuations(acc, l)?,
                g2: second_order_coherence(acc, l)?.map(|e| e.value),
                circular_moments: (1..=acc.m_max())
                    .map(|m| circular_moment(acc, l, m))
                    .collect::<Result<_, _>>()?,
                g1_abs: g1,
                p2: mom.p2,
                p2_centered: mom.p2_centered,
                t_eq: mom.temperature,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10e}")).unwrap_or_default()
}

/// Writes the per-site table as CSV. Energies are in units of γ.
pub fn write_site_table<W: Write>(rows: &[SiteRow], w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let m_max = rows.first().map(|r| r.circular_moments.len()).unwrap_or(0);
    let mut header: Vec<String> = ["site", "n", "n_se", "dn", "dn_se", "g2"].iter().map(|s| s.to_string()).collect();
    for m in 1..=m_max {
        header.push(format!("C{m}"));
        header.push(format!("C{m}_se"));
    }
    for m in 1..=m_max {
        header.push(format!("dphi{m}"));
    }
    header.extend(["g1_abs", "p2", "p2_centered", "T_eq[gamma]"].iter().map(|s| s.to_string()));
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.site.to_string(),
            format!("{:.10e}", r.n.value),
            format!("{:.4e}", r.n.stderr),
            format!("{:.10e}", r.dn.value),
            format!("{:.4e}", r.dn.stderr),
            opt(r.g2),
        ];
        for c in &r.circular_moments {
            rec.push(format!("{:.10e}", c.value));
            rec.push(format!("{:.4e}", c.stderr));
        }
        for c in &r.circular_moments {
            rec.push(format!("{:.10e}", 1.0 - c.value));
        }
        rec.push(opt(r.g1_abs));
        rec.push(format!("{:.10e}", r.p2));
        rec.push(format!("{:.10e}", r.p2_centered));
        rec.push(format!("{:.10e}", r.t_eq));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::trajectory_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    /// Complex Gaussian with ⟨|α − center|²⟩ = var.
    fn gaussian_cloud(center: Complex64, var: f64, n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = trajectory_rng(seed, 0);
        let sd = (0.5 * var).sqrt();
        (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                center + Complex64::new(sd * x, sd * y)
            })
            .collect()
    }

    /// One block per `per_block` samples, mimicking trajectories.
    fn accumulate(samples: &[Complex64], per_block: usize) -> MomentAccumulator {
        let mut acc = MomentAccumulator::new(1, 3, vec![]);
        for chunk in samples.chunks(per_block) {
            acc.begin_block();
            for a in chunk {
                acc.push(&[*a]);
            }
        }
        acc
    }

    #[test]
    fn vacuum_weyl_moments_vanish() {
        let acc = accumulate(&gaussian_cloud(Complex64::default(), 0.5, 1_000_000, 1), 1000);
        let n = photon_number(&acc, 0).unwrap();
        let dn = photon_fluctuations(&acc, 0).unwrap();
        assert!(n.value.abs() < 3.0 * n.stderr, "{n:?}");
        assert!(dn.value.abs() < 3.0 * dn.stderr, "{dn:?}");
    }

    #[test]
    fn coherent_cloud_is_poissonian() {
        let acc = accumulate(&gaussian_cloud(Complex64::new(2.0, 0.0), 0.5, 400_000, 2), 1000);
        let n = photon_number(&acc, 0).unwrap();
        let dn = photon_fluctuations(&acc, 0).unwrap();
        assert!((n.value - 4.0).abs() < 3.0 * n.stderr, "{n:?}");
        assert!(dn.value.abs() < 3.0 * dn.stderr, "{dn:?}");
    }

    #[test]
    fn thermal_cloud_is_super_poissonian() {
        let nbar = 2.0;
        let samples = gaussian_cloud(Complex64::default(), nbar + 0.5, 400_000, 3);
        let acc = accumulate(&samples, 1000);
        let n = photon_number(&acc, 0).unwrap();
        let dn = photon_fluctuations(&acc, 0).unwrap();
        assert!((n.value - nbar).abs() < 3.0 * n.stderr);
        assert!((dn.value - nbar * nbar).abs() < 3.0 * dn.stderr, "{dn:?}");
        let mom = momentum_statistics(&acc, 0, 5.6).unwrap();
        assert!((mom.p2 - 2.5).abs() < 0.03);
        assert!((mom.temperature - 2.5 * 5.6).abs() < 0.2);
    }

    #[test]
    fn point_mass_at_origin_has_no_momentum() {
        let acc = accumulate(&vec![Complex64::default(); 10], 5);
        let m = momentum_statistics(&acc, 0, 5.6).unwrap();
        assert_eq!(m.p2, 0.0);
        assert_eq!(m.temperature, 0.0);
    }

    #[test]
    fn vacuum_momentum_second_moment() {
        let acc = accumulate(&gaussian_cloud(Complex64::default(), 0.5, 200_000, 4), 1000);
        let m = momentum_statistics(&acc, 0, 5.6).unwrap();
        assert!((m.p2 - 0.5).abs() < 0.01);
        assert!((m.temperature - 2.8).abs() < 0.06);
    }

    #[test]
    fn circular_moments_of_simple_distributions() {
        let acc = accumulate(&vec![Complex64::new(3.0, 0.0); 100], 10);
        for m in 1..=3 {
            assert!((circular_moment(&acc, 0, m).unwrap().value - 1.0).abs() < 1e-15);
        }
        let two: Vec<Complex64> = (0..100).map(|i| if i % 2 == 0 { Complex64::new(2.0, 0.0) } else { Complex64::new(-2.0, 0.0) }).collect();
        let acc = accumulate(&two, 10);
        assert!(circular_moment(&acc, 0, 1).unwrap().value < 1e-12);
        assert!((circular_moment(&acc, 0, 2).unwrap().value - 1.0).abs() < 1e-12);
        assert!(circular_moment(&acc, 0, 3).unwrap().value < 1e-12);

        let mut rng = trajectory_rng(5, 0);
        let n = 100_000;
        let uniform: Vec<Complex64> = (0..n).map(|_| Complex64::from_polar(1.0, rng.gen_range(-PI..PI))).collect();
        let acc = accumulate(&uniform, 100);
        for m in 1..=3 {
            assert!(circular_moment(&acc, 0, m).unwrap().value < 3.0 / (n as f64).sqrt());
        }
        assert!(circular_moment(&acc, 0, 4).is_err());
    }

    #[test]
    fn coherence_of_locked_and_independent_sites() {
        let mut rng = trajectory_rng(6, 0);
        let n = 50_000;
        let mut locked = MomentAccumulator::with_reference(2, 1, 0);
        let mut free = MomentAccumulator::with_reference(2, 1, 0);
        for i in 0..n {
            if i % 100 == 0 {
                locked.begin_block();
                free.begin_block();
            }
            let th: f64 = rng.gen_range(-PI..PI);
            let a = Complex64::from_polar(3.0, th);
            // Weyl-consistent: add vacuum width to both copies identically.
            locked.push(&[a, a]);
            let th2: f64 = rng.gen_range(-PI..PI);
            free.push(&[a, Complex64::from_polar(3.0, th2)]);
        }
        assert_eq!(first_order_coherence(&locked, 0, 0).unwrap(), Complex64::new(1.0, 0.0));
        // |α|² − 1/2 in the denominator against |α|² in the numerator.
        let g = first_order_coherence(&locked, 0, 1).unwrap().norm();
        assert!((g - 9.0 / 8.5).abs() < 1e-12);
        assert!(first_order_coherence(&free, 0, 1).unwrap().norm() < 3.0 / (n as f64).sqrt() * 9.0 / 8.5);

        let empty = accumulate(&vec![Complex64::default(); 4], 2);
        assert!(matches!(first_order_coherence(&empty, 0, 0), Err(ObservableError::VanishingPopulation { .. })));
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        let acc = MomentAccumulator::new(2, 1, vec![]);
        assert_eq!(photon_number(&acc, 0), Err(ObservableError::EmptyAccumulator { site: 0 }));
        assert!(photon_number(&acc, 5).is_err());
    }

    #[test]
    fn histogram_is_normalized_and_resolves_shapes() {
        let vac = gaussian_cloud(Complex64::default(), 0.5, 200_000, 7);
        let h = wigner_histogram(&vac, None).unwrap();
        assert!((h.integral() - 1.0).abs() < 1e-12);
        assert!((h.second_moment() - 0.5).abs() < 0.02);
        assert!(h.weights.iter().all(|w| *w >= 0.0));

        let mut rng = trajectory_rng(8, 0);
        let ring: Vec<Complex64> = (0..200_000)
            .map(|_| Complex64::from_polar(5.0, rng.gen_range(-PI..PI)) + crate::model::vacuum_noise(&mut rng))
            .collect();
        let h = wigner_histogram(&ring, None).unwrap();
        assert!(h.circular_moment(1) < 0.02);
        let prof = h.radial_profile(40);
        let peak = prof.values.iter().cloned().enumerate().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap().0;
        assert!((prof.radii[peak] - 5.0).abs() < 0.5, "annulus peak at {}", prof.radii[peak]);
        let center = prof.values[0];
        assert!(center < 1e-3 * prof.values[peak]);
    }

    #[test]
    fn narrow_grid_is_expanded() {
        let vac = gaussian_cloud(Complex64::default(), 0.5, 10_000, 9);
        let h = wigner_histogram(&vac, Some(Grid2D::square(0.5, 21))).unwrap();
        assert!(h.in_grid as f64 >= 0.99 * h.total_samples as f64);
        assert!(wigner_histogram(&vac, Some(Grid2D::square(0.0, 21))).is_err());
        assert!(wigner_histogram(&[], None).is_err());
    }

    #[test]
    fn site_table_round_trip_to_csv() {
        let samples = gaussian_cloud(Complex64::new(1.0, 1.0), 0.5, 4000, 10);
        let mut acc = MomentAccumulator::with_reference(2, 3, 0);
        for (i, a) in samples.iter().enumerate() {
            if i % 100 == 0 {
                acc.begin_block();
            }
            acc.push(&[*a, *a * Complex64::new(0.0, 1.0)]);
        }
        let rows = site_table(&acc, 0, 5.6).unwrap();
        assert_eq!(rows.len(), 2);
        let mut buf = Vec::new();
        write_site_table(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("site,n,n_se,dn,dn_se,g2,C1,C1_se"));
        assert_eq!(text.lines().count(), 3);
    }
}
