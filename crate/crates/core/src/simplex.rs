//! Nelder-Mead downhill simplex.

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub max_iter: usize,
    /// Stop once the spread of simplex values falls below this.
    pub f_tol: f64,
    /// and the simplex diameter falls below this.
    pub x_tol: f64,
    /// Initial step along each axis.
    pub step: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 4000,
            f_tol: 1e-14,
            x_tol: 1e-9,
            step: 0.5,
        }
    }
}

/// Minimizes `f` from `x0`. Non-finite values count as +∞.
pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: Options) -> Minimum {
    let n = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += opts.step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[n] - vals[0];
        let diam = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread.is_finite() && spread <= opts.f_tol * (1.0 + vals[0].abs()) && diam <= opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (pts[n][j] - centroid[j])).collect() };

        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[n] {
            let x = along(-0.5);
            let v = eval(&x);
            (x, v)
        } else {
            let x = along(0.5);
            let v = eval(&x);
            (x, v)
        };
        if fc < vals[n].min(fr) {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        for i in 1..=n {
            let p: Vec<f64> = (0..n).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
            vals[i] = eval(&p);
            pts[i] = p;
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    Minimum {
        x: pts[best].clone(),
        f: vals[best],
        iterations,
        converged,
    }
}

/// Runs [`minimize`] from every start and keeps the best result.
pub fn multi_start<F: FnMut(&[f64]) -> f64>(mut f: F, starts: &[Vec<f64>], opts: Options) -> Minimum {
    let mut best: Option<Minimum> = None;
    let mut total = 0;
    for s in starts {
        let m = minimize(&mut f, s, opts);
        total += m.iterations;
        if best.as_ref().map_or(true, |b| m.f < b.f) {
            best = Some(m);
        }
    }
    let mut b = best.expect("at least one start");
    b.iterations = total;
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let m = minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            Options::default(),
        );
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn one_dimensional_and_infinite_regions() {
        let m = minimize(|x| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) }, &[0.1], Options::default());
        assert!((m.x[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn multi_start_escapes_local_minimum() {
        let f = |x: &[f64]| (x[0] * x[0] - 4.0).powi(2) + 0.1 * (x[0] - 2.0).powi(2);
        let m = multi_start(f, &[vec![-3.0], vec![3.0]], Options::default());
        assert!((m.x[0] - 2.0).abs() < 1e-6);
    }
}
