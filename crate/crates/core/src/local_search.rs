//! Box-projected Nelder–Mead used by the likelihood and acquisition searches.

#[derive(Debug, Clone, Copy)]
pub(crate) struct NelderMeadOptions {
    pub max_evals: usize,
    /// Initial simplex edge as a fraction of each box width.
    pub initial_step: f64,
    pub xtol: f64,
    pub ftol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 400,
            initial_step: 0.1,
            xtol: 1e-6,
            ftol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LocalResult {
    pub x: Vec<f64>,
    pub value: f64,
    #[allow(dead_code)]
    pub evals: usize,
}

/// Minimizes `f` over the box `[lower, upper]` starting from `x0`.
///
/// Trial points are clamped into the box. Non-finite objective values count
/// as `+∞`. The returned value never exceeds `f(x0)`.
pub(crate) fn nelder_mead_box(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: NelderMeadOptions,
) -> LocalResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let project = |x: &mut Vec<f64>| {
        for j in 0..n {
            x[j] = x[j].clamp(lower[j], upper[j]);
        }
    };

    let mut start = x0.to_vec();
    project(&mut start);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(&start, &mut evals);
    simplex.push((start.clone(), f0));
    for j in 0..n {
        let step = opts.initial_step * (upper[j] - lower[j]);
        let mut v = start.clone();
        v[j] = if v[j] + step <= upper[j] { v[j] + step } else { v[j] - step };
        project(&mut v);
        let fv = eval(&v, &mut evals);
        simplex.push((v, fv));
    }

    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = (worst - best).abs();
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| {
                v.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter <= opts.xtol || (best.is_finite() && spread <= opts.ftol * (1.0 + best.abs())) {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for j in 0..n {
                centroid[j] += v[j] / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n)
                .map(|j| centroid[j] + t * (simplex[n].0[j] - centroid[j]))
                .collect();
            for j in 0..n {
                p[j] = p[j].clamp(lower[j], upper[j]);
            }
            p
        };

        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink towards the best vertex
        let best_x = simplex[0].0.clone();
        for k in 1..=n {
            let mut v: Vec<f64> = (0..n)
                .map(|j| best_x[j] + 0.5 * (simplex[k].0[j] - best_x[j]))
                .collect();
            project(&mut v);
            let fv = eval(&v, &mut evals);
            simplex[k] = (v, fv);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    LocalResult { x, value, evals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_minimum() {
        let r = nelder_mead_box(
            |x| (x[0] - 0.3).powi(2) + 10.0 * (x[1] + 0.2).powi(2),
            &[0.9, 0.9],
            &[-1.0, -1.0],
            &[1.0, 1.0],
            NelderMeadOptions {
                max_evals: 2000,
                ..Default::default()
            },
        );
        assert!((r.x[0] - 0.3).abs() < 1e-3 && (r.x[1] + 0.2).abs() < 1e-3, "{:?}", r.x);
    }

    #[test]
    fn respects_bounds_and_start_value() {
        let f = |x: &[f64]| -(x[0] + x[1]);
        let r = nelder_mead_box(f, &[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0], NelderMeadOptions::default());
        assert!(r.x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(r.value <= f(&[0.5, 0.5]));
        assert!(r.value < -1.99);
    }

    #[test]
    fn tolerates_infinite_regions() {
        let f = |x: &[f64]| if x[0] > 0.8 { f64::NAN } else { (x[0] - 0.5).powi(2) };
        let r = nelder_mead_box(f, &[0.1], &[0.0], &[1.0], NelderMeadOptions::default());
        assert!((r.x[0] - 0.5).abs() < 1e-3);
    }
}
