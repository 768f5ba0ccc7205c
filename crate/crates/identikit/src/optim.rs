//! Derivative-free minimization (Nelder-Mead) shared by the fitting,
//! membership and falsification searches. Objectives may return infinity to
//! mark infeasible points.

/// Budget and termination knobs for one simplex run.
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the simplex diameter falls below this.
    pub diameter_tol: f64,
    /// Initial simplex edge length, relative to each coordinate scale.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_evals: 2000, diameter_tol: 1e-9, initial_step: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d = 0.0f64;
    for i in 0..simplex.len() {
        for j in i + 1..simplex.len() {
            let dist = simplex[i]
                .iter()
                .zip(&simplex[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d = d.max(dist);
        }
    }
    d
}

/// Minimize `f` starting from `x0`, with per-coordinate scales setting the
/// initial simplex size. Standard reflection/expansion/contraction/shrink
/// with coefficients 1, 2, 1/2, 1/2.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    scales: &[f64],
    opts: &NelderMeadOptions,
) -> MinimizeResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert!(n >= 1);
    assert_eq!(scales.len(), n);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        let step = opts.initial_step * scales[i].abs().max(1e-12);
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let reordered: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let revalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        simplex = reordered;
        values = revalues;

        if diameter(&simplex) < opts.diameter_tol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|v| v[i]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflect: Vec<f64> =
            centroid.iter().zip(&worst).map(|(c, w)| c + (c - w)).collect();
        let fr = eval(&reflect, &mut evals);

        if fr < values[0] {
            let expand: Vec<f64> =
                centroid.iter().zip(&worst).map(|(c, w)| c + 2.0 * (c - w)).collect();
            let fe = eval(&expand, &mut evals);
            if fe < fr {
                simplex[n] = expand;
                values[n] = fe;
            } else {
                simplex[n] = reflect;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflect;
            values[n] = fr;
        } else {
            let (point, fp) = if fr < values[n] {
                let outside: Vec<f64> =
                    centroid.iter().zip(&reflect).map(|(c, r)| c + 0.5 * (r - c)).collect();
                let v = eval(&outside, &mut evals);
                (outside, v)
            } else {
                let inside: Vec<f64> =
                    centroid.iter().zip(&worst).map(|(c, w)| c + 0.5 * (w - c)).collect();
                let v = eval(&inside, &mut evals);
                (inside, v)
            };
            if fp < values[n].min(fr) {
                simplex[n] = point;
                values[n] = fp;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    for j in 0..n {
                        simplex[i][j] = best[j] + 0.5 * (simplex[i][j] - best[j]);
                    }
                    values[i] = eval(&simplex[i].clone(), &mut evals);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    MinimizeResult { x: simplex[best].clone(), value: values[best], evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
        let res = nelder_mead(f, &[0.0, 0.0], &[1.0, 1.0], &NelderMeadOptions::default());
        assert!(res.converged);
        assert!((res.x[0] - 3.0).abs() < 1e-6);
        assert!((res.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let res = nelder_mead(
            f,
            &[-1.2, 1.0],
            &[1.0, 1.0],
            &NelderMeadOptions { max_evals: 10000, ..Default::default() },
        );
        assert!((res.x[0] - 1.0).abs() < 1e-4);
        assert!((res.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn infinity_marks_infeasible() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::INFINITY } else { (x[0] - 0.5).powi(2) };
        let res = nelder_mead(f, &[2.0], &[1.0], &NelderMeadOptions::default());
        assert!((res.x[0] - 0.5).abs() < 1e-6);
    }
}
