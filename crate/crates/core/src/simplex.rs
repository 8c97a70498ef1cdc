//! Derivative-free Nelder-Mead minimisation.
//!
//! Uses the dimension-adaptive coefficients of Gao & Han, which behave much
//! better than the classic (1, 2, 1/2, 1/2) set beyond a handful of
//! dimensions. Objective values of `+inf` mark infeasible points; the
//! simplex simply contracts away from them.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Stop when the spread of objective values across the simplex falls
    /// below this.
    pub f_tol: f64,
    /// Stop when every vertex is within this distance (max-norm) of the best.
    pub x_tol: f64,
    pub max_iter: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            f_tol: 1e-9,
            x_tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimises `f` from `x0` with an initial simplex of axis steps `steps`.
pub fn minimize<F>(mut f: F, x0: &[f64], steps: &[f64], opts: &SimplexOptions) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(steps.len(), n, "one step per coordinate");
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += steps[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();

    let mut order: Vec<usize> = (0..=n).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];

    while iterations < opts.max_iter {
        // stable sort keeps earlier vertices first among ties
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        let spread = vals[worst] - vals[best];
        let size = pts
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&pts[best])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if vals[best].is_finite() && (spread <= opts.f_tol || size <= opts.x_tol) {
            converged = true;
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&pts[i]) {
                *c += v / nf;
            }
        }
        let towards = |out: &mut [f64], coef: f64, from: &[f64], c: &[f64]| {
            for ((o, &ci), &fi) in out.iter_mut().zip(c).zip(from) {
                *o = ci + coef * (ci - fi);
            }
        };

        towards(&mut trial, alpha, &pts[worst], &centroid);
        let f_r = eval(&trial, &mut evals);

        if f_r < vals[best] {
            towards(&mut trial2, alpha * beta, &pts[worst], &centroid);
            let f_e = eval(&trial2, &mut evals);
            if f_e < f_r {
                pts[worst].copy_from_slice(&trial2);
                vals[worst] = f_e;
            } else {
                pts[worst].copy_from_slice(&trial);
                vals[worst] = f_r;
            }
            continue;
        }
        if f_r < vals[second_worst] {
            pts[worst].copy_from_slice(&trial);
            vals[worst] = f_r;
            continue;
        }
        let (coef, threshold) = if f_r < vals[worst] {
            (alpha * gamma, f_r)
        } else {
            (-gamma, vals[worst])
        };
        towards(&mut trial2, coef, &pts[worst], &centroid);
        let f_c = eval(&trial2, &mut evals);
        if f_c < threshold || (f_c == threshold && f_c.is_finite()) {
            pts[worst].copy_from_slice(&trial2);
            vals[worst] = f_c;
            continue;
        }
        // shrink towards the best vertex
        let anchor = pts[best].clone();
        for &i in &order[1..] {
            for (p, a) in pts[i].iter_mut().zip(&anchor) {
                *p = a + delta * (*p - a);
            }
            vals[i] = eval(&pts[i], &mut evals);
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)))
        .expect("non-empty simplex");
    SimplexResult {
        x: pts[best].clone(),
        f: vals[best],
        iterations,
        evaluations: evals,
        converged,
    }
}
