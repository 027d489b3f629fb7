//! Independent reference computations for the integration tests.
//!
//! Nothing here calls into the library's linear algebra or update code:
//! matrices are plain nested vectors and the posterior formulas are the
//! textbook information-form expressions.

#![allow(dead_code)]

pub mod checks;

pub type Mat = Vec<Vec<f64>>;

pub fn eye(d: usize) -> Mat {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn diag(v: &[f64]) -> Mat {
    let mut m = eye(v.len());
    for (i, x) in v.iter().enumerate() {
        m[i][i] = *x;
    }
    m
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn sub(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x - y).collect())
        .collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * s).collect()).collect()
}

pub fn mul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|r| {
            (0..n)
                .map(|j| r.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn mul_vec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

/// Gauss-Jordan inverse with full pivot search per column.
pub fn inv(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let pivot = m[c][c];
        assert!(pivot.abs() > 1e-300, "singular matrix in oracle");
        for x in m[c].iter_mut() {
            *x /= pivot;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    let row_c = m[c].clone();
                    for (x, y) in m[r].iter_mut().zip(row_c) {
                        *x -= f * y;
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(1.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Meta-posterior over `mu` after all tasks at once, in information form:
/// each task with Gram `G` and sum `B` adds `P - P (S0^-1 + P)^-1 P` to the
/// precision and `b - P (S0^-1 + P)^-1 b` to the information vector, with
/// `P = G/σ²` and `b = B/σ²`. Requires invertible `sigma_q` and `sigma_0`.
pub fn batch_meta_posterior(
    mu_q: &[f64],
    sigma_q: &Mat,
    sigma_0: &Mat,
    noise_sigma: f64,
    tasks: &[(Mat, Vec<f64>)],
) -> (Vec<f64>, Mat) {
    let s2 = noise_sigma * noise_sigma;
    let prec_q = inv(sigma_q);
    let prec_0 = inv(sigma_0);
    let mut precision = prec_q.clone();
    let mut info = mul_vec(&prec_q, mu_q);
    for (g, b) in tasks {
        let p = scale(g, 1.0 / s2);
        let bb: Vec<f64> = b.iter().map(|x| x / s2).collect();
        let k = inv(&add(&prec_0, &p));
        precision = add(&precision, &sub(&p, &mul(&mul(&p, &k), &p)));
        let corr = mul_vec(&mul(&p, &k), &bb);
        info = info
            .iter()
            .zip(bb.iter().zip(&corr))
            .map(|(i, (x, c))| i + x - c)
            .collect();
    }
    let cov = inv(&precision);
    (mul_vec(&cov, &info), cov)
}

fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// Posterior mean and variance of a scalar `mu` given per-task rewards, by
/// brute-force integration over a `(mu, theta)` grid on `[-half, half]²`.
///
/// `mu ~ N(0, sq²)`, `theta_s ~ N(mu, s0²)`, `y ~ N(theta_s, σ²)`.
pub fn grid_meta_posterior(sq: f64, s0: f64, noise: f64, tasks: &[Vec<f64>], points: usize, half: f64) -> (f64, f64) {
    let h = 2.0 * half / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| -half + i as f64 * h).collect();
    // log of the theta-integrated likelihood of each task at each mu
    let mut log_post: Vec<f64> = grid.iter().map(|&mu| normal_log_pdf(mu, 0.0, sq * sq)).collect();
    for ys in tasks {
        let log_lik_theta: Vec<f64> = grid
            .iter()
            .map(|&th| ys.iter().map(|&y| normal_log_pdf(y, th, noise * noise)).sum())
            .collect();
        let shift = log_lik_theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, &mu) in grid.iter().enumerate() {
            let integral: f64 = grid
                .iter()
                .zip(&log_lik_theta)
                .map(|(&th, &l)| (normal_log_pdf(th, mu, s0 * s0) + l - shift).exp())
                .sum::<f64>()
                * h;
            log_post[i] += integral.ln();
        }
    }
    let shift = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_post.iter().map(|l| (l - shift).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean = grid.iter().zip(&w).map(|(x, p)| x * p).sum::<f64>() / z;
    let var = grid.iter().zip(&w).map(|(x, p)| (x - mean).powi(2) * p).sum::<f64>() / z;
    (mean, var)
}

/// Composite Simpson rule of `f` on `[a, b]` with `intervals` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for i in 1..intervals {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// `ln B(a, b)` from a Lanczos log-gamma, independent of statrs.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Per-task linear bound recomputed from its definition.
pub fn per_task_linear(n: f64, d: f64, l0: f64, s2: f64, actions: f64, delta: f64) -> f64 {
    let c = l0 / (1.0 + l0 / s2).ln();
    4.0 * (c * (4.0 * actions / delta).ln() * n * d / 2.0 * (1.0 + n * l0 / s2).ln()).sqrt()
        + n * (2.0 * delta * l0).sqrt()
}
