//! Gaussian-process regression on encoded design points.
//!
//! Anisotropic Matern 5/2 kernel, constant mean profiled by generalized
//! least squares, and an estimated nugget for noisy observations.
//! Hyperparameters maximize the log marginal likelihood by multi-start
//! Adam ascent in log space with analytic gradients; the profiled mean
//! makes the envelope gradient exact.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design_space::EncodedPoint;
use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;
const JITTERS: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Matern 5/2 correlation at scaled distance `rho`.
fn matern52(rho: f64) -> f64 {
    (1.0 + SQRT5 * rho + 5.0 / 3.0 * rho * rho) * (-SQRT5 * rho).exp()
}

/// Fitted Gaussian-process model; immutable and safe to share.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    pub length_scales: DVector<f64>,
    pub signal_variance: f64,
    pub nugget: f64,
    pub mean_const: f64,
    pub lml: f64,
    /// Set when the targets had no variance and a fallback prior was used.
    pub degenerate: bool,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Posterior of the latent (noise-free) function at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub sd: f64,
}

/// Hyperparameter search configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub length_scale_bounds: (f64, f64),
    pub signal_variance_bounds: (f64, f64),
    pub nugget_bounds: (f64, f64),
    /// Random restarts in addition to the data-driven start.
    pub restarts: usize,
    pub max_steps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            // Upper length-scale bound spans the widest slot including its
            // inactive fill.
            length_scale_bounds: (1e-2, 40.0),
            signal_variance_bounds: (1e-6, 10.0),
            nugget_bounds: (1e-8, 1.0),
            restarts: 5,
            max_steps: 120,
        }
    }
}

/// Summary of the fitted hyperparameters for run audit files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpSummary {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub nugget: f64,
    pub mean_const: f64,
    pub lml: f64,
    pub degenerate: bool,
}

impl GpModel {
    /// Builds a model at fixed hyperparameters: profiles the constant
    /// mean, factorizes `K + nugget I` (escalating jitter if needed), and
    /// caches the weight vector.
    pub fn with_params(
        x: DMatrix<f64>,
        y: DVector<f64>,
        length_scales: DVector<f64>,
        signal_variance: f64,
        nugget: f64,
    ) -> Result<GpModel> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::InvalidInput("need at least 2 observations".into()));
        }
        if y.len() != n {
            return Err(Error::InvalidInput("x and y lengths differ".into()));
        }
        if length_scales.len() != x.ncols() {
            return Err(Error::InvalidInput(
                "one length scale per input dimension required".into(),
            ));
        }
        if length_scales.iter().any(|&l| !(l > 0.0)) || !(signal_variance > 0.0) || nugget < 0.0 {
            return Err(Error::InvalidInput("hyperparameters out of range".into()));
        }

        let kmat = kernel_matrix(&x, &length_scales, signal_variance, nugget);
        let chol = factorize(&kmat)
            .ok_or_else(|| Error::Fit("kernel matrix not positive definite".into()))?;

        let ones = DVector::from_element(n, 1.0);
        let u = chol.solve(&ones);
        let v = chol.solve(&y);
        let mean_const = ones.dot(&v) / ones.dot(&u);
        let residual = &y - &ones * mean_const;
        let alpha = chol.solve(&residual);

        let ln_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * residual.dot(&alpha)
            - 0.5 * ln_det
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        Ok(GpModel {
            x,
            y,
            length_scales,
            signal_variance,
            nugget,
            mean_const,
            lml,
            degenerate: false,
            chol,
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn training_outputs(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn training_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().cloned().collect()
    }

    /// Posterior of the latent function; the nugget is excluded from the
    /// predictive variance.
    pub fn predict(&self, point: &EncodedPoint) -> Posterior {
        self.predict_slice(point.as_slice())
    }

    pub fn predict_slice(&self, point: &[f64]) -> Posterior {
        let n = self.x.nrows();
        let mut kstar = DVector::zeros(n);
        for i in 0..n {
            let mut rho2 = 0.0;
            for j in 0..self.x.ncols() {
                let d = (point[j] - self.x[(i, j)]) / self.length_scales[j];
                rho2 += d * d;
            }
            kstar[i] = self.signal_variance * matern52(rho2.sqrt());
        }
        let mean = self.mean_const + kstar.dot(&self.alpha);
        let w = self.chol.solve(&kstar);
        let var = self.signal_variance - kstar.dot(&w);
        Posterior {
            mean,
            sd: var.max(0.0).sqrt(),
        }
    }

    pub fn summary(&self) -> GpSummary {
        GpSummary {
            length_scales: self.length_scales.iter().cloned().collect(),
            signal_variance: self.signal_variance,
            nugget: self.nugget,
            mean_const: self.mean_const,
            lml: self.lml,
            degenerate: self.degenerate,
        }
    }
}

fn kernel_matrix(
    x: &DMatrix<f64>,
    lengths: &DVector<f64>,
    sf2: f64,
    nugget: f64,
) -> DMatrix<f64> {
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sf2 + nugget;
        for j in 0..i {
            let mut rho2 = 0.0;
            for c in 0..x.ncols() {
                let d = (x[(i, c)] - x[(j, c)]) / lengths[c];
                rho2 += d * d;
            }
            let v = sf2 * matern52(rho2.sqrt());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factorize(kmat: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    for &jitter in &JITTERS {
        let mut m = kmat.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            return Some(chol);
        }
    }
    None
}

/// Profiled log marginal likelihood at the given hyperparameters.
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lengths: &DVector<f64>,
    sf2: f64,
    nugget: f64,
) -> Result<f64> {
    let pre = Precomp::new(x);
    pre.eval(y, lengths, sf2, nugget, false)
        .map(|e| e.lml)
        .ok_or_else(|| Error::Fit("kernel matrix not positive definite".into()))
}

/// Profiled log marginal likelihood and its gradient with respect to the
/// log hyperparameters, ordered `(log l_1..d, log sf2, log nugget)`.
pub fn lml_with_gradient(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lengths: &DVector<f64>,
    sf2: f64,
    nugget: f64,
) -> Result<(f64, Vec<f64>)> {
    let pre = Precomp::new(x);
    pre.eval(y, lengths, sf2, nugget, true)
        .map(|e| (e.lml, e.grad))
        .ok_or_else(|| Error::Fit("kernel matrix not positive definite".into()))
}

struct EvalOut {
    lml: f64,
    grad: Vec<f64>,
}

/// Per-dimension squared distances shared across likelihood evaluations.
struct Precomp {
    n: usize,
    d: usize,
    d2: Vec<DMatrix<f64>>,
}

impl Precomp {
    fn new(x: &DMatrix<f64>) -> Self {
        let (n, d) = (x.nrows(), x.ncols());
        let d2 = (0..d)
            .map(|c| {
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..i {
                        let diff = x[(i, c)] - x[(j, c)];
                        m[(i, j)] = diff * diff;
                        m[(j, i)] = m[(i, j)];
                    }
                }
                m
            })
            .collect();
        Precomp { n, d, d2 }
    }

    fn eval(
        &self,
        y: &DVector<f64>,
        lengths: &DVector<f64>,
        sf2: f64,
        nugget: f64,
        with_grad: bool,
    ) -> Option<EvalOut> {
        let n = self.n;
        let mut rho = DMatrix::<f64>::zeros(n, n);
        for c in 0..self.d {
            let inv = 1.0 / (lengths[c] * lengths[c]);
            rho.zip_apply(&self.d2[c], |r: &mut f64, d2| *r += d2 * inv);
        }
        rho.apply(|r: &mut f64| *r = r.sqrt());

        // M = correlation matrix; W carries the shared gradient factor.
        let mut kmat = DMatrix::zeros(n, n);
        let mut corr = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let m = matern52(rho[(i, j)]);
                corr[(i, j)] = m;
                kmat[(i, j)] = sf2 * m;
            }
            kmat[(i, i)] += nugget;
        }

        let chol = factorize(&kmat)?;
        let ones = DVector::from_element(n, 1.0);
        let u = chol.solve(&ones);
        let v = chol.solve(y);
        let mean = ones.dot(&v) / ones.dot(&u);
        let residual = y - &ones * mean;
        let alpha = chol.solve(&residual);
        let ln_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * residual.dot(&alpha)
            - 0.5 * ln_det
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        if !with_grad {
            return Some(EvalOut {
                lml,
                grad: Vec::new(),
            });
        }

        // d lml / d theta = 0.5 (alpha' dK alpha - tr(Kinv dK)); the
        // profiled mean contributes nothing at its optimum.
        let kinv = chol.inverse();
        // A_ij = (alpha_i alpha_j - Kinv_ij)
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = alpha[i] * alpha[j] - kinv[(i, j)];
            }
        }

        let mut grad = vec![0.0; self.d + 2];
        // Length scales: dK/dlog l_c = sf2 * (5/3)(1 + sqrt5 rho) e^{-sqrt5 rho} * D2_c / l_c^2.
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let r = rho[(i, j)];
                w[(i, j)] = sf2 * (5.0 / 3.0) * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp();
            }
        }
        for c in 0..self.d {
            let inv = 1.0 / (lengths[c] * lengths[c]);
            let mut s = 0.0;
            let d2 = &self.d2[c];
            for i in 0..n {
                for j in 0..n {
                    s += a[(i, j)] * w[(i, j)] * d2[(i, j)];
                }
            }
            grad[c] = 0.5 * s * inv;
        }
        // Signal variance: dK/dlog sf2 = sf2 * corr.
        let mut s_sf = 0.0;
        for i in 0..n {
            for j in 0..n {
                s_sf += a[(i, j)] * corr[(i, j)];
            }
        }
        grad[self.d] = 0.5 * sf2 * s_sf;
        // Nugget: dK/dlog nugget = nugget * I.
        let s_nug: f64 = (0..n).map(|i| a[(i, i)]).sum();
        grad[self.d + 1] = 0.5 * nugget * s_nug;

        Some(EvalOut { lml, grad })
    }
}

/// Fits hyperparameters by multi-start Adam ascent on the log marginal
/// likelihood. Targets without variance fall back to a flat prior model
/// flagged as degenerate.
pub fn fit<R: Rng + ?Sized>(
    x: DMatrix<f64>,
    y: DVector<f64>,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<GpModel> {
    let n = x.nrows();
    let d = x.ncols();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 observations".into()));
    }

    let y_mean = y.mean();
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    if y_var < 1e-14 {
        let lengths = DVector::from_element(d, geo_mid(opts.length_scale_bounds));
        let mut model = GpModel::with_params(
            x,
            y,
            lengths,
            opts.signal_variance_bounds.0,
            opts.nugget_bounds.0,
        )?;
        model.degenerate = true;
        return Ok(model);
    }

    let spans: Vec<f64> = (0..d)
        .map(|c| {
            let col = x.column(c);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in col.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = hi - lo;
            if span > 0.0 {
                span
            } else {
                1.0
            }
        })
        .collect();

    let lb = opts.length_scale_bounds;
    let sb = opts.signal_variance_bounds;
    let nb = opts.nugget_bounds;

    // Log-space parameter vectors: (log l_1..d, log sf2, log nugget).
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(opts.restarts + 1);
    let heuristic: Vec<f64> = spans
        .iter()
        .map(|s| s.clamp(lb.0, lb.1).ln())
        .chain([
            y_var.clamp(sb.0, sb.1).ln(),
            (0.1 * y_var).clamp(nb.0, nb.1).ln(),
        ])
        .collect();
    starts.push(heuristic);
    for _ in 0..opts.restarts {
        let mut s: Vec<f64> = spans
            .iter()
            .map(|sp| {
                let lo = (0.25 * sp).clamp(lb.0, lb.1).ln();
                let hi = (4.0 * sp).clamp(lb.0, lb.1).ln();
                rng.gen_range(lo..=hi)
            })
            .collect();
        let sf_lo = (0.1 * y_var).clamp(sb.0, sb.1).ln();
        let sf_hi = (10.0 * y_var).clamp(sb.0, sb.1).ln();
        s.push(rng.gen_range(sf_lo..=sf_hi));
        let nug_lo = (1e-3 * y_var).clamp(nb.0, nb.1).ln();
        let nug_hi = y_var.clamp(nb.0, nb.1).ln();
        s.push(rng.gen_range(nug_lo..=nug_hi));
        starts.push(s);
    }

    let pre = Precomp::new(&x);
    let lo_bounds: Vec<f64> = (0..d)
        .map(|_| lb.0.ln())
        .chain([sb.0.ln(), nb.0.ln()])
        .collect();
    let hi_bounds: Vec<f64> = (0..d)
        .map(|_| lb.1.ln())
        .chain([sb.1.ln(), nb.1.ln()])
        .collect();

    let results: Vec<Option<(f64, Vec<f64>)>> = starts
        .par_iter()
        .map(|start| adam_ascent(&pre, &y, start, &lo_bounds, &hi_bounds, opts.max_steps))
        .collect();

    let best = results
        .into_iter()
        .flatten()
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .ok_or_else(|| Error::Fit("no hyperparameter start converged".into()))?;

    let theta = best.1;
    let lengths = DVector::from_iterator(d, theta[..d].iter().map(|t| t.exp()));
    GpModel::with_params(x, y, lengths, theta[d].exp(), theta[d + 1].exp())
}

fn geo_mid(bounds: (f64, f64)) -> f64 {
    (bounds.0.ln() * 0.5 + bounds.1.ln() * 0.5).exp()
}

fn adam_ascent(
    pre: &Precomp,
    y: &DVector<f64>,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    max_steps: usize,
) -> Option<(f64, Vec<f64>)> {
    let d = pre.d;
    let mut theta = start.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let (lr, b1, b2, eps) = (0.08, 0.9, 0.999, 1e-8);

    let eval = |theta: &[f64]| {
        let lengths = DVector::from_iterator(d, theta[..d].iter().map(|t| t.exp()));
        pre.eval(y, &lengths, theta[d].exp(), theta[d + 1].exp(), true)
    };

    let mut out = eval(&theta)?;
    let mut best = (out.lml, theta.clone());
    let mut stall = 0usize;

    for step in 1..=max_steps {
        let g_norm = out.grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if g_norm < 1e-4 {
            break;
        }
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * out.grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * out.grad[i] * out.grad[i];
            let mhat = m[i] / (1.0 - b1.powi(step as i32));
            let vhat = v[i] / (1.0 - b2.powi(step as i32));
            theta[i] = (theta[i] + lr * mhat / (vhat.sqrt() + eps)).clamp(lo[i], hi[i]);
        }
        out = match eval(&theta) {
            Some(o) => o,
            None => break,
        };
        if out.lml > best.0 + 1e-9 {
            best = (out.lml, theta.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= 15 {
                break;
            }
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng_for, Domain};
    use rand::Rng;

    fn random_inputs(n: usize, d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0))
    }

    /// Independent dense-solve oracle: direct kernel assembly and
    /// Gauss-Jordan elimination, no shared linear-algebra path.
    fn oracle_predict(
        x: &[Vec<f64>],
        y: &[f64],
        lengths: &[f64],
        sf2: f64,
        nugget: f64,
        mean: f64,
        q: &[f64],
    ) -> (f64, f64) {
        let n = x.len();
        let kfun = |a: &[f64], b: &[f64]| {
            let rho = a
                .iter()
                .zip(b)
                .zip(lengths)
                .map(|((ai, bi), l)| ((ai - bi) / l).powi(2))
                .sum::<f64>()
                .sqrt();
            sf2 * (1.0 + SQRT5 * rho + 5.0 / 3.0 * rho * rho) * (-SQRT5 * rho).exp()
        };
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = kfun(&x[i], &x[j]) + if i == j { nugget } else { 0.0 };
            }
        }
        let solve = |mat: &[Vec<f64>], b: &[f64]| -> Vec<f64> {
            let n = b.len();
            let mut a: Vec<Vec<f64>> = mat.to_vec();
            let mut rhs = b.to_vec();
            for col in 0..n {
                let piv = (col..n)
                    .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                    .unwrap();
                a.swap(col, piv);
                rhs.swap(col, piv);
                let p = a[col][col];
                for row in 0..n {
                    if row == col {
                        continue;
                    }
                    let f = a[row][col] / p;
                    for c in col..n {
                        a[row][c] -= f * a[col][c];
                    }
                    rhs[row] -= f * rhs[col];
                }
            }
            (0..n).map(|i| rhs[i] / a[i][i]).collect()
        };
        let res: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let alpha = solve(&k, &res);
        let kstar: Vec<f64> = x.iter().map(|xi| kfun(q, xi)).collect();
        let mu = mean + kstar.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
        let w = solve(&k, &kstar);
        let var = sf2 - kstar.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        (mu, var.max(0.0).sqrt())
    }

    #[test]
    fn predict_matches_dense_solve_oracle() {
        let mut rng = rng_for(1, Domain::Fit, 0);
        for case in 0..20 {
            let n = rng.gen_range(3..=20);
            let d = 9;
            let x = random_inputs(n, d, &mut rng);
            let y = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
            let lengths = DVector::from_fn(d, |_, _| rng.gen_range(0.5..3.0));
            let sf2 = rng.gen_range(0.1..2.0);
            let nugget = rng.gen_range(1e-4..1e-1);
            let model =
                GpModel::with_params(x.clone(), y.clone(), lengths.clone(), sf2, nugget).unwrap();

            let xs: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().cloned().collect()).collect();
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = model.predict_slice(&q);
            let (mu, sd) = oracle_predict(
                &xs,
                y.as_slice(),
                lengths.as_slice(),
                sf2,
                nugget,
                model.mean_const,
                &q,
            );
            assert!((got.mean - mu).abs() < 1e-8, "case {case}: mean");
            assert!((got.sd - sd).abs() < 1e-8, "case {case}: sd");
        }
    }

    #[test]
    fn constant_targets_fall_back_to_flat_model() {
        let mut rng = rng_for(2, Domain::Fit, 0);
        let x = random_inputs(8, 9, &mut rng);
        let y = DVector::from_element(8, 0.7);
        let model = fit(x, y, &FitOptions::default(), &mut rng).unwrap();
        assert!(model.degenerate);
        let q = vec![0.0; 9];
        let post = model.predict_slice(&q);
        assert!((post.mean - 0.7).abs() < 1e-9);
        assert!(post.sd <= 1e-3 + 1e-9);
    }

    #[test]
    fn far_points_revert_to_prior() {
        let mut rng = rng_for(3, Domain::Fit, 0);
        let x = random_inputs(10, 9, &mut rng);
        let y = DVector::from_fn(10, |_, _| rng.gen_range(0.0..1.0));
        let lengths = DVector::from_element(9, 1.0);
        let model = GpModel::with_params(x, y, lengths, 0.5, 1e-6).unwrap();
        let q = vec![500.0; 9];
        let post = model.predict_slice(&q);
        assert!((post.mean - model.mean_const).abs() < 1e-6);
        assert!((post.sd - 0.5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn zero_nugget_interpolates() {
        let mut rng = rng_for(4, Domain::Fit, 0);
        let x = random_inputs(12, 9, &mut rng);
        let y = DVector::from_fn(12, |_, _| rng.gen_range(0.0..1.0));
        let lengths = DVector::from_element(9, 2.0);
        let model = GpModel::with_params(x.clone(), y.clone(), lengths, 1.0, 0.0).unwrap();
        for i in 0..12 {
            let q: Vec<f64> = x.row(i).iter().cloned().collect();
            let post = model.predict_slice(&q);
            assert!((post.mean - y[i]).abs() < 1e-8, "row {i}");
        }
    }

    #[test]
    fn duplicate_rows_survive_via_jitter() {
        let mut x = DMatrix::zeros(4, 9);
        x.row_mut(2).fill(1.0);
        x.row_mut(3).fill(1.0);
        let y = DVector::from_vec(vec![0.2, 0.2, 0.8, 0.9]);
        let lengths = DVector::from_element(9, 1.0);
        let model = GpModel::with_params(x, y, lengths, 1.0, 0.0);
        assert!(model.is_ok());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rng_for(5, Domain::Fit, 0);
        let n = 10;
        let d = 4;
        let x = random_inputs(n, d, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
        let lengths = DVector::from_fn(d, |_, _| rng.gen_range(0.5..2.0));
        let sf2 = 0.8;
        let nugget = 0.01;

        let (_, grad) = lml_with_gradient(&x, &y, &lengths, sf2, nugget).unwrap();
        let h = 1e-5;
        let eval_at = |theta: &[f64]| {
            let l = DVector::from_iterator(d, theta[..d].iter().map(|t| t.exp()));
            log_marginal_likelihood(&x, &y, &l, theta[d].exp(), theta[d + 1].exp()).unwrap()
        };
        let mut theta: Vec<f64> = lengths.iter().map(|l| l.ln()).collect();
        theta.push(sf2.ln());
        theta.push(nugget.ln());
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (eval_at(&tp) - eval_at(&tm)) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn fit_beats_random_hyperparameters() {
        let mut rng = rng_for(6, Domain::Fit, 0);
        let n = 12;
        let x = random_inputs(n, 9, &mut rng);
        let y = DVector::from_fn(n, |i, _| (x[(i, 6)] * 3.0).sin() * 0.3 + 0.5);
        let model = fit(x.clone(), y.clone(), &FitOptions::default(), &mut rng).unwrap();
        for _ in 0..50 {
            let lengths = DVector::from_fn(9, |_, _| rng.gen_range(1e-2f64..40.0));
            let sf2 = rng.gen_range(1e-6f64..10.0);
            let nugget = rng.gen_range(1e-8f64..1.0);
            if let Ok(lml) = log_marginal_likelihood(&x, &y, &lengths, sf2, nugget) {
                assert!(
                    model.lml >= lml - 1e-6,
                    "random draw beat the fit: {lml} > {}",
                    model.lml
                );
            }
        }
    }

    #[test]
    fn observation_shrinks_posterior_sd() {
        let mut rng = rng_for(7, Domain::Fit, 0);
        let x = random_inputs(6, 9, &mut rng);
        let y = DVector::from_fn(6, |_, _| rng.gen_range(0.0..1.0));
        let lengths = DVector::from_element(9, 1.5);
        let q = vec![0.3; 9];

        let before = GpModel::with_params(x.clone(), y.clone(), lengths.clone(), 1.0, 0.05)
            .unwrap()
            .predict_slice(&q);
        let x2 = {
            let mut m = DMatrix::zeros(7, 9);
            m.view_mut((0, 0), (6, 9)).copy_from(&x);
            for (c, v) in q.iter().enumerate() {
                m[(6, c)] = *v;
            }
            m
        };
        let mut y2 = y.as_slice().to_vec();
        y2.push(0.5);
        let after = GpModel::with_params(x2, DVector::from_vec(y2), lengths, 1.0, 0.05)
            .unwrap()
            .predict_slice(&q);
        assert!(after.sd < before.sd);
    }

    #[test]
    fn predictions_ignore_row_order() {
        let mut rng = rng_for(8, Domain::Fit, 0);
        let n = 8;
        let x = random_inputs(n, 9, &mut rng);
        let y = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
        let lengths = DVector::from_element(9, 1.2);

        let perm: Vec<usize> = vec![3, 1, 7, 0, 5, 2, 6, 4];
        let xp = DMatrix::from_fn(n, 9, |i, j| x[(perm[i], j)]);
        let yp = DVector::from_fn(n, |i, _| y[perm[i]]);

        let m1 = GpModel::with_params(x, y, lengths.clone(), 0.9, 0.02).unwrap();
        let m2 = GpModel::with_params(xp, yp, lengths, 0.9, 0.02).unwrap();
        let q = vec![0.1; 9];
        let p1 = m1.predict_slice(&q);
        let p2 = m2.predict_slice(&q);
        assert!((p1.mean - p2.mean).abs() < 1e-10);
        assert!((p1.sd - p2.sd).abs() < 1e-10);
    }
}
