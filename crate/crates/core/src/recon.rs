//! Adjoint operator, data weighting and iterative reconstruction.
//!
//! All solvers work on the weighted, support-restricted operator
//! `A = √W·M·P`, where `W(t, θ) = χ(t)·ψ(θ)` are the data weights and `P`
//! zeroes every node outside the admissible support disc.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{wrap_angle, ForwardModel, Sinogram};
use crate::error::{Error, Result};
use crate::field::{smooth_step, Grid2D, Phantom};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const MIN_NORM_ITERS: usize = 10;
const DIVERGENCE_RUN: usize = 3;

/// Smooth time cutoff: 1 on `[0, T]`, 0 from `T₁` on.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeCutoff {
    pub t_plateau: f64,
    pub t_end: f64,
    pub weights: Vec<f64>,
}

impl TimeCutoff {
    pub fn value(&self, t: f64) -> f64 {
        chi(t, self.t_plateau, self.t_end)
    }
}

fn chi(t: f64, t_plateau: f64, t_end: f64) -> f64 {
    if t <= t_plateau {
        1.0
    } else if t >= t_end {
        0.0
    } else {
        smooth_step((t - t_plateau) / (t_end - t_plateau))
    }
}

pub fn time_cutoff_chi(t_plateau: f64, t_end: f64, nt: usize, dt: f64) -> Result<TimeCutoff> {
    if !(t_plateau > 0.0) || !(t_end > t_plateau) {
        return Err(Error::InvalidArgument(format!("cutoff needs 0 < T < T1, got T = {t_plateau}, T1 = {t_end}")));
    }
    if t_end > nt as f64 * dt * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("cutoff end {t_end} exceeds the record length {}", nt as f64 * dt)));
    }
    let weights = (0..nt).map(|i| chi(i as f64 * dt, t_plateau, t_end)).collect();
    Ok(TimeCutoff { t_plateau, t_end, weights })
}

/// Angular weights tapering smoothly to zero over `fraction` of the arc at each end.
///
/// Returns all ones for the full circle.
pub fn angular_taper(thetas: &[f64], arc: Option<(f64, f64)>, fraction: f64) -> Vec<f64> {
    let Some((a, b)) = arc else {
        return vec![1.0; thetas.len()];
    };
    let width = fraction * (b - a);
    thetas
        .iter()
        .map(|&t| {
            if width <= 0.0 {
                return 1.0;
            }
            let s = a + wrap_angle(t - a).rem_euclid(std::f64::consts::TAU);
            let d = (s - a).min(b - s);
            1.0 - smooth_step(d / width)
        })
        .collect()
}

/// `W[i, j] = χ(t_i)·ψ(θ_j)`.
pub fn data_weights(chi: &TimeCutoff, angular: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((chi.weights.len(), angular.len()), |(i, j)| chi.weights[i] * angular[j])
}

/// `M*g` on the model grid: the exact transpose of the discrete forward map.
pub fn adjoint_operator(g: &Sinogram, model: &ForwardModel) -> Result<Array2<f64>> {
    if g.config != *model.config() {
        return Err(Error::Shape("sinogram detector configuration differs from the model".into()));
    }
    if (g.dt - model.dt()).abs() > 1e-12 * model.dt() {
        return Err(Error::Shape(format!("sinogram dt {} differs from model dt {}", g.dt, model.dt())));
    }
    model.adjoint(&g.data)
}

/// Sequential dot product, so results do not depend on the thread count.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The operator `A = √W·M·P` and its transpose.
pub struct WeightedProblem<'a> {
    model: &'a ForwardModel,
    sqrt_w: Array2<f64>,
    mask: Vec<bool>,
    margin: f64,
}

impl<'a> WeightedProblem<'a> {
    /// Support is the disc `|x| < 1 − margin`.
    pub fn new(model: &'a ForwardModel, weights: &Array2<f64>, margin: f64) -> Result<Self> {
        if weights.dim() != model.data_shape() {
            return Err(Error::Shape(format!("weights are {:?}, data are {:?}", weights.dim(), model.data_shape())));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("data weights must be nonnegative".into()));
        }
        let mask = model.grid().disc_mask(1.0 - margin);
        Ok(Self { model, sqrt_w: weights.mapv(f64::sqrt), mask, margin })
    }

    pub fn unweighted(model: &'a ForwardModel, margin: f64) -> Result<Self> {
        Self::new(model, &Array2::ones(model.data_shape()), margin)
    }

    pub fn model(&self) -> &ForwardModel {
        self.model
    }

    pub fn grid(&self) -> &Grid2D {
        self.model.grid()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn project(&self, f: &mut [f64]) {
        for (v, &m) in f.iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }

    /// `√W ⊙ s`.
    pub fn weight(&self, s: &Array2<f64>) -> Array2<f64> {
        s * &self.sqrt_w
    }

    pub fn apply(&self, f: &[f64]) -> Result<Array2<f64>> {
        let mut fp = f.to_vec();
        self.project(&mut fp);
        Ok(self.model.apply(&fp)? * &self.sqrt_w)
    }

    pub fn apply_transpose(&self, g: &Array2<f64>) -> Result<Vec<f64>> {
        let mut out = self.model.apply_transpose(&(g * &self.sqrt_w))?;
        self.project(&mut out);
        Ok(out)
    }

    fn to_phantom(&self, f: Vec<f64>) -> Result<Phantom> {
        let n = self.grid().n();
        Phantom::projected(self.grid().clone(), Array2::from_shape_vec((n, n), f).expect("n×n"), self.margin)
    }
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Result of power iteration on `AᵀA`.
#[derive(Clone, Debug)]
pub struct NormEstimate {
    /// Estimate of `‖A‖²`.
    pub value: f64,
    /// Rayleigh quotient per iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Power iteration for `‖A‖²`, stopping once successive Rayleigh quotients agree to `tol`.
pub fn operator_norm_estimate(problem: &WeightedProblem, iters: usize, tol: f64, seed: u64) -> Result<NormEstimate> {
    if iters < MIN_NORM_ITERS {
        return Err(Error::InvalidArgument(format!("power iteration needs at least {MIN_NORM_ITERS} iterations")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..problem.grid().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    problem.project(&mut x);
    let nx = norm(&x);
    if nx == 0.0 {
        return Err(Error::InvalidArgument("support mask is empty".into()));
    }
    x.iter_mut().for_each(|v| *v /= nx);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..iters {
        let y = problem.apply(&x)?;
        let lambda = dot(flat(&y), flat(&y));
        let prev = history.last().copied();
        history.push(lambda);
        if let Some(p) = prev {
            if lambda > 0.0 && ((lambda - p) / lambda).abs() <= tol {
                converged = true;
                break;
            }
        }
        if lambda == 0.0 {
            converged = true;
            break;
        }
        x = problem.apply_transpose(&y)?;
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
    }
    Ok(NormEstimate { value: *history.last().expect("at least one iteration"), history, converged })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    /// `1/‖A‖²` from power iteration.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct ReconOptions {
    pub iters: usize,
    pub step: StepSize,
    /// Relative weighted misfit at which iteration stops.
    pub tol: f64,
    /// Weight `μ` of the optional `μ‖∇f‖²` penalty (CG only).
    pub tikhonov: f64,
    pub norm_iters: usize,
    pub seed: u64,
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self { iters: 50, step: StepSize::Auto, tol: DEFAULT_TOL, tikhonov: 0.0, norm_iters: 30, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub estimate: Phantom,
    /// Weighted data misfit `‖√W(Mf_k − s)‖` for `k = 0, 1, …`, starting at `f₀ = 0`.
    pub residual_history: Vec<f64>,
    pub step_size: f64,
    pub iterations: usize,
}

fn check_data(problem: &WeightedProblem, s: &Array2<f64>) -> Result<()> {
    if s.dim() != problem.model().data_shape() {
        return Err(Error::Shape(format!("data are {:?}, model expects {:?}", s.dim(), problem.model().data_shape())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("data contain non-finite values".into()));
    }
    Ok(())
}

/// Projected Landweber iteration `f ← P(f + α·Aᵀ(√W s − A f))` from `f₀ = 0`.
pub fn landweber(problem: &WeightedProblem, s: &Array2<f64>, opts: &ReconOptions) -> Result<ReconResult> {
    check_data(problem, s)?;
    let b = problem.weight(s);
    let b_norm = norm(flat(&b));
    let n_nodes = problem.grid().len();
    if b_norm == 0.0 {
        return Ok(ReconResult {
            estimate: problem.to_phantom(vec![0.0; n_nodes])?,
            residual_history: vec![0.0],
            step_size: 0.0,
            iterations: 0,
        });
    }
    let step = match opts.step {
        StepSize::Auto => 1.0 / operator_norm_estimate(problem, opts.norm_iters, 1e-3, opts.seed)?.value,
        StepSize::Fixed(a) if a > 0.0 && a.is_finite() => a,
        StepSize::Fixed(a) => return Err(Error::InvalidArgument(format!("step size {a} must be positive"))),
    };
    let mut f = vec![0.0; n_nodes];
    let mut r = b.clone();
    let mut history = vec![b_norm];
    let mut increases = 0;
    let mut iterations = 0;
    for k in 0..opts.iters {
        let g = problem.apply_transpose(&r)?;
        f.iter_mut().zip(&g).for_each(|(fi, gi)| *fi += step * gi);
        problem.project(&mut f);
        r = &b - &problem.apply(&f)?;
        let m = norm(flat(&r));
        iterations = k + 1;
        if m > *history.last().expect("nonempty") {
            increases += 1;
        } else {
            increases = 0;
        }
        history.push(m);
        if increases >= DIVERGENCE_RUN {
            return Err(Error::Divergence { iteration: iterations, last: m });
        }
        if m <= opts.tol * b_norm {
            break;
        }
    }
    Ok(ReconResult { estimate: problem.to_phantom(f)?, residual_history: history, step_size: step, iterations })
}

/// Forward-difference gradient on the grid, `GᵀG` being the 5-point Laplacian with
/// natural boundary rows.
fn gradient(f: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * n * n];
    for j in 0..n {
        for i in 0..n {
            let k = j * n + i;
            if i + 1 < n {
                out[k] = f[k + 1] - f[k];
            }
            if j + 1 < n {
                out[n * n + k] = f[k + n] - f[k];
            }
        }
    }
    out
}

fn gradient_transpose(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let k = j * n + i;
            if i + 1 < n {
                out[k + 1] += g[k];
                out[k] -= g[k];
            }
            if j + 1 < n {
                out[k + n] += g[n * n + k];
                out[k] -= g[n * n + k];
            }
        }
    }
    out
}

/// CGLS on `min ‖A f − √W s‖² + μ‖∇Pf‖²`, from `f₀ = 0`.
///
/// The history records the weighted data misfit only.
pub fn cg_normal(problem: &WeightedProblem, s: &Array2<f64>, opts: &ReconOptions) -> Result<ReconResult> {
    check_data(problem, s)?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {} must be positive", opts.tol)));
    }
    if !(opts.tikhonov >= 0.0) {
        return Err(Error::InvalidArgument(format!("Tikhonov weight {} must be nonnegative", opts.tikhonov)));
    }
    let n = problem.grid().n();
    let b = problem.weight(s);
    let b_norm = norm(flat(&b));
    if b_norm == 0.0 {
        return Ok(ReconResult {
            estimate: problem.to_phantom(vec![0.0; n * n])?,
            residual_history: vec![0.0],
            step_size: 0.0,
            iterations: 0,
        });
    }
    let mu = opts.tikhonov;
    let sqrt_mu = mu.sqrt();
    // A_full = [A; √μ·G·P], residual r = [r_data; r_reg]
    let normal_grad = |rd: &Array2<f64>, rr: &[f64]| -> Result<Vec<f64>> {
        let mut g = problem.apply_transpose(rd)?;
        if mu > 0.0 {
            let mut gt = gradient_transpose(rr, n);
            problem.project(&mut gt);
            g.iter_mut().zip(&gt).for_each(|(a, b)| *a += sqrt_mu * b);
        }
        Ok(g)
    };
    let forward = |p: &[f64]| -> Result<(Array2<f64>, Vec<f64>)> {
        let qd = problem.apply(p)?;
        let qr = if mu > 0.0 {
            let mut pp = p.to_vec();
            problem.project(&mut pp);
            gradient(&pp, n).into_iter().map(|v| sqrt_mu * v).collect()
        } else {
            Vec::new()
        };
        Ok((qd, qr))
    };

    let mut f = vec![0.0; n * n];
    let mut rd = b.clone();
    let mut rr = if mu > 0.0 { vec![0.0; 2 * n * n] } else { Vec::new() };
    let mut sgrad = normal_grad(&rd, &rr)?;
    let mut p = sgrad.clone();
    let mut gamma = dot(&sgrad, &sgrad);
    let mut history = vec![b_norm];
    let mut iterations = 0;
    for k in 0..opts.iters {
        if gamma == 0.0 {
            break;
        }
        let (qd, qr) = forward(&p)?;
        let delta = dot(flat(&qd), flat(&qd)) + dot(&qr, &qr);
        if delta == 0.0 {
            return Err(Error::Breakdown(k));
        }
        let alpha = gamma / delta;
        f.iter_mut().zip(&p).for_each(|(fi, pi)| *fi += alpha * pi);
        rd = rd - alpha * &qd;
        rr.iter_mut().zip(&qr).for_each(|(a, b)| *a -= alpha * b);
        iterations = k + 1;
        let m = norm(flat(&rd));
        history.push(m);
        if m <= opts.tol * b_norm {
            break;
        }
        sgrad = normal_grad(&rd, &rr)?;
        let gamma_new = dot(&sgrad, &sgrad);
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&sgrad).for_each(|(pi, si)| *pi = si + beta * *pi);
    }
    problem.project(&mut f);
    Ok(ReconResult { estimate: problem.to_phantom(f)?, residual_history: history, step_size: 0.0, iterations })
}

/// `A` restricted to the nodes with `|x| < radius`, assembled column by column.
///
/// Returns the matrix and the flat node index of every column.
pub fn assemble_dense(problem: &WeightedProblem, radius: f64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let grid = problem.grid();
    let cols: Vec<usize> = (0..grid.len()).filter(|&k| grid.pos_of(k).norm() < radius && problem.mask()[k]).collect();
    let (nt, nth) = problem.model().data_shape();
    let mut m = DMatrix::zeros(nt * nth, cols.len());
    let mut e = vec![0.0; grid.len()];
    for (c, &k) in cols.iter().enumerate() {
        e[k] = 1.0;
        let y = problem.apply(&e)?;
        e[k] = 0.0;
        for (r, v) in y.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    Ok((m, cols))
}

/// Extremal singular values of an assembled operator.
#[derive(Clone, Debug)]
pub struct InjectivityReport {
    pub n_columns: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub condition: f64,
}

pub fn injectivity_report(problem: &WeightedProblem, radius: f64) -> Result<InjectivityReport> {
    let (m, cols) = assemble_dense(problem, radius)?;
    if cols.is_empty() {
        return Err(Error::InvalidArgument(format!("no grid nodes inside radius {radius}")));
    }
    let sv = m.singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    Ok(InjectivityReport { n_columns: cols.len(), sigma_max, sigma_min, condition: sigma_max / sigma_min })
}

/// `‖a − b‖/‖b‖` over all nodes.
pub fn relative_error(estimate: &Phantom, truth: &Phantom) -> f64 {
    let d: f64 = estimate.values().iter().zip(truth.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    let t: f64 = truth.values().iter().map(|b| b * b).sum();
    if t == 0.0 {
        d.sqrt()
    } else {
        (d / t).sqrt()
    }
}
