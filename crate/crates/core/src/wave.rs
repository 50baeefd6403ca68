//! Leapfrog finite-difference solver for `u_tt = c²Δu` with perfectly
//! matched layers.
//!
//! The absorbing band uses the auxiliary-field formulation
//!
//! ```text
//! u_tt + (ζ₁+ζ₂)u_t + ζ₁ζ₂u = c²Δu + ∇·ψ
//! ψ_t = −diag(ζ₁, ζ₂)ψ + c²·diag(ζ₂−ζ₁, ζ₁−ζ₂)∇u
//! ```
//!
//! with `ζ₁ = σ(x)`, `ζ₂ = σ(y)`. Away from the band `ζ = 0`, `ψ` stays zero and
//! the update is the plain 5-point/leapfrog scheme. `ψ` lives on cell edges:
//! `ψₓ[j·n+i]` sits between nodes `(i,j)` and `(i+1,j)`, `ψ_y[j·n+i]` between
//! `(i,j)` and `(i,j+1)`.
//!
//! Every update is linear with an explicitly coded transpose
//! ([`Propagator::adjoint_step`], [`Propagator::init_transpose`]), which the
//! reconstruction module uses to build the exact discrete adjoint.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Grid2D, Phantom, SpeedField};

/// Default Courant safety factor.
pub const DEFAULT_CFL: f64 = 0.5;
/// Default polynomial order of the damping profile.
pub const DEFAULT_PML_ORDER: u32 = 2;
/// Non-finite values are checked every this many steps.
const NAN_CHECK_INTERVAL: usize = 100;

/// Damping profile `σ(d) = σ_max·(d/width)^m`, `d` the depth into the band.
#[derive(Clone, Debug)]
pub struct PmlProfile {
    width: f64,
    sigma_max: f64,
    order: u32,
    start: f64,
    n: usize,
}

/// `σ_max` giving a nominal normal-incidence reflection of `1e−5` for the given band.
pub fn default_sigma_max(width: f64, order: u32) -> f64 {
    (order as f64 + 1.0) * (1e5f64).ln() / (2.0 * width)
}

pub fn pml_profile(grid: &Grid2D, width: f64, sigma_max: f64, order: u32) -> Result<PmlProfile> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("PML width {width} must be positive")));
    }
    if width > grid.pml_width() + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "PML width {width} exceeds the absorbing band reserved by the grid ({})",
            grid.pml_width()
        )));
    }
    if !(sigma_max >= 0.0) || order == 0 {
        return Err(Error::InvalidArgument(format!("bad PML parameters sigma_max {sigma_max}, order {order}")));
    }
    Ok(PmlProfile { width, sigma_max, order, start: grid.half_width() - width, n: grid.n() })
}

impl PmlProfile {
    /// No damping anywhere: a closed domain with homogeneous Dirichlet walls.
    pub fn none(grid: &Grid2D) -> Self {
        Self { width: 0.0, sigma_max: 0.0, order: DEFAULT_PML_ORDER, start: grid.half_width(), n: grid.n() }
    }

    /// Profile filling the band reserved by `grid` with the default `σ_max`.
    pub fn for_grid(grid: &Grid2D) -> Result<Self> {
        if grid.pml_width() == 0.0 {
            return Ok(Self::none(grid));
        }
        let w = grid.pml_width();
        pml_profile(grid, w, default_sigma_max(w, DEFAULT_PML_ORDER), DEFAULT_PML_ORDER)
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// Damping at depth `d` into the layer.
    pub fn sigma_at_depth(&self, d: f64) -> f64 {
        if d <= 0.0 || self.width == 0.0 {
            0.0
        } else {
            self.sigma_max * (d.min(self.width) / self.width).powi(self.order as i32)
        }
    }

    /// Damping at coordinate `x` along either axis.
    pub fn sigma_at(&self, x: f64) -> f64 {
        self.sigma_at_depth(x.abs() - self.start)
    }

    /// Damping at every node coordinate of the grid the profile was built for.
    pub fn samples(&self, grid: &Grid2D) -> Vec<f64> {
        (0..grid.n()).map(|i| self.sigma_at(grid.coord(i))).collect()
    }
}

/// Pressure at two time levels plus the edge-centred PML memory field.
#[derive(Clone, Debug)]
pub struct WaveState {
    u: Vec<f64>,
    u_prev: Vec<f64>,
    psi_x: Vec<f64>,
    psi_y: Vec<f64>,
    t: f64,
    steps: usize,
}

impl WaveState {
    pub fn zeros(n_nodes: usize) -> Self {
        Self {
            u: vec![0.0; n_nodes],
            u_prev: vec![0.0; n_nodes],
            psi_x: vec![0.0; n_nodes],
            psi_y: vec![0.0; n_nodes],
            t: 0.0,
            steps: 0,
        }
    }

    /// Pressure at the current time level, flat `j·n + i` layout.
    pub fn u_curr(&self) -> &[f64] {
        &self.u
    }

    /// Pressure one step earlier.
    pub fn u_prev(&self) -> &[f64] {
        &self.u_prev
    }

    pub fn psi(&self) -> (&[f64], &[f64]) {
        (&self.psi_x, &self.psi_y)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn u_array(&self, n: usize) -> Array2<f64> {
        Array2::from_shape_vec((n, n), self.u.clone()).expect("n×n")
    }

    /// Exchanges the two time levels, which reverses the direction of time
    /// for an undamped state.
    pub fn reverse_time(&mut self) {
        std::mem::swap(&mut self.u, &mut self.u_prev);
    }

    fn is_finite(&self) -> bool {
        self.u.par_iter().all(|v| v.is_finite())
    }
}

/// Adjoint variables of a [`WaveState`] plus scratch space for the transposed stencil.
#[derive(Clone, Debug)]
pub struct AdjointState {
    u: Vec<f64>,
    u_prev: Vec<f64>,
    psi_x: Vec<f64>,
    psi_y: Vec<f64>,
    total: Vec<f64>,
    weighted: Vec<f64>,
}

impl AdjointState {
    pub fn zeros(n_nodes: usize) -> Self {
        Self {
            u: vec![0.0; n_nodes],
            u_prev: vec![0.0; n_nodes],
            psi_x: vec![0.0; n_nodes],
            psi_y: vec![0.0; n_nodes],
            total: vec![0.0; n_nodes],
            weighted: vec![0.0; n_nodes],
        }
    }

    /// Adds `g` to the adjoint of the current pressure at `node`.
    pub fn add_to_current(&mut self, node: usize, g: f64) {
        self.u[node] += g;
    }
}

/// Time stepper for one speed field, damping profile and time step.
#[derive(Clone, Debug)]
pub struct Propagator {
    grid: Grid2D,
    dt: f64,
    max_c: f64,
    /// `c²dt²/h²` per node.
    coef: Vec<f64>,
    /// `c²` per node.
    c2: Vec<f64>,
    /// Node coefficients of `u_next = A·u + B·u_prev + G·(coef·Δu + (dt²/h)·div ψ)`.
    a: Vec<f64>,
    b: Vec<f64>,
    g: Vec<f64>,
    /// Edge coefficients of `ψ_next = P·ψ + Q·(u_next[k'] − u_next[k])`.
    px: Vec<f64>,
    qx: Vec<f64>,
    py: Vec<f64>,
    qy: Vec<f64>,
    dt2_over_h: f64,
    damped: bool,
}

/// Largest stable time step for the 5-point leapfrog scheme.
pub fn cfl_limit(h: f64, max_c: f64) -> f64 {
    h / (std::f64::consts::SQRT_2 * max_c)
}

impl Propagator {
    pub fn new(speed: &SpeedField, pml: &PmlProfile, dt: f64) -> Result<Self> {
        let grid = speed.grid().clone();
        let n = grid.n();
        let max_c = speed.max();
        let limit = cfl_limit(grid.h(), max_c);
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, limit });
        }
        if pml.n != n {
            return Err(Error::Shape("PML profile built for a different grid".into()));
        }
        let h = grid.h();
        let c2: Vec<f64> = speed.values().iter().map(|c| c * c).collect();
        let coef: Vec<f64> = c2.iter().map(|c2| c2 * dt * dt / (h * h)).collect();
        let node_sigma = pml.samples(&grid);
        let half_sigma: Vec<f64> = (0..n).map(|i| pml.sigma_at(grid.coord(i) + 0.5 * h)).collect();
        let len = n * n;
        let (mut a, mut b, mut g) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let (mut px, mut qx, mut py, mut qy) = (vec![1.0; len], vec![0.0; len], vec![1.0; len], vec![0.0; len]);
        for j in 0..n {
            for i in 0..n {
                let k = j * n + i;
                let (z1, z2) = (node_sigma[i], node_sigma[j]);
                let s = 0.5 * (z1 + z2) * dt;
                g[k] = 1.0 / (1.0 + s);
                a[k] = (2.0 - z1 * z2 * dt * dt) * g[k];
                b[k] = -(1.0 - s) * g[k];
                if i + 1 < n {
                    let z1e = half_sigma[i];
                    let c2e = 0.5 * (c2[k] + c2[k + 1]);
                    px[k] = (1.0 - 0.5 * z1e * dt) / (1.0 + 0.5 * z1e * dt);
                    qx[k] = dt * (z2 - z1e) * c2e / h / (1.0 + 0.5 * z1e * dt);
                }
                if j + 1 < n {
                    let z2e = half_sigma[j];
                    let c2e = 0.5 * (c2[k] + c2[k + n]);
                    py[k] = (1.0 - 0.5 * z2e * dt) / (1.0 + 0.5 * z2e * dt);
                    qy[k] = dt * (z1 - z2e) * c2e / h / (1.0 + 0.5 * z2e * dt);
                }
            }
        }
        let damped = node_sigma.iter().any(|&s| s > 0.0);
        Ok(Self { grid, dt, max_c, coef, c2, a, b, g, px, qx, py, qy, dt2_over_h: dt * dt / h, damped })
    }

    /// Time step `cfl·h/(√2·max c)`.
    pub fn with_cfl(speed: &SpeedField, pml: &PmlProfile, cfl: f64) -> Result<Self> {
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(Error::InvalidArgument(format!("CFL safety factor {cfl} must lie in (0, 1]")));
        }
        let dt = cfl * cfl_limit(speed.grid().h(), speed.max());
        Self::new(speed, pml, dt)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn max_speed(&self) -> f64 {
        self.max_c
    }

    pub fn is_damped(&self) -> bool {
        self.damped
    }

    /// Number of steps needed to reach time `t_end` (rounded up).
    pub fn steps_for(&self, t_end: f64) -> usize {
        (t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    /// State with `u = f` and zero initial velocity.
    ///
    /// The previous level uses the second-order Taylor start
    /// `u_prev = f + (dt²/2)c²Δ_h f`, which makes the first step symmetric in time.
    pub fn init_state(&self, f: &Phantom) -> Result<WaveState> {
        if f.grid() != &self.grid {
            return Err(Error::Shape("phantom grid differs from the solver grid".into()));
        }
        Ok(self.init_from_slice(f.values().as_slice().expect("standard layout")))
    }

    pub(crate) fn init_from_slice(&self, f: &[f64]) -> WaveState {
        let n = self.grid.n();
        let mut s = WaveState::zeros(n * n);
        for j in 1..n - 1 {
            s.u[j * n + 1..j * n + n - 1].copy_from_slice(&f[j * n + 1..j * n + n - 1]);
        }
        let u = &s.u;
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let k = j * n + i;
                let lap = u[k - 1] + u[k + 1] + u[k - n] + u[k + n] - 4.0 * u[k];
                s.u_prev[k] = u[k] + 0.5 * self.coef[k] * lap;
            }
        }
        s
    }

    /// Transpose of [`Propagator::init_from_slice`].
    pub(crate) fn init_transpose(&self, a: &AdjointState) -> Vec<f64> {
        let n = self.grid.n();
        let w: Vec<f64> = self.coef.iter().zip(&a.u_prev).map(|(c, v)| 0.5 * c * v).collect();
        let mut out = vec![0.0; n * n];
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let k = j * n + i;
                let mut lap = -4.0 * w[k];
                if i > 1 {
                    lap += w[k - 1];
                }
                if i + 2 < n {
                    lap += w[k + 1];
                }
                if j > 1 {
                    lap += w[k - n];
                }
                if j + 2 < n {
                    lap += w[k + n];
                }
                out[k] = a.u[k] + a.u_prev[k] + lap;
            }
        }
        out
    }

    /// Advances one time step in place.
    pub fn step(&self, s: &mut WaveState) -> Result<()> {
        self.advance(s, None);
        if s.steps.is_multiple_of(NAN_CHECK_INTERVAL) && !s.is_finite() {
            return Err(Error::NonFinite { step: s.steps, t: s.t });
        }
        Ok(())
    }

    /// One step of `u_tt = c²Δu + source`, the source given per node.
    #[allow(clippy::needless_range_loop)]
    fn advance(&self, s: &mut WaveState, source: Option<&[f64]>) {
        let n = self.grid.n();
        let dt2 = self.dt * self.dt;
        let dth = self.dt2_over_h;
        let damped = self.damped;
        {
            let WaveState { u, u_prev, psi_x, psi_y, .. } = s;
            let (u, psi_x, psi_y) = (&*u, &*psi_x, &*psi_y);
            // the previous level is overwritten by the new one, then swapped in
            u_prev.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
                if j == 0 || j == n - 1 {
                    return;
                }
                for i in 1..n - 1 {
                    let k = j * n + i;
                    let uc = u[k];
                    let lap = u[k - 1] + u[k + 1] + u[k - n] + u[k + n] - 4.0 * uc;
                    let mut rhs = self.coef[k] * lap;
                    if damped {
                        rhs += dth * (psi_x[k] - psi_x[k - 1] + psi_y[k] - psi_y[k - n]);
                    }
                    if let Some(src) = source {
                        rhs += dt2 * src[k];
                    }
                    row[i] = self.a[k] * uc + self.b[k] * row[i] + self.g[k] * rhs;
                }
            });
        }
        std::mem::swap(&mut s.u, &mut s.u_prev);
        if damped {
            let WaveState { u, psi_x, psi_y, .. } = s;
            let u = &*u;
            psi_x.par_chunks_mut(n).zip(psi_y.par_chunks_mut(n)).enumerate().for_each(|(j, (rx, ry))| {
                for i in 0..n {
                    let k = j * n + i;
                    if i + 1 < n && j > 0 && j + 1 < n {
                        rx[i] = self.px[k] * rx[i] + self.qx[k] * (u[k + 1] - u[k]);
                    }
                    if j + 1 < n && i > 0 && i + 1 < n {
                        ry[i] = self.py[k] * ry[i] + self.qy[k] * (u[k + n] - u[k]);
                    }
                }
            });
        }
        s.steps += 1;
        s.t = s.steps as f64 * self.dt;
    }

    /// Transpose of one [`Propagator::step`], applied in place to adjoint variables.
    pub fn adjoint_step(&self, a: &mut AdjointState) {
        let n = self.grid.n();
        let dth = self.dt2_over_h;
        let interior = |i: usize, j: usize| i > 0 && j > 0 && i + 1 < n && j + 1 < n;
        // adjoint of the new pressure, including its use in the ψ update
        {
            let AdjointState { u, psi_x, psi_y, total, weighted, .. } = a;
            let (u, psi_x, psi_y) = (&*u, &*psi_x, &*psi_y);
            total.par_chunks_mut(n).zip(weighted.par_chunks_mut(n)).enumerate().for_each(|(j, (rt, rw))| {
                for i in 0..n {
                    let k = j * n + i;
                    if !interior(i, j) {
                        rt[i] = 0.0;
                        rw[i] = 0.0;
                        continue;
                    }
                    let mut v = u[k];
                    if self.damped {
                        v += self.qx[k - 1] * psi_x[k - 1] - self.qx[k] * psi_x[k];
                        v += self.qy[k - n] * psi_y[k - n] - self.qy[k] * psi_y[k];
                    }
                    rt[i] = v;
                    rw[i] = self.g[k] * v;
                }
            });
        }
        let AdjointState { u, u_prev, psi_x, psi_y, total, weighted } = a;
        let (total, weighted) = (&*total, &*weighted);
        if self.damped {
            psi_x.par_chunks_mut(n).zip(psi_y.par_chunks_mut(n)).enumerate().for_each(|(j, (rx, ry))| {
                for i in 0..n {
                    let k = j * n + i;
                    if i + 1 < n && j > 0 && j + 1 < n {
                        rx[i] = self.px[k] * rx[i] + dth * (weighted[k] - weighted[k + 1]);
                    }
                    if j + 1 < n && i > 0 && i + 1 < n {
                        ry[i] = self.py[k] * ry[i] + dth * (weighted[k] - weighted[k + n]);
                    }
                }
            });
        }
        u.par_chunks_mut(n).zip(u_prev.par_chunks_mut(n)).enumerate().for_each(|(j, (ru, rp))| {
            if j == 0 || j == n - 1 {
                return;
            }
            for i in 1..n - 1 {
                let k = j * n + i;
                let cw = |m: usize| self.coef[m] * weighted[m];
                let lap = cw(k - 1) + cw(k + 1) + cw(k - n) + cw(k + n) - 4.0 * cw(k);
                let t = total[k];
                ru[i] = self.a[k] * t + rp[i] + lap;
                rp[i] = self.b[k] * t;
            }
        });
    }

    /// Discrete acoustic energy `½∫(u_t/c)² + |∇u|²`.
    ///
    /// `u_t` is the centred difference `(u_next − u_prev)/(2dt)`, so a state built by
    /// [`Propagator::init_state`] has zero kinetic energy.
    pub fn energy(&self, s: &WaveState) -> f64 {
        let mut next = s.clone();
        self.advance(&mut next, None);
        let n = self.grid.n();
        let h2 = self.grid.h() * self.grid.h();
        let inv2dt = 0.5 / self.dt;
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for k in 0..n * n {
            let v = (next.u[k] - s.u_prev[k]) * inv2dt;
            kinetic += v * v / self.c2[k];
        }
        let u = &s.u;
        for j in 0..n {
            for i in 0..n {
                let k = j * n + i;
                if i + 1 < n {
                    let d = u[k + 1] - u[k];
                    potential += d * d;
                }
                if j + 1 < n {
                    let d = u[k + n] - u[k];
                    potential += d * d;
                }
            }
        }
        0.5 * kinetic * h2 + 0.5 * potential
    }

    /// Runs `u_tt = c²Δu + s` from zero data for `sources.steps()` steps.
    pub fn run_with_sources(&self, sources: &SourceSeries) -> Result<WaveState> {
        let n = self.grid.n();
        let mut s = WaveState::zeros(n * n);
        let mut field = vec![0.0; n * n];
        for step in 0..sources.steps() {
            for (q, &node) in sources.nodes.iter().enumerate() {
                field[node] = sources.values[[step, q]];
            }
            self.advance(&mut s, Some(&field));
            for &node in &sources.nodes {
                field[node] = 0.0;
            }
            if s.steps.is_multiple_of(NAN_CHECK_INTERVAL) && !s.is_finite() {
                return Err(Error::NonFinite { step: s.steps, t: s.t });
            }
        }
        Ok(s)
    }
}

/// Time series of point sources: `values[[step, q]]` drives node `nodes[q]`.
#[derive(Clone, Debug)]
pub struct SourceSeries {
    pub nodes: Vec<usize>,
    pub values: Array2<f64>,
}

impl SourceSeries {
    pub fn steps(&self) -> usize {
        self.values.nrows()
    }
}

/// Runs the initial value problem to time `t_end`, calling `probe(t, u)` at
/// every time level including `t = 0`.
pub fn solve_forward(
    f: &Phantom,
    speed: &SpeedField,
    t_end: f64,
    pml: &PmlProfile,
    mut probe: impl FnMut(f64, &[f64]),
) -> Result<WaveState> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidArgument(format!("end time {t_end} must be positive")));
    }
    let prop = Propagator::with_cfl(speed, pml, DEFAULT_CFL)?;
    let mut s = prop.init_state(f)?;
    probe(0.0, s.u_curr());
    for _ in 0..prop.steps_for(t_end) {
        prop.step(&mut s)?;
        probe(s.t(), s.u_curr());
    }
    Ok(s)
}

/// Runs the source problem for `t_end`; the series must have one row per step.
pub fn solve_with_sources(
    sources: &SourceSeries,
    speed: &SpeedField,
    t_end: f64,
    pml: &PmlProfile,
) -> Result<WaveState> {
    let prop = Propagator::with_cfl(speed, pml, DEFAULT_CFL)?;
    let steps = prop.steps_for(t_end);
    if sources.steps() != steps || sources.values.ncols() != sources.nodes.len() {
        return Err(Error::Shape(format!(
            "source series is {}×{} for {} nodes, expected {steps} steps",
            sources.values.nrows(),
            sources.values.ncols(),
            sources.nodes.len()
        )));
    }
    if sources.nodes.iter().any(|&k| k >= prop.grid.len()) {
        return Err(Error::Shape("source node index outside the grid".into()));
    }
    prop.run_with_sources(sources)
}
