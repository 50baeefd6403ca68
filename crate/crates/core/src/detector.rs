//! Circular integrating detectors: geometry, the measurement operator and the
//! cylinder-PDE residuals satisfied by families of ring averages.

use std::f64::consts::{PI, TAU};

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Grid2D, Phantom, SpeedField, Vec2};
use crate::interp::Interp;
use crate::wave::{AdjointState, PmlProfile, Propagator, DEFAULT_CFL};

pub const DEFAULT_N_THETA: usize = 180;
pub const DEFAULT_N_ALPHA: usize = 256;
pub const MIN_N_ALPHA: usize = 64;

/// Detector geometry. In the large-radius case the centres sit on the unit circle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetectorMode {
    /// Rings of radius `r` centred on the circle of radius `big_r`, with `big_r − r ≥ 1`.
    Small { big_r: f64, r: f64 },
    /// Rings of radius `r ≥ 2` centred on the unit circle; they enclose the unit disc.
    Large { r: f64 },
}

impl DetectorMode {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorMode::Small { .. } => "small",
            DetectorMode::Large { .. } => "large",
        }
    }

    /// Radius of the circle carrying the ring centres.
    pub fn center_radius(&self) -> f64 {
        match *self {
            DetectorMode::Small { big_r, .. } => big_r,
            DetectorMode::Large { .. } => 1.0,
        }
    }

    pub fn ring_radius(&self) -> f64 {
        match *self {
            DetectorMode::Small { r, .. } | DetectorMode::Large { r } => r,
        }
    }

    /// Largest distance from the origin reached by any ring.
    pub fn outer_extent(&self) -> f64 {
        self.center_radius() + self.ring_radius()
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DetectorMode::Small { big_r, r } => {
                if !(r > 0.0) || !big_r.is_finite() {
                    return Err(Error::InvalidDetector(format!("small mode needs r > 0, got r = {r}")));
                }
                if big_r - r < 1.0 - 1e-12 {
                    return Err(Error::InvalidDetector(format!(
                        "small mode requires R − r ≥ 1, got R = {big_r}, r = {r}"
                    )));
                }
            }
            DetectorMode::Large { r } => {
                if !(r >= 2.0) || !r.is_finite() {
                    return Err(Error::InvalidDetector(format!("large mode requires r ≥ 2, got r = {r}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ring {
    pub center: Vec2,
    pub radius: f64,
}

/// Detector geometry together with its angular sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub mode: DetectorMode,
    pub n_alpha: usize,
    pub interp: Interp,
    thetas: Vec<f64>,
    arc: Option<(f64, f64)>,
}

impl DetectorConfig {
    /// `n_theta` centres uniformly spaced on `[0, 2π)`.
    pub fn full(mode: DetectorMode, n_theta: usize, n_alpha: usize) -> Result<Self> {
        let thetas = (0..n_theta).map(|j| TAU * j as f64 / n_theta as f64).collect();
        let c = Self { mode, n_alpha, interp: Interp::default(), thetas, arc: None };
        c.validate()?;
        Ok(c)
    }

    /// `n_theta` centres at the midpoints of a uniform partition of the open arc `(a, b)`.
    pub fn arc(mode: DetectorMode, arc: (f64, f64), n_theta: usize, n_alpha: usize) -> Result<Self> {
        let (a, b) = arc;
        if !(b > a) || b - a > TAU + 1e-12 {
            return Err(Error::InvalidDetector(format!("aperture arc ({a}, {b}) must satisfy a < b ≤ a + 2π")));
        }
        let d = (b - a) / n_theta as f64;
        let thetas = (0..n_theta).map(|j| a + (j as f64 + 0.5) * d).collect();
        let c = Self { mode, n_alpha, interp: Interp::default(), thetas, arc: Some(arc) };
        c.validate()?;
        Ok(c)
    }

    pub fn with_interp(mut self, interp: Interp) -> Self {
        self.interp = interp;
        self
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn n_theta(&self) -> usize {
        self.thetas.len()
    }

    /// The declared aperture, `None` for the full circle.
    pub fn aperture(&self) -> Option<(f64, f64)> {
        self.arc
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if self.n_alpha < MIN_N_ALPHA {
            return Err(Error::InvalidDetector(format!(
                "n_alpha = {} is below the minimum of {MIN_N_ALPHA}",
                self.n_alpha
            )));
        }
        if self.thetas.is_empty() {
            return Err(Error::InvalidDetector("at least one detector centre is required".into()));
        }
        Ok(())
    }

    pub fn ring(&self, theta: f64) -> Ring {
        Ring { center: self.mode.center_radius() * unit(theta), radius: self.mode.ring_radius() }
    }

    pub fn rings(&self) -> Vec<Ring> {
        self.thetas.iter().map(|&t| self.ring(t)).collect()
    }
}

#[inline]
pub fn unit(theta: f64) -> Vec2 {
    Vec2::new(theta.cos(), theta.sin())
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// `n_alpha` equally spaced points on a circle, starting at `α = 0`.
pub fn ring_points(ring: Ring, n_alpha: usize) -> Vec<Vec2> {
    (0..n_alpha).map(|k| ring.center + ring.radius * unit(TAU * k as f64 / n_alpha as f64)).collect()
}

pub fn detector_points(config: &DetectorConfig, theta: f64) -> Vec<Vec2> {
    ring_points(config.ring(theta), config.n_alpha)
}

/// Trapezoid-rule mean of `f` over a circle.
pub fn circle_mean(f: impl Fn(Vec2) -> f64, ring: Ring, n_alpha: usize) -> f64 {
    ring_points(ring, n_alpha).into_iter().map(f).sum::<f64>() / n_alpha as f64
}

fn check_point(grid: &Grid2D, p: Vec2) -> Result<()> {
    if grid.in_interior(p) {
        Ok(())
    } else {
        Err(Error::DetectorInBand { x: p.x, y: p.y, limit: grid.interior_limit() })
    }
}

/// Discrete circular mean of a sampled field over the ring at `theta`.
pub fn ring_average(u: &Array2<f64>, grid: &Grid2D, config: &DetectorConfig, theta: f64) -> Result<f64> {
    if u.dim() != (grid.n(), grid.n()) {
        return Err(Error::Shape(format!("field is {:?}, grid is {}²", u.dim(), grid.n())));
    }
    let data = u.as_slice().expect("standard layout");
    let mut total = 0.0;
    for p in detector_points(config, theta) {
        check_point(grid, p)?;
        let mut v = 0.0;
        if !config.interp.visit(grid, p, |k, w| v += w * data[k]) {
            return Err(Error::DetectorInBand { x: p.x, y: p.y, limit: grid.interior_limit() });
        }
        total += v;
    }
    Ok(total / config.n_alpha as f64)
}

/// Sparse matrix mapping a grid field to its means over a list of rings.
///
/// Rows are stored compressed (one per ring) for the forward product and
/// compressed by node for the transpose, so both products are gathers with a
/// fixed summation order.
#[derive(Clone, Debug)]
pub struct RingOperator {
    n_nodes: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    nodes: Vec<usize>,
    node_ptr: Vec<usize>,
    node_rows: Vec<usize>,
    node_vals: Vec<f64>,
}

impl RingOperator {
    pub fn new(grid: &Grid2D, rings: &[Ring], n_alpha: usize, interp: Interp) -> Result<Self> {
        let rows: Vec<Vec<(usize, f64)>> = rings
            .par_iter()
            .map(|&ring| {
                let mut entries = Vec::with_capacity(n_alpha * interp.width() * interp.width());
                for p in ring_points(ring, n_alpha) {
                    check_point(grid, p)?;
                    let inside = interp.visit(grid, p, |k, w| entries.push((k, w)));
                    if !inside {
                        return Err(Error::DetectorInBand { x: p.x, y: p.y, limit: grid.interior_limit() });
                    }
                }
                entries.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::new();
                for (k, w) in entries {
                    match merged.last_mut() {
                        Some(last) if last.0 == k => last.1 += w,
                        _ => merged.push((k, w)),
                    }
                }
                let scale = 1.0 / n_alpha as f64;
                Ok(merged.into_iter().map(|(k, w)| (k, w * scale)).collect())
            })
            .collect::<Result<_>>()?;

        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in &rows {
            for &(k, w) in row {
                cols.push(k);
                vals.push(w);
            }
            row_ptr.push(cols.len());
        }

        let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(cols.len());
        for (q, row) in rows.iter().enumerate() {
            triples.extend(row.iter().map(|&(k, w)| (k, q, w)));
        }
        triples.sort_by_key(|t| (t.0, t.1));
        let mut nodes = Vec::new();
        let mut node_ptr = vec![0];
        let mut node_rows = Vec::with_capacity(triples.len());
        let mut node_vals = Vec::with_capacity(triples.len());
        for (idx, &(k, q, w)) in triples.iter().enumerate() {
            if idx > 0 && triples[idx - 1].0 != k {
                node_ptr.push(node_rows.len());
            }
            if idx == 0 || triples[idx - 1].0 != k {
                nodes.push(k);
            }
            node_rows.push(q);
            node_vals.push(w);
        }
        node_ptr.push(node_rows.len());
        if nodes.is_empty() {
            node_ptr = vec![0];
        }
        Ok(Self { n_nodes: grid.len(), row_ptr, cols, vals, nodes, node_ptr, node_rows, node_vals })
    }

    pub fn n_rings(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Grid nodes touched by at least one ring, ascending.
    pub fn touched_nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// `out[q] = Σ_k Q[q,k]·u[k]`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(q, o)| {
            let (a, b) = (self.row_ptr[q], self.row_ptr[q + 1]);
            *o = self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(&k, &w)| w * u[k]).sum();
        });
    }

    /// Transpose product restricted to [`RingOperator::touched_nodes`]:
    /// `out[m] = Σ_q Q[q, nodes[m]]·g[q]`.
    pub fn apply_transpose_touched(&self, g: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(m, o)| {
            let (a, b) = (self.node_ptr[m], self.node_ptr[m + 1]);
            *o = self.node_rows[a..b].iter().zip(&self.node_vals[a..b]).map(|(&q, &w)| w * g[q]).sum();
        });
    }

    /// Full transpose product into a grid-sized vector.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut touched = vec![0.0; self.nodes.len()];
        self.apply_transpose_touched(g, &mut touched);
        let mut out = vec![0.0; self.n_nodes];
        for (&k, v) in self.nodes.iter().zip(touched) {
            out[k] = v;
        }
        out
    }
}

/// Ring averages on a `(t, θ)` lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    /// `nt × n_theta`, row `i` at time `i·dt`.
    pub data: Array2<f64>,
    pub dt: f64,
    pub config: DetectorConfig,
}

impl Sinogram {
    pub fn nt(&self) -> usize {
        self.data.nrows()
    }

    pub fn thetas(&self) -> &[f64] {
        self.config.thetas()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nt()).map(|i| i as f64 * self.dt).collect()
    }
}

/// Number of time samples covering `[0, t_record]` for a given step.
pub fn sample_count(t_record: f64, dt: f64) -> usize {
    (t_record / dt - 1e-9).ceil().max(0.0) as usize + 1
}

/// Wave solve followed by ring averaging at every time level, as one linear map.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    prop: Propagator,
    rings: RingOperator,
    config: DetectorConfig,
    nt: usize,
}

impl ForwardModel {
    pub fn new(speed: &SpeedField, pml: &PmlProfile, config: &DetectorConfig, t_record: f64) -> Result<Self> {
        let prop = Propagator::with_cfl(speed, pml, DEFAULT_CFL)?;
        Self::with_propagator(prop, config, t_record)
    }

    pub fn with_propagator(prop: Propagator, config: &DetectorConfig, t_record: f64) -> Result<Self> {
        config.validate()?;
        if !(t_record > 0.0) {
            return Err(Error::InvalidArgument(format!("record length {t_record} must be positive")));
        }
        let rings = RingOperator::new(prop.grid(), &config.rings(), config.n_alpha, config.interp)?;
        let nt = sample_count(t_record, prop.dt());
        Ok(Self { prop, rings, config: config.clone(), nt })
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> f64 {
        self.prop.dt()
    }

    pub fn grid(&self) -> &Grid2D {
        self.prop.grid()
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn propagator(&self) -> &Propagator {
        &self.prop
    }

    /// Shape of the data array, `(nt, n_theta)`.
    pub fn data_shape(&self) -> (usize, usize) {
        (self.nt, self.config.n_theta())
    }

    /// Applies the measurement map to a flat grid field.
    pub fn apply(&self, f: &[f64]) -> Result<Array2<f64>> {
        if f.len() != self.grid().len() {
            return Err(Error::Shape(format!("field has {} values, grid has {}", f.len(), self.grid().len())));
        }
        let nth = self.config.n_theta();
        let mut data = Array2::zeros((self.nt, nth));
        let mut s = self.prop.init_from_slice(f);
        for i in 0..self.nt {
            if i > 0 {
                self.prop.step(&mut s)?;
            }
            let row = data.row_mut(i).into_slice().expect("row-major");
            self.rings.apply(s.u_curr(), row);
        }
        Ok(data)
    }

    /// Exact transpose of [`ForwardModel::apply`].
    pub fn apply_transpose(&self, g: &Array2<f64>) -> Result<Vec<f64>> {
        if g.dim() != self.data_shape() {
            return Err(Error::Shape(format!("data is {:?}, expected {:?}", g.dim(), self.data_shape())));
        }
        let n_nodes = self.grid().len();
        let mut a = AdjointState::zeros(n_nodes);
        let mut buf = vec![0.0; self.rings.touched_nodes().len()];
        for i in (0..self.nt).rev() {
            if i + 1 < self.nt {
                self.prop.adjoint_step(&mut a);
            }
            let row = g.row(i);
            self.rings.apply_transpose_touched(row.as_slice().expect("row-major"), &mut buf);
            for (&k, &v) in self.rings.touched_nodes().iter().zip(&buf) {
                a.add_to_current(k, v);
            }
        }
        Ok(self.prop.init_transpose(&a))
    }

    pub fn forward(&self, f: &Phantom) -> Result<Sinogram> {
        if f.grid() != self.grid() {
            return Err(Error::Shape("phantom grid differs from the model grid".into()));
        }
        let data = self.apply(f.values().as_slice().expect("standard layout"))?;
        Ok(Sinogram { data, dt: self.dt(), config: self.config.clone() })
    }

    /// `M*g` as an image on the model grid.
    pub fn adjoint(&self, g: &Array2<f64>) -> Result<Array2<f64>> {
        let n = self.grid().n();
        Ok(Array2::from_shape_vec((n, n), self.apply_transpose(g)?).expect("n×n"))
    }
}

/// Synthesizes the sinogram of `f` over `[0, t_record]`.
pub fn forward_operator(
    f: &Phantom,
    speed: &SpeedField,
    config: &DetectorConfig,
    pml: &PmlProfile,
    t_record: f64,
) -> Result<Sinogram> {
    ForwardModel::new(speed, pml, config, t_record)?.forward(f)
}

/// Which radius a [`RadialFamily`] varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// Centre radius `R` varies, ring radius fixed.
    CenterRadius,
    /// Ring radius `r` varies, centres on the unit circle.
    RingRadius,
}

/// Ring averages `P(t, θ, ρ)` for a lattice of times, angles and radii.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialFamily {
    /// Indexed `[t, θ, radius]`.
    pub data: Array3<f64>,
    pub dt: f64,
    pub thetas: Vec<f64>,
    pub radii: Vec<f64>,
    pub kind: SweepKind,
}

/// Sampling shared by the two sweeps.
#[derive(Clone, Debug)]
pub struct SweepSampling {
    pub thetas: Vec<f64>,
    pub n_alpha: usize,
    pub interp: Interp,
    pub t_record: f64,
    pub cfl: f64,
}

fn run_sweep(
    f: &Phantom,
    speed: &SpeedField,
    pml: &PmlProfile,
    rings: &[Ring],
    sampling: &SweepSampling,
    n_rad: usize,
) -> Result<(Array3<f64>, f64)> {
    let prop = Propagator::with_cfl(speed, pml, sampling.cfl)?;
    let op = RingOperator::new(f.grid(), rings, sampling.n_alpha, sampling.interp)?;
    let nt = sample_count(sampling.t_record, prop.dt());
    let nth = sampling.thetas.len();
    let mut data = Array3::zeros((nt, nth, n_rad));
    let mut s = prop.init_state(f)?;
    for i in 0..nt {
        if i > 0 {
            prop.step(&mut s)?;
        }
        let mut slab = data.index_axis_mut(ndarray::Axis(0), i);
        op.apply(s.u_curr(), slab.as_slice_mut().expect("row-major"));
    }
    Ok((data, prop.dt()))
}

/// One wave solve recording ring averages for every `(θ, R)` pair with ring radius `r`.
pub fn sweep_small_radius(
    f: &Phantom,
    speed: &SpeedField,
    pml: &PmlProfile,
    r: f64,
    big_r_values: &[f64],
    sampling: &SweepSampling,
) -> Result<RadialFamily> {
    for &big_r in big_r_values {
        DetectorMode::Small { big_r, r }.validate()?;
    }
    let rings: Vec<Ring> = sampling
        .thetas
        .iter()
        .flat_map(|&t| big_r_values.iter().map(move |&big_r| Ring { center: big_r * unit(t), radius: r }))
        .collect();
    let (data, dt) = run_sweep(f, speed, pml, &rings, sampling, big_r_values.len())?;
    Ok(RadialFamily {
        data,
        dt,
        thetas: sampling.thetas.clone(),
        radii: big_r_values.to_vec(),
        kind: SweepKind::CenterRadius,
    })
}

/// One wave solve recording ring averages for every `(θ, r)` pair, centres on the unit circle.
pub fn sweep_large_radius(
    f: &Phantom,
    speed: &SpeedField,
    pml: &PmlProfile,
    r_values: &[f64],
    sampling: &SweepSampling,
) -> Result<RadialFamily> {
    for &r in r_values {
        DetectorMode::Large { r }.validate()?;
    }
    let rings: Vec<Ring> = sampling
        .thetas
        .iter()
        .flat_map(|&t| r_values.iter().map(move |&r| Ring { center: unit(t), radius: r }))
        .collect();
    let (data, dt) = run_sweep(f, speed, pml, &rings, sampling, r_values.len())?;
    Ok(RadialFamily {
        data,
        dt,
        thetas: sampling.thetas.clone(),
        radii: r_values.to_vec(),
        kind: SweepKind::RingRadius,
    })
}

fn uniform_step(v: &[f64], what: &str) -> Result<f64> {
    let d = v[1] - v[0];
    if !(d > 0.0) || v.windows(2).any(|w| ((w[1] - w[0]) - d).abs() > 1e-9 * d.abs().max(1.0)) {
        return Err(Error::LatticeTooSmall(format!("{what} lattice must be uniform and increasing")));
    }
    Ok(d)
}

/// `true` when the angles cover the full circle with uniform spacing.
fn is_periodic(thetas: &[f64], d: f64) -> bool {
    (thetas.len() as f64 * d - TAU).abs() < 1e-9
}

/// Second difference in time with the even extension `P(−dt) = P(dt)` at `t = 0`.
#[inline]
fn ptt(p: &Array3<f64>, i: usize, j: usize, k: usize, dt2: f64) -> f64 {
    let prev = if i == 0 { p[[1, j, k]] } else { p[[i - 1, j, k]] };
    (p[[i + 1, j, k]] - 2.0 * p[[i, j, k]] + prev) / dt2
}

/// `(1/ρ)(ρ P_ρ)_ρ` by the conservative centred stencil.
#[inline]
fn radial_term(p: &Array3<f64>, i: usize, j: usize, k: usize, radii: &[f64], dr: f64) -> f64 {
    let rho = radii[k];
    let (rm, rp) = (rho - 0.5 * dr, rho + 0.5 * dr);
    (rp * (p[[i, j, k + 1]] - p[[i, j, k]]) - rm * (p[[i, j, k]] - p[[i, j, k - 1]])) / (rho * dr * dr)
}

fn residual(p: &RadialFamily, with_angle: bool) -> Result<Array3<f64>> {
    let (nt, nth, nr) = p.data.dim();
    if nt < 2 || nr < 3 || (with_angle && nth < 3) || nth == 0 {
        return Err(Error::LatticeTooSmall(format!(
            "need at least 2 times, 3 radii{}; got {nt}×{nth}×{nr}",
            if with_angle { " and 3 angles" } else { "" }
        )));
    }
    let dr = uniform_step(&p.radii, "radius")?;
    let dt2 = p.dt * p.dt;
    let (j_range, dth, periodic) = if with_angle {
        let d = uniform_step(&p.thetas, "angle")?;
        if is_periodic(&p.thetas, d) {
            (0..nth, d, true)
        } else {
            (1..nth - 1, d, false)
        }
    } else {
        (0..nth, 0.0, false)
    };
    let n_j = j_range.len();
    let mut out = Array3::zeros((nt - 1, n_j, nr - 2));
    for i in 0..nt - 1 {
        for (jj, j) in j_range.clone().enumerate() {
            for k in 1..nr - 1 {
                let mut v = ptt(&p.data, i, j, k, dt2) - radial_term(&p.data, i, j, k, &p.radii, dr);
                if with_angle {
                    let (jm, jp) = if periodic { ((j + nth - 1) % nth, (j + 1) % nth) } else { (j - 1, j + 1) };
                    let rho = p.radii[k];
                    let pth = p.data[[i, jp, k]] - 2.0 * p.data[[i, j, k]] + p.data[[i, jm, k]];
                    v -= pth / (rho * rho * dth * dth);
                }
                out[[i, jj, k - 1]] = v;
            }
        }
    }
    Ok(out)
}

/// `P_tt − (1/R)(R P_R)_R − P_θθ/R²` at interior lattice points, indexed `[t, θ, R]`.
///
/// Boundary angles are dropped unless the angles cover the full circle; the time axis
/// starts at `t = 0` using the even extension of the data.
pub fn cylinder_residual_small(p: &RadialFamily) -> Result<Array3<f64>> {
    residual(p, true)
}

/// `P_tt − (1/r)(r P_r)_r` at interior lattice points, indexed `[t, θ, r]`.
pub fn cylinder_residual_large(p: &RadialFamily) -> Result<Array3<f64>> {
    residual(p, false)
}

pub fn rms(a: &Array3<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt()
}
