//! Grids, speed fields, phantoms and edge extraction.
//!
//! All sampled arrays are `n × n` and indexed `[j, i]` with `j` along `y` and
//! `i` along `x`; node `(i, j)` sits at `(−L + i·h, −L + j·h)`.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;

/// Uniform square grid over `[−L, L]²` with an absorbing band of width `pml_width`
/// along every edge.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    half_width: f64,
    n: usize,
    h: f64,
    pml_width: f64,
}

impl Grid2D {
    pub fn new(half_width: f64, n: usize, pml_width: f64) -> Result<Self> {
        if n < 16 {
            return Err(Error::InvalidGrid(format!("n = {n} but at least 16 points per axis are required")));
        }
        if !(half_width > 1.0) || !half_width.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "domain too small: half width {half_width} must exceed 1 so that the unit disc is interior"
            )));
        }
        if !(pml_width >= 0.0) || half_width - pml_width <= 1.0 {
            return Err(Error::InvalidGrid(format!(
                "absorbing band of width {pml_width} overlaps the unit disc (half width {half_width})"
            )));
        }
        let h = 2.0 * half_width / (n - 1) as f64;
        Ok(Self { half_width, n, h, pml_width })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn pml_width(&self) -> f64 {
        self.pml_width
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of node index `i` along either axis.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h
    }

    #[inline]
    pub fn pos(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(self.coord(i), self.coord(j))
    }

    /// Position of flat node index `k = j·n + i`.
    #[inline]
    pub fn pos_of(&self, k: usize) -> Vec2 {
        self.pos(k % self.n, k / self.n)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    /// Cell containing `x` along the x axis: lower node index and fractional offset.
    #[inline]
    pub fn cell_x(&self, x: f64) -> (isize, f64) {
        let s = (x + self.half_width) / self.h;
        let i = s.floor();
        (i as isize, s - i)
    }

    #[inline]
    pub fn cell_y(&self, y: f64) -> (isize, f64) {
        self.cell_x(y)
    }

    /// Half width of the square free of absorbing layers.
    pub fn interior_limit(&self) -> f64 {
        self.half_width - self.pml_width
    }

    /// `true` when `p` lies strictly inside the band-free square.
    pub fn in_interior(&self, p: Vec2) -> bool {
        let lim = self.interior_limit();
        p.x.abs() < lim && p.y.abs() < lim
    }

    /// Builds an array by evaluating `f` at every node.
    pub fn sample(&self, f: impl Fn(Vec2) -> f64 + Sync) -> Array2<f64> {
        let n = self.n;
        let data: Vec<f64> = (0..n * n).into_par_iter().map(|k| f(self.pos_of(k))).collect();
        Array2::from_shape_vec((n, n), data).expect("n×n")
    }

    /// Mask of nodes with `|x| < radius`.
    pub fn disc_mask(&self, radius: f64) -> Vec<bool> {
        (0..self.len()).map(|k| self.pos_of(k).norm() < radius).collect()
    }
}

/// Builds a grid after checking it can host the unit disc plus an absorbing band.
pub fn make_grid(half_width: f64, n: usize, pml_width: f64) -> Result<Grid2D> {
    Grid2D::new(half_width, n, pml_width)
}

fn exp_inv(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// C^∞ transition equal to 1 for `s ≤ 0` and 0 for `s ≥ 1`, built from `exp(−1/x)`.
///
/// Symmetric about `s = 1/2`, where it takes the value 1/2.
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        let a = exp_inv(1.0 - s);
        let b = exp_inv(s);
        a / (a + b)
    }
}

/// Derivative of [`smooth_step`] with respect to `s`.
pub fn smooth_step_deriv(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let a = exp_inv(1.0 - s);
    let b = exp_inv(s);
    let da = a / ((1.0 - s) * (1.0 - s));
    let db = b / (s * s);
    // d/ds a(1−s) = −da
    (-da * b - a * db) / ((a + b) * (a + b))
}

/// Radial C^∞ cutoff: 1 on `|x| ≤ radius − taper`, 0 on `|x| ≥ radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff {
    radius: f64,
    taper: f64,
}

impl Cutoff {
    pub fn new(radius: f64, taper: f64) -> Result<Self> {
        if !(taper > 0.0 && taper < radius) {
            return Err(Error::InvalidArgument(format!(
                "cutoff needs 0 < taper < radius, got taper {taper}, radius {radius}"
            )));
        }
        Ok(Self { radius, taper })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn taper(&self) -> f64 {
        self.taper
    }

    #[inline]
    pub fn radial(&self, rho: f64) -> f64 {
        smooth_step((rho - (self.radius - self.taper)) / self.taper)
    }

    #[inline]
    pub fn radial_deriv(&self, rho: f64) -> f64 {
        smooth_step_deriv((rho - (self.radius - self.taper)) / self.taper) / self.taper
    }

    #[inline]
    pub fn value(&self, p: Vec2) -> f64 {
        self.radial(p.norm())
    }

    pub fn gradient(&self, p: Vec2) -> Vec2 {
        let rho = p.norm();
        if rho == 0.0 {
            return Vec2::zeros();
        }
        p * (self.radial_deriv(rho) / rho)
    }
}

/// The cutoff η with support in the closed unit disc: `smooth_cutoff_eta(radius, taper)`.
pub fn smooth_cutoff_eta(radius: f64, taper: f64) -> Result<Cutoff> {
    if radius > 1.0 {
        return Err(Error::InvalidArgument(format!("cutoff radius {radius} exceeds the unit disc")));
    }
    Cutoff::new(radius, taper)
}

/// Plateau radius 0.8, support radius 1.
pub const DEFAULT_ETA: Cutoff = Cutoff { radius: 1.0, taper: 0.2 };

/// Analytic description of the sound speed. Every variant equals 1 outside the unit disc.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpeedSpec {
    /// `1 + (c₀ − 1)·η(x)`: constant `c₀` on the plateau of η.
    Constant(f64),
    /// `1 + 0.3·sin(8x)·cos(5y)·η(x, y)`.
    PaperDefault,
    /// `1 + a·exp(−|x|²/(2σ²))·η(x)`.
    RadialBump { amplitude: f64, sigma: f64 },
}

impl SpeedSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SpeedSpec::Constant(c0) if !(c0 > 0.0 && c0.is_finite()) => {
                Err(Error::InvalidSpeed(format!("constant speed {c0} must be positive")))
            }
            SpeedSpec::RadialBump { amplitude, sigma } if !(amplitude > -1.0) || !(sigma > 0.0) => {
                Err(Error::InvalidSpeed(format!(
                    "radial bump amplitude {amplitude} (needs > −1) / sigma {sigma} (needs > 0) gives min c ≤ 0"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn speed(&self, p: Vec2) -> f64 {
        let eta = DEFAULT_ETA.value(p);
        match *self {
            SpeedSpec::Constant(c0) => 1.0 + (c0 - 1.0) * eta,
            SpeedSpec::PaperDefault => 1.0 + 0.3 * (8.0 * p.x).sin() * (5.0 * p.y).cos() * eta,
            SpeedSpec::RadialBump { amplitude, sigma } => {
                1.0 + amplitude * (-p.norm_squared() / (2.0 * sigma * sigma)).exp() * eta
            }
        }
    }

    pub fn gradient(&self, p: Vec2) -> Vec2 {
        let eta = DEFAULT_ETA.value(p);
        let deta = DEFAULT_ETA.gradient(p);
        match *self {
            SpeedSpec::Constant(c0) => deta * (c0 - 1.0),
            SpeedSpec::PaperDefault => {
                let (s8, c8) = (8.0 * p.x).sin_cos();
                let (s5, c5) = (5.0 * p.y).sin_cos();
                let g = s8 * c5;
                Vec2::new(0.3 * (8.0 * c8 * c5 * eta + g * deta.x), 0.3 * (-5.0 * s8 * s5 * eta + g * deta.y))
            }
            SpeedSpec::RadialBump { amplitude, sigma } => {
                let s2 = sigma * sigma;
                let e = (-p.norm_squared() / (2.0 * s2)).exp();
                (p * (-eta / s2) + deta) * (amplitude * e)
            }
        }
    }

    /// Upper bound on `c` over the plane.
    pub fn max_speed_bound(&self) -> f64 {
        match *self {
            SpeedSpec::Constant(c0) => c0.max(1.0),
            SpeedSpec::PaperDefault => 1.3,
            SpeedSpec::RadialBump { amplitude, .. } => 1.0 + amplitude.max(0.0),
        }
    }

    pub fn min_speed_bound(&self) -> f64 {
        match *self {
            SpeedSpec::Constant(c0) => c0.min(1.0),
            SpeedSpec::PaperDefault => 0.7,
            SpeedSpec::RadialBump { amplitude, .. } => 1.0 + amplitude.min(0.0),
        }
    }
}

/// Speed sampled on a grid.
#[derive(Clone, Debug)]
pub struct SpeedField {
    grid: Grid2D,
    c: Array2<f64>,
    spec: Option<SpeedSpec>,
}

impl SpeedField {
    /// Wraps sampled speeds after checking positivity and `c = 1` outside the unit disc.
    pub fn from_array(grid: Grid2D, c: Array2<f64>) -> Result<Self> {
        let n = grid.n();
        if c.dim() != (n, n) {
            return Err(Error::Shape(format!("speed array {:?} does not match grid {n}×{n}", c.dim())));
        }
        for ((j, i), &v) in c.indexed_iter() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpeed(format!("c = {v} at node ({i}, {j})")));
            }
            if grid.pos(i, j).norm() >= 1.0 && (v - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpeed(format!("c = {v} ≠ 1 at node ({i}, {j}) outside the unit disc")));
            }
        }
        Ok(Self { grid, c, spec: None })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.c
    }

    /// The analytic description, when the field was sampled from one.
    pub fn spec(&self) -> Option<&SpeedSpec> {
        self.spec.as_ref()
    }

    pub fn max(&self) -> f64 {
        self.c.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.c.iter().cloned().fold(f64::MAX, f64::min)
    }

    /// Largest magnitude of the 5-point Laplacian of `c` over interior nodes.
    pub fn max_laplacian(&self) -> f64 {
        let n = self.grid.n();
        let h2 = self.grid.h() * self.grid.h();
        let mut m: f64 = 0.0;
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let l = self.c[[j, i - 1]] + self.c[[j, i + 1]] + self.c[[j - 1, i]] + self.c[[j + 1, i]]
                    - 4.0 * self.c[[j, i]];
                m = m.max((l / h2).abs());
            }
        }
        m
    }
}

pub fn sample_speed(spec: &SpeedSpec, grid: &Grid2D) -> Result<SpeedField> {
    spec.validate()?;
    let c = grid.sample(|p| spec.speed(p));
    let mut field = SpeedField::from_array(grid.clone(), c)?;
    field.spec = Some(*spec);
    Ok(field)
}

/// One additive building block of a phantom.
#[derive(Clone, Debug, PartialEq)]
pub enum Component {
    /// `amp·exp(−|x−c|²/(2σ²))`, smoothly truncated between 3σ and 4σ.
    Gaussian { center: Vec2, sigma: f64, amp: f64 },
    /// `amp` on `|x−c| ≤ radius`, falling smoothly to 0 at `radius + taper`.
    SmoothedDisc { center: Vec2, radius: f64, taper: f64, amp: f64 },
}

impl Component {
    /// Radius around the center beyond which the component vanishes exactly.
    pub fn extent(&self) -> f64 {
        match *self {
            Component::Gaussian { sigma, .. } => 4.0 * sigma,
            Component::SmoothedDisc { radius, taper, .. } => radius + taper,
        }
    }

    pub fn center(&self) -> Vec2 {
        match *self {
            Component::Gaussian { center, .. } | Component::SmoothedDisc { center, .. } => center,
        }
    }

    fn validate(&self, margin: f64) -> Result<()> {
        let ok = match *self {
            Component::Gaussian { sigma, amp, .. } => sigma > 0.0 && amp.is_finite(),
            Component::SmoothedDisc { radius, taper, amp, .. } => radius >= 0.0 && taper > 0.0 && amp.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidPhantom(format!("bad parameters in {self:?}")));
        }
        let reach = self.center().norm() + self.extent();
        if reach > 1.0 - margin {
            return Err(Error::InvalidPhantom(format!(
                "support of {self:?} reaches |x| = {reach:.4}, beyond 1 − margin = {:.4}",
                1.0 - margin
            )));
        }
        Ok(())
    }

    pub fn value(&self, p: Vec2) -> f64 {
        match *self {
            Component::Gaussian { center, sigma, amp } => {
                let rho = (p - center).norm();
                if rho >= 4.0 * sigma {
                    return 0.0;
                }
                amp * (-rho * rho / (2.0 * sigma * sigma)).exp() * smooth_step((rho - 3.0 * sigma) / sigma)
            }
            Component::SmoothedDisc { center, radius, taper, amp } => {
                amp * smooth_step(((p - center).norm() - radius) / taper)
            }
        }
    }
}

/// Sum of components, plus the clearance kept from the unit circle.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub components: Vec<Component>,
    pub margin: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { components: Vec::new(), margin: DEFAULT_MARGIN }
    }
}

impl PhantomSpec {
    pub fn new(components: Vec<Component>) -> Self {
        Self { components, margin: DEFAULT_MARGIN }
    }

    pub fn value(&self, p: Vec2) -> f64 {
        self.components.iter().map(|c| c.value(p)).sum()
    }
}

pub const DEFAULT_MARGIN: f64 = 0.05;

/// Initial pressure sampled on a grid, vanishing on `|x| ≥ 1 − margin`.
#[derive(Clone, Debug)]
pub struct Phantom {
    grid: Grid2D,
    f: Array2<f64>,
    margin: f64,
}

impl Phantom {
    pub fn from_array(grid: Grid2D, f: Array2<f64>, margin: f64) -> Result<Self> {
        let n = grid.n();
        if f.dim() != (n, n) {
            return Err(Error::Shape(format!("phantom array {:?} does not match grid {n}×{n}", f.dim())));
        }
        if !(margin > 0.0 && margin < 1.0) {
            return Err(Error::InvalidPhantom(format!("margin {margin} must lie in (0, 1)")));
        }
        for ((j, i), &v) in f.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::InvalidPhantom(format!("non-finite value at node ({i}, {j})")));
            }
            if v != 0.0 && grid.pos(i, j).norm() >= 1.0 - margin {
                return Err(Error::InvalidPhantom(format!(
                    "nonzero value {v:.3e} at node ({i}, {j}) with |x| ≥ {}",
                    1.0 - margin
                )));
            }
        }
        Ok(Self { grid, f, margin })
    }

    /// Zeroes everything outside `|x| < 1 − margin` and wraps the result.
    pub fn projected(grid: Grid2D, mut f: Array2<f64>, margin: f64) -> Result<Self> {
        let r = 1.0 - margin;
        for ((j, i), v) in f.indexed_iter_mut() {
            if grid.pos(i, j).norm() >= r {
                *v = 0.0;
            }
        }
        Self::from_array(grid, f, margin)
    }

    pub fn zeros(grid: Grid2D) -> Self {
        let n = grid.n();
        Self { grid, f: Array2::zeros((n, n)), margin: DEFAULT_MARGIN }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.f
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn into_values(self) -> Array2<f64> {
        self.f
    }

    pub fn norm(&self) -> f64 {
        self.f.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Central-difference gradient at an interior node.
    pub fn gradient_at(&self, i: usize, j: usize) -> Vec2 {
        central_gradient(&self.f, self.grid.h(), i, j)
    }
}

pub(crate) fn central_gradient(f: &Array2<f64>, h: f64, i: usize, j: usize) -> Vec2 {
    Vec2::new((f[[j, i + 1]] - f[[j, i - 1]]) / (2.0 * h), (f[[j + 1, i]] - f[[j - 1, i]]) / (2.0 * h))
}

pub fn make_phantom(spec: &PhantomSpec, grid: &Grid2D) -> Result<Phantom> {
    for c in &spec.components {
        c.validate(spec.margin)?;
    }
    let f = grid.sample(|p| spec.value(p));
    Phantom::from_array(grid.clone(), f, spec.margin)
}

/// A point of phase space: position `y` and covector `xi` (its length is the frequency scale).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covector {
    pub y: Vec2,
    pub xi: Vec2,
}

impl Covector {
    pub fn new(y: Vec2, xi: Vec2) -> Result<Self> {
        if !(xi.norm() > 0.0) {
            return Err(Error::InvalidArgument("covector direction must be nonzero".into()));
        }
        if !(y.norm() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "covector base point |y| = {} is not inside the unit disc",
                y.norm()
            )));
        }
        Ok(Self { y, xi })
    }

    pub fn magnitude(&self) -> f64 {
        self.xi.norm()
    }

    pub fn direction(&self) -> Vec2 {
        self.xi / self.xi.norm()
    }
}

/// Strong-gradient samples of `f` with their conormal directions.
///
/// Every node with `|∇f| ≥ threshold·max|∇f|` contributes two unit covectors,
/// `(y, ∇f/|∇f|)` and `(y, −∇f/|∇f|)`.
pub fn phantom_edges(p: &Phantom, threshold: f64) -> Result<Vec<Covector>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("edge threshold {threshold} must lie in (0, 1)")));
    }
    let n = p.grid.n();
    let mut grads = Vec::new();
    let mut gmax: f64 = 0.0;
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let g = p.gradient_at(i, j);
            let m = g.norm();
            if m > 0.0 {
                gmax = gmax.max(m);
                grads.push((i, j, g, m));
            }
        }
    }
    if gmax == 0.0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, j, g, m) in grads {
        if m >= threshold * gmax {
            let y = p.grid.pos(i, j);
            let d = g / m;
            out.push(Covector { y, xi: d });
            out.push(Covector { y, xi: -d });
        }
    }
    Ok(out)
}
