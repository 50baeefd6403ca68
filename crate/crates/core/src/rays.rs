//! Geodesics of the metric `c⁻²dx²`, their detection events on circular
//! detectors, and the visibility predictor for partial apertures.
//!
//! Rays follow the Hamiltonian system `ẋ = c²p`, `ṗ = −c∇c·|p|²` with
//! `c(x)|p| = 1`. Outside the unit disc `c ≡ 1`, so rays are straight there and
//! every crossing with a detector circle is computed in closed form.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use rayon::prelude::*;

use crate::detector::{unit, wrap_angle, DetectorMode};
use crate::error::{Error, Result};
use crate::field::{Covector, SpeedField, SpeedSpec, Vec2};
use crate::interp::catmull_rom;

pub const DEFAULT_RAY_STEP: f64 = 1e-3;
/// Crossings with `|p̂·n̂|` below `1 − PERPENDICULAR_TOL` are treated as tangential.
pub const PERPENDICULAR_TOL: f64 = 1e-6;

/// A speed `c` with its gradient.
pub trait SpeedModel: Sync {
    fn speed(&self, x: Vec2) -> f64;
    fn gradient(&self, x: Vec2) -> Vec2;
}

impl SpeedModel for SpeedSpec {
    fn speed(&self, x: Vec2) -> f64 {
        SpeedSpec::speed(self, x)
    }

    fn gradient(&self, x: Vec2) -> Vec2 {
        SpeedSpec::gradient(self, x)
    }
}

/// Bicubic Catmull–Rom interpolant of a sampled speed, `c = 1` off the grid.
#[derive(Clone, Debug)]
pub struct SampledSpeed {
    field: SpeedField,
}

impl SampledSpeed {
    pub fn new(field: &SpeedField) -> Self {
        Self { field: field.clone() }
    }

    fn eval(&self, x: Vec2) -> (f64, Vec2) {
        let grid = self.field.grid();
        let (i, fx) = grid.cell_x(x.x);
        let (j, fy) = grid.cell_y(x.y);
        let n = grid.n() as isize;
        if i < 1 || j < 1 || i + 2 >= n || j + 2 >= n {
            return (1.0, Vec2::zeros());
        }
        let (wx, dwx) = catmull_rom(fx);
        let (wy, dwy) = catmull_rom(fy);
        let c = self.field.values();
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for b in 0..4 {
            for a in 0..4 {
                let s = c[[(j + b as isize - 1) as usize, (i + a as isize - 1) as usize]];
                v += wx[a] * wy[b] * s;
                gx += dwx[a] * wy[b] * s;
                gy += wx[a] * dwy[b] * s;
            }
        }
        (v, Vec2::new(gx, gy) / grid.h())
    }
}

impl SpeedModel for SampledSpeed {
    fn speed(&self, x: Vec2) -> f64 {
        self.eval(x).0
    }

    fn gradient(&self, x: Vec2) -> Vec2 {
        self.eval(x).1
    }
}

/// Time direction of a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Sign::Plus => '+',
            Sign::Minus => '-',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayState {
    pub x: Vec2,
    pub p: Vec2,
    /// Elapsed trace time, always nonnegative.
    pub t: f64,
}

impl RayState {
    /// Unit direction of travel.
    pub fn direction(&self) -> Vec2 {
        self.p.normalize()
    }
}

fn rhs(speed: &dyn SpeedModel, x: Vec2, p: Vec2) -> (Vec2, Vec2) {
    let c = speed.speed(x);
    let g = speed.gradient(x);
    (c * c * p, -c * p.norm_squared() * g)
}

fn rk4(speed: &dyn SpeedModel, s: RayState, h: f64) -> RayState {
    let (k1x, k1p) = rhs(speed, s.x, s.p);
    let (k2x, k2p) = rhs(speed, s.x + 0.5 * h * k1x, s.p + 0.5 * h * k1p);
    let (k3x, k3p) = rhs(speed, s.x + 0.5 * h * k2x, s.p + 0.5 * h * k2p);
    let (k4x, k4p) = rhs(speed, s.x + h * k3x, s.p + h * k3p);
    RayState {
        x: s.x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        p: s.p + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
        t: s.t + h,
    }
}

/// Straight-line motion at unit speed, valid where `c ≡ 1`.
fn straight(s: &RayState, t: f64) -> RayState {
    let d = s.direction();
    RayState { x: s.x + (t - s.t) * d, p: d, t }
}

/// A traced geodesic: RK4 samples inside the unit disc, then a straight line.
#[derive(Clone, Debug)]
pub struct RayPath {
    pub start: Covector,
    pub sigma: Sign,
    /// `c(y)` at the starting point.
    pub c_start: f64,
    pub h_ray: f64,
    pub t_max: f64,
    /// RK4 states at `t = k·h_ray`, ending with the first state outside the unit disc.
    pub states: Vec<RayState>,
    /// First sampled state with `|x| ≥ 1`; `None` for a trapped ray.
    pub exit: Option<RayState>,
    speed: SpeedSnapshot,
}

/// Owned copy of the speed used for a trace, so paths can be re-evaluated later.
#[derive(Clone, Debug)]
enum SpeedSnapshot {
    Spec(SpeedSpec),
    Sampled(Box<SampledSpeed>),
}

impl RayPath {
    pub fn escaped(&self) -> bool {
        self.exit.is_some()
    }

    /// State at trace time `t`: straight continuation past the exit, otherwise a
    /// partial RK4 step from the preceding sample.
    pub fn state_at(&self, t: f64) -> Option<RayState> {
        if let Some(e) = self.exit {
            if t >= e.t {
                return Some(straight(&e, t));
            }
        }
        if t < 0.0 || t > self.t_max + 1e-12 {
            return None;
        }
        let k = ((t / self.h_ray).floor() as usize).min(self.states.len() - 1);
        let s = self.states[k];
        let dt = t - s.t;
        if dt == 0.0 {
            return Some(s);
        }
        match &self.speed {
            SpeedSnapshot::Spec(sp) => Some(rk4(sp, s, dt)),
            SpeedSnapshot::Sampled(sp) => Some(rk4(sp.as_ref(), s, dt)),
        }
    }

    /// Largest `|c(x)|p| − 1|` over the samples.
    pub fn hamiltonian_drift(&self, speed: &dyn SpeedModel) -> f64 {
        self.states.iter().map(|s| (speed.speed(s.x) * s.p.norm() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Ray tracer bound to one speed model.
pub struct Tracer<'a> {
    speed: &'a dyn SpeedModel,
    snapshot: SpeedSnapshot,
    pub h_ray: f64,
}

impl<'a> Tracer<'a> {
    pub fn analytic(spec: &'a SpeedSpec, h_ray: f64) -> Self {
        Self { speed: spec, snapshot: SpeedSnapshot::Spec(*spec), h_ray }
    }

    pub fn sampled(speed: &'a SampledSpeed, h_ray: f64) -> Self {
        Self { speed, snapshot: SpeedSnapshot::Sampled(Box::new(speed.clone())), h_ray }
    }

    pub fn speed(&self) -> &dyn SpeedModel {
        self.speed
    }

    /// Traces the geodesic from `start` in time direction `sigma` until it leaves the
    /// unit disc or `t_max` is reached.
    pub fn trace_geodesic(&self, start: &Covector, sigma: Sign, t_max: f64) -> Result<RayPath> {
        if start.y.norm() >= 1.0 {
            return Err(Error::InvalidArgument(format!("ray start {:?} is not inside the unit disc", start.y)));
        }
        if !(t_max > 0.0) || !(self.h_ray > 0.0) {
            return Err(Error::InvalidArgument("t_max and the ray step must be positive".into()));
        }
        let c_start = self.speed.speed(start.y);
        let p0 = sigma.value() * start.direction() / c_start;
        let mut s = RayState { x: start.y, p: p0, t: 0.0 };
        let mut states = vec![s];
        let mut exit = None;
        let steps = (t_max / self.h_ray).ceil() as usize;
        for k in 1..=steps {
            s = rk4(self.speed, s, self.h_ray);
            s.t = k as f64 * self.h_ray;
            states.push(s);
            if s.x.norm() >= 1.0 {
                exit = Some(s);
                break;
            }
        }
        Ok(RayPath {
            start: *start,
            sigma,
            c_start,
            h_ray: self.h_ray,
            t_max,
            states,
            exit,
            speed: self.snapshot.clone(),
        })
    }

    /// State after moving for `duration` from `x` along `dir`, straight outside the
    /// unit disc and by RK4 inside it.
    pub fn propagate(&self, x: Vec2, dir: Vec2, duration: f64) -> RayState {
        let mut s = RayState { x, p: dir.normalize() / self.speed.speed(x), t: 0.0 };
        while s.t < duration {
            if s.x.norm() >= 1.0 {
                match disc_entry(s.x, s.direction()) {
                    Some(e) if s.t + e < duration => s = straight(&s, s.t + e),
                    _ => return straight(&s, duration),
                }
            }
            loop {
                let h = self.h_ray.min(duration - s.t);
                if h <= 0.0 {
                    return s;
                }
                s = rk4(self.speed, s, h);
                if s.x.norm() >= 1.0 && s.x.dot(&s.p) > 0.0 {
                    break;
                }
            }
        }
        s
    }
}

/// Distance along `d` from `x` (outside the unit disc) to the disc boundary, if the line enters it ahead.
fn disc_entry(x: Vec2, d: Vec2) -> Option<f64> {
    let b = x.dot(&d);
    let disc = b * b - x.norm_squared() + 1.0;
    if disc <= 0.0 {
        return None;
    }
    let s = -b - disc.sqrt();
    (s > 0.0).then_some(s)
}

/// Larger root `s` of `|e + s·d| = ρ`.
fn circle_exit(e: Vec2, d: Vec2, rho: f64) -> Option<f64> {
    let b = e.dot(&d);
    let disc = b * b - e.norm_squared() + rho * rho;
    (disc >= 0.0).then(|| -b + disc.sqrt())
}

/// One perpendicular crossing of a detector circle by a geodesic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionEvent {
    pub sigma: Sign,
    /// 1 for the entering crossing, 2 for the exiting one (small mode); always 1 in large mode.
    pub branch: u8,
    /// `|t|` of the crossing.
    pub t_det: f64,
    /// Angle of the detector centre in `[−π, π)`.
    pub theta: f64,
    /// Crossing point on the detector circle.
    pub x: Vec2,
    /// Unit direction of the ray at the crossing (direction of increasing trace time).
    pub direction: Vec2,
    pub lambda: f64,
    pub tau: f64,
    pub omega: Vec2,
}

impl DetectionEvent {
    /// Signed detection time `σ·t_det`.
    pub fn signed_time(&self) -> f64 {
        self.sigma.value() * self.t_det
    }

    pub fn center(&self, mode: &DetectorMode) -> Vec2 {
        mode.center_radius() * unit(self.theta)
    }
}

/// Detection events on the straight continuation of an escaped path.
///
/// A line through the circle `|z| = R` meets the detector centred there
/// perpendicularly, twice in small mode and once (outwards) in large mode.
/// Returns an empty list when the line misses the centre circle.
pub fn detect_events(path: &RayPath, mode: &DetectorMode) -> Result<Vec<DetectionEvent>> {
    let Some(e) = path.exit else {
        return Err(Error::InvalidArgument("path has not escaped the unit disc".into()));
    };
    let d = e.direction();
    let big_r = mode.center_radius();
    let r = mode.ring_radius();
    let Some(sc) = circle_exit(e.x, d, big_r) else {
        return Ok(Vec::new());
    };
    let center = e.x + sc * d;
    let theta_v = center / big_r;
    let theta = wrap_angle(theta_v.y.atan2(theta_v.x));
    let t_center = e.t + sc;
    let scale = path.c_start * path.start.magnitude();
    let sigma = path.sigma;
    let offsets: &[(u8, f64)] = match mode {
        DetectorMode::Small { .. } => &[(1, -1.0), (2, 1.0)],
        DetectorMode::Large { .. } => &[(1, 1.0)],
    };
    let mut out = Vec::with_capacity(offsets.len());
    for &(branch, side) in offsets {
        let s = sc + side * r;
        if s < 0.0 {
            continue;
        }
        let x = e.x + s * d;
        let n_in = (big_r * theta_v - x) / r;
        let cosine = d.dot(&n_in);
        if cosine.abs() < 1.0 - PERPENDICULAR_TOL {
            continue;
        }
        let lambda = sigma.value() * cosine * scale / (2.0 * r);
        let tangential = x - x.dot(&theta_v) * theta_v;
        out.push(DetectionEvent {
            sigma,
            branch,
            t_det: t_center + side * r,
            theta,
            x,
            direction: d,
            lambda,
            tau: -sigma.value() * scale,
            omega: -2.0 * lambda * big_r * tangential,
        });
    }
    Ok(out)
}

/// All detection events of a covector, both time directions.
#[derive(Clone, Debug)]
pub struct CanonicalImage {
    pub events: Vec<DetectionEvent>,
    pub diagnostics: Vec<String>,
}

impl CanonicalImage {
    pub fn expected_count(mode: &DetectorMode) -> usize {
        match mode {
            DetectorMode::Small { .. } => 4,
            DetectorMode::Large { .. } => 2,
        }
    }
}

pub fn canonical_image(tracer: &Tracer, cv: &Covector, mode: &DetectorMode, t_max: f64) -> Result<CanonicalImage> {
    let mut events = Vec::new();
    let mut diagnostics = Vec::new();
    for sigma in [Sign::Plus, Sign::Minus] {
        let path = tracer.trace_geodesic(cv, sigma, t_max)?;
        if !path.escaped() {
            diagnostics.push(format!("σ = {}: ray trapped in the unit disc up to t = {t_max}", sigma.symbol()));
            continue;
        }
        let ev = detect_events(&path, mode)?;
        let expected = CanonicalImage::expected_count(mode) / 2;
        if ev.len() < expected {
            diagnostics.push(format!(
                "σ = {}: {} of {expected} crossings found (tangential or missed geometry)",
                sigma.symbol(),
                ev.len()
            ));
        }
        events.extend(ev);
    }
    Ok(CanonicalImage { events, diagnostics })
}

/// Partner point whose simultaneous singularity can cancel a detection at `x`.
///
/// Small mode: the antipode on the detector circle. Large mode: the reflection of `x`
/// across the diameter of the detector circle perpendicular to `θ`.
pub fn mirror_point(x: Vec2, theta: f64, mode: &DetectorMode) -> Result<Vec2> {
    let th = unit(theta);
    let center = mode.center_radius() * th;
    let r = mode.ring_radius();
    if ((x - center).norm() - r).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "point {:?} is not on the detector circle of radius {r} about {:?}",
            x, center
        )));
    }
    Ok(match mode {
        DetectorMode::Small { .. } => 2.0 * center - x,
        DetectorMode::Large { .. } => x - 2.0 * (x - th).dot(&th) * th,
    })
}

/// Direction of the ray that would hit the mirror point perpendicularly at the same time.
fn partner_direction(ev: &DetectionEvent, mirror: Vec2, mode: &DetectorMode) -> Vec2 {
    match mode {
        DetectorMode::Small { .. } => ev.direction,
        DetectorMode::Large { r } => (mirror - unit(ev.theta)) / *r,
    }
}

/// Measurement aperture `U × Γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aperture {
    /// Open arc `(a, b)`; `None` for the full circle.
    pub arc: Option<(f64, f64)>,
    /// Time interval `(u0, u1]` applied to `|t|`; negative-time events enter through
    /// the even extension of the data.
    pub times: (f64, f64),
}

impl Aperture {
    pub fn full(t_max: f64) -> Self {
        Self { arc: None, times: (0.0, t_max) }
    }

    pub fn contains_theta(&self, theta: f64) -> bool {
        match self.arc {
            None => true,
            Some((a, b)) => {
                let s = (theta - a).rem_euclid(TAU);
                s > 0.0 && s < b - a
            }
        }
    }

    pub fn contains(&self, ev: &DetectionEvent) -> bool {
        ev.t_det > self.times.0 && ev.t_det <= self.times.1 && self.contains_theta(ev.theta)
    }
}

/// Largest first-detection time over the unit disc for straight rays, scaled by `1/min c`.
///
/// Every escaping covector has an event no later than this in one of its two time
/// directions when `c ≡ 1`.
pub fn coverage_time_bound(mode: &DetectorMode, min_speed: f64) -> f64 {
    let euclid = match *mode {
        DetectorMode::Small { big_r, r } => big_r - r,
        DetectorMode::Large { r } => 1.0 + r,
    };
    euclid / min_speed.min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Visible,
    Masked,
    OutOfAperture,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Visible => "visible",
            Verdict::Masked => "masked",
            Verdict::OutOfAperture => "out_of_aperture",
        }
    }
}

#[derive(Clone, Debug)]
pub struct VisibilityEntry {
    pub covector: Covector,
    pub verdict: Verdict,
    /// In-aperture event with an unmatched partner (visible), or the first in-aperture event (masked).
    pub witness: Option<DetectionEvent>,
    /// Partner covector of the witness, traced back to `t = 0`.
    pub partner: Option<Covector>,
    pub partner_matched: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct VisibilityReport {
    pub entries: Vec<VisibilityEntry>,
}

impl VisibilityReport {
    pub fn count(&self, v: Verdict) -> usize {
        self.entries.iter().filter(|e| e.verdict == v).count()
    }
}

/// Matching tolerances for mirror partners against the wavefront sample.
#[derive(Clone, Copy, Debug)]
pub struct MatchTolerance {
    pub position: f64,
    pub angle_deg: f64,
    pub time: f64,
}

impl MatchTolerance {
    /// Position `2h`, direction 5°, time `2dt`.
    pub fn for_grid(h: f64, dt: f64) -> Self {
        Self { position: 2.0 * h, angle_deg: 5.0, time: 2.0 * dt }
    }
}

/// Spatial hash of wavefront samples for tolerance lookups.
struct WfIndex<'a> {
    wf: &'a [Covector],
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> WfIndex<'a> {
    fn new(wf: &'a [Covector], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, cv) in wf.iter().enumerate() {
            buckets.entry(Self::key(cv.y, cell)).or_default().push(k);
        }
        Self { wf, cell, buckets }
    }

    fn key(p: Vec2, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// `true` if some sample lies within `tol.position` of the segment `a`–`b` with a
    /// direction parallel to `dir` (either sign) within `tol.angle_deg`.
    fn matches_segment(&self, a: Vec2, b: Vec2, dir: Vec2, tol: &MatchTolerance) -> bool {
        let cos_tol = tol.angle_deg.to_radians().cos();
        let reach = tol.position + (b - a).norm();
        let span = (reach / self.cell).ceil() as i64 + 1;
        let mid = 0.5 * (a + b);
        let (ci, cj) = Self::key(mid, self.cell);
        for di in -span..=span {
            for dj in -span..=span {
                let Some(ids) = self.buckets.get(&(ci + di, cj + dj)) else {
                    continue;
                };
                for &k in ids {
                    let cv = &self.wf[k];
                    if segment_distance(cv.y, a, b) <= tol.position && cv.direction().dot(&dir).abs() >= cos_tol {
                        return true;
                    }
                }
            }
        }
        false
    }
}

fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let s = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + s * ab)).norm()
}

/// Partner covector of an event: the ray leaving the mirror point, traced back to `t = 0`.
pub fn mirror_partner(tracer: &Tracer, ev: &DetectionEvent, mode: &DetectorMode) -> Result<(Covector, Vec2)> {
    let mirror = mirror_point(ev.x, ev.theta, mode)?;
    let dir = partner_direction(ev, mirror, mode);
    let back = tracer.propagate(mirror, -dir, ev.t_det);
    // the partner travels opposite to the backward trace
    let forward = -back.direction();
    Ok((Covector { y: back.x, xi: forward }, forward))
}

/// Classifies each wavefront sample as visible, masked or outside the aperture.
pub fn visibility(
    tracer: &Tracer,
    wf: &[Covector],
    aperture: &Aperture,
    mode: &DetectorMode,
    tol: &MatchTolerance,
    t_max: f64,
) -> Result<VisibilityReport> {
    mode.validate()?;
    let index = WfIndex::new(wf, tol.position.max(1e-6));
    let entries = wf
        .par_iter()
        .map(|cv| -> Result<VisibilityEntry> {
            let image = canonical_image(tracer, cv, mode, t_max)?;
            let mut diagnostics = image.diagnostics;
            let mut first_masked = None;
            for ev in image.events.iter().filter(|e| aperture.contains(e)) {
                let (partner, dir) = mirror_partner(tracer, ev, mode)?;
                let a = partner.y - tol.time * dir;
                let b = partner.y + tol.time * dir;
                if !index.matches_segment(a, b, dir, tol) {
                    return Ok(VisibilityEntry {
                        covector: *cv,
                        verdict: Verdict::Visible,
                        witness: Some(*ev),
                        partner: Some(partner),
                        partner_matched: false,
                        diagnostics,
                    });
                }
                if first_masked.is_none() {
                    first_masked = Some((*ev, partner));
                }
            }
            Ok(match first_masked {
                Some((ev, partner)) => VisibilityEntry {
                    covector: *cv,
                    verdict: Verdict::Masked,
                    witness: Some(ev),
                    partner: Some(partner),
                    partner_matched: true,
                    diagnostics,
                },
                None => {
                    if image.events.is_empty() {
                        diagnostics.push("no detection events".into());
                    }
                    VisibilityEntry {
                        covector: *cv,
                        verdict: Verdict::OutOfAperture,
                        witness: None,
                        partner: None,
                        partner_matched: false,
                        diagnostics,
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VisibilityReport { entries })
}

/// Angle of a vector in `[−π, π)`.
pub fn angle_of(v: Vec2) -> f64 {
    wrap_angle(v.y.atan2(v.x))
}

/// Difference of two angles folded into `[0, π]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs().min(PI)
}
