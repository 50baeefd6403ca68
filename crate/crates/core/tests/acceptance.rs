//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::time::Instant;

use circtat_core::detector::{
    cylinder_residual_large, cylinder_residual_small, rms, sweep_large_radius, sweep_small_radius, DetectorConfig,
    DetectorMode, ForwardModel, SweepSampling,
};
use circtat_core::rays::{
    canonical_image, coverage_time_bound, visibility, Aperture, MatchTolerance, Sign, Tracer, Verdict,
};
use circtat_core::recon::{
    angular_taper, cg_normal, data_weights, dot, injectivity_report, landweber, relative_error, time_cutoff_chi,
    ReconOptions, WeightedProblem,
};
use circtat_core::wave::{pml_profile, PmlProfile, Propagator};
use circtat_core::{
    make_grid, make_phantom, phantom_edges, sample_speed, Component, Covector, Grid2D, Interp, Phantom, PhantomSpec,
    SpeedSpec, Vec2,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ADJOINT_TOL: f64 = 1e-10;
const ADJOINT_PAIRS: u64 = 5;
const ORDER_RATIO: (f64, f64) = (3.2, 4.8);
const CROSS_RATIO_MAX: f64 = 1.5;
const RECON_ERROR: f64 = 0.15;
const LANDWEBER_ITERS: usize = 50;
const CG_ITERS: usize = 15;
const PARTIAL_FACTOR: f64 = 2.0;
const CENTER_TOL: f64 = 1e-6;
const LAMBDA_TOL: f64 = 1e-6;
const STRAIGHT_TOL: f64 = 1e-8;
const HAMILTONIAN_TOL: f64 = 1e-6;
const RK4_FACTOR: f64 = 12.0;
const SUPPORT_TOL: f64 = 1e-8;
const ENERGY_DRIFT: f64 = 1e-3;
const PML_REFLECTION: f64 = 1e-3;

type Outcome = circtat_core::Result<(bool, String)>;
type Check = (u32, &'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 10] = [
        (1, "adjoint identity", adjoint_identity),
        (2, "small-radius cylinder residual order", small_residual_order),
        (3, "large-radius cylinder residual order", large_residual_order),
        (4, "full-data reconstruction", full_data_reconstruction),
        (5, "partial-data consistency", partial_data_consistency),
        (6, "canonical relation structure", canonical_structure),
        (7, "ray integrator", ray_integrator),
        (8, "wave solver physics", wave_physics),
        (9, "injectivity proxy", injectivity_proxy),
        (10, "visibility coverage", visibility_coverage),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let t0 = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = t0.elapsed().as_secs_f64();
        println!("criterion {id:>2} {}: {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gaussian(x: f64, y: f64, sigma: f64) -> Component {
    Component::Gaussian { center: Vec2::new(x, y), sigma, amp: 1.0 }
}

fn adjoint_identity() -> Outcome {
    let g = make_grid(4.0, 64, 0.5)?;
    let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
    let pml = PmlProfile::for_grid(&g)?;
    let mask = g.disc_mask(0.95);
    let mut worst: f64 = 0.0;
    for mode in [DetectorMode::Small { big_r: 2.0, r: 0.8 }, DetectorMode::Large { r: 2.0 }] {
        let cfg = DetectorConfig::full(mode, 90, 128)?;
        let model = ForwardModel::new(&c, &pml, &cfg, 4.0)?;
        for seed in 0..ADJOINT_PAIRS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<f64> = mask.iter().map(|&m| if m { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
            let data = ndarray::Array2::from_shape_fn(model.data_shape(), |_| rng.random_range(-1.0..1.0));
            let mf = model.apply(&f)?;
            let mtg = model.apply_transpose(&data)?;
            let lhs = dot(mf.as_slice().unwrap(), data.as_slice().unwrap());
            let rhs = dot(&f, &mtg);
            let scale = dot(mf.as_slice().unwrap(), mf.as_slice().unwrap()).sqrt()
                * dot(data.as_slice().unwrap(), data.as_slice().unwrap()).sqrt();
            worst = worst.max((lhs - rhs).abs() / scale);
        }
    }
    Ok((worst <= ADJOINT_TOL, format!("worst relative gap {worst:.2e} (tol {ADJOINT_TOL:.0e})")))
}

/// RMS residual at three refinement levels of the radial sweep; the cross-check applies
/// the small-radius stencil to large-radius data.
fn residual_levels(large: bool) -> circtat_core::Result<(Vec<f64>, Vec<f64>)> {
    let spec = PhantomSpec::new(vec![gaussian(0.1, 0.05, 0.2)]);
    let (mut own, mut cross) = (Vec::new(), Vec::new());
    for level in 0..3 {
        let s = (1u32 << level) as f64;
        let g = make_grid(4.0, 192 * (1 << level) + 1, 0.5)?;
        let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
        let f = make_phantom(&spec, &g)?;
        let pml = PmlProfile::for_grid(&g)?;
        let dth = 0.05 / s;
        let m = (0.2 / dth).round() as i32;
        let sampling = SweepSampling {
            thetas: (-m..=m).map(|k| k as f64 * dth).collect(),
            n_alpha: 128 << level,
            interp: Interp::Cubic,
            t_record: 3.0,
            cfl: 0.5,
        };
        let dr = 0.1 / s;
        let radii = [2.1 - dr, 2.1, 2.1 + dr];
        if large {
            let fam = sweep_large_radius(&f, &c, &pml, &radii, &sampling)?;
            own.push(rms(&cylinder_residual_large(&fam)?));
            cross.push(rms(&cylinder_residual_small(&fam)?));
        } else {
            let fam = sweep_small_radius(&f, &c, &pml, 0.8, &radii, &sampling)?;
            own.push(rms(&cylinder_residual_small(&fam)?));
        }
    }
    Ok((own, cross))
}

fn in_order_band(r: f64) -> bool {
    r >= ORDER_RATIO.0 && r <= ORDER_RATIO.1
}

fn small_residual_order() -> Outcome {
    let (e, _) = residual_levels(false)?;
    let (r1, r2) = (e[0] / e[1], e[1] / e[2]);
    Ok((
        in_order_band(r1) && in_order_band(r2),
        format!("rms {:.3e} {:.3e} {:.3e}, ratios {r1:.3} {r2:.3} (band {:?})", e[0], e[1], e[2], ORDER_RATIO),
    ))
}

fn large_residual_order() -> Outcome {
    let (e, x) = residual_levels(true)?;
    let (r1, r2) = (e[0] / e[1], e[1] / e[2]);
    // the wrong stencil converges to a nonzero limit, so its finest ratio stays near 1
    let cross = x[1] / x[2];
    Ok((
        in_order_band(r1) && in_order_band(r2) && cross <= CROSS_RATIO_MAX,
        format!(
            "ratios {r1:.3} {r2:.3} (band {:?}); wrong-stencil rms {:.3e} {:.3e} {:.3e}, finest ratio {cross:.3} (max {CROSS_RATIO_MAX})",
            ORDER_RATIO, x[0], x[1], x[2]
        ),
    ))
}

fn reconstruction_phantom(g: &Grid2D) -> circtat_core::Result<Phantom> {
    make_phantom(
        &PhantomSpec::new(vec![
            Component::SmoothedDisc { center: Vec2::new(-0.2, 0.1), radius: 0.45, taper: 0.25, amp: 1.0 },
            Component::Gaussian { center: Vec2::new(0.35, -0.3), sigma: 0.12, amp: 0.8 },
        ]),
        g,
    )
}

fn full_data_reconstruction() -> Outcome {
    let g = make_grid(3.75, 129, 0.5)?;
    let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
    let pml = PmlProfile::for_grid(&g)?;
    let f = reconstruction_phantom(&g)?;
    let cfg = DetectorConfig::full(DetectorMode::Large { r: 2.0 }, 180, 256)?;
    let model = ForwardModel::new(&c, &pml, &cfg, 5.0)?;
    let s = model.forward(&f)?;
    let chi = time_cutoff_chi(4.5, 5.0, model.nt(), model.dt())?;
    let w = data_weights(&chi, &angular_taper(cfg.thetas(), None, 0.0));
    let problem = WeightedProblem::new(&model, &w, 0.05)?;
    let lw = landweber(&problem, &s.data, &ReconOptions { iters: LANDWEBER_ITERS, ..Default::default() })?;
    let cg = cg_normal(&problem, &s.data, &ReconOptions { iters: CG_ITERS, ..Default::default() })?;
    let (e_lw, e_cg) = (relative_error(&lw.estimate, &f), relative_error(&cg.estimate, &f));
    let monotone = lw.residual_history.windows(2).all(|w| w[1] <= w[0]);
    Ok((
        (e_lw <= RECON_ERROR || e_cg <= RECON_ERROR) && monotone,
        format!(
            "Landweber-{LANDWEBER_ITERS} error {e_lw:.4}, CG-{CG_ITERS} error {e_cg:.4} (tol {RECON_ERROR}), Landweber residual monotone: {monotone}"
        ),
    ))
}

fn local_gradient_energy(p: &Phantom, y: Vec2, radius: f64) -> f64 {
    let g = p.grid();
    let n = g.n();
    let mut e = 0.0;
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            if (g.pos(i, j) - y).norm() <= radius {
                e += p.gradient_at(i, j).norm_squared();
            }
        }
    }
    e
}

fn partial_data_consistency() -> Outcome {
    let spd = SpeedSpec::PaperDefault;
    let g = make_grid(3.4, 129, 0.5)?;
    let c = sample_speed(&spd, &g)?;
    let pml = PmlProfile::for_grid(&g)?;
    let f = make_phantom(
        &PhantomSpec::new(vec![Component::SmoothedDisc { center: Vec2::zeros(), radius: 0.6, taper: 0.15, amp: 1.0 }]),
        &g,
    )?;
    let mode = DetectorMode::Small { big_r: 2.0, r: 0.8 };
    let arc = (-FRAC_PI_2, 0.0);
    let t_record = 5.0;
    let cfg = DetectorConfig::arc(mode, arc, 90, 256)?;
    let model = ForwardModel::new(&c, &pml, &cfg, t_record)?;
    let s = model.forward(&f)?;
    let chi = time_cutoff_chi(4.5, t_record, model.nt(), model.dt())?;
    let w = data_weights(&chi, &angular_taper(cfg.thetas(), Some(arc), 0.1));
    let problem = WeightedProblem::new(&model, &w, 0.05)?;
    let est = landweber(&problem, &s.data, &ReconOptions { iters: LANDWEBER_ITERS, ..Default::default() })?.estimate;

    let wf = phantom_edges(&f, 0.5)?;
    let tracer = Tracer::analytic(&spd, 1e-3);
    let aperture = Aperture { arc: Some(arc), times: (0.0, t_record) };
    let report = visibility(&tracer, &wf, &aperture, &mode, &MatchTolerance::for_grid(g.h(), model.dt()), 8.0)?;
    let (mut vis, mut invis) = (Vec::new(), Vec::new());
    // edge samples come in ±ξ pairs at the same node
    for pair in report.entries.chunks(2) {
        let y = pair[0].covector.y;
        let ratio = local_gradient_energy(&est, y, 2.0 * g.h()) / local_gradient_energy(&f, y, 2.0 * g.h());
        if pair.iter().any(|e| e.verdict == Verdict::Visible) {
            vis.push(ratio);
        } else {
            invis.push(ratio);
        }
    }
    if vis.is_empty() || invis.is_empty() {
        return Ok((false, format!("{} visible, {} invisible edges", vis.len(), invis.len())));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mv, mi) = (mean(&vis), mean(&invis));
    Ok((
        mv >= PARTIAL_FACTOR * mi,
        format!(
            "recovery visible {mv:.3} ({} edges), invisible {mi:.3} ({} edges), factor {:.2} (min {PARTIAL_FACTOR})",
            vis.len(),
            invis.len(),
            mv / mi
        ),
    ))
}

fn random_covectors(n: usize, seed: u64) -> Vec<Covector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rho = 0.9 * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..TAU);
            let a = rng.random_range(0.0..TAU);
            let mag = rng.random_range(0.5..3.0);
            Covector { y: rho * Vec2::new(phi.cos(), phi.sin()), xi: mag * Vec2::new(a.cos(), a.sin()) }
        })
        .collect()
}

fn canonical_structure() -> Outcome {
    let one = SpeedSpec::Constant(1.0);
    let tracer = Tracer::analytic(&one, 1e-3);
    let small = DetectorMode::Small { big_r: 2.0, r: 0.8 };
    let large = DetectorMode::Large { r: 2.0 };
    let mut bad_counts = 0;
    let (mut center_err, mut lambda_err): (f64, f64) = (0.0, 0.0);
    let cvs = random_covectors(100, 7);
    for cv in &cvs {
        for (mode, expected) in [(small, 4), (large, 2)] {
            let img = canonical_image(&tracer, cv, &mode, 6.0)?;
            if img.events.len() != expected {
                bad_counts += 1;
            }
            let r = mode.ring_radius();
            for ev in &img.events {
                lambda_err = lambda_err.max((ev.lambda.abs() - cv.magnitude() / (2.0 * r)).abs());
                if let DetectorMode::Small { big_r, .. } = mode {
                    let s = if ev.branch == 1 { ev.t_det + r } else { ev.t_det - r };
                    let gamma = cv.y + ev.sigma.value() * s * cv.direction();
                    let center = big_r * Vec2::new(ev.theta.cos(), ev.theta.sin());
                    center_err = center_err.max((gamma - center).norm());
                }
            }
        }
    }
    Ok((
        bad_counts == 0 && center_err <= CENTER_TOL && lambda_err <= LAMBDA_TOL,
        format!(
            "{} covectors, wrong event counts {bad_counts}, centre passage error {center_err:.2e}, λ error {lambda_err:.2e}",
            cvs.len()
        ),
    ))
}

fn ray_integrator() -> Outcome {
    let one = SpeedSpec::Constant(1.0);
    let line = Tracer::analytic(&one, 1e-3).trace_geodesic(
        &Covector { y: Vec2::zeros(), xi: Vec2::new(1.0, 0.0) },
        Sign::Plus,
        4.0,
    )?;
    let mut straight: f64 = 0.0;
    for k in 0..=400 {
        let t = k as f64 * 0.01;
        let s = line.state_at(t).expect("within trace");
        straight = straight.max((s.x - Vec2::new(t, 0.0)).norm());
    }

    let spd = SpeedSpec::PaperDefault;
    let tracer = Tracer::analytic(&spd, 1e-3);
    let mut drift: f64 = 0.0;
    for cv in random_covectors(100, 11) {
        for sigma in [Sign::Plus, Sign::Minus] {
            drift = drift.max(tracer.trace_geodesic(&cv, sigma, 4.0)?.hamiltonian_drift(&spd));
        }
    }

    let start = Covector { y: Vec2::new(-0.3, 0.2), xi: Vec2::new(1.0, 0.4) };
    let t_end = 0.8;
    let endpoint = |h: f64| -> circtat_core::Result<Vec2> {
        let path = Tracer::analytic(&spd, h).trace_geodesic(&start, Sign::Plus, t_end)?;
        Ok(path.states.last().expect("nonempty").x)
    };
    let reference = endpoint(0.04 / 64.0)?;
    let errs: Vec<f64> =
        [0.04, 0.02, 0.01].iter().map(|&h| endpoint(h).map(|x| (x - reference).norm())).collect::<Result<_, _>>()?;
    let (f1, f2) = (errs[0] / errs[1], errs[1] / errs[2]);
    Ok((
        straight <= STRAIGHT_TOL && drift <= HAMILTONIAN_TOL && f1 >= RK4_FACTOR && f2 >= RK4_FACTOR,
        format!(
            "straight-line deviation {straight:.2e}, Hamiltonian drift {drift:.2e}, RK4 error factors {f1:.1} {f2:.1} (min {RK4_FACTOR})"
        ),
    ))
}

/// Largest mass fraction `Σu²` outside `B_{1+t·max c+3h}` over a solve.
fn support_leak() -> circtat_core::Result<f64> {
    let g = make_grid(4.0, 257, 0.5)?;
    let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
    let f = make_phantom(&PhantomSpec::new(vec![gaussian(0.2, -0.1, 0.15)]), &g)?;
    let prop = Propagator::with_cfl(&c, &PmlProfile::for_grid(&g)?, 0.5)?;
    let mut s = prop.init_state(&f)?;
    let mut worst: f64 = 0.0;
    for _ in 0..prop.steps_for(1.5) {
        prop.step(&mut s)?;
        let radius = 1.0 + s.t() * c.max() + 3.0 * g.h();
        let (mut outside, mut total) = (0.0, 0.0);
        for (k, &u) in s.u_curr().iter().enumerate() {
            total += u * u;
            if g.pos_of(k).norm() > radius {
                outside += u * u;
            }
        }
        worst = worst.max(outside / total);
    }
    Ok(worst)
}

fn energy_drift() -> circtat_core::Result<f64> {
    let g = make_grid(2.0, 257, 0.0)?;
    let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
    let f = make_phantom(&PhantomSpec::new(vec![gaussian(0.1, 0.2, 0.15)]), &g)?;
    let prop = Propagator::with_cfl(&c, &PmlProfile::none(&g), 0.5)?;
    let mut s = prop.init_state(&f)?;
    let e0 = prop.energy(&s);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        prop.step(&mut s)?;
        worst = worst.max((prop.energy(&s) - e0).abs() / e0);
    }
    Ok(worst)
}

/// Energy of the difference to a reflection-free reference on a larger grid, measured
/// in the band-free square, relative to the initial energy.
fn pml_reflection() -> circtat_core::Result<f64> {
    let width = 0.5;
    let n = 161;
    let g = make_grid(2.0 + width, n, width)?;
    let h = g.h();
    let t_end = 6.0;
    let nb = n + 2 * ((t_end + 0.5) / h).ceil() as usize;
    let gb = make_grid(g.half_width() + (nb - n) as f64 / 2.0 * h, nb, 0.0)?;
    let spec = PhantomSpec::new(vec![gaussian(0.3, 0.2, 0.1)]);
    let one = SpeedSpec::Constant(1.0);
    let dt = 0.5 * h / std::f64::consts::SQRT_2;
    let p = Propagator::new(
        &sample_speed(&one, &g)?,
        &pml_profile(&g, width, circtat_core::wave::default_sigma_max(width, 2), 2)?,
        dt,
    )?;
    let pb = Propagator::new(&sample_speed(&one, &gb)?, &PmlProfile::none(&gb), dt)?;
    let mut s = p.init_state(&make_phantom(&spec, &g)?)?;
    let mut sb = pb.init_state(&make_phantom(&spec, &gb)?)?;
    let e0 = p.energy(&s);
    let off = (nb - n) / 2;
    let diff = |u: &[f64], ub: &[f64]| -> Vec<f64> {
        (0..n * n).map(|k| u[k] - ub[(k / n + off) * nb + k % n + off]).collect()
    };
    let lim = g.interior_limit();
    let energy = |prev: &[f64], cur: &[f64], next: &[f64]| -> f64 {
        let mut e = 0.0;
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let x = g.pos(i, j);
                if x.x.abs() >= lim || x.y.abs() >= lim {
                    continue;
                }
                let k = j * n + i;
                let v = (next[k] - prev[k]) / (2.0 * dt);
                e += 0.5 * v * v * h * h + 0.5 * ((cur[k + 1] - cur[k]).powi(2) + (cur[k + n] - cur[k]).powi(2));
            }
        }
        e
    };
    let mut prev = vec![0.0; n * n];
    let mut cur = diff(s.u_curr(), sb.u_curr());
    let mut worst: f64 = 0.0;
    for k in 0..(t_end / dt) as usize {
        p.step(&mut s)?;
        pb.step(&mut sb)?;
        let next = diff(s.u_curr(), sb.u_curr());
        if k % 10 == 0 {
            worst = worst.max(energy(&prev, &cur, &next) / e0);
        }
        prev = cur;
        cur = next;
    }
    Ok(worst)
}

fn wave_physics() -> Outcome {
    let leak = support_leak()?;
    let drift = energy_drift()?;
    let refl = pml_reflection()?;
    Ok((
        leak <= SUPPORT_TOL && drift <= ENERGY_DRIFT && refl <= PML_REFLECTION,
        format!(
            "mass outside support bound {leak:.2e} (tol {SUPPORT_TOL:.0e}), energy drift {drift:.2e} (tol {ENERGY_DRIFT:.0e}), PML reflection {refl:.2e} (tol {PML_REFLECTION:.0e})"
        ),
    ))
}

fn injectivity_proxy() -> Outcome {
    let g = make_grid(3.5, 32, 0.5)?;
    let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
    let pml = PmlProfile::for_grid(&g)?;
    let cfg = DetectorConfig::full(DetectorMode::Small { big_r: 2.0, r: 0.8 }, 180, 256)?;
    let model = ForwardModel::new(&c, &pml, &cfg, 6.0)?;
    let problem = WeightedProblem::unweighted(&model, 0.05)?;
    let rep = injectivity_report(&problem, 0.9)?;
    Ok((
        rep.sigma_min > 1e-12 * rep.sigma_max,
        format!(
            "{} columns, σ_max {:.3e}, σ_min {:.3e}, condition number {:.3e}",
            rep.n_columns, rep.sigma_max, rep.sigma_min, rep.condition
        ),
    ))
}

fn visibility_coverage() -> Outcome {
    let g = make_grid(3.75, 257, 0.5)?;
    let spd = SpeedSpec::PaperDefault;
    let f = make_phantom(
        &PhantomSpec::new(vec![
            Component::SmoothedDisc { center: Vec2::new(-0.25, 0.2), radius: 0.4, taper: 0.1, amp: 1.0 },
            Component::SmoothedDisc { center: Vec2::new(0.45, -0.35), radius: 0.25, taper: 0.08, amp: 0.7 },
        ]),
        &g,
    )?;
    let wf = phantom_edges(&f, 0.5)?;
    let c = sample_speed(&spd, &g)?;
    let dt = 0.5 * g.h() / (std::f64::consts::SQRT_2 * c.max());
    let tracer = Tracer::analytic(&spd, 1e-3);
    let mut detail = Vec::new();
    let mut pass = true;
    for mode in [DetectorMode::Small { big_r: 2.0, r: 0.8 }, DetectorMode::Large { r: 2.0 }] {
        let t_cover = coverage_time_bound(&mode, c.min());
        let aperture = Aperture { arc: None, times: (0.0, t_cover) };
        let rep = visibility(&tracer, &wf, &aperture, &mode, &MatchTolerance::for_grid(g.h(), dt), 2.0 * t_cover + PI)?;
        let escaping: Vec<_> =
            rep.entries.iter().filter(|e| e.diagnostics.iter().all(|d| !d.contains("trapped"))).collect();
        let visible = escaping.iter().filter(|e| e.verdict == Verdict::Visible).count();
        pass &= !escaping.is_empty() && visible == escaping.len();
        detail.push(format!("{}: {visible}/{} visible (T_cover {t_cover:.3})", mode.name(), escaping.len()));
    }
    Ok((pass, detail.join(", ")))
}
