//! Subcommand implementations. Each returns the lines to print on success.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use circtat_core::detector::{
    cylinder_residual_large, cylinder_residual_small, rms, sweep_large_radius, sweep_small_radius, DetectorConfig,
    DetectorMode, ForwardModel, SweepSampling,
};
use circtat_core::rays::{canonical_image, visibility as classify, Aperture, MatchTolerance, Sign, Tracer, Verdict};
use circtat_core::recon::{
    angular_taper, cg_normal, data_weights, dot, landweber, relative_error, time_cutoff_chi, ReconOptions, StepSize,
    WeightedProblem,
};
use circtat_core::wave::{cfl_limit, default_sigma_max, pml_profile, PmlProfile, Propagator};
use circtat_core::{
    make_grid, make_phantom, phantom_edges, sample_speed, Component, Covector, PhantomSpec, SpeedSpec, Vec2,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Experiment, ExperimentConfig, Method, ModeName};
use crate::io::{self, ArrayFile};
use crate::CliError;

/// Detector and time sampling recorded with every sinogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub mode: String,
    pub big_r: Option<f64>,
    pub r: f64,
    pub n_alpha: usize,
    pub interp: String,
    pub arc: Option<(f64, f64)>,
    pub thetas: Vec<f64>,
    pub dt: f64,
    pub nt: usize,
}

impl Geometry {
    fn of(cfg: &DetectorConfig, dt: f64, nt: usize) -> Self {
        let big_r = match cfg.mode {
            DetectorMode::Small { big_r, .. } => Some(big_r),
            DetectorMode::Large { .. } => None,
        };
        Self {
            mode: cfg.mode.name().into(),
            big_r,
            r: cfg.mode.ring_radius(),
            n_alpha: cfg.n_alpha,
            interp: cfg.interp.name().into(),
            arc: cfg.aperture(),
            thetas: cfg.thetas().to_vec(),
            dt,
            nt,
        }
    }

    fn matches(&self, other: &Geometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        self.mode == other.mode
            && opt(self.big_r, other.big_r)
            && close(self.r, other.r)
            && self.n_alpha == other.n_alpha
            && self.interp == other.interp
            && opt(self.arc.map(|a| a.0), other.arc.map(|a| a.0))
            && opt(self.arc.map(|a| a.1), other.arc.map(|a| a.1))
            && self.thetas.len() == other.thetas.len()
            && self.thetas.iter().zip(&other.thetas).all(|(a, b)| close(*a, *b))
            && close(self.dt, other.dt)
            && self.nt == other.nt
    }

    fn describe(&self) -> String {
        let radii = match self.big_r {
            Some(big_r) => format!("R = {big_r}, r = {}", self.r),
            None => format!("r = {}", self.r),
        };
        let arc = match self.arc {
            Some((a, b)) => format!("arc ({a:.4}, {b:.4})"),
            None => "full circle".into(),
        };
        format!(
            "{} mode, {radii}, {} angles on {arc}, n_alpha = {}, {} interpolation, dt = {:.6e}, nt = {}",
            self.mode,
            self.thetas.len(),
            self.n_alpha,
            self.interp,
            self.dt,
            self.nt
        )
    }
}

fn model(cfg: &ExperimentConfig, exp: &Experiment) -> Result<ForwardModel, CliError> {
    let cfg_err = |e: circtat_core::Error| CliError::Config(format!("detector: {e}"));
    let prop = Propagator::with_cfl(&exp.speed, &exp.pml, cfg.time.cfl).map_err(cfg_err)?;
    let m = ForwardModel::with_propagator(prop, &exp.detector, cfg.time.record).map_err(cfg_err)?;
    time_cutoff_chi(cfg.time.plateau(), cfg.time.record, m.nt(), m.dt())
        .map_err(|e| CliError::Config(format!("time: {e}")))?;
    Ok(m)
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))
}

fn grid_meta(cfg: &ExperimentConfig) -> serde_json::Value {
    json!({ "half_width": cfg.grid.half_width, "n": cfg.grid.n, "pml_width": cfg.grid.pml_width })
}

/// Additive Gaussian noise with standard deviation `relative·max|s|`.
fn add_noise(data: &mut Array2<f64>, relative: f64, seed: u64) {
    if relative == 0.0 {
        return;
    }
    let peak = data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, relative * peak).expect("finite positive deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
}

pub fn forward(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<Vec<String>, CliError> {
    let exp = cfg.build()?;
    let model = model(cfg, &exp)?;
    prepare_out(out)?;
    let mut s = model.forward(&exp.phantom)?;
    add_noise(&mut s.data, cfg.noise.relative, seed);
    let geometry = Geometry::of(&exp.detector, model.dt(), model.nt());
    let meta = json!({
        "kind": "sinogram",
        "axes": ["t", "theta"],
        "geometry": geometry,
        "time": { "record": cfg.time.record, "plateau": cfg.time.plateau(), "cfl": cfg.time.cfl },
        "grid": grid_meta(cfg),
        "speed": cfg.speed,
        "noise": { "relative": cfg.noise.relative, "seed": seed },
    });
    let path = out.join("sinogram.tarr");
    io::write_array(&path, &ArrayFile::from_array2(&s.data), meta)?;
    let (nt, nth) = s.data.dim();
    let values: Vec<f64> = s.data.iter().copied().collect();
    io::write_pgm(&out.join("sinogram.pgm"), nt, nth, &values, json!({ "rows": "t", "cols": "theta" }))?;
    io::write_array(
        &out.join("phantom.tarr"),
        &ArrayFile::from_array2(exp.phantom.values()),
        json!({ "kind": "phantom", "axes": ["y", "x"], "grid": grid_meta(cfg) }),
    )?;
    io::write_field_pgm(&out.join("phantom.pgm"), exp.phantom.values(), json!({ "orientation": "+y up" }))?;
    Ok(vec![format!("wrote {} ({nt} × {nth}, dt = {:.6e})", path.display(), model.dt())])
}

pub fn reconstruct(cfg: &ExperimentConfig, sinogram: &Path, out: &Path, seed: u64) -> Result<Vec<String>, CliError> {
    let exp = cfg.build()?;
    let model = model(cfg, &exp)?;
    let (arr, side) = io::read_array_with_sidecar(sinogram)?;
    let theirs: Geometry = serde_json::from_value(side.meta["geometry"].clone()).map_err(|e| {
        CliError::Input(format!(
            "{}: sidecar has no readable geometry block: {e}",
            io::sidecar_path(sinogram).display()
        ))
    })?;
    let ours = Geometry::of(&exp.detector, model.dt(), model.nt());
    if !ours.matches(&theirs) {
        return Err(CliError::Config(format!(
            "geometry mismatch: sinogram {} has [{}], config has [{}]",
            sinogram.display(),
            theirs.describe(),
            ours.describe()
        )));
    }
    let data = arr.into_array2()?;
    if data.dim() != model.data_shape() {
        return Err(CliError::Input(format!("sinogram is {:?}, config implies {:?}", data.dim(), model.data_shape())));
    }
    prepare_out(out)?;
    let chi = time_cutoff_chi(cfg.time.plateau(), cfg.time.record, model.nt(), model.dt())?;
    let w = data_weights(&chi, &angular_taper(exp.detector.thetas(), cfg.aperture.arc(), cfg.aperture.taper));
    let problem = WeightedProblem::new(&model, &w, cfg.phantom.margin)?;
    let opts = ReconOptions {
        iters: cfg.recon.iters,
        step: cfg.recon.step.map_or(StepSize::Auto, StepSize::Fixed),
        tol: cfg.recon.tol,
        tikhonov: cfg.recon.tikhonov,
        seed,
        ..Default::default()
    };
    let result = match cfg.recon.method {
        Method::Landweber => landweber(&problem, &data, &opts)?,
        Method::Cg => cg_normal(&problem, &data, &opts)?,
    };

    let method = match cfg.recon.method {
        Method::Landweber => "landweber",
        Method::Cg => "cg",
    };
    let est_path = out.join("estimate.tarr");
    io::write_array(
        &est_path,
        &ArrayFile::from_array2(result.estimate.values()),
        json!({ "kind": "estimate", "axes": ["y", "x"], "grid": grid_meta(cfg), "method": method, "iterations": result.iterations }),
    )?;
    io::write_field_pgm(&out.join("estimate.pgm"), result.estimate.values(), json!({ "orientation": "+y up" }))?;
    let csv_path = out.join("residuals.csv");
    let mut w = io::csv_writer(&csv_path)?;
    w.write_record(["iteration", "misfit"]).map_err(io::csv_err(&csv_path))?;
    for (k, m) in result.residual_history.iter().enumerate() {
        w.write_record([k.to_string(), format!("{m:e}")]).map_err(io::csv_err(&csv_path))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;

    let error = cfg.has_truth().then(|| relative_error(&result.estimate, &exp.phantom));
    let final_misfit = *result.residual_history.last().expect("history starts at f = 0");
    io::write_json(
        &out.join("report.json"),
        &json!({
            "method": method,
            "iterations": result.iterations,
            "step_size": (cfg.recon.method == Method::Landweber).then_some(result.step_size),
            "initial_misfit": result.residual_history[0],
            "final_misfit": final_misfit,
            "relative_error": error,
        }),
    )?;
    let mut lines = vec![format!(
        "{method}: {} iterations, misfit {:.4e} -> {final_misfit:.4e}",
        result.iterations, result.residual_history[0]
    )];
    if let Some(e) = error {
        lines.push(format!("relative L2 error {e:.4}"));
    }
    Ok(lines)
}

pub fn visibility(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let exp = cfg.build()?;
    let mut lines = Vec::new();
    let wf = phantom_edges(&exp.phantom, cfg.visibility.threshold)?;
    if wf.is_empty() {
        eprintln!(
            "warning: the phantom has no edges above threshold {}; the report is empty",
            cfg.visibility.threshold
        );
    }
    prepare_out(out)?;
    let tracer = Tracer::analytic(&exp.speed_spec, cfg.visibility.ray_step);
    let aperture = Aperture { arc: cfg.aperture.arc(), times: cfg.visibility_times() };
    let dt = cfg.time.cfl * cfl_limit(exp.grid.h(), exp.speed.max());
    let tol = MatchTolerance::for_grid(exp.grid.h(), dt);
    let t_max = cfg.visibility.t_max.unwrap_or(8.0);
    let report = classify(&tracer, &wf, &aperture, &exp.detector.mode, &tol, t_max)?;

    let csv_path = out.join("visibility.csv");
    let mut w = io::csv_writer(&csv_path)?;
    w.write_record(["y_x", "y_y", "xi_x", "xi_y", "verdict", "t", "theta", "branch"])
        .map_err(io::csv_err(&csv_path))?;
    for e in &report.entries {
        let c = e.covector;
        let (t, theta, branch) = match &e.witness {
            Some(ev) => (format!("{:e}", ev.signed_time()), format!("{:e}", ev.theta), ev.branch.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        let row = [format!("{:e}", c.y.x), format!("{:e}", c.y.y), format!("{:e}", c.xi.x), format!("{:e}", c.xi.y)];
        w.write_record(row.iter().map(String::as_str).chain([e.verdict.name(), &t, &theta, &branch]))
            .map_err(io::csv_err(&csv_path))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;

    // phantom in [0, 0.5], edge nodes brightest when visible
    let g = &exp.grid;
    let peak = exp.phantom.values().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut overlay = exp.phantom.values().mapv(|v| if peak > 0.0 { 0.5 * v.abs() / peak } else { 0.0 });
    let level = |v: Verdict| match v {
        Verdict::Visible => 1.0,
        Verdict::Masked => 0.8,
        Verdict::OutOfAperture => 0.65,
    };
    for e in &report.entries {
        let idx = |x: f64| ((x + g.half_width()) / g.h()).round() as usize;
        let cell = &mut overlay[[idx(e.covector.y.y), idx(e.covector.y.x)]];
        *cell = cell.max(level(e.verdict));
    }
    io::write_field_pgm(
        &out.join("overlay.pgm"),
        &overlay,
        json!({ "orientation": "+y up", "levels": { "visible": 1.0, "masked": 0.8, "out_of_aperture": 0.65, "phantom": "[0, 0.5]" } }),
    )?;
    let counts = json!({
        "edges": report.entries.len(),
        "visible": report.count(Verdict::Visible),
        "masked": report.count(Verdict::Masked),
        "out_of_aperture": report.count(Verdict::OutOfAperture),
    });
    io::write_json(&out.join("visibility.json"), &counts)?;
    lines.push(format!(
        "{} edge covectors: {} visible, {} masked, {} out of aperture",
        report.entries.len(),
        counts["visible"],
        counts["masked"],
        counts["out_of_aperture"]
    ));
    Ok(lines)
}

/// RMS cylinder residual per level with the matching stencil and with the other one.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>, CliError> {
    cfg.build()?;
    let sw = cfg.sweep.as_ref().ok_or_else(|| CliError::Config("sweep: section [sweep] is missing".into()))?;
    prepare_out(out)?;
    let spec = cfg.phantom_spec();
    let speed = cfg.speed.spec();
    let mut rows = Vec::new();
    for level in 0..sw.levels {
        let s = (1u64 << level) as f64;
        let n = (cfg.grid.n - 1) * (1 << level) + 1;
        let g = make_grid(cfg.grid.half_width, n, cfg.grid.pml_width)?;
        let c = sample_speed(&speed, &g)?;
        let f = make_phantom(&spec, &g)?;
        let pml = PmlProfile::for_grid(&g)?;
        let dth = sw.dtheta / s;
        let k0 = (sw.theta_range[0] / dth).ceil() as i64;
        let k1 = (sw.theta_range[1] / dth).floor() as i64;
        let sampling = SweepSampling {
            thetas: (k0..=k1).map(|k| k as f64 * dth).collect(),
            n_alpha: sw.n_alpha << level,
            interp: sw.interp.interp(),
            t_record: sw.record,
            cfl: cfg.time.cfl,
        };
        let dr = sw.dr / s;
        let radii = [sw.radius - dr, sw.radius, sw.radius + dr];
        let fam = match (sw.kind, sw.ring_radius) {
            (ModeName::Small, Some(r)) => sweep_small_radius(&f, &c, &pml, r, &radii, &sampling)?,
            _ => sweep_large_radius(&f, &c, &pml, &radii, &sampling)?,
        };
        let small = rms(&cylinder_residual_small(&fam)?);
        let large = rms(&cylinder_residual_large(&fam)?);
        let (own, other) = if sw.kind == ModeName::Small { (small, large) } else { (large, small) };
        rows.push((level, n, own, other));
    }
    let csv_path = out.join("sweep.csv");
    let mut w = io::csv_writer(&csv_path)?;
    w.write_record(["level", "n", "rms", "ratio", "rms_other_stencil"]).map_err(io::csv_err(&csv_path))?;
    let mut lines = Vec::new();
    for (k, &(level, n, own, other)) in rows.iter().enumerate() {
        let ratio = if k > 0 { rows[k - 1].2 / own } else { f64::NAN };
        w.write_record([
            level.to_string(),
            n.to_string(),
            format!("{own:e}"),
            format!("{ratio}"),
            format!("{other:e}"),
        ])
        .map_err(io::csv_err(&csv_path))?;
        lines.push(format!("level {level} (n = {n}): rms {own:.4e}, ratio {ratio:.3}, other stencil {other:.4e}"));
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
    Ok(lines)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

/// Outcome of one self check.
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check {} {}: {}", self.name, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

type Check = circtat_core::Result<(bool, String)>;
type CheckFn = Box<dyn Fn() -> Check>;

/// Runs the self checks. `break_adjoint` perturbs the transposed operator to exercise the failure path.
pub fn selftest(level: Level, break_adjoint: bool) -> Vec<CheckLine> {
    let mut checks: Vec<(&'static str, CheckFn)> = vec![
        ("adjoint", Box::new(move || check_adjoint(break_adjoint))),
        ("rays", Box::new(check_rays)),
        ("canonical", Box::new(check_canonical)),
        ("energy", Box::new(check_energy)),
        ("pml", Box::new(check_pml)),
    ];
    if level == Level::Full {
        checks.push(("residual-small", Box::new(|| check_residual(false))));
        checks.push(("residual-large", Box::new(|| check_residual(true))));
    }
    checks
        .into_iter()
        .map(|(name, run)| {
            let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckLine { name, pass, detail }
        })
        .collect()
}

fn check_adjoint(broken: bool) -> Check {
    let g = make_grid(3.75, 48, 0.5)?;
    let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
    let pml = PmlProfile::for_grid(&g)?;
    let mask = g.disc_mask(0.95);
    let mut worst: f64 = 0.0;
    for mode in [DetectorMode::Small { big_r: 2.0, r: 0.8 }, DetectorMode::Large { r: 2.0 }] {
        let model = ForwardModel::new(&c, &pml, &DetectorConfig::full(mode, 48, 96)?, 3.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<f64> = mask.iter().map(|&m| if m { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        let data = Array2::from_shape_fn(model.data_shape(), |_| rng.random_range(-1.0..1.0));
        let mf = model.apply(&f)?;
        let mut mtg = model.apply_transpose(&data)?;
        if broken {
            mtg.iter_mut().step_by(7).for_each(|v| *v *= 1.01);
        }
        let (mf, data) = (mf.as_slice().expect("contiguous"), data.as_slice().expect("contiguous"));
        let gap = (dot(mf, data) - dot(&f, &mtg)).abs() / (dot(mf, mf).sqrt() * dot(data, data).sqrt());
        worst = worst.max(gap);
    }
    Ok((worst <= 1e-10, format!("relative gap {worst:.2e} (tol 1e-10)")))
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

fn check_rays() -> Check {
    let spd = SpeedSpec::PaperDefault;
    let tracer = Tracer::analytic(&spd, 1e-3);
    let mut drift: f64 = 0.0;
    for cv in random_covectors(40, 3) {
        for sigma in [Sign::Plus, Sign::Minus] {
            drift = drift.max(tracer.trace_geodesic(&cv, sigma, 4.0)?.hamiltonian_drift(&spd));
        }
    }
    let one = SpeedSpec::Constant(1.0);
    let line = Tracer::analytic(&one, 1e-3).trace_geodesic(
        &Covector { y: Vec2::zeros(), xi: Vec2::new(0.6, 0.8) },
        Sign::Plus,
        3.0,
    )?;
    let straight = line.states.iter().map(|s| (s.x - s.t * Vec2::new(0.6, 0.8)).norm()).fold(0.0, f64::max);
    Ok((
        drift <= 1e-6 && straight <= 1e-8,
        format!("Hamiltonian drift {drift:.2e}, straight-line deviation {straight:.2e}"),
    ))
}

fn check_canonical() -> Check {
    let one = SpeedSpec::Constant(1.0);
    let tracer = Tracer::analytic(&one, 1e-3);
    let mut bad = 0;
    let mut lambda_err: f64 = 0.0;
    let cvs = random_covectors(40, 5);
    for cv in &cvs {
        for (mode, expected) in [(DetectorMode::Small { big_r: 2.0, r: 0.8 }, 4), (DetectorMode::Large { r: 2.0 }, 2)] {
            let img = canonical_image(&tracer, cv, &mode, 6.0)?;
            bad += usize::from(img.events.len() != expected);
            for ev in &img.events {
                lambda_err = lambda_err.max((ev.lambda.abs() - cv.magnitude() / (2.0 * mode.ring_radius())).abs());
            }
        }
    }
    Ok((
        bad == 0 && lambda_err <= 1e-6,
        format!("{} covectors, wrong event counts {bad}, λ error {lambda_err:.2e}", cvs.len()),
    ))
}

fn gaussian(x: f64, y: f64, sigma: f64) -> PhantomSpec {
    PhantomSpec::new(vec![Component::Gaussian { center: Vec2::new(x, y), sigma, amp: 1.0 }])
}

fn check_energy() -> Check {
    let g = make_grid(2.0, 193, 0.0)?;
    let c = sample_speed(&SpeedSpec::PaperDefault, &g)?;
    let prop = Propagator::with_cfl(&c, &PmlProfile::none(&g), 0.5)?;
    let mut s = prop.init_state(&make_phantom(&gaussian(0.1, 0.2, 0.15), &g)?)?;
    let e0 = prop.energy(&s);
    let mut drift: f64 = 0.0;
    for _ in 0..400 {
        prop.step(&mut s)?;
        drift = drift.max((prop.energy(&s) - e0).abs() / e0);
    }
    Ok((drift <= 1e-3, format!("closed-domain energy drift {drift:.2e} over 400 steps (tol 1e-3)")))
}

/// Energy of the difference to a reflection-free reference in the undamped square.
fn check_pml() -> Check {
    let width = 0.5;
    let n = 97;
    let g = make_grid(2.0 + width, n, width)?;
    let h = g.h();
    let t_end = 4.0;
    let nb = n + 2 * ((t_end + 0.5) / h).ceil() as usize;
    let gb = make_grid(g.half_width() + (nb - n) as f64 / 2.0 * h, nb, 0.0)?;
    let spec = gaussian(0.3, 0.2, 0.1);
    let one = SpeedSpec::Constant(1.0);
    let dt = 0.5 * h / std::f64::consts::SQRT_2;
    let p = Propagator::new(&sample_speed(&one, &g)?, &pml_profile(&g, width, default_sigma_max(width, 2), 2)?, dt)?;
    let pb = Propagator::new(&sample_speed(&one, &gb)?, &PmlProfile::none(&gb), dt)?;
    let mut s = p.init_state(&make_phantom(&spec, &g)?)?;
    let mut sb = pb.init_state(&make_phantom(&spec, &gb)?)?;
    let e0 = p.energy(&s);
    let off = (nb - n) / 2;
    let lim = g.interior_limit();
    let diff_energy = |u: &[f64], ub: &[f64], u_prev: &[f64], ub_prev: &[f64]| -> f64 {
        let d = |k: usize, a: &[f64], b: &[f64]| a[k] - b[(k / n + off) * nb + k % n + off];
        let mut e = 0.0;
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let x = g.pos(i, j);
                if x.x.abs() >= lim || x.y.abs() >= lim {
                    continue;
                }
                let k = j * n + i;
                let v = (d(k, u, ub) - d(k, u_prev, ub_prev)) / dt;
                let gx = d(k + 1, u, ub) - d(k, u, ub);
                let gy = d(k + n, u, ub) - d(k, u, ub);
                e += 0.5 * v * v * h * h + 0.5 * (gx * gx + gy * gy);
            }
        }
        e
    };
    let mut worst: f64 = 0.0;
    for k in 0..(t_end / dt) as usize {
        p.step(&mut s)?;
        pb.step(&mut sb)?;
        if k % 10 == 0 {
            worst = worst.max(diff_energy(s.u_curr(), sb.u_curr(), s.u_prev(), sb.u_prev()) / e0);
        }
    }
    Ok((worst <= 1e-3, format!("reflected energy fraction {worst:.2e} (tol 1e-3)")))
}

fn check_residual(large: bool) -> Check {
    let spec = gaussian(0.1, 0.05, 0.2);
    let mut e = Vec::new();
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
            interp: circtat_core::Interp::Cubic,
            t_record: 3.0,
            cfl: 0.5,
        };
        let dr = 0.1 / s;
        let radii = [2.1 - dr, 2.1, 2.1 + dr];
        e.push(if large {
            rms(&cylinder_residual_large(&sweep_large_radius(&f, &c, &pml, &radii, &sampling)?)?)
        } else {
            rms(&cylinder_residual_small(&sweep_small_radius(&f, &c, &pml, 0.8, &radii, &sampling)?)?)
        });
    }
    let (r1, r2) = (e[0] / e[1], e[1] / e[2]);
    let ok = |r: f64| (3.2..=4.8).contains(&r);
    Ok((
        ok(r1) && ok(r2),
        format!("rms {:.3e} {:.3e} {:.3e}, ratios {r1:.3} {r2:.3} (band 3.2..4.8)", e[0], e[1], e[2]),
    ))
}
