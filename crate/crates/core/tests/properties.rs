use std::f64::consts::{PI, TAU};

use circtat_core::detector::{circle_mean, unit, DetectorMode, Ring};
use circtat_core::field::smooth_cutoff_eta;
use circtat_core::rays::{canonical_image, mirror_point, visibility, Aperture, MatchTolerance, Sign, Tracer};
use circtat_core::recon::time_cutoff_chi;
use circtat_core::{
    make_grid, make_phantom, phantom_edges, Component, Covector, Interp, Phantom, PhantomSpec, SpeedSpec, Vec2,
};
use proptest::prelude::*;

fn small() -> DetectorMode {
    DetectorMode::Small { big_r: 2.0, r: 0.8 }
}

fn large() -> DetectorMode {
    DetectorMode::Large { r: 2.0 }
}

prop_compose! {
    fn covector()(rho in 0.0..0.9f64, phi in 0.0..TAU, a in 0.0..TAU, mag in 0.1..10.0f64) -> Covector {
        Covector { y: rho * unit(phi), xi: mag * unit(a) }
    }
}

proptest! {
    #[test]
    fn mirror_is_an_involution(theta in -PI..PI, alpha in 0.0..TAU) {
        for mode in [small(), large()] {
            let center = mode.center_radius() * unit(theta);
            let x = center + mode.ring_radius() * unit(alpha);
            let m = mirror_point(x, theta, &mode).unwrap();
            prop_assert!(((m - center).norm() - mode.ring_radius()).abs() < 1e-9);
            let back = mirror_point(m, theta, &mode).unwrap();
            prop_assert!((back - x).norm() < 1e-12);
        }
    }

    #[test]
    fn rays_conserve_the_hamiltonian(cv in covector()) {
        let spec = SpeedSpec::PaperDefault;
        let tracer = Tracer::analytic(&spec, 1e-3);
        for sigma in [Sign::Plus, Sign::Minus] {
            let path = tracer.trace_geodesic(&cv, sigma, 4.0).unwrap();
            prop_assert!(path.hamiltonian_drift(tracer.speed()) <= 1e-6);
        }
    }

    #[test]
    fn event_covectors_are_normal_to_the_ring(cv in covector()) {
        let one = SpeedSpec::Constant(1.0);
        let tracer = Tracer::analytic(&one, 1e-3);
        for mode in [small(), large()] {
            let img = canonical_image(&tracer, &cv, &mode, 8.0).unwrap();
            for ev in &img.events {
                prop_assert!((ev.lambda.abs() - cv.magnitude() / (2.0 * mode.ring_radius())).abs() < 1e-9);
                prop_assert!((ev.tau + ev.sigma.value() * cv.magnitude()).abs() < 1e-9);
                let radial = (ev.x - ev.center(&mode)).normalize();
                prop_assert!(ev.direction.dot(&radial).abs() >= 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn verdicts_ignore_covector_scale(cvs in proptest::collection::vec(covector(), 1..12), k in 0.01..100.0f64,
                                      a in -PI..PI, width in 0.3..3.0f64) {
        let spec = SpeedSpec::PaperDefault;
        let tracer = Tracer::analytic(&spec, 2e-3);
        let aperture = Aperture { arc: Some((a, a + width)), times: (0.0, 4.0) };
        let tol = MatchTolerance::for_grid(0.03, 0.01);
        let scaled: Vec<Covector> = cvs.iter().map(|c| Covector { y: c.y, xi: k * c.xi }).collect();
        for mode in [small(), large()] {
            let r1 = visibility(&tracer, &cvs, &aperture, &mode, &tol, 8.0).unwrap();
            let r2 = visibility(&tracer, &scaled, &aperture, &mode, &tol, 8.0).unwrap();
            for (e1, e2) in r1.entries.iter().zip(&r2.entries) {
                prop_assert_eq!(e1.verdict, e2.verdict);
            }
        }
    }

    #[test]
    fn circle_mean_of_affine_field_is_the_centre_value(cx in -3.0..3.0f64, cy in -3.0..3.0f64, r in 0.1..2.0f64,
                                                        a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64) {
        let ring = Ring { center: Vec2::new(cx, cy), radius: r };
        let m = circle_mean(|p| a * p.x + b * p.y + c, ring, 64);
        prop_assert!((m - (a * cx + b * cy + c)).abs() < 1e-12);
    }

    #[test]
    fn interpolation_weights_sum_to_one(x in -2.5..2.5f64, y in -2.5..2.5f64) {
        let g = make_grid(3.5, 65, 0.5).unwrap();
        for interp in [Interp::Bilinear, Interp::Cubic] {
            let mut total = 0.0;
            prop_assert!(interp.visit(&g, Vec2::new(x, y), |_, w| total += w));
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_is_monotone(r1 in 0.0..1.2f64, r2 in 0.0..1.2f64, taper in 0.05..0.5f64) {
        let eta = smooth_cutoff_eta(1.0, taper).unwrap();
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(eta.radial(lo) >= eta.radial(hi));
        prop_assert!((0.0..=1.0).contains(&eta.radial(lo)));
    }

    #[test]
    fn time_cutoff_is_a_monotone_plateau(t in 0.5..4.0f64, extra in 0.1..2.0f64) {
        let dt = 0.01;
        let nt = ((t + extra) / dt).ceil() as usize + 1;
        let chi = time_cutoff_chi(t, t + extra, nt, dt).unwrap();
        for (i, w) in chi.weights.iter().enumerate() {
            let ti = i as f64 * dt;
            if ti <= t { prop_assert_eq!(*w, 1.0); }
            if ti >= t + extra { prop_assert_eq!(*w, 0.0); }
        }
        prop_assert!(chi.weights.windows(2).all(|w| w[1] <= w[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn edges_of_negated_phantom_coincide(cx in -0.3..0.3f64, cy in -0.3..0.3f64, r in 0.1..0.3f64, amp in 0.2..3.0f64) {
        let g = make_grid(2.0, 97, 0.0).unwrap();
        let spec = PhantomSpec::new(vec![Component::SmoothedDisc { center: Vec2::new(cx, cy), radius: r, taper: 0.15, amp }]);
        let f = make_phantom(&spec, &g).unwrap();
        let neg = Phantom::from_array(g.clone(), -f.values(), f.margin()).unwrap();
        let key = |c: &Covector| (c.y.x.to_bits(), c.y.y.to_bits(), c.xi.x.to_bits(), c.xi.y.to_bits());
        let mut a: Vec<_> = phantom_edges(&f, 0.5).unwrap().iter().map(key).collect();
        let mut b: Vec<_> = phantom_edges(&neg, 0.5).unwrap().iter().map(key).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn small_mode_events_pass_through_the_centre(cv in covector()) {
        let one = SpeedSpec::Constant(1.0);
        let tracer = Tracer::analytic(&one, 1e-3);
        let mode = small();
        let img = canonical_image(&tracer, &cv, &mode, 8.0).unwrap();
        prop_assert_eq!(img.events.len(), 4);
        for ev in &img.events {
            let s = if ev.branch == 1 { ev.t_det + 0.8 } else { ev.t_det - 0.8 };
            let gamma = cv.y + ev.sigma.value() * s * cv.direction();
            prop_assert!((gamma - ev.center(&mode)).norm() <= 1e-6);
        }
    }
}
