use std::f64::consts::TAU;

use avidonet::divergence::{
    kld_gaussian_1d, renyi_alpha_mc, renyi_gaussian_closed, Gaussian1d, INFINITE_DIVERGENCE,
};
use avidonet::rng::StreamRng;
use proptest::prelude::*;

fn pdf(x: f64, g: Gaussian1d) -> f64 {
    let z = (x - g.mean) / g.std;
    (-0.5 * z * z).exp() / (g.std * TAU.sqrt())
}

/// Composite Simpson on a wide fixed interval.
fn renyi_by_quadrature(q: Gaussian1d, p: Gaussian1d, alpha: f64) -> f64 {
    let lo = (q.mean - 15.0 * q.std).min(p.mean - 15.0 * p.std);
    let hi = (q.mean + 15.0 * q.std).max(p.mean + 15.0 * p.std);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| pdf(x, q).powf(alpha) * pdf(x, p).powf(1.0 - alpha);
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    (acc * h / 3.0).ln() / (alpha * (alpha - 1.0))
}

#[test]
fn monte_carlo_estimate_converges() {
    let q = Gaussian1d::new(0.2, 0.9);
    let p = Gaussian1d::new(0.0, 1.0);
    let mut rng = StreamRng::new(1, 1);
    let ratios: Vec<f64> = (0..200_000)
        .map(|_| {
            let x = q.mean + q.std * rng.standard_normal();
            p.log_pdf(x) - q.log_pdf(x)
        })
        .collect();
    for alpha in [0.5, 2.0] {
        let mc = renyi_alpha_mc(&ratios, alpha).unwrap();
        let exact = renyi_gaussian_closed(q, p, alpha).unwrap();
        assert!((mc - exact).abs() < 5e-3, "α={alpha}: {mc} vs {exact}");
    }
}

#[test]
fn decreasing_in_alpha_for_reference_pair() {
    let q = Gaussian1d::new(0.3, 0.8);
    let p = Gaussian1d::new(0.0, 1.0);
    let values: Vec<f64> =
        [0.25, 0.5, 0.75, 1.25, 1.5, 2.0, 3.0, 3.5].iter().map(|&a| renyi_gaussian_closed(q, p, a).unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
}

#[test]
fn diverging_integral_is_reported() {
    let d = renyi_gaussian_closed(Gaussian1d::new(0.0, 3.0), Gaussian1d::new(0.0, 1.0), 2.0).unwrap();
    assert_eq!(d, INFINITE_DIVERGENCE);
}

proptest! {
    #[test]
    fn closed_form_matches_quadrature(
        mq in -1.0f64..1.0, sq in 0.5f64..1.5, mp in -1.0f64..1.0, ratio in 0.9f64..1.5,
        alpha in prop::sample::select(vec![0.25, 0.5, 0.75, 1.5, 2.0, 3.0]),
    ) {
        let q = Gaussian1d::new(mq, sq);
        let p = Gaussian1d::new(mp, sq * ratio);
        let closed = renyi_gaussian_closed(q, p, alpha).unwrap();
        let quad = renyi_by_quadrature(q, p, alpha);
        prop_assert!((closed - quad).abs() < 1e-8, "{} vs {}", closed, quad);
    }

    #[test]
    fn renyi_is_nonnegative_and_tends_to_kld(
        mq in -2.0f64..2.0, sq in 0.3f64..2.0, mp in -2.0f64..2.0, sp in 0.3f64..2.0,
    ) {
        let q = Gaussian1d::new(mq, sq);
        let p = Gaussian1d::new(mp, sp);
        let kld = kld_gaussian_1d(q, p).unwrap();
        prop_assert!(kld >= 0.0);
        for alpha in [0.3, 0.9] {
            prop_assert!(renyi_gaussian_closed(q, p, alpha).unwrap() >= -1e-12);
        }
        let near = renyi_gaussian_closed(q, p, 1.0 + 1e-7).unwrap();
        prop_assert!((near - kld).abs() < 1e-4 * (1.0 + kld));
    }
}
