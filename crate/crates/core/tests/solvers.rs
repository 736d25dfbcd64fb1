use std::f64::consts::{PI, TAU};

use avidonet::problems::{
    cumulative_trapezoid, rk4, solve_advection_diffusion, solve_antiderivative, solve_pendulum_steps,
    DiffusionReaction,
};
use avidonet::random_fields::unit_grid;

#[test]
fn antiderivative_of_cosine() {
    let xs = unit_grid(1001);
    let u: Vec<f64> = xs.iter().map(|x| (TAU * x).cos()).collect();
    let s = solve_antiderivative(&u).unwrap();
    let err = xs.iter().zip(&s).fold(0.0f64, |m, (x, v)| m.max((v - (TAU * x).sin() / TAU).abs()));
    // trapezoid error bound h²/12 · max|u''| = 1e-6/12 · 4π²
    assert!(err < 4e-6, "{err}");
}

#[test]
fn trapezoid_is_exact_for_linear_data() {
    let u: Vec<f64> = (0..11).map(|i| 2.0 + 3.0 * i as f64 / 10.0).collect();
    let s = cumulative_trapezoid(&u, 0.1);
    assert!((s[10] - (2.0 + 1.5)).abs() < 1e-14);
}

#[test]
fn rk4_harmonic_oscillator() {
    let states = rk4(|_, y: &[f64; 2]| [y[1], -y[0]], [1.0, 0.0], 0.0, 0.01, 100).unwrap();
    let end = states.last().unwrap();
    assert!((end[0] - 1f64.cos()).abs() < 1e-9);
    assert!((end[1] + 1f64.sin()).abs() < 1e-9);
}

#[test]
fn small_angle_pendulum_matches_linear_response() {
    // s'' = -sin s + ε ≈ -s + ε from rest: s = ε(1 - cos t)
    let eps = 1e-4;
    let s = solve_pendulum_steps(&[eps, eps], 1.0, 1000).unwrap();
    let exact = eps * (1.0 - 1f64.cos());
    assert!((s[1000] - exact).abs() < 1e-10 * 10.0, "{} vs {exact}", s[1000]);
}

#[test]
fn pendulum_rk4_is_fourth_order() {
    let forcing = [0.3, -1.2, 0.8, 0.1, 1.5];
    let end = |n| *solve_pendulum_steps(&forcing, 1.0, n).unwrap().last().unwrap();
    let (a, b, c) = (end(8), end(16), end(32));
    let ratio = (a - b).abs() / (b - c).abs();
    assert!((12.0..=20.0).contains(&ratio), "{ratio}");
}

#[test]
fn diffusion_reaction_manufactured_solution() {
    let dr = DiffusionReaction::default();
    let (d, k) = (dr.diffusivity, dr.reaction);
    let sol = dr
        .solve_with_source(|x, t| {
            let s = (PI * x).sin();
            s + d * PI * PI * t * s - k * t * t * s * s
        })
        .unwrap();
    let mut err = 0.0f64;
    for ix in 0..sol.nx {
        for it in 0..sol.nt {
            err = err.max((sol.at(ix, it) - sol.t(it) * (PI * sol.x(ix)).sin()).abs());
        }
    }
    assert!(err < 5e-3, "{err}");
}

#[test]
fn advection_two_modes() {
    let d = 0.1;
    let xs = unit_grid(100);
    let f = |x: f64, t: f64| {
        (-d * TAU * TAU * t).exp() * (TAU * (x - t)).cos() + 0.5 * (-4.0 * d * TAU * TAU * t).exp() * (2.0 * TAU * (x - t)).sin()
    };
    let s0: Vec<f64> = xs.iter().map(|&x| f(x, 0.0)).collect();
    let mut s0 = s0;
    s0[99] = s0[0];
    let g = solve_advection_diffusion(&s0, d, 100).unwrap();
    let mut err = 0.0f64;
    for (ix, &x) in xs.iter().enumerate() {
        for it in 0..100 {
            err = err.max((g.at(ix, it) - f(x, g.t(it))).abs());
        }
    }
    assert!(err < 1e-10, "{err}");
}
