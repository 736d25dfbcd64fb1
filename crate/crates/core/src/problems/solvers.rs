//! Reference solvers for the four benchmark operators.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Solution sampled on an `nx × nt` space-time grid, `values[ix * nt + it]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub nx: usize,
    pub nt: usize,
    pub dx: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl GridSolution {
    pub fn at(&self, ix: usize, it: usize) -> f64 {
        self.values[ix * self.nt + it]
    }

    pub fn x(&self, ix: usize) -> f64 {
        ix as f64 * self.dx
    }

    pub fn t(&self, it: usize) -> f64 {
        it as f64 * self.dt
    }
}

/// Linear interpolation of samples on an equidistant grid over `[0, 1]`.
pub fn interp_unit(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = x.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    let w = pos - i as f64;
    values[i] * (1.0 - w) + values[i + 1] * w
}

/// Cumulative trapezoid integral starting at zero.
pub fn cumulative_trapezoid(u: &[f64], h: f64) -> Vec<f64> {
    let mut s = Vec::with_capacity(u.len());
    let mut acc = 0.0;
    s.push(0.0);
    for w in u.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        s.push(acc);
    }
    s
}

/// `s(x) = ∫₀ˣ u` on the equidistant grid of `u` over `[0, 1]`.
pub fn solve_antiderivative(u: &[f64]) -> Result<Vec<f64>> {
    if u.len() < 2 {
        return Err(Error::InvalidArgument(format!("antiderivative needs at least 2 samples, got {}", u.len())));
    }
    Ok(cumulative_trapezoid(u, 1.0 / (u.len() - 1) as f64))
}

/// Classic fourth-order Runge–Kutta; returns the state at every step
/// including the initial one.
pub fn rk4<const N: usize, F>(f: F, y0: [f64; N], t0: f64, h: f64, steps: usize) -> Result<Vec<[f64; N]>>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let axpy = |y: &[f64; N], a: f64, k: &[f64; N]| -> [f64; N] {
        let mut out = *y;
        for i in 0..N {
            out[i] += a * k[i];
        }
        out
    };
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0;
    out.push(y);
    for step in 0..steps {
        let t = t0 + step as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t + 0.5 * h, &axpy(&y, 0.5 * h, &k1));
        let k3 = f(t + 0.5 * h, &axpy(&y, 0.5 * h, &k2));
        let k4 = f(t + h, &axpy(&y, h, &k3));
        for i in 0..N {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("non-finite state at step {}", step + 1)));
        }
        out.push(y);
    }
    Ok(out)
}

/// Angle `s₁(t)` of the forced pendulum `s₁'' = -k sin s₁ + u(t)` from rest,
/// integrated with `steps` RK4 steps over `[0, 1]`. The forcing is linearly
/// interpolated from its equidistant samples.
pub fn solve_pendulum_steps(u: &[f64], k: f64, steps: usize) -> Result<Vec<f64>> {
    if u.is_empty() || steps == 0 {
        return Err(Error::InvalidArgument("pendulum needs forcing samples and at least one step".into()));
    }
    let h = 1.0 / steps as f64;
    let states = rk4(|t, s: &[f64; 2]| [s[1], -k * s[0].sin() + interp_unit(u, t)], [0.0, 0.0], 0.0, h, steps)?;
    Ok(states.into_iter().map(|s| s[0]).collect())
}

/// Pendulum angle on the forcing's own grid (step = grid spacing).
pub fn solve_pendulum(u: &[f64], k: f64) -> Result<Vec<f64>> {
    if u.len() < 2 {
        return Err(Error::InvalidArgument(format!("pendulum needs at least 2 forcing samples, got {}", u.len())));
    }
    solve_pendulum_steps(u, k, u.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionReaction {
    pub diffusivity: f64,
    pub reaction: f64,
    pub nx: usize,
    pub nt: usize,
    /// Integrator steps per output time step.
    pub substeps: usize,
}

impl Default for DiffusionReaction {
    fn default() -> Self {
        Self { diffusivity: 0.01, reaction: 0.01, nx: 100, nt: 100, substeps: 4 }
    }
}

/// Thomas algorithm for a constant-coefficient tridiagonal system
/// `lower·x[i-1] + diag·x[i] + upper·x[i+1] = rhs[i]`.
fn solve_tridiagonal(lower: f64, diag: f64, upper: f64, rhs: &mut [f64], scratch: &mut Vec<f64>) {
    let n = rhs.len();
    if n == 0 {
        return;
    }
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut denom = diag;
    scratch[0] = upper / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag - lower * scratch[i - 1];
        scratch[i] = upper / denom;
        rhs[i] = (rhs[i] - lower * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

impl DiffusionReaction {
    /// `s_t = D s_xx + k s² + source(x, t)` on `[0, 1]²` with zero initial and
    /// Dirichlet boundary values.
    ///
    /// Diffusion is Crank–Nicolson; the reaction and source are treated
    /// explicitly with a Heun predictor–corrector, which keeps the scheme
    /// second order in time.
    pub fn solve_with_source<F: Fn(f64, f64) -> f64>(&self, source: F) -> Result<GridSolution> {
        let (nx, nt) = (self.nx, self.nt);
        if nx < 3 || nt < 2 || self.substeps == 0 {
            return Err(Error::InvalidArgument(format!("grid {nx}x{nt} with {} substeps is too small", self.substeps)));
        }
        let dx = 1.0 / (nx - 1) as f64;
        let dt_out = 1.0 / (nt - 1) as f64;
        let dt = dt_out / self.substeps as f64;
        let r = self.diffusivity * dt / (dx * dx);
        let xs: Vec<f64> = (0..nx).map(|i| i as f64 * dx).collect();
        let interior = nx - 2;

        let mut values = vec![0.0; nx * nt];
        let mut s = vec![0.0; nx];
        let mut explicit = vec![0.0; interior];
        let mut rhs = vec![0.0; interior];
        let mut pred = vec![0.0; nx];
        let mut scratch = Vec::with_capacity(interior);

        let reaction = |s: &[f64], t: f64, out: &mut [f64]| {
            for i in 1..nx - 1 {
                out[i - 1] = self.reaction * s[i] * s[i] + source(xs[i], t);
            }
        };
        // (I + r/2·Δ) s on interior nodes
        let cn_rhs = |s: &[f64], out: &mut [f64]| {
            for i in 1..nx - 1 {
                out[i - 1] = s[i] + 0.5 * r * (s[i - 1] - 2.0 * s[i] + s[i + 1]);
            }
        };

        for it in 1..nt {
            for sub in 0..self.substeps {
                let t = ((it - 1) * self.substeps + sub) as f64 * dt;
                reaction(&s, t, &mut explicit);

                cn_rhs(&s, &mut rhs);
                for i in 0..interior {
                    rhs[i] += dt * explicit[i];
                }
                solve_tridiagonal(-0.5 * r, 1.0 + r, -0.5 * r, &mut rhs, &mut scratch);
                pred[1..nx - 1].copy_from_slice(&rhs);

                let mut corrected = vec![0.0; interior];
                reaction(&pred, t + dt, &mut corrected);
                cn_rhs(&s, &mut rhs);
                for i in 0..interior {
                    rhs[i] += 0.5 * dt * (explicit[i] + corrected[i]);
                }
                solve_tridiagonal(-0.5 * r, 1.0 + r, -0.5 * r, &mut rhs, &mut scratch);
                s[1..nx - 1].copy_from_slice(&rhs);

                let norm = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if !norm.is_finite() || norm > 1e6 {
                    return Err(Error::Solver(format!("diffusion-reaction diverged at t = {:.4}", t + dt)));
                }
            }
            for ix in 0..nx {
                values[ix * nt + it] = s[ix];
            }
        }
        Ok(GridSolution { nx, nt, dx, dt: dt_out, values })
    }

    /// Solve with a time-independent source sampled on the `nx` spatial nodes.
    pub fn solve(&self, u: &[f64]) -> Result<GridSolution> {
        if u.len() != self.nx {
            return Err(Error::Shape(format!("source has {} samples, grid has {}", u.len(), self.nx)));
        }
        let dx = 1.0 / (self.nx - 1) as f64;
        self.solve_with_source(|x, _| u[((x / dx).round() as usize).min(self.nx - 1)])
    }
}

pub fn solve_diffusion_reaction(u: &[f64], diffusivity: f64, reaction: f64) -> Result<GridSolution> {
    DiffusionReaction { diffusivity, reaction, nx: u.len(), ..Default::default() }.solve(u)
}

/// `s_t + s_x - D s_xx = 0` with periodic boundaries on `[0, 1]`, evolved
/// exactly in Fourier space and sampled at `nt` equidistant times in `[0, 1]`.
///
/// `s0` holds `M` samples at `j/(M-1)`, so `s0[0]` and `s0[M-1]` are the
/// same physical point and must agree.
pub fn solve_advection_diffusion(s0: &[f64], diffusivity: f64, nt: usize) -> Result<GridSolution> {
    let nx = s0.len();
    if nx < 3 || nt < 2 {
        return Err(Error::InvalidArgument(format!("grid {nx}x{nt} is too small")));
    }
    if (s0[0] - s0[nx - 1]).abs() > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "initial condition is not periodic: s0(0) = {}, s0(1) = {}",
            s0[0],
            s0[nx - 1]
        )));
    }
    let n = nx - 1;
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);

    let mut spectrum: Vec<Complex64> = s0[..n].iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward.process(&mut spectrum);

    let scale = s0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tau = std::f64::consts::TAU;
    let dt = 1.0 / (nt - 1) as f64;
    let mut values = vec![0.0; nx * nt];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for it in 0..nt {
        let t = it as f64 * dt;
        for (q, c) in spectrum.iter().enumerate() {
            let m = if q <= n / 2 { q as f64 } else { q as f64 - n as f64 };
            let k = tau * m;
            let decay = (-diffusivity * k * k * t).exp();
            buf[q] = if n.is_multiple_of(2) && q == n / 2 {
                // The Nyquist mode is a sampled cosine; on the grid a shift only rescales it.
                c * decay * (k * t).cos()
            } else {
                c * Complex64::from_polar(decay, -k * t)
            };
        }
        inverse.process(&mut buf);
        for (ix, z) in buf.iter().enumerate() {
            let v = z / n as f64;
            if v.im.abs() > 1e-10 * scale {
                return Err(Error::NumericFault(format!("imaginary residue {} at t = {t}", v.im)));
            }
            values[ix * nt + it] = v.re;
        }
        values[n * nt + it] = values[it];
    }
    Ok(GridSolution { nx, nt, dx: 1.0 / n as f64, dt, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random_fields::{unit_grid, GrfSampler, Kernel, KernelSpec};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn antiderivative_cases() {
        let xs = unit_grid(100);
        let s = solve_antiderivative(&vec![1.0; 100]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(max_abs_diff(&s, &xs) < 1e-14);

        let u: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let exact: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!(max_abs_diff(&solve_antiderivative(&u).unwrap(), &exact) < 1e-4);

        let u: Vec<f64> = xs.iter().map(|x| (TAU * x).cos()).collect();
        let exact: Vec<f64> = xs.iter().map(|x| (TAU * x).sin() / TAU).collect();
        assert!(max_abs_diff(&solve_antiderivative(&u).unwrap(), &exact) < 1e-3);

        assert!(solve_antiderivative(&[1.0]).is_err());
    }

    #[test]
    fn rk4_exponential() {
        let ys = rk4(|_, y: &[f64; 1]| [y[0]], [1.0], 0.0, 0.01, 100).unwrap();
        assert!((ys[100][0] - 1f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn pendulum_at_rest() {
        let s = solve_pendulum(&vec![0.0; 100], 1.0).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pendulum_blow_up_reported() {
        let err = solve_pendulum(&[f64::MAX / 2.0; 10], 1.0).unwrap_err();
        assert!(matches!(err, Error::Solver(_)), "{err}");
    }

    #[test]
    fn diffusion_reaction_zero_source() {
        let g = solve_diffusion_reaction(&vec![0.0; 100], 0.01, 0.01).unwrap();
        assert_eq!((g.nx, g.nt), (100, 100));
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diffusion_reaction_boundaries_hold() {
        let sampler = GrfSampler::new(KernelSpec::new(Kernel::rbf(0.5)), unit_grid(100), 4).unwrap();
        let u = &sampler.sample(1)[0];
        let g = solve_diffusion_reaction(u, 0.01, 0.01).unwrap();
        for it in 0..100 {
            assert_eq!(g.at(0, it), 0.0);
            assert_eq!(g.at(99, it), 0.0);
        }
        for ix in 0..100 {
            assert_eq!(g.at(ix, 0), 0.0);
        }
        assert!(g.values.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn diffusion_reaction_divergence() {
        let dr = DiffusionReaction { reaction: 10.0, ..Default::default() };
        let err = dr.solve(&vec![50.0; 100]).unwrap_err();
        assert!(matches!(err, Error::Solver(_)), "{err}");
    }

    #[test]
    fn advection_single_mode() {
        let d = 0.1;
        let xs = unit_grid(100);
        let s0: Vec<f64> = xs.iter().map(|x| (TAU * x).sin()).collect();
        let mut s0 = s0;
        s0[99] = s0[0];
        let g = solve_advection_diffusion(&s0, d, 100).unwrap();
        let mut err = 0.0f64;
        for (ix, &x) in xs.iter().enumerate() {
            for it in 0..100 {
                let t = g.t(it);
                let exact = (-d * TAU * TAU * t).exp() * (TAU * (x - t)).sin();
                err = err.max((g.at(ix, it) - exact).abs());
            }
        }
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn advection_constant_and_mean() {
        let g = solve_advection_diffusion(&vec![0.7; 100], 0.1, 100).unwrap();
        assert!(g.values.iter().all(|v| (v - 0.7).abs() < 1e-14));

        let xs = unit_grid(100);
        let mut s0: Vec<f64> = xs.iter().map(|x| 0.3 + (TAU * x).cos() + 0.5 * (3.0 * TAU * x).sin()).collect();
        s0[99] = s0[0];
        let g = solve_advection_diffusion(&s0, 0.1, 100).unwrap();
        let mean0: f64 = (0..99).map(|ix| g.at(ix, 0)).sum::<f64>() / 99.0;
        for it in 0..100 {
            let m: f64 = (0..99).map(|ix| g.at(ix, it)).sum::<f64>() / 99.0;
            assert!((m - mean0).abs() < 1e-12);
            assert_eq!(g.at(0, it), g.at(99, it));
        }
    }

    #[test]
    fn advection_even_grid_nyquist() {
        // 9 samples, 8 unique points: the Nyquist cosine must stay real.
        let s0: Vec<f64> = (0..9).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let g = solve_advection_diffusion(&s0, 0.0, 5).unwrap();
        assert!(g.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn advection_rejects_non_periodic() {
        let s0: Vec<f64> = unit_grid(100);
        assert!(solve_advection_diffusion(&s0, 0.1, 100).is_err());
    }

    #[test]
    fn interp_endpoints() {
        let v = [0.0, 1.0, 4.0];
        assert_eq!(interp_unit(&v, 0.0), 0.0);
        assert_eq!(interp_unit(&v, 1.0), 4.0);
        assert_abs_diff_eq!(interp_unit(&v, 0.75), 2.5);
    }
}
