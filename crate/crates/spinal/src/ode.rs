//! Adaptive Dormand-Prince 5(4) integration with dense cubic-Hermite output.
//!
//! The solvers in this crate need the accepted-step grid itself (values and
//! derivatives) because downstream consumers interpolate between grid points
//! and build thinning bounds per grid cell. That rules out black-box solvers
//! that only hand back the endpoint, so we keep a small embedded RK pair here.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (problem too stiff for the tolerance)")]
    StepUnderflow { t: f64 },
    #[error("non-finite state encountered at t = {t}")]
    NonFinite { t: f64 },
}

/// Dense solution on the accepted-step grid.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    /// Strictly increasing grid, `times[0] = t0`, `times.last() = t1`.
    pub times: Vec<f64>,
    /// State at each grid point.
    pub values: Vec<Vec<f64>>,
    /// Right-hand side at each grid point.
    pub derivs: Vec<Vec<f64>>,
}

impl OdeSolution {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index of the grid cell containing `t` (clamped to the range).
    pub fn cell_of(&self, t: f64) -> usize {
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => i.min(self.times.len().saturating_sub(2)),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.times.len().saturating_sub(2)),
        }
    }

    /// Cubic Hermite interpolation of component `j` at time `t`.
    pub fn value_at(&self, j: usize, t: f64) -> f64 {
        if self.times.len() == 1 {
            return self.values[0][j];
        }
        let c = self.cell_of(t);
        hermite(
            self.times[c],
            self.times[c + 1],
            self.values[c][j],
            self.derivs[c][j],
            self.values[c + 1][j],
            self.derivs[c + 1][j],
            t,
        )
    }

    /// Interpolate the full state at time `t`.
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        (0..self.values[0].len()).map(|j| self.value_at(j, t)).collect()
    }
}

/// Cubic Hermite basis on `[t0, t1]`.
pub fn hermite(t0: f64, t1: f64, y0: f64, d0: f64, y1: f64, d1: f64, t: f64) -> f64 {
    let h = t1 - t0;
    if h <= 0.0 {
        return y0;
    }
    let s = ((t - t0) / h).clamp(0.0, 1.0);
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;

/// Integrate `y' = f(t, y)` from `t0` to `t1 > t0`, recording every accepted
/// step. `max_step` caps the grid spacing so interpolation stays accurate
/// even where the dynamics are slow.
pub fn solve(
    f: &dyn Fn(f64, &[f64], &mut [f64]),
    t0: f64,
    t1: f64,
    y0: &[f64],
    rtol: f64,
    atol: f64,
    max_step: f64,
) -> Result<OdeSolution, OdeError> {
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();

    let mut k1 = vec![0.0; n];
    f(t, &y, &mut k1);

    let mut sol = OdeSolution {
        times: vec![t0],
        values: vec![y.clone()],
        derivs: vec![k1.clone()],
    };
    if t1 <= t0 {
        return Ok(sol);
    }

    let span = t1 - t0;
    let mut h = (span / 100.0).min(max_step);
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut y5 = vec![0.0; n];

    // Dormand-Prince coefficients
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    // embedded 4th-order weights
    const E1: f64 = 5179.0 / 57600.0;
    const E3: f64 = 7571.0 / 16695.0;
    const E4: f64 = 393.0 / 640.0;
    const E5: f64 = -92097.0 / 339200.0;
    const E6: f64 = 187.0 / 2100.0;
    const E7: f64 = 1.0 / 40.0;

    while t < t1 {
        h = h.min(max_step).min(t1 - t);
        if h < f64::EPSILON * span.max(1.0) {
            return Err(OdeError::StepUnderflow { t });
        }

        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + h / 5.0, &ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + 3.0 * h / 10.0, &ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + 4.0 * h / 5.0, &ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + 8.0 * h / 9.0, &ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] =
                y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, &ytmp, &mut k6);
        for i in 0..n {
            y5[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        f(t + h, &y5, &mut k7);

        let mut err: f64 = 0.0;
        for i in 0..n {
            let y4 = y[i]
                + h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = atol + rtol * y[i].abs().max(y5[i].abs());
            let e = (y5[i] - y4) / scale;
            err += e * e;
        }
        err = (err / n as f64).sqrt();

        if !err.is_finite() {
            return Err(OdeError::NonFinite { t });
        }

        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&y5);
            k1.copy_from_slice(&k7); // FSAL
            sol.times.push(t);
            sol.values.push(y.clone());
            sol.derivs.push(k1.clone());
        }

        let scale = if err == 0.0 {
            MAX_SCALE
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_SCALE, MAX_SCALE)
        };
        h *= scale;
    }
    Ok(sol)
}

/// Adaptive Simpson quadrature of `g` on `[a, b]`.
pub fn adaptive_simpson(g: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(g: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = g(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn rec(
        g: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(g, a, fa, m, fm);
        let (right, rm, frm) = simpson(g, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(g, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
                + rec(g, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let fa = g(a);
    let fb = g(b);
    let (whole, m, fm) = simpson(g, a, fa, b, fb);
    rec(g, a, fa, b, fb, whole, m, fm, tol, 40)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_is_accurate() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -2.0 * y[0];
        };
        let sol = solve(&f, 0.0, 3.0, &[1.0], 1e-10, 1e-12, 0.05).unwrap();
        for (i, &t) in sol.times.iter().enumerate() {
            assert!((sol.values[i][0] - (-2.0 * t).exp()).abs() < 1e-9);
        }
        // dense output between grid points (cubic Hermite, O(h^4))
        for k in 0..60 {
            let t = 0.05 * k as f64 + 0.013;
            if t > 3.0 {
                break;
            }
            assert!((sol.value_at(0, t) - (-2.0 * t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn harmonic_oscillator_round_trip() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let sol = solve(&f, 0.0, std::f64::consts::TAU, &[1.0, 0.0], 1e-10, 1e-12, 0.1).unwrap();
        let end = sol.values.last().unwrap();
        assert!((end[0] - 1.0).abs() < 1e-8);
        assert!(end[1].abs() < 1e-8);
    }

    #[test]
    fn simpson_matches_closed_form() {
        let v = adaptive_simpson(&|x: f64| x.exp(), 0.0, 1.0, 1e-12);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-11);
    }
}
