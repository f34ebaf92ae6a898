//! Dormand–Prince 5(4) integration and the continuous adjoint backward pass.
//!
//! The backward pass integrates the augmented system
//! `[y, a_y, a_params, a_t]` from the last query time to the first in one
//! solver sweep, adding the loss cotangent of every intermediate query time
//! to `a_y` as a jump when that time is crossed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parameterized vector field `dy/dt = f(y, t; params)`.
pub trait VectorField {
    /// State dimension.
    fn dim(&self) -> usize;

    /// Number of trainable parameters.
    fn n_params(&self) -> usize;

    /// Writes `f(state, t)` into `out`.
    fn eval(&self, state: &[f64], t: f64, out: &mut [f64]);

    /// Vector-Jacobian products with `cot`: writes `cotᵀ ∂f/∂y` into
    /// `cot_state`, overwrites `cot_params` with `cotᵀ ∂f/∂params`, and
    /// returns `cotᵀ ∂f/∂t`.
    fn vjp(
        &self,
        state: &[f64],
        t: f64,
        cot: &[f64],
        cot_state: &mut [f64],
        cot_params: &mut [f64],
    ) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// First trial step; `0` picks one automatically.
    pub initial_step: f64,
    pub safety: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-6,
            max_steps: 10_000,
            initial_step: 0.0,
            safety: 0.9,
        }
    }
}

impl OdeConfig {
    pub fn tight(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::invalid("ode tolerances must be > 0"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("ode.max_steps must be >= 1"));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::invalid("ode.safety must lie in (0, 1]"));
        }
        if !(self.initial_step >= 0.0) {
            return Err(Error::invalid("ode.initial_step must be >= 0"));
        }
        Ok(())
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th minus embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Stage storage for one step; `k[0]` holds `f(t, y)` on entry.
struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    err: Vec<f64>,
}

impl Stages {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
            err: vec![0.0; n],
        }
    }
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            time: t,
            reason: "non-finite derivative".into(),
        })
    }
}

/// One DP5 step from `(t, y)`; requires `st.k[0] = f(t, y)`. Fills
/// `st.y_new`, `st.k[6] = f(t + h, y_new)` and the error vector `st.err`.
fn dp5_step<F>(rhs: &mut F, y: &[f64], t: f64, h: f64, st: &mut Stages) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    macro_rules! stage {
        ($idx:expr, $c:expr, [$(($j:expr, $a:expr)),*]) => {{
            for i in 0..n {
                let mut acc = 0.0;
                $( acc += $a * st.k[$j][i]; )*
                st.tmp[i] = y[i] + h * acc;
            }
            let (head, tail) = st.k.split_at_mut($idx);
            let _ = head;
            rhs(t + $c * h, &st.tmp, &mut tail[0]);
            check_finite(&st.k[$idx], t + $c * h)?;
        }};
    }
    stage!(1, C2, [(0, A21)]);
    stage!(2, C3, [(0, A31), (1, A32)]);
    stage!(3, C4, [(0, A41), (1, A42), (2, A43)]);
    stage!(4, C5, [(0, A51), (1, A52), (2, A53), (3, A54)]);
    stage!(5, 1.0, [(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
    for i in 0..n {
        st.y_new[i] = y[i]
            + h * (A71 * st.k[0][i]
                + A73 * st.k[2][i]
                + A74 * st.k[3][i]
                + A75 * st.k[4][i]
                + A76 * st.k[5][i]);
    }
    {
        let (head, tail) = st.k.split_at_mut(6);
        let _ = head;
        rhs(t + h, &st.y_new, &mut tail[0]);
    }
    check_finite(&st.k[6], t + h)?;
    for i in 0..n {
        st.err[i] = h
            * (E1 * st.k[0][i]
                + E3 * st.k[2][i]
                + E4 * st.k[3][i]
                + E5 * st.k[4][i]
                + E6 * st.k[5][i]
                + E7 * st.k[6][i]);
    }
    Ok(())
}

/// Evaluate the continuous extension of the last step at `t + theta * h`.
fn dense_eval(y: &[f64], st: &Stages, h: f64, theta: f64, out: &mut [f64]) {
    let th1 = 1.0 - theta;
    for i in 0..y.len() {
        let r2 = st.y_new[i] - y[i];
        let r3 = h * st.k[0][i] - r2;
        let r4 = r2 - h * st.k[6][i] - r3;
        let r5 = h
            * (D1 * st.k[0][i]
                + D3 * st.k[2][i]
                + D4 * st.k[3][i]
                + D5 * st.k[4][i]
                + D6 * st.k[5][i]
                + D7 * st.k[6][i]);
        out[i] = y[i] + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)));
    }
}

fn scaled_rms(err: &[f64], y: &[f64], y_new: &[f64], cfg: &OdeConfig) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..err.len() {
        let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
        let r = err[i] / sc;
        acc += r * r;
    }
    (acc / err.len() as f64).sqrt()
}

fn initial_step<F>(rhs: &mut F, t0: f64, y0: &[f64], f0: &[f64], span: f64, cfg: &OdeConfig) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len().max(1) as f64;
    let sc = |v: f64| cfg.atol + cfg.rtol * v.abs();
    let d0 = (y0.iter().map(|&v| (v / sc(v)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0
        .iter()
        .zip(y0)
        .map(|(&f, &v)| (f / sc(v)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span.abs());
    let y1: Vec<f64> = y0
        .iter()
        .zip(f0)
        .map(|(&y, &f)| y + h0 * span.signum() * f)
        .collect();
    let mut f1 = vec![0.0; y0.len()];
    rhs(t0 + h0 * span.signum(), &y1, &mut f1);
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(y0)
        .map(|((&a, &b), &v)| ((a - b) / sc(v)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span.abs())
}

/// Adaptive integration of `rhs` from `times[0]` through every entry of
/// `times` (monotone, either direction). Intermediate times use dense
/// output; the final time is hit exactly.
pub(crate) fn solve<F>(
    mut rhs: F,
    y0: &[f64],
    times: &[f64],
    cfg: &OdeConfig,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    let n = y0.len();
    let mut out = Vec::with_capacity(times.len());
    if times.is_empty() {
        return Ok(out);
    }
    out.push(y0.to_vec());
    if times.len() == 1 {
        return Ok(out);
    }
    let t_start = times[0];
    let t_end = *times.last().unwrap();
    let dir = (t_end - t_start).signum();
    for w in times.windows(2) {
        if (w[1] - w[0]) * dir <= 0.0 {
            return Err(Error::invalid("query times must be strictly monotone"));
        }
    }
    let mut st = Stages::new(n);
    let mut y = y0.to_vec();
    let mut t = t_start;
    rhs(t, &y, &mut st.k[0]);
    check_finite(&st.k[0], t)?;
    let mut h = if cfg.initial_step > 0.0 {
        cfg.initial_step.min((t_end - t_start).abs())
    } else {
        let f0 = st.k[0].clone();
        initial_step(&mut rhs, t, &y, &f0, t_end - t_start, cfg)
    };
    let mut next_q = 1;
    let mut facold: f64 = 1e-4;
    let beta = 0.04;
    let expo1 = 0.2 - beta * 0.75;
    let mut steps = 0usize;
    let mut last_rejected = false;
    while next_q < times.len() {
        steps += 1;
        if steps > cfg.max_steps {
            return Err(Error::Integration {
                time: t,
                reason: format!("exceeded max_steps = {}", cfg.max_steps),
            });
        }
        let remaining = (t_end - t).abs();
        let mut hs = h.min(remaining);
        // Avoid a sliver final step.
        if remaining - hs < 1e-12 * remaining.max(1.0) {
            hs = remaining;
        }
        let last = hs >= remaining;
        let hd = hs * dir;
        dp5_step(&mut rhs, &y, t, hd, &mut st)?;
        let err = scaled_rms(&st.err, &y, &st.y_new, cfg);
        if !err.is_finite() {
            return Err(Error::Integration {
                time: t,
                reason: "non-finite error estimate".into(),
            });
        }
        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            let t_new = if last { t_end } else { t + hd };
            while next_q < times.len() {
                let tq = times[next_q];
                let reached = (tq - t_new) * dir <= 0.0;
                if !reached {
                    break;
                }
                let mut v = vec![0.0; n];
                if next_q == times.len() - 1 {
                    v.copy_from_slice(&st.y_new);
                } else {
                    let theta = (tq - t) / hd;
                    dense_eval(&y, &st, hd, theta, &mut v);
                }
                out.push(v);
                next_q += 1;
            }
            let mut fac = fac11 / facold.powf(beta);
            fac = (fac / cfg.safety).clamp(0.1, 5.0);
            let mut h_new = hs / fac;
            if last_rejected {
                h_new = h_new.min(hs);
            }
            facold = err.max(1e-4);
            y.copy_from_slice(&st.y_new);
            let k6 = std::mem::take(&mut st.k[6]);
            st.k[6] = std::mem::replace(&mut st.k[0], k6);
            t = t_new;
            h = h_new;
            last_rejected = false;
        } else {
            h = hs / (fac11 / cfg.safety).min(5.0);
            last_rejected = true;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Integration {
                time: t,
                reason: "step size underflow".into(),
            });
        }
    }
    Ok(out)
}

/// States at every query time (the first entry is `y0`).
pub fn integrate<V: VectorField + ?Sized>(
    field: &V,
    y0: &[f64],
    query_times: &[f64],
    cfg: &OdeConfig,
) -> Result<Vec<Vec<f64>>> {
    if y0.len() != field.dim() {
        return Err(Error::shape(
            "integrate",
            format!("state {} vs field dim {}", y0.len(), field.dim()),
        ));
    }
    if query_times.is_empty() {
        return Err(Error::invalid("no query times"));
    }
    if query_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("query times must be strictly increasing"));
    }
    solve(|t, y, dy| field.eval(y, t, dy), y0, query_times, cfg)
}

/// One embedded DP5(4) step; returns the 5th-order state and the Euclidean
/// norm of its difference from the embedded 4th-order solution.
pub fn dopri5_step<V: VectorField + ?Sized>(
    field: &V,
    y: &[f64],
    t: f64,
    h: f64,
) -> Result<(Vec<f64>, f64)> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step size must be > 0, got {h}")));
    }
    if y.len() != field.dim() {
        return Err(Error::shape(
            "dopri5_step",
            format!("state {} vs field dim {}", y.len(), field.dim()),
        ));
    }
    let mut st = Stages::new(y.len());
    field.eval(y, t, &mut st.k[0]);
    check_finite(&st.k[0], t)?;
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| field.eval(y, t, dy);
    dp5_step(&mut rhs, y, t, h, &mut st)?;
    let err = st.err.iter().map(|e| e * e).sum::<f64>().sqrt();
    Ok((st.y_new, err))
}

/// Fixed-step DP5 integration over `[t0, t1]` with `n_steps` equal steps.
pub fn integrate_fixed<V: VectorField + ?Sized>(
    field: &V,
    y0: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<Vec<f64>> {
    if n_steps == 0 || !(t1 > t0) {
        return Err(Error::invalid(
            "integrate_fixed needs n_steps >= 1 and t1 > t0",
        ));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut y = y0.to_vec();
    for i in 0..n_steps {
        let (yn, _) = dopri5_step(field, &y, t0 + i as f64 * h, h)?;
        y = yn;
    }
    Ok(y)
}

/// Augmented adjoint state at the initial time.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointBundle {
    /// State reconstructed by the backward sweep.
    pub state: Vec<f64>,
    /// `∂ℓ/∂y(t0)`.
    pub a_state: Vec<f64>,
    /// `∂ℓ/∂params`.
    pub a_params: Vec<f64>,
    /// `∂ℓ/∂t0`.
    pub a_time: f64,
}

/// Backward adjoint sweep. `cotangents[i]` is `∂ℓ/∂y(t_grid[i])`; all of
/// them are injected, the last one seeding the sweep at `y_end`.
pub fn integrate_adjoint<V: VectorField + ?Sized>(
    field: &V,
    y_end: &[f64],
    t_grid: &[f64],
    cotangents: &[Vec<f64>],
    cfg: &OdeConfig,
) -> Result<AdjointBundle> {
    let d = field.dim();
    let p = field.n_params();
    if y_end.len() != d {
        return Err(Error::shape(
            "integrate_adjoint",
            format!("y_end {} vs dim {d}", y_end.len()),
        ));
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "t_grid must be non-empty and strictly increasing",
        ));
    }
    if cotangents.len() != t_grid.len() {
        return Err(Error::shape(
            "integrate_adjoint",
            format!("{} cotangents for {} times", cotangents.len(), t_grid.len()),
        ));
    }
    if let Some(c) = cotangents.iter().find(|c| c.len() != d) {
        return Err(Error::shape(
            "integrate_adjoint",
            format!("cotangent length {} vs dim {d}", c.len()),
        ));
    }

    let n_aug = 2 * d + p + 1;
    let mut aug = vec![0.0; n_aug];
    let mut fbuf = vec![0.0; d];
    let last = t_grid.len() - 1;
    aug[..d].copy_from_slice(y_end);
    aug[d..2 * d].copy_from_slice(&cotangents[last]);
    field.eval(y_end, t_grid[last], &mut fbuf);
    aug[n_aug - 1] = -dot(&cotangents[last], &fbuf);

    let mut cs = vec![0.0; d];
    let mut cp = vec![0.0; p];
    for i in (1..t_grid.len()).rev() {
        let rhs = |t: f64, s: &[f64], ds: &mut [f64]| {
            let (y, rest) = s.split_at(d);
            let a = &rest[..d];
            let (dy, drest) = ds.split_at_mut(d);
            field.eval(y, t, dy);
            let ct = field.vjp(y, t, a, &mut cs, &mut cp);
            let (da, drest) = drest.split_at_mut(d);
            for (o, v) in da.iter_mut().zip(&cs) {
                *o = -v;
            }
            let (dp, dt) = drest.split_at_mut(p);
            for (o, v) in dp.iter_mut().zip(&cp) {
                *o = -v;
            }
            dt[0] = -ct;
        };
        let states = solve(rhs, &aug, &[t_grid[i], t_grid[i - 1]], cfg)?;
        aug = states.into_iter().nth(1).expect("two-point solve");
        let c = &cotangents[i - 1];
        for (a, v) in aug[d..2 * d].iter_mut().zip(c) {
            *a += v;
        }
        field.eval(&aug[..d], t_grid[i - 1], &mut fbuf);
        aug[n_aug - 1] -= dot(c, &fbuf);
    }
    Ok(AdjointBundle {
        state: aug[..d].to_vec(),
        a_state: aug[d..2 * d].to_vec(),
        a_params: aug[2 * d..2 * d + p].to_vec(),
        a_time: aug[n_aug - 1],
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
pub(crate) mod test_fields {
    use super::VectorField;

    /// `dy/dt = c * y` with the scalar rate `c` as the only parameter.
    pub struct Linear {
        pub c: f64,
        pub dim: usize,
    }

    impl VectorField for Linear {
        fn dim(&self) -> usize {
            self.dim
        }
        fn n_params(&self) -> usize {
            1
        }
        fn eval(&self, y: &[f64], _t: f64, out: &mut [f64]) {
            for (o, v) in out.iter_mut().zip(y) {
                *o = self.c * v;
            }
        }
        fn vjp(&self, y: &[f64], _t: f64, cot: &[f64], cs: &mut [f64], cp: &mut [f64]) -> f64 {
            for (o, a) in cs.iter_mut().zip(cot) {
                *o = self.c * a;
            }
            cp[0] = cot.iter().zip(y).map(|(a, v)| a * v).sum();
            0.0
        }
    }

    /// `dy/dt = g(t)` for a closure `g`, independent of the state.
    pub struct TimeOnly<G: Fn(f64) -> f64>(pub G);

    impl<G: Fn(f64) -> f64> VectorField for TimeOnly<G> {
        fn dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            0
        }
        fn eval(&self, _y: &[f64], t: f64, out: &mut [f64]) {
            out[0] = (self.0)(t);
        }
        fn vjp(&self, _y: &[f64], _t: f64, _cot: &[f64], cs: &mut [f64], _cp: &mut [f64]) -> f64 {
            cs[0] = 0.0;
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_fields::{Linear, TimeOnly};
    use super::*;

    #[test]
    fn exponential_decay() {
        let f = Linear { c: -1.0, dim: 1 };
        let cfg = OdeConfig {
            rtol: 1e-7,
            atol: 1e-9,
            ..OdeConfig::default()
        };
        let ys = integrate(&f, &[1.0], &[0.0, 1.0], &cfg).unwrap();
        assert!((ys[1][0] - 0.367_879_4).abs() < 1e-6);
    }

    #[test]
    fn zero_field_is_constant() {
        let f = Linear { c: 0.0, dim: 3 };
        let q: Vec<f64> = (0..10).map(|j| j as f64 / 9.0).collect();
        let ys = integrate(&f, &[1.0, -2.0, 0.5], &q, &OdeConfig::default()).unwrap();
        for y in ys {
            assert_eq!(y, vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn quadrature_of_linear_rate() {
        let f = TimeOnly(|t| 2.0 * t);
        let ys = integrate(&f, &[0.0], &[0.0, 0.25, 0.5], &OdeConfig::default()).unwrap();
        assert!((ys[2][0] - 0.25).abs() < 1e-8);
        assert!((ys[1][0] - 0.0625).abs() < 1e-8);
    }

    #[test]
    fn dense_output_matches_exact_solution() {
        let f = Linear { c: -1.0, dim: 1 };
        let q: Vec<f64> = (0..10).map(|j| j as f64 / 9.0).collect();
        let ys = integrate(&f, &[1.0], &q, &OdeConfig::tight(1e-10)).unwrap();
        for (t, y) in q.iter().zip(&ys) {
            assert!((y[0] - (-t).exp()).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn step_on_zero_and_constant_fields() {
        let (y, e) = dopri5_step(&Linear { c: 0.0, dim: 2 }, &[1.0, 2.0], 0.0, 0.3).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        assert_eq!(e, 0.0);
        let (y, _) = dopri5_step(&TimeOnly(|_| 1.0), &[0.5], 0.0, 0.1).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15);
        assert!(dopri5_step(&TimeOnly(|_| 1.0), &[0.5], 0.0, 0.0).is_err());
    }

    #[test]
    fn fixed_step_fifth_order() {
        // Global error at h and h/2; a 5th-order method gives a ratio near 32.
        let f = Linear { c: -1.0, dim: 1 };
        let exact = (-1.0f64).exp();
        let e1 = (integrate_fixed(&f, &[1.0], 0.0, 1.0, 4).unwrap()[0] - exact).abs();
        let e2 = (integrate_fixed(&f, &[1.0], 0.0, 1.0, 8).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((24.0..=40.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn nan_reports_time() {
        let f = TimeOnly(|t| if t > 0.5 { f64::NAN } else { 1.0 });
        let err = integrate(&f, &[0.0], &[0.0, 1.0], &OdeConfig::default()).unwrap_err();
        match err {
            Error::Integration { time, .. } => assert!(time > 0.0 && time <= 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_budget_exhaustion() {
        let f = Linear { c: -1.0, dim: 1 };
        let cfg = OdeConfig {
            max_steps: 2,
            rtol: 1e-12,
            atol: 1e-12,
            ..OdeConfig::default()
        };
        assert!(matches!(
            integrate(&f, &[1.0], &[0.0, 10.0], &cfg),
            Err(Error::Integration { .. })
        ));
    }

    #[test]
    fn adjoint_linear_at_zero_rate() {
        let f = Linear { c: 0.0, dim: 1 };
        let cfg = OdeConfig::tight(1e-10);
        let ys = integrate(&f, &[1.0], &[0.0, 1.0], &cfg).unwrap();
        let b = integrate_adjoint(&f, &ys[1], &[0.0, 1.0], &[vec![0.0], vec![1.0]], &cfg).unwrap();
        assert!((b.a_state[0] - 1.0).abs() < 1e-9);
        assert!((b.a_params[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adjoint_linear_rate_analytic() {
        // l = y(1) with y' = c y: dl/dy0 = e^c, dl/dc = e^c (y0 = 1).
        let c = 0.7;
        let f = Linear { c, dim: 1 };
        let cfg = OdeConfig::tight(1e-11);
        let ys = integrate(&f, &[1.0], &[0.0, 1.0], &cfg).unwrap();
        let b = integrate_adjoint(&f, &ys[1], &[0.0, 1.0], &[vec![0.0], vec![1.0]], &cfg).unwrap();
        assert!((b.a_state[0] - c.exp()).abs() < 1e-8);
        assert!((b.a_params[0] - c.exp()).abs() < 1e-8);
        assert!((b.state[0] - 1.0).abs() < 1e-8);
        // Autonomous field: dl/dt0 = -a(t0) f(y0).
        assert!((b.a_time + b.a_state[0] * c).abs() < 1e-8);
    }

    #[test]
    fn adjoint_zero_cotangent() {
        let f = Linear { c: 0.3, dim: 2 };
        let cfg = OdeConfig::default();
        let b = integrate_adjoint(
            &f,
            &[1.0, 2.0],
            &[0.0, 0.5, 1.0],
            &vec![vec![0.0; 2]; 3],
            &cfg,
        )
        .unwrap();
        assert!(b.a_state.iter().all(|&v| v == 0.0));
        assert!(b.a_params.iter().all(|&v| v == 0.0));
        assert_eq!(b.a_time, 0.0);
    }

    #[test]
    fn adjoint_rejects_mismatched_lengths() {
        let f = Linear { c: 0.3, dim: 2 };
        let cfg = OdeConfig::default();
        assert!(
            integrate_adjoint(&f, &[1.0], &[0.0, 1.0], &[vec![0.0; 2], vec![0.0; 2]], &cfg)
                .is_err()
        );
        assert!(integrate_adjoint(&f, &[1.0, 2.0], &[0.0, 1.0], &[vec![0.0; 2]], &cfg).is_err());
        assert!(integrate_adjoint(
            &f,
            &[1.0, 2.0],
            &[0.0, 1.0],
            &[vec![0.0; 2], vec![0.0; 3]],
            &cfg
        )
        .is_err());
    }

    #[test]
    fn intermediate_injections_sum() {
        // l = y(0.5) + y(1) for y' = c y, y0 = 1: dl/dy0 = e^{c/2} + e^{c}.
        let c = -0.4;
        let f = Linear { c, dim: 1 };
        let cfg = OdeConfig::tight(1e-11);
        let q = [0.0, 0.5, 1.0];
        let ys = integrate(&f, &[1.0], &q, &cfg).unwrap();
        let cots = vec![vec![0.0], vec![1.0], vec![1.0]];
        let b = integrate_adjoint(&f, &ys[2], &q, &cots, &cfg).unwrap();
        let expect = (0.5 * c).exp() + c.exp();
        assert!((b.a_state[0] - expect).abs() < 1e-8);
        let dparam = 0.5 * (0.5 * c).exp() + c.exp();
        assert!((b.a_params[0] - dparam).abs() < 1e-8);
    }
}
