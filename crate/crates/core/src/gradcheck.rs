//! Finite-difference and oracle suites for every differentiable stage.
//! Each suite reports one error metric against a pinned tolerance.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::{make_coils, make_phantom, simulate_coil_images, Sample};
use crate::diffcore::{NodeId, Tape};
use crate::error::Result;
use crate::field::FieldParams;
use crate::geometry::{init_radial, PhysicsLimits};
use crate::nufft::{ndft_adjoint, ndft_forward, ComplexImage, GriddingConfig, NufftPlan};
use crate::objective::{self, SsimConfig};
use crate::odecore::{integrate, integrate_adjoint, integrate_fixed, OdeConfig, VectorField};
use crate::par::Exec;
use crate::pipeline::{
    backward_pipeline, forward_pipeline, Lambdas, Model, PipelineConfig, TrajectoryModel,
};
use crate::recon;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    /// `metric ≤ tolerance`, or the metric lies inside `[lo, hi]` for
    /// range-checked suites.
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn below(name: &str, metric: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            metric,
            tolerance,
            passed: metric <= tolerance,
            detail,
        }
    }
}

/// `max_i |a_i − b_i| / max_i |b_i|`.
pub fn max_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// Central differences of `f` at `x` along every coordinate in `coords`.
pub fn central_differences(
    x: &[f64],
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let dn = f(&p);
            p[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn rel_norm(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
        .collect()
}

fn random_complex(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect()
}

/// Worst of the forward and adjoint relative errors against the NDFT.
pub fn nufft_oracle_with(
    grid: usize,
    n_points: usize,
    seed: u64,
    cfg: &GriddingConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = random_points(n_points, &mut rng);
    let img = ComplexImage::new(grid, random_complex(grid * grid, &mut rng))?;
    let y = random_complex(n_points, &mut rng);
    let plan = NufftPlan::new(grid, cfg)?;
    let ip = plan.prepare(&pts)?;
    let e_fwd = rel_norm(&plan.forward(&ip, &img)?, &ndft_forward(&img, &pts));
    let e_adj = rel_norm(
        plan.adjoint(&ip, &y)?.data(),
        ndft_adjoint(&y, &pts, grid).data(),
    );
    Ok(e_fwd.max(e_adj))
}

/// NUFFT forward/adjoint against the direct NDFT plus the adjointness
/// identity, on `grid²` with `n_points` random locations.
pub fn nufft_oracle(grid: usize, n_points: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GriddingConfig::default();
    let pts = random_points(n_points, &mut rng);
    let img = ComplexImage::new(grid, random_complex(grid * grid, &mut rng))?;
    let y = random_complex(n_points, &mut rng);
    let plan = NufftPlan::new(grid, &cfg)?;
    let ip = plan.prepare(&pts)?;
    let fx = plan.forward(&ip, &img)?;
    let fy = plan.adjoint(&ip, &y)?;
    let e_fwd = rel_norm(&fx, &ndft_forward(&img, &pts));
    let e_adj = rel_norm(fy.data(), ndft_adjoint(&y, &pts, grid).data());
    let lhs: Complex64 = fx.iter().zip(&y).map(|(a, b)| a * b.conj()).sum();
    let rhs: Complex64 = img
        .data()
        .iter()
        .zip(fy.data())
        .map(|(a, b)| a * b.conj())
        .sum();
    let nx: f64 = fx.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let e_dot = (lhs - rhs).norm() / (nx * ny);
    let tag = format!("{grid}x{grid}, {n_points} points");
    Ok(vec![
        SuiteResult::below(&format!("nufft-forward-{grid}"), e_fwd, 1e-5, tag.clone()),
        SuiteResult::below(&format!("nufft-adjoint-{grid}"), e_adj, 1e-5, tag.clone()),
        SuiteResult::below(&format!("nufft-adjointness-{grid}"), e_dot, 1e-10, tag),
    ])
}

/// Sample-location gradients of `Re⟨c, F(x)⟩` and `Re⟨C, Fᴴ(s)⟩` against
/// central differences.
pub fn nufft_point_grad_check(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 16;
    let cfg = GriddingConfig::default();
    let plan = NufftPlan::new(grid, &cfg)?;
    let pts = random_points(40, &mut rng);
    let img = ComplexImage::new(grid, random_complex(grid * grid, &mut rng))?;
    let c = random_complex(pts.len(), &mut rng);
    let s = random_complex(pts.len(), &mut rng);
    let cimg = ComplexImage::new(grid, random_complex(grid * grid, &mut rng))?;
    let ip = plan.prepare(&pts)?;
    let gf = plan.forward_point_grad(&ip, &img, &c)?;
    let ga = plan.adjoint_point_grad(&ip, &s, &cimg)?;
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    let unflat = |p: &[f64]| -> Vec<[f64; 2]> { p.chunks(2).map(|q| [q[0], q[1]]).collect() };
    let coords: Vec<usize> = (0..flat.len()).collect();
    let fd_f = central_differences(&flat, &coords, 1e-6, |p| {
        let v = ndft_forward(&img, &unflat(p));
        v.iter().zip(&c).map(|(a, b)| (a * b.conj()).re).sum()
    });
    let fd_a = central_differences(&flat, &coords, 1e-6, |p| {
        let v = ndft_adjoint(&s, &unflat(p), grid);
        v.data()
            .iter()
            .zip(cimg.data())
            .map(|(a, b)| (a * b.conj()).re)
            .sum()
    });
    let an_f: Vec<f64> = gf.iter().flatten().copied().collect();
    let an_a: Vec<f64> = ga.iter().flatten().copied().collect();
    let e = max_rel_error(&an_f, &fd_f).max(max_rel_error(&an_a, &fd_a));
    Ok(SuiteResult::below(
        "nufft-point-grad",
        e,
        1e-4,
        "16x16, 40 points".into(),
    ))
}

/// Adjoint-method parameter and initial-state gradients of a random
/// field of dimension 8 against finite differences of full solves.
pub fn ode_adjoint_check(seed: u64) -> Result<SuiteResult> {
    let dim = 8;
    let mut field = FieldParams::init(dim, 8, true, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAD70);
    for v in field.flat_mut() {
        *v = rng.gen_range(-0.6..0.6);
    }
    let y0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let times: Vec<f64> = (0..5).map(|j| j as f64 / 4.0).collect();
    let w: Vec<Vec<f64>> = times
        .iter()
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let cfg = OdeConfig::tight(1e-11);
    let loss = |f: &FieldParams, y: &[f64]| -> f64 {
        let ys = integrate(f, y, &times, &cfg).expect("smooth field integrates");
        ys.iter()
            .zip(&w)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>())
            .sum()
    };
    let ys = integrate(&field, &y0, &times, &cfg)?;
    let b = integrate_adjoint(&field, ys.last().expect("query times"), &times, &w, &cfg)?;
    let theta = field.flat().to_vec();
    let coords: Vec<usize> = (0..theta.len()).collect();
    let fd_p = central_differences(&theta, &coords, 1e-6, |p| {
        let f = FieldParams::from_flat(dim, 8, true, p.to_vec()).expect("same layout");
        loss(&f, &y0)
    });
    let fd_s = central_differences(&y0, &(0..dim).collect::<Vec<_>>(), 1e-6, |y| {
        loss(&field, y)
    });
    let e = max_rel_error(&b.a_params, &fd_p).max(max_rel_error(&b.a_state, &fd_s));
    Ok(SuiteResult::below(
        "ode-adjoint",
        e,
        1e-4,
        format!("dim {dim}, {} params", theta.len()),
    ))
}

struct Decay;

impl VectorField for Decay {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        0
    }
    fn eval(&self, y: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = -y[0];
    }
    fn vjp(&self, _y: &[f64], _t: f64, cot: &[f64], cs: &mut [f64], _cp: &mut [f64]) -> f64 {
        cs[0] = -cot[0];
        0.0
    }
}

/// Global error ratio of fixed-step Dormand–Prince at `h` and `h/2` on
/// `dy/dt = −y` over `[0, 1]`; fifth order gives about 32.
pub fn solver_order_ratio() -> Result<f64> {
    let exact = (-1.0f64).exp();
    let e = |n: usize| -> Result<f64> {
        Ok((integrate_fixed(&Decay, &[1.0], 0.0, 1.0, n)?[0] - exact).abs())
    };
    Ok(e(8)? / e(16)?)
}

pub fn solver_order_check() -> Result<SuiteResult> {
    let r = solver_order_ratio()?;
    Ok(SuiteResult {
        name: "dopri5-order".into(),
        metric: r,
        tolerance: 40.0,
        passed: (24.0..=40.0).contains(&r),
        detail: "error ratio h vs h/2, accepted range [24, 40]".into(),
    })
}

/// Reverse-mode gradients of a small encoder–decoder with a hybrid loss
/// against central differences.
pub fn diffcore_check(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let target: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let w1: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let w2: Vec<f64> = (0..2 * 4 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let wh: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let bh = vec![0.1];
    let ssim = SsimConfig {
        window: 3,
        ..SsimConfig::default()
    };
    let build = |vals: &[Vec<f64>]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut t = Tape::new();
        let shapes: [&[usize]; 5] = [
            &[1, n, n],
            &[2, 1, 3, 3],
            &[2, 4, 3, 3],
            &[1, 2, 1, 1],
            &[1],
        ];
        let ids: Vec<NodeId> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| t.param(v.clone(), s))
            .collect::<Result<_>>()?;
        let a = t.conv2d(ids[0], ids[1], None)?;
        let a = t.instance_norm(a)?;
        let a = t.leaky_relu(a);
        let p = t.max_pool2d(a)?;
        let u = t.upsample2(p)?;
        let c = t.concat(&[a, u])?;
        let b = t.conv2d(c, ids[2], None)?;
        let b = t.leaky_relu(b);
        let o = t.conv2d(b, ids[3], Some(ids[4]))?;
        let y = t.constant(target.clone(), &[1, n, n])?;
        let (loss, _, _) = objective::hybrid_tape(&mut t, o, y, 0.7, &ssim)?;
        Ok((t, ids, loss))
    };
    let base = vec![x, w1, w2, wh, bh];
    let (mut t, ids, out) = build(&base)?;
    let g = t.backward(out)?;
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for (li, id) in ids.iter().enumerate() {
        let gl = g
            .get(*id)
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; base[li].len()]);
        let coords: Vec<usize> = (0..base[li].len()).collect();
        let f = central_differences(&base[li], &coords, 1e-6, |p| {
            let mut vals = base.clone();
            vals[li] = p.to_vec();
            let (tt, _, o) = build(&vals).expect("same shapes");
            tt.scalar(o)
        });
        an.extend(gl);
        fd.extend(f);
    }
    let e = max_rel_error(&an, &fd);
    Ok(SuiteResult::below(
        "diffcore",
        e,
        1e-5,
        "conv/norm/pool/upsample/concat + hybrid loss".into(),
    ))
}

/// Per-group errors of the end-to-end pipeline gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineCheck {
    pub field: f64,
    pub control: f64,
    pub recon: f64,
}

impl PipelineCheck {
    pub fn worst(&self) -> f64 {
        self.field.max(self.control).max(self.recon)
    }
}

/// Small joint model: 16² phantom, 2 radial shots, 8 control points of
/// 10 samples, field width 8, two-level recon net.
pub fn small_pipeline(seed: u64) -> Result<(Model, Vec<Sample>, PipelineConfig)> {
    let grid = 16;
    let template = init_radial(2, 80, 0.45, 4e-6)?;
    let mut field = FieldParams::init(2 * 8 * 2, 8, true, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let n_first = field.hidden() * field.in_width() + field.hidden();
    for v in &mut field.flat_mut()[n_first..] {
        *v = rng.gen_range(-0.05..0.05);
    }
    let model = Model {
        traj: TrajectoryModel::new(template, 8, field)?,
        recon: recon::recon_build(2, 2, seed.wrapping_add(1))?,
    };
    let coils = make_coils(grid, 2, seed)?;
    let samples = (0..2)
        .map(|i| {
            let ph = make_phantom(grid, seed.wrapping_add(10 + i as u64), 3)?;
            Ok(Sample {
                id: i,
                coils: simulate_coil_images(&ph.image, &coils)?,
                image: ph.image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = PipelineConfig {
        ode: OdeConfig::tight(1e-11),
        limits: PhysicsLimits {
            matrix: grid,
            ..PhysicsLimits::default()
        },
        ..PipelineConfig::default()
    };
    Ok((model, samples, cfg))
}

/// End-to-end gradients of the batch loss with respect to every field
/// parameter, every control point and a spread of recon weights, against
/// central differences.
pub fn pipeline_check(seed: u64) -> Result<PipelineCheck> {
    let (model, samples, cfg) = small_pipeline(seed)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let lambdas = Lambdas {
        velocity: 0.1,
        acceleration: 0.1,
    };
    let total = |m: &Model| -> f64 {
        forward_pipeline(m, &batch, lambdas, &cfg, Exec::Sequential)
            .expect("forward pass")
            .1
            .total
    };
    let (_, _, inter) = forward_pipeline(&model, &batch, lambdas, &cfg, Exec::Sequential)?;
    let g = backward_pipeline(&model, &batch, inter, &cfg, Exec::Sequential, 1.0, true)?;

    let h = 1e-6;
    let theta = model.traj.field.flat().to_vec();
    let fd_field = central_differences(&theta, &(0..theta.len()).collect::<Vec<_>>(), h, |p| {
        let mut m = model.clone();
        m.traj.field.flat_mut().copy_from_slice(p);
        total(&m)
    });
    let ctrl = model.traj.control.clone();
    let fd_ctrl = central_differences(&ctrl, &(0..ctrl.len()).collect::<Vec<_>>(), h, |p| {
        let mut m = model.clone();
        m.traj.control.copy_from_slice(p);
        total(&m)
    });
    let rp = model.recon.flat().to_vec();
    let stride = (rp.len() / 60).max(1);
    let coords: Vec<usize> = (0..rp.len()).step_by(stride).collect();
    let fd_recon = central_differences(&rp, &coords, h, |p| {
        let mut m = model.clone();
        m.recon.flat_mut().copy_from_slice(p);
        total(&m)
    });
    let an_recon: Vec<f64> = coords.iter().map(|&i| g.recon[i]).collect();
    Ok(PipelineCheck {
        field: max_rel_error(&g.field, &fd_field),
        control: max_rel_error(&g.control, &fd_ctrl),
        recon: max_rel_error(&an_recon, &fd_recon),
    })
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    out.extend(nufft_oracle(16, 500, seed)?);
    out.extend(nufft_oracle(32, 500, seed.wrapping_add(1))?);
    out.push(nufft_point_grad_check(seed)?);
    out.push(solver_order_check()?);
    out.push(ode_adjoint_check(seed)?);
    out.push(diffcore_check(seed)?);
    let p = pipeline_check(seed)?;
    out.push(SuiteResult::below(
        "pipeline-end-to-end",
        p.worst(),
        5e-3,
        format!(
            "field {:.2e}, control {:.2e}, recon {:.2e}",
            p.field, p.control, p.recon
        ),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_rel_error_scales_by_reference() {
        assert_eq!(max_rel_error(&[1.0, 2.0], &[1.0, 4.0]), 0.5);
        assert_eq!(max_rel_error(&[0.1], &[0.0]), 0.1);
    }

    #[test]
    fn central_differences_of_quadratic() {
        let d = central_differences(&[1.0, 2.0, 3.0], &[0, 2], 1e-3, |p| {
            p.iter().map(|v| v * v).sum()
        });
        assert!((d[0] - 2.0).abs() < 1e-9 && (d[1] - 6.0).abs() < 1e-9);
    }
}
