//! Differentiable chain from control points to reconstructed images:
//! ODE → dense trajectory → band clamp → NUFFT acquisition → adjoint
//! images → RSS → residual network → hybrid loss, plus kinematic penalties.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::datakit::Sample;
use crate::diffcore::{NodeId, Tape};
use crate::error::{Error, Result, StageExt};
use crate::field::FieldParams;
use crate::geometry::{self, ConstraintReport, PhysicsLimits, Trajectory};
use crate::nufft::{ComplexImage, GriddingConfig, Interp, NufftPlan};
use crate::objective::{self, LossReport, SsimConfig};
use crate::odecore::{integrate, integrate_adjoint, OdeConfig, VectorField};
use crate::par::Exec;
use crate::recon::{self, BoundRecon, ReconParams};

/// Identity region of the band clamp.
pub const BAND_KNEE: f64 = 0.49;
/// Asymptote of the band clamp, strictly inside the sampled band.
pub const BAND_LIMIT: f64 = 0.4999;

/// Smooth saturation keeping coordinates inside `(-BAND_LIMIT, BAND_LIMIT)`;
/// returns `(value, derivative)`.
pub fn band_clamp(v: f64) -> (f64, f64) {
    let a = v.abs();
    if a <= BAND_KNEE {
        return (v, 1.0);
    }
    let w = BAND_LIMIT - BAND_KNEE;
    let th = ((a - BAND_KNEE) / w).tanh();
    (v.signum() * (BAND_KNEE + w * th), 1.0 - th * th)
}

/// Settings that shape the forward chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub mu: f64,
    pub ode: OdeConfig,
    pub gridding: GriddingConfig,
    pub limits: PhysicsLimits,
    pub ssim: SsimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            ode: OdeConfig::default(),
            gridding: GriddingConfig::default(),
            limits: PhysicsLimits::default(),
            ssim: SsimConfig::default(),
        }
    }
}

/// Neural-ODE trajectory: a fixed template, control points (ODE initial
/// states) and the vector field.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryModel {
    template: Trajectory,
    n_control: usize,
    pub control: Vec<f64>,
    pub field: FieldParams,
}

/// Dense trajectory with the state needed for the backward sweep.
#[derive(Clone, Debug)]
pub struct DenseTrajectory {
    pub shots: usize,
    pub samples_per_shot: usize,
    /// Pre-clamp coordinates.
    pub raw: Vec<[f64; 2]>,
    /// Coordinates fed to the NUFFT.
    pub points: Vec<[f64; 2]>,
    clamp_deriv: Vec<[f64; 2]>,
    states: Vec<Vec<f64>>,
}

impl DenseTrajectory {
    pub fn trajectory(&self, dwell: f64) -> Result<Trajectory> {
        Trajectory::new(
            self.shots,
            self.samples_per_shot,
            self.points.clone(),
            dwell,
        )
    }
}

impl TrajectoryModel {
    pub fn new(template: Trajectory, n_control: usize, field: FieldParams) -> Result<Self> {
        let cs = geometry::extract_control_points(&template, n_control)?;
        if template.samples_per_shot() / n_control < 2 {
            return Err(Error::invalid("each segment needs at least 2 samples"));
        }
        if VectorField::dim(&field) != cs.values.len() {
            return Err(Error::shape(
                "TrajectoryModel::new",
                format!(
                    "field dim {} vs control state {}",
                    VectorField::dim(&field),
                    cs.values.len()
                ),
            ));
        }
        Ok(Self {
            template,
            n_control,
            control: cs.values,
            field,
        })
    }

    pub fn template(&self) -> &Trajectory {
        &self.template
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn samples_per_segment(&self) -> usize {
        self.template.samples_per_shot() / self.n_control
    }

    /// Segment-local query times `j / (m − 1)`.
    pub fn query_times(&self) -> Vec<f64> {
        let m = self.samples_per_segment();
        (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
    }

    /// Sample index `(shot, control, j)` → flat point index and template
    /// offset from the segment start.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let m = self.samples_per_segment();
        let nc = self.n_control;
        let sps = self.template.samples_per_shot();
        (0..self.template.shots()).flat_map(move |s| {
            (0..nc).flat_map(move |c| (0..m).map(move |j| (s, c, j, s * sps + c * m + j)))
        })
    }

    pub fn dense(&self, ode: &OdeConfig) -> Result<DenseTrajectory> {
        let tq = self.query_times();
        let states = integrate(&self.field, &self.control, &tq, ode)?;
        let tp = self.template.points();
        let m = self.samples_per_segment();
        let sps = self.template.samples_per_shot();
        let n = tp.len();
        let mut raw = vec![[0.0; 2]; n];
        let mut points = vec![[0.0; 2]; n];
        let mut clamp_deriv = vec![[0.0; 2]; n];
        for (s, c, j, idx) in self.layout() {
            let seg0 = tp[s * sps + c * m];
            let sidx = (s * self.n_control + c) * 2;
            for d in 0..2 {
                let r = states[j][sidx + d] + (tp[idx][d] - seg0[d]);
                let (v, dv) = band_clamp(r);
                raw[idx][d] = r;
                points[idx][d] = v;
                clamp_deriv[idx][d] = dv;
            }
        }
        Ok(DenseTrajectory {
            shots: self.template.shots(),
            samples_per_shot: sps,
            raw,
            points,
            clamp_deriv,
            states,
        })
    }

    /// Adjoint sweep from `∂L/∂raw` to `(∂L/∂field, ∂L/∂control)`.
    pub fn backward(
        &self,
        dense: &DenseTrajectory,
        d_raw: &[[f64; 2]],
        ode: &OdeConfig,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let tq = self.query_times();
        let dim = self.control.len();
        let mut cots = vec![vec![0.0; dim]; tq.len()];
        for (s, c, j, idx) in self.layout() {
            let sidx = (s * self.n_control + c) * 2;
            cots[j][sidx] += d_raw[idx][0];
            cots[j][sidx + 1] += d_raw[idx][1];
        }
        let last = dense.states.last().expect("at least one query time");
        let b = integrate_adjoint(&self.field, last, &tq, &cots, ode)?;
        Ok((b.a_params, b.a_state))
    }
}

/// Penalty values and their gradient w.r.t. the raw trajectory.
#[derive(Clone, Debug)]
pub struct PenaltyEval {
    pub penalty_v: f64,
    pub penalty_a: f64,
    pub grad_v: Vec<[f64; 2]>,
    pub grad_a: Vec<[f64; 2]>,
}

/// Soft-shrinkage penalties on per-sample speed and acceleration, in units
/// of the hardware limit: `mean max(|v| / v_max − 1, 0)` and likewise for
/// acceleration.
pub fn kinematic_penalties(
    points: &[[f64; 2]],
    shots: usize,
    sps: usize,
    limits: &PhysicsLimits,
) -> Result<PenaltyEval> {
    let kin = geometry::kinematics_of(points, shots, sps, limits.dwell, limits)?;
    let vmax = limits.max_velocity();
    let amax = limits.max_acceleration();
    let q = limits.k_scale();
    let dt = limits.dwell;
    let n = points.len();
    let mut grad_v = vec![[0.0; 2]; n];
    let mut grad_a = vec![[0.0; 2]; n];

    let rel_v: Vec<f64> = kin
        .velocity
        .iter()
        .map(|v| v[0].hypot(v[1]) / vmax)
        .collect();
    let rel_a: Vec<f64> = kin
        .acceleration
        .iter()
        .map(|a| a[0].hypot(a[1]) / amax)
        .collect();
    let penalty_v = objective::shrinkage_penalty(&rel_v, 1.0)?;
    let penalty_a = objective::shrinkage_penalty(&rel_a, 1.0)?;
    let gv = objective::shrinkage_grad(&rel_v, 1.0);
    let ga = objective::shrinkage_grad(&rel_a, 1.0);

    for s in 0..shots {
        for i in 0..sps - 1 {
            let e = s * (sps - 1) + i;
            if gv[e] == 0.0 {
                continue;
            }
            let v = kin.velocity[e];
            let nv = v[0].hypot(v[1]);
            for d in 0..2 {
                let dv = gv[e] * v[d] / (nv * vmax) * q / dt;
                grad_v[s * sps + i + 1][d] += dv;
                grad_v[s * sps + i][d] -= dv;
            }
        }
        for i in 0..sps - 2 {
            let e = s * (sps - 2) + i;
            if ga[e] == 0.0 {
                continue;
            }
            let a = kin.acceleration[e];
            let na = a[0].hypot(a[1]);
            for d in 0..2 {
                let da = ga[e] * a[d] / (na * amax) * q / (dt * dt);
                grad_a[s * sps + i + 2][d] += da;
                grad_a[s * sps + i + 1][d] -= 2.0 * da;
                grad_a[s * sps + i][d] += da;
            }
        }
    }
    Ok(PenaltyEval {
        penalty_v,
        penalty_a,
        grad_v,
        grad_a,
    })
}

/// Constraint fractions of a dense trajectory (post-clamp).
pub fn constraint_report(
    dense: &DenseTrajectory,
    limits: &PhysicsLimits,
) -> Result<ConstraintReport> {
    let kin = geometry::kinematics_of(
        &dense.points,
        dense.shots,
        dense.samples_per_shot,
        limits.dwell,
        limits,
    )?;
    Ok(geometry::check_limits(&kin, limits))
}

/// Sampling operator for one trajectory: NUFFT plan, interpolation
/// footprint and the DC gain used to normalize intermediate images.
pub struct Acquisition {
    plan: NufftPlan,
    interp: Interp,
    ones: ComplexImage,
    dc_gain: f64,
}

impl Acquisition {
    pub fn new(grid: usize, points: &[[f64; 2]], gridding: &GriddingConfig) -> Result<Self> {
        let plan = NufftPlan::new(grid, gridding)?;
        let interp = plan.prepare(points)?;
        let ones = ComplexImage::from_real(grid, &vec![1.0; grid * grid])?;
        let dc_gain: f64 = plan.forward(&interp, &ones)?.iter().map(|z| z.re).sum();
        if !(dc_gain > 0.0) || !dc_gain.is_finite() {
            return Err(Error::invalid(format!(
                "trajectory DC gain {dc_gain} is not positive"
            )));
        }
        Ok(Self {
            plan,
            interp,
            ones,
            dc_gain,
        })
    }

    pub fn grid(&self) -> usize {
        self.plan.grid()
    }

    pub fn dc_gain(&self) -> f64 {
        self.dc_gain
    }

    /// `∂g0/∂k_j` for the DC gain `g0 = Σ_j Re F(1)(k_j)`.
    pub fn dc_gain_grad(&self) -> Result<Vec<[f64; 2]>> {
        let cot = vec![Complex64::new(1.0, 0.0); self.interp.len()];
        self.plan.forward_point_grad(&self.interp, &self.ones, &cot)
    }

    /// Intermediate image `RSS_c(Fᴴ F(S_c I)) / g0` and the per-coil data
    /// needed to differentiate it.
    pub fn intermediate(&self, coils: &[ComplexImage]) -> Result<IntermediateImage> {
        let mut samples = Vec::with_capacity(coils.len());
        let mut adj = Vec::with_capacity(coils.len());
        for c in coils {
            let s = self.plan.forward(&self.interp, c)?;
            adj.push(self.plan.adjoint(&self.interp, &s)?);
            samples.push(s);
        }
        let rss = recon::rss(&adj)?;
        let image = rss.iter().map(|v| v / self.dc_gain).collect();
        Ok(IntermediateImage {
            image,
            rss,
            samples,
            adj,
        })
    }

    /// Gradient w.r.t. the sample locations of `L(image)` given
    /// `∂L/∂image`; returns `(∂L/∂k, ∂L/∂g0)`.
    pub fn intermediate_backward(
        &self,
        coils: &[ComplexImage],
        inter: &IntermediateImage,
        d_image: &[f64],
    ) -> Result<(Vec<[f64; 2]>, f64)> {
        let g0 = self.dc_gain;
        let d_g0 = -d_image
            .iter()
            .zip(&inter.rss)
            .map(|(g, r)| g * r)
            .sum::<f64>()
            / (g0 * g0);
        let n = self.grid();
        let mut grad = vec![[0.0; 2]; self.interp.len()];
        for (c, coil) in coils.iter().enumerate() {
            let z = &inter.adj[c];
            let cot_img: Vec<Complex64> = z
                .data()
                .iter()
                .zip(d_image)
                .zip(&inter.rss)
                .map(|((zv, &g), &r)| {
                    if r > 0.0 {
                        zv * (g / (g0 * r))
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect();
            let cot_img = ComplexImage::new(n, cot_img)?;
            let ga = self
                .plan
                .adjoint_point_grad(&self.interp, &inter.samples[c], &cot_img)?;
            let cot_s = self.plan.forward(&self.interp, &cot_img)?;
            let gf = self.plan.forward_point_grad(&self.interp, coil, &cot_s)?;
            for ((o, a), f) in grad.iter_mut().zip(&ga).zip(&gf) {
                o[0] += a[0] + f[0];
                o[1] += a[1] + f[1];
            }
        }
        Ok((grad, d_g0))
    }
}

#[derive(Clone, Debug)]
pub struct IntermediateImage {
    pub image: Vec<f64>,
    rss: Vec<f64>,
    samples: Vec<Vec<Complex64>>,
    adj: Vec<ComplexImage>,
}

/// Per-sample image losses and metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImageMetrics {
    pub image_loss: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Recorded recon forward pass awaiting its backward sweep.
pub struct ReconPass {
    tape: Tape,
    bound: BoundRecon,
    x: NodeId,
    loss: NodeId,
    pub output: Vec<f64>,
    pub metrics: ImageMetrics,
}

/// Run the reconstruction network on an intermediate image and score the
/// result against `target`.
pub fn recon_pass(
    params: &ReconParams,
    x: &[f64],
    target: &[f64],
    grid: usize,
    cfg: &PipelineConfig,
    trainable: bool,
) -> Result<ReconPass> {
    let mut tape = Tape::new();
    let bound = recon::recon_bind(params, &mut tape, trainable)?;
    let xn = tape.leaf(x.to_vec(), &[1, grid, grid], true)?;
    let out = recon::recon_forward(params, &bound, &mut tape, xn)?;
    let tg = tape.constant(target.to_vec(), &[1, grid, grid])?;
    let (loss, l1, s) = objective::hybrid_tape(&mut tape, out, tg, cfg.mu, &cfg.ssim)?;
    let output = tape.value(out).to_vec();
    let ssim = tape.scalar(s);
    let metrics = ImageMetrics {
        image_loss: tape.scalar(loss),
        l1: tape.scalar(l1),
        ssim_loss: 1.0 - ssim,
        psnr: objective::psnr(&output, target, 1.0)?,
        ssim,
    };
    Ok(ReconPass {
        tape,
        bound,
        x: xn,
        loss,
        output,
        metrics,
    })
}

impl ReconPass {
    /// `(∂loss/∂recon params, ∂loss/∂x)`.
    pub fn backward(mut self, params: &ReconParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.tape.backward(self.loss)?;
        let gp = self.bound.gather_grad(params, &g);
        let gx = g
            .get(self.x)
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; self.output.len()]);
        Ok((gp, gx))
    }
}

/// Trainable state of the joint model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub traj: TrajectoryModel,
    pub recon: ReconParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub field: Vec<f64>,
    pub control: Vec<f64>,
    pub recon: Vec<f64>,
}

impl ModelGrads {
    pub fn scale(&mut self, s: f64) {
        for v in self
            .field
            .iter_mut()
            .chain(&mut self.control)
            .chain(&mut self.recon)
        {
            *v *= s;
        }
    }
}

/// Weights on the kinematic penalties.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Lambdas {
    pub velocity: f64,
    pub acceleration: f64,
}

struct SampleCache {
    inter: IntermediateImage,
    pass: ReconPass,
}

/// Everything the backward pass needs from [`forward_pipeline`].
pub struct Intermediates {
    dense: DenseTrajectory,
    acq: Acquisition,
    penalties: PenaltyEval,
    lambdas: Lambdas,
    cache: Vec<SampleCache>,
}

impl Intermediates {
    pub fn dense(&self) -> &DenseTrajectory {
        &self.dense
    }

    pub fn intermediate_image(&self, i: usize) -> &[f64] {
        &self.cache[i].inter.image
    }

    pub fn sample_metrics(&self) -> Vec<ImageMetrics> {
        self.cache.iter().map(|c| c.pass.metrics).collect()
    }
}

/// Batch-mean loss report and per-sample outputs for `samples`.
pub fn forward_pipeline(
    model: &Model,
    samples: &[&Sample],
    lambdas: Lambdas,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<(Vec<Vec<f64>>, LossReport, Intermediates)> {
    if samples.is_empty() {
        return Err(Error::invalid("forward_pipeline needs at least one sample"));
    }
    let dense = model.traj.dense(&cfg.ode).stage("trajectory ODE")?;
    let t = &model.traj.template;
    let penalties = kinematic_penalties(&dense.raw, t.shots(), t.samples_per_shot(), &cfg.limits)
        .stage("kinematics")?;
    let grid = cfg.limits.matrix;
    let acq = Acquisition::new(grid, &dense.points, &cfg.gridding).stage("acquisition")?;
    let results: Vec<Result<SampleCache>> = exec.map(samples, |s| {
        let inter = acq.intermediate(&s.coils).stage("nufft")?;
        let pass = recon_pass(&model.recon, &inter.image, &s.image, grid, cfg, true)
            .stage("reconstruction")?;
        Ok(SampleCache { inter, pass })
    });
    let cache = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = batch_report(cache.iter().map(|c| c.pass.metrics), &penalties, lambdas);
    let outputs = cache.iter().map(|c| c.pass.output.clone()).collect();
    Ok((
        outputs,
        report,
        Intermediates {
            dense,
            acq,
            penalties,
            lambdas,
            cache,
        },
    ))
}

fn batch_report(
    metrics: impl Iterator<Item = ImageMetrics>,
    pen: &PenaltyEval,
    lambdas: Lambdas,
) -> LossReport {
    let mut r = LossReport::default();
    let mut n = 0.0;
    for m in metrics {
        r.image_loss += m.image_loss;
        r.l1 += m.l1;
        r.ssim_loss += m.ssim_loss;
        n += 1.0;
    }
    r.image_loss /= n;
    r.l1 /= n;
    r.ssim_loss /= n;
    r.penalty_v = pen.penalty_v;
    r.penalty_a = pen.penalty_a;
    r.total =
        r.image_loss + lambdas.velocity * pen.penalty_v + lambdas.acceleration * pen.penalty_a;
    r
}

/// Recon-parameter gradient, sample-location gradient and DC-gain
/// cotangent of one batch element.
type SampleGrad = (Vec<f64>, Vec<[f64; 2]>, f64);

/// Gradients of the batch-mean total loss, multiplied by `seed`.
pub fn backward_pipeline(
    model: &Model,
    samples: &[&Sample],
    inter: Intermediates,
    cfg: &PipelineConfig,
    exec: Exec,
    seed: f64,
    want_trajectory: bool,
) -> Result<ModelGrads> {
    if samples.len() != inter.cache.len() {
        return Err(Error::shape(
            "backward_pipeline",
            "sample count differs from forward pass",
        ));
    }
    let Intermediates {
        dense,
        acq,
        penalties,
        lambdas,
        cache,
    } = inter;
    let nb = samples.len() as f64;
    let pairs: Vec<(SampleCache, &Sample)> =
        cache.into_iter().zip(samples.iter().copied()).collect();
    let per_sample: Vec<Result<SampleGrad>> = exec.map_owned(pairs, |(c, s)| {
        let (gp, gx) = c
            .pass
            .backward(&model.recon)
            .stage("reconstruction backward")?;
        if !want_trajectory {
            return Ok((gp, Vec::new(), 0.0));
        }
        let (gk, g0) = acq
            .intermediate_backward(&s.coils, &c.inter, &gx)
            .stage("nufft backward")?;
        Ok((gp, gk, g0))
    });

    let mut recon_grad = vec![0.0; model.recon.len()];
    let n_pts = dense.points.len();
    let mut d_points = vec![[0.0; 2]; n_pts];
    let mut d_g0 = 0.0;
    for r in per_sample {
        let (gp, gk, g0) = r?;
        for (o, v) in recon_grad.iter_mut().zip(&gp) {
            *o += v / nb;
        }
        for (o, v) in d_points.iter_mut().zip(&gk) {
            o[0] += v[0] / nb;
            o[1] += v[1] / nb;
        }
        d_g0 += g0 / nb;
    }

    let (field, control) = if want_trajectory {
        let g0_grad = acq.dc_gain_grad()?;
        let mut d_raw = vec![[0.0; 2]; n_pts];
        for i in 0..n_pts {
            for d in 0..2 {
                let dk = d_points[i][d] + d_g0 * g0_grad[i][d];
                d_raw[i][d] = dk * dense.clamp_deriv[i][d]
                    + lambdas.velocity * penalties.grad_v[i][d]
                    + lambdas.acceleration * penalties.grad_a[i][d];
            }
        }
        model
            .traj
            .backward(&dense, &d_raw, &cfg.ode)
            .stage("ODE adjoint")?
    } else {
        (
            vec![0.0; model.traj.field.flat().len()],
            vec![0.0; model.traj.control.len()],
        )
    };
    let mut g = ModelGrads {
        field,
        control,
        recon: recon_grad,
    };
    g.scale(seed);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{make_coils, make_phantom, simulate_coil_images};
    use crate::field::field_init;
    use crate::geometry::{init_cartesian, init_radial};

    fn sample(grid: usize, coils: usize, seed: u64) -> Sample {
        let ph = make_phantom(grid, seed, 3).unwrap();
        let cs = make_coils(grid, coils, 1).unwrap();
        Sample {
            id: 0,
            coils: simulate_coil_images(&ph.image, &cs).unwrap(),
            image: ph.image,
        }
    }

    fn cfg(grid: usize) -> PipelineConfig {
        PipelineConfig {
            limits: PhysicsLimits {
                matrix: grid,
                ..PhysicsLimits::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn clamp_properties() {
        assert_eq!(band_clamp(0.3), (0.3, 1.0));
        assert_eq!(band_clamp(-0.49), (-0.49, 1.0));
        let (v, d) = band_clamp(0.495);
        assert!(v < BAND_LIMIT && v > BAND_KNEE && d > 0.0 && d < 1.0);
        assert!(band_clamp(0.7).0 <= BAND_LIMIT);
        let (v, _) = band_clamp(-3.0);
        assert!(v > -0.5);
        let h = 1e-7;
        let fd = (band_clamp(0.495 + h).0 - band_clamp(0.495 - h).0) / (2.0 * h);
        assert!((fd - band_clamp(0.495).1).abs() < 1e-6);
    }

    #[test]
    fn zero_field_reproduces_template() {
        let t = init_radial(3, 40, 0.45, 4e-6).unwrap();
        let f = FieldParams::zeros(3 * 4 * 2, 5, true).unwrap();
        let m = TrajectoryModel::new(t.clone(), 4, f).unwrap();
        let d = m.dense(&OdeConfig::default()).unwrap();
        for (a, b) in d.points.iter().zip(t.points()) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn cartesian_intermediate_is_ground_truth() {
        let grid = 32;
        let t = init_cartesian(grid, grid, 0.0, grid, 4e-6).unwrap();
        let s = sample(grid, 3, 2);
        let acq = Acquisition::new(grid, t.points(), &GriddingConfig::default()).unwrap();
        let x = acq.intermediate(&s.coils).unwrap().image;
        let num: f64 = x.iter().zip(&s.image).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = s.image.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() <= 1e-3);
    }

    #[test]
    fn zero_model_outputs_intermediate_and_lambda_zero_total() {
        let grid = 16;
        let t = init_radial(2, 32, 0.45, 4e-6).unwrap();
        let model = Model {
            traj: TrajectoryModel::new(t.clone(), 4, FieldParams::zeros(16, 4, true).unwrap())
                .unwrap(),
            recon: ReconParams::zeros(2, 2).unwrap(),
        };
        let s = sample(grid, 2, 3);
        let c = cfg(grid);
        let (out, rep, inter) =
            forward_pipeline(&model, &[&s], Lambdas::default(), &c, Exec::Sequential).unwrap();
        let acq = Acquisition::new(grid, t.points(), &c.gridding).unwrap();
        let x = acq.intermediate(&s.coils).unwrap().image;
        assert_eq!(out[0], x);
        assert_eq!(inter.intermediate_image(0), x.as_slice());
        let h = objective::hybrid_loss(&out[0], &s.image, grid, grid, c.mu, &c.ssim).unwrap();
        assert!((rep.total - h).abs() <= 1e-12);
    }

    #[test]
    fn penalties_vanish_inside_limits_and_match_fd_outside() {
        let t = init_radial(2, 30, 0.45, 4e-6).unwrap();
        let lim = PhysicsLimits::default();
        let p = kinematic_penalties(t.points(), 2, 30, &lim).unwrap();
        assert_eq!((p.penalty_v, p.penalty_a), (0.0, 0.0));
        assert!(p
            .grad_v
            .iter()
            .chain(&p.grad_a)
            .all(|g| g[0] == 0.0 && g[1] == 0.0));

        // Wiggly trajectory under tight limits.
        let tight = PhysicsLimits {
            g_max: 1e-4,
            s_max: 0.05,
            ..lim
        };
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|i| [0.01 * i as f64, 0.02 * ((i * i) as f64 * 0.37).sin()])
            .collect();
        let p = kinematic_penalties(&pts, 1, 20, &tight).unwrap();
        assert!(p.penalty_v > 0.0 && p.penalty_a > 0.0);
        let h = 1e-8;
        let sv = p
            .grad_v
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let sa = p
            .grad_a
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..20 {
            for d in 0..2 {
                let mut up = pts.clone();
                up[i][d] += h;
                let mut dn = pts.clone();
                dn[i][d] -= h;
                let pu = kinematic_penalties(&up, 1, 20, &tight).unwrap();
                let pd = kinematic_penalties(&dn, 1, 20, &tight).unwrap();
                let fv = (pu.penalty_v - pd.penalty_v) / (2.0 * h);
                let fa = (pu.penalty_a - pd.penalty_a) / (2.0 * h);
                assert!((fv - p.grad_v[i][d]).abs() <= 1e-5 * sv);
                assert!((fa - p.grad_a[i][d]).abs() <= 1e-5 * sa);
            }
        }
    }

    #[test]
    fn loss_scale_scales_gradients() {
        let grid = 16;
        let t = init_radial(2, 32, 0.45, 4e-6).unwrap();
        let model = Model {
            traj: TrajectoryModel::new(t, 4, field_init(2, 4, 6, 3).unwrap()).unwrap(),
            recon: recon::recon_build(2, 2, 4).unwrap(),
        };
        let s = sample(grid, 2, 5);
        let c = cfg(grid);
        let run = |seed: f64| {
            let (_, _, inter) =
                forward_pipeline(&model, &[&s], Lambdas::default(), &c, Exec::Sequential).unwrap();
            backward_pipeline(&model, &[&s], inter, &c, Exec::Sequential, seed, true).unwrap()
        };
        let g1 = run(1.0);
        let g2 = run(2.0);
        for (a, b) in g1
            .field
            .iter()
            .chain(&g1.recon)
            .zip(g2.field.iter().chain(&g2.recon))
        {
            assert_eq!(2.0 * a, *b);
        }
        assert!(g1.field.iter().any(|v| *v != 0.0));
    }
}
