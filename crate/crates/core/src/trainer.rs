//! Joint optimization of the trajectory field and the reconstruction
//! network, evaluation against a fixed-trajectory baseline, and model
//! checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{self, Manifest, TensorEntry};
use crate::datakit::{DataConfig, Dataset, Sample};
use crate::error::{Error, Result, StageExt};
use crate::field::FieldParams;
use crate::geometry::{self, PhysicsLimits, Trajectory};
use crate::io_util::write_atomic;
use crate::nufft::GriddingConfig;
use crate::objective::{self, LossReport, MetricRow, SsimConfig, WilcoxonResult};
use crate::odecore::OdeConfig;
use crate::par::Exec;
use crate::pipeline::{
    self, backward_pipeline, forward_pipeline, recon_pass, Acquisition, ImageMetrics, Lambdas,
    Model, ModelGrads, PipelineConfig, TrajectoryModel,
};
use crate::recon::{self, ReconParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Radial,
    Cartesian,
    Spiral,
}

/// Initial trajectory and its segmentation into control points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Spokes, phase-encode lines or interleaves.
    pub shots: usize,
    pub samples_per_shot: usize,
    pub n_control: usize,
    pub k_extent: f64,
    pub center_fraction: f64,
    pub spiral_turns: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Radial,
            shots: 8,
            samples_per_shot: 1000,
            n_control: 100,
            k_extent: 0.49,
            center_fraction: 0.0,
            spiral_turns: geometry::DEFAULT_SPIRAL_TURNS,
        }
    }
}

impl TrajectorySpec {
    pub fn build(&self, grid: usize, dwell: f64) -> Result<Trajectory> {
        match self.kind {
            TrajectoryKind::Radial => {
                geometry::init_radial(self.shots, self.samples_per_shot, self.k_extent, dwell)
            }
            TrajectoryKind::Cartesian => geometry::init_cartesian(
                self.shots,
                grid,
                self.center_fraction,
                self.samples_per_shot,
                dwell,
            ),
            TrajectoryKind::Spiral => geometry::init_spiral(
                self.shots,
                self.samples_per_shot,
                self.spiral_turns,
                self.k_extent,
                dwell,
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub hidden: usize,
    pub use_time: bool,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            hidden: 64,
            use_time: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconSpec {
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for ReconSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
        }
    }
}

/// Everything a training run depends on. Serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_field: f64,
    pub lr_recon: f64,
    pub lr_control: f64,
    /// `false` trains only the recon net on the initializer trajectory.
    pub learn_trajectory: bool,
    pub learn_control_points: bool,
    /// Weight on the velocity (gradient amplitude) penalty.
    pub lambda1: f64,
    /// Weight on the acceleration (slew) penalty.
    pub lambda2: f64,
    /// Weight on `1 − SSIM` in the image loss.
    pub mu: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    pub field: FieldSpec,
    pub recon: ReconSpec,
    pub data: DataConfig,
    pub ode: OdeConfig,
    pub gridding: GriddingConfig,
    pub limits: PhysicsLimits,
    pub ssim: SsimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 25,
            lr_field: 0.01,
            lr_recon: 0.001,
            lr_control: 0.001,
            learn_trajectory: true,
            learn_control_points: false,
            lambda1: 0.1,
            lambda2: 0.1,
            mu: 1.0,
            batch_size: 2,
            seed: 0,
            trajectory: TrajectorySpec::default(),
            field: FieldSpec::default(),
            recon: ReconSpec::default(),
            data: DataConfig::default(),
            ode: OdeConfig::default(),
            gridding: GriddingConfig::default(),
            limits: PhysicsLimits::default(),
            ssim: SsimConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{sub}`")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (b, p) => {
            if b.is_object() {
                return Err(Error::Config(format!(
                    "config key `{path}` expects an object"
                )));
            }
            *b = p;
            Ok(())
        }
    }
}

/// Parse a `key=value` override; the value is read as JSON, falling back to
/// a bare string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let v = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string()));
    Ok((k.to_string(), v))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    if cur.is_object() {
        return Err(Error::Config(format!(
            "config key `{key}` names a section, not a value"
        )));
    }
    *cur = value;
    Ok(())
}

impl TrainConfig {
    /// Defaults, patched by an optional JSON document, then by `key=value`
    /// overrides in order.
    pub fn resolve(document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(doc) = document {
            let patch: Value = serde_json::from_str(doc)
                .map_err(|e| Error::Config(format!("config JSON: {e}")))?;
            if !patch.is_object() {
                return Err(Error::Config(
                    "config document must be a JSON object".into(),
                ));
            }
            merge(&mut v, patch, "")?;
        }
        for o in overrides {
            let (k, val) = parse_override(o)?;
            set_path(&mut v, &k, val)?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let doc = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(doc.as_deref(), overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr_recon > 0.0) {
            return bad("lr_recon must be > 0".into());
        }
        for (name, v) in [("lr_field", self.lr_field), ("lr_control", self.lr_control)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.limits.matrix != self.data.grid {
            return bad(format!(
                "limits.matrix {} must equal data.grid {}",
                self.limits.matrix, self.data.grid
            ));
        }
        if self.field.hidden == 0 {
            return bad("field.hidden must be >= 1".into());
        }
        self.limits.validate()?;
        self.ode.validate()?;
        self.gridding.validate()?;
        ReconParams::zeros(self.recon.levels, self.recon.base_channels)?
            .check_grid(self.data.grid)?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mu: self.mu,
            ode: self.ode,
            gridding: self.gridding,
            limits: self.limits,
            ssim: self.ssim,
        }
    }

    pub fn template(&self) -> Result<Trajectory> {
        self.trajectory.build(self.data.grid, self.limits.dwell)
    }

    /// Freshly initialized model. Without a learned trajectory the field is
    /// zero, so the dense trajectory is the template itself.
    pub fn build_model(&self) -> Result<Model> {
        let t = self.template()?;
        let dim = t.shots() * self.trajectory.n_control * 2;
        let field = if self.learn_trajectory {
            FieldParams::init(dim, self.field.hidden, self.field.use_time, self.seed)?
        } else {
            FieldParams::zeros(dim, self.field.hidden, self.field.use_time)?
        };
        Ok(Model {
            traj: TrajectoryModel::new(t, self.trajectory.n_control, field)?,
            recon: recon::recon_build(
                self.recon.levels,
                self.recon.base_channels,
                self.seed.wrapping_add(1),
            )?,
        })
    }

    /// This configuration with the trajectory frozen at its initializer.
    pub fn fixed_baseline(&self) -> Self {
        Self {
            learn_trajectory: false,
            learn_control_points: false,
            ..self.clone()
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || state.v.len() != state.m.len()
    {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {}, grads {}, moments {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One line of the history CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossReport,
    pub psnr: f64,
    pub ssim: f64,
    pub frac_v_ok: f64,
    pub frac_a_ok: f64,
}

pub const HISTORY_HEADER: &str =
    "epoch,split,total,l1,ssim_loss,pen_v,pen_a,psnr,ssim,frac_v_ok,frac_a_ok";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.6},{:.8},{:.6},{:.6}",
            r.epoch,
            r.split.as_str(),
            r.loss.total,
            r.loss.l1,
            r.loss.ssim_loss,
            r.loss.penalty_v,
            r.loss.penalty_a,
            r.psnr,
            r.ssim,
            r.frac_v_ok,
            r.frac_a_ok
        );
    }
    s
}

/// Parse a history CSV written by [`history_csv`].
pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: line,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(perr(0, "unexpected history header".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(perr(i + 1, format!("expected 11 fields, got {}", f.len())));
        }
        let num = |j: usize| {
            f[j].parse::<f64>()
                .map_err(|e| perr(i + 1, format!("field {j}: {e}")))
        };
        let split = match f[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(perr(i + 1, format!("unknown split `{other}`"))),
        };
        out.push(HistoryRow {
            epoch: f[0]
                .parse()
                .map_err(|e| perr(i + 1, format!("epoch: {e}")))?,
            split,
            loss: LossReport {
                total: num(2)?,
                l1: num(3)?,
                ssim_loss: num(4)?,
                penalty_v: num(5)?,
                penalty_a: num(6)?,
                image_loss: num(3)? + num(4)?,
            },
            psnr: num(7)?,
            ssim: num(8)?,
            frac_v_ok: num(9)?,
            frac_a_ok: num(10)?,
        });
    }
    Ok(out)
}

/// Result of [`train_joint`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: Model,
    /// Lowest validation total among constrained epochs (or the final model
    /// when there are none).
    pub best_model: Model,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

const MODEL_TEMPLATE: &str = "template.ktraj";
const MODEL_CONTROL: &str = "control.ckpt";
const MODEL_FIELD: &str = "field.ckpt";
const MODEL_RECON: &str = "recon.ckpt";
pub const LEARNED_TRAJECTORY_FILE: &str = "trajectory.ktraj";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.json";

impl Model {
    /// Write template, control points, field and recon checkpoints into `dir`.
    pub fn save(&self, dir: &Path, fov: f64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.traj.template().save(&dir.join(MODEL_TEMPLATE), fov)?;
        let mut meta = serde_json::Map::new();
        meta.insert("shots".into(), self.traj.template().shots().into());
        meta.insert("n_control".into(), self.traj.n_control().into());
        let m = Manifest {
            kind: "control".into(),
            meta,
            tensors: vec![TensorEntry {
                name: "points".into(),
                shape: vec![self.traj.template().shots(), self.traj.n_control(), 2],
            }],
        };
        checkpoint::save(&dir.join(MODEL_CONTROL), &m, &self.traj.control)?;
        self.traj.field.save(&dir.join(MODEL_FIELD))?;
        self.recon.save(&dir.join(MODEL_RECON))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (template, _) = Trajectory::load(&dir.join(MODEL_TEMPLATE))?;
        let cpath = dir.join(MODEL_CONTROL);
        let (m, control) = checkpoint::load(&cpath)?;
        if m.kind != "control" {
            return Err(Error::Config(format!(
                "{} holds a `{}` checkpoint, not control points",
                cpath.display(),
                m.kind
            )));
        }
        let field = FieldParams::load(&dir.join(MODEL_FIELD))?;
        let mut traj = TrajectoryModel::new(template, m.meta_usize("n_control")?, field)?;
        if control.len() != traj.control.len() {
            return Err(Error::shape(
                "Model::load",
                "control point count differs from template",
            ));
        }
        traj.control = control;
        Ok(Self {
            traj,
            recon: ReconParams::load(&dir.join(MODEL_RECON))?,
        })
    }

    /// Dense trajectory as a plain [`Trajectory`].
    pub fn trajectory(&self, cfg: &PipelineConfig) -> Result<Trajectory> {
        self.traj.dense(&cfg.ode)?.trajectory(cfg.limits.dwell)
    }
}

fn lambdas_at(cfg: &TrainConfig, epoch: usize) -> Lambdas {
    if epoch < cfg.warmup_epochs {
        Lambdas::default()
    } else {
        Lambdas {
            velocity: cfg.lambda1,
            acceleration: cfg.lambda2,
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

fn finite_grads(g: &ModelGrads) -> bool {
    g.field
        .iter()
        .chain(&g.control)
        .chain(&g.recon)
        .all(|v| v.is_finite())
}

/// Intermediate images of `samples` under a fixed trajectory.
fn fixed_intermediates(
    model: &Model,
    samples: &[Sample],
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let dense = model.traj.dense(&cfg.ode)?;
    let acq = Acquisition::new(cfg.limits.matrix, &dense.points, &cfg.gridding)?;
    exec.map(samples, |s| acq.intermediate(&s.coils).map(|i| i.image))
        .into_iter()
        .collect()
}

struct Accum {
    report: LossReport,
    psnr: f64,
    ssim: f64,
    n: f64,
}

impl Accum {
    fn new() -> Self {
        Self {
            report: LossReport::default(),
            psnr: 0.0,
            ssim: 0.0,
            n: 0.0,
        }
    }

    fn add(&mut self, rep: &LossReport, metrics: &[ImageMetrics]) {
        let w = metrics.len() as f64;
        let r = &mut self.report;
        r.image_loss += w * rep.image_loss;
        r.l1 += w * rep.l1;
        r.ssim_loss += w * rep.ssim_loss;
        r.penalty_v += w * rep.penalty_v;
        r.penalty_a += w * rep.penalty_a;
        r.total += w * rep.total;
        for m in metrics {
            self.psnr += m.psnr;
            self.ssim += m.ssim;
        }
        self.n += w;
    }

    fn finish(self) -> (LossReport, f64, f64) {
        let n = self.n.max(1.0);
        let r = self.report;
        (
            LossReport {
                image_loss: r.image_loss / n,
                l1: r.l1 / n,
                ssim_loss: r.ssim_loss / n,
                penalty_v: r.penalty_v / n,
                penalty_a: r.penalty_a / n,
                total: r.total / n,
            },
            self.psnr / n,
            self.ssim / n,
        )
    }
}

/// Loss report and per-sample metrics of `samples` without gradients.
pub fn score(
    model: &Model,
    samples: &[Sample],
    lambdas: Lambdas,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<(LossReport, Vec<ImageMetrics>, Vec<Vec<f64>>)> {
    let x = fixed_intermediates(model, samples, cfg, exec)?;
    score_cached(model, samples, &x, lambdas, cfg, exec)
}

fn score_cached(
    model: &Model,
    samples: &[Sample],
    x: &[Vec<f64>],
    lambdas: Lambdas,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<(LossReport, Vec<ImageMetrics>, Vec<Vec<f64>>)> {
    let grid = cfg.limits.matrix;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let passes = exec.map(&idx, |&i| {
        recon_pass(&model.recon, &x[i], &samples[i].image, grid, cfg, false)
            .map(|p| (p.metrics, p.output))
    });
    let mut metrics = Vec::with_capacity(samples.len());
    let mut outputs = Vec::with_capacity(samples.len());
    for p in passes {
        let (m, o) = p?;
        metrics.push(m);
        outputs.push(o);
    }
    let dense = model.traj.dense(&cfg.ode)?;
    let t = model.traj.template();
    let pen =
        pipeline::kinematic_penalties(&dense.raw, t.shots(), t.samples_per_shot(), &cfg.limits)?;
    let n = metrics.len().max(1) as f64;
    let mut r = LossReport::default();
    for m in &metrics {
        r.image_loss += m.image_loss / n;
        r.l1 += m.l1 / n;
        r.ssim_loss += m.ssim_loss / n;
    }
    r.penalty_v = pen.penalty_v;
    r.penalty_a = pen.penalty_a;
    r.total =
        r.image_loss + lambdas.velocity * pen.penalty_v + lambdas.acceleration * pen.penalty_a;
    Ok((r, metrics, outputs))
}

/// Train the model described by `cfg` on `data`. With `out_dir`, the
/// resolved config, the per-epoch history CSV, the best model and the final
/// model (under `last/`) are written there.
pub fn train_joint(
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutcome> {
    train_joint_with(data, cfg, out_dir, exec, |_| {})
}

/// [`train_joint`] calling `on_epoch` with each epoch's history rows.
pub fn train_joint_with(
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    exec: Exec,
    mut on_epoch: impl FnMut(&[HistoryRow]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if data.val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let pc = cfg.pipeline();
    let grid = cfg.data.grid;
    for s in data.train.iter().chain(&data.val) {
        if s.image.len() != grid * grid {
            return Err(Error::shape(
                "train_joint",
                format!("sample {} is not {grid}x{grid}", s.id),
            ));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    }

    let mut model = cfg.build_model().stage("model init")?;
    let mut adam_field = AdamState::new(model.traj.field.flat().len());
    let mut adam_control = AdamState::new(model.traj.control.len());
    let mut adam_recon = AdamState::new(model.recon.len());
    let frozen = !cfg.learn_trajectory;
    let (train_x, val_x) = if frozen {
        (
            fixed_intermediates(&model, &data.train, &pc, exec).stage("fixed trajectory")?,
            fixed_intermediates(&model, &data.val, &pc, exec).stage("fixed trajectory")?,
        )
    } else {
        (Vec::new(), Vec::new())
    };

    let mut history = Vec::with_capacity(2 * cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let full = lambdas_at(cfg, cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lambdas = lambdas_at(cfg, epoch);
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut acc = Accum::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |detail: String| Error::Divergence {
                epoch,
                batch: b,
                detail,
            };
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (report, metrics, grads) = if frozen {
                let nb = batch.len() as f64;
                let mut g = vec![0.0; model.recon.len()];
                let mut metrics = Vec::with_capacity(batch.len());
                let passes = exec.map(chunk, |&i| {
                    let p = recon_pass(
                        &model.recon,
                        &train_x[i],
                        &data.train[i].image,
                        grid,
                        &pc,
                        true,
                    )?;
                    let m = p.metrics;
                    p.backward(&model.recon).map(|(gp, _)| (m, gp))
                });
                for p in passes {
                    let (m, gp) = p?;
                    metrics.push(m);
                    for (o, v) in g.iter_mut().zip(&gp) {
                        *o += v / nb;
                    }
                }
                let mut r = LossReport::default();
                for m in &metrics {
                    r.image_loss += m.image_loss / nb;
                    r.l1 += m.l1 / nb;
                    r.ssim_loss += m.ssim_loss / nb;
                }
                r.total = r.image_loss;
                let grads = ModelGrads {
                    field: Vec::new(),
                    control: Vec::new(),
                    recon: g,
                };
                (r, metrics, grads)
            } else {
                let (_, report, inter) = forward_pipeline(&model, &batch, lambdas, &pc, exec)
                    .map_err(|e| diverged_or(e, epoch, b))?;
                let metrics = inter.sample_metrics();
                if !report.total.is_finite() {
                    return Err(diverged(format!("non-finite loss {}", report.total)));
                }
                let grads = backward_pipeline(&model, &batch, inter, &pc, exec, 1.0, true)
                    .map_err(|e| diverged_or(e, epoch, b))?;
                (report, metrics, grads)
            };
            if !report.total.is_finite() {
                return Err(diverged(format!("non-finite loss {}", report.total)));
            }
            if !finite_grads(&grads) {
                return Err(diverged("non-finite gradient".into()));
            }
            acc.add(&report, &metrics);
            adam_step(
                model.recon.flat_mut(),
                &grads.recon,
                &mut adam_recon,
                cfg.lr_recon,
            )?;
            if !frozen {
                if cfg.lr_field > 0.0 {
                    adam_step(
                        model.traj.field.flat_mut(),
                        &grads.field,
                        &mut adam_field,
                        cfg.lr_field,
                    )?;
                }
                if cfg.learn_control_points && cfg.lr_control > 0.0 {
                    adam_step(
                        &mut model.traj.control,
                        &grads.control,
                        &mut adam_control,
                        cfg.lr_control,
                    )?;
                }
            }
        }

        let dense = model.traj.dense(&pc.ode).stage("trajectory ODE")?;
        let cons = pipeline::constraint_report(&dense, &pc.limits)?;
        let (tr, tr_psnr, tr_ssim) = acc.finish();
        let (vr, vm, _) = if frozen {
            score_cached(&model, &data.val, &val_x, lambdas, &pc, exec)
        } else {
            score(&model, &data.val, lambdas, &pc, exec)
        }
        .stage("validation")?;
        let nv = vm.len() as f64;
        let rows = [
            HistoryRow {
                epoch,
                split: Split::Train,
                loss: tr,
                psnr: tr_psnr,
                ssim: tr_ssim,
                frac_v_ok: cons.frac_velocity_ok,
                frac_a_ok: cons.frac_accel_ok,
            },
            HistoryRow {
                epoch,
                split: Split::Val,
                loss: vr,
                psnr: vm.iter().map(|m| m.psnr).sum::<f64>() / nv,
                ssim: vm.iter().map(|m| m.ssim).sum::<f64>() / nv,
                frac_v_ok: cons.frac_velocity_ok,
                frac_a_ok: cons.frac_accel_ok,
            },
        ];
        if !vr.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                detail: format!("non-finite validation loss {}", vr.total),
            });
        }
        history.extend_from_slice(&rows);
        on_epoch(&rows);

        let select =
            vr.image_loss + full.velocity * vr.penalty_v + full.acceleration * vr.penalty_a;
        let eligible = epoch >= cfg.warmup_epochs || cfg.warmup_epochs == cfg.epochs;
        if eligible && best.as_ref().is_none_or(|(b, _, _)| select < *b) {
            if let Some(dir) = out_dir {
                model.save(dir, pc.limits.fov)?;
                dense
                    .trajectory(pc.limits.dwell)?
                    .save(&dir.join(LEARNED_TRAJECTORY_FILE), pc.limits.fov)?;
            }
            best = Some((select, epoch, model.clone()));
        }
        if let Some(dir) = out_dir {
            write_atomic(&dir.join(HISTORY_FILE), history_csv(&history).as_bytes())?;
        }
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("last"), pc.limits.fov)?;
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs.saturating_sub(1), model.clone()),
    };
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        history,
    })
}

fn diverged_or(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Stage { stage, source } if matches!(*source, Error::Integration { .. }) => {
            Error::Divergence {
                epoch,
                batch,
                detail: format!("{stage}: {source}"),
            }
        }
        other => other,
    }
}

/// Per-method results on one test set.
#[derive(Clone, Debug)]
pub struct MethodScores {
    pub name: String,
    pub metrics: Vec<ImageMetrics>,
    pub outputs: Vec<Vec<f64>>,
}

impl MethodScores {
    pub fn mean_psnr(&self) -> f64 {
        self.metrics.iter().map(|m| m.psnr).sum::<f64>() / self.metrics.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.metrics.iter().map(|m| m.ssim).sum::<f64>() / self.metrics.len().max(1) as f64
    }
}

/// Learned-versus-fixed comparison. Differences are `learned − fixed`.
#[derive(Debug)]
pub struct Evaluation {
    pub learned: MethodScores,
    pub fixed: MethodScores,
    pub rows: Vec<MetricRow>,
    pub psnr_gain: f64,
    pub ssim_gain: f64,
    pub psnr_test: Result<WilcoxonResult>,
    pub ssim_test: Result<WilcoxonResult>,
}

pub fn evaluate(
    learned: &Model,
    fixed: &Model,
    test: &[Sample],
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let run = |name: &str, m: &Model| -> Result<MethodScores> {
        let (_, metrics, outputs) = score(m, test, Lambdas::default(), cfg, exec)?;
        Ok(MethodScores {
            name: name.into(),
            metrics,
            outputs,
        })
    };
    let l = run("learned", learned).stage("evaluate learned")?;
    let f = run("fixed", fixed).stage("evaluate fixed")?;
    let mut rows = Vec::with_capacity(2 * test.len());
    for (i, s) in test.iter().enumerate() {
        for m in [&l, &f] {
            rows.push(MetricRow {
                case: s.id,
                method: m.name.clone(),
                psnr_db: m.metrics[i].psnr,
                ssim: m.metrics[i].ssim,
            });
        }
    }
    let lp: Vec<f64> = l.metrics.iter().map(|m| m.psnr).collect();
    let fp: Vec<f64> = f.metrics.iter().map(|m| m.psnr).collect();
    let ls: Vec<f64> = l.metrics.iter().map(|m| m.ssim).collect();
    let fs: Vec<f64> = f.metrics.iter().map(|m| m.ssim).collect();
    Ok(Evaluation {
        psnr_gain: l.mean_psnr() - f.mean_psnr(),
        ssim_gain: l.mean_ssim() - f.mean_ssim(),
        psnr_test: objective::wilcoxon_signed_rank(&lp, &fp),
        ssim_test: objective::wilcoxon_signed_rank(&ls, &fs),
        learned: l,
        fixed: f,
        rows,
    })
}

#[derive(Serialize)]
struct TestSummary {
    statistic: Option<f64>,
    p_value: Option<f64>,
    n: Option<usize>,
    exact: Option<bool>,
    error: Option<String>,
}

impl From<&Result<WilcoxonResult>> for TestSummary {
    fn from(r: &Result<WilcoxonResult>) -> Self {
        match r {
            Ok(w) => Self {
                statistic: Some(w.statistic),
                p_value: Some(w.p_value),
                n: Some(w.n),
                exact: Some(w.exact),
                error: None,
            },
            Err(e) => Self {
                statistic: None,
                p_value: None,
                n: None,
                exact: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Serialize)]
struct EvalSummary {
    cases: usize,
    learned_mean_psnr: f64,
    fixed_mean_psnr: f64,
    psnr_gain_db: f64,
    learned_mean_ssim: f64,
    fixed_mean_ssim: f64,
    ssim_gain: f64,
    psnr_wilcoxon: TestSummary,
    ssim_wilcoxon: TestSummary,
}

impl Evaluation {
    pub fn summary_json(&self) -> String {
        let s = EvalSummary {
            cases: self.learned.metrics.len(),
            learned_mean_psnr: self.learned.mean_psnr(),
            fixed_mean_psnr: self.fixed.mean_psnr(),
            psnr_gain_db: self.psnr_gain,
            learned_mean_ssim: self.learned.mean_ssim(),
            fixed_mean_ssim: self.fixed.mean_ssim(),
            ssim_gain: self.ssim_gain,
            psnr_wilcoxon: (&self.psnr_test).into(),
            ssim_wilcoxon: (&self.ssim_test).into(),
        };
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }

    /// Write `metrics.csv` and `wilcoxon.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join("metrics.csv");
        let w = dir.join("wilcoxon.json");
        objective::write_metrics_csv(&m, &self.rows)?;
        write_atomic(&w, self.summary_json().as_bytes())?;
        Ok((m, w))
    }
}

/// Outcome of training a learned and a fixed-trajectory model on the same
/// data and comparing them on the test split.
#[derive(Debug)]
pub struct Comparison {
    pub learned: TrainOutcome,
    pub fixed: TrainOutcome,
    pub evaluation: Evaluation,
}

/// Train `cfg` and its fixed-trajectory baseline, then evaluate both on
/// the test split. With `out_dir`, runs go to `learned/` and `fixed/` and
/// the evaluation to the directory itself.
pub fn compare_learned_fixed(
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<Comparison> {
    let sub = |name: &str| out_dir.map(|d| d.join(name));
    let learned = train_joint(data, cfg, sub("learned").as_deref(), exec).stage("train learned")?;
    let fixed = train_joint(data, &cfg.fixed_baseline(), sub("fixed").as_deref(), exec)
        .stage("train fixed")?;
    let evaluation = evaluate(
        &learned.best_model,
        &fixed.best_model,
        &data.test,
        &cfg.pipeline(),
        exec,
    )?;
    if let Some(d) = out_dir {
        evaluation.write(d)?;
    }
    Ok(Comparison {
        learned,
        fixed,
        evaluation,
    })
}
