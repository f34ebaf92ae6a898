//! Two-layer tanh vector field over the stacked control-point state.
//!
//! `f(k, t) = W2 · tanh(W1 · [k; t] + b1) + b2`. Parameters live in one flat
//! vector ordered `w1, b1, w2, b2` (row-major matrices) so optimizers and the
//! adjoint pass can treat them as a single block.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Manifest, TensorEntry};
use crate::error::{Error, Result};
use crate::odecore::VectorField;

/// Scale applied to the output layer at initialization.
pub const OUTPUT_INIT_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    dim: usize,
    hidden: usize,
    use_time: bool,
    theta: Vec<f64>,
}

impl FieldParams {
    pub fn zeros(dim: usize, hidden: usize, use_time: bool) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("field dim and hidden width must be >= 1"));
        }
        let n = Self::count(dim, hidden, use_time);
        Ok(Self {
            dim,
            hidden,
            use_time,
            theta: vec![0.0; n],
        })
    }

    /// Uniform `±1/sqrt(fan_in)` weights; the output layer is further scaled
    /// by [`OUTPUT_INIT_SCALE`].
    pub fn init(dim: usize, hidden: usize, use_time: bool, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden, use_time)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_in = 1.0 / (p.in_width() as f64).sqrt();
        let b_out = OUTPUT_INIT_SCALE / (hidden as f64).sqrt();
        let n_first = hidden * p.in_width() + hidden;
        for (i, v) in p.theta.iter_mut().enumerate() {
            let b = if i < n_first { b_in } else { b_out };
            *v = rng.gen_range(-b..b);
        }
        Ok(p)
    }

    pub fn from_flat(dim: usize, hidden: usize, use_time: bool, theta: Vec<f64>) -> Result<Self> {
        let want = Self::count(dim, hidden, use_time);
        if theta.len() != want {
            return Err(Error::shape(
                "FieldParams::from_flat",
                format!("{} values, expected {want}", theta.len()),
            ));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field parameters must be finite"));
        }
        Ok(Self {
            dim,
            hidden,
            use_time,
            theta,
        })
    }

    fn count(dim: usize, hidden: usize, use_time: bool) -> usize {
        let w = dim + usize::from(use_time);
        hidden * w + hidden + dim * hidden + dim
    }

    pub fn in_width(&self) -> usize {
        self.dim + usize::from(self.use_time)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn use_time(&self) -> bool {
        self.use_time
    }

    pub fn flat(&self) -> &[f64] {
        &self.theta
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn offsets(&self) -> [usize; 4] {
        let o_b1 = self.hidden * self.in_width();
        let o_w2 = o_b1 + self.hidden;
        let o_b2 = o_w2 + self.dim * self.hidden;
        [0, o_b1, o_w2, o_b2]
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o[0]..o[1]]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o[1]..o[2]]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o[2]..o[3]]
    }

    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.theta[o[3]..]
    }

    fn pre_activation(&self, state: &[f64], t: f64) -> Vec<f64> {
        let w = self.in_width();
        let w1 = self.w1();
        let b1 = self.b1();
        (0..self.hidden)
            .map(|h| {
                let row = &w1[h * w..(h + 1) * w];
                let mut acc = b1[h];
                for (a, b) in row[..self.dim].iter().zip(state) {
                    acc += a * b;
                }
                if self.use_time {
                    acc += row[self.dim] * t;
                }
                acc
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = serde_json::Map::new();
        meta.insert("dim".into(), self.dim.into());
        meta.insert("hidden".into(), self.hidden.into());
        meta.insert("use_time".into(), self.use_time.into());
        let manifest = Manifest {
            kind: "field".into(),
            meta,
            tensors: vec![
                TensorEntry {
                    name: "w1".into(),
                    shape: vec![self.hidden, self.in_width()],
                },
                TensorEntry {
                    name: "b1".into(),
                    shape: vec![self.hidden],
                },
                TensorEntry {
                    name: "w2".into(),
                    shape: vec![self.dim, self.hidden],
                },
                TensorEntry {
                    name: "b2".into(),
                    shape: vec![self.dim],
                },
            ],
        };
        checkpoint::save(path, &manifest, &self.theta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, theta) = checkpoint::load(path)?;
        if m.kind != "field" {
            return Err(Error::Config(format!(
                "{} holds a `{}` checkpoint, not a field",
                path.display(),
                m.kind
            )));
        }
        Self::from_flat(
            m.meta_usize("dim")?,
            m.meta_usize("hidden")?,
            m.meta_bool("use_time")?,
            theta,
        )
    }
}

/// Field over `shots × n_control × 2` coordinates with time input enabled.
pub fn field_init(shots: usize, n_control: usize, hidden: usize, seed: u64) -> Result<FieldParams> {
    FieldParams::init(shots * n_control * 2, hidden, true, seed)
}

pub fn field_eval(params: &FieldParams, state: &[f64], t: f64) -> Result<Vec<f64>> {
    if state.len() != params.dim {
        return Err(Error::shape(
            "field_eval",
            format!("state {} vs dim {}", state.len(), params.dim),
        ));
    }
    let mut out = vec![0.0; params.dim];
    params.eval(state, t, &mut out);
    Ok(out)
}

/// Returns `(cot_state, cot_params, cot_time)`.
pub fn field_vjp(
    params: &FieldParams,
    state: &[f64],
    t: f64,
    cot: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if state.len() != params.dim || cot.len() != params.dim {
        return Err(Error::shape(
            "field_vjp",
            format!(
                "state {}, cotangent {} vs dim {}",
                state.len(),
                cot.len(),
                params.dim
            ),
        ));
    }
    let mut cs = vec![0.0; params.dim];
    let mut cp = vec![0.0; params.theta.len()];
    let ct = params.vjp(state, t, cot, &mut cs, &mut cp);
    Ok((cs, cp, ct))
}

impl VectorField for FieldParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn eval(&self, state: &[f64], t: f64, out: &mut [f64]) {
        let act: Vec<f64> = self
            .pre_activation(state, t)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let w2 = self.w2();
        for (d, (o, b)) in out.iter_mut().zip(self.b2()).enumerate() {
            let row = &w2[d * self.hidden..(d + 1) * self.hidden];
            *o = b + row.iter().zip(&act).map(|(a, h)| a * h).sum::<f64>();
        }
    }

    fn vjp(
        &self,
        state: &[f64],
        t: f64,
        cot: &[f64],
        cot_state: &mut [f64],
        cot_params: &mut [f64],
    ) -> f64 {
        let act: Vec<f64> = self
            .pre_activation(state, t)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let hd = self.hidden;
        let w = self.in_width();
        let [_, o_b1, o_w2, o_b2] = self.offsets();
        let w1 = self.w1();
        let w2 = self.w2();

        let mut g_z = vec![0.0; hd];
        for (d, &a) in cot.iter().enumerate() {
            let row = &w2[d * hd..(d + 1) * hd];
            let grow = &mut cot_params[o_w2 + d * hd..o_w2 + (d + 1) * hd];
            for h in 0..hd {
                g_z[h] += row[h] * a;
                grow[h] = a * act[h];
            }
            cot_params[o_b2 + d] = a;
        }
        for (g, h) in g_z.iter_mut().zip(&act) {
            *g *= 1.0 - h * h;
        }

        cot_state.iter_mut().for_each(|v| *v = 0.0);
        let mut ct = 0.0;
        for h in 0..hd {
            let g = g_z[h];
            let row = &w1[h * w..(h + 1) * w];
            let grow = &mut cot_params[h * w..(h + 1) * w];
            for i in 0..self.dim {
                cot_state[i] += row[i] * g;
                grow[i] = g * state[i];
            }
            if self.use_time {
                ct += row[self.dim] * g;
                grow[self.dim] = g * t;
            }
            cot_params[o_b1 + h] = g;
        }
        ct
    }
}
