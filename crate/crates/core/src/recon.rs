//! Root-sum-of-squares coil combination and the residual encoder–decoder
//! reconstruction network.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Manifest, TensorEntry};
use crate::diffcore::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nufft::ComplexImage;

/// Percentile used to normalize the network input.
pub const INPUT_PERCENTILE: f64 = 99.0;
const NORM_EPS: f64 = 1e-12;
/// Scale of the final 1×1 projection at initialization.
const HEAD_INIT_SCALE: f64 = 1e-2;

/// Per-pixel `sqrt(Σ_c |x_c|²)`.
pub fn rss(coil_images: &[ComplexImage]) -> Result<Vec<f64>> {
    let first = coil_images
        .first()
        .ok_or_else(|| Error::invalid("rss needs at least one coil"))?;
    let n = first.grid();
    let mut acc = vec![0.0; n * n];
    for img in coil_images {
        if img.grid() != n {
            return Err(Error::shape(
                "rss",
                format!("coil grid {} vs {n}", img.grid()),
            ));
        }
        for (a, z) in acc.iter_mut().zip(img.data()) {
            *a += z.norm_sqr();
        }
    }
    Ok(acc.into_iter().map(f64::sqrt).collect())
}

#[derive(Clone, Debug, PartialEq)]
struct ConvSpec {
    name: String,
    cout: usize,
    cin: usize,
    k: usize,
    w_off: usize,
    b_off: Option<usize>,
}

impl ConvSpec {
    fn w_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconParams {
    levels: usize,
    base: usize,
    convs: Vec<ConvSpec>,
    values: Vec<f64>,
}

/// Channel count at encoder level `l` (`l == levels` is the bottleneck).
fn width(base: usize, l: usize) -> usize {
    base << l
}

fn layout(levels: usize, base: usize) -> (Vec<ConvSpec>, usize) {
    let mut convs = Vec::new();
    let mut off = 0;
    let mut add = |name: String, cout: usize, cin: usize, k: usize, bias: bool| {
        let w_off = off;
        off += cout * cin * k * k;
        let b_off = bias.then(|| {
            let o = off;
            off += cout;
            o
        });
        convs.push(ConvSpec {
            name,
            cout,
            cin,
            k,
            w_off,
            b_off,
        });
    };
    let mut cin = 1;
    for l in 0..=levels {
        let c = width(base, l);
        let tag = if l == levels {
            "mid".to_string()
        } else {
            format!("enc{l}")
        };
        add(format!("{tag}.a"), c, cin, 3, false);
        add(format!("{tag}.b"), c, c, 3, false);
        cin = c;
    }
    for l in (0..levels).rev() {
        let c = width(base, l);
        add(format!("dec{l}.a"), c, width(base, l + 1) + c, 3, false);
        add(format!("dec{l}.b"), c, c, 3, false);
    }
    add("head".into(), 1, width(base, 0), 1, true);
    (convs, off)
}

impl ReconParams {
    pub fn zeros(levels: usize, base: usize) -> Result<Self> {
        if levels == 0 || base == 0 {
            return Err(Error::invalid(
                "recon levels and base_channels must be >= 1",
            ));
        }
        let (convs, n) = layout(levels, base);
        Ok(Self {
            levels,
            base,
            convs,
            values: vec![0.0; n],
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn base_channels(&self) -> usize {
        self.base
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Encoder channel counts, shallowest first.
    pub fn channel_ladder(&self) -> Vec<usize> {
        (0..self.levels).map(|l| width(self.base, l)).collect()
    }

    /// Grid sizes this network accepts.
    pub fn check_grid(&self, grid: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if grid == 0 || !grid.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "grid {grid} not divisible by 2^{} = {div}",
                self.levels
            )));
        }
        Ok(())
    }

    /// Spatial size at the bottleneck for a `grid × grid` input.
    pub fn bottleneck_size(&self, grid: usize) -> Result<usize> {
        self.check_grid(grid)?;
        Ok(grid >> self.levels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = serde_json::Map::new();
        meta.insert("levels".into(), self.levels.into());
        meta.insert("base_channels".into(), self.base.into());
        let mut tensors = Vec::new();
        for c in &self.convs {
            tensors.push(TensorEntry {
                name: format!("{}.weight", c.name),
                shape: vec![c.cout, c.cin, c.k, c.k],
            });
            if c.b_off.is_some() {
                tensors.push(TensorEntry {
                    name: format!("{}.bias", c.name),
                    shape: vec![c.cout],
                });
            }
        }
        let manifest = Manifest {
            kind: "recon".into(),
            meta,
            tensors,
        };
        checkpoint::save(path, &manifest, &self.values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, values) = checkpoint::load(path)?;
        if m.kind != "recon" {
            return Err(Error::Config(format!(
                "{} holds a `{}` checkpoint, not a recon net",
                path.display(),
                m.kind
            )));
        }
        let mut p = Self::zeros(m.meta_usize("levels")?, m.meta_usize("base_channels")?)?;
        if values.len() != p.values.len() {
            return Err(Error::shape(
                "ReconParams::load",
                format!("{} values, expected {}", values.len(), p.values.len()),
            ));
        }
        p.values = values;
        Ok(p)
    }
}

/// Uniform He initialization; the 1×1 head is scaled down so the residual
/// correction starts small.
pub fn recon_build(levels: usize, base_channels: usize, seed: u64) -> Result<ReconParams> {
    let mut p = ReconParams::zeros(levels, base_channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in p.convs.clone() {
        let fan_in = (c.cin * c.k * c.k) as f64;
        let mut bound = (6.0 / fan_in).sqrt();
        if c.name == "head" {
            bound *= HEAD_INIT_SCALE;
        }
        for v in &mut p.values[c.w_off..c.w_off + c.w_len()] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(p)
}

/// Parameter nodes of one network instance on a tape, in layer order
/// `(weight, bias)`.
#[derive(Clone, Debug)]
pub struct BoundRecon {
    nodes: Vec<(NodeId, Option<NodeId>)>,
}

impl BoundRecon {
    /// Collect the flat parameter gradient (zeros where no gradient flowed).
    pub fn gather_grad(
        &self,
        params: &ReconParams,
        grads: &crate::diffcore::Gradients,
    ) -> Vec<f64> {
        let mut out = vec![0.0; params.values.len()];
        for (c, (w, b)) in params.convs.iter().zip(&self.nodes) {
            if let Some(g) = grads.get(*w) {
                out[c.w_off..c.w_off + c.w_len()].copy_from_slice(g);
            }
            if let (Some(bo), Some(b)) = (c.b_off, b) {
                if let Some(g) = grads.get(*b) {
                    out[bo..bo + c.cout].copy_from_slice(g);
                }
            }
        }
        out
    }
}

/// Register the parameters on `tape` (as trainable leaves when `trainable`).
pub fn recon_bind(params: &ReconParams, tape: &mut Tape, trainable: bool) -> Result<BoundRecon> {
    let mut nodes = Vec::with_capacity(params.convs.len());
    for c in &params.convs {
        let w = tape.leaf(
            params.values[c.w_off..c.w_off + c.w_len()].to_vec(),
            &[c.cout, c.cin, c.k, c.k],
            trainable,
        )?;
        let b = match c.b_off {
            Some(o) => {
                Some(tape.leaf(params.values[o..o + c.cout].to_vec(), &[c.cout], trainable)?)
            }
            None => None,
        };
        nodes.push((w, b));
    }
    Ok(BoundRecon { nodes })
}

fn block(
    tape: &mut Tape,
    x: NodeId,
    a: (NodeId, Option<NodeId>),
    b: (NodeId, Option<NodeId>),
) -> Result<NodeId> {
    let mut h = x;
    for (w, bias) in [a, b] {
        h = tape.conv2d(h, w, bias)?;
        h = tape.instance_norm(h)?;
        h = tape.leaky_relu(h);
    }
    Ok(h)
}

/// Residual reconstruction of a `[1, N, N]` image node: the input is scaled
/// by its 99th percentile `p`, passed through the network, rescaled, and
/// added back: `x + p · g(x / p)`.
pub fn recon_forward(
    params: &ReconParams,
    bound: &BoundRecon,
    tape: &mut Tape,
    x: NodeId,
) -> Result<NodeId> {
    let n = match tape.shape(x) {
        &[1, h, w] if h == w => h,
        s => {
            return Err(Error::shape(
                "recon_forward",
                format!("expected [1, N, N], got {s:?}"),
            ))
        }
    };
    params.check_grid(n)?;
    let p = tape.percentile(x, INPUT_PERCENTILE)?;
    let p = tape.add_scalar(p, NORM_EPS);
    let xn = tape.div_by(x, p)?;

    let l = params.levels;
    let nodes = &bound.nodes;
    let mut skips = Vec::with_capacity(l);
    let mut h = xn;
    for lvl in 0..l {
        h = block(tape, h, nodes[2 * lvl], nodes[2 * lvl + 1])?;
        skips.push(h);
        h = tape.max_pool2d(h)?;
    }
    h = block(tape, h, nodes[2 * l], nodes[2 * l + 1])?;
    for (i, lvl) in (0..l).rev().enumerate() {
        let up = tape.upsample2(h)?;
        let cat = tape.concat(&[up, skips[lvl]])?;
        let base = 2 * (l + 1) + 2 * i;
        h = block(tape, cat, nodes[base], nodes[base + 1])?;
    }
    let (hw, hb) = nodes[nodes.len() - 1];
    let corr = tape.conv2d(h, hw, hb)?;
    let corr = tape.scale_by(corr, p)?;
    tape.add(x, corr)
}

/// Tape-free inference on a real `N × N` image.
pub fn recon_infer(params: &ReconParams, image: &[f64], grid: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = recon_bind(params, &mut tape, false)?;
    let x = tape.constant(image.to_vec(), &[1, grid, grid])?;
    let y = recon_forward(params, &bound, &mut tape, x)?;
    Ok(tape.value(y).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn rv(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn rss_cases() {
        let a = ComplexImage::new(2, vec![Complex64::new(3.0, 0.0); 4]).unwrap();
        let b = ComplexImage::new(2, vec![Complex64::new(0.0, 4.0); 4]).unwrap();
        assert_eq!(rss(&[a.clone(), b]).unwrap(), vec![5.0; 4]);
        let c = ComplexImage::new(2, vec![Complex64::new(-1.0, 1.0); 4]).unwrap();
        for v in rss(&[c]).unwrap() {
            assert!((v - 2f64.sqrt()).abs() < 1e-15);
        }
        assert!(rss(&[]).is_err());
        assert!(rss(&[a, ComplexImage::zeros(4)]).is_err());
    }

    #[test]
    fn rss_of_unit_maps() {
        let img = rv(16, 1);
        let th: Vec<f64> = rv(16, 2)
            .into_iter()
            .map(|v| v * std::f64::consts::PI)
            .collect();
        let c1 = ComplexImage::new(
            4,
            img.iter()
                .zip(&th)
                .map(|(i, t)| Complex64::from_polar(i * t.cos(), 0.3))
                .collect(),
        )
        .unwrap();
        let c2 = ComplexImage::new(
            4,
            img.iter()
                .zip(&th)
                .map(|(i, t)| Complex64::from_polar(i * t.sin(), -1.1))
                .collect(),
        )
        .unwrap();
        for (r, i) in rss(&[c1, c2]).unwrap().iter().zip(&img) {
            assert!((r - i).abs() <= 1e-10);
        }
    }

    #[test]
    fn ladder_and_bottleneck() {
        let p = ReconParams::zeros(4, 64).unwrap();
        assert_eq!(p.channel_ladder(), vec![64, 128, 256, 512]);
        assert_eq!(p.bottleneck_size(64).unwrap(), 4);
        assert!(p.check_grid(40).is_err());
        assert_eq!(recon_build(2, 3, 5).unwrap(), recon_build(2, 3, 5).unwrap());
    }

    #[test]
    fn zero_weights_are_identity() {
        let p = ReconParams::zeros(2, 2).unwrap();
        let x = rv(64, 3);
        assert_eq!(recon_infer(&p, &x, 8).unwrap(), x);
        let p = recon_build(2, 2, 4).unwrap();
        assert_eq!(recon_infer(&p, &x, 8).unwrap().len(), 64);
        assert!(recon_infer(&p, &rv(36, 1), 6).is_err());
    }

    fn loss_of(params: &ReconParams, x: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let b = recon_bind(params, &mut t, true).unwrap();
        let xi = t.constant(x.to_vec(), &[1, 8, 8]).unwrap();
        let y = recon_forward(params, &b, &mut t, xi).unwrap();
        let tg = t.constant(target.to_vec(), &[1, 8, 8]).unwrap();
        let d = t.sub(y, tg).unwrap();
        let sq = t.square(d);
        let l = t.mean(sq);
        let v = t.scalar(l);
        let g = t.backward(l).unwrap();
        (v, b.gather_grad(params, &g))
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut p = recon_build(2, 2, 6).unwrap();
        // A larger head makes every layer's contribution measurable.
        let head = p.convs.last().unwrap().clone();
        for (i, v) in p.values[head.w_off..].iter_mut().enumerate() {
            *v = 0.3 + 0.1 * i as f64;
        }
        let x = rv(64, 7);
        let target = rv(64, 8);
        let (_, g) = loss_of(&p, &x, &target);
        let h = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.values[i] += h;
            let mut b = p.clone();
            b.values[i] -= h;
            let fd = (loss_of(&a, &x, &target).0 - loss_of(&b, &x, &target).0) / (2.0 * h);
            num += (fd - g[i]).powi(2);
            den += fd * fd;
        }
        let e = (num / den).sqrt();
        assert!(e <= 1e-4, "relative error {e}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let p = recon_build(2, 2, 9).unwrap();
        let (_, g) = loss_of(&p, &rv(64, 10), &rv(64, 11));
        for c in &p.convs {
            let gw = &g[c.w_off..c.w_off + c.w_len()];
            assert!(
                gw.iter().any(|&v| v != 0.0),
                "{} weight gradient is all zero",
                c.name
            );
            if let Some(o) = c.b_off {
                assert!(
                    g[o..o + c.cout].iter().any(|&v| v != 0.0),
                    "{} bias",
                    c.name
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recon.bin");
        let p = recon_build(2, 3, 12).unwrap();
        p.save(&path).unwrap();
        assert_eq!(ReconParams::load(&path).unwrap(), p);
    }
}
