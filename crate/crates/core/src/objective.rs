//! Image losses, soft-shrinkage penalties and evaluation statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffcore::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub image_loss: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub penalty_v: f64,
    pub penalty_a: f64,
    pub total: f64,
}

fn same_len(x: &[f64], y: &[f64], op: &'static str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(op, format!("{} vs {}", x.len(), y.len())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x, y, "l1_loss")?;
    if x.is_empty() {
        return Err(Error::shape("l1_loss", "empty input"));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn l1_tape(tape: &mut Tape, x: NodeId, y: NodeId) -> Result<NodeId> {
    let d = tape.sub(x, y)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// SSIM map node and its mean for `[C, H, W]` nodes.
pub fn ssim_tape(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    cfg: &SsimConfig,
) -> Result<(NodeId, NodeId)> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", tape.shape(x), tape.shape(y)),
        ));
    }
    let k = cfg.window;
    let mx = tape.box_filter_valid(x, k)?;
    let my = tape.box_filter_valid(y, k)?;
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let mxx = tape.box_filter_valid(xx, k)?;
    let myy = tape.box_filter_valid(yy, k)?;
    let mxy = tape.box_filter_valid(xy, k)?;
    let mx2 = tape.square(mx);
    let my2 = tape.square(my);
    let mxmy = tape.mul(mx, my)?;
    let vx = tape.sub(mxx, mx2)?;
    let vy = tape.sub(myy, my2)?;
    let cxy = tape.sub(mxy, mxmy)?;

    let l_num = tape.mul_scalar(mxmy, 2.0);
    let l_num = tape.add_scalar(l_num, cfg.c1());
    let c_num = tape.mul_scalar(cxy, 2.0);
    let c_num = tape.add_scalar(c_num, cfg.c2());
    let l_den = tape.add(mx2, my2)?;
    let l_den = tape.add_scalar(l_den, cfg.c1());
    let c_den = tape.add(vx, vy)?;
    let c_den = tape.add_scalar(c_den, cfg.c2());
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let map = tape.div(num, den)?;
    let mean = tape.mean(map);
    Ok((mean, map))
}

/// Windowed SSIM of two `h × w` images: `(mean, map)`; the map covers the
/// valid window positions.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    same_len(x, y, "ssim")?;
    if x.len() != h * w {
        return Err(Error::shape(
            "ssim",
            format!("{} values for {h}×{w}", x.len()),
        ));
    }
    if cfg.window > h || cfg.window > w {
        return Err(Error::invalid(format!(
            "SSIM window {} larger than image {h}×{w}",
            cfg.window
        )));
    }
    let mut t = Tape::new();
    let xi = t.constant(x.to_vec(), &[1, h, w])?;
    let yi = t.constant(y.to_vec(), &[1, h, w])?;
    let (mean, map) = ssim_tape(&mut t, xi, yi, cfg)?;
    Ok((t.scalar(mean), t.value(map).to_vec()))
}

/// `l1 + mu · (1 − ssim)` on tape; returns `(total, l1, ssim_mean)`.
pub fn hybrid_tape(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    mu: f64,
    cfg: &SsimConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    let l1 = l1_tape(tape, x, y)?;
    let (s, _) = ssim_tape(tape, x, y, cfg)?;
    let one_minus = tape.mul_scalar(s, -mu);
    let one_minus = tape.add_scalar(one_minus, mu);
    let total = tape.add(l1, one_minus)?;
    Ok((total, l1, s))
}

pub fn hybrid_loss(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    mu: f64,
    cfg: &SsimConfig,
) -> Result<f64> {
    let l1 = l1_loss(x, y)?;
    let (s, _) = ssim(x, y, h, w, cfg)?;
    Ok(l1 + mu * (1.0 - s))
}

/// Mean of `max(|b| − c, 0)`.
pub fn shrinkage_penalty(values: &[f64], limit: f64) -> Result<f64> {
    if !(limit > 0.0) {
        return Err(Error::invalid("shrinkage limit must be > 0"));
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    Ok(values
        .iter()
        .map(|b| (b.abs() - limit).max(0.0))
        .sum::<f64>()
        / values.len() as f64)
}

/// Subgradient of [`shrinkage_penalty`] (zero inside the band).
pub fn shrinkage_grad(values: &[f64], limit: f64) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    values
        .iter()
        .map(|&b| if b.abs() > limit { b.signum() / n } else { 0.0 })
        .collect()
}

pub fn shrinkage_tape(tape: &mut Tape, b: NodeId, limit: f64) -> NodeId {
    let a = tape.abs(b);
    let s = tape.add_scalar(a, -limit);
    let r = tape.leaky_relu_slope(s, 0.0);
    tape.mean(r)
}

/// `10 log10(peak² / MSE)`; `+∞` when the images coincide.
pub fn psnr(x: &[f64], reference: &[f64], peak: f64) -> Result<f64> {
    same_len(x, reference, "psnr")?;
    if x.is_empty() {
        return Err(Error::shape("psnr", "empty input"));
    }
    let mse = x
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a − b`.
    pub statistic: f64,
    pub p_value: f64,
    /// Non-zero pairs used.
    pub n: usize,
    pub exact: bool,
}

/// Largest non-zero pair count evaluated by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Paired two-sided Wilcoxon signed-rank test on `a − b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    same_len(a, b, "wilcoxon")?;
    if a.len() < 5 {
        return Err(Error::invalid(format!(
            "wilcoxon needs at least 5 pairs, got {}",
            a.len()
        )));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::UndefinedTest(
            "all paired differences are zero".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    // Doubled average ranks keep ties integral.
    let mut rank2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        for &o in &order[i..=j] {
            rank2[o] = r2;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w2: u64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank2[k]).sum();
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX {
        let total: u64 = rank2.iter().sum();
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        for &r in &rank2 {
            let r = r as usize;
            for s in (r..counts.len()).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w2 as usize].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2 as usize..].iter().sum::<f64>() / all;
        return Ok(WilcoxonResult {
            statistic,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(Error::UndefinedTest("zero variance".into()));
    }
    let diff = statistic - mean;
    let cc = if diff > 0.0 {
        0.5
    } else if diff < 0.0 {
        -0.5
    } else {
        0.0
    };
    let z = (diff - cc) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    Ok(WilcoxonResult {
        statistic,
        p_value: p,
        n,
        exact: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub case: usize,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub const METRICS_HEADER: &str = "case,method,psnr_db,ssim";

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.case, r.method, r.psnr_db, r.ssim
        ));
    }
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn l1_cases() {
        let x = rv(50, 1);
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
        let y: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert!((l1_loss(&x, &y).unwrap() - 0.5).abs() < 1e-15);
        let z = rv(50, 2);
        let mut acc = 0.0;
        for i in 0..50 {
            acc += (x[i] - z[i]).abs();
        }
        assert!((l1_loss(&x, &z).unwrap() - acc / 50.0).abs() <= 1e-12);
        assert!(l1_loss(&x, &z[..3]).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_checkerboard() {
        let cfg = SsimConfig::default();
        let x = rv(256, 3);
        let y = rv(256, 4);
        assert_eq!(ssim(&x, &x, 16, 16, &cfg).unwrap().0, 1.0);
        let a = ssim(&x, &y, 16, 16, &cfg).unwrap().0;
        let b = ssim(&y, &x, 16, 16, &cfg).unwrap().0;
        assert!((a - b).abs() <= 1e-12);
        let cb: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect();
        let inv: Vec<f64> = cb.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&cb, &inv, 16, 16, &cfg).unwrap().0 < 0.0);
        assert!(ssim(&x[..36], &y[..36], 6, 6, &cfg).is_err());
    }

    #[test]
    fn ssim_constant_closed_form() {
        let cfg = SsimConfig::default();
        let x = vec![0.3; 100];
        let y = vec![0.7; 100];
        let c1 = 1e-4;
        let expect = (2.0 * 0.21 + c1) / (0.09 + 0.49 + c1);
        let (s, map) = ssim(&x, &y, 10, 10, &cfg).unwrap();
        assert!((s - expect).abs() <= 1e-12);
        assert_eq!(map.len(), 16);
    }

    #[test]
    fn hybrid_cases() {
        let cfg = SsimConfig::default();
        let x = rv(144, 5);
        let y = rv(144, 6);
        assert_eq!(hybrid_loss(&x, &x, 12, 12, 2.5, &cfg).unwrap(), 0.0);
        assert_eq!(
            hybrid_loss(&x, &y, 12, 12, 0.0, &cfg).unwrap(),
            l1_loss(&x, &y).unwrap()
        );
        let manual = l1_loss(&x, &y).unwrap() + 0.7 * (1.0 - ssim(&x, &y, 12, 12, &cfg).unwrap().0);
        assert!((hybrid_loss(&x, &y, 12, 12, 0.7, &cfg).unwrap() - manual).abs() <= 1e-12);
        assert!(hybrid_loss(&x, &y, 12, 12, 1.0, &cfg).unwrap() > 0.0);
    }

    #[test]
    fn shrinkage_cases() {
        assert_eq!(shrinkage_penalty(&[0.5], 1.0).unwrap(), 0.0);
        assert_eq!(shrinkage_penalty(&[1.5], 1.0).unwrap(), 0.5);
        assert_eq!(shrinkage_penalty(&[-2.0], 1.0).unwrap(), 1.0);
        let b: Vec<f64> = rv(20, 7).into_iter().map(|v| 4.0 * v - 2.0).collect();
        let c = 3.7;
        let scaled: Vec<f64> = b.iter().map(|v| v * c).collect();
        let lhs = shrinkage_penalty(&scaled, c * 0.8).unwrap();
        let rhs = c * shrinkage_penalty(&b, 0.8).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12);
        assert!(shrinkage_penalty(&b, 0.0).is_err());
    }

    #[test]
    fn psnr_cases() {
        let r = vec![0.0; 100];
        let x = vec![0.01; 100];
        assert!((psnr(&x, &r, 1.0).unwrap() - 40.0).abs() < 0.01);
        assert_eq!(psnr(&r, &r, 1.0).unwrap(), f64::INFINITY);
        let x = vec![1.0; 100];
        assert!((psnr(&x, &r, 255.0).unwrap() - 48.13).abs() < 0.01);
    }

    #[test]
    fn wilcoxon_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!((r.p_value - 0.0625).abs() < 1e-15);
        assert_eq!(r.statistic, 15.0);

        let mut a2 = vec![0.3; 6];
        let b2 = a2.clone();
        a2[2] = 0.5;
        assert!(wilcoxon_signed_rank(&a2, &b2).unwrap().p_value > 0.9);

        let x = rv(12, 8);
        let y = rv(12, 9);
        let p1 = wilcoxon_signed_rank(&x, &y).unwrap().p_value;
        let p2 = wilcoxon_signed_rank(&y, &x).unwrap().p_value;
        assert!((p1 - p2).abs() < 1e-15);

        assert!(matches!(
            wilcoxon_signed_rank(&b, &b),
            Err(Error::UndefinedTest(_))
        ));
        assert!(wilcoxon_signed_rank(&a[..4], &b[..4]).is_err());
    }

    #[test]
    fn wilcoxon_exact_with_ties() {
        // |d| = 1, 1, 2, 3, 3: doubled ranks 3, 3, 6, 9, 9.
        let d = [1.0, -1.0, 2.0, 3.0, 3.0];
        let r = wilcoxon_signed_rank(&d, &[0.0; 5]).unwrap();
        assert_eq!(r.statistic, 13.5);
        // Brute force over all 32 sign patterns.
        let ranks = [1.5, 1.5, 3.0, 4.5, 4.5];
        let mut ge = 0;
        let mut le = 0;
        for m in 0..32u32 {
            let w: f64 = (0..5).filter(|i| m >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w >= 13.5 {
                ge += 1;
            }
            if w <= 13.5 {
                le += 1;
            }
        }
        let expect = (2.0 * (ge.min(le) as f64) / 32.0).min(1.0);
        assert!((r.p_value - expect).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_normal_branch() {
        let a: Vec<f64> = (0..30).map(|i| i as f64 * 0.1 + 0.05).collect();
        let b = vec![0.0; 30];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1e-5);
        // n = 30, no ties: mean 232.5, var 2363.75, W = 465.
        let z = (465.0 - 232.5 - 0.5) / 2363.75f64.sqrt();
        let p = 2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z));
        assert!((r.p_value - p).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_through_tape() {
        let x = rv(100, 10);
        let y = rv(100, 11);
        let cfg = SsimConfig::default();
        let e = check(
            &[(x.clone(), vec![1, 10, 10])],
            |t, ids| {
                let yc = t.constant(y.clone(), &[1, 10, 10]).unwrap();
                l1_tape(t, ids[0], yc).unwrap()
            },
            1e-7,
        );
        assert!(e <= 1e-4, "l1 {e}");
        let e = check(
            &[(x.clone(), vec![1, 10, 10])],
            |t, ids| {
                let yc = t.constant(y.clone(), &[1, 10, 10]).unwrap();
                ssim_tape(t, ids[0], yc, &cfg).unwrap().0
            },
            1e-6,
        );
        assert!(e <= 1e-4, "ssim {e}");
        let b: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.5).collect();
        let e = check(
            &[(b, vec![100])],
            |t, ids| shrinkage_tape(t, ids[0], 0.7),
            1e-7,
        );
        assert!(e <= 1e-4, "shrinkage {e}");
    }

    #[test]
    fn shrinkage_grad_matches_tape() {
        let b: Vec<f64> = rv(30, 12).into_iter().map(|v| 4.0 * v - 2.0).collect();
        let mut t = Tape::new();
        let id = t.param(b.clone(), &[30]).unwrap();
        let p = shrinkage_tape(&mut t, id, 1.1);
        assert!((t.scalar(p) - shrinkage_penalty(&b, 1.1).unwrap()).abs() < 1e-15);
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(id).unwrap(), shrinkage_grad(&b, 1.1).as_slice());
    }
}
