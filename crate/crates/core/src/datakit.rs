//! Synthetic phantoms, coil sensitivities, dataset splits and image files.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::nufft::ComplexImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Modified Shepp–Logan ellipses on `[-1, 1]²`.
pub fn shepp_logan() -> Vec<Ellipse> {
    let rows: [[f64; 6]; 10] = [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
    ];
    rows.iter()
        .map(|r| Ellipse {
            intensity: r[0],
            a: r[1],
            b: r[2],
            cx: r[3],
            cy: r[4],
            angle: r[5].to_radians(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub grid: usize,
    pub image: Vec<f64>,
    pub descriptor: Vec<Ellipse>,
}

/// Shepp–Logan base plus `n_ellipses` seeded random ellipses inside the
/// head, 2×2 supersampled, clipped to `[0, 1]` and scaled to unit maximum.
pub fn make_phantom(grid: usize, seed: u64, n_ellipses: usize) -> Result<Phantom> {
    if grid < 16 {
        return Err(Error::invalid(format!(
            "phantom grid must be >= 16, got {grid}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ell = shepp_logan();
    for _ in 0..n_ellipses {
        let r = rng.gen_range(0.0..0.45);
        let th = rng.gen_range(0.0..std::f64::consts::TAU);
        let sign = if rng.gen_bool(0.6) { 1.0 } else { -1.0 };
        ell.push(Ellipse {
            cx: 0.75 * r * th.cos(),
            cy: r * th.sin(),
            a: rng.gen_range(0.03..0.22),
            b: rng.gen_range(0.03..0.22),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: sign * rng.gen_range(0.08..0.35),
        });
    }
    let n = grid as f64;
    let mut image = vec![0.0; grid * grid];
    for iy in 0..grid {
        for ix in 0..grid {
            let mut acc = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = (ix as f64 + 0.25 + 0.5 * sx as f64) / n * 2.0 - 1.0;
                    let y = 1.0 - (iy as f64 + 0.25 + 0.5 * sy as f64) / n * 2.0;
                    acc += ell
                        .iter()
                        .filter(|e| e.contains(x, y))
                        .map(|e| e.intensity)
                        .sum::<f64>();
                }
            }
            image[iy * grid + ix] = (acc / 4.0).clamp(0.0, 1.0);
        }
    }
    let mx = image.iter().cloned().fold(0.0, f64::max);
    if mx > 0.0 {
        image.iter_mut().for_each(|v| *v /= mx);
    }
    Ok(Phantom {
        grid,
        image,
        descriptor: ell,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoilSet {
    pub grid: usize,
    pub maps: Vec<Vec<Complex64>>,
}

impl CoilSet {
    pub fn coils(&self) -> usize {
        self.maps.len()
    }
}

/// Gaussian-profile coils anchored on a ring around the field of view,
/// with seeded linear phase, normalized to unit sum-of-squares per pixel.
pub fn make_coils(grid: usize, coils: usize, seed: u64) -> Result<CoilSet> {
    if coils == 0 || grid == 0 {
        return Err(Error::invalid("make_coils needs coils >= 1 and grid >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma2 = 2.0 * 0.9f64.powi(2);
    let params: Vec<[f64; 5]> = (0..coils)
        .map(|c| {
            let th = std::f64::consts::TAU * c as f64 / coils as f64 + rng.gen_range(-0.1..0.1);
            [
                1.3 * th.cos(),
                1.3 * th.sin(),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let n = grid as f64;
    let mut maps = vec![vec![Complex64::new(0.0, 0.0); grid * grid]; coils];
    for iy in 0..grid {
        for ix in 0..grid {
            let x = (ix as f64 + 0.5) / n * 2.0 - 1.0;
            let y = 1.0 - (iy as f64 + 0.5) / n * 2.0;
            let mut ss = 0.0;
            for (c, p) in params.iter().enumerate() {
                let mag = (-((x - p[0]).powi(2) + (y - p[1]).powi(2)) / sigma2).exp();
                let phase = p[2] + p[3] * x + p[4] * y;
                let z = Complex64::from_polar(mag, phase);
                ss += z.norm_sqr();
                maps[c][iy * grid + ix] = z;
            }
            let inv = 1.0 / ss.sqrt();
            for m in &mut maps {
                m[iy * grid + ix] *= inv;
            }
        }
    }
    Ok(CoilSet { grid, maps })
}

/// `S_c ⊙ image` for every coil.
pub fn simulate_coil_images(image: &[f64], coils: &CoilSet) -> Result<Vec<ComplexImage>> {
    if image.len() != coils.grid * coils.grid {
        return Err(Error::shape(
            "simulate_coil_images",
            format!("{} pixels vs coil grid {}", image.len(), coils.grid),
        ));
    }
    coils
        .maps
        .iter()
        .map(|m| {
            ComplexImage::new(
                coils.grid,
                m.iter().zip(image).map(|(s, &v)| s * v).collect(),
            )
        })
        .collect()
}

/// Seeded disjoint train/val/test index lists.
pub fn dataset_split(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok([idx, val, test])
}

/// One training or evaluation case.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub image: Vec<f64>,
    pub coils: Vec<ComplexImage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub grid: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub coils: usize,
    pub ellipses: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            n_train: 30,
            n_val: 4,
            n_test: 16,
            coils: 4,
            ellipses: 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generate phantoms `0..total` from `seed`, assigning them to splits by a
/// seeded shuffle. Every phantom shares one coil set.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    if cfg.n_train == 0 {
        return Err(Error::invalid(
            "dataset needs at least one training phantom",
        ));
    }
    let coils = make_coils(cfg.grid, cfg.coils, seed ^ 0xC011)?;
    let t = total as f64;
    let [tr, va, te] = dataset_split(
        total,
        [
            cfg.n_train as f64 / t,
            cfg.n_val as f64 / t,
            cfg.n_test as f64 / t,
        ],
        seed,
    )?;
    let make = |ids: Vec<usize>| -> Result<Vec<Sample>> {
        ids.into_iter()
            .map(|id| {
                let ph = make_phantom(
                    cfg.grid,
                    seed.wrapping_mul(1_000_003).wrapping_add(id as u64),
                    cfg.ellipses,
                )?;
                let coil_imgs = simulate_coil_images(&ph.image, &coils)?;
                Ok(Sample {
                    id,
                    image: ph.image,
                    coils: coil_imgs,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: make(tr)?,
        val: make(va)?,
        test: make(te)?,
    })
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// 16-bit binary PGM; values mapped linearly from `[lo, hi]` and clipped.
pub fn save_pgm16(
    path: &Path,
    img: &[f64],
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
) -> Result<()> {
    if img.len() != width * height {
        return Err(Error::shape(
            "save_pgm16",
            format!("{} values for {width}×{height}", img.len()),
        ));
    }
    if !(hi > lo) {
        return Err(Error::invalid("PGM range needs hi > lo"));
    }
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in img {
        let q = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_atomic(path, &bytes)
}

/// Returns `(width, height, values in [0, 1])`.
pub fn load_pgm16(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<(String, usize)> {
        while *pos < bytes.len() && (bytes[*pos].is_ascii_whitespace() || bytes[*pos] == b'#') {
            if bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                *pos += 1;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err(path, start, "unexpected end of header"));
        }
        Ok((
            String::from_utf8_lossy(&bytes[start..*pos]).into_owned(),
            start,
        ))
    };
    let (magic, off) = token(&mut pos)?;
    if magic != "P5" {
        return Err(parse_err(
            path,
            off,
            format!("expected P5 magic, found {magic:?}"),
        ));
    }
    let mut nums = [0usize; 3];
    for n in &mut nums {
        let (t, off) = token(&mut pos)?;
        *n = t
            .parse()
            .map_err(|_| parse_err(path, off, format!("invalid header number {t:?}")))?;
    }
    let [w, h, maxval] = nums;
    if maxval != 65535 {
        return Err(parse_err(
            path,
            pos,
            format!("expected maxval 65535, found {maxval}"),
        ));
    }
    pos += 1;
    let need = w * h * 2;
    if bytes.len() < pos + need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated pixel data: need {need} bytes after header"),
        ));
    }
    let vals = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok((w, h, vals))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawMeta {
    shape: Vec<usize>,
    dtype: String,
}

fn raw_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_owned();
    name.push(".json");
    path.with_file_name(name)
}

/// Little-endian f32 values plus a JSON shape sidecar.
pub fn save_raw_f32(path: &Path, values: &[f32], shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::shape(
            "save_raw_f32",
            format!("{} values for shape {shape:?}", values.len()),
        ));
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let meta = RawMeta {
        shape: shape.to_vec(),
        dtype: "f32le".into(),
    };
    write_atomic(
        &raw_sidecar(path),
        &serde_json::to_vec(&meta).expect("serializable"),
    )
}

pub fn load_raw_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let side = raw_sidecar(path);
    let mb = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RawMeta =
        serde_json::from_slice(&mb).map_err(|e| parse_err(&side, e.column(), e.to_string()))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let need = meta.shape.iter().product::<usize>() * 4;
    if bytes.len() != need {
        return Err(parse_err(
            path,
            bytes.len().min(need),
            format!("expected {need} bytes, found {}", bytes.len()),
        ));
    }
    Ok((
        meta.shape,
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::rss;

    #[test]
    fn phantom_determinism_and_range() {
        let a = make_phantom(32, 5, 4).unwrap();
        assert_eq!(a, make_phantom(32, 5, 4).unwrap());
        assert_ne!(a.image, make_phantom(32, 6, 4).unwrap().image);
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.image.iter().cloned().fold(0.0, f64::max), 1.0);
        let base = make_phantom(32, 1, 0).unwrap();
        assert_eq!(base.descriptor, shepp_logan());
        assert_eq!(base.image, make_phantom(32, 2, 0).unwrap().image);
        assert!(make_phantom(8, 1, 0).is_err());
    }

    #[test]
    fn coil_normalization() {
        let one = make_coils(16, 1, 3).unwrap();
        assert!(one.maps[0].iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        let cs = make_coils(24, 6, 4).unwrap();
        assert_eq!(cs, make_coils(24, 6, 4).unwrap());
        for p in 0..24 * 24 {
            let ss: f64 = cs.maps.iter().map(|m| m[p].norm_sqr()).sum();
            assert!((ss - 1.0).abs() <= 1e-10);
        }
        let ph = make_phantom(24, 1, 3).unwrap();
        let imgs = simulate_coil_images(&ph.image, &cs).unwrap();
        for (r, v) in rss(&imgs).unwrap().iter().zip(&ph.image) {
            assert!((r - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn simulate_degenerate_cases() {
        let cs = make_coils(16, 3, 1).unwrap();
        let zero = simulate_coil_images(&[0.0; 256], &cs).unwrap();
        assert!(zero
            .iter()
            .all(|c| c.data().iter().all(|z| z.norm() == 0.0)));
        let one = make_coils(16, 1, 1).unwrap();
        let ph = make_phantom(16, 2, 1).unwrap();
        let out = simulate_coil_images(&ph.image, &one).unwrap();
        for (z, v) in out[0].data().iter().zip(&ph.image) {
            assert!((z.norm() - v).abs() < 1e-12);
        }
        let doubled: Vec<f64> = ph.image.iter().map(|v| 2.0 * v).collect();
        let a = simulate_coil_images(&ph.image, &cs).unwrap();
        let b = simulate_coil_images(&doubled, &cs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((2.0 * p - q).norm() < 1e-15);
            }
        }
        assert!(simulate_coil_images(&[0.0; 10], &cs).is_err());
    }

    #[test]
    fn split_counts() {
        let [a, b, c] = dataset_split(80, [0.75, 0.0625, 0.1875], 9).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 5, 15));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..80).collect::<Vec<_>>());
        assert_eq!(
            dataset_split(80, [0.75, 0.0625, 0.1875], 9).unwrap(),
            [a, b, c]
        );
        assert!(dataset_split(10, [0.5, 0.6, 0.1], 1).is_err());
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.pgm");
        let ramp: Vec<f64> = (0..40 * 30).map(|i| i as f64 / 1199.0).collect();
        save_pgm16(&p, &ramp, 40, 30, 0.0, 1.0).unwrap();
        let (w, h, v) = load_pgm16(&p).unwrap();
        assert_eq!((w, h), (40, 30));
        let err = ramp
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1.0 / 65535.0, "{err}");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_pgm16(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, b"P2\n1 1\n65535\n00").unwrap();
        assert!(matches!(
            load_pgm16(&p),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.f32");
        let vals: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 2.0).collect();
        save_raw_f32(&p, &vals, &[3, 4]).unwrap();
        assert_eq!(load_raw_f32(&p).unwrap(), (vec![3, 4], vals));
        std::fs::write(&p, [0u8; 7]).unwrap();
        assert!(matches!(load_raw_f32(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn dataset_is_disjoint_and_deterministic() {
        let cfg = DataConfig {
            grid: 16,
            n_train: 5,
            n_val: 2,
            n_test: 3,
            coils: 2,
            ellipses: 2,
        };
        let d = build_dataset(&cfg, 7).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (5, 2, 3));
        let d2 = build_dataset(&cfg, 7).unwrap();
        assert_eq!(d.test[0].image, d2.test[0].image);
        let mut ids: Vec<usize> = d
            .train
            .iter()
            .chain(&d.val)
            .chain(&d.test)
            .map(|s| s.id)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }
}
