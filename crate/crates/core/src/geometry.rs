//! Trajectory representations, classical initializers, kinematic analysis
//! and hardware-limit checks.
//!
//! Coordinates are stored in normalized k-space units (cycles/pixel, inside
//! `[-0.5, 0.5)`). Physical units (1/m) only appear inside [`kinematics`],
//! via `k_phys = k_norm * matrix / fov`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proton gyromagnetic ratio in Hz/T.
pub const GAMMA_PROTON: f64 = 42.577e6;

/// Gradient hardware limits and acquisition timing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsLimits {
    /// Maximum gradient amplitude [T/m].
    pub g_max: f64,
    /// Maximum slew rate [T/m/s].
    pub s_max: f64,
    /// Gyromagnetic ratio [Hz/T].
    pub gamma: f64,
    /// Sample spacing along a readout [s].
    pub dwell: f64,
    /// Field of view [m].
    pub fov: f64,
    /// Reconstruction matrix size; sets the physical k-space extent.
    pub matrix: usize,
}

impl Default for PhysicsLimits {
    fn default() -> Self {
        Self {
            g_max: 50e-3,
            s_max: 200.0,
            gamma: GAMMA_PROTON,
            dwell: 4e-6,
            fov: 0.24,
            matrix: 64,
        }
    }
}

impl PhysicsLimits {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("g_max", self.g_max),
            ("s_max", self.s_max),
            ("gamma", self.gamma),
            ("dwell", self.dwell),
            ("fov", self.fov),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "limits.{name} must be > 0, got {v}"
                )));
            }
        }
        if self.matrix == 0 {
            return Err(Error::invalid("limits.matrix must be >= 1"));
        }
        Ok(())
    }

    /// Largest k-space speed allowed by the gradient limit [1/m/s].
    pub fn max_velocity(&self) -> f64 {
        self.gamma * self.g_max
    }

    /// Largest k-space acceleration allowed by the slew limit [1/m/s^2].
    pub fn max_acceleration(&self) -> f64 {
        self.gamma * self.s_max
    }

    /// Conversion factor from normalized to physical k [1/m per cycle/pixel].
    pub fn k_scale(&self) -> f64 {
        self.matrix as f64 / self.fov
    }
}

/// A multi-shot 2D k-space trajectory, shot-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    shots: usize,
    samples_per_shot: usize,
    points: Vec<[f64; 2]>,
    dwell: f64,
}

impl Trajectory {
    /// Build a trajectory, checking shape, finiteness and the `[-0.5, 0.5)` band.
    pub fn new(
        shots: usize,
        samples_per_shot: usize,
        points: Vec<[f64; 2]>,
        dwell: f64,
    ) -> Result<Self> {
        if shots == 0 || samples_per_shot == 0 {
            return Err(Error::invalid(
                "trajectory needs at least one shot and one sample",
            ));
        }
        if points.len() != shots * samples_per_shot {
            return Err(Error::shape(
                "Trajectory::new",
                format!("{} points for {shots} x {samples_per_shot}", points.len()),
            ));
        }
        if !(dwell.is_finite() && dwell > 0.0) {
            return Err(Error::invalid(format!("dwell must be > 0, got {dwell}")));
        }
        for (i, p) in points.iter().enumerate() {
            for &c in p {
                if !c.is_finite() || !(-0.5..0.5).contains(&c) {
                    return Err(Error::invalid(format!(
                        "point {i} coordinate {c} outside [-0.5, 0.5)"
                    )));
                }
            }
        }
        Ok(Self {
            shots,
            samples_per_shot,
            points,
            dwell,
        })
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn samples_per_shot(&self) -> usize {
        self.samples_per_shot
    }

    pub fn dwell(&self) -> f64 {
        self.dwell
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn shot(&self, i: usize) -> &[[f64; 2]] {
        let n = self.samples_per_shot;
        &self.points[i * n..(i + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Write the binary trajectory file plus its `.json` sidecar.
    pub fn save(&self, path: &Path, fov: f64) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 16 * self.points.len());
        buf.extend_from_slice(TRAJ_MAGIC);
        buf.extend_from_slice(&TRAJ_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.shots as u64).to_le_bytes());
        buf.extend_from_slice(&(self.samples_per_shot as u64).to_le_bytes());
        for p in &self.points {
            buf.extend_from_slice(&p[0].to_le_bytes());
            buf.extend_from_slice(&p[1].to_le_bytes());
        }
        crate::io_util::write_atomic(path, &buf)?;
        let side = TrajectorySidecar {
            dwell: self.dwell,
            fov,
        };
        let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
        crate::io_util::write_atomic(&sidecar_path(path), &json)
    }

    /// Load a trajectory written by [`Trajectory::save`]; returns it with the sidecar fov.
    pub fn load(path: &Path) -> Result<(Self, f64)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |offset: usize, message: &str| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 24 {
            return Err(parse_err(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != TRAJ_MAGIC {
            return Err(parse_err(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TRAJ_VERSION {
            return Err(parse_err(4, "unsupported version"));
        }
        let shots = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let sps = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let expected = shots
            .checked_mul(sps)
            .and_then(|n| n.checked_mul(16))
            .ok_or_else(|| parse_err(8, "header counts overflow"))?;
        if bytes.len() - 24 != expected {
            return Err(parse_err(
                bytes.len(),
                "payload length does not match header",
            ));
        }
        let points = bytes[24..]
            .chunks_exact(16)
            .map(|c| {
                [
                    f64::from_le_bytes(c[0..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..16].try_into().unwrap()),
                ]
            })
            .collect();
        let side_path = sidecar_path(path);
        let side_bytes = fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: TrajectorySidecar =
            serde_json::from_slice(&side_bytes).map_err(|e| Error::Parse {
                path: side_path.clone(),
                offset: e.column(),
                message: e.to_string(),
            })?;
        Ok((Self::new(shots, sps, points, side.dwell)?, side.fov))
    }
}

const TRAJ_MAGIC: &[u8; 4] = b"KTRJ";
const TRAJ_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrajectorySidecar {
    dwell: f64,
    fov: f64,
}

/// Path of the JSON sidecar that accompanies a binary file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn check_extent(k_extent: f64) -> Result<()> {
    if !(k_extent.is_finite() && k_extent > 0.0) {
        return Err(Error::invalid(format!(
            "k_extent must be > 0, got {k_extent}"
        )));
    }
    if k_extent > 0.5 {
        return Err(Error::invalid(format!(
            "k_extent {k_extent} exceeds the normalized band 0.5"
        )));
    }
    Ok(())
}

/// Radial spokes through the origin; shot `i` sits at angle `i * pi / n_shots`.
pub fn init_radial(
    n_shots: usize,
    samples_per_shot: usize,
    k_extent: f64,
    dwell: f64,
) -> Result<Trajectory> {
    if n_shots == 0 || samples_per_shot == 0 {
        return Err(Error::invalid(
            "radial init needs n_shots >= 1 and samples_per_shot >= 1",
        ));
    }
    check_extent(k_extent)?;
    let mut points = Vec::with_capacity(n_shots * samples_per_shot);
    for i in 0..n_shots {
        let theta = i as f64 * PI / n_shots as f64;
        let (s, c) = theta.sin_cos();
        for j in 0..samples_per_shot {
            let r = -k_extent + 2.0 * k_extent * j as f64 / samples_per_shot as f64;
            points.push([r * c, r * s]);
        }
    }
    Trajectory::new(n_shots, samples_per_shot, points, dwell)
}

/// Phase-encode line indices (0-based, ky = (p - grid/2) / grid) used by
/// [`init_cartesian`]: a fully sampled center plus equispaced outer lines.
pub fn cartesian_lines(
    n_lines: usize,
    grid_size: usize,
    center_fraction: f64,
) -> Result<Vec<usize>> {
    if grid_size == 0 {
        return Err(Error::invalid("grid_size must be >= 1"));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(Error::invalid(format!(
            "center_fraction {center_fraction} outside [0, 1]"
        )));
    }
    let n_center = (center_fraction * grid_size as f64).round() as usize;
    if n_lines + n_center > grid_size {
        return Err(Error::invalid(format!(
            "{n_lines} outer + {n_center} center lines exceed grid {grid_size}"
        )));
    }
    if n_lines + n_center == 0 {
        return Err(Error::invalid("cartesian init needs at least one line"));
    }
    let start = grid_size / 2 - n_center / 2;
    let mut lines: Vec<usize> = (start..start + n_center).collect();
    for i in 0..n_lines {
        let p = ((i as f64 + 0.5) * grid_size as f64 / n_lines as f64).floor() as usize;
        lines.push(p.min(grid_size - 1));
    }
    lines.sort_unstable();
    lines.dedup();
    Ok(lines)
}

/// Cartesian readouts along kx, one shot per phase-encode line.
pub fn init_cartesian(
    n_lines: usize,
    grid_size: usize,
    center_fraction: f64,
    samples_per_shot: usize,
    dwell: f64,
) -> Result<Trajectory> {
    if samples_per_shot == 0 {
        return Err(Error::invalid("samples_per_shot must be >= 1"));
    }
    let lines = cartesian_lines(n_lines, grid_size, center_fraction)?;
    let mut points = Vec::with_capacity(lines.len() * samples_per_shot);
    for &p in &lines {
        let ky = (p as f64 - (grid_size / 2) as f64) / grid_size as f64;
        for j in 0..samples_per_shot {
            points.push([-0.5 + j as f64 / samples_per_shot as f64, ky]);
        }
    }
    Trajectory::new(lines.len(), samples_per_shot, points, dwell)
}

/// Default number of revolutions for a spiral interleave.
pub const DEFAULT_SPIRAL_TURNS: f64 = 8.0;

/// Uniform-density Archimedean spiral interleaves rotated by `2 pi / n`.
pub fn init_spiral(
    n_interleaves: usize,
    samples_per_shot: usize,
    turns: f64,
    k_extent: f64,
    dwell: f64,
) -> Result<Trajectory> {
    if n_interleaves == 0 || samples_per_shot < 2 {
        return Err(Error::invalid(
            "spiral init needs n_interleaves >= 1 and samples_per_shot >= 2",
        ));
    }
    if !(turns.is_finite() && turns > 0.0) {
        return Err(Error::invalid(format!("turns must be > 0, got {turns}")));
    }
    check_extent(k_extent)?;
    let mut points = Vec::with_capacity(n_interleaves * samples_per_shot);
    for i in 0..n_interleaves {
        let rot = 2.0 * PI * i as f64 / n_interleaves as f64;
        for j in 0..samples_per_shot {
            let tau = j as f64 / (samples_per_shot - 1) as f64;
            let r = k_extent * tau;
            let phi = 2.0 * PI * turns * tau + rot;
            points.push([r * phi.cos(), r * phi.sin()]);
        }
    }
    Trajectory::new(n_interleaves, samples_per_shot, points, dwell)
}

/// Segment start points of every shot, flattened as (shot, control, [kx, ky]).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlState {
    pub shots: usize,
    pub n_control: usize,
    pub values: Vec<f64>,
    /// Duration of one segment [s].
    pub segment_duration: f64,
}

impl ControlState {
    pub fn point(&self, shot: usize, control: usize) -> [f64; 2] {
        let i = 2 * (shot * self.n_control + control);
        [self.values[i], self.values[i + 1]]
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn extract_control_points(traj: &Trajectory, n_control: usize) -> Result<ControlState> {
    let sps = traj.samples_per_shot();
    if n_control == 0 || !sps.is_multiple_of(n_control) {
        return Err(Error::invalid(format!(
            "samples_per_shot {sps} is not divisible by n_control {n_control}"
        )));
    }
    let seg = sps / n_control;
    let mut values = Vec::with_capacity(traj.shots() * n_control * 2);
    for s in 0..traj.shots() {
        let shot = traj.shot(s);
        for c in 0..n_control {
            let p = shot[c * seg];
            values.extend_from_slice(&p);
        }
    }
    Ok(ControlState {
        shots: traj.shots(),
        n_control,
        values,
        segment_duration: traj.dwell() * seg as f64,
    })
}

/// Finite-difference k-space kinematics in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics {
    pub shots: usize,
    pub samples_per_shot: usize,
    /// Forward differences, `(shots, sps - 1)` [1/m/s].
    pub velocity: Vec<[f64; 2]>,
    /// Central second differences, `(shots, sps - 2)` [1/m/s^2].
    pub acceleration: Vec<[f64; 2]>,
    /// `velocity / gamma` [T/m].
    pub gradient: Vec<[f64; 2]>,
    /// `acceleration / gamma` [T/m/s].
    pub slew: Vec<[f64; 2]>,
}

pub fn kinematics(traj: &Trajectory, limits: &PhysicsLimits) -> Result<Kinematics> {
    kinematics_of(
        traj.points(),
        traj.shots(),
        traj.samples_per_shot(),
        traj.dwell(),
        limits,
    )
}

/// [`kinematics`] for raw points that need not lie inside the normalized band.
pub fn kinematics_of(
    points: &[[f64; 2]],
    shots: usize,
    samples_per_shot: usize,
    dwell: f64,
    limits: &PhysicsLimits,
) -> Result<Kinematics> {
    let n = samples_per_shot;
    if n < 3 {
        return Err(Error::invalid(format!(
            "kinematics needs >= 3 samples per shot, got {n}"
        )));
    }
    if points.len() != shots * n {
        return Err(Error::shape(
            "kinematics",
            format!("{} points for {shots} x {n}", points.len()),
        ));
    }
    let scale = limits.k_scale();
    let mut velocity = Vec::with_capacity(shots * (n - 1));
    let mut acceleration = Vec::with_capacity(shots * (n - 2));
    for s in 0..shots {
        let shot = &points[s * n..(s + 1) * n];
        for w in shot.windows(2) {
            velocity.push([
                (w[1][0] - w[0][0]) * scale / dwell,
                (w[1][1] - w[0][1]) * scale / dwell,
            ]);
        }
        for w in shot.windows(3) {
            acceleration.push([
                (w[2][0] - 2.0 * w[1][0] + w[0][0]) * scale / (dwell * dwell),
                (w[2][1] - 2.0 * w[1][1] + w[0][1]) * scale / (dwell * dwell),
            ]);
        }
    }
    let g = limits.gamma;
    let gradient = velocity.iter().map(|v| [v[0] / g, v[1] / g]).collect();
    let slew = acceleration.iter().map(|a| [a[0] / g, a[1] / g]).collect();
    Ok(Kinematics {
        shots,
        samples_per_shot: n,
        velocity,
        acceleration,
        gradient,
        slew,
    })
}

/// Fraction of samples within limits and the worst excess, per quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub frac_velocity_ok: f64,
    pub frac_accel_ok: f64,
    pub max_velocity_excess: f64,
    pub max_accel_excess: f64,
}

fn norm2(v: &[f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

pub fn check_limits(kin: &Kinematics, limits: &PhysicsLimits) -> ConstraintReport {
    let summarize = |vals: &[[f64; 2]], cap: f64| {
        if vals.is_empty() {
            return (1.0, 0.0);
        }
        let mut ok = 0usize;
        let mut worst = 0.0f64;
        for v in vals {
            let excess = norm2(v) - cap;
            if excess <= 0.0 {
                ok += 1;
            } else {
                worst = worst.max(excess);
            }
        }
        (ok as f64 / vals.len() as f64, worst)
    };
    let (fv, ev) = summarize(&kin.velocity, limits.max_velocity());
    let (fa, ea) = summarize(&kin.acceleration, limits.max_acceleration());
    ConstraintReport {
        frac_velocity_ok: fv,
        frac_accel_ok: fa,
        max_velocity_excess: ev,
        max_accel_excess: ea,
    }
}

/// Header of the gradient waveform CSV.
pub const WAVEFORM_HEADER: &str = "shot,idx,t_s,kx_invm,ky_invm,gx_Tpm,gy_Tpm,sx_Tpms,sy_Tpms";

/// One row of the waveform CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveformRow {
    pub shot: usize,
    pub idx: usize,
    pub t_s: f64,
    pub k: [f64; 2],
    pub g: [f64; 2],
    pub s: [f64; 2],
}

/// Per-sample waveform rows. The gradient of the last sample and the slew
/// of the first and last samples of each shot are reported as zero.
pub fn waveform_rows(traj: &Trajectory, limits: &PhysicsLimits) -> Result<Vec<WaveformRow>> {
    let kin = kinematics(traj, limits)?;
    let n = traj.samples_per_shot();
    let scale = limits.k_scale();
    let mut rows = Vec::with_capacity(traj.len());
    for s in 0..traj.shots() {
        for (j, p) in traj.shot(s).iter().enumerate() {
            let g = if j + 1 < n {
                kin.gradient[s * (n - 1) + j]
            } else {
                [0.0; 2]
            };
            let sl = if j >= 1 && j + 1 < n {
                kin.slew[s * (n - 2) + j - 1]
            } else {
                [0.0; 2]
            };
            rows.push(WaveformRow {
                shot: s,
                idx: j,
                t_s: j as f64 * traj.dwell(),
                k: [p[0] * scale, p[1] * scale],
                g,
                s: sl,
            });
        }
    }
    Ok(rows)
}

pub fn export_waveforms(traj: &Trajectory, limits: &PhysicsLimits, path: &Path) -> Result<()> {
    let rows = waveform_rows(traj, limits)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{WAVEFORM_HEADER}").map_err(io)?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.shot, r.idx, r.t_s, r.k[0], r.k[1], r.g[0], r.g[1], r.s[0], r.s[1]
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_waveforms(path: &Path) -> Result<Vec<WaveformRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let mut offset = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let perr = |message: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        };
        if lineno == 0 {
            if line != WAVEFORM_HEADER {
                return Err(perr("unexpected header".into()));
            }
        } else {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(perr(format!("expected 9 fields, found {}", f.len())));
            }
            let u = |s: &str| s.parse::<usize>().map_err(|e| perr(e.to_string()));
            let x = |s: &str| s.parse::<f64>().map_err(|e| perr(e.to_string()));
            rows.push(WaveformRow {
                shot: u(f[0])?,
                idx: u(f[1])?,
                t_s: x(f[2])?,
                k: [x(f[3])?, x(f[4])?],
                g: [x(f[5])?, x(f[6])?],
                s: [x(f[7])?, x(f[8])?],
            });
        }
        offset += line.len() + 1;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DWELL: f64 = 4e-6;

    #[test]
    fn radial_two_shots_along_axes() {
        let t = init_radial(2, 8, 0.5, DWELL).unwrap();
        for p in t.shot(0) {
            assert_eq!(p[1], 0.0);
        }
        for p in t.shot(1) {
            assert!(p[0].abs() < 1e-15);
        }
    }

    #[test]
    fn radial_single_shot_points() {
        let t = init_radial(1, 4, 0.5, DWELL).unwrap();
        let xs: Vec<f64> = t.points().iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-0.5, -0.25, 0.0, 0.25]);
        assert!(t.points().iter().all(|p| p[1] == 0.0));
    }

    #[test]
    fn radial_sixteen_spokes_angles() {
        let t = init_radial(16, 1000, 0.5, DWELL).unwrap();
        assert_eq!(t.len(), 16_000);
        for i in 0..16 {
            // First sample is -k_extent * (cos, sin) of the spoke angle.
            let p = t.shot(i)[0];
            let angle = (-p[1]).atan2(-p[0]);
            let expect = i as f64 * PI / 16.0;
            assert!((angle.rem_euclid(PI) - expect).abs() < 1e-12, "shot {i}");
        }
    }

    #[test]
    fn radial_rejects_out_of_band_extent() {
        assert!(init_radial(4, 10, 0.6, DWELL).is_err());
        assert!(init_spiral(4, 10, 8.0, 0.51, DWELL).is_err());
    }

    #[test]
    fn cartesian_ten_percent_center_fraction() {
        let lines = cartesian_lines(0, 256, 0.1).unwrap();
        assert_eq!(lines.len(), 26);
        assert!(lines.windows(2).all(|w| w[1] == w[0] + 1));
        assert!(lines.contains(&128));
    }

    #[test]
    fn cartesian_full_grid() {
        let t = init_cartesian(8, 8, 0.0, 8, DWELL).unwrap();
        assert_eq!(t.shots(), 8);
        let mut seen = std::collections::BTreeSet::new();
        for p in t.points() {
            seen.insert(((p[0] * 8.0).round() as i64, (p[1] * 8.0).round() as i64));
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn cartesian_small_grid_lines() {
        // center: round(0.25 * 8) = 2 lines at {3, 4}; outer: floor((i + 0.5) * 4) = {2, 6}.
        let lines = cartesian_lines(2, 8, 0.25).unwrap();
        assert_eq!(lines, vec![2, 3, 4, 6]);
    }

    #[test]
    fn cartesian_rejects_too_many_lines() {
        assert!(cartesian_lines(7, 8, 0.25).is_err());
    }

    #[test]
    fn spiral_rotations_and_endpoints() {
        let t = init_spiral(4, 200, DEFAULT_SPIRAL_TURNS, 0.45, DWELL).unwrap();
        for i in 0..4 {
            let shot = t.shot(i);
            assert_eq!(shot[0], [0.0, 0.0]);
            let last = shot[199];
            assert!((last[0].hypot(last[1]) - 0.45).abs() < 1e-12);
            // Turns are integral, so the endpoint angle equals the rotation offset.
            let angle = last[1].atan2(last[0]).rem_euclid(2.0 * PI);
            let expect = i as f64 * PI / 2.0;
            let diff = (angle - expect).abs();
            assert!(
                diff < 1e-9 || (diff - 2.0 * PI).abs() < 1e-9,
                "interleave {i}"
            );
        }
    }

    #[test]
    fn control_points_every_tenth_sample() {
        let t = init_radial(2, 1000, 0.5, DWELL).unwrap();
        let c = extract_control_points(&t, 100).unwrap();
        assert_eq!(c.values.len(), 2 * 100 * 2);
        assert!((c.segment_duration - 40e-6).abs() < 1e-18);
        for s in 0..2 {
            for k in 0..100 {
                assert_eq!(c.point(s, k), t.shot(s)[10 * k]);
            }
        }
    }

    #[test]
    fn control_points_identity_and_shape() {
        let t = init_radial(2, 4, 0.5, DWELL).unwrap();
        let c = extract_control_points(&t, 2).unwrap();
        assert_eq!(c.values.len(), 8);
        let id = extract_control_points(&t, 4).unwrap();
        let flat: Vec<f64> = t.points().iter().flat_map(|p| p.iter().copied()).collect();
        assert_eq!(id.values, flat);
        assert!(extract_control_points(&t, 3).is_err());
    }

    /// A spoke sweeping +-1000 1/m in 4 ms (1000 samples at 4 us).
    fn thousand_per_metre_spoke() -> (Trajectory, PhysicsLimits) {
        // k_extent * matrix / fov = 1000 1/m with matrix 64, fov 0.016 at k_extent 0.25.
        let limits = PhysicsLimits {
            fov: 0.016,
            matrix: 64,
            ..PhysicsLimits::default()
        };
        (init_radial(1, 1000, 0.25, DWELL).unwrap(), limits)
    }

    #[test]
    fn spoke_kinematics_analytic() {
        let (t, limits) = thousand_per_metre_spoke();
        let kin = kinematics(&t, &limits).unwrap();
        for v in &kin.velocity {
            assert!((norm2(v) - 5.0e5).abs() < 1e-6 * 5.0e5);
        }
        for a in &kin.acceleration {
            assert!(norm2(a) < 1e-9 * 5.0e5 / DWELL);
        }
        let g = norm2(&kin.gradient[0]);
        assert!((g - 5.0e5 / GAMMA_PROTON).abs() < 1e-12);
        assert!((g - 1.174e-2).abs() < 1e-5);
        let report = check_limits(&kin, &limits);
        assert_eq!(report.frac_velocity_ok, 1.0);
        assert_eq!(report.max_velocity_excess, 0.0);
    }

    #[test]
    fn stationary_trajectory_is_at_rest() {
        let t = Trajectory::new(1, 5, vec![[0.1, -0.2]; 5], DWELL).unwrap();
        let limits = PhysicsLimits::default();
        let kin = kinematics(&t, &limits).unwrap();
        assert!(kin.velocity.iter().all(|v| *v == [0.0, 0.0]));
        assert!(kin.acceleration.iter().all(|a| *a == [0.0, 0.0]));
        let r = check_limits(&kin, &limits);
        assert_eq!((r.frac_velocity_ok, r.frac_accel_ok), (1.0, 1.0));
        assert_eq!((r.max_velocity_excess, r.max_accel_excess), (0.0, 0.0));
    }

    #[test]
    fn excess_is_exact() {
        let limits = PhysicsLimits::default();
        let cap = limits.max_velocity();
        let kin = Kinematics {
            shots: 1,
            samples_per_shot: 3,
            velocity: vec![[2.0 * cap, 0.0], [0.5 * cap, 0.0]],
            acceleration: vec![[0.0, 0.0]],
            gradient: vec![],
            slew: vec![],
        };
        let r = check_limits(&kin, &limits);
        assert_eq!(r.max_velocity_excess, 2.0 * cap - cap);
        assert_eq!(r.frac_velocity_ok, 0.5);
    }

    #[test]
    fn kinematics_requires_three_samples() {
        let t = Trajectory::new(1, 2, vec![[0.0, 0.0]; 2], DWELL).unwrap();
        assert!(kinematics(&t, &PhysicsLimits::default()).is_err());
    }

    #[test]
    fn trajectory_rejects_out_of_band() {
        assert!(Trajectory::new(1, 1, vec![[0.5, 0.0]], DWELL).is_err());
        assert!(Trajectory::new(1, 1, vec![[f64::NAN, 0.0]], DWELL).is_err());
        assert!(Trajectory::new(1, 2, vec![[0.0, 0.0]], DWELL).is_err());
    }
}
