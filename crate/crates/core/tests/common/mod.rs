//! Independent oracles shared by the integration tests. Nothing here calls
//! the library routine it is used to check.

#![allow(dead_code)]

use std::f64::consts::PI;

use sedlab::scenegen::{EventSpec, SceneSpec};

/// Capsule unit vectors of the tetrahedral array, from their angles in
/// degrees: (45, 35), (-45, -35), (135, -35), (-135, 35).
pub fn tetra_dirs() -> [[f64; 3]; 4] {
    let d = |az: f64, el: f64| {
        let (az, el) = (az.to_radians(), el.to_radians());
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    };
    [d(45.0, 35.0), d(-45.0, -35.0), d(135.0, -35.0), d(-135.0, 35.0)]
}

pub const RADIUS: f64 = 0.042;
pub const SOUND_SPEED: f64 = 343.0;
pub const FS: f64 = 24_000.0;

/// Arrival lag (samples) at capsule `c` relative to the array centre for a
/// far-field source at (az, el): `-r (u_c . doa) f_s / v`.
pub fn capsule_lag(c: usize, az: f64, el: f64) -> f64 {
    let u = tetra_dirs()[c];
    let doa = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
    let dot = u[0] * doa[0] + u[1] * doa[1] + u[2] * doa[2];
    -RADIUS * dot * FS / SOUND_SPEED
}

/// Ambisonic gains written out directly: [1, sin az cos el, sin el, cos az cos el].
pub fn eq_gains(az: f64, el: f64) -> [f64; 4] {
    [1.0, az.sin() * el.cos(), el.sin(), az.cos() * el.cos()]
}

/// Lag of `a` behind `b` (in samples) from the cross-correlation peak over
/// `|lag| <= max_lag`, refined by a parabola through the peak and its
/// neighbours.
pub fn xcorr_lag(a: &[f32], b: &[f32], max_lag: isize) -> f64 {
    let n = a.len() as isize;
    let r = |lag: isize| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            let j = i - lag;
            if j >= 0 && j < n {
                s += a[i as usize] as f64 * b[j as usize] as f64;
            }
        }
        s
    };
    let vals: Vec<f64> = (-max_lag - 1..=max_lag + 1).map(r).collect();
    let mut best = 1;
    for k in 1..vals.len() - 1 {
        if vals[k] > vals[best] {
            best = k;
        }
    }
    let (y0, y1, y2) = (vals[best - 1], vals[best], vals[best + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    let frac = if denom.abs() > 0.0 { 0.5 * (y0 - y2) / denom } else { 0.0 };
    (best as isize - max_lag - 1) as f64 + frac
}

/// A one-event scene with a static direction and no noise.
pub fn static_scene(atom: usize, az: f64, el: f64, seed: u64) -> SceneSpec {
    let dur = 0.8;
    let ev = EventSpec {
        class_id: atom,
        onset_s: 0.1,
        duration_s: dur,
        atom,
        gain: 0.3,
        trajectory: vec![(az, el); EventSpec::trajectory_len(dur)],
    };
    SceneSpec::new(1.0, vec![ev], f64::INFINITY, seed)
}

/// Uniform direction on the sphere with azimuth in (-pi, pi].
pub fn random_doa(rng: &mut impl rand::Rng) -> (f64, f64) {
    let mut az: f64 = rng.random_range(-PI..PI);
    if az == -PI {
        az = PI;
    }
    let el = rng.random_range(-1.0f64..1.0).asin();
    (az, el)
}

/// Segment counts by the textbook definition, one segment and class at a
/// time, on plain 0/1 grids stored frame-major (`grid[t * classes + l]`).
/// Returns (N, S, D, I, TP, FP, FN).
pub fn brute_segment_counts(pred: &[u8], reference: &[u8], frames: usize, classes: usize, seg: usize) -> [u64; 7] {
    let mut out = [0u64; 7];
    let n_seg = frames.div_ceil(seg);
    for k in 0..n_seg {
        let (mut tp, mut fp, mut fn_, mut n) = (0u64, 0u64, 0u64, 0u64);
        for l in 0..classes {
            let active = |g: &[u8]| (k * seg..((k + 1) * seg).min(frames)).any(|t| g[t * classes + l] == 1);
            let (p, r) = (active(pred), active(reference));
            n += r as u64;
            match (p, r) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let s = fn_.min(fp);
        out[0] += n;
        out[1] += s;
        out[2] += fn_.saturating_sub(fp);
        out[3] += fp.saturating_sub(fn_);
        out[4] += tp;
        out[5] += fp;
        out[6] += fn_;
    }
    out
}

/// ER and F1 from brute-force counts with the empty-reference conventions
/// (ER = I when N = 0, F1 = 0 when TP = 0).
pub fn brute_er_f1(c: [u64; 7]) -> (f64, f64) {
    let [n, s, d, i, tp, fp, fn_] = c;
    let er = if n == 0 { i as f64 } else { (s + d + i) as f64 / n as f64 };
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (er, f1)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}
