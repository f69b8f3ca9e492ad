use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::objectives::{LabelEvent, LabelGrid};
use crate::seed;

use super::atoms::synthesize_atom;
use super::{doa_vector, foa_response, path_difference, ArrayFormat, MicArray, MultichannelAudio, SceneSpec, TRAJECTORY_STEP_S};

const CROSSFADE_S: f64 = 0.01;
/// Diffuse-field level of the FOA dipole channels relative to W.
const FOA_DIPOLE_NOISE: f64 = 0.5;
const FD_TAPS: usize = 32;
const FD_HALF: isize = (FD_TAPS / 2) as isize;
const KAISER_BETA: f64 = 8.0;

/// Dry (event-only) and noise signals, before summation and `f32` rounding.
#[derive(Clone, Debug)]
pub struct RenderedParts {
    pub dry: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub labels: LabelGrid,
    pub sample_rate: u32,
}

#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub audio: MultichannelAudio,
    pub labels: LabelGrid,
    /// Some sample exceeded full scale. Samples are not clipped.
    pub clipped: bool,
}

pub fn render_scene(spec: &SceneSpec, fmt: &ArrayFormat) -> Result<RenderedScene> {
    let parts = render_scene_parts(spec, fmt)?;
    let channels: Vec<Vec<f32>> = parts
        .dry
        .iter()
        .zip(&parts.noise)
        .map(|(d, n)| d.iter().zip(n).map(|(a, b)| (a + b) as f32).collect())
        .collect();
    let audio = MultichannelAudio::from_channels(channels, parts.sample_rate)?;
    let clipped = audio.peak() > 1.0;
    Ok(RenderedScene {
        audio,
        labels: parts.labels,
        clipped,
    })
}

pub fn render_scene_parts(spec: &SceneSpec, fmt: &ArrayFormat) -> Result<RenderedParts> {
    spec.validate()?;
    if let ArrayFormat::Mic(arr) = fmt {
        arr.validate()?;
    }
    let fs = spec.sample_rate as f64;
    let n = spec.n_samples();
    let channels = fmt.channels();
    let mut dry = vec![vec![0.0f64; n]; channels];

    for (index, ev) in spec.events.iter().enumerate() {
        let atom = event_atom(spec, index);
        let onset = (ev.onset_s * fs).round() as isize;
        let seg_len = (TRAJECTORY_STEP_S * fs).round() as usize;
        let fade_len = (CROSSFADE_S * fs).round() as usize;
        match fmt {
            ArrayFormat::Foa => {
                let gains: Vec<[f64; 4]> = ev
                    .trajectory
                    .iter()
                    .map(|&(az, el)| foa_response(az, el))
                    .collect::<Result<_>>()?;
                for (c, out) in dry.iter_mut().enumerate() {
                    for (j, &a) in atom.iter().enumerate() {
                        let pos = onset + j as isize;
                        if pos < 0 || pos as usize >= n {
                            continue;
                        }
                        let g = crossfaded(j as isize, seg_len, fade_len, gains.len(), |k| gains[k][c]);
                        out[pos as usize] += g * a;
                    }
                }
            }
            ArrayFormat::Mic(arr) => {
                for (c, out) in dry.iter_mut().enumerate() {
                    let delays = segment_delays(arr, c, &ev.trajectory, fs)?;
                    let kernels: Vec<Kernel> = delays.iter().map(|&d| Kernel::new(d)).collect();
                    let margin = FD_HALF + 4;
                    for j in -margin..atom.len() as isize + margin {
                        let pos = onset + j;
                        if pos < 0 || pos as usize >= n {
                            continue;
                        }
                        let v = crossfaded(j, seg_len, fade_len, kernels.len(), |k| kernels[k].apply(&atom, j));
                        out[pos as usize] += v;
                    }
                }
            }
        }
    }

    let noise = render_noise(spec, fmt, &dry);
    let events: Vec<LabelEvent> = spec
        .events
        .iter()
        .map(|ev| LabelEvent {
            onset_ms: (ev.onset_s * 1000.0).round() as u64,
            offset_ms: (ev.offset_s() * 1000.0).round() as u64,
            class_id: ev.class_id,
        })
        .collect();
    let labels = LabelGrid::from_events(&events, spec.label_frames(), spec.n_classes)?;
    Ok(RenderedParts {
        dry,
        noise,
        labels,
        sample_rate: spec.sample_rate,
    })
}

/// The unit-RMS atom of event `index`, scaled by its gain.
pub(crate) fn event_atom(spec: &SceneSpec, index: usize) -> Vec<f64> {
    let ev = &spec.events[index];
    let n = (ev.duration_s * spec.sample_rate as f64).round() as usize;
    let mut rng = seed::rng(spec.seed, &[seed::tag("atom"), index as u64]);
    let mut x = synthesize_atom(ev.atom, n, spec.sample_rate as f64, &mut rng);
    x.iter_mut().for_each(|v| *v *= ev.gain);
    x
}

/// Piecewise-constant per-segment values with a linear cross-fade over the
/// first `fade_len` samples of every segment after the first.
fn crossfaded(j: isize, seg_len: usize, fade_len: usize, n_segs: usize, value: impl Fn(usize) -> f64) -> f64 {
    let last = n_segs - 1;
    if j < 0 {
        return value(0);
    }
    let k = (j as usize / seg_len).min(last);
    let within = j as usize - k * seg_len;
    let cur = value(k);
    if k == 0 || within >= fade_len {
        return cur;
    }
    let prev = value(k - 1);
    if prev == cur {
        return cur;
    }
    let a = (within as f64 + 0.5) / fade_len as f64;
    prev + (cur - prev) * a
}

fn segment_delays(arr: &MicArray, channel: usize, trajectory: &[(f64, f64)], fs: f64) -> Result<Vec<f64>> {
    trajectory
        .iter()
        .map(|&(az, el)| {
            let d = path_difference(&arr.capsule_dirs[channel], &doa_vector(az, el), arr.radius)?;
            Ok(d * fs / arr.speed_of_sound)
        })
        .collect()
}

fn render_noise(spec: &SceneSpec, fmt: &ArrayFormat, dry: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = dry.first().map_or(0, Vec::len);
    let mut noise = vec![vec![0.0; n]; dry.len()];
    if !spec.noise_snr_db.is_finite() || n == 0 {
        return noise;
    }
    let power = dry[0].iter().map(|v| v * v).sum::<f64>() / n as f64;
    let sigma = (power / 10f64.powf(spec.noise_snr_db / 10.0)).sqrt();
    if sigma == 0.0 {
        return noise;
    }
    for (c, out) in noise.iter_mut().enumerate() {
        let scale = match fmt {
            ArrayFormat::Foa if c > 0 => FOA_DIPOLE_NOISE * sigma,
            _ => sigma,
        };
        let mut rng = seed::rng(spec.seed, &[seed::tag("noise"), c as u64]);
        for v in out.iter_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    noise
}

/// 32-tap Kaiser-windowed sinc for one fixed delay (in samples).
struct Kernel {
    /// `floor(-delay)`: integer part of the read offset.
    shift: isize,
    taps: [f64; FD_TAPS],
}

impl Kernel {
    fn new(delay: f64) -> Self {
        let t = -delay;
        let shift = t.floor();
        let frac = t - shift;
        let norm = bessel_i0(KAISER_BETA);
        let mut taps = [0.0; FD_TAPS];
        for (i, tap) in taps.iter_mut().enumerate() {
            // Tap i reads x[base - (FD_HALF - 1) + i]; u is the distance to the
            // interpolation point.
            let u = frac + (FD_HALF - 1) as f64 - i as f64;
            let r = u / FD_HALF as f64;
            let w = if r.abs() >= 1.0 {
                0.0
            } else {
                bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
            };
            *tap = sinc(u) * w;
        }
        Self {
            shift: shift as isize,
            taps,
        }
    }

    /// `x(j - delay)` with zeros outside the buffer.
    fn apply(&self, x: &[f64], j: isize) -> f64 {
        let base = j + self.shift - (FD_HALF - 1);
        let mut acc = 0.0;
        for (i, &h) in self.taps.iter().enumerate() {
            let m = base + i as isize;
            if m >= 0 && (m as usize) < x.len() {
                acc += h * x[m as usize];
            }
        }
        acc
    }
}

/// `y[n] = x(n - delay)` by windowed-sinc interpolation; output has the input length.
pub fn fractional_delay(x: &[f64], delay: f64) -> Result<Vec<f64>> {
    if !delay.is_finite() {
        return Err(Error::InvalidArgument("non-finite delay".into()));
    }
    let k = Kernel::new(delay);
    Ok((0..x.len() as isize).map(|j| k.apply(x, j)).collect())
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        let p = std::f64::consts::PI * u;
        p.sin() / p
    }
}

fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{EventSpec, FormatKind};

    fn static_event(class: usize, onset: f64, dur: f64, az: f64, el: f64) -> EventSpec {
        EventSpec {
            class_id: class,
            onset_s: onset,
            duration_s: dur,
            atom: class,
            gain: 0.1,
            trajectory: vec![(az, el); EventSpec::trajectory_len(dur)],
        }
    }

    #[test]
    fn empty_scene_is_silent() {
        let spec = SceneSpec::new(1.0, vec![], f64::INFINITY, 3);
        for kind in [FormatKind::Foa, FormatKind::Mic] {
            let r = render_scene(&spec, &kind.array()).unwrap();
            assert_eq!(r.audio.channels(), 4);
            assert_eq!(r.audio.n_samples(), 24_000);
            assert_eq!(r.audio.peak(), 0.0);
            assert_eq!(r.labels.positive_rate(), 0.0);
            assert!(!r.clipped);
        }
    }

    #[test]
    fn foa_front_source_has_w_equal_x() {
        let spec = SceneSpec::new(1.0, vec![static_event(7, 0.2, 0.5, 0.0, 0.0)], f64::INFINITY, 5);
        let r = render_scene(&spec, &ArrayFormat::Foa).unwrap();
        assert_eq!(r.audio.channel(0), r.audio.channel(3));
        assert!(r.audio.channel(1).iter().all(|&v| v == 0.0));
        assert!(r.audio.channel(2).iter().all(|&v| v == 0.0));
        assert!(r.audio.channel(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn labels_cover_event_frames() {
        let spec = SceneSpec::new(2.0, vec![static_event(2, 0.35, 0.5, 0.0, 0.0)], f64::INFINITY, 1);
        let r = render_scene(&spec, &ArrayFormat::Foa).unwrap();
        let col: Vec<f32> = (0..20).map(|t| r.labels.get(t, 2)).collect();
        let want: Vec<f32> = (0..20).map(|t| if (3..9).contains(&t) { 1.0 } else { 0.0 }).collect();
        assert_eq!(col, want);
    }

    #[test]
    fn fractional_delay_integer_is_shift() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y = fractional_delay(&x, 2.0).unwrap();
        for i in 2..64 {
            assert!((y[i] - x[i - 2]).abs() < 1e-12);
        }
        let z = fractional_delay(&x, 0.0).unwrap();
        for i in 0..64 {
            assert!((z[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_follows_snr_and_is_seeded() {
        let spec = SceneSpec::new(2.0, vec![static_event(8, 0.0, 2.0, 0.3, 0.1)], 10.0, 11);
        let a = render_scene_parts(&spec, &ArrayFormat::Foa).unwrap();
        let b = render_scene_parts(&spec, &ArrayFormat::Foa).unwrap();
        assert_eq!(a.noise, b.noise);
        let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let snr = 10.0 * (p(&a.dry[0]) / p(&a.noise[0])).log10();
        assert!((snr - 10.0).abs() < 0.2, "{snr}");
        let ratio = (p(&a.noise[1]) / p(&a.noise[0])).sqrt();
        assert!((ratio - 0.5).abs() < 0.02);
    }

    #[test]
    fn clipping_is_flagged_not_fatal() {
        let mut ev = static_event(0, 0.0, 0.5, 0.0, 0.0);
        ev.gain = 3.0;
        let r = render_scene(&SceneSpec::new(0.5, vec![ev], f64::INFINITY, 0), &ArrayFormat::Foa).unwrap();
        assert!(r.clipped);
    }

    #[test]
    fn event_past_scene_end_is_rejected() {
        let spec = SceneSpec::new(1.0, vec![static_event(0, 0.8, 0.5, 0.0, 0.0)], f64::INFINITY, 0);
        assert!(render_scene(&spec, &ArrayFormat::Foa).is_err());
    }
}
