use super::AudioWaveform;

/// Zero crossings of the sinc kernel kept on each side.
const ZERO_CROSSINGS: usize = 16;
const KAISER_BETA: f64 = 8.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..50 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-12 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc polyphase resampler.
///
/// The rate ratio is reduced to `up / down`; each of the `up` phases gets its
/// own Kaiser-windowed sinc filter with cutoff at the lower Nyquist rate.
/// Output length is `round(len * target / source)`.
pub fn resample(audio: &AudioWaveform, target_rate: u32) -> AudioWaveform {
    assert!(target_rate > 0, "target rate must be positive");
    if target_rate == audio.sample_rate || audio.is_empty() {
        return AudioWaveform {
            samples: audio.samples.clone(),
            sample_rate: target_rate,
        };
    }
    let g = gcd(audio.sample_rate as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (audio.sample_rate as u64 / g) as usize;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half_width = (ZERO_CROSSINGS as f64 / cutoff).ceil() as isize;
    let taps = (2 * half_width + 1) as usize;

    // phases[p][j] weights input sample floor(pos) - half_width + j for an
    // output whose fractional input position is p / up.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps)
                .map(|j| {
                    let dist = (j as isize - half_width) as f64 - frac;
                    let r = dist / (half_width as f64 + 1.0);
                    let window = if r.abs() >= 1.0 {
                        0.0
                    } else {
                        bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
                    };
                    cutoff * sinc(cutoff * dist) * window
                })
                .collect()
        })
        .collect();

    let n_in = audio.samples.len();
    let n_out = ((n_in as u128 * up as u128 + down as u128 / 2) / down as u128) as usize;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let num = n * down;
        let base = (num / up) as isize;
        let filt = &phases[num % up];
        let mut acc = 0.0;
        for (j, w) in filt.iter().enumerate() {
            let idx = base - half_width + j as isize;
            if idx >= 0 && (idx as usize) < n_in {
                acc += w * audio.samples[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioWaveform {
        samples: out,
        sample_rate: target_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn peak_frequency(a: &AudioWaveform) -> f64 {
        let n = a.samples.len();
        let mut buf: Vec<Complex<f64>> = a
            .samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
                Complex::new(s as f64 * w, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (1..n / 2)
            .max_by(|&x, &y| buf[x].norm().total_cmp(&buf[y].norm()))
            .unwrap();
        k as f64 * a.sample_rate as f64 / n as f64
    }

    #[test]
    fn same_rate_is_identity() {
        let a = AudioWaveform::sine(440.0, 0.5, 1000, 44_100);
        assert_eq!(resample(&a, 44_100), a);
    }

    #[test]
    fn upsampling_preserves_tone() {
        let a = AudioWaveform::sine(100.0, 0.5, 22_050, 22_050);
        let b = resample(&a, 44_100);
        assert_eq!(b.sample_rate, 44_100);
        assert_eq!(b.samples.len(), 44_100);
        assert!((peak_frequency(&b) - 100.0).abs() <= 1.0);
    }

    #[test]
    fn length_arithmetic_48k_to_44k() {
        let a = AudioWaveform::sine(1000.0, 0.5, 48_000, 48_000);
        let b = resample(&a, 44_100);
        assert!((b.samples.len() as i64 - 44_100).abs() <= 1);
        assert!((peak_frequency(&b) - 1000.0).abs() <= 1.0);
    }

    #[test]
    fn duration_preserved_within_one_sample() {
        for (src, dst, len) in [(16_000u32, 44_100u32, 12_345usize), (44_100, 24_000, 777)] {
            let a = AudioWaveform::sine(200.0, 0.5, len, src);
            let b = resample(&a, dst);
            let expected = len as f64 * dst as f64 / src as f64;
            assert!((b.samples.len() as f64 - expected).abs() <= 1.0);
        }
    }
}
