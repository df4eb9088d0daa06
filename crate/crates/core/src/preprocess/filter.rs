//! Butterworth band-pass design in second-order sections and zero-phase
//! (forward-backward) application with odd-extension padding and
//! steady-state initial conditions.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{config_err, Result};

/// One biquad: `[b0, b1, b2, a0, a1, a2]` with `a0 == 1`.
pub type Section = [f64; 6];

/// Digital Butterworth band-pass of prototype order `order` (the resulting
/// filter has `2 * order` poles), returned as `order` biquads.
pub fn butter_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs_hz: f64) -> Result<Vec<Section>> {
    if order == 0 {
        return Err(config_err!("filter order must be positive"));
    }
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs_hz / 2.0) {
        return Err(config_err!(
            "invalid band {lo_hz}-{hi_hz} Hz for sampling rate {fs_hz} Hz"
        ));
    }
    let fs2 = 2.0 * fs_hz;
    let warp = |f: f64| fs2 * (PI * f / fs_hz).tan();
    let (wl, wh) = (warp(lo_hz), warp(hi_hz));
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    // analog prototype poles on the left half of the unit circle
    let n = order as f64;
    let proto: Vec<Complex64> = (0..order)
        .map(|k| {
            let m = -(n - 1.0) + 2.0 * k as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n))
        })
        .collect();

    // low-pass -> band-pass: each prototype pole splits into two
    let mut poles = Vec::with_capacity(2 * order);
    for p in &proto {
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        poles.push(half + disc);
        poles.push(half - disc);
    }
    let mut gain = bw.powi(order as i32);

    // bilinear transform; analog zeros: `order` at 0, `order` at infinity
    let zpoles: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let num = Complex64::new(fs2, 0.0).powi(order as i32);
    let den: Complex64 = poles.iter().map(|p| fs2 - p).product();
    gain *= (num / den).re;

    // Pair conjugates: keep poles with positive imaginary part. Each section
    // takes one zero at +1 and one at -1 so its numerator is 1 - z^-2.
    let mut upper: Vec<Complex64> = zpoles.into_iter().filter(|p| p.im > 0.0).collect();
    if upper.len() != order {
        return Err(config_err!("band-pass design produced real poles; band too narrow"));
    }
    // order sections by pole radius (closest to the unit circle last)
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut sections: Vec<Section> = upper
        .iter()
        .map(|p| [1.0, 0.0, -1.0, 1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    for c in &mut sections[0][..3] {
        *c *= gain;
    }
    Ok(sections)
}

/// Steady-state initial conditions of a transposed direct-form II biquad
/// for a unit step input.
fn biquad_zi(s: &Section) -> [f64; 2] {
    let (b0, b1, b2) = (s[0], s[1], s[2]);
    let (a1, a2) = (s[4], s[5]);
    // (I - A^T) zi = b[1:] - a[1:] * b0 with A the companion matrix
    let (m00, m01, m10, m11) = (1.0 + a1, -1.0, a2, 1.0);
    let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
    let det = m00 * m11 - m01 * m10;
    [(r0 * m11 - m01 * r1) / det, (m00 * r1 - m10 * r0) / det]
}

fn sos_zi(sos: &[Section]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let zi = biquad_zi(s);
            let out = [zi[0] * scale, zi[1] * scale];
            scale *= (s[0] + s[1] + s[2]) / (s[3] + s[4] + s[5]);
            out
        })
        .collect()
}

fn sosfilt(sos: &[Section], x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (s, z) in sos.iter().zip(zi) {
        let (mut z0, mut z1) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = s[0] * xin + z0;
            z0 = s[1] * xin - s[4] * y + z1;
            z1 = s[2] * xin - s[5] * y;
            *v = y;
        }
    }
}

/// Zero-phase application of `sos`; output length equals input length.
pub fn sosfiltfilt(sos: &[Section], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let zi = sos_zi(sos);
    let first = ext[0];
    sosfilt(sos, &mut ext, &zi, first);
    ext.reverse();
    let first = ext[0];
    sosfilt(sos, &mut ext, &zi, first);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase Butterworth band-pass.
pub fn bandpass(signal: &[f64], lo_hz: f64, hi_hz: f64, fs_hz: f64, order: usize) -> Result<Vec<f64>> {
    let sos = butter_bandpass(order, lo_hz, hi_hz, fs_hz)?;
    Ok(sosfiltfilt(&sos, signal))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, n: usize, fs: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    /// Amplitude over the central half, away from edge transients.
    fn amplitude(x: &[f64]) -> f64 {
        let n = x.len();
        let mid = &x[n / 4..3 * n / 4];
        let rms = (mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt();
        rms * 2f64.sqrt()
    }

    /// Magnitude response from the section coefficients.
    fn response(sos: &[Section], f: f64, fs: f64) -> f64 {
        let z = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        sos.iter()
            .map(|s| {
                let num = s[0] + s[1] * z + s[2] * z * z;
                let den = s[3] + s[4] * z + s[5] * z * z;
                (num / den).norm()
            })
            .product()
    }

    #[test]
    fn half_power_at_band_edges_and_unit_gain_in_band() {
        let sos = butter_bandpass(4, 0.5, 8.0, 100.0).unwrap();
        assert!((response(&sos, 0.5, 100.0) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((response(&sos, 8.0, 100.0) - 0.5f64.sqrt()).abs() < 1e-9);
        let center = (0.5f64 * 8.0).sqrt();
        // peak gain of a Butterworth band-pass is exactly 1 at the warped centre
        let g = response(&sos, center, 100.0);
        assert!(g > 0.99 && g < 1.0 + 1e-9, "gain {g}");
    }

    #[test]
    fn passes_in_band_and_rejects_out_of_band() {
        let x = sine(4.0, 1000, 100.0);
        let y = bandpass(&x, 0.5, 8.0, 100.0, 4).unwrap();
        let ratio = amplitude(&y) / amplitude(&x);
        assert!((ratio - 1.0).abs() < 0.05, "4 Hz ratio {ratio}");

        // 50 Hz is Nyquist at 100 Hz: sin samples vanish, so use cos
        let x: Vec<f64> = (0..1000).map(|i| (PI * i as f64).cos()).collect();
        let y = bandpass(&x, 0.5, 8.0, 100.0, 4).unwrap();
        let ratio = amplitude(&y) / amplitude(&x);
        assert!(ratio < 0.1, "50 Hz ratio {ratio}");
    }

    #[test]
    fn removes_dc() {
        let x = vec![3.7; 1000];
        let y = bandpass(&x, 0.5, 40.0, 100.0, 4).unwrap();
        assert_eq!(y.len(), 1000);
        assert!(y.iter().all(|v| v.abs() < 1e-9), "max {}", y.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn linear() {
        let x: Vec<f64> = (0..500).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let y: Vec<f64> = (0..500).map(|i| (i as f64 * 0.1).cos()).collect();
        let (a, b) = (2.5, -0.7);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
        let fx = bandpass(&x, 0.5, 40.0, 100.0, 4).unwrap();
        let fy = bandpass(&y, 0.5, 40.0, 100.0, 4).unwrap();
        let fm = bandpass(&mix, 0.5, 40.0, 100.0, 4).unwrap();
        for i in 0..500 {
            assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_band_is_config_error() {
        assert!(bandpass(&[0.0; 10], 8.0, 0.5, 100.0, 4).is_err());
        assert!(bandpass(&[0.0; 10], 0.5, 60.0, 100.0, 4).is_err());
        assert!(bandpass(&[0.0; 10], 0.0, 8.0, 100.0, 4).is_err());
    }
}
