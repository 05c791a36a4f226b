//! Zero-phase Butterworth band-pass filtering.
//!
//! The digital filter is designed from the analog Butterworth prototype by a
//! low-pass to band-pass transform and the bilinear transform with
//! pre-warped band edges, realized as a cascade of biquads. Filtering runs
//! forward then backward over an odd-reflected extension of the signal, with
//! each section started from its steady-state response to the first sample.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::trial_store::Trial;

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// DF-II transposed state for a unit constant input at steady state.
    fn step_state(&self) -> [f64; 2] {
        let h = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * h;
        let z1 = self.b[1] - self.a[0] * h + z2;
        [z1, z2]
    }

    /// Complex frequency response at normalized angular frequency `w`.
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandpassFilter {
    pub sections: Vec<Biquad>,
    /// Order of the analog low-pass prototype; the band-pass has twice this.
    pub prototype_order: usize,
}

impl BandpassFilter {
    pub fn butterworth(prototype_order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Self> {
        if prototype_order == 0 {
            return Err(Error::InvalidArgument("filter order must be at least 1".into()));
        }
        if !(fs > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "band edges must satisfy 0 < low < high < fs/2, got {low_hz}..{high_hz} Hz at {fs} Hz"
            )));
        }
        let n = prototype_order;
        let fs2 = 2.0 * fs;
        let warp = |f: f64| fs2 * (std::f64::consts::PI * f / fs).tan();
        let (w1, w2) = (warp(low_hz), warp(high_hz));
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();

        let mut poles_z = Vec::with_capacity(2 * n);
        for k in 0..n {
            let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let half = p * bw / 2.0;
            let disc = (half * half - w0 * w0).sqrt();
            for s in [half + disc, half - disc] {
                poles_z.push((fs2 + s) / (fs2 - s));
            }
        }
        // n zeros at s=0 map to z=1; n zeros at infinity map to z=-1.
        let mut gain = Complex64::new(bw.powi(n as i32), 0.0) * fs2.powi(n as i32);
        for k in 0..n {
            let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let half = p * bw / 2.0;
            let disc = (half * half - w0 * w0).sqrt();
            for s in [half + disc, half - disc] {
                gain /= fs2 - s;
            }
        }
        let gain = gain.re;

        let mut upper: Vec<Complex64> = poles_z.iter().copied().filter(|p| p.im > 1e-14).collect();
        let mut real: Vec<f64> = poles_z.iter().filter(|p| p.im.abs() <= 1e-14).map(|p| p.re).collect();
        upper.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
        real.sort_by(f64::total_cmp);

        let mut sections = Vec::with_capacity(n);
        for p in upper {
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * p.re, p.norm_sqr()],
            });
        }
        for pair in real.chunks(2) {
            let (p, q) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-(p + q), p * q],
            });
        }
        if sections.len() != n {
            return Err(Error::Numerical(format!(
                "band-pass design produced {} sections, expected {n}",
                sections.len()
            )));
        }
        for v in sections[0].b.iter_mut() {
            *v *= gain;
        }
        Ok(Self {
            sections,
            prototype_order: n,
        })
    }

    /// Band-pass order, twice the prototype order.
    pub fn order(&self) -> usize {
        2 * self.prototype_order
    }

    /// Reflection padding length on each side.
    pub fn pad_len(&self) -> usize {
        3 * self.order()
    }

    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        self.sections
            .iter()
            .map(|s| s.response(w))
            .product::<Complex64>()
            .norm()
    }

    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for s in &self.sections {
            let [mut z1, mut z2] = s.step_state();
            z1 *= level;
            z2 *= level;
            level *= s.dc_gain();
            for v in x.iter_mut() {
                let input = *v;
                let y = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[0] * y + z2;
                z2 = s.b[2] * input - s.a[1] * y;
                *v = y;
            }
        }
    }

    /// Forward-backward filtering of one channel.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        let n = x.len();
        if n <= pad {
            return Err(Error::InsufficientData(format!(
                "signal of {n} samples is too short for {pad}-sample reflection padding"
            )));
        }
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Zero-phase band-pass of every channel of `trial`.
pub fn bandpass(trial: &Trial, low_hz: f64, high_hz: f64) -> Result<Trial> {
    bandpass_with_order(trial, low_hz, high_hz, 4)
}

pub fn bandpass_with_order(trial: &Trial, low_hz: f64, high_hz: f64, order: usize) -> Result<Trial> {
    let filter = BandpassFilter::butterworth(order, low_hz, high_hz, trial.sample_rate)?;
    apply_bandpass(trial, &filter)
}

pub fn apply_bandpass(trial: &Trial, filter: &BandpassFilter) -> Result<Trial> {
    let mut out = DMatrix::zeros(trial.n_channels(), trial.n_samples());
    for c in 0..trial.n_channels() {
        let y = filter.filtfilt(&trial.channel(c))?;
        for (s, v) in y.into_iter().enumerate() {
            out[(c, s)] = v;
        }
    }
    Ok(trial.with_data(out))
}
