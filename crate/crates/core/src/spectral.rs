//! Autoregressive spectra and sliding-window band-power features.
//!
//! Each window of each channel is fitted with a Burg AR model; the model's
//! frequency response on a uniform grid gives the power spectrum, and every
//! feature is the mean power over the grid points inside one band.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io::TextMatrix;
use crate::trial_store::Trial;

/// AR model with convention `x_t = Σ a_k x_{t−k} + e_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    pub coefficients: Vec<f64>,
    pub noise_variance: f64,
    /// Reflection coefficients of each Burg stage; empty for hand-built models.
    pub reflection: Vec<f64>,
}

impl ArModel {
    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    /// Roots of `z^p − a_1 z^{p−1} − … − a_p`, computed as eigenvalues of the
    /// companion matrix.
    pub fn poles(&self) -> Vec<Complex64> {
        let p = self.order();
        if p == 0 {
            return Vec::new();
        }
        let mut c = DMatrix::<f64>::zeros(p, p);
        for k in 0..p {
            c[(0, k)] = self.coefficients[k];
        }
        for i in 1..p {
            c[(i, i - 1)] = 1.0;
        }
        c.complex_eigenvalues().iter().copied().collect()
    }
}

pub fn burg_fit(segment: &[f64], order: usize) -> Result<ArModel> {
    let n = segment.len();
    if order == 0 {
        return Err(Error::InvalidArgument("AR order must be at least 1".into()));
    }
    if n <= 2 * order {
        return Err(Error::InsufficientData(format!(
            "Burg fit of order {order} needs more than {} samples, got {n}",
            2 * order
        )));
    }
    if segment.iter().all(|&v| v == segment[0]) {
        return Err(Error::Degenerate("constant segment".into()));
    }

    let mut f = segment.to_vec();
    let mut b = segment.to_vec();
    // prediction-error filter, a[0] = 1
    let mut a = vec![1.0];
    let mut err = segment.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut reflection = Vec::with_capacity(order);

    for m in 1..=order {
        let mut num = 0.0;
        let mut den = 0.0;
        for t in m..n {
            num += f[t] * b[t - 1];
            den += f[t] * f[t] + b[t - 1] * b[t - 1];
        }
        if !(den > 0.0) {
            return Err(Error::Degenerate(format!(
                "zero prediction-error energy at Burg stage {m}"
            )));
        }
        let k = -2.0 * num / den;
        reflection.push(k);

        a.push(0.0);
        let prev = a.clone();
        for i in 1..=m {
            a[i] = prev[i] + k * prev[m - i];
        }
        for t in (m..n).rev() {
            let (fo, bo) = (f[t], b[t - 1]);
            f[t] = fo + k * bo;
            b[t] = bo + k * fo;
        }
        err *= 1.0 - k * k;
    }

    Ok(ArModel {
        coefficients: a[1..].iter().map(|v| -v).collect(),
        noise_variance: err.max(0.0),
        reflection,
    })
}

/// Precomputed `e^{−i2πfk/fs}` for a fixed grid and order.
struct SpectrumBasis {
    phasors: Vec<Vec<Complex64>>,
}

impl SpectrumBasis {
    fn new(freqs_hz: &[f64], order: usize, fs: f64) -> Self {
        let phasors = freqs_hz
            .iter()
            .map(|&f| {
                (1..=order)
                    .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * k as f64 / fs))
                    .collect()
            })
            .collect();
        Self { phasors }
    }

    fn eval(&self, model: &ArModel, out: &mut Vec<f64>) {
        out.clear();
        for row in &self.phasors {
            let mut d = Complex64::new(1.0, 0.0);
            for (a, z) in model.coefficients.iter().zip(row) {
                d -= a * z;
            }
            out.push(model.noise_variance / d.norm_sqr());
        }
    }
}

/// `P(f) = σ² / |1 − Σ a_k e^{−i2πfk/fs}|²`.
pub fn ar_power_spectrum(model: &ArModel, freqs_hz: &[f64], sample_rate: f64) -> Result<Vec<f64>> {
    if let Some(f) = freqs_hz.iter().find(|&&f| !(0.0..=sample_rate / 2.0).contains(&f)) {
        return Err(Error::InvalidArgument(format!(
            "frequency {f} Hz outside [0, {}]",
            sample_rate / 2.0
        )));
    }
    let basis = SpectrumBasis::new(freqs_hz, model.order(), sample_rate);
    let mut out = Vec::with_capacity(freqs_hz.len());
    basis.eval(model, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandDefinition {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandDefinition {
    pub fn new(name: &str, low_hz: f64, high_hz: f64) -> Self {
        Self {
            name: name.to_string(),
            low_hz,
            high_hz,
        }
    }
}

/// alpha, sigma, low beta, high beta, low gamma.
pub fn default_bands() -> Vec<BandDefinition> {
    vec![
        BandDefinition::new("alpha", 8.0, 13.0),
        BandDefinition::new("sigma", 11.0, 15.0),
        BandDefinition::new("low_beta", 18.0, 23.0),
        BandDefinition::new("high_beta", 21.0, 26.0),
        BandDefinition::new("low_gamma", 25.0, 35.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub window_seconds: f64,
    pub overlap_fraction: f64,
    pub ar_order: usize,
    pub freq_resolution_hz: f64,
    pub log_power: bool,
    pub bands: Vec<BandDefinition>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_seconds: 1.0,
            overlap_fraction: 0.9,
            ar_order: 16,
            freq_resolution_hz: 1.0,
            log_power: false,
            bands: default_bands(),
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self, fs: f64) -> usize {
        (self.window_seconds * fs).round() as usize
    }

    pub fn step_samples(&self, fs: f64) -> usize {
        (self.window_samples(fs) as f64 * (1.0 - self.overlap_fraction)).round() as usize
    }

    /// `floor((n − window)/step) + 1`, or 0 when the trial is shorter than a window.
    pub fn n_steps(&self, n_samples: usize, fs: f64) -> usize {
        let w = self.window_samples(fs);
        let s = self.step_samples(fs).max(1);
        if n_samples < w {
            0
        } else {
            (n_samples - w) / s + 1
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.window_seconds > 0.0) {
            return bad(format!("window_seconds must be positive, got {}", self.window_seconds));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return bad(format!(
                "overlap_fraction must be in [0, 1), got {}",
                self.overlap_fraction
            ));
        }
        if self.ar_order == 0 {
            return bad("ar_order must be at least 1".into());
        }
        if !(self.freq_resolution_hz > 0.0) {
            return bad("freq_resolution_hz must be positive".into());
        }
        if self.bands.is_empty() {
            return bad("at least one band is required".into());
        }
        if self.step_samples(fs) == 0 {
            return bad("window step rounds to zero samples".into());
        }
        if self.window_samples(fs) <= 2 * self.ar_order {
            return bad(format!(
                "window of {} samples is too short for AR order {}",
                self.window_samples(fs),
                self.ar_order
            ));
        }
        for b in &self.bands {
            if !(b.low_hz > 0.0 && b.low_hz < b.high_hz) {
                return bad(format!("band `{}` must satisfy 0 < low < high", b.name));
            }
            if b.high_hz > fs / 2.0 {
                return bad(format!("band `{}` extends beyond Nyquist ({} Hz)", b.name, fs / 2.0));
            }
        }
        Ok(())
    }

    /// Uniform grid `0, r, 2r, …` up to Nyquist.
    pub fn frequency_grid(&self, fs: f64) -> Vec<f64> {
        let nyq = fs / 2.0;
        let n = (nyq / self.freq_resolution_hz + 1e-9).floor() as usize;
        (0..=n).map(|i| i as f64 * self.freq_resolution_hz).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// time steps × (channels · bands), channel-major.
    pub features: DMatrix<f64>,
    pub step_seconds: f64,
    pub window_seconds: f64,
    /// `(channel, band name)` for every feature column.
    pub band_layout: Vec<(usize, String)>,
}

impl FeatureSequence {
    pub fn n_steps(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn from_matrix(features: DMatrix<f64>) -> Self {
        let band_layout = (0..features.ncols()).map(|i| (0, format!("f{i}"))).collect();
        Self {
            features,
            step_seconds: 1.0,
            window_seconds: 1.0,
            band_layout,
        }
    }

    pub fn to_text_matrix(&self) -> TextMatrix {
        let layout: Vec<String> = self.band_layout.iter().map(|(c, b)| format!("{c}:{b}")).collect();
        TextMatrix::new(self.features.clone(), 1.0 / self.step_seconds)
            .with_comment(format!("step_seconds {:.16e}", self.step_seconds))
            .with_comment(format!("window_seconds {:.16e}", self.window_seconds))
            .with_comment(format!("layout {}", layout.join(" ")))
    }

    pub fn from_text_matrix(m: &TextMatrix) -> Result<Self> {
        let mut step = None;
        let mut window = None;
        let mut layout = None;
        for c in &m.comments {
            let (key, rest) = c.split_once(' ').unwrap_or((c.as_str(), ""));
            match key {
                "step_seconds" => step = rest.trim().parse::<f64>().ok(),
                "window_seconds" => window = rest.trim().parse::<f64>().ok(),
                "layout" => {
                    let mut v = Vec::new();
                    for tok in rest.split_whitespace() {
                        let (ch, band) = tok
                            .split_once(':')
                            .ok_or_else(|| Error::ShapeMismatch(format!("bad layout entry `{tok}`")))?;
                        let ch = ch
                            .parse()
                            .map_err(|_| Error::ShapeMismatch(format!("bad layout entry `{tok}`")))?;
                        v.push((ch, band.to_string()));
                    }
                    layout = Some(v);
                }
                _ => {}
            }
        }
        let missing = |what: &str| Error::ShapeMismatch(format!("feature file lacks `{what}` header"));
        let band_layout = layout.ok_or_else(|| missing("layout"))?;
        if band_layout.len() != m.data.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "layout lists {} columns, matrix has {}",
                band_layout.len(),
                m.data.ncols()
            )));
        }
        Ok(Self {
            features: m.data.clone(),
            step_seconds: step.ok_or_else(|| missing("step_seconds"))?,
            window_seconds: window.ok_or_else(|| missing("window_seconds"))?,
            band_layout,
        })
    }
}

/// Band-power feature sequence of every channel of `trial`.
pub fn extract_features(trial: &Trial, config: &FeatureConfig) -> Result<FeatureSequence> {
    let fs = trial.sample_rate;
    config.validate(fs)?;
    let win = config.window_samples(fs);
    let step = config.step_samples(fs);
    let n = trial.n_samples();
    if n < win {
        return Err(Error::InsufficientData(format!(
            "trial of {n} samples is shorter than the {win}-sample window"
        )));
    }
    let steps = config.n_steps(n, fs);

    let grid = config.frequency_grid(fs);
    let members: Vec<Vec<usize>> = config
        .bands
        .iter()
        .map(|b| {
            grid.iter()
                .enumerate()
                .filter(|(_, &f)| f >= b.low_hz - 1e-9 && f <= b.high_hz + 1e-9)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    if let Some(i) = members.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "band `{}` contains no grid frequency",
            config.bands[i].name
        )));
    }
    let basis = SpectrumBasis::new(&grid, config.ar_order, fs);

    let n_bands = config.bands.len();
    let n_ch = trial.n_channels();
    let mut features = DMatrix::zeros(steps, n_ch * n_bands);
    let mut spectrum = Vec::with_capacity(grid.len());
    for c in 0..n_ch {
        let x = trial.channel(c);
        for w in 0..steps {
            let seg = &x[w * step..w * step + win];
            let model = burg_fit(seg, config.ar_order).map_err(|e| match e {
                Error::Degenerate(m) => Error::Degenerate(format!("channel {c}, window {w}: {m}")),
                other => other,
            })?;
            basis.eval(&model, &mut spectrum);
            for (bi, idx) in members.iter().enumerate() {
                let mean = idx.iter().map(|&i| spectrum[i]).sum::<f64>() / idx.len() as f64;
                features[(w, c * n_bands + bi)] = if config.log_power { mean.ln() } else { mean };
            }
        }
    }

    let band_layout = (0..n_ch)
        .flat_map(|c| config.bands.iter().map(move |b| (c, b.name.clone())))
        .collect();
    Ok(FeatureSequence {
        features,
        step_seconds: step as f64 / fs,
        window_seconds: win as f64 / fs,
        band_layout,
    })
}
