//! Numerical differentiation, Butterworth low-pass filtering, and discrete
//! Fourier analysis used by the identification pipeline.

use std::io::Write;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::{Error, Result};

/// Uniformly sampled real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl Series {
    pub fn new(t0: f64, dt: f64, samples: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { t0, dt, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn nyquist_hz(&self) -> f64 {
        0.5 / self.dt
    }
}

/// Magnitude spectrum plus a linearity diagnostic against a probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Bin frequencies in Hz, strictly increasing, bounded by Nyquist.
    pub freqs: Vec<f64>,
    /// DFT magnitude per bin.
    pub magnitude: Vec<f64>,
    /// Probe frequencies the excitation was built from.
    pub probe_freqs: Vec<f64>,
    /// Fraction of non-DC spectral energy within half a bin of a probe.
    pub in_band_energy_fraction: f64,
    /// Set when the *input* spectrum carries more than 5% of its non-DC
    /// energy away from the probe set, i.e. the plant is being driven
    /// outside its linear regime.
    pub nonlinear_flag: bool,
}

impl SpectrumReport {
    /// Write the spectrum as `freq_hz,magnitude` CSV rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "freq_hz,magnitude")?;
        for (f, m) in self.freqs.iter().zip(&self.magnitude) {
            writeln!(w, "{f},{m}")?;
        }
        Ok(())
    }
}

/// Backward difference quotient `(s[k] - s[k-1]) / dt`.
///
/// Output is one sample shorter with `t0` shifted by `dt`.
pub fn difference_quotient(s: &Series) -> Result<Series> {
    if s.len() < 2 {
        return Err(Error::SeriesTooShort { need: 2, got: s.len() });
    }
    let samples = s
        .samples
        .windows(2)
        .map(|w| (w[1] - w[0]) / s.dt)
        .collect();
    Ok(Series {
        t0: s.t0 + s.dt,
        dt: s.dt,
        samples,
    })
}

/// Cumulative sum scaled by `dt`; inverse of [`difference_quotient`] up to
/// the initial sample.
pub fn cumulative_integral(s: &Series, initial: f64) -> Series {
    let mut acc = initial;
    let samples = s
        .samples
        .iter()
        .map(|&v| {
            acc += v * s.dt;
            acc
        })
        .collect();
    Series {
        t0: s.t0,
        dt: s.dt,
        samples,
    }
}

/// Second-order Butterworth low-pass coefficients (bilinear transform with
/// frequency prewarping). Returns `(b0, b1, b2, a1, a2)` with unit DC gain.
fn butterworth2(cutoff_hz: f64, dt: f64) -> (f64, f64, f64, f64, f64) {
    let k = (std::f64::consts::PI * cutoff_hz * dt).tan();
    let q = std::f64::consts::FRAC_1_SQRT_2;
    let norm = 1.0 / (1.0 + k / q + k * k);
    let b0 = k * k * norm;
    let b1 = 2.0 * b0;
    let b2 = b0;
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - k / q + k * k) * norm;
    (b0, b1, b2, a1, a2)
}

/// Single-pass causal second-order Butterworth low-pass filter.
pub fn lowpass(s: &Series, cutoff_hz: f64) -> Result<Series> {
    let nyquist = s.nyquist_hz();
    if !(cutoff_hz > 0.0) || cutoff_hz >= nyquist {
        return Err(Error::CutoffAboveNyquist {
            cutoff_hz,
            nyquist_hz: nyquist,
        });
    }
    let (b0, b1, b2, a1, a2) = butterworth2(cutoff_hz, s.dt);
    // Direct form II transposed, zero initial state.
    let (mut z1, mut z2) = (0.0f64, 0.0f64);
    let samples = s
        .samples
        .iter()
        .map(|&x| {
            let y = b0 * x + z1;
            z1 = b1 * x - a1 * y + z2;
            z2 = b2 * x - a2 * y;
            y
        })
        .collect();
    Ok(Series {
        t0: s.t0,
        dt: s.dt,
        samples,
    })
}

/// Analytic magnitude response of the filter used by [`lowpass`], evaluated
/// at `freq_hz` on the digital frequency axis.
pub fn lowpass_gain(cutoff_hz: f64, dt: f64, freq_hz: f64) -> f64 {
    let (b0, b1, b2, a1, a2) = butterworth2(cutoff_hz, dt);
    let w = 2.0 * std::f64::consts::PI * freq_hz * dt;
    let e1 = Complex::from_polar(1.0, -w);
    let e2 = Complex::from_polar(1.0, -2.0 * w);
    let num = Complex::new(b0, 0.0) + b1 * e1 + b2 * e2;
    let den = Complex::new(1.0, 0.0) + a1 * e1 + a2 * e2;
    (num / den).norm()
}

/// Magnitude of the DFT at bins `0..=n/2` with the frequency axis in Hz.
pub fn dft_magnitude(s: &Series) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.len() < 16 {
        return Err(Error::SeriesTooShort { need: 16, got: s.len() });
    }
    let n = s.len();
    let mut buf: Vec<Complex<f64>> = s.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let freqs = (0..=half).map(|k| k as f64 / (n as f64 * s.dt)).collect();
    let magnitude = buf[..=half].iter().map(|c| c.norm()).collect();
    Ok((freqs, magnitude))
}

fn non_dc_energy(magnitude: &[f64]) -> f64 {
    magnitude.iter().skip(1).map(|m| m * m).sum()
}

fn in_band_energy(freqs: &[f64], magnitude: &[f64], probes: &[f64], half_bin: f64) -> f64 {
    freqs
        .iter()
        .zip(magnitude)
        .skip(1)
        .filter(|(f, _)| probes.iter().any(|p| (*f - p).abs() <= half_bin))
        .map(|(_, m)| m * m)
        .sum()
}

/// Sinusoidal-fidelity diagnostic: how much of the output's non-DC energy
/// sits at the probe frequencies, and whether the input itself has drifted
/// off the probe set (a sign of saturation or other nonlinearity).
pub fn linearity_report(input: &Series, output: &Series, probe_freqs: &[f64]) -> Result<SpectrumReport> {
    if (input.dt - output.dt).abs() > 1e-12 || input.len() != output.len() {
        return Err(Error::SeriesMismatch(format!(
            "input ({} samples at dt={}) vs output ({} samples at dt={})",
            input.len(),
            input.dt,
            output.len(),
            output.dt
        )));
    }
    let (freqs, out_mag) = dft_magnitude(output)?;
    let (_, in_mag) = dft_magnitude(input)?;
    let half_bin = 0.5 / (output.len() as f64 * output.dt);

    let out_total = non_dc_energy(&out_mag);
    let in_band = in_band_energy(&freqs, &out_mag, probe_freqs, half_bin);
    let fraction = if out_total > 0.0 { in_band / out_total } else { 1.0 };

    let in_total = non_dc_energy(&in_mag);
    let in_offband = in_total - in_band_energy(&freqs, &in_mag, probe_freqs, half_bin);
    let nonlinear_flag = in_total > 0.0 && in_offband > 0.05 * in_total;

    Ok(SpectrumReport {
        freqs,
        magnitude: out_mag,
        probe_freqs: probe_freqs.to_vec(),
        in_band_energy_fraction: fraction,
        nonlinear_flag,
    })
}
