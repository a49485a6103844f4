//! Road profiles sampled at the parameter period and their smooth
//! trigonometric interpolants.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::SimError;

/// Road heights (m) sampled every `sample_period` seconds starting at `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadProfile {
    pub t0: f64,
    pub sample_period: f64,
    pub samples: Vec<f64>,
}

impl RoadProfile {
    pub fn new(t0: f64, sample_period: f64, samples: Vec<f64>) -> Result<Self, SimError> {
        if !(sample_period > 0.0) || !sample_period.is_finite() {
            return Err(SimError::InvalidRoad(format!("sample period {sample_period}")));
        }
        if samples.len() < 2 {
            return Err(SimError::InvalidRoad("at least two samples required".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SimError::InvalidRoad("non-finite sample".into()));
        }
        Ok(Self {
            t0,
            sample_period,
            samples,
        })
    }

    pub fn flat(sample_period: f64, len: usize) -> Result<Self, SimError> {
        Self::new(0.0, sample_period, vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.sample_period
    }

    /// `count` samples starting at `start`, holding the last sample past the end.
    pub fn window_padded(&self, start: usize, count: usize) -> Vec<f64> {
        let last = *self.samples.last().expect("non-empty profile");
        (start..start + count)
            .map(|i| self.samples.get(i).copied().unwrap_or(last))
            .collect()
    }

    /// Parses the text format: a `# t0=<sec> dt=<sec>` header line followed by
    /// one height per line. Blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines().enumerate();
        let (t0, dt) = loop {
            let Some((no, line)) = lines.next() else {
                return Err(SimError::Parse { line: 0, msg: "missing header".into() });
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            break parse_header(line).map_err(|msg| SimError::Parse { line: no + 1, msg })?;
        };
        let mut samples = Vec::new();
        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| SimError::Parse {
                line: no + 1,
                msg: format!("malformed number '{line}'"),
            })?;
            samples.push(v);
        }
        Self::new(t0, dt, samples)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# t0={} dt={}\n", self.t0, self.sample_period);
        for s in &self.samples {
            let _ = writeln!(out, "{s}");
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_text()).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
    }
}

fn parse_header(line: &str) -> Result<(f64, f64), String> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| format!("expected '# t0=<sec> dt=<sec>' header, found '{line}'"))?;
    let mut t0 = None;
    let mut dt = None;
    for tok in body.split_whitespace() {
        let (key, value) = tok.split_once('=').ok_or_else(|| format!("malformed header token '{tok}'"))?;
        let v: f64 = value.parse().map_err(|_| format!("malformed number '{value}'"))?;
        match key {
            "t0" => t0 = Some(v),
            "dt" => dt = Some(v),
            other => return Err(format!("unknown header key '{other}'")),
        }
    }
    Ok((t0.ok_or("header lacks t0")?, dt.ok_or("header lacks dt")?))
}

/// Trigonometric interpolant of a sample window after removing the line
/// through its first and last sample and a quadratic bend.
///
/// The detrended residual vanishes at both window ends, so its periodic
/// extension over the window length is continuous. The bend `c·τ(τ−L)/(2L)`
/// is zero at both ends and cancels the jump between the end slopes, which
/// would otherwise ring through the derivative. Periodic data has no slope
/// jump and gets no bend. Both terms are added back at evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FftInterpolant {
    t_start: f64,
    period: f64,
    offset: f64,
    slope: f64,
    bend: f64,
    /// `(a_k, b_k)` for harmonics `k = 0..=K`; term `a_k cos(kωτ) + b_k sin(kωτ)`.
    harmonics: Vec<(f64, f64)>,
}

/// Road height and its first two time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadValue {
    pub p: f64,
    pub p_dot: f64,
    pub p_ddot: f64,
}

impl FftInterpolant {
    /// Builds the interpolant of `samples` (uniform spacing `dt`, first sample
    /// at `t_start`). With `cutoff = Some(k)` all harmonics above `k` are dropped.
    pub fn from_samples(samples: &[f64], dt: f64, t_start: f64, cutoff: Option<usize>) -> Result<Self, SimError> {
        if samples.len() < 2 {
            return Err(SimError::InvalidRoad("interpolation needs at least two samples".into()));
        }
        if !(dt > 0.0) {
            return Err(SimError::InvalidRoad(format!("sample period {dt}")));
        }
        let m = samples.len() - 1;
        let period = m as f64 * dt;
        let offset = samples[0];
        let slope = (samples[m] - samples[0]) / period;
        let residual: Vec<f64> = (0..=m).map(|j| samples[j] - offset - slope * j as f64 * dt).collect();
        let bend = if m >= 2 {
            // End slopes from a local quadratic fit. Without a cutoff the fit
            // uses three points; with one it spans the filter's time resolution.
            let span = cutoff.map_or(3, |k| (m / (2 * k.max(1)) + 1).clamp(3, m + 1));
            let s0 = end_slope(residual.iter().take(span), dt);
            let s1 = end_slope(residual.iter().rev().take(span), -dt);
            s1 - s0
        } else {
            0.0
        };
        let mut buf: Vec<Complex<f64>> = (0..m)
            .map(|j| {
                let tau = j as f64 * dt;
                Complex::new(residual[j] - bend * tau * (tau - period) / (2.0 * period), 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut buf);

        let scale = 1.0 / m as f64;
        let top = m / 2;
        let keep = cutoff.map_or(top, |c| c.min(top));
        let mut harmonics = Vec::with_capacity(keep + 1);
        for (k, x) in buf.iter().enumerate().take(keep + 1) {
            let h = if k == 0 || (m % 2 == 0 && k == top) {
                // DC and the Nyquist term are not paired with a mirror image.
                (x.re * scale, 0.0)
            } else {
                (2.0 * x.re * scale, -2.0 * x.im * scale)
            };
            harmonics.push(h);
        }
        Ok(Self {
            t_start,
            period,
            offset,
            slope,
            bend,
            harmonics,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Highest harmonic index retained.
    pub fn order(&self) -> usize {
        self.harmonics.len() - 1
    }

    pub fn value(&self, t: f64) -> RoadValue {
        let tau = t - self.t_start;
        let omega = 2.0 * std::f64::consts::PI / self.period;
        let step = Complex::from_polar(1.0, omega * tau);
        let mut rot = Complex::new(1.0, 0.0);
        let (mut p, mut pd, mut pdd) = (0.0, 0.0, 0.0);
        for (k, &(a, b)) in self.harmonics.iter().enumerate() {
            let (c, s) = (rot.re, rot.im);
            let w = k as f64 * omega;
            p += a * c + b * s;
            pd += w * (b * c - a * s);
            pdd -= w * w * (a * c + b * s);
            rot *= step;
            if k % 32 == 31 {
                // Renormalise to keep the rotation on the unit circle.
                rot /= rot.norm();
            }
        }
        let l = self.period;
        RoadValue {
            p: p + self.offset + self.slope * tau + self.bend * tau * (tau - l) / (2.0 * l),
            p_dot: pd + self.slope + self.bend * (2.0 * tau - l) / (2.0 * l),
            p_ddot: pdd + self.bend / l,
        }
    }
}

/// Derivative at the first point of the least-squares quadratic through
/// `values` spaced `step` apart.
fn end_slope<'a>(values: impl Iterator<Item = &'a f64>, step: f64) -> f64 {
    let mut normal = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (j, v) in values.enumerate() {
        let x = j as f64;
        let basis = Vector3::new(1.0, x, x * x);
        normal += basis * basis.transpose();
        rhs += basis * *v;
    }
    let coef = normal.lu().solve(&rhs).unwrap_or_else(Vector3::zeros);
    coef[1] / step
}

/// Interpolant over `count` samples of `profile` starting at `start`.
pub fn make_interpolant(
    profile: &RoadProfile,
    window: (usize, usize),
    cutoff: Option<usize>,
) -> Result<FftInterpolant, SimError> {
    let (start, count) = window;
    if count < 2 || start.checked_add(count).is_none_or(|end| end > profile.len()) {
        return Err(SimError::WindowOutOfRange {
            start,
            count,
            len: profile.len(),
        });
    }
    FftInterpolant::from_samples(
        &profile.samples[start..start + count],
        profile.sample_period,
        profile.t0 + start as f64 * profile.sample_period,
        cutoff,
    )
}

/// `(p, ṗ)` of the interpolant at time `t`.
pub fn eval_road(interp: &FftInterpolant, t: f64) -> (f64, f64) {
    let v = interp.value(t);
    (v.p, v.p_dot)
}
