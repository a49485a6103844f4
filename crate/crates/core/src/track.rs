//! Synthetic road tracks assembled from flat, sinusoidal and step segments.
//!
//! Text form, one segment per line (`#` starts a comment):
//!
//! ```text
//! dt 0.002
//! duration 10
//! flat 0 1 0.0
//! sine 1 3 0.05 1.0
//! step 3 3.5 0.0 0.08
//! ```
//!
//! `flat t0 t1 level`, `sine t0 t1 amplitude period [base]` and
//! `step t0 t1 from to` (raised-cosine transition). Times not covered by any
//! segment are flat at zero; later segments win where segments overlap.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::sim::{RoadProfile, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Flat { t0: f64, t1: f64, level: f64 },
    Sine { t0: f64, t1: f64, amplitude: f64, period: f64, base: f64 },
    Step { t0: f64, t1: f64, from: f64, to: f64 },
}

impl Segment {
    fn span(&self) -> (f64, f64) {
        match *self {
            Segment::Flat { t0, t1, .. } | Segment::Sine { t0, t1, .. } | Segment::Step { t0, t1, .. } => (t0, t1),
        }
    }

    fn height(&self, t: f64) -> f64 {
        match *self {
            Segment::Flat { level, .. } => level,
            Segment::Sine {
                t0,
                amplitude,
                period,
                base,
                ..
            } => base + amplitude * (2.0 * PI * (t - t0) / period).sin(),
            Segment::Step { t0, t1, from, to } => {
                let s = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                from + (to - from) * 0.5 * (1.0 - (PI * s).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub sample_period: f64,
    pub duration: f64,
    pub segments: Vec<Segment>,
}

impl TrackSpec {
    /// The repository's reference track (an invented stand-in for an
    /// unpublished test track).
    pub fn reference(sample_period: f64) -> Self {
        Self {
            sample_period,
            duration: 10.0,
            segments: vec![
                Segment::Flat { t0: 0.0, t1: 1.0, level: 0.0 },
                Segment::Sine {
                    t0: 1.0,
                    t1: 3.0,
                    amplitude: 0.05,
                    period: 1.0,
                    base: 0.0,
                },
                Segment::Step {
                    t0: 3.0,
                    t1: 3.5,
                    from: 0.0,
                    to: 0.08,
                },
                Segment::Flat { t0: 3.5, t1: 6.0, level: 0.08 },
                Segment::Sine {
                    t0: 6.0,
                    t1: 8.0,
                    amplitude: 0.03,
                    period: 0.5,
                    base: 0.08,
                },
                Segment::Step {
                    t0: 8.0,
                    t1: 8.5,
                    from: 0.08,
                    to: 0.0,
                },
                Segment::Flat { t0: 8.5, t1: 10.0, level: 0.0 },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sample_period > 0.0) || !(self.duration > 0.0) {
            return Err(SimError::InvalidRoad(format!(
                "track needs positive dt and duration, got {} and {}",
                self.sample_period, self.duration
            )));
        }
        if self.segments.is_empty() {
            return Err(SimError::InvalidRoad("track has no segments".into()));
        }
        for seg in &self.segments {
            let (t0, t1) = seg.span();
            if !(t1 > t0) {
                return Err(SimError::InvalidRoad(format!("segment {seg:?} has empty span")));
            }
            if let Segment::Sine { period, .. } = seg {
                if !(*period > 0.0) {
                    return Err(SimError::InvalidRoad(format!("segment {seg:?} has non-positive period")));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut dt = None;
        let mut duration = None;
        let mut segments = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SimError::Parse { line: no + 1, msg };
            let mut tokens = line.split_whitespace();
            let kind = tokens.next().unwrap_or_default();
            let nums = tokens
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("malformed number '{t}'"))))
                .collect::<Result<Vec<_>, _>>()?;
            let want = |n: &[usize]| {
                if n.contains(&nums.len()) {
                    Ok(())
                } else {
                    Err(err(format!("'{kind}' takes {n:?} numbers, got {}", nums.len())))
                }
            };
            match kind {
                "dt" => {
                    want(&[1])?;
                    dt = Some(nums[0]);
                }
                "duration" => {
                    want(&[1])?;
                    duration = Some(nums[0]);
                }
                "flat" => {
                    want(&[3])?;
                    segments.push(Segment::Flat {
                        t0: nums[0],
                        t1: nums[1],
                        level: nums[2],
                    });
                }
                "sine" => {
                    want(&[4, 5])?;
                    segments.push(Segment::Sine {
                        t0: nums[0],
                        t1: nums[1],
                        amplitude: nums[2],
                        period: nums[3],
                        base: nums.get(4).copied().unwrap_or(0.0),
                    });
                }
                "step" => {
                    want(&[4])?;
                    segments.push(Segment::Step {
                        t0: nums[0],
                        t1: nums[1],
                        from: nums[2],
                        to: nums[3],
                    });
                }
                other => return Err(err(format!("unknown track keyword '{other}'"))),
            }
        }
        let end = segments.iter().map(|s| s.span().1).fold(0.0, f64::max);
        let spec = Self {
            sample_period: dt.unwrap_or(0.002),
            duration: duration.unwrap_or(end),
            segments,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dt {}\nduration {}\n", self.sample_period, self.duration);
        for seg in &self.segments {
            let _ = match *seg {
                Segment::Flat { t0, t1, level } => writeln!(out, "flat {t0} {t1} {level}"),
                Segment::Sine {
                    t0,
                    t1,
                    amplitude,
                    period,
                    base,
                } => writeln!(out, "sine {t0} {t1} {amplitude} {period} {base}"),
                Segment::Step { t0, t1, from, to } => writeln!(out, "step {t0} {t1} {from} {to}"),
            };
        }
        out
    }

    pub fn height(&self, t: f64) -> f64 {
        self.segments
            .iter()
            .rev()
            .find(|s| {
                let (t0, t1) = s.span();
                t >= t0 && t <= t1
            })
            .map_or(0.0, |s| s.height(t))
    }
}

/// Samples the track at its sample period: `duration / dt + 1` heights.
pub fn synth_track(spec: &TrackSpec) -> Result<RoadProfile, SimError> {
    spec.validate()?;
    let count = (spec.duration / spec.sample_period).round() as usize + 1;
    let samples = (0..count).map(|j| spec.height(j as f64 * spec.sample_period)).collect();
    RoadProfile::new(0.0, spec.sample_period, samples)
}
