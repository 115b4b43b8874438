//! Straight-line minimum-jerk hand trajectories.

use thiserror::Error;

use crate::arm::{HandKinematics, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinJerkError {
    #[error("time {t} s is outside [0, {duration}] s")]
    Domain { t: f64, duration: f64 },
    #[error("invalid trajectory: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinJerkSpec {
    pub p0: Vec2,
    pub pf: Vec2,
    /// Movement duration (s).
    pub duration: f64,
    /// Number of samples returned by [`MinJerkSpec::sample`].
    pub samples: usize,
}

/// Quintic time profile `10s^3 - 15s^4 + 6s^5` and its first two derivatives
/// with respect to normalized time `s`.
pub fn profile(s: f64) -> (f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    let pos = s3 * (10.0 + s * (-15.0 + 6.0 * s));
    let vel = s2 * (30.0 + s * (-60.0 + 30.0 * s));
    let acc = s * (60.0 + s * (-180.0 + 120.0 * s));
    (pos, vel, acc)
}

impl MinJerkSpec {
    pub fn new(p0: Vec2, pf: Vec2, duration: f64, samples: usize) -> Result<Self, MinJerkError> {
        let spec = Self {
            p0,
            pf,
            duration,
            samples,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MinJerkError> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(MinJerkError::InvalidSpec("duration must be positive"));
        }
        if self.samples < 2 {
            return Err(MinJerkError::InvalidSpec("at least two samples are required"));
        }
        Ok(())
    }

    pub fn point(&self, t: f64) -> Result<HandKinematics, MinJerkError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(MinJerkError::Domain {
                t,
                duration: self.duration,
            });
        }
        let (pos, vel, acc) = profile(t / self.duration);
        let d = self.pf - self.p0;
        Ok(HandKinematics {
            p: self.p0 + d * pos,
            v: d * (vel / self.duration),
            a: d * (acc / (self.duration * self.duration)),
        })
    }

    /// Samples at `t_k = (k + 1) T / n`; the start state at t = 0 is implied.
    pub fn sample(&self) -> Result<Vec<HandKinematics>, MinJerkError> {
        self.validate()?;
        self.sample_times().into_iter().map(|t| self.point(t)).collect()
    }

    /// Sample instants used by [`MinJerkSpec::sample`].
    pub fn sample_times(&self) -> Vec<f64> {
        let n = self.samples as f64;
        (0..self.samples)
            .map(|k| {
                // The last instant is exactly T, not a rounded product.
                if k + 1 == self.samples {
                    self.duration
                } else {
                    (k + 1) as f64 * self.duration / n
                }
            })
            .collect()
    }
}
