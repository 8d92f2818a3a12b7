use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Closed time interval `[start, end]` inside a video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span<T> {
    #[serde(rename = "t_s")]
    pub start: T,
    #[serde(rename = "t_e")]
    pub end: T,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpanError {
    #[error("span start {start} must be >= 0")]
    NegativeStart { start: f64 },
    #[error("span [{start}, {end}] is empty or reversed")]
    Reversed { start: f64, end: f64 },
    #[error("span end {end} exceeds video duration {duration}")]
    PastDuration { end: f64, duration: f64 },
}

impl<T: Scalar> Span<T> {
    /// Builds a span checked against `0 <= start < end <= duration`.
    pub fn within(start: T, end: T, duration: T) -> Result<Self, SpanError> {
        let span = Self { start, end };
        span.check(duration)?;
        Ok(span)
    }

    /// Builds a span checked only for `0 <= start < end`.
    pub fn new(start: T, end: T) -> Result<Self, SpanError> {
        if start < T::zero() {
            return Err(SpanError::NegativeStart {
                start: start.as_f64(),
            });
        }
        if start >= end {
            return Err(SpanError::Reversed {
                start: start.as_f64(),
                end: end.as_f64(),
            });
        }
        Ok(Self { start, end })
    }

    pub fn check(&self, duration: T) -> Result<(), SpanError> {
        Self::new(self.start, self.end)?;
        if self.end > duration {
            return Err(SpanError::PastDuration {
                end: self.end.as_f64(),
                duration: duration.as_f64(),
            });
        }
        Ok(())
    }

    pub fn length(&self) -> T {
        self.end - self.start
    }

    /// Length of the overlap with `other`, zero when disjoint.
    pub fn intersection(&self, other: &Self) -> T {
        let lo = self.start.max_of(other.start);
        let hi = self.end.min_of(other.end);
        if hi > lo {
            hi - lo
        } else {
            T::zero()
        }
    }

    /// Total covered length of the two intervals.
    pub fn union_length(&self, other: &Self) -> T {
        self.length() + other.length() - self.intersection(other)
    }

    /// Smallest span containing both.
    pub fn hull(&self, other: &Self) -> Self {
        Self {
            start: self.start.min_of(other.start),
            end: self.end.max_of(other.end),
        }
    }

    pub fn normalized(&self, duration: T) -> (T, T) {
        (self.start / duration, self.end / duration)
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            start: self.start * factor,
            end: self.end * factor,
        }
    }

    pub fn shifted(&self, offset: T) -> Self {
        Self {
            start: self.start + offset,
            end: self.end + offset,
        }
    }

    pub fn map<U, F: Fn(T) -> U>(&self, f: F) -> Span<U> {
        Span {
            start: f(self.start),
            end: f(self.end),
        }
    }
}

impl<T: fmt::Display> fmt::Display for Span<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}
