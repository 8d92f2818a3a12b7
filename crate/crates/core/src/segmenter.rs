//! Multi-scale sliding-window segmentation of a video.
//!
//! Each hierarchy level is a window length `L` and stride `S`, both fractions
//! of the video duration. Windows start at `0, S, 2S, ...` while `s + L <= 1`,
//! so a level yields `floor((1 - L) / S) + 1` segments. Fractions are kept as
//! exact rationals, which makes the boundary test exact: `(1/8, 1/16)` gives
//! 15 windows, never 14 or 16 through rounding.

use crate::scalar::{Rational, Scalar};
use crate::span::Span;
use crate::types::{EvidenceSegment, VideoRef};
use num_traits::{One, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentError {
    #[error("level {level}: length {length} must be in (0, 1]")]
    BadLength { level: u32, length: Rational },
    #[error("level {level}: stride {stride} must be in (0, 1]")]
    BadStride { level: u32, stride: Rational },
    #[error("level {level}: stride {stride} exceeds length {length}")]
    StrideExceedsLength {
        level: u32,
        length: Rational,
        stride: Rational,
    },
    #[error("hierarchy must contain at least one level")]
    NoLevels,
    #[error("video duration must be > 0, got {0}")]
    BadDuration(f64),
    #[error("cannot parse fraction {0:?}")]
    BadFraction(String),
}

/// A fraction of the video duration, written as `"1/16"`, `"0.0625"` or `"1"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fraction(pub Rational);

impl Fraction {
    pub fn new(numer: i64, denom: i64) -> Self {
        Self(Rational::new(numer, denom))
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Fraction {
    type Err = SegmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SegmentError::BadFraction(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n: i64 = n.trim().parse().map_err(|_| bad())?;
            let d: i64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            return Ok(Self(Rational::new(n, d)));
        }
        // Decimal literals convert exactly: "0.0625" is 625/10000.
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 15 {
            return Err(bad());
        }
        if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let denom = 10i64.pow(frac.len() as u32);
        let int_part: i64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac_part: i64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        Ok(Self(Rational::new(int_part * denom + frac_part, denom)))
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
            Float(f64),
        }
        let text = match Raw::deserialize(deserializer)? {
            Raw::Text(s) => s,
            Raw::Int(i) => i.to_string(),
            Raw::Float(f) => format!("{f}"),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// One granularity level: window length and stride as duration fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyLevel {
    pub level_idx: u32,
    #[serde(rename = "L")]
    pub length: Fraction,
    #[serde(rename = "S")]
    pub stride: Fraction,
}

impl HierarchyLevel {
    pub fn new(level_idx: u32, length: Fraction, stride: Fraction) -> Result<Self, SegmentError> {
        let level = Self {
            level_idx,
            length,
            stride,
        };
        level.validate()?;
        Ok(level)
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        let (l, s) = (self.length.0, self.stride.0);
        let one = Rational::one();
        if l <= Rational::zero() || l > one {
            return Err(SegmentError::BadLength {
                level: self.level_idx,
                length: l,
            });
        }
        if s <= Rational::zero() || s > one {
            return Err(SegmentError::BadStride {
                level: self.level_idx,
                stride: s,
            });
        }
        if s > l {
            return Err(SegmentError::StrideExceedsLength {
                level: self.level_idx,
                length: l,
                stride: s,
            });
        }
        Ok(())
    }

    /// `floor((1 - L) / S) + 1`.
    pub fn segment_count(&self) -> usize {
        let room = (Rational::one() - self.length.0) / self.stride.0;
        room.floor().to_integer() as usize + 1
    }

    /// Normalized `[start, end]` of every window, start ascending.
    pub fn normalized_windows(&self) -> Vec<Span<Rational>> {
        (0..self.segment_count())
            .map(|k| {
                let start = self.stride.0 * Rational::from_integer(k as i64);
                Span {
                    start,
                    end: start + self.length.0,
                }
            })
            .collect()
    }

    /// Windows scaled to a duration in any scalar type.
    pub fn windows<T: Scalar>(&self, duration: T) -> Vec<Span<T>> {
        self.normalized_windows()
            .into_iter()
            .map(|w| Span {
                start: scale(w.start, duration),
                end: scale(w.end, duration),
            })
            .collect()
    }
}

fn scale<T: Scalar>(fraction: Rational, duration: T) -> T {
    if fraction.is_zero() {
        T::zero()
    } else if fraction.is_one() {
        duration
    } else {
        T::from_rational(fraction) * duration
    }
}

/// The five levels `(1/16,1/16) (1/8,1/16) (1/4,1/8) (1/2,1/4) (1,1)`,
/// finest first, numbered 1..=5.
pub fn default_hierarchy() -> Vec<HierarchyLevel> {
    [(16, 16), (8, 16), (4, 8), (2, 4), (1, 1)]
        .into_iter()
        .enumerate()
        .map(|(i, (l, s))| HierarchyLevel {
            level_idx: i as u32 + 1,
            length: Fraction::new(1, l),
            stride: Fraction::new(1, s),
        })
        .collect()
}

/// Single full-video level, used when the hierarchy is ablated.
pub fn global_only_hierarchy() -> Vec<HierarchyLevel> {
    vec![HierarchyLevel {
        level_idx: 1,
        length: Fraction::new(1, 1),
        stride: Fraction::new(1, 1),
    }]
}

pub fn validate_hierarchy(levels: &[HierarchyLevel]) -> Result<(), SegmentError> {
    if levels.is_empty() {
        return Err(SegmentError::NoLevels);
    }
    levels.iter().try_for_each(HierarchyLevel::validate)
}

/// Splits a video into uncaptioned segments, ordered by level then start.
pub fn segment_video(
    sample_id: &str,
    video: &VideoRef,
    levels: &[HierarchyLevel],
) -> Result<Vec<EvidenceSegment>, SegmentError> {
    validate_hierarchy(levels)?;
    if !(video.duration_s.is_finite() && video.duration_s > 0.0) {
        return Err(SegmentError::BadDuration(video.duration_s));
    }
    let mut ordered: Vec<&HierarchyLevel> = levels.iter().collect();
    ordered.sort_by_key(|l| l.level_idx);
    let mut out = Vec::new();
    for level in ordered {
        for (index, span) in level.windows(video.duration_s).into_iter().enumerate() {
            out.push(EvidenceSegment {
                seg_id: EvidenceSegment::make_id(sample_id, level.level_idx, index),
                span,
                level: level.level_idx,
                text: String::new(),
            });
        }
    }
    Ok(out)
}
