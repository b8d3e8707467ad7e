//! Multi-hot ordinal encoding of traveled distance.
//!
//! A vector of `K` digits encodes `K + 1` classes: class `c` has ones in the
//! first `c` positions and zeros after. Class `c` stands for `c * d_step`
//! meters with `d_step = d_max / K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordinal codec configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceCodec {
    /// Number of binary digits.
    pub k: usize,
    /// Largest encodable distance in meters.
    pub d_max: f64,
    /// Binarization threshold in (0, 1).
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for DistanceCodec {
    /// 155 digits over 0-15.5 m in decimeter steps.
    fn default() -> Self {
        DistanceCodec { k: 155, d_max: 15.5, threshold: 0.5 }
    }
}

/// Rounds half away from zero (used wherever meters are rounded).
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

impl DistanceCodec {
    pub fn new(k: usize, d_max: f64, threshold: f64) -> Result<Self> {
        let codec = DistanceCodec { k, d_max, threshold };
        codec.validate()?;
        Ok(codec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("codec needs at least one digit"));
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0) {
            return Err(Error::config(format!("codec d_max must be positive, got {}", self.d_max)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    /// Distance between adjacent classes.
    pub fn d_step(&self) -> f64 {
        self.d_max / self.k as f64
    }

    pub fn num_classes(&self) -> usize {
        self.k + 1
    }

    /// Nearest class of a distance, clamped to `[0, K]`.
    pub fn class_of(&self, distance: f64) -> Result<usize> {
        if !(distance >= 0.0) {
            return Err(Error::domain(format!("distance must be non-negative, got {distance}")));
        }
        let c = round_half_away(distance / self.d_step());
        Ok((c as usize).min(self.k))
    }

    /// Binary digits of the nearest class.
    pub fn encode(&self, distance: f64) -> Result<Vec<f64>> {
        let c = self.class_of(distance)?;
        Ok((0..self.k).map(|i| if i < c { 1.0 } else { 0.0 }).collect())
    }

    /// Thresholds raw digit probabilities.
    pub fn binarize(&self, raw: &[f64]) -> Result<Vec<u8>> {
        binarize(raw, self.threshold)
    }

    pub fn class_to_distance(&self, class: usize) -> Result<f64> {
        if class > self.k {
            return Err(Error::domain(format!("class {class} exceeds {}", self.k)));
        }
        Ok(class as f64 * self.d_step())
    }

    /// Raw probabilities to `(class, meters)`.
    pub fn decode(&self, raw: &[f64]) -> Result<(usize, f64)> {
        if raw.len() != self.k {
            return Err(Error::contract(format!("expected {} digits, got {}", self.k, raw.len())));
        }
        let c = decode_class(&self.binarize(raw)?)?;
        Ok((c, self.class_to_distance(c)?))
    }
}

/// `1` where `digit >= threshold`, else `0`.
pub fn binarize(raw: &[f64], threshold: f64) -> Result<Vec<u8>> {
    raw.iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                Err(Error::domain(format!("digit {v} outside [0, 1]")))
            } else {
                Ok(u8::from(v >= threshold))
            }
        })
        .collect()
}

/// Number of leading ones; anything after the first zero is ignored.
pub fn decode_class(binary: &[u8]) -> Result<usize> {
    if let Some(bad) = binary.iter().find(|&&d| d > 1) {
        return Err(Error::contract(format!("non-binary digit {bad}")));
    }
    Ok(binary.iter().take_while(|&&d| d == 1).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk() -> DistanceCodec {
        DistanceCodec::new(31, 3.1, 0.5).unwrap()
    }

    #[test]
    fn default_codec() {
        let c = DistanceCodec::default();
        assert_eq!(c.k, 155);
        assert_eq!(c.num_classes(), 156);
        assert!((c.d_step() * c.k as f64 - c.d_max).abs() <= f64::EPSILON * c.d_max);
        assert!((c.d_step() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn encode_examples() {
        let c = DistanceCodec::default();
        assert!(c.encode(0.0).unwrap().iter().all(|&d| d == 0.0));
        assert!(c.encode(15.5).unwrap().iter().all(|&d| d == 1.0));
        let v = c.encode(0.26).unwrap();
        assert_eq!(&v[..4], &[1.0, 1.0, 1.0, 0.0]);
        assert!(v[3..].iter().all(|&d| d == 0.0));
        assert!(c.encode(-0.1).is_err());
        // beyond d_max clamps to the last class
        assert_eq!(c.class_of(40.0).unwrap(), 155);
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.5], 0.5).unwrap(), vec![1]);
        assert_eq!(binarize(&[0.49999], 0.5).unwrap(), vec![0]);
        let raw = vec![0.9; 7];
        let b = binarize(&raw, 0.95).unwrap();
        assert_eq!(decode_class(&b).unwrap(), 0);
        assert!(binarize(&[1.2], 0.5).is_err());
        assert!(binarize(&[-0.1], 0.5).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_class(&[1, 1, 0, 1]).unwrap(), 2);
        assert_eq!(decode_class(&[0; 155]).unwrap(), 0);
        assert_eq!(decode_class(&[1; 155]).unwrap(), 155);
        assert!(decode_class(&[1, 2]).is_err());
    }

    #[test]
    fn class_to_distance_examples() {
        let c = DistanceCodec::default();
        assert_eq!(c.class_to_distance(0).unwrap(), 0.0);
        assert!((c.class_to_distance(155).unwrap() - 15.5).abs() < 1e-12);
        assert!((c.class_to_distance(7).unwrap() - 0.7).abs() < 1e-12);
        assert!(c.class_to_distance(156).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistanceCodec::new(0, 1.0, 0.5).is_err());
        assert!(DistanceCodec::new(10, -1.0, 0.5).is_err());
        assert!(DistanceCodec::new(10, 1.0, 1.0).is_err());
    }

    #[test]
    fn round_trip_every_class() {
        for codec in [DistanceCodec::default(), desk()] {
            for c in 0..=codec.k {
                let d = codec.class_to_distance(c).unwrap();
                let bits: Vec<u8> = codec.encode(d).unwrap().iter().map(|&v| v as u8).collect();
                assert_eq!(decode_class(&bits).unwrap(), c);
            }
        }
    }

    proptest! {
        #[test]
        fn encode_is_monotone(a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let codec = DistanceCodec::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (el, eh) = (codec.encode(lo).unwrap(), codec.encode(hi).unwrap());
            prop_assert!(el.iter().zip(&eh).all(|(x, y)| x <= y));
        }

        #[test]
        fn raising_threshold_never_raises_class(raw in proptest::collection::vec(0.0f64..=1.0, 31), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let c_lo = decode_class(&binarize(&raw, lo).unwrap()).unwrap();
            let c_hi = decode_class(&binarize(&raw, hi).unwrap()).unwrap();
            prop_assert!(c_hi <= c_lo);
        }

        #[test]
        fn suffix_after_first_zero_is_ignored(c in 0usize..31, suffix in proptest::collection::vec(0u8..=1, 31)) {
            let mut bits = vec![1u8; c];
            bits.push(0);
            bits.extend_from_slice(&suffix[..30 - c]);
            prop_assert_eq!(decode_class(&bits).unwrap(), c);
        }
    }
}
