//! Exact decimal literals for DDS parameters.
//!
//! Values are kept as canonical decimal strings until step-table encoding so
//! that every front-end produces the same fixed-point word for the same text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A canonical decimal number: optional `-`, integer digits without leading
/// zeros, and a fractional part without trailing zeros.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal {
    negative: bool,
    int_digits: String,
    frac_digits: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalError(pub String);

impl Decimal {
    pub fn zero() -> Self {
        Decimal {
            negative: false,
            int_digits: "0".into(),
            frac_digits: String::new(),
        }
    }

    pub fn from_int(v: i64) -> Self {
        v.to_string().parse().expect("integer literal")
    }

    pub fn is_negative(&self) -> bool {
        self.negative
    }

    pub fn is_integer(&self) -> bool {
        self.frac_digits.is_empty()
    }

    /// The value as `mantissa / 10^scale`, exact.
    pub fn as_ratio(&self) -> (i128, u32) {
        let digits = format!("{}{}", self.int_digits, self.frac_digits);
        let mantissa: i128 = digits.parse().unwrap_or(i128::MAX);
        let signed = if self.negative { -mantissa } else { mantissa };
        (signed, self.frac_digits.len() as u32)
    }

    pub fn to_f64(&self) -> f64 {
        self.to_string().parse().unwrap_or(f64::NAN)
    }

    /// Integer value, if the number has no fractional part and fits.
    pub fn to_i64(&self) -> Option<i64> {
        if !self.is_integer() {
            return None;
        }
        self.to_string().parse().ok()
    }
}

impl FromStr for Decimal {
    type Err = DecimalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DecimalError(s.to_string());
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(err());
        }
        // Arbitrary width is pointless for hardware words; 30 digits bounds the ratio in i128.
        if int_part.len() + frac_part.len() > 30 {
            return Err(err());
        }
        let int_digits = match int_part.trim_start_matches('0') {
            "" => "0".to_string(),
            d => d.to_string(),
        };
        let frac_digits = frac_part.trim_end_matches('0').to_string();
        let is_zero = int_digits == "0" && frac_digits.is_empty();
        Ok(Decimal {
            negative: negative && !is_zero,
            int_digits,
            frac_digits,
        })
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negative {
            f.write_str("-")?;
        }
        f.write_str(&self.int_digits)?;
        if !self.frac_digits.is_empty() {
            write!(f, ".{}", self.frac_digits)?;
        }
        Ok(())
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
