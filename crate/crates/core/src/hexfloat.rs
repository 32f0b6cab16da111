//! Bit-exact text encoding of `f64` in C99 `%a` form (`0x1.999999999999ap-4`).
//!
//! Used for serialized flows so that a reloaded flow reproduces the exact
//! same pushforward as the one that was built.

use crate::error::{Error, Result};

const FRAC_BITS: u32 = 52;
const FRAC_MASK: u64 = (1 << FRAC_BITS) - 1;

pub fn encode(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp_field = ((bits >> FRAC_BITS) & 0x7ff) as i64;
    let frac = bits & FRAC_MASK;
    if exp_field == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_field == 0 {
        (0, -1022)
    } else {
        (1, exp_field - 1023)
    };
    let mut digits = format!("{frac:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let exp_sign = if exp >= 0 { "+" } else { "-" };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

pub fn decode(s: &str) -> Result<f64> {
    let bad = || Error::Input(format!("malformed hex float {s:?}"));
    let t = s.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let sign_bit = if neg { 1u64 << 63 } else { 0 };
    match body {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::from_bits(sign_bit | f64::INFINITY.to_bits())),
        _ => {}
    }
    let body = body
        .strip_prefix("0x")
        .or_else(|| body.strip_prefix("0X"))
        .ok_or_else(bad)?;
    let (mant, exp) = body.split_once(['p', 'P']).ok_or_else(bad)?;
    let exp: i64 = exp.parse().map_err(|_| bad())?;
    let (lead, frac_digits) = mant.split_once('.').unwrap_or((mant, ""));
    if frac_digits.len() > 13 || !frac_digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let frac = if frac_digits.is_empty() {
        0
    } else {
        u64::from_str_radix(frac_digits, 16).map_err(|_| bad())? << (4 * (13 - frac_digits.len()))
    };
    let bits = match lead {
        "1" => {
            if !(-1022..=1023).contains(&exp) {
                return Err(bad());
            }
            (((exp + 1023) as u64) << FRAC_BITS) | frac
        }
        "0" => {
            if frac != 0 && exp != -1022 {
                return Err(bad());
            }
            frac
        }
        _ => return Err(bad()),
    };
    Ok(f64::from_bits(sign_bit | bits))
}

/// serde adapter for a single `f64` stored as a hex-float string.
pub mod serde_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::encode(*x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        super::decode(&s).map_err(serde::de::Error::custom)
    }
}

/// serde adapter for a `Vec<f64>` stored as hex-float strings.
pub mod serde_vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for x in xs {
            seq.serialize_element(&super::encode(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter()
            .map(|s| super::decode(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        assert_eq!(encode(1.0), "0x1p+0");
        assert_eq!(encode(0.1), "0x1.999999999999ap-4");
        assert_eq!(encode(-2.5), "-0x1.4p+1");
        assert_eq!(encode(0.0), "0x0p+0");
        assert_eq!(encode(-0.0), "-0x0p+0");
        assert_eq!(encode(f64::from_bits(1)), "0x0.0000000000001p-1022");
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode("1.5").is_err());
        assert!(decode("0x2.0p+0").is_err());
        assert!(decode("0x1.0p+5000").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_every_bit_pattern(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            let y = decode(&encode(x)).unwrap();
            if x.is_nan() {
                prop_assert!(y.is_nan());
            } else {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
