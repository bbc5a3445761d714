//! Exact rationals rendered as `p/q`.

use num_rational::Rational64;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed rational '{0}'")]
pub struct RatioParseError(pub String);

/// Always `p/q`, integers included (`3/1`).
pub fn format(r: Rational64) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Accepts `p/q` or a bare integer.
pub fn parse(s: &str) -> Result<Rational64, RatioParseError> {
    let err = || RatioParseError(s.to_string());
    let (p, q) = match s.split_once('/') {
        Some((p, q)) => (p.trim().parse::<i64>().map_err(|_| err())?, q.trim().parse::<i64>().map_err(|_| err())?),
        None => (s.trim().parse::<i64>().map_err(|_| err())?, 1),
    };
    if q == 0 {
        return Err(err());
    }
    Ok(Rational64::new(p, q))
}

pub(crate) mod serde_impl {
    use num_rational::Rational64;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format(*r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational64, D::Error> {
        let s = String::deserialize(d)?;
        super::parse(&s).map_err(serde::de::Error::custom)
    }
}
