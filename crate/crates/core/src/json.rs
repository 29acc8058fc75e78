//! Float formatting for JSON artifacts. Every float is written with 17
//! significant digits so files round-trip bit-exactly and are stable across
//! runs.

use serde::ser::{SerializeSeq, Serializer};
use serde_json::value::RawValue;

pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        // keeps -0.0 and 0.0 apart while staying valid JSON
        return if x.is_sign_negative() { "-0.0000000000000000e0".into() } else { "0.0000000000000000e0".into() };
    }
    format!("{x:.16e}")
}

fn raw(x: f64) -> Box<RawValue> {
    assert!(x.is_finite(), "non-finite float cannot be serialized to JSON");
    RawValue::from_string(fmt17(x)).expect("formatted float is valid JSON")
}

pub mod f64_17 {
    use super::*;
    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&raw(*x), s)
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        serde::Deserialize::deserialize(d)
    }
}

pub mod vec17 {
    use super::*;
    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            seq.serialize_element(&raw(x))?;
        }
        seq.end()
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        serde::Deserialize::deserialize(d)
    }
}

pub mod arr3_17 {
    use super::*;
    pub fn serialize<S: Serializer>(xs: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        vec17::serialize(xs, s)
    }
    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        serde::Deserialize::deserialize(d)
    }
}
