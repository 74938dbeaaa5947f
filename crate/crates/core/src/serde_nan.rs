//! Serialises `Vec<f64>` with NaN entries as JSON `null` and back.

use alloc::vec::Vec;
use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }))
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
}
