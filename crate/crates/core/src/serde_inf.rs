//! JSON has no infinity literal; these helpers write `+inf` as the string "inf".

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Num {
    F(f64),
    S(String),
}

fn to_num(x: f64) -> Num {
    if x.is_finite() {
        Num::F(x)
    } else if x == f64::INFINITY {
        Num::S("inf".into())
    } else if x == f64::NEG_INFINITY {
        Num::S("-inf".into())
    } else {
        Num::S("nan".into())
    }
}

fn from_num<E: serde::de::Error>(n: Num) -> Result<f64, E> {
    match n {
        Num::F(x) => Ok(x),
        Num::S(s) => match s.as_str() {
            "inf" | "+inf" | "Infinity" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
            "nan" | "NaN" => Ok(f64::NAN),
            other => Err(E::custom(format!("expected a number or \"inf\", got {other:?}"))),
        },
    }
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| to_num(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Num>::deserialize(d)?
            .into_iter()
            .map(from_num::<D::Error>)
            .collect()
    }
}

pub mod vecvec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|row| row.iter().map(|x| to_num(*x)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Vec::<Vec<Num>>::deserialize(d)?
            .into_iter()
            .map(|row| row.into_iter().map(from_num::<D::Error>).collect())
            .collect()
    }
}
