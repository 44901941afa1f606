//! JSON has no infinity; extended reals are written as the strings
//! `"inf"`, `"-inf"` and `"nan"` and read back from either form.

use serde::{de, Deserialize, Deserializer, Serializer};

pub mod ext_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => parse(&t).ok_or_else(|| de::Error::custom(format!("not a number: {t:?}"))),
        }
    }

    pub fn parse(text: &str) -> Option<f64> {
        match text.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
            "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            other => other.parse().ok(),
        }
    }
}

pub mod ext_f64_opt {
    use super::*;

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            Some(v) => super::ext_f64::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::ext_f64")] f64);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Holder {
        #[serde(with = "super::ext_f64")]
        x: f64,
    }

    #[test]
    fn infinity_round_trips() {
        let text = serde_json::to_string(&Holder { x: f64::INFINITY }).unwrap();
        assert_eq!(text, r#"{"x":"inf"}"#);
        let back: Holder = serde_json::from_str(&text).unwrap();
        assert_eq!(back.x, f64::INFINITY);
        let back: Holder = serde_json::from_str(r#"{"x":1.5}"#).unwrap();
        assert_eq!(back.x, 1.5);
        assert!(serde_json::from_str::<Holder>(r#"{"x":"abc"}"#).is_err());
    }
}
