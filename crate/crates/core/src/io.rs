//! Model files, `%.17g` number formatting, and CSV emission.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::Model;
use crate::models::{build, BuilderSpec};

/// C-style `%.17g`; non-finite values render as `inf`, `-inf`, `nan`.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_fraction(mant), sign, exp.abs())
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// A JSON number written with `%.17g`, or the strings "inf"/"-inf"/"nan".
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::Number(Number::from_str(&fmt_g17(x)).expect("valid number literal"))
    } else {
        Value::String(fmt_g17(x))
    }
}

pub fn matrix_value(m: &Mat) -> Value {
    Value::Array(m.rows().into_iter().map(|r| Value::Array(r.iter().map(|&x| num(x)).collect())).collect())
}

/// Rewrites every number in a JSON tree with `%.17g`.
pub fn reformat_numbers(v: Value) -> Value {
    match v {
        Value::Number(n) => n.as_f64().map_or(Value::Number(n), num),
        Value::Array(a) => Value::Array(a.into_iter().map(reformat_numbers).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, reformat_numbers(v))).collect()),
        other => other,
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum MatrixSource {
    Dense { dense: Vec<Vec<f64>> },
    Builder { builder: BuilderSpec },
}

// Untagged derive buffers numbers, which breaks under arbitrary_precision.
impl<'de> Deserialize<'de> for MatrixSource {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = Value::deserialize(de)?;
        let Value::Object(mut o) = v else {
            return Err(D::Error::custom("matrix source must be an object with \"dense\" or \"builder\""));
        };
        match (o.remove("dense"), o.remove("builder")) {
            (Some(d), None) if o.is_empty() => {
                serde_json::from_value(d).map(|dense| MatrixSource::Dense { dense }).map_err(D::Error::custom)
            }
            (None, Some(b)) if o.is_empty() => {
                serde_json::from_value(b).map(|builder| MatrixSource::Builder { builder }).map_err(D::Error::custom)
            }
            _ => Err(D::Error::custom("matrix source needs exactly one of \"dense\" or \"builder\"")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub dim: usize,
    pub generator: MatrixSource,
    pub covariance: MatrixSource,
    #[serde(default)]
    pub time_reversal: Option<MatrixSource>,
    #[serde(default)]
    pub label: String,
}

fn dense(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<Mat> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Structural(format!("{what} must be {dim}x{dim}")));
    }
    Ok(Mat::from_shape_fn((dim, dim), |(i, j)| rows[i][j]))
}

enum Slot {
    Generator,
    Covariance,
    TimeReversal,
}

fn resolve(src: &MatrixSource, dim: usize, slot: Slot) -> Result<Option<Mat>> {
    let (what, pick): (&str, fn(&Model) -> Option<Mat>) = match slot {
        Slot::Generator => ("generator", |m| Some(m.generator().clone())),
        Slot::Covariance => ("covariance", |m| Some(m.covariance().clone())),
        Slot::TimeReversal => ("time_reversal", |m| m.time_reversal().cloned()),
    };
    match src {
        MatrixSource::Dense { dense: rows } => dense(rows, dim, what).map(Some),
        MatrixSource::Builder { builder } => {
            let m = build(builder)?;
            if m.dim() != dim {
                return Err(Error::Structural(format!("builder for {what} has dimension {}, file says {dim}", m.dim())));
            }
            Ok(pick(&m))
        }
    }
}

impl ModelFile {
    pub fn into_model(self) -> Result<Model> {
        let g = resolve(&self.generator, self.dim, Slot::Generator)?.expect("generator");
        let c = resolve(&self.covariance, self.dim, Slot::Covariance)?.expect("covariance");
        let th = match &self.time_reversal {
            Some(src) => resolve(src, self.dim, Slot::TimeReversal)?,
            None => None,
        };
        Model::new(g, c, th, self.label)
    }
}

pub fn parse_model(text: &str) -> Result<Model> {
    let file: ModelFile = serde_json::from_str(text)?;
    file.into_model()
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

/// Dense model JSON with `%.17g` numbers.
pub fn model_value(model: &Model) -> Value {
    let mut o = serde_json::Map::new();
    o.insert("dim".into(), Value::from(model.dim()));
    o.insert("generator".into(), serde_json::json!({ "dense": matrix_value(model.generator()) }));
    o.insert("covariance".into(), serde_json::json!({ "dense": matrix_value(model.covariance()) }));
    o.insert(
        "time_reversal".into(),
        model.time_reversal().map_or(Value::Null, |t| serde_json::json!({ "dense": matrix_value(t) })),
    );
    o.insert("label".into(), Value::String(model.label().to_string()));
    Value::Object(o)
}

pub fn emit_model(model: &Model) -> String {
    serde_json::to_string_pretty(&model_value(model)).expect("serializable")
}

/// Header plus rows, numbers with `%.17g`.
pub fn write_csv<W: Write>(out: &mut W, header: &[&str], rows: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let cells: Vec<String> = r.iter().map(|&x| fmt_g17(x)).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_matches_c() {
        assert_eq!(fmt_g17(0.5), "0.5");
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(fmt_g17(1e20), "1e+20");
        assert_eq!(fmt_g17(-3.0), "-3");
        assert_eq!(fmt_g17(123456.0), "123456");
        assert_eq!(fmt_g17(f64::INFINITY), "inf");
    }

    #[test]
    fn g17_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MAX, f64::MIN_POSITIVE, 0.19672632861669323] {
            assert_eq!(fmt_g17(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn dense_and_builder_sources_parse() {
        let m = parse_model(
            r#"{"dim": 2, "generator": {"dense": [[1.0, 0.5], [-0.5, 2]]},
                "covariance": {"dense": [[1, 0], [0, 3.25]]}}"#,
        )
        .unwrap();
        assert_eq!(m.covariance()[(1, 1)], 3.25);
        let back = parse_model(&emit_model(&m)).unwrap();
        assert_eq!(back.generator(), m.generator());

        let src = r#"{"builder": {"name": "chain", "params": {"n_left": 2, "n_right": 2, "temps": [2.0, 1.0, 1.0]}}}"#;
        let text = format!(r#"{{"dim": 10, "generator": {src}, "covariance": {src}, "time_reversal": {src}}}"#);
        let m = parse_model(&text).unwrap();
        assert!(m.time_reversal().is_some());
        assert!(parse_model(r#"{"dim": 1, "generator": {"dense": [[1]], "builder": 3}, "covariance": {"dense": [[1]]}}"#).is_err());
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse_model("{\n  \"dim\": 2,\n  \"generator\": [\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "{msg}");
    }
}
