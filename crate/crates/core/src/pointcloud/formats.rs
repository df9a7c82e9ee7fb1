//! ASCII PCD v0.7 and vertex-only OBJ.

use std::fmt::Write as _;

use thiserror::Error;

use crate::pointcloud::fuse::PointCloud;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PcdError {
    #[error("PCD line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("PCD header is missing {0}")]
    MissingField(&'static str),
    #[error("unsupported PCD data encoding {0:?} (only ascii)")]
    UnsupportedData(String),
    #[error("PCD line {line}: {msg}")]
    Body { line: usize, msg: String },
    #[error("PCD declares {declared} points but holds {found}")]
    PointCount { declared: usize, found: usize },
}

/// `%.6g` as printed by C: six significant digits, trailing zeros removed,
/// exponent form outside `1e-4 <= |x| < 1e6`. Negative zero prints as `0`.
pub fn format_g6(x: f32) -> String {
    let x = f64::from(x);
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn point_line(prefix: &str, p: &[f32; 3], out: &mut String) {
    let _ = writeln!(
        out,
        "{prefix}{} {} {}",
        format_g6(p[0]),
        format_g6(p[1]),
        format_g6(p[2])
    );
}

pub fn write_pcd(pc: &PointCloud) -> Vec<u8> {
    let n = pc.len();
    let mut s = String::with_capacity(200 + n * 30);
    s.push_str("# .PCD v0.7 - Point Cloud Data file format\n");
    s.push_str("VERSION 0.7\n");
    s.push_str("FIELDS x y z\n");
    s.push_str("SIZE 4 4 4\n");
    s.push_str("TYPE F F F\n");
    s.push_str("COUNT 1 1 1\n");
    let _ = writeln!(s, "WIDTH {n}");
    s.push_str("HEIGHT 1\n");
    s.push_str("VIEWPOINT 0 0 0 1 0 0 0\n");
    let _ = writeln!(s, "POINTS {n}");
    s.push_str("DATA ascii\n");
    for p in &pc.points {
        point_line("", p, &mut s);
    }
    s.into_bytes()
}

fn header_err(line: usize, msg: impl Into<String>) -> PcdError {
    PcdError::Header {
        line,
        msg: msg.into(),
    }
}

/// Reads an ASCII PCD whose fields start with `x y z` (extra fields are
/// ignored). Every header entry up to `DATA` must be present and the body
/// must hold exactly `POINTS` rows.
pub fn parse_pcd(bytes: &[u8]) -> Result<PointCloud, PcdError> {
    let text = std::str::from_utf8(bytes).map_err(|e| header_err(0, format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut fields: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    let mut height: Option<usize> = None;
    let mut points: Option<usize> = None;
    let mut data = None;
    for (no, line) in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let key = toks.next().expect("non-empty line");
        let rest: Vec<&str> = toks.collect();
        let count = |rest: &[&str]| -> Result<usize, PcdError> {
            match rest {
                [v] => v.parse().map_err(|_| header_err(no, format!("{key} is not a count"))),
                _ => Err(header_err(no, format!("{key} expects one value"))),
            }
        };
        match key {
            "VERSION" | "SIZE" | "TYPE" | "COUNT" | "VIEWPOINT" => {}
            "FIELDS" => fields = Some(rest.iter().map(|s| s.to_string()).collect()),
            "WIDTH" => width = Some(count(&rest)?),
            "HEIGHT" => height = Some(count(&rest)?),
            "POINTS" => points = Some(count(&rest)?),
            "DATA" => {
                data = Some(rest.join(" "));
                break;
            }
            other => return Err(header_err(no, format!("unknown header key {other:?}"))),
        }
    }
    let fields = fields.ok_or(PcdError::MissingField("FIELDS"))?;
    if fields.len() < 3 || fields[..3] != ["x", "y", "z"] {
        return Err(header_err(0, format!("fields must start with x y z, got {fields:?}")));
    }
    let data = data.ok_or(PcdError::MissingField("DATA"))?;
    if data != "ascii" {
        return Err(PcdError::UnsupportedData(data));
    }
    let declared = match (points, width, height) {
        (Some(p), _, _) => p,
        (None, Some(w), Some(h)) => w * h,
        _ => return Err(PcdError::MissingField("POINTS")),
    };
    let mut out = Vec::with_capacity(declared);
    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != fields.len() {
            return Err(PcdError::Body {
                line: no,
                msg: format!("expected {} values, got {}", fields.len(), vals.len()),
            });
        }
        let mut p = [0f32; 3];
        for (c, v) in p.iter_mut().zip(&vals) {
            *c = v.parse().map_err(|_| PcdError::Body {
                line: no,
                msg: format!("bad number {v:?}"),
            })?;
        }
        out.push(p);
    }
    if out.len() != declared {
        return Err(PcdError::PointCount {
            declared,
            found: out.len(),
        });
    }
    Ok(PointCloud::new(out))
}

pub fn write_obj(pc: &PointCloud) -> Vec<u8> {
    let mut s = String::with_capacity(64 + pc.len() * 32);
    s.push_str("# point cloud\n");
    let _ = writeln!(s, "# vertices {}", pc.len());
    for p in &pc.points {
        point_line("v ", p, &mut s);
    }
    s.into_bytes()
}

/// Converts PCD bytes to an OBJ with one `v x y z` line per point.
pub fn pcd_to_obj(pcd: &[u8]) -> Result<Vec<u8>, PcdError> {
    Ok(write_obj(&parse_pcd(pcd)?))
}
