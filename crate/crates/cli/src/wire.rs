//! JSON shapes shared by the HTTP API and the `sample` command.

use fpt_core::layout::Poke;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WirePoke {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WirePoint {
    pub x: f64,
    pub y: f64,
}

impl From<WirePoke> for Poke {
    fn from(p: WirePoke) -> Self {
        Poke {
            pos: [p.x, p.y],
            flow: [p.dx, p.dy],
        }
    }
}

/// A wire value that failed validation, with the offending field path.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub error: String,
}

fn unit(v: f64, field: String) -> Result<(), FieldError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(FieldError {
            error: format!("coordinate {v} outside [0, 1]"),
            field,
        })
    }
}

fn finite(v: f64, field: String) -> Result<(), FieldError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(FieldError {
            error: "flow must be finite".into(),
            field,
        })
    }
}

pub fn check_poke(p: &WirePoke, at: &str) -> Result<Poke, FieldError> {
    unit(p.x, format!("{at}.x"))?;
    unit(p.y, format!("{at}.y"))?;
    finite(p.dx, format!("{at}.dx"))?;
    finite(p.dy, format!("{at}.dy"))?;
    Ok((*p).into())
}

pub fn check_pokes(ps: &[WirePoke], at: &str) -> Result<Vec<Poke>, FieldError> {
    ps.iter()
        .enumerate()
        .map(|(i, p)| check_poke(p, &format!("{at}[{i}]")))
        .collect()
}

pub fn check_points(qs: &[WirePoint], at: &str) -> Result<Vec<[f64; 2]>, FieldError> {
    qs.iter()
        .enumerate()
        .map(|(i, q)| {
            unit(q.x, format!("{at}[{i}].x"))?;
            unit(q.y, format!("{at}[{i}].y"))?;
            Ok([q.x, q.y])
        })
        .collect()
}
