use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LoadError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Integer,
    Stepped,
    Binary,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub unit: String,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        ColumnSpec {
            name: name.to_owned(),
            kind,
            step: None,
            allowed_values: None,
            unit: String::new(),
        }
    }

    pub fn stepped(name: &str, step: f64) -> Self {
        ColumnSpec {
            step: Some(step),
            ..Self::new(name, ColumnKind::Stepped)
        }
    }

    pub fn categorical(name: &str, allowed: Vec<f64>) -> Self {
        ColumnSpec {
            allowed_values: Some(allowed),
            ..Self::new(name, ColumnKind::Categorical)
        }
    }

    pub fn with_unit(mut self, unit: &str) -> Self {
        self.unit = unit.to_owned();
        self
    }

    /// Values a discrete column may take; binary columns default to {0, 1}.
    pub fn allowed(&self) -> Option<&[f64]> {
        match self.kind {
            ColumnKind::Binary => Some(self.allowed_values.as_deref().unwrap_or(&[0.0, 1.0])),
            ColumnKind::Categorical => self.allowed_values.as_deref(),
            _ => None,
        }
    }

    /// Width of this column in the training feature vector.
    pub fn width(&self) -> usize {
        match self.kind {
            ColumnKind::Categorical => self.allowed().map_or(0, |a| a.len()),
            _ => 1,
        }
    }

    /// Snaps a raw value onto the values this column admits.
    pub fn round(&self, v: f64) -> f64 {
        match self.kind {
            ColumnKind::Continuous => v,
            ColumnKind::Integer => v.round(),
            ColumnKind::Stepped => {
                let step = self.step.unwrap_or(1.0);
                (v / step).round() * step
            }
            ColumnKind::Binary | ColumnKind::Categorical => nearest(self.allowed().unwrap_or(&[]), v),
        }
    }

    /// Checks a raw value against the column kind.
    pub fn check(&self, v: f64) -> Result<(), String> {
        if !v.is_finite() {
            return Err(format!("{v} is not finite"));
        }
        match self.kind {
            ColumnKind::Continuous => Ok(()),
            ColumnKind::Integer if v.fract() != 0.0 => Err(format!("{v} is not an integer")),
            ColumnKind::Integer => Ok(()),
            ColumnKind::Stepped => {
                let step = self.step.unwrap_or(1.0);
                let k = v / step;
                if (k - k.round()).abs() > 1e-9 * k.abs().max(1.0) {
                    Err(format!("{v} is not a multiple of {step}"))
                } else {
                    Ok(())
                }
            }
            ColumnKind::Binary | ColumnKind::Categorical => {
                if self.allowed().unwrap_or(&[]).contains(&v) {
                    Ok(())
                } else {
                    Err(format!("{v} is not one of {:?}", self.allowed().unwrap_or(&[])))
                }
            }
        }
    }
}

/// Nearest admissible value; ties go to the value farther from zero, as
/// with half-away-from-zero rounding.
fn nearest(values: &[f64], v: f64) -> f64 {
    let mut best = values.first().copied().unwrap_or(v);
    for &a in values {
        let (da, db) = ((a - v).abs(), (best - v).abs());
        if da < db || (da == db && a.abs() > best.abs()) {
            best = a;
        }
    }
    best
}

/// Ordered column list; serialized as a bare JSON array of [`ColumnSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SchemaDoc {
    List(Vec<ColumnSpec>),
    Object { columns: Vec<ColumnSpec> },
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self, LoadError> {
        let s = Schema { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, LoadError> {
        let doc: SchemaDoc = serde_json::from_str(text).map_err(|e| LoadError::Schema(e.to_string()))?;
        let columns = match doc {
            SchemaDoc::List(c) | SchemaDoc::Object { columns: c } => c,
        };
        Self::new(columns)
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        if self.columns.is_empty() {
            return Err(LoadError::Schema("no columns".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(LoadError::Schema(format!("duplicate column {:?}", c.name)));
            }
            if let Some(step) = c.step {
                if !(step > 0.0 && step.is_finite()) {
                    return Err(LoadError::Schema(format!("{}: step must be positive", c.name)));
                }
            }
            if c.kind == ColumnKind::Stepped && c.step.is_none() {
                return Err(LoadError::Schema(format!("{}: stepped column needs a step", c.name)));
            }
            if let Some(a) = &c.allowed_values {
                if a.is_empty() {
                    return Err(LoadError::Schema(format!("{}: allowed_values is empty", c.name)));
                }
            }
            if c.kind == ColumnKind::Categorical && c.allowed_values.is_none() {
                return Err(LoadError::Schema(format!(
                    "{}: categorical column needs allowed_values",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.columns.iter().map(ColumnSpec::width).sum()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

/// Applies each column's rounding rule to a denormalized row.
pub fn round_discrete(raw: &[f64], schema: &Schema) -> Vec<f64> {
    raw.iter().zip(&schema.columns).map(|(&v, c)| c.round(v)).collect()
}

/// Checks every value of a raw row against its column; reports the first violation.
pub fn validate_row(row: &[f64], schema: &Schema) -> Result<(), String> {
    if row.len() != schema.len() {
        return Err(format!("row has {} values, schema {}", row.len(), schema.len()));
    }
    for (v, c) in row.iter().zip(&schema.columns) {
        c.check(*v).map_err(|e| format!("{}: {e}", c.name))?;
    }
    Ok(())
}
