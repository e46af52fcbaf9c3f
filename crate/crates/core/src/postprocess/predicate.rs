//! Conjunctions of field comparisons over vector outputs.
//!
//! Syntax: atoms joined by `,` or ` and `, each `<field><op><value>` with
//! op one of `>=`, `<=`, `!=`, `>`, `<`, `=`. Fields are `score`,
//! `area_px`, `weight_sum` (numeric) and `attr.<key>` (string equality).

use std::fmt;

use serde::{Deserialize, Serialize};

use super::VectorItem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Ge,
    Le,
    Gt,
    Lt,
    Eq,
    Ne,
}

impl Op {
    fn symbol(self) -> &'static str {
        match self {
            Op::Ge => ">=",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Lt => "<",
            Op::Eq => "=",
            Op::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Atom {
    Number { field: String, op: Op, value: f64 },
    Attribute { key: String, value: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub atoms: Vec<Atom>,
}

const NUMERIC: [&str; 3] = ["score", "area_px", "weight_sum"];

impl Predicate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut atoms = Vec::new();
        for raw in text.split(',').flat_map(|s| s.split(" and ")) {
            let part = raw.trim();
            if part.is_empty() {
                continue;
            }
            let (pos, op) = [(">=", Op::Ge), ("<=", Op::Le), ("!=", Op::Ne), (">", Op::Gt), ("<", Op::Lt), ("=", Op::Eq)]
                .into_iter()
                .find_map(|(s, op)| part.find(s).map(|p| ((p, s.len()), op)))
                .ok_or_else(|| Error::validation(format!("predicate atom '{part}' has no comparison")))?;
            let field = part[..pos.0].trim();
            let value = part[pos.0 + pos.1..].trim();
            if let Some(key) = field.strip_prefix("attr.") {
                if op != Op::Eq || key.is_empty() {
                    return Err(Error::validation(format!("attribute atom '{part}' must be attr.<key>=<value>")));
                }
                atoms.push(Atom::Attribute { key: key.into(), value: value.into() });
            } else if NUMERIC.contains(&field) {
                let value: f64 = value.parse().map_err(|_| Error::validation(format!("'{value}' is not a number")))?;
                atoms.push(Atom::Number { field: field.into(), op, value });
            } else {
                return Err(Error::validation(format!("unknown predicate field '{field}'")));
            }
        }
        Ok(Predicate { atoms })
    }

    pub fn matches(&self, item: &VectorItem) -> bool {
        self.atoms.iter().all(|a| match a {
            Atom::Number { field, op, value } => match item.numeric(field) {
                Some(v) => match op {
                    Op::Ge => v >= *value,
                    Op::Le => v <= *value,
                    Op::Gt => v > *value,
                    Op::Lt => v < *value,
                    Op::Eq => v == *value,
                    Op::Ne => v != *value,
                },
                None => false,
            },
            Atom::Attribute { key, value } => item.attributes.get(key) == Some(value),
        })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .atoms
            .iter()
            .map(|a| match a {
                Atom::Number { field, op, value } => format!("{field}{}{value}", op.symbol()),
                Atom::Attribute { key, value } => format!("attr.{key}={value}"),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Items satisfying every atom, in input order.
pub fn predicate_filter(items: Vec<VectorItem>, predicate: &Predicate) -> Vec<VectorItem> {
    items.into_iter().filter(|i| predicate.matches(i)).collect()
}
