//! `key = value` text files: one pair per line, `#` starts a comment,
//! blank lines ignored, keys unique.

use indexmap::IndexMap;
use std::fmt::Display;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key}")]
    Duplicate { line: usize, key: String },
    #[error("key {key}: cannot parse {value:?}: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown key {0}")]
    Unknown(String),
}

pub fn parse(text: &str) -> Result<IndexMap<String, String>, KvError> {
    let mut out = IndexMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(KvError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(KvError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(KvError::Duplicate { line: n + 1, key });
        }
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, KvError>
where
    T::Err: Display,
{
    raw.parse().map_err(|e: T::Err| KvError::Value {
        key: key.into(),
        value: raw.into(),
        reason: e.to_string(),
    })
}

/// Comma-separated list; an empty string is an empty list.
pub fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, KvError>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

pub fn join<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
