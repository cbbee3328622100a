//! Strict JSON object reading that gathers every problem before failing.

use std::collections::BTreeSet;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Reads typed keys from a JSON object. Missing keys take the supplied
/// default; wrong types, failed checks and (in [`Fields::finish`]) unknown
/// keys are collected instead of returned one at a time.
pub struct Fields<'a> {
    map: &'a Map<String, Value>,
    known: BTreeSet<String>,
    errors: Vec<String>,
}

impl<'a> Fields<'a> {
    pub fn new(value: &'a Value) -> Result<Self> {
        match value {
            Value::Object(map) => Ok(Self {
                map,
                known: BTreeSet::new(),
                errors: Vec::new(),
            }),
            _ => Err(Error::Config(vec!["configuration must be a JSON object".into()])),
        }
    }

    fn get(&mut self, key: &str) -> Option<&'a Value> {
        self.known.insert(key.to_string());
        self.map.get(key)
    }

    pub fn f64(&mut self, key: &str, default: f64) -> f64 {
        match self.get(key) {
            None => default,
            Some(v) => match v.as_f64() {
                Some(x) => x,
                None => {
                    self.errors.push(format!("{key}: expected a number, got {v}"));
                    default
                }
            },
        }
    }

    pub fn u64(&mut self, key: &str, default: u64) -> u64 {
        match self.get(key) {
            None => default,
            Some(v) => match v.as_u64() {
                Some(x) => x,
                None => {
                    self.errors.push(format!("{key}: expected a non-negative integer, got {v}"));
                    default
                }
            },
        }
    }

    pub fn usize(&mut self, key: &str, default: usize) -> usize {
        self.u64(key, default as u64) as usize
    }

    pub fn opt_usize(&mut self, key: &str) -> Option<usize> {
        match self.get(key) {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_u64() {
                Some(x) => Some(x as usize),
                None => {
                    self.errors.push(format!("{key}: expected a non-negative integer, got {v}"));
                    None
                }
            },
        }
    }

    /// A string key parsed with `FromStr`.
    pub fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => default,
            Some(Value::String(s)) => match s.parse() {
                Ok(t) => t,
                Err(e) => {
                    self.errors.push(format!("{key}: {e}"));
                    default
                }
            },
            Some(v) => {
                self.errors.push(format!("{key}: expected a string, got {v}"));
                default
            }
        }
    }

    /// Marks `key` as accepted without reading it.
    pub fn allow(&mut self, key: &str) -> Option<&'a Value> {
        self.get(key)
    }

    pub fn check(&mut self, ok: bool, key: &str, message: impl std::fmt::Display) {
        if !ok {
            self.errors.push(format!("{key}: {message}"));
        }
    }

    pub fn fail(&mut self, message: impl Into<String>) {
        self.errors.push(message.into());
    }

    /// Errors listing every unknown key and failed read or check.
    pub fn finish(mut self) -> Result<()> {
        let unknown: Vec<String> = self
            .map
            .keys()
            .filter(|k| !self.known.contains(*k))
            .map(|k| format!("{k}: unknown key"))
            .collect();
        self.errors.extend(unknown);
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.errors))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn collects_all_problems() {
        let v = json!({"a": "x", "b": -1, "c": 1.5, "typo": 3});
        let mut f = Fields::new(&v).unwrap();
        f.f64("a", 0.0);
        f.u64("b", 0);
        let c = f.f64("c", 0.0);
        f.check(c < 1.0, "c", "must be below 1");
        let Err(Error::Config(errs)) = f.finish() else {
            panic!("expected config error")
        };
        assert_eq!(errs.len(), 4);
        assert!(errs.iter().any(|e| e.starts_with("typo")));
    }

    #[test]
    fn defaults_for_missing_keys() {
        let v = json!({});
        let mut f = Fields::new(&v).unwrap();
        assert_eq!(f.usize("n", 7), 7);
        assert!(f.finish().is_ok());
        assert!(Fields::new(&json!([1])).is_err());
    }
}
