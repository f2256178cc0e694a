//! Strict config parsing that reports every bad field at once.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Typed field access over a JSON object that remembers which keys were
/// consumed and every error seen along the way.
pub struct Checker {
    obj: Map<String, Value>,
    known: Vec<&'static str>,
    pub errors: Vec<FieldError>,
}

impl Checker {
    pub fn new(value: Value) -> Result<Self, Vec<FieldError>> {
        match value {
            Value::Object(obj) => Ok(Checker {
                obj,
                known: Vec::new(),
                errors: Vec::new(),
            }),
            _ => Err(vec![FieldError {
                field: "$".into(),
                message: "config must be a JSON object".into(),
            }]),
        }
    }

    pub fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    fn parse<T: DeserializeOwned>(&mut self, name: &'static str) -> Option<Option<T>> {
        self.known.push(name);
        let v = self.obj.get(name)?;
        match serde_json::from_value::<T>(v.clone()) {
            Ok(t) => Some(Some(t)),
            Err(e) => {
                self.fail(name, e.to_string());
                Some(None)
            }
        }
    }

    /// Required field; `None` if missing or malformed (already recorded).
    pub fn req<T: DeserializeOwned>(&mut self, name: &'static str) -> Option<T> {
        match self.parse(name) {
            None => {
                self.fail(name, "missing required field");
                None
            }
            Some(v) => v,
        }
    }

    /// Optional field; `None` if malformed, `default` if absent.
    pub fn opt<T: DeserializeOwned>(&mut self, name: &'static str, default: T) -> Option<T> {
        match self.parse(name) {
            None => Some(default),
            Some(v) => v,
        }
    }

    /// Optional field without a default.
    pub fn maybe<T: DeserializeOwned>(&mut self, name: &'static str) -> Option<Option<T>> {
        match self.parse(name) {
            None => Some(None),
            Some(Some(v)) => Some(Some(v)),
            Some(None) => None,
        }
    }

    pub fn check(&mut self, ok: bool, field: &str, message: &str) {
        if !ok {
            self.fail(field, message);
        }
    }

    /// The object with only consumed keys, for typed whole-struct deserialization.
    pub fn known_object(&self) -> Value {
        Value::Object(
            self.obj
                .iter()
                .filter(|(k, _)| self.known.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    /// Adds an error for every unconsumed key and returns the collected errors.
    pub fn finish(mut self) -> Result<(), Vec<FieldError>> {
        let unknown: Vec<String> = self.obj.keys().filter(|k| !self.known.contains(&k.as_str())).cloned().collect();
        for k in unknown {
            self.fail(&k, "unknown field");
        }
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(self.errors)
        }
    }
}
