//! Response envelope shared by the CLI and the HTTP service.

use dualview_core::error::Error as CoreError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    /// JSON pointer, `line:column`, or identifier locating the problem.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
            location: None,
        }
    }

    pub fn at(mut self, location: impl Into<String>) -> Self {
        self.location = Some(location.into());
        self
    }

    /// Malformed JSON or a body that does not match the expected shape.
    pub fn from_json<T>(e: serde_path_to_error::Error<serde_json::Error>) -> Self {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let location = if inner.is_syntax() || inner.is_eof() || path == "." {
            format!("{}:{}", inner.line(), inner.column())
        } else {
            pointer(&path)
        };
        ApiError::new("malformed_request", inner.to_string()).at(location)
    }
}

/// `a.b[2].c` → `/a/b/2/c`.
fn pointer(path: &str) -> String {
    let mut out = String::new();
    for part in path.split('.') {
        for piece in part.split('[') {
            let piece = piece.trim_end_matches(']');
            if !piece.is_empty() {
                out.push('/');
                out.push_str(piece);
            }
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl From<&CoreError> for ApiError {
    fn from(e: &CoreError) -> Self {
        let error = ApiError::new(e.code(), e.to_string());
        match e {
            CoreError::Parse { line, column, .. } => error.at(format!("{line}:{column}")),
            CoreError::DuplicateId { id, .. } | CoreError::UnknownId { id, .. } => error.at(id.clone()),
            CoreError::UnknownFactor(name) | CoreError::EmptyFactor(name) => error.at(name.clone()),
            CoreError::UnknownLevel { level, .. } => error.at(level.clone()),
            CoreError::NoObservedValues(id) => error.at(id.clone()),
            _ => error,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Envelope<T> {
    Ok { payload: T },
    Error { error: ApiError },
}

impl<T> Envelope<T> {
    pub fn ok(payload: T) -> Self {
        Envelope::Ok { payload }
    }
}

fn backticked<'a>(message: &'a str, prefix: &str) -> Option<&'a str> {
    let rest = &message[message.find(prefix)? + prefix.len()..];
    let rest = rest.strip_prefix('`')?;
    Some(&rest[..rest.find('`')?])
}

/// Internally tagged enums are buffered before deserialization, so serde
/// loses the path. Recover it by naming the field the message mentions, or
/// the field whose removal changes the error.
fn locate_in_object<T: serde::de::DeserializeOwned>(bytes: &[u8], message: &str) -> Option<String> {
    for prefix in ["unknown field ", "missing field ", "duplicate field "] {
        if let Some(name) = backticked(message, prefix) {
            return Some(format!("/{name}"));
        }
    }
    let serde_json::Value::Object(object) = serde_json::from_slice(bytes).ok()? else {
        return None;
    };
    let mut keys: Vec<&String> = object.keys().collect();
    keys.sort_by_key(|k| *k == "kind");
    for key in keys {
        let mut reduced = object.clone();
        reduced.remove(key);
        match serde_json::from_value::<T>(serde_json::Value::Object(reduced)) {
            Ok(_) => return Some(format!("/{key}")),
            Err(e) if e.to_string() != message => return Some(format!("/{key}")),
            Err(_) => {}
        }
    }
    None
}

pub fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let mut error = ApiError::from_json::<T>(e);
        if error.location.as_deref() == Some("0:0") {
            error.location = Some(locate_in_object::<T>(bytes, &error.message).unwrap_or_else(|| "/".into()));
        }
        error
    })?;
    de.end()
        .map_err(|e| ApiError::new("malformed_request", e.to_string()).at(format!("{}:{}", e.line(), e.column())))?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualview_core::explorer::Step;

    #[test]
    fn pointers() {
        assert_eq!(pointer("steps[2].keep"), "/steps/2/keep");
        assert_eq!(pointer("."), "/");
    }

    #[test]
    fn bad_field_type_is_located() {
        let err = parse_json::<Step>(br#"{"kind":"variance_filter","keep":"many"}"#).unwrap_err();
        assert_eq!(err.code, "malformed_request");
        assert_eq!(err.location.as_deref(), Some("/keep"));
        let err = parse_json::<Step>(b"{\"kind\":").unwrap_err();
        assert_eq!(err.location.as_deref(), Some("1:8"));
        let err = parse_json::<Step>(br#"{"kind":"pca","extra":true}"#).unwrap_err();
        assert_eq!(err.location.as_deref(), Some("/extra"));
        let err = parse_json::<Step>(br#"{"kind":"shuffle"}"#).unwrap_err();
        assert_eq!(err.location.as_deref(), Some("/kind"));
        let err = parse_json::<Step>(br#"{"kind":"variance_filter"}"#).unwrap_err();
        assert_eq!(err.location.as_deref(), Some("/keep"));
    }

    #[test]
    fn envelope_shape() {
        let ok = serde_json::to_value(Envelope::ok(3)).unwrap();
        assert_eq!(ok, serde_json::json!({"status": "ok", "payload": 3}));
        let err: Envelope<()> = Envelope::Error {
            error: ApiError::new("x", "y"),
        };
        let v = serde_json::to_value(err).unwrap();
        assert_eq!(v, serde_json::json!({"status": "error", "error": {"code": "x", "message": "y"}}));
    }
}
