use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JsonListError {
    #[error("no JSON object found in LLM output")]
    JsonNotFound,
    #[error("JSON object has no key `{0}`")]
    KeyMissing(String),
    #[error("value under `{0}` is not an array of strings")]
    NotAStringArray(String),
}

/// Finds the first parseable JSON object in `text` (prose and code fences
/// around it are skipped) and returns the string array stored under `key`.
pub fn parse_json_list(text: &str, key: &str) -> Result<Vec<String>, JsonListError> {
    let object = first_object(text).ok_or(JsonListError::JsonNotFound)?;
    let value = object
        .get(key)
        .ok_or_else(|| JsonListError::KeyMissing(key.to_string()))?;
    value
        .as_array()
        .and_then(|items| {
            items
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
        })
        .ok_or_else(|| JsonListError::NotAStringArray(key.to_string()))
}

/// Inverse of [`parse_json_list`] for a single key.
pub fn render_json_list(key: &str, items: &[String]) -> String {
    serde_json::json!({ key: items }).to_string()
}

fn first_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    text.match_indices('{').find_map(|(start, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}
