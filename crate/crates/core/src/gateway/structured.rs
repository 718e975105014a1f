//! Parsing the structure-output reply: a JSON list of
//! `{"mechanism": ..., "organism": ...}` objects, possibly wrapped in code
//! fences or prose.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismPair {
    pub mechanism: String,
    pub organism: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StructuredList {
    pub entries: Vec<MechanismPair>,
    /// Objects seen that lacked a usable mechanism or organism.
    pub dropped: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no mechanism/organism entries in reply ({dropped} dropped)")]
pub struct StructuredParseError {
    pub raw: String,
    pub dropped: usize,
}

pub fn serialize_structured_list(entries: &[MechanismPair]) -> String {
    serde_json::to_string(entries).expect("pairs serialize")
}

fn fence_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*\s*\n?(.*?)```").expect("valid regex"))
}

fn object_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\{[^{}]*\}").expect("valid regex"))
}

fn field(obj: &serde_json::Map<String, Value>, name: &str) -> Option<String> {
    obj.iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case(name))
        .and_then(|(_, v)| v.as_str())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

fn collect(values: &[Value]) -> StructuredList {
    let mut out = StructuredList::default();
    for v in values {
        let pair = v.as_object().and_then(|o| {
            Some(MechanismPair {
                mechanism: field(o, "mechanism")?,
                organism: field(o, "organism")?,
            })
        });
        match pair {
            Some(p) => out.entries.push(p),
            None => out.dropped += 1,
        }
    }
    out
}

/// The outermost `[...]` span of `text`, parsed as a JSON array.
fn bracketed_array(text: &str) -> Option<Vec<Value>> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end <= start {
        return None;
    }
    serde_json::from_str::<Vec<Value>>(&text[start..=end]).ok()
}

/// Falls back to parsing each flat `{...}` object on its own, converting
/// Python-style single quotes when plain JSON fails.
fn loose_objects(text: &str) -> Vec<Value> {
    object_regex()
        .find_iter(text)
        .filter_map(|m| {
            let s = m.as_str();
            serde_json::from_str::<Value>(s)
                .ok()
                .or_else(|| serde_json::from_str::<Value>(&s.replace('\'', "\"")).ok())
        })
        .collect()
}

pub fn parse_structured_list(raw: &str) -> Result<StructuredList, StructuredParseError> {
    let mut candidates: Vec<&str> = fence_regex()
        .captures_iter(raw)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .collect();
    candidates.push(raw);

    let mut best = StructuredList::default();
    for text in &candidates {
        if let Some(values) = bracketed_array(text) {
            let list = collect(&values);
            if !list.entries.is_empty() {
                return Ok(list);
            }
            best.dropped = best.dropped.max(list.dropped);
        }
    }
    let list = collect(&loose_objects(raw));
    if !list.entries.is_empty() {
        return Ok(list);
    }
    Err(StructuredParseError {
        raw: raw.to_string(),
        dropped: best.dropped.max(list.dropped),
    })
}
