//! Scripted chat mock: an ordered script or stateless pattern->response
//! rules. Rule mode is safe under concurrent batch runs; ordered mode is
//! for single-threaded unit tests.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatProvider, ChatRequest};

/// One or many required substrings; all must appear in the prompt.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn as_slice(&self) -> Vec<&str> {
        match self {
            OneOrMany::One(s) => vec![s.as_str()],
            OneOrMany::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

/// First rule whose substrings all occur in the prompt wins.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScriptRule {
    pub contains: OneOrMany,
    pub response: String,
}

enum Mode {
    Ordered(Mutex<std::collections::VecDeque<String>>),
    Rules {
        rules: Vec<ScriptRule>,
        default: Option<String>,
    },
}

pub struct ScriptedChat {
    id: String,
    mode: Mode,
}

impl ScriptedChat {
    pub fn from_spec(
        id: &str,
        script: &[String],
        rules: Vec<ScriptRule>,
        default: Option<String>,
    ) -> Result<Self, BackendError> {
        if !script.is_empty() && !rules.is_empty() {
            return Err(BackendError::InvalidDescriptor(format!(
                "scripted mock \"{id}\" declares both an ordered script and rules"
            )));
        }
        let mode = if rules.is_empty() && default.is_none() {
            Mode::Ordered(Mutex::new(script.iter().cloned().collect()))
        } else {
            Mode::Rules { rules, default }
        };
        Ok(ScriptedChat {
            id: id.to_string(),
            mode,
        })
    }
}

impl ChatProvider for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        match &self.mode {
            Mode::Ordered(cursor) => cursor
                .lock()
                .expect("script cursor")
                .pop_front()
                .ok_or_else(|| BackendError::ScriptExhausted {
                    backend: self.id.clone(),
                    reason: "ordered script exhausted".to_string(),
                }),
            Mode::Rules { rules, default } => {
                for rule in rules {
                    if rule
                        .contains
                        .as_slice()
                        .iter()
                        .all(|needle| req.prompt.contains(needle))
                    {
                        return Ok(rule.response.clone());
                    }
                }
                default.clone().ok_or_else(|| BackendError::ScriptExhausted {
                    backend: self.id.clone(),
                    reason: "no rule matched the prompt".to_string(),
                })
            }
        }
    }
}
