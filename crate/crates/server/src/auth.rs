//! Static bearer tokens loaded from a file at startup.
//!
//! One token per line: `<token> <role>` with role `operator` or `viewer`.
//! Blank lines and `#` comments are ignored.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Viewer,
    Operator,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s.to_ascii_lowercase().as_str() {
            "viewer" => Some(Role::Viewer),
            "operator" => Some(Role::Operator),
            _ => None,
        }
    }

    /// Operators may do everything viewers may.
    pub fn allows(self, required: Role) -> bool {
        self >= required
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenFileError {
    #[error("cannot read tokens file: {0}")]
    Io(String),
    #[error("tokens file line {line}: {message}")]
    Syntax { line: usize, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct TokenTable {
    tokens: HashMap<String, Role>,
}

impl TokenTable {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Role)>,
        S: Into<String>,
    {
        TokenTable {
            tokens: entries.into_iter().map(|(t, r)| (t.into(), r)).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, TokenFileError> {
        let mut tokens = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: &str| TokenFileError::Syntax {
                line: i + 1,
                message: message.to_string(),
            };
            let mut parts = line.split_whitespace();
            let (Some(token), Some(role), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(syntax("expected '<token> <role>'"));
            };
            let role =
                Role::parse(role).ok_or_else(|| syntax("role must be 'operator' or 'viewer'"))?;
            if tokens.insert(token.to_string(), role).is_some() {
                return Err(syntax("duplicate token"));
            }
        }
        Ok(TokenTable { tokens })
    }

    pub fn load(path: &Path) -> Result<Self, TokenFileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TokenFileError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Role for an `Authorization` header value, if it carries a known token.
    pub fn role_for_header(&self, header: Option<&str>) -> Option<Role> {
        let value = header?.trim();
        let (scheme, token) = value.split_once(' ')?;
        if !scheme.eq_ignore_ascii_case("bearer") {
            return None;
        }
        self.tokens.get(token.trim()).copied()
    }
}
