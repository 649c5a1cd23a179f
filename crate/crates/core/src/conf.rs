//! Brace-delimited `key = value` structured text used for config files,
//! scene manifests and run manifests.
//!
//! ```text
//! # comment
//! seed = 42
//! scene {
//!     room = [8, 6, 3]
//!     name = "office"
//! }
//! ```
//!
//! Numbers are kept as their source text until read so that `u64` seeds
//! survive without passing through `f64`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(String),
    Str(String),
    Bool(bool),
    List(Vec<Value>),
    Block(Block),
}

impl Value {
    pub fn num(x: f64) -> Value {
        Value::Number(format_f64(x))
    }

    pub fn int(x: u64) -> Value {
        Value::Number(x.to_string())
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    pub fn num_list(xs: &[f64]) -> Value {
        Value::List(xs.iter().map(|&x| Value::num(x)).collect())
    }

    pub fn as_f64(&self) -> Result<f64> {
        match self {
            Value::Number(s) => s
                .parse()
                .map_err(|_| Error::Parse(format!("not a number: {s}"))),
            other => Err(Error::Parse(format!(
                "expected number, found {}",
                other.kind()
            ))),
        }
    }

    pub fn as_u64(&self) -> Result<u64> {
        match self {
            Value::Number(s) => s
                .parse()
                .map_err(|_| Error::Parse(format!("not a non-negative integer: {s}"))),
            other => Err(Error::Parse(format!(
                "expected integer, found {}",
                other.kind()
            ))),
        }
    }

    pub fn as_f64_list(&self) -> Result<Vec<f64>> {
        match self {
            Value::List(items) => items.iter().map(Value::as_f64).collect(),
            other => Err(Error::Parse(format!(
                "expected list, found {}",
                other.kind()
            ))),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Number(_) => "number",
            Value::Str(_) => "string",
            Value::Bool(_) => "boolean",
            Value::List(_) => "list",
            Value::Block(_) => "block",
        }
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn format_f64(x: f64) -> String {
    if x.is_finite() && x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x:?}")
    }
}

/// An ordered list of `key = value` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Block {
    entries: Vec<(String, Value)>,
}

impl Block {
    pub fn new() -> Self {
        Block::default()
    }

    pub fn parse(text: &str) -> Result<Block> {
        let mut p = Parser {
            src: text.as_bytes(),
            pos: 0,
            line: 1,
        };
        let block = p.entries(false)?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(p.err("trailing input"));
        }
        Ok(block)
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: impl Into<String>, value: Value) -> &mut Self {
        let key = key.into();
        if let Some(slot) = self.entries.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.entries.push((key, value));
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Errors on any key outside `allowed`.
    pub fn expect_keys(&self, context: &str, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(Error::Parse(format!(
                    "unknown key `{k}` in {context} (expected one of: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key)
            .map_or(Ok(default), |v| v.as_f64().map_err(|e| keyed(key, e)))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.get(key)
            .map_or(Ok(default), |v| v.as_u64().map_err(|e| keyed(key, e)))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(other) => Err(Error::Parse(format!(
                "{key}: expected boolean, found {}",
                other.kind()
            ))),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> Result<String> {
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(Value::Str(s)) => Ok(s.clone()),
            Some(other) => Err(Error::Parse(format!(
                "{key}: expected string, found {}",
                other.kind()
            ))),
        }
    }

    pub fn block(&self, key: &str) -> Result<Option<&Block>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Block(b)) => Ok(Some(b)),
            Some(other) => Err(Error::Parse(format!(
                "{key}: expected block, found {}",
                other.kind()
            ))),
        }
    }

    fn write_into(&self, out: &mut String, indent: usize) {
        let pad = "    ".repeat(indent);
        for (k, v) in &self.entries {
            match v {
                Value::Block(b) => {
                    let _ = writeln!(out, "{pad}{k} {{");
                    b.write_into(out, indent + 1);
                    let _ = writeln!(out, "{pad}}}");
                }
                other => {
                    let _ = write!(out, "{pad}{k} = ");
                    write_value(out, other, indent);
                    out.push('\n');
                }
            }
        }
    }
}

fn keyed(key: &str, e: Error) -> Error {
    match e {
        Error::Parse(m) => Error::Parse(format!("{key}: {m}")),
        other => other,
    }
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    match v {
        Value::Number(s) => out.push_str(s),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Str(s) => {
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    c => out.push(c),
                }
            }
            out.push('"');
        }
        Value::List(items) => {
            let nested = items
                .iter()
                .any(|i| matches!(i, Value::List(_) | Value::Block(_)));
            if nested {
                let pad = "    ".repeat(indent + 1);
                out.push_str("[\n");
                for item in items {
                    out.push_str(&pad);
                    write_value(out, item, indent + 1);
                    out.push('\n');
                }
                out.push_str(&"    ".repeat(indent));
                out.push(']');
            } else {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, item, indent);
                }
                out.push(']');
            }
        }
        Value::Block(b) => {
            out.push_str("{\n");
            b.write_into(out, indent + 1);
            out.push_str(&"    ".repeat(indent));
            out.push('}');
        }
    }
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut out = String::new();
        self.write_into(&mut out, 0);
        f.write_str(&out)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("line {}: {msg}", self.line))
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c == b'#' {
                while let Some(c) = self.peek() {
                    if c == b'\n' {
                        break;
                    }
                    self.bump();
                }
            } else if c.is_ascii_whitespace() || c == b';' {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn ident(&mut self) -> Result<String> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' || c == b'-' || c == b'.' {
                self.bump();
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(self.err("expected key"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn entries(&mut self, nested: bool) -> Result<Block> {
        let mut block = Block::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None if nested => return Err(self.err("unterminated block")),
                None => return Ok(block),
                Some(b'}') if nested => {
                    self.bump();
                    return Ok(block);
                }
                Some(_) => {}
            }
            let key = self.ident()?;
            self.skip_ws();
            let value = match self.peek() {
                Some(b'{') => {
                    self.bump();
                    Value::Block(self.entries(true)?)
                }
                Some(b'=') => {
                    self.bump();
                    self.value()?
                }
                _ => return Err(self.err(&format!("expected `=` or `{{` after `{key}`"))),
            };
            if block.get(&key).is_some() {
                return Err(self.err(&format!("duplicate key `{key}`")));
            }
            block.entries.push((key, value));
        }
    }

    fn value(&mut self) -> Result<Value> {
        self.skip_ws();
        match self.peek() {
            Some(b'{') => {
                self.bump();
                Ok(Value::Block(self.entries(true)?))
            }
            Some(b'[') => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(b']') => {
                            self.bump();
                            return Ok(Value::List(items));
                        }
                        Some(b',') => {
                            self.bump();
                        }
                        None => return Err(self.err("unterminated list")),
                        Some(_) => items.push(self.value()?),
                    }
                }
            }
            Some(b'"') => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        None => return Err(self.err("unterminated string")),
                        Some(b'"') => return Ok(Value::Str(s)),
                        Some(b'\\') => match self.bump() {
                            Some(b'n') => s.push('\n'),
                            Some(b't') => s.push('\t'),
                            Some(c @ (b'"' | b'\\')) => s.push(c as char),
                            _ => return Err(self.err("bad escape")),
                        },
                        Some(c) => {
                            // Re-assemble multi-byte UTF-8 sequences.
                            let start = self.pos - 1;
                            let len = utf8_len(c);
                            for _ in 1..len {
                                self.bump();
                            }
                            s.push_str(&String::from_utf8_lossy(&self.src[start..self.pos]));
                        }
                    }
                }
            }
            Some(_) => {
                let start = self.pos;
                while let Some(c) = self.peek() {
                    if c.is_ascii_alphanumeric() || matches!(c, b'.' | b'-' | b'+' | b'_') {
                        self.bump();
                    } else {
                        break;
                    }
                }
                let tok = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                match tok {
                    "" => Err(self.err("expected value")),
                    "true" => Ok(Value::Bool(true)),
                    "false" => Ok(Value::Bool(false)),
                    t if t.parse::<f64>().is_ok() => Ok(Value::Number(t.to_string())),
                    t => Err(self.err(&format!("unrecognized value `{t}`"))),
                }
            }
            None => Err(self.err("expected value")),
        }
    }
}

fn utf8_len(first: u8) -> usize {
    match first {
        0xC0..=0xDF => 2,
        0xE0..=0xEF => 3,
        0xF0..=0xF7 => 4,
        _ => 1,
    }
}
