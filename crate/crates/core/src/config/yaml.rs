//! Restricted YAML subset used by `.labci.yml`.
//!
//! Supported: block mappings, block sequences (including sequences of
//! mappings), single-line flow sequences `[a, b]` and flow mappings `{k: v}`,
//! plain / single-quoted / double-quoted scalars, `#` comments and a single
//! leading `---`. Everything else (anchors, aliases, tags, block scalars,
//! multi-document streams, tab indentation) is a syntax error.
//!
//! Scalars are kept as their literal text: `python: 3.10` yields `"3.10"`.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Null { line: usize },
    Scalar { value: String, line: usize },
    Seq { items: Vec<Node>, line: usize },
    Map { entries: Vec<(String, Node)>, line: usize },
}

impl Node {
    pub fn line(&self) -> usize {
        match self {
            Node::Null { line }
            | Node::Scalar { line, .. }
            | Node::Seq { line, .. }
            | Node::Map { line, .. } => *line,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Node::Null { .. } => "null",
            Node::Scalar { .. } => "scalar",
            Node::Seq { .. } => "list",
            Node::Map { .. } => "mapping",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, SyntaxError> {
    Err(SyntaxError { line, message: message.into() })
}

#[derive(Debug, Clone)]
struct Line {
    no: usize,
    indent: usize,
    text: String,
}

/// Parses a document. An empty document (only comments/blank lines) is an
/// empty mapping.
pub fn parse(src: &str) -> Result<Node, SyntaxError> {
    let mut lines = Vec::new();
    let mut seen_content = false;
    for (i, raw) in src.lines().enumerate() {
        let no = i + 1;
        let stripped = strip_comment(raw);
        let trimmed_end = stripped.trim_end();
        if trimmed_end.trim().is_empty() {
            continue;
        }
        let indent = trimmed_end.len() - trimmed_end.trim_start().len();
        if trimmed_end[..indent].contains('\t') {
            return err(no, "tab characters are not allowed in indentation");
        }
        let text = trimmed_end[indent..].to_string();
        if text == "---" || text.starts_with("--- ") {
            if seen_content {
                return err(no, "multi-document streams are not supported");
            }
            if text != "---" {
                return err(no, "content after document marker is not supported");
            }
            continue;
        }
        if text == "..." {
            return err(no, "document end markers are not supported");
        }
        if text.starts_with('%') {
            return err(no, "YAML directives are not supported");
        }
        seen_content = true;
        lines.push(Line { no, indent, text });
    }
    if lines.is_empty() {
        return Ok(Node::Map { entries: Vec::new(), line: 1 });
    }
    let mut p = Parser { lines, pos: 0 };
    let first_indent = p.lines[0].indent;
    if first_indent != 0 {
        return err(p.lines[0].no, "document must start at column 0");
    }
    let node = p.block(0)?;
    if p.pos < p.lines.len() {
        let l = &p.lines[p.pos];
        return err(l.no, "unexpected indentation");
    }
    Ok(node)
}

/// Removes a trailing `# comment` that is outside quotes.
fn strip_comment(raw: &str) -> &str {
    let bytes = raw.as_bytes();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(b'"') if b == b'\\' => i += 1,
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None => match b {
                b'"' | b'\'' if i == 0 || is_token_start(bytes[i - 1]) => quote = Some(b),
                b'#' if i == 0 || bytes[i - 1] == b' ' || bytes[i - 1] == b'\t' => {
                    return &raw[..i];
                }
                _ => {}
            },
        }
        i += 1;
    }
    raw
}

/// A quote only opens a quoted scalar at the start of a token.
fn is_token_start(prev: u8) -> bool {
    matches!(prev, b' ' | b'\t' | b'[' | b'{' | b',' | b':' | b'-')
}

struct Parser {
    lines: Vec<Line>,
    pos: usize,
}

fn is_seq_item(text: &str) -> bool {
    text == "-" || text.starts_with("- ")
}

impl Parser {
    fn block(&mut self, indent: usize) -> Result<Node, SyntaxError> {
        let line = &self.lines[self.pos];
        if is_seq_item(&line.text) {
            self.seq(indent)
        } else {
            self.map(indent)
        }
    }

    fn seq(&mut self, indent: usize) -> Result<Node, SyntaxError> {
        let start = self.lines[self.pos].no;
        let mut items = Vec::new();
        while self.pos < self.lines.len() {
            let line = self.lines[self.pos].clone();
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return err(line.no, "unexpected indentation");
            }
            if !is_seq_item(&line.text) {
                break;
            }
            let rest_raw = &line.text[1..];
            let rest = rest_raw.trim_start();
            if rest.is_empty() {
                self.pos += 1;
                items.push(self.nested_or_null(indent, line.no)?);
                continue;
            }
            let col = indent + 1 + (rest_raw.len() - rest.len());
            if split_key(rest, line.no)?.is_some() {
                // `- key: value` opens a mapping whose keys sit at `col`.
                self.lines[self.pos] = Line { no: line.no, indent: col, text: rest.to_string() };
                items.push(self.map(col)?);
            } else if is_seq_item(rest) {
                self.lines[self.pos] = Line { no: line.no, indent: col, text: rest.to_string() };
                items.push(self.seq(col)?);
            } else {
                self.pos += 1;
                items.push(inline_value(rest, line.no)?);
            }
        }
        Ok(Node::Seq { items, line: start })
    }

    fn map(&mut self, indent: usize) -> Result<Node, SyntaxError> {
        let start = self.lines[self.pos].no;
        let mut entries: Vec<(String, Node)> = Vec::new();
        while self.pos < self.lines.len() {
            let line = self.lines[self.pos].clone();
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return err(line.no, "unexpected indentation");
            }
            if is_seq_item(&line.text) {
                return err(line.no, "list item where a mapping key was expected");
            }
            let Some((key, value)) = split_key(&line.text, line.no)? else {
                return err(line.no, format!("expected `key: value`, found `{}`", line.text));
            };
            if entries.iter().any(|(k, _)| *k == key) {
                return err(line.no, format!("duplicate key `{key}`"));
            }
            self.pos += 1;
            let node = if value.is_empty() {
                // A block sequence may sit at the same indent as its key.
                match self.lines.get(self.pos) {
                    Some(next) if next.indent == indent && is_seq_item(&next.text) => self.seq(indent)?,
                    _ => self.nested_or_null(indent, line.no)?,
                }
            } else {
                inline_value(value, line.no)?
            };
            entries.push((key, node));
        }
        Ok(Node::Map { entries, line: start })
    }

    fn nested_or_null(&mut self, parent_indent: usize, no: usize) -> Result<Node, SyntaxError> {
        match self.lines.get(self.pos) {
            Some(next) if next.indent > parent_indent => {
                let indent = next.indent;
                self.block(indent)
            }
            _ => Ok(Node::Null { line: no }),
        }
    }
}

/// Splits `key: value` at the first `:` outside quotes/brackets that is
/// followed by a space or the end of the text.
fn split_key(text: &str, no: usize) -> Result<Option<(String, &str)>, SyntaxError> {
    let first = text.as_bytes()[0];
    if matches!(first, b'[' | b'{') {
        return Ok(None);
    }
    let (key, after) = if first == b'"' || first == b'\'' {
        let (key, consumed) = quoted(text, no)?;
        let after = &text[consumed..];
        let after_trim = after.trim_start();
        if !after_trim.starts_with(':') {
            return Ok(None);
        }
        let colon_at = consumed + (after.len() - after_trim.len());
        (key, &text[colon_at..])
    } else {
        let bytes = text.as_bytes();
        let mut found = None;
        for i in 0..bytes.len() {
            if bytes[i] == b':' && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
                found = Some(i);
                break;
            }
        }
        let Some(i) = found else { return Ok(None) };
        let key = text[..i].trim_end();
        if key.is_empty() || key.contains(['"', '\'']) {
            return Ok(None);
        }
        (key.to_string(), &text[i..])
    };
    let value = after[1..].trim();
    Ok(Some((key, value)))
}

fn inline_value(text: &str, no: usize) -> Result<Node, SyntaxError> {
    let text = text.trim();
    match text.as_bytes().first() {
        None => Ok(Node::Null { line: no }),
        Some(b'&') => err(no, "anchors are not supported"),
        Some(b'*') => err(no, "aliases are not supported"),
        Some(b'!') => err(no, "tags are not supported"),
        Some(b'|') | Some(b'>') => err(no, "block scalars are not supported"),
        Some(b'[') => flow_seq(text, no),
        Some(b'{') => flow_map(text, no),
        Some(b'"') | Some(b'\'') => {
            let (value, consumed) = quoted(text, no)?;
            if !text[consumed..].trim().is_empty() {
                return err(no, "unexpected text after quoted scalar");
            }
            Ok(Node::Scalar { value, line: no })
        }
        _ => plain(text, no),
    }
}

fn plain(text: &str, no: usize) -> Result<Node, SyntaxError> {
    if text == "~" || text == "null" {
        return Ok(Node::Null { line: no });
    }
    if text.starts_with(['@', '`']) {
        return err(no, format!("plain scalar cannot start with `{}`", &text[..1]));
    }
    Ok(Node::Scalar { value: text.to_string(), line: no })
}

/// Parses a quoted scalar at the start of `text`; returns the value and the
/// number of bytes consumed.
fn quoted(text: &str, no: usize) -> Result<(String, usize), SyntaxError> {
    let q = text.as_bytes()[0];
    let mut out = String::new();
    let mut chars = text.char_indices().skip(1).peekable();
    while let Some((i, c)) = chars.next() {
        if q == b'\'' {
            if c == '\'' {
                if let Some((_, '\'')) = chars.peek() {
                    chars.next();
                    out.push('\'');
                    continue;
                }
                return Ok((out, i + 1));
            }
            out.push(c);
        } else {
            match c {
                '"' => return Ok((out, i + 1)),
                '\\' => {
                    let Some((_, e)) = chars.next() else {
                        return err(no, "unterminated escape sequence");
                    };
                    out.push(match e {
                        'n' => '\n',
                        't' => '\t',
                        'r' => '\r',
                        '0' => '\0',
                        '\\' => '\\',
                        '"' => '"',
                        '/' => '/',
                        ' ' => ' ',
                        other => return err(no, format!("unsupported escape `\\{other}`")),
                    });
                }
                c => out.push(c),
            }
        }
    }
    err(no, "unterminated quoted scalar")
}

/// Splits the inside of a flow collection at top-level commas.
fn split_flow(inner: &str, no: usize) -> Result<Vec<&str>, SyntaxError> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<u8> = None;
    let mut start = 0;
    let bytes = inner.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(b'"') if b == b'\\' => i += 1,
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None => match b {
                b'"' | b'\'' if i == 0 || is_token_start(bytes[i - 1]) => quote = Some(b),
                b'[' | b'{' => depth += 1,
                b']' | b'}' => depth -= 1,
                b',' if depth == 0 => {
                    parts.push(&inner[start..i]);
                    start = i + 1;
                }
                _ => {}
            },
        }
        i += 1;
    }
    if quote.is_some() {
        return err(no, "unterminated quoted scalar in flow collection");
    }
    if depth != 0 {
        return err(no, "unbalanced brackets in flow collection");
    }
    parts.push(&inner[start..]);
    // A trailing comma is allowed: `[a, b,]`.
    if parts.last().is_some_and(|p| p.trim().is_empty()) {
        parts.pop();
    }
    if parts.iter().any(|p| p.trim().is_empty()) {
        return err(no, "empty entry in flow collection");
    }
    Ok(parts)
}

fn flow_seq(text: &str, no: usize) -> Result<Node, SyntaxError> {
    if !text.ends_with(']') {
        return err(no, "flow sequence must close on the same line");
    }
    let inner = &text[1..text.len() - 1];
    let items = split_flow(inner, no)?
        .into_iter()
        .map(|part| inline_value(part, no))
        .collect::<Result<_, _>>()?;
    Ok(Node::Seq { items, line: no })
}

fn flow_map(text: &str, no: usize) -> Result<Node, SyntaxError> {
    if !text.ends_with('}') {
        return err(no, "flow mapping must close on the same line");
    }
    let inner = &text[1..text.len() - 1];
    let mut entries: Vec<(String, Node)> = Vec::new();
    for part in split_flow(inner, no)? {
        let part = part.trim();
        let Some((key, value)) = split_key(part, no)? else {
            return err(no, format!("expected `key: value` in flow mapping, found `{part}`"));
        };
        if entries.iter().any(|(k, _)| *k == key) {
            return err(no, format!("duplicate key `{key}`"));
        }
        entries.push((key, inline_value(value, no)?));
    }
    Ok(Node::Map { entries, line: no })
}

/// Renders a string as a double-quoted scalar that [`parse`] reads back
/// unchanged.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '\0' => out.push_str("\\0"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
