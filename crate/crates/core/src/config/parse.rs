//! Parser for the YAML subset used by config files: block maps, block
//! lists, flow lists/maps, plain and quoted scalars, `#` comments.
//! Anchors, aliases, tags, block scalars and multi-document streams are
//! rejected.

use super::{ConfigError, ConfigNode, Value};

#[derive(Debug, Clone)]
struct Line {
    no: usize,
    indent: usize,
    text: String,
}

struct Parser<'a> {
    file: &'a str,
    lines: Vec<Line>,
    pos: usize,
}

/// Parse one config document. The root must be a map (or empty).
pub fn parse_document(src: &str, file: &str) -> Result<ConfigNode, ConfigError> {
    let mut lines = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let no = i + 1;
        let stripped = strip_comment(raw);
        let trimmed = stripped.trim_end();
        if trimmed.trim().is_empty() {
            continue;
        }
        let indent = trimmed.len() - trimmed.trim_start_matches(' ').len();
        if trimmed[indent..].starts_with('\t') {
            return Err(err(file, no, "tabs are not allowed in indentation"));
        }
        let text = trimmed[indent..].to_string();
        if text == "---" || text == "..." || text.starts_with("%") {
            return Err(err(file, no, "document markers and directives are not supported"));
        }
        lines.push(Line { no, indent, text });
    }
    let mut p = Parser { file, lines, pos: 0 };
    if p.lines.is_empty() {
        return Ok(ConfigNode::new());
    }
    if p.lines[0].indent != 0 {
        return Err(err(file, p.lines[0].no, "document must start at column 0"));
    }
    if is_seq_item(&p.lines[0].text) {
        return Err(err(file, p.lines[0].no, "top level must be a map"));
    }
    let node = p.parse_map(0)?;
    if let Some(l) = p.lines.get(p.pos) {
        return Err(err(file, l.no, "unexpected content"));
    }
    Ok(node)
}

fn err(file: &str, line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Parse { file: file.to_string(), line, message: msg.into() }
}

fn is_seq_item(text: &str) -> bool {
    text == "-" || text.starts_with("- ")
}

/// Drop a trailing `# comment` that is outside quotes.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    let mut in_double = false;
    let mut in_single = false;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\\' if in_double => i += 1,
            b'"' if !in_single => in_double = !in_double,
            b'\'' if !in_double => in_single = !in_single,
            b'#' if !in_double && !in_single && (i == 0 || bytes[i - 1] == b' ' || bytes[i - 1] == b'\t') => {
                return &line[..i];
            }
            _ => {}
        }
        i += 1;
    }
    line
}

/// Locate the `:` separating a block-map key from its value.
/// Returns (key, rest-after-colon, quoted) when the text is a map entry.
fn split_entry(text: &str) -> Option<(String, &str, bool)> {
    let first = text.chars().next()?;
    if first == '"' || first == '\'' {
        let mut sc = Scanner::new(text);
        let key = sc.quoted().ok()?;
        let rest = &text[sc.pos..];
        let rest = rest.strip_prefix(':')?;
        if rest.is_empty() || rest.starts_with(' ') {
            return Some((key, rest.trim(), true));
        }
        return None;
    }
    if matches!(first, '[' | '{' | '-' | '?' | '&' | '*' | '!' | '|' | '>') && !text.starts_with("-:") {
        if first != '-' || is_seq_item(text) {
            return None;
        }
    }
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    for i in 0..bytes.len() {
        match bytes[i] {
            b'{' if i > 0 && bytes[i - 1] == b'$' => depth += 1,
            b'}' if depth > 0 => depth -= 1,
            b':' if depth == 0 && (i + 1 == bytes.len() || bytes[i + 1] == b' ') => {
                let key = text[..i].trim_end();
                if key.is_empty() {
                    return None;
                }
                return Some((key.to_string(), text[i + 1..].trim(), false));
            }
            _ => {}
        }
    }
    None
}

impl<'a> Parser<'a> {
    fn cur(&self) -> Option<&Line> {
        self.lines.get(self.pos)
    }

    fn parse_block(&mut self, indent: usize) -> Result<Value, ConfigError> {
        let line = self.cur().expect("caller checked").clone();
        if is_seq_item(&line.text) {
            Ok(Value::List(self.parse_seq(indent)?))
        } else {
            Ok(Value::Map(self.parse_map(indent)?))
        }
    }

    /// Value for `key:` with nothing after the colon.
    fn nested_value(&mut self, parent_indent: usize, allow_same_indent_seq: bool) -> Result<Value, ConfigError> {
        match self.cur() {
            Some(l) if l.indent > parent_indent => {
                let ind = l.indent;
                self.parse_block(ind)
            }
            Some(l) if allow_same_indent_seq && l.indent == parent_indent && is_seq_item(&l.text) => {
                Ok(Value::List(self.parse_seq(parent_indent)?))
            }
            _ => Ok(Value::Null),
        }
    }

    fn parse_map(&mut self, indent: usize) -> Result<ConfigNode, ConfigError> {
        let mut node = ConfigNode::new();
        while let Some(line) = self.cur().cloned() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(err(self.file, line.no, "unexpected indentation"));
            }
            if is_seq_item(&line.text) {
                // a list at the same indent ends a map only when it belongs to a parent key
                break;
            }
            let Some((key, rest, quoted)) = split_entry(&line.text) else {
                return Err(err(self.file, line.no, format!("expected `key: value`, found `{}`", line.text)));
            };
            let key = if quoted {
                key
            } else {
                check_plain_key(&key).map_err(|m| err(self.file, line.no, m))?
            };
            if node.contains_key(&key) {
                return Err(ConfigError::DuplicateKey { file: self.file.to_string(), line: line.no, key });
            }
            self.pos += 1;
            let value = if rest.is_empty() {
                self.nested_value(indent, true)?
            } else {
                parse_inline(rest).map_err(|m| err(self.file, line.no, m))?
            };
            node.insert(key, value);
        }
        Ok(node)
    }

    fn parse_seq(&mut self, indent: usize) -> Result<Vec<Value>, ConfigError> {
        let mut items = Vec::new();
        while let Some(line) = self.cur().cloned() {
            if line.indent < indent || !is_seq_item(&line.text) {
                if line.indent > indent {
                    return Err(err(self.file, line.no, "unexpected indentation"));
                }
                break;
            }
            if line.indent > indent {
                return Err(err(self.file, line.no, "unexpected indentation"));
            }
            let rest = line.text[1..].trim_start();
            if rest.is_empty() {
                self.pos += 1;
                items.push(self.nested_value(indent, false)?);
                continue;
            }
            let col = line.indent + (line.text.len() - rest.len());
            if is_seq_item(rest) {
                return Err(err(self.file, line.no, "nested block lists on one line are not supported; use [..]"));
            }
            if split_entry(rest).is_some() {
                // `- key: value` opens a map whose keys align with `key`
                self.lines[self.pos] = Line { no: line.no, indent: col, text: rest.to_string() };
                items.push(Value::Map(self.parse_map(col)?));
            } else {
                self.pos += 1;
                items.push(parse_inline(rest).map_err(|m| err(self.file, line.no, m))?);
            }
        }
        Ok(items)
    }
}

fn check_plain_key(key: &str) -> Result<String, String> {
    if key.chars().any(|c| matches!(c, '[' | ']' | '{' | '}' | ',' | '#' | '&' | '*' | '!' | '|' | '>' | '"' | '\'')) {
        return Err(format!("unsupported character in key `{key}` (quote it)"));
    }
    Ok(key.to_string())
}

/// Parse the value part of a line: flow collection, quoted or plain scalar.
fn parse_inline(text: &str) -> Result<Value, String> {
    let first = text.chars().next().ok_or("empty value")?;
    match first {
        '&' | '*' => Err("anchors and aliases are not supported".into()),
        '!' => Err("tags are not supported".into()),
        '|' | '>' => Err("block scalars are not supported".into()),
        '@' | '`' => Err(format!("reserved indicator `{first}`")),
        '[' | '{' | '"' | '\'' => {
            let mut sc = Scanner::new(text);
            let v = sc.flow_value()?;
            sc.skip_ws();
            if sc.pos != text.len() {
                return Err(format!("unexpected trailing text `{}`", &text[sc.pos..]));
            }
            Ok(v)
        }
        _ => Ok(resolve_plain(text.trim())),
    }
}

/// Type a plain scalar: null, bool, int, float, else string.
pub(crate) fn resolve_plain(s: &str) -> Value {
    match s {
        "" | "~" | "null" | "Null" | "NULL" => return Value::Null,
        "true" | "True" | "TRUE" => return Value::Bool(true),
        "false" | "False" | "FALSE" => return Value::Bool(false),
        ".inf" | ".Inf" | "+.inf" => return Value::Float(f64::INFINITY),
        "-.inf" | "-.Inf" => return Value::Float(f64::NEG_INFINITY),
        ".nan" | ".NaN" | ".NAN" => return Value::Float(f64::NAN),
        _ => {}
    }
    if looks_like_int(s) {
        if let Ok(i) = s.parse::<i64>() {
            return Value::Int(i);
        }
        if let Ok(f) = s.parse::<f64>() {
            return Value::Float(f);
        }
    }
    if looks_like_float(s) {
        if let Ok(f) = s.parse::<f64>() {
            return Value::Float(f);
        }
    }
    Value::Str(s.to_string())
}

fn looks_like_int(s: &str) -> bool {
    let d = s.strip_prefix(['-', '+']).unwrap_or(s);
    !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit())
}

fn looks_like_float(s: &str) -> bool {
    let d = s.strip_prefix(['-', '+']).unwrap_or(s);
    let (mantissa, exp) = match d.find(['e', 'E']) {
        Some(i) => (&d[..i], Some(&d[i + 1..])),
        None => (d, None),
    };
    let (int_part, frac) = match mantissa.find('.') {
        Some(i) => (&mantissa[..i], Some(&mantissa[i + 1..])),
        None => (mantissa, None),
    };
    let digits = |x: &str| x.bytes().all(|b| b.is_ascii_digit());
    if !digits(int_part) || !frac.map_or(true, digits) {
        return false;
    }
    if int_part.is_empty() && frac.map_or(true, str::is_empty) {
        return false;
    }
    if frac.is_none() && exp.is_none() {
        return false;
    }
    match exp {
        None => true,
        Some(e) => {
            let e = e.strip_prefix(['-', '+']).unwrap_or(e);
            !e.is_empty() && digits(e)
        }
    }
}

struct Scanner<'s> {
    src: &'s str,
    pos: usize,
}

impl<'s> Scanner<'s> {
    fn new(src: &'s str) -> Self {
        Scanner { src, pos: 0 }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(' ') | Some('\t')) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: char) -> Result<(), String> {
        self.skip_ws();
        match self.bump() {
            Some(x) if x == c => Ok(()),
            Some(x) => Err(format!("expected `{c}`, found `{x}`")),
            None => Err(format!("expected `{c}`, found end of line")),
        }
    }

    fn flow_value(&mut self) -> Result<Value, String> {
        self.skip_ws();
        match self.peek() {
            Some('[') => self.flow_list(),
            Some('{') => self.flow_map(),
            Some('"') | Some('\'') => Ok(Value::Str(self.quoted()?)),
            Some('&') | Some('*') => Err("anchors and aliases are not supported".into()),
            Some('!') => Err("tags are not supported".into()),
            Some(_) => {
                let raw = self.plain(false)?;
                if raw.is_empty() {
                    return Err("empty flow entry".into());
                }
                Ok(resolve_plain(&raw))
            }
            None => Err("unexpected end of line".into()),
        }
    }

    fn flow_list(&mut self) -> Result<Value, String> {
        self.expect('[')?;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(']') {
                self.bump();
                return Ok(Value::List(items));
            }
            items.push(self.flow_value()?);
            self.skip_ws();
            match self.bump() {
                Some(',') => continue,
                Some(']') => return Ok(Value::List(items)),
                Some(c) => return Err(format!("expected `,` or `]`, found `{c}`")),
                None => return Err("unterminated `[`".into()),
            }
        }
    }

    fn flow_map(&mut self) -> Result<Value, String> {
        self.expect('{')?;
        let mut node = ConfigNode::new();
        loop {
            self.skip_ws();
            if self.peek() == Some('}') {
                self.bump();
                return Ok(Value::Map(node));
            }
            let key = match self.peek() {
                Some('"') | Some('\'') => self.quoted()?,
                _ => {
                    let k = self.plain(true)?;
                    if k.is_empty() {
                        return Err("empty key in flow map".into());
                    }
                    check_plain_key(&k)?
                }
            };
            self.expect(':')?;
            let value = self.flow_value()?;
            if node.contains_key(&key) {
                return Err(format!("duplicate key `{key}`"));
            }
            node.insert(key, value);
            self.skip_ws();
            match self.bump() {
                Some(',') => continue,
                Some('}') => return Ok(Value::Map(node)),
                Some(c) => return Err(format!("expected `,` or `}}`, found `{c}`")),
                None => return Err("unterminated `{`".into()),
            }
        }
    }

    /// Plain scalar inside a flow collection. `${...}` spans are kept whole.
    fn plain(&mut self, is_key: bool) -> Result<String, String> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == '$' && self.src[self.pos..].starts_with("${") {
                match self.src[self.pos..].find('}') {
                    Some(end) => {
                        self.pos += end + 1;
                        continue;
                    }
                    None => return Err("unterminated `${`".into()),
                }
            }
            if matches!(c, ',' | ']' | '}' | '[' | '{') || (is_key && c == ':') {
                break;
            }
            self.bump();
        }
        Ok(self.src[start..self.pos].trim().to_string())
    }

    fn quoted(&mut self) -> Result<String, String> {
        let q = self.bump().ok_or("expected quote")?;
        let mut out = String::new();
        loop {
            let c = self.bump().ok_or("unterminated string")?;
            if q == '\'' {
                if c == '\'' {
                    if self.peek() == Some('\'') {
                        self.bump();
                        out.push('\'');
                        continue;
                    }
                    return Ok(out);
                }
                out.push(c);
                continue;
            }
            match c {
                '"' => return Ok(out),
                '\\' => {
                    let e = self.bump().ok_or("unterminated escape")?;
                    match e {
                        'n' => out.push('\n'),
                        't' => out.push('\t'),
                        'r' => out.push('\r'),
                        '0' => out.push('\0'),
                        '"' => out.push('"'),
                        '\\' => out.push('\\'),
                        '/' => out.push('/'),
                        'u' | 'U' => {
                            let n = if e == 'u' { 4 } else { 8 };
                            let hex = self.src.get(self.pos..self.pos + n).ok_or("short unicode escape")?;
                            let code = u32::from_str_radix(hex, 16).map_err(|_| "bad unicode escape")?;
                            let ch = char::from_u32(code).ok_or("invalid unicode scalar")?;
                            self.pos += n;
                            out.push(ch);
                        }
                        other => return Err(format!("unknown escape `\\{other}`")),
                    }
                }
                c => out.push(c),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> ConfigNode {
        parse_document(src, "test.yaml").unwrap()
    }

    #[test]
    fn quoted_block_keys_may_hold_any_character() {
        let n = parse("\"}$[ #x\":\n  \"a: b\": 1\n");
        assert_eq!(n.get_path("}$[ #x").and_then(|v| v.as_map()).and_then(|m| m.get("a: b")), Some(&Value::Int(1)));
    }

    #[test]
    fn scalars_are_typed() {
        let n = parse("a: 15\nb: 0.001\nc: true\nd: unet\ne: ~\nf: \"15\"\ng: 1e-3\nh: -7\ni: 'it''s'\n");
        assert_eq!(n.get("a"), Some(&Value::Int(15)));
        assert_eq!(n.get("b"), Some(&Value::Float(0.001)));
        assert_eq!(n.get("c"), Some(&Value::Bool(true)));
        assert_eq!(n.get("d"), Some(&Value::Str("unet".into())));
        assert_eq!(n.get("e"), Some(&Value::Null));
        assert_eq!(n.get("f"), Some(&Value::Str("15".into())));
        assert_eq!(n.get("g"), Some(&Value::Float(0.001)));
        assert_eq!(n.get("h"), Some(&Value::Int(-7)));
        assert_eq!(n.get("i"), Some(&Value::Str("it's".into())));
    }

    #[test]
    fn interpolation_and_target_lines() {
        let n = parse("_target_: models.unet\nnum_classes: ${datamodule:num_classes}  # runtime\n");
        assert_eq!(n.target(), Some("models.unet"));
        assert_eq!(n.get("num_classes"), Some(&Value::Str("${datamodule:num_classes}".into())));
    }

    #[test]
    fn nested_maps_and_lists() {
        let src = "\
defaults:
  - model: unet.yaml
  - task: semseg
trainer:
  max_epochs: 50
  devices: [0, 1]
callbacks:
- name: a
  every: 2
- plain
- [1, {x: 2}]
-
  deep: true
";
        let n = parse(src);
        let defaults = match n.get("defaults") {
            Some(Value::List(l)) => l.clone(),
            other => panic!("{other:?}"),
        };
        assert_eq!(defaults.len(), 2);
        assert_eq!(defaults[0].as_map().unwrap().get("model"), Some(&Value::Str("unet.yaml".into())));
        assert_eq!(n.get_path("trainer.max_epochs"), Some(&Value::Int(50)));
        let Some(Value::List(cbs)) = n.get("callbacks") else { panic!() };
        assert_eq!(cbs.len(), 4);
        assert_eq!(cbs[0].as_map().unwrap().get("every"), Some(&Value::Int(2)));
        assert_eq!(cbs[1], Value::Str("plain".into()));
        let Value::List(inner) = &cbs[2] else { panic!() };
        assert_eq!(inner[1].as_map().unwrap().get("x"), Some(&Value::Int(2)));
        assert_eq!(cbs[3].as_map().unwrap().get("deep"), Some(&Value::Bool(true)));
    }

    #[test]
    fn duplicate_keys_report_line() {
        match parse_document("a: 1\nb:\n  c: 1\n  c: 2\n", "dup.yaml") {
            Err(ConfigError::DuplicateKey { file, line, key }) => {
                assert_eq!((file.as_str(), line, key.as_str()), ("dup.yaml", 4, "c"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_carry_file_and_line() {
        for (src, line) in [
            ("a: 1\n  b: 2\n", 2),
            ("a: &x 1\n", 1),
            ("a: *x\n", 1),
            ("a: |\n  text\n", 1),
            ("a: [1, 2\n", 1),
            ("a: 1\njust text\n", 2),
            ("- 1\n", 1),
            ("a:\n\t- 1\n", 2),
            ("a: \"unterminated\n", 1),
            ("a: {x: 1, x: 2}\n", 1),
        ] {
            match parse_document(src, "bad.yaml") {
                Err(ConfigError::Parse { file, line: l, .. }) => {
                    assert_eq!(file, "bad.yaml");
                    assert_eq!(l, line, "{src:?}");
                }
                other => panic!("{src:?} -> {other:?}"),
            }
        }
    }

    #[test]
    fn comments_and_quoted_hashes() {
        let n = parse("# header\na: \"x # y\" # trailing\nb: c#d\n");
        assert_eq!(n.get("a"), Some(&Value::Str("x # y".into())));
        assert_eq!(n.get("b"), Some(&Value::Str("c#d".into())));
    }

    #[test]
    fn float_recognition() {
        for s in ["1.0", ".5", "5.", "1e3", "-2.5E-3", "+1.5"] {
            assert!(matches!(resolve_plain(s), Value::Float(_)), "{s}");
        }
        for s in ["1.2.3", "e3", ".", "1e", "abc", "1_000"] {
            assert!(matches!(resolve_plain(s), Value::Str(_)), "{s}");
        }
    }
}
