//! System definition files.
//!
//! A file is a sequence of `key = value` lines grouped under `[section]`
//! headers; `#` starts a comment. Values are numbers, `true`/`false`,
//! double-quoted strings, or bracketed lists of those. Keys before the
//! first header are top-level (`name`, `dim`, `description`).
//!
//! ```text
//! name = "ex1_mexican_hat"
//! dim = 2
//!
//! [params]
//! m = 1
//!
//! [definitions]
//! r2 = "dot(q,q)"
//!
//! [lagrangian]
//! L = "m/2*(dot(v,v)/r2 - dot(q,v)^2/r2^2) + r2/2 - r2^2/4"
//!
//! [seed]
//! q = [2, 0]
//! v = [0.2, 0.7]
//! ```
//!
//! Other sections: `[primary]` (labelled canonical expressions in `q`, `p`),
//! `[integration]` (`t0`, `t1`, `dt`, `project`), `[u]` (free horizontal
//! multiplier direction as `w1 … wD`), `[sampling]` (`points`, `seed`) and
//! `[symmetry]` (`rho`, `rhodot`: lists of D expressions).

use std::collections::BTreeMap;
use std::fmt;

use singlag::dynamics::IntegrationOptions;
use singlag::expr::{parse_with, Bindings, Expr, ParseContext, ParseErrorKind};
use singlag::LagrangianSystem;

#[derive(Debug, Clone, PartialEq)]
pub struct FileError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for FileError {}

fn err(line: usize, column: usize, message: impl Into<String>) -> FileError {
    FileError { line, column, message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Bool(bool),
    Str(String),
    List(Vec<Value>),
}

/// A value with the position of its first character.
#[derive(Debug, Clone, PartialEq)]
pub struct Spanned {
    pub value: Value,
    pub line: usize,
    pub column: usize,
}

impl Spanned {
    fn fail(&self, message: impl Into<String>) -> FileError {
        err(self.line, self.column, message)
    }

    fn number(&self) -> Result<f64, FileError> {
        match self.value {
            Value::Number(x) => Ok(x),
            _ => Err(self.fail("expected a number")),
        }
    }

    fn string(&self) -> Result<&str, FileError> {
        match &self.value {
            Value::Str(s) => Ok(s),
            _ => Err(self.fail("expected a quoted string")),
        }
    }

    fn boolean(&self) -> Result<bool, FileError> {
        match self.value {
            Value::Bool(b) => Ok(b),
            _ => Err(self.fail("expected true or false")),
        }
    }

    fn numbers(&self) -> Result<Vec<f64>, FileError> {
        match &self.value {
            Value::List(xs) => xs
                .iter()
                .map(|x| match x {
                    Value::Number(n) => Ok(*n),
                    _ => Err(self.fail("expected a list of numbers")),
                })
                .collect(),
            _ => Err(self.fail("expected a list of numbers")),
        }
    }

    fn strings(&self) -> Result<Vec<String>, FileError> {
        match &self.value {
            Value::List(xs) => xs
                .iter()
                .map(|x| match x {
                    Value::Str(s) => Ok(s.clone()),
                    _ => Err(self.fail("expected a list of quoted strings")),
                })
                .collect(),
            _ => Err(self.fail("expected a list of quoted strings")),
        }
    }

    /// Column of the expression text inside a quoted string.
    fn text_column(&self) -> usize {
        self.column + 1
    }
}

/// Sections in file order; keys in file order within a section.
type Sections = Vec<(String, Vec<(String, Spanned)>)>;

struct Cursor<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    _src: &'a str,
}

impl Cursor<'_> {
    fn column(&self) -> usize {
        self.pos + 1
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(' ' | '\t')) {
            self.pos += 1;
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        matches!(self.peek(), None | Some('#'))
    }

    fn value(&mut self) -> Result<Spanned, FileError> {
        self.skip_ws();
        let (line, column) = (self.line, self.column());
        let value = match self.peek() {
            Some('"') => {
                self.pos += 1;
                let start = self.pos;
                while self.peek().is_some_and(|c| c != '"') {
                    self.pos += 1;
                }
                if self.peek().is_none() {
                    return Err(err(line, column, "unterminated string"));
                }
                let s: String = self.chars[start..self.pos].iter().collect();
                self.pos += 1;
                Value::Str(s)
            }
            Some('[') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(']') => {
                            self.pos += 1;
                            break;
                        }
                        None | Some('#') => return Err(err(line, column, "unterminated list")),
                        _ => {}
                    }
                    let item = self.value()?;
                    if matches!(item.value, Value::List(_)) {
                        return Err(item.fail("nested lists are not supported"));
                    }
                    items.push(item.value);
                    self.skip_ws();
                    match self.peek() {
                        Some(',') => self.pos += 1,
                        Some(']') => {}
                        _ => return Err(err(self.line, self.column(), "expected `,` or `]`")),
                    }
                }
                Value::List(items)
            }
            Some(_) => {
                let start = self.pos;
                while self.peek().is_some_and(|c| !matches!(c, ',' | ']' | '#' | ' ' | '\t')) {
                    self.pos += 1;
                }
                let word: String = self.chars[start..self.pos].iter().collect();
                match word.as_str() {
                    "true" => Value::Bool(true),
                    "false" => Value::Bool(false),
                    _ => match word.parse::<f64>() {
                        Ok(x) if x.is_finite() => Value::Number(x),
                        _ => return Err(err(line, column, format!("cannot read value `{word}`"))),
                    },
                }
            }
            None => return Err(err(line, column, "missing value")),
        };
        Ok(Spanned { value, line, column })
    }
}

fn is_key_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Split a file into sections of spanned key-value pairs.
pub fn tokenize(src: &str) -> Result<Sections, FileError> {
    let mut sections: Sections = vec![(String::new(), Vec::new())];
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let mut cur = Cursor { chars: raw.chars().collect(), pos: 0, line, _src: raw };
        if cur.at_end() {
            continue;
        }
        if cur.peek() == Some('[') {
            let start = cur.pos + 1;
            let close = cur
                .chars
                .iter()
                .position(|&c| c == ']')
                .ok_or_else(|| err(line, cur.column(), "unclosed section header"))?;
            let name: String = cur.chars[start..close].iter().collect::<String>().trim().to_string();
            if name.is_empty() || !name.chars().all(is_key_char) {
                return Err(err(line, start + 1, format!("bad section name `{name}`")));
            }
            cur.pos = close + 1;
            if !cur.at_end() {
                return Err(err(line, cur.column(), "unexpected text after section header"));
            }
            if sections.iter().any(|(s, _)| *s == name) {
                return Err(err(line, start + 1, format!("duplicate section [{name}]")));
            }
            sections.push((name, Vec::new()));
            continue;
        }
        let key_col = cur.column();
        let start = cur.pos;
        while cur.peek().is_some_and(is_key_char) {
            cur.pos += 1;
        }
        let key: String = cur.chars[start..cur.pos].iter().collect();
        if key.is_empty() {
            return Err(err(line, key_col, "expected a key or [section]"));
        }
        cur.skip_ws();
        if cur.peek() != Some('=') {
            return Err(err(line, cur.column(), "expected `=`"));
        }
        cur.pos += 1;
        let value = cur.value()?;
        if !cur.at_end() {
            return Err(err(line, cur.column(), "unexpected text after value"));
        }
        let entries = &mut sections.last_mut().expect("top-level section").1;
        if entries.iter().any(|(k, _)| *k == key) {
            return Err(err(line, key_col, format!("duplicate key `{key}`")));
        }
        entries.push((key, value));
    }
    Ok(sections)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub points: Option<usize>,
    pub seed: Option<u64>,
}

/// A parsed and validated system file.
#[derive(Debug, Clone)]
pub struct SystemFile {
    pub name: String,
    pub description: String,
    pub dim: usize,
    pub params: BTreeMap<String, f64>,
    /// Definitions already expanded into the Lagrangian.
    pub lagrangian: Expr,
    pub lagrangian_text: String,
    pub seed: Option<Bindings>,
    pub primary: Vec<(String, Expr)>,
    pub integration: IntegrationOptions,
    /// Free horizontal multiplier direction, one expression per coordinate.
    pub free: Option<Vec<Expr>>,
    pub sampling: Sampling,
    pub symmetry: Option<(Vec<Expr>, Vec<Expr>)>,
}

impl SystemFile {
    pub fn build(&self) -> singlag::Result<LagrangianSystem> {
        LagrangianSystem::build(&self.name, self.lagrangian.clone(), self.dim, self.params.clone())
    }

    /// The seed point, or `q = (1, …, 1)`, `v = (0.5, …)` when absent.
    pub fn seed_point(&self) -> Bindings {
        self.seed.clone().unwrap_or_else(|| {
            Bindings::new(vec![1.0; self.dim], (0..self.dim).map(|a| 0.5 - 0.1 * a as f64).collect())
        })
    }
}

const KNOWN: &[(&str, &[&str])] = &[
    ("", &["name", "dim", "description"]),
    ("params", &[]),
    ("definitions", &[]),
    ("lagrangian", &["L"]),
    ("seed", &["q", "v"]),
    ("primary", &[]),
    ("integration", &["t0", "t1", "dt", "project"]),
    ("u", &[]),
    ("sampling", &["points", "seed"]),
    ("symmetry", &["rho", "rhodot"]),
];

fn parse_expr(text: &str, at: &Spanned, ctx: &ParseContext) -> Result<Expr, FileError> {
    parse_with(text, ctx).map_err(|e| {
        // offsets are byte offsets into the expression text
        let col = text[..e.offset.min(text.len())].chars().count();
        let message = match e.kind {
            ParseErrorKind::Syntax(msg) => format!("syntax error: {msg}"),
            ParseErrorKind::UndeclaredSymbol(s) => format!("undeclared symbol `{s}`"),
            ParseErrorKind::IndexOutOfRange { symbol, index, dim } => {
                format!("index {index} of `{symbol}` out of range 1..={dim}")
            }
        };
        err(at.line, at.text_column() + col, message)
    })
}

/// Parse and validate a system file.
pub fn parse_system(src: &str) -> Result<SystemFile, FileError> {
    let sections = tokenize(src)?;
    let section = |name: &str| sections.iter().find(|(s, _)| s == name).map(|(_, e)| e.as_slice());
    for (name, entries) in &sections {
        let Some((_, keys)) = KNOWN.iter().find(|(s, _)| s == name) else {
            let first = entries.first().map_or(1, |(_, v)| v.line.saturating_sub(1).max(1));
            return Err(err(first, 1, format!("unknown section [{name}]")));
        };
        if !keys.is_empty() {
            if let Some((k, v)) = entries.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
                return Err(err(v.line, 1, format!("unknown key `{k}` in [{name}]")));
            }
        }
    }
    let top = section("").unwrap_or_default();
    let get = |entries: &[(String, Spanned)], key: &str| entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let name = match get(top, "name") {
        Some(v) => v.string()?.to_string(),
        None => return Err(err(1, 1, "missing top-level `name`")),
    };
    let dim_v = get(top, "dim").ok_or_else(|| err(1, 1, "missing top-level `dim`"))?;
    let dim_f = dim_v.number()?;
    if dim_f < 1.0 || dim_f.fract() != 0.0 {
        return Err(dim_v.fail("dim must be a positive integer"));
    }
    let dim = dim_f as usize;
    let description = match get(top, "description") {
        Some(v) => v.string()?.to_string(),
        None => String::new(),
    };

    let mut params = BTreeMap::new();
    for (k, v) in section("params").unwrap_or_default() {
        params.insert(k.clone(), v.number()?);
    }
    let names: Vec<&str> = params.keys().map(String::as_str).collect();
    let mut ctx = ParseContext::new(dim, &names);
    for (k, v) in section("definitions").unwrap_or_default() {
        let e = parse_expr(v.string()?, v, &ctx)?;
        ctx.definitions.insert(k.clone(), e);
    }
    let lag = section("lagrangian").and_then(|e| get(e, "L")).ok_or_else(|| err(1, 1, "missing [lagrangian] L"))?;
    let lagrangian_text = lag.string()?.to_string();
    let lagrangian = parse_expr(&lagrangian_text, &lag, &ctx)?;

    let seed = match section("seed") {
        None => None,
        Some(entries) => {
            let q = get(entries, "q").ok_or_else(|| err(1, 1, "[seed] needs q"))?;
            let v = get(entries, "v").ok_or_else(|| err(q.line, 1, "[seed] needs v"))?;
            let (qs, vs) = (q.numbers()?, v.numbers()?);
            if qs.len() != dim {
                return Err(q.fail(format!("expected {dim} entries")));
            }
            if vs.len() != dim {
                return Err(v.fail(format!("expected {dim} entries")));
            }
            Some(Bindings::new(qs, vs))
        }
    };

    let canon = ctx.clone().canonical();
    let mut primary = Vec::new();
    for (k, v) in section("primary").unwrap_or_default() {
        primary.push((k.clone(), parse_expr(v.string()?, v, &canon)?));
    }

    let mut integration = IntegrationOptions::default();
    if let Some(entries) = section("integration") {
        for (k, v) in entries {
            match k.as_str() {
                "t0" => integration.t0 = v.number()?,
                "t1" => integration.t1 = v.number()?,
                "dt" => {
                    integration.dt = v.number()?;
                    if integration.dt <= 0.0 {
                        return Err(v.fail("dt must be positive"));
                    }
                }
                _ => integration.project = v.boolean()?,
            }
        }
        if integration.t1 < integration.t0 {
            let at = get(entries, "t1").unwrap();
            return Err(at.fail("t1 must not precede t0"));
        }
    }

    let free = match section("u") {
        None => None,
        Some(entries) => {
            let mut w = vec![Expr::zero(); dim];
            for (k, v) in entries {
                let idx = k.strip_prefix('w').and_then(|s| s.parse::<usize>().ok()).filter(|&i| (1..=dim).contains(&i));
                let Some(i) = idx else {
                    return Err(err(v.line, 1, format!("multiplier keys are w1..w{dim}, got `{k}`")));
                };
                w[i - 1] = parse_expr(v.string()?, v, &ctx)?;
            }
            Some(w)
        }
    };

    let mut sampling = Sampling { points: None, seed: None };
    for (k, v) in section("sampling").unwrap_or_default() {
        let x = v.number()?;
        if x < 0.0 || x.fract() != 0.0 {
            return Err(v.fail("expected a non-negative integer"));
        }
        match k.as_str() {
            "points" => sampling.points = Some(x as usize),
            _ => sampling.seed = Some(x as u64),
        }
    }

    let symmetry = match section("symmetry") {
        None => None,
        Some(entries) => {
            let mut out = Vec::new();
            for key in ["rho", "rhodot"] {
                let v = get(entries, key).ok_or_else(|| err(1, 1, format!("[symmetry] needs {key}")))?;
                let texts = v.strings()?;
                if texts.len() != dim {
                    return Err(v.fail(format!("expected {dim} expressions")));
                }
                out.push(texts.iter().map(|t| parse_expr(t, &v, &ctx)).collect::<Result<Vec<_>, _>>()?);
            }
            let rhodot = out.pop().unwrap();
            Some((out.pop().unwrap(), rhodot))
        }
    };

    Ok(SystemFile {
        name,
        description,
        dim,
        params,
        lagrangian,
        lagrangian_text,
        seed,
        primary,
        integration,
        free,
        sampling,
        symmetry,
    })
}
