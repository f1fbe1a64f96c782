use std::collections::BTreeMap;
use std::fmt;

use super::{dot, BinaryOp, Coord, Expr, Slot, UnaryOp};

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    Syntax(String),
    UndeclaredSymbol(String),
    IndexOutOfRange { symbol: String, index: usize, dim: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ParseError {
    /// Byte offset into the source text.
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ParseErrorKind::Syntax(msg) => write!(f, "syntax error at byte {}: {msg}", self.offset),
            ParseErrorKind::UndeclaredSymbol(s) => {
                write!(f, "undeclared symbol `{s}` at byte {}", self.offset)
            }
            ParseErrorKind::IndexOutOfRange { symbol, index, dim } => {
                write!(f, "index {index} of `{symbol}` out of range 1..={dim} at byte {}", self.offset)
            }
        }
    }
}

/// Symbol environment for parsing.
#[derive(Debug, Clone, Default)]
pub struct ParseContext {
    pub dim: usize,
    pub params: Vec<String>,
    /// Named subexpressions substituted wherever their name appears.
    pub definitions: BTreeMap<String, Expr>,
    /// Accept `p` coordinates instead of `v` (canonical-side expressions).
    pub canonical: bool,
}

impl ParseContext {
    pub fn new(dim: usize, params: &[&str]) -> Self {
        ParseContext { dim, params: params.iter().map(|s| s.to_string()).collect(), ..Default::default() }
    }

    pub fn canonical(mut self) -> Self {
        self.canonical = true;
        self
    }
}

/// Parse `text` over `dim` coordinates with the given parameter names.
pub fn parse(text: &str, dim: usize, param_names: &[&str]) -> Result<Expr, ParseError> {
    parse_with(text, &ParseContext::new(dim, param_names))
}

pub fn parse_with(text: &str, ctx: &ParseContext) -> Result<Expr, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0, ctx, len: text.len() };
    let e = p.expr()?;
    match p.peek() {
        None => Ok(e),
        Some(t) => Err(p.syntax(t.offset, format!("unexpected {}", t.tok.describe()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Int(usize),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(x) => format!("number {x}"),
            Tok::Int(i) => format!("number {i}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let tok = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                i += 1;
                Tok::Op(c as char)
            }
            b'(' => {
                i += 1;
                Tok::LParen
            }
            b')' => {
                i += 1;
                Tok::RParen
            }
            b'[' => {
                i += 1;
                Tok::LBracket
            }
            b']' => {
                i += 1;
                Tok::RBracket
            }
            b',' => {
                i += 1;
                Tok::Comma
            }
            b'0'..=b'9' | b'.' => {
                let mut is_int = c != b'.';
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    is_int = false;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        is_int = false;
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s = &text[start..i];
                let value: f64 = s.parse().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::Syntax(format!("malformed number `{s}`")),
                })?;
                if is_int {
                    match s.parse::<usize>() {
                        Ok(n) => Tok::Int(n),
                        Err(_) => Tok::Num(value),
                    }
                } else {
                    Tok::Num(value)
                }
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                Tok::Ident(text[start..i].to_string())
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::Syntax(format!("unexpected character `{ch}`")),
                });
            }
        };
        out.push(Token { tok, offset: start });
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    ctx: &'a ParseContext,
    len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_tok(&self) -> Option<&Tok> {
        self.peek().map(|t| &t.tok)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn offset(&self) -> usize {
        self.peek().map(|t| t.offset).unwrap_or(self.len)
    }

    fn syntax(&self, offset: usize, msg: String) -> ParseError {
        ParseError { offset, kind: ParseErrorKind::Syntax(msg) }
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        let offset = self.offset();
        match self.next() {
            Some(t) if t.tok == want => Ok(()),
            Some(t) => Err(self.syntax(offset, format!("expected {}, found {}", want.describe(), t.tok.describe()))),
            None => Err(self.syntax(offset, format!("expected {}, found end of input", want.describe()))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek_tok() {
            let op = if *c == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::raw_binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek_tok() {
            let op = if *c == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::raw_binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek_tok() {
            self.pos += 1;
            let inner = self.factor()?;
            return Ok(Expr::raw_unary(UnaryOp::Neg, inner));
        }
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek_tok() {
            self.pos += 1;
            let exponent = self.atom()?;
            return Ok(Expr::raw_binary(BinaryOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        let Some(t) = self.next() else {
            return Err(self.syntax(offset, "unexpected end of input".into()));
        };
        match t.tok {
            Tok::Num(x) => Ok(Expr::constant(x)),
            Tok::Int(n) => Ok(Expr::constant(n as f64)),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => self.ident(name, offset),
            other => Err(self.syntax(offset, format!("unexpected {}", other.describe()))),
        }
    }

    fn ident(&mut self, name: String, offset: usize) -> Result<Expr, ParseError> {
        let followed_by_paren = matches!(self.peek_tok(), Some(Tok::LParen));
        if followed_by_paren {
            if name == "dot" {
                return self.dot_call();
            }
            if let Some(op) = UnaryOp::from_name(&name) {
                self.pos += 1;
                let arg = self.expr()?;
                if let Some(Tok::Comma) = self.peek_tok() {
                    let o = self.offset();
                    return Err(self.syntax(o, format!("`{name}` takes one argument")));
                }
                self.expect(Tok::RParen)?;
                return Ok(Expr::raw_unary(op, arg));
            }
        }
        if let Some(slot) = self.coord_slot(&name) {
            if let Some(Tok::LBracket) = self.peek_tok() {
                self.pos += 1;
                let io = self.offset();
                let index = match self.next().map(|t| t.tok) {
                    Some(Tok::Int(n)) => n,
                    _ => return Err(self.syntax(io, "expected integer index".into())),
                };
                self.expect(Tok::RBracket)?;
                return self.coordinate(slot, &name, index, offset);
            }
        }
        if let Some(def) = self.ctx.definitions.get(&name) {
            return Ok(def.clone());
        }
        if self.ctx.params.contains(&name) {
            return Ok(Expr::param(&name));
        }
        match name.as_str() {
            "normq" => return Ok(dot(Slot::Q, Slot::Q, self.ctx.dim).sqrt_raw()),
            "normv" if !self.ctx.canonical => return Ok(dot(Slot::V, Slot::V, self.ctx.dim).sqrt_raw()),
            "normp" if self.ctx.canonical => return Ok(dot(Slot::P, Slot::P, self.ctx.dim).sqrt_raw()),
            _ => {}
        }
        let (letters, digits) = name.split_at(name.find(|c: char| c.is_ascii_digit()).unwrap_or(name.len()));
        if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
            if let Some(slot) = self.coord_slot(letters) {
                let index: usize = digits.parse().map_err(|_| self.syntax(offset, "bad index".into()))?;
                return self.coordinate(slot, letters, index, offset);
            }
        }
        Err(ParseError { offset, kind: ParseErrorKind::UndeclaredSymbol(name) })
    }

    fn coord_slot(&self, letters: &str) -> Option<Slot> {
        match letters {
            "q" => Some(Slot::Q),
            "v" if !self.ctx.canonical => Some(Slot::V),
            "p" if self.ctx.canonical => Some(Slot::P),
            _ => None,
        }
    }

    fn coordinate(&self, slot: Slot, letters: &str, index: usize, offset: usize) -> Result<Expr, ParseError> {
        if index == 0 || index > self.ctx.dim {
            return Err(ParseError {
                offset,
                kind: ParseErrorKind::IndexOutOfRange { symbol: letters.to_string(), index, dim: self.ctx.dim },
            });
        }
        Ok(Expr::coord(Coord { slot, index: index - 1 }))
    }

    fn dot_call(&mut self) -> Result<Expr, ParseError> {
        self.expect(Tok::LParen)?;
        let a = self.vector_name()?;
        self.expect(Tok::Comma)?;
        let b = self.vector_name()?;
        self.expect(Tok::RParen)?;
        Ok(dot_raw(a, b, self.ctx.dim))
    }

    fn vector_name(&mut self) -> Result<Slot, ParseError> {
        let offset = self.offset();
        match self.next().map(|t| t.tok) {
            Some(Tok::Ident(n)) => match self.coord_slot(&n) {
                Some(slot) => Ok(slot),
                None => Err(self.syntax(offset, format!("`dot` expects coordinate vectors, found `{n}`"))),
            },
            _ => Err(self.syntax(offset, "`dot` expects coordinate vectors".into())),
        }
    }
}

fn dot_raw(x: Slot, y: Slot, dim: usize) -> Expr {
    (0..dim)
        .map(|a| {
            Expr::raw_binary(
                BinaryOp::Mul,
                Expr::coord(Coord { slot: x, index: a }),
                Expr::coord(Coord { slot: y, index: a }),
            )
        })
        .reduce(|acc, t| Expr::raw_binary(BinaryOp::Add, acc, t))
        .unwrap_or_else(Expr::zero)
}

impl Expr {
    fn sqrt_raw(self) -> Expr {
        Expr::raw_unary(UnaryOp::Sqrt, self)
    }
}
