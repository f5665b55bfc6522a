//! Expression language for T-periodic dynamics.
//!
//! Time only enters through the atoms `sinT = sin(2πt/T)` and
//! `cosT = cos(2πt/T)`, so every expression is T-periodic by construction.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary ('*' unary)*
//! unary := '-' unary | power
//! power := atom ('^' integer)?
//! atom  := number | symbol | func '(' expr ')' | '(' expr ')'
//! ```

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: expected one of [{}], found {found}", expected.join(", "))]
    SyntaxError { offset: usize, expected: Vec<String>, found: String },
    #[error("unknown symbol `{name}` at byte {offset}")]
    UnknownSymbol { name: String, offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    /// 1-based state index (`x1`, `z1`, …).
    State(usize),
    Control,
    SinT,
    CosT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ExprKind {
    Const(f64),
    Sym(Symbol),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Box<Expr>),
}

/// An expression node with the byte span it was parsed from.
#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: (usize, usize),
}

// Structural equality; spans are ignored.
impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        use ExprKind::*;
        match (&self.kind, &other.kind) {
            (Const(a), Const(b)) => a == b,
            (Sym(a), Sym(b)) => a == b,
            (Neg(a), Neg(b)) => a == b,
            (Add(a, b), Add(c, d)) | (Sub(a, b), Sub(c, d)) | (Mul(a, b), Mul(c, d)) => a == c && b == d,
            (Pow(a, n), Pow(b, m)) => n == m && a == b,
            (Call(f, a), Call(g, b)) => f == g && a == b,
            _ => false,
        }
    }
}

/// Evaluation point for an expression.
#[derive(Debug, Clone, Copy)]
pub struct EvalPoint<'a> {
    pub t: f64,
    pub period: f64,
    /// `state[i]` is the value of symbol `x{i+1}`; missing entries read as 0.
    pub state: &'a [f64],
    pub control: f64,
}

impl Expr {
    fn new(kind: ExprKind, span: (usize, usize)) -> Self {
        Expr { kind, span }
    }

    pub fn constant(c: f64) -> Self {
        Expr::new(ExprKind::Const(c), (0, 0))
    }

    pub fn eval(&self, p: &EvalPoint<'_>) -> f64 {
        match &self.kind {
            ExprKind::Const(c) => *c,
            ExprKind::Sym(Symbol::State(i)) => p.state.get(i - 1).copied().unwrap_or(0.0),
            ExprKind::Sym(Symbol::Control) => p.control,
            ExprKind::Sym(Symbol::SinT) => (2.0 * PI * phase(p.t, p.period)).sin(),
            ExprKind::Sym(Symbol::CosT) => (2.0 * PI * phase(p.t, p.period)).cos(),
            ExprKind::Neg(a) => -a.eval(p),
            ExprKind::Add(a, b) => a.eval(p) + b.eval(p),
            ExprKind::Sub(a, b) => a.eval(p) - b.eval(p),
            ExprKind::Mul(a, b) => a.eval(p) * b.eval(p),
            ExprKind::Pow(a, n) => a.eval(p).powi(*n as i32),
            ExprKind::Call(f, a) => {
                let x = a.eval(p);
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tanh => x.tanh(),
                }
            }
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match &self.kind {
            ExprKind::Const(_) | ExprKind::Sym(_) => {}
            ExprKind::Neg(a) | ExprKind::Pow(a, _) | ExprKind::Call(_, a) => a.visit(f),
            ExprKind::Add(a, b) | ExprKind::Sub(a, b) | ExprKind::Mul(a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    /// Largest state index referenced (0 if none).
    pub fn max_state_index(&self) -> usize {
        let mut m = 0;
        self.visit(&mut |e| {
            if let ExprKind::Sym(Symbol::State(i)) = e.kind {
                m = m.max(i);
            }
        });
        m
    }

    pub fn uses_control(&self) -> bool {
        self.uses(|s| s == Symbol::Control)
    }

    pub fn uses_time(&self) -> bool {
        self.uses(|s| matches!(s, Symbol::SinT | Symbol::CosT))
    }

    fn uses(&self, pred: impl Fn(Symbol) -> bool) -> bool {
        let mut hit = false;
        self.visit(&mut |e| {
            if let ExprKind::Sym(s) = e.kind {
                hit |= pred(s);
            }
        });
        hit
    }

    fn precedence(&self) -> u8 {
        match self.kind {
            ExprKind::Add(..) | ExprKind::Sub(..) => 1,
            ExprKind::Mul(..) => 2,
            ExprKind::Neg(..) => 3,
            ExprKind::Pow(..) => 4,
            ExprKind::Const(c) if c < 0.0 => 3,
            _ => 5,
        }
    }
}

fn phase(t: f64, period: f64) -> f64 {
    (t / period).rem_euclid(1.0)
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Canonical printer: `parse(e.to_string())` equals `e`.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Const(c) => write!(f, "{c:?}"),
            ExprKind::Sym(Symbol::State(i)) => write!(f, "x{i}"),
            ExprKind::Sym(Symbol::Control) => write!(f, "u"),
            ExprKind::Sym(Symbol::SinT) => write!(f, "sinT"),
            ExprKind::Sym(Symbol::CosT) => write!(f, "cosT"),
            ExprKind::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            ExprKind::Add(a, b) => {
                write_child(f, a, 1)?;
                write!(f, " + ")?;
                write_child(f, b, 2)
            }
            ExprKind::Sub(a, b) => {
                write_child(f, a, 1)?;
                write!(f, " - ")?;
                write_child(f, b, 2)
            }
            ExprKind::Mul(a, b) => {
                write_child(f, a, 2)?;
                write!(f, "*")?;
                write_child(f, b, 3)
            }
            ExprKind::Pow(a, n) => {
                write_child(f, a, 5)?;
                write!(f, "^{n}")
            }
            ExprKind::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(n) => format!("number {n}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let value = text.parse::<f64>().map_err(|_| ParseError::SyntaxError {
                    offset: start,
                    expected: vec!["number".into()],
                    found: format!("`{text}`"),
                })?;
                out.push((Tok::Num(value), start, i));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start, i));
                continue;
            }
            _ => {
                let ch = src[start..].chars().next().unwrap();
                return Err(ParseError::SyntaxError {
                    offset: start,
                    expected: vec!["expression".into()],
                    found: format!("`{ch}`"),
                });
            }
        };
        i += 1;
        out.push((tok, start, i));
    }
    out.push((Tok::Eof, src.len(), src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        ParseError::SyntaxError {
            offset: self.offset(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.peek().describe(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => ExprKind::Add as fn(Box<Expr>, Box<Expr>) -> ExprKind,
                Tok::Minus => ExprKind::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            let span = (lhs.span.0, rhs.span.1);
            lhs = Expr::new(op(Box::new(lhs), Box::new(rhs)), span);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while *self.peek() == Tok::Star {
            self.bump();
            let rhs = self.unary()?;
            let span = (lhs.span.0, rhs.span.1);
            lhs = Expr::new(ExprKind::Mul(Box::new(lhs), Box::new(rhs)), span);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            let (_, start, _) = self.bump();
            let inner = self.unary()?;
            let span = (start, inner.span.1);
            return Ok(Expr::new(ExprKind::Neg(Box::new(inner)), span));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if *self.peek() != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        match self.peek().clone() {
            Tok::Num(n) if n >= 0.0 && n.fract() == 0.0 && n <= u32::MAX as f64 => {
                let (_, _, end) = self.bump();
                let span = (base.span.0, end);
                Ok(Expr::new(ExprKind::Pow(Box::new(base), n as u32), span))
            }
            _ => Err(self.error(&["non-negative integer exponent"])),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(n) => {
                let (_, s, e) = self.bump();
                Ok(Expr::new(ExprKind::Const(n), (s, e)))
            }
            Tok::LParen => {
                let (_, s, _) = self.bump();
                let inner = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return Err(self.error(&["`)`", "`+`", "`-`", "`*`"]));
                }
                let (_, _, e) = self.bump();
                Ok(Expr { kind: inner.kind, span: (s, e) })
            }
            Tok::Ident(name) => {
                let (_, s, e) = self.bump();
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "tanh" => Some(Func::Tanh),
                    _ => None,
                };
                if let Some(func) = func {
                    if *self.peek() != Tok::LParen {
                        return Err(self.error(&["`(`"]));
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if *self.peek() != Tok::RParen {
                        return Err(self.error(&["`)`"]));
                    }
                    let (_, _, end) = self.bump();
                    return Ok(Expr::new(ExprKind::Call(func, Box::new(arg)), (s, end)));
                }
                let sym = resolve_symbol(&name).ok_or(ParseError::UnknownSymbol { name, offset: s })?;
                Ok(Expr::new(ExprKind::Sym(sym), (s, e)))
            }
            _ => Err(self.error(&["number", "symbol", "`(`", "`-`", "function"])),
        }
    }
}

fn resolve_symbol(name: &str) -> Option<Symbol> {
    match name {
        "u" | "v" => Some(Symbol::Control),
        "sinT" => Some(Symbol::SinT),
        "cosT" => Some(Symbol::CosT),
        _ => {
            let rest = name.strip_prefix('x').or_else(|| name.strip_prefix('z'))?;
            if rest.is_empty() || rest.starts_with('0') || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            rest.parse().ok().map(Symbol::State)
        }
    }
}

/// Parses dynamics text into an expression tree.
pub fn parse_dynamics(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let e = p.expr()?;
    if *p.peek() != Tok::Eof {
        return Err(p.error(&["`+`", "`-`", "`*`", "end of input"]));
    }
    Ok(e)
}
