//! Perturbation functionals written as polynomial expressions in history taps.
//!
//! A functional such as `-(eta(0)^3) + eta(-1)` depends on a history segment
//! `η` only through finitely many tap values `η(θ₁), …, η(θ_m)`. Parsing
//! collects the taps, builds the expression tree, and differentiates it
//! symbolically with respect to every tap, so that Fréchet derivatives
//!
//! ```text
//! DF(η)[ζ] = Σᵢ ∂F/∂xᵢ(η(θ₁), …, η(θ_m)) · ζ(θᵢ)
//! ```
//!
//! are exact. The grammar is
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary ('*' unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' integer)?
//! primary := number | 'eta' '(' ['-'] number ')' | '(' expr ')'
//! ```

use std::fmt;

use thiserror::Error;

use crate::segment::Segment;

/// Tap delays closer than this are treated as the same tap.
pub const TAP_TOLERANCE: f64 = 1e-12;

const MAX_STACK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("max delay must be positive and finite, got {0}")]
    InvalidMaxDelay(f64),
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unsupported token `{token}` at position {pos}")]
    UnsupportedToken { pos: usize, token: String },
    #[error("tap delay {delay} at position {pos} is outside [-{max_delay}, 0]")]
    TapOutOfRange {
        pos: usize,
        delay: f64,
        max_delay: f64,
    },
    #[error("expression nests deeper than {MAX_STACK} operands")]
    TooDeep,
}

/// Expression tree. `Tap(i)` refers to the i-th entry of the owning
/// functional's sorted tap list.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Tap(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
}

impl Expr {
    fn is_const(&self, v: f64) -> bool {
        matches!(self, Expr::Const(c) if *c == v)
    }

    fn neg(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    fn add(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
            (a, b) if a.is_const(0.0) => b,
            (a, b) if b.is_const(0.0) => a,
            (a, b) => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    fn mul(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
            (a, b) if a.is_const(0.0) || b.is_const(0.0) => Expr::Const(0.0),
            (a, b) if a.is_const(1.0) => b,
            (a, b) if b.is_const(1.0) => a,
            (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    fn pow(base: Expr, n: u32) -> Expr {
        match (base, n) {
            (_, 0) => Expr::Const(1.0),
            (b, 1) => b,
            (Expr::Const(c), n) => Expr::Const(c.powi(n as i32)),
            (b, n) => Expr::Pow(Box::new(b), n),
        }
    }

    /// Symbolic partial derivative with respect to tap `k`.
    pub fn derivative(&self, k: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Tap(j) => Expr::Const(if *j == k { 1.0 } else { 0.0 }),
            Expr::Neg(e) => Expr::neg(e.derivative(k)),
            Expr::Add(a, b) => Expr::add(a.derivative(k), b.derivative(k)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.derivative(k), (**b).clone()),
                Expr::mul((**a).clone(), b.derivative(k)),
            ),
            Expr::Pow(b, n) => Expr::mul(
                Expr::mul(Expr::Const(*n as f64), Expr::pow((**b).clone(), n - 1)),
                b.derivative(k),
            ),
        }
    }

    /// Polynomial degree in the tap values (`0` for constants).
    pub fn degree(&self) -> u32 {
        match self {
            Expr::Const(_) => 0,
            Expr::Tap(_) => 1,
            Expr::Neg(e) => e.degree(),
            Expr::Add(a, b) => a.degree().max(b.degree()),
            Expr::Mul(a, b) => a.degree() + b.degree(),
            Expr::Pow(b, n) => b.degree() * n,
        }
    }

    pub fn eval(&self, taps: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Tap(i) => taps[*i],
            Expr::Neg(e) => -e.eval(taps),
            Expr::Add(a, b) => a.eval(taps) + b.eval(taps),
            Expr::Mul(a, b) => a.eval(taps) * b.eval(taps),
            Expr::Pow(b, n) => b.eval(taps).powi(*n as i32),
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, taps: &[f64]) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 => write!(f, "-({:?})", -c),
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Tap(i) => write!(f, "eta({:?})", taps[*i]),
            Expr::Neg(e) => {
                write!(f, "-(")?;
                e.write(f, taps)?;
                write!(f, ")")
            }
            Expr::Add(a, b) => {
                write!(f, "(")?;
                a.write(f, taps)?;
                write!(f, " + ")?;
                b.write(f, taps)?;
                write!(f, ")")
            }
            Expr::Mul(a, b) => {
                write!(f, "(")?;
                a.write(f, taps)?;
                write!(f, " * ")?;
                b.write(f, taps)?;
                write!(f, ")")
            }
            Expr::Pow(b, n) => {
                write!(f, "(")?;
                b.write(f, taps)?;
                write!(f, ")^{n}")
            }
        }
    }
}

/// Flattened postfix form of an [`Expr`], evaluated with a fixed-size stack.
#[derive(Debug, Clone, PartialEq)]
enum Op {
    Const(f64),
    Tap(usize),
    Neg,
    Add,
    Mul,
    Pow(u32),
}

#[derive(Debug, Clone, PartialEq)]
struct Program {
    ops: Vec<Op>,
}

impl Program {
    fn compile(e: &Expr) -> Result<Self, ExprError> {
        fn emit(e: &Expr, ops: &mut Vec<Op>) {
            match e {
                Expr::Const(c) => ops.push(Op::Const(*c)),
                Expr::Tap(i) => ops.push(Op::Tap(*i)),
                Expr::Neg(a) => {
                    emit(a, ops);
                    ops.push(Op::Neg);
                }
                Expr::Add(a, b) => {
                    emit(a, ops);
                    emit(b, ops);
                    ops.push(Op::Add);
                }
                Expr::Mul(a, b) => {
                    emit(a, ops);
                    emit(b, ops);
                    ops.push(Op::Mul);
                }
                Expr::Pow(a, n) => {
                    emit(a, ops);
                    ops.push(Op::Pow(*n));
                }
            }
        }
        let mut ops = Vec::new();
        emit(e, &mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Tap(_) => depth += 1,
                Op::Add | Op::Mul => depth -= 1,
                Op::Neg | Op::Pow(_) => {}
            }
            max_depth = max_depth.max(depth);
        }
        if max_depth > MAX_STACK {
            return Err(ExprError::TooDeep);
        }
        Ok(Self { ops })
    }

    #[inline]
    fn eval(&self, taps: &[f64]) -> f64 {
        let mut stack = [0.0f64; MAX_STACK];
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Op::Tap(i) => {
                    stack[sp] = taps[i];
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Add => {
                    sp -= 1;
                    stack[sp - 1] += stack[sp];
                }
                Op::Mul => {
                    sp -= 1;
                    stack[sp - 1] *= stack[sp];
                }
                Op::Pow(n) => stack[sp - 1] = stack[sp - 1].powi(n as i32),
            }
        }
        stack[0]
    }
}

/// A parsed tap functional together with its exact tap partials.
///
/// Immutable after construction; share freely between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFunctional {
    source: String,
    max_delay: f64,
    ast: Expr,
    taps: Vec<f64>,
    partials: Vec<Expr>,
    program: Program,
    partial_programs: Vec<Program>,
}

impl ParsedFunctional {
    /// Parses `text` and checks every tap delay lies in `[-max_delay, 0]`.
    pub fn parse(text: &str, max_delay: f64) -> Result<Self, ExprError> {
        if !(max_delay.is_finite() && max_delay > 0.0) {
            return Err(ExprError::InvalidMaxDelay(max_delay));
        }
        if text.trim().is_empty() {
            return Err(ExprError::Empty);
        }
        let tokens = lex(text)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            raw_taps: Vec::new(),
            max_delay,
            text_len: text.len(),
        };
        let raw = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ExprError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected {}", tok.kind.describe()),
            });
        }

        // Sort and deduplicate the taps, then renumber the tree.
        let mut sorted: Vec<f64> = parser.raw_taps.clone();
        sorted.sort_by(f64::total_cmp);
        let mut taps: Vec<f64> = Vec::new();
        for d in sorted {
            if taps
                .last()
                .is_none_or(|last| (d - last).abs() > TAP_TOLERANCE)
            {
                taps.push(d);
            }
        }
        let index_of = |d: f64| {
            taps.iter()
                .position(|t| (t - d).abs() <= TAP_TOLERANCE)
                .expect("tap collected during parsing")
        };
        let remap: Vec<usize> = parser.raw_taps.iter().map(|&d| index_of(d)).collect();
        let ast = renumber(raw, &remap);
        Self::from_parts(text.trim().to_string(), max_delay, ast, taps)
    }

    fn from_parts(
        source: String,
        max_delay: f64,
        ast: Expr,
        taps: Vec<f64>,
    ) -> Result<Self, ExprError> {
        let partials: Vec<Expr> = (0..taps.len()).map(|k| ast.derivative(k)).collect();
        let program = Program::compile(&ast)?;
        let partial_programs = partials
            .iter()
            .map(Program::compile)
            .collect::<Result<Vec<_>, _>>()?;
        let f = Self {
            source,
            max_delay,
            ast,
            taps,
            partials,
            program,
            partial_programs,
        };
        if f.degree() > 1 {
            log::warn!(
                "functional `{}` has degree {}; globally bounded derivatives do not hold, \
                 results are only meaningful in a bounded region",
                f.source,
                f.degree()
            );
        }
        Ok(f)
    }

    /// The identically zero functional.
    pub fn zero(max_delay: f64) -> Self {
        Self::from_parts("0".into(), max_delay, Expr::Const(0.0), Vec::new())
            .expect("constant expression compiles")
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn max_delay(&self) -> f64 {
        self.max_delay
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    /// Distinct tap delays in ascending order.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn partials(&self) -> &[Expr] {
        &self.partials
    }

    pub fn degree(&self) -> u32 {
        self.ast.degree()
    }

    /// True when the expression folded to the constant zero.
    pub fn is_zero(&self) -> bool {
        self.ast.is_const(0.0)
    }

    /// Value given the tap values in [`Self::taps`] order.
    #[inline]
    pub fn eval_taps(&self, values: &[f64]) -> f64 {
        self.program.eval(values)
    }

    /// Writes `∂F/∂xₖ` at the given tap values into `out`.
    #[inline]
    pub fn gradient_taps(&self, values: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.partial_programs) {
            *o = p.eval(values);
        }
    }

    pub fn tap_values(&self, segment: &impl Segment) -> Vec<f64> {
        self.taps.iter().map(|&t| segment.at(t)).collect()
    }

    pub fn evaluate(&self, segment: &impl Segment) -> f64 {
        self.eval_taps(&self.tap_values(segment))
    }

    /// Fréchet derivative at `eta` in the direction `zeta`.
    pub fn directional_derivative(&self, eta: &impl Segment, zeta: &impl Segment) -> f64 {
        let values = self.tap_values(eta);
        let mut grad = vec![0.0; self.taps.len()];
        self.gradient_taps(&values, &mut grad);
        grad.iter()
            .zip(&self.taps)
            .map(|(g, &t)| g * zeta.at(t))
            .sum()
    }
}

impl fmt::Display for ParsedFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.ast.write(f, &self.taps)
    }
}

fn renumber(e: Expr, remap: &[usize]) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(c),
        Expr::Tap(i) => Expr::Tap(remap[i]),
        Expr::Neg(a) => Expr::neg(renumber(*a, remap)),
        Expr::Add(a, b) => Expr::add(renumber(*a, remap), renumber(*b, remap)),
        Expr::Mul(a, b) => Expr::mul(renumber(*a, remap), renumber(*b, remap)),
        Expr::Pow(a, n) => Expr::pow(renumber(*a, remap), n),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64, bool),
    Eta,
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Number(v, _) => format!("number {v}"),
            TokenKind::Eta => "`eta`".into(),
            TokenKind::Plus => "`+`".into(),
            TokenKind::Minus => "`-`".into(),
            TokenKind::Star => "`*`".into(),
            TokenKind::Caret => "`^`".into(),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let single = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Some(TokenKind::Plus),
            b'-' => Some(TokenKind::Minus),
            b'*' => Some(TokenKind::Star),
            b'^' => Some(TokenKind::Caret),
            b'(' => Some(TokenKind::LParen),
            b')' => Some(TokenKind::RParen),
            _ => None,
        };
        if let Some(kind) = single {
            tokens.push(Token { kind, pos: i });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == b'.' {
            let start = i;
            let mut integral = true;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                integral &= bytes[i] != b'.';
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    integral = false;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s = &text[start..i];
            let v: f64 = s.parse().map_err(|_| ExprError::Syntax {
                pos: start,
                msg: format!("malformed number `{s}`"),
            })?;
            tokens.push(Token {
                kind: TokenKind::Number(v, integral),
                pos: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &text[start..i];
            if word == "eta" {
                tokens.push(Token {
                    kind: TokenKind::Eta,
                    pos: start,
                });
                continue;
            }
            return Err(ExprError::UnsupportedToken {
                pos: start,
                token: word.to_string(),
            });
        }
        let ch = text[i..].chars().next().unwrap_or('?');
        return Err(ExprError::UnsupportedToken {
            pos: i,
            token: ch.to_string(),
        });
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    raw_taps: Vec<f64>,
    max_delay: f64,
    text_len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.text_len, |t| t.pos)
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.peek().is_some_and(|t| &t.kind == kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: TokenKind) -> Result<(), ExprError> {
        if self.eat(&kind) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected {}", kind.describe())))
        }
    }

    fn unexpected(&self, what: &str) -> ExprError {
        let found = self
            .peek()
            .map_or("end of input".to_string(), |t| t.kind.describe());
        ExprError::Syntax {
            pos: self.here(),
            msg: format!("{what}, found {found}"),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(&TokenKind::Plus) {
                lhs = Expr::add(lhs, self.term()?);
            } else if self.eat(&TokenKind::Minus) {
                lhs = Expr::add(lhs, Expr::neg(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while self.eat(&TokenKind::Star) {
            lhs = Expr::mul(lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(&TokenKind::Minus) {
            return Ok(Expr::neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat(&TokenKind::Caret) {
            let pos = self.here();
            match self.peek().map(|t| t.kind.clone()) {
                Some(TokenKind::Number(v, true)) if v <= u32::MAX as f64 => {
                    self.pos += 1;
                    return Ok(Expr::pow(base, v as u32));
                }
                Some(TokenKind::Number(..)) => {
                    return Err(ExprError::Syntax {
                        pos,
                        msg: "exponent must be a non-negative integer literal".into(),
                    })
                }
                _ => return Err(self.unexpected("expected integer exponent")),
            }
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.unexpected("expected operand"));
        };
        match tok.kind {
            TokenKind::Number(v, _) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            TokenKind::LParen => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(e)
            }
            TokenKind::Eta => {
                self.pos += 1;
                self.expect(TokenKind::LParen)?;
                let delay_pos = self.here();
                let negative = self.eat(&TokenKind::Minus);
                let magnitude = match self.peek().map(|t| t.kind.clone()) {
                    Some(TokenKind::Number(v, _)) => {
                        self.pos += 1;
                        v
                    }
                    _ => return Err(self.unexpected("expected tap delay literal")),
                };
                self.expect(TokenKind::RParen)?;
                let delay = if negative { -magnitude } else { magnitude };
                let delay = if delay == 0.0 { 0.0 } else { delay };
                if delay > 0.0 || delay < -self.max_delay - TAP_TOLERANCE {
                    return Err(ExprError::TapOutOfRange {
                        pos: delay_pos,
                        delay,
                        max_delay: self.max_delay,
                    });
                }
                let delay = delay.max(-self.max_delay);
                self.raw_taps.push(delay);
                Ok(Expr::Tap(self.raw_taps.len() - 1))
            }
            _ => Err(self.unexpected("expected operand")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> impl Fn(f64) -> f64 {
        move |_| v
    }

    #[test]
    fn parses_cubic_example_with_sorted_taps() {
        let f = ParsedFunctional::parse("-(eta(0)^3) + eta(-1)", 1.0).unwrap();
        assert_eq!(f.taps(), &[-1.0, 0.0]);
        assert_eq!(f.degree(), 3);
    }

    #[test]
    fn rejects_out_of_range_tap() {
        let err = ParsedFunctional::parse("eta(-2)", 1.0).unwrap_err();
        assert!(matches!(err, ExprError::TapOutOfRange { delay, .. } if delay == -2.0));
        assert!(matches!(
            ParsedFunctional::parse("eta(0.5)", 1.0),
            Err(ExprError::TapOutOfRange { .. })
        ));
    }

    #[test]
    fn product_of_two_taps() {
        let f = ParsedFunctional::parse("3*eta(0)*eta(-0.5)", 1.0).unwrap();
        assert_eq!(f.taps(), &[-0.5, 0.0]);
        let seg = |t: f64| if t == 0.0 { 2.0 } else { 5.0 };
        assert_eq!(f.evaluate(&seg), 30.0);
    }

    #[test]
    fn duplicate_taps_are_merged() {
        let f = ParsedFunctional::parse("eta(-0.5) * eta(-0.5) + eta(-0.5000000000000001)", 1.0)
            .unwrap();
        assert_eq!(f.taps().len(), 1);
    }

    #[test]
    fn syntax_errors_report_position() {
        match ParsedFunctional::parse("eta(0) + * 2", 1.0) {
            Err(ExprError::Syntax { pos, .. }) => assert_eq!(pos, 9),
            other => panic!("unexpected {other:?}"),
        }
        match ParsedFunctional::parse("sin(eta(0))", 1.0) {
            Err(ExprError::UnsupportedToken { pos, token }) => {
                assert_eq!(pos, 0);
                assert_eq!(token, "sin");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            ParsedFunctional::parse("eta(0) / 2", 1.0),
            Err(ExprError::UnsupportedToken { pos: 7, .. })
        ));
        assert!(matches!(
            ParsedFunctional::parse("eta(0)^2.5", 1.0),
            Err(ExprError::Syntax { .. })
        ));
        assert!(matches!(
            ParsedFunctional::parse("(eta(0)", 1.0),
            Err(ExprError::Syntax { pos: 7, .. })
        ));
        assert_eq!(ParsedFunctional::parse("  ", 1.0), Err(ExprError::Empty));
        assert!(matches!(
            ParsedFunctional::parse("eta(0)", 0.0),
            Err(ExprError::InvalidMaxDelay(_))
        ));
    }

    #[test]
    fn evaluation_examples() {
        let omega = std::f64::consts::FRAC_PI_2;
        let f = ParsedFunctional::parse("eta(-1)", 1.0).unwrap();
        assert!(f.evaluate(&|t: f64| (omega * t).cos()).abs() < 1e-15);
        let cube = ParsedFunctional::parse("eta(0)^3", 1.0).unwrap();
        assert_eq!(cube.evaluate(&constant(2.0)), 8.0);
        let g = ParsedFunctional::parse("-(eta(0)^3) + eta(-1)", 1.0).unwrap();
        assert_eq!(g.evaluate(&constant(1.0)), 0.0);
    }

    #[test]
    fn directional_derivative_examples() {
        let f = ParsedFunctional::parse("eta(-1)", 1.0).unwrap();
        assert_eq!(
            f.directional_derivative(&|t: f64| t * t, &constant(0.7)),
            0.7
        );

        let cube = ParsedFunctional::parse("eta(0)^3", 1.0).unwrap();
        assert_eq!(
            cube.directional_derivative(&constant(2.0), &constant(1.0)),
            12.0
        );

        // Product rule: d(ab)[u, v] = b u + a v.
        let prod = ParsedFunctional::parse("eta(0)*eta(-1)", 1.0).unwrap();
        let (a, b, u, v) = (1.3, -0.4, 0.25, 2.0);
        let eta = move |t: f64| if t == 0.0 { a } else { b };
        let zeta = move |t: f64| if t == 0.0 { u } else { v };
        let exact = b * u + a * v;
        assert!((prod.directional_derivative(&eta, &zeta) - exact).abs() < 1e-15);
        let d = 1e-5;
        let fd = (prod.evaluate(&|t: f64| eta(t) + d * zeta(t))
            - prod.evaluate(&|t: f64| eta(t) - d * zeta(t)))
            / (2.0 * d);
        assert!((fd - exact).abs() < 1e-9);
    }

    #[test]
    fn zero_and_constant_functionals() {
        let z = ParsedFunctional::parse("0", 1.0).unwrap();
        assert!(z.is_zero());
        assert!(z.taps().is_empty());
        assert!(ParsedFunctional::zero(1.0).is_zero());
        let c = ParsedFunctional::parse("2.5 - 1e-1", 1.0).unwrap();
        assert_eq!(c.evaluate(&constant(9.0)), 2.4);
        assert!(ParsedFunctional::parse("eta(0) - eta(0)", 1.0).is_ok());
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        let f = ParsedFunctional::parse("-eta(0)^2", 1.0).unwrap();
        assert_eq!(f.evaluate(&constant(3.0)), -9.0);
        let g = ParsedFunctional::parse("2 - -eta(-0.25)", 1.0).unwrap();
        assert_eq!(g.evaluate(&constant(3.0)), 5.0);
    }
}
