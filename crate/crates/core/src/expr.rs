//! Scalar arithmetic expressions used to define problem data.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := expr ('+' | '-') expr
//!          | expr ('*' | '/') expr
//!          | '-' expr
//!          | expr '^' expr          (right associative)
//!          | number | ident | ident '(' args ')' | '(' expr ')'
//! ```
//!
//! Numbers are decimal with an optional exponent. Variables are resolved
//! against a [`Scope`] at parse time, so evaluation can run from a flat
//! slot array without any name lookups.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownIdentifier { offset, .. } => {
                *offset
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Abs,
    Min,
    Max,
    Exp,
    Sqrt,
    Sin,
    Cos,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "abs" => Builtin::Abs,
            "min" => Builtin::Min,
            "max" => Builtin::Max,
            "exp" => Builtin::Exp,
            "sqrt" => Builtin::Sqrt,
            "sin" => Builtin::Sin,
            "cos" => Builtin::Cos,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Abs => "abs",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Exp => "exp",
            Builtin::Sqrt => "sqrt",
            Builtin::Sin => "sin",
            Builtin::Cos => "cos",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Min | Builtin::Max => 2,
            _ => 1,
        }
    }
}

/// Parsed expression tree.
///
/// Variables carry both their name and the slot index assigned by the
/// [`Scope`] they were parsed against.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var { name: String, slot: usize },
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

/// Ordered set of variable names; the position of a name is its slot.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scope {
    names: Vec<String>,
}

impl Scope {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for n in names {
            let n = n.into();
            if !out.contains(&n) {
                out.push(n);
            }
        }
        Scope { names: out }
    }

    /// `t, x1..xm, <prefix>1..<prefix>k`, the layout used for problem data.
    pub fn problem(m: usize, prefix: &str, k: usize) -> Self {
        let mut names = vec!["t".to_string()];
        names.extend((1..=m).map(|i| format!("x{i}")));
        names.extend((1..=k).map(|i| format!("{prefix}{i}")));
        Scope { names }
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Variable assignment used by [`Expr::evaluate`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    values: HashMap<String, f64>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

/// Parses `source`, resolving identifiers against `scope`.
pub fn parse(source: &str, scope: &Scope) -> Result<Expr, ParseError> {
    let tokens = lex(source)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        scope,
        end: source.len(),
    };
    if parser.tokens.is_empty() {
        return Err(ParseError::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let expr = parser.expr(0)?;
    if let Some(tok) = parser.peek() {
        return Err(ParseError::Syntax {
            offset: tok.offset,
            message: format!("unexpected {}", tok.kind.describe()),
        });
    }
    Ok(expr)
}

impl Expr {
    /// Evaluates with variables looked up by name.
    pub fn evaluate(&self, env: &Binding) -> Result<f64, EvalError> {
        self.eval_with(&|name: &str, _slot: usize| {
            env.get(name)
                .ok_or_else(|| EvalError::Unbound(name.to_string()))
        })
    }

    /// Evaluates with variables read from `slots` by their parse-time index.
    pub fn eval_slots(&self, slots: &[f64]) -> Result<f64, EvalError> {
        self.eval_with(&|name: &str, slot: usize| {
            slots
                .get(slot)
                .copied()
                .ok_or_else(|| EvalError::Unbound(name.to_string()))
        })
    }

    fn eval_with<F>(&self, lookup: &F) -> Result<f64, EvalError>
    where
        F: Fn(&str, usize) -> Result<f64, EvalError>,
    {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var { name, slot } => lookup(name, *slot),
            Expr::Neg(a) => Ok(-a.eval_with(lookup)?),
            Expr::Binary(op, a, b) => {
                let a = a.eval_with(lookup)?;
                let b = b.eval_with(lookup)?;
                let r = match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::Domain(format!("division by zero ({a}/0)")));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                };
                finite(r, || format!("{a} {} {b}", op.symbol()))
            }
            Expr::Call(f, args) => {
                let a = args[0].eval_with(lookup)?;
                let r = match f {
                    Builtin::Abs => a.abs(),
                    Builtin::Min => a.min(args[1].eval_with(lookup)?),
                    Builtin::Max => a.max(args[1].eval_with(lookup)?),
                    Builtin::Exp => a.exp(),
                    Builtin::Sqrt => {
                        if a < 0.0 {
                            return Err(EvalError::Domain(format!("sqrt of negative ({a})")));
                        }
                        a.sqrt()
                    }
                    Builtin::Sin => a.sin(),
                    Builtin::Cos => a.cos(),
                };
                finite(r, || format!("{}({a})", f.name()))
            }
        }
    }

    /// Names of all variables in the tree.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var { name, .. } => {
                out.insert(name.clone());
            }
            Expr::Neg(a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// True when the tree contains no variables.
    pub fn is_constant(&self) -> bool {
        self.free_vars().is_empty()
    }
}

fn finite(r: f64, what: impl FnOnce() -> String) -> Result<f64, EvalError> {
    if r.is_finite() {
        Ok(r)
    } else {
        Err(EvalError::Domain(format!(
            "non-finite result of {}",
            what()
        )))
    }
}

/// Fully parenthesized rendering; parsing it back yields a tree with the
/// same value.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    write!(f, "(-{:e})", -c)
                } else {
                    write!(f, "{c:e}")
                }
            }
            Expr::Var { name, .. } => f.write_str(name),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Number(n) => format!("number {n}"),
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Op(c) => format!("operator `{c}`"),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
            TokenKind::Comma => "`,`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                out.push(Token {
                    kind: TokenKind::Op(c as char),
                    offset: start,
                });
                i += 1;
            }
            b'(' => {
                out.push(Token {
                    kind: TokenKind::LParen,
                    offset: start,
                });
                i += 1;
            }
            b')' => {
                out.push(Token {
                    kind: TokenKind::RParen,
                    offset: start,
                });
                i += 1;
            }
            b',' => {
                out.push(Token {
                    kind: TokenKind::Comma,
                    offset: start,
                });
                i += 1;
            }
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
                    } else {
                        return Err(ParseError::Syntax {
                            offset: i,
                            message: "malformed exponent".into(),
                        });
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                })?;
                out.push(Token {
                    kind: TokenKind::Number(value),
                    offset: start,
                });
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token {
                    kind: TokenKind::Ident(src[start..i].to_string()),
                    offset: start,
                });
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        }
    }
    Ok(out)
}

// Binding powers: (left, right). Power is right associative.
const ADD_BP: (u8, u8) = (1, 2);
const MUL_BP: (u8, u8) = (3, 4);
const NEG_BP: u8 = 5;
const POW_BP: (u8, u8) = (8, 7);

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    scope: &'a Scope,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eof_error(&self) -> ParseError {
        ParseError::Syntax {
            offset: self.end,
            message: "unexpected end of input".into(),
        }
    }

    fn expect(&mut self, kind: TokenKind) -> Result<Token, ParseError> {
        match self.next() {
            Some(t) if t.kind == kind => Ok(t),
            Some(t) => Err(ParseError::Syntax {
                offset: t.offset,
                message: format!("expected {}, found {}", kind.describe(), t.kind.describe()),
            }),
            None => Err(self.eof_error()),
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.prefix()?;
        loop {
            let (op, (lbp, rbp)) = match self.peek().map(|t| &t.kind) {
                Some(TokenKind::Op('+')) => (BinOp::Add, ADD_BP),
                Some(TokenKind::Op('-')) => (BinOp::Sub, ADD_BP),
                Some(TokenKind::Op('*')) => (BinOp::Mul, MUL_BP),
                Some(TokenKind::Op('/')) => (BinOp::Div, MUL_BP),
                Some(TokenKind::Op('^')) => (BinOp::Pow, POW_BP),
                _ => break,
            };
            if lbp < min_bp {
                break;
            }
            self.next();
            let rhs = self.expr(rbp)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Expr, ParseError> {
        let tok = self.next().ok_or_else(|| self.eof_error())?;
        match tok.kind {
            TokenKind::Number(n) => Ok(Expr::Const(n)),
            TokenKind::Op('-') => Ok(Expr::Neg(Box::new(self.expr(NEG_BP)?))),
            TokenKind::LParen => {
                let inner = self.expr(0)?;
                self.expect(TokenKind::RParen)?;
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::LParen)) {
                    self.call(name, tok.offset)
                } else {
                    match self.scope.slot(&name) {
                        Some(slot) => Ok(Expr::Var { name, slot }),
                        None => Err(ParseError::UnknownIdentifier {
                            name,
                            offset: tok.offset,
                        }),
                    }
                }
            }
            other => Err(ParseError::Syntax {
                offset: tok.offset,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn call(&mut self, name: String, offset: usize) -> Result<Expr, ParseError> {
        let func =
            Builtin::from_name(&name).ok_or(ParseError::UnknownIdentifier { name, offset })?;
        self.expect(TokenKind::LParen)?;
        let mut args = vec![self.expr(0)?];
        while matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Comma)) {
            self.next();
            args.push(self.expr(0)?);
        }
        self.expect(TokenKind::RParen)?;
        if args.len() != func.arity() {
            return Err(ParseError::Syntax {
                offset,
                message: format!(
                    "{} takes {} argument(s), got {}",
                    func.name(),
                    func.arity(),
                    args.len()
                ),
            });
        }
        Ok(Expr::Call(func, args))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scope() -> Scope {
        Scope::new(["t", "x1", "xi1"])
    }

    fn eval(src: &str, env: &Binding) -> Result<f64, EvalError> {
        parse(src, &scope()).unwrap().evaluate(env)
    }

    #[test]
    fn basic_arithmetic() {
        let env = Binding::new().with("x1", 3.0);
        assert_eq!(eval("1 + 2*x1", &env).unwrap(), 7.0);
        assert_eq!(eval("x1^2 - 1", &env).unwrap(), 8.0);
        let env = Binding::new().with("x1", -2.0);
        assert_eq!(eval("abs(x1)", &env).unwrap(), 2.0);
        let env = Binding::new().with("x1", 5.0);
        assert_eq!(eval("min(x1, 2)", &env).unwrap(), 2.0);
    }

    #[test]
    fn precedence_and_associativity() {
        let env = Binding::new();
        assert_eq!(eval("2+3*4", &env).unwrap(), 14.0);
        assert_eq!(eval("(2+3)*4", &env).unwrap(), 20.0);
        assert_eq!(eval("-2^2", &env).unwrap(), -4.0);
        assert_eq!(eval("2^3^2", &env).unwrap(), 512.0);
        assert_eq!(eval("2^-1", &env).unwrap(), 0.5);
        assert_eq!(eval("8/4/2", &env).unwrap(), 1.0);
        assert_eq!(eval("1-2-3", &env).unwrap(), -4.0);
        assert_eq!(eval("-3*-2", &env).unwrap(), 6.0);
        assert_eq!(eval("1.5e1 + .5 + 2E-1", &env).unwrap(), 15.7);
    }

    #[test]
    fn unknown_identifier_is_named() {
        let err = parse("exp(t)*c", &Scope::new(["t", "x1"])).unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownIdentifier {
                name: "c".into(),
                offset: 7
            }
        );
        let err = parse("foo(x1)", &scope()).unwrap_err();
        assert!(matches!(err, ParseError::UnknownIdentifier { ref name, .. } if name == "foo"));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        assert_eq!(parse("1 + ", &scope()).unwrap_err().offset(), 4);
        assert_eq!(parse("1 + * 2", &scope()).unwrap_err().offset(), 4);
        assert_eq!(parse("(1 + 2", &scope()).unwrap_err().offset(), 6);
        assert_eq!(parse("1 2", &scope()).unwrap_err().offset(), 2);
        assert_eq!(parse("x1 $ 2", &scope()).unwrap_err().offset(), 3);
        assert_eq!(parse("1e+", &scope()).unwrap_err().offset(), 1);
        assert!(parse("", &scope()).is_err());
        assert!(parse("   ", &scope()).is_err());
        // no implicit multiplication
        assert!(parse("2x1", &scope()).is_err());
    }

    #[test]
    fn builtin_arity_is_checked() {
        assert!(parse("min(x1)", &scope()).is_err());
        assert!(parse("abs(x1, 2)", &scope()).is_err());
        assert!(parse("max(1, 2, 3)", &scope()).is_err());
    }

    #[test]
    fn domain_errors() {
        let env = Binding::new().with("x1", 0.0);
        assert!(matches!(eval("1/x1", &env), Err(EvalError::Domain(_))));
        let env = Binding::new().with("x1", -1.0);
        assert!(matches!(eval("sqrt(x1)", &env), Err(EvalError::Domain(_))));
        assert!(matches!(eval("x1^0.5", &env), Err(EvalError::Domain(_))));
        assert!(matches!(eval("exp(1000)", &env), Err(EvalError::Domain(_))));
    }

    #[test]
    fn unbound_variable() {
        let err = eval("x1 + t", &Binding::new().with("x1", 1.0)).unwrap_err();
        assert_eq!(err, EvalError::Unbound("t".into()));
    }

    #[test]
    fn free_vars_is_a_set() {
        let s = scope();
        assert!(parse("1+2", &s).unwrap().free_vars().is_empty());
        let v: Vec<_> = parse("abs(x1)+t", &s)
            .unwrap()
            .free_vars()
            .into_iter()
            .collect();
        assert_eq!(v, vec!["t".to_string(), "x1".to_string()]);
        let v: Vec<_> = parse("min(xi1, xi1)", &s)
            .unwrap()
            .free_vars()
            .into_iter()
            .collect();
        assert_eq!(v, vec!["xi1".to_string()]);
    }

    #[test]
    fn slots_follow_scope_order() {
        let s = Scope::problem(2, "tau", 1);
        assert_eq!(s.names(), &["t", "x1", "x2", "tau1"]);
        let e = parse("x2 - tau1 * t", &s).unwrap();
        assert_eq!(e.eval_slots(&[2.0, 0.0, 10.0, 3.0]).unwrap(), 4.0);
    }

    #[test]
    fn display_round_trips() {
        let s = scope();
        let e = parse("-(x1 - 2.5e-3)^2 / max(t, 1) + cos(xi1)", &s).unwrap();
        let back = parse(&e.to_string(), &s).unwrap();
        let env = Binding::new()
            .with("x1", 0.7)
            .with("t", 0.3)
            .with("xi1", -2.0);
        assert_eq!(
            e.evaluate(&env).unwrap().to_bits(),
            back.evaluate(&env).unwrap().to_bits()
        );
    }

    mod random_trees {
        use super::*;
        use proptest::prelude::*;

        fn tree() -> impl Strategy<Value = Expr> {
            let names = ["t", "x1", "xi1"];
            let leaf = prop_oneof![
                (-100.0f64..100.0).prop_map(Expr::Const),
                (0usize..3).prop_map(move |slot| Expr::Var {
                    name: names[slot].to_string(),
                    slot
                }),
            ];
            leaf.prop_recursive(5, 40, 2, |inner| {
                let ops = prop_oneof![
                    Just(BinOp::Add),
                    Just(BinOp::Sub),
                    Just(BinOp::Mul),
                    Just(BinOp::Div),
                    Just(BinOp::Pow),
                ];
                let unary = prop_oneof![
                    Just("abs"),
                    Just("exp"),
                    Just("sqrt"),
                    Just("sin"),
                    Just("cos")
                ];
                let binary_call = prop_oneof![Just("min"), Just("max")];
                prop_oneof![
                    inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                    (ops, inner.clone(), inner.clone()).prop_map(|(op, a, b)| Expr::Binary(
                        op,
                        Box::new(a),
                        Box::new(b)
                    )),
                    (unary, inner.clone())
                        .prop_map(|(f, a)| Expr::Call(Builtin::from_name(f).unwrap(), vec![a])),
                    (binary_call, inner.clone(), inner).prop_map(|(f, a, b)| Expr::Call(
                        Builtin::from_name(f).unwrap(),
                        vec![a, b]
                    )),
                ]
            })
        }

        proptest! {
            #[test]
            fn print_parse_evaluate(e in tree(), t in -2.0f64..2.0, x in -5.0f64..5.0, xi in -3.0f64..3.0) {
                let back = parse(&e.to_string(), &scope()).unwrap();
                let slots = [t, x, xi];
                match (e.eval_slots(&slots), back.eval_slots(&slots)) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
                }
            }
        }
    }
}
