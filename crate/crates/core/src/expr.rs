//! Parser and jet evaluator for the scalar-expression mini-language.
//!
//! Grammar (documented in the README as well):
//!
//! ```text
//! expr    := term   (('+' | '-') term)*
//! term    := unary  (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom   ('^' unary)?          // right-associative, binds tighter
//!                                          // than unary minus: -x^2 = -(x^2)
//! atom    := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Identifiers are `[a-zA-Z][a-zA-Z0-9_]*`; numbers are decimal with an
//! optional fractional part and exponent. The callable identifiers are
//! `sqrt`, `exp`, `log`, `sin`, `cos`; every other identifier must name a
//! declared variable.

use crate::jet::{Jet, JetError};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected character '{ch}' at byte {pos}")]
    BadChar { ch: char, pos: usize },
    #[error("malformed number at bytes {span:?}")]
    BadNumber { span: (usize, usize) },
    #[error("unexpected token at bytes {span:?}: expected {expected}")]
    Unexpected { span: (usize, usize), expected: &'static str },
    #[error("unexpected end of input at byte {pos}: expected {expected}")]
    Eof { pos: usize, expected: &'static str },
    #[error("unknown identifier '{name}' at bytes {span:?}")]
    UnknownIdent { name: String, span: (usize, usize) },
    #[error("unknown function '{name}' at bytes {span:?}")]
    UnknownFunc { name: String, span: (usize, usize) },
    #[error("unbound variable '{name}' during evaluation")]
    Unbound { name: String },
    #[error("jet evaluation failed: {0}")]
    Jet(#[from] JetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Number,
    Ident,
    Op(char),
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sqrt,
    Exp,
    Log,
    Sin,
    Cos,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Const(f64),
    Var(String),
    Neg(Box<ExprAst>),
    Add(Box<ExprAst>, Box<ExprAst>),
    Sub(Box<ExprAst>, Box<ExprAst>),
    Mul(Box<ExprAst>, Box<ExprAst>),
    Div(Box<ExprAst>, Box<ExprAst>),
    Pow(Box<ExprAst>, Box<ExprAst>),
    Call(Func, Box<ExprAst>),
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                toks.push(Token {
                    kind: TokenKind::Op(b as char),
                    text: (b as char).to_string(),
                    span: (i, i + 1),
                });
                i += 1;
            }
            b'(' => {
                toks.push(Token { kind: TokenKind::LParen, text: "(".into(), span: (i, i + 1) });
                i += 1;
            }
            b')' => {
                toks.push(Token { kind: TokenKind::RParen, text: ")".into(), span: (i, i + 1) });
                i += 1;
            }
            b',' => {
                toks.push(Token { kind: TokenKind::Comma, text: ",".into(), span: (i, i + 1) });
                i += 1;
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
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
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                if text.parse::<f64>().is_err() {
                    return Err(ExprError::BadNumber { span: (start, i) });
                }
                toks.push(Token {
                    kind: TokenKind::Number,
                    text: text.to_string(),
                    span: (start, i),
                });
            }
            b'a'..=b'z' | b'A'..=b'Z' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push(Token {
                    kind: TokenKind::Ident,
                    text: src[start..i].to_string(),
                    span: (start, i),
                });
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(ExprError::BadChar { ch, pos: i });
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    toks: &'a [Token],
    pos: usize,
    end: usize,
    vars: &'a [String],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<&Token> {
        let t = self.toks.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<ExprAst, ExprError> {
        let mut lhs = self.term()?;
        while let Some(t) = self.peek() {
            match t.kind {
                TokenKind::Op('+') => {
                    self.bump();
                    lhs = ExprAst::Add(Box::new(lhs), Box::new(self.term()?));
                }
                TokenKind::Op('-') => {
                    self.bump();
                    lhs = ExprAst::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ExprAst, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(t) = self.peek() {
            match t.kind {
                TokenKind::Op('*') => {
                    self.bump();
                    lhs = ExprAst::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                TokenKind::Op('/') => {
                    self.bump();
                    lhs = ExprAst::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<ExprAst, ExprError> {
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Op('-') {
                self.bump();
                return Ok(ExprAst::Neg(Box::new(self.unary()?)));
            }
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprAst, ExprError> {
        let base = self.atom()?;
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Op('^') {
                self.bump();
                // right-associative; allow a signed exponent
                let exp = self.unary()?;
                return Ok(ExprAst::Pow(Box::new(base), Box::new(exp)));
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprAst, ExprError> {
        let t = match self.bump() {
            Some(t) => t.clone(),
            None => return Err(ExprError::Eof { pos: self.end, expected: "an operand" }),
        };
        match t.kind {
            TokenKind::Number => Ok(ExprAst::Const(t.text.parse().unwrap())),
            TokenKind::LParen => {
                let inner = self.expr()?;
                match self.bump() {
                    Some(tok) if tok.kind == TokenKind::RParen => Ok(inner),
                    Some(tok) => {
                        Err(ExprError::Unexpected { span: tok.span, expected: "')'" })
                    }
                    None => Err(ExprError::Eof { pos: self.end, expected: "')'" }),
                }
            }
            TokenKind::Ident => {
                if let Some(next) = self.peek() {
                    if next.kind == TokenKind::LParen {
                        let func = match t.text.as_str() {
                            "sqrt" => Func::Sqrt,
                            "exp" => Func::Exp,
                            "log" => Func::Log,
                            "sin" => Func::Sin,
                            "cos" => Func::Cos,
                            _ => {
                                return Err(ExprError::UnknownFunc {
                                    name: t.text.clone(),
                                    span: t.span,
                                })
                            }
                        };
                        self.bump(); // '('
                        let arg = self.expr()?;
                        match self.bump() {
                            Some(tok) if tok.kind == TokenKind::RParen => {
                                return Ok(ExprAst::Call(func, Box::new(arg)))
                            }
                            Some(tok) => {
                                return Err(ExprError::Unexpected {
                                    span: tok.span,
                                    expected: "')'",
                                })
                            }
                            None => {
                                return Err(ExprError::Eof { pos: self.end, expected: "')'" })
                            }
                        }
                    }
                }
                if self.vars.iter().any(|v| v == &t.text) {
                    Ok(ExprAst::Var(t.text.clone()))
                } else {
                    Err(ExprError::UnknownIdent { name: t.text.clone(), span: t.span })
                }
            }
            _ => Err(ExprError::Unexpected { span: t.span, expected: "an operand" }),
        }
    }
}

/// Parse `source` against a list of declared variable names.
pub fn parse(source: &str, declared_vars: &[String]) -> Result<ExprAst, ExprError> {
    let toks = lex(source)?;
    let mut p = Parser { toks: &toks, pos: 0, end: source.len(), vars: declared_vars };
    let ast = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(ExprError::Unexpected { span: t.span, expected: "end of input" });
    }
    Ok(ast)
}

/// Variables appearing in the AST.
pub fn free_vars(ast: &ExprAst) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    fn walk(a: &ExprAst, out: &mut BTreeSet<String>) {
        match a {
            ExprAst::Const(_) => {}
            ExprAst::Var(v) => {
                out.insert(v.clone());
            }
            ExprAst::Neg(x) | ExprAst::Call(_, x) => walk(x, out),
            ExprAst::Add(a, b)
            | ExprAst::Sub(a, b)
            | ExprAst::Mul(a, b)
            | ExprAst::Div(a, b)
            | ExprAst::Pow(a, b) => {
                walk(a, out);
                walk(b, out);
            }
        }
    }
    walk(ast, &mut out);
    out
}

/// Evaluate the AST over jets. Every free variable must be bound in `env`
/// and all environment jets must share one context.
pub fn eval_jet(ast: &ExprAst, env: &HashMap<String, Jet>) -> Result<Jet, ExprError> {
    match ast {
        ExprAst::Const(c) => {
            let any = env
                .values()
                .next()
                .expect("eval_jet needs at least one bound variable for the context");
            Ok(Jet::constant(any.ctx(), *c))
        }
        ExprAst::Var(v) => env
            .get(v)
            .cloned()
            .ok_or_else(|| ExprError::Unbound { name: v.clone() }),
        ExprAst::Neg(x) => Ok(eval_jet(x, env)?.neg()),
        ExprAst::Add(a, b) => Ok(eval_jet(a, env)?.add(&eval_jet(b, env)?)),
        ExprAst::Sub(a, b) => Ok(eval_jet(a, env)?.sub(&eval_jet(b, env)?)),
        ExprAst::Mul(a, b) => Ok(eval_jet(a, env)?.mul(&eval_jet(b, env)?)),
        ExprAst::Div(a, b) => Ok(eval_jet(a, env)?.div(&eval_jet(b, env)?)?),
        ExprAst::Pow(a, b) => {
            let base = eval_jet(a, env)?;
            // integer constant exponents use repeated squaring; anything else
            // routes through exp/log and needs a positive base
            if let ExprAst::Const(p) = **b {
                if p.fract() == 0.0 && p.abs() < 1e15 {
                    return Ok(base.powi(p as i64)?);
                }
                return Ok(base.powf(p)?);
            }
            if let ExprAst::Neg(inner) = &**b {
                if let ExprAst::Const(p) = **inner {
                    if p.fract() == 0.0 && p.abs() < 1e15 {
                        return Ok(base.powi(-(p as i64))?);
                    }
                    return Ok(base.powf(-p)?);
                }
            }
            let expo = eval_jet(b, env)?;
            Ok(base.ln()?.mul(&expo).exp())
        }
        ExprAst::Call(f, x) => {
            let a = eval_jet(x, env)?;
            Ok(match f {
                Func::Sqrt => a.sqrt()?,
                Func::Exp => a.exp(),
                Func::Log => a.ln()?,
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
            })
        }
    }
}

impl fmt::Display for ExprAst {
    /// Fully parenthesized pretty-printer; reparsing the output yields an
    /// identical AST.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprAst::Const(c) => write!(f, "{c}"),
            ExprAst::Var(v) => write!(f, "{v}"),
            ExprAst::Neg(x) => write!(f, "(-{x})"),
            ExprAst::Add(a, b) => write!(f, "({a} + {b})"),
            ExprAst::Sub(a, b) => write!(f, "({a} - {b})"),
            ExprAst::Mul(a, b) => write!(f, "({a} * {b})"),
            ExprAst::Div(a, b) => write!(f, "({a} / {b})"),
            ExprAst::Pow(a, b) => write!(f, "({a} ^ {b})"),
            ExprAst::Call(func, x) => write!(f, "{}({x})", func.name()),
        }
    }
}

/// A parsed scalar field: expression plus the coordinate names it may use.
#[derive(Debug, Clone)]
pub struct ExprField {
    pub ast: ExprAst,
    pub vars: Vec<String>,
}

impl ExprField {
    pub fn parse(source: &str, vars: &[String]) -> Result<ExprField, ExprError> {
        Ok(ExprField { ast: parse(source, vars)?, vars: vars.to_vec() })
    }

    pub fn constant(c: f64, vars: &[String]) -> ExprField {
        ExprField { ast: ExprAst::Const(c), vars: vars.to_vec() }
    }

    /// Jets of the field at a point, one lifted variable per coordinate.
    pub fn eval(&self, x: &[f64], ctx: crate::jet::JetCtx) -> Result<Jet, ExprError> {
        assert_eq!(x.len(), self.vars.len());
        assert_eq!(x.len(), ctx.dim);
        let mut env = HashMap::new();
        for (i, name) in self.vars.iter().enumerate() {
            env.insert(name.clone(), Jet::lift_var(ctx, i, x[i])?);
        }
        eval_jet(&self.ast, &env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::JetCtx;

    fn vars(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn grammar_shapes() {
        let vs = vars(&["x1", "x2"]);
        let ast = parse("x1^2 + 3*x2", &vs).unwrap();
        assert_eq!(
            ast,
            ExprAst::Add(
                Box::new(ExprAst::Pow(
                    Box::new(ExprAst::Var("x1".into())),
                    Box::new(ExprAst::Const(2.0))
                )),
                Box::new(ExprAst::Mul(
                    Box::new(ExprAst::Const(3.0)),
                    Box::new(ExprAst::Var("x2".into()))
                ))
            )
        );

        // unary minus binds looser than ^
        let neg = parse("-x1^2", &vs).unwrap();
        assert_eq!(
            neg,
            ExprAst::Neg(Box::new(ExprAst::Pow(
                Box::new(ExprAst::Var("x1".into())),
                Box::new(ExprAst::Const(2.0))
            )))
        );

        match parse("x1 +", &vs) {
            Err(ExprError::Eof { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("expected EOF error, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_pretty_print() {
        let vs = vars(&["x", "y"]);
        for src in [
            "x^2*y - 3/(x + 1)",
            "-x^2",
            "sin(x)*cos(y) + exp(-x*y)",
            "x^-2 + 2^x",
            "sqrt(x + 4) / (y - 7.5e-1)",
        ] {
            let ast = parse(src, &vs).unwrap();
            let printed = ast.to_string();
            let re = parse(&printed, &vs).unwrap();
            assert_eq!(ast, re, "{src} -> {printed}");
        }
    }

    #[test]
    fn eval_examples() {
        let vs = vars(&["x"]);
        let ast = parse("sin(x)", &vs).unwrap();
        let ctx = JetCtx::new(1, 3);
        let mut env = HashMap::new();
        env.insert("x".to_string(), Jet::lift_var(ctx, 0, 0.0).unwrap());
        let j = eval_jet(&ast, &env).unwrap();
        assert_eq!(j.coeffs()[0], 0.0);
        assert_eq!(j.coeffs()[1], 1.0);
        assert_eq!(j.coeffs()[2], 0.0);
        assert!((j.coeffs()[3] + 1.0 / 6.0).abs() < 1e-15);

        let vs2 = vars(&["x1", "x2"]);
        let f = ExprField::parse("x1*x2 + 1", &vs2).unwrap();
        let j = f.eval(&[2.0, 3.0], JetCtx::new(2, 2)).unwrap();
        assert_eq!(j.value(), 7.0);
        assert_eq!(j.deriv(0).value(), 3.0);
        assert_eq!(j.deriv(1).value(), 2.0);

        let lg = parse("log(x)", &vars(&["x"])).unwrap();
        let mut env2 = HashMap::new();
        env2.insert("x".to_string(), Jet::lift_var(JetCtx::new(1, 2), 0, -1.0).unwrap());
        assert!(matches!(eval_jet(&lg, &env2), Err(ExprError::Jet(_))));
    }

    #[test]
    fn free_variables() {
        let vs = vars(&["x1", "x2"]);
        let names = |src: &str| {
            free_vars(&parse(src, &vs).unwrap())
                .into_iter()
                .collect::<Vec<_>>()
        };
        assert_eq!(names("x1^2 + 3*x2"), ["x1", "x2"]);
        assert!(names("2 + 2").is_empty());
        assert_eq!(names("sin(x1)*x1"), ["x1"]);
    }

    #[test]
    fn eval_matches_direct_jet_arithmetic() {
        let ctx = JetCtx::new(2, 4);
        let x = Jet::lift_var(ctx, 0, 1.3).unwrap();
        let y = Jet::lift_var(ctx, 1, -0.7).unwrap();
        let direct = x.powi(3).unwrap().mul(&y).sub(&y.powi(2).unwrap()).add(&x);
        let f = ExprField::parse("x^3*y - y^2 + x", &vars(&["x", "y"])).unwrap();
        let via = f.eval(&[1.3, -0.7], ctx).unwrap();
        for (a, b) in direct.coeffs().iter().zip(via.coeffs()) {
            assert!((a - b).abs() <= 1e-13 * (1.0 + a.abs()));
        }
    }
}
