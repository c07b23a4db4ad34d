//! Arithmetic expression parsing and dual-number evaluation.
//!
//! Grammar, precedence low to high (whitespace insignificant):
//!
//! ```text
//! additive        :=  multiplicative (('+' | '-') multiplicative)*
//! multiplicative  :=  unary (('*' | '/') unary)*
//! unary           :=  '-' unary | power
//! power           :=  atom ('^' unary)?          -- right-associative
//! atom            :=  number | x1..xd | '(' additive ')' | func '(' args ')'
//! ```
//!
//! Functions: `sin cos exp log sqrt tanh abs` (one argument) and
//! `pow` (two arguments). Variables are `x1` through `xd` for the declared
//! dimension. Numbers are decimal doubles. This grammar is a stable public
//! format consumed by CLI configuration files.

use nalgebra::{DMatrix, DVector};

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::fields::{Point, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Abs,
    Pow,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Pow => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Node {
    Num(f64),
    /// Zero-based variable index.
    Var(usize),
    Neg {
        offset: usize,
        child: Box<Node>,
    },
    Binary {
        op: BinaryOp,
        offset: usize,
        lhs: Box<Node>,
        rhs: Box<Node>,
    },
    Call {
        func: Func,
        offset: usize,
        args: Vec<Node>,
    },
}

impl PartialEq for Node {
    /// Structural equality; source offsets are diagnostics, not identity.
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Node::Num(a), Node::Num(b)) => a == b,
            (Node::Var(a), Node::Var(b)) => a == b,
            (Node::Neg { child: a, .. }, Node::Neg { child: b, .. }) => a == b,
            (
                Node::Binary {
                    op: oa,
                    lhs: la,
                    rhs: ra,
                    ..
                },
                Node::Binary {
                    op: ob,
                    lhs: lb,
                    rhs: rb,
                    ..
                },
            ) => oa == ob && la == lb && ra == rb,
            (
                Node::Call {
                    func: fa, args: aa, ..
                },
                Node::Call {
                    func: fb, args: ab, ..
                },
            ) => fa == fb && aa == ab,
            _ => false,
        }
    }
}

/// Parsed expression over variables `x1..xd`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExprAst {
    root: Node,
    dim: usize,
}

/// Derivative order requested from [`ExprAst::eval_dual`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivOrder {
    First,
    Second,
}

pub fn parse_expression(text: &str, dim: usize) -> Result<ExprAst> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let tokens = tokenize(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let root = parser.additive(dim)?;
    match parser.peek() {
        Token::End => Ok(ExprAst { root, dim }),
        tok => Err(Error::Parse {
            offset: tok.offset(),
            message: format!("unexpected {}", tok.describe()),
        }),
    }
}

impl ExprAst {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &Point) -> Result<f64> {
        Ok(self.eval_dual(x, DerivOrder::First)?.value)
    }

    /// Evaluate with exact forward-mode derivatives.
    pub fn eval_dual(&self, x: &Point, order: DerivOrder) -> Result<Dual> {
        assert_eq!(x.len(), self.dim, "point dimension mismatch");
        let second = order == DerivOrder::Second;
        let out = eval_node(&self.root, x, second)?;
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite {
                what: "expression value".into(),
                point: x.iter().copied().collect(),
            })
        }
    }

    /// Unambiguous text form; `parse(pretty(ast))` reproduces the AST.
    pub fn pretty(&self) -> String {
        pretty_node(&self.root)
    }

    /// Wrap as a [`ScalarField`] with analytic gradient and Hessian.
    pub fn to_scalar_field(&self) -> ScalarField {
        let ast_v = self.clone();
        let ast_g = self.clone();
        let ast_h = self.clone();
        ScalarField::from_fn(move |x: &Point| match ast_v.eval_dual(x, DerivOrder::First) {
            Ok(d) => d.value,
            Err(_) => f64::NAN,
        })
        .with_gradient(move |x: &Point| match ast_g.eval_dual(x, DerivOrder::First) {
            Ok(d) => d.grad,
            Err(_) => DVector::from_element(x.len(), f64::NAN),
        })
        .with_hessian(move |x: &Point| match ast_h.eval_dual(x, DerivOrder::Second) {
            Ok(d) => d.hess.expect("second order requested"),
            Err(_) => DMatrix::from_element(x.len(), x.len(), f64::NAN),
        })
    }
}

fn eval_node(node: &Node, x: &Point, second: bool) -> Result<Dual> {
    let dim = x.len();
    match node {
        Node::Num(v) => Ok(Dual::constant(*v, dim, second)),
        Node::Var(i) => Ok(Dual::variable(x[*i], *i, dim, second)),
        Node::Neg { child, .. } => Ok(eval_node(child, x, second)?.neg()),
        Node::Binary {
            op,
            offset,
            lhs,
            rhs,
        } => {
            let a = eval_node(lhs, x, second)?;
            let b = eval_node(rhs, x, second)?;
            let out = match op {
                BinaryOp::Add => Ok(a.add(&b)),
                BinaryOp::Sub => Ok(a.sub(&b)),
                BinaryOp::Mul => Ok(a.mul(&b)),
                BinaryOp::Div => a.div(&b),
                BinaryOp::Pow => a.pow(&b),
            };
            out.map_err(|e| Error::ExprDomain {
                offset: *offset,
                message: e.to_string(),
            })
        }
        Node::Call { func, offset, args } => {
            let wrap = |e: crate::dual::DualDomainError| Error::ExprDomain {
                offset: *offset,
                message: e.to_string(),
            };
            let a = eval_node(&args[0], x, second)?;
            match func {
                Func::Sin => Ok(a.sin()),
                Func::Cos => Ok(a.cos()),
                Func::Exp => Ok(a.exp()),
                Func::Log => a.ln().map_err(wrap),
                Func::Sqrt => a.sqrt().map_err(wrap),
                Func::Tanh => Ok(a.tanh()),
                Func::Abs => Ok(a.abs()),
                Func::Pow => {
                    let b = eval_node(&args[1], x, second)?;
                    a.pow(&b).map_err(wrap)
                }
            }
        }
    }
}

fn precedence(node: &Node) -> u8 {
    match node {
        Node::Num(_) | Node::Var(_) | Node::Call { .. } => 4,
        Node::Binary { op: BinaryOp::Pow, .. } => 3,
        Node::Neg { .. } => 2,
        Node::Binary {
            op: BinaryOp::Mul | BinaryOp::Div,
            ..
        } => 1,
        Node::Binary { .. } => 0,
    }
}

fn pretty_node(node: &Node) -> String {
    let wrap = |child: &Node, min_prec: u8| {
        let s = pretty_node(child);
        if precedence(child) < min_prec {
            format!("({s})")
        } else {
            s
        }
    };
    match node {
        Node::Num(v) => {
            if *v == v.trunc() && v.abs() < 1e15 {
                format!("{}", *v as i64)
            } else {
                format!("{v}")
            }
        }
        Node::Var(i) => format!("x{}", i + 1),
        Node::Neg { child, .. } => format!("-{}", wrap(child, 2)),
        Node::Binary { op, lhs, rhs, .. } => match op {
            BinaryOp::Add => format!("{} + {}", wrap(lhs, 0), wrap(rhs, 1)),
            BinaryOp::Sub => format!("{} - {}", wrap(lhs, 0), wrap(rhs, 1)),
            BinaryOp::Mul => format!("{}*{}", wrap(lhs, 1), wrap(rhs, 2)),
            BinaryOp::Div => format!("{}/{}", wrap(lhs, 1), wrap(rhs, 2)),
            // Power is right-associative: parenthesize a left power chain.
            BinaryOp::Pow => format!("{}^{}", wrap(lhs, 4), wrap(rhs, 2)),
        },
        Node::Call { func, args, .. } => {
            let inner: Vec<String> = args.iter().map(pretty_node).collect();
            format!("{}({})", func.name(), inner.join(", "))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num { offset: usize, value: f64 },
    Ident { offset: usize, name: String },
    Plus(usize),
    Minus(usize),
    Star(usize),
    Slash(usize),
    Caret(usize),
    LParen(usize),
    RParen(usize),
    Comma(usize),
    End,
}

impl Token {
    fn offset(&self) -> usize {
        match self {
            Token::Num { offset, .. } | Token::Ident { offset, .. } => *offset,
            Token::Plus(o)
            | Token::Minus(o)
            | Token::Star(o)
            | Token::Slash(o)
            | Token::Caret(o)
            | Token::LParen(o)
            | Token::RParen(o)
            | Token::Comma(o) => *o,
            Token::End => usize::MAX,
        }
    }

    fn describe(&self) -> String {
        match self {
            Token::Num { value, .. } => format!("number {value}"),
            Token::Ident { name, .. } => format!("identifier '{name}'"),
            Token::Plus(_) => "'+'".into(),
            Token::Minus(_) => "'-'".into(),
            Token::Star(_) => "'*'".into(),
            Token::Slash(_) => "'/'".into(),
            Token::Caret(_) => "'^'".into(),
            Token::LParen(_) => "'('".into(),
            Token::RParen(_) => "')'".into(),
            Token::Comma(_) => "','".into(),
            Token::End => "end of input".into(),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                tokens.push(Token::Plus(i));
                i += 1;
            }
            '-' => {
                tokens.push(Token::Minus(i));
                i += 1;
            }
            '*' => {
                tokens.push(Token::Star(i));
                i += 1;
            }
            '/' => {
                tokens.push(Token::Slash(i));
                i += 1;
            }
            '^' => {
                tokens.push(Token::Caret(i));
                i += 1;
            }
            '(' => {
                tokens.push(Token::LParen(i));
                i += 1;
            }
            ')' => {
                tokens.push(Token::RParen(i));
                i += 1;
            }
            ',' => {
                tokens.push(Token::Comma(i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let value: f64 = text[start..i].parse().map_err(|_| Error::Parse {
                    offset: start,
                    message: format!("invalid number '{}'", &text[start..i]),
                })?;
                tokens.push(Token::Num {
                    offset: start,
                    value,
                });
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                tokens.push(Token::Ident {
                    offset: start,
                    name: text[start..i].to_string(),
                });
            }
            other => {
                return Err(Error::Parse {
                    offset: i,
                    message: format!("unexpected character '{other}'"),
                })
            }
        }
    }
    tokens.push(Token::End);
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn additive(&mut self, dim: usize) -> Result<Node> {
        let mut lhs = self.multiplicative(dim)?;
        loop {
            let (op, offset) = match self.peek() {
                Token::Plus(o) => (BinaryOp::Add, *o),
                Token::Minus(o) => (BinaryOp::Sub, *o),
                _ => break,
            };
            self.bump();
            let rhs = self.multiplicative(dim)?;
            lhs = Node::Binary {
                op,
                offset,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn multiplicative(&mut self, dim: usize) -> Result<Node> {
        let mut lhs = self.unary(dim)?;
        loop {
            let (op, offset) = match self.peek() {
                Token::Star(o) => (BinaryOp::Mul, *o),
                Token::Slash(o) => (BinaryOp::Div, *o),
                _ => break,
            };
            self.bump();
            let rhs = self.unary(dim)?;
            lhs = Node::Binary {
                op,
                offset,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self, dim: usize) -> Result<Node> {
        if let Token::Minus(o) = *self.peek() {
            self.bump();
            let child = self.unary(dim)?;
            return Ok(Node::Neg {
                offset: o,
                child: Box::new(child),
            });
        }
        self.power(dim)
    }

    fn power(&mut self, dim: usize) -> Result<Node> {
        let base = self.atom(dim)?;
        if let Token::Caret(o) = *self.peek() {
            self.bump();
            // Right-associative; the exponent may carry a unary minus.
            let exp = self.unary(dim)?;
            return Ok(Node::Binary {
                op: BinaryOp::Pow,
                offset: o,
                lhs: Box::new(base),
                rhs: Box::new(exp),
            });
        }
        Ok(base)
    }

    fn atom(&mut self, dim: usize) -> Result<Node> {
        match self.bump() {
            Token::Num { value, .. } => Ok(Node::Num(value)),
            Token::Ident { offset, name } => self.ident(dim, offset, name),
            Token::LParen(open) => {
                let inner = self.additive(dim)?;
                match self.bump() {
                    Token::RParen(_) => Ok(inner),
                    tok => Err(Error::Parse {
                        offset: if matches!(tok, Token::End) {
                            open
                        } else {
                            tok.offset()
                        },
                        message: "unclosed parenthesis".into(),
                    }),
                }
            }
            tok => Err(Error::Parse {
                offset: tok.offset().min(usize::MAX - 1),
                message: format!("expected a value, found {}", tok.describe()),
            }),
        }
    }

    fn ident(&mut self, dim: usize, offset: usize, name: String) -> Result<Node> {
        if let Some(rest) = name.strip_prefix('x') {
            if let Ok(idx) = rest.parse::<usize>() {
                if idx == 0 || idx > dim {
                    return Err(Error::Parse {
                        offset,
                        message: format!("variable x{idx} out of range for dimension {dim}"),
                    });
                }
                return Ok(Node::Var(idx - 1));
            }
        }
        let func = match name.as_str() {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "pow" => Func::Pow,
            _ => {
                return Err(Error::Parse {
                    offset,
                    message: format!("unknown identifier '{name}'"),
                })
            }
        };
        match self.bump() {
            Token::LParen(_) => {}
            tok => {
                return Err(Error::Parse {
                    offset: tok.offset().min(offset + name.len()),
                    message: format!("expected '(' after '{}'", func.name()),
                })
            }
        }
        let mut args = vec![self.additive(dim)?];
        while matches!(self.peek(), Token::Comma(_)) {
            self.bump();
            args.push(self.additive(dim)?);
        }
        match self.bump() {
            Token::RParen(_) => {}
            tok => {
                return Err(Error::Parse {
                    offset: tok.offset().min(offset),
                    message: "unclosed argument list".into(),
                })
            }
        }
        if args.len() != func.arity() {
            return Err(Error::Parse {
                offset,
                message: format!(
                    "{} takes {} argument(s), got {}",
                    func.name(),
                    func.arity(),
                    args.len()
                ),
            });
        }
        Ok(Node::Call { func, offset, args })
    }
}
