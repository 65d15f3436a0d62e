//! Closed-form scalar expressions in `x1, x2, x3`.
//!
//! Temperature fields and perturbation potentials are written in a small
//! grammar (numbers, `pi`, `x1..x3`, `+ - * / ^`, `sin`, `cos`, `exp`, `sqrt`,
//! `step`). Evaluation carries a second-order jet, so gradients and Hessians
//! are exact rather than finite-differenced.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Value, gradient and Hessian of a function of three variables at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

impl Jet {
    pub fn constant(value: f64) -> Self {
        Jet {
            value,
            grad: [0.0; 3],
            hess: [[0.0; 3]; 3],
        }
    }

    pub fn variable(value: f64, index: usize) -> Self {
        let mut j = Jet::constant(value);
        j.grad[index] = 1.0;
        j
    }

    /// Chain rule for a scalar function with first and second derivatives `d1`, `d2`.
    fn chain(self, value: f64, d1: f64, d2: f64) -> Jet {
        let mut out = Jet::constant(value);
        for i in 0..3 {
            out.grad[i] = d1 * self.grad[i];
            for k in 0..3 {
                out.hess[i][k] = d1 * self.hess[i][k] + d2 * self.grad[i] * self.grad[k];
            }
        }
        out
    }

    fn add(self, o: Jet) -> Jet {
        let mut out = self;
        out.value += o.value;
        for i in 0..3 {
            out.grad[i] += o.grad[i];
            for k in 0..3 {
                out.hess[i][k] += o.hess[i][k];
            }
        }
        out
    }

    fn neg(self) -> Jet {
        self.scale(-1.0)
    }

    fn scale(self, s: f64) -> Jet {
        let mut out = self;
        out.value *= s;
        for i in 0..3 {
            out.grad[i] *= s;
            for k in 0..3 {
                out.hess[i][k] *= s;
            }
        }
        out
    }

    fn mul(self, o: Jet) -> Jet {
        let mut out = Jet::constant(self.value * o.value);
        for i in 0..3 {
            out.grad[i] = self.grad[i] * o.value + self.value * o.grad[i];
            for k in 0..3 {
                out.hess[i][k] = self.hess[i][k] * o.value
                    + self.value * o.hess[i][k]
                    + self.grad[i] * o.grad[k]
                    + o.grad[i] * self.grad[k];
            }
        }
        out
    }

    fn recip(self) -> Jet {
        let u = self.value;
        self.chain(1.0 / u, -1.0 / (u * u), 2.0 / (u * u * u))
    }

    fn powf(self, n: f64) -> Jet {
        let u = self.value;
        if n == 0.0 {
            return Jet::constant(1.0);
        }
        let (v, d1, d2) = if n.fract() == 0.0 && n.abs() < 64.0 {
            let k = n as i32;
            (u.powi(k), n * u.powi(k - 1), n * (n - 1.0) * u.powi(k - 2))
        } else {
            (u.powf(n), n * u.powf(n - 1.0), n * (n - 1.0) * u.powf(n - 2.0))
        };
        self.chain(v, d1, d2)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, f64),
    Neg(Box<Node>),
    Func(Func, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Step,
}

impl Node {
    fn eval(&self, x: &[f64; 3]) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Var(i) => x[*i],
            Node::Add(a, b) => a.eval(x) + b.eval(x),
            Node::Sub(a, b) => a.eval(x) - b.eval(x),
            Node::Mul(a, b) => a.eval(x) * b.eval(x),
            Node::Div(a, b) => a.eval(x) / b.eval(x),
            Node::Pow(a, n) => {
                let u = a.eval(x);
                if n.fract() == 0.0 && n.abs() < 64.0 {
                    u.powi(*n as i32)
                } else {
                    u.powf(*n)
                }
            }
            Node::Neg(a) => -a.eval(x),
            Node::Func(f, a) => {
                let u = a.eval(x);
                match f {
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Exp => u.exp(),
                    Func::Sqrt => u.sqrt(),
                    Func::Step => {
                        if u >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            }
        }
    }

    fn jet(&self, x: &[f64; 3]) -> Jet {
        match self {
            Node::Const(c) => Jet::constant(*c),
            Node::Var(i) => Jet::variable(x[*i], *i),
            Node::Add(a, b) => a.jet(x).add(b.jet(x)),
            Node::Sub(a, b) => a.jet(x).add(b.jet(x).neg()),
            Node::Mul(a, b) => a.jet(x).mul(b.jet(x)),
            Node::Div(a, b) => a.jet(x).mul(b.jet(x).recip()),
            Node::Pow(a, n) => a.jet(x).powf(*n),
            Node::Neg(a) => a.jet(x).neg(),
            Node::Func(f, a) => {
                let u = a.jet(x);
                let v = u.value;
                match f {
                    Func::Sin => u.chain(v.sin(), v.cos(), -v.sin()),
                    Func::Cos => u.chain(v.cos(), -v.sin(), -v.cos()),
                    Func::Exp => {
                        let e = v.exp();
                        u.chain(e, e, e)
                    }
                    Func::Sqrt => {
                        let s = v.sqrt();
                        u.chain(s, 0.5 / s, -0.25 / (s * v))
                    }
                    Func::Step => u.chain(if v >= 0.0 { 1.0 } else { 0.0 }, 0.0, 0.0),
                }
            }
        }
    }

    /// Value and gradient only, for hot loops.
    fn grad(&self, x: &[f64; 3]) -> (f64, [f64; 3]) {
        fn lin(s: f64, a: [f64; 3]) -> [f64; 3] {
            [s * a[0], s * a[1], s * a[2]]
        }
        fn sum(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
            [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
        }
        match self {
            Node::Const(c) => (*c, [0.0; 3]),
            Node::Var(i) => {
                let mut g = [0.0; 3];
                g[*i] = 1.0;
                (x[*i], g)
            }
            Node::Add(a, b) => {
                let ((u, du), (v, dv)) = (a.grad(x), b.grad(x));
                (u + v, sum(du, dv, 1.0))
            }
            Node::Sub(a, b) => {
                let ((u, du), (v, dv)) = (a.grad(x), b.grad(x));
                (u - v, sum(du, dv, -1.0))
            }
            Node::Mul(a, b) => {
                let ((u, du), (v, dv)) = (a.grad(x), b.grad(x));
                (u * v, sum(lin(v, du), dv, u))
            }
            Node::Div(a, b) => {
                let ((u, du), (v, dv)) = (a.grad(x), b.grad(x));
                let q = u / v;
                (q, lin(1.0 / v, sum(du, dv, -q)))
            }
            Node::Pow(a, n) => {
                let (u, du) = a.grad(x);
                if *n == 0.0 {
                    return (1.0, [0.0; 3]);
                }
                let (p, d) = if n.fract() == 0.0 && n.abs() < 64.0 {
                    let k = *n as i32;
                    (u.powi(k), n * u.powi(k - 1))
                } else {
                    (u.powf(*n), n * u.powf(n - 1.0))
                };
                (p, lin(d, du))
            }
            Node::Neg(a) => {
                let (u, du) = a.grad(x);
                (-u, lin(-1.0, du))
            }
            Node::Func(f, a) => {
                let (u, du) = a.grad(x);
                let (v, d) = match f {
                    Func::Sin => (u.sin(), u.cos()),
                    Func::Cos => (u.cos(), -u.sin()),
                    Func::Exp => {
                        let e = u.exp();
                        (e, e)
                    }
                    Func::Sqrt => {
                        let s = u.sqrt();
                        (s, 0.5 / s)
                    }
                    Func::Step => (if u >= 0.0 { 1.0 } else { 0.0 }, 0.0),
                };
                (v, lin(d, du))
            }
        }
    }

    fn uses_var(&self, idx: usize) -> bool {
        match self {
            Node::Const(_) => false,
            Node::Var(i) => *i == idx,
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.uses_var(idx) || b.uses_var(idx)
            }
            Node::Pow(a, _) | Node::Neg(a) | Node::Func(_, a) => a.uses_var(idx),
        }
    }

    fn has_step(&self) -> bool {
        match self {
            Node::Const(_) | Node::Var(_) => false,
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.has_step() || b.has_step()
            }
            Node::Pow(a, _) | Node::Neg(a) => a.has_step(),
            Node::Func(f, a) => *f == Func::Step || a.has_step(),
        }
    }
}

/// A parsed expression together with its source text.
#[derive(Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!(
                "unexpected trailing input in `{src}` at token {}",
                p.pos
            )));
        }
        Ok(Expr {
            source: src.trim().to_string(),
            root,
        })
    }

    pub fn constant(c: f64) -> Self {
        Expr {
            source: format!("{c:?}"),
            root: Node::Const(c),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        self.root.eval(x)
    }

    pub fn jet(&self, x: &[f64; 3]) -> Jet {
        self.root.jet(x)
    }

    pub fn gradient(&self, x: &[f64; 3]) -> [f64; 3] {
        self.root.grad(x).1
    }

    /// True when the expression does not reference any coordinate.
    pub fn is_constant(&self) -> bool {
        !(0..3).any(|i| self.root.uses_var(i))
    }

    pub fn depends_on(&self, index: usize) -> bool {
        self.root.uses_var(index)
    }

    /// `step(...)` is the only construct introducing discontinuities.
    pub fn is_continuous(&self) -> bool {
        !self.root.has_step()
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl FromStr for Expr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Expr::parse(s)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expr(format!("bad number `{text}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else if c == '(' {
            out.push(Tok::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Tok::RParen);
            i += 1;
        } else {
            return Err(Error::Expr(format!("unexpected character `{c}` in `{src}`")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' {
                Node::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == '*' {
                Node::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if let Some(Tok::Op('+')) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.primary()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            let n = constant_value(&exponent).ok_or_else(|| {
                Error::Expr("exponent of `^` must be a constant".to_string())
            })?;
            return Ok(Node::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Node::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(Error::Expr("missing `)`".to_string())),
                }
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "pi" => Ok(Node::Const(std::f64::consts::PI)),
                "x1" => Ok(Node::Var(0)),
                "x2" => Ok(Node::Var(1)),
                "x3" => Ok(Node::Var(2)),
                "sin" | "cos" | "exp" | "sqrt" | "step" => {
                    let f = match name.as_str() {
                        "sin" => Func::Sin,
                        "cos" => Func::Cos,
                        "exp" => Func::Exp,
                        "sqrt" => Func::Sqrt,
                        _ => Func::Step,
                    };
                    match self.next() {
                        Some(Tok::LParen) => {}
                        _ => return Err(Error::Expr(format!("expected `(` after `{name}`"))),
                    }
                    let arg = self.expr()?;
                    match self.next() {
                        Some(Tok::RParen) => Ok(Node::Func(f, Box::new(arg))),
                        _ => Err(Error::Expr(format!("missing `)` after `{name}(`"))),
                    }
                }
                other => Err(Error::Expr(format!("unknown identifier `{other}`"))),
            },
            Some(t) => Err(Error::Expr(format!("unexpected token {t:?}"))),
            None => Err(Error::Expr("unexpected end of expression".to_string())),
        }
    }
}

fn constant_value(n: &Node) -> Option<f64> {
    (0..3)
        .all(|i| !n.uses_var(i))
        .then(|| n.eval(&[0.0; 3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("1 + 0.25*sin(2*pi*x1)").unwrap();
        let v = e.eval(&[0.25, 0.0, 0.0]);
        assert!((v - 1.25).abs() < 1e-15);
        assert!(!e.is_constant());
        assert!(e.depends_on(0) && !e.depends_on(1));
    }

    #[test]
    fn precedence_and_unary_minus() {
        let e = Expr::parse("-2^2 + 3*4/2 - (1 - 2)").unwrap();
        assert_eq!(e.eval(&[0.0; 3]), -4.0 + 6.0 + 1.0);
        let e = Expr::parse("2e-1 * x3").unwrap();
        assert!((e.eval(&[0.0, 0.0, 5.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Expr::parse("sin(x1").is_err());
        assert!(Expr::parse("x4").is_err());
        assert!(Expr::parse("x1 ^ x2").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
    }

    #[test]
    fn jet_matches_hand_derivatives() {
        // phi = 0.01 x3 exp(-2 x3) sin(2 pi x1)
        let e = Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)").unwrap();
        let x = [0.3, 0.7, 0.4];
        let j = e.jet(&x);
        let k = 2.0 * PI;
        let (s, c) = ((k * x[0]).sin(), (k * x[0]).cos());
        let h = x[2] * (-2.0 * x[2]).exp();
        let dh = (1.0 - 2.0 * x[2]) * (-2.0 * x[2]).exp();
        let ddh = (-4.0 + 4.0 * x[2]) * (-2.0 * x[2]).exp();
        assert!((j.value - 0.01 * h * s).abs() < 1e-15);
        assert!((j.grad[0] - 0.01 * h * k * c).abs() < 1e-14);
        assert!((j.grad[2] - 0.01 * dh * s).abs() < 1e-14);
        assert!((j.hess[0][0] + 0.01 * h * k * k * s).abs() < 1e-13);
        assert!((j.hess[0][2] - 0.01 * dh * k * c).abs() < 1e-13);
        assert!((j.hess[2][2] - 0.01 * ddh * s).abs() < 1e-13);
        assert_eq!(j.hess[1][1], 0.0);
    }

    #[test]
    fn step_is_flagged_discontinuous() {
        assert!(!Expr::parse("1 + 0.5*step(x1 - 0.5)").unwrap().is_continuous());
        assert!(Expr::parse("1 + 0.5*cos(2*pi*x2)").unwrap().is_continuous());
    }

    #[test]
    fn serde_round_trip_keeps_source() {
        let e = Expr::parse("exp(-x3)*cos(2*pi*x2)").unwrap();
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(s, "\"exp(-x3)*cos(2*pi*x2)\"");
        let back: Expr = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn quotient_and_power_derivatives() {
        let e = Expr::parse("1/(1 + x1^2)").unwrap();
        let j = e.jet(&[0.5, 0.0, 0.0]);
        let d = 1.0 + 0.25;
        assert!((j.grad[0] + 2.0 * 0.5 / (d * d)).abs() < 1e-14);
        // d2/dx2 (1+x^2)^-1 = (6x^2 - 2)/(1+x^2)^3
        assert!((j.hess[0][0] - (6.0 * 0.25 - 2.0) / (d * d * d)).abs() < 1e-13);
    }

    #[test]
    fn first_order_gradient_agrees_with_jet() {
        let e = Expr::parse("0.3*x3^2*exp(-x3)*cos(2*pi*x2)/(2 + sin(2*pi*x1)) - sqrt(1 + x3)").unwrap();
        for k in 0..10 {
            let t = k as f64 * 0.13;
            let x = [t, 1.0 - t, 0.2 + t];
            let g = e.gradient(&x);
            let j = e.jet(&x);
            for i in 0..3 {
                assert!((g[i] - j.grad[i]).abs() < 1e-14, "{i}");
            }
        }
    }
}
