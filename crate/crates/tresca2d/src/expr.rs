//! A small arithmetic expression language for problem data.
//!
//! Grammar (loosest to tightest binding): `+ -`, `* /`, unary `-`, `^` with an
//! integer exponent, atoms. Atoms are numeric literals, the variables `x` and
//! `y`, the constant `pi`, parenthesized expressions and the functions
//! `sin, cos, exp, sqrt, abs`. A numeric literal directly followed by an
//! identifier or `(` multiplies implicitly (`2pi/3`). Whitespace is ignored.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Literal(f64),
    Var(Variable),
    Pi,
    Unary(Box<Expression>),
    Binary(BinOp, Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, i32),
    Call(Function, Box<Expression>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Function {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("syntax error at byte {offset}: found {found}, expected {expected}")]
pub struct ParseError {
    pub offset: usize,
    pub found: String,
    pub expected: String,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("division by zero at (x, y) = ({0}, {1})")]
    DivisionByZero(f64, f64),
    #[error("square root of negative value {0}")]
    SqrtNegative(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "identifier '{s}'"),
            Tok::Plus => write!(f, "'+'"),
            Tok::Minus => write!(f, "'-'"),
            Tok::Star => write!(f, "'*'"),
            Tok::Slash => write!(f, "'/'"),
            Tok::Caret => write!(f, "'^'"),
            Tok::LParen => write!(f, "'('"),
            Tok::RParen => write!(f, "')'"),
            Tok::End => write!(f, "end of input"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0 }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize)>, ParseError> {
        let mut out = Vec::new();
        loop {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            let at = self.pos;
            if self.pos == self.src.len() {
                out.push((Tok::End, at));
                return Ok(out);
            }
            let c = self.src[self.pos];
            let tok = match c {
                b'+' => { self.pos += 1; Tok::Plus }
                b'-' => { self.pos += 1; Tok::Minus }
                b'*' => { self.pos += 1; Tok::Star }
                b'/' => { self.pos += 1; Tok::Slash }
                b'^' => { self.pos += 1; Tok::Caret }
                b'(' => { self.pos += 1; Tok::LParen }
                b')' => { self.pos += 1; Tok::RParen }
                b'0'..=b'9' | b'.' => self.number(at)?,
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let start = self.pos;
                    while self.pos < self.src.len()
                        && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                    {
                        self.pos += 1;
                    }
                    Tok::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
                }
                other => {
                    return Err(ParseError {
                        offset: at,
                        found: format!("'{}'", other as char),
                        expected: "a number, identifier, operator or parenthesis".into(),
                    })
                }
            };
            // implicit multiplication: number immediately followed by an
            // identifier or '(' (no whitespace skipping needed: harmless either way)
            let implicit = matches!(tok, Tok::Ident(_) | Tok::LParen)
                && matches!(out.last(), Some((Tok::Num(_), _)));
            if implicit {
                out.push((Tok::Star, at));
            }
            out.push((tok, at));
        }
    }

    fn number(&mut self, at: usize) -> Result<Tok, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        if self.pos < self.src.len() && (self.src[self.pos] == b'e' || self.src[self.pos] == b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark; // 'e' belongs to an identifier, e.g. "2exp(x)"
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>().map(Tok::Num).map_err(|_| ParseError {
            offset: at,
            found: format!("'{text}'"),
            expected: "a numeric literal".into(),
        })
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }
    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }
    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }
    fn err(&self, expected: &str) -> ParseError {
        ParseError {
            offset: self.offset(),
            found: self.peek().to_string(),
            expected: expected.into(),
        }
    }

    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expression::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expression::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        if matches!(self.peek(), Tok::Minus) {
            self.bump();
            return Ok(Expression::Unary(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expression, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Tok::Caret) {
            self.bump();
            let exp = self.integer_exponent()?;
            return Ok(Expression::Pow(Box::new(base), exp));
        }
        Ok(base)
    }

    fn integer_exponent(&mut self) -> Result<i32, ParseError> {
        let mut negate = false;
        let mut parens = false;
        if matches!(self.peek(), Tok::LParen) {
            self.bump();
            parens = true;
        }
        if matches!(self.peek(), Tok::Minus) {
            self.bump();
            negate = true;
        }
        let Tok::Num(v) = self.peek().clone() else {
            return Err(self.err("an integer exponent"));
        };
        if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
            return Err(self.err("an integer exponent"));
        }
        self.bump();
        if parens && !matches!(self.bump(), Tok::RParen) {
            self.pos -= 1;
            return Err(self.err("')'"));
        }
        let n = v as i32;
        Ok(if negate { -n } else { n })
    }

    fn atom(&mut self) -> Result<Expression, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expression::Literal(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                if !matches!(self.peek(), Tok::RParen) {
                    return Err(self.err("')'"));
                }
                self.bump();
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                match name.as_str() {
                    "x" => Ok(Expression::Var(Variable::X)),
                    "y" => Ok(Expression::Var(Variable::Y)),
                    "pi" => Ok(Expression::Pi),
                    "sin" | "cos" | "exp" | "sqrt" | "abs" => {
                        let f = match name.as_str() {
                            "sin" => Function::Sin,
                            "cos" => Function::Cos,
                            "exp" => Function::Exp,
                            "sqrt" => Function::Sqrt,
                            _ => Function::Abs,
                        };
                        if !matches!(self.peek(), Tok::LParen) {
                            return Err(self.err("'(' after function name"));
                        }
                        self.bump();
                        let arg = self.expr()?;
                        if !matches!(self.peek(), Tok::RParen) {
                            return Err(self.err("')'"));
                        }
                        self.bump();
                        Ok(Expression::Call(f, Box::new(arg)))
                    }
                    _ => Err(ParseError {
                        offset: self.toks[self.pos - 1].1,
                        found: format!("identifier '{name}'"),
                        expected: "one of x, y, pi, sin, cos, exp, sqrt, abs".into(),
                    }),
                }
            }
            _ => Err(self.err("a number, variable, function or '('")),
        }
    }
}

/// Parse `text` into an [`Expression`].
pub fn parse_expression(text: &str) -> Result<Expression, ParseError> {
    let toks = Lexer::new(text).tokens()?;
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if !matches!(p.peek(), Tok::End) {
        return Err(p.err("end of input"));
    }
    Ok(e)
}

impl Expression {
    pub fn eval(&self, x: f64, y: f64) -> Result<f64, EvalError> {
        Ok(match self {
            Expression::Literal(v) => *v,
            Expression::Var(Variable::X) => x,
            Expression::Var(Variable::Y) => y,
            Expression::Pi => std::f64::consts::PI,
            Expression::Unary(e) => -e.eval(x, y)?,
            Expression::Binary(op, a, b) => {
                let (a, b) = (a.eval(x, y)?, b.eval(x, y)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero(x, y));
                        }
                        a / b
                    }
                }
            }
            Expression::Pow(base, n) => base.eval(x, y)?.powi(*n),
            Expression::Call(f, arg) => {
                let v = arg.eval(x, y)?;
                match f {
                    Function::Sin => v.sin(),
                    Function::Cos => v.cos(),
                    Function::Exp => v.exp(),
                    Function::Sqrt => {
                        if v < 0.0 {
                            return Err(EvalError::SqrtNegative(v));
                        }
                        v.sqrt()
                    }
                    Function::Abs => v.abs(),
                }
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
            Expression::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
            Expression::Unary(_) => 3,
            Expression::Pow(..) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expression, min_prec: u8) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "(")?;
                write!(f, "{e}")?;
                write!(f, ")")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expression::Literal(v) => write!(f, "{v}"),
            Expression::Var(Variable::X) => write!(f, "x"),
            Expression::Var(Variable::Y) => write!(f, "y"),
            Expression::Pi => write!(f, "pi"),
            Expression::Unary(e) => {
                write!(f, "-")?;
                child(f, e, 3)
            }
            Expression::Binary(op, a, b) => {
                let (prec, sym) = match op {
                    BinOp::Add => (1, "+"),
                    BinOp::Sub => (1, "-"),
                    BinOp::Mul => (2, "*"),
                    BinOp::Div => (2, "/"),
                };
                child(f, a, prec)?;
                write!(f, "{sym}")?;
                // left associativity: same-precedence right children need parens
                child(f, b, prec + 1)
            }
            Expression::Pow(base, n) => {
                child(f, base, 5)?;
                if *n < 0 {
                    write!(f, "^({n})")
                } else {
                    write!(f, "^{n}")
                }
            }
            Expression::Call(func, arg) => {
                let name = match func {
                    Function::Sin => "sin",
                    Function::Cos => "cos",
                    Function::Exp => "exp",
                    Function::Sqrt => "sqrt",
                    Function::Abs => "abs",
                };
                write!(f, "{name}({arg})")
            }
        }
    }
}

/// Centered finite-difference gradient of a scalar expression.
pub fn gradient_fd(e: &Expression, x: f64, y: f64, step: f64) -> Result<[f64; 2], EvalError> {
    let gx = (e.eval(x + step, y)? - e.eval(x - step, y)?) / (2.0 * step);
    let gy = (e.eval(x, y + step)? - e.eval(x, y - step)?) / (2.0 * step);
    Ok([gx, gy])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn literal_zero() {
        let e = parse_expression("0").unwrap();
        assert_eq!(e, Expression::Literal(0.0));
        assert_eq!(e.eval(3.0, -4.0).unwrap(), 0.0);
    }

    #[test]
    fn paper_body_force_x_component() {
        let e = parse_expression("-5*x*exp(x)").unwrap();
        let v = e.eval(1.0, 0.0).unwrap();
        assert!((v - (-5.0 * std::f64::consts::E)).abs() < 1e-12);
        assert!((v - (-13.5914091)).abs() < 1e-6);
    }

    #[test]
    fn paper_friction_threshold() {
        let e = parse_expression("1+sin(-y*pi/2)+1e-3").unwrap();
        let v = e.eval(0.0, -1.0).unwrap();
        assert!((v - 2.001).abs() < 1e-12);
    }

    #[test]
    fn precedence_rules() {
        assert_eq!(parse_expression("2+3*4^2").unwrap().eval(0.0, 0.0).unwrap(), 50.0);
        assert_eq!(parse_expression("-2^2").unwrap().eval(0.0, 0.0).unwrap(), -4.0);
        assert_eq!(parse_expression("2pi/3").unwrap().eval(0.0, 0.0).unwrap(), 2.0 * std::f64::consts::PI / 3.0);
        assert_eq!(parse_expression("6/3/2").unwrap().eval(0.0, 0.0).unwrap(), 1.0);
        assert_eq!(parse_expression("x^-1").unwrap().eval(4.0, 0.0).unwrap(), 0.25);
    }

    #[test]
    fn errors_carry_offset_and_expectation() {
        let err = parse_expression("1+*2").unwrap_err();
        assert_eq!(err.offset, 2);
        let err = parse_expression("sin x").unwrap_err();
        assert!(err.expected.contains("("));
        let err = parse_expression("foo(1)").unwrap_err();
        assert!(err.expected.contains("x, y, pi"));
    }

    #[test]
    fn eval_errors() {
        let e = parse_expression("1/(x-1)").unwrap();
        assert!(matches!(e.eval(1.0, 0.0), Err(EvalError::DivisionByZero(..))));
        let e = parse_expression("sqrt(x)").unwrap();
        assert!(matches!(e.eval(-1.0, 0.0), Err(EvalError::SqrtNegative(_))));
    }

    fn random_expr(rng: &mut impl Rng, depth: usize) -> Expression {
        if depth == 0 || rng.random_range(0..100) < 25 {
            return match rng.random_range(0..4) {
                0 => Expression::Literal((rng.random_range(0..1000) as f64) / 10.0),
                1 => Expression::Var(Variable::X),
                2 => Expression::Var(Variable::Y),
                _ => Expression::Pi,
            };
        }
        match rng.random_range(0..8) {
            0 => Expression::Unary(Box::new(random_expr(rng, depth - 1))),
            1 => Expression::Pow(Box::new(random_expr(rng, depth - 1)), rng.random_range(-3..=3)),
            2..=3 => {
                let f = match rng.random_range(0..5) {
                    0 => Function::Sin,
                    1 => Function::Cos,
                    2 => Function::Exp,
                    3 => Function::Sqrt,
                    _ => Function::Abs,
                };
                Expression::Call(f, Box::new(random_expr(rng, depth - 1)))
            }
            k => {
                let op = match k {
                    4 => BinOp::Add,
                    5 => BinOp::Sub,
                    6 => BinOp::Mul,
                    _ => BinOp::Div,
                };
                Expression::Binary(
                    op,
                    Box::new(random_expr(rng, depth - 1)),
                    Box::new(random_expr(rng, depth - 1)),
                )
            }
        }
    }

    #[test]
    fn print_parse_roundtrip_structural() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240817);
        for _ in 0..1000 {
            let e = random_expr(&mut rng, 4);
            let printed = e.to_string();
            let reparsed = parse_expression(&printed)
                .unwrap_or_else(|err| panic!("failed to reparse '{printed}': {err}"));
            assert_eq!(reparsed, e, "round trip of '{printed}'");
        }
    }

    #[test]
    fn gradient_fd_matches_closed_form() {
        let g = parse_expression("1+sin(-y*pi/2)+1e-3").unwrap();
        let grad = gradient_fd(&g, 0.3, -0.4, 1e-6).unwrap();
        let exact = [0.0, -std::f64::consts::PI / 2.0 * (-(-0.4) * std::f64::consts::PI / 2.0).cos()];
        assert!((grad[0] - exact[0]).abs() < 1e-8);
        assert!((grad[1] - exact[1]).abs() < 1e-8);
    }
}
