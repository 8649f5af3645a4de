//! Arithmetic expression DSL for field components.
//!
//! Field definitions in config files are strings like `"-x2/2"` or
//! `"x1^2 + sin(t*x2)"`. The language is deliberately tiny: real literals,
//! the time variable `t`, state variables `x1..xn`, operators `+ - * / ^`,
//! unary minus and the functions `sin cos exp log sqrt tanh`. Expressions
//! differentiate symbolically, so Lie brackets, Itô corrections and the
//! derivative bounds of the fields module need no finite differences for
//! DSL-defined models.
//!
//! Precedence: `^` > unary `-` > `* /` > `+ -`; `+ - * /` associate left,
//! `^` right. Exponents are restricted to constant (variable-free)
//! subexpressions so that derivatives stay single-valued.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
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
        }
    }
}

/// Differentiation / evaluation variable: time or a 0-based state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Time,
    State(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Time,
    /// 0-based state coordinate; `Var(0)` prints as `x1`.
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Power with a constant exponent.
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DslError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdent { offset: usize, name: String },
    #[error("variable x{index} out of range at offset {offset} (state dimension {dim})")]
    VarOutOfRange { offset: usize, index: usize, dim: usize },
    #[error("non-constant exponent at offset {offset}: `^` requires a variable-free exponent")]
    NonConstExponent { offset: usize },
    #[error("domain error evaluating `{expr}`: {message}")]
    Eval { expr: String, message: String },
}

// ---------------------------------------------------------------------------
// parsing
// ---------------------------------------------------------------------------

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dim: usize,
}

/// Parse `source` as an expression over `t, x1..x{dim}`.
pub fn parse_expr(source: &str, dim: usize) -> Result<Expr, DslError> {
    let mut p = Parser {
        src: source.as_bytes(),
        pos: 0,
        dim,
    };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

impl<'a> Parser<'a> {
    fn syntax(&self, message: &str) -> DslError {
        DslError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = fold_add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = fold_sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = fold_mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = fold_div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        if self.eat(b'-') {
            Ok(fold_neg(self.unary()?))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, DslError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp_offset = self.pos;
            let exponent = self.unary()?;
            match const_value(&exponent) {
                Some(c) => Ok(fold_pow(base, c)),
                None => Err(DslError::NonConstExponent { offset: exp_offset }),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, DslError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                self.skip_ws();
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.syntax("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            _ => Err(self.syntax("expected a number, variable, function or `(`")),
        }
    }

    fn number(&mut self) -> Result<Expr, DslError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E') && self.pos > start {
                // exponent part: e[+-]?digits
                let save = self.pos;
                self.pos += 1;
                if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                    self.pos += 1;
                }
                if matches!(self.peek(), Some(d) if d.is_ascii_digit()) {
                    continue;
                }
                self.pos = save;
                break;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| DslError::Syntax {
            offset: start,
            message: format!("invalid number `{text}`"),
        })?;
        self.skip_ws();
        Ok(Expr::Num(value))
    }

    fn ident(&mut self) -> Result<Expr, DslError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' {
                self.pos += 1;
            } else {
                break;
            }
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        self.skip_ws();
        match name.as_str() {
            "t" => Ok(Expr::Time),
            "sin" => self.call(Func::Sin, start),
            "cos" => self.call(Func::Cos, start),
            "exp" => self.call(Func::Exp, start),
            "log" => self.call(Func::Log, start),
            "sqrt" => self.call(Func::Sqrt, start),
            "tanh" => self.call(Func::Tanh, start),
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(index) = rest.parse::<usize>() {
                        if index >= 1 && index <= self.dim {
                            return Ok(Expr::Var(index - 1));
                        }
                        return Err(DslError::VarOutOfRange {
                            offset: start,
                            index,
                            dim: self.dim,
                        });
                    }
                }
                Err(DslError::UnknownIdent { offset: start, name })
            }
        }
    }

    fn call(&mut self, f: Func, start: usize) -> Result<Expr, DslError> {
        if !self.eat(b'(') {
            return Err(DslError::Syntax {
                offset: start,
                message: format!("function `{}` requires parentheses", f.name()),
            });
        }
        let arg = self.expr()?;
        if !self.eat(b')') {
            return Err(self.syntax("expected `)` after function argument"));
        }
        Ok(fold_call(f, arg))
    }
}

// ---------------------------------------------------------------------------
// constant-folding constructors
// ---------------------------------------------------------------------------

fn const_value(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        _ => None,
    }
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 0.0)
}

fn is_one(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 1.0)
}

pub fn fold_add(a: Expr, b: Expr) -> Expr {
    match (const_value(&a), const_value(&b)) {
        (Some(x), Some(y)) => Expr::Num(x + y),
        _ if is_zero(&a) => b,
        _ if is_zero(&b) => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn fold_sub(a: Expr, b: Expr) -> Expr {
    match (const_value(&a), const_value(&b)) {
        (Some(x), Some(y)) => Expr::Num(x - y),
        _ if is_zero(&b) => a,
        _ if is_zero(&a) => fold_neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn fold_mul(a: Expr, b: Expr) -> Expr {
    match (const_value(&a), const_value(&b)) {
        (Some(x), Some(y)) => Expr::Num(x * y),
        _ if is_zero(&a) || is_zero(&b) => Expr::Num(0.0),
        _ if is_one(&a) => b,
        _ if is_one(&b) => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn fold_div(a: Expr, b: Expr) -> Expr {
    match (const_value(&a), const_value(&b)) {
        (Some(x), Some(y)) if y != 0.0 => Expr::Num(x / y),
        _ if is_zero(&a) && !is_zero(&b) => Expr::Num(0.0),
        _ if is_one(&b) => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn fold_neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        _ => Expr::Neg(Box::new(a)),
    }
}

pub fn fold_pow(base: Expr, exp: f64) -> Expr {
    if exp == 0.0 {
        return Expr::Num(1.0);
    }
    if exp == 1.0 {
        return base;
    }
    if let Some(b) = const_value(&base) {
        let v = powc(b, exp);
        if v.is_finite() {
            return Expr::Num(v);
        }
    }
    Expr::Pow(Box::new(base), exp)
}

fn fold_call(f: Func, arg: Expr) -> Expr {
    if let Some(v) = const_value(&arg) {
        let out = match f {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
            Func::Sqrt => v.sqrt(),
            Func::Tanh => v.tanh(),
        };
        if out.is_finite() {
            return Expr::Num(out);
        }
    }
    Expr::Call(f, Box::new(arg))
}

fn powc(base: f64, exp: f64) -> f64 {
    if exp.fract() == 0.0 && exp.abs() < 1e9 {
        base.powi(exp as i32)
    } else {
        base.powf(exp)
    }
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

impl Expr {
    /// Evaluate at time `t` and state `x`. Division by zero, `log` of a
    /// non-positive argument and fractional powers of non-positive bases are
    /// reported as errors rather than silent NaN/inf.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, DslError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Time => Ok(t),
            Expr::Var(i) => x.get(*i).copied().ok_or_else(|| DslError::Eval {
                expr: self.to_string(),
                message: format!("state has dimension {}", x.len()),
            }),
            Expr::Neg(a) => Ok(-a.eval(t, x)?),
            Expr::Add(a, b) => Ok(a.eval(t, x)? + b.eval(t, x)?),
            Expr::Sub(a, b) => Ok(a.eval(t, x)? - b.eval(t, x)?),
            Expr::Mul(a, b) => Ok(a.eval(t, x)? * b.eval(t, x)?),
            Expr::Div(a, b) => {
                let den = b.eval(t, x)?;
                if den == 0.0 {
                    return Err(DslError::Eval {
                        expr: self.to_string(),
                        message: "division by zero".into(),
                    });
                }
                Ok(a.eval(t, x)? / den)
            }
            Expr::Pow(base, exp) => {
                let b = base.eval(t, x)?;
                if exp.fract() != 0.0 && b <= 0.0 {
                    return Err(DslError::Eval {
                        expr: self.to_string(),
                        message: format!("non-integer power of non-positive base {b}"),
                    });
                }
                Ok(powc(b, *exp))
            }
            Expr::Call(f, a) => {
                let v = a.eval(t, x)?;
                let out = match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Log => {
                        if v <= 0.0 {
                            return Err(DslError::Eval {
                                expr: self.to_string(),
                                message: format!("log of non-positive argument {v}"),
                            });
                        }
                        v.ln()
                    }
                    Func::Sqrt => {
                        if v < 0.0 {
                            return Err(DslError::Eval {
                                expr: self.to_string(),
                                message: format!("sqrt of negative argument {v}"),
                            });
                        }
                        v.sqrt()
                    }
                    Func::Tanh => v.tanh(),
                };
                Ok(out)
            }
        }
    }

    /// Symbolic derivative with respect to `var`. The result is constant-
    /// folded but not otherwise simplified; equality of expressions is a
    /// matter of evaluation, not structure.
    pub fn differentiate(&self, var: Var) -> Expr {
        match self {
            Expr::Num(_) => Expr::Num(0.0),
            Expr::Time => Expr::Num(if var == Var::Time { 1.0 } else { 0.0 }),
            Expr::Var(i) => Expr::Num(if var == Var::State(*i) { 1.0 } else { 0.0 }),
            Expr::Neg(a) => fold_neg(a.differentiate(var)),
            Expr::Add(a, b) => fold_add(a.differentiate(var), b.differentiate(var)),
            Expr::Sub(a, b) => fold_sub(a.differentiate(var), b.differentiate(var)),
            Expr::Mul(a, b) => fold_add(
                fold_mul(a.differentiate(var), (**b).clone()),
                fold_mul((**a).clone(), b.differentiate(var)),
            ),
            Expr::Div(a, b) => {
                // (a/b)' = (a'b - ab') / b^2
                let num = fold_sub(
                    fold_mul(a.differentiate(var), (**b).clone()),
                    fold_mul((**a).clone(), b.differentiate(var)),
                );
                fold_div(num, fold_pow((**b).clone(), 2.0))
            }
            Expr::Pow(base, exp) => {
                // (b^c)' = c b^(c-1) b'
                let db = base.differentiate(var);
                fold_mul(
                    fold_mul(Expr::Num(*exp), fold_pow((**base).clone(), exp - 1.0)),
                    db,
                )
            }
            Expr::Call(f, a) => {
                let da = a.differentiate(var);
                let outer = match f {
                    Func::Sin => fold_call(Func::Cos, (**a).clone()),
                    Func::Cos => fold_neg(fold_call(Func::Sin, (**a).clone())),
                    Func::Exp => fold_call(Func::Exp, (**a).clone()),
                    Func::Log => fold_div(Expr::Num(1.0), (**a).clone()),
                    Func::Sqrt => fold_div(
                        Expr::Num(0.5),
                        fold_call(Func::Sqrt, (**a).clone()),
                    ),
                    Func::Tanh => fold_sub(
                        Expr::Num(1.0),
                        fold_pow(fold_call(Func::Tanh, (**a).clone()), 2.0),
                    ),
                };
                fold_mul(outer, da)
            }
        }
    }

    pub fn is_const_zero(&self) -> bool {
        is_zero(self)
    }

    pub fn is_const(&self) -> bool {
        matches!(self, Expr::Num(_))
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn paren(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "(")?;
                write!(f, "{e}")?;
                write!(f, ")")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "({v:?})")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Time => write!(f, "t"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => {
                write!(f, "-")?;
                paren(f, a, 3)
            }
            Expr::Add(a, b) => {
                paren(f, a, 1)?;
                write!(f, " + ")?;
                paren(f, b, 2)
            }
            Expr::Sub(a, b) => {
                paren(f, a, 1)?;
                write!(f, " - ")?;
                paren(f, b, 2)
            }
            Expr::Mul(a, b) => {
                paren(f, a, 2)?;
                write!(f, "*")?;
                paren(f, b, 3)
            }
            Expr::Div(a, b) => {
                paren(f, a, 2)?;
                write!(f, "/")?;
                paren(f, b, 5)
            }
            Expr::Pow(a, c) => {
                paren(f, a, 5)?;
                if *c < 0.0 {
                    write!(f, "^({c:?})")
                } else {
                    write!(f, "^{c:?}")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(e: &Expr, var: Var, t: f64, x: &[f64], h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        let (tp, tm) = match var {
            Var::Time => (t + h, t - h),
            Var::State(i) => {
                xp[i] += h;
                xm[i] -= h;
                (t, t)
            }
        };
        (e.eval(tp, &xp).unwrap() - e.eval(tm, &xm).unwrap()) / (2.0 * h)
    }

    #[test]
    fn parses_atoms_and_heisenberg_component() {
        assert_eq!(parse_expr("x1", 2).unwrap(), Expr::Var(0));
        // -x2/2 is the Heisenberg sigma_1 third component
        let e = parse_expr("-x2/2", 3).unwrap();
        assert_eq!(e.eval(0.0, &[9.0, 2.0, 9.0]).unwrap(), -1.0);
    }

    #[test]
    fn syntax_error_carries_offset() {
        match parse_expr("x1 +", 2) {
            Err(DslError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(parse_expr("x1^2 + sin(t*x2)", 2).is_ok());
        assert!(matches!(
            parse_expr("x3", 2),
            Err(DslError::VarOutOfRange { index: 3, dim: 2, .. })
        ));
        assert!(matches!(parse_expr("foo", 2), Err(DslError::UnknownIdent { .. })));
    }

    #[test]
    fn eval_bascomputes() {
        let e = parse_expr("x1*x2", 2).unwrap();
        assert_eq!(e.eval(0.0, &[3.0, 4.0]).unwrap(), 12.0);
        let e = parse_expr("exp(x1)", 1).unwrap();
        assert!((e.eval(0.0, &[1.0]).unwrap() - 2.718281828459045).abs() < 1e-15);
    }

    #[test]
    fn eval_domain_errors_name_subexpression() {
        let e = parse_expr("1/(x1-1)", 1).unwrap();
        let err = e.eval(0.0, &[1.0]).unwrap_err();
        assert!(matches!(err, DslError::Eval { .. }));
        let e = parse_expr("log(x1)", 1).unwrap();
        assert!(e.eval(0.0, &[-1.0]).is_err());
    }

    #[test]
    fn derivative_of_square_is_linear() {
        let e = parse_expr("x1^2", 1).unwrap();
        let d = e.differentiate(Var::State(0));
        for &v in &[0.0, 1.0, -2.5, 3.25] {
            assert!((d.eval(0.0, &[v]).unwrap() - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_of_affine_heisenberg_component_is_constant() {
        let e = parse_expr("-x2/2", 3).unwrap();
        let d = e.differentiate(Var::State(1));
        assert_eq!(d, Expr::Num(-0.5));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let e = parse_expr("sin(t*x1)", 1).unwrap();
        let d = e.differentiate(Var::State(0));
        // d/dx1 sin(t x1) = t cos(t x1); spot-check at 20 deterministic points
        for k in 0..20 {
            let t = 0.1 + 0.37 * k as f64;
            let x = [-1.5 + 0.21 * k as f64];
            let exact = t * (t * x[0]).cos();
            assert!((d.eval(t, &x).unwrap() - exact).abs() < 1e-12);
            assert!((d.eval(t, &x).unwrap() - fd(&e, Var::State(0), t, &x, 1e-6)).abs() < 1e-6);
        }
    }

    #[test]
    fn derivative_of_var_free_expression_is_zero_literal() {
        let e = parse_expr("3.5*2 + exp(1)", 2).unwrap();
        assert_eq!(e.differentiate(Var::State(0)), Expr::Num(0.0));
        assert_eq!(e.differentiate(Var::Time), Expr::Num(0.0));
    }

    #[test]
    fn print_parse_round_trip_evaluates_identically() {
        let sources = [
            "x1^2 + sin(t*x2)",
            "-x2/2",
            "x1*x2 - 3/(x1 + 10)",
            "sqrt(x1^2 + 1)*tanh(x2)",
            "exp(-(x1 - 0.5)^2)",
        ];
        for src in sources {
            let e = parse_expr(src, 2).unwrap();
            let back = parse_expr(&e.to_string(), 2).unwrap();
            for k in 0..25 {
                let t = -1.0 + 0.17 * k as f64;
                let x = [0.3 * k as f64 - 2.0, 1.0 - 0.11 * k as f64];
                let a = e.eval(t, &x).unwrap();
                let b = back.eval(t, &x).unwrap();
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                    "round trip mismatch for {src}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn non_constant_exponent_rejected() {
        assert!(matches!(
            parse_expr("x1^x2", 2),
            Err(DslError::NonConstExponent { .. })
        ));
        assert!(parse_expr("x1^-1", 2).is_ok());
        assert!(parse_expr("2^0.5", 2).is_ok());
    }

    #[test]
    fn fractional_power_of_negative_base_is_domain_error() {
        let e = parse_expr("x1^0.5", 1).unwrap();
        assert!(e.eval(0.0, &[-1.0]).is_err());
        assert!((e.eval(0.0, &[4.0]).unwrap() - 2.0).abs() < 1e-15);
    }
}
