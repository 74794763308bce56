//! A small arithmetic expression language for user-supplied coefficients.
//!
//! Grammar (usual precedence, `^` right-associative and binding tighter than
//! unary minus):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | variable | constant | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Variables are `t`, `x`, `z`; constants `pi` and `e`. Functions: `sin`,
//! `cos`, `tan`, `arctan`/`atan`, `exp`, `log`/`ln`, `sqrt`, `abs`, `sign`,
//! `min`, `max`, `pow`. Expressions compile to a postfix program evaluated on
//! a fixed-size stack.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{message} at column {column}")]
pub struct ExprError {
    pub message: String,
    pub column: usize,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Func1(fn(f64) -> f64),
    Func2(fn(f64, f64) -> f64),
}

/// A compiled expression in the variables `t`, `x`, `z`.
#[derive(Clone)]
pub struct Expr {
    source: String,
    program: Vec<Op>,
    max_depth: usize,
    uses: [bool; 3],
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

const VARS: [&str; 3] = ["t", "x", "z"];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
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
            let v = text.parse::<f64>().map_err(|_| ExprError {
                message: format!("invalid number '{text}'"),
                column: start + 1,
            })?;
            out.push((Tok::Num(v), start + 1));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start + 1));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Sym(c), i + 1));
            i += 1;
        } else {
            return Err(ExprError {
                message: format!("unexpected character '{c}'"),
                column: i + 1,
            });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end_col: usize,
    program: Vec<Op>,
    uses: [bool; 3],
}

fn func1(name: &str) -> Option<fn(f64) -> f64> {
    Some(match name {
        "sin" => f64::sin,
        "cos" => f64::cos,
        "tan" => f64::tan,
        "atan" | "arctan" => f64::atan,
        "exp" => f64::exp,
        "log" | "ln" => f64::ln,
        "sqrt" => f64::sqrt,
        "abs" => f64::abs,
        "sign" => |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 },
        _ => return None,
    })
}

fn func2(name: &str) -> Option<fn(f64, f64) -> f64> {
    Some(match name {
        "min" => f64::min,
        "max" => f64::max,
        "pow" => f64::powf,
        _ => return None,
    })
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |(_, c)| *c)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError {
            message: message.into(),
            column: self.col(),
        })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected '{c}'"))
        }
    }

    fn expr(&mut self) -> Result<(), ExprError> {
        self.term()?;
        loop {
            if self.eat('+') {
                self.term()?;
                self.program.push(Op::Add);
            } else if self.eat('-') {
                self.term()?;
                self.program.push(Op::Sub);
            } else {
                return Ok(());
            }
        }
    }

    fn term(&mut self) -> Result<(), ExprError> {
        self.unary()?;
        loop {
            if self.eat('*') {
                self.unary()?;
                self.program.push(Op::Mul);
            } else if self.eat('/') {
                self.unary()?;
                self.program.push(Op::Div);
            } else {
                return Ok(());
            }
        }
    }

    fn unary(&mut self) -> Result<(), ExprError> {
        if self.eat('-') {
            self.unary()?;
            self.program.push(Op::Neg);
            Ok(())
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<(), ExprError> {
        self.atom()?;
        if self.eat('^') {
            self.unary()?;
            self.program.push(Op::Pow);
        }
        Ok(())
    }

    fn atom(&mut self) -> Result<(), ExprError> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                self.program.push(Op::Const(v));
                Ok(())
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                self.expr()?;
                self.expect(')')
            }
            Some(Tok::Ident(name)) => {
                let col = self.col();
                self.pos += 1;
                if self.peek() == Some(&Tok::Sym('(')) {
                    self.pos += 1;
                    let mut args = 1;
                    self.expr()?;
                    while self.eat(',') {
                        self.expr()?;
                        args += 1;
                    }
                    self.expect(')')?;
                    let op = match (args, func1(&name), func2(&name)) {
                        (1, Some(f), _) => Op::Func1(f),
                        (2, _, Some(f)) => Op::Func2(f),
                        (_, None, None) => {
                            return Err(ExprError {
                                message: format!("unknown function '{name}'"),
                                column: col,
                            })
                        }
                        _ => {
                            return Err(ExprError {
                                message: format!("wrong number of arguments to '{name}'"),
                                column: col,
                            })
                        }
                    };
                    self.program.push(op);
                    return Ok(());
                }
                if let Some(i) = VARS.iter().position(|v| *v == name) {
                    self.uses[i] = true;
                    self.program.push(Op::Var(i));
                } else if name == "pi" {
                    self.program.push(Op::Const(std::f64::consts::PI));
                } else if name == "e" {
                    self.program.push(Op::Const(std::f64::consts::E));
                } else {
                    return Err(ExprError {
                        message: format!("unknown identifier '{name}'"),
                        column: col,
                    });
                }
                Ok(())
            }
            Some(Tok::Sym(c)) => self.err(format!("unexpected '{c}'")),
            None => self.err("unexpected end of expression"),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let toks = tokenize(src)?;
        let mut p = Parser {
            toks,
            pos: 0,
            end_col: src.chars().count() + 1,
            program: Vec::new(),
            uses: [false; 3],
        };
        p.expr()?;
        if p.pos != p.toks.len() {
            return p.err("trailing input");
        }
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &p.program {
            match op {
                Op::Const(_) | Op::Var(_) => depth += 1,
                Op::Neg | Op::Func1(_) => {}
                _ => depth -= 1,
            }
            max_depth = max_depth.max(depth);
        }
        Ok(Self {
            source: src.trim().to_string(),
            program: p.program,
            max_depth,
            uses: p.uses,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses_t(&self) -> bool {
        self.uses[0]
    }

    pub fn uses_x(&self) -> bool {
        self.uses[1]
    }

    pub fn uses_z(&self) -> bool {
        self.uses[2]
    }

    pub fn eval(&self, t: f64, x: f64, z: f64) -> f64 {
        let vars = [t, x, z];
        if self.max_depth <= 16 {
            let mut stack = [0.0f64; 16];
            self.run(&vars, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.max_depth];
            self.run(&vars, &mut stack)
        }
    }

    fn run(&self, vars: &[f64; 3], stack: &mut [f64]) -> f64 {
        let mut sp = 0usize;
        for op in &self.program {
            match *op {
                Op::Const(v) => {
                    stack[sp] = v;
                    sp += 1;
                }
                Op::Var(i) => {
                    stack[sp] = vars[i];
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Func1(f) => stack[sp - 1] = f(stack[sp - 1]),
                _ => {
                    let b = stack[sp - 1];
                    let a = stack[sp - 2];
                    sp -= 1;
                    stack[sp - 1] = match *op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        Op::Div => a / b,
                        Op::Pow => pow(a, b),
                        Op::Func2(f) => f(a, b),
                        _ => unreachable!(),
                    };
                }
            }
        }
        stack[0]
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b == 2.0 {
        a * a
    } else if b.fract() == 0.0 && b.abs() < 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: f64) -> f64 {
        Expr::parse(s).unwrap().eval(0.5, x, 2.0)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0), 512.0);
        assert_eq!(ev("-2 ^ 2", 0.0), -4.0);
        assert_eq!(ev("(1 - 2) - 3", 0.0), -4.0);
        assert_eq!(ev("8 / 4 / 2", 0.0), 1.0);
        assert_eq!(ev("2e-1 * 10", 0.0), 2.0);
    }

    #[test]
    fn variables_and_functions() {
        assert!((ev("sin(x) * z", 1.0) - 2.0 * 1f64.sin()).abs() < 1e-15);
        assert!((ev("arctan(x*z) + t", 1.0) - (2f64.atan() + 0.5)).abs() < 1e-15);
        assert_eq!(ev("max(x, z)", 1.0), 2.0);
        assert!((ev("e^x", 1.0) - std::f64::consts::E).abs() < 1e-15);
        let e = Expr::parse("cos(x)").unwrap();
        assert!(e.uses_x() && !e.uses_z() && !e.uses_t());
    }

    #[test]
    fn errors_carry_columns() {
        let e = Expr::parse("sin(x) + foo").unwrap_err();
        assert_eq!(e.column, 10);
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("sin(1, 2)").is_err());
        assert_eq!(Expr::parse("1 $ 2").unwrap_err().column, 3);
    }

    #[test]
    fn deep_expression_uses_heap_stack() {
        let s = (0..40).map(|_| "(1+").collect::<String>() + "x" + &")".repeat(40);
        assert_eq!(ev(&s, 2.0), 42.0);
    }
}
