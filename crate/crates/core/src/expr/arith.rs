//! The closed arithmetic/logic grammar behind `$eval`.

use std::cmp::Ordering;
use std::fmt;

use super::format::render_float;
use super::ExprError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Float(x) => f.write_str(&render_float(*x)),
        }
    }
}

impl Value {
    fn numeric(self) -> Value {
        match self {
            Value::Bool(b) => Value::Int(i64::from(b)),
            v => v,
        }
    }

    fn as_f64(self) -> f64 {
        match self.numeric() {
            Value::Int(i) => i as f64,
            Value::Float(x) => x,
            Value::Bool(_) => unreachable!(),
        }
    }

    fn truthy(self) -> bool {
        match self {
            Value::Int(i) => i != 0,
            Value::Float(x) => x != 0.0,
            Value::Bool(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(Value),
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    Pow,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
    Not,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let starts_number =
            c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit));
        if starts_number {
            let start = i;
            let mut is_float = false;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if bytes.get(i) == Some(&b'.') {
                is_float = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if matches!(bytes.get(i), Some(b'e' | b'E')) {
                let mut j = i + 1;
                if matches!(bytes.get(j), Some(b'+' | b'-')) {
                    j += 1;
                }
                if bytes.get(j).is_some_and(u8::is_ascii_digit) {
                    is_float = true;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let bad = |_| ExprError::EvalSyntax(format!("bad number {text}"));
            let value = if is_float {
                Value::Float(text.parse().map_err(bad)?)
            } else {
                match text.parse::<i64>() {
                    Ok(v) => Value::Int(v),
                    Err(_) => Value::Float(text.parse().map_err(bad)?),
                }
            };
            tokens.push(Token::Num(value));
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            tokens.push(match &src[start..i] {
                "and" => Token::And,
                "or" => Token::Or,
                "not" => Token::Not,
                "true" | "True" => Token::Num(Value::Bool(true)),
                "false" | "False" => Token::Num(Value::Bool(false)),
                word => return Err(ExprError::EvalRejected(format!("identifier `{word}`"))),
            });
            continue;
        }
        let next = bytes.get(i + 1).copied();
        let (tok, len) = match (c, next) {
            (b'*', Some(b'*')) => (Token::Pow, 2),
            (b'<', Some(b'=')) => (Token::Le, 2),
            (b'>', Some(b'=')) => (Token::Ge, 2),
            (b'=', Some(b'=')) => (Token::Eq, 2),
            (b'!', Some(b'=')) => (Token::Ne, 2),
            (b'+', _) => (Token::Plus, 1),
            (b'-', _) => (Token::Minus, 1),
            (b'*', _) => (Token::Star, 1),
            (b'/', _) => (Token::Slash, 1),
            (b'%', _) => (Token::Percent, 1),
            (b'<', _) => (Token::Lt, 1),
            (b'>', _) => (Token::Gt, 1),
            (b'(', _) => (Token::LParen, 1),
            (b')', _) => (Token::RParen, 1),
            (b'\'' | b'"', _) => return Err(ExprError::EvalRejected("quote".into())),
            _ => {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(ExprError::EvalRejected(format!("character `{ch}`")));
            }
        };
        tokens.push(tok);
        i += len;
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

fn finite(x: f64) -> Result<Value, ExprError> {
    if x.is_finite() {
        Ok(Value::Float(x))
    } else {
        Err(ExprError::NonFinite)
    }
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, t: &Token) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Value, ExprError> {
        let mut v = self.and()?;
        while self.eat(&Token::Or) {
            let rhs = self.and()?;
            v = Value::Bool(v.truthy() || rhs.truthy());
        }
        Ok(v)
    }

    fn and(&mut self) -> Result<Value, ExprError> {
        let mut v = self.not()?;
        while self.eat(&Token::And) {
            let rhs = self.not()?;
            v = Value::Bool(v.truthy() && rhs.truthy());
        }
        Ok(v)
    }

    fn not(&mut self) -> Result<Value, ExprError> {
        if self.eat(&Token::Not) {
            return Ok(Value::Bool(!self.not()?.truthy()));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Value, ExprError> {
        let mut v = self.sum()?;
        loop {
            let op = match self.peek() {
                Some(t @ (Token::Lt | Token::Le | Token::Gt | Token::Ge | Token::Eq | Token::Ne)) => t.clone(),
                _ => return Ok(v),
            };
            self.pos += 1;
            let rhs = self.sum()?;
            let ord = compare(v, rhs);
            v = Value::Bool(match op {
                Token::Lt => ord == Some(Ordering::Less),
                Token::Le => matches!(ord, Some(Ordering::Less | Ordering::Equal)),
                Token::Gt => ord == Some(Ordering::Greater),
                Token::Ge => matches!(ord, Some(Ordering::Greater | Ordering::Equal)),
                Token::Eq => ord == Some(Ordering::Equal),
                _ => ord != Some(Ordering::Equal),
            });
        }
    }

    fn sum(&mut self) -> Result<Value, ExprError> {
        let mut v = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => Op::Add,
                Some(Token::Minus) => Op::Sub,
                _ => return Ok(v),
            };
            self.pos += 1;
            v = binary(op, v, self.term()?)?;
        }
    }

    fn term(&mut self) -> Result<Value, ExprError> {
        let mut v = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Token::Star) => Op::Mul,
                Some(Token::Slash) => Op::Div,
                Some(Token::Percent) => Op::Rem,
                _ => return Ok(v),
            };
            self.pos += 1;
            v = binary(op, v, self.unary()?)?;
        }
    }

    fn unary(&mut self) -> Result<Value, ExprError> {
        if self.eat(&Token::Minus) {
            return Ok(match self.unary()?.numeric() {
                Value::Int(i) => i.checked_neg().map_or(Value::Float(-(i as f64)), Value::Int),
                Value::Float(x) => Value::Float(-x),
                Value::Bool(_) => unreachable!(),
            });
        }
        if self.eat(&Token::Plus) {
            return Ok(self.unary()?.numeric());
        }
        self.power()
    }

    fn power(&mut self) -> Result<Value, ExprError> {
        let base = self.atom()?;
        if self.eat(&Token::Pow) {
            let exp = self.unary()?;
            return binary(Op::Pow, base, exp);
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Value, ExprError> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(v)
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let v = self.or()?;
                if !self.eat(&Token::RParen) {
                    return Err(ExprError::EvalSyntax("missing `)`".into()));
                }
                Ok(v)
            }
            Some(t) => Err(ExprError::EvalSyntax(format!("unexpected {t:?}"))),
            None => Err(ExprError::EvalSyntax("unexpected end of expression".into())),
        }
    }
}

#[derive(Clone, Copy)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Pow,
}

fn compare(a: Value, b: Value) -> Option<Ordering> {
    match (a.numeric(), b.numeric()) {
        (Value::Int(x), Value::Int(y)) => Some(x.cmp(&y)),
        (x, y) => x.as_f64().partial_cmp(&y.as_f64()),
    }
}

fn floor_mod_i(x: i64, y: i64) -> i64 {
    let r = x.checked_rem(y).unwrap_or(0);
    if r != 0 && (r < 0) != (y < 0) {
        r + y
    } else {
        r
    }
}

fn binary(op: Op, a: Value, b: Value) -> Result<Value, ExprError> {
    let (a, b) = (a.numeric(), b.numeric());
    if let (Value::Int(x), Value::Int(y)) = (a, b) {
        let (fx, fy) = (x as f64, y as f64);
        return match op {
            Op::Add => Ok(x.checked_add(y).map_or(Value::Float(fx + fy), Value::Int)),
            Op::Sub => Ok(x.checked_sub(y).map_or(Value::Float(fx - fy), Value::Int)),
            Op::Mul => Ok(x.checked_mul(y).map_or(Value::Float(fx * fy), Value::Int)),
            Op::Div if y == 0 => Err(ExprError::DivisionByZero),
            Op::Div => {
                if x.checked_rem(y) == Some(0) {
                    Ok(x.checked_div(y).map_or(Value::Float(fx / fy), Value::Int))
                } else {
                    finite(fx / fy)
                }
            }
            Op::Rem if y == 0 => Err(ExprError::DivisionByZero),
            Op::Rem => Ok(Value::Int(floor_mod_i(x, y))),
            Op::Pow if y < 0 && x == 0 => Err(ExprError::DivisionByZero),
            Op::Pow if y < 0 => finite(fx.powf(fy)),
            Op::Pow => match u32::try_from(y).ok().and_then(|e| x.checked_pow(e)) {
                Some(v) => Ok(Value::Int(v)),
                None => finite(fx.powf(fy)),
            },
        };
    }
    let (x, y) = (a.as_f64(), b.as_f64());
    match op {
        Op::Add => finite(x + y),
        Op::Sub => finite(x - y),
        Op::Mul => finite(x * y),
        Op::Div if y == 0.0 => Err(ExprError::DivisionByZero),
        Op::Div => finite(x / y),
        Op::Rem if y == 0.0 => Err(ExprError::DivisionByZero),
        Op::Rem => {
            let r = x % y;
            finite(if r != 0.0 && (r < 0.0) != (y < 0.0) { r + y } else { r })
        }
        Op::Pow if x == 0.0 && y < 0.0 => Err(ExprError::DivisionByZero),
        Op::Pow => finite(x.powf(y)),
    }
}

/// Evaluates a closed arithmetic/logic expression.
pub fn eval_arith(expr: &str) -> Result<Value, ExprError> {
    let tokens = lex(expr)?;
    let mut parser = Parser { tokens, pos: 0 };
    let v = parser.or()?;
    if parser.pos != parser.tokens.len() {
        return Err(ExprError::EvalSyntax(format!(
            "trailing input at token {}",
            parser.pos
        )));
    }
    if let Value::Float(x) = v {
        finite(x)?;
    }
    Ok(v)
}
