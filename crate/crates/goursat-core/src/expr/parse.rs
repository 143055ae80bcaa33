//! Recursive-descent parser for the documented grammar.
//!
//! ```text
//! expr     := term (('+'|'-') term)*
//! term     := factor (('*'|'/') factor)*
//! factor   := '-' factor | power
//! power    := atom ('^' exponent)?
//! exponent := number | '-' number | '(' ('-')? number ')'
//! atom     := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Precedence: `^` > unary `-` > `*` `/` > `+` `-`. Exponents are numeric
//! literals (integer or real). Identifiers are checked against the variable
//! table; `p`-names with permuted digits canonicalize to the nondecreasing
//! form, so `p21` parses as `p12`.

use super::{Expr, UnaryFn, VarTable};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown variable `{name}` at byte {position}")]
    UnknownVariable { name: String, position: usize },
}

pub fn parse(text: &str, table: &VarTable) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        table,
    };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    table: &'a VarTable,
}

impl<'a> Parser<'a> {
    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            position: self.pos,
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

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            if self.eat(b'+') {
                acc = Expr::add(acc, self.term()?);
            } else if self.eat(b'-') {
                acc = Expr::sub(acc, self.term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.factor()?;
        loop {
            if self.eat(b'*') {
                acc = Expr::mul(acc, self.factor()?);
            } else if self.eat(b'/') {
                acc = Expr::div(acc, self.factor()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            Ok(Expr::neg(self.factor()?))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exponent = self.exponent()?;
            Ok(Expr::pow(base, exponent))
        } else {
            Ok(base)
        }
    }

    fn exponent(&mut self) -> Result<f64, ParseError> {
        if self.eat(b'(') {
            let neg = self.eat(b'-');
            let v = self.number()?;
            if !self.eat(b')') {
                return Err(self.syntax("expected `)` after exponent"));
            }
            Ok(if neg { -v } else { v })
        } else if self.eat(b'-') {
            Ok(-self.number()?)
        } else {
            self.number()
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
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
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let v = self.number()?;
                Ok(Expr::constant(v))
            }
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.syntax("expected a number, variable or `(`")),
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || c == b'.')
        {
            self.pos += 1;
        }
        if self.peek() == Some(b'e') || self.peek() == Some(b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                self.pos = mark;
            }
        }
        if self.pos == start {
            return Err(self.syntax("expected a number"));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value = text.parse::<f64>().map_err(|_| ParseError::Syntax {
            position: start,
            message: format!("invalid number `{text}`"),
        })?;
        self.skip_ws();
        Ok(value)
    }

    fn ident(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_string();
        self.skip_ws();
        let func = match name.as_str() {
            "exp" => Some(UnaryFn::Exp),
            "log" | "ln" => Some(UnaryFn::Log),
            "sin" => Some(UnaryFn::Sin),
            "cos" => Some(UnaryFn::Cos),
            "sqrt" => Some(UnaryFn::Sqrt),
            _ => None,
        };
        if let Some(f) = func {
            if self.eat(b'(') {
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.syntax("expected `)` after function argument"));
                }
                return Ok(Expr::unary(f, arg));
            }
            // a function name not followed by `(` is not a variable
            return Err(ParseError::UnknownVariable {
                name,
                position: start,
            });
        }
        match self.table.canonicalize(&name) {
            Some(canon) => Ok(Expr::var(canon)),
            None => Err(ParseError::UnknownVariable {
                name,
                position: start,
            }),
        }
    }
}
