//! Integer arithmetic expressions with exact rational evaluation.

use std::fmt;

use num_rational::Ratio;

pub type Rational = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            Op::Add | Op::Sub => 1,
            Op::Mul | Op::Div => 2,
        }
    }

    /// `None` on division by zero.
    pub fn apply(self, a: Rational, b: Rational) -> Option<Rational> {
        match self {
            Op::Add => Some(a + b),
            Op::Sub => Some(a - b),
            Op::Mul => Some(a * b),
            Op::Div if *b.numer() == 0 => None,
            Op::Div => Some(a / b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Num(i64),
    Bin(Op, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalError {
    DivisionByZero,
}

impl Expr {
    pub fn bin(op: Op, l: Expr, r: Expr) -> Expr {
        Expr::Bin(op, Box::new(l), Box::new(r))
    }

    pub fn eval(&self) -> Result<Rational, EvalError> {
        match self {
            Expr::Num(n) => Ok(Rational::from_integer(*n as i128)),
            Expr::Bin(op, l, r) => {
                let (a, b) = (l.eval()?, r.eval()?);
                op.apply(a, b).ok_or(EvalError::DivisionByZero)
            }
        }
    }

    /// Integer literals in left-to-right order.
    pub fn literals(&self) -> Vec<i64> {
        let mut out = Vec::new();
        self.collect_literals(&mut out);
        out
    }

    fn collect_literals(&self, out: &mut Vec<i64>) {
        match self {
            Expr::Num(n) => out.push(*n),
            Expr::Bin(_, l, r) => {
                l.collect_literals(out);
                r.collect_literals(out);
            }
        }
    }

    fn fmt_prec(
        &self,
        f: &mut fmt::Formatter<'_>,
        parent: u8,
        right_of_noncomm: bool,
    ) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Bin(op, l, r) => {
                let p = op.precedence();
                let paren = p < parent || (p == parent && right_of_noncomm);
                if paren {
                    f.write_str("(")?;
                }
                l.fmt_prec(f, p, false)?;
                write!(f, "{}", op.symbol())?;
                r.fmt_prec(f, p, matches!(op, Op::Sub | Op::Div))?;
                if paren {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Minimal-parenthesis rendering that re-parses to the same tree shape
    /// up to associativity of `+` and `*`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0, false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError(pub String);

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Num(i64),
    Op(Op),
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Tok>, ParseError> {
    let mut toks = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => {}
            '0'..='9' => {
                let start = i;
                while i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
                    i += 1;
                }
                let s: String = chars[start..=i].iter().collect();
                let n = s
                    .parse::<i64>()
                    .map_err(|_| ParseError(format!("integer literal {s} out of range")))?;
                toks.push(Tok::Num(n));
            }
            '+' => toks.push(Tok::Op(Op::Add)),
            '-' | '\u{2212}' => toks.push(Tok::Op(Op::Sub)),
            '*' | '\u{00d7}' => toks.push(Tok::Op(Op::Mul)),
            '/' | '\u{00f7}' => toks.push(Tok::Op(Op::Div)),
            '(' => toks.push(Tok::LParen),
            ')' => toks.push(Tok::RParen),
            other => return Err(ParseError(format!("unexpected character {other:?}"))),
        }
        i += 1;
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<Tok> {
        self.toks.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ (Op::Add | Op::Sub))) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.atom()?;
        while let Some(Tok::Op(op @ (Op::Mul | Op::Div))) = self.peek() {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(Expr::Num(n))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => Err(ParseError("missing closing parenthesis".into())),
                }
            }
            Some(t) => Err(ParseError(format!("unexpected token {t:?}"))),
            None => Err(ParseError("unexpected end of expression".into())),
        }
    }
}

/// Parses an expression over non-negative integer literals, `+ - * /` and
/// parentheses. A trailing `= ...` (as in `13*8-10*8=24`) is ignored.
pub fn parse_expression(src: &str) -> Result<Expr, ParseError> {
    let body = src.split('=').next().unwrap_or("");
    let toks = lex(body)?;
    if toks.is_empty() {
        return Err(ParseError("empty expression".into()));
    }
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(ParseError(format!("trailing input at token {}", p.pos)));
    }
    Ok(e)
}
