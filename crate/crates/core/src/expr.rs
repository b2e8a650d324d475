//! Scalar expressions over state variables `x1..xn`, inputs `u1..um` and a
//! second state copy `y1..yn` (used by Lyapunov functions).
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | var | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-x1^2`
//! is `-(x1^2)`. Implicit multiplication is not accepted.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("unknown variable `{name}` at byte {offset}")]
    UnknownVariable { name: String, offset: usize },
    #[error("variable `{name}` is out of range for n = {n}, m = {m}")]
    OutOfRange { name: String, n: usize, m: usize },
    #[error("vector `{which}` has length {got}, expression needs at least {need}")]
    Arity { which: char, got: usize, need: usize },
    #[error("expression references y-variables but no y vector was supplied")]
    MissingY,
    #[error("non-finite value {value} produced by `{subexpr}`")]
    Domain { subexpr: String, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKind {
    X,
    U,
    Y,
}

impl VarKind {
    fn prefix(self) -> char {
        match self {
            VarKind::X => 'x',
            VarKind::U => 'u',
            VarKind::Y => 'y',
        }
    }
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
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Pow => pow(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn apply(self, a: f64) -> f64 {
        match self {
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
            Func::Exp => a.exp(),
            Func::Sqrt => a.sqrt(),
            Func::Abs => a.abs(),
        }
    }
}

// Integer exponents go through powi; everything else through powf. Both the
// tree walker and the compiled program call this so they agree bit for bit.
fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

/// Abstract syntax tree. Variable indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(VarKind, usize),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, x: &[f64], u: &[f64], y: &[f64]) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(VarKind::X, i) => x[*i],
            Node::Var(VarKind::U, i) => u[*i],
            Node::Var(VarKind::Y, i) => y[*i],
            Node::Neg(a) => -a.eval(x, u, y),
            Node::Binary(op, a, b) => op.apply(a.eval(x, u, y), b.eval(x, u, y)),
            Node::Call(f, a) => f.apply(a.eval(x, u, y)),
        }
    }

    /// Innermost sub-expression producing a non-finite value from finite
    /// operands.
    fn first_non_finite(&self, x: &[f64], u: &[f64], y: &[f64]) -> Option<(&Node, f64)> {
        match self {
            Node::Num(_) | Node::Var(..) => None,
            Node::Neg(a) | Node::Call(_, a) => a.first_non_finite(x, u, y).or_else(|| {
                let v = self.eval(x, u, y);
                (!v.is_finite()).then_some((self, v))
            }),
            Node::Binary(_, a, b) => {
                a.first_non_finite(x, u, y).or_else(|| b.first_non_finite(x, u, y)).or_else(|| {
                    let v = self.eval(x, u, y);
                    (!v.is_finite()).then_some((self, v))
                })
            }
        }
    }

    fn visit_vars(&self, f: &mut impl FnMut(VarKind, usize)) {
        match self {
            Node::Num(_) => {}
            Node::Var(k, i) => f(*k, *i),
            Node::Neg(a) | Node::Call(_, a) => a.visit_vars(f),
            Node::Binary(_, a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
        }
    }

    fn compile(&self, out: &mut Vec<Op>) {
        match self {
            Node::Num(v) => out.push(Op::Num(*v)),
            Node::Var(VarKind::X, i) => out.push(Op::X(*i)),
            Node::Var(VarKind::U, i) => out.push(Op::U(*i)),
            Node::Var(VarKind::Y, i) => out.push(Op::Y(*i)),
            Node::Neg(a) => {
                a.compile(out);
                out.push(Op::Neg);
            }
            Node::Binary(op, a, b) => {
                a.compile(out);
                b.compile(out);
                out.push(Op::Bin(*op));
            }
            Node::Call(f, a) => {
                a.compile(out);
                out.push(Op::Call(*f));
            }
        }
    }
}

/// Canonical printer: every binary operation and negation is parenthesized,
/// so reparsing yields the same tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => write!(f, "{v}"),
            Node::Var(k, i) => write!(f, "{}{}", k.prefix(), i + 1),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Num(f64),
    X(usize),
    U(usize),
    Y(usize),
    Neg,
    Bin(BinOp),
    Call(Func),
}

const INLINE_STACK: usize = 32;

/// A parsed expression together with a flattened postfix program used on
/// the hot path.
#[derive(Debug, Clone)]
pub struct Expression {
    root: Node,
    program: Vec<Op>,
    stack_depth: usize,
    // number of x/u/y slots referenced (max index + 1)
    need_x: usize,
    need_u: usize,
    need_y: usize,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Expression {
    pub fn parse(text: &str) -> Result<Expression, ExprError> {
        let mut p = Parser { src: text, pos: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < text.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Expression::from_node(root))
    }

    pub fn from_node(root: Node) -> Expression {
        let mut program = Vec::new();
        root.compile(&mut program);
        let mut depth = 0usize;
        let mut stack_depth = 0usize;
        for op in &program {
            match op {
                Op::Num(_) | Op::X(_) | Op::U(_) | Op::Y(_) => depth += 1,
                Op::Bin(_) => depth -= 1,
                Op::Neg | Op::Call(_) => {}
            }
            stack_depth = stack_depth.max(depth);
        }
        let (mut need_x, mut need_u, mut need_y) = (0, 0, 0);
        root.visit_vars(&mut |k, i| {
            let slot = match k {
                VarKind::X => &mut need_x,
                VarKind::U => &mut need_u,
                VarKind::Y => &mut need_y,
            };
            *slot = (*slot).max(i + 1);
        });
        Expression { root, program, stack_depth, need_x, need_u, need_y }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn references_y(&self) -> bool {
        self.need_y > 0
    }

    /// Checks every referenced variable against state dimension `n` and input
    /// dimension `m`.
    pub fn bind(&self, n: usize, m: usize) -> Result<(), ExprError> {
        let mut bad = None;
        self.root.visit_vars(&mut |k, i| {
            let limit = match k {
                VarKind::X | VarKind::Y => n,
                VarKind::U => m,
            };
            if i >= limit && bad.is_none() {
                bad = Some(format!("{}{}", k.prefix(), i + 1));
            }
        });
        match bad {
            Some(name) => Err(ExprError::OutOfRange { name, n, m }),
            None => Ok(()),
        }
    }

    pub fn evaluate(&self, x: &[f64], u: &[f64], y: Option<&[f64]>) -> Result<f64, ExprError> {
        if x.len() < self.need_x {
            return Err(ExprError::Arity { which: 'x', got: x.len(), need: self.need_x });
        }
        if u.len() < self.need_u {
            return Err(ExprError::Arity { which: 'u', got: u.len(), need: self.need_u });
        }
        let y = match y {
            Some(y) if y.len() < self.need_y => {
                return Err(ExprError::Arity { which: 'y', got: y.len(), need: self.need_y })
            }
            Some(y) => y,
            None if self.need_y > 0 => return Err(ExprError::MissingY),
            None => &[],
        };
        let v = self.eval_unchecked(x, u, y);
        if v.is_finite() {
            return Ok(v);
        }
        let (node, value) = self.root.first_non_finite(x, u, y).unwrap_or((&self.root, v));
        Err(ExprError::Domain { subexpr: node.to_string(), value })
    }

    /// Evaluates without arity or finiteness checks. Panics if a referenced
    /// slot is missing.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], u: &[f64], y: &[f64]) -> f64 {
        if self.stack_depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            run(&self.program, &mut stack, x, u, y)
        } else {
            let mut stack = vec![0.0f64; self.stack_depth];
            run(&self.program, &mut stack, x, u, y)
        }
    }
}

#[inline]
fn run(program: &[Op], stack: &mut [f64], x: &[f64], u: &[f64], y: &[f64]) -> f64 {
    let mut sp = 0usize;
    for op in program {
        match *op {
            Op::Num(v) => {
                stack[sp] = v;
                sp += 1;
            }
            Op::X(i) => {
                stack[sp] = x[i];
                sp += 1;
            }
            Op::U(i) => {
                stack[sp] = u[i];
                sp += 1;
            }
            Op::Y(i) => {
                stack[sp] = y[i];
                sp += 1;
            }
            Op::Neg => stack[sp - 1] = -stack[sp - 1],
            Op::Bin(b) => {
                sp -= 1;
                stack[sp - 1] = b.apply(stack[sp - 1], stack[sp]);
            }
            Op::Call(f) => stack[sp - 1] = f.apply(stack[sp - 1]),
        }
    }
    stack[0]
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl std::str::FromStr for Expression {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expression::parse(s)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: &str) -> ExprError {
        let message = if self.pos >= self.src.len() {
            format!("{message} (unexpected end of input)")
        } else {
            message.to_string()
        };
        ExprError::Syntax { offset: self.pos, message }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.as_bytes().get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exponent = self.unary()?;
            return Ok(Node::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            None => Err(self.error("expected operand")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut k = end + 1;
            if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                k += 1;
            }
            if k < bytes.len() && bytes[k].is_ascii_digit() {
                while k < bytes.len() && bytes[k].is_ascii_digit() {
                    k += 1;
                }
                end = k;
            }
        }
        match self.src[start..end].parse::<f64>() {
            Ok(v) => {
                self.pos = end;
                Ok(Node::Num(v))
            }
            Err(_) => Err(self.error("malformed number")),
        }
    }

    fn identifier(&mut self) -> Result<Node, ExprError> {
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        let name = &self.src[start..end];
        self.pos = end;
        if self.peek() == Some(b'(') {
            let func = Func::from_name(name)
                .ok_or_else(|| ExprError::UnknownFunction { name: name.to_string(), offset: start })?;
            self.pos += 1;
            let arg = self.expr()?;
            if !self.eat(b')') {
                return Err(self.error("expected `)`"));
            }
            return Ok(Node::Call(func, Box::new(arg)));
        }
        parse_variable(name).ok_or_else(|| ExprError::UnknownVariable { name: name.to_string(), offset: start })
    }
}

fn parse_variable(name: &str) -> Option<Node> {
    let mut chars = name.chars();
    let kind = match chars.next()? {
        'x' => VarKind::X,
        'u' => VarKind::U,
        'y' => VarKind::Y,
        _ => return None,
    };
    let digits = chars.as_str();
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let index: usize = digits.parse().ok()?;
    Some(Node::Var(kind, index - 1))
}
