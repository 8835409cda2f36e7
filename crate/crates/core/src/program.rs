//! Recording programs on a tape and checking their gradients.
//!
//! A [`Program`] is anything that can build a scalar computation from a
//! bound [`ParamVector`]. Closures implement it directly; [`Expr`] parses a
//! small arithmetic language over the primitive set so test programs can be
//! written as strings such as `"sum(p * p) / 2"`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Layout, ParamVector, Tensor};

/// Parameter vector recorded as a single leaf, with named segment access.
pub struct Bound<'a> {
    pub leaf: Var,
    pub layout: &'a Layout,
}

impl Bound<'_> {
    pub fn segment(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let seg = self
            .layout
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter segment `{name}`")))?;
        tape.slice(self.leaf, seg.offset, seg.shape.clone())
    }
}

pub trait Program {
    fn record(&self, tape: &mut Tape, params: &Bound<'_>) -> Result<Var>;
}

impl<F> Program for F
where
    F: Fn(&mut Tape, &Bound<'_>) -> Result<Var>,
{
    fn record(&self, tape: &mut Tape, params: &Bound<'_>) -> Result<Var> {
        self(tape, params)
    }
}

/// Result of [`forward_record`].
#[derive(Debug)]
pub struct Recording {
    pub tape: Tape,
    pub root: Var,
    pub leaf: Var,
    pub layout: Layout,
}

impl Recording {
    pub fn value(&self) -> &Tensor {
        self.tape.value(self.root)
    }
}

/// Evaluate `program` at `inputs`, keeping the tape for a backward pass.
pub fn forward_record(program: &dyn Program, inputs: &ParamVector) -> Result<(Tensor, Recording)> {
    let mut tape = Tape::new();
    let leaf = tape.param(inputs.as_tensor())?;
    let bound = Bound {
        leaf,
        layout: inputs.layout(),
    };
    let root = program.record(&mut tape, &bound)?;
    let value = tape.value(root).clone();
    Ok((
        value,
        Recording {
            tape,
            root,
            leaf,
            layout: inputs.layout().clone(),
        },
    ))
}

/// Gradient of the recorded scalar with respect to the parameter vector.
pub fn backward(rec: &Recording) -> Result<ParamVector> {
    let grads = rec.tape.backward(rec.root)?;
    ParamVector::from_values(rec.layout.clone(), grads.wrt(rec.leaf).into_data())
}

/// Max over coordinates of `|g_ad − g_fd| / max(|g_fd|, 1e-4·‖g_fd‖∞, 1e-8)`
/// with central differences of width `step`. The floor keeps coordinates
/// that are zero up to round-off from dominating.
pub fn finite_diff_check(program: &dyn Program, inputs: &ParamVector, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let (_, rec) = forward_record(program, inputs)?;
    if let Some(&(node, op)) = rec.tape.kinks().first() {
        return Err(Error::Nondifferentiable { node, op });
    }
    let grad = backward(&rec)?;
    let eval = |p: &ParamVector| -> Result<f64> {
        let (v, _) = forward_record(program, p)?;
        if v.len() != 1 {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut probe = inputs.clone();
    let mut fd = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let x = inputs.values()[i];
        probe.values_mut()[i] = x + step;
        let up = eval(&probe)?;
        probe.values_mut()[i] = x - step;
        let down = eval(&probe)?;
        probe.values_mut()[i] = x;
        fd.push((up - down) / (2.0 * step));
    }
    let floor = (1e-4 * fd.iter().fold(0.0_f64, |m, g| m.max(g.abs()))).max(1e-8);
    Ok(fd
        .iter()
        .zip(grad.values())
        .map(|(f, g)| (g - f).abs() / f.abs().max(floor))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

/// A parsed arithmetic program over named parameter segments.
///
/// Grammar: `+ - * / ∘`, unary minus, parentheses, numeric literals,
/// segment names, and calls to `add mul matmul tanh exp log sum dot
/// reciprocal abs logabsdet`.
#[derive(Clone, Debug)]
pub struct Expr {
    source: String,
    toks: Vec<(usize, Tok)>,
}

const FUNCTIONS: &[&str] = &[
    "add", "mul", "matmul", "tanh", "exp", "log", "sum", "dot", "reciprocal", "abs", "logabsdet",
];

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let mut toks = Vec::new();
        let chars: Vec<(usize, char)> = source.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let (pos, c) = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || c == '.' {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || matches!(chars[i].1, '.' | 'e' | 'E')) {
                    i += 1;
                }
                let text: String = chars[start..i].iter().map(|(_, c)| c).collect();
                let v = text.parse().map_err(|_| Error::Parse {
                    pos,
                    msg: format!("bad number `{text}`"),
                })?;
                toks.push((pos, Tok::Num(v)));
            } else if c.is_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].1.is_alphanumeric() || matches!(chars[i].1, '_' | '.')) {
                    i += 1;
                }
                toks.push((pos, Tok::Ident(chars[start..i].iter().map(|(_, c)| c).collect())));
            } else if "+-*/(),∘".contains(c) {
                toks.push((pos, Tok::Sym(if c == '∘' { '*' } else { c })));
                i += 1;
            } else {
                return Err(Error::Parse {
                    pos,
                    msg: format!("unexpected character `{c}`"),
                });
            }
        }
        // Reject unknown calls up front so a bad program never reaches a tape.
        for w in toks.windows(2) {
            if let [(_, Tok::Ident(name)), (_, Tok::Sym('('))] = w {
                if !FUNCTIONS.contains(&name.as_str()) {
                    return Err(Error::UnsupportedPrimitive(name.clone()));
                }
            }
        }
        Ok(Self {
            source: source.to_string(),
            toks,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

struct Parser<'a, 'b> {
    toks: &'a [(usize, Tok)],
    pos: usize,
    tape: &'a mut Tape,
    params: &'a Bound<'b>,
}

impl Parser<'_, '_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(usize::MAX, |(p, _)| *p)
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == Some(&Tok::Sym(c)) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Parse {
                pos: self.here(),
                msg: format!("expected `{c}`"),
            })
        }
    }

    fn expr(&mut self) -> Result<Var> {
        let mut lhs = self.term()?;
        while let Some(Tok::Sym(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' {
                self.tape.add(lhs, rhs)?
            } else {
                self.tape.sub(lhs, rhs)?
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Var> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Sym(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == '*' {
                self.tape.mul(lhs, rhs)?
            } else {
                self.tape.div(lhs, rhs)?
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Var> {
        if self.peek() == Some(&Tok::Sym('-')) {
            self.pos += 1;
            let v = self.unary()?;
            return self.tape.neg(v);
        }
        self.atom()
    }

    fn args(&mut self) -> Result<Vec<Var>> {
        self.expect('(')?;
        let mut out = vec![self.expr()?];
        while self.peek() == Some(&Tok::Sym(',')) {
            self.pos += 1;
            out.push(self.expr()?);
        }
        self.expect(')')?;
        Ok(out)
    }

    fn call(&mut self, name: &str, pos: usize) -> Result<Var> {
        let args = self.args()?;
        let arity = |n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::Parse {
                    pos,
                    msg: format!("`{name}` takes {n} argument(s)"),
                })
            }
        };
        match name {
            "add" | "mul" | "matmul" | "dot" => {
                arity(2)?;
                let (a, b) = (args[0], args[1]);
                match name {
                    "add" => self.tape.add(a, b),
                    "mul" => self.tape.mul(a, b),
                    "matmul" => self.tape.matmul(a, b),
                    _ => self.tape.dot(a, b),
                }
            }
            _ => {
                arity(1)?;
                let a = args[0];
                match name {
                    "tanh" => self.tape.tanh(a),
                    "exp" => self.tape.exp(a),
                    "log" => self.tape.log(a),
                    "sum" => self.tape.sum(a),
                    "reciprocal" => self.tape.recip(a),
                    "abs" => self.tape.abs(a),
                    "logabsdet" => {
                        let d = self.tape.shape(a).first().copied().unwrap_or(1);
                        self.tape.logabsdet_tri(a, d)
                    }
                    other => Err(Error::UnsupportedPrimitive(other.to_string())),
                }
            }
        }
    }

    fn atom(&mut self) -> Result<Var> {
        let pos = self.here();
        match self.toks.get(self.pos).map(|(_, t)| t.clone()) {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                self.tape.scalar(v)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::Sym('(')) {
                    self.call(&name, pos)
                } else {
                    self.params.segment(self.tape, &name)
                }
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let v = self.expr()?;
                self.expect(')')?;
                Ok(v)
            }
            _ => Err(Error::Parse {
                pos,
                msg: "expected a value".into(),
            }),
        }
    }
}

impl Program for Expr {
    fn record(&self, tape: &mut Tape, params: &Bound<'_>) -> Result<Var> {
        let mut p = Parser {
            toks: &self.toks,
            pos: 0,
            tape,
            params,
        };
        let v = p.expr()?;
        if p.pos != self.toks.len() {
            return Err(Error::Parse {
                pos: p.here(),
                msg: "trailing input".into(),
            });
        }
        Ok(v)
    }
}
