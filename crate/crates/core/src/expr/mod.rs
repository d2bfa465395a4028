//! Per-job specialization of steering text.
//!
//! The grammar is documented in `docs/expressions.md`. Text is parsed into
//! a small tree of literal pieces and `$name(...)` forms, the nesting depth
//! is checked against [`EvalContext::max_depth`], and forms are evaluated
//! innermost first. Nothing here performs I/O or calls into a host
//! evaluator.

mod arith;
mod format;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use arith::{eval_arith, Value};
pub use format::{render_float, sprintf, FormatArg};

use crate::par::Exec;
use crate::steering::{ParamValue, SteeringSpec};

pub const DEFAULT_MAX_DEPTH: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("unknown function ${0}")]
    UnknownFunction(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("expression nesting exceeds depth {0}")]
    RecursionLimit(usize),
    #[error("rejected in $eval: {0}")]
    EvalRejected(String),
    #[error("malformed $eval expression: {0}")]
    EvalSyntax(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite result")]
    NonFinite,
    #[error("format error: {0}")]
    FormatError(String),
    #[error("$choice of an empty list")]
    EmptyList,
    #[error("${function} takes {expected} argument(s), got {got}")]
    BadArity {
        function: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("syntax error: {0}")]
    Syntax(String),
}

impl ExprError {
    /// Stable name of the error class, independent of the message.
    pub fn kind(&self) -> &'static str {
        match self {
            ExprError::UnknownFunction(_) => "UnknownFunction",
            ExprError::UnknownVariable(_) => "UnknownVariable",
            ExprError::RecursionLimit(_) => "RecursionLimit",
            ExprError::EvalRejected(_) => "EvalRejected",
            ExprError::EvalSyntax(_) => "EvalSyntax",
            ExprError::DivisionByZero => "DivisionByZero",
            ExprError::NonFinite => "NonFinite",
            ExprError::FormatError(_) => "FormatError",
            ExprError::EmptyList => "EmptyList",
            ExprError::BadArity { .. } => "BadArity",
            ExprError::Syntax(_) => "Syntax",
        }
    }
}

/// Everything an expression may read.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub args: BTreeMap<String, String>,
    pub steering: BTreeMap<String, String>,
    pub system: BTreeMap<String, String>,
    pub rng_seed: u64,
    pub max_depth: usize,
}

impl EvalContext {
    /// Context for job `procnum` of a dataset with `nproc` jobs.
    pub fn for_job(dataset: i64, procnum: u64, nproc: u64) -> Self {
        let mut args = BTreeMap::new();
        args.insert("dataset".to_string(), dataset.to_string());
        args.insert("procnum".to_string(), procnum.to_string());
        args.insert("nproc".to_string(), nproc.to_string());
        EvalContext {
            args,
            steering: BTreeMap::new(),
            system: BTreeMap::new(),
            rng_seed: 0,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }

    pub fn with_steering(mut self, spec: &SteeringSpec) -> Self {
        self.steering = spec
            .parameters
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        self
    }

    pub fn with_system(mut self, system: BTreeMap<String, String>) -> Self {
        self.system = system;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Args,
    Steering,
    System,
    Eval,
    Sprintf,
    Choice,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "args" => Func::Args,
            "steering" => Func::Steering,
            "system" => Func::System,
            "eval" => Func::Eval,
            "sprintf" => Func::Sprintf,
            "choice" => Func::Choice,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Args => "args",
            Func::Steering => "steering",
            Func::System => "system",
            Func::Eval => "eval",
            Func::Sprintf => "sprintf",
            Func::Choice => "choice",
        }
    }
}

#[derive(Debug, Clone)]
enum Piece {
    Lit(String),
    Quoted(String),
    Form(Form),
}

#[derive(Debug, Clone)]
struct Form {
    func: Func,
    args: Vec<Arg>,
}

#[derive(Debug, Clone)]
struct Arg {
    pieces: Vec<Piece>,
    quoted: bool,
}

fn push_lit(pieces: &mut Vec<Piece>, c: char) {
    if let Some(Piece::Lit(s)) = pieces.last_mut() {
        s.push(c);
    } else {
        pieces.push(Piece::Lit(c.to_string()));
    }
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    _src: &'a str,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            chars: src.chars().collect(),
            pos: 0,
            _src: src,
        }
    }

    fn peek(&self, off: usize) -> Option<char> {
        self.chars.get(self.pos + off).copied()
    }

    /// At a `$`: `$$`, a form head, or neither.
    fn dollar(&mut self) -> Result<Option<Piece>, ExprError> {
        if self.peek(1) == Some('$') {
            self.pos += 2;
            return Ok(Some(Piece::Lit("$".into())));
        }
        let start = self.pos + 1;
        let mut end = start;
        match self.chars.get(end) {
            Some(c) if c.is_ascii_alphabetic() || *c == '_' => end += 1,
            _ => return Ok(None),
        }
        while matches!(self.chars.get(end), Some(c) if c.is_ascii_alphanumeric() || *c == '_') {
            end += 1;
        }
        if self.chars.get(end) != Some(&'(') {
            return Ok(None);
        }
        let name: String = self.chars[start..end].iter().collect();
        let func = Func::lookup(&name).ok_or(ExprError::UnknownFunction(name))?;
        self.pos = end + 1;
        let args = self.arglist()?;
        Ok(Some(Piece::Form(Form { func, args })))
    }

    fn text(&mut self) -> Result<Vec<Piece>, ExprError> {
        let mut pieces = Vec::new();
        while let Some(c) = self.peek(0) {
            if c == '$' {
                match self.dollar()? {
                    Some(Piece::Lit(s)) => s.chars().for_each(|c| push_lit(&mut pieces, c)),
                    Some(p) => pieces.push(p),
                    None => {
                        push_lit(&mut pieces, '$');
                        self.pos += 1;
                    }
                }
            } else {
                push_lit(&mut pieces, c);
                self.pos += 1;
            }
        }
        Ok(pieces)
    }

    /// Parses arguments up to and including the closing `)` of a form.
    fn arglist(&mut self) -> Result<Vec<Arg>, ExprError> {
        let mut args = Vec::new();
        let mut current: Vec<Piece> = Vec::new();
        let mut parens = 0usize;
        loop {
            let Some(c) = self.peek(0) else {
                return Err(ExprError::Syntax("unterminated form".into()));
            };
            match c {
                '$' => match self.dollar()? {
                    Some(Piece::Lit(s)) => s.chars().for_each(|c| push_lit(&mut current, c)),
                    Some(p) => current.push(p),
                    None => {
                        push_lit(&mut current, '$');
                        self.pos += 1;
                    }
                },
                '\'' | '"' => {
                    let start = self.pos + 1;
                    let len = self.chars[start..]
                        .iter()
                        .position(|&x| x == c)
                        .ok_or_else(|| ExprError::Syntax("unterminated quote".into()))?;
                    current.push(Piece::Quoted(self.chars[start..start + len].iter().collect()));
                    self.pos = start + len + 1;
                }
                '(' => {
                    parens += 1;
                    push_lit(&mut current, c);
                    self.pos += 1;
                }
                ')' if parens > 0 => {
                    parens -= 1;
                    push_lit(&mut current, c);
                    self.pos += 1;
                }
                ')' => {
                    self.pos += 1;
                    args.push(finish_arg(current));
                    break;
                }
                ',' if parens == 0 => {
                    self.pos += 1;
                    args.push(finish_arg(std::mem::take(&mut current)));
                }
                _ => {
                    push_lit(&mut current, c);
                    self.pos += 1;
                }
            }
        }
        if args.len() == 1 && args[0].pieces.is_empty() && !args[0].quoted {
            args.clear();
        }
        Ok(args)
    }
}

fn finish_arg(mut pieces: Vec<Piece>) -> Arg {
    let ws = |c: char| c.is_ascii_whitespace();
    if let Some(Piece::Lit(s)) = pieces.first_mut() {
        *s = s.trim_start_matches(ws).to_string();
        if s.is_empty() {
            pieces.remove(0);
        }
    }
    if let Some(Piece::Lit(s)) = pieces.last_mut() {
        *s = s.trim_end_matches(ws).to_string();
        if s.is_empty() {
            pieces.pop();
        }
    }
    let quoted = pieces.len() == 1 && matches!(pieces[0], Piece::Quoted(_));
    Arg { pieces, quoted }
}

fn nesting(pieces: &[Piece]) -> usize {
    pieces
        .iter()
        .map(|p| match p {
            Piece::Form(f) => 1 + f.args.iter().map(|a| nesting(&a.pieces)).max().unwrap_or(0),
            _ => 0,
        })
        .max()
        .unwrap_or(0)
}

/// One expansion run; owns the `$choice` call counter.
struct Expander<'c> {
    ctx: &'c EvalContext,
    choices: u64,
}

impl Expander<'_> {
    fn expand(&mut self, text: &str, base: usize) -> Result<String, ExprError> {
        let pieces = Parser::new(text).text()?;
        let depth = nesting(&pieces);
        if depth > 0 && base + depth - 1 > self.ctx.max_depth {
            return Err(ExprError::RecursionLimit(self.ctx.max_depth));
        }
        self.render(&pieces, base)
    }

    fn render(&mut self, pieces: &[Piece], level: usize) -> Result<String, ExprError> {
        let mut out = String::new();
        for p in pieces {
            match p {
                Piece::Lit(s) | Piece::Quoted(s) => out.push_str(s),
                Piece::Form(f) => out.push_str(&self.call(f, level)?),
            }
        }
        Ok(out)
    }

    fn call(&mut self, form: &Form, level: usize) -> Result<String, ExprError> {
        let mut args = Vec::with_capacity(form.args.len());
        for a in &form.args {
            args.push((self.render(&a.pieces, level + 1)?, a.quoted));
        }
        let single = |args: &[(String, bool)]| -> Result<String, ExprError> {
            match args {
                [(a, _)] => Ok(a.clone()),
                _ => Err(ExprError::BadArity {
                    function: form.func.name(),
                    expected: 1,
                    got: args.len(),
                }),
            }
        };
        match form.func {
            Func::Args => {
                let name = single(&args)?;
                self.ctx.args.get(&name).cloned().ok_or(ExprError::UnknownVariable(name))
            }
            Func::System => {
                let name = single(&args)?;
                self.ctx.system.get(&name).cloned().ok_or(ExprError::UnknownVariable(name))
            }
            Func::Steering => {
                let name = single(&args)?;
                let raw = self.ctx.steering.get(&name).ok_or(ExprError::UnknownVariable(name))?;
                self.expand(raw, level + 1)
            }
            Func::Eval => Ok(eval_arith(&single(&args)?)?.to_string()),
            Func::Sprintf => match args.split_first() {
                Some(((fmt, _), rest)) => {
                    let typed: Vec<FormatArg> = rest
                        .iter()
                        .map(|(text, quoted)| {
                            if *quoted {
                                FormatArg::Str(text.clone())
                            } else {
                                FormatArg::from_text(text.clone())
                            }
                        })
                        .collect();
                    sprintf(fmt, &typed)
                }
                None => Err(ExprError::BadArity {
                    function: "sprintf",
                    expected: 1,
                    got: 0,
                }),
            },
            Func::Choice => {
                let items: Vec<String> = args.into_iter().map(|(text, _)| text).collect();
                let index = self.choices;
                self.choices += 1;
                choice(&items, self.ctx, index)
            }
        }
    }
}

/// Expands every form in `text`.
pub fn evaluate(text: &str, ctx: &EvalContext) -> Result<String, ExprError> {
    if !text.contains('$') {
        return Ok(text.to_string());
    }
    Expander { ctx, choices: 0 }.expand(text, 1)
}

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic pick for the `call_index`-th `$choice` of an expansion.
pub fn choice(items: &[String], ctx: &EvalContext, call_index: u64) -> Result<String, ExprError> {
    if items.is_empty() {
        return Err(ExprError::EmptyList);
    }
    let arg = |k: &str| ctx.args.get(k).map(String::as_str).unwrap_or("");
    let mut h = ctx.rng_seed;
    h = splitmix(h ^ fnv1a64(arg("dataset")));
    h = splitmix(h ^ fnv1a64(arg("procnum")));
    h = splitmix(h ^ call_index);
    let k = ChaCha8Rng::seed_from_u64(h).gen_range(0..items.len());
    Ok(items[k].clone())
}

/// Returns a copy of `spec` with every steering and module parameter
/// expanded for the job described by `ctx`.
pub fn specialize(spec: &SteeringSpec, ctx: &EvalContext) -> Result<SteeringSpec, ExprError> {
    let mut out = spec.clone();
    for p in &mut out.parameters {
        p.value = evaluate(&p.value, ctx)?;
    }
    for tray in &mut out.trays {
        for module in &mut tray.modules {
            for param in &mut module.parameters {
                param.value = match &param.value {
                    ParamValue::Text(t) => ParamValue::Text(evaluate(t, ctx)?),
                    ParamValue::List(items) => ParamValue::List(
                        items.iter().map(|i| evaluate(i, ctx)).collect::<Result<_, _>>()?,
                    ),
                };
            }
        }
    }
    Ok(out)
}

/// Specializes `spec` for each listed job index.
pub fn specialize_jobs(
    spec: &SteeringSpec,
    base: &EvalContext,
    jobs: &[u64],
    exec: Exec,
) -> Vec<Result<SteeringSpec, ExprError>> {
    exec.map(jobs, |&job| {
        let mut ctx = base.clone();
        ctx.args.insert("procnum".to_string(), job.to_string());
        specialize(spec, &ctx)
    })
}
