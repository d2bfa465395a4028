//! Reference interpreter for steering expressions.
//!
//! Deliberately shares no code with `prodkit::expr`: forms are expanded by
//! repeatedly rewriting the leftmost innermost form in a token buffer,
//! arithmetic goes through a shunting-yard evaluator, and `$sprintf` is
//! delegated to the C library's `snprintf`.

use std::collections::BTreeMap;
use std::ffi::{CStr, CString};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RefCtx {
    pub args: BTreeMap<String, String>,
    pub steering: BTreeMap<String, String>,
    pub system: BTreeMap<String, String>,
    pub seed: u64,
    pub max_depth: usize,
}

/// Error kinds, named the same way as `prodkit::expr::ExprError::kind`.
pub type Kind = &'static str;

const FUNCS: [&str; 6] = ["args", "steering", "system", "eval", "sprintf", "choice"];

#[derive(Clone, Debug)]
enum Tok {
    Lit(char),
    Dollar,
    Open { name: String, level: usize },
    Close,
    LParen,
    RParen,
    Comma,
    Quoted(String),
    Val(String),
}

struct State {
    choices: u64,
}

pub fn reference_eval(text: &str, ctx: &RefCtx) -> Result<String, Kind> {
    let mut st = State { choices: 0 };
    expand(text, 1, ctx, &mut st)
}

fn expand(text: &str, base: usize, ctx: &RefCtx, st: &mut State) -> Result<String, Kind> {
    let mut toks = tokenize(text, base)?;
    if let Some(max) = toks
        .iter()
        .filter_map(|t| match t {
            Tok::Open { level, .. } => Some(*level),
            _ => None,
        })
        .max()
    {
        if max > ctx.max_depth {
            return Err("RecursionLimit");
        }
    }
    loop {
        let Some(close) = toks.iter().position(|t| matches!(t, Tok::Close)) else {
            break;
        };
        let open = toks[..close]
            .iter()
            .rposition(|t| matches!(t, Tok::Open { .. }))
            .expect("close without open");
        let (name, level) = match &toks[open] {
            Tok::Open { name, level } => (name.clone(), *level),
            _ => unreachable!(),
        };
        let args = split_args(&toks[open + 1..close]);
        let value = apply(&name, level, args, ctx, st)?;
        toks.splice(open..=close, [Tok::Val(value)]);
    }
    let mut out = String::new();
    for t in toks {
        match t {
            Tok::Lit(c) => out.push(c),
            Tok::Dollar => out.push('$'),
            Tok::Val(v) => out.push_str(&v),
            other => panic!("leftover token {other:?}"),
        }
    }
    Ok(out)
}

fn ident_at(chars: &[char], i: usize) -> Option<usize> {
    // returns index one past the identifier starting at i
    let first = *chars.get(i)?;
    if !(first.is_ascii_alphabetic() || first == '_') {
        return None;
    }
    let mut j = i + 1;
    while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
        j += 1;
    }
    Some(j)
}

fn tokenize(text: &str, base: usize) -> Result<Vec<Tok>, Kind> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
    // stack entries: number of bare parens open inside each open form
    let mut forms: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '$' {
            if chars.get(i + 1) == Some(&'$') {
                toks.push(Tok::Dollar);
                i += 2;
                continue;
            }
            if let Some(end) = ident_at(&chars, i + 1) {
                if chars.get(end) == Some(&'(') {
                    let name: String = chars[i + 1..end].iter().collect();
                    if !FUNCS.contains(&name.as_str()) {
                        return Err("UnknownFunction");
                    }
                    toks.push(Tok::Open {
                        name,
                        level: base + forms.len(),
                    });
                    forms.push(0);
                    i = end + 1;
                    continue;
                }
            }
            toks.push(Tok::Lit('$'));
            i += 1;
            continue;
        }
        if forms.is_empty() {
            toks.push(Tok::Lit(c));
            i += 1;
            continue;
        }
        match c {
            '\'' | '"' => {
                let rest = &chars[i + 1..];
                let Some(len) = rest.iter().position(|&x| x == c) else {
                    return Err("Syntax");
                };
                toks.push(Tok::Quoted(rest[..len].iter().collect()));
                i += len + 2;
            }
            '(' => {
                *forms.last_mut().unwrap() += 1;
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                let depth = forms.last_mut().unwrap();
                if *depth > 0 {
                    *depth -= 1;
                    toks.push(Tok::RParen);
                } else {
                    forms.pop();
                    toks.push(Tok::Close);
                }
                i += 1;
            }
            ',' if *forms.last().unwrap() == 0 => {
                toks.push(Tok::Comma);
                i += 1;
            }
            _ => {
                toks.push(Tok::Lit(c));
                i += 1;
            }
        }
    }
    if !forms.is_empty() {
        return Err("Syntax");
    }
    Ok(toks)
}

#[derive(Clone, Debug)]
pub struct RefArg {
    pub text: String,
    pub quoted: bool,
}

fn split_args(toks: &[Tok]) -> Vec<RefArg> {
    let mut groups: Vec<Vec<&Tok>> = vec![Vec::new()];
    for t in toks {
        if matches!(t, Tok::Comma) {
            groups.push(Vec::new());
        } else {
            groups.last_mut().unwrap().push(t);
        }
    }
    let mut args = Vec::new();
    for g in &groups {
        let is_ws = |t: &&Tok| matches!(t, Tok::Lit(c) if c.is_ascii_whitespace());
        let start = g.iter().position(|t| !is_ws(t)).unwrap_or(g.len());
        let end = g.iter().rposition(|t| !is_ws(t)).map(|p| p + 1).unwrap_or(start);
        let core = &g[start..end.max(start)];
        let quoted = core.len() == 1 && matches!(core[0], Tok::Quoted(_));
        let mut text = String::new();
        for t in core {
            match t {
                Tok::Lit(c) => text.push(*c),
                Tok::Dollar => text.push('$'),
                Tok::LParen => text.push('('),
                Tok::RParen => text.push(')'),
                Tok::Quoted(s) | Tok::Val(s) => text.push_str(s),
                other => panic!("unexpected {other:?} in argument"),
            }
        }
        args.push((RefArg { text, quoted }, core.is_empty()));
    }
    if args.len() == 1 && args[0].1 {
        return Vec::new();
    }
    args.into_iter().map(|(a, _)| a).collect()
}

fn one(args: &[RefArg]) -> Result<&str, Kind> {
    if args.len() != 1 {
        return Err("BadArity");
    }
    Ok(&args[0].text)
}

fn apply(
    name: &str,
    level: usize,
    args: Vec<RefArg>,
    ctx: &RefCtx,
    st: &mut State,
) -> Result<String, Kind> {
    match name {
        "args" => ctx.args.get(one(&args)?).cloned().ok_or("UnknownVariable"),
        "system" => ctx.system.get(one(&args)?).cloned().ok_or("UnknownVariable"),
        "steering" => {
            let raw = ctx.steering.get(one(&args)?).ok_or("UnknownVariable")?;
            expand(raw, level + 1, ctx, st)
        }
        "eval" => arith(one(&args)?).map(|v| v.render()),
        "sprintf" => {
            if args.is_empty() {
                return Err("BadArity");
            }
            c_sprintf(&args[0].text, &args[1..])
        }
        "choice" => {
            if args.is_empty() {
                return Err("EmptyList");
            }
            let idx = st.choices;
            st.choices += 1;
            let k = pick(ctx, idx, args.len());
            Ok(args[k].text.clone())
        }
        _ => Err("UnknownFunction"),
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn pick(ctx: &RefCtx, idx: u64, n: usize) -> usize {
    let ds = ctx.args.get("dataset").map(String::as_str).unwrap_or("");
    let pn = ctx.args.get("procnum").map(String::as_str).unwrap_or("");
    let mut h = ctx.seed;
    h = mix(h ^ fnv(ds));
    h = mix(h ^ fnv(pn));
    h = mix(h ^ idx);
    ChaCha8Rng::seed_from_u64(h).gen_range(0..n)
}

// ---------------------------------------------------------------------------
// arithmetic: shunting-yard

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Num {
    I(i64),
    F(f64),
    B(bool),
}

impl Num {
    fn render(self) -> String {
        match self {
            Num::I(i) => i.to_string(),
            Num::B(b) => b.to_string(),
            Num::F(f) => render_float(f),
        }
    }
    fn truthy(self) -> bool {
        match self {
            Num::I(i) => i != 0,
            Num::F(f) => f != 0.0,
            Num::B(b) => b,
        }
    }
    fn arith(self) -> Num {
        match self {
            Num::B(b) => Num::I(b as i64),
            x => x,
        }
    }
    fn as_f(self) -> f64 {
        match self.arith() {
            Num::I(i) => i as f64,
            Num::F(f) => f,
            Num::B(_) => unreachable!(),
        }
    }
}

/// Shortest round-trip digits found by increasing the precision until
/// the text parses back to the same value.
pub fn render_float(f: f64) -> String {
    if f == 0.0 {
        return if f.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let mut sci = String::new();
    for p in 0..17 {
        sci = format!("{:.*e}", p, f);
        if sci.parse::<f64>().unwrap() == f {
            break;
        }
    }
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };
    let sign = if neg { "-" } else { "" };
    if (-5..16).contains(&exp) {
        let body = if exp >= 0 {
            let e = exp as usize;
            if digits.len() > e + 1 {
                format!("{}.{}", &digits[..e + 1], &digits[e + 1..])
            } else {
                format!("{}{}.0", digits, "0".repeat(e + 1 - digits.len()))
            }
        } else {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        };
        format!("{sign}{body}")
    } else if digits.len() == 1 {
        format!("{sign}{digits}e{exp}")
    } else {
        format!("{sign}{}.{}e{exp}", &digits[..1], &digits[1..])
    }
}

#[derive(Clone, Debug, PartialEq)]
enum AT {
    Num(Num),
    Op(&'static str),
    LP,
    RP,
}

fn lex(src: &str) -> Result<Vec<AT>, Kind> {
    let b: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && b.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            let mut float = false;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i < b.len() && b[i] == '.' {
                float = true;
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < b.len() && (b[i] == 'e' || b[i] == 'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == '+' || b[j] == '-') {
                    j += 1;
                }
                if j < b.len() && b[j].is_ascii_digit() {
                    float = true;
                    i = j;
                    while i < b.len() && b[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = b[start..i].iter().collect();
            if float {
                out.push(AT::Num(Num::F(s.parse().map_err(|_| "EvalSyntax")?)));
            } else {
                match s.parse::<i64>() {
                    Ok(v) => out.push(AT::Num(Num::I(v))),
                    Err(_) => out.push(AT::Num(Num::F(s.parse().map_err(|_| "EvalSyntax")?))),
                }
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == '_') {
                i += 1;
            }
            let w: String = b[start..i].iter().collect();
            out.push(match w.as_str() {
                "and" => AT::Op("and"),
                "or" => AT::Op("or"),
                "not" => AT::Op("not"),
                "true" | "True" => AT::Num(Num::B(true)),
                "false" | "False" => AT::Num(Num::B(false)),
                _ => return Err("EvalRejected"),
            });
            continue;
        }
        let two: String = b[i..(i + 2).min(b.len())].iter().collect();
        let op2 = ["**", "<=", ">=", "==", "!="].into_iter().find(|o| *o == two);
        if let Some(o) = op2 {
            out.push(AT::Op(o));
            i += 2;
            continue;
        }
        let t = match c {
            '+' => AT::Op("+"),
            '-' => AT::Op("-"),
            '*' => AT::Op("*"),
            '/' => AT::Op("/"),
            '%' => AT::Op("%"),
            '<' => AT::Op("<"),
            '>' => AT::Op(">"),
            '(' => AT::LP,
            ')' => AT::RP,
            _ => return Err("EvalRejected"),
        };
        out.push(t);
        i += 1;
    }
    Ok(out)
}

fn prec(op: &str) -> (u8, bool) {
    // (precedence, right associative)
    match op {
        "or" => (1, false),
        "and" => (2, false),
        "not" => (3, true),
        "<" | "<=" | ">" | ">=" | "==" | "!=" => (4, false),
        "+" | "-" => (5, false),
        "*" | "/" | "%" => (6, false),
        "neg" | "pos" => (7, true),
        "**" => (8, true),
        _ => unreachable!("{op}"),
    }
}

fn is_prefix(op: &str) -> bool {
    matches!(op, "not" | "neg" | "pos")
}

pub fn arith(src: &str) -> Result<Num, Kind> {
    let toks = lex(src)?;
    let mut output: Vec<Num> = Vec::new();
    let mut ops: Vec<&'static str> = Vec::new(); // "(" marks a paren
    // expect_operand: true when the next token must start an operand
    let mut expect_operand = true;
    let mut prev: Option<&'static str> = None; // previous operator token (None at start / after "(")
    for t in toks {
        match t {
            AT::Num(n) => {
                if !expect_operand {
                    return Err("EvalSyntax");
                }
                output.push(n);
                expect_operand = false;
            }
            AT::LP => {
                if !expect_operand {
                    return Err("EvalSyntax");
                }
                ops.push("(");
                prev = None;
            }
            AT::RP => {
                if expect_operand {
                    return Err("EvalSyntax");
                }
                loop {
                    match ops.pop() {
                        Some("(") => break,
                        Some(op) => reduce(op, &mut output)?,
                        None => return Err("EvalSyntax"),
                    }
                }
            }
            AT::Op(o) => {
                let op = if expect_operand {
                    match o {
                        "-" => "neg",
                        "+" => "pos",
                        "not" => {
                            // `not` only heads a boolean operand
                            if !matches!(prev, None | Some("and") | Some("or") | Some("not")) {
                                return Err("EvalSyntax");
                            }
                            "not"
                        }
                        _ => return Err("EvalSyntax"),
                    }
                } else {
                    if o == "not" {
                        return Err("EvalSyntax");
                    }
                    o
                };
                if !is_prefix(op) {
                    let (p, right) = prec(op);
                    while let Some(&top) = ops.last() {
                        if top == "(" {
                            break;
                        }
                        let (tp, _) = prec(top);
                        if tp > p || (tp == p && !right) {
                            reduce(top, &mut output)?;
                            ops.pop();
                        } else {
                            break;
                        }
                    }
                }
                // a prefix operator after `**` binds to the exponent only;
                // one after a comparison or arithmetic operator is fine too,
                // except `not`, which was already screened above.
                ops.push(op);
                prev = Some(op);
                expect_operand = true;
            }
        }
    }
    if expect_operand {
        return Err("EvalSyntax");
    }
    while let Some(op) = ops.pop() {
        if op == "(" {
            return Err("EvalSyntax");
        }
        reduce(op, &mut output)?;
    }
    if output.len() != 1 {
        return Err("EvalSyntax");
    }
    let v = output.pop().unwrap();
    if let Num::F(f) = v {
        if !f.is_finite() {
            return Err("NonFinite");
        }
    }
    Ok(v)
}

fn finite(f: f64) -> Result<Num, Kind> {
    if f.is_finite() {
        Ok(Num::F(f))
    } else {
        Err("NonFinite")
    }
}

fn reduce(op: &str, out: &mut Vec<Num>) -> Result<(), Kind> {
    if is_prefix(op) {
        let a = out.pop().ok_or("EvalSyntax")?;
        let r = match op {
            "not" => Num::B(!a.truthy()),
            "pos" => a.arith(),
            _ => match a.arith() {
                Num::I(i) => i.checked_neg().map(Num::I).unwrap_or(Num::F(-(i as f64))),
                Num::F(f) => Num::F(-f),
                Num::B(_) => unreachable!(),
            },
        };
        out.push(r);
        return Ok(());
    }
    let b = out.pop().ok_or("EvalSyntax")?;
    let a = out.pop().ok_or("EvalSyntax")?;
    let r = match op {
        "and" => Num::B(a.truthy() && b.truthy()),
        "or" => Num::B(a.truthy() || b.truthy()),
        "<" => Num::B(cmp(a, b) == Some(std::cmp::Ordering::Less)),
        "<=" => Num::B(matches!(cmp(a, b), Some(std::cmp::Ordering::Less | std::cmp::Ordering::Equal))),
        ">" => Num::B(cmp(a, b) == Some(std::cmp::Ordering::Greater)),
        ">=" => Num::B(matches!(cmp(a, b), Some(std::cmp::Ordering::Greater | std::cmp::Ordering::Equal))),
        "==" => Num::B(cmp(a, b) == Some(std::cmp::Ordering::Equal)),
        "!=" => Num::B(cmp(a, b) != Some(std::cmp::Ordering::Equal)),
        _ => num_op(op, a.arith(), b.arith())?,
    };
    if let Num::F(f) = r {
        finite(f)?;
    }
    out.push(r);
    Ok(())
}

fn cmp(a: Num, b: Num) -> Option<std::cmp::Ordering> {
    match (a.arith(), b.arith()) {
        (Num::I(x), Num::I(y)) => Some(x.cmp(&y)),
        (x, y) => x.as_f().partial_cmp(&y.as_f()),
    }
}

fn num_op(op: &str, a: Num, b: Num) -> Result<Num, Kind> {
    if let (Num::I(x), Num::I(y)) = (a, b) {
        return match op {
            "+" => Ok(x.checked_add(y).map(Num::I).unwrap_or(Num::F(x as f64 + y as f64))),
            "-" => Ok(x.checked_sub(y).map(Num::I).unwrap_or(Num::F(x as f64 - y as f64))),
            "*" => Ok(x.checked_mul(y).map(Num::I).unwrap_or(Num::F(x as f64 * y as f64))),
            "/" => {
                if y == 0 {
                    return Err("DivisionByZero");
                }
                match x.checked_rem(y) {
                    Some(0) => Ok(x.checked_div(y).map(Num::I).unwrap_or(Num::F(x as f64 / y as f64))),
                    _ => Ok(Num::F(x as f64 / y as f64)),
                }
            }
            "%" => {
                if y == 0 {
                    return Err("DivisionByZero");
                }
                let r = x.checked_rem(y).unwrap_or(0);
                Ok(Num::I(if r != 0 && ((r < 0) != (y < 0)) { r + y } else { r }))
            }
            "**" => {
                if y >= 0 {
                    match u32::try_from(y).ok().and_then(|e| x.checked_pow(e)) {
                        Some(v) => Ok(Num::I(v)),
                        None => finite((x as f64).powf(y as f64)),
                    }
                } else if x == 0 {
                    Err("DivisionByZero")
                } else {
                    finite((x as f64).powf(y as f64))
                }
            }
            _ => unreachable!(),
        };
    }
    let (x, y) = (a.as_f(), b.as_f());
    match op {
        "+" => finite(x + y),
        "-" => finite(x - y),
        "*" => finite(x * y),
        "/" => {
            if y == 0.0 {
                return Err("DivisionByZero");
            }
            finite(x / y)
        }
        "%" => {
            if y == 0.0 {
                return Err("DivisionByZero");
            }
            let r = x % y;
            finite(if r != 0.0 && ((r < 0.0) != (y < 0.0)) { r + y } else { r })
        }
        "**" => {
            if x == 0.0 && y < 0.0 {
                return Err("DivisionByZero");
            }
            finite(x.powf(y))
        }
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// sprintf via the C library

enum CArg {
    I(i64),
    F(f64),
    S(String),
}

fn is_int_text(s: &str) -> bool {
    let t = s.strip_prefix(['+', '-']).unwrap_or(s);
    !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) && s.parse::<i64>().is_ok()
}

fn is_float_text(s: &str) -> bool {
    let t = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (m, e) = match t.find(['e', 'E']) {
        Some(p) => (&t[..p], Some(&t[p + 1..])),
        None => (t, None),
    };
    let m_ok = match m.split_once('.') {
        Some((a, b)) => {
            (!a.is_empty() || !b.is_empty())
                && a.bytes().all(|x| x.is_ascii_digit())
                && b.bytes().all(|x| x.is_ascii_digit())
        }
        None => !m.is_empty() && m.bytes().all(|x| x.is_ascii_digit()),
    };
    let e_ok = match e {
        None => true,
        Some(e) => {
            let e = e.strip_prefix(['+', '-']).unwrap_or(e);
            !e.is_empty() && e.bytes().all(|x| x.is_ascii_digit())
        }
    };
    m_ok && e_ok
}

fn typed(a: &RefArg) -> CArg {
    if a.quoted {
        CArg::S(a.text.clone())
    } else if is_int_text(&a.text) {
        CArg::I(a.text.parse().unwrap())
    } else if is_float_text(&a.text) {
        CArg::F(a.text.parse().unwrap())
    } else {
        CArg::S(a.text.clone())
    }
}

fn snprintf_one(spec: &str, arg: &CArg) -> String {
    let mut buf = vec![0u8; 4096];
    let fmt = CString::new(spec).unwrap();
    let n = unsafe {
        match arg {
            CArg::I(i) => libc::snprintf(buf.as_mut_ptr() as *mut libc::c_char, buf.len(), fmt.as_ptr(), *i as libc::c_longlong),
            CArg::F(f) => libc::snprintf(buf.as_mut_ptr() as *mut libc::c_char, buf.len(), fmt.as_ptr(), *f),
            CArg::S(s) => {
                let cs = CString::new(s.as_str()).unwrap();
                libc::snprintf(buf.as_mut_ptr() as *mut libc::c_char, buf.len(), fmt.as_ptr(), cs.as_ptr())
            }
        }
    };
    assert!(n >= 0 && (n as usize) < buf.len());
    unsafe { CStr::from_ptr(buf.as_ptr() as *const libc::c_char) }
        .to_string_lossy()
        .into_owned()
}

pub fn c_sprintf(fmt: &str, args: &[RefArg]) -> Result<String, Kind> {
    let b: Vec<char> = fmt.chars().collect();
    let mut out = String::new();
    let mut next = 0usize;
    let mut i = 0;
    while i < b.len() {
        if b[i] != '%' {
            out.push(b[i]);
            i += 1;
            continue;
        }
        if b.get(i + 1) == Some(&'%') {
            out.push('%');
            i += 2;
            continue;
        }
        let mut j = i + 1;
        let mut flags = String::new();
        while j < b.len() && "-0+ ".contains(b[j]) {
            flags.push(b[j]);
            j += 1;
        }
        let mut width = String::new();
        while j < b.len() && b[j].is_ascii_digit() {
            width.push(b[j]);
            j += 1;
        }
        let mut precision = String::new();
        if j < b.len() && b[j] == '.' {
            precision.push('.');
            j += 1;
            while j < b.len() && b[j].is_ascii_digit() {
                precision.push(b[j]);
                j += 1;
            }
        }
        let Some(&conv) = b.get(j) else {
            return Err("FormatError");
        };
        if !"dixofes".contains(conv) {
            return Err("FormatError");
        }
        let Some(arg) = args.get(next) else {
            return Err("FormatError");
        };
        next += 1;
        let arg = typed(arg);
        let spec_core = format!("%{flags}{width}{precision}");
        let piece = match (conv, arg) {
            ('d' | 'i' | 'x' | 'o', CArg::I(v)) => snprintf_one(&format!("{spec_core}ll{conv}"), &CArg::I(v)),
            ('f' | 'e', CArg::I(v)) => snprintf_one(&format!("{spec_core}{conv}"), &CArg::F(v as f64)),
            ('f' | 'e', CArg::F(v)) => snprintf_one(&format!("{spec_core}{conv}"), &CArg::F(v)),
            ('s', a) => {
                let text = match a {
                    CArg::I(v) => v.to_string(),
                    CArg::F(v) => render_float(v),
                    CArg::S(s) => s,
                };
                let flags_s: String = flags.chars().filter(|c| *c == '-').collect();
                snprintf_one(&format!("%{flags_s}{width}{precision}s"), &CArg::S(text))
            }
            _ => return Err("FormatError"),
        };
        out.push_str(&piece);
        i = j + 1;
    }
    if next != args.len() {
        return Err("FormatError");
    }
    Ok(out)
}
