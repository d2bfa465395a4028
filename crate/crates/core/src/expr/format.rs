//! C-style `$sprintf` and number rendering.

use super::ExprError;

/// A typed `$sprintf` argument.
#[derive(Debug, Clone, PartialEq)]
pub enum FormatArg {
    Int(i64),
    Float(f64),
    Str(String),
}

fn is_int_literal(s: &str) -> bool {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_float_literal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(p) => (&body[..p], Some(&body[p + 1..])),
        None => (body, None),
    };
    let all_digits = |t: &str| t.bytes().all(|b| b.is_ascii_digit());
    let mantissa_ok = match mantissa.split_once('.') {
        Some((a, b)) => (!a.is_empty() || !b.is_empty()) && all_digits(a) && all_digits(b),
        None => !mantissa.is_empty() && all_digits(mantissa),
    };
    let exponent_ok = exponent.map_or(true, |e| {
        let e = e.strip_prefix(['+', '-']).unwrap_or(e);
        !e.is_empty() && all_digits(e)
    });
    mantissa_ok && exponent_ok
}

impl FormatArg {
    /// Types unquoted text: integer, then decimal literal, else string.
    pub fn from_text(text: String) -> FormatArg {
        if is_int_literal(&text) {
            if let Ok(i) = text.parse() {
                return FormatArg::Int(i);
            }
        }
        if is_float_literal(&text) {
            if let Ok(x) = text.parse() {
                return FormatArg::Float(x);
            }
        }
        FormatArg::Str(text)
    }

    pub fn text(&self) -> String {
        match self {
            FormatArg::Int(i) => i.to_string(),
            FormatArg::Float(x) => render_float(*x),
            FormatArg::Str(s) => s.clone(),
        }
    }
}

impl From<&str> for FormatArg {
    fn from(s: &str) -> Self {
        FormatArg::Str(s.to_string())
    }
}

impl From<i64> for FormatArg {
    fn from(i: i64) -> Self {
        FormatArg::Int(i)
    }
}

impl From<f64> for FormatArg {
    fn from(x: f64) -> Self {
        FormatArg::Float(x)
    }
}

/// Shortest round-trip rendering; positional for decimal exponents in
/// `-5..16`, scientific otherwise.
pub fn render_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    // `{:e}` yields the shortest digits that parse back to `x`
    let sci = format!("{:e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    if (-5..16).contains(&exp) {
        let body = if exp >= 0 {
            let int_len = exp as usize + 1;
            if digits.len() > int_len {
                format!("{}.{}", &digits[..int_len], &digits[int_len..])
            } else {
                format!("{digits}{}.0", "0".repeat(int_len - digits.len()))
            }
        } else {
            format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
        };
        format!("{sign}{body}")
    } else {
        format!("{sign}{mantissa}e{exp}")
    }
}

#[derive(Debug, Default)]
struct Spec {
    left: bool,
    zero: bool,
    plus: bool,
    space: bool,
    width: usize,
    precision: Option<usize>,
    verb: char,
}

fn pad(spec: &Spec, sign: &str, body: &str, zero_ok: bool) -> String {
    let len = sign.chars().count() + body.chars().count();
    if len >= spec.width {
        return format!("{sign}{body}");
    }
    let fill = spec.width - len;
    if spec.left {
        format!("{sign}{body}{}", " ".repeat(fill))
    } else if spec.zero && zero_ok {
        format!("{sign}{}{body}", "0".repeat(fill))
    } else {
        format!("{}{sign}{body}", " ".repeat(fill))
    }
}

fn sign_of(spec: &Spec, negative: bool) -> &'static str {
    if negative {
        "-"
    } else if spec.plus {
        "+"
    } else if spec.space {
        " "
    } else {
        ""
    }
}

fn format_integer(spec: &Spec, v: i64) -> String {
    let (negative, mut digits) = match spec.verb {
        'x' => (false, format!("{:x}", v as u64)),
        'o' => (false, format!("{:o}", v as u64)),
        _ => (v < 0, v.unsigned_abs().to_string()),
    };
    if let Some(p) = spec.precision {
        if p == 0 && v == 0 {
            digits.clear();
        } else if digits.len() < p {
            digits = format!("{}{digits}", "0".repeat(p - digits.len()));
        }
    }
    let sign = if matches!(spec.verb, 'x' | 'o') {
        ""
    } else {
        sign_of(spec, negative)
    };
    pad(spec, sign, &digits, spec.precision.is_none())
}

fn format_real(spec: &Spec, x: f64) -> String {
    let sign = sign_of(spec, x.is_sign_negative() && !x.is_nan());
    if !x.is_finite() {
        let body = if x.is_nan() { "nan" } else { "inf" };
        return pad(spec, sign, body, false);
    }
    let p = spec.precision.unwrap_or(6);
    let body = if spec.verb == 'f' {
        format!("{:.*}", p, x.abs())
    } else {
        let s = format!("{:.*e}", p, x.abs());
        let (mantissa, exp) = s.split_once('e').expect("exponent");
        let exp: i32 = exp.parse().expect("exponent digits");
        let esign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{esign}{:02}", exp.unsigned_abs())
    };
    pad(spec, sign, &body, true)
}

fn format_string(spec: &Spec, s: &str) -> String {
    let body: String = match spec.precision {
        Some(p) => s.chars().take(p).collect(),
        None => s.to_string(),
    };
    pad(spec, "", &body, false)
}

/// Formats `args` with a C `printf` style format string.
pub fn sprintf(format: &str, args: &[FormatArg]) -> Result<String, ExprError> {
    let chars: Vec<char> = format.chars().collect();
    let mut out = String::new();
    let mut next = 0usize;
    let mut i = 0;
    while i < chars.len() {
        if chars[i] != '%' {
            out.push(chars[i]);
            i += 1;
            continue;
        }
        if chars.get(i + 1) == Some(&'%') {
            out.push('%');
            i += 2;
            continue;
        }
        let mut spec = Spec::default();
        i += 1;
        while let Some(&c) = chars.get(i) {
            match c {
                '-' => spec.left = true,
                '0' => spec.zero = true,
                '+' => spec.plus = true,
                ' ' => spec.space = true,
                _ => break,
            }
            i += 1;
        }
        while let Some(d) = chars.get(i).and_then(|c| c.to_digit(10)) {
            spec.width = spec.width * 10 + d as usize;
            i += 1;
        }
        if chars.get(i) == Some(&'.') {
            i += 1;
            let mut p = 0usize;
            while let Some(d) = chars.get(i).and_then(|c| c.to_digit(10)) {
                p = p * 10 + d as usize;
                i += 1;
            }
            spec.precision = Some(p);
        }
        spec.verb = match chars.get(i) {
            Some(&c @ ('d' | 'i' | 'x' | 'o' | 'f' | 'e' | 's')) => c,
            Some(c) => return Err(ExprError::FormatError(format!("unsupported verb %{c}"))),
            None => return Err(ExprError::FormatError("dangling %".into())),
        };
        i += 1;
        let arg = args.get(next).ok_or_else(|| {
            ExprError::FormatError(format!("{} argument(s) for more verbs", args.len()))
        })?;
        next += 1;
        let piece = match (spec.verb, arg) {
            ('d' | 'i' | 'x' | 'o', FormatArg::Int(v)) => format_integer(&spec, *v),
            ('f' | 'e', FormatArg::Int(v)) => format_real(&spec, *v as f64),
            ('f' | 'e', FormatArg::Float(x)) => format_real(&spec, *x),
            ('s', a) => format_string(&spec, &a.text()),
            (verb, a) => {
                return Err(ExprError::FormatError(format!("%{verb} cannot format {a:?}")));
            }
        };
        out.push_str(&piece);
    }
    if next != args.len() {
        return Err(ExprError::FormatError(format!(
            "{} verb(s) for {} argument(s)",
            next,
            args.len()
        )));
    }
    Ok(out)
}
