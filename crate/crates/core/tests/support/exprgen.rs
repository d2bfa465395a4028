//! Random expression texts for differential testing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::reference_expr::RefCtx;

pub fn steering_table() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("energy".into(), "1e3".into());
    m.insert("tag".into(), "run_$args(procnum)".into());
    m.insert("twice".into(), "$eval($args(procnum) * 2)".into());
    m.insert("chain".into(), "<$steering(tag)>".into());
    m.insert("self".into(), "x$steering(self)".into());
    m.insert("pick".into(), "$choice(a, b, c)".into());
    m.insert("comma".into(), "a,b)".into());
    m.insert("dollar".into(), "cost $$5".into());
    m
}

pub fn system_table() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("scratch".into(), "/tmp/scratch".into());
    m.insert("cores".into(), "8".into());
    m
}

pub fn context(rng: &mut ChaCha8Rng) -> RefCtx {
    let mut args = BTreeMap::new();
    args.insert("dataset".into(), rng.gen_range(1..50_000).to_string());
    args.insert("procnum".into(), rng.gen_range(0..1000).to_string());
    args.insert("nproc".into(), "1000".into());
    args.insert("neg".into(), "-7".into());
    args.insert("ratio".into(), "0.25".into());
    RefCtx {
        args,
        steering: steering_table(),
        system: system_table(),
        seed: rng.gen(),
        max_depth: 20,
    }
}

fn number(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..8) {
        0 => rng.gen_range(0..10).to_string(),
        1 => rng.gen_range(-1000..1000).to_string(),
        2 => format!("{}.{}", rng.gen_range(0..100), rng.gen_range(0..1000)),
        3 => format!("{}e{}", rng.gen_range(1..10), rng.gen_range(-8..20)),
        4 => "$args(procnum)".into(),
        5 => "$args(neg)".into(),
        6 => "$args(ratio)".into(),
        _ => i64::MAX.to_string(),
    }
}

pub fn arith(rng: &mut ChaCha8Rng, depth: u32) -> String {
    if depth == 0 || rng.gen_bool(0.3) {
        return match rng.gen_range(0..10) {
            0 => ["true", "false", "True", "False"].choose(rng).unwrap().to_string(),
            _ => number(rng),
        };
    }
    let a = arith(rng, depth - 1);
    let b = arith(rng, depth - 1);
    match rng.gen_range(0..16) {
        0 => format!("({a})"),
        1 => format!("-{a}"),
        2 => format!("not {a}"),
        3 => format!("{a} ** {}", rng.gen_range(-3..5)),
        _ => {
            let op = ["+", "-", "*", "/", "%", "<", "<=", ">", ">=", "==", "!=", "and", "or"]
                .choose(rng)
                .unwrap();
            format!("{a} {op} {b}")
        }
    }
}

fn fmt_arg(rng: &mut ChaCha8Rng) -> (String, String) {
    let flags = ["", "-", "0", "+", " ", "-+", "0+"].choose(rng).unwrap().to_string();
    let width = if rng.gen_bool(0.5) { rng.gen_range(1..12).to_string() } else { String::new() };
    let prec = if rng.gen_bool(0.4) { format!(".{}", rng.gen_range(0..8)) } else { String::new() };
    let verb = *['d', 'i', 'x', 'o', 'f', 'e', 's'].choose(rng).unwrap();
    let arg = match verb {
        'd' | 'i' | 'x' | 'o' => [rng.gen_range(-5000..5000).to_string(), "$args(procnum)".into()]
            .choose(rng)
            .unwrap()
            .clone(),
        'f' | 'e' => number(rng),
        _ => ["'quoted, text'".to_string(), "plain".into(), "$args(dataset)".into(), "12".into()]
            .choose(rng)
            .unwrap()
            .clone(),
    };
    // occasionally pair a verb with the wrong kind of argument
    let arg = if rng.gen_bool(0.05) { "'oops'".to_string() } else { arg };
    let prec = if verb == 's' && rng.gen_bool(0.5) { String::new() } else { prec };
    (format!("%{flags}{width}{prec}{verb}"), arg)
}

pub fn form(rng: &mut ChaCha8Rng, depth: u32) -> String {
    let inner = |rng: &mut ChaCha8Rng| -> String {
        if depth > 0 && rng.gen_bool(0.35) {
            form(rng, depth - 1)
        } else {
            ["x", "7", "-3", "2.5", "'a,b'", "\"(q)\"", "  pad  ", "$$"].choose(rng).unwrap().to_string()
        }
    };
    match rng.gen_range(0..24) {
        0..=3 => {
            let n = ["procnum", "dataset", "nproc", "neg", "ratio", "missing"].choose(rng).unwrap();
            format!("$args({n})")
        }
        4..=6 => {
            let n = ["energy", "tag", "twice", "chain", "pick", "comma", "dollar", "self", "nope"]
                .choose(rng)
                .unwrap();
            format!("$steering({n})")
        }
        7 => format!("$system({})", ["scratch", "cores", "gone"].choose(rng).unwrap()),
        8..=12 => {
            let d = rng.gen_range(0..4);
            format!("$eval({})", arith(rng, d))
        }
        13..=16 => {
            let n = rng.gen_range(0..3);
            let mut fmt = String::from("v");
            let mut args = Vec::new();
            for _ in 0..n {
                let (f, a) = fmt_arg(rng);
                fmt.push_str(&f);
                fmt.push('_');
                args.push(a);
            }
            if rng.gen_bool(0.1) {
                fmt.push_str("%%");
            }
            if rng.gen_bool(0.05) {
                args.push("extra".into());
            }
            let mut s = format!("$sprintf('{fmt}'");
            for a in args {
                s.push_str(", ");
                s.push_str(&a);
            }
            s.push(')');
            s
        }
        17..=19 => {
            let n = rng.gen_range(1..5);
            let items: Vec<String> = (0..n).map(|_| inner(rng)).collect();
            format!("$choice({})", items.join(", "))
        }
        20 => format!("$eval({})", ["import os", "x + 1", "'a' + 1", "1 +", "(2", "3 ; 4", "1 / 0", "10 ** 400.0"].choose(rng).unwrap()),
        21 => format!("$args({}, {})", inner(rng), inner(rng)),
        22 => format!("$nosuch({})", inner(rng)),
        _ => format!("$eval({} + 1)", form(rng, depth.saturating_sub(1))),
    }
}

/// A text mixing literal runs and forms.
pub fn text(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    for _ in 0..rng.gen_range(1..4) {
        match rng.gen_range(0..6) {
            0 => s.push_str(["run_", " ", "a,b", "(x)", "$HOME", "cost $5", "$$", "'q'"].choose(rng).unwrap()),
            _ => {
                let d = rng.gen_range(0..3);
                s.push_str(&form(rng, d));
            }
        }
    }
    if rng.gen_bool(0.01) {
        s.push_str("$eval(1");
    }
    s
}

/// A form nested `levels` deep through `$eval`.
pub fn nested(levels: usize) -> String {
    let mut s = "1".to_string();
    for _ in 0..levels {
        s = format!("$eval({s} + 1)");
    }
    s
}
