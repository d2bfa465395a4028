//! XML-RPC envelopes, and the equivalent JSON mapping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use base64::Engine;
use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;

use super::{Fault, Value};

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot decode envelope: {0}")]
pub struct DecodeError(pub String);

fn bad(msg: impl Into<String>) -> DecodeError {
    DecodeError(msg.into())
}

/// Body encodings a request may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Xml,
    Json,
}

impl Encoding {
    pub fn content_type(self) -> &'static str {
        match self {
            Encoding::Xml => "text/xml",
            Encoding::Json => "application/json",
        }
    }

    pub fn from_content_type(ct: Option<&str>) -> Encoding {
        match ct {
            Some(ct) if ct.to_ascii_lowercase().contains("json") => Encoding::Json,
            _ => Encoding::Xml,
        }
    }
}

fn escape_text(s: &str) -> String {
    escape(s).replace('\r', "&#13;")
}

fn write_value(out: &mut String, v: &Value) {
    out.push_str("<value>");
    match v {
        Value::Int(i) => {
            let _ = write!(out, "<i8>{i}</i8>");
        }
        Value::Float(f) => {
            let _ = write!(out, "<double>{f}</double>");
        }
        Value::Str(s) => {
            let _ = write!(out, "<string>{}</string>", escape_text(s));
        }
        Value::Bool(b) => {
            let _ = write!(out, "<boolean>{}</boolean>", *b as u8);
        }
        Value::Array(items) => {
            out.push_str("<array><data>");
            for item in items {
                write_value(out, item);
            }
            out.push_str("</data></array>");
        }
        Value::Struct(m) => {
            out.push_str("<struct>");
            for (k, v) in m {
                let _ = write!(out, "<member><name>{}</name>", escape_text(k));
                write_value(out, v);
                out.push_str("</member>");
            }
            out.push_str("</struct>");
        }
        Value::Binary(b) => {
            let _ = write!(out, "<base64>{}</base64>", B64.encode(b));
        }
    }
    out.push_str("</value>");
}

pub fn encode_call(method: &str, params: &[Value]) -> String {
    let mut out = String::from("<?xml version=\"1.0\"?>\n<methodCall><methodName>");
    out.push_str(&escape_text(method));
    out.push_str("</methodName><params>");
    for p in params {
        out.push_str("<param>");
        write_value(&mut out, p);
        out.push_str("</param>");
    }
    out.push_str("</params></methodCall>\n");
    out
}

pub fn encode_response(result: &Result<Value, Fault>) -> String {
    let mut out = String::from("<?xml version=\"1.0\"?>\n<methodResponse>");
    match result {
        Ok(v) => {
            out.push_str("<params><param>");
            write_value(&mut out, v);
            out.push_str("</param></params>");
        }
        Err(f) => {
            out.push_str("<fault>");
            let mut m = BTreeMap::new();
            m.insert("faultCode".to_string(), Value::Int(f.code as i64));
            m.insert("faultString".to_string(), Value::Str(f.message.clone()));
            write_value(&mut out, &Value::Struct(m));
            out.push_str("</fault>");
        }
    }
    out.push_str("</methodResponse>\n");
    out
}

#[derive(Debug, Default)]
struct Node {
    name: String,
    children: Vec<Node>,
    text: String,
}

fn parse_tree(text: &str) -> Result<Node, DecodeError> {
    let mut reader = Reader::from_str(text);
    let mut stack: Vec<Node> = Vec::new();
    let mut root = None;
    loop {
        match reader.read_event().map_err(|e| bad(e.to_string()))? {
            Event::Start(e) => stack.push(Node {
                name: String::from_utf8_lossy(e.name().as_ref()).into_owned(),
                ..Default::default()
            }),
            Event::Empty(e) => {
                let node = Node {
                    name: String::from_utf8_lossy(e.name().as_ref()).into_owned(),
                    ..Default::default()
                };
                match stack.last_mut() {
                    Some(p) => p.children.push(node),
                    None => root = Some(node),
                }
            }
            Event::End(_) => {
                let node = stack.pop().ok_or_else(|| bad("unbalanced end tag"))?;
                match stack.last_mut() {
                    Some(p) => p.children.push(node),
                    None => root = Some(node),
                }
            }
            Event::Text(t) => {
                let s = t.unescape().map_err(|e| bad(e.to_string()))?;
                if let Some(n) = stack.last_mut() {
                    n.text.push_str(&s);
                }
            }
            Event::CData(c) => {
                if let Some(n) = stack.last_mut() {
                    n.text.push_str(&String::from_utf8_lossy(&c.into_inner()));
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(bad("unclosed element"));
    }
    root.ok_or_else(|| bad("empty document"))
}

impl Node {
    fn child(&self, name: &str) -> Result<&Node, DecodeError> {
        self.children
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| bad(format!("<{}> lacks <{name}>", self.name)))
    }
}

fn read_value(node: &Node) -> Result<Value, DecodeError> {
    if node.name != "value" {
        return Err(bad(format!("expected <value>, found <{}>", node.name)));
    }
    let Some(inner) = node.children.first() else {
        // untyped value text is a string
        return Ok(Value::Str(node.text.clone()));
    };
    let t = inner.text.trim();
    Ok(match inner.name.as_str() {
        "int" | "i4" | "i8" => Value::Int(t.parse().map_err(|_| bad(format!("bad int {t:?}")))?),
        "double" => Value::Float(t.parse().map_err(|_| bad(format!("bad double {t:?}")))?),
        "string" => Value::Str(inner.text.clone()),
        "boolean" => match t {
            "1" | "true" => Value::Bool(true),
            "0" | "false" => Value::Bool(false),
            _ => return Err(bad(format!("bad boolean {t:?}"))),
        },
        "base64" => {
            let compact: String = t.chars().filter(|c| !c.is_ascii_whitespace()).collect();
            Value::Binary(B64.decode(compact).map_err(|e| bad(e.to_string()))?)
        }
        "array" => {
            let data = inner.child("data")?;
            Value::Array(data.children.iter().map(read_value).collect::<Result<_, _>>()?)
        }
        "struct" => {
            let mut m = BTreeMap::new();
            for member in &inner.children {
                if member.name != "member" {
                    return Err(bad("struct holds a non-member"));
                }
                let name = member.child("name")?.text.clone();
                m.insert(name, read_value(member.child("value")?)?);
            }
            Value::Struct(m)
        }
        other => return Err(bad(format!("unknown value type <{other}>"))),
    })
}

fn read_params(node: Option<&Node>) -> Result<Vec<Value>, DecodeError> {
    let Some(params) = node else { return Ok(Vec::new()) };
    params
        .children
        .iter()
        .map(|p| {
            if p.name != "param" {
                return Err(bad("params holds a non-param"));
            }
            read_value(p.child("value")?)
        })
        .collect()
}

pub fn decode_call(text: &str) -> Result<(String, Vec<Value>), DecodeError> {
    let root = parse_tree(text)?;
    if root.name != "methodCall" {
        return Err(bad("root is not <methodCall>"));
    }
    let method = root.child("methodName")?.text.trim().to_string();
    if method.is_empty() {
        return Err(bad("empty method name"));
    }
    let params = read_params(root.children.iter().find(|c| c.name == "params"))?;
    Ok((method, params))
}

pub fn decode_response(text: &str) -> Result<Result<Value, Fault>, DecodeError> {
    let root = parse_tree(text)?;
    if root.name != "methodResponse" {
        return Err(bad("root is not <methodResponse>"));
    }
    if let Some(f) = root.children.iter().find(|c| c.name == "fault") {
        let v = read_value(f.child("value")?)?;
        let code = v.get("faultCode").and_then(Value::as_i64).unwrap_or(500);
        let message = v.get("faultString").and_then(Value::as_str).unwrap_or_default();
        return Ok(Err(Fault::new(code as i32, message)));
    }
    let mut params = read_params(root.children.iter().find(|c| c.name == "params"))?;
    if params.len() != 1 {
        return Err(bad("response must carry exactly one value"));
    }
    Ok(Ok(params.remove(0)))
}

// JSON mapping: ints and floats are JSON numbers (floats always carry a
// fraction or exponent), binary is {"$base64": "..."}.

fn to_json(v: &Value) -> serde_json::Value {
    use serde_json::Value as J;
    match v {
        Value::Int(i) => J::from(*i),
        Value::Float(f) => match serde_json::Number::from_f64(*f) {
            Some(n) => J::Number(n),
            None => serde_json::json!({ "$double": f.to_string() }),
        },
        Value::Str(s) => J::from(s.as_str()),
        Value::Bool(b) => J::from(*b),
        Value::Array(a) => J::Array(a.iter().map(to_json).collect()),
        Value::Struct(m) => J::Object(m.iter().map(|(k, v)| (k.clone(), to_json(v))).collect()),
        Value::Binary(b) => serde_json::json!({ "$base64": B64.encode(b) }),
    }
}

fn from_json(v: &serde_json::Value) -> Result<Value, DecodeError> {
    use serde_json::Value as J;
    Ok(match v {
        J::Null => return Err(bad("null is not a value")),
        J::Bool(b) => Value::Bool(*b),
        J::Number(n) => match n.as_i64() {
            Some(i) if !n.is_f64() => Value::Int(i),
            _ => Value::Float(n.as_f64().ok_or_else(|| bad("number out of range"))?),
        },
        J::String(s) => Value::Str(s.clone()),
        J::Array(a) => Value::Array(a.iter().map(from_json).collect::<Result<_, _>>()?),
        J::Object(m) => {
            if m.len() == 1 {
                if let Some(J::String(s)) = m.get("$base64") {
                    return Ok(Value::Binary(B64.decode(s).map_err(|e| bad(e.to_string()))?));
                }
                if let Some(J::String(s)) = m.get("$double") {
                    return Ok(Value::Float(s.parse().map_err(|_| bad("bad $double"))?));
                }
            }
            Value::Struct(m.iter().map(|(k, v)| Ok((k.clone(), from_json(v)?))).collect::<Result<_, DecodeError>>()?)
        }
    })
}

pub fn encode_call_json(method: &str, params: &[Value]) -> String {
    serde_json::json!({ "method": method, "params": params.iter().map(to_json).collect::<Vec<_>>() }).to_string()
}

pub fn decode_call_json(text: &str) -> Result<(String, Vec<Value>), DecodeError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let method = v
        .get("method")
        .and_then(|m| m.as_str())
        .filter(|m| !m.is_empty())
        .ok_or_else(|| bad("missing method"))?
        .to_string();
    let params = match v.get("params") {
        None => Vec::new(),
        Some(serde_json::Value::Array(a)) => a.iter().map(from_json).collect::<Result<_, _>>()?,
        Some(_) => return Err(bad("params must be an array")),
    };
    Ok((method, params))
}

pub fn encode_response_json(result: &Result<Value, Fault>) -> String {
    match result {
        Ok(v) => serde_json::json!({ "result": to_json(v) }).to_string(),
        Err(f) => serde_json::json!({ "fault": { "code": f.code, "message": f.message } }).to_string(),
    }
}

pub fn decode_response_json(text: &str) -> Result<Result<Value, Fault>, DecodeError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if let Some(f) = v.get("fault") {
        let code = f.get("code").and_then(|c| c.as_i64()).unwrap_or(500);
        let message = f.get("message").and_then(|m| m.as_str()).unwrap_or_default();
        return Ok(Err(Fault::new(code as i32, message)));
    }
    let r = v.get("result").ok_or_else(|| bad("missing result"))?;
    Ok(Ok(from_json(r)?))
}
