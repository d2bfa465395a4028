use std::collections::HashSet;
use std::fmt::Write as _;

use quick_xml::escape::{escape, partial_escape};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::*;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SteeringError {
    #[error("malformed XML at line {line}: {message}")]
    MalformedXml { line: usize, message: String },
    #[error("schema violation at line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
}

/// Minimal element tree; text is only kept where the schema allows it.
#[derive(Debug)]
struct Node {
    name: String,
    attrs: Vec<(String, String)>,
    children: Vec<Node>,
    text: String,
    line: usize,
}

struct Lines(Vec<usize>);

impl Lines {
    fn new(text: &str) -> Self {
        let mut starts = vec![0];
        starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        Lines(starts)
    }

    fn line_of(&self, offset: usize) -> usize {
        match self.0.binary_search(&offset) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }
}

fn malformed(lines: &Lines, pos: usize, message: impl ToString) -> SteeringError {
    SteeringError::MalformedXml {
        line: lines.line_of(pos),
        message: message.to_string(),
    }
}

fn schema(line: usize, message: impl Into<String>) -> SteeringError {
    SteeringError::SchemaViolation {
        line,
        message: message.into(),
    }
}

fn start_node(e: &BytesStart<'_>, line: usize, lines: &Lines, pos: usize) -> Result<Node, SteeringError> {
    let name = String::from_utf8(e.name().as_ref().to_vec()).map_err(|err| malformed(lines, pos, err))?;
    let mut attrs = Vec::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| malformed(lines, pos, err))?;
        let key = String::from_utf8(attr.key.as_ref().to_vec()).map_err(|err| malformed(lines, pos, err))?;
        let value = attr.unescape_value().map_err(|err| malformed(lines, pos, err))?;
        if attrs.iter().any(|(k, _)| *k == key) {
            return Err(malformed(lines, pos, format!("duplicate attribute {key}")));
        }
        attrs.push((key, value.into_owned()));
    }
    Ok(Node {
        name,
        attrs,
        children: Vec::new(),
        text: String::new(),
        line,
    })
}

fn build_tree(text: &str) -> Result<Node, SteeringError> {
    let lines = Lines::new(text);
    let mut reader = Reader::from_str(text);
    let mut stack: Vec<Node> = Vec::new();
    let mut root: Option<Node> = None;
    loop {
        let pos = reader.buffer_position();
        let line = lines.line_of(pos + text[pos..].len() - text[pos..].trim_start().len());
        let event = reader.read_event().map_err(|err| malformed(&lines, pos, err))?;
        match event {
            Event::Start(e) => {
                if root.is_some() {
                    return Err(malformed(&lines, pos, "content after the root element"));
                }
                stack.push(start_node(&e, line, &lines, pos)?);
            }
            Event::Empty(e) => {
                let node = start_node(&e, line, &lines, pos)?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(node),
                    None if root.is_none() => root = Some(node),
                    None => return Err(malformed(&lines, pos, "content after the root element")),
                }
            }
            Event::End(_) => {
                let node = stack.pop().ok_or_else(|| malformed(&lines, pos, "unbalanced end tag"))?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(node),
                    None => root = Some(node),
                }
            }
            Event::Text(t) => {
                let s = t.unescape().map_err(|err| malformed(&lines, pos, err))?;
                match stack.last_mut() {
                    Some(node) => node.text.push_str(&s),
                    None if s.trim().is_empty() => {}
                    None => return Err(malformed(&lines, pos, "text outside the root element")),
                }
            }
            Event::CData(c) => {
                let raw = c.into_inner();
                let s = std::str::from_utf8(&raw).map_err(|err| malformed(&lines, pos, err))?;
                match stack.last_mut() {
                    Some(node) => node.text.push_str(s),
                    None => return Err(malformed(&lines, pos, "CDATA outside the root element")),
                }
            }
            Event::Eof => break,
            Event::Comment(_) | Event::Decl(_) | Event::PI(_) | Event::DocType(_) => {}
        }
    }
    if !stack.is_empty() {
        return Err(malformed(&lines, text.len(), "unclosed element"));
    }
    root.ok_or_else(|| malformed(&lines, 0, "no root element"))
}

impl Node {
    fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, SteeringError> {
        self.attr(key)
            .ok_or_else(|| schema(self.line, format!("<{}> requires attribute `{key}`", self.name)))
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, SteeringError> {
        self.attr(key)
            .map(|v| {
                v.trim().parse().map_err(|_| {
                    schema(self.line, format!("<{}> attribute `{key}` is not a number: {v:?}", self.name))
                })
            })
            .transpose()
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>, SteeringError> {
        self.attr(key)
            .map(|v| match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(schema(self.line, format!("<{}> attribute `{key}` is not a boolean: {v:?}", self.name))),
            })
            .transpose()
    }

    fn no_text(&self) -> Result<(), SteeringError> {
        if self.text.trim().is_empty() {
            Ok(())
        } else {
            Err(schema(self.line, format!("<{}> does not take text content", self.name)))
        }
    }

    fn leaf(&self) -> Result<(), SteeringError> {
        match self.children.first() {
            Some(c) => Err(schema(c.line, format!("unexpected <{}> inside <{}>", c.name, self.name))),
            None => Ok(()),
        }
    }
}

fn unknown(node: &Node, parent: &str) -> SteeringError {
    schema(node.line, format!("unknown element <{}> inside <{parent}>", node.name))
}

fn unique<'a>(seen: &mut HashSet<&'a str>, name: &'a str, what: &str, line: usize) -> Result<(), SteeringError> {
    if seen.insert(name) {
        Ok(())
    } else {
        Err(schema(line, format!("duplicate {what} name {name:?}")))
    }
}

fn module_param(node: &Node) -> Result<ModuleParam, SteeringError> {
    let name = node.required("name")?.to_string();
    let kind = match node.attr("type") {
        None => ParamType::String,
        Some(t) => ParamType::parse(t).ok_or_else(|| schema(node.line, format!("unknown parameter type {t:?}")))?,
    };
    let value = if kind == ParamType::ListString {
        node.no_text()?;
        let mut items = Vec::new();
        for item in &node.children {
            if item.name != "item" {
                return Err(unknown(item, "parameter"));
            }
            item.leaf()?;
            items.push(item.text.clone());
        }
        ParamValue::List(items)
    } else {
        node.leaf()?;
        ParamValue::Text(node.text.clone())
    };
    Ok(ModuleParam { name, kind, value })
}

fn module(node: &Node) -> Result<ModuleInstance, SteeringError> {
    node.no_text()?;
    let mut parameters = Vec::new();
    let mut seen = HashSet::new();
    for child in &node.children {
        if child.name != "parameter" {
            return Err(unknown(child, "module"));
        }
        let p = module_param(child)?;
        if !seen.insert(p.name.clone()) {
            return Err(schema(child.line, format!("duplicate parameter name {:?}", p.name)));
        }
        parameters.push(p);
    }
    Ok(ModuleInstance {
        name: node.required("name")?.to_string(),
        class_name: node.required("class")?.to_string(),
        metaproject: node.attr("metaproject").map(str::to_string),
        parameters,
    })
}

fn tray(node: &Node) -> Result<Tray, SteeringError> {
    node.no_text()?;
    let mut tray = Tray {
        name: node.required("name")?.to_string(),
        metaprojects: Vec::new(),
        modules: Vec::new(),
        iterations: node.number("iterations")?.unwrap_or(1),
    };
    let mut seen = HashSet::new();
    for child in &node.children {
        match child.name.as_str() {
            "metaproject" => {
                child.leaf()?;
                tray.metaprojects.push(child.required("ref")?.to_string());
            }
            "module" => {
                unique(&mut seen, child.required("name")?, "module", child.line)?;
                tray.modules.push(module(child)?);
            }
            _ => return Err(unknown(child, "tray")),
        }
    }
    Ok(tray)
}

fn task(node: &Node) -> Result<TaskDef, SteeringError> {
    node.no_text()?;
    let mut def = TaskDef {
        name: node.required("name")?.to_string(),
        trays: Vec::new(),
        requirements: ResourceRequirements::default(),
    };
    let mut have_reqs = false;
    for child in &node.children {
        child.leaf()?;
        match child.name.as_str() {
            "tray" => def.trays.push(child.required("ref")?.to_string()),
            "requirements" if !have_reqs => {
                have_reqs = true;
                let d = ResourceRequirements::default();
                def.requirements = ResourceRequirements {
                    needs_gpu: child.boolean("gpu")?.unwrap_or(d.needs_gpu),
                    min_memory_mb: child.number("memory")?.unwrap_or(d.min_memory_mb),
                    min_disk_mb: child.number("disk")?.unwrap_or(d.min_disk_mb),
                    max_walltime_s: child.number("walltime")?.unwrap_or(d.max_walltime_s),
                };
            }
            "requirements" => return Err(schema(child.line, "duplicate <requirements>")),
            _ => return Err(unknown(child, "task")),
        }
    }
    Ok(def)
}

/// Parses a steering document. Expressions are kept verbatim.
pub fn parse_steering(xml_text: &str) -> Result<SteeringSpec, SteeringError> {
    let root = build_tree(xml_text)?;
    if root.name != "configuration" {
        return Err(schema(root.line, format!("root element must be <configuration>, found <{}>", root.name)));
    }
    match root.attr("version") {
        Some("3") => {}
        Some(v) => return Err(schema(root.line, format!("unsupported version {v:?}"))),
        None => return Err(schema(root.line, "<configuration> requires attribute `version`")),
    }
    root.no_text()?;

    let mut spec = SteeringSpec {
        meta: DatasetMeta::default(),
        parameters: Vec::new(),
        metaprojects: Vec::new(),
        trays: Vec::new(),
        tasks: Vec::new(),
        task_edges: Vec::new(),
    };
    let mut have_meta = false;
    let (mut params, mut metas, mut trays, mut tasks) =
        (HashSet::new(), HashSet::new(), HashSet::new(), HashSet::new());
    for child in &root.children {
        match child.name.as_str() {
            "meta" => {
                if have_meta {
                    return Err(schema(child.line, "duplicate <meta>"));
                }
                have_meta = true;
                child.leaf()?;
                spec.meta = DatasetMeta {
                    description: child.attr("description").unwrap_or_default().to_string(),
                    category: child.attr("category").unwrap_or_default().to_string(),
                    job_count: child
                        .number("jobs")?
                        .ok_or_else(|| schema(child.line, "<meta> requires attribute `jobs`"))?,
                    alias: child.attr("alias").map(str::to_string),
                    offline: child.boolean("offline")?.unwrap_or(false),
                    files_per_job: child.number("files_per_job")?.unwrap_or(1),
                };
            }
            "steering" => {
                child.no_text()?;
                for p in &child.children {
                    if p.name != "parameter" {
                        return Err(unknown(p, "steering"));
                    }
                    p.leaf()?;
                    let name = p.required("name")?;
                    unique(&mut params, name, "steering parameter", p.line)?;
                    spec.parameters.push(SteeringParam {
                        name: name.to_string(),
                        value: p.text.clone(),
                    });
                }
            }
            "metaproject" => {
                child.leaf()?;
                let name = child.required("name")?;
                unique(&mut metas, name, "metaproject", child.line)?;
                spec.metaprojects.push(Metaproject {
                    name: name.to_string(),
                    version: child.attr("version").unwrap_or_default().to_string(),
                });
            }
            "tray" => {
                unique(&mut trays, child.required("name")?, "tray", child.line)?;
                spec.trays.push(tray(child)?);
            }
            "task" => {
                unique(&mut tasks, child.required("name")?, "task", child.line)?;
                spec.tasks.push(task(child)?);
            }
            "taskrel" => {
                child.leaf()?;
                spec.task_edges.push((
                    child.required("parent")?.to_string(),
                    child.required("child")?.to_string(),
                ));
            }
            _ => return Err(unknown(child, "configuration")),
        }
    }
    if !have_meta {
        return Err(schema(root.line, "missing <meta>"));
    }
    Ok(spec)
}

/// Renders a spec as a steering document accepted by [`parse_steering`].
pub fn serialize_steering(spec: &SteeringSpec) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str("<configuration version=\"3\">\n");
    let m = &spec.meta;
    let _ = write!(
        out,
        "  <meta description=\"{}\" category=\"{}\" jobs=\"{}\"",
        escape(&m.description),
        escape(&m.category),
        m.job_count
    );
    if let Some(alias) = &m.alias {
        let _ = write!(out, " alias=\"{}\"", escape(alias));
    }
    if m.offline {
        out.push_str(" offline=\"true\"");
    }
    if m.files_per_job != 1 {
        let _ = write!(out, " files_per_job=\"{}\"", m.files_per_job);
    }
    out.push_str("/>\n");

    if !spec.parameters.is_empty() {
        out.push_str("  <steering>\n");
        for p in &spec.parameters {
            let _ = writeln!(
                out,
                "    <parameter name=\"{}\">{}</parameter>",
                escape(&p.name),
                partial_escape(&p.value)
            );
        }
        out.push_str("  </steering>\n");
    }
    for mp in &spec.metaprojects {
        let _ = writeln!(
            out,
            "  <metaproject name=\"{}\" version=\"{}\"/>",
            escape(&mp.name),
            escape(&mp.version)
        );
    }
    for tray in &spec.trays {
        let _ = write!(out, "  <tray name=\"{}\"", escape(&tray.name));
        if tray.iterations != 1 {
            let _ = write!(out, " iterations=\"{}\"", tray.iterations);
        }
        out.push_str(">\n");
        for r in &tray.metaprojects {
            let _ = writeln!(out, "    <metaproject ref=\"{}\"/>", escape(r));
        }
        for module in &tray.modules {
            let _ = write!(
                out,
                "    <module name=\"{}\" class=\"{}\"",
                escape(&module.name),
                escape(&module.class_name)
            );
            if let Some(mp) = &module.metaproject {
                let _ = write!(out, " metaproject=\"{}\"", escape(mp));
            }
            if module.parameters.is_empty() {
                out.push_str("/>\n");
                continue;
            }
            out.push_str(">\n");
            for p in &module.parameters {
                let _ = write!(out, "      <parameter name=\"{}\"", escape(&p.name));
                if p.kind != ParamType::String {
                    let _ = write!(out, " type=\"{}\"", p.kind.as_str());
                }
                match &p.value {
                    ParamValue::Text(t) => {
                        let _ = writeln!(out, ">{}</parameter>", partial_escape(t));
                    }
                    ParamValue::List(items) => {
                        out.push('>');
                        for item in items {
                            let _ = write!(out, "<item>{}</item>", partial_escape(item));
                        }
                        out.push_str("</parameter>\n");
                    }
                }
            }
            out.push_str("    </module>\n");
        }
        out.push_str("  </tray>\n");
    }
    for task in &spec.tasks {
        let _ = writeln!(out, "  <task name=\"{}\">", escape(&task.name));
        for t in &task.trays {
            let _ = writeln!(out, "    <tray ref=\"{}\"/>", escape(t));
        }
        let r = &task.requirements;
        let _ = writeln!(
            out,
            "    <requirements gpu=\"{}\" memory=\"{}\" disk=\"{}\" walltime=\"{}\"/>",
            r.needs_gpu, r.min_memory_mb, r.min_disk_mb, r.max_walltime_s
        );
        out.push_str("  </task>\n");
    }
    for (parent, child) in &spec.task_edges {
        let _ = writeln!(
            out,
            "  <taskrel parent=\"{}\" child=\"{}\"/>",
            escape(parent),
            escape(child)
        );
    }
    out.push_str("</configuration>\n");
    out
}
