use std::collections::HashSet;
use std::fmt;

use super::*;
use crate::dagengine::find_cycle;

/// A broken structural rule, naming the element it was found on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BadIdentifier { path: String, name: String },
    Duplicate { path: String, name: String },
    EmptyTray(String),
    ZeroIterations(String),
    UnknownMetaproject { path: String, name: String },
    BadParamValue { path: String, kind: ParamType, value: String },
    TaskWithoutTrays(String),
    DanglingTrayRef { task: String, tray: String },
    DanglingTaskRef(String),
    CycleDetected(Vec<String>),
    ZeroWalltime(String),
    EmptyAlias,
    ZeroFilesPerJob,
}

impl Violation {
    /// Path of the offending element, e.g. `tray[gen]/module[m1]`.
    pub fn path(&self) -> String {
        match self {
            Violation::BadIdentifier { path, .. }
            | Violation::Duplicate { path, .. }
            | Violation::UnknownMetaproject { path, .. }
            | Violation::BadParamValue { path, .. } => path.clone(),
            Violation::EmptyTray(t) | Violation::ZeroIterations(t) => format!("tray[{t}]"),
            Violation::TaskWithoutTrays(t) | Violation::ZeroWalltime(t) => format!("task[{t}]"),
            Violation::DanglingTrayRef { task, tray } => format!("task[{task}]/tray[{tray}]"),
            Violation::DanglingTaskRef(t) => format!("taskrel[{t}]"),
            Violation::CycleDetected(c) => format!("taskrel[{}]", c.join("->")),
            Violation::EmptyAlias | Violation::ZeroFilesPerJob => "meta".to_string(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = self.path();
        match self {
            Violation::BadIdentifier { name, .. } => write!(f, "{path}: {name:?} is not an identifier"),
            Violation::Duplicate { name, .. } => write!(f, "{path}: duplicate name {name:?}"),
            Violation::EmptyTray(_) => write!(f, "{path}: tray has no modules"),
            Violation::ZeroIterations(_) => write!(f, "{path}: iterations must be positive"),
            Violation::UnknownMetaproject { name, .. } => write!(f, "{path}: unknown metaproject {name:?}"),
            Violation::BadParamValue { kind, value, .. } => {
                write!(f, "{path}: {value:?} is not a valid {}", kind.as_str())
            }
            Violation::TaskWithoutTrays(_) => write!(f, "{path}: task has no trays"),
            Violation::DanglingTrayRef { .. } => write!(f, "{path}: no such tray"),
            Violation::DanglingTaskRef(t) => write!(f, "{path}: no such task {t:?}"),
            Violation::CycleDetected(_) => write!(f, "{path}: task graph has a cycle"),
            Violation::ZeroWalltime(_) => write!(f, "{path}: walltime must be positive"),
            Violation::EmptyAlias => write!(f, "{path}: alias must not be empty"),
            Violation::ZeroFilesPerJob => write!(f, "{path}: files_per_job must be positive"),
        }
    }
}

/// `[A-Za-z_][A-Za-z0-9_.]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn check_name(out: &mut Vec<Violation>, seen: &mut HashSet<String>, path: String, name: &str) {
    if !is_identifier(name) {
        out.push(Violation::BadIdentifier {
            path: path.clone(),
            name: name.to_string(),
        });
    }
    if !seen.insert(name.to_string()) {
        out.push(Violation::Duplicate {
            path,
            name: name.to_string(),
        });
    }
}

fn typed_value_ok(kind: ParamType, raw: &str) -> bool {
    if raw.contains('$') {
        // checked after expansion
        return true;
    }
    let t = raw.trim();
    match kind {
        ParamType::String | ParamType::ListString => true,
        ParamType::Int => t.parse::<i64>().is_ok(),
        ParamType::Float => t.parse::<f64>().is_ok(),
        ParamType::Bool => matches!(t, "true" | "false" | "True" | "False" | "1" | "0"),
    }
}

/// Checks every structural invariant; an empty result means the spec is valid.
pub fn validate_steering(spec: &SteeringSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.meta.alias.as_deref().is_some_and(|a| a.trim().is_empty()) {
        out.push(Violation::EmptyAlias);
    }
    if spec.meta.files_per_job == 0 {
        out.push(Violation::ZeroFilesPerJob);
    }

    let mut seen = HashSet::new();
    for p in &spec.parameters {
        check_name(&mut out, &mut seen, format!("steering/parameter[{}]", p.name), &p.name);
    }
    let mut metas = HashSet::new();
    for mp in &spec.metaprojects {
        check_name(&mut out, &mut metas, format!("metaproject[{}]", mp.name), &mp.name);
    }

    let mut trays = HashSet::new();
    for tray in &spec.trays {
        let tpath = format!("tray[{}]", tray.name);
        check_name(&mut out, &mut trays, tpath.clone(), &tray.name);
        if tray.modules.is_empty() {
            out.push(Violation::EmptyTray(tray.name.clone()));
        }
        if tray.iterations == 0 {
            out.push(Violation::ZeroIterations(tray.name.clone()));
        }
        for r in &tray.metaprojects {
            if !metas.contains(r) {
                out.push(Violation::UnknownMetaproject {
                    path: tpath.clone(),
                    name: r.clone(),
                });
            }
        }
        let mut modules = HashSet::new();
        for m in &tray.modules {
            let mpath = format!("{tpath}/module[{}]", m.name);
            check_name(&mut out, &mut modules, mpath.clone(), &m.name);
            if let Some(mp) = &m.metaproject {
                if !tray.metaprojects.contains(mp) {
                    out.push(Violation::UnknownMetaproject {
                        path: mpath.clone(),
                        name: mp.clone(),
                    });
                }
            }
            let mut params = HashSet::new();
            for p in &m.parameters {
                let ppath = format!("{mpath}/parameter[{}]", p.name);
                check_name(&mut out, &mut params, ppath.clone(), &p.name);
                let ok = match (&p.value, p.kind) {
                    (ParamValue::List(_), ParamType::ListString) => true,
                    (ParamValue::List(_), _) | (ParamValue::Text(_), ParamType::ListString) => false,
                    (ParamValue::Text(t), kind) => typed_value_ok(kind, t),
                };
                if !ok {
                    out.push(Violation::BadParamValue {
                        path: ppath,
                        kind: p.kind,
                        value: p.as_text().unwrap_or("<list>").to_string(),
                    });
                }
            }
        }
    }

    let mut tasks = HashSet::new();
    for task in &spec.tasks {
        check_name(&mut out, &mut tasks, format!("task[{}]", task.name), &task.name);
        if task.trays.is_empty() {
            out.push(Violation::TaskWithoutTrays(task.name.clone()));
        }
        for t in &task.trays {
            if !trays.contains(t) {
                out.push(Violation::DanglingTrayRef {
                    task: task.name.clone(),
                    tray: t.clone(),
                });
            }
        }
        if task.requirements.max_walltime_s == 0 {
            out.push(Violation::ZeroWalltime(task.name.clone()));
        }
    }
    let mut dangling = false;
    for (parent, child) in &spec.task_edges {
        for end in [parent, child] {
            if !tasks.contains(end) {
                dangling = true;
                out.push(Violation::DanglingTaskRef(end.clone()));
            }
        }
    }
    if !dangling {
        let names: Vec<&str> = spec.tasks.iter().map(|t| t.name.as_str()).collect();
        if let Some(cycle) = find_cycle(&names, &spec.task_edges) {
            out.push(Violation::CycleDetected(cycle));
        }
    }
    out
}
