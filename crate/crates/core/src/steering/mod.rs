//! Dataset steering documents.
//!
//! A [`SteeringSpec`] describes everything a dataset needs: metadata,
//! global steering parameters, software environments (metaprojects),
//! trays of configured modules, and an optional task graph. It is stored
//! on disk as XML (see [`parse_steering`] / [`serialize_steering`]).

mod validate;
mod xml;

use serde::{Deserialize, Serialize};

pub use validate::{is_identifier, validate_steering, Violation};
pub use xml::{parse_steering, serialize_steering, SteeringError};

/// Name of the task that monolithic (task-less) documents run as.
pub const IMPLICIT_TASK: &str = "main";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub meta: DatasetMeta,
    pub parameters: Vec<SteeringParam>,
    pub metaprojects: Vec<Metaproject>,
    pub trays: Vec<Tray>,
    pub tasks: Vec<TaskDef>,
    pub task_edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub description: String,
    pub category: String,
    pub job_count: u64,
    pub alias: Option<String>,
    /// Off-line datasets grow by mapping input files onto new jobs.
    pub offline: bool,
    /// Input files per job when an off-line dataset grows.
    pub files_per_job: u32,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            description: String::new(),
            category: String::new(),
            job_count: 1,
            alias: None,
            offline: false,
            files_per_job: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringParam {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metaproject {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tray {
    pub name: String,
    pub metaprojects: Vec<String>,
    pub modules: Vec<ModuleInstance>,
    pub iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleInstance {
    pub name: String,
    pub class_name: String,
    pub metaproject: Option<String>,
    pub parameters: Vec<ModuleParam>,
}

impl ModuleInstance {
    pub fn param(&self, name: &str) -> Option<&ModuleParam> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Int,
    Float,
    Bool,
    ListString,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Int => "int",
            ParamType::Float => "float",
            ParamType::Bool => "bool",
            ParamType::ListString => "liststring",
        }
    }

    pub fn parse(s: &str) -> Option<ParamType> {
        Some(match s {
            "string" => ParamType::String,
            "int" => ParamType::Int,
            "float" => ParamType::Float,
            "bool" => ParamType::Bool,
            "liststring" => ParamType::ListString,
            _ => return None,
        })
    }
}

/// Raw (unexpanded) parameter text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamValue {
    Text(String),
    List(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleParam {
    pub name: String,
    pub kind: ParamType,
    pub value: ParamValue,
}

impl ModuleParam {
    pub fn text(name: &str, value: &str) -> Self {
        ModuleParam {
            name: name.to_string(),
            kind: ParamType::String,
            value: ParamValue::Text(value.to_string()),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.value {
            ParamValue::Text(t) => Some(t),
            ParamValue::List(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceRequirements {
    pub needs_gpu: bool,
    pub min_memory_mb: u64,
    pub min_disk_mb: u64,
    pub max_walltime_s: u64,
}

impl Default for ResourceRequirements {
    fn default() -> Self {
        ResourceRequirements {
            needs_gpu: false,
            min_memory_mb: 0,
            min_disk_mb: 0,
            max_walltime_s: 86_400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub trays: Vec<String>,
    pub requirements: ResourceRequirements,
}

impl SteeringSpec {
    /// A document with explicit tasks is scheduled task by task.
    pub fn is_dag(&self) -> bool {
        !self.tasks.is_empty()
    }

    /// Declared tasks, or the single implicit task running every tray.
    pub fn effective_tasks(&self) -> Vec<TaskDef> {
        if self.is_dag() {
            return self.tasks.clone();
        }
        vec![TaskDef {
            name: IMPLICIT_TASK.to_string(),
            trays: self.trays.iter().map(|t| t.name.clone()).collect(),
            requirements: ResourceRequirements::default(),
        }]
    }

    pub fn tray(&self, name: &str) -> Option<&Tray> {
        self.trays.iter().find(|t| t.name == name)
    }

    pub fn task(&self, name: &str) -> Option<TaskDef> {
        self.effective_tasks().into_iter().find(|t| t.name == name)
    }

    pub fn parameter(&self, name: &str) -> Option<&str> {
        self.parameters.iter().find(|p| p.name == name).map(|p| p.value.as_str())
    }
}
