//! Per-job task graphs.
//!
//! Every job of a dataset with explicit tasks carries one [`TaskDag`]. The
//! queue daemon asks [`ready_tasks`] what can be dispatched and feeds task
//! outcomes back through [`on_task_complete`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::lifecycle::{Event, JobState};
use crate::steering::{ResourceRequirements, SteeringSpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DagError {
    #[error("task graph has a cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("edge refers to unknown task {0:?}")]
    DanglingRef(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDag {
    /// Vertices in declaration order.
    pub vertices: Vec<(String, ResourceRequirements)>,
    pub edges: Vec<(String, String)>,
}

/// What a site can offer a single task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCapabilities {
    pub gpu: bool,
    pub memory_mb: u64,
    pub disk_mb: u64,
    pub walltime_s: u64,
}

impl Default for SiteCapabilities {
    fn default() -> Self {
        SiteCapabilities {
            gpu: false,
            memory_mb: 4096,
            disk_mb: 100_000,
            walltime_s: 86_400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskOutcome {
    Ok,
    /// The task exhausted its retries.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Progress {
    /// Children that became ready; may be empty.
    Unlocked(Vec<String>),
    /// The whole job moves on. `cancel` lists sibling tasks still in
    /// flight that should be removed from their backend.
    Job { event: Event, cancel: Vec<String> },
}

/// Finds a cycle among `edges`, returned as a closed path (`[a, b, a]`).
pub fn find_cycle(names: &[&str], edges: &[(String, String)]) -> Option<Vec<String>> {
    let mut adj: BTreeMap<&str, Vec<&str>> = names.iter().map(|n| (*n, Vec::new())).collect();
    for (p, c) in edges {
        adj.entry(p.as_str()).or_default().push(c.as_str());
        adj.entry(c.as_str()).or_default();
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color: BTreeMap<&str, u8> = adj.keys().map(|k| (*k, 0)).collect();
    let mut order: Vec<&str> = names.to_vec();
    order.extend(adj.keys().copied().filter(|k| !names.contains(k)));
    for start in order {
        if color[start] != 0 {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        color.insert(start, 1);
        while let Some((node, i)) = stack.last().copied() {
            let next = adj[node].get(i).copied();
            match next {
                Some(child) => {
                    stack.last_mut().unwrap().1 += 1;
                    match color[child] {
                        0 => {
                            color.insert(child, 1);
                            stack.push((child, 0));
                        }
                        1 => {
                            let from = stack.iter().position(|(n, _)| *n == child).unwrap();
                            let mut cycle: Vec<String> =
                                stack[from..].iter().map(|(n, _)| n.to_string()).collect();
                            cycle.push(child.to_string());
                            return Some(cycle);
                        }
                        _ => {}
                    }
                }
                None => {
                    color.insert(node, 2);
                    stack.pop();
                }
            }
        }
    }
    None
}

pub fn build_dag(spec: &SteeringSpec) -> Result<TaskDag, DagError> {
    let tasks = spec.effective_tasks();
    let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
    for (p, c) in &spec.task_edges {
        for end in [p, c] {
            if !names.contains(&end.as_str()) {
                return Err(DagError::DanglingRef(end.clone()));
            }
        }
    }
    if let Some(cycle) = find_cycle(&names, &spec.task_edges) {
        return Err(DagError::CycleDetected(cycle));
    }
    Ok(TaskDag {
        vertices: tasks.iter().map(|t| (t.name.clone(), t.requirements)).collect(),
        edges: spec.task_edges.clone(),
    })
}

impl TaskDag {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vertices.iter().map(|(n, _)| n.as_str())
    }

    pub fn requirements(&self, task: &str) -> Option<&ResourceRequirements> {
        self.vertices.iter().find(|(n, _)| n == task).map(|(_, r)| r)
    }

    pub fn parents(&self, task: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, c)| c == task)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn children(&self, task: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(p, _)| p == task)
            .map(|(_, c)| c.as_str())
            .collect()
    }

    pub fn roots(&self) -> Vec<&str> {
        self.names().filter(|n| self.parents(n).is_empty()).collect()
    }

    pub fn leaves(&self) -> Vec<&str> {
        self.names().filter(|n| self.children(n).is_empty()).collect()
    }

    /// Vertices ordered so every parent precedes its children; ties keep
    /// declaration order.
    pub fn topological_order(&self) -> Vec<&str> {
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut out = Vec::with_capacity(self.len());
        while out.len() < self.len() {
            let before = out.len();
            for n in self.names() {
                if !done.contains(n) && self.parents(n).iter().all(|p| done.contains(p)) {
                    done.insert(n);
                    out.push(n);
                }
            }
            if out.len() == before {
                break;
            }
        }
        out
    }

    /// Combined requirements a site must meet to host every task.
    pub fn envelope(&self) -> ResourceRequirements {
        let mut env = ResourceRequirements {
            max_walltime_s: 0,
            ..Default::default()
        };
        for (_, r) in &self.vertices {
            env.needs_gpu |= r.needs_gpu;
            env.min_memory_mb = env.min_memory_mb.max(r.min_memory_mb);
            env.min_disk_mb = env.min_disk_mb.max(r.min_disk_mb);
            env.max_walltime_s = env.max_walltime_s.max(r.max_walltime_s);
        }
        env
    }
}

fn is_ok(states: &BTreeMap<String, JobState>, task: &str) -> bool {
    states.get(task) == Some(&JobState::Ok)
}

/// WAITING tasks whose parents are all OK, in declaration order.
pub fn ready_tasks(dag: &TaskDag, states: &BTreeMap<String, JobState>) -> Vec<String> {
    dag.names()
        .filter(|n| states.get(*n) == Some(&JobState::Waiting))
        .filter(|n| dag.parents(n).iter().all(|p| is_ok(states, p)))
        .map(str::to_string)
        .collect()
}

/// Applies a task's final outcome. `states` holds the states before the
/// outcome; the completed task is treated as OK (or failed) regardless.
pub fn on_task_complete(
    dag: &TaskDag,
    task: &str,
    outcome: TaskOutcome,
    states: &BTreeMap<String, JobState>,
) -> Progress {
    match outcome {
        TaskOutcome::Failed => Progress::Job {
            event: Event::ErrorReported,
            cancel: dag
                .names()
                .filter(|n| *n != task)
                .filter(|n| states.get(*n).is_some_and(|s| s.is_active()))
                .map(str::to_string)
                .collect(),
        },
        TaskOutcome::Ok => {
            let mut after = states.clone();
            after.insert(task.to_string(), JobState::Ok);
            if dag.names().all(|n| is_ok(&after, n)) {
                return Progress::Job {
                    event: Event::WorkCompleted,
                    cancel: Vec::new(),
                };
            }
            let unlocked = dag
                .children(task)
                .into_iter()
                .filter(|c| after.get(*c) == Some(&JobState::Waiting))
                .filter(|c| dag.parents(c).iter().all(|p| is_ok(&after, p)))
                .map(str::to_string)
                .collect();
            Progress::Unlocked(unlocked)
        }
    }
}

pub fn match_requirements(req: &ResourceRequirements, site: &SiteCapabilities) -> bool {
    (!req.needs_gpu || site.gpu)
        && req.min_memory_mb <= site.memory_mb
        && req.min_disk_mb <= site.disk_mb
        && req.max_walltime_s <= site.walltime_s
}
