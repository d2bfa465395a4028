//! Read-only monitoring views.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde_json::{json, Value};

use super::{Datastore, DatastoreError, Result};
use crate::lifecycle::{JobState, UnitKey};

/// One result row: column name to value.
pub type Row = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Every dataset with per-state job counts.
    General,
    /// Job counts per site and dataset.
    Grid,
    /// The jobs of one dataset.
    Dataset,
    /// One job in detail.
    Job,
}

impl View {
    fn filters(self) -> &'static [&'static str] {
        match self {
            View::General => &["status", "category", "site", "dataset_id", "submitter", "alias"],
            View::Grid => &["site", "dataset_id"],
            View::Dataset => &["dataset_id", "status", "site"],
            View::Job => &["key", "dataset_id", "job_index"],
        }
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "general" => Ok(View::General),
            "grid" => Ok(View::Grid),
            "dataset" => Ok(View::Dataset),
            "job" => Ok(View::Job),
            _ => Err(format!("unknown view {s:?}")),
        }
    }
}

fn int_filter(filters: &BTreeMap<String, String>, name: &str) -> Result<Option<i64>> {
    filters
        .get(name)
        .map(|v| v.trim().parse().map_err(|_| DatastoreError::UnknownFilter(format!("{name}={v}"))))
        .transpose()
}

fn state_filter(filters: &BTreeMap<String, String>) -> Result<Option<JobState>> {
    filters
        .get("status")
        .map(|v| v.parse().map_err(|_| DatastoreError::UnknownFilter(format!("status={v}"))))
        .transpose()
}

fn counts_json(counts: &BTreeMap<JobState, u64>) -> Value {
    let mut m = serde_json::Map::new();
    for s in JobState::ALL {
        m.insert(s.as_str().to_string(), json!(counts.get(&s).copied().unwrap_or(0)));
    }
    Value::Object(m)
}

impl Datastore {
    pub fn query_view(&self, view: View, filters: &BTreeMap<String, String>) -> Result<Vec<Row>> {
        if let Some(bad) = filters.keys().find(|k| !view.filters().contains(&k.as_str())) {
            return Err(DatastoreError::UnknownFilter(bad.clone()));
        }
        match view {
            View::General => self.general_view(filters),
            View::Grid => self.grid_view(filters),
            View::Dataset => self.dataset_view(filters),
            View::Job => self.job_view(filters),
        }
    }

    fn general_view(&self, filters: &BTreeMap<String, String>) -> Result<Vec<Row>> {
        let status = state_filter(filters)?;
        let only = int_filter(filters, "dataset_id")?;
        let mut out = Vec::new();
        for d in self.datasets()? {
            if only.is_some_and(|id| id != d.dataset_id)
                || filters.get("category").is_some_and(|c| *c != d.category)
                || filters.get("submitter").is_some_and(|s| *s != d.submitter)
                || filters.get("alias").is_some_and(|a| Some(a) != d.alias.as_ref())
            {
                continue;
            }
            let counts = self.state_counts(d.dataset_id)?;
            if status.is_some_and(|s| counts.get(&s).copied().unwrap_or(0) == 0) {
                continue;
            }
            if let Some(site) = filters.get("site") {
                let jobs = self.job_records(d.dataset_id)?;
                if !jobs.iter().any(|j| j.site.as_ref() == Some(site)) {
                    continue;
                }
            }
            let total: u64 = counts.values().sum();
            let mut row = Row::new();
            row.insert("dataset_id".into(), json!(d.dataset_id));
            row.insert("alias".into(), json!(d.alias));
            row.insert("description".into(), json!(d.description));
            row.insert("category".into(), json!(d.category));
            row.insert("submitter".into(), json!(d.submitter));
            row.insert("job_count".into(), json!(total));
            row.insert("is_dag".into(), json!(d.is_dag));
            row.insert("offline".into(), json!(d.offline));
            row.insert("states".into(), counts_json(&counts));
            out.push(row);
        }
        Ok(out)
    }

    fn grid_view(&self, filters: &BTreeMap<String, String>) -> Result<Vec<Row>> {
        let only = int_filter(filters, "dataset_id")?;
        let mut groups: BTreeMap<(String, i64), BTreeMap<JobState, u64>> = BTreeMap::new();
        for d in self.datasets()? {
            if only.is_some_and(|id| id != d.dataset_id) {
                continue;
            }
            for j in self.job_records(d.dataset_id)? {
                let Some(site) = j.site else { continue };
                if filters.get("site").is_some_and(|s| *s != site) {
                    continue;
                }
                *groups.entry((site, d.dataset_id)).or_default().entry(j.state).or_default() += 1;
            }
        }
        Ok(groups
            .into_iter()
            .map(|((site, ds), counts)| {
                let mut row = Row::new();
                row.insert("site".into(), json!(site));
                row.insert("dataset_id".into(), json!(ds));
                row.insert("states".into(), counts_json(&counts));
                row
            })
            .collect())
    }

    fn dataset_view(&self, filters: &BTreeMap<String, String>) -> Result<Vec<Row>> {
        let Some(id) = int_filter(filters, "dataset_id")? else {
            return Err(DatastoreError::UnknownFilter("dataset_id is required".into()));
        };
        let status = state_filter(filters)?;
        if self.dataset(id).is_err() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for j in self.job_records(id)? {
            if status.is_some_and(|s| s != j.state) || filters.get("site").is_some_and(|s| Some(s) != j.site.as_ref()) {
                continue;
            }
            let key = UnitKey::job(id, j.job_index);
            let rec = self.unit(&key)?;
            let mut row = Row::new();
            row.insert("key".into(), json!(key.to_string()));
            row.insert("dataset_id".into(), json!(id));
            row.insert("job_index".into(), json!(j.job_index));
            row.insert("state".into(), json!(j.state.as_str()));
            row.insert("retries".into(), json!(j.retries));
            row.insert("host".into(), json!(j.host));
            row.insert("site".into(), json!(j.site));
            row.insert("grid_id".into(), json!(j.grid_id));
            row.insert("last_update".into(), json!(j.last_update));
            row.insert("state_entered".into(), json!(j.state_entered));
            row.insert("error".into(), json!(rec.and_then(|r| r.error)));
            row.insert("stats".into(), json!(self.unit_stats(&key)?));
            out.push(row);
        }
        Ok(out)
    }

    fn job_view(&self, filters: &BTreeMap<String, String>) -> Result<Vec<Row>> {
        let key = match filters.get("key") {
            Some(k) => match k.parse::<UnitKey>() {
                Ok(k) => k.job_key(),
                Err(_) => return Err(DatastoreError::UnknownFilter(format!("key={k}"))),
            },
            None => match (int_filter(filters, "dataset_id")?, int_filter(filters, "job_index")?) {
                (Some(d), Some(j)) if j >= 0 => UnitKey::job(d, j as u64),
                _ => return Err(DatastoreError::UnknownFilter("key or dataset_id+job_index required".into())),
            },
        };
        let Some(rec) = self.unit(&key)? else {
            return Ok(Vec::new());
        };
        let tasks: Vec<Value> = self
            .task_records(key.dataset_id, key.job_index)?
            .into_iter()
            .map(|t| {
                let tk = UnitKey::task(t.dataset_id, t.job_index, &t.task_name);
                let err = self.unit(&tk).ok().flatten().and_then(|r| r.error);
                json!({
                    "task": t.task_name,
                    "state": t.state.as_str(),
                    "retries": t.retries,
                    "host": t.host,
                    "site": t.site,
                    "grid_id": t.grid_id,
                    "error": err,
                })
            })
            .collect();
        let mut row = Row::new();
        row.insert("key".into(), json!(key.to_string()));
        row.insert("dataset_id".into(), json!(key.dataset_id));
        row.insert("job_index".into(), json!(key.job_index));
        row.insert("state".into(), json!(rec.state.as_str()));
        row.insert("retries".into(), json!(rec.retries));
        row.insert("host".into(), json!(rec.host));
        row.insert("site".into(), json!(rec.site));
        row.insert("grid_id".into(), json!(rec.grid_id));
        row.insert("error".into(), json!(rec.error));
        row.insert("last_update".into(), json!(rec.last_update));
        row.insert("state_entered".into(), json!(rec.state_entered));
        row.insert("stats".into(), json!(self.unit_stats(&key)?));
        row.insert("outputs".into(), json!(self.outputs(&key)?));
        row.insert("inputs".into(), json!(self.job_inputs(key.dataset_id, key.job_index)?));
        row.insert("tasks".into(), Value::Array(tasks));
        Ok(vec![row])
    }
}
