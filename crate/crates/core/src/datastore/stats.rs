//! Per-dataset statistics: sum, mean and population standard deviation.

use std::collections::BTreeMap;

use rusqlite::params;
use serde::{Deserialize, Serialize};

use super::{Datastore, Result};
use crate::lifecycle::UnitKey;
use crate::par::Exec;

/// Statistic name to value, as reported by modules.
pub type StatMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: u64,
    pub sum: f64,
    pub average: f64,
    pub stddev: f64,
}

pub type StatSummary = BTreeMap<String, Summary>;

fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let average = sum / n;
    let var = values.iter().map(|v| (v - average).powi(2)).sum::<f64>() / n;
    Summary {
        count: values.len() as u64,
        sum,
        average,
        stddev: var.max(0.0).sqrt(),
    }
}

/// Summaries of each named series; empty series are left out.
pub fn aggregate(series: &BTreeMap<String, Vec<f64>>, exec: Exec) -> StatSummary {
    let named: Vec<(&String, &Vec<f64>)> = series.iter().filter(|(_, v)| !v.is_empty()).collect();
    let sums = exec.map(&named, |(_, v)| summarize(v));
    named.into_iter().map(|(k, _)| k.clone()).zip(sums).collect()
}

impl Datastore {
    /// Raw values per statistic name, one value per job. Values that
    /// several tasks of one job report under the same name are added.
    pub fn stat_series(&self, dataset: i64) -> Result<BTreeMap<String, Vec<f64>>> {
        self.read(|c| {
            let mut st = c.prepare_cached(
                "SELECT name, SUM(value) FROM job_statistics WHERE dataset_id = ?1
                 GROUP BY job_index, name ORDER BY job_index, name",
            )?;
            let rows = st.query_map([dataset], |r| Ok((r.get::<_, String>(0)?, r.get::<_, f64>(1)?)))?;
            let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for row in rows {
                let (name, v) = row?;
                out.entry(name).or_default().push(v);
            }
            Ok(out)
        })
    }

    pub fn aggregate_stats(&self, dataset: i64) -> Result<StatSummary> {
        Ok(aggregate(&self.stat_series(dataset)?, Exec::default()))
    }

    /// Statistics of one job (or one task when the key names a task).
    pub fn unit_stats(&self, key: &UnitKey) -> Result<StatMap> {
        self.read(|c| {
            let mut st = c.prepare_cached(
                "SELECT name, SUM(value) FROM job_statistics
                 WHERE dataset_id = ?1 AND job_index = ?2 AND (?3 IS NULL OR task_name = ?3)
                 GROUP BY name",
            )?;
            let rows = st.query_map(params![key.dataset_id, key.job_index as i64, key.task], |r| {
                Ok((r.get(0)?, r.get(1)?))
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }
}
