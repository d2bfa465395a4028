//! Random steering documents for property tests.

use proptest::collection::vec;
use proptest::prelude::*;

use prodkit::steering::{
    DatasetMeta, Metaproject, ModuleInstance, ModuleParam, ParamType, ParamValue, ResourceRequirements,
    SteeringParam, SteeringSpec, TaskDef, Tray,
};

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_.]{0,10}"
}

/// Free text, including markup characters, quotes, tabs, newlines and
/// non-ASCII.
fn text() -> impl Strategy<Value = String> {
    "[ -~\t\néλ€漢]{0,24}"
}

/// `n` distinct identifiers.
fn names(n: usize) -> impl Strategy<Value = Vec<String>> {
    proptest::collection::btree_set(ident(), n..=n).prop_map(|s| s.into_iter().collect())
}

fn typed_param(name: String) -> impl Strategy<Value = ModuleParam> {
    prop_oneof![
        text().prop_map(|t| (ParamType::String, ParamValue::Text(t))),
        any::<i64>().prop_map(|v| (ParamType::Int, ParamValue::Text(v.to_string()))),
        (-1e6f64..1e6).prop_map(|v| (ParamType::Float, ParamValue::Text(v.to_string()))),
        any::<bool>().prop_map(|v| (ParamType::Bool, ParamValue::Text(v.to_string()))),
        vec(text(), 0..4).prop_map(|v| (ParamType::ListString, ParamValue::List(v))),
        "\\$(args|steering|eval)\\([a-z0-9+ ]{0,8}\\)".prop_map(|t| (ParamType::Int, ParamValue::Text(t))),
    ]
    .prop_map(move |(kind, value)| ModuleParam {
        name: name.clone(),
        kind,
        value,
    })
}

fn module(metaprojects: Vec<String>) -> impl Strategy<Value = ModuleInstance> {
    let mp = if metaprojects.is_empty() {
        Just(None).boxed()
    } else {
        proptest::option::of(proptest::sample::select(metaprojects)).boxed()
    };
    (ident(), ident(), mp, (0usize..4).prop_flat_map(names))
        .prop_flat_map(|(name, class_name, metaproject, pnames)| {
            let params: Vec<_> = pnames.into_iter().map(typed_param).collect();
            (Just(name), Just(class_name), Just(metaproject), params)
        })
        .prop_map(|(name, class_name, metaproject, parameters)| ModuleInstance {
            name,
            class_name,
            metaproject,
            parameters,
        })
}

fn requirements() -> impl Strategy<Value = ResourceRequirements> {
    (any::<bool>(), 0u64..65_536, 0u64..1_000_000, 1u64..1_000_000).prop_map(|(g, m, d, w)| ResourceRequirements {
        needs_gpu: g,
        min_memory_mb: m,
        min_disk_mb: d,
        max_walltime_s: w,
    })
}

/// A structurally valid document: unique names, resolvable references and
/// an acyclic task graph (edges only run from earlier to later tasks).
pub fn spec() -> impl Strategy<Value = SteeringSpec> {
    let meta = (text(), text(), 0u64..100_000, proptest::option::of("[a-z][a-z0-9_]{0,8}"), any::<bool>(), 1u32..8)
        .prop_map(|(description, category, job_count, alias, offline, files_per_job)| DatasetMeta {
            description,
            category,
            job_count,
            alias,
            offline,
            files_per_job,
        });
    let params = (0usize..4)
        .prop_flat_map(names)
        .prop_flat_map(|ns| ns.into_iter().map(|n| text().prop_map(move |v| SteeringParam { name: n.clone(), value: v })).collect::<Vec<_>>());
    let metaprojects = (0usize..3)
        .prop_flat_map(names)
        .prop_flat_map(|ns| {
            ns.into_iter()
                .map(|n| "[0-9]{1,2}\\.[0-9]{1,2}\\.[0-9]".prop_map(move |v| Metaproject { name: n.clone(), version: v }))
                .collect::<Vec<_>>()
        });
    (meta, params, metaprojects, 1usize..4)
        .prop_flat_map(|(meta, parameters, metaprojects, ntrays)| {
            let mp_names: Vec<String> = metaprojects.iter().map(|m| m.name.clone()).collect();
            let trays = names(ntrays).prop_flat_map(move |tnames| {
                tnames
                    .into_iter()
                    .map(|tn| {
                        let mpn = mp_names.clone();
                        proptest::sample::subsequence(mpn.clone(), 0..=mpn.len())
                            .prop_flat_map(|tray_mps| {
                                let modules = (1usize..4).prop_flat_map(names).prop_flat_map({
                                    let tray_mps = tray_mps.clone();
                                    move |mnames| {
                                        mnames
                                            .into_iter()
                                            .map(|mn| {
                                                module(tray_mps.clone()).prop_map(move |mut m| {
                                                    m.name = mn.clone();
                                                    m
                                                })
                                            })
                                            .collect::<Vec<_>>()
                                    }
                                });
                                (Just(tray_mps), modules, 1u32..5)
                            })
                            .prop_map(move |(metaprojects, modules, iterations)| Tray {
                                name: tn.clone(),
                                metaprojects,
                                modules,
                                iterations,
                            })
                    })
                    .collect::<Vec<_>>()
            });
            (Just(meta), Just(parameters), Just(metaprojects), trays, 0usize..6)
        })
        .prop_flat_map(|(meta, parameters, metaprojects, trays, ntasks)| {
            let tray_names: Vec<String> = trays.iter().map(|t| t.name.clone()).collect();
            let tasks = names(ntasks).prop_flat_map(move |tn| {
                let tn2 = tn.clone();
                let defs = tn
                    .into_iter()
                    .map(|n| {
                        let tr = tray_names.clone();
                        (proptest::sample::subsequence(tr.clone(), 1..=tr.len()), requirements()).prop_map(
                            move |(trays, requirements)| TaskDef {
                                name: n.clone(),
                                trays,
                                requirements,
                            },
                        )
                    })
                    .collect::<Vec<_>>();
                let pairs: Vec<(String, String)> = (0..tn2.len())
                    .flat_map(|i| (i + 1..tn2.len()).map(move |j| (i, j)))
                    .map(|(i, j)| (tn2[i].clone(), tn2[j].clone()))
                    .collect();
                let edges = proptest::sample::subsequence(pairs.clone(), 0..=pairs.len());
                (defs, edges)
            });
            (Just(meta), Just(parameters), Just(metaprojects), Just(trays), tasks)
        })
        .prop_map(|(meta, parameters, metaprojects, trays, (tasks, task_edges))| SteeringSpec {
            meta,
            parameters,
            metaprojects,
            trays,
            tasks,
            task_edges,
        })
}
