//! Checks that run without a server: digests, statistics, the steering
//! codec, submission scripts, the expression language and DAG ordering.
//!
//! Each returns a one-line summary on success and the reason on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prodkit::config::SiteConfig;
use prodkit::dagengine::SiteCapabilities;
use prodkit::datastore::{Datastore, PilotReport};
use prodkit::digest;
use prodkit::expr::{evaluate, EvalContext};
use prodkit::gridplugins::{create_plugin, JobMaterialization};
use prodkit::lifecycle::{JobState, UnitKey};
use prodkit::par::Exec;
use prodkit::steering::{
    parse_steering, serialize_steering, validate_steering, DatasetMeta, ModuleInstance, ResourceRequirements,
    SteeringSpec, TaskDef, Tray,
};

use super::exprgen;
use super::md5_reference;
use super::reference_expr::{reference_eval, RefCtx};
use super::specgen;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- digests ----

/// Sizes around the 64-byte block and 56-byte padding boundaries are
/// overrepresented.
fn corpus_size(rng: &mut ChaCha8Rng) -> usize {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(0..200),
        1 => 64 * rng.gen_range(0..40) + [0usize, 55, 56, 57, 63][rng.gen_range(0..5)],
        2 => rng.gen_range(0..20_000),
        _ => rng.gen_range(60_000..200_000),
    }
}

/// Library digests against the from-scratch reference on the RFC vectors
/// and on `files` random files, file by file and batched in both modes.
pub fn md5_corpus(files: usize) -> Outcome {
    for (input, want) in md5_reference::RFC_VECTORS {
        ensure(md5_reference::md5_hex(input.as_bytes()) == want, || format!("reference wrong on {input:?}"))?;
        ensure(digest::md5_hex(input.as_bytes()) == want, || format!("library wrong on {input:?}"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1321);
    let mut paths = Vec::with_capacity(files);
    let mut expected = Vec::with_capacity(files);
    for i in 0..files {
        let mut bytes = vec![0u8; corpus_size(&mut rng)];
        rng.fill_bytes(&mut bytes);
        let p = dir.path().join(format!("f{i:04}.bin"));
        std::fs::write(&p, &bytes).map_err(|e| e.to_string())?;
        expected.push(md5_reference::md5_hex(&bytes));
        ensure(digest::md5_hex(&bytes) == expected[i], || format!("in-memory digest differs on file {i}"))?;
        paths.push(p);
    }
    for exec in [Exec::Sequential, Exec::Parallel] {
        let got = digest::md5_files(&paths, exec);
        for (i, (g, want)) in got.iter().zip(&expected).enumerate() {
            let g = g.as_ref().map_err(|e| e.to_string())?;
            ensure(g == want, || format!("{exec:?}: file {i} digest {g} != reference {want}"))?;
        }
    }
    Ok(format!("{} RFC vectors and {files} random files agree with the reference", md5_reference::RFC_VECTORS.len()))
}

// ---- statistics ----

fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Population standard deviation from all pairwise differences:
/// var = sum_ij (x_i - x_j)^2 / (2 n^2). Shares no code path with the
/// usual two-pass formula.
fn brute_stddev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mut acc = 0.0;
    for a in xs {
        for b in xs {
            acc += (a - b) * (a - b);
        }
    }
    (acc / (2.0 * n * n)).sqrt()
}

fn run_job_with_stats(db: &Datastore, site: &str, stats: &BTreeMap<String, f64>) -> Result<(), String> {
    let claim = db
        .claim_units(site, &SiteCapabilities::default(), 1)
        .map_err(|e| e.to_string())?
        .pop()
        .ok_or("nothing to claim")?;
    let step = |r: &PilotReport| db.pilot_report(&claim.key, &claim.passkey, r).map_err(|e| e.to_string());
    db.record_submission(&claim.key, "h").map_err(|e| e.to_string())?;
    step(&PilotReport::Started { host: "n".into() })?;
    step(&PilotReport::Stats(stats.clone()))?;
    step(&PilotReport::Finished { outputs: vec![] })?;
    Ok(())
}

fn noop_tray(name: &str) -> Tray {
    Tray {
        name: name.into(),
        metaprojects: vec![],
        modules: vec![ModuleInstance {
            name: "m".into(),
            class_name: "noop".into(),
            metaproject: None,
            parameters: vec![],
        }],
        iterations: 1,
    }
}

fn mono_spec(jobs: u64) -> SteeringSpec {
    SteeringSpec {
        meta: DatasetMeta {
            job_count: jobs,
            ..Default::default()
        },
        parameters: vec![],
        metaprojects: vec![],
        trays: vec![noop_tray("t")],
        tasks: vec![],
        task_edges: vec![],
    }
}

const STAT_NAMES: [&str; 5] = ["events", "seconds", "bytes", "hits", "weight"];

/// Dataset summaries against brute-force recomputation for `maps`
/// randomly generated statistic maps, spread over datasets of 1 to 12
/// jobs, plus the {1, 2, 3} example.
pub fn stats_oracle(maps: usize) -> Outcome {
    let db = Datastore::in_memory().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x57a7);
    let mut generated = 0;
    let mut datasets = 0;
    while generated < maps {
        let jobs = rng.gen_range(1..=12).min(maps - generated);
        let id = db.create_dataset(&mono_spec(jobs as u64), "t", &[]).map_err(|e| e.to_string())?;
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..jobs {
            let scale = 10f64.powi(rng.gen_range(-3..7));
            let mut map = BTreeMap::new();
            for name in STAT_NAMES {
                if rng.gen_bool(0.7) {
                    map.insert(name.to_string(), rng.gen_range(-1.0..1.0) * scale);
                }
            }
            for (k, v) in &map {
                columns.entry(k.clone()).or_default().push(*v);
            }
            run_job_with_stats(&db, "s", &map)?;
            generated += 1;
        }
        datasets += 1;
        let got = db.aggregate_stats(id).map_err(|e| e.to_string())?;
        let names: BTreeSet<&String> = got.keys().collect();
        ensure(names == columns.keys().collect(), || format!("dataset {id}: names {names:?}"))?;
        for (name, xs) in &columns {
            let s = &got[name];
            let sum: f64 = xs.iter().sum();
            let mean = sum / xs.len() as f64;
            let sd = brute_stddev(xs);
            ensure(s.count == xs.len() as u64, || format!("{id}/{name}: count {}", s.count))?;
            ensure(close(s.sum, sum, 1e-9), || format!("{id}/{name}: sum {} vs {sum}", s.sum))?;
            ensure(close(s.average, mean, 1e-9), || format!("{id}/{name}: mean {} vs {mean}", s.average))?;
            ensure(close(s.stddev, sd, 1e-9), || format!("{id}/{name}: stddev {} vs {sd}", s.stddev))?;
        }
    }

    let id = db.create_dataset(&mono_spec(3), "t", &[]).map_err(|e| e.to_string())?;
    for v in [1.0, 2.0, 3.0] {
        run_job_with_stats(&db, "s", &BTreeMap::from([("x".to_string(), v)]))?;
    }
    let sd = db.aggregate_stats(id).map_err(|e| e.to_string())?["x"].stddev;
    ensure((sd - 0.816497).abs() <= 1e-6, || format!("stddev of 1,2,3 is {sd}"))?;
    Ok(format!("{generated} maps over {datasets} datasets within 1e-9; stddev(1,2,3) = {sd:.6}"))
}

// ---- steering round trip ----

pub fn steering_roundtrip(cases: u32) -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner
        .run(&specgen::spec(), |spec| {
            let violations = validate_steering(&spec);
            if !violations.is_empty() {
                return Err(TestCaseError::fail(format!("generator made an invalid spec: {violations:?}")));
            }
            let xml = serialize_steering(&spec);
            let back = parse_steering(&xml).map_err(|e| TestCaseError::fail(format!("{e}\n{xml}")))?;
            if back != spec {
                return Err(TestCaseError::fail(format!("changed by the round trip:\n{xml}")));
            }
            if serialize_steering(&back) != xml {
                return Err(TestCaseError::fail("serialization is not stable"));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} generated documents survive parse(serialize(s)) unchanged"))
}

// ---- submission scripts ----

pub const SPOOL_PLACEHOLDER: &str = "@SPOOL@";

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

struct Fixture {
    site: SiteConfig,
    job: JobMaterialization,
}

/// Twenty deterministic submissions covering every plugin that writes
/// scripts and every optional directive.
fn fixtures() -> Vec<Fixture> {
    let mut out = Vec::new();
    for i in 0..20u64 {
        let plugin = ["local", "batch", "mock"][i as usize % 3];
        let mut site = SiteConfig::new(&format!("site{}", i % 4), plugin, 10);
        if plugin == "batch" {
            site.queueing_options.insert("submit_cmd".into(), "qsub".into());
            site.queueing_options.insert("status_cmd".into(), "qstat".into());
            site.queueing_options.insert("remove_cmd".into(), "qdel".into());
        }
        if i % 2 == 0 {
            site.queueing_options.insert("queue".into(), ["short", "long", "gpu"][i as usize % 3].into());
        }
        if i % 5 == 0 {
            site.queueing_options.insert("account".into(), format!("proj{i}"));
        }
        if i % 3 == 1 {
            site.job_env.insert("OMP_NUM_THREADS".into(), (1 + i % 4).to_string());
            site.job_env.insert("X509_USER_PROXY".into(), "/tmp/x509 it's mine".into());
        }
        if i % 4 != 3 {
            site.system_params.insert("pilot".into(), "/opt/prodkit/bin/prodkit-pilot".into());
        }
        if i % 2 == 1 {
            site.system_params.insert("scratch".into(), format!("/scratch/{}", site.site_id));
            site.system_params.insert("cache".into(), "/var/cache/prodkit".into());
        }
        let key = match i % 4 {
            0 | 2 => UnitKey::job(100 + i as i64, i * 7),
            1 => UnitKey::task(100 + i as i64, i, ["gen", "combine", "det1"][i as usize % 3]),
            _ => UnitKey::task(100 + i as i64, i, "main"),
        };
        let job = JobMaterialization {
            key,
            passkey: format!("{:032x}", 0x5eed_0000_u128 * (i as u128 + 1)),
            monitor_url: format!("http://head{}.example.org:8470", i % 2),
            requirements: ResourceRequirements {
                needs_gpu: i % 6 == 2,
                min_memory_mb: [0, 512, 2048, 16_000][i as usize % 4],
                min_disk_mb: [0, 0, 10_000][i as usize % 3],
                max_walltime_s: [3600, 86_400, 90_061, 59][i as usize % 4],
            },
            steering_file: (i % 7 == 6).then(|| PathBuf::from(format!("/spool/unmonitored/u{i}.xml"))),
        };
        out.push(Fixture { site, job });
    }
    out
}

fn render_fixture(f: &Fixture, spool: &Path) -> Result<String, String> {
    let mut plugin = create_plugin(&f.site).map_err(|e| e.to_string())?;
    let a = plugin.write_config(&f.job, &f.site, spool).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&a.script).map_err(|e| e.to_string())?;
    Ok(text.replace(&spool.display().to_string(), SPOOL_PLACEHOLDER))
}

/// Compares freshly written scripts with the committed copies; with
/// `bless` the committed copies are rewritten first.
pub fn golden_scripts(bless: bool) -> Outcome {
    let spool = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = golden_dir();
    let fx = fixtures();
    for (i, f) in fx.iter().enumerate() {
        let got = render_fixture(f, spool.path())?;
        let path = dir.join(format!("{i:02}-{}.sh", f.site.plugin_name));
        if bless {
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            std::fs::write(&path, &got).map_err(|e| e.to_string())?;
        }
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(got == want, || format!("{} differs:\n{got}", path.display()))?;
    }
    Ok(format!("{} scripts byte-identical to the committed copies", fx.len()))
}

// ---- expressions ----

fn eval_ctx(r: &RefCtx) -> EvalContext {
    EvalContext {
        args: r.args.clone(),
        steering: r.steering.clone(),
        system: r.system.clone(),
        rng_seed: r.seed,
        max_depth: r.max_depth,
    }
}

pub fn ours(text: &str, r: &RefCtx) -> Result<String, &'static str> {
    evaluate(text, &eval_ctx(r)).map_err(|e| e.kind())
}

pub fn expr_differential(count: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut mismatches = Vec::new();
    let mut ok = 0;
    for _ in 0..count {
        let r = exprgen::context(&mut rng);
        let text = exprgen::text(&mut rng);
        let want = reference_eval(&text, &r);
        let got = ours(&text, &r);
        if want.is_ok() {
            ok += 1;
        }
        if want != got {
            mismatches.push(format!("{text:?}\n   reference {want:?}\n   prodkit   {got:?}"));
        }
    }
    ensure(ok * 10 > count * 3, || format!("generator too error-heavy: {ok} successes"))?;
    ensure(mismatches.is_empty(), || {
        format!(
            "{} mismatches, first few:\n{}",
            mismatches.len(),
            mismatches.iter().take(10).cloned().collect::<Vec<_>>().join("\n")
        )
    })?;
    Ok(format!("{count} expressions agree ({ok} evaluate, {} are errors)", count - ok))
}

pub const HOST_CODE: [&str; 10] = [
    "import os",
    "__import__('os').system('true')",
    "for i in range(3): i",
    "while 1: 1",
    "[x for x in (1, 2)]",
    "lambda: 1",
    "open('/etc/passwd')",
    "1 if 1 else 2",
    "exec(1)",
    "1; import sys",
];

pub fn expr_rejections() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = exprgen::context(&mut rng);
    for src in HOST_CODE {
        let text = format!("$eval({src})");
        ensure(ours(&text, &r) == Err("EvalRejected"), || format!("{src:?} gave {:?}", ours(&text, &r)))?;
    }
    Ok(format!("{} import/loop inputs rejected", HOST_CODE.len()))
}

pub fn expr_depth() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = exprgen::context(&mut rng);
    ensure(r.max_depth == 20, || format!("context depth {}", r.max_depth))?;
    ensure(ours(&exprgen::nested(20), &r) == Ok("21".into()), || "depth 20 should evaluate".into())?;
    ensure(ours(&exprgen::nested(21), &r) == Err("RecursionLimit"), || "depth 21 should fail".into())?;
    ensure(reference_eval(&exprgen::nested(21), &r) == Err("RecursionLimit"), || "reference disagrees".into())?;
    ensure(ours("$steering(self)", &r) == Err("RecursionLimit"), || "self reference should fail".into())?;
    Ok("nesting of 20 evaluates, 21 and self reference hit the limit".into())
}

pub fn dsl_oracle(count: usize) -> Outcome {
    let a = expr_differential(count)?;
    let b = expr_rejections()?;
    let c = expr_depth()?;
    Ok(format!("{a}; {b}; {c}"))
}

// ---- DAG ordering ----

/// A random DAG on up to `max` vertices with shuffled names, so that name
/// order says nothing about dependency order.
pub fn random_dag(rng: &mut ChaCha8Rng, max: usize) -> (Vec<String>, Vec<(String, String)>) {
    let n = rng.gen_range(1..=max);
    let mut names: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    names.shuffle(rng);
    let p = rng.gen_range(0.1..0.6);
    let mut edges = Vec::new();
    for j in 0..n {
        for i in 0..j {
            if rng.gen_bool(p) {
                edges.push((names[i].clone(), names[j].clone()));
            }
        }
    }
    edges.shuffle(rng);
    (names, edges)
}

pub fn dag_spec(jobs: u64, vertices: &[String], edges: &[(String, String)]) -> SteeringSpec {
    let mut s = mono_spec(jobs);
    s.tasks = vertices
        .iter()
        .map(|n| TaskDef {
            name: n.clone(),
            trays: vec!["t".into()],
            requirements: ResourceRequirements::default(),
        })
        .collect();
    s.task_edges = edges.to_vec();
    s
}

/// Drives `graphs` random DAGs through the datastore with randomly sized
/// claims and random completion order, checking every start against an
/// independent readiness computation and against the event log order.
pub fn dag_traces(graphs: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xda6);
    let db = Datastore::in_memory().map_err(|e| e.to_string())?;
    let caps = SiteCapabilities::default();
    let mut edges_checked = 0usize;
    let mut max_parallel = 0usize;
    for g in 0..graphs {
        let (names, edges) = random_dag(&mut rng, 12);
        let jobs = rng.gen_range(1..=2u64);
        let id = db.create_dataset(&dag_spec(jobs, &names, &edges), "t", &[]).map_err(|e| e.to_string())?;
        let parents = |v: &str| edges.iter().filter(|(_, c)| c == v).map(|(p, _)| p.clone()).collect::<Vec<_>>();

        let mut finished: BTreeSet<(u64, String)> = BTreeSet::new();
        let mut running = Vec::new();
        let mut step = 0u64;
        let mut start_at: BTreeMap<(u64, String), u64> = BTreeMap::new();
        let mut finish_at: BTreeMap<(u64, String), u64> = BTreeMap::new();
        let total = names.len() * jobs as usize;
        while finished.len() < total {
            step += 1;
            if step > 10_000 {
                return Err(format!("graph {g}: no progress"));
            }
            let limit = rng.gen_range(1..=4);
            let claims = db.claim_units("s", &caps, limit).map_err(|e| e.to_string())?;
            for c in &claims {
                let task = c.key.task.clone().ok_or("claimed a job row of a graph dataset")?;
                let job = c.key.job_index;
                for p in parents(&task) {
                    ensure(finished.contains(&(job, p.clone())), || {
                        format!("graph {g}: {task} of job {job} claimed before parent {p} finished; edges {edges:?}")
                    })?;
                    edges_checked += 1;
                }
                db.record_submission(&c.key, "h").map_err(|e| e.to_string())?;
                db.pilot_report(&c.key, &c.passkey, &PilotReport::Started { host: "n".into() })
                    .map_err(|e| e.to_string())?;
                start_at.insert((job, task), step);
                running.push(c.clone());
            }
            max_parallel = max_parallel.max(running.len());
            if running.is_empty() {
                // nothing claimable while nothing runs means a stall unless done
                let ready: Vec<_> = (0..jobs)
                    .flat_map(|j| names.iter().map(move |n| (j, n.clone())))
                    .filter(|(j, n)| !finished.contains(&(*j, n.clone())))
                    .filter(|(j, n)| parents(n).iter().all(|p| finished.contains(&(*j, p.clone()))))
                    .collect();
                return Err(format!("graph {g}: stalled with ready tasks {ready:?}"));
            }
            let k = rng.gen_range(1..=running.len());
            running.shuffle(&mut rng);
            for c in running.drain(..k) {
                db.pilot_report(&c.key, &c.passkey, &PilotReport::Finished { outputs: vec![] })
                    .map_err(|e| e.to_string())?;
                let key = (c.key.job_index, c.key.task.clone().unwrap_or_default());
                finish_at.insert(key.clone(), step);
                finished.insert(key);
            }
        }
        let counts = db.state_counts(id).map_err(|e| e.to_string())?;
        ensure(counts.get(&JobState::Ok) == Some(&jobs), || format!("graph {g}: job states {counts:?}"))?;

        // the server's own record must show the same order
        let log = db.event_log(Some(id)).map_err(|e| e.to_string())?;
        let seq_of = |job: u64, task: &str, event: &str| {
            log.iter()
                .find(|e| e.key.job_index == job && e.key.task.as_deref() == Some(task) && e.event == event)
                .map(|e| e.seq)
        };
        for j in 0..jobs {
            for (p, c) in &edges {
                let done = seq_of(j, p, "WorkCompleted").ok_or_else(|| format!("graph {g}: no completion for {p}"))?;
                let start = seq_of(j, c, "PilotStarted").ok_or_else(|| format!("graph {g}: no start for {c}"))?;
                ensure(start > done, || format!("graph {g}: log has {c} starting before {p} finished"))?;
                ensure(start_at[&(j, c.clone())] > finish_at[&(j, p.clone())], || format!("graph {g}: trace order"))?;
            }
        }
    }
    Ok(format!("{graphs} random DAGs, {edges_checked} parent checks, up to {max_parallel} tasks in flight"))
}
