//! Whole-system runs: a daemon, its sites and real pilot processes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prodkit::dagengine::SiteCapabilities;
use prodkit::daemons::{soapdh_cycle, Roles};
use prodkit::datastore::{Datastore, PilotReport};
use prodkit::digest::md5_file;
use prodkit::lifecycle::{JobState, TimeoutPolicy, UnitKey};
use prodkit::par::Exec;
use prodkit::rpc::{code, method, Client, Value};
use prodkit::storage::Storage;

use super::cluster::{local_site, simple_steering, Cluster, ClusterOptions};
use super::criteria::Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

const NON_TERMINAL_EXCEPT_WAITING: [JobState; 8] = [
    JobState::Queueing,
    JobState::Queued,
    JobState::Processing,
    JobState::Copying,
    JobState::Error,
    JobState::Reset,
    JobState::Cleaning,
    JobState::Suspended,
];

/// What sampling saw while a dataset ran.
#[derive(Debug, Default)]
struct Watch {
    samples: usize,
    max_active: BTreeMap<String, usize>,
    /// Longest time any unit had spent in one state when sampled, and where.
    longest_stay: (i64, String),
}

/// Samples `dataset` every 50 ms until all jobs are OK or `limit` passes,
/// failing on the first sample that breaks conservation or a queue bound.
fn watch(c: &Cluster, dataset: i64, sites: &[(&str, usize)], limit: Duration) -> Result<Watch, String> {
    let total = c.db.job_total(dataset).map_err(e)?;
    let until = Instant::now() + limit;
    let mut w = Watch::default();
    loop {
        let counts = c.counts(dataset);
        let sum: u64 = counts.values().sum();
        ensure(sum == total, || format!("sample {}: counts {counts:?} sum to {sum}, not {total}", w.samples))?;
        for (site, bound) in sites {
            let active = c.db.count_active(site).map_err(e)?;
            ensure(active <= *bound, || format!("site {site} holds {active} active units, bound {bound}"))?;
            let m = w.max_active.entry(site.to_string()).or_default();
            *m = (*m).max(active);
        }
        let now = c.db.now();
        for r in c.db.records_in_states(&NON_TERMINAL_EXCEPT_WAITING).map_err(e)? {
            let stay = now - r.state_entered;
            if stay > w.longest_stay.0 {
                w.longest_stay = (stay, format!("{} in {}", r.key, r.state));
            }
        }
        w.samples += 1;
        if counts.get(&JobState::Ok) == Some(&total) {
            return Ok(w);
        }
        if Instant::now() > until {
            return Err(format!("not done after {limit:?}: {counts:?}\n{}", c.tail(dataset, 20)));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn check_outputs(c: &Cluster, dataset: i64, jobs: u64) -> Result<(), String> {
    let stats = c.client().call(method::DATASET_STATS, &[dataset.into()]).map_err(e)?;
    let sum = stats.get("events").and_then(|s| s.get("sum")).and_then(Value::as_f64);
    let want = (jobs * (jobs + 1) / 2) as f64;
    ensure(sum == Some(want), || format!("events sum {sum:?}, expected {want}"))?;
    for j in 0..jobs {
        let out = c.db.outputs(&UnitKey::job(dataset, j)).map_err(e)?;
        ensure(out.len() == 1, || format!("job {j} has {} outputs", out.len()))?;
        let path = c.storage.join(format!("{dataset}/out_{j:04}.txt"));
        let md5 = md5_file(&path).map_err(|err| format!("{}: {err}", path.display()))?;
        ensure(md5 == out[0].md5, || format!("job {j}: stored file does not match its recorded digest"))?;
    }
    Ok(())
}

/// `jobs` jobs over three local sites with `max_queued` each.
pub fn e2e_monolithic(jobs: u64, max_queued: usize) -> Outcome {
    let t0 = Instant::now();
    let names = ["east", "west", "north"];
    let c = Cluster::start(
        |root| names.iter().map(|n| local_site(root, n, max_queued)).collect(),
        ClusterOptions::default(),
    );
    let id = c.submit(&simple_steering(jobs, 0.2))?;
    let sites: Vec<(&str, usize)> = names.iter().map(|n| (*n, max_queued)).collect();
    let w = watch(&c, id, &sites, Duration::from_secs(300))?;
    check_outputs(&c, id, jobs)?;
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{jobs} jobs OK in {:.1} s; {} samples conserved; peak active per site {:?} (bound {max_queued})",
        elapsed.as_secs_f64(),
        w.samples,
        w.max_active
    ))
}

/// The same run through a fault-injecting backend.
pub fn chaos(jobs: u64, max_queued: usize) -> Outcome {
    let t0 = Instant::now();
    let processing_timeout = Duration::from_secs(10);
    let poll = Duration::from_millis(200);
    let names = ["east", "west", "north"];
    let c = Cluster::start(
        |root| {
            names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let mut s = local_site(root, n, max_queued);
                    s.plugin_name = "mock".into();
                    s.poll_interval = poll;
                    for (k, v) in [
                        ("mock.inner", "local".to_string()),
                        ("mock.seed", (17 + i).to_string()),
                        ("mock.submit_failure_rate", "0.2".into()),
                        ("mock.kill_rate", "0.1".into()),
                        ("mock.kill_after_s", "0.5".into()),
                    ] {
                        s.queueing_options.insert(k.into(), v);
                    }
                    s
                })
                .collect()
        },
        ClusterOptions {
            policy: TimeoutPolicy::uniform(Duration::from_secs(60), Some(5))
                .with_timeout(JobState::Processing, processing_timeout),
            ..ClusterOptions::default()
        },
    );
    let id = c.submit(&simple_steering(jobs, 1.0))?;
    let sites: Vec<(&str, usize)> = names.iter().map(|n| (*n, max_queued)).collect();
    let w = watch(&c, id, &sites, Duration::from_secs(600))?;
    check_outputs(&c, id, jobs)?;

    let log = c.db.event_log(Some(id)).map_err(e)?;
    let count = |event: &str, from: JobState| log.iter().filter(|x| x.event == event && x.from == from).count();
    let refused = count("ErrorReported", JobState::Queueing);
    let killed = count("TimeoutExpired", JobState::Processing);
    ensure(refused > 0, || "no submission was refused".into())?;
    ensure(killed > 0, || "no running pilot was killed".into())?;
    let bound = (processing_timeout + 2 * poll).as_millis() as i64;
    ensure(w.longest_stay.0 <= bound, || {
        format!("{} stayed {} ms, bound {bound} ms", w.longest_stay.1, w.longest_stay.0)
    })?;
    let failed = c.counts(id).get(&JobState::Failed).copied().unwrap_or(0);
    ensure(failed == 0, || format!("{failed} jobs failed"))?;
    Ok(format!(
        "{jobs}/{jobs} OK in {:.1} s after {refused} refused submissions and {killed} killed pilots; longest stay {} ms ({}) <= {bound} ms",
        t0.elapsed().as_secs_f64(),
        w.longest_stay.0,
        w.longest_stay.1
    ))
}

/// Everything that could change when a report is (wrongly) accepted.
fn snapshot(db: &Datastore, dataset: i64) -> Result<String, String> {
    let mut s = String::new();
    for j in db.job_records(dataset).map_err(e)? {
        let _ = writeln!(s, "{j:?}");
        let key = UnitKey::job(dataset, j.job_index);
        let _ = writeln!(s, "{:?} {:?}", db.unit_stats(&key).map_err(e)?, db.outputs(&key).map_err(e)?);
    }
    let _ = writeln!(s, "events {}", db.event_log(Some(dataset)).map_err(e)?.len());
    Ok(s)
}

/// Every pilot-facing call a stale pilot could make.
fn stale_calls(key: &str) -> Vec<(&'static str, Vec<Value>)> {
    let stats = Value::Struct(BTreeMap::from([("events".to_string(), Value::Float(99.0))]));
    let output = Value::Struct(BTreeMap::from([
        ("name".to_string(), Value::Str("x".into())),
        ("url".to_string(), Value::Str("file:///tmp/x".into())),
        ("md5".to_string(), Value::Str("d41d8cd98f00b204e9800998ecf8427e".into())),
        ("size".to_string(), Value::Int(0)),
    ]));
    vec![
        (method::JOB_STARTED, vec![key.into(), "stale-host".into()]),
        (method::KEEPALIVE, vec![key.into()]),
        (method::JOB_STATS, vec![key.into(), stats]),
        (method::JOB_FINISHED, vec![key.into(), Value::Array(vec![output])]),
        (method::JOB_ERROR, vec![key.into(), "stale".into()]),
        (method::JOB_STATUS, vec![key.into()]),
        (method::GET_STEERING, vec![key.into()]),
    ]
}

/// Sends every stale call for every job; returns how many were rejected
/// as bad passkeys.
fn replay(c: &Cluster, dataset: i64, old: &BTreeMap<u64, String>) -> Result<(usize, usize), String> {
    let (mut sent, mut rejected) = (0, 0);
    for (job, passkey) in old {
        let client = Client::new(&c.url).with_passkey(passkey);
        let key = UnitKey::job(dataset, *job).to_string();
        for (m, params) in stale_calls(&key) {
            sent += 1;
            match client.call(m, &params) {
                Err(err) if err.fault().is_some_and(|f| f.code == code::AUTH && f.message.contains("passkey")) => {
                    rejected += 1
                }
                other => return Err(format!("{m} with a pre-reset passkey for {key} returned {other:?}")),
            }
        }
    }
    Ok((sent, rejected))
}

/// Forced reset of `jobs` running jobs, then replays of every pilot call
/// with the old passkeys, both while the jobs wait and after they are
/// running again under new passkeys.
pub fn passkey_security(jobs: u64) -> Outcome {
    let c = Cluster::start(|_| vec![], ClusterOptions::default());
    let id = c.submit(&simple_steering(jobs, 0.0))?;
    let caps = SiteCapabilities::default();
    let start_all = |db: &Datastore| -> Result<BTreeMap<u64, String>, String> {
        let claims = db.claim_units("manual", &caps, jobs as usize).map_err(e)?;
        ensure(claims.len() == jobs as usize, || format!("claimed {}", claims.len()))?;
        let mut keys = BTreeMap::new();
        for cl in claims {
            db.record_submission(&cl.key, "h").map_err(e)?;
            db.pilot_report(&cl.key, &cl.passkey, &PilotReport::Started { host: "n".into() })
                .map_err(e)?;
            keys.insert(cl.key.job_index, cl.passkey);
        }
        Ok(keys)
    };
    let first = start_all(&c.db)?;
    let changed = c
        .client()
        .call(method::CONTROL_DATASET, &[id.into(), "reset".into()])
        .map_err(e)?;
    ensure(changed.get("changed").and_then(Value::as_i64) == Some(jobs as i64), || format!("reset gave {changed:?}"))?;
    let waiting = c.wait_for(Duration::from_secs(30), |db| {
        db.state_counts(id).unwrap().get(&JobState::Waiting) == Some(&jobs)
    });
    ensure(waiting, || format!("reset jobs did not return to WAITING: {:?}", c.counts(id)))?;

    let before = snapshot(&c.db, id)?;
    let (sent1, rej1) = replay(&c, id, &first)?;
    let after = snapshot(&c.db, id)?;
    ensure(before == after, || "state changed while waiting".into())?;

    let second = start_all(&c.db)?;
    ensure(second.iter().all(|(j, k)| first[j] != *k), || "passkey was not rotated".into())?;
    let before = snapshot(&c.db, id)?;
    let (sent2, rej2) = replay(&c, id, &first)?;
    let after = snapshot(&c.db, id)?;
    ensure(before == after, || "state changed while running".into())?;

    // the current passkey still works, so the rejections were specific
    let (job, key) = second.iter().next().unwrap();
    Client::new(&c.url)
        .with_passkey(key)
        .call(method::KEEPALIVE, &[UnitKey::job(id, *job).to_string().into()])
        .map_err(|err| format!("current passkey refused: {err}"))?;
    Ok(format!(
        "{}/{} stale reports rejected with code {}, no state change",
        rej1 + rej2,
        sent1 + sent2,
        code::AUTH
    ))
}

/// Runs `jobs` jobs to COPYING with the output checker stopped, flips one
/// bit of one job's output, then runs the checker by hand.
pub fn integrity(jobs: u64) -> Outcome {
    let c = Cluster::start(
        |root| vec![local_site(root, "a", 20), local_site(root, "b", 20)],
        ClusterOptions {
            roles: Roles {
                dh: false,
                ..Roles::default()
            },
            ..ClusterOptions::default()
        },
    );
    let id = c.submit(&simple_steering(jobs, 0.0))?;
    let copying = c.wait_for(Duration::from_secs(180), |db| {
        db.state_counts(id).unwrap().get(&JobState::Copying) == Some(&jobs)
    });
    ensure(copying, || format!("jobs did not all reach COPYING: {:?}", c.counts(id)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xb17);
    let victim = rng.gen_range(0..jobs);
    let out = c.db.outputs(&UnitKey::job(id, victim)).map_err(e)?;
    let target = out.first().ok_or("victim has no outputs")?;
    let path = c.storage.join(format!("{id}/out_{victim:04}.txt"));
    let mut bytes = std::fs::read(&path).map_err(e)?;
    let at = rng.gen_range(0..bytes.len());
    bytes[at] ^= 1 << rng.gen_range(0..8);
    std::fs::write(&path, &bytes).map_err(e)?;
    ensure(md5_file(&path).map_err(e)? != target.md5, || "flip did not change the digest".into())?;

    let report = soapdh_cycle(&c.db, &Storage::default(), &c.dh_settings, Exec::default()).map_err(e)?;
    let flagged: Vec<UnitKey> = c
        .db
        .event_log(Some(id))
        .map_err(e)?
        .into_iter()
        .filter(|x| x.event == "ErrorReported")
        .map(|x| x.key.job_key())
        .collect();
    ensure(flagged == vec![UnitKey::job(id, victim)], || format!("flagged {flagged:?}, corrupted job {victim}"))?;
    ensure(report.corrupt == 1 && report.verified == jobs as usize - 1, || format!("checker report {report:?}"))?;
    let ok = c.counts(id).get(&JobState::Ok).copied().unwrap_or(0);
    ensure(ok == jobs - 1, || format!("{ok} jobs OK after the check"))?;

    // the flagged job is retried and recovers
    let storage = Storage::default();
    let recovered = c.wait_for(Duration::from_secs(60), |db| {
        let _ = soapdh_cycle(db, &storage, &c.dh_settings, Exec::default());
        db.state_counts(id).unwrap().get(&JobState::Ok) == Some(&jobs)
    });
    ensure(recovered, || format!("flagged job did not recover: {:?}", c.counts(id)))?;
    Ok(format!(
        "bit flip in job {victim} of {jobs}: exactly that job flagged to ERROR, {} verified clean, retried to OK",
        report.verified
    ))
}

// ---- DAG scenarios ----

/// A deterministic workflow of 2 to 5 steps. Step `i` downloads the
/// outputs of its parents, appends its own text and uploads the result,
/// so every output digest depends on the whole upstream history.
pub struct Workflow {
    pub steps: usize,
    pub parents: Vec<Vec<usize>>,
    pub seed: u64,
}

pub fn workflow(seed: u64) -> Workflow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = rng.gen_range(2..=5);
    let parents = (0..steps)
        .map(|j| {
            let mut ps: Vec<usize> = (0..j).filter(|_| rng.gen_bool(0.5)).collect();
            if j > 0 && ps.is_empty() {
                ps.push(rng.gen_range(0..j));
            }
            ps.shuffle(&mut rng);
            ps
        })
        .collect();
    Workflow { steps, parents, seed }
}

impl Workflow {
    fn tray(&self, j: usize) -> String {
        let mut s = format!("  <tray name=\"t{j}\">\n");
        let mut inputs = Vec::new();
        for p in &self.parents[j] {
            let _ = write!(
                s,
                r#"    <module name="get{p}" class="transfer">
      <parameter name="src">$args(dataset)/j$args(procnum)/s{p}.dat</parameter>
      <parameter name="dst">in_{p}_{j}.dat</parameter>
      <parameter name="direction">download</parameter>
    </module>
"#
            );
            inputs.push(format!("<item>in_{p}_{j}.dat</item>"));
        }
        inputs.push(format!("<item>own{j}.txt</item>"));
        let _ = write!(
            s,
            r#"    <module name="make" class="write-text">
      <parameter name="path">own{j}.txt</parameter>
      <parameter name="text">wf{seed} s{j} job $args(procnum) x $eval($args(procnum) * {m} + {j})</parameter>
      <parameter name="repeat" type="int">{r}</parameter>
    </module>
    <module name="join" class="file-concatenate">
      <parameter name="inputs" type="liststring">{items}</parameter>
      <parameter name="output">s{j}.dat</parameter>
    </module>
    <module name="put" class="transfer">
      <parameter name="src">s{j}.dat</parameter>
      <parameter name="dst">$args(dataset)/j$args(procnum)/s{j}.dat</parameter>
      <parameter name="direction">upload</parameter>
    </module>
  </tray>
"#,
            seed = self.seed,
            m = self.seed % 7 + 2,
            r = (self.seed as usize + j) % 4 + 1,
            items = inputs.join("")
        );
        s
    }

    /// As a task graph (`dag`) or as one task running the trays in order.
    pub fn steering(&self, jobs: u64, dag: bool) -> String {
        let mut s = format!(
            "<configuration version=\"3\">\n  <meta description=\"wf{}\" category=\"test\" jobs=\"{jobs}\"/>\n",
            self.seed
        );
        for j in 0..self.steps {
            s.push_str(&self.tray(j));
        }
        if dag {
            for j in 0..self.steps {
                let _ = writeln!(s, "  <task name=\"s{j}\"><tray ref=\"t{j}\"/></task>");
            }
            for (j, ps) in self.parents.iter().enumerate() {
                for p in ps {
                    let _ = writeln!(s, "  <taskrel parent=\"s{p}\" child=\"s{j}\"/>");
                }
            }
        }
        s.push_str("</configuration>\n");
        s
    }
}

/// Output name (without the dataset prefix) to digest, per job.
fn output_digests(c: &Cluster, dataset: i64, jobs: u64) -> Result<BTreeMap<(u64, String), String>, String> {
    let mut out = BTreeMap::new();
    let prefix = format!("{dataset}/");
    for j in 0..jobs {
        for o in c.db.outputs(&UnitKey::job(dataset, j)).map_err(e)? {
            let name = o.name.strip_prefix(&prefix).unwrap_or(&o.name).to_string();
            let path = c.storage.join(&o.name);
            let md5 = md5_file(&path).map_err(|err| format!("{}: {err}", path.display()))?;
            ensure(md5 == o.md5, || format!("{} does not match its record", path.display()))?;
            out.insert((j, name), md5);
        }
    }
    Ok(out)
}

/// Runs `count` workflows both as graphs and monolithically and compares
/// every output digest.
pub fn dag_matches_monolithic(count: u64) -> Outcome {
    let jobs = 2;
    let c = Cluster::start(
        |root| vec![local_site(root, "a", 24), local_site(root, "b", 24)],
        ClusterOptions::default(),
    );
    let mut pairs = Vec::new();
    for seed in 0..count {
        let wf = workflow(seed);
        let dag = c.submit(&wf.steering(jobs, true))?;
        let mono = c.submit(&wf.steering(jobs, false))?;
        pairs.push((seed, dag, mono));
    }
    let done = c.wait_for(Duration::from_secs(300), |_| pairs.iter().all(|(_, d, m)| c.all_ok(*d) && c.all_ok(*m)));
    if !done {
        let (_, d, m) = pairs.iter().find(|(_, d, m)| !c.all_ok(*d) || !c.all_ok(*m)).unwrap();
        return Err(format!("not finished: {:?} / {:?}\n{}", c.counts(*d), c.counts(*m), c.tail(*d, 10)));
    }
    let mut files = 0;
    for (seed, dag, mono) in &pairs {
        let a = output_digests(&c, *dag, jobs)?;
        let b = output_digests(&c, *mono, jobs)?;
        ensure(a.len() == workflow(*seed).steps * jobs as usize, || format!("workflow {seed}: {} outputs", a.len()))?;
        ensure(a == b, || format!("workflow {seed}: graph {a:?}\nmonolithic {b:?}"))?;
        files += a.len();
    }
    Ok(format!("{count} workflows, {files} output digests identical between graph and monolithic runs"))
}

/// Two generators feed a GPU step whose output two detectors read.
pub fn fig7_steering(jobs: u64) -> String {
    let tray = |name: &str| {
        format!(
            r#"  <tray name="{name}">
    <module name="w" class="write-text"><parameter name="path">{name}.txt</parameter><parameter name="text">{name} $args(procnum)</parameter></module>
    <module name="z" class="sleep"><parameter name="seconds" type="float">0.1</parameter></module>
  </tray>
"#
        )
    };
    let mut s = format!("<configuration version=\"3\">\n  <meta description=\"shape\" category=\"test\" jobs=\"{jobs}\"/>\n");
    for t in ["gen1", "gen2", "combine", "det1", "det2"] {
        s.push_str(&tray(t));
    }
    for t in ["gen1", "gen2", "det1", "det2"] {
        let _ = writeln!(s, "  <task name=\"{t}\"><tray ref=\"{t}\"/></task>");
    }
    s.push_str("  <task name=\"combine\"><tray ref=\"combine\"/><requirements gpu=\"true\"/></task>\n");
    for (p, c) in [("gen1", "combine"), ("gen2", "combine"), ("combine", "det1"), ("combine", "det2")] {
        let _ = writeln!(s, "  <taskrel parent=\"{p}\" child=\"{c}\"/>");
    }
    s.push_str("</configuration>\n");
    s
}

pub fn gpu_placement(jobs: u64) -> Outcome {
    let c = Cluster::start(
        |root| {
            let cpu = local_site(root, "cpu", 8);
            let mut gpu = local_site(root, "gpu", 8);
            gpu.capabilities.gpu = true;
            vec![cpu, gpu]
        },
        ClusterOptions::default(),
    );
    let shaped = c.submit(&fig7_steering(jobs))?;
    let plain = c.submit(&simple_steering(jobs, 0.3))?;
    let done = c.wait_for(Duration::from_secs(120), |_| c.all_ok(shaped) && c.all_ok(plain));
    ensure(done, || format!("not finished: {:?} {:?}\n{}", c.counts(shaped), c.counts(plain), c.tail(shaped, 10)))?;

    let log = c.db.event_log(Some(shaped)).map_err(e)?;
    let mut gpu_starts = 0;
    for x in log.iter().filter(|x| x.event == "PilotStarted") {
        if x.key.task.as_deref() == Some("combine") {
            ensure(x.site.as_deref() == Some("gpu"), || format!("{} started on {:?}", x.key, x.site))?;
            gpu_starts += 1;
        }
    }
    ensure(gpu_starts >= jobs as usize, || format!("only {gpu_starts} combine starts"))?;
    for j in 0..jobs {
        for t in c.db.task_records(shaped, j).map_err(e)? {
            if t.task_name == "combine" {
                ensure(t.site.as_deref() == Some("gpu"), || format!("job {j}: combine ran on {:?}", t.site))?;
            }
        }
    }
    let plain_sites: std::collections::BTreeSet<String> = c
        .db
        .event_log(Some(plain))
        .map_err(e)?
        .into_iter()
        .filter(|x| x.event == "PilotStarted")
        .filter_map(|x| x.site)
        .collect();
    ensure(plain_sites.contains("cpu"), || format!("the CPU site ran nothing: {plain_sites:?}"))?;
    Ok(format!(
        "{gpu_starts} GPU-vertex starts, all on the GPU site; CPU-only jobs ran on {plain_sites:?}"
    ))
}
