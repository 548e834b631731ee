//! Pool of external worker processes speaking line-delimited JSON.
//!
//! ```text
//! -> {"hello":1}
//! <- {"hello":1}
//! -> {"id":0,"instance":"scene-3","config":{"block":5.0,"reg":10.0}}
//! <- {"id":0,"cost":0.25}            or  {"id":0,"cost":"fail"}
//! ```
//!
//! Responses may come back in any order and are matched by id. A worker that
//! exits fails its outstanding requests and is restarted, at most
//! [`MAX_RESTARTS`] times per pool.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Cost, EvalCache, EvalRequest, Evaluator};
use crate::paramspace::Configuration;

pub const MAX_RESTARTS: usize = 3;

#[derive(Debug, Serialize)]
struct Request<'a> {
    id: u64,
    instance: &'a str,
    config: &'a BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Response {
    id: u64,
    cost: Cost,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Hello {
    hello: u32,
}

enum Event {
    Line { worker: usize, epoch: u64, line: String },
    Closed { worker: usize, epoch: u64 },
}

struct Worker {
    child: Child,
    stdin: Option<ChildStdin>,
    epoch: u64,
    outstanding: HashSet<u64>,
    alive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub workers: usize,
    /// Upper bound on requests in flight across the whole pool.
    pub max_outstanding: usize,
}

impl PoolConfig {
    /// Splits a command line on whitespace; `parallel` workers, one request each.
    pub fn from_command_line(command: &str, parallel: usize) -> Result<Self> {
        let command: Vec<String> = command.split_whitespace().map(str::to_string).collect();
        if command.is_empty() {
            return Err(Error::Config("worker command is empty".into()));
        }
        let parallel = parallel.max(1);
        Ok(PoolConfig {
            command,
            workers: parallel,
            max_outstanding: parallel,
        })
    }
}

pub struct WorkerPool {
    config: PoolConfig,
    workers: Vec<Worker>,
    events_tx: Sender<Event>,
    events_rx: Receiver<Event>,
    next_id: u64,
    restarts: usize,
}

impl WorkerPool {
    pub fn spawn(config: PoolConfig) -> Result<Self> {
        if config.workers == 0 || config.max_outstanding == 0 {
            return Err(Error::Config("worker pool needs at least one worker and one slot".into()));
        }
        let (events_tx, events_rx) = channel();
        let mut pool = WorkerPool {
            config,
            workers: Vec::new(),
            events_tx,
            events_rx,
            next_id: 0,
            restarts: 0,
        };
        for w in 0..pool.config.workers {
            let worker = pool.launch(w, 0)?;
            pool.workers.push(worker);
        }
        Ok(pool)
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }

    fn launch(&self, index: usize, epoch: u64) -> Result<Worker> {
        let (program, args) = self.config.command.split_first().expect("non-empty command");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Worker(format!("cannot start `{program}`: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));

        writeln!(stdin, "{}", serde_json::to_string(&Hello { hello: 1 })?)?;
        stdin.flush()?;
        let mut line = String::new();
        stdout.read_line(&mut line)?;
        match serde_json::from_str::<Hello>(line.trim_end()) {
            Ok(Hello { hello: 1 }) => {}
            _ => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Protocol {
                    reason: "expected handshake {\"hello\":1}".into(),
                    line: line.trim_end().to_string(),
                });
            }
        }

        let tx = self.events_tx.clone();
        thread::spawn(move || {
            let mut line = String::new();
            loop {
                line.clear();
                match stdout.read_line(&mut line) {
                    Ok(0) | Err(_) => {
                        let _ = tx.send(Event::Closed { worker: index, epoch });
                        return;
                    }
                    Ok(_) => {
                        let text = line.trim_end_matches(['\n', '\r']).to_string();
                        if tx.send(Event::Line { worker: index, epoch, line: text }).is_err() {
                            return;
                        }
                    }
                }
            }
        });

        Ok(Worker {
            child,
            stdin: Some(stdin),
            epoch,
            outstanding: HashSet::new(),
            alive: true,
        })
    }

    /// Marks a worker's outstanding jobs failed and restarts it if allowed.
    fn handle_crash(
        &mut self,
        w: usize,
        in_flight: &mut HashMap<u64, usize>,
        results: &mut [Option<Cost>],
    ) -> Result<()> {
        let worker = &mut self.workers[w];
        worker.alive = false;
        worker.stdin = None;
        let _ = worker.child.kill();
        let _ = worker.child.wait();
        for id in worker.outstanding.drain() {
            if let Some(job) = in_flight.remove(&id) {
                results[job] = Some(Cost::Failed);
            }
        }
        if self.restarts < MAX_RESTARTS {
            self.restarts += 1;
            let epoch = self.workers[w].epoch + 1;
            self.workers[w] = self.launch(w, epoch)?;
        }
        Ok(())
    }

    /// Runs each `(config, instance)` job once; results are aligned with `jobs`.
    pub fn run(&mut self, jobs: &[(&Configuration, &str)]) -> Result<Vec<Cost>> {
        let mut results: Vec<Option<Cost>> = vec![None; jobs.len()];
        let mut pending: VecDeque<usize> = (0..jobs.len()).collect();
        let mut in_flight: HashMap<u64, usize> = HashMap::new();

        loop {
            // dispatch up to the outstanding limit, least-loaded worker first
            while !pending.is_empty() && in_flight.len() < self.config.max_outstanding {
                let Some(w) = (0..self.workers.len())
                    .filter(|&w| self.workers[w].alive)
                    .min_by_key(|&w| self.workers[w].outstanding.len())
                else {
                    break;
                };
                let job = pending.pop_front().unwrap();
                let id = self.next_id;
                self.next_id += 1;
                let (config, instance) = jobs[job];
                let line = serde_json::to_string(&Request {
                    id,
                    instance,
                    config: config.values(),
                })?;
                let worker = &mut self.workers[w];
                let sent = worker
                    .stdin
                    .as_mut()
                    .map(|s| writeln!(s, "{line}").and_then(|_| s.flush()).is_ok())
                    .unwrap_or(false);
                worker.outstanding.insert(id);
                in_flight.insert(id, job);
                if !sent {
                    self.handle_crash(w, &mut in_flight, &mut results)?;
                }
            }

            if pending.is_empty() && in_flight.is_empty() {
                break;
            }
            if in_flight.is_empty() && !self.workers.iter().any(|w| w.alive) {
                return Err(Error::Worker(format!(
                    "all workers exited after {} restarts with {} jobs left",
                    self.restarts,
                    pending.len()
                )));
            }

            let event = self
                .events_rx
                .recv()
                .map_err(|_| Error::Worker("worker event channel closed".into()))?;
            match event {
                Event::Line { worker, epoch, line } => {
                    if epoch != self.workers[worker].epoch || !self.workers[worker].alive {
                        continue;
                    }
                    let resp: Response = serde_json::from_str(&line).map_err(|e| Error::Protocol {
                        reason: format!("malformed response: {e}"),
                        line: line.clone(),
                    })?;
                    if !self.workers[worker].outstanding.remove(&resp.id) {
                        return Err(Error::Protocol {
                            reason: format!("unknown request id {}", resp.id),
                            line,
                        });
                    }
                    let job = in_flight.remove(&resp.id).expect("tracked id");
                    results[job] = Some(resp.cost);
                }
                Event::Closed { worker, epoch } => {
                    if epoch != self.workers[worker].epoch || !self.workers[worker].alive {
                        continue;
                    }
                    self.handle_crash(worker, &mut in_flight, &mut results)?;
                }
            }
        }
        Ok(results.into_iter().map(|r| r.expect("every job answered")).collect())
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        for w in &mut self.workers {
            w.stdin = None;
        }
        let deadline = Instant::now() + Duration::from_secs(2);
        for w in &mut self.workers {
            loop {
                match w.child.try_wait() {
                    Ok(Some(_)) | Err(_) => break,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                    Ok(None) => {
                        let _ = w.child.kill();
                        let _ = w.child.wait();
                        break;
                    }
                }
            }
        }
    }
}

/// [`Evaluator`] backed by a worker pool and a shared cost cache.
pub struct WorkerEvaluator {
    pool: Mutex<WorkerPool>,
    cache: Arc<EvalCache>,
    instance_ids: Vec<String>,
    sent: AtomicUsize,
}

impl WorkerEvaluator {
    pub fn new(pool: WorkerPool, cache: Arc<EvalCache>, instance_ids: Vec<String>) -> Self {
        WorkerEvaluator {
            pool: Mutex::new(pool),
            cache,
            instance_ids,
            sent: AtomicUsize::new(0),
        }
    }

    /// Requests sent to workers so far (cache hits excluded).
    pub fn requests_sent(&self) -> usize {
        self.sent.load(Ordering::Relaxed)
    }

    pub fn restarts(&self) -> usize {
        self.pool.lock().unwrap().restarts()
    }

    pub fn cache(&self) -> &Arc<EvalCache> {
        &self.cache
    }

    /// Costs of one configuration on the given instance ids.
    pub fn evaluate_config(&self, config: &Configuration, instances: &[&str]) -> Result<BTreeMap<String, Cost>> {
        let fp = config.fingerprint();
        let mut out = BTreeMap::new();
        let mut missing: Vec<&str> = Vec::new();
        for &inst in instances {
            match self.cache.get_fingerprint(&fp, inst) {
                Some(c) => {
                    out.insert(inst.to_string(), c);
                }
                None if !missing.contains(&inst) => missing.push(inst),
                None => {}
            }
        }
        if !missing.is_empty() {
            let jobs: Vec<(&Configuration, &str)> = missing.iter().map(|&i| (config, i)).collect();
            let costs = self.dispatch(&jobs)?;
            for (inst, cost) in missing.into_iter().zip(costs) {
                self.cache.insert(fp.clone(), inst.to_string(), cost);
                out.insert(inst.to_string(), cost);
            }
        }
        Ok(out)
    }

    fn dispatch(&self, jobs: &[(&Configuration, &str)]) -> Result<Vec<Cost>> {
        self.sent.fetch_add(jobs.len(), Ordering::Relaxed);
        self.pool.lock().unwrap().run(jobs)
    }
}

impl Evaluator for WorkerEvaluator {
    fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    fn evaluate(&self, requests: &[EvalRequest<'_>]) -> Result<Vec<Vec<Cost>>> {
        let fingerprints: Vec<String> = requests.iter().map(|r| r.config.fingerprint()).collect();
        let mut jobs: Vec<(&Configuration, &str)> = Vec::new();
        let mut job_keys: HashMap<(&str, &str), usize> = HashMap::new();
        for (req, fp) in requests.iter().zip(&fingerprints) {
            for &j in req.instances {
                let inst = self.instance_ids.get(j).ok_or_else(|| {
                    Error::Argument(format!("instance index {j} out of range"))
                })?;
                if self.cache.get_fingerprint(fp, inst).is_none() && !job_keys.contains_key(&(fp.as_str(), inst.as_str())) {
                    job_keys.insert((fp.as_str(), inst.as_str()), jobs.len());
                    jobs.push((req.config, inst.as_str()));
                }
            }
        }
        if !jobs.is_empty() {
            let costs = self.dispatch(&jobs)?;
            for (key, &idx) in &job_keys {
                self.cache.insert(key.0.to_string(), key.1.to_string(), costs[idx]);
            }
        }
        requests
            .iter()
            .zip(&fingerprints)
            .map(|(req, fp)| {
                req.instances
                    .iter()
                    .map(|&j| {
                        self.cache
                            .get_fingerprint(fp, &self.instance_ids[j])
                            .ok_or_else(|| Error::State("cache entry missing after evaluation".into()))
                    })
                    .collect()
            })
            .collect()
    }
}
