//! Coordinator/worker runtime: seed-only distributed population
//! evaluation over TCP.
//!
//! Per generation the coordinator partitions the population index range
//! across connected workers, gathers their scalar returns, broadcasts the
//! assembled vector, and every node (coordinator included) applies the
//! identical update to its own model replica. Nothing but seeds, index
//! ranges and returns crosses the wire, so traffic per generation is O(N)
//! scalars regardless of model size, and the resulting model trajectory is
//! byte-identical to a single-process run of the same configuration.
//!
//! The generation barrier: assignments for generation g+1 are only sent
//! after the generation-g broadcast, so per-connection FIFO ordering
//! guarantees a worker has applied update g before it evaluates g+1.

use std::collections::VecDeque;
use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    apply_update, generation_seed, initial_distribution, train_with, Evaluator, TrainResult,
};
use crate::protocol::{recv_message, send_message, Message, PROTOCOL_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Inbound,
    Outbound,
}

/// One frame as seen at the coordinator's transport boundary.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub direction: Direction,
    pub tag: u8,
    /// Frame length on the wire (length prefix included).
    pub wire_len: usize,
    /// Generation counter at the time of capture.
    pub generation: u64,
}

/// Transport-level inspector: records every frame the coordinator sends or
/// receives so tests can verify the scalar-only traffic contract.
#[derive(Default)]
pub struct TrafficLog {
    records: Mutex<Vec<FrameRecord>>,
    generation: Mutex<u64>,
}

impl TrafficLog {
    fn set_generation(&self, gen: u64) {
        *self.generation.lock().unwrap() = gen;
    }

    fn record(&self, direction: Direction, msg: &Message, payload_len: usize) {
        let generation = *self.generation.lock().unwrap();
        self.records.lock().unwrap().push(FrameRecord {
            direction,
            tag: msg.tag(),
            wire_len: payload_len + 4,
            generation,
        });
    }

    pub fn snapshot(&self) -> Vec<FrameRecord> {
        self.records.lock().unwrap().clone()
    }
}

fn send_logged(
    stream: &mut TcpStream,
    msg: &Message,
    traffic: &TrafficLog,
    direction: Direction,
) -> std::io::Result<()> {
    let payload = msg.encode();
    traffic.record(direction, msg, payload.len());
    crate::protocol::write_frame(stream, &payload)
}

#[derive(Clone, Debug)]
pub struct CoordinatorOptions {
    /// How long to tolerate having zero connected workers while work is
    /// outstanding before aborting the run.
    pub worker_wait: Duration,
}

impl Default for CoordinatorOptions {
    fn default() -> Self {
        CoordinatorOptions {
            worker_wait: Duration::from_secs(60),
        }
    }
}

pub struct CoordinatorReport {
    pub train: TrainResult,
    pub traffic: Vec<FrameRecord>,
}

type ConnId = u64;

enum Event {
    Joined {
        conn: ConnId,
        worker_id: u64,
        next_gen: u64,
        stream: TcpStream,
    },
    Returns {
        conn: ConnId,
        gen: u64,
        index_lo: u64,
        values: Vec<f32>,
    },
    Left {
        conn: ConnId,
    },
}

struct WorkerConn {
    conn: ConnId,
    worker_id: u64,
    stream: TcpStream,
    /// Range currently being evaluated by this worker, if any.
    assigned: Option<(u64, u64)>,
}

/// Per-connection reader. Validates the hello handshake, then forwards
/// returns until the peer goes away.
fn reader_thread(
    conn: ConnId,
    stream: TcpStream,
    events: Sender<Event>,
    traffic: Arc<TrafficLog>,
) {
    let mut reader = match stream.try_clone() {
        Ok(s) => BufReader::new(s),
        Err(_) => return,
    };
    let mut write_half = stream;

    let hello = match recv_message(&mut reader) {
        Ok(Some(msg)) => {
            traffic.record(Direction::Inbound, &msg, msg.encode().len());
            msg
        }
        _ => return,
    };
    let (worker_id, protocol_version, next_gen) = match hello {
        Message::Hello {
            worker_id,
            protocol_version,
            next_gen,
        } => (worker_id, protocol_version, next_gen),
        other => {
            log::warn!("connection {conn} opened with {other:?} instead of a hello");
            return;
        }
    };
    if protocol_version != PROTOCOL_VERSION {
        log::warn!(
            "refusing worker {worker_id}: protocol version {protocol_version}, ours is {PROTOCOL_VERSION}"
        );
        // Reply with our version so the peer can report the mismatch.
        let refusal = Message::Config {
            protocol_version: PROTOCOL_VERSION,
            config_toml: String::new(),
        };
        let _ = send_logged(&mut write_half, &refusal, &traffic, Direction::Outbound);
        return;
    }

    if events
        .send(Event::Joined {
            conn,
            worker_id,
            next_gen,
            stream: write_half,
        })
        .is_err()
    {
        return;
    }

    loop {
        match recv_message(&mut reader) {
            Ok(Some(msg)) => {
                traffic.record(Direction::Inbound, &msg, msg.encode().len());
                match msg {
                    Message::Returns {
                        gen,
                        index_lo,
                        values,
                    } => {
                        if events
                            .send(Event::Returns {
                                conn,
                                gen,
                                index_lo,
                                values,
                            })
                            .is_err()
                        {
                            return;
                        }
                    }
                    other => {
                        log::warn!("unexpected {other:?} from worker {worker_id}");
                        let _ = events.send(Event::Left { conn });
                        return;
                    }
                }
            }
            Ok(None) | Err(_) => {
                let _ = events.send(Event::Left { conn });
                return;
            }
        }
    }
}

struct Coordinator {
    cfg: RunConfig,
    opts: CoordinatorOptions,
    events: Receiver<Event>,
    workers: Vec<WorkerConn>,
    /// Broadcast returns for every completed generation, replayed to
    /// workers that join or re-join late.
    history: Vec<Vec<f32>>,
    traffic: Arc<TrafficLog>,
}

impl Coordinator {
    /// Greet a freshly handshaken worker: send the run configuration and
    /// any broadcasts it has not applied yet, then make it available.
    fn admit(&mut self, conn: ConnId, worker_id: u64, next_gen: u64, mut stream: TcpStream) {
        if next_gen as usize > self.history.len() {
            log::warn!(
                "worker {worker_id} claims {next_gen} applied generations, run has {}; dropping",
                self.history.len()
            );
            return;
        }
        let config = Message::Config {
            protocol_version: PROTOCOL_VERSION,
            config_toml: self.cfg.to_toml(),
        };
        if send_logged(&mut stream, &config, &self.traffic, Direction::Outbound).is_err() {
            return;
        }
        for (gen, values) in self.history.iter().enumerate().skip(next_gen as usize) {
            let replay = Message::AllReturns {
                gen: gen as u64,
                values: values.clone(),
            };
            if send_logged(&mut stream, &replay, &self.traffic, Direction::Outbound).is_err() {
                return;
            }
        }
        log::info!("worker {worker_id} joined at generation {}", self.history.len());
        self.workers.push(WorkerConn {
            conn,
            worker_id,
            stream,
            assigned: None,
        });
    }

    fn drop_worker(&mut self, conn: ConnId, pending: &mut VecDeque<(u64, u64)>) {
        if let Some(pos) = self.workers.iter().position(|w| w.conn == conn) {
            let w = self.workers.remove(pos);
            if let Some(range) = w.assigned {
                log::warn!(
                    "worker {} left with range [{}, {}) outstanding; reassigning",
                    w.worker_id,
                    range.0,
                    range.1
                );
                pending.push_front(range);
            }
        }
    }

    fn handle_event(
        &mut self,
        event: Event,
        gen: u64,
        pending: &mut VecDeque<(u64, u64)>,
        values: &mut [f32],
        filled: &mut Vec<bool>,
        filled_count: &mut usize,
    ) {
        match event {
            Event::Joined {
                conn,
                worker_id,
                next_gen,
                stream,
            } => self.admit(conn, worker_id, next_gen, stream),
            Event::Left { conn } => self.drop_worker(conn, pending),
            Event::Returns {
                conn,
                gen: msg_gen,
                index_lo,
                values: chunk,
            } => {
                let Some(worker) = self.workers.iter_mut().find(|w| w.conn == conn) else {
                    return;
                };
                let expected = worker.assigned;
                let matches = expected
                    == Some((index_lo, index_lo + chunk.len() as u64))
                    && msg_gen == gen;
                if !matches {
                    log::warn!(
                        "worker {} answered gen {msg_gen} range [{index_lo}, +{}) but owed {:?}; dropping it",
                        worker.worker_id,
                        chunk.len(),
                        expected
                    );
                    self.drop_worker(conn, pending);
                    return;
                }
                worker.assigned = None;
                for (offset, v) in chunk.into_iter().enumerate() {
                    let idx = index_lo as usize + offset;
                    if !filled[idx] {
                        filled[idx] = true;
                        *filled_count += 1;
                    }
                    values[idx] = v;
                }
            }
        }
    }

    /// Hand pending ranges to idle workers.
    fn assign_pending(&mut self, gen: u64, gen_seed: u64, pending: &mut VecDeque<(u64, u64)>) {
        loop {
            if pending.is_empty() {
                return;
            }
            let Some(pos) = self.workers.iter().position(|w| w.assigned.is_none()) else {
                return;
            };
            let range = pending.pop_front().unwrap();
            let msg = Message::Assign {
                gen,
                gen_seed,
                index_lo: range.0,
                index_hi: range.1,
            };
            let worker = &mut self.workers[pos];
            if send_logged(&mut worker.stream, &msg, &self.traffic, Direction::Outbound).is_err() {
                let conn = worker.conn;
                pending.push_front(range);
                self.drop_worker(conn, pending);
                continue;
            }
            self.workers[pos].assigned = Some(range);
        }
    }

    /// Run one generation: split, gather, broadcast. Returns the assembled
    /// population returns.
    fn run_generation(&mut self, gen: u64, gen_seed: u64, n: u64) -> Result<Vec<f32>> {
        self.traffic.set_generation(gen);
        // Admit anyone who connected between generations.
        while let Ok(event) = self.events.try_recv() {
            let mut nothing = VecDeque::new();
            self.handle_event(event, gen, &mut nothing, &mut [], &mut Vec::new(), &mut 0);
        }

        let mut values = vec![0f32; n as usize];
        let mut filled = vec![false; n as usize];
        let mut filled_count = 0usize;

        let shares = self.workers.len().max(1) as u64;
        let chunk = n.div_ceil(shares);
        let mut pending: VecDeque<(u64, u64)> = (0..shares)
            .map(|k| (k * chunk, ((k + 1) * chunk).min(n)))
            .filter(|(lo, hi)| lo < hi)
            .collect();

        let mut empty_since: Option<Instant> = None;
        while filled_count < n as usize {
            if self.workers.is_empty() {
                let since = *empty_since.get_or_insert_with(Instant::now);
                if since.elapsed() > self.opts.worker_wait {
                    return Err(Error::Protocol(format!(
                        "no workers for {:?} with generation {gen} incomplete",
                        self.opts.worker_wait
                    )));
                }
            } else {
                empty_since = None;
            }

            self.assign_pending(gen, gen_seed, &mut pending);

            match self.events.recv_timeout(Duration::from_millis(25)) {
                Ok(event) => self.handle_event(
                    event,
                    gen,
                    &mut pending,
                    &mut values,
                    &mut filled,
                    &mut filled_count,
                ),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Protocol("listener thread is gone".into()))
                }
            }
        }

        // Broadcast before anything from the next generation is assigned.
        let broadcast = Message::AllReturns {
            gen,
            values: values.clone(),
        };
        let mut dead = Vec::new();
        for w in &mut self.workers {
            if send_logged(&mut w.stream, &broadcast, &self.traffic, Direction::Outbound).is_err()
            {
                dead.push(w.conn);
            }
        }
        for conn in dead {
            let mut nothing = VecDeque::new();
            self.drop_worker(conn, &mut nothing);
        }
        self.history.push(values.clone());
        Ok(values)
    }

    fn shutdown(&mut self) {
        // Late joiners still queued get a shutdown too.
        while let Ok(event) = self.events.try_recv() {
            if let Event::Joined { stream, .. } = event {
                let mut stream = stream;
                let _ = send_logged(
                    &mut stream,
                    &Message::Shutdown,
                    &self.traffic,
                    Direction::Outbound,
                );
            }
        }
        for w in &mut self.workers {
            let _ = send_logged(
                &mut w.stream,
                &Message::Shutdown,
                &self.traffic,
                Direction::Outbound,
            );
        }
        self.workers.clear();
    }
}

/// Drive a full training run, farming evaluation out to TCP workers.
/// Metrics and checkpoints land exactly where a local `train` would put
/// them, and the model trajectory is byte-identical to the local run.
pub fn coordinator_run(
    cfg: &RunConfig,
    listener: TcpListener,
    opts: CoordinatorOptions,
) -> Result<CoordinatorReport> {
    cfg.validate()?;
    if cfg.optimizer.algorithm != "ec" {
        return Err(Error::InvalidConfig(
            "distributed runs drive the ec algorithm; es runs are single-process".into(),
        ));
    }

    let traffic = Arc::new(TrafficLog::default());
    let (events_tx, events_rx) = channel::<Event>();
    let stop = Arc::new(AtomicBool::new(false));
    let local_addr = listener.local_addr()?;

    let acceptor = {
        let traffic = Arc::clone(&traffic);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            let mut next_conn: ConnId = 0;
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let conn = next_conn;
                next_conn += 1;
                let events = events_tx.clone();
                let traffic = Arc::clone(&traffic);
                std::thread::spawn(move || reader_thread(conn, stream, events, traffic));
            }
        })
    };

    let mut coordinator = Coordinator {
        cfg: cfg.clone(),
        opts,
        events: events_rx,
        workers: Vec::new(),
        history: Vec::new(),
        traffic: Arc::clone(&traffic),
    };

    let n = cfg.optimizer.population_size as u64;
    let outcome = train_with(cfg, |gen, gen_seed, _dist| {
        coordinator.run_generation(gen, gen_seed, n)
    });

    coordinator.shutdown();
    stop.store(true, Ordering::SeqCst);
    // Nudge the acceptor out of its blocking accept.
    let _ = TcpStream::connect(local_addr);
    let _ = acceptor.join();

    Ok(CoordinatorReport {
        train: outcome?,
        traffic: traffic.snapshot(),
    })
}

#[derive(Clone, Debug)]
pub struct WorkerOptions {
    pub worker_id: u64,
    pub connect_attempts: u32,
    pub retry_delay: Duration,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            worker_id: default_worker_id(),
            connect_attempts: 20,
            retry_delay: Duration::from_millis(250),
        }
    }
}

fn default_worker_id() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    crate::rng::derive(&[nanos, std::process::id() as u64])
}

fn connect_with_retry(addr: &str, opts: &WorkerOptions) -> Result<TcpStream> {
    let mut last_err = None;
    for _ in 0..opts.connect_attempts.max(1) {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => last_err = Some(e),
        }
        std::thread::sleep(opts.retry_delay);
    }
    Err(Error::Protocol(format!(
        "could not reach coordinator at {addr}: {}",
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Evaluate assigned ranges and mirror every broadcast update until the
/// coordinator says shutdown. The worker never sends or receives a
/// connection or probability matrix; its model replica is rebuilt from the
/// configuration and kept in lockstep by re-deriving each generation's
/// genomes from the broadcast seeds.
pub fn worker_run(addr: &str, opts: WorkerOptions) -> Result<()> {
    let stream = connect_with_retry(addr, &opts)?;
    let _ = stream.set_nodelay(true);
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;

    send_message(
        &mut writer,
        &Message::Hello {
            worker_id: opts.worker_id,
            protocol_version: PROTOCOL_VERSION,
            next_gen: 0,
        },
    )?;

    let (cfg, evaluator, mut dist) = match recv_message(&mut reader)? {
        Some(Message::Config {
            protocol_version,
            config_toml,
        }) => {
            if protocol_version != PROTOCOL_VERSION {
                return Err(Error::Protocol(format!(
                    "coordinator speaks protocol version {protocol_version}, this worker speaks {PROTOCOL_VERSION}"
                )));
            }
            let cfg = parse_config(&config_toml)?;
            let net = cfg.network_config()?;
            let evaluator = Evaluator::from_config(&cfg)?;
            let dist = initial_distribution(&cfg, &net)?;
            (cfg, evaluator, dist)
        }
        Some(Message::Shutdown) => {
            return Err(Error::Protocol("coordinator refused the connection".into()))
        }
        Some(other) => {
            return Err(Error::Protocol(format!(
                "expected the run configuration, got {other:?}"
            )))
        }
        None => {
            return Err(Error::Protocol(
                "coordinator closed the connection during handshake".into(),
            ))
        }
    };

    let mut applied: u64 = 0;
    loop {
        match recv_message(&mut reader)? {
            None => {
                return Err(Error::Protocol(
                    "coordinator closed the connection mid-run".into(),
                ))
            }
            Some(Message::Assign {
                gen,
                gen_seed,
                index_lo,
                index_hi,
            }) => {
                if gen != applied {
                    return Err(Error::Protocol(format!(
                        "assignment for generation {gen} but replica is at {applied}"
                    )));
                }
                if gen_seed != generation_seed(cfg.run.seed, gen) {
                    return Err(Error::Protocol(
                        "assignment seed disagrees with the locally derived one".into(),
                    ));
                }
                if index_hi > cfg.optimizer.population_size as u64 || index_lo >= index_hi {
                    return Err(Error::Protocol(format!(
                        "assignment range [{index_lo}, {index_hi}) is out of bounds"
                    )));
                }
                let values = evaluator.evaluate_range(&dist, gen_seed, index_lo, index_hi)?;
                send_message(
                    &mut writer,
                    &Message::Returns {
                        gen,
                        index_lo,
                        values,
                    },
                )?;
            }
            Some(Message::AllReturns { gen, values }) => {
                if gen < applied {
                    log::warn!("ignoring stale broadcast for generation {gen}");
                    continue;
                }
                if gen > applied {
                    return Err(Error::Protocol(format!(
                        "broadcast for generation {gen} but replica is at {applied}"
                    )));
                }
                let gen_seed = generation_seed(cfg.run.seed, gen);
                dist = apply_update(&dist, &cfg, gen_seed, &values)?;
                applied += 1;
            }
            Some(Message::Shutdown) => return Ok(()),
            Some(other) => {
                return Err(Error::Protocol(format!("unexpected {other:?} from coordinator")))
            }
        }
    }
}
