//! In-process simulated cluster.
//!
//! One OS thread per rank, reliable tagged channels between ranks, one
//! shared segment and staging area per node, and a timeout-guarded node
//! barrier. Sends are eager (the payload is copied out at post time);
//! receives match by (sender, tag), pooling early arrivals. A quiescence
//! timeout turns missing messages into deadlock reports instead of hangs.

use std::collections::VecDeque;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::bytecode::{execute, ExecEnv, Program, RankTransport, SharedBytes, TransportFault};
use crate::error::{Error, Result};
use crate::topology::Topology;

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    /// How long a rank may wait on a message or barrier before the run is
    /// declared deadlocked.
    pub deadlock_timeout: Duration,
    /// Seed for randomized scheduling perturbation between instructions;
    /// `None` runs without artificial jitter.
    pub jitter_seed: Option<u64>,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            deadlock_timeout: Duration::from_secs(10),
            jitter_seed: None,
        }
    }
}

/// Simulated cluster: the execution substrate for compiled programs.
#[derive(Debug, Clone)]
pub struct Cluster {
    topology: Topology,
    options: ClusterOptions,
}

impl Cluster {
    pub fn new(topology: Topology) -> Self {
        Cluster {
            topology,
            options: ClusterOptions::default(),
        }
    }

    pub fn with_options(topology: Topology, options: ClusterOptions) -> Self {
        Cluster { topology, options }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }
}

struct Envelope {
    from: usize,
    tag: u64,
    payload: Vec<u8>,
}

/// Barrier with a timeout so that a stuck peer produces an error, not a
/// hang. Generation counting keeps reuse safe.
struct TimeoutBarrier {
    parties: usize,
    state: Mutex<(usize, u64)>,
    cv: Condvar,
}

impl TimeoutBarrier {
    fn new(parties: usize) -> Self {
        TimeoutBarrier {
            parties,
            state: Mutex::new((0, 0)),
            cv: Condvar::new(),
        }
    }

    fn wait(&self, timeout: Duration) -> std::result::Result<(), TransportFault> {
        let mut guard = self.state.lock().unwrap();
        let generation = guard.1;
        guard.0 += 1;
        if guard.0 == self.parties {
            guard.0 = 0;
            guard.1 = guard.1.wrapping_add(1);
            self.cv.notify_all();
            return Ok(());
        }
        let deadline = Instant::now() + timeout;
        while guard.1 == generation {
            let now = Instant::now();
            if now >= deadline {
                // withdraw this arrival so stragglers cannot complete a
                // barrier with a phantom party
                guard.0 -= 1;
                return Err(TransportFault::Timeout("node barrier".into()));
            }
            let (g, _) = self.cv.wait_timeout(guard, deadline - now).unwrap();
            guard = g;
        }
        Ok(())
    }
}

/// Deterministic small PRNG for the jitter hook (xorshift64*).
struct Jitter {
    state: u64,
}

impl Jitter {
    fn new(seed: u64) -> Self {
        Jitter { state: seed | 1 }
    }

    fn next(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }
}

struct ChannelTransport {
    rank: usize,
    senders: Vec<Sender<Envelope>>,
    inbox: Receiver<Envelope>,
    pool: VecDeque<Envelope>,
    barrier: Arc<TimeoutBarrier>,
    timeout: Duration,
    jitter: Option<Jitter>,
}

impl RankTransport for ChannelTransport {
    fn send(
        &mut self,
        to: usize,
        tag: u64,
        payload: Vec<u8>,
    ) -> std::result::Result<(), TransportFault> {
        self.senders[to]
            .send(Envelope {
                from: self.rank,
                tag,
                payload,
            })
            .map_err(|_| TransportFault::Disconnected(format!("rank {to} is gone")))
    }

    fn recv(&mut self, from: usize, tag: u64) -> std::result::Result<Vec<u8>, TransportFault> {
        if let Some(i) = self
            .pool
            .iter()
            .position(|e| e.from == from && e.tag == tag)
        {
            return Ok(self.pool.remove(i).unwrap().payload);
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportFault::Timeout(format!(
                    "waiting for message from rank {from} tag {tag}"
                )));
            }
            match self.inbox.recv_timeout(deadline - now) {
                Ok(env) => {
                    if env.from == from && env.tag == tag {
                        return Ok(env.payload);
                    }
                    self.pool.push_back(env);
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(TransportFault::Timeout(format!(
                        "waiting for message from rank {from} tag {tag}"
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(TransportFault::Disconnected(format!(
                        "inbox of rank {} closed",
                        self.rank
                    )));
                }
            }
        }
    }

    fn barrier(&mut self) -> std::result::Result<(), TransportFault> {
        self.barrier.wait(self.timeout)
    }

    fn pause(&mut self) {
        if let Some(j) = &mut self.jitter {
            match j.next() % 8 {
                0 => std::thread::yield_now(),
                1 => std::thread::sleep(Duration::from_micros(j.next() % 30)),
                _ => {}
            }
        }
    }
}

/// Executes `program` on the cluster: spawns one context per rank, runs all
/// instruction lists to completion and returns the per-rank outputs.
///
/// The program is trusted; run [`validate`](crate::bytecode::validate) once
/// after compiling. Outputs do not depend on thread scheduling.
pub fn run_collective(
    cluster: &Cluster,
    program: &Program,
    inputs: &[Vec<u8>],
) -> Result<Vec<Vec<u8>>> {
    let t = &cluster.topology;
    if *t != program.topology {
        return Err(Error::invalid(
            "program was compiled for a different topology",
        ));
    }
    if inputs.len() != t.total_ranks() {
        return Err(Error::invalid(format!(
            "expected {} inputs, got {}",
            t.total_ranks(),
            inputs.len()
        )));
    }
    for (r, buf) in inputs.iter().enumerate() {
        if buf.len() != program.input_lens[r] {
            return Err(Error::invalid(format!(
                "rank {r}: input length {} does not match program declaration {}",
                buf.len(),
                program.input_lens[r]
            )));
        }
    }

    let segments: Vec<SharedBytes> = (0..t.num_nodes())
        .map(|_| SharedBytes::new(program.segment_len))
        .collect();
    let stagings: Vec<SharedBytes> = (0..t.num_nodes())
        .map(|_| SharedBytes::new(program.staging_len))
        .collect();
    let barriers: Vec<Arc<TimeoutBarrier>> = (0..t.num_nodes())
        .map(|_| Arc::new(TimeoutBarrier::new(t.cores_per_node())))
        .collect();

    let mut senders = Vec::with_capacity(t.total_ranks());
    let mut inboxes = Vec::with_capacity(t.total_ranks());
    for _ in 0..t.total_ranks() {
        let (tx, rx) = channel::<Envelope>();
        senders.push(tx);
        inboxes.push(Some(rx));
    }

    let results: Vec<Result<Vec<u8>>> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(t.total_ranks());
        for rank in 0..t.total_ranks() {
            let node = t.node_of(rank);
            let inbox = inboxes[rank].take().expect("inbox taken once");
            let senders = senders.clone();
            let segment = segments[node].clone();
            let staging = stagings[node].clone();
            let barrier = barriers[node].clone();
            let options = &cluster.options;
            let input = &inputs[rank];
            handles.push(scope.spawn(move || -> Result<Vec<u8>> {
                let mut output = vec![0u8; program.output_lens[rank]];
                let mut transport = ChannelTransport {
                    rank,
                    senders,
                    inbox,
                    pool: VecDeque::new(),
                    barrier,
                    timeout: options.deadlock_timeout,
                    jitter: options
                        .jitter_seed
                        .map(|s| Jitter::new(s ^ (rank as u64).wrapping_mul(0x9E3779B97F4A7C15))),
                };
                let mut env = ExecEnv {
                    input,
                    output: &mut output,
                    segment: &segment,
                    staging: &staging,
                };
                execute(program, rank, &mut env, &mut transport)?;
                Ok(output)
            }));
        }
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Deadlock("rank context panicked".into())))
            })
            .collect()
    });

    let mut outputs = Vec::with_capacity(results.len());
    let mut blocked = Vec::new();
    for res in results.into_iter() {
        match res {
            Ok(buf) => outputs.push(buf),
            Err(Error::Execution {
                rank,
                index,
                message,
            }) => {
                blocked.push(format!("rank {rank} at instruction {index}: {message}"));
            }
            Err(e) => return Err(e),
        }
    }
    if !blocked.is_empty() {
        return Err(Error::Deadlock(blocked.join("; ")));
    }
    Ok(outputs)
}
