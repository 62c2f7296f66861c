//! SPMD execution of kernels on a simulated BSP accelerator.
//!
//! [`run_spmd`] starts one thread per core and passes a turn between them:
//! inside a phase (the code between two collective events) core 0 runs
//! first, then core 1, and so on. Every collective event (`sync`, a
//! hyperstep boundary, or the kernel returning) is a rendezvous; the last
//! core to arrive checks that all cores agree on the event, applies buffered
//! communication and appends to the trace. Since at most one core runs at a
//! time and the order is fixed, traces and pool contents do not depend on
//! how the host schedules threads.
//!
//! Costs are never inferred from the kernel's host-side arithmetic. Kernels
//! charge work with [`CoreContext::charge_flops`]; puts are counted at the
//! sync that delivers them; token fetches are counted in the hyperstep that
//! consumes them.

use std::fmt;

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::cost::{HyperstepRecord, SuperstepRecord, Trace};
use crate::extmem::{CoreId, ExternalPool, StreamError, StreamHandle, StreamId};
use crate::machine::MachineParams;

/// A collective event as seen by one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Sync,
    Boundary,
    Finish,
    Failed,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Sync => "sync",
            EventKind::Boundary => "hyperstep boundary",
            EventKind::Finish => "kernel end",
            EventKind::Failed => "failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("core {core}: {source}")]
    Stream {
        core: CoreId,
        #[source]
        source: StreamError,
    },
    #[error("collective mismatch at event {event}: {}", describe_kinds(.kinds))]
    CollectiveMismatch { event: u64, kinds: Vec<EventKind> },
    #[error(
        "core {core}: scratchpad overflow, {requested} more words with {used} of {limit} in use"
    )]
    ScratchpadOverflow {
        core: CoreId,
        requested: usize,
        used: usize,
        limit: usize,
    },
    #[error("core {core}: no core {dest} on a {p}-core machine")]
    InvalidCore {
        core: CoreId,
        dest: CoreId,
        p: usize,
    },
    #[error("core {core}: slot {slot} is not registered on core {dest}")]
    UnregisteredSlot {
        core: CoreId,
        dest: CoreId,
        slot: usize,
    },
    #[error("core {core}: write of {len} words at offset {offset} overflows slot {slot} ({slot_len} words) on core {dest}")]
    SlotOverflow {
        core: CoreId,
        dest: CoreId,
        slot: usize,
        offset: usize,
        len: usize,
        slot_len: usize,
    },
    #[error("core {core}: communication queued but not synchronized before {kind}")]
    UnsyncedCommunication { core: CoreId, kind: EventKind },
    #[error("pool does not fit the machine: {0}")]
    PoolMismatch(String),
    #[error("core {core}: {message}")]
    Kernel { core: CoreId, message: String },
    #[error("core {core} panicked: {message}")]
    Panicked { core: CoreId, message: String },
    #[error("run aborted after a failure on another core")]
    Aborted,
}

fn describe_kinds(kinds: &[EventKind]) -> String {
    kinds
        .iter()
        .enumerate()
        .map(|(core, k)| format!("core {core}: {k}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Handle to a registered communication slot. Slots are registered in the
/// same order on every core, so a handle also names the matching slot on
/// remote cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot(usize);

impl Slot {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Put {
    dest: CoreId,
    slot: usize,
    offset: usize,
    values: Vec<f32>,
}

#[derive(Debug)]
struct Arrival {
    kind: EventKind,
    work: f64,
    fetched: usize,
    outbox: Vec<Put>,
    error: Option<RuntimeError>,
}

#[derive(Debug)]
struct State {
    pool: ExternalPool,
    turn: CoreId,
    event: u64,
    arrivals: Vec<Option<Arrival>>,
    inboxes: Vec<Vec<Put>>,
    slot_lens: Vec<Vec<usize>>,
    hypersteps: Vec<HyperstepRecord>,
    current: Vec<SuperstepRecord>,
    failure: Option<RuntimeError>,
    finished: bool,
}

struct Shared {
    p: usize,
    state: Mutex<State>,
    turn_changed: Condvar,
}

impl Shared {
    /// Processes a complete set of arrivals. Called by the last core of the
    /// phase with the lock held.
    fn rendezvous(&self, st: &mut State) {
        let arrivals: Vec<Arrival> = st
            .arrivals
            .iter_mut()
            .map(|a| a.take().expect("every core arrived"))
            .collect();
        let event = st.event;
        st.event += 1;
        st.turn = 0;

        if let Some(err) = arrivals.iter().find_map(|a| a.error.clone()) {
            st.failure = Some(err);
            return;
        }
        let kind = arrivals[0].kind;
        if arrivals.iter().any(|a| a.kind != kind) {
            st.failure = Some(RuntimeError::CollectiveMismatch {
                event,
                kinds: arrivals.iter().map(|a| a.kind).collect(),
            });
            return;
        }

        let p = self.p;
        let work: Vec<f64> = arrivals.iter().map(|a| a.work).collect();
        match kind {
            EventKind::Sync => {
                let mut sent = vec![0; p];
                let mut received = vec![0; p];
                for (src, arrival) in arrivals.iter().enumerate() {
                    for put in &arrival.outbox {
                        if let Err(err) = check_put(src, put, &st.slot_lens) {
                            st.failure = Some(err);
                            return;
                        }
                        sent[src] += put.values.len();
                        received[put.dest] += put.values.len();
                    }
                }
                for arrival in arrivals {
                    for put in arrival.outbox {
                        st.inboxes[put.dest].push(put);
                    }
                }
                st.current
                    .push(SuperstepRecord::new(work, sent, received, true));
            }
            EventKind::Boundary | EventKind::Finish => {
                if let Some(core) = arrivals.iter().position(|a| !a.outbox.is_empty()) {
                    st.failure = Some(RuntimeError::UnsyncedCommunication { core, kind });
                    return;
                }
                if work.iter().any(|&w| w > 0.0) {
                    st.current
                        .push(SuperstepRecord::new(work, vec![0; p], vec![0; p], false));
                }
                let fetch: Vec<usize> = arrivals.iter().map(|a| a.fetched).collect();
                let empty = st.current.is_empty() && fetch.iter().all(|&v| v == 0);
                if kind == EventKind::Boundary || !empty {
                    let supersteps = std::mem::take(&mut st.current);
                    st.hypersteps.push(HyperstepRecord { supersteps, fetch });
                }
                if kind == EventKind::Finish {
                    st.finished = true;
                }
            }
            EventKind::Failed => unreachable!("failures carry an error"),
        }
    }

    fn fail(&self, err: RuntimeError) {
        let mut st = self.state.lock();
        if st.failure.is_none() {
            st.failure = Some(err);
        }
        self.turn_changed.notify_all();
    }
}

fn check_put(src: CoreId, put: &Put, slot_lens: &[Vec<usize>]) -> Result<(), RuntimeError> {
    let slot_len = *slot_lens[put.dest]
        .get(put.slot)
        .ok_or(RuntimeError::UnregisteredSlot {
            core: src,
            dest: put.dest,
            slot: put.slot,
        })?;
    if put.offset + put.values.len() > slot_len {
        return Err(RuntimeError::SlotOverflow {
            core: src,
            dest: put.dest,
            slot: put.slot,
            offset: put.offset,
            len: put.values.len(),
            slot_len,
        });
    }
    Ok(())
}

/// Per-core view of a running kernel.
pub struct CoreContext<'a> {
    id: CoreId,
    machine: &'a MachineParams,
    shared: &'a Shared,
    slots: Vec<Vec<f32>>,
    outbox: Vec<Put>,
    work: f64,
    fetched: usize,
    scratch_used: usize,
    reservations: Vec<(StreamId, usize)>,
}

impl<'a> CoreContext<'a> {
    /// This core's index `s` in `[0, p)`.
    pub fn id(&self) -> CoreId {
        self.id
    }

    pub fn nprocs(&self) -> usize {
        self.shared.p
    }

    pub fn machine(&self) -> &MachineParams {
        self.machine
    }

    /// Words of scratchpad currently reserved by slots and open streams.
    pub fn scratchpad_used(&self) -> usize {
        self.scratch_used
    }

    /// Work charged so far in the current superstep.
    pub fn current_work(&self) -> f64 {
        self.work
    }

    /// Builds a kernel-level error tagged with this core.
    pub fn error(&self, message: impl Into<String>) -> RuntimeError {
        RuntimeError::Kernel {
            core: self.id,
            message: message.into(),
        }
    }

    /// Adds `flops` to this core's work in the current superstep.
    ///
    /// # Panics
    ///
    /// If `flops` is negative or not finite.
    pub fn charge_flops(&mut self, flops: f64) {
        assert!(
            flops.is_finite() && flops >= 0.0,
            "work must be finite and non-negative, got {flops}"
        );
        self.work += flops;
    }

    fn reserve(&mut self, words: usize) -> Result<(), RuntimeError> {
        let limit = self.machine.local_words;
        if self.scratch_used + words > limit {
            return Err(RuntimeError::ScratchpadOverflow {
                core: self.id,
                requested: words,
                used: self.scratch_used,
                limit,
            });
        }
        self.scratch_used += words;
        Ok(())
    }

    /// Registers a zero-initialized slot of `len` words that other cores can
    /// write into with [`CoreContext::put`].
    pub fn register_slot(&mut self, len: usize) -> Result<Slot, RuntimeError> {
        self.reserve(len)?;
        self.slots.push(vec![0.0; len]);
        self.shared.state.lock().slot_lens[self.id].push(len);
        Ok(Slot(self.slots.len() - 1))
    }

    pub fn slot(&self, slot: Slot) -> &[f32] {
        &self.slots[slot.0]
    }

    /// Local access to a slot; writes are free and immediately visible to
    /// this core only.
    pub fn slot_mut(&mut self, slot: Slot) -> &mut [f32] {
        &mut self.slots[slot.0]
    }

    /// Queues a write of `values` into `slot` at `offset` on core `dest`.
    /// It lands at the next [`CoreContext::sync`]; writes to the same words
    /// resolve in ascending source-core order, then program order.
    pub fn put(
        &mut self,
        dest: CoreId,
        slot: Slot,
        offset: usize,
        values: &[f32],
    ) -> Result<(), RuntimeError> {
        let p = self.nprocs();
        if dest >= p {
            return Err(RuntimeError::InvalidCore {
                core: self.id,
                dest,
                p,
            });
        }
        self.outbox.push(Put {
            dest,
            slot: slot.0,
            offset,
            values: values.to_vec(),
        });
        Ok(())
    }

    /// Puts `values` to every other core.
    pub fn broadcast(
        &mut self,
        slot: Slot,
        offset: usize,
        values: &[f32],
    ) -> Result<(), RuntimeError> {
        let me = self.id;
        for dest in (0..self.nprocs()).filter(|&d| d != me) {
            self.put(dest, slot, offset, values)?;
        }
        Ok(())
    }

    /// Bulk synchronization: ends the superstep and delivers all queued puts.
    pub fn sync(&mut self) -> Result<(), RuntimeError> {
        self.arrive(EventKind::Sync)?;
        let inbox = std::mem::take(&mut self.shared.state.lock().inboxes[self.id]);
        for put in inbox {
            self.slots[put.slot][put.offset..put.offset + put.values.len()]
                .copy_from_slice(&put.values);
        }
        Ok(())
    }

    /// Ends the current hyperstep. All cores must call it the same number of
    /// times between syncs, whether or not they consumed tokens.
    pub fn hyperstep_boundary(&mut self) -> Result<(), RuntimeError> {
        self.arrive(EventKind::Boundary)
    }

    fn arrive(&mut self, kind: EventKind) -> Result<(), RuntimeError> {
        let (fetched, outbox) = match kind {
            EventKind::Sync => (0, std::mem::take(&mut self.outbox)),
            _ => (
                std::mem::take(&mut self.fetched),
                std::mem::take(&mut self.outbox),
            ),
        };
        let arrival = Arrival {
            kind,
            work: std::mem::take(&mut self.work),
            fetched,
            outbox,
            error: None,
        };
        self.shared.submit(self.id, arrival)
    }

    fn stream_err(&self, source: StreamError) -> RuntimeError {
        RuntimeError::Stream {
            core: self.id,
            source,
        }
    }

    /// Opens a stream for exclusive use, reserving one token of scratchpad.
    pub fn open(&mut self, stream: StreamId) -> Result<StreamHandle, RuntimeError> {
        let shared = self.shared;
        let mut st = shared.state.lock();
        check_failure(&st)?;
        let s = st
            .pool
            .stream(stream)
            .ok_or_else(|| self.stream_err(StreamError::UnknownStream(stream)))?;
        if let Some(owner) = s.owner() {
            return Err(self.stream_err(StreamError::Busy { stream, owner }));
        }
        let token = s.token_size();
        self.reserve(token)?;
        let handle = st
            .pool
            .open(self.id, stream)
            .map_err(|e| self.stream_err(e))?;
        self.reservations.push((stream, token));
        Ok(handle)
    }

    /// Closes a stream and returns its scratchpad reservation. A staged
    /// prefetch is discarded without cost.
    pub fn close(&mut self, handle: &StreamHandle) -> Result<(), RuntimeError> {
        let shared = self.shared;
        let mut st = shared.state.lock();
        check_failure(&st)?;
        st.pool.close(handle).map_err(|e| self.stream_err(e))?;
        if let Some(pos) = self
            .reservations
            .iter()
            .position(|&(id, _)| id == handle.stream())
        {
            let (_, words) = self.reservations.swap_remove(pos);
            self.scratch_used -= words;
        }
        Ok(())
    }

    /// Reads the next token. The fetch is charged to the current hyperstep.
    /// With `preload`, the following token is staged in a second buffer; the
    /// first such request doubles the stream's scratchpad reservation.
    pub fn move_down(
        &mut self,
        handle: &StreamHandle,
        preload: bool,
    ) -> Result<Vec<f32>, RuntimeError> {
        let shared = self.shared;
        let mut st = shared.state.lock();
        check_failure(&st)?;
        let buffered = st
            .pool
            .is_double_buffered(handle)
            .map_err(|e| self.stream_err(e))?;
        let token = handle.token_size();
        let extra = if preload && !buffered { token } else { 0 };
        if self.scratch_used + extra > self.machine.local_words {
            return Err(RuntimeError::ScratchpadOverflow {
                core: self.id,
                requested: extra,
                used: self.scratch_used,
                limit: self.machine.local_words,
            });
        }
        let fetched = st
            .pool
            .move_down(handle, preload)
            .map_err(|e| self.stream_err(e))?;
        if fetched.started_prefetch {
            self.scratch_used += token;
            if let Some(r) = self
                .reservations
                .iter_mut()
                .find(|(id, _)| *id == handle.stream())
            {
                r.1 += token;
            }
        }
        self.fetched += token;
        Ok(fetched.token)
    }

    /// Writes `data` into the token at the cursor. With `wait`, the store is
    /// synchronous and costs `e` per word of this superstep's work;
    /// otherwise it overlaps with computation and is free.
    pub fn move_up(
        &mut self,
        handle: &StreamHandle,
        data: &[f32],
        wait: bool,
    ) -> Result<(), RuntimeError> {
        {
            let mut st = self.shared.state.lock();
            check_failure(&st)?;
            st.pool
                .move_up(handle, data)
                .map_err(|e| self.stream_err(e))?;
        }
        if wait {
            self.work += self.machine.e * data.len() as f64;
        }
        Ok(())
    }

    /// Moves the stream cursor by `delta` tokens. Free.
    pub fn seek(&mut self, handle: &StreamHandle, delta: isize) -> Result<(), RuntimeError> {
        let mut st = self.shared.state.lock();
        check_failure(&st)?;
        st.pool.seek(handle, delta).map_err(|e| self.stream_err(e))
    }

    /// Current cursor of an open stream.
    pub fn cursor(&self, handle: &StreamHandle) -> usize {
        let st = self.shared.state.lock();
        st.pool
            .stream(handle.stream())
            .map(|s| s.cursor())
            .unwrap_or(0)
    }
}

fn check_failure(st: &State) -> Result<(), RuntimeError> {
    if st.failure.is_some() {
        Err(RuntimeError::Aborted)
    } else {
        Ok(())
    }
}

impl Shared {
    /// Records an arrival, hands the turn on and blocks until this core may
    /// run again.
    fn submit(&self, core: CoreId, arrival: Arrival) -> Result<(), RuntimeError> {
        let mut st = self.state.lock();
        check_failure(&st)?;
        let terminal = matches!(arrival.kind, EventKind::Finish | EventKind::Failed);
        st.arrivals[core] = Some(arrival);
        let event = st.event;
        if core + 1 < self.p {
            st.turn = core + 1;
        } else {
            self.rendezvous(&mut st);
        }
        self.turn_changed.notify_all();
        if terminal {
            return Ok(());
        }
        while st.failure.is_none() && !(st.event > event && st.turn == core) {
            self.turn_changed.wait(&mut st);
        }
        check_failure(&st)
    }

    fn wait_for_start(&self, core: CoreId) -> Result<(), RuntimeError> {
        let mut st = self.state.lock();
        while st.failure.is_none() && !(st.event == 0 && st.turn == core) {
            self.turn_changed.wait(&mut st);
        }
        check_failure(&st)
    }
}

/// Outcome of a successful run.
#[derive(Debug)]
pub struct RunOutput<T> {
    pub trace: Trace,
    pub pool: ExternalPool,
    /// Kernel return values, indexed by core.
    pub results: Vec<T>,
}

/// Sets the failure if the core thread unwinds.
struct PanicGuard<'a> {
    shared: &'a Shared,
    core: CoreId,
}

impl Drop for PanicGuard<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.shared.fail(RuntimeError::Panicked {
                core: self.core,
                message: "kernel panicked".to_string(),
            });
        }
    }
}

/// Runs `kernel` on every core of `machine` against `pool`.
///
/// On failure the error of the lowest-numbered failing core is returned
/// (collective mismatches and delivery errors are detected at the
/// rendezvous where they happen).
pub fn run_spmd<T, F>(
    machine: &MachineParams,
    pool: ExternalPool,
    kernel: F,
) -> Result<RunOutput<T>, RuntimeError>
where
    T: Send,
    F: Fn(&mut CoreContext<'_>) -> Result<T, RuntimeError> + Sync,
{
    machine
        .validate()
        .map_err(|e| RuntimeError::PoolMismatch(e.to_string()))?;
    if pool.local_words() > machine.local_words {
        return Err(RuntimeError::PoolMismatch(format!(
            "tokens up to {} words exceed L = {}",
            pool.local_words(),
            machine.local_words
        )));
    }
    if pool.used() > machine.external_words {
        return Err(RuntimeError::PoolMismatch(format!(
            "{} words of streams exceed E = {}",
            pool.used(),
            machine.external_words
        )));
    }

    let p = machine.p;
    let shared = Shared {
        p,
        state: Mutex::new(State {
            pool,
            turn: 0,
            event: 0,
            arrivals: (0..p).map(|_| None).collect(),
            inboxes: vec![Vec::new(); p],
            slot_lens: vec![Vec::new(); p],
            hypersteps: Vec::new(),
            current: Vec::new(),
            failure: None,
            finished: false,
        }),
        turn_changed: Condvar::new(),
    };

    let outcomes: Vec<Result<Option<T>, RuntimeError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..p)
            .map(|core| {
                let shared = &shared;
                let kernel = &kernel;
                scope.spawn(move || -> Result<Option<T>, RuntimeError> {
                    let _guard = PanicGuard { shared, core };
                    shared.wait_for_start(core)?;
                    let mut ctx = CoreContext {
                        id: core,
                        machine,
                        shared,
                        slots: Vec::new(),
                        outbox: Vec::new(),
                        work: 0.0,
                        fetched: 0,
                        scratch_used: 0,
                        reservations: Vec::new(),
                    };
                    match kernel(&mut ctx) {
                        Ok(value) => {
                            ctx.arrive(EventKind::Finish)?;
                            Ok(Some(value))
                        }
                        Err(err) => {
                            let arrival = Arrival {
                                kind: EventKind::Failed,
                                work: 0.0,
                                fetched: 0,
                                outbox: Vec::new(),
                                error: Some(err),
                            };
                            // An abort already recorded the primary error.
                            let _ = shared.submit(core, arrival);
                            Ok(None)
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(core, h)| {
                h.join().unwrap_or_else(|payload| {
                    let message = payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "kernel panicked".to_string());
                    Err(RuntimeError::Panicked { core, message })
                })
            })
            .collect()
    });

    let state = shared.state.into_inner();
    // A panic is reported with its message rather than the guard's placeholder.
    if let Some(err) = outcomes.iter().find_map(|o| {
        o.as_ref()
            .err()
            .filter(|e| matches!(e, RuntimeError::Panicked { .. }))
    }) {
        return Err(err.clone());
    }
    if let Some(err) = state.failure {
        return Err(err);
    }
    let mut results = Vec::with_capacity(p);
    for outcome in outcomes {
        match outcome {
            Ok(Some(value)) => results.push(value),
            Ok(None) => return Err(RuntimeError::Aborted),
            Err(err) => return Err(err),
        }
    }
    debug_assert!(state.finished);
    Ok(RunOutput {
        trace: Trace {
            machine: *machine,
            hypersteps: state.hypersteps,
        },
        pool: state.pool,
        results,
    })
}
