//! Cost accounting for BSP and BSPS programs.
//!
//! A superstep costs `max_s w + g·h + l`. A hyperstep runs a BSP program of
//! cost `T_h` while the next tokens stream in, so it costs
//! `max(T_h, e·max_s V(s))` where `V(s)` is the number of words core `s`
//! fetches for it. The total cost of a program is the sum over hypersteps.
//!
//! The accountant (which costs recorded traces) and the closed-form
//! predictors share [`superstep_term`], [`HyperstepCost::new`] and
//! [`CostProfile::total`], so identical programs give bitwise identical
//! costs.

use std::fmt;

use thiserror::Error;

use crate::machine::MachineParams;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("sent/received vectors have different lengths ({sent} vs {received})")]
    LengthMismatch { sent: usize, received: usize },
    #[error("{what}")]
    Precondition { what: String },
}

fn precondition<T>(what: impl Into<String>) -> Result<T, CostError> {
    Err(CostError::Precondition { what: what.into() })
}

/// How a hyperstep's cost is bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Classification {
    /// `T_h ≥ e·V`, including the tie.
    ComputeHeavy,
    /// `e·V > T_h`.
    BandwidthHeavy,
    /// Nothing was fetched.
    NoFetch,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::ComputeHeavy => "compute-heavy",
            Classification::BandwidthHeavy => "bandwidth-heavy",
            Classification::NoFetch => "no-fetch",
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One superstep as recorded by the runtime.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperstepRecord {
    /// Work per core, FLOP.
    pub work: Vec<f64>,
    /// Words sent per core.
    pub sent: Vec<usize>,
    /// Words received per core.
    pub received: Vec<usize>,
    pub h: usize,
    /// Closed by a bulk synchronization (charged `l`). Work done between the
    /// last sync and a hyperstep boundary forms an unsynchronized record.
    pub synced: bool,
}

impl SuperstepRecord {
    pub fn new(work: Vec<f64>, sent: Vec<usize>, received: Vec<usize>, synced: bool) -> Self {
        let h = h_relation(&sent, &received).expect("per-core vectors of equal length");
        SuperstepRecord {
            work,
            sent,
            received,
            h,
            synced,
        }
    }

    /// Synchronized superstep with no work and no traffic on `p` cores.
    pub fn empty(p: usize) -> Self {
        Self::new(vec![0.0; p], vec![0; p], vec![0; p], true)
    }

    pub fn max_work(&self) -> f64 {
        self.work.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperstepRecord {
    pub supersteps: Vec<SuperstepRecord>,
    /// Words moved down per core.
    pub fetch: Vec<usize>,
}

impl HyperstepRecord {
    pub fn max_fetch(&self) -> usize {
        self.fetch.iter().copied().max().unwrap_or(0)
    }

    pub fn cost(&self, m: &MachineParams) -> HyperstepCost {
        HyperstepCost::new(
            self.supersteps.iter().map(|s| superstep_cost(s, m)),
            self.max_fetch(),
            m,
        )
    }
}

/// Ordered hyperstep records of one run plus the machine that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub machine: MachineParams,
    pub hypersteps: Vec<HyperstepRecord>,
}

pub const TRACE_CSV_HEADER: &str = "# bsps-trace v1";

impl Trace {
    pub fn profile(&self) -> CostProfile {
        CostProfile {
            hypersteps: self
                .hypersteps
                .iter()
                .map(|h| h.cost(&self.machine))
                .collect(),
        }
    }

    pub fn superstep_count(&self) -> usize {
        self.hypersteps.iter().map(|h| h.supersteps.len()).sum()
    }

    /// One row per hyperstep. Floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        out.push_str("hyperstep,supersteps,t_h,max_fetch_words,fetch_cost,cost,classification\n");
        for (i, (rec, cost)) in self
            .hypersteps
            .iter()
            .zip(self.profile().hypersteps)
            .enumerate()
        {
            out.push_str(&format!(
                "{},{},{:?},{},{:?},{:?},{}\n",
                i,
                rec.supersteps.len(),
                cost.bsp,
                cost.fetch_words,
                cost.fetch,
                cost.cost(),
                cost.class
            ));
        }
        out
    }
}

/// `h = max_s max(t_s, r_s)`.
pub fn h_relation(sent: &[usize], received: &[usize]) -> Result<usize, CostError> {
    if sent.len() != received.len() {
        return Err(CostError::LengthMismatch {
            sent: sent.len(),
            received: received.len(),
        });
    }
    Ok(sent
        .iter()
        .zip(received)
        .map(|(&t, &r)| t.max(r))
        .max()
        .unwrap_or(0))
}

/// The single per-superstep cost expression.
pub fn superstep_term(max_work: f64, h: usize, synced: bool, m: &MachineParams) -> f64 {
    let latency = if synced { m.l } else { 0.0 };
    max_work + m.g * h as f64 + latency
}

pub fn superstep_cost(rec: &SuperstepRecord, m: &MachineParams) -> f64 {
    superstep_term(rec.max_work(), rec.h, rec.synced, m)
}

/// Cost breakdown of one hyperstep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperstepCost {
    /// `T_h`, the BSP cost of the hyperstep's program.
    pub bsp: f64,
    /// `max_s V(s)` in words.
    pub fetch_words: usize,
    /// `e · max_s V(s)`.
    pub fetch: f64,
    pub class: Classification,
}

impl HyperstepCost {
    /// Sums superstep costs in order and compares against the fetch time.
    pub fn new<I>(superstep_costs: I, fetch_words: usize, m: &MachineParams) -> Self
    where
        I: IntoIterator<Item = f64>,
    {
        let bsp = superstep_costs.into_iter().fold(0.0, |acc, c| acc + c);
        let fetch = m.e * fetch_words as f64;
        let class = if fetch_words == 0 {
            Classification::NoFetch
        } else if fetch > bsp {
            Classification::BandwidthHeavy
        } else {
            Classification::ComputeHeavy
        };
        HyperstepCost {
            bsp,
            fetch_words,
            fetch,
            class,
        }
    }

    pub fn cost(&self) -> f64 {
        self.bsp.max(self.fetch)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostProfile {
    pub hypersteps: Vec<HyperstepCost>,
}

impl CostProfile {
    pub fn total(&self) -> f64 {
        self.hypersteps.iter().fold(0.0, |acc, h| acc + h.cost())
    }

    /// Classifications that occur, in first-seen order.
    pub fn classes(&self) -> Vec<Classification> {
        let mut seen = Vec::new();
        for h in &self.hypersteps {
            if !seen.contains(&h.class) {
                seen.push(h.class);
            }
        }
        seen
    }
}

pub fn bsps_cost(trace: &Trace) -> f64 {
    trace.profile().total()
}

/// Per-hyperstep structure of the streamed inner product: one hyperstep per
/// token pair (`2C` work, `2C` words fetched), then a closing hyperstep with
/// the all-to-all exchange of partial sums and the `p`-term local sum.
pub fn predict_inner_product_profile(
    vec_len: usize,
    token_size: usize,
    m: &MachineParams,
) -> Result<CostProfile, CostError> {
    let chunk = m.p * token_size;
    if token_size == 0 || vec_len == 0 || !vec_len.is_multiple_of(chunk) {
        return precondition(format!(
            "vector length {vec_len} is not a positive multiple of p·C = {}·{token_size}",
            m.p
        ));
    }
    let n = vec_len / chunk;
    let words = 2 * token_size;
    let step = HyperstepCost::new([superstep_term(words as f64, 0, false, m)], words, m);
    let mut hypersteps = vec![step; n];
    hypersteps.push(HyperstepCost::new(
        [
            superstep_term(0.0, m.p - 1, true, m),
            superstep_term(m.p as f64, 0, false, m),
        ],
        0,
        m,
    ));
    Ok(CostProfile { hypersteps })
}

pub fn predict_inner_product(
    vec_len: usize,
    token_size: usize,
    m: &MachineParams,
) -> Result<f64, CostError> {
    Ok(predict_inner_product_profile(vec_len, token_size, m)?.total())
}

/// Validated shape of a multi-level Cannon run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CannonShape {
    /// Matrix order.
    pub n: usize,
    /// Core grid side.
    pub grid: usize,
    /// Outer blocking factor.
    pub outer: usize,
    /// Inner block order `n / (grid·outer)`.
    pub k: usize,
}

impl CannonShape {
    pub fn new(n: usize, grid: usize, outer: usize, m: &MachineParams) -> Result<Self, CostError> {
        if grid == 0 || grid * grid != m.p {
            return precondition(format!(
                "grid side {grid} does not match p = {} (need N² = p)",
                m.p
            ));
        }
        if outer == 0 || n == 0 || !n.is_multiple_of(grid * outer) {
            return precondition(format!(
                "matrix order {n} is not a positive multiple of N·M = {grid}·{outer}"
            ));
        }
        Ok(CannonShape {
            n,
            grid,
            outer,
            k: n / (grid * outer),
        })
    }

    pub fn hyperstep_count(&self) -> usize {
        self.outer.pow(3)
    }
}

/// Cost of one hyperstep of the multi-level Cannon: `N` synchronized
/// supersteps of `2k³` work with both an A and a B block shifted (`h = 2k²`),
/// overlapped with fetching one A and one B token (`2k²` words).
pub fn cannon_hyperstep(grid: usize, k: usize, m: &MachineParams) -> HyperstepCost {
    let block = k * k;
    let work = (2 * block * k) as f64;
    let superstep = superstep_term(work, 2 * block, true, m);
    HyperstepCost::new(std::iter::repeat_n(superstep, grid), 2 * block, m)
}

pub fn predict_cannon_profile(
    n: usize,
    grid: usize,
    outer: usize,
    m: &MachineParams,
) -> Result<CostProfile, CostError> {
    let shape = CannonShape::new(n, grid, outer, m)?;
    let step = cannon_hyperstep(grid, shape.k, m);
    Ok(CostProfile {
        hypersteps: vec![step; shape.hyperstep_count()],
    })
}

pub fn predict_cannon(
    n: usize,
    grid: usize,
    outer: usize,
    m: &MachineParams,
) -> Result<f64, CostError> {
    Ok(predict_cannon_profile(n, grid, outer, m)?.total())
}

/// Compute side minus fetch side of a Cannon hyperstep as a function of a
/// real block order `k`: `N(2k³ + 2k²g + l) − 2k²e`.
pub fn cannon_balance(k: f64, grid: usize, m: &MachineParams) -> f64 {
    let n = grid as f64;
    n * (2.0 * k * k * k + 2.0 * k * k * m.g + m.l) - 2.0 * k * k * m.e
}

/// Positive real block orders at which a Cannon hyperstep's compute and
/// fetch sides balance, in increasing order.
///
/// The balance is a cubic with positive leading coefficient, non-negative at
/// `k = 0`, with a single positive stationary point `k*`. So there are two
/// roots when it dips below zero at `k*`, a double root when it touches
/// zero there, and none otherwise. Each root is isolated by bisection.
pub fn solve_k_equal(m: &MachineParams, grid: usize) -> Vec<f64> {
    if grid == 0 || m.e <= 0.0 {
        return Vec::new();
    }
    let n = grid as f64;
    let f = |k: f64| cannon_balance(k, grid, m);
    let k_star = 2.0 * (m.e - n * m.g) / (3.0 * n);
    if k_star <= 0.0 {
        return Vec::new();
    }
    let at_min = f(k_star);
    if at_min > 0.0 {
        return Vec::new();
    }
    if at_min == 0.0 {
        return vec![k_star];
    }
    let mut roots = Vec::with_capacity(2);
    if f(0.0) > 0.0 {
        roots.push(bisect(&f, 0.0, k_star));
    }
    let mut hi = 2.0 * k_star;
    while f(hi) <= 0.0 {
        hi *= 2.0;
    }
    roots.push(bisect(&f, k_star, hi));
    roots
}

/// Root of `f` on `[lo, hi]` given a sign change, to 1e-12 relative width.
fn bisect<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64) -> f64 {
    let lo_positive = f(lo) > 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-12 * mid.abs() {
            break;
        }
        let v = f(mid);
        if v == 0.0 {
            return mid;
        }
        if (v > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One row of a Cannon parameter sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub k: usize,
    pub outer: usize,
    pub hyperstep: HyperstepCost,
    pub predicted: f64,
    pub accounted: Option<f64>,
}

/// Predicted Cannon costs over matrix orders and inner block orders. Pairs
/// where `n` is not a multiple of `grid·k` are skipped.
pub fn sweep_cannon(
    m: &MachineParams,
    grid: usize,
    orders: &[usize],
    ks: &[usize],
) -> Result<Vec<SweepRow>, CostError> {
    let mut rows = Vec::new();
    for &n in orders {
        for &k in ks {
            if k == 0 || n == 0 || n % (grid * k) != 0 {
                continue;
            }
            let outer = n / (grid * k);
            let profile = predict_cannon_profile(n, grid, outer, m)?;
            rows.push(SweepRow {
                n,
                k,
                outer,
                hyperstep: profile.hypersteps[0],
                predicted: profile.total(),
                accounted: None,
            });
        }
    }
    if rows.is_empty() {
        return precondition("no (n, k) pair survives the divisibility filter");
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "# bsps-sweep v1";

pub fn sweep_csv(rows: &[SweepRow], m: &MachineParams) -> String {
    let mut out = String::new();
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    out.push_str("n,k,outer,t_h,fetch_cost,classification,predicted,accounted,seconds\n");
    for row in rows {
        let accounted = row.accounted.map(|a| format!("{a:?}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:?},{:?},{},{:?},{},{:?}\n",
            row.n,
            row.k,
            row.outer,
            row.hyperstep.bsp,
            row.hyperstep.fetch,
            row.hyperstep.class,
            row.predicted,
            accounted,
            m.flops_to_seconds(row.predicted)
        ));
    }
    out
}
