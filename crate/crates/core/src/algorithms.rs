//! The streamed inner product and the multi-level Cannon matrix product.
//!
//! Host-side builders lay out the input streams in the external pool;
//! kernels run under [`run_spmd`] and charge their arithmetic explicitly:
//! `2C` for a length-`C` dot product and `2k³` for a `k × k` block
//! multiply-add.
//!
//! Cannon index helpers use 1-based block and grid coordinates, as in the
//! usual statement of the algorithm. Core `c` sits at grid position
//! `(1 + c / N, 1 + c % N)`.

use thiserror::Error;

use crate::cost::{CannonShape, CostError, Trace};
use crate::extmem::{CoreId, ExternalPool, StreamError, StreamHandle, StreamId};
use crate::machine::MachineParams;
use crate::runtime::{run_spmd, CoreContext, RuntimeError, Slot};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgorithmError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("{0}")]
    Precondition(String),
}

fn precondition<T>(what: impl Into<String>) -> Result<T, AlgorithmError> {
    Err(AlgorithmError::Precondition(what.into()))
}

/// 64-bit linear congruential generator for reproducible fixtures.
///
/// `state ← state · 6364136223846793005 + 1442695040888963407 (mod 2⁶⁴)`;
/// each draw advances the state once and maps its top 24 bits `b` to
/// `2·b/2²⁴ − 1`, a value in `[−1, 1)` that is exact in single precision.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u64,
}

impl Lcg {
    pub const MULTIPLIER: u64 = 6364136223846793005;
    pub const INCREMENT: u64 = 1442695040888963407;

    pub fn new(seed: u64) -> Self {
        Lcg { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(Self::MULTIPLIER)
            .wrapping_add(Self::INCREMENT);
        self.state
    }

    /// Uniform value in `[−1, 1)`.
    pub fn next_f32(&mut self) -> f32 {
        let bits = (self.next_u64() >> 40) as f32;
        2.0 * bits / (1u32 << 24) as f32 - 1.0
    }

    pub fn fill(&mut self, len: usize) -> Vec<f32> {
        (0..len).map(|_| self.next_f32()).collect()
    }
}

/// Appends zeros until the length is a multiple of `multiple`.
pub fn pad_vector(v: &[f32], multiple: usize) -> Vec<f32> {
    let mut out = v.to_vec();
    if multiple > 0 {
        let rem = out.len() % multiple;
        if rem != 0 || out.is_empty() {
            out.resize(out.len() + multiple - rem, 0.0);
        }
    }
    out
}

/// Streams of the cyclically distributed inner-product operands of one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclicStreams {
    pub v: StreamId,
    pub u: StreamId,
}

/// Component `i` goes to core `i mod p`; each core's share is chunked into
/// tokens of `token_size` words in index order.
pub fn build_cyclic_streams(
    v: &[f32],
    u: &[f32],
    p: usize,
    token_size: usize,
    pool: &mut ExternalPool,
) -> Result<Vec<CyclicStreams>, AlgorithmError> {
    if v.len() != u.len() {
        return precondition(format!(
            "vectors differ in length ({} vs {})",
            v.len(),
            u.len()
        ));
    }
    if p == 0 || token_size == 0 || v.is_empty() || !v.len().is_multiple_of(p * token_size) {
        return precondition(format!(
            "vector length {} is not a positive multiple of p·C = {p}·{token_size}",
            v.len()
        ));
    }
    let share =
        |x: &[f32], s: usize| -> Vec<f32> { x.iter().skip(s).step_by(p).copied().collect() };
    let per_core = v.len() / p;
    let mut streams = Vec::with_capacity(p);
    for s in 0..p {
        let vs = share(v, s);
        let us = share(u, s);
        let v_id = pool.create(per_core, token_size, Some(&vs))?;
        let u_id = pool.create(per_core, token_size, Some(&us))?;
        streams.push(CyclicStreams { v: v_id, u: u_id });
    }
    Ok(streams)
}

/// `Σ aᵢbᵢ`, charging `2·|a|` FLOPs.
pub fn dot_block(ctx: &mut CoreContext<'_>, a: &[f32], b: &[f32]) -> Result<f32, RuntimeError> {
    if a.len() != b.len() {
        return Err(ctx.error(format!(
            "dot product of blocks with {} and {} words",
            a.len(),
            b.len()
        )));
    }
    let sum = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ctx.charge_flops(2.0 * a.len() as f64);
    Ok(sum)
}

/// Streamed inner product on one core. Each of the `n_hypersteps`
/// hypersteps consumes one token of each operand; the partial sums are then
/// exchanged and summed locally, so every core returns the full product.
pub fn inner_product_kernel(
    ctx: &mut CoreContext<'_>,
    streams: &[CyclicStreams],
    n_hypersteps: usize,
) -> Result<f32, RuntimeError> {
    let p = ctx.nprocs();
    let me = ctx.id();
    let mine = streams[me];
    let partials = ctx.register_slot(p)?;
    let hv = ctx.open(mine.v)?;
    let hu = ctx.open(mine.u)?;

    let mut alpha = 0.0f32;
    for _ in 0..n_hypersteps {
        let a = ctx.move_down(&hv, true)?;
        let b = ctx.move_down(&hu, true)?;
        alpha += dot_block(ctx, &a, &b)?;
        ctx.hyperstep_boundary()?;
    }
    ctx.close(&hv)?;
    ctx.close(&hu)?;

    ctx.slot_mut(partials)[me] = alpha;
    ctx.broadcast(partials, me, &[alpha])?;
    ctx.sync()?;
    let total = ctx.slot(partials).iter().sum();
    ctx.charge_flops(p as f64);
    Ok(total)
}

#[derive(Debug)]
pub struct InnerProductRun {
    /// The product as computed on each core.
    pub alphas: Vec<f32>,
    pub trace: Trace,
}

/// Builds the streams for `v·u` and runs the kernel on `m`.
pub fn run_inner_product(
    m: &MachineParams,
    v: &[f32],
    u: &[f32],
    token_size: usize,
) -> Result<InnerProductRun, AlgorithmError> {
    let mut pool = ExternalPool::for_machine(m);
    let streams = build_cyclic_streams(v, u, m.p, token_size, &mut pool)?;
    let n = v.len() / (m.p * token_size);
    let out = run_spmd(m, pool, |ctx| inner_product_kernel(ctx, &streams, n))?;
    Ok(InnerProductRun {
        alphas: out.results,
        trace: out.trace,
    })
}

/// Square single-precision matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    order: usize,
    data: Vec<f32>,
}

impl BlockMatrix {
    pub fn new(order: usize, data: Vec<f32>) -> Result<Self, AlgorithmError> {
        if data.len() != order * order {
            return precondition(format!(
                "{} values do not form a {order}×{order} matrix",
                data.len()
            ));
        }
        Ok(BlockMatrix { order, data })
    }

    pub fn zeros(order: usize) -> Self {
        BlockMatrix {
            order,
            data: vec![0.0; order * order],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.data[i * order + i] = 1.0;
        }
        m
    }

    pub fn constant(order: usize, value: f32) -> Self {
        BlockMatrix {
            order,
            data: vec![value; order * order],
        }
    }

    /// Entries drawn row by row from [`Lcg`].
    pub fn uniform(order: usize, rng: &mut Lcg) -> Self {
        BlockMatrix {
            order,
            data: rng.fill(order * order),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.order + col]
    }

    /// Zero-padded copy of order `order ≥ self.order()`.
    pub fn padded(&self, order: usize) -> Self {
        assert!(order >= self.order, "padding cannot shrink a matrix");
        let mut out = Self::zeros(order);
        for r in 0..self.order {
            out.data[r * order..r * order + self.order]
                .copy_from_slice(&self.data[r * self.order..(r + 1) * self.order]);
        }
        out
    }

    /// Top-left `order × order` corner.
    pub fn truncated(&self, order: usize) -> Self {
        let mut out = Self::zeros(order);
        for r in 0..order {
            out.data[r * order..(r + 1) * order]
                .copy_from_slice(&self.data[r * self.order..r * self.order + order]);
        }
        out
    }

    /// Row-major copy of the `size × size` block at `(row, col)`.
    pub fn block(&self, row: usize, col: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size);
        for r in row..row + size {
            out.extend_from_slice(&self.data[r * self.order + col..r * self.order + col + size]);
        }
        out
    }

    pub fn set_block(&mut self, row: usize, col: usize, size: usize, values: &[f32]) {
        for (dr, chunk) in values.chunks_exact(size).enumerate() {
            let r = row + dr;
            self.data[r * self.order + col..r * self.order + col + size].copy_from_slice(chunk);
        }
    }

    /// Inner block `(s, t)` (0-based) of outer block `(i, j)` (0-based) in
    /// the two-level decomposition of `plan`.
    pub fn inner_block(
        &self,
        plan: &CannonPlan,
        i: usize,
        j: usize,
        s: usize,
        t: usize,
    ) -> Vec<f32> {
        let (row, col) = plan.inner_origin(i, j, s, t);
        self.block(row, col, plan.k)
    }

    /// Reference product accumulated in double precision.
    pub fn matmul(&self, other: &BlockMatrix) -> BlockMatrix {
        let n = self.order;
        assert_eq!(n, other.order, "orders differ");
        let mut acc = vec![0.0f64; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k] as f64;
                for j in 0..n {
                    acc[i * n + j] += a * other.data[k * n + j] as f64;
                }
            }
        }
        BlockMatrix {
            order: n,
            data: acc.into_iter().map(|x| x as f32).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − reference‖_F / ‖reference‖_F` (absolute error if the
    /// reference is zero).
    pub fn relative_error(&self, reference: &BlockMatrix) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }
}

/// `c += a·b` for `k × k` row-major blocks, charging `2k³` FLOPs.
pub fn gemm_block(
    ctx: &mut CoreContext<'_>,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    k: usize,
) -> Result<(), RuntimeError> {
    let words = k * k;
    if a.len() != words || b.len() != words || c.len() != words {
        return Err(ctx.error(format!(
            "block multiply expects {k}×{k} blocks, got {}, {} and {} words",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    gemm_accumulate(a, b, c, k);
    ctx.charge_flops(2.0 * (words * k) as f64);
    Ok(())
}

fn gemm_accumulate(a: &[f32], b: &[f32], c: &mut [f32], k: usize) {
    for i in 0..k {
        for l in 0..k {
            let x = a[i * k + l];
            for j in 0..k {
                c[i * k + j] += x * b[l * k + j];
            }
        }
    }
}

fn check_index(name: &str, value: usize, grid: usize) -> Result<(), AlgorithmError> {
    if grid == 0 || value == 0 || value > grid {
        return precondition(format!("{name} = {value} outside 1..={grid}"));
    }
    Ok(())
}

/// 1-based `(row, column)` on the core grid or in a block decomposition.
pub type GridPos = (usize, usize);

/// `1 + (x mod N)` for a possibly negative `x`.
fn wrap(x: isize, grid: usize) -> usize {
    1 + x.rem_euclid(grid as isize) as usize
}

/// Grid cores that initially hold blocks `A_ij` and `B_ij`, 1-based.
///
/// Core `(s, t)` starts with `A_{s, 1+((s+t−2) mod N)}` and
/// `B_{1+((s+t−2) mod N), t}`; this is the inverse map.
pub fn cannon_initial_placement(
    i: usize,
    j: usize,
    grid: usize,
) -> Result<(GridPos, GridPos), AlgorithmError> {
    check_index("i", i, grid)?;
    check_index("j", j, grid)?;
    let (i, j) = (i as isize, j as isize);
    let a_core = (i as usize, wrap(j - i, grid));
    let b_core = (wrap(i - j, grid), j as usize);
    Ok((a_core, b_core))
}

/// Blocks `(A index, B index)` that grid core `(s, t)` holds before the
/// first step, 1-based.
pub fn cannon_initial_blocks(
    s: usize,
    t: usize,
    grid: usize,
) -> Result<(GridPos, GridPos), AlgorithmError> {
    check_index("s", s, grid)?;
    check_index("t", t, grid)?;
    let j = wrap(s as isize + t as isize - 2, grid);
    Ok(((s, j), (j, t)))
}

/// Index `j'` such that core `(s, t)` multiplies `A_{s,j'}·B_{j',t}` in
/// step `step` (all 1-based): `1 + ((s + t + step − 3) mod N)`.
pub fn cannon_step_index(
    s: usize,
    t: usize,
    step: usize,
    grid: usize,
) -> Result<usize, AlgorithmError> {
    check_index("s", s, grid)?;
    check_index("t", t, grid)?;
    check_index("step", step, grid)?;
    Ok(wrap(s as isize + t as isize + step as isize - 3, grid))
}

/// 1-based grid position of linear core `core` on an `N × N` grid.
pub fn grid_position(core: CoreId, grid: usize) -> (usize, usize) {
    (1 + core / grid, 1 + core % grid)
}

pub fn grid_core(s: usize, t: usize, grid: usize) -> CoreId {
    (s - 1) * grid + (t - 1)
}

/// Receive slots for the on-chip block shifts.
#[derive(Debug, Clone, Copy)]
pub struct ShiftSlots {
    pub a: Slot,
    pub b: Slot,
}

impl ShiftSlots {
    pub fn register(ctx: &mut CoreContext<'_>, k: usize) -> Result<Self, RuntimeError> {
        Ok(ShiftSlots {
            a: ctx.register_slot(k * k)?,
            b: ctx.register_slot(k * k)?,
        })
    }
}

/// Cannon's algorithm on the core grid for blocks already in the skewed
/// initial placement: `N` supersteps, each multiplying the local blocks into
/// `c` and then passing the A block one column left and the B block one row
/// up. The shift also happens in the last step, which restores the
/// placement.
pub fn cannon_onchip(
    ctx: &mut CoreContext<'_>,
    slots: ShiftSlots,
    a: &mut [f32],
    b: &mut [f32],
    c: &mut [f32],
    grid: usize,
    k: usize,
) -> Result<(), RuntimeError> {
    let (s, t) = grid_position(ctx.id(), grid);
    let left = grid_core(s, wrap(t as isize - 2, grid), grid);
    let up = grid_core(wrap(s as isize - 2, grid), t, grid);
    for _ in 0..grid {
        gemm_block(ctx, a, b, c, k)?;
        ctx.put(left, slots.a, 0, a)?;
        ctx.put(up, slots.b, 0, b)?;
        ctx.sync()?;
        a.copy_from_slice(ctx.slot(slots.a));
        b.copy_from_slice(ctx.slot(slots.b));
    }
    Ok(())
}

/// Two-level blocking of an order-`n` product on an `N × N` grid with
/// `M × M` outer blocks of `N × N` inner blocks of order `k = n/(NM)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CannonPlan {
    pub n: usize,
    pub grid: usize,
    pub outer: usize,
    pub k: usize,
}

impl CannonPlan {
    pub fn new(
        n: usize,
        grid: usize,
        outer: usize,
        m: &MachineParams,
    ) -> Result<Self, AlgorithmError> {
        let shape = CannonShape::new(n, grid, outer, m)?;
        Ok(CannonPlan {
            n: shape.n,
            grid: shape.grid,
            outer: shape.outer,
            k: shape.k,
        })
    }

    pub fn outer_order(&self) -> usize {
        self.n / self.outer
    }

    pub fn token_words(&self) -> usize {
        self.k * self.k
    }

    /// Top-left entry of inner block `(s, t)` of outer block `(i, j)`, all
    /// 0-based.
    pub fn inner_origin(&self, i: usize, j: usize, s: usize, t: usize) -> (usize, usize) {
        let outer = self.outer_order();
        (i * outer + s * self.k, j * outer + t * self.k)
    }
}

/// Streams of one core in the multi-level product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CannonStreams {
    pub a: StreamId,
    pub b: StreamId,
    pub c: StreamId,
}

/// Lays out, for every core `(s, t)`, the `M²` A tokens in row-major outer
/// order, the `M²` B tokens in column-major outer order, and a zeroed
/// `M²`-token output stream. The token for outer block `(i, j)` is the inner
/// block the core holds at the start of Cannon's algorithm on that block.
pub fn build_cannon_streams(
    a: &BlockMatrix,
    b: &BlockMatrix,
    plan: &CannonPlan,
    pool: &mut ExternalPool,
) -> Result<Vec<CannonStreams>, AlgorithmError> {
    if a.order() != plan.n || b.order() != plan.n {
        return precondition(format!(
            "matrices of order {} and {} for a plan of order {}",
            a.order(),
            b.order(),
            plan.n
        ));
    }
    let grid = plan.grid;
    let outer = plan.outer;
    let token = plan.token_words();
    let total = outer * outer * token;
    let mut streams = Vec::with_capacity(grid * grid);
    for core in 0..grid * grid {
        let (s, t) = grid_position(core, grid);
        let ((a_row, a_col), (b_row, b_col)) = cannon_initial_blocks(s, t, grid)?;
        let mut a_data = Vec::with_capacity(total);
        for i in 0..outer {
            for j in 0..outer {
                a_data.extend(a.inner_block(plan, i, j, a_row - 1, a_col - 1));
            }
        }
        let mut b_data = Vec::with_capacity(total);
        for j in 0..outer {
            for i in 0..outer {
                b_data.extend(b.inner_block(plan, i, j, b_row - 1, b_col - 1));
            }
        }
        let a_id = pool.create(total, token, Some(&a_data))?;
        let b_id = pool.create(total, token, Some(&b_data))?;
        let c_id = pool.create(total, token, None)?;
        streams.push(CannonStreams {
            a: a_id,
            b: b_id,
            c: c_id,
        });
    }
    Ok(streams)
}

/// Multi-level Cannon on one core: `M³` hypersteps, each streaming in one A
/// and one B token and running [`cannon_onchip`] on them. After every `M`
/// hypersteps the finished C block is written back (without waiting).
///
/// The A cursor is rewound by `M` after every column of C except the last
/// of a row, so it moves on to the next row group; the B cursor is rewound
/// by `M²` after every row of C except the last.
pub fn cannon_multilevel_kernel(
    ctx: &mut CoreContext<'_>,
    plan: &CannonPlan,
    streams: &[CannonStreams],
) -> Result<(), RuntimeError> {
    let mine = streams[ctx.id()];
    let outer = plan.outer;
    let slots = ShiftSlots::register(ctx, plan.k)?;
    let ha = ctx.open(mine.a)?;
    let hb = ctx.open(mine.b)?;
    let hc = ctx.open(mine.c)?;
    for i in 0..outer {
        for j in 0..outer {
            let mut c = vec![0.0; plan.token_words()];
            for _ in 0..outer {
                let mut a = ctx.move_down(&ha, true)?;
                let mut b = ctx.move_down(&hb, true)?;
                cannon_onchip(ctx, slots, &mut a, &mut b, &mut c, plan.grid, plan.k)?;
                ctx.hyperstep_boundary()?;
            }
            ctx.move_up(&hc, &c, false)?;
            if j + 1 < outer {
                ctx.seek(&ha, -(outer as isize))?;
            }
        }
        if i + 1 < outer {
            ctx.seek(&hb, -((outer * outer) as isize))?;
        }
    }
    for h in [ha, hb, hc] {
        close(ctx, &h)?;
    }
    Ok(())
}

fn close(ctx: &mut CoreContext<'_>, h: &StreamHandle) -> Result<(), RuntimeError> {
    ctx.close(h)
}

/// Reads the product back from the output streams: the token of core
/// `(s, t)` for outer block `(i, j)` is inner block `(s, t)` of `C_ij`.
pub fn assemble_cannon_output(
    pool: &ExternalPool,
    plan: &CannonPlan,
    streams: &[CannonStreams],
) -> Result<BlockMatrix, AlgorithmError> {
    let mut c = BlockMatrix::zeros(plan.n);
    for (core, st) in streams.iter().enumerate() {
        let (s, t) = grid_position(core, plan.grid);
        let stream = pool.stream(st.c).ok_or(StreamError::UnknownStream(st.c))?;
        for i in 0..plan.outer {
            for j in 0..plan.outer {
                let token = stream
                    .token(i * plan.outer + j)
                    .ok_or(StreamError::UnknownStream(st.c))?;
                let (row, col) = plan.inner_origin(i, j, s - 1, t - 1);
                c.set_block(row, col, plan.k, token);
            }
        }
    }
    Ok(c)
}

#[derive(Debug)]
pub struct CannonRun {
    pub product: BlockMatrix,
    pub trace: Trace,
}

/// Builds the streams for `a·b`, runs the multi-level kernel on `m` and
/// reassembles the product.
pub fn run_cannon(
    m: &MachineParams,
    a: &BlockMatrix,
    b: &BlockMatrix,
    plan: &CannonPlan,
) -> Result<CannonRun, AlgorithmError> {
    let mut pool = ExternalPool::for_machine(m);
    let streams = build_cannon_streams(a, b, plan, &mut pool)?;
    let out = run_spmd(m, pool, |ctx| cannon_multilevel_kernel(ctx, plan, &streams))?;
    let product = assemble_cannon_output(&out.pool, plan, &streams)?;
    Ok(CannonRun {
        product,
        trace: out.trace,
    })
}
