//! Simulator and cost model for streaming BSP accelerators.
//!
//! A [`MachineParams`] pack describes the accelerator. Kernels run on a
//! deterministic SPMD runtime ([`run_spmd`]) with BSP synchronization and
//! stream access to an [`ExternalPool`]; every run produces a [`Trace`] whose
//! cost can be compared against the closed-form predictions in [`cost`].
//!
//! ```
//! use bsps_core::{run_spmd, ExternalPool, MachineParams};
//!
//! let m = MachineParams::uniform_unit();
//! let mut pool = ExternalPool::for_machine(&m);
//! let ids: Vec<_> = (0..m.p)
//!     .map(|_| pool.create(64, 16, Some(&[1.0; 64])).unwrap())
//!     .collect();
//!
//! let out = run_spmd(&m, pool, |ctx| {
//!     let h = ctx.open(ids[ctx.id()])?;
//!     let mut sum = 0.0;
//!     for _ in 0..4 {
//!         let token = ctx.move_down(&h, true)?;
//!         sum += token.iter().sum::<f32>();
//!         ctx.charge_flops(token.len() as f64);
//!         ctx.hyperstep_boundary()?;
//!     }
//!     ctx.close(&h)?;
//!     Ok(sum)
//! })?;
//! assert_eq!(out.results, vec![64.0; 4]);
//! // four hypersteps of max(16, e·16)
//! assert_eq!(bsps_core::bsps_cost(&out.trace), 64.0);
//! # Ok::<(), bsps_core::RuntimeError>(())
//! ```

pub mod algorithms;
pub mod cost;
pub mod extmem;
pub mod machine;
pub mod runtime;

pub use cost::{bsps_cost, Classification, CostProfile, Trace};
pub use extmem::{ExternalPool, StreamError, StreamHandle, StreamId};
pub use machine::{MachineError, MachineParams};
pub use runtime::{run_spmd, CoreContext, RunOutput, RuntimeError, Slot};
