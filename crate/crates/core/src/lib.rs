//! Reconstruction of incomplete daily activity chains with a masked-sequence
//! transformer, distribution-level evaluation via Jensen-Shannon divergence,
//! and semi-supervised iterative transfer to new regions.
//!
//! The pipeline mirrors the stages exposed by the `mobichain` CLI:
//!
//! 1. [`simgen`] samples complete agent-days from a [`activity::RegionProfile`]
//!    and optionally degrades them into fragmentary observations.
//! 2. [`ingest`] turns raw GPS records and POI files into (incomplete) chains.
//! 3. [`encoding`] maps chains to/from 96-slot token sequences and applies
//!    the three masking strategies.
//! 4. [`model`] + [`numerics`] implement the reconstruction network and the
//!    reverse-mode tape it trains on; [`loss`] holds the composite objective.
//! 5. [`training`] fits the base model with the phased masking curriculum.
//! 6. [`transfer`] runs the iterative self-training loop with progressive
//!    unfreezing and real/synthetic loss weighting.
//! 7. [`metrics`] scores generated chains against references with JSD over
//!    five activity statistics.

pub mod activity;
pub mod encoding;
pub mod ingest;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod simgen;
pub mod training;
pub mod transfer;

pub use activity::{Activity, ActivityChain, ActivityType, RegionId, RegionProfile, StayPoint};
pub use encoding::{MaskSpec, MaskStrategy, SlotSequence};
pub use metrics::JsdReport;
pub use model::{LayerGroup, ModelConfig, ModelParams};
