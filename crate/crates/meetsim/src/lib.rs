//! meetsim simulates a four-participant, five-block meeting session on
//! heterogeneous virtual devices whose clocks drift independently, recovers
//! cross-device alignment from redundant timing anchors, validates the
//! recovery against the simulation's ground truth, and packages everything
//! into a BIDS-oriented session tree with an authoritative event spine,
//! content-hashed manifests, and fail-loud QC reports.
//!
//! The crate is a library first; see the `examples/` directory for one
//! runnable example per capability:
//!
//! - `build_scenario` - the default protocol and its event spine
//! - `prompt_schedule` - event-contingent self-report prompt scheduling
//! - `simulate_devices` - drifting clocks, streams, anchors
//! - `recover_clocks` - fitting clock models and validating them
//! - `robust_fitting` - Theil-Sen vs least squares under anchor outliers
//! - `package_session` - writing, verifying and re-reading a session tree
//! - `quality_control` - gap detection, audio levels, fail-loud summary
//! - `end_to_end` - the whole pipeline in one call
//!
//! A thin `meetsim` binary wraps the same pipeline behind `simulate`,
//! `align`, `package`, `slice`, `qc`, `run` and `verify` subcommands.

// `!(x > 0.0)` is how this crate rejects NaN along with non-positive values
// in validation code.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod packager;
pub mod pipeline;
pub mod qc;
pub mod scenario;
pub mod simdev;
pub mod syncfit;
pub mod timeline;

mod jsonio;
mod tsv;
mod wav;

pub use jsonio::to_canonical_json;
pub use tsv::{fmt_seconds, quantize_seconds};
pub use wav::{read_pcm, read_wav_mono16, write_wav_mono16};
