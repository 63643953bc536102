//! Test support for lorasharp: reference implementations that share no code
//! with the library's decomposition path, and seeded generators for matrices
//! and adapter checkpoints.
//!
//! All randomness comes from ChaCha8 (a counter-based stream cipher
//! generator) seeded with a `u64`, so every fixture is reproducible across
//! platforms.

pub mod adapter;
pub mod oracle;
pub mod raw;
pub mod synth;

pub use adapter::{
    geometric_profile, profile_with_ssi, synth_adapter, write_adapter, AdapterSpec,
    SyntheticAdapter,
};
pub use oracle::{oracle_full_svd, weighted_median_oracle, OracleError};
pub use raw::{raw_delta_w, raw_header, read_raw, RawTensor};
pub use synth::{
    mean_abs_cosine, random_orthonormal, synth_matrix, synthesize, Synthetic, SyntheticSpec,
};
