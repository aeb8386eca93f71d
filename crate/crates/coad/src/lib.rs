//! Planogram-free anomaly detection for retail shelf rows.
//!
//! A disentangled ViT auto-encoder learns separate *color* and *content*
//! concept embeddings for product crops (optionally organized around the
//! four subbands of a single-level 2-D Haar wavelet transform). Per-object
//! feature vectors pooled from those embeddings are compared within one
//! shelf row; the odd one out is flagged either by an IQR boxplot rule on
//! pairwise-distance sums or by two-cluster agglomerative clustering — no
//! planogram or product database required.
//!
//! Module map:
//!
//! * [`wavelet`] — exact, invertible single-level 2-D Haar DWT/IDWT.
//! * [`object_image`] — validated RGB crops in channel-first float layout.
//! * [`model`] — the ViT-CM-DWT / ViT-CM auto-encoders, the ViT-AE
//!   baseline, alternating two-phase training and checkpointing.
//! * [`embed`] — pooled per-object feature vectors with color/content/both
//!   selection and an optional on-disk cache.
//! * [`detector`] — pairwise distances, boxplot outlier rule and Ward
//!   2-cluster rule over one row.
//! * [`eval`] — manifest-driven datasets, seeded evaluation sets, the
//!   detector grid with success-rate reports, a bundled synthetic dataset
//!   generator, and a pretrained-backbone baseline.
//! * [`error`] — the crate-wide error type.

pub mod detector;
pub mod embed;
pub mod error;
pub mod eval;
pub mod model;
pub mod object_image;
pub mod wavelet;

pub use error::{Error, Result};
