//! petition-core: the allocation-only heart of the image-petition pipeline.
//!
//! Everything in this crate is a pure function of its inputs. It performs no
//! file, network, or clock access; the `petition` crate layers IO, the HTTP
//! service, the benchmark harness and the CLI on top.
//!
//! Modules:
//!
//! - [`imaging`]: raster standardization, normalization, blur, augmentation.
//! - [`corpus`]: procedural urban-issue scenes, apportionment, splits.
//! - [`regions`]: saliency proposals, IoU, non-maximum suppression.
//! - [`model`]: a small convolutional classifier with exact backprop.
//! - [`metrics`]: confusion matrices and per-class reports.
//! - [`workflow`]: case lifecycle, triage, dispatch reports, messages.
//! - [`bench`]: latency aggregation, arrival schedules, the demand model.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod bench;
pub mod corpus;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod regions;
pub mod workflow;

pub use corpus::{GroundTruthRegion, IssueClass, SceneConditions};
pub use imaging::{RasterImage, ValueDomain};
pub use model::{NetworkSpec, Parameters, Prediction};
pub use regions::{BoundingBox, RegionProposal};
