//! CPU object detection for shallow Darknet-style YOLO networks.
//!
//! The crate covers the whole path from a Darknet `.cfg`/`.weights` pair to
//! scored detections, plus the tooling used to study small networks: FLOPS
//! and parameter accounting, batch-norm folding, magnitude pruning, latency
//! benchmarking, a region loss with analytic gradients, a toy trainer over
//! synthetic shapes, and PASCAL-style mAP evaluation.
//!
//! ```
//! use yolite::{analysis, model};
//!
//! let lite = model::catalog_yolo_lite(true);
//! let tiny = model::catalog_tiny_yolov2(false);
//! assert_eq!(analysis::count_filters(&lite), 749);
//! let ratio = analysis::flops(&tiny).unwrap().total as f64
//!     / analysis::flops(&lite).unwrap().total as f64;
//! assert!(ratio > 14.0);
//! ```

pub mod analysis;
pub mod bench;
pub mod darknet;
pub mod dataset;
pub mod detect;
pub mod eval;
pub mod image;
pub mod inference;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use detect::{BBox, Detection};
pub use inference::{compile, CompiledNetwork, Workspace};
pub use loss::{GroundTruthBox, LossConfig};
pub use model::{LayerSpec, NetworkSpec, Shape};
pub use tensor::{Precision, Scalar, Tensor};
