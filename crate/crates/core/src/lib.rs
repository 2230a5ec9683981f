//! Flow-guided warping and combination of intermediate CNN representations
//! across adjacent video frames, with the tooling to train and evaluate it
//! on synthetic video.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod flow_source;
pub mod flowcnn;
pub mod gradcheck;
pub mod labels;
pub mod metrics;
pub mod netwarp;
pub mod ops;
pub mod params;
pub mod segnet;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use flow::FlowField;
pub use labels::LabelMap;
pub use netwarp::{CombineWeights, NetWarpSpec, VideoSegModel};
pub use params::{Adam, AdamConfig, ParamSet};
pub use segnet::{SegNet, SegNetConfig};
pub use tape::{Graph, Var};
pub use tensor::{Real, Shape, Tensor};
pub use warp::WarpConfig;
