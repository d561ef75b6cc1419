//! The universal vision transformer and its nested subnetworks.

mod config;
mod extract;
mod forward;
mod init;
mod params;

pub use config::{ModelConfig, SubnetworkView};
pub use extract::{extract_subnetwork, warm_start_from_subnetwork};
pub use forward::{
    attention_forward, bind_params, forward, forward_on_tape, patchify, self_attention, take_grads, BoundParams,
    ForwardOutput,
};
pub use init::{init_weights, truncated_normal, INIT_STD};
pub use params::{Block, Classifier, Linear, Norm, ParamInfo, ParamKind, Params, SliceSpec, Slicing, UniversalWeights};
