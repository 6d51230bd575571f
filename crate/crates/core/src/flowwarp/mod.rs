//! Flow fields, thin-plate splines, the warping and flattening networks and their losses.
pub mod field;
pub mod losses;
pub mod net;
pub mod tps;
pub mod training;

pub use field::{apply_flow, compose_flows, endpoint_error, FlowField};
pub use losses::{
    aggregate_flat_loss, aggregate_warp_loss, flow_loss_components, second_order_smoothness, total_variation,
    FlatLossWeights, FlowLossComponents, LossWeights, WarpLossWeights,
};
pub use net::{
    flatten_network_forward, take_off, warp_network_forward, FlowNet, FlowNetArch, FlowRole, WarpOutput,
};
pub use tps::{tps_flow, Point, Tps};
pub use training::{
    evaluate_flatten, evaluate_warp, train_flow_network, FlattenEval, FlattenTrainConfig, FlowTrainConfig,
    FlowTrainReport, WarpEval, WarpTrainConfig,
};
