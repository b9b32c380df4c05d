//! Turning frames and detections into aligned spatial and temporal frame groups.

pub mod cache;
pub mod crop;
pub mod detections;
pub mod flow;
pub mod frames;
pub mod group;
pub mod resample;

pub use crop::{crop_flow, crop_frame, Crop};
pub use detections::{load_detections, DetectionMap};
pub use flow::{compute_flow, read_flow_file, write_flow_file, FlowField, HornSchunck};
pub use frames::{extract_frames, Frame};
pub use group::{frame_seed, group_and_pad};
