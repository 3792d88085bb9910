//! Detector assembly, decoding and accounting.

mod checkpoint;
mod decode;
mod net;
mod scale;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CHECKPOINT_VERSION, MANIFEST_FILE, WEIGHTS_FILE,
};
pub use decode::{box_iou, decode, decode_cell, nms, Detection};
pub use net::{
    Arch, Backbone, ForwardResult, HeadLevel, HeadMaps, Model, Neck, Outputs, CLS_PRIOR, REG_INIT,
    STRIDES,
};
pub use scale::{ModelConfig, ScaleSpec, BASE_CHANNELS, BASE_REPEATS};
