//! Network families and their building blocks.

mod checkpoint;
mod layers;
mod model;
mod spec;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{
    build_conv_block, build_residual_block, Binding, Fragment, FragmentOutput, Param, ParamKind, ParamStore, Stage,
    TraceEvent,
};
pub use model::{build_fcn, build_resunet, build_segnet, build_unet, ForwardOptions, ForwardPass, Model};
pub use spec::{ArchitectureSpec, Family, FcnStride, FCN_STAGES};
