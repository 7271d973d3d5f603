//! Network assembly, initialisation, whole-network passes, structural
//! transfer between tasks and checkpoint persistence.

mod checkpoint;
mod network;
mod params;
mod spec;
mod transfer;

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use network::{
    backward_item, evaluate, forward_item, forward_network, loss, loss_and_grad, one_hot, Batch,
    EvalMetrics, ItemPass, LossBreakdown, NetworkOutput, PriorTerm,
};
pub use params::{bitwise_eq, glorot_bound, init_params, ParamAddr, ParamKind, ParamSet};
pub use spec::{NetworkSpec, Plan, Task};
pub use transfer::{build_cae_from_cnn, build_cnn_from_cae, build_mt_from_cnn, with_task};
