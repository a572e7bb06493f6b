//! Desk-scale split LoRA federated fine-tuning.

pub mod data;
pub mod model;
pub mod training;

pub use data::{Dataset, DeviceDataset, GaussianMixture};
pub use model::{
    aggregate_adapter_grads, apply_updates, device_gradient, forward_round, global_loss,
    global_loss_on, local_gradients, mean_accuracy_on, mean_test_accuracy, payload_bits,
    DeviceForward, DeviceGradient, EvalSet, LocalGradients, LowRankAdapter, ModelConfig,
    SplitModel, TaskHead,
};
pub use training::{run_training, RoundTrace, RunSpec, Trainer};
