//! Dense f64 kernel shared by every other module.

pub mod gradcheck;
pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use linalg::{psd_sqrt, psd_sqrt_checked};
pub use mlp::{
    input_vjp, lora_forward, mlp_backward, mlp_forward, Activation, Linear, LoraAdapter, Mlp,
    MlpCache, MlpGrads, ParamScope,
};
pub use optim::{adamw_step, ema_update, lr_at_step, AdamWConfig, AdamWState, EmaState, LrSchedule};
pub use rng::{seeded, Rng};
pub use tensor::Tensor;
