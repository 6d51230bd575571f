//! The latent diffusion core: noise schedule, forward process, UNet input
//! assembly, global garment tokens, the x0-predicting UNet and its losses.
pub mod conditions;
pub mod input;
pub mod losses;
pub mod model;
pub mod schedule;
pub mod tokens;
pub mod training;
pub mod unet;

pub use conditions::{prepare_conditions, Conditions, TryOnQuery};
pub use input::{build_denoising_input, Branch, DenoisingInput};
pub use losses::{consistency_loss, diffusion_loss, tryon_loss, DEFAULT_LAMBDA_CONS};
pub use model::{DiffusionArch, DiffusionModel, DiffusionModules};
pub use schedule::{forward_diffuse, forward_diffuse_batch, make_schedule, NoiseSchedule, ScheduleKind};
pub use tokens::{global_encode, GlobalTokens, TokenArch, TokenProjection};
pub use training::{train_diffusion, AblationFlags, DiffusionConfig, DiffusionReport, FreezeAudit};
pub use unet::{UNet, UNetArch};
