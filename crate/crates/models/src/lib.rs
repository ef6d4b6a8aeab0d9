//! Vector-pixel fusion VAE over SVG command matrices and the latent
//! diffusion transformer that generates its latents from text.

pub mod checks;
pub mod config;
pub mod data;
pub mod dit;
pub mod error;
pub mod vae;

pub use config::{load_config, DitConfig, LossSpace, OptimConfig, VaeConfig};
pub use data::{build_stages, load_examples, read_manifest, Example, FeatureSource, StageInput};
pub use dit::{
    cfg_noise, check_compatible, encode_latents, q_sample, text_to_svg, train_dit, DitTraceRow,
    NoiseSchedule, SampleTrace, VsDit,
};
pub use error::ModelError;
pub use vae::{
    train_vae, vae_loss, write_trace_csv, EvalReport, LatentCode, TraceRow, TrainOptions, VpVae,
};
