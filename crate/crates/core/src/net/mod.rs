//! Generator and discriminator networks.

pub mod discriminator;
pub mod generator;
pub mod params;

pub use discriminator::{d_forward_multiscale, discriminator_layout, Discriminator, DiscriminatorConfig};
pub use generator::{
    compute_base_mask, decompose_input, generator_forward, generator_layout, propagate_mask, reconstruct_nodes,
    refine_level, translate_low, Generator, GeneratorConfig, GeneratorOutput, InitScheme,
};
pub use params::{Bound, Fill, ParamSet, ParamSpec};
