//! Architecture description and the assembled encoder/decoder parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::ModelParams;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_features: usize,
    pub n_events: usize,
    /// ODE-RNN hidden size `H`.
    pub hidden_dim: usize,
    /// Latent size `L`, shared by `z₀` and the trajectory.
    pub latent_dim: usize,
    pub encoder_field_width: usize,
    pub decoder_field_width: usize,
    pub posterior_head_width: usize,
    /// Width of both layers of each cause-specific module.
    pub cause_width: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_features,
            self.n_events,
            self.hidden_dim,
            self.latent_dim,
            self.encoder_field_width,
            self.decoder_field_width,
            self.posterior_head_width,
            self.cause_width,
        ];
        if dims.contains(&0) {
            return Err(Error::Validation("all architecture sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ModelParams,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let encoder = Encoder::new(&mut params, &arch, &mut rng);
        let decoder = Decoder::new(&mut params, &arch, &mut rng);
        Ok(Self {
            arch,
            params,
            encoder,
            decoder,
        })
    }
}
