//! Tiny vision transformer with frozen base weights and additive
//! low-resolution token banks trained by teacher/student distillation.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod loss;
pub mod params;
pub mod synth;
pub mod tokens;
pub mod train;
pub mod vpt;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
pub use config::TinyViTConfig;
pub use forward::{forward, vpt_forward, Forward, InputGrads};
pub use loss::{contrastive_distill_loss, contrastive_distill_loss_grad, DEFAULT_TEMPERATURE};
pub use params::BaseParameters;
pub use tokens::LRTokenBank;
pub use train::{teacher_features, 
    mean_cosine, sample_multiscale, token_gradients, train, train_step, BucketSpec, TrainBatch, TrainOptions,
};
pub use vpt::{vpt_loss_grad, vpt_train_step, vpt_zeros, VPT_TOKENS};

use crate::error::Result;
use crate::image::Image;
use crate::zeroshot::ImageEncoder;

/// The transformer as a zero-shot image encoder. Images of any size are
/// resized to the model input first.
#[derive(Debug, Clone)]
pub struct TinyVit {
    pub params: BaseParameters,
    pub tokens: Option<LRTokenBank>,
    pub start_block: usize,
}

impl ImageEncoder for TinyVit {
    fn encode_image(&self, img: &Image) -> Result<Vec<f32>> {
        let res = self.params.config.input_res;
        let resized;
        let input = if img.height() == res && img.width() == res {
            img
        } else {
            resized = crate::degrade::resize(img, res, res, false)?;
            &resized
        };
        let f = forward(&self.params, self.tokens.as_ref(), input, self.start_block)?;
        Ok(f.embedding.iter().map(|&v| v as f32).collect())
    }
}
