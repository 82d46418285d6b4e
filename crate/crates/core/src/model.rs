//! The full model bundle built from one [`RunConfig`], plus checkpoint
//! round-tripping. The perceptual feature pyramid carries no stored tensors;
//! it is rebuilt from the seed recorded in the config blob.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::FeaturePyramid;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diversity::MappingNetwork;
use crate::error::{Error, Result};
use crate::generator::{GeneratedSample, Generator};
use crate::mask::SemanticMask;
use crate::mask_embedder::{MaskEmbedder, MaskEmbedding};
use crate::nn::{Forward, ParamSet};
use crate::style_encoder::{StyleCodes, StyleEncoder};
use crate::tensor::Scalar;

pub struct Models<E: Scalar> {
    pub config: RunConfig,
    pub encoder: StyleEncoder<E>,
    pub embedder: MaskEmbedder<E>,
    pub generator: Generator<E>,
    pub pyramid: FeaturePyramid<E>,
    pub mapping: Option<MappingNetwork<E>>,
}

impl<E: Scalar> Models<E> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = StyleEncoder::new(config.encoder_config(), &mut rng)?;
        let embedder = MaskEmbedder::new(config.embedder_config(), &mut rng);
        let generator = Generator::new(config.generator_config(), &mut rng)?;
        let pyramid = FeaturePyramid::new(config.perceptual_seed);
        Ok(Models {
            config,
            encoder,
            embedder,
            generator,
            pyramid,
            mapping: None,
        })
    }

    /// Add a freshly initialized noise-to-style mapping network.
    pub fn with_mapping(mut self) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x6d61_7070));
        self.mapping = Some(MappingNetwork::new(self.config.mapping_config(), &mut rng)?);
        Ok(self)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.config.to_json());
        ckpt.add_model(&self.encoder);
        ckpt.add_model(&self.embedder);
        ckpt.add_model(&self.generator);
        if let Some(m) = &self.mapping {
            ckpt.add_model(m);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_json(&ckpt.config)?;
        let mut models = Models::new(config)?;
        ckpt.load_model(&mut models.encoder)?;
        ckpt.load_model(&mut models.embedder)?;
        ckpt.load_model(&mut models.generator)?;
        if ckpt.tensor("mapping.trunk0.weight").is_some() {
            models = models.with_mapping()?;
            ckpt.load_model(models.mapping.as_mut().unwrap())?;
        }
        Ok(models)
    }

    /// Inference-mode generation from explicit conditioning inputs.
    pub fn generate(
        &self,
        mask: &SemanticMask,
        styles: &StyleCodes<E>,
        embedding: Option<&MaskEmbedding<E>>,
    ) -> Result<GeneratedSample<E>> {
        let ctx = Forward::new(false);
        let styles_t = styles.to_tensor(&ctx.graph);
        let owned;
        let emb = if self.generator.cfg.embedded_seed {
            let e = match embedding {
                Some(e) => e,
                None => {
                    owned = self.embedder.embed_mask(mask)?;
                    &owned
                }
            };
            Some(e.to_tensor(&ctx.graph))
        } else {
            None
        };
        self.generator.forward(&ctx, &[mask], &styles_t, emb.as_ref())
    }

    /// Image values of one generated sample as f32 pixels.
    pub fn image_f32(sample: &GeneratedSample<E>) -> Vec<f32> {
        sample.image.value().iter().map(|v| v.into_f64() as f32).collect()
    }

    pub fn check_class_count(&self, mask: &SemanticMask) -> Result<()> {
        if mask.num_classes() != self.config.num_classes {
            return Err(Error::Config(format!(
                "mask has {} classes, model expects {}",
                mask.num_classes(),
                self.config.num_classes
            )));
        }
        Ok(())
    }
}

/// Combined parameter hash across the conditioning models and generator.
pub fn generator_hash<E: Scalar>(models: &Models<E>) -> u64 {
    // mixes the three sub-hashes; any bit flip in any parameter changes it
    let a = models.encoder.param_hash();
    let b = models.embedder.param_hash();
    let c = models.generator.param_hash();
    a.wrapping_mul(0x9E3779B97F4A7C15)
        ^ b.rotate_left(21)
        ^ c.rotate_left(42)
}
