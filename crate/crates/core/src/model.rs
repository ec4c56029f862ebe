//! The full segmentation model: one frozen encoder per modality, optional
//! adapter bank stitching them, optional fusion module, and the decoder.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Var};
use crate::encoder::{image_tokens, Encoder, EncoderConfig, FeatureMap, TransformerBlock};
use crate::error::{Error, Result};
use crate::head::{argmax_classes, modal_merge, Decoder, Ffm};
use crate::nn::{impl_parameterized, Ctx, Parameterized};
use crate::stitch::{stitch_block_forward, AdapterBank, DensityConfig, DEFAULT_ADAPTER_DROPOUT, DEFAULT_BOTTLENECK};
use crate::tensor::{derive_seed, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchConfig {
    pub density: DensityConfig,
    pub bottleneck: usize,
    pub adapter_dropout: f64,
}

impl StitchConfig {
    pub fn new(density: DensityConfig) -> Self {
        StitchConfig {
            density,
            bottleneck: DEFAULT_BOTTLENECK,
            adapter_dropout: DEFAULT_ADAPTER_DROPOUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub modalities: Vec<ModalitySpec>,
    /// `None` runs the encoders independently (no adapters).
    pub stitch: Option<StitchConfig>,
    pub ffm: bool,
    pub decoder_dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let names: BTreeSet<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        if names.len() != self.modalities.len() {
            return Err(Error::Config("modality names must be unique".into()));
        }
        if self.modalities.iter().any(|m| m.channels == 0 || m.name.is_empty()) {
            return Err(Error::Config("modalities need a name and a positive channel count".into()));
        }
        if let Some(stitch) = &self.stitch {
            if self.modalities.len() < 2 {
                return Err(Error::Config(format!(
                    "stitching needs at least two modalities, got {}",
                    self.modalities.len()
                )));
            }
            stitch.density.validate(self.encoder.num_stages())?;
            if stitch.bottleneck == 0 {
                return Err(Error::Config("adapter bottleneck r must be at least 1".into()));
            }
            if !(0.0..1.0).contains(&stitch.adapter_dropout) {
                return Err(Error::Config("adapter dropout must lie in [0, 1)".into()));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.decoder_dim == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StitchModel {
    pub encoders: Vec<Encoder>,
    pub adapters: Option<AdapterBank>,
    pub ffm: Option<Ffm>,
    pub decoder: Decoder,
    config: ModelConfig,
}

impl_parameterized!(StitchModel { encoders, adapters, ffm, decoder });

impl StitchModel {
    /// Builds a model whose encoders are frozen and whose adapters, fusion
    /// module and decoder are trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = config.num_modalities();
        let encoders = config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, spec)| Encoder::new(&config.encoder, spec.channels, derive_seed(seed, 1000 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let adapters = config
            .stitch
            .as_ref()
            .map(|s| {
                AdapterBank::build(m, &config.encoder, &s.density, s.bottleneck, s.adapter_dropout, derive_seed(seed, 1))
            })
            .transpose()?;
        let ffm = config.ffm.then(|| Ffm::new(m, &config.encoder.dims, derive_seed(seed, 2)));
        let decoder = Decoder::new(&config.encoder.dims, config.decoder_dim, config.num_classes, derive_seed(seed, 3));
        Ok(StitchModel { encoders, adapters, ffm, decoder, config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_images(&self, images: &[&Tensor]) -> Result<(usize, usize)> {
        if images.len() != self.encoders.len() {
            return Err(Error::InvalidArgument(format!(
                "model has {} modalities, got {} images",
                self.encoders.len(),
                images.len()
            )));
        }
        let (h, w) = (images[0].shape()[1], images[0].shape()[2]);
        for (enc, img) in self.encoders.iter().zip(images) {
            enc.check_input(img)?;
            if img.shape()[1..] != [h, w] {
                return Err(Error::shape("modalities", images[0].shape(), img.shape()));
            }
        }
        Ok((h, w))
    }

    /// Encoders without any cross-modal exchange.
    pub fn encode_independent<'a>(&'a self, ctx: &mut Ctx<'a>, images: &[&Tensor]) -> Result<Vec<Vec<FeatureMap>>> {
        self.check_images(images)?;
        self.encoders
            .iter()
            .zip(images)
            .map(|(enc, img)| enc.forward(ctx, img))
            .collect()
    }

    /// Per modality, per stage feature maps. Stages without adapters run the
    /// plain blocks; stitched stages exchange features at every block.
    pub fn stitched_encode<'a>(&'a self, ctx: &mut Ctx<'a>, images: &[&Tensor]) -> Result<Vec<Vec<FeatureMap>>> {
        self.check_images(images)?;
        let m = self.encoders.len();
        let mut maps = images
            .iter()
            .map(|img| image_tokens(ctx, img))
            .collect::<Result<Vec<_>>>()?;
        let mut pyramids: Vec<Vec<FeatureMap>> = vec![Vec::new(); m];
        for s in 0..self.config.encoder.num_stages() {
            for (map, enc) in maps.iter_mut().zip(&self.encoders) {
                *map = enc.stages[s].patch_embed.forward(ctx, map)?;
            }
            let (h, w) = (maps[0].height, maps[0].width);
            let bank = self.adapters.as_ref().filter(|b| b.is_stage_active(s));
            for b in 0..self.config.encoder.depths[s] {
                let blocks: Vec<&TransformerBlock> = self.encoders.iter().map(|e| &e.stages[s].blocks[b]).collect();
                match bank {
                    Some(bank) => {
                        let xs: Vec<Var> = maps.iter().map(|x| x.var).collect();
                        let out = stitch_block_forward(ctx, &blocks, bank, s, b, &xs, h, w)?;
                        for (map, v) in maps.iter_mut().zip(out) {
                            map.var = v;
                        }
                    }
                    None => {
                        for (map, block) in maps.iter_mut().zip(&blocks) {
                            map.var = block.forward(ctx, map.var, h, w)?.z_mlp;
                        }
                    }
                }
            }
            for ((map, enc), pyramid) in maps.iter_mut().zip(&self.encoders).zip(&mut pyramids) {
                map.var = enc.stages[s].norm.forward(ctx, map.var)?;
                pyramid.push(*map);
            }
        }
        Ok(pyramids)
    }

    /// Logits `[K x H/4 x W/4]` (first-stage resolution).
    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, images: &[&Tensor]) -> Result<Var> {
        let pyramids = self.stitched_encode(ctx, images)?;
        let num_stages = self.config.encoder.num_stages();
        let mut merged = Vec::with_capacity(num_stages);
        for s in 0..num_stages {
            let maps: Vec<FeatureMap> = pyramids.iter().map(|p| p[s]).collect();
            let ffm = self.ffm.as_ref().map(|f| &f.stages[s]);
            merged.push(modal_merge(ctx, &maps, ffm)?);
        }
        self.decoder.forward(ctx, &merged)
    }

    /// Logits bilinearly resized to the input resolution.
    pub fn full_logits<'a>(&'a self, ctx: &mut Ctx<'a>, images: &[&Tensor]) -> Result<Var> {
        let (h, w) = self.check_images(images)?;
        let logits = self.forward(ctx, images)?;
        ctx.tape.upsample_bilinear(logits, h, w)
    }

    pub fn loss<'a>(&'a self, ctx: &mut Ctx<'a>, images: &[&Tensor], labels: &[u16], ignore_index: u16) -> Result<Var> {
        let logits = self.full_logits(ctx, images)?;
        ctx.tape.cross_entropy(logits, labels, ignore_index)
    }

    /// Eval-mode class map at input resolution.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<u16>> {
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let logits = self.full_logits(&mut ctx, images)?;
        Ok(argmax_classes(ctx.tape.value(logits), self.num_classes()))
    }

    /// Copies every parameter buffer from `other`, matched by name and shape.
    pub fn copy_params_from(&mut self, other: &StitchModel) -> Result<()> {
        let source: std::collections::BTreeMap<String, Tensor> = crate::nn::named_params(other)
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut missing = None;
        self.visit_mut("", &mut |name, t| match source.get(name) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            _ => missing = Some(name.to_string()),
        });
        match missing {
            Some(name) => Err(Error::InvalidArgument(format!("no matching source parameter for {name}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::stitch::DensityVariant;
    use crate::tensor::seeded_rng;

    pub(crate) fn tiny_config(m: usize, stitch: Option<DensityConfig>, ffm: bool) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            modalities: (0..m)
                .map(|i| ModalitySpec { name: format!("m{i}"), channels: 3 })
                .collect(),
            stitch: stitch.map(StitchConfig::new),
            ffm,
            decoder_dim: 16,
            num_classes: 5,
        }
    }

    fn images(m: usize, seed: u64) -> Vec<Tensor> {
        (0..m)
            .map(|i| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut seeded_rng(seed + i as u64)))
            .collect()
    }

    #[test]
    fn config_validation() {
        let density = DensityConfig::new(DensityVariant::Shared, [3, 4]);
        assert!(tiny_config(1, Some(density.clone()), false).validate().is_err());
        assert!(tiny_config(1, None, false).validate().is_ok());
        let mut dup = tiny_config(2, Some(density), false);
        dup.modalities[1].name = "m0".into();
        assert!(dup.validate().is_err());
    }

    #[test]
    fn logits_have_quarter_resolution() {
        let model = StitchModel::new(tiny_config(2, Some(DensityConfig::new(DensityVariant::PairBidirectional, [3, 4])), true), 0).unwrap();
        let imgs = images(2, 1);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let logits = model.forward(&mut ctx, &refs).unwrap();
        assert_eq!(ctx.tape.shape(logits), &[5, 8, 8]);
        assert_eq!(model.predict(&refs).unwrap().len(), 32 * 32);
    }

    #[test]
    fn mismatched_modalities_are_rejected() {
        let model = StitchModel::new(tiny_config(2, None, false), 0).unwrap();
        let a = Tensor::zeros(&[3, 32, 32]);
        let b = Tensor::zeros(&[3, 64, 64]);
        let mut ctx = Ctx::new(Mode::Eval, 0);
        assert!(model.forward(&mut ctx, &[&a, &b]).is_err());
        assert!(model.forward(&mut ctx, &[&a]).is_err());
    }

    #[test]
    fn only_heads_and_adapters_are_trainable() {
        let model = StitchModel::new(tiny_config(2, Some(DensityConfig::new(DensityVariant::Shared, [4])), true), 0).unwrap();
        for (name, t) in crate::nn::named_params(&model) {
            assert_eq!(t.requires_grad(), !name.starts_with("encoders."), "{name}");
        }
    }
}
