//! Modality merging and the all-MLP decode head.

use rand::Rng;

use crate::autodiff::{Mode, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{impl_parameterized, set_trainable, Ctx, Linear};
use crate::tensor::{seeded_rng, Tensor};

/// Fan-in scaled truncated normal, used for the trainable head layers.
fn head_linear(input: usize, output: usize, rng: &mut impl Rng) -> Linear {
    Linear::new(input, output, 1.0 / (input as f64).sqrt(), rng)
}

/// Per-stage fusion module: concat(M maps) -> linear -> GELU -> linear.
#[derive(Clone, Debug, PartialEq)]
pub struct FfmStage {
    pub reduce: Linear,
    pub out: Linear,
}

impl_parameterized!(FfmStage { reduce, out });

impl FfmStage {
    pub fn new(modalities: usize, dim: usize, rng: &mut impl Rng) -> Self {
        FfmStage {
            reduce: head_linear(modalities * dim, dim, rng),
            out: head_linear(dim, dim, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ffm {
    pub stages: Vec<FfmStage>,
}

impl_parameterized!(Ffm { stages });

impl Ffm {
    pub fn new(modalities: usize, dims: &[usize], seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut ffm = Ffm {
            stages: dims.iter().map(|&d| FfmStage::new(modalities, d, &mut rng)).collect(),
        };
        set_trainable(&mut ffm, true);
        ffm
    }
}

/// Merges one stage's per-modality maps: element-wise mean without a fusion
/// module, otherwise channel concat followed by the module's two layers.
pub fn modal_merge<'a>(ctx: &mut Ctx<'a>, maps: &[FeatureMap], ffm: Option<&'a FfmStage>) -> Result<FeatureMap> {
    let first = *maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge of zero modalities".into()))?;
    for map in &maps[1..] {
        if ctx.tape.shape(map.var) != ctx.tape.shape(first.var) {
            return Err(Error::shape("modal_merge", ctx.tape.shape(first.var), ctx.tape.shape(map.var)));
        }
    }
    let vars: Vec<Var> = maps.iter().map(|m| m.var).collect();
    let var = match ffm {
        None if maps.len() == 1 => first.var,
        None => {
            let total = ctx.tape.sum_all(&vars)?;
            ctx.tape.scale(total, 1.0 / maps.len() as f64)
        }
        Some(stage) => {
            let expected = stage.reduce.input_dim();
            if expected != first.channels * maps.len() {
                return Err(Error::shape("ffm", &[first.channels * maps.len()], &[expected]));
            }
            let cat = ctx.tape.concat_cols(&vars)?;
            let h = stage.reduce.forward(ctx, cat)?;
            let h = ctx.tape.gelu(h);
            stage.out.forward(ctx, h)?
        }
    };
    Ok(FeatureMap { var, ..first })
}

/// Projects each stage to a common width, upsamples to the finest stage,
/// fuses and classifies.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub stage_proj: Vec<Linear>,
    pub fuse: Linear,
    pub classifier: Linear,
}

impl_parameterized!(Decoder { stage_proj, fuse, classifier });

impl Decoder {
    pub fn new(dims: &[usize], width: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let stage_proj = dims.iter().map(|&d| head_linear(d, width, &mut rng)).collect();
        let fuse = head_linear(dims.len() * width, width, &mut rng);
        let classifier = head_linear(width, num_classes, &mut rng);
        let mut decoder = Decoder { stage_proj, fuse, classifier };
        set_trainable(&mut decoder, true);
        decoder
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Returns channel-major logits `[K x H1 x W1]` at the first stage's
    /// resolution.
    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, pyramid: &[FeatureMap]) -> Result<Var> {
        if pyramid.len() != self.stage_proj.len() {
            return Err(Error::InvalidArgument(format!(
                "decoder expects {} stages, got {}",
                self.stage_proj.len(),
                pyramid.len()
            )));
        }
        let (h1, w1) = (pyramid[0].height, pyramid[0].width);
        let width = self.fuse.output_dim();
        let mut upsampled = Vec::with_capacity(pyramid.len());
        for (map, proj) in pyramid.iter().zip(&self.stage_proj) {
            if map.channels != proj.input_dim() || map.height > h1 || map.width > w1 {
                return Err(Error::shape(
                    "decoder",
                    &[map.channels, map.height, map.width],
                    &[proj.input_dim(), h1, w1],
                ));
            }
            let p = proj.forward(ctx, map.var)?;
            let p = ctx.tape.transpose(p)?;
            let p = ctx.tape.reshape(p, vec![width, map.height, map.width])?;
            let p = ctx.tape.upsample_bilinear(p, h1, w1)?;
            upsampled.push(ctx.tape.reshape(p, vec![width, h1 * w1])?);
        }
        let cat = ctx.tape.concat_rows(&upsampled)?;
        let tokens = ctx.tape.transpose(cat)?;
        let fused = self.fuse.forward(ctx, tokens)?;
        let fused = ctx.tape.gelu(fused);
        let logits = self.classifier.forward(ctx, fused)?;
        let logits = ctx.tape.transpose(logits)?;
        ctx.tape.reshape(logits, vec![self.num_classes(), h1, w1])
    }
}

/// Bilinear upsampling of a `[C x H x W]` tensor (half-pixel centers).
pub fn upsample_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let mut ctx = Ctx::new(Mode::Eval, 0);
    let v = ctx.tape.input(x.clone().requiring_grad(false));
    let y = ctx.tape.upsample_bilinear(v, height, width)?;
    Ok(ctx.tape.tensor(y))
}

/// Per-pixel argmax over the leading class axis; ties go to the lowest class.
pub fn argmax_classes(logits: &[f64], num_classes: usize) -> Vec<u16> {
    let pixels = logits.len() / num_classes;
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..num_classes {
                if logits[c * pixels + p] > logits[best * pixels + p] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_parameters, ParamCheckOptions};
    use crate::nn::Parameterized;

    fn map(ctx: &mut Ctx, data: Tensor, h: usize, w: usize) -> FeatureMap {
        let channels = data.shape()[1];
        let var = ctx.tape.input(data);
        FeatureMap { var, height: h, width: w, channels }
    }

    #[test]
    fn mean_merge_identities() {
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut seeded_rng(0));
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let a = map(&mut ctx, x.clone(), 2, 2);
        let one = modal_merge(&mut ctx, &[a], None).unwrap();
        assert_eq!(ctx.tape.value(one.var), x.data());
        let b = map(&mut ctx, x.clone(), 2, 2);
        let two = modal_merge(&mut ctx, &[a, b], None).unwrap();
        assert_eq!(ctx.tape.value(two.var), x.data());
        let c = map(&mut ctx, Tensor::zeros(&[4, 2]), 2, 2);
        assert!(modal_merge(&mut ctx, &[a, c], None).is_err());
    }

    #[test]
    fn mean_merge_is_permutation_invariant() {
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let maps: Vec<_> = (0..3)
            .map(|s| map(&mut ctx, Tensor::uniform(&[4, 3], -1.0, 1.0, &mut seeded_rng(s)), 2, 2))
            .collect();
        let abc = modal_merge(&mut ctx, &maps, None).unwrap();
        let cba = modal_merge(&mut ctx, &[maps[2], maps[1], maps[0]], None).unwrap();
        let (p, q) = (ctx.tape.value(abc.var), ctx.tape.value(cba.var));
        assert!(p.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn zero_ffm_gives_zero_map() {
        let mut ffm = FfmStage::new(2, 3, &mut seeded_rng(0));
        ffm.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let a = map(&mut ctx, Tensor::uniform(&[4, 3], -1.0, 1.0, &mut seeded_rng(1)), 2, 2);
        let b = map(&mut ctx, Tensor::uniform(&[4, 3], -1.0, 1.0, &mut seeded_rng(2)), 2, 2);
        let out = modal_merge(&mut ctx, &[a, b], Some(&ffm)).unwrap();
        assert_eq!(ctx.tape.shape(out.var), &[4, 3]);
        assert!(ctx.tape.value(out.var).iter().all(|v| *v == 0.0));
    }

    struct FfmHarness {
        stage: FfmStage,
    }
    impl_parameterized!(FfmHarness { stage });

    #[test]
    fn ffm_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut h = FfmHarness { stage: FfmStage::new(2, 4, &mut seeded_rng(seed)) };
            set_trainable(&mut h, true);
            let xa = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut seeded_rng(seed + 20));
            let xb = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut seeded_rng(seed + 40));
            let report = check_parameters(
                &mut h,
                |m, ctx| {
                    let a = map(ctx, xa.clone(), 2, 3);
                    let b = map(ctx, xb.clone(), 2, 3);
                    let out = modal_merge(ctx, &[a, b], Some(&m.stage))?;
                    let sq = ctx.tape.mul(out.var, out.var)?;
                    Ok(ctx.tape.sum(sq))
                },
                ParamCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    fn toy_pyramid(ctx: &mut Ctx, dims: &[usize], seed: u64) -> Vec<FeatureMap> {
        let sizes = [(4, 4), (2, 2), (1, 1), (1, 1)];
        dims.iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (&d, (h, w)))| {
                let t = Tensor::uniform(&[h * w, d], -1.0, 1.0, &mut seeded_rng(seed + i as u64));
                map(ctx, t, h, w)
            })
            .collect()
    }

    #[test]
    fn decoder_output_matches_first_stage() {
        let dims = [4, 6, 8, 8];
        let dec = Decoder::new(&dims, 5, 3, 0);
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let pyramid = toy_pyramid(&mut ctx, &dims, 1);
        let logits = dec.forward(&mut ctx, &pyramid).unwrap();
        assert_eq!(ctx.tape.shape(logits), &[3, 4, 4]);
        assert!(dec.forward(&mut ctx, &pyramid[..3]).is_err());
    }

    #[test]
    fn zero_classifier_ties_to_class_zero() {
        let dims = [4, 6, 8, 8];
        let mut dec = Decoder::new(&dims, 5, 3, 0);
        dec.classifier = Linear::zeros(5, 3);
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let pyramid = toy_pyramid(&mut ctx, &dims, 1);
        let logits = dec.forward(&mut ctx, &pyramid).unwrap();
        let values = ctx.tape.value(logits);
        assert!(values.iter().all(|v| *v == values[0]));
        assert!(argmax_classes(values, 3).iter().all(|&c| c == 0));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        // two pixels, three classes, channel-major
        let logits = [1.0, 0.0, 2.0, 5.0, 2.0, 5.0];
        assert_eq!(argmax_classes(&logits, 3), vec![1, 1]);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let dims = [3, 4, 5, 5];
        let mut dec = Decoder::new(&dims, 4, 3, 2);
        let labels: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
        let inputs: Vec<Tensor> = [(4, 4), (2, 2), (1, 1), (1, 1)]
            .iter()
            .zip(&dims)
            .enumerate()
            .map(|(i, (&(h, w), &d))| Tensor::uniform(&[h * w, d], -1.0, 1.0, &mut seeded_rng(i as u64)))
            .collect();
        let report = check_parameters(
            &mut dec,
            |m, ctx| {
                let sizes = [(4, 4), (2, 2), (1, 1), (1, 1)];
                let pyramid: Vec<FeatureMap> =
                    inputs.iter().zip(sizes).map(|(t, (h, w))| map(ctx, t.clone(), h, w)).collect();
                let logits = m.forward(ctx, &pyramid)?;
                let up = ctx.tape.upsample_bilinear(logits, 8, 8)?;
                ctx.tape.cross_entropy(up, &labels, 255)
            },
            ParamCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn upsample_helper_rejects_shrinking() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(upsample_bilinear(&x, 2, 4).is_err());
        assert_eq!(upsample_bilinear(&x, 8, 8).unwrap().shape(), &[1, 8, 8]);
    }
}
