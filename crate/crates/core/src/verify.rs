//! Self-checks exposed through the CLI and the acceptance tests: the
//! two-modality density equivalence, zero-adapter transparency, and the
//! finite-difference gradient suite.

use rand::Rng;

use crate::autodiff::{Mode, PatchGeometry, Tape, Var};
use crate::encoder::{EncoderConfig, TransformerBlock};
use crate::error::Result;
use crate::gradcheck::{check_parameters, grad_check, GradReport, ParamCheckOptions, DEFAULT_STEP};
use crate::data::{generate_synthetic, SynthConfig};
use crate::model::{ModalitySpec, ModelConfig, StitchConfig, StitchModel};
use crate::train::{fit, TrainConfig};
use crate::nn::{impl_parameterized, set_trainable, Ctx, Parameterized};
use crate::stitch::{stitch_block_forward, AdapterBank, DensityConfig, DensityVariant, Route};
use crate::tensor::{derive_seed, seeded_rng, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn tiny_model_config(m: usize, density: DensityConfig, ffm: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::tiny(),
        modalities: (0..m)
            .map(|i| ModalitySpec { name: format!("m{i}"), channels: 3 })
            .collect(),
        stitch: Some(StitchConfig::new(density)),
        ffm,
        decoder_dim: 16,
        num_classes: 5,
    }
}

fn random_images(m: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = seeded_rng(seed);
    (0..m).map(|_| Tensor::uniform(&[3, size, size], 0.0, 1.0, &mut rng)).collect()
}

/// All stage outputs of all modalities followed by the logits.
fn stitched_outputs(model: &StitchModel, images: &[Tensor]) -> Result<Vec<Tensor>> {
    let refs: Vec<&Tensor> = images.iter().collect();
    let mut ctx = Ctx::new(Mode::Eval, 0);
    let pyramids = model.stitched_encode(&mut ctx, &refs)?;
    let mut out: Vec<Tensor> = pyramids.iter().flatten().map(|m| ctx.tape.tensor(m.var)).collect();
    let logits = model.forward(&mut ctx, &refs)?;
    out.push(ctx.tape.tensor(logits));
    Ok(out)
}

fn compare(a: &[Tensor], b: &[Tensor]) -> (bool, f64) {
    let identical = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y));
    let diff = a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    (identical, diff)
}

/// Copies the weights of `route_from` in `src` into `route_to` of `dst` at
/// every (stage, block, position).
fn copy_route(src: &AdapterBank, route_from: Route, dst: &mut AdapterBank, route_to: Route) {
    for (key, adapter) in src.iter() {
        if key.route != route_from {
            continue;
        }
        let target = crate::stitch::AdapterKey { route: route_to, ..*key };
        if let Some(slot) = dst.get_mut(&target) {
            *slot = adapter.clone();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub inputs: usize,
    pub shared_vs_pair_identical: bool,
    pub shared_vs_pair_max_diff: f64,
    pub tied_unidirectional_identical: bool,
    pub tied_unidirectional_max_diff: f64,
    /// Three modalities, independently drawn pair adapters vs one shared
    /// adapter: must differ.
    pub three_modal_max_diff: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.shared_vs_pair_identical && self.tied_unidirectional_identical && self.three_modal_max_diff > 0.0
    }
}

/// With two modalities, a shared adapter bank and a per-pair bank holding
/// the same weights compute the same function; with three they do not.
pub fn equivalence_check(seed: u64, inputs: usize) -> Result<EquivalenceReport> {
    let stages = 1..=4;
    let mut pair = StitchModel::new(
        tiny_model_config(2, DensityConfig::new(DensityVariant::PairBidirectional, stages.clone()), false),
        seed,
    )?;
    pair.adapters.as_mut().expect("stitched").randomize(0.5, derive_seed(seed, 7));
    let pair_bank = pair.adapters.clone().expect("stitched");

    let mut shared = StitchModel::new(
        tiny_model_config(2, DensityConfig::new(DensityVariant::Shared, stages.clone()), false),
        seed,
    )?;
    copy_route(&pair_bank, Route::Pair(0, 1), shared.adapters.as_mut().expect("stitched"), Route::Shared);

    let mut uni = StitchModel::new(
        tiny_model_config(2, DensityConfig::new(DensityVariant::PairTwoUnidirectional, stages.clone()), false),
        seed,
    )?;
    for route in [Route::Directed(0, 1), Route::Directed(1, 0)] {
        copy_route(&pair_bank, Route::Pair(0, 1), uni.adapters.as_mut().expect("stitched"), route);
    }

    let mut report = EquivalenceReport {
        inputs,
        shared_vs_pair_identical: true,
        shared_vs_pair_max_diff: 0.0,
        tied_unidirectional_identical: true,
        tied_unidirectional_max_diff: 0.0,
        three_modal_max_diff: 0.0,
    };
    for k in 0..inputs {
        let images = random_images(2, 32, derive_seed(seed, 100 + k as u64));
        let reference = stitched_outputs(&pair, &images)?;
        let (same, diff) = compare(&reference, &stitched_outputs(&shared, &images)?);
        report.shared_vs_pair_identical &= same;
        report.shared_vs_pair_max_diff = report.shared_vs_pair_max_diff.max(diff);
        let (same, diff) = compare(&reference, &stitched_outputs(&uni, &images)?);
        report.tied_unidirectional_identical &= same;
        report.tied_unidirectional_max_diff = report.tied_unidirectional_max_diff.max(diff);
    }

    let mut pair3 = StitchModel::new(
        tiny_model_config(3, DensityConfig::new(DensityVariant::PairBidirectional, stages.clone()), false),
        seed,
    )?;
    pair3.adapters.as_mut().expect("stitched").randomize(0.5, derive_seed(seed, 8));
    let mut shared3 = StitchModel::new(
        tiny_model_config(3, DensityConfig::new(DensityVariant::Shared, stages), false),
        seed,
    )?;
    let bank3 = pair3.adapters.clone().expect("stitched");
    copy_route(&bank3, Route::Pair(0, 1), shared3.adapters.as_mut().expect("stitched"), Route::Shared);
    let images = random_images(3, 32, derive_seed(seed, 99));
    let (_, diff) = compare(&stitched_outputs(&pair3, &images)?, &stitched_outputs(&shared3, &images)?);
    report.three_modal_max_diff = diff;
    Ok(report)
}

/// Stitched encoding with all up-projections zeroed, compared against
/// independent per-modality encoding. Returns the largest absolute
/// difference over all stages (0 when transparent).
pub fn transparency_gap(m: usize, density: DensityConfig, mode: Mode, seed: u64) -> Result<f64> {
    let mut model = StitchModel::new(tiny_model_config(m, density, false), seed)?;
    let bank = model.adapters.as_mut().expect("stitched");
    bank.randomize(0.5, derive_seed(seed, 5));
    bank.zero_up_projections();
    let images = random_images(m, 32, derive_seed(seed, 6));
    let refs: Vec<&Tensor> = images.iter().collect();
    let mut ctx = Ctx::new(mode, seed);
    let stitched = model.stitched_encode(&mut ctx, &refs)?;
    let mut ctx2 = Ctx::new(mode, seed);
    let plain = model.encode_independent(&mut ctx2, &refs)?;
    let mut gap: f64 = 0.0;
    for (ps, pp) in stitched.iter().zip(&plain) {
        for (a, b) in ps.iter().zip(pp) {
            let (x, y) = (ctx.tape.value(a.var), ctx2.tape.value(b.var));
            for (u, v) in x.iter().zip(y) {
                // numeric equality; also catches any NaN
                gap = gap.max(if u == v { 0.0 } else { (u - v).abs().max(f64::MIN_POSITIVE) });
            }
        }
    }
    Ok(gap)
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub name: String,
    pub seed: u64,
    pub report: GradReport,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(GRAD_TOLERANCE)
    }
}

type PrimitiveFn = fn(&mut Tape<'_>, Var, &Tensor) -> Result<Var>;

/// Weighted sum with a fixed random weight, so every output coordinate
/// carries a distinct sensitivity.
fn weighted_sum(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut seeded_rng(seed ^ 0xABCD));
    let wv = tape.input(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn primitive_cases() -> Vec<(&'static str, Vec<usize>, PrimitiveFn)> {
    fn other(shape: &[usize], t: &Tensor) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut seeded_rng(t.data()[0].to_bits()))
    }
    vec![
        ("matmul.lhs", vec![3, 4], |t, x, orig| {
            let b = t.input(other(&[4, 2], orig));
            t.matmul(x, b)
        }),
        ("matmul.rhs", vec![4, 2], |t, x, orig| {
            let a = t.input(other(&[3, 4], orig));
            t.matmul(a, x)
        }),
        ("add", vec![2, 3], |t, x, orig| {
            let b = t.input(other(&[2, 3], orig));
            t.add(x, b)
        }),
        ("sub", vec![2, 3], |t, x, orig| {
            let b = t.input(other(&[2, 3], orig));
            t.sub(b, x)
        }),
        ("mul", vec![2, 3], |t, x, orig| {
            let b = t.input(other(&[2, 3], orig));
            t.mul(x, b)
        }),
        ("scale", vec![5], |t, x, _| Ok(t.scale(x, -1.7))),
        ("add_bias.bias", vec![3], |t, x, orig| {
            let a = t.input(other(&[2, 3], orig));
            t.add_bias(a, x)
        }),
        ("add_bias.input", vec![2, 3], |t, x, orig| {
            let b = t.input(other(&[3], orig));
            t.add_bias(x, b)
        }),
        ("layer_norm.x", vec![3, 6], |t, x, orig| {
            let g = t.input(other(&[6], orig));
            let b = t.input(other(&[6], &Tensor::scalar(orig.data()[1])));
            t.layer_norm(x, g, b, 1e-6)
        }),
        ("layer_norm.gamma", vec![6], |t, x, orig| {
            let input = t.input(other(&[3, 6], orig));
            let b = t.input(Tensor::zeros(&[6]));
            t.layer_norm(input, x, b, 1e-6)
        }),
        ("layer_norm.beta", vec![6], |t, x, orig| {
            let input = t.input(other(&[3, 6], orig));
            let g = t.input(Tensor::full(&[6], 1.0));
            t.layer_norm(input, g, x, 1e-6)
        }),
        ("softmax", vec![3, 5], |t, x, _| Ok(t.softmax(x))),
        ("gelu", vec![10], |t, x, _| Ok(t.gelu(x))),
        ("dropout", vec![4, 4], |t, x, _| t.dropout(x, 0.4, Mode::Train, &mut seeded_rng(17))),
        ("drop_path", vec![6, 3], |t, x, _| t.drop_path(x, 0.4, Mode::Train, &mut seeded_rng(23))),
        ("transpose", vec![3, 4], |t, x, _| t.transpose(x)),
        ("reshape", vec![3, 4], |t, x, _| t.reshape(x, vec![2, 6])),
        ("slice_cols", vec![3, 5], |t, x, _| t.slice_cols(x, 1, 3)),
        ("concat_cols", vec![3, 2], |t, x, orig| {
            let b = t.input(other(&[3, 4], orig));
            t.concat_cols(&[b, x, x])
        }),
        ("concat_rows", vec![2, 3], |t, x, orig| {
            let b = t.input(other(&[1, 3], orig));
            t.concat_rows(&[x, b, x])
        }),
        ("patches", vec![16, 2], |t, x, _| {
            let g = PatchGeometry { channels: 2, height: 4, width: 4, kernel: 3, stride: 2, padding: 1 };
            t.patches(x, g)
        }),
        ("upsample_bilinear", vec![2, 2, 3], |t, x, _| t.upsample_bilinear(x, 5, 7)),
        ("mean", vec![7], |t, x, _| Ok(t.mean(x))),
        ("cross_entropy", vec![4, 3, 3], |t, x, _| {
            t.cross_entropy(x, &[0, 1, 2, 3, 255, 1, 0, 3, 2], 255)
        }),
        ("shared_consumer", vec![3, 3], |t, x, _| {
            // one tensor feeding two consumers
            let a = t.gelu(x);
            let b = t.matmul(x, a)?;
            t.add(b, x)
        }),
    ]
}

#[derive(Debug)]
struct StitchedBlockHarness {
    blocks: Vec<TransformerBlock>,
    bank: AdapterBank,
}

impl_parameterized!(StitchedBlockHarness { blocks, bank });

fn randomize_all<M: Parameterized>(module: &mut M, scale: f64, seed: u64) {
    let mut rng = seeded_rng(seed);
    module.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    });
    set_trainable(module, true);
}

/// Finite-difference checks over every primitive, the full adapter, one
/// stitched block and the end-to-end segmentation loss, each over `seeds`.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradCheckOutcome>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (name, shape, f) in primitive_cases() {
            let x = Tensor::uniform(&shape, -2.0, 2.0, &mut seeded_rng(derive_seed(seed, name.len() as u64)));
            let report = grad_check(
                |t, v| {
                    let y = f(t, v, &x)?;
                    weighted_sum(t, y, seed)
                },
                &x,
                DEFAULT_STEP,
            )?;
            out.push(GradCheckOutcome { name: name.to_string(), seed, report });
        }
        out.push(GradCheckOutcome { name: "adapter".into(), seed, report: adapter_check(seed)? });
        out.push(GradCheckOutcome { name: "stitched_block".into(), seed, report: stitched_block_check(seed)? });
        out.push(GradCheckOutcome { name: "end_to_end".into(), seed, report: end_to_end_check(seed)? });
    }
    Ok(out)
}

fn adapter_check(seed: u64) -> Result<GradReport> {
    let mut adapter = crate::stitch::MultiAdapter::new(16, 8, 0.1, &mut seeded_rng(seed))?;
    randomize_all(&mut adapter, 0.5, derive_seed(seed, 1));
    let x = Tensor::uniform(&[6, 16], -1.5, 1.5, &mut seeded_rng(derive_seed(seed, 2)));
    check_parameters(
        &mut adapter,
        |a, ctx| {
            let xv = ctx.tape.input(x.clone());
            let y = a.forward(ctx, xv)?;
            weighted_sum(&mut ctx.tape, y, seed)
        },
        ParamCheckOptions { mode: Mode::Train, seed, ..Default::default() },
    )
}

fn stitched_block_check(seed: u64) -> Result<GradReport> {
    let config = EncoderConfig {
        dims: vec![8],
        depths: vec![1],
        heads: vec![2],
        strides: vec![1],
        sr_ratios: vec![2],
        mlp_ratio: 2,
        drop_path: 0.2,
    };
    let m = 3;
    let density = DensityConfig::new(DensityVariant::PairTwoUnidirectional, [1]);
    let mut rng = seeded_rng(seed);
    let blocks = (0..m)
        .map(|_| TransformerBlock::new(8, 2, 2, 2, 0.2, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let bank = AdapterBank::build(m, &config, &density, 4, 0.1, derive_seed(seed, 3))?;
    let mut harness = StitchedBlockHarness { blocks, bank };
    randomize_all(&mut harness, 0.4, derive_seed(seed, 4));
    let xs: Vec<Tensor> = (0..m)
        .map(|i| Tensor::uniform(&[16, 8], -1.0, 1.0, &mut seeded_rng(derive_seed(seed, 10 + i as u64))))
        .collect();
    check_parameters(
        &mut harness,
        |h, ctx| {
            let vars: Vec<Var> = xs.iter().map(|x| ctx.tape.input(x.clone())).collect();
            let blocks: Vec<&TransformerBlock> = h.blocks.iter().collect();
            let outs = stitch_block_forward(ctx, &blocks, &h.bank, 0, 0, &vars, 4, 4)?;
            let mut terms = Vec::new();
            for (i, y) in outs.into_iter().enumerate() {
                terms.push(weighted_sum(&mut ctx.tape, y, seed + i as u64)?);
            }
            ctx.tape.sum_all(&terms)
        },
        ParamCheckOptions { mode: Mode::Train, seed, ..Default::default() },
    )
}

fn end_to_end_check(seed: u64) -> Result<GradReport> {
    let density = DensityConfig::new(DensityVariant::PairBidirectional, [3, 4]);
    let mut model = StitchModel::new(tiny_model_config(2, density, true), seed)?;
    model.adapters.as_mut().expect("stitched").randomize(0.3, derive_seed(seed, 1));
    let images = random_images(2, 32, derive_seed(seed, 2));
    let mut rng = seeded_rng(derive_seed(seed, 3));
    let labels: Vec<u16> = (0..32 * 32)
        .map(|_| if rng.random::<f64>() < 0.05 { 255 } else { rng.random_range(0..5) })
        .collect();
    check_parameters(
        &mut model,
        |m, ctx| {
            let refs: Vec<&Tensor> = images.iter().collect();
            m.loss(ctx, &refs, &labels, 255)
        },
        ParamCheckOptions {
            mode: Mode::Train,
            seed,
            max_coords_per_tensor: Some(6),
            ..Default::default()
        },
    )
}

/// Settings of the fusion-benefit comparison on synthetic complementary
/// data.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionProtocol {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub size: usize,
    pub num_classes: usize,
    pub stages: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for FusionProtocol {
    fn default() -> Self {
        FusionProtocol {
            train_samples: 200,
            eval_samples: 50,
            size: 32,
            num_classes: 5,
            stages: vec![1, 2, 3, 4],
            train: TrainConfig {
                base_lr: 3e-3,
                warmup_epochs: 2.0,
                epochs: 12,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutcome {
    pub seed: u64,
    /// mIoU of each single-modality baseline.
    pub single: Vec<f64>,
    pub stitched: f64,
    pub stitched_ffm: Option<f64>,
}

impl FusionOutcome {
    pub fn best_single(&self) -> f64 {
        self.single.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Trains both single-modality baselines, the stitched two-modality model
/// and optionally the stitched model with the fusion module, all on the
/// same data and seed, and reports eval mIoU.
pub fn fusion_protocol(protocol: &FusionProtocol, seed: u64, with_ffm: bool) -> Result<FusionOutcome> {
    let synth = SynthConfig::new(protocol.train_samples, protocol.size, protocol.size, protocol.num_classes, 2, seed);
    let train = generate_synthetic(&synth)?;
    let eval = generate_synthetic(&SynthConfig { samples: protocol.eval_samples, ..synth }.with_split("eval"))?;
    let cfg = TrainConfig { seed, ..protocol.train.clone() };
    let run = |modalities: Vec<ModalitySpec>, stitch: Option<StitchConfig>, ffm: bool| -> Result<f64> {
        let config = ModelConfig {
            encoder: EncoderConfig::tiny(),
            modalities,
            stitch,
            ffm,
            decoder_dim: 32,
            num_classes: protocol.num_classes,
        };
        let mut model = StitchModel::new(config, seed)?;
        let report = fit(&mut model, &train, Some(&eval), &cfg, |_| {})?;
        Ok(report.final_metrics.expect("eval set given").miou)
    };
    let specs = train.modalities.clone();
    let single = specs
        .iter()
        .map(|s| run(vec![s.clone()], None, false))
        .collect::<Result<Vec<_>>>()?;
    let stitch = StitchConfig::new(DensityConfig::new(DensityVariant::PairBidirectional, protocol.stages.iter().copied()));
    let stitched = run(specs.clone(), Some(stitch.clone()), false)?;
    let stitched_ffm = if with_ffm { Some(run(specs, Some(stitch), true)?) } else { None };
    Ok(FusionOutcome { seed, single, stitched, stitched_ffm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_holds_for_one_seed() {
        let report = equivalence_check(3, 2).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn transparency_for_each_variant() {
        for variant in [DensityVariant::Shared, DensityVariant::PairBidirectional, DensityVariant::PairTwoUnidirectional] {
            let gap = transparency_gap(3, DensityConfig::new(variant, [2, 4]), Mode::Eval, 1).unwrap();
            assert_eq!(gap, 0.0, "{variant}");
        }
    }

    #[test]
    fn primitive_suite_single_seed() {
        for outcome in gradient_suite(&[0]).unwrap() {
            assert!(outcome.passed(), "{} {:?}", outcome.name, outcome.report);
        }
    }
}
