use proptest::prelude::*;
use stitchfusion::data::{generate_synthetic, Sample, SynthConfig};
use stitchfusion::encoder::EncoderConfig;
use stitchfusion::nn::{named_params, Ctx, Parameterized};
use stitchfusion::tensor::{derive_seed, seeded_rng};
use stitchfusion::train::{train_step, AdamW, TrainConfig};
use stitchfusion::{
    DensityConfig, DensityVariant, Mode, ModalitySpec, ModelConfig, MultiAdapter, StitchConfig, StitchModel, Tensor,
};

fn config(m: usize, variant: DensityVariant, ffm: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::tiny(),
        modalities: (0..m).map(|i| ModalitySpec { name: format!("m{i}"), channels: 3 }).collect(),
        stitch: Some(StitchConfig::new(DensityConfig::new(variant, [1, 2, 3, 4]))),
        ffm,
        decoder_dim: 16,
        num_classes: 4,
    }
}

fn images(m: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = seeded_rng(seed);
    (0..m).map(|_| Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect()
}

fn encode(model: &StitchModel, xs: &[Tensor]) -> Vec<Vec<Tensor>> {
    let refs: Vec<&Tensor> = xs.iter().collect();
    let mut ctx = Ctx::new(Mode::Eval, 0);
    let pyramids = model.stitched_encode(&mut ctx, &refs).unwrap();
    pyramids
        .iter()
        .map(|p| p.iter().map(|f| ctx.tape.tensor(f.var)).collect())
        .collect()
}

#[test]
fn shared_bank_is_permutation_equivariant() {
    let perms: [&[usize]; 3] = [&[1, 2, 0], &[2, 1, 0], &[0, 2, 1]];
    for seed in 0..3 {
        let mut base = StitchModel::new(config(3, DensityVariant::Shared, false), seed).unwrap();
        base.adapters.as_mut().unwrap().randomize(0.5, derive_seed(seed, 9));
        let xs = images(3, seed + 100);
        let reference = encode(&base, &xs);
        for perm in perms {
            let mut permuted = base.clone();
            permuted.encoders = perm.iter().map(|&k| base.encoders[k].clone()).collect();
            let pxs: Vec<Tensor> = perm.iter().map(|&k| xs[k].clone()).collect();
            let out = encode(&permuted, &pxs);
            for (slot, &k) in perm.iter().enumerate() {
                for (a, b) in out[slot].iter().zip(&reference[k]) {
                    // only the summation order of the two incoming terms changes
                    assert!(a.max_abs_diff(b) < 1e-12, "perm {perm:?}: {}", a.max_abs_diff(b));
                }
            }
        }
    }
}

#[test]
fn two_modal_swap_is_exact() {
    let mut base = StitchModel::new(config(2, DensityVariant::Shared, false), 4).unwrap();
    base.adapters.as_mut().unwrap().randomize(0.5, 1);
    let xs = images(2, 5);
    let reference = encode(&base, &xs);
    let mut swapped = base.clone();
    swapped.encoders.reverse();
    let out = encode(&swapped, &[xs[1].clone(), xs[0].clone()]);
    for (a, b) in out[0].iter().zip(&reference[1]).chain(out[1].iter().zip(&reference[0])) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn pair_bank_is_not_equivariant_under_swap_of_distinct_pairs() {
    let mut base = StitchModel::new(config(3, DensityVariant::PairBidirectional, false), 2).unwrap();
    base.adapters.as_mut().unwrap().randomize(0.5, 3);
    let xs = images(3, 7);
    let reference = encode(&base, &xs);
    let mut permuted = base.clone();
    permuted.encoders = vec![base.encoders[1].clone(), base.encoders[2].clone(), base.encoders[0].clone()];
    let out = encode(&permuted, &[xs[1].clone(), xs[2].clone(), xs[0].clone()]);
    let diff = out[0].last().unwrap().max_abs_diff(reference[1].last().unwrap());
    assert!(diff > 1e-6);
}

#[test]
fn zeroed_fusion_module_gives_constant_logits_until_trained() {
    let mut model = StitchModel::new(config(2, DensityVariant::PairBidirectional, true), 6).unwrap();
    model.ffm.as_mut().unwrap().visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    let logits = |m: &StitchModel, seed: u64| {
        let xs = images(2, seed);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let v = m.forward(&mut ctx, &refs).unwrap();
        ctx.tape.tensor(v)
    };
    assert!(logits(&model, 1).bit_eq(&logits(&model, 2)));

    let before = model.ffm.clone().unwrap();
    let data = generate_synthetic(&SynthConfig::new(2, 32, 32, 4, 2, 0)).unwrap();
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let mut opt = AdamW::new(&TrainConfig::default());
    for step in 0..3 {
        train_step(&mut model, &mut opt, &batch, &[0, 1], 1e-2, step).unwrap();
    }
    let moved = named_params(&before)
        .iter()
        .zip(named_params(model.ffm.as_ref().unwrap()).iter())
        .any(|((_, a), (_, b))| !a.bit_eq(b));
    assert!(moved);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adapter_preserves_shape(d in 1usize..40, r in 1usize..12, tokens in 1usize..10, seed in any::<u64>()) {
        let adapter = MultiAdapter::new(d, r, 0.1, &mut seeded_rng(seed)).unwrap();
        let x = Tensor::uniform(&[tokens, d], -1.0, 1.0, &mut seeded_rng(seed ^ 1));
        let mut ctx = Ctx::new(Mode::Train, seed);
        let xv = ctx.tape.input(x);
        let y = adapter.forward(&mut ctx, xv).unwrap();
        prop_assert_eq!(ctx.tape.shape(y), &[tokens, d]);
    }

    #[test]
    fn stage_sizes_follow_strides(h in 1usize..5, w in 1usize..5, seed in 0u64..4) {
        let cfg = EncoderConfig::tiny();
        let model = StitchModel::new(ModelConfig { stitch: None, ffm: false, ..config(2, DensityVariant::Shared, false) }, seed).unwrap();
        let (hh, ww) = (h * 32, w * 32);
        let xs: Vec<Tensor> = (0..2).map(|_| Tensor::zeros(&[3, hh, ww])).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let mut ctx = Ctx::new(Mode::Eval, 0);
        let pyramids = model.encode_independent(&mut ctx, &refs).unwrap();
        let mut stride = 1;
        for (s, map) in pyramids[0].iter().enumerate() {
            stride *= cfg.strides[s];
            prop_assert_eq!((map.height, map.width, map.channels), (hh / stride, ww / stride, cfg.dims[s]));
        }
    }
}
