//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each, and exits non-zero if any failed.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use stitchfusion::checkpoint::{load_checkpoint, save_checkpoint, Scope};
use stitchfusion::data::{generate_synthetic, load_dataset, save_dataset, Sample, SynthConfig};
use stitchfusion::encoder::EncoderConfig;
use stitchfusion::metrics::ConfusionMatrix;
use stitchfusion::nn::named_params;
use stitchfusion::param_count::{analytic_count, bank_count, in_millions, CountSpec};
use stitchfusion::tensor::seeded_rng;
use stitchfusion::train::{evaluate, fit, train_step, AdamW, TrainConfig};
use stitchfusion::verify::{equivalence_check, fusion_protocol, gradient_suite, transparency_gap, FusionProtocol};
use stitchfusion::{
    DensityConfig, DensityVariant, Mode, ModalitySpec, ModelConfig, StitchConfig, StitchModel,
};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn run(id: usize, name: &str, budget: Duration, check: impl FnOnce() -> Verdict) -> bool {
    run_charged(id, name, budget, Duration::ZERO, check)
}

/// `charged` is time already spent on shared work this criterion depends on.
fn run_charged(id: usize, name: &str, budget: Duration, charged: Duration, check: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = check();
    let elapsed = start.elapsed() + charged;
    let in_budget = elapsed < budget;
    let ok = v.passed && in_budget;
    println!(
        "[{}] {id}. {name}: {} ({:.1}s, budget {}s)",
        if ok { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    ok
}

fn parameter_budget() -> Verdict {
    // totals from the published table, baseline 25.79M
    let baseline = 25.79;
    let cases = [
        (2, vec![1, 2, 3, 4], 144_000, 25.93),
        (3, vec![1, 2, 3, 4], 432_000, 26.22),
        (4, vec![3, 4], 713_664, 26.50),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (m, stages, expected, total) in cases {
        let spec = CountSpec::from_encoder(
            &EncoderConfig::b2_like(),
            8,
            m,
            DensityVariant::PairBidirectional,
            stages,
            true,
        );
        let analytic = analytic_count(&spec);
        let empirical = bank_count(&spec).expect("valid spec");
        let published: f64 = ((total - baseline) * 100.0_f64).round() / 100.0;
        ok &= analytic == expected && empirical == analytic && in_millions(analytic) == published;
        parts.push(format!("m={m}: {analytic}/{empirical} (+{:.2}M vs +{published:.2}M)", in_millions(analytic)));
    }
    verdict(ok, parts.join(", "))
}

fn two_modal_equivalence() -> Verdict {
    let r = equivalence_check(7, 10).expect("equivalence run");
    verdict(
        r.passed(),
        format!(
            "shared==pair-bi {} (max diff {:.1e}), tied pair-uni {} , 3-modal diff {:.2e}",
            r.shared_vs_pair_identical,
            r.shared_vs_pair_max_diff,
            r.tied_unidirectional_identical,
            r.three_modal_max_diff
        ),
    )
}

fn zero_adapter_transparency() -> Verdict {
    let mut runs = 0;
    let mut worst: f64 = 0.0;
    for variant in [DensityVariant::Shared, DensityVariant::PairBidirectional, DensityVariant::PairTwoUnidirectional] {
        for mask in 1u32..16 {
            let stages: Vec<usize> = (0..4).filter(|b| mask & (1 << b) != 0).map(|b| b + 1).collect();
            for m in [2, 3] {
                let gap = transparency_gap(m, DensityConfig::new(variant, stages.clone()), Mode::Eval, mask as u64)
                    .expect("transparency run");
                worst = worst.max(gap);
                runs += 1;
            }
        }
    }
    verdict(worst == 0.0, format!("{runs} variant/stage/modality combinations, max gap {worst:e}"))
}

fn gradient_integrity() -> Verdict {
    let seeds: Vec<u64> = (0..10).collect();
    let outcomes = gradient_suite(&seeds).expect("gradient suite");
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{}@{}", o.name, o.seed))
        .collect();
    let worst = outcomes.iter().map(|o| o.report.max_rel_error).fold(0.0, f64::max);
    let kinds: HashSet<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
    verdict(
        failed.is_empty(),
        format!(
            "{} checks over {} cases x 10 seeds, max rel err {worst:.2e} (< 1e-4){}",
            outcomes.len(),
            kinds.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn frozen_encoder() -> Verdict {
    let config = ModelConfig {
        encoder: EncoderConfig::tiny(),
        modalities: (0..2).map(|i| ModalitySpec { name: format!("m{i}"), channels: 3 }).collect(),
        stitch: Some(StitchConfig::new(DensityConfig::new(DensityVariant::PairBidirectional, [1, 2, 3, 4]))),
        ffm: true,
        decoder_dim: 32,
        num_classes: 5,
    };
    let mut model = StitchModel::new(config, 11).unwrap();
    let initial = model.clone();
    let data = generate_synthetic(&SynthConfig::new(16, 32, 32, 5, 2, 11)).unwrap();
    let mut opt = AdamW::new(&TrainConfig::default());
    for step in 0..100 {
        let batch: Vec<&Sample> = (0..2).map(|k| &data.samples[(2 * step + k) % data.len()]).collect();
        train_step(&mut model, &mut opt, &batch, &[0, 1], 1e-3, 11).unwrap();
    }
    let before = named_params(&initial);
    let after = named_params(&model);
    let mut frozen_same = true;
    let mut changed = [false; 3];
    let mut encoder_tensors = 0;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        let same_bytes = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if name.starts_with("encoders.") {
            encoder_tensors += 1;
            frozen_same &= same_bytes;
        }
        for (i, prefix) in ["adapters.", "ffm.", "decoder."].iter().enumerate() {
            if name.starts_with(prefix) && !same_bytes {
                changed[i] = true;
            }
        }
    }
    verdict(
        frozen_same && changed.iter().all(|&c| c),
        format!(
            "{encoder_tensors} encoder tensors byte-identical: {frozen_same}; changed adapters/ffm/decoder: {changed:?}"
        ),
    )
}

fn metric_oracle() -> Verdict {
    let mut rng = seeded_rng(8);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..8usize);
        let labels: Vec<u16> = (0..256)
            .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..k as u16) })
            .collect();
        let preds: Vec<u16> = (0..256).map(|_| rng.random_range(0..k as u16)).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.update(&labels, &preds, 255).unwrap();
        let metrics = cm.metrics();

        let mut ious = Vec::new();
        for c in 0..k as u16 {
            let truth: HashSet<usize> = (0..256).filter(|&i| labels[i] == c).collect();
            let pred: HashSet<usize> = (0..256).filter(|&i| labels[i] != 255 && preds[i] == c).collect();
            let union = truth.union(&pred).count();
            let inter = truth.intersection(&pred).count();
            ious.push((union > 0).then(|| inter as f64 / union as f64));
        }
        // same rounding order as the reported percentages
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let miou = 100.0 * present.iter().sum::<f64>() / present.len() as f64;
        let percent: Vec<Option<f64>> = ious.iter().map(|v| v.map(|x| 100.0 * x)).collect();
        let matches = metrics.per_class_iou == percent && metrics.miou == miou;
        if !matches {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("100 random 16x16 pairs, {mismatches} mismatches"))
}

fn determinism_and_round_trips() -> Verdict {
    let train = generate_synthetic(&SynthConfig::new(12, 32, 32, 5, 2, 21)).unwrap();
    let eval = generate_synthetic(&SynthConfig::new(6, 32, 32, 5, 2, 21).with_split("eval")).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig::tiny(),
        modalities: train.modalities.clone(),
        stitch: Some(StitchConfig::new(DensityConfig::new(DensityVariant::PairTwoUnidirectional, [2, 3, 4]))),
        ffm: true,
        decoder_dim: 16,
        num_classes: 5,
    };
    let cfg = TrainConfig { epochs: 3, warmup_epochs: 1.0, batch_size: 4, base_lr: 2e-3, seed: 21, ..Default::default() };
    let train_once = || {
        let mut model = StitchModel::new(config.clone(), 21).unwrap();
        let report = fit(&mut model, &train, Some(&eval), &cfg, |_| {}).unwrap();
        (model, report)
    };
    let (model, a) = train_once();
    let (_, b) = train_once();
    let bits = |m: &stitchfusion::metrics::Metrics| {
        let mut v: Vec<u64> = m.per_class_iou.iter().map(|x| x.map_or(u64::MAX, f64::to_bits)).collect();
        v.push(m.miou.to_bits());
        v.push(m.pixel_accuracy.to_bits());
        v
    };
    let metrics_a = a.final_metrics.clone().unwrap();
    let same_run = a == b && bits(&metrics_a) == bits(b.final_metrics.as_ref().unwrap());

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&train, &dir.path().join("data")).unwrap();
    let reloaded = load_dataset(&dir.path().join("data")).unwrap();
    let dataset_ok = reloaded == train
        && reloaded
            .samples
            .iter()
            .zip(&train.samples)
            .all(|(x, y)| x.labels == y.labels && x.images.iter().zip(&y.images).all(|(p, q)| p.bit_eq(q)));

    save_checkpoint(&model, &dir.path().join("ckpt"), Scope::Full).unwrap();
    let restored = load_checkpoint(&dir.path().join("ckpt")).unwrap();
    let params_ok = named_params(&model).iter().zip(named_params(&restored).iter()).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2));
    let metrics_ok = bits(&evaluate(&restored, &eval).unwrap()) == bits(&metrics_a);

    verdict(
        same_run && dataset_ok && params_ok && metrics_ok,
        format!(
            "repeat run identical {same_run}, dataset round trip {dataset_ok}, checkpoint params {params_ok}, metrics after reload {metrics_ok}"
        ),
    )
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut results = vec![
        run(1, "parameter budget", secs(1), parameter_budget),
        run(2, "two-modality density equivalence", secs(30), two_modal_equivalence),
        run(3, "zero-adapter transparency", secs(30), zero_adapter_transparency),
        run(4, "gradient integrity", secs(300), gradient_integrity),
        run(5, "frozen encoder", secs(300), frozen_encoder),
    ];

    let protocol = FusionProtocol::default();
    let start = Instant::now();
    let outcomes: Vec<_> = (0..5u64)
        .map(|seed| {
            let o = fusion_protocol(&protocol, seed, true).expect("fusion protocol run");
            println!(
                "      seed {seed}: single {:.2}/{:.2}  stitched {:.2}  stitched+ffm {:.2}",
                o.single[0],
                o.single[1],
                o.stitched,
                o.stitched_ffm.unwrap()
            );
            o
        })
        .collect();
    let fusion_time = start.elapsed();
    // both criteria share these runs; each is charged the full time
    results.push(run_charged(6, "fusion benefit", secs(900), fusion_time, || {
        let wins = outcomes.iter().filter(|o| o.stitched - o.best_single() >= 5.0).count();
        let margins: Vec<String> = outcomes.iter().map(|o| format!("{:+.2}", o.stitched - o.best_single())).collect();
        verdict(wins >= 4, format!("stitched beats best single by >= 5 points in {wins}/5 seeds [{}], shared runs {:.0}s", margins.join(" "), fusion_time.as_secs_f64()))
    }));
    results.push(run_charged(7, "fusion module complementarity", secs(900), fusion_time, || {
        let mean = |f: &dyn Fn(&stitchfusion::verify::FusionOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / outcomes.len() as f64;
        let plain = mean(&|o| o.stitched);
        let with_ffm = mean(&|o| o.stitched_ffm.unwrap());
        verdict(with_ffm >= plain - 0.5, format!("mean mIoU with fusion module {with_ffm:.2} vs without {plain:.2} (tolerance 0.5)"))
    }));

    results.push(run(8, "metric oracle", secs(60), metric_oracle));
    results.push(run(9, "determinism and round trips", secs(300), determinism_and_round_trips));

    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
