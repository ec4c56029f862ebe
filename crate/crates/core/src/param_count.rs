//! Closed-form adapter parameter budget and an enumerating counter that
//! must agree with it.

use std::collections::BTreeSet;
use std::fmt;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::StitchModel;
use crate::nn::count_params;
use crate::stitch::{AdapterBank, DensityConfig, DensityVariant};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountSpec {
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub r: usize,
    pub modalities: usize,
    pub variant: DensityVariant,
    /// 1-based stage numbers.
    pub active_stages: BTreeSet<usize>,
    pub include_biases: bool,
}

impl CountSpec {
    pub fn from_encoder(
        encoder: &EncoderConfig,
        r: usize,
        modalities: usize,
        variant: DensityVariant,
        active_stages: impl IntoIterator<Item = usize>,
        include_biases: bool,
    ) -> Self {
        CountSpec {
            dims: encoder.dims.clone(),
            depths: encoder.depths.clone(),
            r,
            modalities,
            variant,
            active_stages: active_stages.into_iter().collect(),
            include_biases,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.depths.len() {
            return Err(Error::Config(format!(
                "dims ({}) and depths ({}) must be non-empty and of equal length",
                self.dims.len(),
                self.depths.len()
            )));
        }
        if self.modalities < 2 {
            return Err(Error::Config(format!("need at least 2 modalities, got {}", self.modalities)));
        }
        if self.r == 0 {
            return Err(Error::Config("bottleneck width r must be positive".into()));
        }
        DensityConfig::new(self.variant, self.active_stages.iter().copied()).validate(self.dims.len())
    }

    fn density(&self) -> DensityConfig {
        DensityConfig::new(self.variant, self.active_stages.iter().copied())
    }
}

/// Parameters of a single adapter on a `d`-wide stage.
pub fn adapter_size(d: usize, r: usize, include_biases: bool) -> usize {
    let weights = 2 * r * d + r * r;
    if include_biases {
        weights + 2 * r + d
    } else {
        weights
    }
}

pub fn analytic_count(spec: &CountSpec) -> usize {
    let routes = spec.variant.routes(spec.modalities);
    spec.active_stages
        .iter()
        .filter_map(|&s| Some((*spec.dims.get(s.checked_sub(1)?)?, spec.depths[s - 1])))
        .map(|(d, depth)| adapter_size(d, spec.r, spec.include_biases) * 2 * depth * routes)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    Trainable,
    Frozen,
    AdaptersOnly,
}

pub fn empirical_count(model: &StitchModel, filter: ParamFilter) -> usize {
    count_params(model, |name, t| match filter {
        ParamFilter::All => true,
        ParamFilter::Trainable => t.requires_grad(),
        ParamFilter::Frozen => !t.requires_grad(),
        ParamFilter::AdaptersOnly => name.starts_with("adapters."),
    })
}

/// Enumerated size of a freshly built bank for `spec`. Bias buffers are
/// skipped when the spec excludes them.
pub fn bank_count(spec: &CountSpec) -> Result<usize> {
    spec.validate()?;
    let encoder = EncoderConfig {
        dims: spec.dims.clone(),
        depths: spec.depths.clone(),
        heads: vec![1; spec.dims.len()],
        strides: vec![1; spec.dims.len()],
        sr_ratios: vec![1; spec.dims.len()],
        mlp_ratio: 1,
        drop_path: 0.0,
    };
    let bank = AdapterBank::build(spec.modalities, &encoder, &spec.density(), spec.r, 0.0, 0)?;
    let include = spec.include_biases;
    Ok(count_params(&bank, |name, _| include || !name.ends_with(".bias")))
}

/// Millions, rounded to two decimals.
pub fn in_millions(count: usize) -> f64 {
    (count as f64 / 1e4).round() / 100.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountRow {
    pub spec: CountSpec,
    pub analytic_with_biases: usize,
    pub analytic_without_biases: usize,
    pub empirical_with_biases: usize,
    pub empirical_without_biases: usize,
}

impl CountRow {
    pub fn compute(spec: &CountSpec) -> Result<Self> {
        let with = CountSpec { include_biases: true, ..spec.clone() };
        let without = CountSpec { include_biases: false, ..spec.clone() };
        Ok(CountRow {
            spec: spec.clone(),
            analytic_with_biases: analytic_count(&with),
            analytic_without_biases: analytic_count(&without),
            empirical_with_biases: bank_count(&with)?,
            empirical_without_biases: bank_count(&without)?,
        })
    }

    pub fn agrees(&self) -> bool {
        self.analytic_with_biases == self.empirical_with_biases
            && self.analytic_without_biases == self.empirical_without_biases
    }

    /// `key=value` lines for scripts.
    pub fn to_key_values(&self) -> String {
        let stages: Vec<String> = self.spec.active_stages.iter().map(ToString::to_string).collect();
        format!(
            "modalities={}\nvariant={}\nstages={}\nr={}\nanalytic_with_biases={}\nempirical_with_biases={}\n\
             analytic_without_biases={}\nempirical_without_biases={}\nmillions_with_biases={:.2}\nagree={}\n",
            self.spec.modalities,
            self.spec.variant,
            stages.join(","),
            self.spec.r,
            self.analytic_with_biases,
            self.empirical_with_biases,
            self.analytic_without_biases,
            self.empirical_without_biases,
            in_millions(self.analytic_with_biases),
            self.agrees()
        )
    }
}

impl fmt::Display for CountRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>12} {:>12} {:>9}", "convention", "analytic", "empirical", "millions")?;
        writeln!(
            f,
            "{:<16} {:>12} {:>12} {:>9.2}",
            "with biases",
            self.analytic_with_biases,
            self.empirical_with_biases,
            in_millions(self.analytic_with_biases)
        )?;
        write!(
            f,
            "{:<16} {:>12} {:>12} {:>9.2}",
            "weights only",
            self.analytic_without_biases,
            self.empirical_without_biases,
            in_millions(self.analytic_without_biases)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use proptest::prelude::*;

    fn b2(m: usize, stages: &[usize]) -> CountSpec {
        CountSpec::from_encoder(
            &EncoderConfig::b2_like(),
            8,
            m,
            DensityVariant::PairBidirectional,
            stages.iter().copied(),
            true,
        )
    }

    /// Hand summation with literal stage widths and depths.
    fn by_hand(m_pairs: usize, stages: &[(usize, usize)]) -> usize {
        stages.iter().map(|&(d, depth)| (16 * d + 64 + 16 + d) * 2 * depth * m_pairs).sum()
    }

    #[test]
    fn published_budget_deltas() {
        let all = [(64, 3), (128, 4), (320, 6), (512, 3)];
        for (m, stages, expected, millions) in [
            (2, vec![1, 2, 3, 4], 144_000, 0.14),
            (3, vec![1, 2, 3, 4], 432_000, 0.43),
            (4, vec![3, 4], 713_664, 0.71),
        ] {
            let spec = b2(m, &stages);
            let count = analytic_count(&spec);
            assert_eq!(count, expected);
            let pairs = m * (m - 1) / 2;
            let picked: Vec<_> = stages.iter().map(|&s| all[s - 1]).collect();
            assert_eq!(count, by_hand(pairs, &picked));
            assert_eq!(in_millions(count), millions);
            assert_eq!(bank_count(&spec).unwrap(), expected);
        }
    }

    #[test]
    fn four_modal_latter_stages_split() {
        // 6 pairs; stage 3 contributes 66240 and stage 4 52704 per pair
        assert_eq!(analytic_count(&b2(2, &[3])), 66_240);
        assert_eq!(analytic_count(&b2(2, &[4])), 52_704);
    }

    #[test]
    fn weights_only_is_the_bare_formula() {
        let spec = CountSpec { include_biases: false, ..b2(2, &[1, 2, 3, 4]) };
        let literal: usize = [(64, 3), (128, 4), (320, 6), (512, 3)]
            .iter()
            .map(|&(d, depth)| (2 * 8 * d + 8 * 8) * 2 * depth)
            .sum();
        assert_eq!(analytic_count(&spec), literal);
        assert_eq!(bank_count(&spec).unwrap(), literal);
    }

    #[test]
    fn model_filters_partition_parameters() {
        let density = DensityConfig::new(DensityVariant::PairTwoUnidirectional, [2, 3]);
        let model = StitchModel::new(tiny_config(3, Some(density), true), 0).unwrap();
        let all = empirical_count(&model, ParamFilter::All);
        let frozen = empirical_count(&model, ParamFilter::Frozen);
        let trainable = empirical_count(&model, ParamFilter::Trainable);
        assert_eq!(all, frozen + trainable);
        let encoders: usize = model.encoders.iter().map(|e| count_params(e, |_, _| true)).sum();
        assert_eq!(frozen, encoders);
        let spec = CountSpec::from_encoder(
            &EncoderConfig::tiny(),
            8,
            3,
            DensityVariant::PairTwoUnidirectional,
            [2, 3],
            true,
        );
        assert_eq!(empirical_count(&model, ParamFilter::AdaptersOnly), analytic_count(&spec));
    }

    #[test]
    fn report_rows_agree() {
        let row = CountRow::compute(&b2(2, &[1, 2, 3, 4])).unwrap();
        assert!(row.agrees());
        assert!(row.to_key_values().contains("analytic_with_biases=144000"));
        assert!(row.to_string().contains("0.14"));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(bank_count(&b2(1, &[1])).is_err());
        assert!(bank_count(&b2(2, &[5])).is_err());
        assert!(bank_count(&CountSpec { r: 0, ..b2(2, &[1]) }).is_err());
    }

    fn variant_strategy() -> impl Strategy<Value = DensityVariant> {
        prop_oneof![
            Just(DensityVariant::Shared),
            Just(DensityVariant::PairBidirectional),
            Just(DensityVariant::PairTwoUnidirectional),
        ]
    }

    fn spec_strategy() -> impl Strategy<Value = CountSpec> {
        (1usize..4)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(1usize..40, n),
                    proptest::collection::vec(1usize..4, n),
                    1usize..10,
                    2usize..6,
                    variant_strategy(),
                    proptest::collection::btree_set(1..=n, 1..=n),
                    any::<bool>(),
                )
            })
            .prop_map(|(dims, depths, r, modalities, variant, active_stages, include_biases)| CountSpec {
                dims,
                depths,
                r,
                modalities,
                variant,
                active_stages,
                include_biases,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn analytic_matches_enumeration(spec in spec_strategy()) {
            prop_assert_eq!(analytic_count(&spec), bank_count(&spec).unwrap());
        }

        #[test]
        fn strictly_monotone(spec in spec_strategy()) {
            let base = analytic_count(&spec);
            let more_m = CountSpec { modalities: spec.modalities + 1, ..spec.clone() };
            let more_r = CountSpec { r: spec.r + 1, ..spec.clone() };
            if spec.variant == DensityVariant::Shared {
                prop_assert_eq!(analytic_count(&more_m), base);
            } else {
                prop_assert!(analytic_count(&more_m) > base);
            }
            prop_assert!(analytic_count(&more_r) > base);
            let missing = (1..=spec.dims.len()).find(|s| !spec.active_stages.contains(s));
            if let Some(s) = missing {
                let mut wider = spec.clone();
                wider.active_stages.insert(s);
                prop_assert!(analytic_count(&wider) > base);
            }
        }

        #[test]
        fn shared_is_pair_count_over_pairs(spec in spec_strategy()) {
            let shared = analytic_count(&CountSpec { variant: DensityVariant::Shared, ..spec.clone() });
            let pair = analytic_count(&CountSpec { variant: DensityVariant::PairBidirectional, ..spec.clone() });
            let uni = analytic_count(&CountSpec { variant: DensityVariant::PairTwoUnidirectional, ..spec.clone() });
            let pairs = spec.modalities * (spec.modalities - 1) / 2;
            prop_assert_eq!(shared * pairs, pair);
            prop_assert_eq!(uni, 2 * pair);
        }
    }
}
