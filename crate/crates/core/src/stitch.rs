//! Cross-modal bottleneck adapters, their allocation across modality routes,
//! and the block wiring that lets frozen encoders exchange features.
//!
//! For modalities `i != j` the stitched block computes, per modality,
//!
//! ```text
//! z_attn[i] = x[i] + DropPath(Attn(LN1 x[i]))
//! z_attn[j] += sum_i DropPath(Ada1[i->j](LN1 x[i]))
//! z_mlp[i]  = z_attn[i] + DropPath(MLP(LN2 z_attn[i]))
//! z_mlp[j]  += sum_i DropPath(Ada2[i->j](LN2 z_attn[i]))
//! ```
//!
//! Each cross-modal sum reads values captured before any of its terms is
//! added, so the result does not depend on modality iteration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoder::{EncoderConfig, TransformerBlock};
use crate::error::{Error, Result};
use crate::nn::{impl_parameterized, join, set_trainable, Ctx, Linear, Parameterized, INIT_STD};
use crate::tensor::{seeded_rng, Tensor};

pub const DEFAULT_BOTTLENECK: usize = 8;
pub const DEFAULT_ADAPTER_DROPOUT: f64 = 0.1;

/// Down-project, GELU + dropout, up-project:
/// `up(Dropout(GELU(mid(down(x)))))`, all affine maps on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiAdapter {
    pub down: Linear,
    pub mid: Linear,
    pub up: Linear,
    pub dropout: f64,
}

impl_parameterized!(MultiAdapter { down, mid, up });

impl MultiAdapter {
    /// Zero up-projection, so a fresh adapter contributes exactly nothing.
    pub fn new(dim: usize, bottleneck: usize, dropout: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        if dim == 0 || bottleneck == 0 {
            return Err(Error::InvalidArgument(format!(
                "adapter needs positive widths, got d={dim} r={bottleneck}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("adapter dropout must lie in [0, 1), got {dropout}")));
        }
        let mut adapter = MultiAdapter {
            down: Linear::new(dim, bottleneck, INIT_STD, rng),
            mid: Linear::new(bottleneck, bottleneck, INIT_STD, rng),
            up: Linear::zeros(bottleneck, dim),
            dropout,
        };
        set_trainable(&mut adapter, true);
        Ok(adapter)
    }

    pub fn dim(&self) -> usize {
        self.down.input_dim()
    }

    pub fn bottleneck(&self) -> usize {
        self.down.output_dim()
    }

    pub fn forward<'a>(&'a self, ctx: &mut Ctx<'a>, x: Var) -> Result<Var> {
        let d = *ctx.tape.shape(x).last().expect("non-empty shape");
        if d != self.dim() {
            return Err(Error::shape("adapter", ctx.tape.shape(x), &[self.dim()]));
        }
        let h = self.down.forward(ctx, x)?;
        let h = self.mid.forward(ctx, h)?;
        let h = ctx.tape.gelu(h);
        let h = ctx.dropout(h, self.dropout)?;
        self.up.forward(ctx, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DensityVariant {
    /// One adapter shared by every modality route.
    #[serde(rename = "shared")]
    Shared,
    /// One adapter per unordered modality pair, used in both directions.
    #[serde(rename = "pair-bi")]
    PairBidirectional,
    /// Two adapters per pair, one per direction.
    #[serde(rename = "pair-uni")]
    PairTwoUnidirectional,
}

impl DensityVariant {
    /// Adapters per (stage, block, position) for `m` modalities.
    pub fn routes(self, m: usize) -> usize {
        let pairs = m * m.saturating_sub(1) / 2;
        match self {
            DensityVariant::Shared => 1,
            DensityVariant::PairBidirectional => pairs,
            DensityVariant::PairTwoUnidirectional => 2 * pairs,
        }
    }

    pub fn route(self, from: usize, to: usize) -> Route {
        match self {
            DensityVariant::Shared => Route::Shared,
            DensityVariant::PairBidirectional => Route::Pair(from.min(to), from.max(to)),
            DensityVariant::PairTwoUnidirectional => Route::Directed(from, to),
        }
    }

    fn all_routes(self, m: usize) -> Vec<Route> {
        match self {
            DensityVariant::Shared => vec![Route::Shared],
            DensityVariant::PairBidirectional => (0..m)
                .flat_map(|i| (i + 1..m).map(move |j| Route::Pair(i, j)))
                .collect(),
            DensityVariant::PairTwoUnidirectional => (0..m)
                .flat_map(|i| (i + 1..m).flat_map(move |j| [Route::Directed(i, j), Route::Directed(j, i)]))
                .collect(),
        }
    }
}

impl fmt::Display for DensityVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityVariant::Shared => "shared",
            DensityVariant::PairBidirectional => "pair-bi",
            DensityVariant::PairTwoUnidirectional => "pair-uni",
        })
    }
}

impl FromStr for DensityVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(DensityVariant::Shared),
            "pair-bi" => Ok(DensityVariant::PairBidirectional),
            "pair-uni" => Ok(DensityVariant::PairTwoUnidirectional),
            other => Err(Error::Config(format!(
                "unknown density {other:?} (expected shared, pair-bi or pair-uni)"
            ))),
        }
    }
}

/// Adapter allocation: which variant, and which stages (numbered from 1)
/// carry adapters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub variant: DensityVariant,
    pub active_stages: BTreeSet<usize>,
}

impl DensityConfig {
    pub fn new(variant: DensityVariant, active_stages: impl IntoIterator<Item = usize>) -> Self {
        DensityConfig {
            variant,
            active_stages: active_stages.into_iter().collect(),
        }
    }

    /// Whether the stage at zero-based `index` is stitched.
    pub fn is_active(&self, index: usize) -> bool {
        self.active_stages.contains(&(index + 1))
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if self.active_stages.is_empty() {
            return Err(Error::Config("at least one stage must carry adapters".into()));
        }
        if let Some(&bad) = self.active_stages.iter().find(|&&s| s == 0 || s > num_stages) {
            return Err(Error::Config(format!(
                "active stage {bad} outside 1..={num_stages}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    /// After attention, reading `LN1(x)`.
    Ada1,
    /// After the MLP, reading `LN2(z_attn)`.
    Ada2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Route {
    Shared,
    /// Unordered pair, smaller index first.
    Pair(usize, usize),
    /// Ordered `from -> to`.
    Directed(usize, usize),
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Route::Shared => f.write_str("shared"),
            Route::Pair(i, j) => write!(f, "{i}-{j}"),
            Route::Directed(i, j) => write!(f, "{i}to{j}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdapterKey {
    /// Zero-based stage index.
    pub stage: usize,
    pub block: usize,
    pub position: Position,
    pub route: Route,
}

impl AdapterKey {
    pub fn name(&self) -> String {
        let pos = match self.position {
            Position::Ada1 => "ada1",
            Position::Ada2 => "ada2",
        };
        format!("s{}.b{}.{pos}.{}", self.stage, self.block, self.route)
    }
}

/// Every adapter of a stitched model, keyed by where it sits and which
/// modality route it serves.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    variant: DensityVariant,
    modalities: usize,
    active_stages: BTreeSet<usize>,
    adapters: BTreeMap<AdapterKey, MultiAdapter>,
}

impl AdapterBank {
    /// Populates one adapter per (active stage, block, position, route).
    /// Down and mid projections are truncated normal (std 0.02), the up
    /// projection and all biases start at zero.
    pub fn build(
        modalities: usize,
        encoder: &EncoderConfig,
        density: &DensityConfig,
        bottleneck: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if modalities < 2 {
            return Err(Error::Config(format!(
                "stitching needs at least two modalities, got {modalities}"
            )));
        }
        encoder.validate()?;
        density.validate(encoder.num_stages())?;
        let mut rng = seeded_rng(seed);
        let mut adapters = BTreeMap::new();
        for stage in (0..encoder.num_stages()).filter(|&s| density.is_active(s)) {
            for block in 0..encoder.depths[stage] {
                for position in [Position::Ada1, Position::Ada2] {
                    for route in density.variant.all_routes(modalities) {
                        let adapter = MultiAdapter::new(encoder.dims[stage], bottleneck, dropout, &mut rng)?;
                        adapters.insert(AdapterKey { stage, block, position, route }, adapter);
                    }
                }
            }
        }
        Ok(AdapterBank {
            variant: density.variant,
            modalities,
            active_stages: density.active_stages.clone(),
            adapters,
        })
    }

    pub fn variant(&self) -> DensityVariant {
        self.variant
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn is_stage_active(&self, index: usize) -> bool {
        self.active_stages.contains(&(index + 1))
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &AdapterKey> {
        self.adapters.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AdapterKey, &MultiAdapter)> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&AdapterKey, &mut MultiAdapter)> {
        self.adapters.iter_mut()
    }

    /// The adapter carrying `from -> to` at one block position.
    pub fn adapter(&self, stage: usize, block: usize, position: Position, from: usize, to: usize) -> Result<&MultiAdapter> {
        let key = AdapterKey {
            stage,
            block,
            position,
            route: self.variant.route(from, to),
        };
        self.adapters
            .get(&key)
            .ok_or_else(|| Error::InvalidArgument(format!("no adapter at {}", key.name())))
    }

    pub fn get_mut(&mut self, key: &AdapterKey) -> Option<&mut MultiAdapter> {
        self.adapters.get_mut(key)
    }

    /// Number of parameters, optionally leaving out the bias vectors.
    pub fn param_count(&self, include_biases: bool) -> usize {
        self.adapters
            .values()
            .flat_map(|a| [&a.down, &a.mid, &a.up])
            .map(|l| l.weight.numel() + if include_biases { l.bias.numel() } else { 0 })
            .sum()
    }

    /// Sets every up-projection (weights and bias) to zero.
    pub fn zero_up_projections(&mut self) {
        for adapter in self.adapters.values_mut() {
            adapter.up.weight.data_mut().fill(0.0);
            adapter.up.bias.data_mut().fill(0.0);
        }
    }

    /// Redraws every parameter (including up-projections) from
    /// `U(-scale, scale)`. Used to exercise non-trivial adapters.
    pub fn randomize(&mut self, scale: f64, seed: u64) {
        let mut rng = seeded_rng(seed);
        for adapter in self.adapters.values_mut() {
            adapter.visit_mut("", &mut |_, t| {
                let fresh = Tensor::uniform(t.shape(), -scale, scale, &mut rng);
                t.data_mut().copy_from_slice(fresh.data());
            });
        }
    }
}

impl Parameterized for AdapterBank {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor)) {
        for (key, adapter) in &self.adapters {
            adapter.visit(&join(prefix, &key.name()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (key, adapter) in &mut self.adapters {
            adapter.visit_mut(&join(prefix, &key.name()), f);
        }
    }
}

/// One stitched transformer block across `M` modalities. `blocks[i]` is
/// modality `i`'s (frozen) block; all inputs share one `[tokens x d]` shape.
#[allow(clippy::too_many_arguments)]
pub fn stitch_block_forward<'a>(
    ctx: &mut Ctx<'a>,
    blocks: &[&'a TransformerBlock],
    bank: &'a AdapterBank,
    stage: usize,
    block: usize,
    xs: &[Var],
    height: usize,
    width: usize,
) -> Result<Vec<Var>> {
    let m = xs.len();
    if blocks.len() != m || m != bank.modalities() {
        return Err(Error::InvalidArgument(format!(
            "stitched block got {m} inputs, {} blocks, bank for {} modalities",
            blocks.len(),
            bank.modalities()
        )));
    }
    for &x in &xs[1..] {
        if ctx.tape.shape(x) != ctx.tape.shape(xs[0]) {
            return Err(Error::shape("stitch_block", ctx.tape.shape(xs[0]), ctx.tape.shape(x)));
        }
    }

    let mut ln1 = Vec::with_capacity(m);
    let mut z_attn = Vec::with_capacity(m);
    for (i, &x) in xs.iter().enumerate() {
        let (normed, z) = blocks[i].attn_residual(ctx, x, height, width)?;
        ln1.push(normed);
        z_attn.push(z);
    }
    let z_attn = cross_modal(ctx, blocks, bank, stage, block, Position::Ada1, &ln1, &z_attn)?;

    let mut ln2 = Vec::with_capacity(m);
    let mut z_mlp = Vec::with_capacity(m);
    for (i, &z) in z_attn.iter().enumerate() {
        let (normed, out) = blocks[i].mlp_residual(ctx, z)?;
        ln2.push(normed);
        z_mlp.push(out);
    }
    cross_modal(ctx, blocks, bank, stage, block, Position::Ada2, &ln2, &z_mlp)
}

/// `targets[j] + sum_{i != j} DropPath(Ada[i->j](sources[i]))`; the
/// contributions are summed first, then added once.
#[allow(clippy::too_many_arguments)]
fn cross_modal<'a>(
    ctx: &mut Ctx<'a>,
    blocks: &[&'a TransformerBlock],
    bank: &'a AdapterBank,
    stage: usize,
    block: usize,
    position: Position,
    sources: &[Var],
    targets: &[Var],
) -> Result<Vec<Var>> {
    let m = sources.len();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let mut terms = Vec::with_capacity(m - 1);
        for (i, &src) in sources.iter().enumerate() {
            if i == j {
                continue;
            }
            let adapter = bank.adapter(stage, block, position, i, j)?;
            let y = adapter.forward(ctx, src)?;
            terms.push(ctx.drop_branch(y, blocks[j].drop_path)?);
        }
        let total = ctx.tape.sum_all(&terms)?;
        out.push(ctx.tape.add(targets[j], total)?);
    }
    Ok(out)
}
