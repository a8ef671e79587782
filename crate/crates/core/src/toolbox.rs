//! The adapter toolbox: one spatial (low-rank Q/V update), one semantic
//! (parallel bottleneck beside the MLP) and one frequency (Fourier-split
//! mixture of adapters) module per backbone block.
//!
//! Every module is an exact identity when attached: the second factor of
//! each low-rank/bottleneck pair starts at zero. Modules always take part in
//! the forward pass; activation only controls which ones receive gradients.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BlockHooks};
use crate::error::{Error, Result};
use crate::tensor::{low_pass_mask, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Spatial,
    Semantic,
    Frequency,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::Spatial, ModuleKind::Semantic, ModuleKind::Frequency];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Spatial => "spatial",
            ModuleKind::Semantic => "semantic",
            ModuleKind::Frequency => "frequency",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spatial" => Ok(ModuleKind::Spatial),
            "semantic" => Ok(ModuleKind::Semantic),
            "frequency" => Ok(ModuleKind::Frequency),
            other => Err(Error::Config(format!("unknown module kind '{other}'"))),
        }
    }
}

/// Address of one toolbox module. The derived order (layer, then kind) is
/// the deterministic tie-break used by selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        ModuleId { layer, kind }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolboxDims {
    /// Low-rank update rank of the spatial module.
    pub rank: usize,
    /// Hidden width of the semantic adapter.
    pub bottleneck: usize,
    /// Hidden width of each frequency expert.
    pub freq_bottleneck: usize,
    /// Low-pass cutoff as a fraction of the half-bandwidth.
    pub cutoff: f64,
    /// Output scale of the frequency module.
    pub scale: f64,
}

impl Default for ToolboxDims {
    fn default() -> Self {
        ToolboxDims {
            rank: 64,
            bottleneck: 64,
            freq_bottleneck: 32,
            cutoff: 0.3,
            scale: 0.1,
        }
    }
}

impl ToolboxDims {
    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, v) in [
            ("rank", self.rank),
            ("bottleneck", self.bottleneck),
            ("freq_bottleneck", self.freq_bottleneck),
        ] {
            if v == 0 || v >= dim {
                return Err(Error::Config(format!("{name} = {v} must be in [1, dim = {dim})")));
            }
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::Config(format!("cutoff {} must lie in (0, 1)", self.cutoff)));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("scale must be finite".into()));
        }
        Ok(())
    }
}

/// `x·W₀ + (x·A)·B`, i.e. `x·(W₀ + A·B)` without forming the merged weight.
pub fn spatial_forward(tape: &mut Tape, x: Var, w0: Var, a: Var, b: Var) -> Result<Var> {
    let base = tape.matmul(x, w0)?;
    let down = tape.matmul(x, a)?;
    let delta = tape.matmul(down, b)?;
    tape.add(base, delta)
}

/// Merged weight `W₀ + A·B` for `A: d×r`, `B: r×d`.
pub fn merge_lora(w0: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let delta = a.matmul(b)?;
    w0.add(&delta)
}

#[derive(Clone, Debug)]
pub struct SpatialModule {
    pub a_q: ParamId,
    pub b_q: ParamId,
    pub a_v: ParamId,
    pub b_v: ParamId,
    pub rank: usize,
}

impl SpatialModule {
    pub fn project_query(&self, tape: &mut Tape, store: &ParamStore, x: Var, w_q: Var) -> Result<Var> {
        let a = tape.param(store, self.a_q);
        let b = tape.param(store, self.b_q);
        spatial_forward(tape, x, w_q, a, b)
    }

    pub fn project_value(&self, tape: &mut Tape, store: &ParamStore, x: Var, w_v: Var) -> Result<Var> {
        let a = tape.param(store, self.a_v);
        let b = tape.param(store, self.b_v);
        spatial_forward(tape, x, w_v, a, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.a_q, self.b_q, self.a_v, self.b_v]
    }
}

/// Down-projection, GELU, up-projection.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub down: ParamId,
    pub up: ParamId,
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Bottleneck {
            down: store.add(
                format!("{prefix}.down"),
                Tensor::randn(&[dim, hidden], 1.0 / (dim as f64).sqrt(), rng),
                false,
            ),
            up: store.add(format!("{prefix}.up"), Tensor::zeros(&[hidden, dim]), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let down = tape.param(store, self.down);
        let up = tape.param(store, self.up);
        let h = tape.matmul(x, down)?;
        let h = tape.gelu(h);
        tape.matmul(h, up)
    }
}

#[derive(Clone, Debug)]
pub struct SemanticModule {
    pub adapter: Bottleneck,
}

impl SemanticModule {
    pub fn params(&self) -> Vec<ParamId> {
        vec![self.adapter.down, self.adapter.up]
    }
}

/// The adapter term `GELU(t·W_down)·W_up` added beside the block MLP.
pub fn semantic_adapter(tape: &mut Tape, store: &ParamStore, t: Var, module: &SemanticModule) -> Result<Var> {
    module.adapter.forward(tape, store, t)
}

/// Expert order inside a frequency module.
pub const EXPERT_SPATIAL: usize = 0;
pub const EXPERT_LOW: usize = 1;
pub const EXPERT_HIGH: usize = 2;

#[derive(Clone, Debug)]
pub struct FrequencyModule {
    pub experts: [Bottleneck; 3],
    pub router: ParamId,
    pub grid: usize,
    pub cutoff: f64,
    pub scale: f64,
    mask: Arc<Vec<bool>>,
}

impl FrequencyModule {
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(|e| [e.down, e.up]).collect();
        ids.push(self.router);
        ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Per-token softmax over the three experts, computed from raw tokens.
    pub fn router_weights(&self, tape: &mut Tape, store: &ParamStore, t: Var) -> Result<Var> {
        let w = tape.param(store, self.router);
        let logits = tape.matmul(t, w)?;
        tape.softmax_rows(logits)
    }

    /// Low- and high-frequency token components; they sum to `t`.
    pub fn split(&self, tape: &mut Tape, t: Var) -> Result<(Var, Var)> {
        let low = tape.lowpass(t, self.grid, self.mask.clone())?;
        let high = tape.sub(t, low)?;
        Ok((low, high))
    }
}

/// `t + s · Σₑ wₑ ∘ expertₑ` with experts fed the raw, low- and
/// high-frequency tokens respectively.
pub fn frequency_forward(tape: &mut Tape, store: &ParamStore, t: Var, module: &FrequencyModule) -> Result<Var> {
    let weights = module.router_weights(tape, store, t)?;
    let (low, high) = module.split(tape, t)?;
    let inputs = [t, low, high];
    let mut mixed: Option<Var> = None;
    for (e, (expert, input)) in module.experts.iter().zip(inputs).enumerate() {
        let y = expert.forward(tape, store, input)?;
        let y = tape.scale_by_col(y, weights, e)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let mixed = tape.scale(mixed.expect("three experts"), module.scale);
    tape.add(t, mixed)
}

#[derive(Clone, Debug)]
pub enum PeftModule {
    Spatial(SpatialModule),
    Semantic(SemanticModule),
    Frequency(FrequencyModule),
}

impl PeftModule {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            PeftModule::Spatial(m) => m.params(),
            PeftModule::Semantic(m) => m.params(),
            PeftModule::Frequency(m) => m.params(),
        }
    }
}

/// Registry of attached modules and the current active set.
#[derive(Clone, Debug)]
pub struct Toolbox {
    pub dims: ToolboxDims,
    kinds: Vec<ModuleKind>,
    layers: Vec<[Option<PeftModule>; 3]>,
    active: BTreeSet<ModuleId>,
}

fn kind_slot(kind: ModuleKind) -> usize {
    kind as usize
}

impl Toolbox {
    /// Attaches one module of each requested kind at every block. All
    /// modules start inactive.
    pub fn attach<R: Rng + ?Sized>(
        backbone: &Backbone,
        store: &mut ParamStore,
        dims: ToolboxDims,
        kinds: &[ModuleKind],
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = &backbone.config;
        let d = cfg.dim;
        dims.validate(d)?;
        let g = cfg.grid();
        if g * g != cfg.tokens() {
            return Err(Error::Config(format!("token count {} is not a square grid", cfg.tokens())));
        }
        let mut kinds: Vec<ModuleKind> = kinds.to_vec();
        kinds.sort();
        kinds.dedup();
        let mask = Arc::new(low_pass_mask(g, dims.cutoff));

        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut slots: [Option<PeftModule>; 3] = [None, None, None];
            for &kind in &kinds {
                let prefix = format!("toolbox.l{i}.{kind}");
                let module = match kind {
                    ModuleKind::Spatial => {
                        let std = 1.0 / (d as f64).sqrt();
                        let r = dims.rank;
                        PeftModule::Spatial(SpatialModule {
                            a_q: store.add(format!("{prefix}.a_q"), Tensor::randn(&[d, r], std, rng), false),
                            b_q: store.add(format!("{prefix}.b_q"), Tensor::zeros(&[r, d]), false),
                            a_v: store.add(format!("{prefix}.a_v"), Tensor::randn(&[d, r], std, rng), false),
                            b_v: store.add(format!("{prefix}.b_v"), Tensor::zeros(&[r, d]), false),
                            rank: r,
                        })
                    }
                    ModuleKind::Semantic => PeftModule::Semantic(SemanticModule {
                        adapter: Bottleneck::new(store, &format!("{prefix}.adapter"), d, dims.bottleneck, rng),
                    }),
                    ModuleKind::Frequency => {
                        let hidden = dims.freq_bottleneck;
                        let experts = [
                            Bottleneck::new(store, &format!("{prefix}.expert_spatial"), d, hidden, rng),
                            Bottleneck::new(store, &format!("{prefix}.expert_low"), d, hidden, rng),
                            Bottleneck::new(store, &format!("{prefix}.expert_high"), d, hidden, rng),
                        ];
                        let router = store.add(
                            format!("{prefix}.router"),
                            Tensor::randn(&[d, 3], 1.0 / (d as f64).sqrt(), rng),
                            false,
                        );
                        PeftModule::Frequency(FrequencyModule {
                            experts,
                            router,
                            grid: g,
                            cutoff: dims.cutoff,
                            scale: dims.scale,
                            mask: mask.clone(),
                        })
                    }
                };
                slots[kind_slot(kind)] = Some(module);
            }
            layers.push(slots);
        }
        Ok(Toolbox {
            dims,
            kinds,
            layers,
            active: BTreeSet::new(),
        })
    }

    pub fn kinds(&self) -> &[ModuleKind] {
        &self.kinds
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// All module ids in (layer, kind) order.
    pub fn ids(&self) -> Vec<ModuleId> {
        (0..self.layers.len())
            .flat_map(|i| self.kinds.iter().map(move |&k| ModuleId::new(i, k)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len() * self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn module(&self, id: ModuleId) -> Result<&PeftModule> {
        self.layers
            .get(id.layer)
            .and_then(|slots| slots[kind_slot(id.kind)].as_ref())
            .ok_or_else(|| Error::UnknownModule(id.to_string()))
    }

    pub fn module_params(&self, id: ModuleId) -> Result<Vec<ParamId>> {
        Ok(self.module(id)?.params())
    }

    pub fn module_param_count(&self, id: ModuleId, store: &ParamStore) -> Result<usize> {
        Ok(self
            .module_params(id)?
            .iter()
            .map(|&p| store.value(p).len())
            .sum())
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.ids()
            .into_iter()
            .flat_map(|id| self.module_params(id).expect("registered id"))
            .collect()
    }

    pub fn hooks(&self, layer: usize) -> BlockHooks<'_> {
        let Some(slots) = self.layers.get(layer) else {
            return BlockHooks::default();
        };
        BlockHooks {
            spatial: match &slots[0] {
                Some(PeftModule::Spatial(m)) => Some(m),
                _ => None,
            },
            semantic: match &slots[1] {
                Some(PeftModule::Semantic(m)) => Some(m),
                _ => None,
            },
            frequency: match &slots[2] {
                Some(PeftModule::Frequency(m)) => Some(m),
                _ => None,
            },
        }
    }

    pub fn active(&self) -> &BTreeSet<ModuleId> {
        &self.active
    }

    /// Enables gradients for exactly the modules in `active`.
    pub fn set_active(&mut self, store: &mut ParamStore, active: &BTreeSet<ModuleId>) -> Result<()> {
        for id in active {
            self.module(*id)?;
        }
        for id in self.ids() {
            let on = active.contains(&id);
            for p in self.module_params(id)? {
                store.set_requires_grad(p, on);
            }
        }
        self.active = active.clone();
        Ok(())
    }

    pub fn activate_all(&mut self, store: &mut ParamStore) -> Result<()> {
        let all: BTreeSet<ModuleId> = self.ids().into_iter().collect();
        self.set_active(store, &all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Backbone, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            image_size: 8,
            channels: 3,
            patch_size: 2,
            depth: 4,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        };
        let bb = Backbone::new(cfg, &mut store, &mut rng).unwrap();
        (bb, store, rng)
    }

    fn dims() -> ToolboxDims {
        ToolboxDims {
            rank: 2,
            bottleneck: 3,
            freq_bottleneck: 2,
            cutoff: 0.3,
            scale: 0.1,
        }
    }

    #[test]
    fn attach_counts_and_starts_inactive() {
        let (bb, mut store, mut rng) = small();
        let tb = Toolbox::attach(&bb, &mut store, dims(), &ModuleKind::ALL, &mut rng).unwrap();
        assert_eq!(tb.ids().len(), 12);
        assert!(tb.all_params().iter().all(|&p| !store.requires_grad(p)));
    }

    #[test]
    fn rank_must_be_below_dim() {
        let (bb, mut store, mut rng) = small();
        let mut bad = dims();
        bad.rank = 8;
        assert!(matches!(
            Toolbox::attach(&bb, &mut store, bad, &ModuleKind::ALL, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn set_active_controls_trainable_count() {
        let (bb, mut store, mut rng) = small();
        bb.freeze(&mut store);
        let mut tb = Toolbox::attach(&bb, &mut store, dims(), &ModuleKind::ALL, &mut rng).unwrap();
        tb.set_active(&mut store, &BTreeSet::new()).unwrap();
        assert_eq!(store.trainable_count(), 0);
        tb.activate_all(&mut store).unwrap();
        let total: usize = tb.ids().iter().map(|&id| tb.module_param_count(id, &store).unwrap()).sum();
        assert_eq!(store.trainable_count(), total);

        let unknown: BTreeSet<ModuleId> = [ModuleId::new(9, ModuleKind::Spatial)].into();
        assert!(matches!(tb.set_active(&mut store, &unknown), Err(Error::UnknownModule(_))));
    }

    #[test]
    fn merge_examples() {
        let w0 = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let a = Tensor::from_rows(&[&[1.0], &[2.0]]).unwrap();
        assert_eq!(merge_lora(&w0, &a, &Tensor::zeros(&[1, 2])).unwrap(), w0);
        let b = Tensor::from_rows(&[&[3.0, -1.0]]).unwrap();
        let outer = merge_lora(&Tensor::zeros(&[2, 2]), &a, &b).unwrap();
        assert_eq!(outer.data(), &[3.0, -1.0, 6.0, -2.0]);
    }

    #[test]
    fn rank_one_update_by_hand() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let w0 = tape.constant(Tensor::zeros(&[3, 3]));
        let a = tape.constant(Tensor::from_rows(&[&[1.0], &[0.0], &[0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[0.5, 0.0, -1.0]]).unwrap());
        let y = spatial_forward(&mut tape, x, w0, a, b).unwrap();
        // x·A = 1, times B.
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, -1.0]);
    }

    #[test]
    fn kind_order_and_parse() {
        assert!(ModuleKind::Spatial < ModuleKind::Semantic && ModuleKind::Semantic < ModuleKind::Frequency);
        assert_eq!("Frequency".parse::<ModuleKind>().unwrap(), ModuleKind::Frequency);
        assert!("temporal".parse::<ModuleKind>().is_err());
    }
}
