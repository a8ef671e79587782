use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, Head};
use crate::error::Result;
use crate::synth::{Image, Sample};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::toolbox::{ModuleKind, Toolbox, ToolboxDims};

/// Backbone, optional toolbox and head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: Head,
    pub toolbox: Option<Toolbox>,
}

/// Token stream `T₁ … T_{I+1}` and per-token logits.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Vec<Var>,
    pub logits: Var,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.clone(), &mut store, rng)?;
        let head = Head::new(config.dim, config.num_classes, &mut store, rng);
        Ok(Model {
            store,
            backbone,
            head,
            toolbox: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn attach_toolbox<R: Rng + ?Sized>(&mut self, dims: ToolboxDims, kinds: &[ModuleKind], rng: &mut R) -> Result<()> {
        let tb = Toolbox::attach(&self.backbone, &mut self.store, dims, kinds, rng)?;
        self.toolbox = Some(tb);
        Ok(())
    }

    pub fn freeze_backbone(&mut self) {
        self.backbone.freeze(&mut self.store);
    }

    pub fn encode(&self, tape: &mut Tape, image: &Image) -> Result<Encoded> {
        let mut x = self.backbone.patch_embed(tape, &self.store, image)?;
        let mut tokens = Vec::with_capacity(self.backbone.blocks.len() + 1);
        tokens.push(x);
        for i in 0..self.backbone.blocks.len() {
            let hooks = self.toolbox.as_ref().map(|t| t.hooks(i)).unwrap_or_default();
            x = self.backbone.block_forward(tape, &self.store, i, x, hooks)?;
            tokens.push(x);
        }
        let normed = self.backbone.final_norm(tape, &self.store, x)?;
        let logits = self.head.forward(tape, &self.store, normed)?;
        Ok(Encoded { tokens, logits })
    }

    /// Mean per-patch cross-entropy for one sample.
    pub fn loss(&self, tape: &mut Tape, sample: &Sample) -> Result<Var> {
        let enc = self.encode(tape, &sample.image)?;
        tape.cross_entropy(enc.logits, &sample.labels)
    }

    pub fn logits(&self, image: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, image)?;
        Ok(tape.value(enc.logits).clone())
    }

    /// Arg-max class per patch; ties go to the lower class index.
    pub fn predict(&self, image: &Image) -> Result<Vec<usize>> {
        let logits = self.logits(image)?;
        let c = logits.cols();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
            .collect())
    }
}
