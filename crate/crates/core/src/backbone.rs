//! Toy ViT encoder: patch embedding, pre-norm transformer blocks, and a
//! per-token linear segmentation head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Image;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::toolbox::{self, FrequencyModule, SemanticModule, SpatialModule};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            depth: 4,
            dim: 32,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("depth, channels and mlp_ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

impl TransformerBlock {
    pub fn params(&self) -> [ParamId; 16] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.w_q,
            self.b_q,
            self.w_k,
            self.b_k,
            self.w_v,
            self.b_v,
            self.w_o,
            self.b_o,
            self.ln2_gamma,
            self.ln2_beta,
            self.w_1,
            self.b_1,
            self.w_2,
            self.b_2,
        ]
    }
}

/// Toolbox modules wired into one block's forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockHooks<'a> {
    pub spatial: Option<&'a SpatialModule>,
    pub semantic: Option<&'a SemanticModule>,
    pub frequency: Option<&'a FrequencyModule>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_gamma: ParamId,
    pub final_beta: ParamId,
}

fn lecun<R: Rng + ?Sized>(fan_in: usize, shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hidden = config.mlp_ratio * d;
        let pd = config.patch_dim();
        let patch_w = store.add("backbone.patch.w", lecun(pd, &[pd, d], rng), true);
        let patch_b = store.add("backbone.patch.b", Tensor::zeros(&[d]), true);
        let pos_embed = store.add("backbone.pos", Tensor::randn(&[config.tokens(), d], 0.02, rng), true);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut add = |name: &str, t: Tensor| store.add(format!("backbone.block{i}.{name}"), t, true);
            blocks.push(TransformerBlock {
                ln1_gamma: add("ln1.gamma", Tensor::full(&[d], 1.0)),
                ln1_beta: add("ln1.beta", Tensor::zeros(&[d])),
                w_q: add("attn.w_q", lecun(d, &[d, d], rng)),
                b_q: add("attn.b_q", Tensor::zeros(&[d])),
                w_k: add("attn.w_k", lecun(d, &[d, d], rng)),
                b_k: add("attn.b_k", Tensor::zeros(&[d])),
                w_v: add("attn.w_v", lecun(d, &[d, d], rng)),
                b_v: add("attn.b_v", Tensor::zeros(&[d])),
                w_o: add("attn.w_o", lecun(d, &[d, d], rng)),
                b_o: add("attn.b_o", Tensor::zeros(&[d])),
                ln2_gamma: add("ln2.gamma", Tensor::full(&[d], 1.0)),
                ln2_beta: add("ln2.beta", Tensor::zeros(&[d])),
                w_1: add("mlp.w_1", lecun(d, &[d, hidden], rng)),
                b_1: add("mlp.b_1", Tensor::zeros(&[hidden])),
                w_2: add("mlp.w_2", lecun(hidden, &[hidden, d], rng)),
                b_2: add("mlp.b_2", Tensor::zeros(&[d])),
            });
        }
        let final_gamma = store.add("backbone.final.gamma", Tensor::full(&[d], 1.0), true);
        let final_beta = store.add("backbone.final.beta", Tensor::zeros(&[d]), true);
        Ok(Backbone {
            config,
            patch_w,
            patch_b,
            pos_embed,
            blocks,
            final_gamma,
            final_beta,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos_embed];
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids.extend([self.final_gamma, self.final_beta]);
        ids
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        self.set_trainable(store, false);
    }

    pub fn set_trainable(&self, store: &mut ParamStore, flag: bool) {
        for id in self.params() {
            store.set_requires_grad(id, flag);
        }
    }

    /// Flattens each patch in (row, col, channel) order into one row of an
    /// `l × patch_dim` matrix; patches are enumerated row-major.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let cfg = &self.config;
        if image.height != cfg.image_size || image.width != cfg.image_size || image.channels != cfg.channels {
            return Err(Error::dim(
                "patch_embed",
                &[image.height, image.width, image.channels],
                &[cfg.image_size, cfg.image_size, cfg.channels],
            ));
        }
        let (p, g, c) = (cfg.patch_size, cfg.grid(), cfg.channels);
        let mut rows = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
        for py in 0..g {
            for px in 0..g {
                for y in 0..p {
                    for x in 0..p {
                        let base = ((py * p + y) * image.width + px * p + x) * c;
                        rows.extend_from_slice(&image.data[base..base + c]);
                    }
                }
            }
        }
        Tensor::new(&[cfg.tokens(), cfg.patch_dim()], rows)
    }

    /// Linear patch projection plus learned positional embedding: `T₁`.
    pub fn patch_embed(&self, tape: &mut Tape, store: &ParamStore, image: &Image) -> Result<Var> {
        let patches = tape.constant(self.patchify(image)?);
        let w = tape.param(store, self.patch_w);
        let b = tape.param(store, self.patch_b);
        let pos = tape.param(store, self.pos_embed);
        let x = tape.matmul(patches, w)?;
        let x = tape.add_bias(x, b)?;
        tape.add(x, pos)
    }

    pub fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        index: usize,
        x: Var,
        hooks: BlockHooks<'_>,
    ) -> Result<Var> {
        let blk = &self.blocks[index];
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;

        let g1 = tape.param(store, blk.ln1_gamma);
        let be1 = tape.param(store, blk.ln1_beta);
        let h = tape.layer_norm(x, g1, be1, LN_EPS)?;

        let wq = tape.param(store, blk.w_q);
        let wv = tape.param(store, blk.w_v);
        let (q, v) = match hooks.spatial {
            Some(m) => (
                m.project_query(tape, store, h, wq)?,
                m.project_value(tape, store, h, wv)?,
            ),
            None => (tape.matmul(h, wq)?, tape.matmul(h, wv)?),
        };
        let bq = tape.param(store, blk.b_q);
        let q = tape.add_bias(q, bq)?;
        let bv = tape.param(store, blk.b_v);
        let v = tape.add_bias(v, bv)?;
        let wk = tape.param(store, blk.w_k);
        let bk = tape.param(store, blk.b_k);
        let k = tape.matmul(h, wk)?;
        let k = tape.add_bias(k, bk)?;

        let mut head_outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)?
        };
        let wo = tape.param(store, blk.w_o);
        let bo = tape.param(store, blk.b_o);
        let attn_out = tape.matmul(merged, wo)?;
        let attn_out = tape.add_bias(attn_out, bo)?;
        let t_attn = tape.add(x, attn_out)?;

        let g2 = tape.param(store, blk.ln2_gamma);
        let be2 = tape.param(store, blk.ln2_beta);
        let h2 = tape.layer_norm(t_attn, g2, be2, LN_EPS)?;
        let w1 = tape.param(store, blk.w_1);
        let b1 = tape.param(store, blk.b_1);
        let w2 = tape.param(store, blk.w_2);
        let b2 = tape.param(store, blk.b_2);
        let m = tape.matmul(h2, w1)?;
        let m = tape.add_bias(m, b1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, w2)?;
        let m = tape.add_bias(m, b2)?;
        let mut out = tape.add(t_attn, m)?;

        if let Some(sem) = hooks.semantic {
            let a = toolbox::semantic_adapter(tape, store, h2, sem)?;
            out = tape.add(out, a)?;
        }
        if let Some(freq) = hooks.frequency {
            out = toolbox::frequency_forward(tape, store, out, freq)?;
        }
        Ok(out)
    }

    pub fn final_norm(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.final_gamma);
        let b = tape.param(store, self.final_beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Per-token linear classifier.
#[derive(Clone, Debug)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Head {
            w: store.add("head.w", lecun(dim, &[dim, classes], rng), true),
            b: store.add("head.b", Tensor::zeros(&[classes]), true),
        }
    }

    /// Draws fresh head weights in place, keeping the parameter slots.
    pub fn reinit<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let shape = store.value(self.w).shape().to_vec();
        *store.value_mut(self.w) = lecun(shape[0], &shape, rng);
        let classes = shape[1];
        *store.value_mut(self.b) = Tensor::zeros(&[classes]);
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}
