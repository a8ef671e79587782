//! Helpers shared by the integration tests: small configs, random inputs
//! and a loop-based reference forward pass that reads weights by name.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toolgate::backbone::BackboneConfig;
use toolgate::fisher_gate::GatedModel;
use toolgate::synth::Image;
use toolgate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use toolgate::toolbox::{ModuleId, ModuleKind};
use toolgate::Model;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn backbone(image: usize, patch: usize, depth: usize, dim: usize, heads: usize, classes: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: image,
        channels: 3,
        patch_size: patch,
        depth,
        dim,
        heads,
        mlp_ratio: 2,
        num_classes: classes,
    }
}

pub fn random_image(size: usize, channels: usize, rng: &mut impl Rng) -> Image {
    let mut img = Image::new(size, size, channels);
    for v in img.data.iter_mut() {
        *v = rng.random::<f64>();
    }
    img
}

/// Overwrites every toolbox tensor with N(0, std²) draws so zero-initialized
/// projections carry signal.
pub fn randomize_toolbox(model: &mut Model, std: f64, rng: &mut impl Rng) {
    let ids = model.toolbox.as_ref().expect("toolbox attached").all_params();
    for id in ids {
        let shape = model.store.value(id).shape().to_vec();
        *model.store.value_mut(id) = Tensor::randn(&shape, std, rng);
    }
}

pub fn weights(model: &Model, name: &str) -> Mat {
    let id = model.store.find(name).unwrap_or_else(|| panic!("no tensor {name}"));
    let t = model.store.value(id);
    match t.shape() {
        [_] => vec![t.data().to_vec()],
        [r, c] => (0..*r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect(),
        s => panic!("unexpected shape {s:?}"),
    }
}

fn vector(model: &Model, name: &str) -> Vec<f64> {
    weights(model, name).remove(0)
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| f(*x)).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Low-pass filter of a token grid by the direct 2-D DFT sum, one channel at
/// a time; bins with centered index magnitude ≤ floor(cutoff·g/2) on both
/// axes are kept.
pub fn oracle_lowpass(tokens: &Mat, g: usize, cutoff: f64) -> Mat {
    let radius = (cutoff * g as f64 / 2.0).floor() as i64;
    let centered = |k: usize| {
        let k = k as i64;
        let g = g as i64;
        if k <= g / 2 { k } else { g - k }
    };
    let d = tokens[0].len();
    let mut out = vec![vec![0.0; d]; g * g];
    let tau = 2.0 * std::f64::consts::PI / g as f64;
    for c in 0..d {
        let mut spec = vec![(0.0, 0.0); g * g];
        for u in 0..g {
            for v in 0..g {
                if centered(u) > radius || centered(v) > radius {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..g {
                    for x in 0..g {
                        let ang = -tau * (u * y + v * x) as f64;
                        re += tokens[y * g + x][c] * ang.cos();
                        im += tokens[y * g + x][c] * ang.sin();
                    }
                }
                spec[u * g + v] = (re, im);
            }
        }
        for y in 0..g {
            for x in 0..g {
                let mut acc = 0.0;
                for u in 0..g {
                    for v in 0..g {
                        let (re, im) = spec[u * g + v];
                        let ang = tau * (u * y + v * x) as f64;
                        acc += re * ang.cos() - im * ang.sin();
                    }
                }
                out[y * g + x][c] = acc / (g * g) as f64;
            }
        }
    }
    out
}

fn bottleneck(model: &Model, prefix: &str, x: &Mat) -> Mat {
    let down = weights(model, &format!("{prefix}.down"));
    let up = weights(model, &format!("{prefix}.up"));
    mm(&map(&mm(x, &down), gelu), &up)
}

/// Per-patch logits computed with plain loops.
pub fn oracle_logits(model: &Model, image: &Image) -> Mat {
    let cfg = model.config();
    let (p, d, heads) = (cfg.patch_size, cfg.dim, cfg.heads);
    let g = cfg.image_size / p;
    let mut patches = Vec::new();
    for py in 0..g {
        for px in 0..g {
            let mut row = Vec::new();
            for y in 0..p {
                for x in 0..p {
                    row.extend_from_slice(image.pixel(py * p + y, px * p + x));
                }
            }
            patches.push(row);
        }
    }
    let mut t = add(
        &add_row(&mm(&patches, &weights(model, "backbone.patch.w")), &vector(model, "backbone.patch.b")),
        &weights(model, "backbone.pos"),
    );
    let has = |name: String| model.store.find(&name).is_some();
    let dh = d / heads;
    for i in 0..cfg.depth {
        let w = |n: &str| weights(model, &format!("backbone.block{i}.{n}"));
        let v = |n: &str| vector(model, &format!("backbone.block{i}.{n}"));
        let h = layer_norm(&t, &v("ln1.gamma"), &v("ln1.beta"));
        let sp = format!("toolbox.l{i}.spatial");
        let (mut wq, mut wv) = (w("attn.w_q"), w("attn.w_v"));
        if has(format!("{sp}.a_q")) {
            let tb = |n: &str| weights(model, &format!("{sp}.{n}"));
            wq = add(&wq, &mm(&tb("a_q"), &tb("b_q")));
            wv = add(&wv, &mm(&tb("a_v"), &tb("b_v")));
        }
        let q = add_row(&mm(&h, &wq), &v("attn.b_q"));
        let k = add_row(&mm(&h, &w("attn.w_k")), &v("attn.b_k"));
        let vv = add_row(&mm(&h, &wv), &v("attn.b_v"));
        let mut merged = vec![Vec::new(); t.len()];
        for hd in 0..heads {
            let scores = mm(&cols(&q, hd * dh, dh), &transpose(&cols(&k, hd * dh, dh)));
            let attn: Mat = scores
                .iter()
                .map(|r| softmax(&r.iter().map(|s| s / (dh as f64).sqrt()).collect::<Vec<_>>()))
                .collect();
            let o = mm(&attn, &cols(&vv, hd * dh, dh));
            for (m, r) in merged.iter_mut().zip(o) {
                m.extend(r);
            }
        }
        let t_attn = add(&t, &add_row(&mm(&merged, &w("attn.w_o")), &v("attn.b_o")));
        let h2 = layer_norm(&t_attn, &v("ln2.gamma"), &v("ln2.beta"));
        let mlp = add_row(&mm(&map(&add_row(&mm(&h2, &w("mlp.w_1")), &v("mlp.b_1")), gelu), &w("mlp.w_2")), &v("mlp.b_2"));
        let mut out = add(&t_attn, &mlp);
        let se = format!("toolbox.l{i}.semantic.adapter");
        if has(format!("{se}.down")) {
            out = add(&out, &bottleneck(model, &se, &h2));
        }
        let fq = format!("toolbox.l{i}.frequency");
        if has(format!("{fq}.router")) {
            let tb = model.toolbox.as_ref().unwrap();
            let (cutoff, scale) = (tb.dims.cutoff, tb.dims.scale);
            let route: Mat = mm(&out, &weights(model, &format!("{fq}.router"))).iter().map(|r| softmax(r)).collect();
            let low = oracle_lowpass(&out, g, cutoff);
            let high: Mat = out.iter().zip(&low).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
            let experts = [
                bottleneck(model, &format!("{fq}.expert_spatial"), &out),
                bottleneck(model, &format!("{fq}.expert_low"), &low),
                bottleneck(model, &format!("{fq}.expert_high"), &high),
            ];
            out = out
                .iter()
                .enumerate()
                .map(|(r, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, x)| x + scale * (0..3).map(|e| route[r][e] * experts[e][r][j]).sum::<f64>())
                        .collect()
                })
                .collect();
        }
        t = out;
    }
    let normed = layer_norm(&t, &vector(model, "backbone.final.gamma"), &vector(model, "backbone.final.beta"));
    add_row(&mm(&normed, &weights(model, "head.w")), &vector(model, "head.b"))
}

pub fn max_abs_diff(a: &Mat, b: &Tensor) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub const TINY_MANIFEST: &str = r#"
[dataset]
num_classes = 3
channels = 3
image_size_px = 16
patch_size_px = 4
shapes_min = 1
shapes_max = 3
train_count = 12
test_count = 6

[source]
name = "src"
palette = [[0.5, 0.5, 0.5], [0.9, 0.2, 0.2], [0.1, 0.3, 0.8]]
noise_sigma = 0.02
seed = 1

[[targets]]
name = "freq"
palette = [[0.5, 0.5, 0.5], [0.9, 0.2, 0.2], [0.1, 0.3, 0.8]]
artifact_amplitude = 0.3
artifact_frequency = 4.0
noise_sigma = 0.02
seed = 2

[[targets]]
name = "sem"
palette = [[0.6, 0.45, 0.5], [0.8, 0.35, 0.2], [0.2, 0.35, 0.7]]
noise_sigma = 0.02
seed = 3
"#;

pub const TINY_CONFIG: &str = r#"
mode = "fisher-gate"
seed = 0
dataset = "manifest.toml"
total_iterations = 40
batch_size = 2
learning_rate = 1e-2

[backbone]
image_size = 16
channels = 3
patch_size = 4
depth = 2
dim = 8
heads = 2
mlp_ratio = 2
num_classes = 3

[toolbox]
rank = 2
bottleneck = 3
freq_bottleneck = 2
cutoff = 0.5
scale = 0.1

[gate]
top_k = 2
accumulation_steps = 4
selection_count = 4

[pretrain]
iterations = 10
learning_rate = 1e-2
seed = 5
"#;

/// Writes the tiny manifest and run config into `dir`; returns the config path.
pub fn write_tiny(dir: &Path) -> std::path::PathBuf {
    std::fs::write(dir.join("manifest.toml"), TINY_MANIFEST).unwrap();
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    cfg
}


/// Linear softmax classifier whose weight blocks stand in for modules:
/// block `(layer, kind)` maps its own `features`-wide slice of the input to
/// the class logits.
pub struct SoftmaxToy {
    pub store: ParamStore,
    pub groups: Vec<(ModuleId, Vec<ParamId>)>,
    pub features: usize,
    pub classes: usize,
    pub loss_scale: f64,
}

#[derive(Clone, Debug)]
pub struct ToySample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl SoftmaxToy {
    pub fn new(layers: usize, features: usize, classes: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut groups = Vec::new();
        for l in 0..layers {
            for kind in ModuleKind::ALL {
                let id = store.add(format!("w.{l}.{kind}"), Tensor::randn(&[features, classes], std, rng), true);
                groups.push((ModuleId::new(l, kind), vec![id]));
            }
        }
        SoftmaxToy {
            store,
            groups,
            features,
            classes,
            loss_scale: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.groups.len() * self.features
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.classes];
        for (m, (_, ps)) in self.groups.iter().enumerate() {
            let w = self.store.value(ps[0]).data();
            for i in 0..self.features {
                for j in 0..self.classes {
                    z[j] += x[m * self.features + i] * w[i * self.classes + j];
                }
            }
        }
        z
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

impl GatedModel for SoftmaxToy {
    type Sample = ToySample;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn module_groups(&self) -> Vec<(ModuleId, Vec<ParamId>)> {
        self.groups.clone()
    }

    fn set_active(&mut self, active: &BTreeSet<ModuleId>) -> toolgate::Result<()> {
        for (id, ps) in &self.groups {
            for &p in ps {
                self.store.set_requires_grad(p, active.contains(id));
            }
        }
        Ok(())
    }

    fn sample_loss(&self, tape: &mut Tape, s: &ToySample) -> toolgate::Result<Var> {
        let mut logits: Option<Var> = None;
        for (m, (_, ps)) in self.groups.iter().enumerate() {
            let slice = s.x[m * self.features..(m + 1) * self.features].to_vec();
            let x = tape.constant(Tensor::new(&[1, self.features], slice)?);
            let w = tape.param(&self.store, ps[0]);
            let z = tape.matmul(x, w)?;
            logits = Some(match logits {
                Some(acc) => tape.add(acc, z)?,
                None => z,
            });
        }
        let ce = tape.cross_entropy(logits.expect("at least one module"), &[s.y])?;
        Ok(tape.scale(ce, self.loss_scale))
    }
}

/// Per-parameter mean squared gradient of the scaled cross-entropy, written
/// out from `∂L/∂W[i][j] = s · x_i · (p_j − [j = y])`.
pub fn brute_force_fisher(model: &SoftmaxToy, samples: &[ToySample]) -> Vec<Vec<f64>> {
    let (f, c) = (model.features, model.classes);
    let mut out = vec![vec![0.0; f * c]; model.groups.len()];
    for s in samples {
        let p = model.probs(&s.x);
        for (m, acc) in out.iter_mut().enumerate() {
            for i in 0..f {
                for j in 0..c {
                    let target = if j == s.y { 1.0 } else { 0.0 };
                    let g = model.loss_scale * s.x[m * f + i] * (p[j] - target);
                    acc[i * c + j] += g * g;
                }
            }
        }
    }
    for acc in out.iter_mut() {
        for v in acc.iter_mut() {
            *v /= samples.len() as f64;
        }
    }
    out
}

pub fn toy_samples(model: &SoftmaxToy, n: usize, rng: &mut impl Rng) -> Vec<ToySample> {
    (0..n)
        .map(|_| ToySample {
            x: (0..model.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            y: rng.random_range(0..model.classes),
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Draws `per_input` labels for each input from the model's own predictive
/// distribution.
pub fn model_sampled(model: &SoftmaxToy, inputs: &[Vec<f64>], per_input: usize, rng: &mut impl Rng) -> Vec<ToySample> {
    let mut samples = Vec::with_capacity(inputs.len() * per_input);
    for x in inputs {
        let p = model.probs(x);
        for _ in 0..per_input {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let y = p.iter().position(|pi| {
                cum += pi;
                u < cum
            });
            samples.push(ToySample {
                x: x.clone(),
                y: y.unwrap_or(p.len() - 1),
            });
        }
    }
    samples
}

/// Pearson correlation between `KL(p_θ ‖ p_{θ+δe_j}) / δ²` and the
/// accumulated Fisher diagonal over every weight of `model`.
pub fn kl_fisher_correlation(model: &mut SoftmaxToy, inputs: &[Vec<f64>], samples: &[ToySample], delta: f64) -> (f64, usize) {
    let mut acc = toolgate::fisher_gate::FisherAccumulator::new();
    toolgate::fisher_gate::accumulate_fisher(model, samples, &mut acc).unwrap();
    let fisher: Vec<f64> = model.groups.iter().flat_map(|(id, _)| acc.fisher_diag(*id).unwrap()).collect();
    let base: Vec<Vec<f64>> = inputs.iter().map(|x| model.probs(x)).collect();
    let mut ratios = Vec::new();
    for (_, ps) in model.groups.clone() {
        for j in 0..model.store.value(ps[0]).len() {
            model.store.value_mut(ps[0]).data_mut()[j] += delta;
            let kl: f64 = inputs
                .iter()
                .zip(&base)
                .map(|(x, p)| toolgate::fisher_gate::kl_categorical(p, &model.probs(x)).unwrap())
                .sum::<f64>()
                / inputs.len() as f64;
            model.store.value_mut(ps[0]).data_mut()[j] -= delta;
            ratios.push(kl / (delta * delta));
        }
    }
    (pearson(&ratios, &fisher), ratios.len())
}

/// Inputs whose feature `k` is uniform on `±(0.3 + 0.5k)`, so weights see
/// different curvature.
pub fn spread_inputs(model: &SoftmaxToy, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..model.input_dim())
                .map(|k| rng.random_range(-1.0..1.0) * (0.3 + 0.5 * k as f64))
                .collect()
        })
        .collect()
}
