use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fisher_gate::{gating_step, write_importance_csv, FisherAccumulator, ImportanceTable};
use crate::model::Model;
use crate::synth::{generate_scene, sample_rng, Benchmark, DatasetConfig, Sample, Split};
use crate::tensor::{ParamId, ParamStore, Tape};
use crate::toolbox::ModuleId;
use crate::train::checkpoint::{Checkpoint, NamedMoments, NamedTensor, RngState};
use crate::train::config::{Mode, TrainConfig};
use crate::train::metrics::{write_metrics_csv, ConfusionMatrix, MetricsRecord};
use crate::train::optim::{AdamW, Moments};

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const FISHER_STREAM: u64 = 2;

/// Errors out when the backbone cannot consume the dataset's images.
pub fn check_compatible(cfg: &TrainConfig, data: &DatasetConfig) -> Result<()> {
    let b = &cfg.backbone;
    let pairs = [
        ("image_size", b.image_size, data.image_size_px),
        ("channels", b.channels, data.channels),
        ("patch_size", b.patch_size, data.patch_size_px),
        ("num_classes", b.num_classes, data.num_classes),
    ];
    for (what, model, dataset) in pairs {
        if model != dataset {
            return Err(Error::Config(format!("backbone {what} = {model} but dataset has {dataset}")));
        }
    }
    Ok(())
}

/// Mean loss over `samples`, gradients accumulated into the store.
fn batch_backward(model: &mut Model, samples: &[&Sample]) -> Result<f64> {
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, s)?;
        let scaled = tape.scale(loss, scale);
        total += tape.value(loss).data()[0] * scale;
        tape.backward(scaled, &mut model.store)?;
    }
    Ok(total)
}

/// Fully tunes a fresh backbone and head on the benchmark's pretraining
/// distribution. Samples are generated on the fly and never repeat.
pub fn pretrain(cfg: &TrainConfig, bench: &Benchmark) -> Result<Model> {
    check_compatible(cfg, &bench.config)?;
    let p = &cfg.pretrain;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut model = Model::new(cfg.backbone.clone(), &mut rng)?;
    let mut opt = AdamW::new(p.learning_rate, cfg.weight_decay);
    let b = cfg.batch_size;
    for it in 0..p.iterations {
        let batch: Vec<Sample> = (0..b)
            .map(|j| {
                let index = (it * b + j) as u64;
                generate_scene(&bench.pretrain, &bench.config, &mut sample_rng(bench.pretrain.seed, Split::Pretrain, index))
            })
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let loss = batch_backward(&mut model, &refs)?;
        opt.step(&mut model.store);
        model.store.zero_grad();
        if it % 500 == 0 {
            log::debug!("pretrain {it}/{}: loss {loss:.4}", p.iterations);
        }
    }
    Ok(model)
}

pub fn confusion(model: &Model, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for s in samples {
        cm.add(&s.labels, &model.predict(&s.image)?)?;
    }
    Ok(cm)
}

/// One metrics record per target domain.
pub fn evaluate(model: &Model, bench: &Benchmark, iteration: usize) -> Result<Vec<MetricsRecord>> {
    bench
        .targets
        .iter()
        .map(|t| Ok(MetricsRecord::from_confusion(iteration, &t.spec.name, &confusion(model, &t.test)?)))
        .collect()
}

fn rng_state(r: &ChaCha8Rng) -> RngState {
    RngState {
        seed: r.get_seed(),
        stream: r.get_stream(),
        word_pos: r.get_word_pos(),
    }
}

fn rng_from(s: &RngState) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    r.set_word_pos(s.word_pos);
    r
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A resumable fine-tuning run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    data_rng: ChaCha8Rng,
    fisher_rng: ChaCha8Rng,
    iteration: usize,
    accumulator: FisherAccumulator,
    ever_trainable: BTreeSet<ParamId>,
    pub history: Vec<ImportanceTable>,
    pub metrics: Vec<MetricsRecord>,
    pub losses: Vec<f64>,
}

impl Trainer {
    /// Starts a run from a pretrained `base`. The head is redrawn and the
    /// toolbox attached from the run seed, so every mode sharing a seed
    /// starts from identical weights.
    pub fn new(config: TrainConfig, base: &Model) -> Result<Self> {
        config.validate()?;
        if base.config() != &config.backbone {
            return Err(Error::Config("pretrained backbone does not match the configured backbone".into()));
        }
        if base.toolbox.is_some() {
            return Err(Error::Config("base model already carries a toolbox".into()));
        }
        let mut model = base.clone();
        model.store.zero_grad();
        let mut init = stream(config.seed, INIT_STREAM);
        model.head.reinit(&mut model.store, &mut init);
        let kinds = config.mode.kinds();
        if !kinds.is_empty() {
            model.attach_toolbox(config.toolbox.clone(), &kinds, &mut init)?;
        }
        model.backbone.set_trainable(&mut model.store, config.mode == Mode::FullTuning);
        for p in model.head.params() {
            model.store.set_requires_grad(p, true);
        }
        if config.mode == Mode::AllModules {
            if let Some(tb) = model.toolbox.as_mut() {
                tb.activate_all(&mut model.store)?;
            }
        }
        let mut t = Trainer {
            optimizer: AdamW::new(config.learning_rate, config.weight_decay),
            data_rng: stream(config.seed, DATA_STREAM),
            fisher_rng: stream(config.seed, FISHER_STREAM),
            config,
            model,
            iteration: 0,
            accumulator: FisherAccumulator::new(),
            ever_trainable: BTreeSet::new(),
            history: Vec::new(),
            metrics: Vec::new(),
            losses: Vec::new(),
        };
        t.note_trainable();
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn total_iterations(&self) -> usize {
        self.config.total_iterations
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.total_iterations && self.metrics.last().map(|r| r.iteration) == Some(self.iteration)
    }

    pub fn active_modules(&self) -> BTreeSet<ModuleId> {
        self.model.toolbox.as_ref().map(|t| t.active().clone()).unwrap_or_default()
    }

    /// Scalars currently receiving updates.
    pub fn trainable_now(&self) -> usize {
        self.model.store.trainable_count()
    }

    /// Scalars that have been trainable at any point of the run.
    pub fn trainable_cumulative(&self) -> usize {
        self.ever_trainable.iter().map(|&id| self.model.store.value(id).len()).sum()
    }

    fn note_trainable(&mut self) {
        let store = &self.model.store;
        self.ever_trainable.extend(store.ids().filter(|&id| store.requires_grad(id)));
    }

    /// Final-evaluation mIoU averaged over target domains.
    pub fn final_target_miou(&self) -> Option<f64> {
        let last = self.metrics.last()?.iteration;
        let fin: Vec<f64> = self.metrics.iter().filter(|r| r.iteration == last).map(|r| r.miou).collect();
        Some(fin.iter().sum::<f64>() / fin.len() as f64)
    }

    /// Work scheduled at the start of iteration `i`, before its update.
    fn boundary(&mut self, bench: &Benchmark) -> Result<()> {
        let i = self.iteration;
        let n = self.config.eval_interval();
        if i > 0 && i.is_multiple_of(n) {
            let recs = evaluate(&self.model, bench, i)?;
            self.metrics.extend(recs);
        }
        let event = i / n;
        if self.config.mode.is_gated() && i.is_multiple_of(n) && event < self.config.gate.selection_count {
            let m = self.config.gate.accumulation_steps;
            let samples: Vec<Sample> = (0..m)
                .map(|_| bench.train[self.fisher_rng.random_range(0..bench.train.len())].clone())
                .collect();
            let table = gating_step(&mut self.model, &samples, self.config.gate.top_k, &mut self.accumulator, event, i)?;
            log::info!(
                "gate event {event} at iteration {i}: {}",
                table.selected.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" ")
            );
            self.history.push(table);
            self.note_trainable();
        }
        Ok(())
    }

    fn train_step(&mut self, bench: &Benchmark) -> Result<()> {
        let batch: Vec<&Sample> = (0..self.config.batch_size)
            .map(|_| &bench.train[self.data_rng.random_range(0..bench.train.len())])
            .collect();
        let loss = batch_backward(&mut self.model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at iteration {}", self.iteration)));
        }
        self.optimizer.step(&mut self.model.store);
        self.model.store.zero_grad();
        self.losses.push(loss);
        Ok(())
    }

    /// Advances to `stop` (clamped to the run length). Reaching the end runs
    /// the final evaluation.
    pub fn run_until(&mut self, bench: &Benchmark, stop: usize) -> Result<()> {
        check_compatible(&self.config, &bench.config)?;
        if bench.train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let stop = stop.min(self.config.total_iterations);
        while self.iteration < stop {
            self.boundary(bench)?;
            self.train_step(bench)?;
            self.iteration += 1;
        }
        if self.iteration == self.config.total_iterations && !self.is_finished() {
            let recs = evaluate(&self.model, bench, self.iteration)?;
            self.metrics.extend(recs);
        }
        Ok(())
    }

    pub fn run(&mut self, bench: &Benchmark) -> Result<()> {
        self.run_until(bench, self.config.total_iterations)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        let params = store
            .ids()
            .map(|id| NamedTensor {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
                requires_grad: store.requires_grad(id),
                data: store.value(id).data().to_vec(),
            })
            .collect();
        let moments = self
            .optimizer
            .state
            .iter()
            .map(|(id, m)| NamedMoments {
                name: store.name(*id).to_string(),
                step: m.step,
                m: m.m.clone(),
                v: m.v.clone(),
            })
            .collect();
        Checkpoint {
            config: self.config.to_toml(),
            iteration: self.iteration as u64,
            params,
            moments,
            data_rng: rng_state(&self.data_rng),
            fisher_rng: rng_state(&self.fisher_rng),
            active: self.active_modules().into_iter().collect(),
            ever_trainable: self.ever_trainable.iter().map(|&id| store.name(id).to_string()).collect(),
            history: self.history.clone(),
            metrics: self.metrics.clone(),
            losses: self.losses.clone(),
        }
    }

    /// Rebuilds a run exactly as it was when `ck` was taken.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&ck.config, Path::new("/"))?;
        config.validate()?;
        // Values are overwritten below; this rng only shapes the skeleton.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(config.backbone.clone(), &mut scratch)?;
        let kinds = config.mode.kinds();
        if !kinds.is_empty() {
            model.attach_toolbox(config.toolbox.clone(), &kinds, &mut scratch)?;
        }
        if ck.params.len() != model.store.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        let active: BTreeSet<ModuleId> = ck.active.iter().copied().collect();
        if let Some(tb) = model.toolbox.as_mut() {
            tb.set_active(&mut model.store, &active)?;
        }
        let lookup = |store: &ParamStore, name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Integrity(format!("unknown tensor '{name}'")))
        };
        for p in &ck.params {
            let id = lookup(&model.store, &p.name)?;
            let slot = model.store.value_mut(id);
            if slot.shape() != p.shape.as_slice() {
                return Err(Error::Integrity(format!("tensor '{}' has shape {:?}, expected {:?}", p.name, p.shape, slot.shape())));
            }
            slot.data_mut().copy_from_slice(&p.data);
            model.store.set_requires_grad(id, p.requires_grad);
        }
        let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
        for m in &ck.moments {
            let id = lookup(&model.store, &m.name)?;
            let n = model.store.value(id).len();
            if m.m.len() != n || m.v.len() != n {
                return Err(Error::Integrity(format!("moments for '{}' have the wrong length", m.name)));
            }
            optimizer.state.insert(
                id,
                Moments {
                    step: m.step,
                    m: m.m.clone(),
                    v: m.v.clone(),
                },
            );
        }
        let ever_trainable = ck
            .ever_trainable
            .iter()
            .map(|n| lookup(&model.store, n))
            .collect::<Result<_>>()?;
        Ok(Trainer {
            optimizer,
            data_rng: rng_from(&ck.data_rng),
            fisher_rng: rng_from(&ck.fisher_rng),
            config,
            model,
            iteration: ck.iteration as usize,
            accumulator: FisherAccumulator::new(),
            ever_trainable,
            history: ck.history.clone(),
            metrics: ck.metrics.clone(),
            losses: ck.losses.clone(),
        })
    }

    /// Writes `config.toml`, `metrics.csv`, `importance.csv` (gated modes),
    /// `losses.csv` and `final.ckpt` into `dir`.
    pub fn write_run_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        let mut w = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
        write_metrics_csv(&mut w, self.config.backbone.num_classes, &self.metrics)?;
        if self.config.mode.is_gated() {
            let mut w = BufWriter::new(fs::File::create(dir.join("importance.csv"))?);
            write_importance_csv(&mut w, &self.history)?;
        }
        let mut losses = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            losses.push_str(&format!("{i},{l}\n"));
        }
        fs::write(dir.join("losses.csv"), losses)?;
        self.checkpoint().save(&dir.join("final.ckpt"))
    }
}
