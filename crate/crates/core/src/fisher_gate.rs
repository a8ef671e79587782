//! Fisher-guided module selection.
//!
//! At each gating event every toolbox module is temporarily made trainable,
//! the empirical diagonal Fisher information (mean squared per-sample loss
//! gradient) is measured over `M` samples without any parameter update,
//! scores are summed per module, normalized within each module kind across
//! layers, and only the global top-k modules stay trainable until the next
//! event.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::Sample;
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use crate::toolbox::{ModuleId, ModuleKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub top_k: usize,
    /// Samples per Fisher estimate (`M`).
    pub accumulation_steps: usize,
    /// Number of gating events over the run.
    pub selection_count: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            top_k: 18,
            accumulation_steps: 100,
            selection_count: 10,
        }
    }
}

impl GateConfig {
    pub fn validate(&self, total_iterations: usize) -> Result<()> {
        if self.top_k == 0 || self.accumulation_steps == 0 || self.selection_count == 0 {
            return Err(Error::Config("top_k, accumulation_steps and selection_count must be >= 1".into()));
        }
        if self.interval(total_iterations) == 0 {
            return Err(Error::Config(format!(
                "selection_count {} exceeds total_iterations {total_iterations}",
                self.selection_count
            )));
        }
        Ok(())
    }

    /// Re-selection interval `N = floor(T / selection_count)`.
    pub fn interval(&self, total_iterations: usize) -> usize {
        total_iterations / self.selection_count
    }

    /// Iterations at which gating happens: 0, N, 2N, … (selection_count of them).
    pub fn schedule(&self, total_iterations: usize) -> Vec<usize> {
        let n = self.interval(total_iterations);
        (0..self.selection_count).map(|e| e * n).collect()
    }
}

/// Anything whose toolbox parameters can be scored and gated.
pub trait GatedModel {
    type Sample;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Parameters of every gateable module, in module order.
    fn module_groups(&self) -> Vec<(ModuleId, Vec<ParamId>)>;
    fn set_active(&mut self, active: &BTreeSet<ModuleId>) -> Result<()>;
    fn sample_loss(&self, tape: &mut Tape, sample: &Self::Sample) -> Result<Var>;

    fn module_ids(&self) -> Vec<ModuleId> {
        self.module_groups().into_iter().map(|(id, _)| id).collect()
    }
}

impl GatedModel for Model {
    type Sample = Sample;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn module_groups(&self) -> Vec<(ModuleId, Vec<ParamId>)> {
        match &self.toolbox {
            Some(tb) => tb
                .ids()
                .into_iter()
                .map(|id| (id, tb.module_params(id).expect("registered id")))
                .collect(),
            None => Vec::new(),
        }
    }

    fn set_active(&mut self, active: &BTreeSet<ModuleId>) -> Result<()> {
        match self.toolbox.as_mut() {
            Some(tb) => tb.set_active(&mut self.store, active),
            None if active.is_empty() => Ok(()),
            None => Err(Error::UnknownModule(format!("{:?} (no toolbox attached)", active.first()))),
        }
    }

    fn sample_loss(&self, tape: &mut Tape, sample: &Sample) -> Result<Var> {
        self.loss(tape, sample)
    }
}

/// Per-parameter running sums of squared gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FisherAccumulator {
    sums: BTreeMap<ModuleId, Vec<Vec<f64>>>,
    samples_seen: usize,
}

impl FisherAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.sums.clear();
        self.samples_seen = 0;
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    fn add_squared_grads(&mut self, groups: &[(ModuleId, Vec<ParamId>)], store: &ParamStore) {
        for (id, params) in groups {
            let entry = self
                .sums
                .entry(*id)
                .or_insert_with(|| params.iter().map(|&p| vec![0.0; store.value(p).len()]).collect());
            for (sum, &p) in entry.iter_mut().zip(params) {
                if let Some(g) = store.grad(p) {
                    sum.iter_mut().zip(g.data()).for_each(|(s, v)| *s += v * v);
                }
            }
        }
    }

    /// Averaged squared gradients `F̂` for one module, flattened in
    /// parameter order.
    pub fn fisher_diag(&self, id: ModuleId) -> Option<Vec<f64>> {
        if self.samples_seen == 0 {
            return None;
        }
        let n = self.samples_seen as f64;
        self.sums
            .get(&id)
            .map(|params| params.iter().flatten().map(|s| s / n).collect())
    }

    pub fn modules(&self) -> impl Iterator<Item = ModuleId> + '_ {
        self.sums.keys().copied()
    }
}

/// Adds the squared per-sample gradients of all module parameters over
/// `samples` to `acc`. One backward per sample; no parameter is updated and
/// gradients are left zeroed.
pub fn accumulate_fisher<M: GatedModel>(model: &mut M, samples: &[M::Sample], acc: &mut FisherAccumulator) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySamples("accumulate_fisher"));
    }
    let groups = model.module_groups();
    model.store_mut().zero_grad();
    for sample in samples {
        let mut tape = Tape::new();
        let loss = model.sample_loss(&mut tape, sample)?;
        tape.backward(loss, model.store_mut())?;
        acc.add_squared_grads(&groups, model.store());
        model.store_mut().zero_grad();
        acc.samples_seen += 1;
    }
    Ok(())
}

/// `Ŝ` per module: the sum of `F̂` over the module's parameters.
pub fn aggregate_module_scores(acc: &FisherAccumulator) -> Result<BTreeMap<ModuleId, f64>> {
    if acc.samples_seen == 0 {
        return Err(Error::EmptySamples("aggregate_module_scores"));
    }
    Ok(acc
        .modules()
        .map(|id| (id, acc.fisher_diag(id).expect("seen").iter().sum()))
        .collect())
}

/// Divides each score by its kind's total over layers. A kind with zero
/// total gets all-zero scores.
pub fn normalize_scores(raw: &BTreeMap<ModuleId, f64>) -> BTreeMap<ModuleId, f64> {
    let mut totals: BTreeMap<ModuleKind, f64> = BTreeMap::new();
    for (id, s) in raw {
        *totals.entry(id.kind).or_default() += s;
    }
    raw.iter()
        .map(|(id, s)| {
            let total = totals[&id.kind];
            (*id, if total > 0.0 { s / total } else { 0.0 })
        })
        .collect()
}

/// The `k` highest normalized scores across all kinds and layers; ties go
/// to the lower layer, then Spatial < Semantic < Frequency.
pub fn select_top_k(normalized: &BTreeMap<ModuleId, f64>, k: usize) -> Vec<ModuleId> {
    let mut k = k;
    if k > normalized.len() {
        warn!("top_k {k} exceeds the {} available modules; clamping", normalized.len());
        k = normalized.len();
    }
    let mut ranked: Vec<(ModuleId, f64)> = normalized.iter().map(|(id, s)| (*id, *s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked.into_iter().map(|(id, _)| id).collect()
}

/// Snapshot of one gating event.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    pub event_index: usize,
    pub iteration: usize,
    pub raw: BTreeMap<ModuleId, f64>,
    pub normalized: BTreeMap<ModuleId, f64>,
    pub selected: Vec<ModuleId>,
}

impl ImportanceTable {
    pub fn selected_set(&self) -> BTreeSet<ModuleId> {
        self.selected.iter().copied().collect()
    }
}

/// One full gating event: measure Fisher on `samples` with every module
/// enabled, score, select, and leave only the selection trainable.
pub fn gating_step<M: GatedModel>(
    model: &mut M,
    samples: &[M::Sample],
    top_k: usize,
    acc: &mut FisherAccumulator,
    event_index: usize,
    iteration: usize,
) -> Result<ImportanceTable> {
    acc.reset();
    let all: BTreeSet<ModuleId> = model.module_ids().into_iter().collect();
    model.set_active(&all)?;
    accumulate_fisher(model, samples, acc)?;
    let raw = aggregate_module_scores(acc)?;
    let normalized = normalize_scores(&raw);
    let selected = select_top_k(&normalized, top_k);
    model.set_active(&selected.iter().copied().collect())?;
    Ok(ImportanceTable {
        event_index,
        iteration,
        raw,
        normalized,
        selected,
    })
}

/// `Σ p log(p/q)` over a shared support.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_categorical", &[p.len()], &[q.len()]));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return Err(Error::Numeric(format!("invalid probabilities {pi}, {qi}")));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Numeric("q has zero mass where p is positive".into()));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

pub const IMPORTANCE_CSV_HEADER: &str = "event_index,iteration,layer,kind,raw_score,normalized_score,selected";

/// One row per (event, layer, kind).
pub fn write_importance_csv<W: Write>(w: &mut W, history: &[ImportanceTable]) -> Result<()> {
    writeln!(w, "{IMPORTANCE_CSV_HEADER}")?;
    for table in history {
        let selected = table.selected_set();
        for (id, raw) in &table.raw {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                table.event_index,
                table.iteration,
                id.layer,
                id.kind,
                raw,
                table.normalized.get(id).copied().unwrap_or(0.0),
                u8::from(selected.contains(id))
            )?;
        }
    }
    Ok(())
}

/// Per kind, the sum over events of the normalized scores of selected
/// modules.
pub fn selected_importance_by_kind(history: &[ImportanceTable]) -> BTreeMap<ModuleKind, f64> {
    let mut out: BTreeMap<ModuleKind, f64> = BTreeMap::new();
    for table in history {
        for id in &table.selected {
            *out.entry(id.kind).or_default() += table.normalized.get(id).copied().unwrap_or(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(layer: usize, kind: ModuleKind) -> ModuleId {
        ModuleId::new(layer, kind)
    }

    #[test]
    fn normalize_examples() {
        let raw: BTreeMap<ModuleId, f64> = [
            (id(0, ModuleKind::Semantic), 2.0),
            (id(1, ModuleKind::Semantic), 3.0),
            (id(2, ModuleKind::Semantic), 5.0),
            (id(0, ModuleKind::Spatial), 4.0),
            (id(0, ModuleKind::Frequency), 0.0),
            (id(1, ModuleKind::Frequency), 0.0),
        ]
        .into();
        let n = normalize_scores(&raw);
        assert!((n[&id(0, ModuleKind::Semantic)] - 0.2).abs() < 1e-15);
        assert!((n[&id(1, ModuleKind::Semantic)] - 0.3).abs() < 1e-15);
        assert!((n[&id(2, ModuleKind::Semantic)] - 0.5).abs() < 1e-15);
        assert_eq!(n[&id(0, ModuleKind::Spatial)], 1.0);
        assert_eq!(n[&id(1, ModuleKind::Frequency)], 0.0);

        let scaled: BTreeMap<ModuleId, f64> = raw
            .iter()
            .map(|(k, v)| (*k, if k.kind == ModuleKind::Semantic { v * 7.0 } else { *v }))
            .collect();
        assert_eq!(normalize_scores(&scaled), n);
    }

    #[test]
    fn top_k_examples() {
        let scores: BTreeMap<ModuleId, f64> = [
            (id(0, ModuleKind::Spatial), 0.9),
            (id(0, ModuleKind::Semantic), 0.5),
            (id(0, ModuleKind::Frequency), 0.1),
        ]
        .into();
        assert_eq!(
            select_top_k(&scores, 2),
            vec![id(0, ModuleKind::Spatial), id(0, ModuleKind::Semantic)]
        );
        assert_eq!(select_top_k(&scores, 10).len(), 3);

        let ties: BTreeMap<ModuleId, f64> = (0..2)
            .flat_map(|l| ModuleKind::ALL.map(|k| (id(l, k), 0.5)))
            .collect();
        assert_eq!(
            select_top_k(&ties, 3),
            vec![
                id(0, ModuleKind::Spatial),
                id(0, ModuleKind::Semantic),
                id(0, ModuleKind::Frequency)
            ]
        );
    }

    #[test]
    fn kl_examples() {
        let p = [0.3, 0.7];
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
        assert!((kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let q = [0.4, 0.6];
        let expect = 0.3 * (0.3f64 / 0.4).ln() + 0.7 * (0.7f64 / 0.6).ln();
        assert!((kl_categorical(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!(matches!(kl_categorical(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn schedule_and_interval() {
        let cfg = GateConfig {
            top_k: 18,
            accumulation_steps: 100,
            selection_count: 10,
        };
        assert_eq!(cfg.schedule(30_000), (0..10).map(|e| e * 3000).collect::<Vec<_>>());
        assert!(cfg.validate(5).is_err());
        assert!(GateConfig { top_k: 0, ..cfg }.validate(100).is_err());
    }

    #[test]
    fn aggregate_needs_samples() {
        assert!(matches!(
            aggregate_module_scores(&FisherAccumulator::new()),
            Err(Error::EmptySamples(_))
        ));
    }

    #[test]
    fn csv_header_and_rows() {
        let table = ImportanceTable {
            event_index: 0,
            iteration: 0,
            raw: [(id(0, ModuleKind::Spatial), 2.0), (id(1, ModuleKind::Spatial), 6.0)].into(),
            normalized: [(id(0, ModuleKind::Spatial), 0.25), (id(1, ModuleKind::Spatial), 0.75)].into(),
            selected: vec![id(1, ModuleKind::Spatial)],
        };
        let mut buf = Vec::new();
        write_importance_csv(&mut buf, &[table]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "event_index,iteration,layer,kind,raw_score,normalized_score,selected\n\
             0,0,0,spatial,2,0.25,0\n\
             0,0,1,spatial,6,0.75,1\n"
        );
    }
}
