mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use toolgate::fisher_gate::*;
use toolgate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use toolgate::toolbox::{ModuleId, ModuleKind};

#[test]
fn accumulated_fisher_matches_scalar_oracle() {
    let mut r = rng(1);
    for scale in [1.0, 0.1, 10.0] {
        let mut model = SoftmaxToy::new(2, 2, 3, 0.7, &mut r);
        model.loss_scale = scale;
        assert!(model.groups.len() * 6 <= 50);
        let samples = toy_samples(&model, 25, &mut r);
        let mut acc = FisherAccumulator::new();
        accumulate_fisher(&mut model, &samples, &mut acc).unwrap();
        assert_eq!(acc.samples_seen(), 25);
        let want = brute_force_fisher(&model, &samples);
        for (m, (id, _)) in model.groups.iter().enumerate() {
            let got = acc.fisher_diag(*id).unwrap();
            for (a, b) in got.iter().zip(&want[m]) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

/// A single scalar parameter θ with loss `4·θ`.
struct OneParam {
    store: ParamStore,
    theta: ParamId,
}

impl GatedModel for OneParam {
    type Sample = ();

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn module_groups(&self) -> Vec<(ModuleId, Vec<ParamId>)> {
        vec![(ModuleId::new(0, ModuleKind::Spatial), vec![self.theta])]
    }

    fn set_active(&mut self, active: &BTreeSet<ModuleId>) -> toolgate::Result<()> {
        self.store.set_requires_grad(self.theta, !active.is_empty());
        Ok(())
    }

    fn sample_loss(&self, tape: &mut Tape, _: &()) -> toolgate::Result<Var> {
        let t = tape.param(&self.store, self.theta);
        let s = tape.scale(t, 4.0);
        Ok(tape.sum(s))
    }
}

#[test]
fn gradient_four_gives_sixteen() {
    let mut store = ParamStore::new();
    let theta = store.add("theta", Tensor::new(&[1], vec![0.3]).unwrap(), true);
    let mut model = OneParam { store, theta };
    let mut acc = FisherAccumulator::new();
    accumulate_fisher(&mut model, &[(), (), ()], &mut acc).unwrap();
    let id = ModuleId::new(0, ModuleKind::Spatial);
    assert_eq!(acc.fisher_diag(id).unwrap(), vec![16.0]);
    assert_eq!(aggregate_module_scores(&acc).unwrap()[&id], 16.0);
    // measuring leaves the parameter alone and gradients cleared
    assert_eq!(model.store.value(theta).data(), &[0.3]);
    assert!(model.store.grad(theta).is_none_or(|g| g.data() == [0.0]));
}

#[test]
fn empty_sample_set_is_an_error() {
    let mut r = rng(2);
    let mut model = SoftmaxToy::new(1, 2, 3, 1.0, &mut r);
    let mut acc = FisherAccumulator::new();
    assert!(accumulate_fisher(&mut model, &[], &mut acc).is_err());
    assert!(aggregate_module_scores(&acc).is_err());
}

/// Labels drawn from the model itself make the squared-gradient average an
/// estimate of the true Fisher, whose diagonal is the KL curvature.
#[test]
fn kl_curvature_tracks_fisher_diagonal() {
    let mut r = rng(3);
    let mut model = SoftmaxToy::new(1, 2, 3, 0.8, &mut r);
    let inputs = spread_inputs(&model, 400, &mut r);
    let samples = model_sampled(&model, &inputs, 25, &mut r);
    let (rho, n) = kl_fisher_correlation(&mut model, &inputs, &samples, 1e-3);
    assert!(n >= 10);
    assert!(rho > 0.99, "correlation {rho}");
}

#[test]
fn selection_ignores_loss_scale_and_normalizes_per_kind() {
    let mut r = rng(4);
    let mut model = SoftmaxToy::new(3, 2, 3, 1.0, &mut r);
    let samples = toy_samples(&model, 20, &mut r);
    let mut acc = FisherAccumulator::new();
    let mut selections = Vec::new();
    for c in [1.0, 0.1, 10.0] {
        model.loss_scale = c;
        let table = gating_step(&mut model, &samples, 4, &mut acc, 0, 0).unwrap();
        let mut per_kind: BTreeMap<ModuleKind, f64> = BTreeMap::new();
        for (id, v) in &table.normalized {
            *per_kind.entry(id.kind).or_default() += v;
        }
        for total in per_kind.values() {
            assert!((total - 1.0).abs() < 1e-12);
        }
        selections.push(table.selected.clone());
    }
    assert_eq!(selections[0], selections[1]);
    assert_eq!(selections[0], selections[2]);
}

#[test]
fn gating_step_activates_exactly_the_selection() {
    let mut r = rng(5);
    let mut model = SoftmaxToy::new(2, 2, 3, 1.0, &mut r);
    let samples = toy_samples(&model, 10, &mut r);
    let before: Vec<Tensor> = model.store.ids().map(|id| model.store.value(id).clone()).collect();
    // start from a state where nothing is trainable: scores must not depend on it
    model.set_active(&BTreeSet::new()).unwrap();
    let mut acc = FisherAccumulator::new();
    let table = gating_step(&mut model, &samples, 2, &mut acc, 3, 120).unwrap();
    assert_eq!(table.raw.len(), 6);
    assert_eq!((table.event_index, table.iteration), (3, 120));
    let chosen = table.selected_set();
    assert_eq!(chosen.len(), 2);
    for (id, ps) in &model.groups {
        assert_eq!(model.store.requires_grad(ps[0]), chosen.contains(id));
    }
    for (id, old) in model.store.ids().zip(before) {
        assert!(model.store.value(id).bit_eq(&old));
    }
    // asking for more than exist clamps to all modules
    let table = gating_step(&mut model, &samples, 50, &mut acc, 4, 0).unwrap();
    assert_eq!(table.selected.len(), 6);
}

#[test]
fn ties_resolve_by_layer_then_kind() {
    use ModuleKind::*;
    let raw: BTreeMap<ModuleId, f64> = [
        (ModuleId::new(1, Frequency), 2.0),
        (ModuleId::new(0, Frequency), 2.0),
        (ModuleId::new(1, Spatial), 1.0),
        (ModuleId::new(0, Spatial), 1.0),
        (ModuleId::new(0, Semantic), 3.0),
        (ModuleId::new(1, Semantic), 3.0),
    ]
    .into_iter()
    .collect();
    let norm = normalize_scores(&raw);
    // every normalized score is 0.5
    let picked = select_top_k(&norm, 4);
    assert_eq!(
        picked,
        vec![
            ModuleId::new(0, Spatial),
            ModuleId::new(0, Semantic),
            ModuleId::new(0, Frequency),
            ModuleId::new(1, Spatial)
        ]
    );
}
