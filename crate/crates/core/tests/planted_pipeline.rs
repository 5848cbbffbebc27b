//! Capture, score, plan, prune and evaluate on the planted model using only
//! the core crate.

use neurosel_core::capture::capture_activations;
use neurosel_core::pruner::{apply_prune, plan_prune, PruneMode};
use neurosel_core::selectivity::{compute_selectivity, layer_distribution};
use neurosel_core::synthlab::{
    build_planted_model, make_mixed_prompts, task_accuracy, NeuronRole, PlantedModel, PlantedSpec, Task,
};

fn planted() -> PlantedModel {
    build_planted_model(&PlantedSpec::default()).unwrap()
}

#[test]
fn layer0_scores_separate_planted_roles() {
    let pm = planted();
    let acts = capture_activations(&pm.model, &make_mixed_prompts(64)).unwrap();
    let scores = compute_selectivity(&acts, 1e-6).unwrap();
    let s = scores.layer(0);
    let targets = &pm.neurons_with(NeuronRole::Target)[0];
    let distractors = &pm.neurons_with(NeuronRole::Distractor)[0];
    let min_t = targets.iter().map(|&i| s[i]).fold(f64::INFINITY, f64::min);
    let max_d = distractors.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
    assert!(min_t > max_d, "min target {min_t} <= max distractor {max_d}");
    let counts = layer_distribution(&scores);
    assert_eq!(counts.len(), 2);
}

#[test]
fn pruning_modes_order_target_accuracy() {
    let pm = planted();
    let acts = capture_activations(&pm.model, &make_mixed_prompts(64)).unwrap();
    let scores = compute_selectivity(&acts, 1e-6).unwrap();
    let acc = |mode, seed| {
        let plan = plan_prune(&scores, 0.25, 8, mode, seed).unwrap();
        let pruned = apply_prune(&pm.model, &plan).unwrap();
        task_accuracy(&pruned, None, Task::Digit, None).unwrap()
    };
    let sel = acc(PruneMode::Selective, None);
    let rnd = acc(PruneMode::Random, Some(42));
    let rev = acc(PruneMode::Reverse, None);
    assert_eq!(task_accuracy(&pm.model, None, Task::Digit, None).unwrap(), 1.0);
    assert!(sel >= rnd && rnd >= rev, "{sel} {rnd} {rev}");
    assert_eq!(sel, 1.0);
    assert_eq!(rev, 0.0);
}

#[test]
fn zeroing_distractors_keeps_targets() {
    let pm = planted();
    let d = pm.neurons_with(NeuronRole::Distractor);
    assert_eq!(task_accuracy(&pm.model, None, Task::Digit, Some(&d)).unwrap(), 1.0);
    let t = pm.neurons_with(NeuronRole::Target);
    assert_eq!(task_accuracy(&pm.model, None, Task::Letter, Some(&t)).unwrap(), 1.0);
}
