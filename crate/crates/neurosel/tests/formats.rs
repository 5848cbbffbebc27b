use neurosel::container::ALIGN;
use neurosel::error::{exit, FormatError, NsError};
use neurosel::files::{
    activations_from_bytes, activations_to_bytes, adapter_from_bytes, adapter_to_bytes, load_plan, load_scores,
    model_from_bytes, model_to_bytes, save_plan, save_scores, ScoresFile,
};
use neurosel_core::capture::{ActivationTensor, Label};
use neurosel_core::finetune::{attach_adapters, LoraConfig};
use neurosel_core::model::{ModelBundle, ModelConfig};
use neurosel_core::pruner::{plan_prune, PruneMode};
use neurosel_core::rng::SplitMix64;
use neurosel_core::selectivity::SelectivityScores;
use proptest::prelude::*;
use std::path::Path;

fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        vocab_size: 262,
        norm_eps: 1e-6,
        rope_theta: 10000.0,
        max_seq_len: 32,
        bos_id: 1,
        eos_id: 2,
        pad_id: 0,
    }
}

fn header_end(bytes: &[u8]) -> usize {
    bytes.iter().position(|&b| b == b'\n').unwrap()
}

#[test]
fn model_file_layout() {
    let m = ModelBundle::<f32>::random(cfg(), 1, 1.0).unwrap();
    let bytes = model_to_bytes(&m);
    assert_eq!(&bytes[..4], b"NSCM");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let nl = header_end(&bytes);
    let header: serde_json::Value = serde_json::from_slice(&bytes[6..nl]).unwrap();
    assert_eq!(header["config"]["d_ff"], 16);
    let tensors = header["tensors"].as_array().unwrap();
    assert_eq!(tensors.len(), m.config.tensor_names().len());
    let payload_start = bytes.len() - tensors.iter().map(|t| t["byte_len"].as_u64().unwrap() as usize).sum::<usize>();
    assert_eq!(payload_start % ALIGN, 0);
    assert!(bytes[nl + 1..payload_start].iter().all(|&b| b == b' '));
    let norm = tensors.iter().find(|t| t["name"] == "final_norm").unwrap();
    assert_eq!(norm["shape"].as_array().unwrap().len(), 1);

    let back = model_from_bytes(Path::new("m"), &bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(model_to_bytes(&back), bytes);
}

fn format_error(e: NsError) -> FormatError {
    assert_eq!(e.exit_code(), exit::FORMAT);
    match e {
        NsError::Format { source, .. } => source,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn corrupt_model_files() {
    let m = ModelBundle::<f32>::random(cfg(), 2, 1.0).unwrap();
    let bytes = model_to_bytes(&m);
    let p = Path::new("m.nscm");

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NSAC");
    assert!(matches!(format_error(model_from_bytes(p, &bad).unwrap_err()), FormatError::Magic { .. }));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(format_error(model_from_bytes(p, &bad).unwrap_err()), FormatError::Version { .. }));

    let short = &bytes[..bytes.len() - 4];
    assert!(model_from_bytes(p, short).is_err());

    let nl = header_end(&bytes);
    let mut bad = bytes.clone();
    bad[nl - 3] = b'#';
    assert!(matches!(format_error(model_from_bytes(p, &bad).unwrap_err()), FormatError::Header(_)));
}

#[test]
fn activations_keep_f64() {
    let mut rng = SplitMix64::new(4);
    let data: Vec<f64> = (0..3 * 2 * 5).map(|_| rng.normal().abs()).collect();
    let acts = ActivationTensor::new(
        2,
        5,
        vec![Label::Target, Label::Distractor, Label::Target],
        data,
        "abc".into(),
    )
    .unwrap();
    let bytes = activations_to_bytes(&acts);
    assert_eq!(&bytes[..4], b"NSAC");
    assert_eq!(activations_from_bytes(Path::new("a"), &bytes).unwrap(), acts);
}

#[test]
fn adapters_round_trip() {
    let m = ModelBundle::<f32>::random(cfg(), 3, 1.0).unwrap();
    let mut a = attach_adapters(&m, &LoraConfig::math_preset(), 9).unwrap();
    let mut rng = SplitMix64::new(1);
    for f in &mut a.factors {
        f.b.data_mut().iter_mut().for_each(|v| *v = rng.normal() as f32);
    }
    let bytes = adapter_to_bytes(&a);
    assert_eq!(&bytes[..4], b"NSLA");
    assert_eq!(adapter_from_bytes(Path::new("x"), &bytes).unwrap(), a);
}

fn scores(values: Vec<f64>, d_ff: usize) -> SelectivityScores {
    let n = values.len();
    SelectivityScores {
        eps: 1e-6,
        n_layers: n / d_ff,
        d_ff,
        n_target: 3,
        n_distractor: 4,
        s: values,
        mu_target: vec![0.25; n],
        mu_distractor: vec![1.0 / 3.0; n],
        sigma: vec![0.1; n],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_round_trip_exactly(values in proptest::collection::vec(-1e6f64..1e6, 8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.json");
        let s = scores(values, 4);
        save_scores(&s, &path).unwrap();
        let back = load_scores(&path).unwrap();
        prop_assert_eq!(&back, &s);
        for (a, b) in back.s.iter().zip(&s.s) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn scores_file_field_names() {
    let s = scores(vec![0.5, -0.5, 1.0, 0.0], 2);
    let v = serde_json::to_value(ScoresFile::from(&s)).unwrap();
    assert_eq!(v["L"], 2);
    assert_eq!(v["layers"][0]["S"][1], -0.5);
}

#[test]
fn plan_file_carries_exact_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let s = scores((0..18944).map(|i| i as f64).collect(), 18944);
    let plan = plan_prune(&s, 0.15, 128, PruneMode::Selective, None).unwrap();
    let path = dir.path().join("plan.json");
    save_plan(&plan, &path).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(v["exact_ratio"]["percent"], "15.54");
    assert_eq!(v["exact_ratio"]["numerator"], 2944);
    assert_eq!(v["exact_ratio"]["denominator"], 18944);
    assert_eq!(load_plan(&path).unwrap(), plan);
}
