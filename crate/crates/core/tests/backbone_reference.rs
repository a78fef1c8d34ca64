//! Checks the candle backbone against hidden states recorded from the
//! reference transformers implementation on tiny random checkpoints
//! (see scripts/make_backbone_fixtures.py).

use std::collections::HashMap;
use std::path::PathBuf;

use baved_ser::backbones::{Backbone, BackboneError, BackboneId, BackboneName, LayerSelect, SslBackbone};
use baved_ser::dataset::Waveform;
use candle_core::{Device, Tensor};
use ndarray::Array2;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/backbones").join(name)
}

fn expected(name: &str, clip: &str) -> HashMap<String, Tensor> {
    candle_core::safetensors::load(fixture(name).join(format!("expected_{clip}.safetensors")), &Device::Cpu).unwrap()
}

fn matrix(t: &Tensor) -> Array2<f32> {
    let (r, c) = t.dims2().unwrap();
    Array2::from_shape_vec((r, c), t.flatten_all().unwrap().to_vec1::<f32>().unwrap()).unwrap()
}

fn max_abs_diff(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn load(name: &str, layer: LayerSelect) -> SslBackbone {
    SslBackbone::from_dir(&fixture(name), BackboneId::new(BackboneName::HubertBase), layer).unwrap()
}

const MODELS: [&str; 2] = ["tiny_wav2vec2", "tiny_hubert"];

#[test]
fn every_hidden_state_matches_reference() {
    for model in MODELS {
        let backbone = load(model, LayerSelect::Last);
        for clip in ["0.5s", "1.0s"] {
            let exp = expected(model, clip);
            let input = exp["input"].to_vec1::<f32>().unwrap();
            let states = backbone.hidden_states(&input).unwrap();
            assert_eq!(states.len(), 3, "{model}");
            for (k, state) in states.iter().enumerate() {
                let want = matrix(&exp[&format!("hidden.{k}")]);
                let diff = max_abs_diff(state, &want);
                assert!(diff < 1e-4, "{model} {clip} hidden.{k}: max abs diff {diff}");
            }
        }
    }
}

#[test]
fn one_second_yields_49_frames() {
    for model in MODELS {
        let backbone = load(model, LayerSelect::Last);
        let n = 16_000;
        let samples: Vec<f32> = (0..n).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
        let f = backbone.extract(&Waveform { samples, sample_rate: 16_000 }, "tone").unwrap();
        assert_eq!(f.num_frames(), 49, "{model}");
        assert_eq!(f.width(), 16);
        let half = backbone.hidden_states(&vec![0.1; 8000]).unwrap();
        assert_eq!(half[0].nrows(), 24);
    }
}

#[test]
fn extract_applies_preprocessor_normalization() {
    let wav2vec2 = load("tiny_wav2vec2", LayerSelect::Last);
    let hubert = load("tiny_hubert", LayerSelect::Last);
    assert!(wav2vec2.normalizes_input());
    assert!(!hubert.normalizes_input());

    let exp = expected("tiny_hubert", "1.0s");
    let input = exp["input"].to_vec1::<f32>().unwrap();
    let out = hubert.extract(&Waveform { samples: input.clone(), sample_rate: 16_000 }, "r").unwrap();
    assert!(max_abs_diff(out.frames(), &matrix(&exp["last"])) < 1e-4);

    let n = input.len() as f64;
    let mean = input.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = input.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let normalized: Vec<f32> = input.iter().map(|&x| ((x as f64 - mean) / (var + 1e-7).sqrt()) as f32).collect();
    let want = wav2vec2.hidden_states(&normalized).unwrap().pop().unwrap();
    let got = wav2vec2.extract(&Waveform { samples: input, sample_rate: 16_000 }, "r").unwrap();
    assert!(max_abs_diff(got.frames(), &want) < 1e-5);
}

#[test]
fn layer_selection_exports_intermediate_states() {
    let exp = expected("tiny_hubert", "1.0s");
    let input = exp["input"].to_vec1::<f32>().unwrap();
    for k in 0..=2 {
        let backbone = load("tiny_hubert", LayerSelect::Index(k));
        let got = backbone.extract(&Waveform { samples: input.clone(), sample_rate: 16_000 }, "r").unwrap();
        assert!(max_abs_diff(got.frames(), &matrix(&exp[&format!("hidden.{k}")])) < 1e-4, "layer {k}");
    }
    let bad = SslBackbone::from_dir(
        &fixture("tiny_hubert"),
        BackboneId::new(BackboneName::HubertBase),
        LayerSelect::Index(3),
    );
    assert!(bad.is_err());
}

#[test]
fn extraction_is_deterministic_and_rejects_short_clips() {
    let backbone = load("tiny_wav2vec2", LayerSelect::Last);
    let w =
        Waveform { samples: (0..5000).map(|i| ((i * 7919) % 101) as f32 / 101.0 - 0.5).collect(), sample_rate: 16_000 };
    let a = backbone.extract(&w, "r").unwrap();
    let b = backbone.extract(&w, "r").unwrap();
    assert!(a.frames().iter().zip(b.frames()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let short = Waveform { samples: vec![0.1; 399], sample_rate: 16_000 };
    assert!(matches!(backbone.extract(&short, "r"), Err(BackboneError::TooShort(399))));
}

#[test]
fn missing_checkpoint_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let err =
        SslBackbone::from_dir(dir.path(), BackboneId::new(BackboneName::HubertLarge), LayerSelect::Last).err().unwrap();
    assert!(matches!(err, BackboneError::CheckpointUnavailable { .. }));
}
