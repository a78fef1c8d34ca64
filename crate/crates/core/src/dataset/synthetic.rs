//! Generator for small BAVED-shaped corpora: level directories, canonical
//! file names and tones whose pitch and loudness depend on the emotion
//! level. Used by tests, CI runs and the `synth` CLI verb.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DatasetError;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub speakers: u32,
    pub words: u8,
    pub takes: u32,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { speakers: 4, words: 3, takes: 1, sample_rate: 16_000, duration_s: 0.5, seed: 7 }
    }
}

/// Writes `speakers * words * takes * 3` files under `root/<level>/`.
/// Returns the number of files written.
pub fn write_corpus(root: &Path, spec: &SynthSpec) -> Result<usize, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let wav_spec = hound::WavSpec {
        channels: 1,
        sample_rate: spec.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut written = 0;
    for level in 0u8..3 {
        let dir = root.join(level.to_string());
        std::fs::create_dir_all(&dir)?;
        for speaker in 0..spec.speakers {
            let gender = speaker % 2;
            let age = 20 + speaker * 3;
            let voice = 1.0 + 0.08 * (speaker as f64 - spec.speakers as f64 / 2.0) / spec.speakers.max(1) as f64;
            for word in 0..spec.words.min(7) {
                for take in 0..spec.takes {
                    let name = format!("{word}-{speaker}-{gender}-{age}-{level}-{take}.wav");
                    let base = (140.0 + 90.0 * level as f64 + 12.0 * word as f64) * voice;
                    let amp = 0.15 + 0.2 * level as f64;
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let mut w = hound::WavWriter::create(dir.join(&name), wav_spec)
                        .map_err(|e| DatasetError::Io(std::io::Error::other(e)))?;
                    for i in 0..n {
                        let t = i as f64 / spec.sample_rate as f64;
                        let x = amp * (std::f64::consts::TAU * base * t + phase).sin()
                            + 0.3 * amp * (std::f64::consts::TAU * 2.0 * base * t).sin()
                            + 0.02 * rng.random_range(-1.0..1.0);
                        w.write_sample((x.clamp(-1.0, 1.0) * 32767.0) as i16)
                            .map_err(|e| DatasetError::Io(std::io::Error::other(e)))?;
                    }
                    w.finalize().map_err(|e| DatasetError::Io(std::io::Error::other(e)))?;
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}
