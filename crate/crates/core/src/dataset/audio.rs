use std::path::{Path, PathBuf};

use rubato::audioadapter_buffers::direct::InterleavedSlice;
use rubato::{Fft, FixedSync, Resampler};

use super::{DatasetError, RecordMeta};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
/// One 25 ms analysis window at 16 kHz.
pub const MIN_SAMPLES: usize = 400;

/// Mono audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn load_audio(record: &RecordMeta, root: &Path) -> Result<Waveform, DatasetError> {
    load_wav(&record.path(root))
}

/// Decodes PCM wav, averages channels, resamples to 16 kHz.
pub fn load_wav(path: &Path) -> Result<Waveform, DatasetError> {
    let decode_err = |reason: String| DatasetError::DecodeFailure { path: path.to_path_buf(), reason };
    let mut reader = hound::WavReader::open(path).map_err(|e| decode_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || spec.sample_rate == 0 {
        return Err(decode_err("header declares zero channels or zero sample rate".into()));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().collect::<Result<_, _>>().map_err(|e| decode_err(e.to_string()))?
        }
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| decode_err(e.to_string()))?
        }
    };
    let mono: Vec<f32> =
        interleaved.chunks_exact(channels).map(|frame| frame.iter().sum::<f32>() / channels as f32).collect();
    let mut samples = resample(&mono, spec.sample_rate, TARGET_SAMPLE_RATE).map_err(decode_err)?;
    for s in &mut samples {
        if !s.is_finite() {
            return Err(decode_err("non-finite sample".into()));
        }
        *s = s.clamp(-1.0, 1.0);
    }
    if samples.len() < MIN_SAMPLES {
        return Err(DatasetError::TooShort { path: path.to_path_buf(), samples: samples.len() });
    }
    Ok(Waveform { samples, sample_rate: TARGET_SAMPLE_RATE })
}

/// Band-limited resampling of a whole mono clip; output length is
/// `ceil(n * to / from)`.
pub(crate) fn resample(input: &[f32], from: u32, to: u32) -> Result<Vec<f32>, String> {
    if from == to || input.is_empty() {
        return Ok(input.to_vec());
    }
    let mut resampler =
        Fft::<f32>::new(from as usize, to as usize, 1024, 1, FixedSync::Both).map_err(|e| e.to_string())?;
    let adapter = InterleavedSlice::new(input, 1, input.len()).map_err(|e| e.to_string())?;
    let out = resampler.process_all(&adapter, input.len(), None).map_err(|e| e.to_string())?;
    Ok(out.take_data())
}

/// Duration from the wav header alone, without decoding samples.
pub fn wav_duration(path: &Path) -> Result<f64, DatasetError> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| DatasetError::DecodeFailure { path: PathBuf::from(path), reason: e.to_string() })?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}
