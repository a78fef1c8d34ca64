use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{frame_count, Backbone, BackboneError, BackboneId, FeatureSequence, CONV_STRIDES};
use crate::dataset::Waveform;

const WINDOW: usize = 400;

/// Deterministic stand-in for a real checkpoint: each 25 ms window (20 ms
/// hop) is projected onto D fixed pseudo-random directions and passed
/// through `ln(1 + (g x)^2)`. D matches the named backbone's width.
#[derive(Debug, Clone)]
pub struct StubBackbone {
    id: BackboneId,
    /// `[WINDOW x D]`
    projection: Array2<f32>,
}

impl StubBackbone {
    pub fn new(id: BackboneId) -> Self {
        let width = id.width();
        let seed = id.name.as_str().bytes().fold(0x5eed_u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (3.0 / WINDOW as f32).sqrt();
        let projection = Array2::from_shape_fn((WINDOW, width), |_| rng.random_range(-bound..bound));
        StubBackbone { id, projection }
    }
}

impl Backbone for StubBackbone {
    fn id(&self) -> &BackboneId {
        &self.id
    }

    fn width(&self) -> usize {
        self.projection.ncols()
    }

    fn extract(&self, waveform: &Waveform, record_id: &str) -> Result<FeatureSequence, BackboneError> {
        let n = waveform.samples.len();
        let t = frame_count(n).ok_or(BackboneError::TooShort(n))?;
        let hop: usize = CONV_STRIDES.iter().product();
        let mut windows = Array2::<f32>::zeros((t, WINDOW));
        for (i, mut row) in windows.rows_mut().into_iter().enumerate() {
            let start = i * hop;
            let end = (start + WINDOW).min(n);
            row.slice_mut(ndarray::s![..end - start]).assign(&ArrayView1::from(&waveform.samples[start..end]));
        }
        let frames = windows.dot(&self.projection).mapv(|x| (1.0 + (4.0 * x) * (4.0 * x)).ln());
        FeatureSequence::new(frames, self.id.clone(), record_id, self.width())
    }

    fn reentrant(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::BackboneName;

    fn tone(n: usize, freq: f32) -> Waveform {
        let samples = (0..n).map(|i| 0.4 * (std::f32::consts::TAU * freq * i as f32 / 16_000.0).sin()).collect();
        Waveform { samples, sample_rate: 16_000 }
    }

    #[test]
    fn shapes_follow_backbone_and_duration() {
        for name in BackboneName::ALL {
            let b = StubBackbone::new(BackboneId::new(name));
            let f = b.extract(&tone(16_000, 220.0), "x").unwrap();
            assert_eq!(f.width(), name.width());
            assert!((48..=51).contains(&f.num_frames()));
        }
        let b = StubBackbone::new(BackboneId::new(BackboneName::HubertBase));
        assert!(matches!(b.extract(&tone(300, 220.0), "x"), Err(BackboneError::TooShort(300))));
    }

    #[test]
    fn extraction_is_deterministic_and_input_sensitive() {
        let b = StubBackbone::new(BackboneId::new(BackboneName::HubertBase));
        let again = StubBackbone::new(BackboneId::new(BackboneName::HubertBase));
        let a1 = b.extract(&tone(8_000, 220.0), "x").unwrap();
        let a2 = again.extract(&tone(8_000, 220.0), "x").unwrap();
        assert_eq!(a1, a2);
        let other = b.extract(&tone(8_000, 400.0), "x").unwrap();
        assert_ne!(a1.frames(), other.frames());
    }
}
