use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, TaskTag, WorkloadError};

/// Relative weights of the dominant modality of generated samples. Every
/// generated sample carries text; `image` and `video` samples add one visual
/// modality on top.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityMix {
    #[serde(default)]
    pub text: f64,
    #[serde(default)]
    pub image: f64,
    #[serde(default)]
    pub video: f64,
}

/// Inclusive token-count range, sampled uniformly or log-uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthRange {
    pub min: u64,
    pub max: u64,
    #[serde(default)]
    pub log: bool,
}

impl LengthRange {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.log && self.min > 0 {
            let (lo, hi) = ((self.min as f64).ln(), (self.max as f64).ln());
            let x: f64 = rng.random_range(lo..=hi);
            (x.exp().round() as u64).clamp(self.min, self.max)
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDistribution {
    pub text: Option<LengthRange>,
    pub image: Option<LengthRange>,
    pub video: Option<LengthRange>,
}

/// A seeded random mix of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub count: usize,
    pub seed: u64,
    pub modality_mix: ModalityMix,
    pub length_distribution: LengthDistribution,
    #[serde(default)]
    pub id_prefix: Option<String>,
    #[serde(default)]
    pub task_tag: Option<TaskTag>,
    #[serde(default = "default_weight")]
    pub encoder_weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl GeneratorSpec {
    pub(super) fn expand(&self, index: usize) -> Result<Vec<Sample>, WorkloadError> {
        let invalid = |reason: &str| WorkloadError::InvalidGenerator { index, reason: reason.into() };
        let weights = [self.modality_mix.text, self.modality_mix.image, self.modality_mix.video];
        let pick = WeightedIndex::new(weights).map_err(|e| invalid(&format!("modality_mix: {e}")))?;
        let dist = &self.length_distribution;
        let text = dist.text.as_ref().ok_or_else(|| invalid("length_distribution.text is required"))?;
        for (w, range, name) in [(weights[1], &dist.image, "image"), (weights[2], &dist.video, "video")] {
            if w > 0.0 && range.is_none() {
                return Err(invalid(&format!("length_distribution.{name} is required by modality_mix")));
            }
        }
        for range in [Some(text), dist.image.as_ref(), dist.video.as_ref()].into_iter().flatten() {
            if range.min > range.max {
                return Err(invalid("length range has min > max"));
            }
        }

        let prefix = self.id_prefix.clone().unwrap_or_else(|| format!("gen{index}"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let kind = pick.sample(&mut rng);
            let mut sample = Sample::new(format!("{prefix}-{i:05}"), text.sample(&mut rng), 0, 0);
            sample.encoder_weight = self.encoder_weight;
            match kind {
                1 => {
                    sample.image_tokens = dist.image.as_ref().expect("checked").sample(&mut rng);
                    sample.task_tag = TaskTag::I2v;
                }
                2 => sample.video_tokens = dist.video.as_ref().expect("checked").sample(&mut rng),
                _ => {}
            }
            if let Some(tag) = self.task_tag {
                sample.task_tag = tag;
            }
            out.push(sample);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_workload;

    const GEN: &str = r#"{"generators": [{"count": 10, "seed": 7,
        "modality_mix": {"text": 1, "image": 1, "video": 2},
        "length_distribution": {"text": {"min": 8, "max": 64},
            "image": {"min": 256, "max": 1024}, "video": {"min": 1024, "max": 16384, "log": true}}}]}"#;

    #[test]
    fn generator_is_deterministic() {
        let a = parse_workload(GEN).unwrap();
        let b = parse_workload(GEN).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| (8..=64).contains(&s.text_tokens)));
        assert!(a.iter().all(|s| s.image_tokens == 0 || s.video_tokens == 0));
    }

    #[test]
    fn different_seed_changes_output() {
        let other = GEN.replace("\"seed\": 7", "\"seed\": 8");
        assert_ne!(parse_workload(GEN).unwrap(), parse_workload(&other).unwrap());
    }

    #[test]
    fn missing_visual_range_is_rejected() {
        let text = r#"{"generators": [{"count": 1, "seed": 0, "modality_mix": {"video": 1},
            "length_distribution": {"text": {"min": 1, "max": 2}}}]}"#;
        let err = parse_workload(text).unwrap_err().to_string();
        assert!(err.contains("length_distribution.video"), "{err}");
    }
}
