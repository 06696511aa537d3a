//! Inputs shared by the benches.

use omnisched_core::Sample;

/// `videos` long samples followed by `texts` short ones.
pub fn skewed_samples(videos: usize, video_tokens: u64, texts: usize, text_tokens: u64) -> Vec<Sample> {
    let mut out: Vec<Sample> = (0..videos).map(|i| Sample::new(format!("video-{i}"), 256, 0, video_tokens)).collect();
    out.extend((0..texts).map(|i| Sample::new(format!("text-{i:04}"), text_tokens, 0, 0)));
    out
}

/// Deterministic pseudo-random lengths in `1..=max`.
pub fn mixed_samples(count: usize, max: u64) -> Vec<Sample> {
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    (0..count)
        .map(|i| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            Sample::new(format!("s{i:05}"), x % max + 1, 0, 0)
        })
        .collect()
}
