//! Synthetic event-token streams for head training and end-to-end checks.
//!
//! Visual pseudo-tokens are drawn from the reserved visual range; a
//! designated "event" sub-range marks speak-worthy seconds, which gives
//! tests a ground-truth labeling rule ("speak iff an event token appears
//! in the chunk") without any real vision input.

use crate::kvcache::Segment;
use crate::losses::{HeadSample, LabelTimeline};
use crate::model::Model;
use crate::streaming::{serialize_chunk, ChunkInput, StreamError};
use crate::tokenizer::{Tokenizer, FLAG, IM_END, IM_START, ROLE_ASSISTANT, ROLE_SYSTEM, ROLE_USER, SILENCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    /// Size of the pseudo-visual vocabulary.
    pub visual_vocab: u32,
    /// Half-open sub-range [lo, hi) of visual indices that mark events.
    pub event_range: (u32, u32),
    /// Visual tokens per one-second chunk.
    pub visual_per_chunk: usize,
    /// Per-second probability that an event token appears.
    pub event_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            visual_vocab: 32,
            event_range: (24, 32),
            visual_per_chunk: 4,
            event_rate: 0.4,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) {
        let (lo, hi) = self.event_range;
        assert!(lo < hi && hi <= self.visual_vocab, "event range out of vocab");
        assert!(lo > 0, "need at least one non-event visual index");
        assert!(self.visual_per_chunk >= 1);
        assert!((0.0..=1.0).contains(&self.event_rate));
    }
}

/// Tokenizer sized for synthetic streams: the visual range plus a tiny
/// word list so generated text decodes to something readable.
pub fn synthetic_tokenizer(cfg: &SyntheticConfig) -> Tokenizer {
    Tokenizer::from_words(
        cfg.visual_vocab as usize,
        ["event", "noted", "quiet", "watch", "now", "done"],
    )
}

/// One labeled stream: per-second chunks plus the event-rule labels.
pub fn generate_stream(
    seconds: usize,
    cfg: &SyntheticConfig,
    seed: u64,
) -> (Vec<ChunkInput>, LabelTimeline) {
    cfg.validate();
    assert!(seconds >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.event_range;
    let mut chunks = Vec::with_capacity(seconds);
    let mut labels = Vec::with_capacity(seconds);
    for t in 0..seconds {
        let event = rng.gen_bool(cfg.event_rate);
        // Event seconds draw every slot from the event sub-range so the
        // signal survives one round of random attention mixing.
        let range = if event { lo..hi } else { 0..lo };
        let visual: Vec<u32> = (0..cfg.visual_per_chunk)
            .map(|_| rng.gen_range(range.clone()))
            .collect();
        chunks.push(ChunkInput {
            t: t as u64,
            visual,
            query: None,
            history: None,
        });
        labels.push(u8::from(event));
    }
    (chunks, LabelTimeline::new(labels).expect("seconds >= 1"))
}

/// Labels a chunk by the event rule directly (test oracle).
pub fn chunk_has_event(chunk: &ChunkInput, cfg: &SyntheticConfig) -> bool {
    let (lo, hi) = cfg.event_range;
    chunk.visual.iter().any(|&v| (lo..hi).contains(&v))
}

/// Teacher-forced FLAG hiddens: every assistant turn is silence-filled so
/// extraction never depends on head quality. Returns one hidden per chunk.
pub fn collect_flag_hiddens(
    model: &Model,
    tokenizer: &Tokenizer,
    system_prompt: &str,
    chunks: &[ChunkInput],
    window: usize,
) -> Result<Vec<Vec<f64>>, StreamError> {
    let mut cache = model.new_cache_with_window(window);
    let mut sys = vec![IM_START, ROLE_SYSTEM];
    sys.extend(tokenizer.encode_text(system_prompt));
    sys.push(IM_END);
    model.prefill(&sys, &mut cache, Segment::System)?;

    let mut hiddens = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let mut user = vec![IM_START, ROLE_USER];
        user.extend(serialize_chunk(chunk, tokenizer)?);
        user.push(IM_END);
        let flag_pos = user.len() - 2;
        debug_assert_eq!(user[flag_pos], FLAG);
        let states = model.prefill(&user, &mut cache, Segment::Streaming)?;
        hiddens.push(model.flag_hidden(&states, flag_pos, chunk.t)?.hidden);
        model.prefill(
            &[IM_START, ROLE_ASSISTANT, SILENCE, IM_END],
            &mut cache,
            Segment::Streaming,
        )?;
    }
    Ok(hiddens)
}

/// Build training samples from several labeled streams, extracting FLAG
/// hiddens in parallel across streams.
pub fn build_head_samples(
    model: &Model,
    tokenizer: &Tokenizer,
    system_prompt: &str,
    streams: &[(Vec<ChunkInput>, LabelTimeline)],
    window: usize,
) -> Result<Vec<HeadSample>, StreamError> {
    streams
        .par_iter()
        .map(|(chunks, labels)| {
            let hiddens = collect_flag_hiddens(model, tokenizer, system_prompt, chunks, window)?;
            Ok(HeadSample {
                hiddens,
                labels: labels.clone(),
                main_loss: 0.0,
            })
        })
        .collect()
}
