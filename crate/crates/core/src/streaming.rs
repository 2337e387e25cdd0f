//! Chunk-wise decide-then-generate engine.
//!
//! Each one-second chunk is serialized as a user turn (history span, vision
//! span, query span, FLAG), primed through the model, and gated by the
//! response head. Speak steps generate greedily up to the budget; silent
//! steps fill the assistant turn with the "..." placeholder so the
//! user/assistant alternation survives in the context stream.

use crate::kvcache::{EvictionReport, Segment};
use crate::model::{decide, Action, Model, ModelError};
use crate::tokenizer::{
    Tokenizer, TokenizerError, FLAG, HISTORY_END, HISTORY_START, IM_END, IM_START, QUERY_END,
    QUERY_START, ROLE_ASSISTANT, ROLE_SYSTEM, ROLE_USER, SILENCE, SILENCE_TEXT, VISION_BOS,
    VISION_EOS,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("chunk {t}: visual span of {len} tokens exceeds per-chunk budget {budget}")]
    VisualBudget { t: u64, len: usize, budget: usize },
    #[error("step failed at chunk {t}: {source}")]
    Step {
        t: u64,
        #[source]
        source: Box<StreamError>,
    },
    #[error("context structure violation: {0}")]
    ContextStructure(String),
}

/// One second of stream input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkInput {
    pub t: u64,
    pub visual: Vec<u32>,
    pub query: Option<String>,
    pub history: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSegment {
    pub text: String,
    pub continues: bool,
    pub silent: bool,
}

impl UtteranceSegment {
    pub fn silence() -> Self {
        Self {
            text: SILENCE_TEXT.to_string(),
            continues: false,
            silent: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkTiming {
    pub cache_s: f64,
    pub forward_s: f64,
    pub chunk_s: f64,
    pub token_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub p: f64,
    pub action: Action,
    pub text: String,
    pub continues: bool,
    pub timing: ChunkTiming,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StreamRunRecord {
    pub steps: Vec<StepRecord>,
    pub evictions: Vec<EvictionReport>,
}

#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    pub tau: f64,
    /// Upper bound on pseudo-visual tokens per one-second chunk.
    pub max_visual_per_chunk: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            max_visual_per_chunk: 64,
        }
    }
}

/// User-content token sequence for one chunk, ending in FLAG.
/// Empty history/query still emit their delimiters.
pub fn serialize_chunk(chunk: &ChunkInput, tok: &Tokenizer) -> Result<Vec<u32>, TokenizerError> {
    let mut out = Vec::new();
    out.push(HISTORY_START);
    if let Some(h) = &chunk.history {
        out.extend(tok.encode_text(h));
    }
    out.push(HISTORY_END);
    out.push(VISION_BOS);
    for &v in &chunk.visual {
        out.push(tok.visual_id(v)?);
    }
    out.push(VISION_EOS);
    out.push(QUERY_START);
    if let Some(q) = &chunk.query {
        out.extend(tok.encode_text(q));
    }
    out.push(QUERY_END);
    out.push(FLAG);
    Ok(out)
}

pub struct StreamEngine<'a> {
    model: &'a Model,
    tokenizer: &'a Tokenizer,
    cache: crate::kvcache::DualCache,
    config: EngineConfig,
    context: Vec<u32>,
    evictions_seen: usize,
}

impl<'a> StreamEngine<'a> {
    pub fn new(
        model: &'a Model,
        tokenizer: &'a Tokenizer,
        system_prompt: &str,
        config: EngineConfig,
    ) -> Result<Self, StreamError> {
        Self::with_window(model, tokenizer, system_prompt, config, model.config().max_window)
    }

    pub fn with_window(
        model: &'a Model,
        tokenizer: &'a Tokenizer,
        system_prompt: &str,
        config: EngineConfig,
        window: usize,
    ) -> Result<Self, StreamError> {
        let mut engine = Self {
            model,
            tokenizer,
            cache: model.new_cache_with_window(window),
            config,
            context: Vec::new(),
            evictions_seen: 0,
        };
        let mut tokens = vec![IM_START, ROLE_SYSTEM];
        tokens.extend(tokenizer.encode_text(system_prompt));
        tokens.push(IM_END);
        engine
            .model
            .prefill(&tokens, &mut engine.cache, Segment::System)?;
        engine.context.extend(&tokens);
        Ok(engine)
    }

    pub fn cache(&self) -> &crate::kvcache::DualCache {
        &self.cache
    }

    /// Full serialized context stream (all turns), for structure linting.
    pub fn context_tokens(&self) -> &[u32] {
        &self.context
    }

    pub fn step(&mut self, chunk: &ChunkInput) -> Result<(UtteranceSegment, StepRecord), StreamError> {
        self.step_inner(chunk).map_err(|e| StreamError::Step {
            t: chunk.t,
            source: Box::new(e),
        })
    }

    fn step_inner(
        &mut self,
        chunk: &ChunkInput,
    ) -> Result<(UtteranceSegment, StepRecord), StreamError> {
        if chunk.visual.len() > self.config.max_visual_per_chunk {
            return Err(StreamError::VisualBudget {
                t: chunk.t,
                len: chunk.visual.len(),
                budget: self.config.max_visual_per_chunk,
            });
        }
        let chunk_start = Instant::now();

        let mut user_tokens = vec![IM_START, ROLE_USER];
        user_tokens.extend(serialize_chunk(chunk, self.tokenizer)?);
        user_tokens.push(IM_END);
        let flag_pos = user_tokens.len() - 2;

        let cache_start = Instant::now();
        let states = self
            .model
            .prefill(&user_tokens, &mut self.cache, Segment::Streaming)?;
        let cache_s = cache_start.elapsed().as_secs_f64();
        self.context.extend(&user_tokens);

        let flag = self.model.flag_hidden(&states, flag_pos, chunk.t)?;
        let p = self.model.response_score(&flag);
        let action = decide(p, self.config.tau);

        let gen_start = Instant::now();
        let mut generated: Vec<u32> = Vec::new();
        let segment = match action {
            Action::Silence => {
                let tokens = [IM_START, ROLE_ASSISTANT, SILENCE, IM_END];
                self.model
                    .prefill(&tokens, &mut self.cache, Segment::Streaming)?;
                self.context.extend(&tokens);
                UtteranceSegment::silence()
            }
            Action::Speak => {
                let prefix = [IM_START, ROLE_ASSISTANT];
                let prefix_states =
                    self.model
                        .prefill(&prefix, &mut self.cache, Segment::Streaming)?;
                self.context.extend(&prefix);
                let mut logits = self
                    .model
                    .logits(&prefix_states.states.last().unwrap()[prefix.len() - 1]);
                let budget = self.model.config().gen_budget;
                let mut continues = true;
                while generated.len() < budget {
                    let tok = crate::model::argmax(&logits) as u32;
                    if tok == IM_END {
                        continues = false;
                        break;
                    }
                    generated.push(tok);
                    logits = self.model.decode_step(tok, &mut self.cache)?;
                }
                self.model
                    .prefill(&[IM_END], &mut self.cache, Segment::Streaming)?;
                self.context.extend(&generated);
                self.context.push(IM_END);
                UtteranceSegment {
                    text: self.tokenizer.decode(&generated)?,
                    continues,
                    silent: false,
                }
            }
        };
        let forward_s = gen_start.elapsed().as_secs_f64();
        let token_s = if generated.is_empty() {
            None
        } else {
            Some(forward_s / generated.len() as f64)
        };
        let record = StepRecord {
            t: chunk.t,
            p,
            action,
            text: segment.text.clone(),
            continues: segment.continues,
            timing: ChunkTiming {
                cache_s,
                forward_s,
                chunk_s: chunk_start.elapsed().as_secs_f64(),
                token_s,
            },
        };
        Ok((segment, record))
    }

    /// Drive every chunk through `step`, collecting records and the
    /// eviction reports that occurred along the way.
    pub fn run_stream(&mut self, chunks: &[ChunkInput]) -> Result<StreamRunRecord, StreamError> {
        let mut record = StreamRunRecord::default();
        for chunk in chunks {
            let (_, step) = self.step(chunk)?;
            record.steps.push(step);
        }
        let history = self.cache.eviction_history();
        record.evictions = history[self.evictions_seen.min(history.len())..].to_vec();
        self.evictions_seen = history.len();
        Ok(record)
    }
}

/// Check the serialized context stream: a leading system turn, then a
/// strict user/assistant alternation where every assistant turn exists
/// (silence-filled when the model did not speak).
pub fn lint_context(tokens: &[u32]) -> Result<(), StreamError> {
    let mut turns: Vec<u32> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] != IM_START {
            return Err(StreamError::ContextStructure(format!(
                "expected turn start at token {i}"
            )));
        }
        let role = *tokens.get(i + 1).ok_or_else(|| {
            StreamError::ContextStructure("dangling turn start".to_string())
        })?;
        if ![ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT].contains(&role) {
            return Err(StreamError::ContextStructure(format!(
                "unknown role token {role} at {i}"
            )));
        }
        let end = tokens[i + 2..]
            .iter()
            .position(|&t| t == IM_END)
            .map(|off| i + 2 + off)
            .ok_or_else(|| StreamError::ContextStructure("unterminated turn".to_string()))?;
        if tokens[i + 2..end].contains(&IM_START) {
            return Err(StreamError::ContextStructure("nested turn".to_string()));
        }
        turns.push(role);
        i = end + 1;
    }
    let mut iter = turns.iter().peekable();
    if iter.peek() == Some(&&ROLE_SYSTEM) {
        iter.next();
    }
    let mut expect = ROLE_USER;
    for &role in iter {
        if role != expect {
            return Err(StreamError::ContextStructure(format!(
                "expected role {expect}, found {role}"
            )));
        }
        expect = if expect == ROLE_USER {
            ROLE_ASSISTANT
        } else {
            ROLE_USER
        };
    }
    if expect == ROLE_ASSISTANT && !turns.is_empty() {
        return Err(StreamError::ContextStructure(
            "stream ends on an open user turn".to_string(),
        ));
    }
    Ok(())
}

/// One profiler row, aggregated over a run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProfileRow {
    pub ws: usize,
    pub cache_s: f64,
    pub forward_s: f64,
    pub chunk_s: f64,
    pub token_s: Option<f64>,
}

pub fn profile_row(ws: usize, record: &StreamRunRecord) -> ProfileRow {
    let n = record.steps.len().max(1) as f64;
    let mean = |f: fn(&ChunkTiming) -> f64| {
        record.steps.iter().map(|s| f(&s.timing)).sum::<f64>() / n
    };
    // Per-token time is total generation time over total generated tokens.
    let mut gen_time = 0.0;
    let mut gen_tokens = 0usize;
    for s in &record.steps {
        if let Some(ts) = s.timing.token_s {
            let k = (s.timing.forward_s / ts).round() as usize;
            gen_time += s.timing.forward_s;
            gen_tokens += k;
        }
    }
    ProfileRow {
        ws,
        cache_s: mean(|t| t.cache_s),
        forward_s: mean(|t| t.forward_s),
        chunk_s: mean(|t| t.chunk_s),
        token_s: if gen_tokens > 0 {
            Some(gen_time / gen_tokens as f64)
        } else {
            None
        },
    }
}

/// Table-7-style text table: WS, Cache, Forward, Chunk, Token columns.
pub fn profile_table(rows: &[ProfileRow]) -> String {
    let mut out = String::from("WS\tCache\tForward\tChunk\tToken\n");
    for r in rows {
        let token = r
            .token_s
            .map(|t| format!("{t:.6}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.ws, r.cache_s, r.forward_s, r.chunk_s, token
        ));
    }
    out
}
