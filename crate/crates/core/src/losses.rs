//! Training objective: masked causal LM loss, transition-weighted BCE over
//! the per-second speaking probabilities, and the stability regularizer
//! (probability smoothness within persistence runs plus a global
//! speaking-rate matching term). Analytic gradients cover the response
//! head; the backbone stays frozen.

use crate::model::ResponseHead;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: probabilities {p} vs labels {y}")]
    LengthMismatch { p: usize, y: usize },
    #[error("target id {0} outside vocabulary of {1}")]
    InvalidTarget(u32, usize),
    #[error("non-finite loss at step {step}: {value}")]
    NonFinite { step: usize, value: f64 },
    #[error("labels must be 0/1, found {0}")]
    InvalidLabel(u8),
    #[error("empty label timeline")]
    EmptyTimeline,
}

/// Per-second binary speaking labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelTimeline {
    y: Vec<u8>,
}

impl LabelTimeline {
    pub fn new(y: Vec<u8>) -> Result<Self, LossError> {
        if y.is_empty() {
            return Err(LossError::EmptyTimeline);
        }
        if let Some(&bad) = y.iter().find(|&&v| v > 1) {
            return Err(LossError::InvalidLabel(bad));
        }
        Ok(Self { y })
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mean(&self) -> f64 {
        self.y.iter().map(|&v| v as f64).sum::<f64>() / self.y.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Transition weight at label flips.
    pub gamma: f64,
    /// Response-loss weight in the total objective.
    pub alpha: f64,
    /// Probability clamp for log stability.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            alpha: 0.2,
            epsilon: 1e-7,
        }
    }
}

/// w_1 = 1; w_t = gamma iff y_t != y_{t-1}, else 1.
pub fn transition_weights(y: &LabelTimeline, gamma: f64) -> Vec<f64> {
    let labels = y.labels();
    let mut w = vec![1.0; labels.len()];
    for t in 1..labels.len() {
        if labels[t] != labels[t - 1] {
            w[t] = gamma;
        }
    }
    w
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn check_lengths(p: &[f64], y: &LabelTimeline) -> Result<(), LossError> {
    if p.len() != y.len() {
        return Err(LossError::LengthMismatch {
            p: p.len(),
            y: y.len(),
        });
    }
    Ok(())
}

/// Weighted BCE normalized by the weight sum.
pub fn loss_cls(p: &[f64], y: &LabelTimeline, cfg: &LossConfig) -> Result<f64, LossError> {
    check_lengths(p, y)?;
    let w = transition_weights(y, cfg.gamma);
    let wsum: f64 = w.iter().sum();
    let mut acc = 0.0;
    for ((&pt, &yt), &wt) in p.iter().zip(y.labels()).zip(&w) {
        let pc = clamp(pt, cfg.epsilon);
        let term = if yt == 1 { -pc.ln() } else { -(1.0 - pc).ln() };
        acc += wt * term;
    }
    Ok(acc / wsum)
}

/// Smoothness over persistence positions plus squared rate mismatch.
/// mean(y) is a constant target in gradients.
pub fn loss_reg(p: &[f64], y: &LabelTimeline) -> Result<f64, LossError> {
    check_lengths(p, y)?;
    let labels = y.labels();
    let mut smooth = 0.0;
    let mut count = 0usize;
    for t in 1..p.len() {
        if labels[t] == labels[t - 1] {
            let d = p[t] - p[t - 1];
            smooth += d * d;
            count += 1;
        }
    }
    let smooth = if count > 0 { smooth / count as f64 } else { 0.0 };
    let rate = p.iter().sum::<f64>() / p.len() as f64 - y.mean();
    Ok(smooth + rate * rate)
}

/// Mean cross-entropy over masked positions; 0 on an empty mask.
pub fn loss_main(
    logits: &[Vec<f64>],
    targets: &[u32],
    mask: &[bool],
) -> Result<f64, LossError> {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), mask.len());
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        if t as usize >= row.len() {
            return Err(LossError::InvalidTarget(t, row.len()));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        acc += lse - row[t as usize];
        count += 1;
    }
    if count == 0 {
        log::warn!("loss_main: empty assistant mask, returning 0 (all-silent sample)");
        return Ok(0.0);
    }
    Ok(acc / count as f64)
}

/// total = main + alpha * (cls + reg).
pub fn loss_total(main: f64, cls: f64, reg: f64, cfg: &LossConfig) -> f64 {
    main + cfg.alpha * (cls + reg)
}

/// Gradient of L_cls w.r.t. p_t.
pub fn grad_cls_wrt_p(
    p: &[f64],
    y: &LabelTimeline,
    cfg: &LossConfig,
) -> Result<Vec<f64>, LossError> {
    check_lengths(p, y)?;
    let labels = y.labels();
    let w = transition_weights(y, cfg.gamma);
    let wsum: f64 = w.iter().sum();
    let mut grad = vec![0.0; p.len()];
    for t in 0..p.len() {
        let pc = clamp(p[t], cfg.epsilon);
        let d = if labels[t] == 1 {
            -1.0 / pc
        } else {
            1.0 / (1.0 - pc)
        };
        grad[t] = w[t] * d / wsum;
    }
    Ok(grad)
}

/// Gradient of L_reg w.r.t. p_t (mean(y) treated as a constant target).
pub fn grad_reg_wrt_p(p: &[f64], y: &LabelTimeline) -> Result<Vec<f64>, LossError> {
    check_lengths(p, y)?;
    let labels = y.labels();
    let t_len = p.len();
    let mut grad = vec![0.0; t_len];
    let persist: Vec<bool> = (0..t_len)
        .map(|t| t >= 1 && labels[t] == labels[t - 1])
        .collect();
    let count = persist.iter().filter(|&&b| b).count();
    if count > 0 {
        let scale = 2.0 / count as f64;
        for t in 0..t_len {
            let mut d = 0.0;
            if persist[t] {
                d += p[t] - p[t - 1];
            }
            if t + 1 < t_len && persist[t + 1] {
                d -= p[t + 1] - p[t];
            }
            grad[t] += scale * d;
        }
    }
    let rate_grad = 2.0 * (p.iter().sum::<f64>() / t_len as f64 - y.mean()) / t_len as f64;
    for g in grad.iter_mut() {
        *g += rate_grad;
    }
    Ok(grad)
}

/// Gradient of alpha*(L_cls + L_reg) w.r.t. p_t.
pub fn grad_response_wrt_p(
    p: &[f64],
    y: &LabelTimeline,
    cfg: &LossConfig,
) -> Result<Vec<f64>, LossError> {
    let cls = grad_cls_wrt_p(p, y, cfg)?;
    let reg = grad_reg_wrt_p(p, y)?;
    Ok(cls
        .iter()
        .zip(&reg)
        .map(|(c, r)| cfg.alpha * (c + r))
        .collect())
}

/// Chain the per-step response-loss gradient through dp_t/dparams.
/// `chain[t]` is the Jacobian row for step t in the head's flat layout.
pub fn grad_response(
    p: &[f64],
    y: &LabelTimeline,
    cfg: &LossConfig,
    chain: &[Vec<f64>],
) -> Result<Vec<f64>, LossError> {
    let dp = grad_response_wrt_p(p, y, cfg)?;
    assert_eq!(chain.len(), p.len());
    let n_params = chain.first().map(|c| c.len()).unwrap_or(0);
    let mut grad = vec![0.0; n_params];
    for (dl, row) in dp.iter().zip(chain) {
        for (g, j) in grad.iter_mut().zip(row) {
            *g += dl * j;
        }
    }
    Ok(grad)
}

/// One training sample: per-second FLAG hiddens with aligned labels.
/// `main_loss` is the (head-independent) LM loss logged in the curve.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub hiddens: Vec<Vec<f64>>,
    pub labels: LabelTimeline,
    pub main_loss: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossCurvePoint {
    pub step: usize,
    pub main: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.01,
        }
    }
}

/// Adam over the response head on alpha*(L_cls + L_reg), one sample
/// (timeline) per step, round-robin. The backbone and LM head are frozen,
/// so L_main is constant and only logged.
pub fn train_head(
    samples: &[HeadSample],
    head: &ResponseHead,
    cfg: &LossConfig,
    opts: &TrainOptions,
) -> Result<(ResponseHead, Vec<LossCurvePoint>), LossError> {
    assert!(!samples.is_empty(), "train_head requires samples");
    for s in samples {
        if s.hiddens.len() != s.labels.len() {
            return Err(LossError::LengthMismatch {
                p: s.hiddens.len(),
                y: s.labels.len(),
            });
        }
    }
    let mut head = head.clone();
    let mut theta = head.flatten();
    let n = theta.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let sample = &samples[step % samples.len()];
        let mut p = Vec::with_capacity(sample.hiddens.len());
        let mut chain = Vec::with_capacity(sample.hiddens.len());
        for h in &sample.hiddens {
            let (pt, grad) = head.score_with_grad(h);
            p.push(pt);
            chain.push(grad);
        }
        let cls = loss_cls(&p, &sample.labels, cfg)?;
        let reg = loss_reg(&p, &sample.labels)?;
        let total = loss_total(sample.main_loss, cls, reg, cfg);
        if !total.is_finite() {
            return Err(LossError::NonFinite { step, value: total });
        }
        curve.push(LossCurvePoint {
            step,
            main: sample.main_loss,
            cls,
            reg,
            total,
        });

        let grad = grad_response(&p, &sample.labels, cfg, &chain)?;
        let t = (step + 1) as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            theta[i] -= opts.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
        head.assign(&theta);
    }
    Ok((head, curve))
}
