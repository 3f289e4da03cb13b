use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmSession, ModelError};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub enum DecodeMethod {
    Greedy,
    /// Plain sampling after dividing log-probabilities by `temperature`.
    Temperature { temperature: f64 },
    TopK { k: usize, temperature: f64 },
    Nucleus { p: f64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDecode", into = "RawDecode")]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Stop as soon as this token is produced. It is kept in the output.
    pub eos: Option<TokenId>,
    /// Tokens that are never produced.
    pub suppress: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MethodName {
    Greedy,
    Temperature,
    TopK,
    Nucleus,
}

/// Flat wire form: `{"method": "top_k", "k": 5, "temperature": 0.8, ...}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDecode {
    method: MethodName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default = "default_max_new")]
    max_new_tokens: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eos: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    suppress: Vec<TokenId>,
}

fn default_max_new() -> usize {
    128
}

impl TryFrom<RawDecode> for DecodeConfig {
    type Error = String;

    fn try_from(r: RawDecode) -> Result<Self, String> {
        let temperature = r.temperature.unwrap_or(1.0);
        let stray = |field: &str| Err(format!("field `{field}` does not apply to method {:?}", r.method));
        let method = match r.method {
            MethodName::Greedy => {
                if r.temperature.is_some() {
                    return stray("temperature");
                }
                DecodeMethod::Greedy
            }
            MethodName::Temperature => DecodeMethod::Temperature { temperature },
            MethodName::TopK => DecodeMethod::TopK { k: r.k.ok_or("top_k requires `k`")?, temperature },
            MethodName::Nucleus => DecodeMethod::Nucleus { p: r.p.ok_or("nucleus requires `p`")?, temperature },
        };
        if r.k.is_some() && r.method != MethodName::TopK {
            return stray("k");
        }
        if r.p.is_some() && r.method != MethodName::Nucleus {
            return stray("p");
        }
        let c = DecodeConfig { method, max_new_tokens: r.max_new_tokens, seed: r.seed, eos: r.eos, suppress: r.suppress };
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}

impl From<DecodeConfig> for RawDecode {
    fn from(c: DecodeConfig) -> Self {
        let (method, temperature, k, p) = match c.method {
            DecodeMethod::Greedy => (MethodName::Greedy, None, None, None),
            DecodeMethod::Temperature { temperature } => (MethodName::Temperature, Some(temperature), None, None),
            DecodeMethod::TopK { k, temperature } => (MethodName::TopK, Some(temperature), Some(k), None),
            DecodeMethod::Nucleus { p, temperature } => (MethodName::Nucleus, Some(temperature), None, Some(p)),
        };
        RawDecode { method, temperature, k, p, max_new_tokens: c.max_new_tokens, seed: c.seed, eos: c.eos, suppress: c.suppress }
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            method: DecodeMethod::Nucleus { p: 0.95, temperature: 1.0 },
            max_new_tokens: 128,
            seed: 0,
            eos: None,
            suppress: Vec::new(),
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { method: DecodeMethod::Greedy, max_new_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        let temp_ok = |t: f64| t.is_finite() && t >= 0.0;
        match self.method {
            DecodeMethod::Greedy => {}
            DecodeMethod::Temperature { temperature } if !temp_ok(temperature) => {
                return bad("temperature must be finite and non-negative")
            }
            DecodeMethod::TopK { k, temperature } if k == 0 || !temp_ok(temperature) => {
                return bad("top-k needs k >= 1 and a non-negative temperature")
            }
            DecodeMethod::Nucleus { p, temperature } if !(p > 0.0 && p <= 1.0) || !temp_ok(temperature) => {
                return bad("nucleus needs p in (0, 1] and a non-negative temperature")
            }
            _ => {}
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Callback,
    Eos,
    MaxTokens,
    ContextFull,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub stop: StopReason,
}

fn argmax(logp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logp.iter().enumerate() {
        if v > logp[best] {
            best = i;
        }
    }
    best
}

/// Draw from unnormalized weights over `candidates`.
fn draw(rng: &mut ChaCha8Rng, candidates: &[usize], weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&c, &w) in candidates.iter().zip(weights) {
        if u < w {
            return c;
        }
        u -= w;
    }
    // rounding left a sliver past the last bucket
    *candidates.iter().zip(weights).rev().find(|(_, &w)| w > 0.0).map(|(c, _)| c).unwrap_or(&candidates[0])
}

/// Candidates sorted by descending probability (ties by id) with tempered weights.
fn tempered(logp: &[f64], temperature: f64) -> (Vec<usize>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..logp.len()).filter(|&i| logp[i].is_finite()).collect();
    idx.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    let max = logp[idx[0]];
    let w = idx.iter().map(|&i| ((logp[i] - max) / temperature).exp()).collect();
    (idx, w)
}

fn choose(logp: &[f64], method: &DecodeMethod, rng: &mut ChaCha8Rng) -> usize {
    let (temperature, k, p) = match *method {
        DecodeMethod::Greedy => return argmax(logp),
        DecodeMethod::Temperature { temperature } => (temperature, usize::MAX, 1.0),
        DecodeMethod::TopK { k, temperature } => (temperature, k, 1.0),
        DecodeMethod::Nucleus { p, temperature } => (temperature, usize::MAX, p),
    };
    if temperature == 0.0 || k == 1 {
        return argmax(logp);
    }
    let (mut idx, mut w) = tempered(logp, temperature);
    idx.truncate(k);
    w.truncate(k);
    if p < 1.0 {
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        let mut keep = w.len();
        for (i, &x) in w.iter().enumerate() {
            acc += x / total;
            if acc >= p {
                keep = i + 1;
                break;
            }
        }
        idx.truncate(keep);
        w.truncate(keep);
    }
    draw(rng, &idx, &w)
}

/// Extend the session until `stop` fires on the generated tokens, EOS, the
/// token budget, or the context limit.
pub fn generate(
    session: &mut dyn LmSession,
    config: &DecodeConfig,
    mut stop: impl FnMut(&[TokenId]) -> bool,
) -> Result<Generation, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tokens = Vec::new();
    loop {
        let mut logp: Vec<f64> = session.next_log_probs().iter().map(|&v| v as f64).collect();
        for &s in &config.suppress {
            if let Some(v) = logp.get_mut(s as usize) {
                *v = f64::NEG_INFINITY;
            }
        }
        let next = choose(&logp, &config.method, &mut rng) as TokenId;
        tokens.push(next);
        if stop(&tokens) {
            return Ok(Generation { tokens, stop: StopReason::Callback });
        }
        if config.eos == Some(next) {
            return Ok(Generation { tokens, stop: StopReason::Eos });
        }
        if tokens.len() >= config.max_new_tokens {
            return Ok(Generation { tokens, stop: StopReason::MaxTokens });
        }
        match session.push(next) {
            Ok(()) => {}
            Err(ModelError::ContextOverflow { .. }) => {
                return Ok(Generation { tokens, stop: StopReason::ContextFull })
            }
            Err(e) => return Err(e),
        }
    }
}
