use serde::{Deserialize, Serialize};

use super::CorpusUnit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGuard {
    Ok,
    OverLimit,
}

/// Character-class token estimate.
///
/// Letters and whitespace cost `1 / chars_per_token` each (default 4 characters
/// per token, the usual figure for English prose). Digits, punctuation and
/// symbols cost `1 / dense_chars_per_token` each (default 2), since code, hex
/// dumps and markup tokenize far worse than prose. The sum is rounded up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEstimator {
    pub chars_per_token: f64,
    pub dense_chars_per_token: f64,
}

impl Default for TokenEstimator {
    fn default() -> Self {
        Self {
            chars_per_token: 4.0,
            dense_chars_per_token: 2.0,
        }
    }
}

impl TokenEstimator {
    pub fn estimate(&self, text: &str) -> usize {
        let (mut prose, mut dense) = (0usize, 0usize);
        for c in text.chars() {
            if c.is_alphabetic() || c.is_whitespace() {
                prose += 1;
            } else {
                dense += 1;
            }
        }
        let tokens = prose as f64 / self.chars_per_token + dense as f64 / self.dense_chars_per_token;
        tokens.ceil() as usize
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    TokenEstimator::default().estimate(text)
}

/// A unit is over the limit when its estimate reaches `limit`: the context
/// window has to leave room for at least one token of reply.
pub fn token_guard(unit: &CorpusUnit, limit: usize, estimator: &TokenEstimator) -> TokenGuard {
    assert!(limit > 0, "token limit must be positive");
    if estimator.estimate(&unit.text) >= limit {
        TokenGuard::OverLimit
    } else {
        TokenGuard::Ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Granularity;

    fn unit(text: &str) -> CorpusUnit {
        CorpusUnit {
            unit_id: "d#0".into(),
            doc_id: "d".into(),
            ordinal: 0,
            granularity: Granularity::FullText,
            text: text.into(),
            title: String::new(),
        }
    }

    #[test]
    fn short_prose_is_ok() {
        let u = unit("the quick brown fox jumps over the lazy dog twice");
        assert_eq!(token_guard(&u, 4096, &TokenEstimator::default()), TokenGuard::Ok);
    }

    #[test]
    fn hex_dump_is_over_limit() {
        let dump: String = (0..10_000u32).map(|i| format!("{:02x} ", i % 256)).collect();
        assert_eq!(dump.len(), 30_000);
        let est = TokenEstimator::default();
        assert!(est.estimate(&dump) > 4096);
        assert_eq!(token_guard(&unit(&dump), 4096, &est), TokenGuard::OverLimit);
    }

    #[test]
    fn limit_one_rejects_everything() {
        assert_eq!(
            token_guard(&unit("a"), 1, &TokenEstimator::default()),
            TokenGuard::OverLimit
        );
    }

    #[test]
    fn estimate_rounds_up() {
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(estimate_tokens("12"), 1);
        assert_eq!(estimate_tokens(""), 0);
    }
}
