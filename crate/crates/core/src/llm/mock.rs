use std::time::Duration;

use super::{Completion, FinishReason, LlmError, LlmProvider, LlmRequest};

pub const MOCK_PROVIDER_ID: &str = "mock";

/// Deterministic offline provider.
///
/// Output is `"MOCK: "` followed by the last line of the prompt, cut to
/// `max_tokens * 4` characters (`finish_reason = length` when cut).
/// Temperature and model are ignored.
#[derive(Debug, Default, Clone)]
pub struct MockLlm {
    latency: Option<Duration>,
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sleeps this long per call; used to hold a run open in tests.
    pub fn with_latency(latency: Duration) -> Self {
        Self {
            latency: Some(latency),
        }
    }

    pub fn respond(prompt: &str, max_tokens: u32) -> Completion {
        let last = prompt.lines().last().unwrap_or("");
        let full = format!("MOCK: {last}");
        let cap = max_tokens as usize * 4;
        match full.char_indices().nth(cap) {
            Some((byte, _)) => Completion {
                text: full[..byte].to_string(),
                finish_reason: FinishReason::Length,
            },
            None => Completion {
                text: full,
                finish_reason: FinishReason::Stop,
            },
        }
    }
}

impl LlmProvider for MockLlm {
    fn provider_id(&self) -> &str {
        MOCK_PROVIDER_ID
    }

    fn default_model(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        Ok(Self::respond(&req.prompt, req.max_tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Llm;

    #[test]
    fn echoes_last_line() {
        let resp = Llm::mock().generate(&LlmRequest::new("Q\nfinal line")).unwrap();
        assert_eq!(resp.text, "MOCK: final line");
        assert_eq!(resp.finish_reason, FinishReason::Stop);
        assert_eq!(resp.provider_id, "mock");
    }

    #[test]
    fn deterministic() {
        let llm = Llm::mock();
        let req = LlmRequest::new("a\nb\nc");
        assert_eq!(llm.generate(&req).unwrap().text, llm.generate(&req).unwrap().text);
    }

    #[test]
    fn truncates_at_four_chars_per_token() {
        let mut req = LlmRequest::new("Q\nfinal line");
        req.max_tokens = 2;
        let resp = Llm::mock().generate(&req).unwrap();
        assert!(resp.text.chars().count() <= 8);
        assert_eq!(resp.text, "MOCK: fi");
        assert_eq!(resp.finish_reason, FinishReason::Length);
    }

    #[test]
    fn exact_fit_is_not_truncated() {
        // "MOCK: ab" is exactly 8 chars.
        let c = MockLlm::respond("ab", 2);
        assert_eq!(c.text, "MOCK: ab");
        assert_eq!(c.finish_reason, FinishReason::Stop);
    }
}
