use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Generation, Provider, ProviderError, ProviderRequest};
use crate::config::GenerationParams;

/// One fixture rule. Every present condition must hold; the first matching
/// rule answers the request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Matches when the request's first frame number equals this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    /// Lower-case hex SHA-256 of the full prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub blocked: bool,
}

impl MockRule {
    fn matches(&self, req: &ProviderRequest, prompt_hash: &str) -> bool {
        self.frame.is_none_or(|f| req.frame_numbers.first() == Some(&f))
            && self
                .prompt_contains
                .as_ref()
                .is_none_or(|s| req.prompt.contains(s.as_str()))
            && self
                .prompt_sha256
                .as_ref()
                .is_none_or(|h| h.eq_ignore_ascii_case(prompt_hash))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    #[default]
    Transient,
    Auth,
    Fatal,
}

/// Scripted failures: the first `times` attempts for a request key fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFailure {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    pub times: u32,
    #[serde(default)]
    pub kind: FailureKind,
}

/// Fixture document for [`MockProvider`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderFixture {
    #[serde(default = "default_id")]
    pub id: String,
    /// Answer when no rule matches.
    #[serde(default)]
    pub default: String,
    /// Return the prompt itself when no rule matches.
    #[serde(default)]
    pub echo: bool,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub failures: Vec<MockFailure>,
}

fn default_id() -> String {
    "mock".to_string()
}

impl Default for ProviderFixture {
    fn default() -> Self {
        Self {
            id: default_id(),
            default: String::new(),
            echo: false,
            rules: Vec::new(),
            failures: Vec::new(),
        }
    }
}

/// What the mock saw, for assertions. Safety settings are recorded but never
/// change the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub frame_numbers: Vec<u64>,
    pub prompt: String,
    pub image_count: usize,
    pub params: GenerationParams,
}

/// Deterministic provider driven by a [`ProviderFixture`]. Safe to share
/// across threads; counts every attempt.
#[derive(Debug)]
pub struct MockProvider {
    fixture: ProviderFixture,
    calls: AtomicUsize,
    failures_left: Mutex<HashMap<usize, HashMap<String, u32>>>,
    log: Mutex<Vec<RecordedRequest>>,
}

impl MockProvider {
    pub fn new(fixture: ProviderFixture) -> Self {
        Self {
            fixture,
            calls: AtomicUsize::new(0),
            failures_left: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn echo() -> Self {
        Self::new(ProviderFixture {
            id: "echo".into(),
            echo: true,
            ..ProviderFixture::default()
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("cannot read fixture {}: {e}", path.display())))?;
        let fixture = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Config(format!("bad fixture {}: {e}", path.display())))?;
        Ok(Self::new(fixture))
    }

    /// Attempts made so far, including failed ones.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Attempts that carried at least one image.
    pub fn vision_call_count(&self) -> usize {
        self.requests().iter().filter(|r| r.image_count > 0).count()
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    fn request_key(req: &ProviderRequest, prompt_hash: &str) -> String {
        match req.frame_numbers.first() {
            Some(f) => format!("frame:{f}"),
            None => format!("prompt:{prompt_hash}"),
        }
    }

    fn scripted_failure(&self, req: &ProviderRequest, prompt_hash: &str) -> Option<ProviderError> {
        let (index, failure) = self.fixture.failures.iter().enumerate().find(|(_, f)| {
            f.frame.is_none_or(|n| req.frame_numbers.first() == Some(&n))
                && f.prompt_contains
                    .as_ref()
                    .is_none_or(|s| req.prompt.contains(s.as_str()))
        })?;
        let key = Self::request_key(req, prompt_hash);
        let mut left = self.failures_left.lock().expect("mock state poisoned");
        let remaining = left.entry(index).or_default().entry(key).or_insert(failure.times);
        if *remaining == 0 {
            return None;
        }
        *remaining -= 1;
        let msg = format!("scripted failure for frames {:?}", req.frame_numbers);
        Some(match failure.kind {
            FailureKind::Transient => ProviderError::Transient(msg),
            FailureKind::Auth => ProviderError::Auth(msg),
            FailureKind::Fatal => ProviderError::Fatal(msg),
        })
    }
}

pub(crate) fn prompt_sha256(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        &self.fixture.id
    }

    fn send(&self, req: &ProviderRequest) -> Result<Generation, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("mock log poisoned").push(RecordedRequest {
            frame_numbers: req.frame_numbers.clone(),
            prompt: req.prompt.clone(),
            image_count: req.images.len(),
            params: req.params.clone(),
        });
        let hash = prompt_sha256(&req.prompt);
        if let Some(err) = self.scripted_failure(req, &hash) {
            return Err(err);
        }
        if let Some(rule) = self.fixture.rules.iter().find(|r| r.matches(req, &hash)) {
            return Ok(if rule.blocked {
                Generation::blocked()
            } else {
                Generation::text(rule.text.clone())
            });
        }
        Ok(Generation::text(if self.fixture.echo {
            req.prompt.clone()
        } else {
            self.fixture.default.clone()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::ImagePayload;
    use crate::vlm::{RetryPolicy, VlmClient};
    use std::sync::Arc;

    fn frame_req(frame: u64, prompt: &str) -> ProviderRequest {
        ProviderRequest {
            images: vec![ImagePayload::new("image/png", vec![0u8])],
            prompt: prompt.into(),
            params: GenerationParams::default(),
            frame_numbers: vec![frame],
        }
    }

    fn fixture() -> ProviderFixture {
        serde_json::from_str(
            r#"{
                "default": "A road scene.",
                "rules": [
                    {"frame": 15, "prompt_contains": "accident", "text": "Yes, a motorcycle has collided with a car."},
                    {"frame": 15, "text": "Shows a motorcycle accident"},
                    {"frame": 3, "blocked": true},
                    {"prompt_contains": "give a summary", "text": "The video shows a busy road."}
                ],
                "failures": [{"frame": 5, "times": 2}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn fixture_frame_answer() {
        let client = VlmClient::new(Arc::new(MockProvider::new(fixture())));
        let r = client.describe(&frame_req(15, "Describe the image.")).unwrap();
        assert_eq!(r.text, "Shows a motorcycle accident");
        assert!(!r.blocked);
        assert_eq!(r.provider_id, "mock");
    }

    #[test]
    fn unmapped_frame_gets_default() {
        let client = VlmClient::new(Arc::new(MockProvider::new(fixture())));
        let r = client.describe(&frame_req(16, "Describe the image.")).unwrap();
        assert_eq!(r.text, "A road scene.");
        assert!(!r.blocked);
    }

    #[test]
    fn blocked_rule_is_data() {
        let client = VlmClient::new(Arc::new(MockProvider::new(fixture())));
        let r = client.describe(&frame_req(3, "Describe the image.")).unwrap();
        assert!(r.blocked);
        assert!(r.text.is_empty());
    }

    #[test]
    fn fails_twice_then_succeeds_on_third_attempt() {
        let mock = Arc::new(MockProvider::new(fixture()));
        let client = VlmClient::new(mock.clone()).with_retry(RetryPolicy::immediate(3));
        let r = client.describe(&frame_req(5, "Describe the image.")).unwrap();
        assert_eq!(r.attempts, 3);
        assert_eq!(mock.call_count(), 3);
        // Failures are per request key; frame 6 is untouched.
        assert_eq!(
            client.describe(&frame_req(6, "Describe the image.")).unwrap().attempts,
            1
        );
    }

    #[test]
    fn echo_returns_prompt() {
        let client = VlmClient::new(Arc::new(MockProvider::echo()));
        let r = client
            .generate_text("say this back", &GenerationParams::default())
            .unwrap();
        assert_eq!(r.text, "say this back");
    }

    #[test]
    fn summary_prompt_rule() {
        let client = VlmClient::new(Arc::new(MockProvider::new(fixture())));
        let prompt = "These are image descriptions of a video. Understand, remove redundant information and give a summary.\n\nFrame 2 (00:02): ...";
        let r = client.generate_text(prompt, &GenerationParams::default()).unwrap();
        assert_eq!(r.text, "The video shows a busy road.");
    }

    #[test]
    fn prompt_hash_rule() {
        let mut fx = ProviderFixture::default();
        fx.rules.push(MockRule {
            prompt_sha256: Some(prompt_sha256("exact prompt")),
            text: "hashed".into(),
            ..MockRule::default()
        });
        let mock = MockProvider::new(fx);
        let req = ProviderRequest::text("exact prompt", GenerationParams::default());
        assert_eq!(mock.send(&req).unwrap().text, "hashed");
        let other = ProviderRequest::text("exact prompt!", GenerationParams::default());
        assert_eq!(mock.send(&other).unwrap().text, "");
    }

    #[test]
    fn deterministic_across_threads() {
        let mock = Arc::new(MockProvider::new(fixture()));
        let expected: Vec<String> = (0..32)
            .map(|f| {
                mock.send(&frame_req(f, "Describe the image."))
                    .map(|g| g.text)
                    .unwrap_or_default()
            })
            .collect();
        std::thread::scope(|s| {
            for _ in 0..4 {
                let mock = mock.clone();
                let expected = expected.clone();
                s.spawn(move || {
                    for f in (0..32u64).rev() {
                        if f == 5 {
                            continue;
                        }
                        let got = mock.send(&frame_req(f, "Describe the image.")).unwrap().text;
                        assert_eq!(got, expected[f as usize]);
                    }
                });
            }
        });
    }

    #[test]
    fn records_safety_settings() {
        let mock = MockProvider::echo();
        let params = GenerationParams {
            temperature: 0.7,
            ..GenerationParams::default()
        };
        mock.send(&ProviderRequest::text("p", params.clone())).unwrap();
        assert_eq!(mock.requests()[0].params, params);
    }
}
