//! OpenAI-compatible `/chat/completions` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatRole, CompletionResponse, PromptRequest};

pub const API_BASE_ENV: &str = "TRACEREPAIR_API_BASE";
pub const API_KEY_ENV: &str = "TRACEREPAIR_API_KEY";

const DEFAULT_BASE: &str = "https://api.openai.com/v1";
const MAX_RETRIES: u32 = 2;

pub struct OpenAiBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    model: String,
    retry_delay: Duration,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Done(Result<CompletionResponse, BackendError>),
    Retry(BackendError),
}

impl OpenAiBackend {
    pub fn new(base_url: &str, api_key: Option<String>, model: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key: api_key.filter(|k| !k.is_empty()),
            model: model.into(),
            retry_delay: Duration::from_millis(500),
        }
    }

    /// Reads `TRACEREPAIR_API_BASE` (defaulting to the public OpenAI endpoint)
    /// and `TRACEREPAIR_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Self {
        let base = std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_BASE.to_string());
        Self::new(&base, std::env::var(API_KEY_ENV).ok(), model)
    }

    pub fn with_retry_delay(mut self, delay: Duration) -> Self {
        self.retry_delay = delay;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, body: &ChatBody<'_>) -> Attempt {
        let mut request = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match request.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Attempt::Retry(BackendError::Status { status, body });
        }
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Attempt::Done(Err(BackendError::Status { status, body }));
        }
        let reply: ChatReply = match resp.body_mut().read_json() {
            Ok(r) => r,
            Err(e) => return Attempt::Done(Err(BackendError::Malformed(e.to_string()))),
        };
        let content = reply.choices.into_iter().next().and_then(|c| c.message.content);
        let Some(content) = content else {
            return Attempt::Done(Err(BackendError::Malformed("no message content in choices".into())));
        };
        let usage = reply.usage.unwrap_or(WireUsage { prompt_tokens: 0, completion_tokens: 0 });
        Attempt::Done(Ok(CompletionResponse {
            content,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        }))
    }
}

impl Backend for OpenAiBackend {
    fn complete(&self, req: &PromptRequest) -> Result<CompletionResponse, BackendError> {
        let body = ChatBody {
            model: &self.model,
            messages: req
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        ChatRole::System => "system",
                        ChatRole::User => "user",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: req.temperature,
        };
        // Retries stay inside the single reserved invocation.
        let mut last = None;
        for attempt in 0..=MAX_RETRIES {
            if attempt > 0 {
                std::thread::sleep(self.retry_delay * attempt);
            }
            match self.attempt(&body) {
                Attempt::Done(result) => return result,
                Attempt::Retry(e) => {
                    tracing::debug!(attempt, "transient backend error: {e}");
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| BackendError::Transport("no attempt made".into())))
    }

    fn name(&self) -> &str {
        "openai"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{chat, Message, RoleTag, UsageLedger};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves the given (status, body) pairs in order, one per connection,
    /// and records each request body.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = Arc::clone(&seen);
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut req = vec![0u8; len];
                reader.read_exact(&mut req).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(req).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn ok_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 120, "completion_tokens": 85}
        })
        .to_string()
    }

    fn request() -> PromptRequest {
        PromptRequest::new(RoleTag::Judge, 3, vec![Message::system("sys"), Message::user("hi")], 1.0)
    }

    #[test]
    fn successful_call_records_usage() {
        let (base, seen) = serve(vec![(200, ok_body("patched"))]);
        let backend = OpenAiBackend::new(&base, Some("k".into()), "m1");
        let ledger = UsageLedger::with_budget(40);
        let resp = chat(request(), &ledger, &backend).unwrap();
        assert_eq!(resp.content, "patched");
        let u = ledger.snapshot();
        assert_eq!((u.invocations, u.prompt_tokens, u.completion_tokens), (1, 120, 85));
        let sent: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "m1");
        assert_eq!(sent["temperature"], 1.0);
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["messages"][1]["content"], "hi");
    }

    #[test]
    fn retries_transient_errors_within_one_invocation() {
        let (base, seen) = serve(vec![(503, "busy".into()), (429, "slow".into()), (200, ok_body("ok"))]);
        let backend = OpenAiBackend::new(&base, None, "m").with_retry_delay(Duration::from_millis(1));
        let ledger = UsageLedger::with_budget(40);
        assert_eq!(chat(request(), &ledger, &backend).unwrap().content, "ok");
        assert_eq!(ledger.snapshot().invocations, 1);
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_two_retries() {
        let (base, _) = serve(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
        let backend = OpenAiBackend::new(&base, None, "m").with_retry_delay(Duration::from_millis(1));
        let err = backend.complete(&request()).unwrap_err();
        assert!(matches!(err, BackendError::Status { status: 500, .. }));
    }

    #[test]
    fn malformed_payload_is_none() {
        let (base, _) = serve(vec![(200, "{\"nope\": 1}".into())]);
        let backend = OpenAiBackend::new(&base, None, "m");
        let ledger = UsageLedger::with_budget(40);
        assert!(chat(request(), &ledger, &backend).is_none());
        assert_eq!(ledger.snapshot().invocations, 1);
    }

    #[test]
    fn client_error_not_retried() {
        let (base, seen) = serve(vec![(401, "denied".into())]);
        let backend = OpenAiBackend::new(&base, None, "m");
        assert!(matches!(backend.complete(&request()), Err(BackendError::Status { status: 401, .. })));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn unreachable_host_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let backend = OpenAiBackend::new(&format!("http://{addr}"), None, "m").with_retry_delay(Duration::from_millis(1));
        assert!(matches!(backend.complete(&request()), Err(BackendError::Transport(_))));
    }
}
