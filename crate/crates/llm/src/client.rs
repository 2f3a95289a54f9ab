//! Text-generation and SFT client abstraction over an external inference server.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{LlmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
}

pub trait GenerationClient: Send + Sync {
    fn model_id(&self) -> String;
    fn generate(&self, request: &GenerationRequest) -> Result<String>;
}

/// One supervised pair; `target` is a canonical answer string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub target: String,
}

pub trait SftClient {
    /// Trains on one batch and reports its loss.
    fn train_step(&mut self, batch: &[SftExample]) -> Result<f64>;
    /// Freezes the adapted weights and returns an identifier usable as a
    /// generation model id.
    fn finalize(&mut self) -> Result<String>;
}

/// Closure-backed client for tests and offline runs.
pub struct FnClient<F> {
    pub id: String,
    pub f: F,
}

impl<F> FnClient<F>
where
    F: Fn(&GenerationRequest) -> Result<String> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnClient { id: id.into(), f }
    }
}

impl<F> GenerationClient for FnClient<F>
where
    F: Fn(&GenerationRequest) -> Result<String> + Send + Sync,
{
    fn model_id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        (self.f)(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Server root, e.g. `http://127.0.0.1:8000`.
    pub base_url: String,
    pub model: String,
    pub timeout_seconds: u64,
    pub generate_path: String,
    pub sft_step_path: String,
    pub sft_finish_path: String,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8000".into(),
            model: String::new(),
            timeout_seconds: 120,
            generate_path: "/generate".into(),
            sft_step_path: "/sft/step".into(),
            sft_finish_path: "/sft/finish".into(),
        }
    }
}

/// JSON over HTTP: `{prompt, max_tokens, temperature, model}` → `{text}`.
pub struct HttpClient {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Deserialize)]
struct LossResponse {
    loss: f64,
}

#[derive(Deserialize)]
struct FinishResponse {
    model: String,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.base_url.is_empty() {
            return Err(LlmError::Config("empty base_url".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(HttpClient { config, agent })
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: &serde_json::Value) -> Result<T> {
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body.to_string())
            .map_err(|e| LlmError::Transport(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(format!("{url}: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Transport(format!("{url}: HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Transport(format!("{url}: bad response body: {e}")))
    }
}

impl GenerationClient for HttpClient {
    fn model_id(&self) -> String {
        self.config.model.clone()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        let body = serde_json::json!({
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "model": self.config.model,
        });
        self.post::<TextResponse>(&self.config.generate_path, &body).map(|r| r.text)
    }
}

impl SftClient for HttpClient {
    fn train_step(&mut self, batch: &[SftExample]) -> Result<f64> {
        let body = serde_json::json!({ "model": self.config.model, "examples": batch });
        let loss = self.post::<LossResponse>(&self.config.sft_step_path, &body)?.loss;
        if !loss.is_finite() {
            return Err(LlmError::Transport(format!("non-finite loss {loss}")));
        }
        Ok(loss)
    }

    fn finalize(&mut self) -> Result<String> {
        let body = serde_json::json!({ "model": self.config.model });
        self.post::<FinishResponse>(&self.config.sft_finish_path, &body).map(|r| r.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned JSON body per connection and returns the request bodies.
    fn serve(bodies: Vec<(u16, &'static str)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in bodies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
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
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    #[test]
    fn http_round_trip() {
        let (url, h) = serve(vec![
            (200, r#"{"text":"heroin"}"#),
            (503, "busy"),
            (200, r#"{"loss":0.25}"#),
            (200, r#"{"model":"m-sft"}"#),
        ]);
        let mut c = HttpClient::new(HttpConfig { base_url: url, model: "m".into(), ..Default::default() }).unwrap();
        let req = GenerationRequest { prompt: "p".into(), max_tokens: 8, temperature: 0.0 };
        assert_eq!(c.generate(&req).unwrap(), "heroin");
        assert!(matches!(c.generate(&req), Err(LlmError::Transport(_))));
        let ex = SftExample { prompt: "p".into(), target: "none".into() };
        assert_eq!(c.train_step(&[ex]).unwrap(), 0.25);
        assert_eq!(c.finalize().unwrap(), "m-sft");
        let seen = h.join().unwrap();
        let first: serde_json::Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(first["prompt"], "p");
        assert_eq!(first["max_tokens"], 8);
        assert_eq!(first["temperature"], 0.0);
        let step: serde_json::Value = serde_json::from_str(&seen[2]).unwrap();
        assert_eq!(step["examples"][0]["target"], "none");
    }

    #[test]
    fn unreachable_server_is_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let c = HttpClient::new(HttpConfig {
            base_url: format!("http://127.0.0.1:{port}"),
            timeout_seconds: 2,
            ..Default::default()
        })
        .unwrap();
        let req = GenerationRequest { prompt: "p".into(), max_tokens: 8, temperature: 0.0 };
        assert!(matches!(c.generate(&req), Err(LlmError::Transport(_))));
    }
}
