use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use crate::data::ImageGrid;

use super::backend::TeacherBackend;
use super::TeacherError;

pub const DEFAULT_TIMEOUT_S: u64 = 30;

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    images: Vec<String>,
    instruction: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: Option<String>,
}

/// Base64 of the grid's row-major color bytes.
pub fn encode_image(img: &ImageGrid) -> String {
    STANDARD.encode(img.cells())
}

/// JSON-over-HTTP teacher: `POST {base}/generate`.
pub struct RemoteTeacher {
    endpoint: String,
    api_key: Option<String>,
    agent: Agent,
}

impl RemoteTeacher {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, TeacherError> {
        let base = base_url.trim().trim_end_matches('/');
        if base.is_empty() {
            return Err(TeacherError::Config("teacher URL is empty".into()));
        }
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteTeacher {
            endpoint: format!("{base}/generate"),
            api_key: api_key.filter(|k| !k.is_empty()),
            agent,
        })
    }

    /// Reads `TEACHER_URL`, `TEACHER_API_KEY` and `TEACHER_TIMEOUT_S`.
    pub fn from_env() -> Result<Self, TeacherError> {
        let url = std::env::var("TEACHER_URL")
            .map_err(|_| TeacherError::Config("TEACHER_URL is not set".into()))?;
        let timeout = match std::env::var("TEACHER_TIMEOUT_S") {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| TeacherError::Config(format!("TEACHER_TIMEOUT_S `{v}` is not an integer")))?,
            Err(_) => DEFAULT_TIMEOUT_S,
        };
        Self::new(&url, std::env::var("TEACHER_API_KEY").ok(), Duration::from_secs(timeout))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl TeacherBackend for RemoteTeacher {
    fn name(&self) -> &str {
        "remote"
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn generate(&self, images: &[ImageGrid], instruction: &str, prompt: &str) -> Result<String, TeacherError> {
        let body = GenerateRequest {
            prompt,
            images: images.iter().map(encode_image).collect(),
            instruction,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| TeacherError::Backend(e.to_string()))?;
        let status = resp.status();
        if status != 200 {
            return Err(TeacherError::Backend(format!("HTTP {}", status.as_u16())));
        }
        let parsed: GenerateResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TeacherError::Backend(format!("bad response body: {e}")))?;
        parsed
            .text
            .ok_or_else(|| TeacherError::Backend("response has no `text`".into()))
    }
}
