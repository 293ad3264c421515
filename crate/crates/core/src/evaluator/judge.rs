//! HTTP client for an external judge that returns per-dimension JSON.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Dimension, DimensionScore, EvalScores};
use crate::datagen::EditSample;
use crate::error::{MiveError, Result};
use crate::io::video::frame_png_bytes;
use crate::tensor::Video;

pub const DEFAULT_FRAMES: usize = 40;

/// `floor(k (T - 1) / (frames - 1))` for `k < frames`, deduplicated.
pub fn sample_frame_indices(t: usize, frames: usize) -> Vec<usize> {
    if t == 0 || frames == 0 {
        return Vec::new();
    }
    if frames == 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..frames).map(|k| k * (t - 1) / (frames - 1)).collect();
    idx.dedup();
    idx
}

/// Request body: base64 PNG frames plus the instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub instruction: String,
    #[serde(rename = "ref", skip_serializing_if = "Option::is_none", default)]
    pub reference: Option<String>,
    pub src_frames: Vec<String>,
    pub out_frames: Vec<String>,
}

impl JudgeRequest {
    pub fn build(sample: &EditSample, output: &Video, frames: usize, with_ref: bool) -> Result<Self> {
        output.check_same_shape(&sample.src_video)?;
        let idx = sample_frame_indices(output.frames(), frames);
        let encode = |v: &Video, t: usize| frame_png_bytes(v, t).map(|b| STANDARD.encode(b));
        Ok(Self {
            instruction: sample.instruction().to_string(),
            reference: if with_ref { Some(encode(&sample.ref_image, 0)?) } else { None },
            src_frames: idx.iter().map(|&t| encode(&sample.src_video, t)).collect::<Result<_>>()?,
            out_frames: idx.iter().map(|&t| encode(output, t)).collect::<Result<_>>()?,
        })
    }
}

/// Parses a JSON array of objects `{"<DIM>_score": x, "reasoning": "..."}`,
/// one per dimension.
pub fn parse_judge_response(text: &str) -> Result<EvalScores> {
    let value: Value = serde_json::from_str(text)?;
    let items = value
        .as_array()
        .ok_or_else(|| MiveError::format("judge response must be a JSON array"))?;
    let mut dims = BTreeMap::new();
    for item in items {
        let obj = item
            .as_object()
            .ok_or_else(|| MiveError::format("judge entries must be JSON objects"))?;
        let reasoning = obj
            .get("reasoning")
            .and_then(Value::as_str)
            .ok_or_else(|| MiveError::format("judge entry lacks a reasoning string"))?;
        let mut found = None;
        for d in Dimension::ALL {
            if let Some(v) = obj.get(&format!("{}_score", d.code())) {
                if found.is_some() {
                    return Err(MiveError::format("judge entry scores more than one dimension"));
                }
                let score = v
                    .as_f64()
                    .ok_or_else(|| MiveError::format(format!("{d} score is not a number")))?;
                found = Some((d, score));
            }
        }
        let (d, score) = found.ok_or_else(|| MiveError::format("judge entry names no known dimension"))?;
        let entry = DimensionScore {
            score,
            reasoning: reasoning.to_string(),
        };
        if dims.insert(d, entry).is_some() {
            return Err(MiveError::format(format!("judge scored {d} twice")));
        }
    }
    EvalScores::new(dims)
}

/// Judge endpoint with a per-call timeout and bounded retries.
#[derive(Debug, Clone)]
pub struct JudgeClient {
    pub endpoint: String,
    pub timeout: Duration,
    pub attempts: u32,
    pub backoff: Duration,
}

impl JudgeClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(60),
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into()
    }

    /// Posts `request`, retrying transport failures and 5xx replies with
    /// doubling backoff.
    pub fn send(&self, request: &JudgeRequest) -> Result<EvalScores> {
        let agent = self.agent();
        let mut last = String::new();
        for attempt in 1..=self.attempts.max(1) {
            match agent.post(&self.endpoint).send_json(request) {
                Ok(resp) => {
                    let text = resp.into_body().read_to_string().map_err(|e| MiveError::Network {
                        attempts: attempt,
                        message: format!("reading response: {e}"),
                    })?;
                    return parse_judge_response(&text).map_err(|e| {
                        MiveError::format(format!("judge response after {attempt} attempt(s): {e}"))
                    });
                }
                Err(ureq::Error::StatusCode(code)) if code < 500 => {
                    return Err(MiveError::Network {
                        attempts: attempt,
                        message: format!("endpoint answered HTTP {code}"),
                    });
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.attempts {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
        }
        Err(MiveError::Network {
            attempts: self.attempts.max(1),
            message: last,
        })
    }

    pub fn score(&self, sample: &EditSample, output: &Video, frames: usize) -> Result<EvalScores> {
        self.send(&JudgeRequest::build(sample, output, frames, true)?)
    }
}

/// Scores `output` through the judge at `endpoint` with default transport
/// settings.
pub fn remote_judge(endpoint: &str, sample: &EditSample, output: &Video, frames: usize) -> Result<EvalScores> {
    JudgeClient::new(endpoint).score(sample, output, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sample, EditType, GenConfig};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    fn canned_response() -> String {
        let entries: Vec<Value> = Dimension::ALL
            .iter()
            .enumerate()
            .map(|(i, d)| {
                serde_json::json!({
                    format!("{}_score", d.code()): 7.5 + i as f64 * 0.25,
                    "reasoning": format!("{} looks fine", d.title()),
                })
            })
            .collect();
        Value::Array(entries).to_string()
    }

    /// Serves the given (status, body) replies in order and forwards each
    /// request body.
    fn mock(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                let _ = tx.send(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/judge"), rx)
    }

    fn fast(endpoint: String) -> JudgeClient {
        JudgeClient {
            backoff: Duration::from_millis(5),
            timeout: Duration::from_secs(5),
            ..JudgeClient::new(endpoint)
        }
    }

    #[test]
    fn frame_indices() {
        assert_eq!(sample_frame_indices(9, 40), (0..9).collect::<Vec<_>>());
        assert_eq!(sample_frame_indices(81, 40).len(), 40);
        assert_eq!(sample_frame_indices(81, 5), vec![0, 20, 40, 60, 80]);
        assert_eq!(sample_frame_indices(5, 1), vec![0]);
    }

    #[test]
    fn parses_and_round_trips() {
        let s = parse_judge_response(&canned_response()).unwrap();
        assert_eq!(s.get(Dimension::IA), 7.5);
        assert_eq!(s.get(Dimension::SC), 8.75);
        let back: EvalScores = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn schema_violations_are_rejected() {
        let mut v: Vec<Value> = serde_json::from_str(&canned_response()).unwrap();
        v.pop();
        assert_eq!(parse_judge_response(&Value::Array(v.clone()).to_string()).unwrap_err().kind(), "format");
        v.push(serde_json::json!({"SC_score": 11.0, "reasoning": "x"}));
        assert!(parse_judge_response(&Value::Array(v).to_string()).is_err());
        assert!(parse_judge_response("{\"IA_score\": 3}").is_err());
    }

    #[test]
    fn mock_endpoint_scores_a_sample() {
        let sample = generate_sample(EditType::Delete, 1, GenConfig::default()).unwrap();
        let (url, rx) = mock(vec![(200, canned_response())]);
        let scores = fast(url).score(&sample, &sample.tgt_video, 40).unwrap();
        assert_eq!(scores, parse_judge_response(&canned_response()).unwrap());
        let req: JudgeRequest = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(req.src_frames.len(), 9);
        assert_eq!(req.out_frames.len(), 9);
        assert!(req.reference.is_some());
        assert_eq!(req.instruction, sample.instruction());
    }

    #[test]
    fn server_errors_are_retried() {
        let sample = generate_sample(EditType::Add, 1, GenConfig::default()).unwrap();
        let (url, _rx) = mock(vec![(503, "busy".into()), (200, canned_response())]);
        assert!(fast(url).score(&sample, &sample.tgt_video, 3).is_ok());
    }

    #[test]
    fn unreachable_endpoint_reports_attempts() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let sample = generate_sample(EditType::Add, 1, GenConfig::default()).unwrap();
        match fast(format!("http://127.0.0.1:{port}/")).score(&sample, &sample.tgt_video, 3) {
            Err(MiveError::Network { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected network error, got {other:?}"),
        }
    }
}
