//! HTTP client for the `/v1` wire protocol.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{self, codes, ErrorResponse, FinetuneRequest, IclRequest, PredictRequest, PredictResponse};
use super::{Backend, BackendCapabilities, FinetuneAck, IclScore};
use crate::engine::Instruction;
use crate::error::{Error, Result};
use crate::io::FinetuneRow;
use crate::types::{LogitVector, PredictionRecord};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
const ATTEMPTS: u32 = 3;
const BASE_BACKOFF: Duration = Duration::from_millis(100);
const TIMEOUT: Duration = Duration::from_secs(120);

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    /// Worth another attempt: transport error or server fault.
    Transient(String),
    Final(Error),
}

pub struct RemoteBackend {
    base: String,
    agent: ureq::Agent,
    gate: Gate,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(TIMEOUT))
            .build()
            .into();
        RemoteBackend {
            base: endpoint.trim_end_matches('/').to_owned(),
            agent,
            gate: Gate::new(max_in_flight),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn attempt(&self, path: &str, body: Option<&str>) -> std::result::Result<String, Failure> {
        let url = format!("{}{path}", self.base);
        let sent = match body {
            Some(b) => self
                .agent
                .post(&url)
                .header("content-type", "application/json")
                .send(b),
            None => self.agent.get(&url).call(),
        };
        let mut response = sent.map_err(|e| Failure::Transient(format!("{url}: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transient(format!("{url}: {e}")))?;
        if status == 200 {
            return Ok(text);
        }
        let detail = protocol::decode::<ErrorResponse>(&text)
            .map(|r| r.error)
            .ok();
        let message = match &detail {
            Some(d) => format!("{url}: {} ({})", d.message, d.code),
            None => format!("{url}: HTTP {status}"),
        };
        match (status, detail.as_ref().map(|d| d.code.as_str())) {
            (_, Some(codes::UNSUPPORTED)) | (501, _) => Err(Failure::Final(Error::Capability(message))),
            (500..=599, _) => Err(Failure::Transient(message)),
            _ => Err(Failure::Final(Error::backend(None, message))),
        }
    }

    fn exchange<T: DeserializeOwned>(&self, path: &str, body: Option<&str>) -> Result<T> {
        let _permit = self.gate.acquire();
        let mut last = String::new();
        for attempt in 0..ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(BASE_BACKOFF * 2u32.pow(attempt - 1));
            }
            match self.attempt(path, body) {
                Ok(text) => {
                    return protocol::decode(&text)
                        .map_err(|e| Error::backend(None, format!("malformed {path} response: {e}")));
                }
                Err(Failure::Final(e)) => return Err(e),
                Err(Failure::Transient(m)) => {
                    log::warn!("{m}; attempt {} of {ATTEMPTS}", attempt + 1);
                    last = m;
                }
            }
        }
        Err(Error::backend(None, format!("giving up after {ATTEMPTS} attempts: {last}")))
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp> {
        self.exchange(path, Some(&protocol::encode(req)))
    }
}

impl Backend for RemoteBackend {
    fn capabilities(&self) -> Result<BackendCapabilities> {
        let caps: BackendCapabilities = self.exchange(protocol::INFO_PATH, None)?;
        caps.validate()?;
        Ok(caps)
    }

    fn predict_batch(&self, item_ids: &[String]) -> Result<Vec<Result<PredictionRecord>>> {
        let resp: PredictResponse = self.post(
            protocol::PREDICT_PATH,
            &PredictRequest {
                item_ids: item_ids.to_vec(),
            },
        )?;
        if resp.predictions.len() != item_ids.len() {
            return Err(Error::backend(
                None,
                format!("asked for {} predictions, got {}", item_ids.len(), resp.predictions.len()),
            ));
        }
        Ok(resp
            .predictions
            .into_iter()
            .zip(item_ids)
            .map(|(entry, asked)| {
                if &entry.item_id != asked {
                    return Err(Error::backend(Some(asked), format!("response out of order: got {}", entry.item_id)));
                }
                match (entry.error, entry.logits) {
                    (Some(err), _) => Err(Error::backend(Some(asked), format!("{} ({})", err.message, err.code))),
                    (None, Some(logits)) => PredictionRecord::new(asked, LogitVector::new(logits)?, entry.features),
                    (None, None) => Err(Error::backend(Some(asked), "entry has neither logits nor error")),
                }
            })
            .collect())
    }

    fn score_icl(&self, instruction: &Instruction) -> Result<IclScore> {
        let score: IclScore = self.post(protocol::ICL_PATH, &IclRequest::from_instruction(instruction))?;
        IclScore::new(score.true_logit, score.false_logit)
    }

    fn request_finetune(&self, records: &[FinetuneRow], epochs: usize, learning_rate: f64) -> Result<FinetuneAck> {
        self.post(
            protocol::FINETUNE_PATH,
            &FinetuneRequest {
                records: records.to_vec(),
                epochs,
                learning_rate,
            },
        )
    }
}
