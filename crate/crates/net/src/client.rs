//! Blocking HTTP client for the coordination server. Used by both the
//! master (through [`crate::remote::RemoteEvaluator`]) and the workers.

use std::time::Duration;

use gprop_core::protocol::{
    self, AcceptedCount, ClaimRequest, CreateJobResponse, ErrorCode, ErrorEnvelope, EvaluationResult,
    EvaluationTask, JobDescriptor, JobList, JobStatusView, ResultsPage, SubmitAck, TaskBatch, WireMessage,
};
use reqwest::blocking::{Client as Http, RequestBuilder};
use reqwest::StatusCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    /// The request never produced an HTTP response.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server answered {status}: {message}")]
    Api {
        status: u16,
        code: Option<ErrorCode>,
        message: String,
    },
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl ClientError {
    /// Worth retrying: the server may come back.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Api { status, .. } => *status >= 500,
            ClientError::Decode(_) => false,
        }
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Api { code, .. } => *code,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClaimOutcome {
    Task(EvaluationTask),
    Empty,
    Terminated,
}

#[derive(Clone)]
pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        Self::with_timeout(base_url, Duration::from_secs(30))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, ClientError> {
        let http = Http::builder()
            .timeout(timeout)
            .connect_timeout(Duration::from_secs(5))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn send(&self, req: RequestBuilder) -> Result<(StatusCode, Vec<u8>), ClientError> {
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| ClientError::Transport(e.to_string()))?.to_vec();
        if status.is_client_error() || status.is_server_error() {
            let (code, message) = match protocol::decode::<ErrorEnvelope>(&bytes) {
                Ok(env) => (Some(env.code), env.message),
                Err(_) => (None, String::from_utf8_lossy(&bytes).into_owned()),
            };
            return Err(ClientError::Api {
                status: status.as_u16(),
                code,
                message,
            });
        }
        Ok((status, bytes))
    }

    fn post<M: WireMessage>(&self, path: &str, body: &M) -> RequestBuilder {
        self.http
            .post(self.url(path))
            .header(reqwest::header::CONTENT_TYPE, protocol::CONTENT_TYPE)
            .body(protocol::encode(body))
    }

    fn parse<M: WireMessage>(bytes: &[u8]) -> Result<M, ClientError> {
        protocol::decode(bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn health(&self) -> Result<(), ClientError> {
        let (_, body) = self.send(self.http.get(self.url("/")))?;
        if body == b"ok" {
            Ok(())
        } else {
            Err(ClientError::Decode("unexpected liveness body".into()))
        }
    }

    pub fn create_job(&self, descriptor: &JobDescriptor) -> Result<String, ClientError> {
        let (_, body) = self.send(self.post("/jobs", descriptor))?;
        Ok(Self::parse::<CreateJobResponse>(&body)?.job_id)
    }

    pub fn list_jobs(&self) -> Result<JobList, ClientError> {
        let (_, body) = self.send(self.http.get(self.url("/jobs")))?;
        Self::parse(&body)
    }

    pub fn descriptor(&self, job_id: &str) -> Result<JobDescriptor, ClientError> {
        let (_, body) = self.send(self.http.get(self.url(&format!("/jobs/{job_id}"))))?;
        Self::parse(&body)
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatusView, ClientError> {
        let (_, body) = self.send(self.http.get(self.url(&format!("/jobs/{job_id}/status"))))?;
        Self::parse(&body)
    }

    pub fn enqueue(&self, job_id: &str, tasks: Vec<EvaluationTask>) -> Result<usize, ClientError> {
        let (_, body) = self.send(self.post(&format!("/jobs/{job_id}/tasks"), &TaskBatch { tasks }))?;
        Ok(Self::parse::<AcceptedCount>(&body)?.accepted)
    }

    pub fn claim(&self, job_id: &str, worker_id: &str) -> Result<ClaimOutcome, ClientError> {
        let req = ClaimRequest {
            worker_id: worker_id.to_string(),
        };
        match self.send(self.post(&format!("/jobs/{job_id}/claim"), &req)) {
            Ok((StatusCode::NO_CONTENT, _)) => Ok(ClaimOutcome::Empty),
            Ok((_, body)) => Ok(ClaimOutcome::Task(Self::parse(&body)?)),
            Err(ClientError::Api { status: 410, .. }) => Ok(ClaimOutcome::Terminated),
            Err(e) => Err(e),
        }
    }

    pub fn submit(&self, job_id: &str, result: &EvaluationResult) -> Result<bool, ClientError> {
        let (_, body) = self.send(self.post(&format!("/jobs/{job_id}/results"), result))?;
        Ok(Self::parse::<SubmitAck>(&body)?.accepted)
    }

    pub fn collect(&self, job_id: &str, after: u64) -> Result<ResultsPage, ClientError> {
        let url = self.url(&format!("/jobs/{job_id}/results?after={after}"));
        let (_, body) = self.send(self.http.get(url))?;
        Self::parse(&body)
    }

    pub fn terminate(&self, job_id: &str) -> Result<JobStatusView, ClientError> {
        let (_, body) = self.send(self.http.post(self.url(&format!("/jobs/{job_id}/terminate"))))?;
        Self::parse(&body)
    }
}
