//! JSON wire contract between master, coordination server and workers.
//!
//! Every body is UTF-8 JSON. Floats are written in shortest round-trip form
//! and parsed with correct rounding, so a genome's weights arrive at a worker
//! bit-for-bit as the master produced them. Unknown fields are ignored;
//! missing required fields are reported by path.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DEFAULT_SPLIT_RATIOS, GLASS_NAME};
use crate::genome::{Fitness, Genome, HiddenBounds, ProblemDims};
use crate::mlp::{QpConfig, TrainReport};

pub const CONTENT_TYPE: &str = "application/json";

/// QuickProp settings shared by every evaluation of a job. The step size
/// comes from each genome's learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpParams {
    pub mu: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
}

impl Default for QpParams {
    fn default() -> Self {
        Self {
            mu: QpConfig::DEFAULT_MU,
            weight_decay: 0.0,
            max_epochs: 300,
        }
    }
}

impl QpParams {
    pub fn with_epsilon(&self, epsilon: f64) -> QpConfig {
        QpConfig {
            epsilon,
            mu: self.mu,
            max_epochs: self.max_epochs,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything a worker needs to evaluate a genome deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    pub dataset_name: String,
    pub dataset_checksum: String,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
    pub qp: QpParams,
    pub bounds: HiddenBounds,
    pub problem_dims: ProblemDims,
}

impl JobDescriptor {
    /// Descriptor for the vendored Glass data with default settings.
    pub fn glass(split_seed: u64) -> Self {
        Self {
            job_id: None,
            dataset_name: GLASS_NAME.to_string(),
            dataset_checksum: crate::dataset::glass_checksum(),
            split_seed,
            split_ratios: DEFAULT_SPLIT_RATIOS,
            qp: QpParams::default(),
            bounds: HiddenBounds::default(),
            problem_dims: ProblemDims::GLASS,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dataset_name.is_empty() {
            return Err("dataset_name: must not be empty".into());
        }
        if self.dataset_checksum.len() != 64 || !self.dataset_checksum.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err("dataset_checksum: expected 64 hex characters".into());
        }
        if self.split_ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err("split_ratios: must be positive and sum to 1".into());
        }
        self.qp.with_epsilon(1.0).validate().map_err(|e| format!("qp: {e}"))?;
        self.bounds.validate().map_err(|e| format!("bounds: {e}"))?;
        if self.problem_dims.inputs == 0 || self.problem_dims.outputs == 0 {
            return Err("problem_dims: inputs and outputs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTask {
    pub task_id: String,
    pub job_id: String,
    pub genome: Genome,
    pub generation: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub task_id: String,
    pub worker_id: String,
    pub fitness: Fitness,
    pub train_report: TrainReport,
    pub eval_duration_ms: u64,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    Gone,
    Conflict,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::BadRequest => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::Gone => 410,
            ErrorCode::Conflict => 409,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateJobResponse {
    pub job_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub tasks: Vec<EvaluationTask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedCount {
    pub accepted: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRequest {
    pub worker_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsPage {
    pub results: Vec<EvaluationResult>,
    pub cursor: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Active,
    Terminated,
}

/// Queue depth and progress of one job, served at `GET /jobs/{id}/status`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatusView {
    pub job_id: String,
    pub status: JobStatus,
    pub pending: usize,
    pub in_flight: usize,
    pub completed: usize,
    pub results: u64,
}

/// Every job known to the server, served at `GET /jobs`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobList {
    pub jobs: Vec<JobStatusView>,
}

/// A JSON body type with its own invariant check.
pub trait WireMessage: Serialize + DeserializeOwned {
    const KIND: &'static str;

    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

impl WireMessage for JobDescriptor {
    const KIND: &'static str = "JobDescriptor";
    fn check(&self) -> Result<(), String> {
        self.validate()
    }
}

impl WireMessage for EvaluationTask {
    const KIND: &'static str = "EvaluationTask";
    fn check(&self) -> Result<(), String> {
        if self.task_id.is_empty() {
            return Err("task_id: must not be empty".into());
        }
        let dims = self.genome.dims();
        self.genome.validate(dims, None).map_err(|e| format!("genome: {e}"))
    }
}

impl WireMessage for EvaluationResult {
    const KIND: &'static str = "EvaluationResult";
    fn check(&self) -> Result<(), String> {
        if self.task_id.is_empty() {
            return Err("task_id: must not be empty".into());
        }
        self.fitness.validate().map_err(|e| format!("fitness: {e}"))?;
        if !(self.train_report.final_train_mse >= 0.0 && self.train_report.final_train_mse.is_finite()) {
            return Err("train_report.final_train_mse: must be finite and >= 0".into());
        }
        Ok(())
    }
}

impl WireMessage for ErrorEnvelope {
    const KIND: &'static str = "ErrorEnvelope";
}

impl WireMessage for CreateJobResponse {
    const KIND: &'static str = "CreateJobResponse";
}

impl WireMessage for TaskBatch {
    const KIND: &'static str = "TaskBatch";
    fn check(&self) -> Result<(), String> {
        for (i, t) in self.tasks.iter().enumerate() {
            t.check().map_err(|e| format!("tasks[{i}].{e}"))?;
        }
        Ok(())
    }
}

impl WireMessage for AcceptedCount {
    const KIND: &'static str = "AcceptedCount";
}

impl WireMessage for ClaimRequest {
    const KIND: &'static str = "ClaimRequest";
    fn check(&self) -> Result<(), String> {
        if self.worker_id.is_empty() {
            return Err("worker_id: must not be empty".into());
        }
        Ok(())
    }
}

impl WireMessage for SubmitAck {
    const KIND: &'static str = "SubmitAck";
}

impl WireMessage for ResultsPage {
    const KIND: &'static str = "ResultsPage";
    fn check(&self) -> Result<(), String> {
        for (i, r) in self.results.iter().enumerate() {
            r.check().map_err(|e| format!("results[{i}].{e}"))?;
        }
        Ok(())
    }
}

impl WireMessage for JobStatusView {
    const KIND: &'static str = "JobStatusView";
}

impl WireMessage for JobList {
    const KIND: &'static str = "JobList";
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("malformed {kind} at `{field}`: {message}")]
pub struct DecodeError {
    pub kind: &'static str,
    /// Dotted path of the first offending field (`.` for the document root).
    pub field: String,
    pub message: String,
}

pub fn encode<M: WireMessage>(message: &M) -> Vec<u8> {
    serde_json::to_vec(message).expect("wire messages serialize infallibly")
}

pub fn decode<M: WireMessage>(bytes: &[u8]) -> Result<M, DecodeError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let value: M = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let message = err.inner().to_string();
        DecodeError {
            kind: M::KIND,
            field: offending_field(&path, &message),
            message,
        }
    })?;
    value.check().map_err(|msg| {
        let (field, message) = match msg.split_once(": ") {
            Some((f, m)) => (f.to_string(), m.to_string()),
            None => (".".to_string(), msg),
        };
        DecodeError {
            kind: M::KIND,
            field,
            message,
        }
    })?;
    Ok(value)
}

/// serde reports a missing field at its parent's path; append the name.
fn offending_field(path: &str, message: &str) -> String {
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match missing {
        Some(name) if path == "." => name.to_string(),
        Some(name) => format!("{path}.{name}"),
        None => path.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::GenomeId;
    use crate::matrix::Matrix;

    fn minimal_genome() -> Genome {
        Genome {
            genome_id: GenomeId(1),
            hidden_count: 2,
            w_ih: Matrix::zeros(2, 10),
            w_ho: Matrix::zeros(6, 3),
            learning_rate: 0.1,
            generation_born: 0,
        }
    }

    #[test]
    fn minimal_genome_round_trips() {
        let task = EvaluationTask {
            task_id: "0-0".into(),
            job_id: "j".into(),
            genome: minimal_genome(),
            generation: 0,
        };
        assert_eq!(decode::<EvaluationTask>(&encode(&task)).unwrap(), task);
    }

    #[test]
    fn non_dyadic_weight_round_trips_bitwise() {
        let mut g = minimal_genome();
        g.w_ih.set(0, 0, 0.1);
        g.w_ih.set(1, 3, 1.0 / 3.0);
        g.w_ho.set(5, 2, -2.2250738585072014e-308);
        let task = EvaluationTask {
            task_id: "t".into(),
            job_id: "j".into(),
            genome: g,
            generation: 3,
        };
        let back = decode::<EvaluationTask>(&encode(&task)).unwrap();
        assert_eq!(back.genome.w_ih.get(0, 0).to_bits(), 0.1f64.to_bits());
        assert_eq!(back.genome.w_ih.get(1, 3).to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(back.genome.w_ho.get(5, 2).to_bits(), (-2.2250738585072014e-308f64).to_bits());
    }

    #[test]
    fn missing_field_is_named() {
        let err = decode::<ClaimRequest>(b"{}").unwrap_err();
        assert_eq!(err.field, "worker_id");
        let mut v = serde_json::to_value(EvaluationTask {
            task_id: "t".into(),
            job_id: "j".into(),
            genome: minimal_genome(),
            generation: 0,
        })
        .unwrap();
        v["genome"].as_object_mut().unwrap().remove("learning_rate");
        let err = decode::<EvaluationTask>(v.to_string().as_bytes()).unwrap_err();
        assert_eq!(err.field, "genome.learning_rate");
        assert_eq!(err.kind, "EvaluationTask");
    }

    #[test]
    fn wrong_type_names_path() {
        let body = br#"{"tasks":[{"task_id":"a","job_id":"j","generation":"x","genome":{}}]}"#;
        let err = decode::<TaskBatch>(body).unwrap_err();
        assert!(err.field.starts_with("tasks[0]"), "{err}");
    }

    #[test]
    fn unknown_fields_ignored() {
        let req: ClaimRequest = decode(br#"{"worker_id":"w1","shiny":true}"#).unwrap();
        assert_eq!(req.worker_id, "w1");
    }

    #[test]
    fn descriptor_invariants_checked_on_decode() {
        let mut d = JobDescriptor::glass(1);
        d.validate().unwrap();
        d.qp.max_epochs = 0;
        let err = decode::<JobDescriptor>(&encode(&d)).unwrap_err();
        assert_eq!(err.field, "qp");
        let mut d = JobDescriptor::glass(1);
        d.dataset_checksum = "abc".into();
        assert_eq!(decode::<JobDescriptor>(&encode(&d)).unwrap_err().field, "dataset_checksum");
    }

    #[test]
    fn job_id_omitted_when_absent() {
        let d = JobDescriptor::glass(1);
        let text = String::from_utf8(encode(&d)).unwrap();
        assert!(!text.contains("job_id"));
    }

    #[test]
    fn error_codes_snake_case() {
        let e = ErrorEnvelope {
            code: ErrorCode::BadRequest,
            message: "x".into(),
        };
        assert_eq!(
            String::from_utf8(encode(&e)).unwrap(),
            r#"{"code":"bad_request","message":"x"}"#
        );
        assert_eq!(ErrorCode::Gone.http_status(), 410);
    }
}
