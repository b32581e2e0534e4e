//! Interactive pursuit sessions, independent of the HTTP layer.
//!
//! A session is the pursuit loop turned inside out: instead of reading
//! answers from a stored data point, it proposes a query and waits for the
//! caller to answer it. Fed the same answers, it produces exactly the
//! trajectory the batch loop would.

use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use vip_core::networks::Checkpoint;
use vip_core::pursuit::{StopMonitor, StoppingRule};
use vip_core::query::{encode_answer, History, Posterior, Step, StopReason, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    UnknownCheckpoint,
    UnknownSession,
    InvalidStoppingRule,
    WrongQuery,
    SessionStopped,
    IllegalAnswerValue,
    BadRequest,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::UnknownCheckpoint | ErrorCode::UnknownSession => 404,
            ErrorCode::InvalidStoppingRule | ErrorCode::BadRequest => 400,
            ErrorCode::WrongQuery => 409,
            ErrorCode::SessionStopped => 410,
            ErrorCode::IllegalAnswerValue => 422,
            ErrorCode::Internal => 500,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(error: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            error,
            message: message.into(),
        }
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.error, self.message)
    }
}

impl std::error::Error for ApiError {}

fn internal(e: vip_core::Error) -> ApiError {
    ApiError::new(ErrorCode::Internal, e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingAnswer,
    Stopped,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub checkpoint: String,
    pub stop: StoppingRule,
    pub created_at: f64,
    history: History,
    prior: Posterior,
    steps: Vec<Step>,
    monitor: StopMonitor,
    proposed: Option<usize>,
    stop_reason: Option<StopReason>,
}

impl Session {
    /// Fresh session on the empty history, proposing the querier's first
    /// choice. `stop` is parsed and range-checked against the query set.
    pub fn start(id: String, checkpoint_id: &str, ckpt: &Checkpoint, stop: &str) -> Result<Self, ApiError> {
        let n = ckpt.queries.len();
        let rule: StoppingRule = stop
            .parse()
            .map_err(|e: vip_core::Error| ApiError::new(ErrorCode::InvalidStoppingRule, e.to_string()))?;
        rule.validate(n)
            .map_err(|e| ApiError::new(ErrorCode::InvalidStoppingRule, e.to_string()))?;
        let history = History::empty(n);
        let prior = ckpt.classifier.posterior(&history).map_err(internal)?;
        let proposed = ckpt.querier.choose(&history).map_err(internal)?;
        Ok(Session {
            id,
            checkpoint: checkpoint_id.to_string(),
            stop: rule,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            monitor: StopMonitor::new(rule, &prior),
            history,
            prior,
            steps: Vec::new(),
            proposed: Some(proposed),
            stop_reason: None,
        })
    }

    pub fn status(&self) -> Status {
        if self.stop_reason.is_some() {
            Status::Stopped
        } else {
            Status::AwaitingAnswer
        }
    }

    pub fn proposed(&self) -> Option<usize> {
        self.proposed
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// Records the answer to the proposed query, then either proposes the
    /// next query or stops.
    pub fn answer(&mut self, ckpt: &Checkpoint, query_id: usize, raw: &str) -> Result<(), ApiError> {
        let Some(proposed) = self.proposed else {
            return Err(ApiError::new(ErrorCode::SessionStopped, format!("session {} has stopped", self.id)));
        };
        if query_id != proposed {
            return Err(ApiError::new(
                ErrorCode::WrongQuery,
                format!("expected an answer to query {proposed}, got {query_id}"),
            ));
        }
        let spec = ckpt.queries.get(query_id).expect("proposed query is in the set");
        let value = encode_answer(raw, spec).map_err(|e| ApiError::new(ErrorCode::IllegalAnswerValue, e.to_string()))?;
        self.history.push(query_id, value).map_err(internal)?;
        let posterior = ckpt.classifier.posterior(&self.history).map_err(internal)?;
        let reason = self.monitor.observe(&posterior, self.history.len(), self.history.num_queries());
        self.steps.push(Step {
            query: query_id,
            answer: value,
            posterior,
        });
        self.stop_reason = reason;
        self.proposed = match reason {
            Some(_) => None,
            None => Some(ckpt.querier.choose(&self.history).map_err(internal)?),
        };
        Ok(())
    }

    pub fn current_posterior(&self) -> &Posterior {
        self.steps.last().map(|s| &s.posterior).unwrap_or(&self.prior)
    }

    /// The finished run, once the session has stopped.
    pub fn trajectory(&self) -> Option<Trajectory> {
        self.stop_reason.map(|stop_reason| Trajectory {
            prior: self.prior.clone(),
            steps: self.steps.clone(),
            prediction: self.current_posterior().argmax(),
            stop_reason,
        })
    }

    pub fn snapshot(&self, ckpt: &Checkpoint) -> Snapshot {
        let name = |q: usize| ckpt.queries.get(q).map(|s| s.name.clone()).unwrap_or_default();
        let prediction = self.stop_reason.map(|_| {
            let index = self.current_posterior().argmax();
            Prediction {
                index,
                label: ckpt.labels.get(index).cloned().unwrap_or_default(),
            }
        });
        Snapshot {
            session_id: self.id.clone(),
            checkpoint: self.checkpoint.clone(),
            stop: self.stop.to_string(),
            status: self.status(),
            proposed_query: self.proposed.map(|id| QueryRef { id, name: name(id) }),
            posterior: self.current_posterior().probs().to_vec(),
            posteriors: std::iter::once(&self.prior)
                .chain(self.steps.iter().map(|s| &s.posterior))
                .map(|p| p.probs().to_vec())
                .collect(),
            history: self
                .steps
                .iter()
                .map(|s| HistoryEntry {
                    query_id: s.query,
                    query: name(s.query),
                    answer: s.answer,
                })
                .collect(),
            prediction,
            stop_reason: self.stop_reason,
            created_at: self.created_at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRef {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query_id: usize,
    pub query: String,
    /// Encoded answer value.
    pub answer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub label: String,
}

/// Read-only view of a session, as served by the API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub checkpoint: String,
    pub stop: String,
    pub status: Status,
    pub proposed_query: Option<QueryRef>,
    /// Posterior after the latest answer.
    pub posterior: Vec<f64>,
    /// Prior followed by the posterior after each answer.
    pub posteriors: Vec<Vec<f64>>,
    pub history: Vec<HistoryEntry>,
    pub prediction: Option<Prediction>,
    pub stop_reason: Option<StopReason>,
    pub created_at: f64,
}
