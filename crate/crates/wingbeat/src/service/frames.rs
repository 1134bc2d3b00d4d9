//! JSON text frames sent on the session socket.

use serde::{Deserialize, Serialize};
use wingbeat_core::stream::{DetectionEvent, StreamMode};
use wingbeat_core::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Overflow,
    SessionClosed,
    UnsupportedMode,
    BadFrame,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Detection {
        window_index: u64,
        window_start_s: f64,
        stage1_score: f64,
        mosquito_present: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        species: Option<ClassId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        votes: Option<Vec<u32>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bands: Option<Vec<f64>>,
    },
    Error {
        code: ErrorCode,
        message: String,
        /// Samples discarded by an overflow.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dropped: Option<usize>,
    },
    /// Acknowledges a subscription; detection frames follow from here on.
    Subscribed {
        mode: StreamMode,
    },
    /// Sent when pending audio passes the warning level of the ring buffer.
    Backpressure {
        fill_ratio: f64,
    },
    ModeChanged {
        mode: StreamMode,
    },
    /// Answers a flush: every chunk sent before it has been processed.
    Flushed {
        samples_received: u64,
    },
    /// Last frame of a session; lists the persisted recording ids.
    Closed {
        recordings: Vec<String>,
    },
}

/// Text frames a client may send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    Flush,
}

impl Frame {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Frame::Error {
            code,
            message: message.into(),
            dropped: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }

    /// The event carried by a detection frame.
    pub fn event(&self) -> Option<DetectionEvent> {
        match self {
            Frame::Detection {
                window_index,
                window_start_s,
                stage1_score,
                mosquito_present,
                species,
                votes,
                bands,
            } => Some(DetectionEvent {
                window_index: *window_index,
                window_start_s: *window_start_s,
                stage1_score: *stage1_score,
                mosquito_present: *mosquito_present,
                species: species.clone(),
                species_votes: votes.clone(),
                bands: bands.clone(),
            }),
            _ => None,
        }
    }
}

impl From<&DetectionEvent> for Frame {
    fn from(e: &DetectionEvent) -> Self {
        Frame::Detection {
            window_index: e.window_index,
            window_start_s: e.window_start_s,
            stage1_score: e.stage1_score,
            mosquito_present: e.mosquito_present,
            species: e.species.clone(),
            votes: e.species_votes.clone(),
            bands: e.bands.clone(),
        }
    }
}
