//! Per-session worker thread.
//!
//! Each session owns a [`StreamSession`] on a dedicated thread fed by a
//! command channel, so audio, mode changes, subscriptions and close are
//! applied in arrival order. Detection frames fan out to every subscriber.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use tokio::sync::{mpsc::UnboundedSender, oneshot};
use wingbeat_core::pipeline::TwoStageModel;
use wingbeat_core::stream::{persisted_segments, DetectionEvent, Segment, StreamConfig, StreamMode, StreamSession};
use wingbeat_core::ClassId;

use super::db::{Db, RecordingRow};
use super::frames::{ErrorCode, Frame};
use crate::audio::encode_wav_pcm16;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write_bytes;

pub const RECORDINGS_DIR: &str = "recordings";

enum Command {
    Audio(Vec<i16>),
    SetMode(StreamMode, oneshot::Sender<Result<()>>),
    Subscribe(UnboundedSender<Frame>),
    Flush(UnboundedSender<Frame>),
    Close(oneshot::Sender<Result<Vec<String>>>),
}

/// What an ingest attempt did with a chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ingest {
    Accepted { fill_ratio: f64 },
    Overflow { dropped: usize },
    Closed,
}

pub struct SessionHandle {
    pub id: String,
    pub created_at_ms: i64,
    tx: Mutex<mpsc::Sender<Command>>,
    pending: Arc<AtomicUsize>,
    capacity: usize,
    closed: AtomicBool,
    close_lock: tokio::sync::Mutex<Option<Vec<String>>>,
    mode: Mutex<StreamMode>,
}

impl SessionHandle {
    pub fn spawn(
        id: String,
        created_at_ms: i64,
        model: Arc<TwoStageModel>,
        config: StreamConfig,
        db: Arc<Mutex<Db>>,
        data_dir: PathBuf,
    ) -> Result<Arc<Self>> {
        let stream = StreamSession::new(model, config.clone())?;
        let (tx, rx) = mpsc::channel();
        let pending = Arc::new(AtomicUsize::new(0));
        let worker = Worker {
            id: id.clone(),
            created_at_ms,
            mode_spans: vec![(0, config.mode)],
            config: config.clone(),
            stream,
            pcm: Vec::new(),
            events: Vec::new(),
            subscribers: Vec::new(),
            db,
            data_dir,
            pending: pending.clone(),
        };
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || worker.run(rx))
            .map_err(|e| Error::Usage(format!("cannot start session worker: {e}")))?;
        Ok(Arc::new(Self {
            id,
            created_at_ms,
            tx: Mutex::new(tx),
            pending,
            capacity: config.ring_capacity_samples(),
            closed: AtomicBool::new(false),
            close_lock: tokio::sync::Mutex::new(None),
            mode: Mutex::new(config.mode),
        }))
    }

    pub fn mode(&self) -> StreamMode {
        *self.mode.lock().expect("mode lock")
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    fn send(&self, cmd: Command) -> bool {
        self.tx.lock().expect("command lock").send(cmd).is_ok()
    }

    /// Queues a chunk unless the samples already waiting plus the chunk exceed the ring.
    pub fn ingest(&self, pcm: Vec<i16>) -> Ingest {
        if self.is_closed() {
            return Ingest::Closed;
        }
        let n = pcm.len();
        let before = self.pending.fetch_add(n, Ordering::SeqCst);
        if before + n > self.capacity {
            self.pending.fetch_sub(n, Ordering::SeqCst);
            return Ingest::Overflow { dropped: n };
        }
        if !self.send(Command::Audio(pcm)) {
            self.pending.fetch_sub(n, Ordering::SeqCst);
            return Ingest::Closed;
        }
        Ingest::Accepted {
            fill_ratio: (before + n) as f64 / self.capacity as f64,
        }
    }

    pub fn subscribe(&self, out: UnboundedSender<Frame>) -> bool {
        !self.is_closed() && self.send(Command::Subscribe(out))
    }

    /// Asks the worker to answer on `out` once every queued chunk is processed.
    pub fn flush(&self, out: UnboundedSender<Frame>) -> bool {
        self.send(Command::Flush(out))
    }

    pub async fn set_mode(&self, mode: StreamMode) -> Result<()> {
        let (tx, rx) = oneshot::channel();
        if self.is_closed() || !self.send(Command::SetMode(mode, tx)) {
            return Err(wingbeat_core::Error::SessionClosed.into());
        }
        rx.await
            .map_err(|_| Error::from(wingbeat_core::Error::SessionClosed))??;
        *self.mode.lock().expect("mode lock") = mode;
        Ok(())
    }

    /// Closes the session once; later calls return the same recording ids.
    pub async fn close(&self) -> Result<Vec<String>> {
        let mut done = self.close_lock.lock().await;
        if let Some(ids) = done.as_ref() {
            return Ok(ids.clone());
        }
        let (tx, rx) = oneshot::channel();
        self.closed.store(true, Ordering::SeqCst);
        if !self.send(Command::Close(tx)) {
            return Err(wingbeat_core::Error::SessionClosed.into());
        }
        let ids = rx
            .await
            .map_err(|_| Error::from(wingbeat_core::Error::SessionClosed))??;
        *done = Some(ids.clone());
        Ok(ids)
    }
}

struct Worker {
    id: String,
    created_at_ms: i64,
    config: StreamConfig,
    stream: StreamSession,
    /// Absolute sample position at which each mode took effect.
    mode_spans: Vec<(u64, StreamMode)>,
    pcm: Vec<i16>,
    events: Vec<DetectionEvent>,
    subscribers: Vec<UnboundedSender<Frame>>,
    db: Arc<Mutex<Db>>,
    data_dir: PathBuf,
    pending: Arc<AtomicUsize>,
}

impl Worker {
    fn run(mut self, rx: mpsc::Receiver<Command>) {
        while let Ok(cmd) = rx.recv() {
            match cmd {
                Command::Audio(pcm) => {
                    let n = pcm.len();
                    if let Err(e) = self.audio(pcm) {
                        tracing::error!(session = %self.id, error = %e, "audio processing failed");
                        self.broadcast(Frame::error(ErrorCode::Internal, e.to_string()));
                    }
                    self.pending.fetch_sub(n, Ordering::SeqCst);
                }
                Command::SetMode(mode, reply) => {
                    let _ = reply.send(self.set_mode(mode));
                }
                Command::Subscribe(out) => {
                    let mode = self.stream.config().mode;
                    let ack = if mode.detects() {
                        Frame::Subscribed { mode }
                    } else {
                        Frame::error(
                            ErrorCode::UnsupportedMode,
                            "record_only sessions produce no detection events",
                        )
                    };
                    if out.send(ack).is_ok() {
                        self.subscribers.push(out);
                    }
                }
                Command::Flush(out) => {
                    let _ = out.send(Frame::Flushed {
                        samples_received: self.stream.samples_received(),
                    });
                }
                Command::Close(reply) => {
                    let result = self.close();
                    if let Ok(ids) = &result {
                        self.broadcast(Frame::Closed {
                            recordings: ids.clone(),
                        });
                    }
                    self.subscribers.clear();
                    let _ = reply.send(result);
                    return;
                }
            }
        }
    }

    fn broadcast(&mut self, frame: Frame) {
        self.subscribers.retain(|s| s.send(frame.clone()).is_ok());
    }

    fn audio(&mut self, pcm: Vec<i16>) -> Result<()> {
        self.stream.push_pcm16(&pcm)?;
        self.pcm.extend_from_slice(&pcm);
        let events = self.stream.poll_detections()?;
        if events.is_empty() {
            return Ok(());
        }
        self.db.lock().expect("db lock").insert_events(&self.id, &events)?;
        for e in &events {
            self.broadcast(Frame::from(e));
        }
        self.events.extend(events);
        Ok(())
    }

    fn set_mode(&mut self, mode: StreamMode) -> Result<()> {
        if mode == self.stream.config().mode {
            return Ok(());
        }
        self.stream.set_mode(mode)?;
        self.mode_spans.push((self.stream.samples_received(), mode));
        self.db.lock().expect("db lock").set_mode(&self.id, mode)?;
        self.broadcast(Frame::ModeChanged { mode });
        Ok(())
    }

    /// Segments to persist: spans recorded in a whole-recording mode are kept
    /// entirely, record-on-detection spans keep only their gated segments.
    fn segments(&self) -> Vec<Segment> {
        let rate = self.config.sample_rate_hz as f64;
        let total = self.pcm.len() as u64;
        let mut out: Vec<Segment> = Vec::new();
        for (i, &(a, mode)) in self.mode_spans.iter().enumerate() {
            let b = self.mode_spans.get(i + 1).map_or(total, |s| s.0);
            if b <= a {
                continue;
            }
            let (a_s, b_s) = (a as f64 / rate, b as f64 / rate);
            let cfg = StreamConfig {
                mode,
                ..self.config.clone()
            };
            for p in persisted_segments(&self.events, b_s, &cfg) {
                let s = Segment {
                    start_s: p.start_s.max(a_s),
                    end_s: p.end_s.min(b_s),
                };
                if s.end_s <= s.start_s {
                    continue;
                }
                match out.last_mut() {
                    Some(prev) if s.start_s <= prev.end_s => prev.end_s = prev.end_s.max(s.end_s),
                    _ => out.push(s),
                }
            }
        }
        out
    }

    fn close(&mut self) -> Result<Vec<String>> {
        self.stream.close()?;
        let rate = self.config.sample_rate_hz as f64;
        let dir = self.data_dir.join(RECORDINGS_DIR);
        std::fs::create_dir_all(&dir).map_err(crate::error::io_err(&dir))?;
        let mut rows = Vec::new();
        for seg in self.segments() {
            let a = ((seg.start_s * rate).round() as usize).min(self.pcm.len());
            let b = ((seg.end_s * rate).round() as usize).clamp(a, self.pcm.len());
            let (start_ms, end_ms) = (
                (seg.start_s * 1000.0).round() as i64,
                (seg.end_s * 1000.0).round() as i64,
            );
            let id = format!("{}_{start_ms}_{end_ms}", self.id);
            let rel = format!("{RECORDINGS_DIR}/{id}.wav");
            let bytes = encode_wav_pcm16(&self.pcm[a..b], self.config.sample_rate_hz)?;
            atomic_write_bytes(&self.data_dir.join(&rel), &bytes)?;
            let inside: Vec<&DetectionEvent> = self
                .events
                .iter()
                .filter(|e| e.mosquito_present && e.window_start_s >= seg.start_s && e.window_start_s < seg.end_s)
                .collect();
            rows.push(RecordingRow {
                id,
                session_id: self.id.clone(),
                path: rel,
                start_s: seg.start_s,
                end_s: seg.end_s,
                started_at_ms: self.created_at_ms + start_ms,
                positive_events: inside.len() as u64,
                detected_species: dominant_species(&inside),
            });
        }
        let now = chrono::Utc::now().timestamp_millis();
        self.db.lock().expect("db lock").close_session(&self.id, now, &rows)?;
        Ok(rows.into_iter().map(|r| r.id).collect())
    }
}

/// Most frequent species among events; the smaller id wins a tie.
fn dominant_species(events: &[&DetectionEvent]) -> Option<ClassId> {
    let mut counts: BTreeMap<&ClassId, usize> = BTreeMap::new();
    for s in events.iter().filter_map(|e| e.species.as_ref()) {
        *counts.entry(s).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, n)| *n == best).map(|(c, _)| c.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_species_breaks_ties_by_id() {
        let ev = |s: &str| DetectionEvent {
            window_index: 0,
            window_start_s: 0.0,
            stage1_score: 1.0,
            mosquito_present: true,
            species: Some(s.into()),
            species_votes: None,
            bands: None,
        };
        let (b, a, b2) = (ev("b"), ev("a"), ev("b"));
        assert_eq!(dominant_species(&[&b, &a, &b2]).unwrap().as_str(), "b");
        assert_eq!(dominant_species(&[&b, &a]).unwrap().as_str(), "a");
        assert_eq!(dominant_species(&[]), None);
    }
}
