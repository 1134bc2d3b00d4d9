#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use wingbeat::corpus::{featurize, Corpus};
use wingbeat::service::frames::Frame;
use wingbeat::service::{AppState, ServiceConfig};
use wingbeat_core::dataset::train_on;
use wingbeat_core::dsp::{AudioBuffer, DspConfig};
use wingbeat_core::pipeline::{TwoStageConfig, TwoStageModel};
use wingbeat_core::synth::{mixed_recording, synth_corpus, SynthConfig};
use wingbeat_core::ClassId;

pub const N_SPECIES: usize = 3;

pub fn synth_config() -> SynthConfig {
    SynthConfig {
        n_species: N_SPECIES,
        recordings_per_class: 2,
        recording_duration_s: 1.0,
        seed: 5,
        ..SynthConfig::default()
    }
}

pub fn model() -> Arc<TwoStageModel> {
    static MODEL: OnceLock<Arc<TwoStageModel>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let synth = synth_corpus(&synth_config()).unwrap();
            let corpus = Corpus {
                recordings: synth.recordings,
                tags: synth.tags,
            };
            let (samples, _) = featurize(&corpus, &ClassId::background(), &DspConfig::default()).unwrap();
            Arc::new(train_on(&samples, &TwoStageConfig::default()).unwrap())
        })
        .clone()
}

/// Noise with a call of `species` over `[call_start_s, call_end_s)`.
pub fn fixture(species: usize, duration_s: f64, call_start_s: f64, call_end_s: f64, seed: u64) -> AudioBuffer {
    let cfg = SynthConfig {
        recording_duration_s: duration_s,
        ..synth_config()
    };
    let audio = mixed_recording(&cfg, species, call_start_s, call_end_s, seed).unwrap();
    AudioBuffer::from_pcm16(&audio.to_pcm16(), 8000).unwrap()
}

pub struct Server {
    pub base: String,
    pub ws_base: String,
    pub data_dir: PathBuf,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub async fn start(config: ServiceConfig) -> Self {
        let data_dir = config.data_dir.clone();
        let state = AppState::open((*model()).clone(), config).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel();
        let task = tokio::spawn(wingbeat::service::serve(listener, state, async {
            let _ = rx.await;
        }));
        Self {
            base: format!("http://{addr}"),
            ws_base: format!("ws://{addr}"),
            data_dir,
            shutdown: Some(tx),
            task,
        }
    }

    pub async fn stop(mut self) {
        let _ = self.shutdown.take().unwrap().send(());
        let _ = tokio::time::timeout(Duration::from_secs(5), self.task).await;
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn create(&self, mode: &str) -> String {
        let resp = reqwest::Client::new()
            .post(self.url("/sessions"))
            .json(&serde_json::json!({"mode": mode, "device_metadata": {"device": "test"}}))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 201);
        let body: serde_json::Value = resp.json().await.unwrap();
        body["session_id"].as_str().unwrap().to_string()
    }

    pub async fn close(&self, id: &str) -> Vec<String> {
        let resp = reqwest::Client::new()
            .delete(self.url(&format!("/sessions/{id}")))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        let body: serde_json::Value = resp.json().await.unwrap();
        serde_json::from_value(body["recordings"].clone()).unwrap()
    }

    pub async fn get_json(&self, path: &str) -> (u16, serde_json::Value) {
        let resp = reqwest::get(self.url(path)).await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    pub async fn socket(&self, id: &str) -> Socket {
        let (ws, _) = connect_async(format!("{}/sessions/{id}/stream", self.ws_base))
            .await
            .unwrap();
        Socket { ws }
    }
}

pub struct Socket {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Socket {
    pub async fn send_pcm(&mut self, pcm: &[i16]) {
        let bytes: Vec<u8> = pcm.iter().flat_map(|s| s.to_le_bytes()).collect();
        self.ws.send(Message::binary(bytes)).await.unwrap();
    }

    pub async fn send_text(&mut self, text: &str) {
        self.ws.send(Message::text(text)).await.unwrap();
    }

    /// Next JSON frame, or `None` when the socket ends.
    pub async fn next(&mut self) -> Option<Frame> {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(30), self.ws.next())
                .await
                .expect("frame within 30 s")?;
            match msg.ok()? {
                Message::Text(t) => return Some(serde_json::from_str(t.as_str()).unwrap()),
                Message::Close(_) => return None,
                _ => continue,
            }
        }
    }

    /// Sends a flush and returns the frames received up to and including `Flushed`.
    pub async fn flush(&mut self) -> Vec<Frame> {
        self.send_text(r#"{"type":"flush"}"#).await;
        let mut out = Vec::new();
        while let Some(f) = self.next().await {
            let last = matches!(f, Frame::Flushed { .. });
            out.push(f);
            if last {
                break;
            }
        }
        out
    }

    /// Every frame up to and including `Closed`.
    pub async fn until_closed(&mut self) -> Vec<Frame> {
        let mut out = Vec::new();
        while let Some(f) = self.next().await {
            let last = matches!(f, Frame::Closed { .. });
            out.push(f);
            if last {
                break;
            }
        }
        out
    }
}

pub fn events(frames: &[Frame]) -> Vec<wingbeat_core::stream::DetectionEvent> {
    frames.iter().filter_map(Frame::event).collect()
}
