//! Single-file SQLite store for sessions, metadata, events and recordings.

use std::path::Path;

use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use wingbeat_core::stream::{DetectionEvent, StreamMode};
use wingbeat_core::ClassId;

use crate::error::Result;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS sessions (
    id TEXT PRIMARY KEY,
    mode TEXT NOT NULL,
    state TEXT NOT NULL,
    created_at_ms INTEGER NOT NULL,
    closed_at_ms INTEGER,
    device_metadata TEXT NOT NULL,
    model_version TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS metadata (
    session_id TEXT PRIMARY KEY REFERENCES sessions(id),
    species_category TEXT,
    environment_notes TEXT,
    lat REAL,
    lon REAL,
    submitted_at_ms INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    session_id TEXT NOT NULL REFERENCES sessions(id),
    window_index INTEGER NOT NULL,
    window_start_s REAL NOT NULL,
    stage1_score REAL NOT NULL,
    mosquito_present INTEGER NOT NULL,
    species TEXT,
    votes TEXT,
    bands TEXT,
    PRIMARY KEY (session_id, window_index)
);
CREATE TABLE IF NOT EXISTS recordings (
    id TEXT PRIMARY KEY,
    session_id TEXT NOT NULL REFERENCES sessions(id),
    path TEXT NOT NULL,
    start_s REAL NOT NULL,
    end_s REAL NOT NULL,
    started_at_ms INTEGER NOT NULL,
    positive_events INTEGER NOT NULL,
    detected_species TEXT
);
CREATE INDEX IF NOT EXISTS recordings_session ON recordings(session_id);
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub id: String,
    pub mode: StreamMode,
    pub state: SessionState,
    pub created_at_ms: i64,
    pub closed_at_ms: Option<i64>,
    pub device_metadata: serde_json::Value,
    pub model_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment_notes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    pub submitted_at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingRow {
    pub id: String,
    pub session_id: String,
    /// Relative to the service data directory.
    pub path: String,
    pub start_s: f64,
    pub end_s: f64,
    pub started_at_ms: i64,
    pub positive_events: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detected_species: Option<ClassId>,
}

/// A recording as listed over HTTP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingView {
    #[serde(flatten)]
    pub recording: RecordingRow,
    pub mode: StreamMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<MetadataRow>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordingFilter {
    pub from_ms: Option<i64>,
    pub to_ms: Option<i64>,
    pub species_category: Option<String>,
    pub detected: Option<bool>,
}

fn mode_name(mode: StreamMode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .expect("mode serializes to a string")
}

fn parse_mode(s: String) -> rusqlite::Result<StreamMode> {
    serde_json::from_value(serde_json::Value::String(s))
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e)))
}

fn parse_json<T: serde::de::DeserializeOwned>(s: Option<String>) -> rusqlite::Result<Option<T>> {
    s.map(|s| {
        serde_json::from_str(&s)
            .map_err(|e| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e)))
    })
    .transpose()
}

pub struct Db {
    conn: Connection,
}

impl Db {
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn })
    }

    pub fn insert_session(&self, s: &SessionRow) -> Result<()> {
        self.conn.execute(
            "INSERT INTO sessions (id, mode, state, created_at_ms, closed_at_ms, device_metadata, model_version)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                s.id,
                mode_name(s.mode),
                state_name(s.state),
                s.created_at_ms,
                s.closed_at_ms,
                s.device_metadata.to_string(),
                s.model_version
            ],
        )?;
        Ok(())
    }

    pub fn session(&self, id: &str) -> Result<Option<SessionRow>> {
        Ok(self
            .conn
            .query_row(
                "SELECT id, mode, state, created_at_ms, closed_at_ms, device_metadata, model_version
                 FROM sessions WHERE id = ?1",
                [id],
                |r| {
                    Ok(SessionRow {
                        id: r.get(0)?,
                        mode: parse_mode(r.get(1)?)?,
                        state: if r.get::<_, String>(2)? == "open" {
                            SessionState::Open
                        } else {
                            SessionState::Closed
                        },
                        created_at_ms: r.get(3)?,
                        closed_at_ms: r.get(4)?,
                        device_metadata: parse_json(Some(r.get(5)?))?.unwrap_or_default(),
                        model_version: r.get(6)?,
                    })
                },
            )
            .optional()?)
    }

    pub fn set_mode(&self, id: &str, mode: StreamMode) -> Result<()> {
        self.conn.execute(
            "UPDATE sessions SET mode = ?2 WHERE id = ?1",
            params![id, mode_name(mode)],
        )?;
        Ok(())
    }

    /// Marks the session closed and stores its recordings in one transaction.
    pub fn close_session(&mut self, id: &str, closed_at_ms: i64, recordings: &[RecordingRow]) -> Result<()> {
        let tx = self.conn.transaction()?;
        for r in recordings {
            tx.execute(
                "INSERT INTO recordings (id, session_id, path, start_s, end_s, started_at_ms, positive_events, detected_species)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
                params![
                    r.id,
                    r.session_id,
                    r.path,
                    r.start_s,
                    r.end_s,
                    r.started_at_ms,
                    r.positive_events as i64,
                    r.detected_species.as_ref().map(|c| c.as_str().to_owned())
                ],
            )?;
        }
        tx.execute(
            "UPDATE sessions SET state = 'closed', closed_at_ms = ?2 WHERE id = ?1",
            params![id, closed_at_ms],
        )?;
        tx.commit()?;
        Ok(())
    }

    /// Closes sessions left open by an earlier process; returns how many.
    pub fn close_abandoned(&self, now_ms: i64) -> Result<usize> {
        Ok(self.conn.execute(
            "UPDATE sessions SET state = 'closed', closed_at_ms = ?1 WHERE state = 'open'",
            [now_ms],
        )?)
    }

    pub fn upsert_metadata(&self, session_id: &str, m: &MetadataRow) -> Result<()> {
        self.conn.execute(
            "INSERT INTO metadata (session_id, species_category, environment_notes, lat, lon, submitted_at_ms)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)
             ON CONFLICT(session_id) DO UPDATE SET species_category = ?2, environment_notes = ?3,
                 lat = ?4, lon = ?5, submitted_at_ms = ?6",
            params![
                session_id,
                m.species_category,
                m.environment_notes,
                m.location.map(|l| l.lat),
                m.location.map(|l| l.lon),
                m.submitted_at_ms
            ],
        )?;
        Ok(())
    }

    pub fn metadata(&self, session_id: &str) -> Result<Option<MetadataRow>> {
        Ok(self
            .conn
            .query_row(
                "SELECT species_category, environment_notes, lat, lon, submitted_at_ms FROM metadata WHERE session_id = ?1",
                [session_id],
                |r| metadata_from(r, 0),
            )
            .optional()?)
    }

    pub fn insert_events(&mut self, session_id: &str, events: &[DetectionEvent]) -> Result<()> {
        let tx = self.conn.transaction()?;
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO events (session_id, window_index, window_start_s, stage1_score, mosquito_present, species, votes, bands)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            )?;
            for e in events {
                stmt.execute(params![
                    session_id,
                    e.window_index as i64,
                    e.window_start_s,
                    e.stage1_score,
                    e.mosquito_present,
                    e.species.as_ref().map(|c| c.as_str().to_owned()),
                    e.species_votes
                        .as_ref()
                        .map(|v| serde_json::to_string(v).expect("votes serialize")),
                    e.bands
                        .as_ref()
                        .map(|v| serde_json::to_string(v).expect("bands serialize")),
                ])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    /// Logged events of a session in window order.
    pub fn events(&self, session_id: &str) -> Result<Vec<DetectionEvent>> {
        let mut stmt = self.conn.prepare(
            "SELECT window_index, window_start_s, stage1_score, mosquito_present, species, votes, bands
             FROM events WHERE session_id = ?1 ORDER BY window_index",
        )?;
        let rows = stmt.query_map([session_id], |r| {
            Ok(DetectionEvent {
                window_index: r.get::<_, i64>(0)? as u64,
                window_start_s: r.get(1)?,
                stage1_score: r.get(2)?,
                mosquito_present: r.get(3)?,
                species: r.get::<_, Option<String>>(4)?.map(ClassId::new),
                species_votes: parse_json(r.get(5)?)?,
                bands: parse_json(r.get(6)?)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn recordings(&self, filter: &RecordingFilter) -> Result<Vec<RecordingView>> {
        let mut stmt = self.conn.prepare(&format!(
            "{VIEW_SELECT}
             WHERE (?1 IS NULL OR r.started_at_ms >= ?1)
               AND (?2 IS NULL OR r.started_at_ms < ?2)
               AND (?3 IS NULL OR m.species_category = ?3)
               AND (?4 IS NULL OR (r.positive_events > 0) = ?4)
             ORDER BY r.started_at_ms, r.id"
        ))?;
        let rows = stmt.query_map(
            params![filter.from_ms, filter.to_ms, filter.species_category, filter.detected],
            view_from,
        )?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn recording(&self, id: &str) -> Result<Option<RecordingView>> {
        Ok(self
            .conn
            .query_row(&format!("{VIEW_SELECT} WHERE r.id = ?1"), [id], view_from)
            .optional()?)
    }

    pub fn session_recordings(&self, session_id: &str) -> Result<Vec<String>> {
        let mut stmt = self
            .conn
            .prepare("SELECT id FROM recordings WHERE session_id = ?1 ORDER BY start_s")?;
        let rows = stmt.query_map([session_id], |r| r.get(0))?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }
}

const VIEW_SELECT: &str = "
SELECT r.id, r.session_id, r.path, r.start_s, r.end_s, r.started_at_ms, r.positive_events, r.detected_species,
       s.mode, m.species_category, m.environment_notes, m.lat, m.lon, m.submitted_at_ms
FROM recordings r JOIN sessions s ON s.id = r.session_id LEFT JOIN metadata m ON m.session_id = r.session_id";

fn state_name(s: SessionState) -> &'static str {
    match s {
        SessionState::Open => "open",
        SessionState::Closed => "closed",
    }
}

fn metadata_from(r: &Row<'_>, at: usize) -> rusqlite::Result<MetadataRow> {
    let lat: Option<f64> = r.get(at + 2)?;
    let lon: Option<f64> = r.get(at + 3)?;
    Ok(MetadataRow {
        species_category: r.get(at)?,
        environment_notes: r.get(at + 1)?,
        location: lat.zip(lon).map(|(lat, lon)| Location { lat, lon }),
        submitted_at_ms: r.get(at + 4)?,
    })
}

fn view_from(r: &Row<'_>) -> rusqlite::Result<RecordingView> {
    let submitted: Option<i64> = r.get(13)?;
    Ok(RecordingView {
        recording: RecordingRow {
            id: r.get(0)?,
            session_id: r.get(1)?,
            path: r.get(2)?,
            start_s: r.get(3)?,
            end_s: r.get(4)?,
            started_at_ms: r.get(5)?,
            positive_events: r.get::<_, i64>(6)? as u64,
            detected_species: r.get::<_, Option<String>>(7)?.map(ClassId::new),
        },
        mode: parse_mode(r.get(8)?)?,
        metadata: submitted.map(|_| metadata_from(r, 9)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(id: &str) -> SessionRow {
        SessionRow {
            id: id.into(),
            mode: StreamMode::RecordAndDetect,
            state: SessionState::Open,
            created_at_ms: 1000,
            closed_at_ms: None,
            device_metadata: serde_json::json!({"device": "test"}),
            model_version: "m".into(),
        }
    }

    fn recording(id: &str, session: &str, started: i64, positives: u64) -> RecordingRow {
        RecordingRow {
            id: id.into(),
            session_id: session.into(),
            path: format!("recordings/{id}.wav"),
            start_s: 0.0,
            end_s: 1.0,
            started_at_ms: started,
            positive_events: positives,
            detected_species: None,
        }
    }

    #[test]
    fn sessions_events_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let mut db = Db::open(&dir.path().join("db.sqlite")).unwrap();
        db.insert_session(&session("a")).unwrap();
        db.insert_session(&session("b")).unwrap();
        assert_eq!(db.session("a").unwrap().unwrap(), session("a"));
        assert!(db.session("zz").unwrap().is_none());

        let e = DetectionEvent {
            window_index: 0,
            window_start_s: 0.0,
            stage1_score: 0.1 + 0.2,
            mosquito_present: true,
            species: Some("species_a".into()),
            species_votes: Some(vec![2, 0, 1]),
            bands: Some(vec![-1.0 / 3.0]),
        };
        db.insert_events("a", std::slice::from_ref(&e)).unwrap();
        assert_eq!(db.events("a").unwrap(), vec![e]);
        assert!(db.events("b").unwrap().is_empty());

        db.close_session("a", 5000, &[recording("a_0_1000", "a", 1000, 3)])
            .unwrap();
        db.close_session("b", 5000, &[recording("b_0_1000", "b", 9000, 0)])
            .unwrap();
        assert_eq!(db.session("a").unwrap().unwrap().state, SessionState::Closed);
        db.upsert_metadata(
            "a",
            &MetadataRow {
                species_category: Some("Aedes aegypti".into()),
                environment_notes: None,
                location: Some(Location { lat: 1.5, lon: -2.0 }),
                submitted_at_ms: 7,
            },
        )
        .unwrap();

        let ids = |f: RecordingFilter| -> Vec<String> {
            db.recordings(&f).unwrap().into_iter().map(|v| v.recording.id).collect()
        };
        assert_eq!(ids(RecordingFilter::default()), ["a_0_1000", "b_0_1000"]);
        let detected = RecordingFilter {
            detected: Some(true),
            ..RecordingFilter::default()
        };
        assert_eq!(ids(detected), ["a_0_1000"]);
        let species = RecordingFilter {
            species_category: Some("Aedes aegypti".into()),
            ..RecordingFilter::default()
        };
        assert_eq!(ids(species), ["a_0_1000"]);
        let window = RecordingFilter {
            from_ms: Some(2000),
            to_ms: Some(10_000),
            ..RecordingFilter::default()
        };
        assert_eq!(ids(window), ["b_0_1000"]);
        let view = db.recording("a_0_1000").unwrap().unwrap();
        assert_eq!(view.metadata.unwrap().location, Some(Location { lat: 1.5, lon: -2.0 }));
        assert_eq!(db.session_recordings("a").unwrap(), ["a_0_1000"]);
    }

    #[test]
    fn abandoned_sessions_are_closed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.sqlite");
        Db::open(&path).unwrap().insert_session(&session("a")).unwrap();
        let db = Db::open(&path).unwrap();
        assert_eq!(db.close_abandoned(9).unwrap(), 1);
        assert_eq!(db.session("a").unwrap().unwrap().closed_at_ms, Some(9));
    }
}
