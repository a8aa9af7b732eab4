//! On-disk session store: one directory per session.
//!
//! ```text
//! <root>/sessions/<sid>/session.json
//! <root>/sessions/<sid>/batches/<bid>.json    batch metadata
//! <root>/sessions/<sid>/batches/<bid>.jsonl   one LuRecord per line
//! <root>/sessions/<sid>/labels.jsonl          label audit trail
//! ```
//!
//! Every mutation is written through (temp file + rename) before the
//! request returns, so a restart sees exactly what clients saw.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use utg_core::pipeline::{records_to_jsonl, GenParams, Label, LuRecord};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt store file: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

type Result<T> = std::result::Result<T, StoreError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    VaeTabular,
    VqvaeImage,
}

/// Absolute paths of the files a session generates from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vq: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<String>,
    /// Training data used as the novelty reference.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub mode: Mode,
    pub models: ModelRefs,
    pub params: GenParams,
    pub batches: Vec<String>,
    pub created: String,
    pub updated: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchInfo {
    pub id: String,
    pub params: GenParams,
    pub seed: u64,
    pub n: usize,
    pub created: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    #[serde(flatten)]
    pub info: BatchInfo,
    pub records: Vec<LuRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelEvent {
    pub time: String,
    pub batch: String,
    pub sample: u64,
    pub label: Label,
    pub note: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Ids are generated by the store; anything else cannot name a file.
fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 32 && id.bytes().all(|b| b.is_ascii_alphanumeric())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(bytes).map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(what.into())),
        Err(e) => return Err(io(path)(e)),
    };
    serde_json::from_str(&text).map_err(|source| StoreError::Corrupt {
        path: path.to_owned(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let sessions = root.join("sessions");
        fs::create_dir_all(&sessions).map_err(io(&sessions))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(StoreError::NotFound(format!("session {id:?}")));
        }
        Ok(self.root.join("sessions").join(id))
    }

    fn batch_paths(&self, sid: &str, bid: &str) -> Result<(PathBuf, PathBuf)> {
        if !valid_id(bid) {
            return Err(StoreError::NotFound(format!("batch {bid:?}")));
        }
        let dir = self.session_dir(sid)?.join("batches");
        Ok((dir.join(format!("{bid}.json")), dir.join(format!("{bid}.jsonl"))))
    }

    pub fn list_sessions(&self) -> Result<Vec<Session>> {
        let dir = self.root.join("sessions");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("session.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        ids.iter().map(|id| self.get_session(id)).collect()
    }

    pub fn get_session(&self, id: &str) -> Result<Session> {
        read_json(&self.session_dir(id)?.join("session.json"), &format!("session {id:?}"))
    }

    pub fn save_session(&self, s: &Session) -> Result<()> {
        let dir = self.session_dir(&s.id)?;
        let body = serde_json::to_vec_pretty(s).expect("session serializes");
        write_atomic(&dir.join("session.json"), &body)
    }

    /// Allocates the next sequential id (`s0001`, `s0002`, ...) and persists.
    pub fn create_session(&self, mode: Mode, models: ModelRefs, params: GenParams) -> Result<Session> {
        let next = self
            .list_sessions()?
            .iter()
            .filter_map(|s| s.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0)
            + 1;
        let id = format!("s{next:04}");
        let dir = self.session_dir(&id)?;
        let batches = dir.join("batches");
        fs::create_dir_all(&batches).map_err(io(&batches))?;
        let t = now();
        let s = Session {
            id,
            mode,
            models,
            params,
            batches: Vec::new(),
            created: t.clone(),
            updated: t,
        };
        self.save_session(&s)?;
        Ok(s)
    }

    /// Writes the batch files, then appends the batch to the session.
    pub fn append_batch(&self, session: &mut Session, info: BatchInfo, mut records: Vec<LuRecord>) -> Result<Batch> {
        for r in &mut records {
            r.batch = Some(info.id.clone());
        }
        let (meta, data) = self.batch_paths(&session.id, &info.id)?;
        write_atomic(&data, records_to_jsonl(&records).expect("records serialize").as_bytes())?;
        write_atomic(&meta, &serde_json::to_vec_pretty(&info).expect("info serializes"))?;
        session.batches.push(info.id.clone());
        session.updated = now();
        self.save_session(session)?;
        Ok(Batch { info, records })
    }

    pub fn next_batch_id(session: &Session) -> String {
        format!("b{:04}", session.batches.len() + 1)
    }

    pub fn get_batch(&self, sid: &str, bid: &str) -> Result<Batch> {
        let session = self.get_session(sid)?;
        if !session.batches.iter().any(|b| b == bid) {
            return Err(StoreError::NotFound(format!("batch {bid:?}")));
        }
        let (meta, data) = self.batch_paths(sid, bid)?;
        let info: BatchInfo = read_json(&meta, &format!("batch {bid:?}"))?;
        let text = fs::read_to_string(&data).map_err(io(&data))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| StoreError::Corrupt {
                    path: data.clone(),
                    source,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Batch { info, records })
    }

    pub fn get_record(&self, sid: &str, bid: &str, rid: u64) -> Result<LuRecord> {
        self.get_batch(sid, bid)?
            .records
            .into_iter()
            .find(|r| r.id == rid)
            .ok_or_else(|| StoreError::NotFound(format!("sample {rid}")))
    }

    /// Sets a record's label (and note, when given), rewrites the batch file
    /// and appends to the audit trail. Callers serialize label writes.
    pub fn label_record(&self, sid: &str, bid: &str, rid: u64, label: Label, note: Option<String>) -> Result<LuRecord> {
        let mut batch = self.get_batch(sid, bid)?;
        let rec = batch
            .records
            .iter_mut()
            .find(|r| r.id == rid)
            .ok_or_else(|| StoreError::NotFound(format!("sample {rid}")))?;
        rec.label = label;
        if let Some(n) = note {
            rec.note = n;
        }
        let updated = rec.clone();
        let (_, data) = self.batch_paths(sid, bid)?;
        write_atomic(&data, records_to_jsonl(&batch.records).expect("records serialize").as_bytes())?;

        let event = LabelEvent {
            time: now(),
            batch: bid.into(),
            sample: rid,
            label,
            note: updated.note.clone(),
        };
        let log = self.session_dir(sid)?.join("labels.jsonl");
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&log).map_err(io(&log))?;
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io(&log))?;
        f.sync_all().map_err(io(&log))?;

        let mut session = self.get_session(sid)?;
        session.updated = event.time;
        self.save_session(&session)?;
        Ok(updated)
    }

    pub fn label_history(&self, sid: &str) -> Result<Vec<LabelEvent>> {
        let log = self.session_dir(sid)?.join("labels.jsonl");
        let text = match fs::read_to_string(&log) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io(&log)(e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| StoreError::Corrupt {
                    path: log.clone(),
                    source,
                })
            })
            .collect()
    }

    /// All records of all batches, in batch order, as pipeline JSONL.
    pub fn export(&self, sid: &str) -> Result<String> {
        let session = self.get_session(sid)?;
        let mut out = String::new();
        for bid in &session.batches {
            out.push_str(&records_to_jsonl(&self.get_batch(sid, bid)?.records).expect("records serialize"));
        }
        Ok(out)
    }
}
