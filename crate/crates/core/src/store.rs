//! Versioned tree storage and session persistence.
//!
//! Layout under the store root, all canonical JSON:
//!
//! ```text
//! trees/{tree_id}/{version}.json
//! sessions/{session_id}.json
//! ```
//!
//! Every stored tree version is loaded into an in-memory index on open and
//! never modified afterwards. Writes go through a temp file and a rename so a
//! crash leaves either the old or the new document on disk.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use crate::session::SessionState;
use crate::tree::{DecisionTree, NodeKey, TransitionEdge, TreeError};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("corrupt document {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("unknown node '{0}'")]
    UnknownNode(NodeKey),
    #[error("session '{0}' already has a turn in flight")]
    SessionBusy(String),
    #[error("invalid session state: {0}")]
    InvalidSession(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::StoreUnavailable(e.to_string())
    }
}

/// Read-only view of one stored tree version.
#[derive(Debug, Clone)]
pub struct StoredTreeHandle {
    tree: Arc<DecisionTree>,
}

impl StoredTreeHandle {
    pub fn tree_id(&self) -> &str {
        self.tree.tree_id()
    }

    pub fn version(&self) -> u64 {
        self.tree.version()
    }

    pub fn tree(&self) -> &DecisionTree {
        &self.tree
    }

    /// Edges leaving `node` in ingest order; empty for terminal nodes.
    pub fn outgoing_edges(&self, node: &NodeKey) -> Result<Vec<&TransitionEdge>, StoreError> {
        self.tree.outgoing(node).map_err(|e| match e {
            TreeError::UnknownNode(n) => StoreError::UnknownNode(n),
            other => StoreError::StoreUnavailable(other.to_string()),
        })
    }
}

impl Deref for StoredTreeHandle {
    type Target = DecisionTree;

    fn deref(&self) -> &DecisionTree {
        &self.tree
    }
}

/// Exclusive claim on a session, released on drop.
#[derive(Debug)]
pub struct SessionGuard {
    id: String,
    locks: Arc<Mutex<HashSet<String>>>,
}

impl Drop for SessionGuard {
    fn drop(&mut self) {
        self.locks.lock().expect("session lock table").remove(&self.id);
    }
}

#[derive(Debug, Default)]
pub struct EdgeStore {
    root: Option<PathBuf>,
    trees: RwLock<HashMap<String, BTreeMap<u64, Arc<DecisionTree>>>>,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    sessions: RwLock<HashMap<String, SessionState>>,
    session_locks: Arc<Mutex<HashSet<String>>>,
}

impl EdgeStore {
    /// A store that never touches disk.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a store rooted at `root` and indexes every
    /// tree version found there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("trees"))?;
        fs::create_dir_all(root.join("sessions"))?;
        let mut trees: HashMap<String, BTreeMap<u64, Arc<DecisionTree>>> = HashMap::new();
        for dir in fs::read_dir(root.join("trees"))? {
            let dir = dir?;
            if !dir.file_type()?.is_dir() {
                continue;
            }
            let tree_id = dir.file_name().to_string_lossy().into_owned();
            for file in fs::read_dir(dir.path())? {
                let path = file?.path();
                let Some(version) = path
                    .extension()
                    .filter(|e| *e == "json")
                    .and_then(|_| path.file_stem())
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse::<u64>().ok())
                else {
                    continue;
                };
                let tree = read_json::<DecisionTree>(&path)?;
                if tree.tree_id() != tree_id || tree.version() != version {
                    return Err(StoreError::Corrupt {
                        path: path.display().to_string(),
                        reason: "document id/version does not match its location".into(),
                    });
                }
                trees.entry(tree_id.clone()).or_default().insert(version, Arc::new(tree));
            }
        }
        Ok(Self {
            root: Some(root),
            trees: RwLock::new(trees),
            ..Self::default()
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn tree_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.trees.read().expect("tree index").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn versions(&self, tree_id: &str) -> Vec<u64> {
        self.trees
            .read()
            .expect("tree index")
            .get(tree_id)
            .map(|v| v.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn latest_version(&self, tree_id: &str) -> Option<u64> {
        self.versions(tree_id).last().copied()
    }

    /// Stores `tree` as the next version of its tree id and returns it.
    ///
    /// Writes for one tree id are serialized; the index only changes after
    /// the document is durable.
    pub fn put_tree(&self, tree: DecisionTree) -> Result<StoredTreeHandle, StoreError> {
        let writer = {
            let mut writers = self.writers.lock().expect("writer table");
            writers.entry(tree.tree_id().to_string()).or_default().clone()
        };
        let _exclusive = writer.lock().expect("tree writer");
        let next = self.latest_version(tree.tree_id()).unwrap_or(0) + 1;
        let tree = tree.with_version(next);
        if let Some(root) = &self.root {
            let path = root
                .join("trees")
                .join(checked_component(tree.tree_id())?)
                .join(format!("{next}.json"));
            write_atomic(&path, tree.to_canonical_json().as_bytes())?;
        }
        let tree = Arc::new(tree);
        self.trees
            .write()
            .expect("tree index")
            .entry(tree.tree_id().to_string())
            .or_default()
            .insert(next, tree.clone());
        Ok(StoredTreeHandle { tree })
    }

    /// A stored version, or the latest when `version` is `None`.
    pub fn load_version(
        &self,
        tree_id: &str,
        version: Option<u64>,
    ) -> Result<StoredTreeHandle, StoreError> {
        let trees = self.trees.read().expect("tree index");
        let versions = trees
            .get(tree_id)
            .ok_or_else(|| StoreError::NotFound(format!("tree '{tree_id}'")))?;
        let tree = match version {
            Some(v) => versions.get(&v),
            None => versions.values().next_back(),
        }
        .ok_or_else(|| {
            StoreError::NotFound(format!("tree '{tree_id}' version {}", version.unwrap_or(0)))
        })?;
        Ok(StoredTreeHandle { tree: tree.clone() })
    }

    pub fn persist_session(&self, session: &SessionState) -> Result<(), StoreError> {
        if session.session_id.is_empty() {
            return Err(StoreError::InvalidSession("empty session id".into()));
        }
        if !session.history_is_ordered() {
            return Err(StoreError::InvalidSession("history is not strictly time-ordered".into()));
        }
        let handle = self.load_version(&session.tree_id, Some(session.tree_version))?;
        if !handle.contains(session.current_node.as_str()) {
            return Err(StoreError::UnknownNode(session.current_node.clone()));
        }
        if let Some(root) = &self.root {
            let path = root
                .join("sessions")
                .join(format!("{}.json", checked_component(&session.session_id)?));
            let body = serde_json::to_vec_pretty(session)
                .map_err(|e| StoreError::StoreUnavailable(e.to_string()))?;
            write_atomic(&path, &body)?;
        }
        self.sessions
            .write()
            .expect("session cache")
            .insert(session.session_id.clone(), session.clone());
        Ok(())
    }

    pub fn load_session(&self, session_id: &str) -> Result<SessionState, StoreError> {
        if let Some(s) = self.sessions.read().expect("session cache").get(session_id) {
            return Ok(s.clone());
        }
        let Some(root) = &self.root else {
            return Err(StoreError::NotFound(format!("session '{session_id}'")));
        };
        let path = root
            .join("sessions")
            .join(format!("{}.json", checked_component(session_id)?));
        if !path.exists() {
            return Err(StoreError::NotFound(format!("session '{session_id}'")));
        }
        let session: SessionState = read_json(&path)?;
        self.sessions
            .write()
            .expect("session cache")
            .insert(session_id.to_string(), session.clone());
        Ok(session)
    }

    pub fn session_exists(&self, session_id: &str) -> bool {
        self.load_session(session_id).is_ok()
    }

    /// Claims a session for one turn; fails fast when another turn holds it.
    pub fn try_lock_session(&self, session_id: &str) -> Result<SessionGuard, StoreError> {
        let mut locks = self.session_locks.lock().expect("session lock table");
        if !locks.insert(session_id.to_string()) {
            return Err(StoreError::SessionBusy(session_id.to_string()));
        }
        Ok(SessionGuard {
            id: session_id.to_string(),
            locks: self.session_locks.clone(),
        })
    }
}

/// Rejects ids that would escape their directory.
fn checked_component(id: &str) -> Result<&str, StoreError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(['/', '\\', '\0']);
    if ok {
        Ok(id)
    } else {
        Err(StoreError::InvalidSession(format!("'{id}' is not a valid identifier")))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("doc"),
        uuid::Uuid::new_v4().simple()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Speaker;
    use crate::tree::testing::{key, tree_of};

    #[test]
    fn versions_increment_and_pin() {
        let store = EdgeStore::in_memory();
        let v1 = store.put_tree(tree_of("A", &[("t1", "A", "B")])).unwrap();
        let v2 = store
            .put_tree(tree_of("A", &[("t1", "A", "B"), ("t2", "B", "C")]))
            .unwrap();
        assert_eq!((v1.version(), v2.version()), (1, 2));
        assert_eq!(store.load_version("t", None).unwrap().version(), 2);
        let old = store.load_version("t", Some(1)).unwrap();
        assert_eq!(old.edges().len(), 1);
        assert!(matches!(
            store.load_version("t", Some(9)),
            Err(StoreError::NotFound(_))
        ));
        assert!(matches!(
            store.load_version("nope", None),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn outgoing_edges_in_stored_order() {
        let store = EdgeStore::in_memory();
        let h = store
            .put_tree(tree_of(
                "A",
                &[("t1", "A", "B"), ("t2", "A", "C"), ("t3", "A", "D")],
            ))
            .unwrap();
        let keys: Vec<&str> = h
            .outgoing_edges(&key("A"))
            .unwrap()
            .iter()
            .map(|e| e.transition_key.as_str())
            .collect();
        assert_eq!(keys, ["t1", "t2", "t3"]);
        assert!(h.outgoing_edges(&key("B")).unwrap().is_empty());
        assert!(matches!(
            h.outgoing_edges(&key("Q")),
            Err(StoreError::UnknownNode(_))
        ));
    }

    #[test]
    fn session_round_trip_and_not_found() {
        let store = EdgeStore::in_memory();
        store.put_tree(tree_of("A", &[("t1", "A", "B")])).unwrap();
        let mut s = SessionState::new("s1", "t", 1, key("A"));
        s.push_history(Speaker::User, "hello");
        store.persist_session(&s).unwrap();
        assert_eq!(store.load_session("s1").unwrap(), s);
        assert!(matches!(store.load_session("zz"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn persist_rejects_unknown_node_and_bad_ids() {
        let store = EdgeStore::in_memory();
        store.put_tree(tree_of("A", &[("t1", "A", "B")])).unwrap();
        let s = SessionState::new("s1", "t", 1, key("Q"));
        assert!(matches!(store.persist_session(&s), Err(StoreError::UnknownNode(_))));
        let dir = tempfile::tempdir().unwrap();
        let disk = EdgeStore::open(dir.path()).unwrap();
        disk.put_tree(tree_of("A", &[("t1", "A", "B")])).unwrap();
        let s = SessionState::new("../evil", "t", 1, key("A"));
        assert!(disk.persist_session(&s).is_err());
    }

    #[test]
    fn session_lock_is_exclusive() {
        let store = EdgeStore::in_memory();
        let g = store.try_lock_session("s").unwrap();
        assert!(matches!(store.try_lock_session("s"), Err(StoreError::SessionBusy(_))));
        assert!(store.try_lock_session("other").is_ok());
        drop(g);
        assert!(store.try_lock_session("s").is_ok());
    }

    #[test]
    fn disk_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = EdgeStore::open(dir.path()).unwrap();
            store.put_tree(tree_of("A", &[("t1", "A", "B")])).unwrap();
            let mut s = SessionState::new("s1", "t", 1, key("B"));
            s.push_history(Speaker::User, "yes");
            store.persist_session(&s).unwrap();
        }
        assert!(dir.path().join("trees/t/1.json").exists());
        assert!(dir.path().join("sessions/s1.json").exists());
        let store = EdgeStore::open(dir.path()).unwrap();
        assert_eq!(store.latest_version("t"), Some(1));
        let s = store.load_session("s1").unwrap();
        assert_eq!(s.current_node, key("B"));
        assert_eq!(s.history.len(), 1);
    }
}
