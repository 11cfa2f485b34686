//! In-memory session table with least-recently-used eviction.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use boxprompt_core::pipeline::infer::SessionFeatures;

/// Encoded image. Immutable once created; requests hold it through an `Arc`, so
/// evicting it from the table never disturbs a request already using it.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub features: SessionFeatures,
    pub width: usize,
    pub height: usize,
    pub created_at: SystemTime,
    pub checkpoint_fingerprint: String,
}

struct Slot {
    session: Arc<Session>,
    last_used: u64,
}

struct Table {
    slots: HashMap<String, Slot>,
    clock: u64,
    created: u64,
    evicted: u64,
}

pub struct SessionStore {
    capacity: usize,
    table: Mutex<Table>,
}

impl SessionStore {
    /// `capacity` is clamped to at least one session.
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            table: Mutex::new(Table {
                slots: HashMap::new(),
                clock: 0,
                created: 0,
                evicted: 0,
            }),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Table> {
        // A panic while holding the lock cannot leave the table inconsistent: every
        // mutation below completes before any call that could panic.
        self.table.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stores `session`, evicting the least recently used ones beyond capacity.
    /// Returns the ids evicted.
    pub fn insert(&self, session: Session) -> Vec<String> {
        let mut t = self.lock();
        t.clock += 1;
        t.created += 1;
        let last_used = t.clock;
        t.slots.insert(
            session.id.clone(),
            Slot {
                session: Arc::new(session),
                last_used,
            },
        );
        let mut gone = Vec::new();
        while t.slots.len() > self.capacity {
            let oldest = t
                .slots
                .iter()
                .min_by_key(|(_, s)| s.last_used)
                .map(|(id, _)| id.clone())
                .expect("table is over capacity, so non-empty");
            t.slots.remove(&oldest);
            t.evicted += 1;
            gone.push(oldest);
        }
        gone
    }

    /// Looks up a session and marks it used.
    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        let mut t = self.lock();
        t.clock += 1;
        let now = t.clock;
        let slot = t.slots.get_mut(id)?;
        slot.last_used = now;
        Some(slot.session.clone())
    }

    pub fn len(&self) -> usize {
        self.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(created, evicted)` since the store was built.
    pub fn totals(&self) -> (u64, u64) {
        let t = self.lock();
        (t.created, t.evicted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use boxprompt_core::image::Image;

    fn session(id: &str) -> Session {
        Session {
            id: id.into(),
            features: SessionFeatures {
                image: Image::zeros(2, 2, 3),
                width: 2,
                height: 2,
                stages: Vec::new(),
                global: Vec::new(),
            },
            width: 2,
            height: 2,
            created_at: SystemTime::now(),
            checkpoint_fingerprint: String::new(),
        }
    }

    #[test]
    fn least_recently_used_goes_first() {
        let store = SessionStore::new(2);
        assert!(store.insert(session("a")).is_empty());
        assert!(store.insert(session("b")).is_empty());
        store.get("a").unwrap();
        assert_eq!(store.insert(session("c")), vec!["b".to_string()]);
        assert!(store.get("b").is_none());
        assert!(store.get("a").is_some() && store.get("c").is_some());
        assert_eq!(store.totals(), (3, 1));
    }

    #[test]
    fn evicted_sessions_stay_usable_by_holders() {
        let store = SessionStore::new(1);
        store.insert(session("a"));
        let held = store.get("a").unwrap();
        store.insert(session("b"));
        assert!(store.get("a").is_none());
        assert_eq!(held.id, "a");
        assert_eq!(held.features.width, 2);
    }
}
