use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cmp_ids, Behavior, DataError, Result, Session};

/// One raw interaction event before sessionization.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub session_id: String,
    pub timestamp: String,
    pub item: String,
    pub behavior: String,
}

/// Column names and behavior vocabulary of a raw event CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLayout {
    pub session_column: String,
    pub timestamp_column: String,
    pub item_column: String,
    pub behavior_column: String,
    pub click_tokens: Vec<String>,
    pub purchase_tokens: Vec<String>,
}

impl EventLayout {
    /// RetailRocket `events.csv`: visitors are sessions, views are clicks and
    /// add-to-cart events are purchases. Transactions are not mapped.
    pub fn retailrocket() -> Self {
        Self {
            session_column: "visitorid".into(),
            timestamp_column: "timestamp".into(),
            item_column: "itemid".into(),
            behavior_column: "event".into(),
            click_tokens: vec!["view".into()],
            purchase_tokens: vec!["addtocart".into()],
        }
    }

    /// RecSys Challenge 2015 events merged into one file with an `is_buy`
    /// flag (`0` click, `1` buy).
    pub fn challenge15() -> Self {
        Self {
            session_column: "session_id".into(),
            timestamp_column: "timestamp".into(),
            item_column: "item_id".into(),
            behavior_column: "is_buy".into(),
            click_tokens: vec!["0".into(), "click".into()],
            purchase_tokens: vec!["1".into(), "buy".into(), "purchase".into()],
        }
    }

    fn behavior(&self, token: &str) -> Option<Behavior> {
        let token = token.trim();
        if self.click_tokens.iter().any(|t| t == token) {
            Some(Behavior::Click)
        } else if self.purchase_tokens.iter().any(|t| t == token) {
            Some(Behavior::Purchase)
        } else {
            None
        }
    }

    /// Reads events from a headed CSV. Rows missing a required field are
    /// counted in the returned skip count.
    pub fn read_csv(&self, path: &Path) -> Result<(Vec<EventRecord>, usize)> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_owned()))
        };
        let (cs, ct, ci, cb) = (
            col(&self.session_column)?,
            col(&self.timestamp_column)?,
            col(&self.item_column)?,
            col(&self.behavior_column)?,
        );
        let mut events = Vec::new();
        let mut skipped = 0;
        for row in reader.records() {
            let Ok(row) = row else {
                skipped += 1;
                continue;
            };
            let field = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
            match (field(cs), field(ct), field(ci), field(cb)) {
                (Some(s), Some(t), Some(i), Some(b)) => events.push(EventRecord {
                    session_id: s.to_owned(),
                    timestamp: t.to_owned(),
                    item: i.to_owned(),
                    behavior: b.to_owned(),
                }),
                _ => skipped += 1,
            }
        }
        Ok((events, skipped))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub sessions: usize,
    pub unparseable: usize,
    pub unknown_behavior: usize,
}

impl IngestReport {
    pub fn skipped(&self) -> usize {
        self.unparseable + self.unknown_behavior
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub sessions: Vec<Session>,
    /// `item_map[i - 1]` is the raw identifier of item index `i`.
    pub item_map: Vec<String>,
    pub report: IngestReport,
}

#[derive(Debug, Clone, PartialEq)]
enum TimeKey {
    Numeric(f64),
    Text(String),
}

impl TimeKey {
    fn parse(raw: &str) -> Self {
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => TimeKey::Numeric(v),
            _ => TimeKey::Text(raw.to_owned()),
        }
    }

    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (TimeKey::Numeric(a), TimeKey::Numeric(b)) => a.total_cmp(b),
            (TimeKey::Numeric(_), TimeKey::Text(_)) => Ordering::Less,
            (TimeKey::Text(_), TimeKey::Numeric(_)) => Ordering::Greater,
            (TimeKey::Text(a), TimeKey::Text(b)) => a.cmp(b),
        }
    }
}

/// Groups events into time-sorted sessions and densely re-indexes items from 1.
///
/// Sessions come out ordered by id; items are numbered in order of first
/// appearance in that ordering. Ties in timestamp keep file order.
pub fn ingest_events(
    events: impl IntoIterator<Item = EventRecord>,
    layout: &EventLayout,
    unparseable: usize,
) -> Result<Ingested> {
    let mut report = IngestReport {
        unparseable,
        ..IngestReport::default()
    };
    let mut grouped: HashMap<String, Vec<(TimeKey, String, Behavior)>> = HashMap::new();
    for ev in events {
        report.rows += 1;
        let Some(behavior) = layout.behavior(&ev.behavior) else {
            report.unknown_behavior += 1;
            continue;
        };
        grouped
            .entry(ev.session_id)
            .or_default()
            .push((TimeKey::parse(&ev.timestamp), ev.item, behavior));
    }
    report.rows += unparseable;
    if grouped.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let mut ids: Vec<String> = grouped.keys().cloned().collect();
    ids.sort_by(|a, b| cmp_ids(a, b));

    let mut index: HashMap<String, u32> = HashMap::new();
    let mut item_map = Vec::new();
    let mut sessions = Vec::with_capacity(ids.len());
    for id in ids {
        let mut evs = grouped.remove(&id).expect("key from map");
        evs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut items = Vec::with_capacity(evs.len());
        let mut behaviors = Vec::with_capacity(evs.len());
        for (_, raw, b) in evs {
            let next = item_map.len() as u32 + 1;
            let idx = *index.entry(raw.clone()).or_insert_with(|| {
                item_map.push(raw);
                next
            });
            items.push(idx);
            behaviors.push(b);
        }
        sessions.push(Session { id, items, behaviors });
    }
    report.sessions = sessions.len();
    Ok(Ingested {
        sessions,
        item_map,
        report,
    })
}
