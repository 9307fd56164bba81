//! Event records, validated event logs and the event CSV format
//! (`src,dst,time,sign,f0,...,f{D-1}`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CtdgError, Result};

/// Edge addition, or removal modeled as a reversed-signal addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Add,
    Remove,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Add => 1.0,
            Sign::Remove => -1.0,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "1" | "+1" | "1.0" => Some(Sign::Add),
            "-1" | "-1.0" => Some(Sign::Remove),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub src: usize,
    pub dst: usize,
    pub time: f64,
    pub sign: Sign,
    pub features: Vec<f64>,
}

impl EventRecord {
    pub fn new(src: usize, dst: usize, time: f64) -> Self {
        Self {
            src,
            dst,
            time,
            sign: Sign::Add,
            features: Vec::new(),
        }
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = features;
        self
    }

    pub fn with_sign(mut self, sign: Sign) -> Self {
        self.sign = sign;
        self
    }

    /// Features multiplied by the sign: removals carry the negated vector.
    pub fn signed_features(&self) -> Vec<f64> {
        let s = self.sign.value();
        self.features.iter().map(|f| f * s).collect()
    }

    /// Unordered endpoint pair.
    pub fn pair(&self) -> (usize, usize) {
        (self.src.min(self.dst), self.src.max(self.dst))
    }
}

/// Time-sorted sequence of events over a fixed node set.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    n: usize,
    feature_dim: usize,
    events: Vec<EventRecord>,
}

impl EventLog {
    pub fn new(n: usize, feature_dim: usize, events: Vec<EventRecord>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            validate_event(i, e, n, feature_dim)?;
            if i > 0 && e.time < events[i - 1].time {
                return Err(CtdgError::UnsortedLog { index: i });
            }
        }
        Ok(Self {
            n,
            feature_dim,
            events,
        })
    }

    pub fn empty(n: usize, feature_dim: usize) -> Self {
        Self {
            n,
            feature_dim,
            events: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Appends one event, keeping the log invariants.
    pub fn push(&mut self, e: EventRecord) -> Result<()> {
        let i = self.events.len();
        validate_event(i, &e, self.n, self.feature_dim)?;
        if let Some(last) = self.events.last() {
            if e.time < last.time {
                return Err(CtdgError::UnsortedLog { index: i });
            }
        }
        self.events.push(e);
        Ok(())
    }

    /// First `len` events as a log of their own.
    pub fn prefix(&self, len: usize) -> EventLog {
        EventLog {
            n: self.n,
            feature_dim: self.feature_dim,
            events: self.events[..len.min(self.events.len())].to_vec(),
        }
    }

    /// Number of events with `time <= t`.
    pub fn count_until(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.time <= t)
    }

    pub fn read_csv<R: Read>(reader: R, n: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| CtdgError::Csv {
                line: 1,
                reason: e.to_string(),
            })?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 4 || cols[..4] != ["src", "dst", "time", "sign"] {
            return Err(CtdgError::Csv {
                line: 1,
                reason: format!("expected header src,dst,time,sign[,f0..], got {}", cols.join(",")),
            });
        }
        let feature_dim = cols.len() - 4;
        for (k, name) in cols[4..].iter().enumerate() {
            if *name != format!("f{k}") {
                return Err(CtdgError::Csv {
                    line: 1,
                    reason: format!("feature column {k} must be named f{k}, got {name}"),
                });
            }
        }

        let mut events = Vec::new();
        let mut max_node = 0usize;
        for row in rdr.records() {
            let row = row.map_err(|e| CtdgError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |reason: String| CtdgError::Csv { line, reason };
            if row.len() != cols.len() {
                return Err(bad(format!("expected {} fields, got {}", cols.len(), row.len())));
            }
            let src: usize = row[0].parse().map_err(|_| bad(format!("bad src {:?}", &row[0])))?;
            let dst: usize = row[1].parse().map_err(|_| bad(format!("bad dst {:?}", &row[1])))?;
            let time: f64 = row[2].parse().map_err(|_| bad(format!("bad time {:?}", &row[2])))?;
            let sign = Sign::parse(&row[3]).ok_or_else(|| bad(format!("bad sign {:?}", &row[3])))?;
            let features = (4..row.len())
                .map(|k| row[k].parse::<f64>().map_err(|_| bad(format!("bad feature {:?}", &row[k]))))
                .collect::<Result<Vec<f64>>>()?;
            let e = EventRecord {
                src,
                dst,
                time,
                sign,
                features,
            };
            let limit = n.unwrap_or(usize::MAX);
            validate_event(events.len(), &e, limit, feature_dim).map_err(|err| bad(err.to_string()))?;
            if let Some(prev) = events.last() {
                let prev: &EventRecord = prev;
                if time < prev.time {
                    return Err(bad(format!(
                        "rows not time-sorted: {time} follows {}",
                        prev.time
                    )));
                }
            }
            max_node = max_node.max(src).max(dst);
            events.push(e);
        }
        let n = n.unwrap_or(if events.is_empty() { 0 } else { max_node + 1 });
        EventLog::new(n, feature_dim, events)
    }

    pub fn load_csv(path: &Path, n: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), n)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("src,dst,time,sign");
        for k in 0..self.feature_dim {
            header.push_str(&format!(",f{k}"));
        }
        writeln!(w, "{header}")?;
        for e in &self.events {
            let sign = match e.sign {
                Sign::Add => "1",
                Sign::Remove => "-1",
            };
            write!(w, "{},{},{},{}", e.src, e.dst, e.time, sign)?;
            for f in &e.features {
                write!(w, ",{f}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

fn validate_event(index: usize, e: &EventRecord, n: usize, feature_dim: usize) -> Result<()> {
    for node in [e.src, e.dst] {
        if node >= n {
            return Err(CtdgError::NodeOutOfRange { node, n });
        }
    }
    if e.src == e.dst {
        return Err(CtdgError::SelfEvent {
            index,
            node: e.src,
        });
    }
    if !(e.time.is_finite() && e.time >= 0.0) {
        return Err(CtdgError::InvalidEvent {
            index,
            reason: format!("time must be finite and non-negative, got {}", e.time),
        });
    }
    if e.features.len() != feature_dim {
        return Err(CtdgError::InvalidEvent {
            index,
            reason: format!(
                "feature dimension {} differs from declared {feature_dim}",
                e.features.len()
            ),
        });
    }
    if e.features.iter().any(|f| !f.is_finite()) {
        return Err(CtdgError::InvalidEvent {
            index,
            reason: "non-finite feature".into(),
        });
    }
    Ok(())
}
