//! Event log with one comma-separated line per event:
//! `sim_time,actor,event,round,labels`.
//!
//! `round` is `-` when it does not apply. `labels` is free text without
//! commas, usually `key=value` pairs joined by `;`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "sim_time,actor,event,round,labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Actor {
    Server,
    Worker(usize),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Server => f.write_str("server"),
            Actor::Worker(m) => write!(f, "worker{m}"),
        }
    }
}

impl FromStr for Actor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "server" {
            return Ok(Actor::Server);
        }
        s.strip_prefix("worker")
            .and_then(|n| n.parse().ok())
            .map(Actor::Worker)
            .ok_or_else(|| Error::format(format!("unknown actor `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub actor: Actor,
    pub event: String,
    pub round: Option<u64>,
    pub labels: String,
}

impl TraceEvent {
    /// Value of `key` in a `k=v;k=v` label list.
    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels
            .split(';')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},", self.time, self.actor, self.event)?;
        match self.round {
            Some(r) => write!(f, "{r}")?,
            None => f.write_str("-")?,
        }
        write!(f, ",{}", self.labels)
    }
}

impl FromStr for TraceEvent {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!(
                "trace line needs 5 fields, got {}",
                fields.len()
            )));
        }
        let time = fields[0]
            .parse()
            .map_err(|_| Error::format(format!("bad time `{}`", fields[0])))?;
        let round = match fields[3] {
            "-" => None,
            r => Some(
                r.parse()
                    .map_err(|_| Error::format(format!("bad round `{r}`")))?,
            ),
        };
        Ok(TraceEvent {
            time,
            actor: fields[1].parse()?,
            event: fields[2].to_string(),
            round,
            labels: fields[4].to_string(),
        })
    }
}

/// Collects events when enabled; otherwise drops them.
#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    enabled: bool,
    events: Vec<TraceEvent>,
}

impl TraceLog {
    pub fn new(enabled: bool) -> Self {
        TraceLog {
            enabled,
            events: Vec::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(
        &mut self,
        time: f64,
        actor: Actor,
        event: &str,
        round: Option<u64>,
        labels: impl FnOnce() -> String,
    ) {
        if self.enabled {
            self.events.push(TraceEvent {
                time,
                actor,
                event: event.to_string(),
                round,
                labels: labels(),
            });
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}

pub fn write_trace(events: &[TraceEvent], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for e in events {
        writeln!(out, "{e}")?;
    }
    Ok(())
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, TRACE_HEADER)) => {}
        _ => return Err(Error::format_at(1, "missing trace header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|e: Error| match e {
                Error::Format { message, .. } => Error::format_at(i + 1, message),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let e = TraceEvent {
            time: 2.5,
            actor: Actor::Worker(3),
            event: "op_start".into(),
            round: Some(7),
            labels: "op=compute;dev=0".into(),
        };
        let line = e.to_string();
        assert_eq!(line, "2.5,worker3,op_start,7,op=compute;dev=0");
        assert_eq!(line.parse::<TraceEvent>().unwrap(), e);
        assert_eq!(e.label("dev"), Some("0"));
        assert_eq!(e.label("x"), None);

        let s = TraceEvent {
            time: 0.0,
            actor: Actor::Server,
            event: "round_complete".into(),
            round: None,
            labels: String::new(),
        };
        assert_eq!(s.to_string(), "0,server,round_complete,-,");
        assert_eq!(s.to_string().parse::<TraceEvent>().unwrap(), s);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let mut log = TraceLog::new(true);
        log.record(1.0, Actor::Server, "a", Some(1), || "k=v".into());
        log.record(1.5, Actor::Worker(0), "b", None, String::new);
        let mut buf = Vec::new();
        write_trace(log.events(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(parse_trace(&text).unwrap(), log.events());

        let bad = format!("{TRACE_HEADER}\n1,server,a,1,x\nnope\n");
        match parse_trace(&bad) {
            Err(Error::Format { line: Some(3), .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_trace("x\n").is_err());
    }

    #[test]
    fn disabled_log_drops_events() {
        let mut log = TraceLog::new(false);
        log.record(0.0, Actor::Server, "a", None, || unreachable!());
        assert!(log.events().is_empty());
    }
}
