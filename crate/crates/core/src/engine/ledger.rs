//! Training cost accounting.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Train,
    Unlearn,
    BaselineTrain,
    BaselineUnlearn,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Train => "train",
            EventKind::Unlearn => "unlearn",
            EventKind::BaselineTrain => "baseline_train",
            EventKind::BaselineUnlearn => "baseline_unlearn",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(EventKind::Train),
            "unlearn" => Ok(EventKind::Unlearn),
            "baseline_train" => Ok(EventKind::BaselineTrain),
            "baseline_unlearn" => Ok(EventKind::BaselineUnlearn),
            other => Err(format!("unknown ledger event `{other}`")),
        }
    }
}

/// Work done for one shard (or the monolithic baseline, `shard = None`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub kind: EventKind,
    pub shard: Option<usize>,
    pub slice_from: usize,
    pub slice_to: usize,
    pub gradient_steps: u64,
    pub examples: u64,
    pub wall_ms: u64,
}

/// Exact step and example counts, plus advisory wall-clock time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    pub gradient_steps: u64,
    pub examples_processed: u64,
    pub wall_clock_ms: u64,
    pub events: Vec<LedgerEvent>,
}

pub const LEDGER_HEADER: &str = "event,shard,slice_from,slice_to,gradient_steps,examples,wall_ms";

impl CostLedger {
    pub fn record(&mut self, event: LedgerEvent) {
        self.gradient_steps += event.gradient_steps;
        self.examples_processed += event.examples;
        self.wall_clock_ms += event.wall_ms;
        self.events.push(event);
    }

    pub fn merge(&mut self, other: CostLedger) {
        for e in other.events {
            self.record(e);
        }
    }

    /// Rows in `ledger.csv` layout; the header is written only if asked for,
    /// so later runs can append.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "{LEDGER_HEADER}")?;
        }
        for e in &self.events {
            let shard = e.shard.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.kind, shard, e.slice_from, e.slice_to, e.gradient_steps, e.examples, e.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<CostLedger, String> {
        let mut ledger = CostLedger::default();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.is_empty() || line == LEDGER_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(format!("ledger line {}: expected 7 fields", n + 1));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| format!("ledger line {}: bad number `{s}`", n + 1));
            ledger.record(LedgerEvent {
                kind: f[0].parse()?,
                shard: if f[1].is_empty() { None } else { Some(num(f[1])? as usize) },
                slice_from: num(f[2])? as usize,
                slice_to: num(f[3])? as usize,
                gradient_steps: num(f[4])?,
                examples: num(f[5])?,
                wall_ms: num(f[6])?,
            });
        }
        Ok(ledger)
    }
}
