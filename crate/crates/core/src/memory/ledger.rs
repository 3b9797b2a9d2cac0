use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Alloc,
    Free,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Alloc => "alloc",
            EventKind::Free => "free",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub label: String,
    pub kind: EventKind,
    pub bytes: u64,
}

/// Event log of named allocations for one execution.
///
/// Frees must match an outstanding allocation with the same label and size.
/// Labels are prefixed with the active scope stack, joined by `.`.
#[derive(Debug, Clone)]
pub struct AllocationLedger {
    events: Vec<LedgerEvent>,
    live: u64,
    peak: u64,
    scopes: Vec<String>,
    outstanding: HashMap<(String, u64), usize>,
    open: bool,
}

impl Default for AllocationLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            live: 0,
            peak: 0,
            scopes: Vec::new(),
            outstanding: HashMap::new(),
            open: true,
        }
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Stop accepting events. Reads remain available.
    pub fn close(&mut self) {
        self.open = false;
    }

    pub fn live(&self) -> u64 {
        self.live
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn push_scope(&mut self, scope: impl Into<String>) {
        self.scopes.push(scope.into());
    }

    pub fn pop_scope(&mut self) -> Option<String> {
        self.scopes.pop()
    }

    pub(crate) fn ensure_open(&self) -> Result<()> {
        if self.open {
            Ok(())
        } else {
            Err(Error::Usage("ledger is closed".into()))
        }
    }

    fn qualify(&self, label: &str) -> String {
        if self.scopes.is_empty() {
            label.to_string()
        } else {
            format!("{}.{label}", self.scopes.join("."))
        }
    }

    pub fn alloc(&mut self, label: &str, bytes: u64) -> Result<()> {
        self.ensure_open()?;
        let label = self.qualify(label);
        self.record(label, EventKind::Alloc, bytes)
    }

    pub fn free(&mut self, label: &str, bytes: u64) -> Result<()> {
        self.ensure_open()?;
        let label = self.qualify(label);
        self.record(label, EventKind::Free, bytes)
    }

    fn record(&mut self, label: String, kind: EventKind, bytes: u64) -> Result<()> {
        let key = (label, bytes);
        match kind {
            EventKind::Alloc => {
                *self.outstanding.entry(key.clone()).or_default() += 1;
                self.live += bytes;
                self.peak = self.peak.max(self.live);
            }
            EventKind::Free => {
                let Some(count) = self.outstanding.get_mut(&key) else {
                    return Err(Error::Integrity(format!(
                        "free of `{}` ({} bytes) without matching alloc",
                        key.0, key.1
                    )));
                };
                *count -= 1;
                if *count == 0 {
                    self.outstanding.remove(&key);
                }
                self.live -= bytes;
            }
        }
        self.events.push(LedgerEvent {
            label: key.0,
            kind,
            bytes,
        });
        Ok(())
    }

    /// Replay only the events whose label starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> AllocationLedger {
        let mut out = AllocationLedger::new();
        for ev in self.events.iter().filter(|e| e.label.starts_with(prefix)) {
            out.record(ev.label.clone(), ev.kind, ev.bytes)
                .expect("a consistent ledger stays consistent under filtering");
        }
        out
    }

    /// Line-oriented dump: `label<TAB>alloc|free<TAB>bytes`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            let _ = writeln!(out, "{}\t{}\t{}", ev.label, ev.kind.as_str(), ev.bytes);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut ledger = AllocationLedger::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::validation(format!("ledger line {}: malformed `{line}`", lineno + 1));
            let mut parts = line.split('\t');
            let (Some(label), Some(kind), Some(bytes), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let kind = match kind {
                "alloc" => EventKind::Alloc,
                "free" => EventKind::Free,
                _ => return Err(bad()),
            };
            let bytes = bytes.parse().map_err(|_| bad())?;
            ledger.record(label.to_string(), kind, bytes)?;
        }
        Ok(ledger)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakReport {
    pub peak_bytes: u64,
    /// Live bytes per label at the first moment the peak was reached.
    pub breakdown: BTreeMap<String, u64>,
}

/// Replay the event stream and report the peak with its attribution.
pub fn measure_peak(ledger: &AllocationLedger) -> Result<PeakReport> {
    let mut live: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    let mut report = PeakReport {
        peak_bytes: 0,
        breakdown: BTreeMap::new(),
    };
    for ev in ledger.events() {
        match ev.kind {
            EventKind::Alloc => {
                *live.entry(ev.label.clone()).or_default() += ev.bytes;
                total += ev.bytes;
                if total > report.peak_bytes {
                    report.peak_bytes = total;
                    report.breakdown = live
                        .iter()
                        .filter(|(_, &b)| b > 0)
                        .map(|(k, &v)| (k.clone(), v))
                        .collect();
                }
            }
            EventKind::Free => {
                let slot = live
                    .get_mut(&ev.label)
                    .filter(|b| **b >= ev.bytes)
                    .ok_or_else(|| Error::Integrity(format!("unbalanced free of `{}`", ev.label)))?;
                *slot -= ev.bytes;
                total -= ev.bytes;
            }
        }
    }
    Ok(report)
}
