use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assembly::{SessionState, SessionSummary};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelCounts {
    pub accessed: u64,
    pub capable: u64,
    pub completed: u64,
}

impl FunnelCounts {
    fn add(&mut self, s: &SessionSummary) {
        self.accessed += 1;
        if s.capable == Some(true) {
            self.capable += 1;
        }
        if s.state == SessionState::Completed {
            self.completed += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelCell {
    pub os: String,
    pub browser: String,
    #[serde(flatten)]
    pub counts: FunnelCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub accessed: u64,
    pub capable: u64,
    pub completed: u64,
    /// capable / accessed, 0 when nobody accessed.
    pub capable_rate: f64,
    /// completed / capable, 0 when nobody was capable.
    pub completed_rate: f64,
    /// Sorted by (os, browser).
    pub cells: Vec<FunnelCell>,
    pub by_os: BTreeMap<String, FunnelCounts>,
    pub by_treatment: BTreeMap<String, FunnelCounts>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Accessed counts every session, capable those that passed the onboarding
/// check, completed those in `Completed`. Sessions that never reported an
/// os or browser are grouped under "unknown".
pub fn compute_funnel(sessions: &[SessionSummary]) -> FunnelStats {
    let label = |s: &str| {
        if s.is_empty() {
            "unknown".to_string()
        } else {
            s.to_string()
        }
    };
    let mut total = FunnelCounts::default();
    let mut cells: BTreeMap<(String, String), FunnelCounts> = BTreeMap::new();
    let mut by_os: BTreeMap<String, FunnelCounts> = BTreeMap::new();
    let mut by_treatment: BTreeMap<String, FunnelCounts> = BTreeMap::new();
    for s in sessions {
        total.add(s);
        cells
            .entry((label(&s.os), label(&s.browser)))
            .or_default()
            .add(s);
        by_os.entry(label(&s.os)).or_default().add(s);
        by_treatment.entry(label(&s.treatment)).or_default().add(s);
    }
    FunnelStats {
        accessed: total.accessed,
        capable: total.capable,
        completed: total.completed,
        capable_rate: ratio(total.capable, total.accessed),
        completed_rate: ratio(total.completed, total.capable),
        cells: cells
            .into_iter()
            .map(|((os, browser), counts)| FunnelCell {
                os,
                browser,
                counts,
            })
            .collect(),
        by_os,
        by_treatment,
    }
}

/// The participant-monitoring excerpt from the case study: onboarding
/// outcomes by operating system and browser. Each row is
/// (os, browser, succeeded, failed).
pub const MONITORING_EXCERPT: [(&str, &str, u64, u64); 13] = [
    ("Chrome OS", "Chrome", 12, 0),
    ("Linux", "Chrome", 3, 2),
    ("Linux", "Firefox", 1, 0),
    ("Linux", "Other", 1, 0),
    ("MacOS X 10", "Chrome", 22, 5),
    ("MacOS X 10", "Firefox", 1, 0),
    ("Windows 10", "Chrome", 208, 70),
    ("Windows 10", "Firefox", 20, 0),
    ("Windows 10", "Other", 1, 0),
    ("Windows 8", "Chrome", 9, 60),
    ("Windows 8", "Firefox", 1, 0),
    ("Windows 7", "Chrome", 36, 9),
    ("Windows 7", "Firefox", 1, 0),
];

/// Builds session summaries matching the monitoring excerpt, with the first
/// `completed` capable sessions marked completed.
pub fn excerpt_sessions(completed: u64) -> Vec<SessionSummary> {
    let mut out = Vec::new();
    let mut done = 0;
    for (os, browser, ok, failed) in MONITORING_EXCERPT {
        for i in 0..ok + failed {
            let capable = i < ok;
            let state = if capable && done < completed {
                done += 1;
                SessionState::Completed
            } else if capable {
                SessionState::Abandoned
            } else {
                SessionState::Failed
            };
            out.push(SessionSummary {
                session_id: format!("fx-{}", out.len()),
                participant_id: format!("fx-p{}", out.len()),
                treatment: String::new(),
                os: os.to_string(),
                browser: browser.to_string(),
                capable: Some(capable),
                state,
                trials: BTreeMap::new(),
                created_ts_ms: 0,
                updated_ts_ms: 0,
                finished_ts_ms: None,
            });
        }
    }
    out
}
