use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: u32 = 3;
pub const MIN_INTERVAL_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HealthState {
    Healthy,
    Degraded,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub target: String,
    pub state: HealthState,
    pub last_ok_ts_ms: Option<u64>,
    pub consecutive_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    pub target: String,
    pub ts_ms: u64,
    pub consecutive_failures: u32,
}

/// Failure counter for one target. Raises exactly one alarm when the count
/// reaches the threshold; a success ends the episode.
#[derive(Debug, Clone)]
pub struct HealthTracker {
    status: HealthStatus,
    threshold: u32,
}

impl HealthTracker {
    pub fn new(target: &str, threshold: u32) -> Self {
        Self {
            status: HealthStatus {
                target: target.to_string(),
                state: HealthState::Healthy,
                last_ok_ts_ms: None,
                consecutive_failures: 0,
            },
            threshold: threshold.max(1),
        }
    }

    pub fn status(&self) -> &HealthStatus {
        &self.status
    }

    pub fn observe(&mut self, ok: bool, now_ms: u64) -> Option<Alarm> {
        let s = &mut self.status;
        if ok {
            s.consecutive_failures = 0;
            s.last_ok_ts_ms = Some(now_ms);
            s.state = HealthState::Healthy;
            return None;
        }
        s.consecutive_failures = s.consecutive_failures.saturating_add(1);
        if s.consecutive_failures >= self.threshold {
            s.state = HealthState::Unreachable;
        } else {
            s.state = HealthState::Degraded;
        }
        (s.consecutive_failures == self.threshold).then(|| Alarm {
            target: s.target.clone(),
            ts_ms: now_ms,
            consecutive_failures: s.consecutive_failures,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HealthError {
    #[error("poll interval must be at least {MIN_INTERVAL_MS} ms, got {0}")]
    IntervalTooShort(u64),
    #[error("building http client: {0}")]
    Client(String),
}

/// Polls `GET {target}/v1/health` on each tick.
pub struct HealthPoller {
    client: reqwest::Client,
    trackers: Vec<HealthTracker>,
}

impl HealthPoller {
    /// `timeout` bounds each probe. Connections are not pooled, so a
    /// restarted service is probed over a fresh socket.
    pub fn new(targets: &[String], threshold: u32, timeout: Duration) -> Result<Self, HealthError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .pool_max_idle_per_host(0)
            .build()
            .map_err(|e| HealthError::Client(e.to_string()))?;
        Ok(Self {
            client,
            trackers: targets
                .iter()
                .map(|t| HealthTracker::new(t.trim_end_matches('/'), threshold))
                .collect(),
        })
    }

    pub fn statuses(&self) -> Vec<HealthStatus> {
        self.trackers.iter().map(|t| t.status().clone()).collect()
    }

    pub async fn tick(&mut self, now_ms: u64) -> Vec<Alarm> {
        let probes = self.trackers.iter().map(|t| {
            let url = format!("{}/v1/health", t.status().target);
            let client = self.client.clone();
            async move {
                match client.get(url).send().await {
                    Ok(r) => r.status().is_success(),
                    Err(_) => false,
                }
            }
        });
        let results = futures::future::join_all(probes).await;
        self.trackers
            .iter_mut()
            .zip(results)
            .filter_map(|(t, ok)| t.observe(ok, now_ms))
            .collect()
    }
}

/// Ticks every `interval_ms` until `max_ticks` ticks ran (forever when
/// `None`), handing the statuses and any new alarms to `on_tick`.
pub async fn poll_health<F>(
    poller: &mut HealthPoller,
    interval_ms: u64,
    max_ticks: Option<u64>,
    mut now_ms: impl FnMut() -> u64,
    mut on_tick: F,
) -> Result<(), HealthError>
where
    F: FnMut(&[HealthStatus], &[Alarm]),
{
    if interval_ms < MIN_INTERVAL_MS {
        return Err(HealthError::IntervalTooShort(interval_ms));
    }
    let mut interval = tokio::time::interval(Duration::from_millis(interval_ms));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut n = 0;
    while max_ticks.is_none_or(|m| n < m) {
        interval.tick().await;
        let alarms = poller.tick(now_ms()).await;
        on_tick(&poller.statuses(), &alarms);
        n += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_machine() {
        let mut t = HealthTracker::new("x", 3);
        assert_eq!(t.observe(true, 1), None);
        assert_eq!(t.status().state, HealthState::Healthy);
        assert_eq!(t.observe(false, 2), None);
        assert_eq!(t.status().state, HealthState::Degraded);
        assert_eq!(t.observe(false, 3), None);
        let alarm = t.observe(false, 4).unwrap();
        assert_eq!(alarm.consecutive_failures, 3);
        assert_eq!(t.status().state, HealthState::Unreachable);
        for i in 5..20 {
            assert_eq!(t.observe(false, i), None);
        }
        assert_eq!(t.status().last_ok_ts_ms, Some(1));
        t.observe(true, 30);
        t.observe(false, 31);
        t.observe(false, 32);
        assert!(t.observe(false, 33).is_some());
    }

    #[test]
    fn threshold_one_alarms_on_first_failure() {
        let mut t = HealthTracker::new("x", 1);
        assert!(t.observe(false, 1).is_some());
        assert!(t.observe(false, 2).is_none());
    }

    #[tokio::test]
    async fn short_interval_rejected() {
        let mut p = HealthPoller::new(&[], 3, Duration::from_millis(50)).unwrap();
        let r = poll_health(&mut p, 99, Some(1), || 0, |_, _| {}).await;
        assert!(matches!(r, Err(HealthError::IntervalTooShort(99))));
    }

    #[tokio::test]
    async fn unreachable_target_counts_failures() {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        let mut p =
            HealthPoller::new(&[format!("http://{addr}")], 2, Duration::from_millis(200)).unwrap();
        assert!(p.tick(1).await.is_empty());
        assert_eq!(p.tick(2).await.len(), 1);
        assert_eq!(p.statuses()[0].state, HealthState::Unreachable);
    }
}
