use serde::{Deserialize, Serialize};

use crate::assembly::TRIAL_CSV_HEADER;
use crate::protocol::TrajectorySample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub participant_id: String,
    pub treatment: String,
    pub trial: u32,
    pub path_length_m: f64,
    pub duration_s: f64,
    pub sample_count: usize,
}

impl TrialMetrics {
    pub fn from_samples(
        participant_id: &str,
        treatment: &str,
        trial: u32,
        samples: &[TrajectorySample],
    ) -> Self {
        let path_length_m = samples
            .windows(2)
            .map(|w| {
                let (a, b) = (&w[0], &w[1]);
                let (dx, dy, dz) = (b.x - a.x, b.y - a.y, b.z - a.z);
                (dx * dx + dy * dy + dz * dz).sqrt()
            })
            .sum();
        let duration_s = match (samples.first(), samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        };
        Self {
            participant_id: participant_id.to_string(),
            treatment: treatment.to_string(),
            trial,
            path_length_m,
            duration_s,
            sample_count: samples.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{file}:{line}: {msg}")]
pub struct ParseError {
    pub file: String,
    pub line: usize,
    pub msg: String,
}

/// Rows of one exported trial CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialCsv {
    pub session_id: String,
    pub participant_id: String,
    pub treatment: String,
    pub trial: u32,
    pub samples: Vec<TrajectorySample>,
}

pub fn parse_trial_csv(file: &str, bytes: &[u8]) -> Result<TrialCsv, ParseError> {
    let err = |line: usize, msg: String| ParseError {
        file: file.to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| err(1, "empty file".into()))?
        .map_err(|e| err(1, e.to_string()))?;
    if header.iter().ne(TRIAL_CSV_HEADER.iter().copied()) {
        return Err(err(
            1,
            format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        ));
    }
    let mut out: Option<TrialCsv> = None;
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if rec.len() != TRIAL_CSV_HEADER.len() {
            return Err(err(
                line,
                format!("expected 10 fields, found {}", rec.len()),
            ));
        }
        let num = |j: usize| -> Result<f64, ParseError> {
            rec[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    err(
                        line,
                        format!("{} is not a number: {:?}", TRIAL_CSV_HEADER[j], &rec[j]),
                    )
                })
        };
        let trial: u32 = rec[3]
            .parse()
            .map_err(|_| err(line, format!("trial is not an integer: {:?}", &rec[3])))?;
        let sample = TrajectorySample {
            t: num(4)?,
            x: num(5)?,
            y: num(6)?,
            z: num(7)?,
            yaw: num(8)?,
            pitch: num(9)?,
        };
        let t = out.get_or_insert_with(|| TrialCsv {
            session_id: rec[0].to_string(),
            participant_id: rec[1].to_string(),
            treatment: rec[2].to_string(),
            trial,
            samples: Vec::new(),
        });
        if t.session_id != rec[0]
            || t.participant_id != rec[1]
            || t.treatment != rec[2]
            || t.trial != trial
        {
            return Err(err(line, "row belongs to a different trial".into()));
        }
        if let Some(prev) = t.samples.last() {
            if sample.t < prev.t {
                return Err(err(line, "t decreases".into()));
            }
        }
        t.samples.push(sample);
    }
    out.ok_or_else(|| err(2, "no samples".into()))
}

/// One row per (participant, trial), sorted by participant then trial.
pub fn compute_metrics(files: &[(String, Vec<u8>)]) -> Result<Vec<TrialMetrics>, ParseError> {
    let mut out = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let t = parse_trial_csv(name, bytes)?;
        out.push(TrialMetrics::from_samples(
            &t.participant_id,
            &t.treatment,
            t.trial,
            &t.samples,
        ));
    }
    out.sort_by(|a, b| (&a.participant_id, a.trial).cmp(&(&b.participant_id, b.trial)));
    Ok(out)
}

pub fn metrics_csv(rows: &[TrialMetrics]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}
