//! Declarative experiment documentation: the manifest, the external service
//! requirements, and the protocol checklist.

pub mod lifecycle;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

fn default_treatments() -> Vec<String> {
    vec!["Control".into(), "A".into(), "B".into()]
}
fn default_trials() -> u32 {
    6
}
fn default_sample_period_ms() -> u32 {
    20
}
fn default_chunk_size() -> usize {
    4300
}
fn default_reward_base() -> f64 {
    4.50
}
fn default_reward_bonus() -> f64 {
    1.00
}
fn default_bonus_threshold() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default = "default_treatments")]
    pub treatments: Vec<String>,
    #[serde(default = "default_trials")]
    pub trials_per_participant: u32,
    #[serde(default = "default_sample_period_ms")]
    pub sample_period_ms: u32,
    #[serde(default = "default_chunk_size")]
    pub chunk_size_bytes: usize,
    #[serde(default = "default_reward_base")]
    pub reward_base_usd: f64,
    #[serde(default = "default_reward_bonus")]
    pub reward_bonus_usd: f64,
    #[serde(default = "default_bonus_threshold")]
    pub bonus_threshold_min: f64,
    pub salt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_doc: Option<VrCheckDoc>,
}

impl ExperimentManifest {
    /// A manifest with every default filled in.
    pub fn with_defaults(name: &str, salt: &str) -> Self {
        Self {
            name: name.into(),
            treatments: default_treatments(),
            trials_per_participant: default_trials(),
            sample_period_ms: default_sample_period_ms(),
            chunk_size_bytes: default_chunk_size(),
            reward_base_usd: default_reward_base(),
            reward_bonus_usd: default_reward_bonus(),
            bonus_threshold_min: default_bonus_threshold(),
            salt: salt.into(),
            protocol_doc: None,
        }
    }

    pub fn check_invariants(&self) -> Result<(), ManifestError> {
        let inv = |m: &str| Err(ManifestError::Invariant(m.to_string()));
        if self.treatments.is_empty() {
            return inv("treatments must not be empty");
        }
        let mut seen = HashSet::new();
        for t in &self.treatments {
            if !seen.insert(t) {
                return inv(&format!("duplicate treatment {t:?}"));
            }
        }
        if self.trials_per_participant == 0 {
            return inv("trials_per_participant must be positive");
        }
        if self.chunk_size_bytes < 64 {
            return inv("chunk_size_bytes must be >= 64");
        }
        if self.sample_period_ms < 1 {
            return inv("sample_period_ms must be >= 1");
        }
        for (field, v) in [
            ("reward_base_usd", self.reward_base_usd),
            ("reward_bonus_usd", self.reward_bonus_usd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return inv(&format!("{field} must be a non-negative amount"));
            }
        }
        if !(self.bonus_threshold_min.is_finite() && self.bonus_threshold_min > 0.0) {
            return inv("bonus_threshold_min must be positive");
        }
        if let Some(doc) = &self.protocol_doc {
            doc.check()?;
        }
        Ok(())
    }
}

/// The ten protocol-design questions; each entry is optional free text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VrCheckDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_specificity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecological_validity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub technical_feasibility: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_feasibility: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_motivation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_adaptability: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performance_quantification: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub immersive_capacities: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_feasibility: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictable_pitfalls: Option<String>,
}

impl VrCheckDoc {
    pub fn entries(&self) -> [(&'static str, Option<&str>); 10] {
        [
            ("domain_specificity", self.domain_specificity.as_deref()),
            ("ecological_validity", self.ecological_validity.as_deref()),
            (
                "technical_feasibility",
                self.technical_feasibility.as_deref(),
            ),
            ("user_feasibility", self.user_feasibility.as_deref()),
            ("user_motivation", self.user_motivation.as_deref()),
            ("task_adaptability", self.task_adaptability.as_deref()),
            (
                "performance_quantification",
                self.performance_quantification.as_deref(),
            ),
            ("immersive_capacities", self.immersive_capacities.as_deref()),
            ("training_feasibility", self.training_feasibility.as_deref()),
            ("predictable_pitfalls", self.predictable_pitfalls.as_deref()),
        ]
    }

    fn check(&self) -> Result<(), ManifestError> {
        for (key, v) in self.entries() {
            if v.is_some_and(|s| s.trim().is_empty()) {
                return Err(ManifestError::Invariant(format!(
                    "protocol_doc.{key} must not be empty when present"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceKind {
    Storage,
    Compute,
    Recruitment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceRequirement {
    pub name: String,
    pub kind: ServiceKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl ServiceRequirement {
    pub fn new(name: &str, kind: ServiceKind) -> Self {
        Self {
            name: name.into(),
            kind,
            params: BTreeMap::new(),
        }
    }
}

/// Storage, compute and recruitment, one each.
pub fn default_services() -> Vec<ServiceRequirement> {
    vec![
        ServiceRequirement::new("object-storage", ServiceKind::Storage),
        ServiceRequirement::new("assembly-host", ServiceKind::Compute),
        ServiceRequirement::new("crowd-recruitment", ServiceKind::Recruitment),
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.warnings.is_empty() && self.errors.is_empty()
    }

    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

fn schema_err(e: serde_json::Error) -> ManifestError {
    ManifestError::Schema(e.to_string())
}

pub fn parse_manifest(bytes: &[u8]) -> Result<ExperimentManifest, ManifestError> {
    let m: ExperimentManifest = serde_json::from_slice(bytes).map_err(schema_err)?;
    m.check_invariants()?;
    Ok(m)
}

pub fn parse_services(bytes: &[u8]) -> Result<Vec<ServiceRequirement>, ManifestError> {
    let services: Vec<ServiceRequirement> = serde_json::from_slice(bytes).map_err(schema_err)?;
    let mut names = HashSet::new();
    for s in &services {
        if !names.insert(s.name.as_str()) {
            return Err(ManifestError::Invariant(format!(
                "duplicate service name {:?}",
                s.name
            )));
        }
    }
    Ok(services)
}

pub fn validate_manifest(
    m: &ExperimentManifest,
    services: &[ServiceRequirement],
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let doc = m.protocol_doc.clone().unwrap_or_default();
    for (key, v) in doc.entries() {
        if v.is_none() {
            report.warnings.push(format!("missing protocol_doc.{key}"));
        }
    }
    for (kind, label) in [
        (ServiceKind::Storage, "storage"),
        (ServiceKind::Compute, "compute"),
    ] {
        if !services.iter().any(|s| s.kind == kind) {
            report.errors.push(format!("missing {label}"));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_doc_json() -> String {
        let keys = VrCheckDoc::default().entries().map(|(k, _)| k);
        let body: Vec<String> = keys
            .iter()
            .map(|k| format!("\"{k}\":\"answered\""))
            .collect();
        format!("{{{}}}", body.join(","))
    }

    #[test]
    fn minimal_manifest_gets_defaults() {
        let m = parse_manifest(br#"{"name":"wf","salt":"s3cr3t"}"#).unwrap();
        assert_eq!(m.treatments, vec!["Control", "A", "B"]);
        assert_eq!(m.trials_per_participant, 6);
        assert_eq!(m.chunk_size_bytes, 4300);
        assert_eq!(m.sample_period_ms, 20);
        assert_eq!(m.reward_base_usd, 4.5);
        assert_eq!(m.reward_bonus_usd, 1.0);
        assert_eq!(m.bonus_threshold_min, 20.0);
        assert_eq!(m, ExperimentManifest::with_defaults("wf", "s3cr3t"));
    }

    #[test]
    fn empty_treatments_is_invariant_error() {
        let err = parse_manifest(br#"{"name":"x","salt":"s","treatments":[]}"#).unwrap_err();
        assert!(matches!(err, ManifestError::Invariant(_)));
    }

    #[test]
    fn schema_errors() {
        for bad in [
            &br#"{"name":"x","salt":"s","colour":"red"}"#[..],
            br#"{"name":"x","salt":"s","trials_per_participant":"six"}"#,
            br#"{"salt":"s"}"#,
            br#"{"name":"x","salt":"s","protocol_doc":{"vibes":"good"}}"#,
        ] {
            assert!(matches!(parse_manifest(bad), Err(ManifestError::Schema(_))));
        }
    }

    #[test]
    fn other_invariants() {
        for bad in [
            &br#"{"name":"x","salt":"s","treatments":["A","A"]}"#[..],
            br#"{"name":"x","salt":"s","chunk_size_bytes":63}"#,
            br#"{"name":"x","salt":"s","sample_period_ms":0}"#,
            br#"{"name":"x","salt":"s","protocol_doc":{"user_motivation":" "}}"#,
        ] {
            assert!(matches!(
                parse_manifest(bad),
                Err(ManifestError::Invariant(_))
            ));
        }
    }

    #[test]
    fn full_protocol_doc_has_no_warnings() {
        let json = format!(
            r#"{{"name":"x","salt":"s","protocol_doc":{}}}"#,
            full_doc_json()
        );
        let m = parse_manifest(json.as_bytes()).unwrap();
        let report = validate_manifest(&m, &default_services());
        assert!(report.is_empty(), "{report:?}");
    }

    #[test]
    fn missing_doc_gives_ten_warnings() {
        let m = ExperimentManifest::with_defaults("x", "s");
        let report = validate_manifest(&m, &default_services());
        assert_eq!(report.warnings.len(), 10);
        assert!(report.errors.is_empty());
    }

    #[test]
    fn missing_storage_is_an_error() {
        let m = ExperimentManifest::with_defaults("x", "s");
        let services = vec![
            ServiceRequirement::new("c", ServiceKind::Compute),
            ServiceRequirement::new("r", ServiceKind::Recruitment),
        ];
        assert_eq!(
            validate_manifest(&m, &services).errors,
            vec!["missing storage"]
        );
    }

    #[test]
    fn services_file() {
        let s = parse_services(
            br#"[{"name":"s3","kind":"storage","params":{"region":"eu"}},{"name":"ec2","kind":"compute"}]"#,
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].params["region"], "eu");
        assert!(parse_services(
            br#"[{"name":"a","kind":"storage"},{"name":"a","kind":"compute"}]"#
        )
        .is_err());
        assert!(parse_services(br#"[{"name":"a","kind":"gpu"}]"#).is_err());
    }
}
