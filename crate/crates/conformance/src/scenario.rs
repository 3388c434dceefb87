// SPDX-License-Identifier: Apache-2.0

//! Scenario files: a platform, the cVMs to boot on it and what to expect.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tmm_sim::host::{CvmSpec, HostPolicy};
use tmm_sim::mem::{MappingPolicy, MemoryConfig, TzascConfig, TzascRegion, DEFAULT_GRANULES, TZASC_MAX_REGIONS};
use tmm_sim::platform::PlatformConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granules: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tzasc: Option<Vec<TzascRegion>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<MappingPolicy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledInterrupt {
    pub tick: u64,
    #[serde(default)]
    pub cpu: usize,
    pub intid: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestExpectation {
    #[serde(with = "hex::serde")]
    pub challenge: Vec<u8>,
}

/// What a cVM's run must show. Absent fields are not checked.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub cvm: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<bool>,
    /// Markers vCPU 0 must emit, in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<Vec<u64>>,
    /// Hex of each `MemRead` on vCPU 0, in order. A trailing `*` matches
    /// any suffix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reads: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attest: Option<AttestExpectation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_irq_round_trips: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpus: Option<usize>,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex32")]
    pub rot_seed: Option<[u8; 32]>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex32")]
    pub firmware: Option<[u8; 32]>,
    #[serde(default)]
    pub host: HostPolicy,
    /// Host-call responses keyed by the guest's first argument.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub responder: BTreeMap<u64, [u64; 7]>,
    pub cvms: Vec<CvmSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interrupts: Vec<ScheduledInterrupt>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expect: Vec<Expectation>,
}

fn default_max_steps() -> u64 {
    10_000
}

mod opt_hex32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<[u8; 32]>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_str(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[u8; 32]>, D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map(Some)
            .map_err(|_| serde::de::Error::custom("expected 32 hex-encoded bytes"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}, column {column}: {field}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: {field}: {message}")]
    Invalid {
        line: usize,
        field: String,
        message: String,
    },
    #[error("{0}")]
    Io(String),
}

impl ParseError {
    pub fn field(&self) -> Option<&str> {
        match self {
            ParseError::Syntax { field, .. } | ParseError::Invalid { field, .. } => Some(field),
            ParseError::Io(_) => None,
        }
    }
}

/// First line mentioning `key` as a JSON object key, or 1.
fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ParseError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ParseError::Syntax {
                line: inner.line(),
                column: inner.column(),
                field: if path == "." { "(root)".into() } else { path },
                message: inner.to_string(),
            }
        })?;
        s.validate(text)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ParseError> {
        let text = std::fs::read_to_string(path).map_err(|e| ParseError::Io(format!("{}: {e}", path.display())))?;
        Scenario::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn validate(&self, text: &str) -> Result<(), ParseError> {
        let invalid = |key: &str, field: &str, message: String| ParseError::Invalid {
            line: line_of(text, key),
            field: field.into(),
            message,
        };
        if let Some(t) = &self.memory.tzasc {
            if t.len() > TZASC_MAX_REGIONS {
                return Err(invalid(
                    "tzasc",
                    "memory.tzasc",
                    format!("{} regions exceeds the limit of {TZASC_MAX_REGIONS}", t.len()),
                ));
            }
        }
        let cfg = self.platform(None, None);
        cfg.memory
            .tzasc
            .validate(cfg.memory.granules)
            .map_err(|e| invalid("tzasc", "memory.tzasc", e.to_string()))?;
        if self.cvms.is_empty() {
            return Err(invalid("cvms", "cvms", "at least one cVM is required".into()));
        }
        for (i, e) in self.expect.iter().enumerate() {
            if e.cvm >= self.cvms.len() {
                return Err(invalid("expect", &format!("expect[{i}].cvm"), format!("no cVM {}", e.cvm)));
            }
            if e.attest.as_ref().is_some_and(|a| a.challenge.len() != 64) {
                return Err(invalid(
                    "challenge",
                    &format!("expect[{i}].attest.challenge"),
                    "challenge must be 64 bytes".into(),
                ));
            }
        }
        for (i, s) in self.interrupts.iter().enumerate() {
            if s.cpu >= cfg.cpus {
                return Err(invalid("interrupts", &format!("interrupts[{i}].cpu"), format!("no cpu {}", s.cpu)));
            }
        }
        Ok(())
    }

    /// The platform this scenario describes, with optional overrides.
    /// Overriding the policy keeps an explicit TZASC layout; otherwise the
    /// layout follows the policy's default.
    pub fn platform(&self, seed: Option<u64>, policy: Option<MappingPolicy>) -> PlatformConfig {
        let granules = self.memory.granules.unwrap_or(DEFAULT_GRANULES);
        let policy = policy.or(self.memory.policy).unwrap_or_default();
        let tzasc = match &self.memory.tzasc {
            Some(regions) => TzascConfig {
                regions: regions.clone(),
            },
            None => match policy {
                MappingPolicy::Direct => TzascConfig::split(granules, granules / 2),
                MappingPolicy::Dynamic => TzascConfig::split(granules, 0),
            },
        };
        let d = PlatformConfig::default();
        PlatformConfig {
            memory: MemoryConfig {
                granules,
                tzasc,
                policy,
            },
            cpus: self.cpus.unwrap_or(d.cpus),
            seed: seed.unwrap_or(self.seed),
            rot_seed: self.rot_seed.unwrap_or(d.rot_seed),
            firmware: self.firmware.unwrap_or(d.firmware),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{ "cvms": [ { "vcpus": [ { "program": ["halt"] } ] } ] }"#;

    #[test]
    fn minimal_parses_and_round_trips() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.max_steps, 10_000);
        assert_eq!(Scenario::parse(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn too_many_tzasc_regions() {
        let regions: Vec<String> = (0..9)
            .map(|i| format!(r#"{{ "base": {}, "count": 8, "secure": {} }}"#, i * 8, i % 2 == 0))
            .collect();
        let text = format!(
            "{{\n  \"memory\": {{\n    \"granules\": 128,\n    \"tzasc\": [{}]\n  }},\n  \"cvms\": [ {{ \"vcpus\": [ {{ \"program\": [\"halt\"] }} ] }} ]\n}}",
            regions.join(", ")
        );
        let e = Scenario::parse(&text).unwrap_err();
        assert_eq!(e.field(), Some("memory.tzasc"));
        assert!(matches!(e, ParseError::Invalid { line: 4, .. }), "{e}");
    }

    #[test]
    fn syntax_errors_name_the_field() {
        let text = "{\n  \"memory\": { \"granules\": \"lots\" },\n  \"cvms\": []\n}";
        let e = Scenario::parse(text).unwrap_err();
        assert_eq!(e.field(), Some("memory.granules"));
        assert!(matches!(e, ParseError::Syntax { line: 2, .. }));
        let e = Scenario::parse(r#"{ "cvms": [], "bogus": 1 }"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn policy_override_picks_layout() {
        let s = Scenario::parse(MINIMAL).unwrap();
        let d = s.platform(Some(3), Some(MappingPolicy::Dynamic));
        assert_eq!(d.seed, 3);
        assert!(d.memory.tzasc.regions.iter().all(|r| !r.secure));
        let p = s.platform(None, None);
        assert_eq!(p.memory.policy, MappingPolicy::Direct);
    }
}
