//! Declarative simulation input: a strict JSON-compatible schema with
//! field-level validation. Unknown fields are rejected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::FailMode;
use crate::origin::{ReflectionMix, ReflectionMode};
use crate::portplan::{PortPlanError, PortRegistry};
use crate::sf::{self, Coverage, SecurityFunction, SfId, SignatureAction};
use crate::wire::DEFAULT_PATH_BUDGET;

#[derive(Debug, thiserror::Error)]
#[error("invalid scenario: {}", .0.join("; "))]
pub struct ConfigInvalid(pub Vec<String>);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default = "PortsConfig::default_config")]
    pub ports: PortsConfig,
    pub path: PathConfig,
    #[serde(default)]
    pub sf_directory: Vec<SfDef>,
    pub client: ClientConfig,
    pub origin: OriginConfig,
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub queue: QueueConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortsConfig {
    pub registry: Vec<PortBinding>,
    /// Inclusive ephemeral source-port range used by clients and NATs.
    pub ephemeral_range: (u16, u16),
}

impl PortsConfig {
    pub fn default_config() -> Self {
        Self {
            registry: vec![
                PortBinding { opsec_port: 7443, listen_port: 443 },
                PortBinding { opsec_port: 8443, listen_port: 443 },
                PortBinding { opsec_port: 7080, listen_port: 80 },
                PortBinding { opsec_port: 8080, listen_port: 80 },
            ],
            ephemeral_range: (49152, 65535),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortBinding {
    pub opsec_port: u16,
    pub listen_port: u16,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    #[serde(default)]
    pub nat: bool,
    /// One-way delay per link, in milliseconds: client→isp1, isp_i→isp_{i+1},
    /// ispN→origin. Length must be number of ISPs + 1.
    pub link_delays_ms: Vec<f64>,
    pub isps: Vec<IspConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IspConfig {
    pub id: u32,
    pub willing: bool,
    #[serde(default = "default_coverage")]
    pub coverage: Coverage,
    #[serde(default)]
    pub catalog: Vec<String>,
    /// Flows per instance before a new instance is added; absent = static.
    #[serde(default)]
    pub theta: Option<u32>,
    #[serde(default)]
    pub adversary: AdversaryKind,
}

fn default_coverage() -> Coverage {
    Coverage::Both
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    #[default]
    Honest,
    DropsOpsec,
    TampersServDisc,
    FakeQuote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfDef {
    pub name: String,
    pub kind: SfKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SfKind {
    KeywordIds { signatures: Vec<SignatureDef> },
    UrlBlocklist { blocked: Vec<String> },
    ByteCounter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureDef {
    pub pattern: String,
    pub verdict: SignatureAction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    #[serde(default)]
    pub sfc_up: Vec<String>,
    #[serde(default)]
    pub sfc_down: Vec<String>,
    #[serde(default = "default_fail_mode")]
    pub fail_mode: FailMode,
    #[serde(default = "default_path_budget")]
    pub path_budget: usize,
    #[serde(default = "default_timeout")]
    pub response_timeout_ms: f64,
}

fn default_fail_mode() -> FailMode {
    FailMode::FailOpen
}

fn default_path_budget() -> usize {
    DEFAULT_PATH_BUDGET
}

fn default_timeout() -> f64 {
    2000.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginConfig {
    pub reflection: ReflectionConfig,
    #[serde(default)]
    pub close_after_response: bool,
    #[serde(default)]
    pub tls_like: bool,
    #[serde(default = "default_listen_port")]
    pub listen_port: u16,
    #[serde(default = "default_host")]
    pub host: String,
}

fn default_listen_port() -> u16 {
    443
}

fn default_host() -> String {
    "server.example".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReflectionConfig {
    Mode(ReflectionMode),
    Mix { mix: ReflectionMix },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    /// One flow count, or a sweep of counts run as independent sub-simulations.
    pub sessions: Sessions,
    #[serde(default = "default_app_packets")]
    pub app_packets_per_flow: u32,
    #[serde(default = "default_rate")]
    pub flow_rate_pps: f64,
    #[serde(default)]
    pub legacy_flows: u32,
    #[serde(default = "default_clients")]
    pub clients: u32,
    /// Data GET paths, cycled per packet; defaults to benign per-flow paths.
    #[serde(default)]
    pub data_paths: Vec<String>,
}

fn default_app_packets() -> u32 {
    4
}

fn default_rate() -> f64 {
    100.0
}

fn default_clients() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sessions {
    Count(u32),
    Sweep(Vec<u32>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    /// Per-packet service cost at one box instance, milliseconds.
    pub service_cost_ms: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { service_cost_ms: 0.05 }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigInvalid> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigInvalid(vec![format!("parse: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-level validation; collects every problem found.
    pub fn validate(&self) -> Result<(), ConfigInvalid> {
        let mut errs: Vec<String> = Vec::new();
        let pairs: Vec<(u16, u16)> =
            self.ports.registry.iter().map(|b| (b.opsec_port, b.listen_port)).collect();
        let range = self.ports.ephemeral_range.0..=self.ports.ephemeral_range.1;
        if self.ports.ephemeral_range.0 > self.ports.ephemeral_range.1 {
            errs.push("ports.ephemeral_range: start exceeds end".into());
        }
        let registry = match PortRegistry::new(&pairs, range) {
            Ok(r) => Some(r),
            Err(PortPlanError::InvalidRegistry(msg)) => {
                errs.push(format!("ports.registry: {msg}"));
                None
            }
            Err(e) => {
                errs.push(format!("ports.registry: {e}"));
                None
            }
        };
        if self.path.isps.is_empty() {
            errs.push("path.isps: at least one ISP hop required".into());
        }
        if self.path.link_delays_ms.len() != self.path.isps.len() + 1 {
            errs.push(format!(
                "path.link_delays_ms: expected {} entries (ISPs + 1), got {}",
                self.path.isps.len() + 1,
                self.path.link_delays_ms.len()
            ));
        }
        for (i, d) in self.path.link_delays_ms.iter().enumerate() {
            if !(*d > 0.0) {
                errs.push(format!("path.link_delays_ms[{i}]: delays must be strictly positive"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for isp in &self.path.isps {
            if !seen.insert(isp.id) {
                errs.push(format!("path.isps: duplicate isp id {}", isp.id));
            }
            if let Some(t) = isp.theta {
                if t == 0 {
                    errs.push(format!("path.isps[{}].theta: must be >= 1", isp.id));
                }
            }
            for name in &isp.catalog {
                if !self.sf_directory.iter().any(|d| d.name == *name) {
                    errs.push(format!("path.isps[{}].catalog: unknown function {name:?}", isp.id));
                }
            }
        }
        for name in self.client.sfc_up.iter().chain(self.client.sfc_down.iter()) {
            if !self.sf_directory.iter().any(|d| d.name == *name) {
                errs.push(format!("client.sfc: unknown function {name:?}"));
            }
        }
        let wants_opsec = !(self.client.sfc_up.is_empty() && self.client.sfc_down.is_empty());
        if wants_opsec {
            if let Some(reg) = &registry {
                if reg.ports_for(self.origin.listen_port).is_empty() {
                    errs.push(format!(
                        "origin.listen_port: no opsec port binds to {} in the registry",
                        self.origin.listen_port
                    ));
                }
            }
        }
        if let ReflectionConfig::Mix { mix } = &self.origin.reflection {
            if let Err(e) = mix.validate() {
                errs.push(format!("origin.reflection.mix: {e}"));
            }
        }
        if !(self.queue.service_cost_ms >= 0.0) {
            errs.push("queue.service_cost_ms: must be >= 0".into());
        }
        if !(self.traffic.flow_rate_pps > 0.0) {
            errs.push("traffic.flow_rate_pps: must be > 0".into());
        }
        if self.traffic.clients == 0 {
            errs.push("traffic.clients: must be >= 1".into());
        }
        if matches!(&self.traffic.sessions, Sessions::Sweep(v) if v.is_empty()) {
            errs.push("traffic.sessions: sweep must be nonempty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigInvalid(errs))
        }
    }

    pub fn registry(&self) -> PortRegistry {
        let pairs: Vec<(u16, u16)> =
            self.ports.registry.iter().map(|b| (b.opsec_port, b.listen_port)).collect();
        let range = self.ports.ephemeral_range.0..=self.ports.ephemeral_range.1;
        PortRegistry::new(&pairs, range).expect("validated")
    }

    /// Resolved function directory: name → (id, instance builder).
    pub fn directory(&self) -> BTreeMap<String, SecurityFunction> {
        self.sf_directory
            .iter()
            .map(|def| {
                let sf = match &def.kind {
                    SfKind::KeywordIds { signatures } => sf::keyword_ids(
                        &def.name,
                        signatures.iter().map(|s| (s.pattern.clone(), s.verdict)).collect(),
                    ),
                    SfKind::UrlBlocklist { blocked } => sf::url_blocklist(&def.name, blocked.clone()),
                    SfKind::ByteCounter => sf::byte_counter(&def.name),
                };
                (def.name.clone(), sf)
            })
            .collect()
    }

    pub fn sf_id(&self, name: &str) -> SfId {
        SfId::from_name(name)
    }

    pub fn session_counts(&self) -> Vec<u32> {
        match &self.traffic.sessions {
            Sessions::Count(n) => vec![*n],
            Sessions::Sweep(v) => v.clone(),
        }
    }
}
