//! In-memory key-value state machine: the deterministic target the executor
//! applies committed commands to. Single consumer only; thread safety is the
//! log's job, not the store's.

use std::collections::{BTreeMap, HashMap};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One replicated operation. Keys are non-empty opaque byte-strings; only
/// `Put` carries a value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Command {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
    Del { key: Vec<u8> },
}

impl Command {
    pub fn key(&self) -> &[u8] {
        match self {
            Command::Get { key } | Command::Put { key, .. } | Command::Del { key } => key,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Command::Get { .. } => "get",
            Command::Put { .. } => "put",
            Command::Del { .. } => "del",
        }
    }
}

// Wire shape: {"kind": "get"|"put"|"del", "key": base64, "value": base64}
// with "value" present only for puts. JSON cannot carry raw bytes, hence
// base64 for bit-exactness.
#[derive(Serialize, Deserialize)]
struct WireCommand {
    kind: WireKind,
    key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum WireKind {
    Get,
    Put,
    Del,
}

impl Serialize for Command {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let (kind, key, value) = match self {
            Command::Get { key } => (WireKind::Get, key, None),
            Command::Put { key, value } => (WireKind::Put, key, Some(value)),
            Command::Del { key } => (WireKind::Del, key, None),
        };
        WireCommand {
            kind,
            key: BASE64.encode(key),
            value: value.map(|v| BASE64.encode(v)),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Command {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = WireCommand::deserialize(deserializer)?;
        let key = BASE64
            .decode(&wire.key)
            .map_err(|e| D::Error::custom(format!("bad key base64: {e}")))?;
        if key.is_empty() {
            return Err(D::Error::custom("empty key"));
        }
        let value = wire
            .value
            .map(|v| BASE64.decode(&v))
            .transpose()
            .map_err(|e| D::Error::custom(format!("bad value base64: {e}")))?;
        Ok(match wire.kind {
            WireKind::Get => Command::Get { key },
            WireKind::Put => Command::Put {
                key,
                value: value.unwrap_or_default(),
            },
            WireKind::Del => Command::Del { key },
        })
    }
}

/// What a command produced. Get/Del on a missing key is `ok: false`, never an
/// error: every committed command must be executable unconditionally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandResult {
    pub ok: bool,
    pub value: Option<Vec<u8>>,
}

impl CommandResult {
    pub fn ok() -> Self {
        CommandResult { ok: true, value: None }
    }

    pub fn ok_value(value: Vec<u8>) -> Self {
        CommandResult { ok: true, value: Some(value) }
    }

    pub fn not_found() -> Self {
        CommandResult { ok: false, value: None }
    }
}

#[derive(Debug, Default)]
pub struct MemKvStore {
    map: HashMap<Vec<u8>, Vec<u8>>,
}

impl MemKvStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn execute(&mut self, command: &Command) -> CommandResult {
        match command {
            Command::Get { key } => match self.map.get(key) {
                Some(value) => CommandResult::ok_value(value.clone()),
                None => CommandResult::not_found(),
            },
            Command::Put { key, value } => {
                self.map.insert(key.clone(), value.clone());
                CommandResult::ok()
            }
            Command::Del { key } => match self.map.remove(key) {
                Some(_) => CommandResult::ok(),
                None => CommandResult::not_found(),
            },
        }
    }

    pub fn size(&self) -> usize {
        self.map.len()
    }

    /// Ordered copy of the live contents, for state comparison in tests and
    /// the simulator's oracles.
    pub fn snapshot(&self) -> BTreeMap<Vec<u8>, Vec<u8>> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
