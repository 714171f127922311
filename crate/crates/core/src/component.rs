//! Component references at node, service or pod granularity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

/// Granularity of a root-cause component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentLevel {
    Node,
    Service,
    Pod,
}

impl ComponentLevel {
    pub const ALL: [ComponentLevel; 3] = [ComponentLevel::Node, ComponentLevel::Service, ComponentLevel::Pod];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentLevel::Node => "node",
            ComponentLevel::Service => "service",
            ComponentLevel::Pod => "pod",
        }
    }
}

impl fmt::Display for ComponentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentLevel {
    type Err = ComponentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "node" => Ok(ComponentLevel::Node),
            "service" => Ok(ComponentLevel::Service),
            "pod" => Ok(ComponentLevel::Pod),
            other => Err(ComponentError::UnknownLevel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ComponentError {
    #[error("unknown component level `{0}` (expected node, service or pod)")]
    UnknownLevel(String),
    #[error("component id must be non-empty")]
    EmptyId,
    #[error("expected `level:id`, got `{0}`")]
    Malformed(String),
}

/// A node, service or pod identified by id. Two refs match only when both
/// the level and the id agree.
///
/// On the wire a component is a single-key object such as
/// `{"service": "checkoutservice"}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentRef {
    level: ComponentLevel,
    id: String,
}

impl ComponentRef {
    pub fn new(level: ComponentLevel, id: impl Into<String>) -> Result<Self, ComponentError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ComponentError::EmptyId);
        }
        Ok(Self { level, id })
    }

    /// Panics on an empty id. Intended for literals and generated names.
    pub fn service(id: impl Into<String>) -> Self {
        Self::new(ComponentLevel::Service, id).expect("non-empty service id")
    }

    pub fn pod(id: impl Into<String>) -> Self {
        Self::new(ComponentLevel::Pod, id).expect("non-empty pod id")
    }

    pub fn node(id: impl Into<String>) -> Self {
        Self::new(ComponentLevel::Node, id).expect("non-empty node id")
    }

    pub fn level(&self) -> ComponentLevel {
        self.level
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert(self.level.as_str().to_string(), serde_json::Value::String(self.id.clone()));
        serde_json::Value::Object(m)
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.id)
    }
}

/// Parses the `level:id` form used on the command line and in reports.
impl FromStr for ComponentRef {
    type Err = ComponentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (level, id) = s.split_once(':').ok_or_else(|| ComponentError::Malformed(s.to_string()))?;
        ComponentRef::new(level.parse()?, id)
    }
}

impl Serialize for ComponentRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        map.serialize_entry(self.level.as_str(), &self.id)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for ComponentRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct RefVisitor;

        impl<'de> Visitor<'de> for RefVisitor {
            type Value = ComponentRef;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a single-key object with key node, service or pod")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries: BTreeMap<String, String> = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    entries.insert(k, v);
                }
                if entries.len() != 1 {
                    return Err(de::Error::invalid_length(entries.len(), &self));
                }
                let (k, v) = entries.into_iter().next().expect("one entry");
                let level = k.parse::<ComponentLevel>().map_err(de::Error::custom)?;
                ComponentRef::new(level, v).map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_map(RefVisitor)
    }
}
