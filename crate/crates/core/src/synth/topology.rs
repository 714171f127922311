use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::component::{ComponentLevel, ComponentRef};

/// Parameters of a lognormal duration in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormal {
    pub fn with_median(median_us: f64, sigma: f64) -> Self {
        LogNormal { mu: median_us.ln(), sigma }
    }

    pub fn mean(&self) -> f64 {
        (self.mu + self.sigma * self.sigma / 2.0).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub pods: Vec<String>,
}

/// A synchronous call from one service to another. `latency` is the
/// callee's own work for this call, excluding its downstream calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallEdge {
    pub caller: String,
    pub callee: String,
    pub operation: String,
    pub probability: f64,
    pub latency: LogNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCatalog {
    pub node: Vec<MetricSpec>,
    pub service: Vec<MetricSpec>,
    pub pod: Vec<MetricSpec>,
}

impl MetricCatalog {
    pub fn for_level(&self, level: ComponentLevel) -> &[MetricSpec] {
        match level {
            ComponentLevel::Node => &self.node,
            ComponentLevel::Service => &self.service,
            ComponentLevel::Pod => &self.pod,
        }
    }
}

impl Default for MetricCatalog {
    fn default() -> Self {
        let m = |name: &str, mean: f64, std: f64| MetricSpec { name: name.into(), mean, std };
        MetricCatalog {
            node: vec![m("cpu", 35.0, 3.0), m("pgfault", 0.6, 0.05), m("io_wait", 2.0, 0.3)],
            service: vec![m("latency_p95", 120.0, 8.0), m("error_rate", 0.2, 0.05)],
            pod: vec![m("cpu", 20.0, 2.0), m("memory", 512.0, 16.0), m("pgfault", 0.3, 0.03)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub entry_service: String,
    pub entry_operation: String,
    /// Entry service's own work per request.
    pub entry_latency: LogNormal,
    pub services: Vec<ServiceSpec>,
    pub edges: Vec<CallEdge>,
    pub pod_node: BTreeMap<String, String>,
    pub nodes: Vec<String>,
    pub metrics: MetricCatalog,
}

/// Built-in deployment shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 3 services, 6 pods, 2 nodes.
    Small,
    /// 7 services, 44 pods, 6 nodes.
    Paperlike,
}

impl FromStr for Preset {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Preset::Small),
            "paperlike" => Ok(Preset::Paperlike),
            other => Err(SynthError::Argument(format!("unknown preset `{other}` (expected small or paperlike)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Small => "small",
            Preset::Paperlike => "paperlike",
        })
    }
}

/// Compact preset form: pod names and node placement are derived.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub entry_service: String,
    pub entry_operation: String,
    pub entry_latency: LogNormal,
    /// Node count; nodes are named `node-1..=node-N`.
    pub nodes: usize,
    pub services: Vec<ServiceCount>,
    pub edges: Vec<CallEdge>,
    #[serde(default)]
    pub metrics: Option<MetricCatalog>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceCount {
    pub name: String,
    pub pods: usize,
}

impl TopologyFile {
    /// Pods are named `{service}-{i}` and placed round-robin over nodes in
    /// declaration order.
    pub fn build(self) -> Result<Topology, SynthError> {
        if self.nodes == 0 {
            return Err(SynthError::Topology("at least one node is required".into()));
        }
        let nodes: Vec<String> = (1..=self.nodes).map(|i| format!("node-{i}")).collect();
        let mut pod_node = BTreeMap::new();
        let mut services = Vec::new();
        let mut k = 0;
        for s in self.services {
            let pods: Vec<String> = (0..s.pods).map(|i| format!("{}-{i}", s.name)).collect();
            for pod in &pods {
                pod_node.insert(pod.clone(), nodes[k % nodes.len()].clone());
                k += 1;
            }
            services.push(ServiceSpec { name: s.name, pods });
        }
        let t = Topology {
            entry_service: self.entry_service,
            entry_operation: self.entry_operation,
            entry_latency: self.entry_latency,
            services,
            edges: self.edges,
            pod_node,
            nodes,
            metrics: self.metrics.unwrap_or_default(),
        };
        t.validate()?;
        Ok(t)
    }
}

impl Topology {
    pub fn preset(p: Preset) -> Self {
        let text = match p {
            Preset::Small => include_str!("../../presets/small.toml"),
            Preset::Paperlike => include_str!("../../presets/paperlike.toml"),
        };
        Self::from_toml(text).expect("bundled presets are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let file: TopologyFile = toml::from_str(text).map_err(|e| SynthError::Topology(e.to_string()))?;
        file.build()
    }

    pub fn service(&self, name: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn pod_count(&self) -> usize {
        self.services.iter().map(|s| s.pods.len()).sum()
    }

    pub fn service_of_pod(&self, pod: &str) -> Option<&str> {
        self.services.iter().find(|s| s.pods.iter().any(|p| p == pod)).map(|s| s.name.as_str())
    }

    pub fn calls_from<'a>(&'a self, caller: &'a str) -> impl Iterator<Item = &'a CallEdge> + 'a {
        self.edges.iter().filter(move |e| e.caller == caller)
    }

    pub fn contains(&self, c: &ComponentRef) -> bool {
        match c.level() {
            ComponentLevel::Node => self.nodes.iter().any(|n| n == c.id()),
            ComponentLevel::Service => self.service(c.id()).is_some(),
            ComponentLevel::Pod => self.pod_node.contains_key(c.id()),
        }
    }

    /// Every component, in a fixed order: nodes, services, pods.
    pub fn components(&self) -> Vec<ComponentRef> {
        let mut out: Vec<ComponentRef> = self.nodes.iter().map(ComponentRef::node).collect();
        out.extend(self.services.iter().map(|s| ComponentRef::service(&s.name)));
        out.extend(self.services.iter().flat_map(|s| s.pods.iter().map(ComponentRef::pod)));
        out
    }

    /// Checks the call graph is acyclic with a single entry that reaches
    /// every service, and that every pod has a node.
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Topology(m));
        if self.service(&self.entry_service).is_none() {
            return bad(format!("entry service `{}` is not defined", self.entry_service));
        }
        for s in &self.services {
            if s.pods.is_empty() {
                return bad(format!("service `{}` has no pods", s.name));
            }
            for p in &s.pods {
                match self.pod_node.get(p) {
                    Some(n) if self.nodes.contains(n) => {}
                    _ => return bad(format!("pod `{p}` is not placed on a known node")),
                }
            }
        }
        for e in &self.edges {
            if self.service(&e.caller).is_none() || self.service(&e.callee).is_none() {
                return bad(format!("edge {} -> {} names an unknown service", e.caller, e.callee));
            }
            if e.callee == self.entry_service {
                return bad("the entry service cannot be called".into());
            }
            if !(0.0..=1.0).contains(&e.probability) {
                return bad(format!("edge {} -> {} has probability {}", e.caller, e.callee, e.probability));
            }
        }
        // Kahn's algorithm: every service must be removed for the graph to be acyclic.
        let mut indegree: BTreeMap<&str, usize> = self.services.iter().map(|s| (s.name.as_str(), 0)).collect();
        for e in &self.edges {
            *indegree.get_mut(e.callee.as_str()).expect("checked above") += 1;
        }
        let mut queue: VecDeque<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&s, _)| s).collect();
        if queue.len() != 1 || queue[0] != self.entry_service {
            return bad("the call graph must have exactly one root, the entry service".into());
        }
        let mut removed = 0;
        while let Some(s) = queue.pop_front() {
            removed += 1;
            for e in self.calls_from(s) {
                let d = indegree.get_mut(e.callee.as_str()).expect("checked above");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(&e.callee);
                }
            }
        }
        if removed != self.services.len() {
            return bad("the call graph has a cycle".into());
        }
        Ok(())
    }

    /// Expected entry-span duration under normal conditions, in µs.
    pub fn expected_entry_duration(&self) -> f64 {
        fn below(t: &Topology, service: &str) -> f64 {
            t.calls_from(service).map(|e| e.probability * (e.latency.mean() + below(t, &e.callee))).sum()
        }
        self.entry_latency.mean() + below(self, &self.entry_service)
    }

    /// Shortest chain of edges from the entry service to `service`.
    pub fn route_to(&self, service: &str) -> Option<Vec<&CallEdge>> {
        let mut prev: BTreeMap<&str, &CallEdge> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::from([self.entry_service.as_str()]);
        let mut queue = VecDeque::from([self.entry_service.as_str()]);
        while let Some(s) = queue.pop_front() {
            if s == service {
                let mut chain = Vec::new();
                let mut cur = s;
                while let Some(e) = prev.get(cur) {
                    chain.push(*e);
                    cur = &e.caller;
                }
                chain.reverse();
                return Some(chain);
            }
            for e in self.calls_from(s) {
                if seen.insert(&e.callee) {
                    prev.insert(&e.callee, e);
                    queue.push_back(&e.callee);
                }
            }
        }
        None
    }
}
