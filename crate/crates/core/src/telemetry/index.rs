use std::collections::{BTreeMap, BTreeSet};

use super::{MetricStore, TraceStore};
use crate::component::{ComponentLevel, ComponentRef};

/// Deployment relationships recovered from telemetry: which pods belong to
/// which service and which node hosts each pod.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentIndex {
    service_pods: BTreeMap<String, BTreeSet<String>>,
    pod_service: BTreeMap<String, String>,
    pod_node: BTreeMap<String, String>,
    nodes: BTreeSet<String>,
}

impl ComponentIndex {
    pub fn build(traces: &TraceStore, metrics: &MetricStore) -> Self {
        let mut idx = ComponentIndex::default();
        for s in traces.spans() {
            idx.service_pods.entry(s.service.clone()).or_default().insert(s.instance.clone());
            idx.pod_service.entry(s.instance.clone()).or_insert_with(|| s.service.clone());
            if let Some(n) = &s.node {
                idx.pod_node.entry(s.instance.clone()).or_insert_with(|| n.clone());
                idx.nodes.insert(n.clone());
            }
        }
        for m in metrics.series() {
            let id = m.key.component.id();
            match m.key.component.level() {
                ComponentLevel::Node => {
                    idx.nodes.insert(id.to_string());
                }
                ComponentLevel::Service => {
                    idx.service_pods.entry(id.to_string()).or_default();
                }
                ComponentLevel::Pod => {
                    // pods only seen in metrics have no known service
                    idx.pod_service.entry(id.to_string()).or_default();
                }
            }
        }
        idx
    }

    pub fn has(&self, c: &ComponentRef) -> bool {
        match c.level() {
            ComponentLevel::Node => self.nodes.contains(c.id()),
            ComponentLevel::Service => self.service_pods.contains_key(c.id()),
            ComponentLevel::Pod => self.pod_service.contains_key(c.id()),
        }
    }

    pub fn node_of_pod(&self, pod: &str) -> Option<&str> {
        self.pod_node.get(pod).map(String::as_str)
    }

    pub fn service_of_pod(&self, pod: &str) -> Option<&str> {
        self.pod_service.get(pod).map(String::as_str).filter(|s| !s.is_empty())
    }

    pub fn pods_of(&self, service: &str) -> impl Iterator<Item = &str> {
        self.service_pods.get(service).into_iter().flatten().map(String::as_str)
    }

    /// Resolves a metrics-query scope name. A service expands to itself, its
    /// pods and the nodes hosting them; a pod to itself and its node; a node
    /// to itself. Returns `None` for unknown names.
    pub fn expand_scope(&self, name: &str) -> Option<Vec<ComponentRef>> {
        let mut out = BTreeSet::new();
        if self.service_pods.contains_key(name) {
            out.insert(ComponentRef::service(name));
            for pod in self.pods_of(name) {
                out.insert(ComponentRef::pod(pod));
                if let Some(n) = self.node_of_pod(pod) {
                    out.insert(ComponentRef::node(n));
                }
            }
        } else if self.pod_service.contains_key(name) {
            out.insert(ComponentRef::pod(name));
            if let Some(n) = self.node_of_pod(name) {
                out.insert(ComponentRef::node(n));
            }
        } else if self.nodes.contains(name) {
            out.insert(ComponentRef::node(name));
        } else {
            return None;
        }
        Some(out.into_iter().collect())
    }

    /// Every known component, sorted.
    pub fn all_components(&self) -> Vec<ComponentRef> {
        let mut out: Vec<ComponentRef> = Vec::new();
        out.extend(self.nodes.iter().map(ComponentRef::node));
        out.extend(self.service_pods.keys().map(ComponentRef::service));
        out.extend(self.pod_service.keys().map(ComponentRef::pod));
        out.sort();
        out
    }
}
