//! Shared fixtures for the benchmarks.

use flforge_core::pipeline::{build_dataset, Dataset, LoadOptions};
use flforge_core::synth::{gen_scenario, FaultKind, FaultSpec, Preset, ScenarioClock, Topology};
use flforge_core::telemetry::{MetricStore, TraceStore};
use flforge_core::ComponentRef;

/// A paperlike scenario with a latency fault on one pod, loaded and detected.
pub fn paperlike_dataset(n_requests: usize) -> Dataset {
    let topology = Topology::preset(Preset::Paperlike);
    let start = ScenarioClock::default().start;
    let fault = FaultSpec::standard(ComponentRef::pod("cartservice-1"), FaultKind::LatencyInflation, (start + 1800, start + 1860));
    let sc = gen_scenario(&topology, &fault, n_requests, 1).expect("preset scenario generates");
    build_dataset(
        "bench",
        TraceStore::from_records(sc.spans),
        MetricStore::from_rows(sc.metrics),
        Some(sc.label),
        &LoadOptions::default(),
    )
    .expect("generated data loads")
}
