use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use super::{step_rng, Decision, Policy, PolicyContext, PolicyError};
use crate::component::ComponentRef;
use crate::episode::{entry_components, ObservationPayload};
use crate::telemetry::DEFAULT_OK_STATUSES;
use crate::tools::{Action, ChildSpanRow};

/// Descends the span tree toward the slowest child while that child carries
/// at least `theta` of its parent's duration, follows failing children first
/// when `error_first`, then inspects metrics around the stopping span's
/// service and prints what it found.
///
/// With `temperature > 0` the child is sampled from a softmax over log
/// durations and the printed ranking is perturbed with Gumbel noise, so
/// rollouts of the same case differ.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyPolicy {
    pub theta: f64,
    pub error_first: bool,
    pub temperature: f64,
}

impl Default for GreedyPolicy {
    fn default() -> Self {
        GreedyPolicy { theta: 0.5, error_first: true, temperature: 0.0 }
    }
}

struct SpanInfo {
    service: String,
    duration: u64,
    status: i64,
    components: Vec<ComponentRef>,
}

fn is_ok(status: i64) -> bool {
    DEFAULT_OK_STATUSES.contains(&status)
}

impl GreedyPolicy {
    fn pick_child<'r>(&self, rows: &'r [ChildSpanRow], parent: &SpanInfo, rng: &mut impl Rng) -> Option<&'r ChildSpanRow> {
        if self.error_first {
            let failing = rows.iter().filter(|r| !is_ok(r.status)).max_by_key(|r| r.duration);
            if failing.is_some() {
                return failing;
            }
            if !is_ok(parent.status) {
                // the failure originates here
                return None;
            }
        }
        let child = if self.temperature > 0.0 && rows.len() > 1 {
            let logits: Vec<f64> = rows.iter().map(|r| ((r.duration as f64).max(1.0)).ln() / self.temperature).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let mut x = rng.random::<f64>() * weights.iter().sum::<f64>();
            let mut chosen = rows.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if x < *w {
                    chosen = i;
                    break;
                }
                x -= w;
            }
            rows.get(chosen)
        } else {
            rows.iter().max_by_key(|r| r.duration)
        }?;
        (child.duration as f64 >= self.theta * parent.duration as f64).then_some(child)
    }

    fn final_answer(&self, ctx: &PolicyContext<'_>, spans: &HashMap<String, SpanInfo>, stop: Option<&str>, rng: &mut impl Rng) -> Decision {
        let path = ctx.path;
        let mut ranked: Vec<ComponentRef> = Vec::new();
        let push = |c: ComponentRef, out: &mut Vec<ComponentRef>| {
            if !out.contains(&c) {
                out.push(c);
            }
        };
        for s in path.steps.iter() {
            if let ObservationPayload::Fluctuations(o) = &s.observation.payload {
                for r in &o.rows {
                    for c in r.components() {
                        push(c, &mut ranked);
                    }
                }
            }
        }
        if let Some(info) = stop.and_then(|id| spans.get(id)) {
            for c in &info.components {
                push(c.clone(), &mut ranked);
            }
        }
        // remaining visited spans, deepest first
        for s in path.steps.iter().rev() {
            if let ObservationPayload::ChildSpans(o) = &s.observation.payload {
                if let Some(info) = spans.get(&o.parent_span_id) {
                    for c in &info.components {
                        push(c.clone(), &mut ranked);
                    }
                }
            }
        }
        for c in entry_components(&path.case) {
            push(c, &mut ranked);
        }
        if self.temperature > 0.0 {
            let gumbel = Gumbel::new(0.0, self.temperature).expect("positive scale");
            let mut scored: Vec<(f64, ComponentRef)> =
                ranked.into_iter().enumerate().map(|(i, c)| (-(i as f64) + gumbel.sample(rng), c)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            ranked = scored.into_iter().map(|(_, c)| c).collect();
        }
        Decision::print(&ranked)
    }
}

impl Policy for GreedyPolicy {
    fn decide(&self, _instruction: &str, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let path = ctx.path;
        let case = &path.case;
        let mut rng = step_rng(ctx, 0x6772_6565);

        let entry = &case.entry_span;
        let mut spans: HashMap<String, SpanInfo> = HashMap::new();
        spans.insert(
            entry.span_id.clone(),
            SpanInfo { service: entry.service.clone(), duration: entry.duration, status: entry.status, components: entry_components(case) },
        );
        for s in path.steps.iter() {
            if let ObservationPayload::ChildSpans(o) = &s.observation.payload {
                for r in &o.rows {
                    spans.entry(r.span_id.clone()).or_insert_with(|| SpanInfo {
                        service: r.service.clone(),
                        duration: r.duration,
                        status: r.status,
                        components: r.components().collect(),
                    });
                }
            }
        }

        let last_trace = path.steps.iter().rfind(|s| s.action.known() == Some(Action::Trace));
        let stop: Option<String> = match last_trace.map(|s| &s.observation.payload) {
            Some(ObservationPayload::ChildSpans(o)) => Some(o.parent_span_id.clone()),
            _ => None,
        };
        let explored_metrics = path.steps.iter().any(|s| s.action.known() == Some(Action::Metrics));
        let can = |a: Action| ctx.allowed.contains(&a);
        if explored_metrics || ctx.depth_left <= 1 || !(can(Action::Trace) || can(Action::Metrics)) {
            return Ok(self.final_answer(ctx, &spans, stop.as_deref(), &mut rng));
        }
        let metrics_on = |service: &str| Decision::metrics(service.to_string(), entry.timestamp);

        let Some(step) = last_trace else {
            return Ok(if can(Action::Trace) { Decision::trace(entry.span_id.clone()) } else { metrics_on(&entry.service) });
        };
        let ObservationPayload::ChildSpans(obs) = &step.observation.payload else {
            return Ok(metrics_on(&entry.service));
        };
        let parent = &spans[&obs.parent_span_id];
        match self.pick_child(&obs.rows, parent, &mut rng) {
            Some(child) if can(Action::Trace) => Ok(Decision::trace(child.span_id.clone())),
            _ if can(Action::Metrics) => Ok(metrics_on(&parent.service)),
            _ => Ok(self.final_answer(ctx, &spans, stop.as_deref(), &mut rng)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::example_env;
    use crate::episode::{run_episode, EpisodeConfig, EpisodeStatus};

    #[test]
    fn follows_the_slow_chain_then_inspects_metrics() {
        let (env, case) = example_env();
        let r = run_episode(&case, &GreedyPolicy::default(), &env, &EpisodeConfig::default()).unwrap();
        assert_eq!(r.status, EpisodeStatus::Printed);
        // rec-0 deviates by 15 sigma, rec2-0 by 9 sigma; both pods sit on node-5
        let calls: Vec<String> = r
            .path
            .steps
            .iter()
            .map(|s| format!("{} {}", s.action, s.params.values().next().map(|v| v.to_string()).unwrap_or_default()))
            .collect();
        assert_eq!(
            calls,
            vec![
                "search_traces \"0a81f08fc9b7dc5d\"",
                "search_traces \"9063994c3450e63a\"",
                "search_traces \"eedd72a7aaa04418\"",
                "search_traces \"fb9693f175e5b84f\"",
                "search_fluctuating_metrics \"recommendationservice\"",
                "print_results [{\"pod\":\"recommendationservice-0\"},{\"node\":\"node-5\"},{\"pod\":\"recommendationservice2-0\"},{\"service\":\"recommendationservice\"},{\"service\":\"frontend\"},{\"pod\":\"frontend2-0\"}]",
            ]
        );
    }

    #[test]
    fn temperature_varies_rankings_across_seeds() {
        let (env, case) = example_env();
        let p = GreedyPolicy { temperature: 1.0, ..Default::default() };
        let answers: std::collections::HashSet<Vec<ComponentRef>> = (0..20)
            .map(|seed| run_episode(&case, &p, &env, &EpisodeConfig { seed, ..Default::default() }).unwrap().ranked_components())
            .collect();
        assert!(answers.len() > 1);
    }
}
