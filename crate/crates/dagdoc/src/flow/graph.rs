//! DAG validation and wave scheduling over parsed flows.

use std::collections::{BTreeMap, BTreeSet};

use super::{FlowError, FlowSpec};

/// A flow whose step graph is known to be acyclic and rooted.
#[derive(Debug, Clone)]
pub struct ValidatedFlow {
    pub spec: FlowSpec,
    /// Step names in deterministic topological order.
    pub topo_order: Vec<String>,
    /// Human-readable lint notes (never fatal).
    pub warnings: Vec<String>,
}

impl ValidatedFlow {
    /// Steps grouped by wave; wave i holds every step whose longest
    /// dependency chain has exactly i predecessors.
    pub fn waves(&self) -> Vec<Vec<String>> {
        execution_waves(&self.spec)
    }
}

/// Checks the step graph and fixes a deterministic topological order.
///
/// Ties are broken lexicographically by step name, so the order depends
/// only on the graph, not on declaration order. A cycle is reported as
/// the concrete step sequence that closes it; a flow whose every step
/// has predecessors (only possible with a cycle, but checked separately
/// for the message) is rejected as rootless.
pub fn validate_dag(spec: &FlowSpec) -> Result<ValidatedFlow, FlowError> {
    let names: Vec<&str> = spec.steps.iter().map(|s| s.name.as_str()).collect();

    if !spec.steps.is_empty() && spec.steps.iter().all(|s| !s.after.is_empty()) {
        return Err(FlowError::NoRoot);
    }

    let mut indegree: BTreeMap<&str, usize> = names.iter().map(|n| (*n, 0)).collect();
    let mut successors: BTreeMap<&str, Vec<&str>> =
        names.iter().map(|n| (*n, Vec::new())).collect();
    for step in &spec.steps {
        for pred in &step.after {
            *indegree.get_mut(step.name.as_str()).expect("known step") += 1;
            successors
                .get_mut(pred.as_str())
                .expect("references validated at parse")
                .push(&step.name);
        }
    }

    // Kahn's algorithm over a BTreeSet frontier: smallest ready name first.
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(n, _)| *n)
        .collect();
    let mut topo_order: Vec<String> = Vec::with_capacity(names.len());
    while let Some(name) = ready.iter().next().copied() {
        ready.remove(name);
        topo_order.push(name.to_string());
        for succ in &successors[name] {
            let d = indegree.get_mut(succ).expect("known step");
            *d -= 1;
            if *d == 0 {
                ready.insert(succ);
            }
        }
    }

    if topo_order.len() != spec.steps.len() {
        return Err(FlowError::Cycle {
            cycle: find_cycle(spec),
        });
    }

    let mut warnings = Vec::new();
    let roots: Vec<&str> = spec
        .steps
        .iter()
        .filter(|s| s.after.is_empty())
        .map(|s| s.name.as_str())
        .collect();
    if roots.len() > 1 {
        warnings.push(format!(
            "flow has {} root steps ({}); runs start all of them in wave 0",
            roots.len(),
            roots.join(", ")
        ));
    }

    Ok(ValidatedFlow {
        spec: spec.clone(),
        topo_order,
        warnings,
    })
}

/// Finds one concrete cycle by DFS. Only called when a cycle exists.
///
/// Returns the closed path, first node repeated at the end, e.g.
/// `[a, b, a]` for a two-step cycle.
fn find_cycle(spec: &FlowSpec) -> Vec<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }

    let preds: BTreeMap<&str, &[String]> = spec
        .steps
        .iter()
        .map(|s| (s.name.as_str(), s.after.as_slice()))
        .collect();
    let mut marks: BTreeMap<&str, Mark> = preds.keys().map(|n| (*n, Mark::White)).collect();

    // Follow `after` edges (step -> predecessor); a grey hit closes a cycle.
    fn visit<'a>(
        node: &'a str,
        preds: &BTreeMap<&'a str, &'a [String]>,
        marks: &mut BTreeMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(node, Mark::Grey);
        stack.push(node);
        for pred in preds[node] {
            match marks[pred.as_str()] {
                Mark::Grey => {
                    let start = stack
                        .iter()
                        .position(|n| *n == pred.as_str())
                        .expect("on stack");
                    // stack[start..] lists the cycle following `after` edges;
                    // reverse it so the report reads in dependency order.
                    let mut cycle: Vec<String> =
                        stack[start..].iter().rev().map(|s| s.to_string()).collect();
                    cycle.insert(0, pred.clone());
                    return Some(cycle);
                }
                Mark::White => {
                    if let Some(found) = visit(pred, preds, marks, stack) {
                        return Some(found);
                    }
                }
                Mark::Black => {}
            }
        }
        stack.pop();
        marks.insert(node, Mark::Black);
        None
    }

    for step in &spec.steps {
        if marks[step.name.as_str()] == Mark::White {
            let mut stack = Vec::new();
            if let Some(cycle) = visit(&step.name, &preds, &mut marks, &mut stack) {
                return cycle;
            }
        }
    }
    unreachable!("find_cycle called on an acyclic graph")
}

/// Groups steps into execution waves by longest-predecessor-chain depth.
///
/// Within a wave, names are sorted. Assumes an acyclic graph.
pub fn execution_waves(spec: &FlowSpec) -> Vec<Vec<String>> {
    let mut depth: BTreeMap<&str, usize> = BTreeMap::new();

    fn depth_of<'a>(
        name: &'a str,
        spec: &'a FlowSpec,
        depth: &mut BTreeMap<&'a str, usize>,
    ) -> usize {
        if let Some(d) = depth.get(name) {
            return *d;
        }
        let step = spec.step(name).expect("known step");
        let d = step
            .after
            .iter()
            .map(|p| depth_of(p, spec, depth) + 1)
            .max()
            .unwrap_or(0);
        depth.insert(name, d);
        d
    }

    let mut waves: Vec<Vec<String>> = Vec::new();
    for step in &spec.steps {
        let d = depth_of(&step.name, spec, &mut depth);
        while waves.len() <= d {
            waves.push(Vec::new());
        }
        waves[d].push(step.name.clone());
    }
    for wave in &mut waves {
        wave.sort();
    }
    waves
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::parse_flow;

    fn flow(src: &str) -> FlowSpec {
        parse_flow(src).unwrap()
    }

    #[test]
    fn diamond_waves() {
        let spec = flow(
            "flow F\n\
             step start\nexec \"true\"\n\
             step clean after start\nexec \"true\"\n\
             step aggregate after start\nexec \"true\"\n\
             step prepare after clean, aggregate\nexec \"true\"\n",
        );
        let v = validate_dag(&spec).unwrap();
        assert_eq!(
            v.waves(),
            vec![
                vec!["start".to_string()],
                vec!["aggregate".to_string(), "clean".to_string()],
                vec!["prepare".to_string()],
            ]
        );
        assert!(v.warnings.is_empty());
    }

    #[test]
    fn wave_is_longest_chain_not_shortest() {
        // d depends on both a root and a depth-1 step: it lands in wave 2.
        let spec = flow(
            "flow F\n\
             step a\nexec \"true\"\n\
             step b after a\nexec \"true\"\n\
             step d after a, b\nexec \"true\"\n",
        );
        assert_eq!(
            execution_waves(&spec),
            vec![
                vec!["a".to_string()],
                vec!["b".to_string()],
                vec!["d".to_string()],
            ]
        );
    }

    #[test]
    fn topo_order_ignores_declaration_order() {
        let a = flow(
            "flow F\nstep z\nexec \"true\"\nstep a\nexec \"true\"\nstep m after z, a\nexec \"true\"\n",
        );
        let b = flow(
            "flow F\nstep a\nexec \"true\"\nstep m after z, a\nexec \"true\"\nstep z\nexec \"true\"\n",
        );
        let order_a = validate_dag(&a).unwrap().topo_order;
        let order_b = validate_dag(&b).unwrap().topo_order;
        assert_eq!(order_a, ["a", "z", "m"]);
        assert_eq!(order_a, order_b);
    }

    #[test]
    fn two_step_cycle_reported_with_path() {
        let spec = flow("flow F\nstep r\nexec \"true\"\nstep a after b, r\nexec \"true\"\nstep b after a\nexec \"true\"\n");
        match validate_dag(&spec) {
            Err(FlowError::Cycle { cycle }) => {
                assert_eq!(cycle.len(), 3);
                assert_eq!(cycle.first(), cycle.last());
                let inner: Vec<&str> = cycle[..2].iter().map(|s| s.as_str()).collect();
                assert!(inner.contains(&"a") && inner.contains(&"b"), "{cycle:?}");
            }
            other => panic!("expected Cycle, got {other:?}"),
        }
    }

    #[test]
    fn self_cycle_reported() {
        let spec = flow("flow F\nstep r\nexec \"true\"\nstep a after a, r\nexec \"true\"\n");
        match validate_dag(&spec) {
            Err(FlowError::Cycle { cycle }) => assert_eq!(cycle, vec!["a", "a"]),
            other => panic!("expected Cycle, got {other:?}"),
        }
    }

    #[test]
    fn rootless_flow_rejected() {
        let spec = flow("flow F\nstep a after b\nexec \"true\"\nstep b after a\nexec \"true\"\n");
        assert!(matches!(validate_dag(&spec), Err(FlowError::NoRoot)));
    }

    #[test]
    fn multi_root_warns_but_passes() {
        let spec = flow("flow F\nstep a\nexec \"true\"\nstep b\nexec \"true\"\n");
        let v = validate_dag(&spec).unwrap();
        assert_eq!(v.warnings.len(), 1);
        assert!(v.warnings[0].contains("2 root steps"), "{}", v.warnings[0]);
    }

    #[test]
    fn cycle_error_display_uses_arrows() {
        let err = FlowError::Cycle {
            cycle: vec!["a".into(), "b".into(), "a".into()],
        };
        assert_eq!(err.to_string(), "dependency cycle: a -> b -> a");
    }
}
