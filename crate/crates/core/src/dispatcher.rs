//! Batch scheduler: collect a window of requests, pick candidate vehicles,
//! price insertions, solve the assignment and retry leftovers on idle
//! vehicles with a relaxed pickup deadline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::assignment::{solve, AssignmentProblem};
use crate::darp_routes::{greedy_insert, InsertRequest, Insertion, RoutePlan, VehicleAnchor};
use crate::ids::{RequestId, VehicleId};
use crate::road_network::{NodeIdx, TravelTime};
use crate::scalar::{cmp_scalar, Scalar};

pub const DEFAULT_CANDIDATES_K: usize = 30;
pub const DEFAULT_RELAX_FACTOR: f64 = 2.0;

/// A request as the scheduler sees it: snapped to graph nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingRequest<S = f64> {
    pub id: RequestId,
    pub origin: NodeIdx,
    pub destination: NodeIdx,
    pub submission_s: S,
    pub pickup_deadline_s: S,
    pub dropoff_deadline_s: Option<S>,
}

impl<S: Scalar> PendingRequest<S> {
    /// Pickup deadline with the wait budget stretched by `factor`, still
    /// measured from submission.
    pub fn relaxed_deadline(&self, factor: S) -> S {
        self.submission_s + (self.pickup_deadline_s - self.submission_s) * factor
    }

    fn insert_request(&self, pickup_deadline: S) -> InsertRequest<S> {
        InsertRequest {
            id: self.id,
            pickup: self.origin,
            dropoff: self.destination,
            pickup_deadline,
            dropoff_deadline: self.dropoff_deadline_s,
        }
    }
}

/// A vehicle's state as offered to the scheduler. `plan` holds the remaining
/// stops; its initial load is the current passenger count.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetVehicle<S = f64> {
    pub id: VehicleId,
    pub anchor: VehicleAnchor<S>,
    pub plan: RoutePlan<S>,
}

impl<S: Scalar> FleetVehicle<S> {
    pub fn is_idle(&self) -> bool {
        self.plan.is_empty() && self.plan.initial_load() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchConfig {
    pub candidates_k: usize,
    pub relax_factor: f64,
    pub rebalance: bool,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self { candidates_k: DEFAULT_CANDIDATES_K, relax_factor: DEFAULT_RELAX_FACTOR, rebalance: true }
    }
}

/// Requests considered in one dispatch round over `[start_s, end_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWindow<S = f64> {
    pub start_s: S,
    pub end_s: S,
    pub requests: Vec<PendingRequest<S>>,
}

/// Builds the window ending at `end_s`: the new requests submitted in
/// `[end_s - period_s, end_s)` plus the waiting pool. Requests are ordered by
/// submission then id; duplicates are dropped.
pub fn collect_batch<S: Scalar>(
    end_s: S,
    period_s: S,
    new_requests: &[PendingRequest<S>],
    waiting: &[PendingRequest<S>],
) -> BatchWindow<S> {
    let start_s = end_s - period_s;
    let mut seen = HashSet::new();
    let mut requests: Vec<PendingRequest<S>> = waiting
        .iter()
        .chain(new_requests.iter().filter(|r| r.submission_s >= start_s && r.submission_s < end_s))
        .filter(|r| seen.insert(r.id))
        .copied()
        .collect();
    requests.sort_by(|a, b| cmp_scalar(a.submission_s, b.submission_s).then(a.id.cmp(&b.id)));
    BatchWindow { start_s, end_s, requests }
}

/// Candidate vehicles per request, nearest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: BTreeMap<RequestId, Vec<VehicleId>>,
}

impl CandidateSet {
    pub fn get(&self, request: RequestId) -> &[VehicleId] {
        self.candidates.get(&request).map_or(&[], Vec::as_slice)
    }

    pub fn pair_count(&self) -> usize {
        self.candidates.values().map(Vec::len).sum()
    }
}

/// Earliest time `vehicle` could reach `pickup` by detouring from any point of
/// its plan where a seat is free. Ignores the effect on later stops.
fn reach_estimate<S: Scalar>(vehicle: &FleetVehicle<S>, pickup: NodeIdx, oracle: &impl TravelTime<S>) -> Option<S> {
    let stops = vehicle.plan.stops();
    let mut best: Option<S> = None;
    let mut at = vehicle.anchor.node;
    let mut t = vehicle.anchor.depart_s;
    for i in 0..=stops.len() {
        if i > 0 {
            t = t + oracle.travel_time(at, stops[i - 1].node)?;
            at = stops[i - 1].node;
        }
        if vehicle.plan.load_before(i) < vehicle.anchor.capacity {
            if let Some(leg) = oracle.travel_time(at, pickup) {
                let arrival = t + leg;
                if best.is_none_or(|b| arrival < b) {
                    best = Some(arrival);
                }
            }
        }
    }
    best
}

/// Vehicles that could reach each request's pickup by `deadline(request)`
/// with a free seat, capped at the `k` with the earliest estimated arrival
/// (ties by vehicle id).
pub fn context_mapping<S: Scalar>(
    requests: &[PendingRequest<S>],
    fleet: &[FleetVehicle<S>],
    oracle: &impl TravelTime<S>,
    k: usize,
    deadline: impl Fn(&PendingRequest<S>) -> S,
) -> CandidateSet {
    let mut set = CandidateSet::default();
    for r in requests {
        let limit = deadline(r);
        let mut reach: Vec<(S, VehicleId)> = fleet
            .iter()
            .filter_map(|v| reach_estimate(v, r.origin, oracle).filter(|&t| t <= limit).map(|t| (t, v.id)))
            .collect();
        reach.sort_by(|a, b| cmp_scalar(a.0, b.0).then(a.1.cmp(&b.1)));
        reach.truncate(k);
        if !reach.is_empty() {
            set.candidates.insert(r.id, reach.into_iter().map(|(_, v)| v).collect());
        }
    }
    set
}

/// A request bound to a vehicle together with the vehicle's new plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Commitment<S = f64> {
    pub vehicle: VehicleId,
    pub request: RequestId,
    pub plan: RoutePlan<S>,
    pub cost: S,
    pub rebalanced: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchDiagnostics {
    pub window_size: usize,
    pub candidate_pairs: usize,
    pub priced_pairs: usize,
    pub main_assigned: usize,
    pub rebalanced: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchOutcome<S = f64> {
    pub commitments: Vec<Commitment<S>>,
    /// Requests left for the next window, in window order.
    pub waiting: Vec<RequestId>,
    pub diagnostics: BatchDiagnostics,
}

/// Candidate mapping, pricing and assignment over one set of requests and
/// vehicles. Returns the commitments, the candidate pair count and the
/// number of feasible priced pairs.
fn assign_round<S: Scalar>(
    requests: &[PendingRequest<S>],
    fleet: &[FleetVehicle<S>],
    oracle: &impl TravelTime<S>,
    k: usize,
    deadline: impl Fn(&PendingRequest<S>) -> S,
    rebalanced: bool,
) -> (Vec<Commitment<S>>, usize, usize) {
    if requests.is_empty() || fleet.is_empty() {
        return (Vec::new(), 0, 0);
    }
    let candidates = context_mapping(requests, fleet, oracle, k, &deadline);
    let by_id: HashMap<VehicleId, usize> = fleet.iter().enumerate().map(|(i, v)| (v.id, i)).collect();

    let mut priced: BTreeMap<(VehicleId, RequestId), Insertion<S>> = BTreeMap::new();
    for r in requests {
        let ins = r.insert_request(deadline(r));
        for v in candidates.get(r.id) {
            let vehicle = &fleet[by_id[v]];
            if let Some(found) = greedy_insert(&vehicle.plan, &vehicle.anchor, &ins, oracle) {
                priced.insert((*v, r.id), found);
            }
        }
    }
    if priced.is_empty() {
        return (Vec::new(), candidates.pair_count(), 0);
    }

    let priced_pairs = priced.len();
    let mut vehicles: Vec<VehicleId> = priced.keys().map(|k| k.0).collect();
    vehicles.dedup();
    let mut reqs: Vec<RequestId> = priced.keys().map(|k| k.1).collect();
    reqs.sort();
    reqs.dedup();
    let row: HashMap<VehicleId, usize> = vehicles.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let col: HashMap<RequestId, usize> = reqs.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let mut problem = AssignmentProblem::new(vehicles, reqs).expect("ids are unique and non-empty");
    for ((v, r), ins) in &priced {
        problem.allow(row[v], col[r], ins.cost).expect("insertion costs are finite and non-negative");
    }
    let solution = solve(&problem);
    let commitments = solution
        .pairs
        .iter()
        .map(|key| {
            let ins = priced.remove(key).expect("solution uses priced arcs");
            Commitment { vehicle: key.0, request: key.1, plan: ins.plan, cost: ins.cost, rebalanced }
        })
        .collect();
    (commitments, candidates.pair_count(), priced_pairs)
}

/// Retries `unserved` on idle vehicles only, with each pickup deadline
/// relaxed by `config.relax_factor`. Requests whose relaxed deadline is
/// already before `now_s` are skipped.
pub fn rebalance<S: Scalar>(
    now_s: S,
    unserved: &[PendingRequest<S>],
    fleet: &[FleetVehicle<S>],
    oracle: &impl TravelTime<S>,
    config: &DispatchConfig,
) -> Vec<Commitment<S>> {
    let factor = S::of(config.relax_factor);
    let idle: Vec<FleetVehicle<S>> = fleet.iter().filter(|v| v.is_idle()).cloned().collect();
    let open: Vec<PendingRequest<S>> =
        unserved.iter().filter(|r| r.relaxed_deadline(factor) >= now_s).copied().collect();
    assign_round(&open, &idle, oracle, config.candidates_k, |r| r.relaxed_deadline(factor), true).0
}

/// One full dispatch round at `window.end_s`.
///
/// Requests whose pickup deadline has passed skip the main pass and can only
/// be picked up through rebalancing. Every vehicle wins at most one request
/// per round.
pub fn dispatch_batch<S: Scalar>(
    window: &BatchWindow<S>,
    fleet: &[FleetVehicle<S>],
    oracle: &impl TravelTime<S>,
    config: &DispatchConfig,
) -> DispatchOutcome<S> {
    let started = Instant::now();
    let now = window.end_s;
    let live: Vec<PendingRequest<S>> = window.requests.iter().filter(|r| r.pickup_deadline_s >= now).copied().collect();
    let (mut commitments, candidate_pairs, priced_pairs) =
        assign_round(&live, fleet, oracle, config.candidates_k, |r| r.pickup_deadline_s, false);
    let main_assigned = commitments.len();

    if config.rebalance {
        let taken_v: HashSet<VehicleId> = commitments.iter().map(|c| c.vehicle).collect();
        let taken_r: HashSet<RequestId> = commitments.iter().map(|c| c.request).collect();
        let rest: Vec<PendingRequest<S>> =
            window.requests.iter().filter(|r| !taken_r.contains(&r.id)).copied().collect();
        let free: Vec<FleetVehicle<S>> = fleet.iter().filter(|v| !taken_v.contains(&v.id)).cloned().collect();
        commitments.extend(rebalance(now, &rest, &free, oracle, config));
    }

    let taken: HashSet<RequestId> = commitments.iter().map(|c| c.request).collect();
    let waiting = window.requests.iter().map(|r| r.id).filter(|id| !taken.contains(id)).collect();
    let diagnostics = BatchDiagnostics {
        window_size: window.requests.len(),
        candidate_pairs,
        priced_pairs,
        main_assigned,
        rebalanced: commitments.len() - main_assigned,
        elapsed: started.elapsed(),
    };
    DispatchOutcome { commitments, waiting, diagnostics }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darp_routes::Stop;

    /// Line metric, 60 s between neighbouring nodes.
    struct Line;

    impl TravelTime<f64> for Line {
        fn travel_time(&self, from: NodeIdx, to: NodeIdx) -> Option<f64> {
            Some((from.0 as f64 - to.0 as f64).abs() * 60.0)
        }
    }

    fn req(id: u64, origin: u32, destination: u32, submission: f64) -> PendingRequest {
        PendingRequest {
            id: RequestId(id),
            origin: NodeIdx(origin),
            destination: NodeIdx(destination),
            submission_s: submission,
            pickup_deadline_s: submission + 420.0,
            dropoff_deadline_s: None,
        }
    }

    fn idle(id: u32, node: u32, now: f64) -> FleetVehicle {
        FleetVehicle {
            id: VehicleId(id),
            anchor: VehicleAnchor { node: NodeIdx(node), depart_s: now, capacity: 4 },
            plan: RoutePlan::empty(0),
        }
    }

    #[test]
    fn window_is_half_open_and_merges_pool() {
        let new = [req(3, 0, 1, 10.0), req(4, 0, 1, 19.5), req(5, 0, 1, 20.0), req(6, 0, 1, 12.0)];
        let waiting = [req(1, 0, 1, 0.0), req(2, 0, 1, 5.0)];
        let w = collect_batch(20.0, 10.0, &new, &waiting);
        let ids: Vec<u64> = w.requests.iter().map(|r| r.id.0).collect();
        assert_eq!(ids, vec![1, 2, 3, 6, 4]);
        assert_eq!((w.start_s, w.end_s), (10.0, 20.0));

        let empty = collect_batch::<f64>(20.0, 10.0, &[], &[]);
        assert!(empty.requests.is_empty());
        let out = dispatch_batch(&empty, &[idle(0, 0, 20.0)], &Line, &DispatchConfig::default());
        assert!(out.commitments.is_empty() && out.waiting.is_empty());
    }

    #[test]
    fn full_and_distant_vehicles_are_filtered() {
        let r = req(1, 10, 12, 0.0);
        // 10 minutes away against a 7 minute budget
        let far = idle(0, 0, 0.0);
        // four onboard, all drop-offs after any point where it could pick up
        let mut stops = Vec::new();
        for k in 0..4 {
            stops.push(Stop::dropoff(RequestId(100 + k), NodeIdx(20), None));
        }
        let full = FleetVehicle {
            id: VehicleId(1),
            anchor: VehicleAnchor { node: NodeIdx(10), depart_s: 0.0, capacity: 4 },
            plan: RoutePlan::new(4, stops).unwrap(),
        };
        let near = idle(2, 9, 0.0);
        let set = context_mapping(&[r], &[far, full, near], &Line, 30, |r| r.pickup_deadline_s);
        assert_eq!(set.get(RequestId(1)), &[VehicleId(2)]);
    }

    #[test]
    fn candidate_cap_keeps_nearest() {
        let r = req(1, 50, 51, 0.0);
        let fleet: Vec<FleetVehicle> = (0..100).map(|i| idle(i, 45 + (i * 7 % 11), 0.0)).collect();
        let set = context_mapping(&[r], &fleet, &Line, 30, |r| r.pickup_deadline_s);
        let got = set.get(RequestId(1)).to_vec();
        let mut oracle: Vec<(u32, VehicleId)> =
            fleet.iter().map(|v| ((v.anchor.node.0 as i64 - 50).unsigned_abs() as u32, v.id)).collect();
        oracle.sort();
        let want: Vec<VehicleId> = oracle.into_iter().take(30).map(|(_, v)| v).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn forced_match_and_cardinality_bound() {
        let w = collect_batch(10.0, 10.0, &[req(1, 2, 4, 1.0)], &[]);
        let out = dispatch_batch(&w, &[idle(0, 0, 10.0)], &Line, &DispatchConfig::default());
        assert_eq!(out.commitments.len(), 1);
        let c = &out.commitments[0];
        assert_eq!((c.vehicle, c.request, c.cost), (VehicleId(0), RequestId(1), 240.0));
        assert_eq!(c.plan.stops()[0].planned_arrival, 130.0);

        let w = collect_batch(10.0, 10.0, &[req(1, 2, 4, 1.0), req(2, 3, 4, 2.0)], &[]);
        let out = dispatch_batch(&w, &[idle(0, 0, 10.0)], &Line, &DispatchConfig::default());
        assert_eq!(out.commitments.len(), 1);
        assert_eq!(out.waiting.len(), 1);
    }

    #[test]
    fn rebalance_relaxes_deadline_for_idle_vehicles_only() {
        // idle vehicle 9 minutes away, budget 7 minutes
        let r = req(1, 9, 10, 0.0);
        let far_idle = idle(0, 0, 0.0);
        let w = collect_batch(0.0, 10.0, &[], &[r]);
        let no_rebalance = DispatchConfig { rebalance: false, ..DispatchConfig::default() };
        assert!(dispatch_batch(&w, &[far_idle.clone()], &Line, &no_rebalance).commitments.is_empty());
        let out = dispatch_batch(&w, &[far_idle.clone()], &Line, &DispatchConfig::default());
        assert_eq!(out.commitments.len(), 1);
        assert!(out.commitments[0].rebalanced);
        assert_eq!(out.diagnostics.rebalanced, 1);

        // a busy vehicle right next to the pickup is not eligible
        let busy = FleetVehicle {
            id: VehicleId(1),
            anchor: VehicleAnchor { node: NodeIdx(9), depart_s: 0.0, capacity: 4 },
            plan: RoutePlan::new(
                0,
                vec![Stop::pickup(RequestId(7), NodeIdx(30), None), Stop::dropoff(RequestId(7), NodeIdx(31), None)],
            )
            .unwrap(),
        };
        let got = rebalance(0.0, &[r], &[busy.clone(), far_idle], &Line, &DispatchConfig::default());
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].vehicle, VehicleId(0));
        assert!(rebalance(0.0, &[r], &[busy], &Line, &DispatchConfig::default()).is_empty());
    }

    #[test]
    fn expired_requests_skip_main_pass_and_expire_for_good() {
        let r = req(1, 1, 2, 0.0);
        let v = idle(0, 0, 500.0);
        let w = collect_batch(500.0, 10.0, &[], &[r]);
        let out = dispatch_batch(&w, &[v.clone()], &Line, &DispatchConfig::default());
        assert_eq!(out.diagnostics.main_assigned, 0);
        assert_eq!(out.diagnostics.rebalanced, 1);

        let w = collect_batch(900.0, 10.0, &[], &[r]);
        let v = idle(0, 0, 900.0);
        let out = dispatch_batch(&w, &[v], &Line, &DispatchConfig::default());
        assert!(out.commitments.is_empty());
        assert_eq!(out.waiting, vec![RequestId(1)]);
    }

    #[test]
    fn no_idle_vehicles_means_no_rebalance() {
        let busy = FleetVehicle {
            id: VehicleId(0),
            anchor: VehicleAnchor { node: NodeIdx(0), depart_s: 0.0, capacity: 1 },
            plan: RoutePlan::new(1, vec![Stop::dropoff(RequestId(9), NodeIdx(40), None)]).unwrap(),
        };
        assert!(rebalance(0.0, &[req(1, 1, 2, 0.0)], &[busy], &Line, &DispatchConfig::default()).is_empty());
    }
}
