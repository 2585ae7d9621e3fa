//! Vehicle route plans and greedy pickup/drop-off insertion.
//!
//! A [`RoutePlan`] is the ordered list of stops a vehicle still has to visit,
//! starting from its anchor (the node it will next be free to leave from and
//! the time it gets there). Stops are instantaneous.
//!
//! [`greedy_insert`] prices adding one request to one vehicle: it tries every
//! pickup insertion point `i` and drop-off insertion point `j >= i` in the
//! current sequence and keeps the cheapest feasible pair. Costs are the
//! increase in plan completion time, recomputed from scratch on the candidate
//! sequence so that they agree bit for bit with an exhaustive re-evaluation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::RequestId;
use crate::road_network::{NodeIdx, TravelTime};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stop<S = f64> {
    pub kind: StopKind,
    pub request: RequestId,
    pub node: NodeIdx,
    /// Latest acceptable arrival, if any.
    pub deadline: Option<S>,
    pub planned_arrival: S,
}

impl<S: Scalar> Stop<S> {
    pub fn pickup(request: RequestId, node: NodeIdx, deadline: Option<S>) -> Self {
        Self { kind: StopKind::Pickup, request, node, deadline, planned_arrival: S::zero() }
    }

    pub fn dropoff(request: RequestId, node: NodeIdx, deadline: Option<S>) -> Self {
        Self { kind: StopKind::Dropoff, request, node, deadline, planned_arrival: S::zero() }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("load {load} after stop {index} exceeds capacity {capacity}")]
    OverCapacity { index: usize, load: u32, capacity: u32 },
    #[error("load drops below zero at stop {index}")]
    NegativeLoad { index: usize },
    #[error("{request}: {reason}")]
    Structure { request: RequestId, reason: &'static str },
    #[error("planned arrivals decrease at stop {index}")]
    NonMonotone { index: usize },
    #[error("stop {index} ({request}) arrives at {arrival} after its deadline {deadline}")]
    Late { index: usize, request: RequestId, arrival: f64, deadline: f64 },
    #[error("leg into stop {index} is unreachable")]
    Unreachable { index: usize },
}

/// Where and when a vehicle becomes free to follow a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleAnchor<S = f64> {
    pub node: NodeIdx,
    pub depart_s: S,
    pub capacity: u32,
}

/// Ordered stops with the passenger count after each stop.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePlan<S = f64> {
    stops: Vec<Stop<S>>,
    initial_load: u32,
    load_after: Vec<u32>,
}

impl<S: Scalar> RoutePlan<S> {
    pub fn empty(initial_load: u32) -> Self {
        Self { stops: Vec::new(), initial_load, load_after: Vec::new() }
    }

    /// Builds a plan; fails if the load would go negative.
    pub fn new(initial_load: u32, stops: Vec<Stop<S>>) -> Result<Self, PlanError> {
        let mut load = initial_load as i64;
        let mut load_after = Vec::with_capacity(stops.len());
        for (index, s) in stops.iter().enumerate() {
            load += match s.kind {
                StopKind::Pickup => 1,
                StopKind::Dropoff => -1,
            };
            if load < 0 {
                return Err(PlanError::NegativeLoad { index });
            }
            load_after.push(load as u32);
        }
        Ok(Self { stops, initial_load, load_after })
    }

    pub fn stops(&self) -> &[Stop<S>] {
        &self.stops
    }

    pub fn is_empty(&self) -> bool {
        self.stops.is_empty()
    }

    pub fn len(&self) -> usize {
        self.stops.len()
    }

    pub fn initial_load(&self) -> u32 {
        self.initial_load
    }

    pub fn load_after(&self) -> &[u32] {
        &self.load_after
    }

    /// Load while travelling towards stop `index`.
    pub fn load_before(&self, index: usize) -> u32 {
        if index == 0 {
            self.initial_load
        } else {
            self.load_after[index - 1]
        }
    }

    pub fn max_load(&self) -> u32 {
        self.load_after.iter().copied().chain(std::iter::once(self.initial_load)).max().unwrap_or(0)
    }

    pub fn contains(&self, request: RequestId) -> bool {
        self.stops.iter().any(|s| s.request == request)
    }

    /// Arrival at the last stop, or `depart_s` for an empty plan.
    pub fn completion_time(&self, depart_s: S) -> S {
        self.stops.last().map_or(depart_s, |s| s.planned_arrival)
    }

    /// Drops the first stop, typically after the vehicle has served it.
    pub fn pop_front(&mut self) -> Option<Stop<S>> {
        if self.stops.is_empty() {
            return None;
        }
        self.initial_load = self.load_after.remove(0);
        Some(self.stops.remove(0))
    }

    /// The plan without any stop of `request`, loads recomputed.
    pub fn without_request(&self, request: RequestId) -> Self {
        let onboard = self.stops.iter().any(|s| s.request == request && s.kind == StopKind::Dropoff)
            && !self.stops.iter().any(|s| s.request == request && s.kind == StopKind::Pickup);
        let initial_load = self.initial_load - u32::from(onboard);
        let stops = self.stops.iter().filter(|s| s.request != request).cloned().collect();
        Self::new(initial_load, stops).expect("removing a request keeps loads non-negative")
    }

    /// Checks capacity and pickup/drop-off pairing. `onboard` lists the
    /// passengers already in the vehicle at plan start.
    pub fn validate_structure(&self, capacity: u32, onboard: &[RequestId]) -> Result<(), PlanError> {
        if self.initial_load as usize != onboard.len() {
            return Err(PlanError::Structure {
                request: onboard.first().copied().unwrap_or(RequestId(0)),
                reason: "initial load differs from onboard count",
            });
        }
        if self.initial_load > capacity {
            return Err(PlanError::OverCapacity { index: 0, load: self.initial_load, capacity });
        }
        for (index, &load) in self.load_after.iter().enumerate() {
            if load > capacity {
                return Err(PlanError::OverCapacity { index, load, capacity });
            }
        }
        let mut seen: HashMap<RequestId, (usize, usize)> = HashMap::new();
        for s in &self.stops {
            let e = seen.entry(s.request).or_default();
            match s.kind {
                StopKind::Pickup => {
                    if e.1 > 0 {
                        return Err(PlanError::Structure { request: s.request, reason: "pickup after drop-off" });
                    }
                    e.0 += 1;
                }
                StopKind::Dropoff => e.1 += 1,
            }
        }
        for (&request, &(pickups, dropoffs)) in &seen {
            let is_onboard = onboard.contains(&request);
            let ok = dropoffs == 1 && pickups == usize::from(!is_onboard);
            if !ok {
                return Err(PlanError::Structure {
                    request,
                    reason: "needs exactly one drop-off and one pickup unless onboard",
                });
            }
        }
        if let Some(&missing) = onboard.iter().find(|r| !seen.contains_key(r)) {
            return Err(PlanError::Structure { request: missing, reason: "onboard passenger has no drop-off" });
        }
        Ok(())
    }

    /// Checks that planned arrivals are non-decreasing and meet deadlines.
    pub fn validate_schedule(&self) -> Result<(), PlanError> {
        for (index, w) in self.stops.windows(2).enumerate() {
            if w[1].planned_arrival < w[0].planned_arrival {
                return Err(PlanError::NonMonotone { index: index + 1 });
            }
        }
        for (index, s) in self.stops.iter().enumerate() {
            if let Some(deadline) = s.deadline {
                if s.planned_arrival > deadline {
                    return Err(PlanError::Late {
                        index,
                        request: s.request,
                        arrival: s.planned_arrival.as_f64(),
                        deadline: deadline.as_f64(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Recomputes planned arrivals: each stop is reached one shortest travel time
/// after the previous one, the first leg starting at the anchor.
pub fn schedule_plan<S: Scalar>(
    plan: &RoutePlan<S>,
    start: NodeIdx,
    depart_s: S,
    oracle: &impl TravelTime<S>,
) -> Result<RoutePlan<S>, PlanError> {
    let mut out = plan.clone();
    let mut at = start;
    let mut t = depart_s;
    for (index, stop) in out.stops.iter_mut().enumerate() {
        t = t + oracle.travel_time(at, stop.node).ok_or(PlanError::Unreachable { index })?;
        stop.planned_arrival = t;
        at = stop.node;
    }
    Ok(out)
}

/// A request to be priced for insertion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsertRequest<S = f64> {
    pub id: RequestId,
    pub pickup: NodeIdx,
    pub dropoff: NodeIdx,
    pub pickup_deadline: S,
    pub dropoff_deadline: Option<S>,
}

/// The cheapest feasible way of adding a request to a plan.
///
/// `pickup_index` and `dropoff_index` are insertion points into the original
/// stop sequence (`pickup_index <= dropoff_index`); in the resulting plan the
/// pickup sits at `pickup_index` and the drop-off at `dropoff_index + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion<S = f64> {
    pub cost: S,
    pub pickup_index: usize,
    pub dropoff_index: usize,
    pub plan: RoutePlan<S>,
}

/// Whether a stop's new arrival is acceptable: on time, or for a stop that
/// was already late in the base plan, not any later than before.
#[inline]
pub(crate) fn arrival_ok<S: Scalar>(arrival: S, deadline: Option<S>, previous: Option<S>) -> bool {
    match deadline {
        None => true,
        Some(d) => arrival <= d || previous.is_some_and(|p| arrival <= p),
    }
}

/// Cheapest feasible insertion of `request` into `plan`, or `None`.
///
/// A candidate `(i, j)` is feasible when the load stays within capacity, the
/// new pickup (and drop-off, if it has a deadline) is on time, and every
/// committed stop with a deadline is either on time or not delayed. Ties on
/// cost go to the lexicographically smallest `(i, j)`.
pub fn greedy_insert<S: Scalar>(
    plan: &RoutePlan<S>,
    vehicle: &VehicleAnchor<S>,
    request: &InsertRequest<S>,
    oracle: &impl TravelTime<S>,
) -> Option<Insertion<S>> {
    if plan.contains(request.id) {
        return None;
    }
    let base = schedule_plan(plan, vehicle.node, vehicle.depart_s, oracle).ok()?;
    let old_completion = base.completion_time(vehicle.depart_s);
    let n = base.stops.len();
    let stops = &base.stops;
    let node_before = |i: usize| if i == 0 { vehicle.node } else { stops[i - 1].node };
    let time_before = |i: usize| if i == 0 { vehicle.depart_s } else { stops[i - 1].planned_arrival };

    let mut best: Option<(S, usize, usize)> = None;
    for i in 0..=n {
        if base.load_before(i) + 1 > vehicle.capacity {
            continue;
        }
        let Some(leg) = oracle.travel_time(node_before(i), request.pickup) else { continue };
        let t_pickup = time_before(i) + leg;
        if !arrival_ok(t_pickup, Some(request.pickup_deadline), None) {
            continue;
        }
        // Arrival and node of the last visited stop on the chain P, s_i, ..., s_{j-1}.
        let mut chain_t = t_pickup;
        let mut chain_node = request.pickup;
        for j in i..=n {
            if j > i {
                let k = j - 1;
                if base.load_after[k] + 1 > vehicle.capacity {
                    break;
                }
                let Some(leg) = oracle.travel_time(chain_node, stops[k].node) else { break };
                chain_t = chain_t + leg;
                chain_node = stops[k].node;
                if !arrival_ok(chain_t, stops[k].deadline, Some(stops[k].planned_arrival)) {
                    break;
                }
            }
            let Some(leg) = oracle.travel_time(chain_node, request.dropoff) else { continue };
            let t_dropoff = chain_t + leg;
            if !arrival_ok(t_dropoff, request.dropoff_deadline, None) {
                continue;
            }
            let mut t = t_dropoff;
            let mut at = request.dropoff;
            let mut feasible = true;
            for s in &stops[j..] {
                match oracle.travel_time(at, s.node) {
                    Some(leg) => t = t + leg,
                    None => {
                        feasible = false;
                        break;
                    }
                }
                at = s.node;
                if !arrival_ok(t, s.deadline, Some(s.planned_arrival)) {
                    feasible = false;
                    break;
                }
            }
            if !feasible {
                continue;
            }
            let cost = (t - old_completion).max(S::zero());
            if best.is_none_or(|(c, _, _)| cost < c) {
                best = Some((cost, i, j));
            }
        }
    }

    let (cost, i, j) = best?;
    let mut new_stops = Vec::with_capacity(n + 2);
    new_stops.extend_from_slice(&stops[..i]);
    new_stops.push(Stop::pickup(request.id, request.pickup, Some(request.pickup_deadline)));
    new_stops.extend_from_slice(&stops[i..j]);
    new_stops.push(Stop::dropoff(request.id, request.dropoff, request.dropoff_deadline));
    new_stops.extend_from_slice(&stops[j..]);
    let unscheduled = RoutePlan::new(plan.initial_load, new_stops).expect("insertion keeps loads non-negative");
    let plan =
        schedule_plan(&unscheduled, vehicle.node, vehicle.depart_s, oracle).expect("feasible legs are reachable");
    Some(Insertion { cost, pickup_index: i, dropoff_index: j, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Travel times from a dense matrix; `None` entries are unreachable.
    struct Matrix(Vec<Vec<Option<f64>>>);

    impl TravelTime<f64> for Matrix {
        fn travel_time(&self, from: NodeIdx, to: NodeIdx) -> Option<f64> {
            if from == to {
                return Some(0.0);
            }
            self.0[from.index()][to.index()]
        }
    }

    fn line_oracle(n: usize, step: f64) -> Matrix {
        Matrix((0..n).map(|a| (0..n).map(|b| Some((a as f64 - b as f64).abs() * step)).collect()).collect())
    }

    /// Line metric on nodes `0..n` plus one extra node at distance 25 from all.
    fn line_with_offshoot(n: usize) -> Matrix {
        let mut m = line_oracle(n, 10.0).0;
        for row in m.iter_mut() {
            row.push(Some(25.0));
        }
        m.push(vec![Some(25.0); n + 1]);
        Matrix(m)
    }

    #[test]
    fn schedule_empty_and_prefix_sums() {
        let oracle = Matrix(vec![
            vec![Some(0.0), Some(50.0), Some(80.0)],
            vec![Some(50.0), Some(0.0), Some(30.0)],
            vec![Some(80.0), Some(30.0), Some(0.0)],
        ]);
        let empty = RoutePlan::<f64>::empty(0);
        let s = schedule_plan(&empty, NodeIdx(0), 0.0, &oracle).unwrap();
        assert_eq!(s, empty);
        assert_eq!(s.completion_time(0.0), 0.0);

        let plan = RoutePlan::new(
            0,
            vec![Stop::pickup(RequestId(1), NodeIdx(1), None), Stop::dropoff(RequestId(1), NodeIdx(2), None)],
        )
        .unwrap();
        let s = schedule_plan(&plan, NodeIdx(0), 0.0, &oracle).unwrap();
        let arrivals: Vec<f64> = s.stops().iter().map(|x| x.planned_arrival).collect();
        assert_eq!(arrivals, vec![50.0, 80.0]);
        assert_eq!(schedule_plan(&s, NodeIdx(0), 0.0, &oracle).unwrap(), s);
    }

    #[test]
    fn unreachable_leg_fails_schedule() {
        let oracle = Matrix(vec![vec![Some(0.0), None], vec![Some(1.0), Some(0.0)]]);
        let plan = RoutePlan::new(0, vec![Stop::pickup(RequestId(1), NodeIdx(1), None)]).unwrap();
        assert_eq!(schedule_plan(&plan, NodeIdx(0), 0.0, &oracle), Err(PlanError::Unreachable { index: 0 }));
    }

    #[test]
    fn empty_plan_single_insertion() {
        let oracle = line_oracle(5, 10.0);
        let vehicle = VehicleAnchor { node: NodeIdx(0), depart_s: 100.0, capacity: 4 };
        let req = InsertRequest {
            id: RequestId(7),
            pickup: NodeIdx(2),
            dropoff: NodeIdx(4),
            pickup_deadline: 500.0,
            dropoff_deadline: None,
        };
        let ins = greedy_insert(&RoutePlan::empty(0), &vehicle, &req, &oracle).unwrap();
        assert_eq!(ins.cost, 20.0 + 20.0);
        assert_eq!((ins.pickup_index, ins.dropoff_index), (0, 0));
        assert_eq!(ins.plan.stops()[0].kind, StopKind::Pickup);
        assert_eq!(ins.plan.stops()[1].planned_arrival, 140.0);
    }

    #[test]
    fn capacity_gate_forces_pickup_after_dropoff() {
        let oracle = line_oracle(6, 10.0);
        let vehicle = VehicleAnchor { node: NodeIdx(0), depart_s: 0.0, capacity: 4 };
        // four onboard, one of them leaves at node 3; the others leave at 5
        let mut stops = vec![Stop::dropoff(RequestId(1), NodeIdx(3), None)];
        for r in 2..=4 {
            stops.push(Stop::dropoff(RequestId(r), NodeIdx(5), None));
        }
        let plan = RoutePlan::new(4, stops).unwrap();
        let req = InsertRequest {
            id: RequestId(9),
            pickup: NodeIdx(1),
            dropoff: NodeIdx(2),
            pickup_deadline: 1e9,
            dropoff_deadline: None,
        };
        let ins = greedy_insert(&plan, &vehicle, &req, &oracle).unwrap();
        assert!(ins.pickup_index >= 1);
        assert!(ins.plan.max_load() <= 4);
        ins.plan.validate_structure(4, &[RequestId(1), RequestId(2), RequestId(3), RequestId(4)]).unwrap();
    }

    #[test]
    fn deadlines_respected_and_infeasible_marked() {
        let oracle = line_with_offshoot(5);
        let vehicle = VehicleAnchor { node: NodeIdx(0), depart_s: 0.0, capacity: 4 };
        let req = InsertRequest {
            id: RequestId(1),
            pickup: NodeIdx(4),
            dropoff: NodeIdx(0),
            pickup_deadline: 39.0,
            dropoff_deadline: None,
        };
        assert!(greedy_insert(&RoutePlan::empty(0), &vehicle, &req, &oracle).is_none());

        // committed pickup at node 4 with deadline 40 blocks a detour through node 5 before it
        let plan = RoutePlan::new(
            0,
            vec![Stop::pickup(RequestId(2), NodeIdx(4), Some(40.0)), Stop::dropoff(RequestId(2), NodeIdx(0), None)],
        )
        .unwrap();
        let req = InsertRequest {
            id: RequestId(3),
            pickup: NodeIdx(5),
            dropoff: NodeIdx(5),
            pickup_deadline: 1e9,
            dropoff_deadline: None,
        };
        let ins = greedy_insert(&plan, &vehicle, &req, &oracle).unwrap();
        assert!(ins.pickup_index >= 1, "{ins:?}");
        ins.plan.validate_schedule().unwrap();
    }

    #[test]
    fn late_committed_stop_may_not_slip_further() {
        let oracle = line_with_offshoot(5);
        let vehicle = VehicleAnchor { node: NodeIdx(0), depart_s: 100.0, capacity: 4 };
        // already late: arrives at 140 with deadline 50
        let plan = RoutePlan::new(
            0,
            vec![Stop::pickup(RequestId(2), NodeIdx(4), Some(50.0)), Stop::dropoff(RequestId(2), NodeIdx(0), None)],
        )
        .unwrap();
        let req = InsertRequest {
            id: RequestId(3),
            pickup: NodeIdx(1),
            dropoff: NodeIdx(3),
            pickup_deadline: 1e9,
            dropoff_deadline: None,
        };
        let ins = greedy_insert(&plan, &vehicle, &req, &oracle).unwrap();
        // pickup/dropoff on the way (nodes 1 and 3 lie between 0 and 4) cost nothing
        assert_eq!(ins.cost, 0.0);
        assert_eq!(ins.plan.stops()[2].planned_arrival, 140.0);
        // a request off the way would delay the late pickup
        let off = InsertRequest {
            id: RequestId(4),
            pickup: NodeIdx(5),
            dropoff: NodeIdx(5),
            pickup_deadline: 1e9,
            dropoff_deadline: None,
        };
        let ins = greedy_insert(&plan, &vehicle, &off, &oracle).unwrap();
        assert!(ins.pickup_index >= 1);
    }

    #[test]
    fn insert_then_remove_restores() {
        let oracle = line_oracle(5, 10.0);
        let vehicle = VehicleAnchor { node: NodeIdx(0), depart_s: 0.0, capacity: 2 };
        let plan = schedule_plan(
            &RoutePlan::new(1, vec![Stop::dropoff(RequestId(1), NodeIdx(3), None)]).unwrap(),
            NodeIdx(0),
            0.0,
            &oracle,
        )
        .unwrap();
        let req = InsertRequest {
            id: RequestId(5),
            pickup: NodeIdx(1),
            dropoff: NodeIdx(4),
            pickup_deadline: 1e9,
            dropoff_deadline: None,
        };
        let ins = greedy_insert(&plan, &vehicle, &req, &oracle).unwrap();
        let restored = schedule_plan(&ins.plan.without_request(RequestId(5)), NodeIdx(0), 0.0, &oracle).unwrap();
        assert_eq!(restored, plan);
        // removing an onboard passenger lowers the initial load
        assert_eq!(plan.without_request(RequestId(1)).initial_load(), 0);
    }

    #[test]
    fn already_present_request_is_rejected() {
        let oracle = line_oracle(3, 1.0);
        let vehicle = VehicleAnchor { node: NodeIdx(0), depart_s: 0.0, capacity: 4 };
        let plan = RoutePlan::new(1, vec![Stop::dropoff(RequestId(1), NodeIdx(2), None)]).unwrap();
        let req = InsertRequest {
            id: RequestId(1),
            pickup: NodeIdx(1),
            dropoff: NodeIdx(2),
            pickup_deadline: 1e9,
            dropoff_deadline: None,
        };
        assert!(greedy_insert(&plan, &vehicle, &req, &oracle).is_none());
    }

    #[test]
    fn structure_validation() {
        let plan = RoutePlan::<f64>::new(0, vec![Stop::dropoff(RequestId(1), NodeIdx(0), None)]);
        assert_eq!(plan.unwrap_err(), PlanError::NegativeLoad { index: 0 });
        let plan = RoutePlan::<f64>::new(
            0,
            vec![Stop::pickup(RequestId(1), NodeIdx(0), None), Stop::pickup(RequestId(2), NodeIdx(0), None)],
        )
        .unwrap();
        assert!(matches!(plan.validate_structure(1, &[]), Err(PlanError::OverCapacity { .. })));
        assert!(matches!(plan.validate_structure(4, &[]), Err(PlanError::Structure { .. })));
    }
}
