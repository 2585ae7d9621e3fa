//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::Rng;
use rideshare_core::darp_routes::{InsertRequest, RoutePlan, Stop, StopKind, VehicleAnchor};
use rideshare_core::ids::{RequestId, VehicleId};
use rideshare_core::road_network::{EdgeRecord, GraphFile, NodeIdx, NodeRecord, TravelTime};

/// Dense travel-time matrix; `None` is unreachable, the diagonal is zero.
pub struct Matrix(pub Vec<Vec<Option<f64>>>);

impl TravelTime<f64> for Matrix {
    fn travel_time(&self, from: NodeIdx, to: NodeIdx) -> Option<f64> {
        if from == to {
            Some(0.0)
        } else {
            self.0[from.0 as usize][to.0 as usize]
        }
    }
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BruteAssignment {
    pub pairs: Vec<(VehicleId, RequestId)>,
    pub total_cost: f64,
}

/// Enumerates every injective partial map vehicles -> requests. Best is the
/// largest cardinality, then the smallest cost, then the smallest pair list
/// sorted by vehicle id.
pub fn brute_force_assignment(
    vehicles: &[VehicleId],
    requests: &[RequestId],
    costs: &[Vec<Option<f64>>],
) -> BruteAssignment {
    fn rec(
        row: usize,
        vehicles: &[VehicleId],
        requests: &[RequestId],
        costs: &[Vec<Option<f64>>],
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        best: &mut Option<(usize, f64, Vec<(VehicleId, RequestId)>)>,
    ) {
        if row == vehicles.len() {
            let mut pairs: Vec<(VehicleId, RequestId)> =
                current.iter().map(|&(r, c)| (vehicles[r], requests[c])).collect();
            pairs.sort();
            let mut ordered: Vec<(usize, usize)> = current.clone();
            ordered.sort_by_key(|&(r, _)| vehicles[r]);
            let cost: f64 = ordered.iter().map(|&(r, c)| costs[r][c].unwrap()).sum();
            let k = pairs.len();
            let better = match best {
                None => true,
                Some((bk, bc, bp)) => k > *bk || (k == *bk && (cost < *bc || (cost == *bc && pairs < *bp))),
            };
            if better {
                *best = Some((k, cost, pairs));
            }
            return;
        }
        rec(row + 1, vehicles, requests, costs, used, current, best);
        for c in 0..requests.len() {
            if !used[c] && costs[row][c].is_some() {
                used[c] = true;
                current.push((row, c));
                rec(row + 1, vehicles, requests, costs, used, current, best);
                current.pop();
                used[c] = false;
            }
        }
    }
    let mut best = None;
    rec(0, vehicles, requests, costs, &mut vec![false; requests.len()], &mut Vec::new(), &mut best);
    let (_, total_cost, pairs) = best.unwrap();
    BruteAssignment { pairs, total_cost }
}

/// Random integer-valued costs in `[0, 50]` with the given forbidden share.
pub fn random_costs(rng: &mut impl Rng, rows: usize, cols: usize, forbidden: f64) -> Vec<Vec<Option<f64>>> {
    (0..rows)
        .map(|_| {
            (0..cols).map(|_| if rng.gen_bool(forbidden) { None } else { Some(rng.gen_range(0..=50) as f64) }).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Insertion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BruteInsertion {
    pub cost: f64,
    pub pickup_index: usize,
    pub dropoff_index: usize,
    pub arrivals: Vec<f64>,
}

fn arrivals_from_scratch(nodes: &[usize], start: usize, depart: f64, oracle: &Matrix) -> Option<Vec<f64>> {
    let mut t = depart;
    let mut at = start;
    let mut out = Vec::with_capacity(nodes.len());
    for &n in nodes {
        t += oracle.travel_time(NodeIdx(at as u32), NodeIdx(n as u32))?;
        out.push(t);
        at = n;
    }
    Some(out)
}

/// Tries every `(i, j)` with full re-validation of the resulting plan.
pub fn brute_force_insertion(
    plan: &RoutePlan<f64>,
    vehicle: &VehicleAnchor<f64>,
    request: &InsertRequest<f64>,
    oracle: &Matrix,
) -> Option<BruteInsertion> {
    let stops = plan.stops();
    let start = vehicle.node.0 as usize;
    let base_nodes: Vec<usize> = stops.iter().map(|s| s.node.0 as usize).collect();
    let base = arrivals_from_scratch(&base_nodes, start, vehicle.depart_s, oracle)?;
    let old_completion = base.last().copied().unwrap_or(vehicle.depart_s);
    let n = stops.len();
    let mut best: Option<BruteInsertion> = None;
    for i in 0..=n {
        for j in i..=n {
            // (index into original stops or None for the new request, kind)
            let mut seq: Vec<(Option<usize>, StopKind, usize, Option<f64>)> = Vec::new();
            for (k, s) in stops.iter().enumerate() {
                if k == i {
                    seq.push((None, StopKind::Pickup, request.pickup.0 as usize, Some(request.pickup_deadline)));
                }
                if k == j {
                    seq.push((None, StopKind::Dropoff, request.dropoff.0 as usize, request.dropoff_deadline));
                }
                seq.push((Some(k), s.kind, s.node.0 as usize, s.deadline));
            }
            if i == n {
                seq.push((None, StopKind::Pickup, request.pickup.0 as usize, Some(request.pickup_deadline)));
            }
            if j == n {
                seq.push((None, StopKind::Dropoff, request.dropoff.0 as usize, request.dropoff_deadline));
            }
            let mut load = plan.initial_load() as i64;
            let mut ok = load <= vehicle.capacity as i64;
            for s in &seq {
                load += if s.1 == StopKind::Pickup { 1 } else { -1 };
                ok &= load >= 0 && load <= vehicle.capacity as i64;
            }
            if !ok {
                continue;
            }
            let nodes: Vec<usize> = seq.iter().map(|s| s.2).collect();
            let Some(arr) = arrivals_from_scratch(&nodes, start, vehicle.depart_s, oracle) else { continue };
            let on_time = seq.iter().zip(&arr).all(|(s, &t)| match (s.0, s.3) {
                (_, None) => true,
                (None, Some(d)) => t <= d,
                (Some(k), Some(d)) => t <= d || t <= base[k],
            });
            if !on_time {
                continue;
            }
            let cost = (arr.last().copied().unwrap() - old_completion).max(0.0);
            if best.as_ref().map_or(true, |b| cost < b.cost) {
                best = Some(BruteInsertion { cost, pickup_index: i, dropoff_index: j, arrivals: arr });
            }
        }
    }
    best
}

/// A random valid plan with at most `max_stops` stops over nodes `0..nodes`.
pub fn random_plan(
    rng: &mut impl Rng,
    nodes: usize,
    capacity: u32,
    max_stops: usize,
) -> (RoutePlan<f64>, Vec<RequestId>) {
    loop {
        let onboard = rng.gen_range(0..=capacity.min(max_stops as u32)) as usize;
        let pending = rng.gen_range(0..=(max_stops - onboard) / 2);
        let mut stops: Vec<Stop<f64>> = Vec::new();
        let deadline = |rng: &mut dyn rand::RngCore| {
            if rng.gen_bool(0.5) {
                Some(rng.gen_range(0.0..600.0f64).round())
            } else {
                None
            }
        };
        // onboard passengers: drop-offs only
        let mut open: Vec<(RequestId, bool)> = (0..onboard).map(|k| (RequestId(k as u64), true)).collect();
        let mut next = onboard as u64;
        let mut to_open = pending;
        while !open.is_empty() || to_open > 0 {
            let pick_new = to_open > 0 && (open.is_empty() || rng.gen_bool(0.5));
            if pick_new {
                let id = RequestId(next);
                next += 1;
                to_open -= 1;
                stops.push(Stop::pickup(id, NodeIdx(rng.gen_range(0..nodes) as u32), deadline(rng)));
                open.push((id, false));
            } else {
                let k = rng.gen_range(0..open.len());
                let (id, _) = open.swap_remove(k);
                let dl = if rng.gen_bool(0.3) { deadline(rng) } else { None };
                stops.push(Stop::dropoff(id, NodeIdx(rng.gen_range(0..nodes) as u32), dl));
            }
        }
        let plan = RoutePlan::new(onboard as u32, stops).unwrap();
        if plan.max_load() <= capacity {
            let onboard_ids = (0..onboard as u64).map(RequestId).collect();
            return (plan, onboard_ids);
        }
    }
}

/// Random travel times in `[1, 120]` seconds with a small share of
/// unreachable pairs.
pub fn random_matrix(rng: &mut impl Rng, nodes: usize, unreachable: f64) -> Matrix {
    Matrix(
        (0..nodes)
            .map(|a| {
                (0..nodes)
                    .map(|b| {
                        if a == b {
                            Some(0.0)
                        } else if rng.gen_bool(unreachable) {
                            None
                        } else {
                            Some(rng.gen_range(1.0..120.0f64))
                        }
                    })
                    .collect()
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

/// All-pairs shortest times; `speeds[e] == 0` removes edge `e`.
pub fn floyd_warshall(file: &GraphFile, speeds: &[f64]) -> Vec<Vec<f64>> {
    let n = file.nodes.len();
    let index = |id: &str| file.nodes.iter().position(|n| n.id == id).unwrap();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for (e, rec) in file.edges.iter().enumerate() {
        if speeds[e] > 0.0 {
            let (a, b) = (index(&rec.from), index(&rec.to));
            d[a][b] = d[a][b].min(rec.length_m / speeds[e]);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Random strongly connected graph: a bidirectional spanning ring plus
/// random extra one-way edges.
pub fn random_graph_file(rng: &mut impl Rng, nodes: usize, extra_edges: usize) -> GraphFile {
    let mut file = GraphFile::default();
    for i in 0..nodes {
        file.nodes.push(NodeRecord {
            id: format!("n{i}"),
            lat: 51.4 + rng.gen_range(0.0..0.1),
            lon: 5.4 + rng.gen_range(0.0..0.3),
        });
    }
    let push = |file: &mut GraphFile, a: usize, b: usize, rng: &mut dyn rand::RngCore| {
        let id = format!("e{}", file.edges.len());
        file.edges.push(EdgeRecord {
            id,
            from: format!("n{a}"),
            to: format!("n{b}"),
            length_m: rng.gen_range(50.0..2000.0),
            speed_mps: rng.gen_range(5.0..30.0),
        });
    };
    for i in 0..nodes {
        let j = (i + 1) % nodes;
        if nodes > 1 {
            push(&mut file, i, j, rng);
            push(&mut file, j, i, rng);
        }
    }
    for _ in 0..extra_edges {
        let (a, b) = (rng.gen_range(0..nodes), rng.gen_range(0..nodes));
        if a != b {
            push(&mut file, a, b, rng);
        }
    }
    file
}
