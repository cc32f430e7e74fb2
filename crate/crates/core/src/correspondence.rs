//! Data association and translation recovery.
//!
//! Once rotations are known, two detections that belong to the same pair of
//! drones cancel when both are rotated into the world frame. Per epoch and per
//! observer the residual of every candidate pairing forms a cost block; a gated
//! Hungarian assignment picks identities, mutual agreement across the two
//! observers confirms them, and the confirmed observations give relative
//! translations that are chained outward from drone 0.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_yaw, compose, YawVector};
use crate::simulator::{EpochRecord, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrespondenceError {
    #[error("drones not reachable from drone 0: {0:?}")]
    DisconnectedGraph(Vec<usize>),
    #[error("no assignments to fuse")]
    EmptyInput,
}

/// One detection, addressed by observer and track within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObsRef {
    pub observer: usize,
    pub track: usize,
}

/// Pairing residuals for one observer at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBlock {
    pub epoch: usize,
    pub observer: usize,
    /// Track ids of the observer's detections, one per row.
    pub rows: Vec<usize>,
    /// Every detection of the epoch, one per column.
    pub columns: Vec<ObsRef>,
    /// Meters; `+∞` where both detections belong to the observer.
    pub cost: DMatrix<f64>,
}

/// World-frame position of a detection relative to the observer's initial
/// position: `R_i (o_ik + R(ψ_ik) p)`.
fn world_offset(record: &EpochRecord, rotations: &YawVector, obs: &Observation) -> Vector3<f64> {
    let i = obs.observer;
    let odo = &record.odometry;
    let heading = compose(rotations.yaws[i], odo.yaws.yaws[i]);
    apply_yaw(rotations.yaws[i], &odo.positions[i]) + apply_yaw(heading, &obs.vector)
}

/// Detection vector rotated into the world frame: `R_i R(ψ_ik) p`.
fn world_vector(record: &EpochRecord, rotations: &YawVector, obs: &Observation) -> Vector3<f64> {
    let i = obs.observer;
    let heading = compose(rotations.yaws[i], record.odometry.yaws.yaws[i]);
    apply_yaw(heading, &obs.vector)
}

fn sorted_observations(record: &EpochRecord) -> Vec<&Observation> {
    let mut all: Vec<&Observation> = record.observations.iter().collect();
    all.sort_by_key(|o| (o.observer, o.track));
    all
}

/// Cost blocks for every (epoch, observer) with at least one detection.
pub fn build_cost_blocks(records: &[EpochRecord], rotations: &YawVector) -> Vec<CostBlock> {
    let mut blocks = Vec::new();
    for record in records {
        let all = sorted_observations(record);
        let world: Vec<Vector3<f64>> = all
            .iter()
            .map(|o| world_vector(record, rotations, o))
            .collect();
        let columns: Vec<ObsRef> = all
            .iter()
            .map(|o| ObsRef {
                observer: o.observer,
                track: o.track,
            })
            .collect();
        for observer in 0..record.n_drones() {
            let row_idx: Vec<usize> = (0..all.len())
                .filter(|&k| all[k].observer == observer)
                .collect();
            if row_idx.is_empty() {
                continue;
            }
            let cost = DMatrix::from_fn(row_idx.len(), all.len(), |r, c| {
                if all[c].observer == observer {
                    f64::INFINITY
                } else {
                    (world[row_idx[r]] + world[c]).norm()
                }
            });
            blocks.push(CostBlock {
                epoch: record.epoch,
                observer,
                rows: row_idx.iter().map(|&k| all[k].track).collect(),
                columns: columns.clone(),
                cost,
            });
        }
    }
    blocks
}

impl CostBlock {
    /// Collapse columns to identities: entry `(r, y)` is the cheapest pairing
    /// of row `r` with any detection made by drone `y`, returned together with
    /// the column that achieved it.
    pub fn identity_costs(&self, n_drones: usize) -> (DMatrix<f64>, Vec<Vec<Option<ObsRef>>>) {
        let mut cost = DMatrix::from_element(self.rows.len(), n_drones, f64::INFINITY);
        let mut arg = vec![vec![None; n_drones]; self.rows.len()];
        for (c, col) in self.columns.iter().enumerate() {
            for r in 0..self.rows.len() {
                let v = self.cost[(r, c)];
                if v < cost[(r, col.observer)] {
                    cost[(r, col.observer)] = v;
                    arg[r][col.observer] = Some(*col);
                }
            }
        }
        (cost, arg)
    }
}

/// Result of a gated assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
    /// Sum of matched cells plus `gate` for every unmatched row.
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment in which every row either takes a
/// column costing at most `gate` or stays unmatched at price `gate`.
pub fn assign(cost: &DMatrix<f64>, gate: f64) -> Assignment {
    let (n, m) = cost.shape();
    if n == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            total_cost: 0.0,
        };
    }
    // real columns, then one dummy per row at the gate price
    let forbidden = gate + 1.0 + gate.abs();
    let width = m + n;
    let price = |r: usize, c: usize| -> f64 {
        if c < m {
            let v = cost[(r, c)];
            if v <= gate {
                v
            } else {
                forbidden
            }
        } else {
            gate
        }
    };
    let cols = hungarian(n, width, price);
    let mut total = 0.0;
    let row_to_col = cols
        .into_iter()
        .enumerate()
        .map(|(r, c)| {
            if c < m && cost[(r, c)] <= gate {
                total += cost[(r, c)];
                Some(c)
            } else {
                total += gate;
                None
            }
        })
        .collect();
    Assignment {
        row_to_col,
        total_cost: total,
    }
}

/// Shortest augmenting path Hungarian algorithm for `n ≤ m`; returns the
/// column assigned to each row.
fn hungarian(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// One row of an identity assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMatch {
    pub track: usize,
    pub identity: Option<usize>,
    pub cost: f64,
    /// The other drone's detection that paired best with this one.
    pub partner: Option<ObsRef>,
}

/// Identity assignment of one observer's detections at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub owner: usize,
    pub epoch: usize,
    pub n_drones: usize,
    pub rows: Vec<RowMatch>,
}

impl AssignmentMatrix {
    /// Binary `O_i × N` view.
    pub fn entries(&self) -> DMatrix<u8> {
        let mut m = DMatrix::zeros(self.rows.len(), self.n_drones);
        for (r, row) in self.rows.iter().enumerate() {
            if let Some(y) = row.identity {
                m[(r, y)] = 1;
            }
        }
        m
    }

    /// Identity assigned to a track, if any.
    pub fn identity_of(&self, track: usize) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.track == track)
            .and_then(|r| r.identity)
    }
}

/// Assign identities to every detection in every epoch.
pub fn assign_epochs(
    records: &[EpochRecord],
    rotations: &YawVector,
    gate: f64,
) -> Vec<AssignmentMatrix> {
    let n = rotations.len();
    build_cost_blocks(records, rotations)
        .into_iter()
        .map(|block| {
            let (cost, arg) = block.identity_costs(n);
            let result = assign(&cost, gate);
            let rows = block
                .rows
                .iter()
                .enumerate()
                .map(|(r, &track)| {
                    let identity = result.row_to_col[r];
                    RowMatch {
                        track,
                        identity,
                        cost: identity.map_or(f64::NAN, |y| cost[(r, y)]),
                        partner: identity.and_then(|y| arg[r][y]),
                    }
                })
                .collect();
            AssignmentMatrix {
                owner: block.observer,
                epoch: block.epoch,
                n_drones: n,
                rows,
            }
        })
        .collect()
}

/// Acceptance gate from the noise level and the SDP fit.
///
/// `gate = max(0.5, 5σ + 2·d_max·θ_err)` with `θ_err = sqrt(objective / N_O) / d_mean`,
/// where `d_max` and `d_mean` are the longest and mean detection ranges.
pub fn default_gate(records: &[EpochRecord], sigma: f64, objective: f64) -> f64 {
    let ranges: Vec<f64> = records
        .iter()
        .flat_map(|r| r.observations.iter().map(|o| o.vector.norm()))
        .collect();
    if ranges.is_empty() || records.is_empty() {
        return 0.5;
    }
    let d_max = ranges.iter().copied().fold(0.0, f64::max);
    let d_mean = ranges.iter().sum::<f64>() / ranges.len() as f64;
    let theta_err = if d_mean > 0.0 {
        (objective.max(0.0) / records.len() as f64).sqrt() / d_mean
    } else {
        0.0
    };
    (5.0 * sigma + 2.0 * d_max * theta_err).max(0.5)
}

/// Drop detections that have no plausible mutual partner: some other drone at
/// the same epoch must report a vector of matching range and opposite height
/// within `tolerance`. The test is rotation-free, so it can run before any
/// rotation is known.
pub fn screen_mutual(records: &[EpochRecord], tolerance: f64) -> Vec<EpochRecord> {
    records
        .iter()
        .map(|record| {
            let keep: Vec<Observation> = record
                .observations
                .iter()
                .filter(|a| {
                    record.observations.iter().any(|b| {
                        b.observer != a.observer
                            && (a.vector.norm() - b.vector.norm()).abs() <= tolerance
                            && (a.vector.z + b.vector.z).abs() <= tolerance
                    })
                })
                .cloned()
                .collect();
            EpochRecord {
                observations: keep,
                ..record.clone()
            }
        })
        .collect()
}

/// Screening tolerance for isotropic noise of standard deviation `sigma`.
pub fn screen_tolerance(sigma: f64) -> f64 {
    5.0 * std::f64::consts::SQRT_2 * sigma + 1e-6
}

/// Keep only detections whose identity was confirmed by both observers.
pub fn confirmed_records(records: &[EpochRecord], graph: &CorrespondenceGraph) -> Vec<EpochRecord> {
    records
        .iter()
        .map(|record| EpochRecord {
            observations: record
                .observations
                .iter()
                .filter(|o| graph.confirmed.contains(&(record.epoch, o.observer, o.track)))
                .cloned()
                .collect(),
            ..record.clone()
        })
        .collect()
}

/// Directed edge `observer → observed` with the relative translation
/// `t_observed − t_observer` in drone 0's initial frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub vector: Vector3<f64>,
    /// Mean matching cost over the supporting epochs.
    pub cost: f64,
    /// Epochs whose match was confirmed by the reverse detection.
    pub support: usize,
    /// Epochs whose match was not confirmed.
    pub rejected: usize,
    /// Largest distance between per-epoch estimates.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CorrespondenceGraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<Edge>,
    /// `(epoch, observer, track)` of every confirmed detection.
    pub confirmed: Vec<(usize, usize, usize)>,
}

/// Translations recovered from a graph; `None` for unreachable drones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub graph: CorrespondenceGraph,
    pub translations: Vec<Option<Vector3<f64>>>,
    /// Largest disagreement between the paths feeding any single drone.
    pub spread: f64,
}

impl Recovery {
    pub fn unreachable(&self) -> Vec<usize> {
        (0..self.translations.len())
            .filter(|&i| self.translations[i].is_none())
            .collect()
    }
}

fn max_pairwise(points: &[Vector3<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for (a, p) in points.iter().enumerate() {
        for q in &points[a + 1..] {
            best = best.max((p - q).norm());
        }
    }
    best
}

fn mean(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Build the correspondence graph and translations, tolerating disconnection.
pub fn recover(
    assignments: &[AssignmentMatrix],
    records: &[EpochRecord],
    rotations: &YawVector,
) -> Recovery {
    let n = rotations.len();
    let lookup: BTreeMap<(usize, usize), &AssignmentMatrix> = assignments
        .iter()
        .map(|a| ((a.epoch, a.owner), a))
        .collect();
    let by_epoch: BTreeMap<usize, &EpochRecord> = records.iter().map(|r| (r.epoch, r)).collect();

    struct Tally {
        vectors: Vec<Vector3<f64>>,
        costs: Vec<f64>,
        rejected: usize,
    }
    let mut tallies: BTreeMap<(usize, usize), Tally> = BTreeMap::new();
    let mut confirmed = Vec::new();
    for a in assignments {
        let Some(record) = by_epoch.get(&a.epoch) else {
            continue;
        };
        for row in &a.rows {
            let (Some(y), Some(partner)) = (row.identity, row.partner) else {
                continue;
            };
            let back = lookup.get(&(a.epoch, y)).and_then(|b| {
                b.rows
                    .iter()
                    .find(|r| r.track == partner.track)
                    .map(|r| (r.identity, r.partner))
            });
            let mutual = back
                == Some((
                    Some(a.owner),
                    Some(ObsRef {
                        observer: a.owner,
                        track: row.track,
                    }),
                ));
            let tally = tallies.entry((a.owner, y)).or_insert(Tally {
                vectors: Vec::new(),
                costs: Vec::new(),
                rejected: 0,
            });
            if !mutual {
                tally.rejected += 1;
                continue;
            }
            let obs = record
                .observations
                .iter()
                .find(|o| o.observer == a.owner && o.track == row.track)
                .expect("assignment refers to an existing detection");
            let t_i_to_obs = world_offset(record, rotations, obs);
            let y_offset = apply_yaw(rotations.yaws[y], &record.odometry.positions[y]);
            tally.vectors.push(t_i_to_obs - y_offset);
            tally.costs.push(row.cost);
            confirmed.push((a.epoch, a.owner, row.track));
        }
    }
    confirmed.sort_unstable();

    let edges: Vec<Edge> = tallies
        .into_iter()
        .filter(|(_, t)| t.vectors.len() > t.rejected)
        .map(|((from, to), t)| Edge {
            from,
            to,
            vector: mean(&t.vectors),
            cost: t.costs.iter().sum::<f64>() / t.costs.len() as f64,
            support: t.vectors.len(),
            rejected: t.rejected,
            spread: max_pairwise(&t.vectors),
        })
        .collect();

    // undirected adjacency: (neighbour, t_neighbour - t_self)
    let mut adjacency: Vec<Vec<(usize, Vector3<f64>)>> = vec![Vec::new(); n];
    for e in &edges {
        adjacency[e.from].push((e.to, e.vector));
        adjacency[e.to].push((e.from, -e.vector));
    }

    let mut translations: Vec<Option<Vector3<f64>>> = vec![None; n];
    let mut spread: f64 = 0.0;
    if n > 0 {
        translations[0] = Some(Vector3::zeros());
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            for &(v, _) in adjacency[u].iter().rev() {
                if translations[v].is_some() {
                    continue;
                }
                // every already-placed neighbour offers an estimate
                let candidates: Vec<Vector3<f64>> = adjacency[v]
                    .iter()
                    .filter_map(|&(w, d)| translations[w].map(|tw| tw - d))
                    .collect();
                spread = spread.max(max_pairwise(&candidates));
                translations[v] = Some(mean(&candidates));
                stack.push(v);
            }
        }
    }

    Recovery {
        graph: CorrespondenceGraph {
            nodes: (0..n).collect(),
            edges,
            confirmed,
        },
        translations,
        spread,
    }
}

/// Translations of every drone in drone 0's initial frame.
pub fn fuse_and_recover(
    assignments: &[AssignmentMatrix],
    records: &[EpochRecord],
    rotations: &YawVector,
) -> Result<(CorrespondenceGraph, Vec<Vector3<f64>>), CorrespondenceError> {
    if assignments.is_empty() {
        return Err(CorrespondenceError::EmptyInput);
    }
    let recovery = recover(assignments, records, rotations);
    let unreachable = recovery.unreachable();
    if !unreachable.is_empty() {
        return Err(CorrespondenceError::DisconnectedGraph(unreachable));
    }
    let translations = recovery.translations.into_iter().flatten().collect();
    Ok((recovery.graph, translations))
}
