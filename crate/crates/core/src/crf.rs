//! Label refinement over inactive submaps: a pairwise CRF with a semantic
//! field and an instance field, sharing Gaussian position/appearance kernels,
//! solved by synchronous mean-field iteration.
//!
//! The two fields never interact — they share the graph and kernels but
//! update independently. Pairwise compatibility is Potts (any disagreement
//! costs the kernel value), so each update is
//! `Q_i(l) ∝ exp(−U_i(l) − Σ_j K_ij (1 − Q_j(l)))`.

use std::collections::HashMap;

use nalgebra::Point3;
use rayon::prelude::*;

use crate::block::{global_from_block_local, local_from_linear, voxel_center, DetState, GlobalVoxelIndex};
use crate::error::{Error, Result};
use crate::manager::{reassign_voxels, ManagerParams, ReassignReport};
use crate::submap::SubmapCollection;
use crate::voxel::{ClassId, CountTable, Rgb, SubmapId};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub omega1: f64,
    /// Smoothness kernel weight.
    pub omega2: f64,
    /// Position bandwidth (meters).
    pub theta1: f64,
    /// Color bandwidth (RGB channel units).
    pub theta2: f64,
    /// Edges connect nodes with center distance up to this (meters).
    pub neighbor_radius: f64,
    /// Mean-field iterations.
    pub iterations: u32,
    /// Count smoothing for the unary probabilities.
    pub unary_epsilon: f64,
    /// Gaussian kernels use squared-distance exponents (standard form).
    /// `false` switches to literal unsquared distances in the exponents.
    pub squared_exponents: bool,
}

impl CrfParams {
    /// Defaults scaled to a voxel grid: θ1 and the neighbor radius span three
    /// voxels.
    pub fn defaults_for(voxel_size: f64) -> Self {
        CrfParams {
            omega1: 3.0,
            omega2: 1.0,
            theta1: 3.0 * voxel_size,
            theta2: 20.0,
            neighbor_radius: 3.0 * voxel_size,
            iterations: 5,
            unary_epsilon: 1e-6,
            squared_exponents: true,
        }
    }

    pub fn validate(&self, voxel_size: f64) -> Result<()> {
        if !(self.theta1 > 0.0) || !(self.theta2 > 0.0) {
            return Err(Error::InvalidConfig(
                "crf bandwidths theta1/theta2 must be positive".into(),
            ));
        }
        if self.omega1 < 0.0 || self.omega2 < 0.0 {
            return Err(Error::InvalidConfig(
                "crf kernel weights must be nonnegative".into(),
            ));
        }
        if self.neighbor_radius < voxel_size {
            return Err(Error::InvalidConfig(format!(
                "crf neighbor_radius {} below voxel size {voxel_size}",
                self.neighbor_radius
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("crf needs at least one iteration".into()));
        }
        if !(self.unary_epsilon > 0.0) {
            return Err(Error::InvalidConfig("crf unary_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One refinable voxel.
#[derive(Debug, Clone)]
pub struct CrfNode {
    pub submap_id: SubmapId,
    pub voxel: GlobalVoxelIndex,
    /// World-frame voxel center.
    pub position: Point3<f64>,
    /// Fused TSDF color.
    pub color: Rgb,
    /// −log label probabilities, aligned with the problem's label spaces.
    pub semantic_unary: Vec<f64>,
    pub instance_unary: Vec<f64>,
}

/// The full graph plus current marginals for both fields.
#[derive(Debug, Clone, Default)]
pub struct CrfProblem {
    pub semantic_labels: Vec<ClassId>,
    pub instance_labels: Vec<SubmapId>,
    pub nodes: Vec<CrfNode>,
    /// Symmetric adjacency: for node i, (j, K_ij) with j ≠ i, sorted by j.
    pub edges: Vec<Vec<(u32, f64)>>,
    /// Marginals, one row per node.
    pub q_semantic: Vec<Vec<f64>>,
    pub q_instance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Semantic,
    Instance,
}

/// ε-smoothed negative-log-probability costs over `label_space`:
/// `cost(l) = −log((count(l)+ε) / Σ(count+ε))`. Finite for every label.
pub fn unary_from_counts(counts: &CountTable, label_space: &[u16], epsilon: f64) -> Vec<f64> {
    debug_assert!(!label_space.is_empty());
    let total: f64 =
        label_space.iter().map(|&l| counts.get(l) as f64 + epsilon).sum();
    label_space
        .iter()
        .map(|&l| -((counts.get(l) as f64 + epsilon) / total).ln())
        .collect()
}

/// Shared pairwise kernel: appearance term (position and color) plus a
/// position-only smoothness term. Coincident nodes score ω1+ω2.
pub fn pairwise_kernel(
    p_y: &Point3<f64>,
    o_y: &Rgb,
    p_z: &Point3<f64>,
    o_z: &Rgb,
    params: &CrfParams,
) -> f64 {
    let dp2 = (p_y - p_z).norm_squared();
    let dr = o_y.r as f64 - o_z.r as f64;
    let dg = o_y.g as f64 - o_z.g as f64;
    let db = o_y.b as f64 - o_z.b as f64;
    let dc2 = dr * dr + dg * dg + db * db;
    let (ep, ec) = if params.squared_exponents {
        (dp2, dc2)
    } else {
        (dp2.sqrt(), dc2.sqrt())
    };
    let spatial = -ep / (2.0 * params.theta1 * params.theta1);
    let appearance = spatial - ec / (2.0 * params.theta2 * params.theta2);
    params.omega1 * appearance.exp() + params.omega2 * spatial.exp()
}

/// Collects refinable voxels of the given submaps into a CRF graph: one node
/// per near-surface, label-observed voxel; edges between nodes (any submap)
/// whose centers lie within `neighbor_radius`. Unaries come from the voxel
/// count tables; marginals start at the smoothed count ratios.
///
/// An empty node set yields an empty problem, not an error.
pub fn build_crf_problem(
    collection: &SubmapCollection,
    ids: &[SubmapId],
    params: &CrfParams,
) -> Result<CrfProblem> {
    params.validate(collection.voxel_size())?;
    let mut ids: Vec<SubmapId> = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();

    // Node collection pass, and the label spaces.
    let mut nodes: Vec<(SubmapId, GlobalVoxelIndex, Point3<f64>, Rgb)> = Vec::new();
    let mut classes: Vec<ClassId> = Vec::new();
    let mut instances: Vec<SubmapId> = Vec::new();
    for &id in &ids {
        let s = collection.get(id).ok_or(Error::UnknownSubmap(id))?;
        let truncation = s.tsdf.truncation();
        let voxel_size = s.tsdf.voxel_size();
        for key in s.labels.as_layer().sorted_block_indices() {
            let block = s.labels.as_layer().block(&key).unwrap();
            for (linear, v) in block.iter() {
                if !v.is_observed() {
                    continue;
                }
                let g = global_from_block_local(&key, &local_from_linear(linear));
                let Some(t) = s.tsdf.voxel(&g) else { continue };
                if !t.is_near_surface(truncation) {
                    continue;
                }
                let position = s.transform.apply(&voxel_center(&g, voxel_size));
                nodes.push((id, g, position, t.color));
                classes.extend(v.semantic_counts.ids());
                instances.extend(v.instance_counts.ids());
            }
        }
    }
    classes.sort_unstable();
    classes.dedup();
    instances.sort_unstable();
    instances.dedup();
    // Only live submaps are valid refinement targets.
    instances.retain(|i| collection.contains(*i));

    let mut problem = CrfProblem {
        semantic_labels: classes,
        instance_labels: instances,
        ..CrfProblem::default()
    };
    if nodes.is_empty() {
        return Ok(problem);
    }

    for (id, g, position, color) in nodes {
        let v = collection.get(id).unwrap().labels.voxel(&g).unwrap();
        problem.nodes.push(CrfNode {
            submap_id: id,
            voxel: g,
            position,
            color,
            semantic_unary: unary_from_counts(
                &v.semantic_counts,
                &problem.semantic_labels,
                params.unary_epsilon,
            ),
            instance_unary: unary_from_counts(
                &v.instance_counts,
                &problem.instance_labels,
                params.unary_epsilon,
            ),
        });
    }

    // Edge pass: bin nodes at neighbor_radius, compare the 27-cell stencil.
    let radius = params.neighbor_radius;
    let inv = 1.0 / radius;
    let bin_of = |p: &Point3<f64>| -> (i64, i64, i64) {
        (
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        )
    };
    let mut bins: HashMap<(i64, i64, i64), Vec<u32>, DetState> = HashMap::default();
    for (i, n) in problem.nodes.iter().enumerate() {
        bins.entry(bin_of(&n.position)).or_default().push(i as u32);
    }
    problem.edges = vec![Vec::new(); problem.nodes.len()];
    for (i, n) in problem.nodes.iter().enumerate() {
        let (bx, by, bz) = bin_of(&n.position);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cands) = bins.get(&(bx + dx, by + dy, bz + dz)) else {
                        continue;
                    };
                    for &j in cands {
                        if (j as usize) <= i {
                            continue;
                        }
                        let m = &problem.nodes[j as usize];
                        if (n.position - m.position).norm() <= radius {
                            let k =
                                pairwise_kernel(&n.position, &n.color, &m.position, &m.color, params);
                            problem.edges[i].push((j, k));
                            problem.edges[j as usize].push((i as u32, k));
                        }
                    }
                }
            }
        }
    }
    for adj in &mut problem.edges {
        adj.sort_unstable_by_key(|e| e.0);
    }

    problem.q_semantic = problem
        .nodes
        .iter()
        .map(|n| softmax_neg(&n.semantic_unary))
        .collect();
    problem.q_instance = problem
        .nodes
        .iter()
        .map(|n| softmax_neg(&n.instance_unary))
        .collect();
    Ok(problem)
}

/// `softmax(−costs)`, stabilized.
fn softmax_neg(costs: &[f64]) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out: Vec<f64> = costs.iter().map(|c| (min - c).exp()).collect();
    let z: f64 = out.iter().sum();
    for q in &mut out {
        *q /= z;
    }
    out
}

fn sweep(
    edges: &[Vec<(u32, f64)>],
    nodes: &[CrfNode],
    q_prev: &[Vec<f64>],
    field: Field,
) -> Vec<Vec<f64>> {
    edges
        .par_iter()
        .enumerate()
        .map(|(i, adj)| {
            let unary = match field {
                Field::Semantic => &nodes[i].semantic_unary,
                Field::Instance => &nodes[i].instance_unary,
            };
            let mut cost = unary.clone();
            for &(j, k) in adj {
                let qj = &q_prev[j as usize];
                for (c, q) in cost.iter_mut().zip(qj) {
                    *c += k * (1.0 - q);
                }
            }
            softmax_neg(&cost)
        })
        .collect()
}

/// One synchronous mean-field sweep over both fields. Every node's new
/// marginal is computed from the previous iteration's marginals only.
pub fn mean_field_step(problem: &mut CrfProblem) {
    if !problem.semantic_labels.is_empty() {
        problem.q_semantic = sweep(
            &problem.edges,
            &problem.nodes,
            &problem.q_semantic,
            Field::Semantic,
        );
    }
    if !problem.instance_labels.is_empty() {
        problem.q_instance = sweep(
            &problem.edges,
            &problem.nodes,
            &problem.q_instance,
            Field::Instance,
        );
    }
}

/// Index of the best marginal per node; ties take the smaller label index
/// (labels are sorted, so the smaller id).
pub fn argmax_assignment(q: &[Vec<f64>]) -> Vec<usize> {
    q.iter()
        .map(|row| {
            let mut best = 0;
            for (l, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Energy of a full assignment for one field: Σ unaries + Σ kernel over
/// disagreeing edges (each undirected edge counted once).
pub fn assignment_energy(problem: &CrfProblem, assignment: &[usize], field: Field) -> f64 {
    let mut e = 0.0;
    for (i, n) in problem.nodes.iter().enumerate() {
        let unary = match field {
            Field::Semantic => &n.semantic_unary,
            Field::Instance => &n.instance_unary,
        };
        e += unary[assignment[i]];
    }
    for (i, adj) in problem.edges.iter().enumerate() {
        for &(j, k) in adj {
            if (j as usize) > i && assignment[i] != assignment[j as usize] {
                e += k;
            }
        }
    }
    e
}

/// Connected components of the edge graph, each sorted, ordered by smallest
/// member.
pub fn connected_components(problem: &CrfProblem) -> Vec<Vec<u32>> {
    let n = problem.nodes.len();
    let mut component = vec![u32::MAX; n];
    let mut out: Vec<Vec<u32>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if component[start] != u32::MAX {
            continue;
        }
        let c = out.len() as u32;
        component[start] = c;
        stack.push(start as u32);
        let mut members = vec![start as u32];
        while let Some(i) = stack.pop() {
            for &(j, _) in &problem.edges[i as usize] {
                if component[j as usize] == u32::MAX {
                    component[j as usize] = c;
                    stack.push(j);
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Outcome of one refinement pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefinementReport {
    pub components: usize,
    pub nodes: usize,
    /// Voxels whose cached semantic / instance label changed.
    pub semantic_changes: u64,
    pub instance_changes: u64,
    /// Final assignment energies (sum over components, after the
    /// better-of-two safeguard).
    pub semantic_energy: f64,
    pub instance_energy: f64,
    /// The voxel re-homing triggered by instance changes.
    pub reassign: ReassignReport,
}

/// Picks, per component, the better of the mean-field argmax and the plain
/// unary argmax; guarantees the returned assignment never has higher energy
/// than the unary baseline.
fn safeguarded_assignment(
    problem: &CrfProblem,
    components: &[Vec<u32>],
    mf: &[usize],
    field: Field,
) -> (Vec<usize>, f64) {
    let unary: Vec<usize> = problem
        .nodes
        .iter()
        .map(|n| {
            let u = match field {
                Field::Semantic => &n.semantic_unary,
                Field::Instance => &n.instance_unary,
            };
            let mut best = 0;
            for (l, &c) in u.iter().enumerate() {
                if c < u[best] {
                    best = l;
                }
            }
            best
        })
        .collect();

    // Component energies are additive; evaluate each choice locally.
    let mut chosen = unary.clone();
    let mut total = 0.0;
    for comp in components {
        let local_energy = |assignment: &[usize]| -> f64 {
            let mut e = 0.0;
            for &i in comp {
                let i = i as usize;
                let u = match field {
                    Field::Semantic => &problem.nodes[i].semantic_unary,
                    Field::Instance => &problem.nodes[i].instance_unary,
                };
                e += u[assignment[i]];
                for &(j, k) in &problem.edges[i] {
                    if (j as usize) > i && assignment[i] != assignment[j as usize] {
                        e += k;
                    }
                }
            }
            e
        };
        let e_mf = local_energy(mf);
        let e_unary = local_energy(&unary);
        if e_mf <= e_unary {
            for &i in comp {
                chosen[i as usize] = mf[i as usize];
            }
            total += e_mf;
        } else {
            total += e_unary;
        }
    }
    (chosen, total)
}

/// Full refinement pass over the given inactive submaps: build the graph,
/// run the configured number of mean-field sweeps, write the resulting
/// argmax labels back into the voxel caches (counts untouched, refinement
/// marker set), refresh submap-level labels, and re-home voxels whose
/// instance label moved.
pub fn run_refinement(
    collection: &mut SubmapCollection,
    ids: &[SubmapId],
    params: &CrfParams,
    manager_params: &ManagerParams,
) -> Result<RefinementReport> {
    let mut problem = build_crf_problem(collection, ids, params)?;
    let mut report = RefinementReport {
        nodes: problem.nodes.len(),
        ..RefinementReport::default()
    };
    if problem.nodes.is_empty() {
        return Ok(report);
    }
    for _ in 0..params.iterations {
        mean_field_step(&mut problem);
    }
    let components = connected_components(&problem);
    report.components = components.len();

    let (sem, sem_energy) = safeguarded_assignment(
        &problem,
        &components,
        &argmax_assignment(&problem.q_semantic),
        Field::Semantic,
    );
    report.semantic_energy = sem_energy;
    let has_instances = !problem.instance_labels.is_empty();
    let (inst, inst_energy) = if has_instances {
        safeguarded_assignment(
            &problem,
            &components,
            &argmax_assignment(&problem.q_instance),
            Field::Instance,
        )
    } else {
        (Vec::new(), 0.0)
    };
    report.instance_energy = inst_energy;

    // Write-back.
    for (i, node) in problem.nodes.iter().enumerate() {
        let class = problem.semantic_labels[sem[i]];
        let submap = collection.get_mut(node.submap_id).unwrap();
        submap.labels.mutate(&node.voxel, |v| {
            let old = v.cached;
            let instance = if has_instances {
                problem.instance_labels[inst[i]]
            } else {
                old.map_or(node.submap_id, |c| c.instance_id)
            };
            v.override_cache(class, instance);
            if old.map(|c| c.class_id) != Some(class) {
                report.semantic_changes += 1;
            }
            if old.map(|c| c.instance_id) != Some(instance) {
                report.instance_changes += 1;
            }
        });
    }

    let class_table = collection.class_table.clone();
    for &id in ids {
        if let Some(s) = collection.get_mut(id) {
            crate::integrator::refresh_submap_label(s, &class_table)?;
        }
    }
    report.reassign = reassign_voxels(collection, ids, manager_params)?;
    Ok(report)
}
