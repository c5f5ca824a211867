//! Damped Gauss-Newton (Levenberg-Marquardt) over per-node rigid transforms.
//!
//! Each node carries a [`RigidTransform`] updated by a 6-vector increment
//! `(ω, τ)`: `R ← exp(ω) R`, `t ← t + τ`. Problems assemble block-sparse
//! normal equations, which are factorized with an envelope Cholesky after a
//! reverse Cuthill-McKee reordering of the node graph.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{Matrix6, SMatrix, SVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{RigidTransform, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("solver diverged: no accepted step in {0} iterations")]
    Diverged(usize),
    #[error("numerical failure: non-finite energy")]
    NumericalFailure,
}

/// Accumulated `H = Σ w JᵀJ`, `g = Σ w Jᵀr` and `E = Σ w‖r‖²`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    diag: Vec<Matrix6<f64>>,
    off: BTreeMap<(usize, usize), Matrix6<f64>>,
    rhs: Vec<Vector6<f64>>,
    energy: f64,
}

impl NormalEquations {
    pub fn new(nodes: usize) -> Self {
        Self {
            diag: vec![Matrix6::zeros(); nodes],
            off: BTreeMap::new(),
            rhs: vec![Vector6::zeros(); nodes],
            energy: 0.0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.diag.len()
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Adds one weighted residual block whose Jacobian with respect to node
    /// `blocks[k].0` is `blocks[k].1`.
    pub fn add<const R: usize>(
        &mut self,
        blocks: &[(usize, SMatrix<f64, R, 6>)],
        residual: &SVector<f64, R>,
        weight: f64,
    ) {
        if weight == 0.0 {
            return;
        }
        self.energy += weight * residual.norm_squared();
        for (a, (na, ja)) in blocks.iter().enumerate() {
            let jat = ja.transpose();
            self.rhs[*na] += (jat * residual) * weight;
            self.diag[*na] += (jat * ja) * weight;
            for (nb, jb) in &blocks[a + 1..] {
                let (key, block) = if na < nb {
                    ((*na, *nb), (jat * jb) * weight)
                } else {
                    ((*nb, *na), (jb.transpose() * ja) * weight)
                };
                debug_assert_ne!(na, nb);
                *self.off.entry(key).or_insert_with(Matrix6::zeros) += block;
            }
        }
    }

    /// Gradient of the accumulated energy with respect to each node increment.
    pub fn gradient(&self) -> Vec<Vector6<f64>> {
        self.rhs.iter().map(|g| g * 2.0).collect()
    }

    pub fn gradient_inf_norm(&self) -> f64 {
        self.rhs.iter().map(|g| g.amax()).fold(0.0, f64::max) * 2.0
    }

    /// Solves `(H + damping·I) δ = −g`. Returns `None` when the damped system
    /// is not positive definite.
    pub fn solve(&self, damping: f64) -> Option<Vec<Vector6<f64>>> {
        let n = self.diag.len();
        if n == 0 {
            return Some(Vec::new());
        }
        let order = self.rcm_order();
        let mut position = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }

        // Envelope start (in reordered node units) of each node row.
        let mut first = (0..n).collect::<Vec<_>>();
        for &(a, b) in self.off.keys() {
            let (pa, pb) = (position[a], position[b]);
            let (lo, hi) = if pa < pb { (pa, pb) } else { (pb, pa) };
            first[hi] = first[hi].min(lo);
        }

        let dim = 6 * n;
        let mut start = vec![0usize; dim];
        let mut offset = vec![0usize; dim + 1];
        for row in 0..dim {
            start[row] = 6 * first[row / 6];
            offset[row + 1] = offset[row] + (row - start[row] + 1);
        }
        let mut env = vec![0.0f64; offset[dim]];
        let at = |row: usize, col: usize| offset[row] + (col - start[row]);

        for (old, block) in self.diag.iter().enumerate() {
            let base = 6 * position[old];
            for r in 0..6 {
                for c in 0..=r {
                    let mut v = block[(r, c)];
                    if r == c {
                        v += damping;
                    }
                    env[at(base + r, base + c)] = v;
                }
            }
        }
        for (&(a, b), block) in &self.off {
            // block = H_ab
            let (pa, pb) = (position[a], position[b]);
            let (row_node, col_node, blk) = if pa > pb {
                (pa, pb, *block)
            } else {
                (pb, pa, block.transpose())
            };
            for r in 0..6 {
                for c in 0..6 {
                    env[at(6 * row_node + r, 6 * col_node + c)] = blk[(r, c)];
                }
            }
        }

        // In-place envelope Cholesky, row by row.
        for i in 0..dim {
            let si = start[i];
            for j in si..=i {
                let sj = start[j];
                let k0 = si.max(sj);
                let mut s = env[at(i, j)];
                let oi = offset[i] + (k0 - si);
                let oj = offset[j] + (k0 - sj);
                for k in 0..(j - k0) {
                    s -= env[oi + k] * env[oj + k];
                }
                if j < i {
                    s /= env[at(j, j)];
                    env[at(i, j)] = s;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    env[at(i, i)] = s.sqrt();
                }
            }
        }

        let mut x = vec![0.0f64; dim];
        for (old, g) in self.rhs.iter().enumerate() {
            let base = 6 * position[old];
            for r in 0..6 {
                x[base + r] = -g[r];
            }
        }
        // L y = b
        for i in 0..dim {
            let si = start[i];
            let mut s = x[i];
            for k in si..i {
                s -= env[at(i, k)] * x[k];
            }
            x[i] = s / env[at(i, i)];
        }
        // Lᵀ x = y
        for i in (0..dim).rev() {
            x[i] /= env[at(i, i)];
            let xi = x[i];
            let si = start[i];
            for k in si..i {
                x[k] -= env[at(i, k)] * xi;
            }
        }

        let mut out = vec![Vector6::zeros(); n];
        for (old, slot) in out.iter_mut().enumerate() {
            let base = 6 * position[old];
            *slot = Vector6::from_column_slice(&x[base..base + 6]);
        }
        if out.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return None;
        }
        Some(out)
    }

    /// Quadratic model decrease `−(2gᵀδ + δᵀHδ)` predicted for step `δ`.
    pub fn predicted_decrease(&self, step: &[Vector6<f64>]) -> f64 {
        let mut lin = 0.0;
        let mut quad = 0.0;
        for (i, d) in step.iter().enumerate() {
            lin += self.rhs[i].dot(d);
            quad += d.dot(&(self.diag[i] * d));
        }
        for (&(a, b), blk) in &self.off {
            quad += 2.0 * step[a].dot(&(blk * step[b]));
        }
        -(2.0 * lin + quad)
    }

    fn rcm_order(&self) -> Vec<usize> {
        let n = self.diag.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in self.off.keys() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
        for a in adj.iter_mut() {
            a.sort_by_key(|&v| (degree[v], v));
        }
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut by_degree: Vec<usize> = (0..n).collect();
        by_degree.sort_by_key(|&v| (degree[v], v));
        let mut queue = VecDeque::new();
        for &root in &by_degree {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            queue.push_back(root);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        order.reverse();
        order
    }
}

/// A nonlinear least-squares problem over per-node rigid transforms.
pub trait NodeProblem {
    fn node_count(&self) -> usize;
    fn energy(&self, x: &[RigidTransform]) -> f64;
    fn linearize(&self, x: &[RigidTransform], eq: &mut NormalEquations);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmParams {
    pub max_iters: usize,
    pub damping: f64,
    pub rel_tol: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            max_iters: 10,
            damping: 1e-4,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub transforms: Vec<RigidTransform>,
    /// Energy at the start and after every accepted step.
    pub energies: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const MIN_DAMPING: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e12;

pub fn apply_increment(x: &[RigidTransform], step: &[Vector6<f64>]) -> Vec<RigidTransform> {
    x.iter()
        .zip(step)
        .map(|(t, d)| {
            let omega = Vec3::new(d[0], d[1], d[2]);
            let tau = Vec3::new(d[3], d[4], d[5]);
            t.perturbed(&omega, &tau)
        })
        .collect()
}

/// Minimizes `problem` starting from `x0`. Accepted steps never increase the
/// energy.
pub fn minimize<P: NodeProblem>(
    problem: &P,
    x0: Vec<RigidTransform>,
    params: &LmParams,
) -> Result<LmOutcome, SolverError> {
    assert_eq!(x0.len(), problem.node_count());
    let mut x = x0;
    let mut energy = problem.energy(&x);
    if !energy.is_finite() {
        return Err(SolverError::NumericalFailure);
    }
    let mut energies = vec![energy];
    let mut damping = params.damping.max(MIN_DAMPING);
    let mut converged = false;
    let mut iterations = 0;
    let mut accepted_any = false;
    let mut last_predicted = f64::INFINITY;

    let mut eq = NormalEquations::new(problem.node_count());
    problem.linearize(&x, &mut eq);

    while iterations < params.max_iters {
        if energy <= f64::MIN_POSITIVE || eq.gradient_inf_norm() <= 1e-15 {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(step) = eq.solve(damping) else {
            damping = (damping * 10.0).min(MAX_DAMPING);
            continue;
        };
        last_predicted = eq.predicted_decrease(&step);
        let candidate = apply_increment(&x, &step);
        let e_new = problem.energy(&candidate);
        if e_new.is_finite() && e_new <= energy {
            let rel = (energy - e_new) / energy.max(f64::MIN_POSITIVE);
            x = candidate;
            energy = e_new;
            energies.push(energy);
            accepted_any = true;
            damping = (damping / 10.0).max(MIN_DAMPING);
            if rel < params.rel_tol {
                converged = true;
                break;
            }
            eq = NormalEquations::new(problem.node_count());
            problem.linearize(&x, &mut eq);
        } else {
            if last_predicted <= params.rel_tol * energy {
                // The model cannot improve further at this damping level.
                converged = true;
                break;
            }
            damping = (damping * 10.0).min(MAX_DAMPING);
        }
    }

    if !accepted_any && !converged && last_predicted > params.rel_tol * energy {
        return Err(SolverError::Diverged(iterations));
    }
    Ok(LmOutcome {
        transforms: x,
        energies,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector, Matrix3x6};

    /// Dense oracle for the damped normal equations.
    fn dense_solve(eq: &NormalEquations, damping: f64) -> Vec<f64> {
        let n = eq.node_count();
        let mut h = DMatrix::<f64>::zeros(6 * n, 6 * n);
        let mut g = DVector::<f64>::zeros(6 * n);
        for i in 0..n {
            h.view_mut((6 * i, 6 * i), (6, 6)).copy_from(&eq.diag[i]);
            g.rows_mut(6 * i, 6).copy_from(&eq.rhs[i]);
        }
        for (&(a, b), blk) in &eq.off {
            h.view_mut((6 * a, 6 * b), (6, 6)).copy_from(blk);
            h.view_mut((6 * b, 6 * a), (6, 6)).copy_from(&blk.transpose());
        }
        for i in 0..6 * n {
            h[(i, i)] += damping;
        }
        let x = h.cholesky().unwrap().solve(&(-g));
        x.iter().copied().collect()
    }

    #[test]
    fn envelope_cholesky_matches_dense() {
        let n = 7;
        let mut eq = NormalEquations::new(n);
        let mut seed = 1u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let pairs = [(0, 3), (3, 5), (5, 1), (1, 6), (2, 4), (4, 0), (6, 2)];
        for &(a, b) in &pairs {
            let ja = Matrix3x6::from_fn(|_, _| rnd());
            let jb = Matrix3x6::from_fn(|_, _| rnd());
            let r = SVector::<f64, 3>::from_fn(|_, _| rnd());
            eq.add(&[(a, ja), (b, jb)], &r, 0.7);
        }
        let x = eq.solve(1e-3).unwrap();
        let dense = dense_solve(&eq, 1e-3);
        for i in 0..n {
            for k in 0..6 {
                assert!((x[i][k] - dense[6 * i + k]).abs() < 1e-8 * (1.0 + dense[6 * i + k].abs()));
            }
        }
    }

    #[test]
    fn predicted_decrease_matches_quadratic_model() {
        let mut eq = NormalEquations::new(2);
        let j = Matrix3x6::from_fn(|r, c| ((r + 2 * c) % 5) as f64 - 2.0);
        let r = SVector::<f64, 3>::new(0.3, -0.1, 0.2);
        eq.add(&[(0, j), (1, -j)], &r, 1.0);
        let step = vec![Vector6::from_element(0.01), Vector6::from_element(-0.02)];
        let mut lin = SVector::<f64, 3>::zeros();
        lin += j * step[0] - j * step[1];
        let model = (r + lin).norm_squared();
        assert!((r.norm_squared() - model - eq.predicted_decrease(&step)).abs() < 1e-12);
    }

    /// Pull each node toward a target pose through 3 point residuals.
    struct PoseTargets {
        targets: Vec<RigidTransform>,
    }

    impl NodeProblem for PoseTargets {
        fn node_count(&self) -> usize {
            self.targets.len()
        }
        fn energy(&self, x: &[RigidTransform]) -> f64 {
            let mut e = 0.0;
            for (t, g) in x.iter().zip(&self.targets) {
                for p in [Vec3::x(), Vec3::y(), Vec3::z()] {
                    e += (t.apply(&p) - g.apply(&p)).norm_squared();
                }
            }
            e
        }
        fn linearize(&self, x: &[RigidTransform], eq: &mut NormalEquations) {
            for (i, (t, g)) in x.iter().zip(&self.targets).enumerate() {
                for p in [Vec3::x(), Vec3::y(), Vec3::z()] {
                    let rp = t.rotate(&p);
                    let mut j = Matrix3x6::zeros();
                    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-crate::geom::skew(&rp)));
                    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
                    let r = t.apply(&p) - g.apply(&p);
                    eq.add(&[(i, j)], &r, 1.0);
                }
            }
        }
    }

    #[test]
    fn minimize_reaches_pose_targets_with_monotone_energy() {
        let targets = vec![
            RigidTransform::from_axis_angle(Vec3::new(0.4, -0.3, 0.8), Vec3::new(0.1, 0.2, -0.1)),
            RigidTransform::from_axis_angle(Vec3::new(-1.0, 0.2, 0.1), Vec3::new(-0.3, 0.0, 0.5)),
        ];
        let problem = PoseTargets { targets: targets.clone() };
        let params = LmParams { max_iters: 30, ..Default::default() };
        let out = minimize(&problem, vec![RigidTransform::identity(); 2], &params).unwrap();
        assert!(out.energies.windows(2).all(|w| w[1] <= w[0]));
        for (t, g) in out.transforms.iter().zip(&targets) {
            assert!((t.rotation - g.rotation).amax() < 1e-6);
            assert!((t.translation - g.translation).amax() < 1e-6);
        }
    }

    #[test]
    fn minimize_at_optimum_is_fixed_point() {
        let targets = vec![RigidTransform::identity(); 3];
        let problem = PoseTargets { targets };
        let out = minimize(&problem, vec![RigidTransform::identity(); 3], &LmParams::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert!(out.transforms.iter().all(|t| *t == RigidTransform::identity()));
    }
}
