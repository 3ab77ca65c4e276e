//! Cross-level instance-group discrimination: per-batch spherical k-means on
//! the group head and the contrastive loss between each sample and the
//! centroids of the other branch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::contrastive::{info_nce_batch, softmax_xent0, Learner, StepLoss, StepParams, Temperature};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::Scalar;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// k×m, unit rows. Rows of empty clusters are kept but never used.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Sum of squared Euclidean distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the returned restart.
    pub trace: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn occupied(&self) -> usize {
        self.sizes.iter().filter(|&&s| s > 0).count()
    }

    pub fn is_occupied(&self, c: usize) -> bool {
        self.sizes[c] > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CldConfig {
    pub k: usize,
    pub lambda: f64,
    pub tau_g: f64,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    /// Set from the run's k-means seed, not read from config files.
    #[serde(skip)]
    pub kmeans_seed: u64,
}

impl Default for CldConfig {
    fn default() -> Self {
        CldConfig {
            k: 32,
            lambda: 0.25,
            tau_g: 0.4,
            kmeans_iters: 10,
            kmeans_restarts: 10,
            kmeans_seed: 0,
        }
    }
}

impl CldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("cluster count must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid(format!("CLD weight must be non-negative, got {}", self.lambda)));
        }
        Temperature::new(self.tau_g)?;
        if self.kmeans_iters == 0 || self.kmeans_restarts == 0 {
            return Err(invalid("k-means needs at least one iteration and one restart"));
        }
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn normalized(v: Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    (n > 1e-12).then(|| v / n)
}

// Distinct sample rows chosen uniformly.
fn forgy_centroids(x: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = x.nrows();
    let picks = rand::seq::index::sample(rng, n, k.min(n));
    let mut centroids = Array2::zeros((k, x.ncols()));
    for (c, i) in picks.into_iter().enumerate() {
        centroids.row_mut(c).assign(&x.row(i));
    }
    for c in n..k {
        centroids.row_mut(c).assign(&x.row(c % n));
    }
    centroids
}

// k-means++ seeding: first centroid uniform, the rest by squared-distance sampling.
fn seed_centroids(x: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(x: ArrayView2<f64>, mut centroids: Array2<f64>, iters: usize) -> ClusterResult {
    let (n, k) = (x.nrows(), centroids.nrows());
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(x.row(i), &centroids);
            changed |= assignments[i] != c;
            assignments[i] = c;
            dist[i] = d;
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        // re-seed empty clusters from the farthest point of a shared cluster
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[assignments[i]] > 1 && dist[i] > 0.0)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            let Some(i) = far else { break };
            sizes[assignments[i]] -= 1;
            assignments[i] = c;
            sizes[c] = 1;
            dist[i] = 0.0;
            centroids.row_mut(c).assign(&x.row(i));
            changed = true;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        for (i, &a) in assignments.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &x.row(i);
        }
        for (c, sum) in sums.rows().into_iter().enumerate() {
            if sizes[c] > 0 {
                if let Some(u) = normalized(sum.to_owned()) {
                    centroids.row_mut(c).assign(&u);
                }
            }
        }
        let inertia = (0..n).map(|i| sq_dist(x.row(i), centroids.row(assignments[i]))).sum();
        trace.push(inertia);
        if !changed {
            break;
        }
    }
    if refine_single_moves(x, &mut assignments, k) {
        for (c, row) in cluster_sums(x, &assignments, k).rows().into_iter().enumerate() {
            if let Some(u) = normalized(row.to_owned()) {
                centroids.row_mut(c).assign(&u);
            }
        }
        let inertia = (0..n).map(|i| sq_dist(x.row(i), centroids.row(assignments[i]))).sum();
        trace.push(inertia);
    }
    let mut sizes = vec![0usize; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    ClusterResult {
        centroids,
        assignments,
        sizes,
        inertia: *trace.last().expect("at least one iteration"),
        trace,
    }
}

fn cluster_sums(x: ArrayView2<f64>, assignments: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    for (i, &a) in assignments.iter().enumerate() {
        let mut row = sums.row_mut(a);
        row += &x.row(i);
    }
    sums
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

// Single-point moves at optimal unit centroids (Hartigan style). For unit
// rows the inertia of a cluster S is 2|S| - 2‖ΣS‖. Returns whether any point moved.
fn refine_single_moves(x: ArrayView2<f64>, assignments: &mut [usize], k: usize) -> bool {
    let mut sums = cluster_sums(x, assignments, k);
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut moved_any = false;
    for _ in 0..100 {
        let mut moved = false;
        for i in 0..x.nrows() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let xi = x.row(i);
            let without = &sums.row(a) - &xi;
            let keep = norm(sums.row(a)) - norm(without.view());
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let gain = norm((&sums.row(b) + &xi).view()) - norm(sums.row(b)) - keep;
                if gain > best.1 + 1e-12 {
                    best = (b, gain);
                }
            }
            if best.0 != a {
                let b = best.0;
                sums.row_mut(a).assign(&without);
                let mut row = sums.row_mut(b);
                row += &xi;
                sizes[a] -= 1;
                sizes[b] += 1;
                assignments[i] = b;
                moved = true;
            }
        }
        moved_any |= moved;
        if !moved {
            break;
        }
    }
    moved_any
}

const MAX_SEED_SUBSETS: usize = 128;

// All k-subsets of 0..n when there are at most MAX_SEED_SUBSETS of them.
fn seed_subsets(n: usize, k: usize) -> Option<Vec<Vec<usize>>> {
    if k > n {
        return None;
    }
    let mut count = 1usize;
    for i in 0..k {
        count = count * (n - i) / (i + 1);
        if count > MAX_SEED_SUBSETS {
            return None;
        }
    }
    let mut out = Vec::with_capacity(count);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return Some(out);
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Spherical k-means: Lloyd iterations with unit-normalized centroids and a
/// final pass of single-point moves, best of several starts by inertia.
/// Small batches start from every k-subset of samples; otherwise `restarts`
/// starts alternate k-means++ and uniform seeding.
pub fn local_kmeans(features: ArrayView2<f64>, k: usize, iters: usize, restarts: usize, rng: &mut Rng) -> Result<ClusterResult> {
    if features.nrows() == 0 {
        return Err(invalid("cannot cluster an empty batch"));
    }
    if k == 0 || iters == 0 || restarts == 0 {
        return Err(invalid("k-means needs k, iterations and restarts of at least 1"));
    }
    let mut best: Option<ClusterResult> = None;
    let mut consider = |r: ClusterResult| {
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia - 1e-12) {
            best = Some(r);
        }
    };
    let n = features.nrows();
    match seed_subsets(n, k) {
        // small batches: start from every possible set of sample seeds
        Some(subsets) => {
            for subset in subsets {
                let mut seeds = Array2::zeros((k, features.ncols()));
                for (c, &i) in subset.iter().enumerate() {
                    seeds.row_mut(c).assign(&features.row(i));
                }
                consider(lloyd(features, seeds, iters));
            }
        }
        None => {
            for run in 0..restarts {
                let seeds = if run % 2 == 0 {
                    seed_centroids(features, k, rng)
                } else {
                    forgy_centroids(features, k, rng)
                };
                consider(lloyd(features, seeds, iters));
            }
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Logits of `g` against the occupied centroids; returns (logits, centroid ids).
fn centroid_logits(g: ArrayView1<f64>, other: &ClusterResult, tau: f64) -> (Vec<f64>, Vec<usize>) {
    let ids: Vec<usize> = (0..other.k()).filter(|&c| other.is_occupied(c)).collect();
    let logits = ids.iter().map(|&c| g.dot(&other.centroids.row(c)) / tau).collect();
    (logits, ids)
}

/// Loss of one sample against the other branch's clustering, with the
/// counterpart's centroid `positive` as target, and its gradient w.r.t. `g`.
pub fn cld_loss_grad(g: ArrayView1<f64>, other: &ClusterResult, positive: usize, tau_g: Temperature) -> Result<(f64, Array1<f64>)> {
    if other.centroids.ncols() != g.len() {
        return Err(Error::Shape(format!(
            "feature of dimension {} against centroids of dimension {}",
            g.len(),
            other.centroids.ncols()
        )));
    }
    if positive >= other.k() || !other.is_occupied(positive) {
        return Err(invalid(format!("positive centroid {positive} is not an occupied cluster")));
    }
    let t = tau_g.get();
    let (mut logits, mut ids) = centroid_logits(g, other, t);
    let at = ids.iter().position(|&c| c == positive).expect("occupied");
    logits.swap(0, at);
    ids.swap(0, at);
    let (loss, p) = softmax_xent0(&logits);
    let mut grad = Array1::zeros(g.len());
    for (&c, &pc) in ids.iter().zip(&p) {
        grad.scaled_add(pc / t, &other.centroids.row(c));
    }
    grad.scaled_add(-1.0 / t, &other.centroids.row(positive));
    Ok((loss, grad))
}

pub fn cld_loss(g: ArrayView1<f64>, other: &ClusterResult, positive: usize, tau_g: Temperature) -> Result<f64> {
    Ok(cld_loss_grad(g, other, positive, tau_g)?.0)
}

/// Batch mean of `cld_loss(g_i, other, counterpart.assignments[i])`, with
/// the gradient w.r.t. each row of `g`.
pub fn cld_batch(
    g: ArrayView2<f64>,
    other: &ClusterResult,
    counterpart_assignments: &[usize],
    tau_g: Temperature,
) -> Result<(f64, Array2<f64>)> {
    let n = g.nrows();
    if n == 0 || counterpart_assignments.len() != n {
        return Err(Error::Shape(format!(
            "{n} features against {} counterpart assignments",
            counterpart_assignments.len()
        )));
    }
    let mut grad = Array2::zeros(g.dim());
    let mut total = 0.0;
    for i in 0..n {
        let (l, d) = cld_loss_grad(g.row(i), other, counterpart_assignments[i], tau_g)?;
        total += l;
        grad.row_mut(i).scaled_add(1.0 / n as f64, &d);
    }
    Ok((total / n as f64, grad))
}

/// Group term `½[Lg(g1, C(g2)) + Lg(g2, C(g1))]` given both clusterings.
#[derive(Clone, Debug)]
pub struct GroupTerm {
    pub loss: f64,
    pub d_g1: Array2<f64>,
    pub d_g2: Array2<f64>,
}

pub fn group_term(g1: ArrayView2<f64>, g2: ArrayView2<f64>, c1: &ClusterResult, c2: &ClusterResult, tau_g: Temperature) -> Result<GroupTerm> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape(format!("branch shapes {:?} and {:?}", g1.dim(), g2.dim())));
    }
    let (l1, d1) = cld_batch(g1, c2, &c2.assignments, tau_g)?;
    let (l2, d2) = cld_batch(g2, c1, &c1.assignments, tau_g)?;
    Ok(GroupTerm {
        loss: 0.5 * (l1 + l2),
        d_g1: d1 * 0.5,
        d_g2: d2 * 0.5,
    })
}

/// Cluster both branches (seeded independently) and return the group term
/// with the two clusterings.
pub fn dual_branch_cld(
    g1: ArrayView2<f64>,
    g2: ArrayView2<f64>,
    config: &CldConfig,
    rng1: &mut Rng,
    rng2: &mut Rng,
) -> Result<(GroupTerm, ClusterResult, ClusterResult)> {
    if g1.nrows() == 0 {
        return Err(invalid("empty batch"));
    }
    let tau = Temperature::new(config.tau_g)?;
    let c1 = local_kmeans(g1, config.k, config.kmeans_iters, config.kmeans_restarts, rng1)?;
    let c2 = local_kmeans(g2, config.k, config.kmeans_iters, config.kmeans_restarts, rng2)?;
    let term = group_term(g1, g2, &c1, &c2, tau)?;
    Ok((term, c1, c2))
}

/// All terms of the total CLD objective with gradients on the unit features.
#[derive(Clone, Debug)]
pub struct CldLoss {
    pub total: f64,
    pub instance: f64,
    pub group: f64,
    pub d_q1: Array2<f64>,
    pub d_q2: Array2<f64>,
    pub d_g1: Array2<f64>,
    pub d_g2: Array2<f64>,
}

/// `½[Lq(q1,k⁺) + Lq(q2,k⁺)] + λ·½[Lg(g1,C(g2)) + Lg(g2,C(g1))]`, each term
/// averaged over the batch. Centroids and assignments are constants.
#[allow(clippy::too_many_arguments)]
pub fn total_cld_loss(
    q1: ArrayView2<f64>,
    q2: ArrayView2<f64>,
    k_plus: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    g1: ArrayView2<f64>,
    g2: ArrayView2<f64>,
    clusters: (&ClusterResult, &ClusterResult),
    lambda: f64,
    tau_q: Temperature,
    tau_g: Temperature,
) -> Result<CldLoss> {
    let (l1, d1) = info_nce_batch(q1, k_plus, negatives, tau_q)?;
    let (l2, d2) = info_nce_batch(q2, k_plus, negatives, tau_q)?;
    let group = group_term(g1, g2, clusters.0, clusters.1, tau_g)?;
    let instance = 0.5 * (l1 + l2);
    Ok(CldLoss {
        total: instance + lambda * group.loss,
        instance,
        group: group.loss,
        d_q1: d1 * 0.5,
        d_q2: d2 * 0.5,
        d_g1: group.d_g1 * lambda,
        d_g2: group.d_g2 * lambda,
    })
}

/// One MoCo+CLD step: two query branches I1, I2 against keys from I+, plus
/// the group loss between the branches' clusterings.
pub fn cld_step<T: Scalar>(
    learner: &mut Learner<T>,
    views: (&[&Image], &[&Image], &[&Image]),
    config: &CldConfig,
    params: StepParams,
    step: u64,
) -> Result<StepLoss> {
    let (v1, v2, vk) = views;
    let keys = learner.keys(vk)?;
    let b1 = learner.queries(v1, true)?;
    let b2 = learner.queries(v2, true)?;
    let (g1, g2) = (&b1.group.as_ref().expect("group").unit, &b2.group.as_ref().expect("group").unit);
    let mut r1 = rng::stream(config.kmeans_seed, &[rng::tag::KMEANS, step, 1]);
    let mut r2 = rng::stream(config.kmeans_seed, &[rng::tag::KMEANS, step, 2]);
    let c1 = local_kmeans(g1.view(), config.k, config.kmeans_iters, config.kmeans_restarts, &mut r1)?;
    let c2 = local_kmeans(g2.view(), config.k, config.kmeans_iters, config.kmeans_restarts, &mut r2)?;
    let loss = total_cld_loss(
        b1.inst.unit.view(),
        b2.inst.unit.view(),
        keys.unit.view(),
        learner.queue.negatives(),
        g1.view(),
        g2.view(),
        (&c1, &c2),
        config.lambda,
        params.tau,
        Temperature::new(config.tau_g)?,
    )?;
    learner.ensure_finite(loss.total, "CLD")?;
    let mut grads = learner.zero_grads();
    learner.accumulate(&b1, Some(&loss.d_q1), Some(&loss.d_g1), &mut grads);
    learner.accumulate(&b2, Some(&loss.d_q2), Some(&loss.d_g2), &mut grads);
    learner.finish(&grads, params.lr, params.momentum, &keys)?;
    Ok(StepLoss {
        total: loss.total,
        instance: loss.instance,
        group: Some(loss.group),
        occupied_clusters: Some((c1.occupied(), c2.occupied())),
        ..StepLoss::default()
    })
}
