//! Criteria 1-3: losses against brute-force oracles, boundary collapses,
//! and finite-difference gradients through a toy encoder.

use std::time::Instant;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use wildssl::cld::{cld_loss, local_kmeans, total_cld_loss, ClusterResult};
use wildssl::contrastive::{info_nce, info_nce_batch, Temperature};
use wildssl::encoder::{Encoder, EncoderSpec, Projection};
use wildssl::image::Image;
use wildssl::mixgeo::{geo_loss, make_mixtures, mixture_loss};
use wildssl::rng::{self, Rng};

use crate::{ensure, Outcome};

pub fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    let mut x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    for mut r in x.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    x
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `-ln(e^{l0} / Σ e^{lj})`, no shifting; logits stay below 1/τ here.
fn xent0(logits: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -(logits[0].exp() / z).ln()
}

fn nce_oracle(q: ArrayView1<f64>, k: ArrayView1<f64>, negs: ArrayView2<f64>, tau: f64) -> f64 {
    let mut logits = vec![dot(q, k) / tau];
    logits.extend(negs.rows().into_iter().map(|n| dot(q, n) / tau));
    xent0(&logits)
}

fn nce_mean_oracle(q: ArrayView2<f64>, k: ArrayView2<f64>, negs: ArrayView2<f64>, tau: f64) -> f64 {
    (0..q.nrows()).map(|i| nce_oracle(q.row(i), k.row(i), negs, tau)).sum::<f64>() / q.nrows() as f64
}

fn cld_oracle(g: ArrayView1<f64>, c: &ClusterResult, positive: usize, tau: f64) -> f64 {
    let mut logits = vec![dot(g, c.centroids.row(positive)) / tau];
    for j in 0..c.centroids.nrows() {
        if j != positive && c.sizes[j] > 0 {
            logits.push(dot(g, c.centroids.row(j)) / tau);
        }
    }
    xent0(&logits)
}

/// A clustering of `n` points into `k` centroids, some possibly empty,
/// built directly rather than by k-means.
fn random_clusters(n: usize, k: usize, d: usize, rng: &mut Rng) -> ClusterResult {
    let centroids = unit_rows(k, d, rng);
    let used = rng.random_range(1..=k);
    let assignments: Vec<usize> = (0..n).map(|_| rng.random_range(0..used)).collect();
    let mut sizes = vec![0; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    ClusterResult {
        centroids,
        assignments,
        sizes,
        inertia: 0.0,
        trace: Vec::new(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

struct Case {
    n: usize,
    d: usize,
    negs: Array2<f64>,
    q1: Array2<f64>,
    q2: Array2<f64>,
    k: Array2<f64>,
    tau: f64,
}

fn case(rng: &mut Rng) -> Case {
    let n = rng.random_range(1..=8);
    let d = rng.random_range(2..=16);
    let m = rng.random_range(0..=40);
    Case {
        n,
        d,
        negs: unit_rows(m, d, rng),
        q1: unit_rows(n, d, rng),
        q2: unit_rows(n, d, rng),
        k: unit_rows(n, d, rng),
        tau: rng.random_range(0.05..1.0),
    }
}

const TOL: f64 = 1e-10;

pub fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(101, &[]);
    let trials = 200;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let c = case(&mut rng);
        let tau = Temperature::new(c.tau).unwrap();

        let single = info_nce(c.q1.row(0), c.k.row(0), c.negs.view(), tau).unwrap();
        let e = rel(single, nce_oracle(c.q1.row(0), c.k.row(0), c.negs.view(), c.tau));
        ensure!(e < TOL, "info_nce trial {trial}: relative error {e:e}");
        worst = worst.max(e);

        let kc = rng.random_range(1..=6);
        let c1 = random_clusters(c.n, kc, c.d, &mut rng);
        let c2 = random_clusters(c.n, kc, c.d, &mut rng);
        let g1 = unit_rows(c.n, c.d, &mut rng);
        let g2 = unit_rows(c.n, c.d, &mut rng);
        let tau_g = rng.random_range(0.1..1.0);
        let tg = Temperature::new(tau_g).unwrap();
        let l = cld_loss(g1.row(0), &c2, c2.assignments[0], tg).unwrap();
        let e = rel(l, cld_oracle(g1.row(0), &c2, c2.assignments[0], tau_g));
        ensure!(e < TOL, "cld_loss trial {trial}: relative error {e:e}");
        worst = worst.max(e);

        let lambda = rng.random_range(0.0..2.0);
        let total = total_cld_loss(
            c.q1.view(),
            c.q2.view(),
            c.k.view(),
            c.negs.view(),
            g1.view(),
            g2.view(),
            (&c1, &c2),
            lambda,
            tau,
            tg,
        )
        .unwrap();
        let inst = 0.5 * (nce_mean_oracle(c.q1.view(), c.k.view(), c.negs.view(), c.tau)
            + nce_mean_oracle(c.q2.view(), c.k.view(), c.negs.view(), c.tau));
        let group = 0.5
            * (0..c.n)
                .map(|i| cld_oracle(g1.row(i), &c2, c2.assignments[i], tau_g) + cld_oracle(g2.row(i), &c1, c1.assignments[i], tau_g))
                .sum::<f64>()
            / c.n as f64;
        let e = rel(total.total, inst + lambda * group);
        ensure!(e < TOL, "total_cld_loss trial {trial}: relative error {e:e}");
        worst = worst.max(e);

        let w = rng.random_range(0.0..=1.0);
        let a = nce_mean_oracle(c.q1.view(), c.k.view(), c.negs.view(), c.tau);
        let b = nce_mean_oracle(c.q2.view(), c.k.view(), c.negs.view(), c.tau);
        let geo = geo_loss(c.q1.view(), c.q2.view(), c.k.view(), c.negs.view(), w, tau).unwrap();
        let e = rel(geo.loss, w * a + (1.0 - w) * b);
        ensure!(e < TOL, "geo_loss trial {trial}: relative error {e:e}");
        worst = worst.max(e);
        let mix = mixture_loss(c.q1.view(), c.q2.view(), c.k.view(), c.negs.view(), w, tau).unwrap();
        let e = rel(mix.loss, w * a + (1.0 - w) * b);
        ensure!(e < TOL, "mixture_loss trial {trial}: relative error {e:e}");
        worst = worst.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("{trials} inputs x 5 losses, max relative error {worst:.1e}"))
}

pub fn boundary_collapses() -> Outcome {
    let mut rng = rng::stream(202, &[]);
    let trials = 100;
    for trial in 0..trials {
        let c = case(&mut rng);
        let tau = Temperature::new(c.tau).unwrap();
        let (l1, _) = info_nce_batch(c.q1.view(), c.k.view(), c.negs.view(), tau).unwrap();
        let (l2, _) = info_nce_batch(c.q2.view(), c.k.view(), c.negs.view(), tau).unwrap();

        let kc = rng.random_range(1..=5);
        let c1 = random_clusters(c.n, kc, c.d, &mut rng);
        let c2 = random_clusters(c.n, kc, c.d, &mut rng);
        let g1 = unit_rows(c.n, c.d, &mut rng);
        let g2 = unit_rows(c.n, c.d, &mut rng);
        let tg = Temperature::new(0.4).unwrap();
        let cld = total_cld_loss(c.q1.view(), c.q2.view(), c.k.view(), c.negs.view(), g1.view(), g2.view(), (&c1, &c2), 0.0, tau, tg)
            .unwrap();
        ensure!((cld.total - 0.5 * (l1 + l2)).abs() < TOL, "trial {trial}: CLD at lambda 0 is {} vs {}", cld.total, 0.5 * (l1 + l2));
        ensure!(
            cld.d_g1.iter().chain(cld.d_g2.iter()).all(|&v| v == 0.0),
            "trial {trial}: group gradient nonzero at lambda 0"
        );

        for (w, expect) in [(1.0, l1), (0.0, l2)] {
            let geo = geo_loss(c.q1.view(), c.q2.view(), c.k.view(), c.negs.view(), w, tau).unwrap();
            ensure!((geo.loss - expect).abs() < TOL, "trial {trial}: geo at gamma {w}: {} vs {expect}", geo.loss);
            let mix = mixture_loss(c.q1.view(), c.q2.view(), c.k.view(), c.negs.view(), w, tau).unwrap();
            ensure!((mix.loss - expect).abs() < TOL, "trial {trial}: mixture at lambda {w}: {} vs {expect}", mix.loss);
            let silent = if w == 1.0 { &geo.d_second } else { &geo.d_first };
            ensure!(silent.iter().all(|&v| v == 0.0), "trial {trial}: dropped branch has gradient at gamma {w}");
        }
    }

    // image-level mixtures degenerate to their endpoints
    for trial in 0..20 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut img = || Image::from_planar(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..255.0f32)).collect()).unwrap();
        let (i, i1, i2) = (img(), img(), img());
        let (ggm, gcm) = make_mixtures(&i, &i1, &i2, 0.0).unwrap();
        ensure!(ggm == i && gcm == i1, "trial {trial}: mixtures at lambda 0 differ from I and I1");
        let (ggm, gcm) = make_mixtures(&i, &i1, &i2, 1.0).unwrap();
        ensure!(ggm == i2 && gcm == i2, "trial {trial}: mixtures at lambda 1 differ from I2");
    }
    Ok(format!("{trials} inputs: CLD lambda 0, geo gamma 0/1, mixture lambda 0/1, image mixtures"))
}

/// Forward pass of the toy encoder for a batch: unit instance rows and unit group rows.
fn embed(enc: &Encoder, params: &[f64], xs: &[Vec<f64>]) -> (Array2<f64>, Array2<f64>) {
    let m = enc.proj_dim();
    let out: Vec<_> = xs.iter().map(|x| enc.encode(params, x, true, false)).collect();
    let inst = Projection::from_rows(out.iter().map(|e| &e.inst), m).unwrap();
    let group = Projection::from_rows(out.iter().map(|e| e.group.as_ref().unwrap()), m).unwrap();
    (inst.unit, group.unit)
}

/// Inputs with the loss gradient on their unit instance and group rows.
type Upstream<'a> = (&'a [Vec<f64>], Array2<f64>, Option<Array2<f64>>);

/// Analytic gradient of a loss on the instance and group embeddings of
/// several input batches, through the normalization and the encoder.
fn analytic(enc: &Encoder, params: &[f64], batches: &[Upstream]) -> Vec<f64> {
    let m = enc.proj_dim();
    let mut grads = vec![0.0; enc.param_count()];
    for (xs, d_inst, d_group) in batches {
        let encoded: Vec<_> = xs.iter().map(|x| enc.encode(params, x, true, true)).collect();
        let inst = Projection::from_rows(encoded.iter().map(|e| &e.inst), m).unwrap();
        let group = Projection::from_rows(encoded.iter().map(|e| e.group.as_ref().unwrap()), m).unwrap();
        let di: Vec<f64> = inst.backward(d_inst);
        let dg: Option<Vec<f64>> = d_group.as_ref().map(|d| group.backward(d));
        enc.backward_batch(params, &encoded, Some(&di), dg.as_deref(), &mut grads);
    }
    grads
}

fn max_rel_error(analytic: &[f64], loss: impl Fn(&[f64]) -> f64, params: &[f64]) -> f64 {
    let h = 1e-5;
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let e = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(e);
    }
    worst
}

pub fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(303, &[]);
    let configs = 24;
    let mut worst = 0.0f64;
    for cfg in 0..configs {
        let d_in = rng.random_range(3..=10);
        let hidden = rng.random_range(3..=10);
        let m = rng.random_range(2..=6);
        let n = rng.random_range(2..=6);
        let enc = Encoder::new(EncoderSpec::mlp(d_in, hidden, m)).unwrap();
        let params: Vec<f64> = enc.init_params(cfg as u64);
        let key_params: Vec<f64> = enc.init_params(1000 + cfg as u64);
        let mut batch = || -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let (x1, x2, xk) = (batch(), batch(), batch());
        let negs = unit_rows(rng.random_range(0..=12), m, &mut rng);
        let tau_v = rng.random_range(0.1..0.5);
        let tau = Temperature::new(tau_v).unwrap();
        let (keys, _) = embed(&enc, &key_params, &xk);
        let w = rng.random_range(0.0..=1.0);

        // MoCo instance loss
        let f = |p: &[f64]| info_nce_batch(embed(&enc, p, &x1).0.view(), keys.view(), negs.view(), tau).unwrap().0;
        let (q1, _) = embed(&enc, &params, &x1);
        let (_, d) = info_nce_batch(q1.view(), keys.view(), negs.view(), tau).unwrap();
        let e = max_rel_error(&analytic(&enc, &params, &[(&x1, d, None)]), f, &params);
        ensure!(e < 1e-4, "config {cfg} info_nce: max relative error {e:e}");
        worst = worst.max(e);

        // CLD, clusters fixed at the base parameters
        let (_, g1) = embed(&enc, &params, &x1);
        let (_, g2) = embed(&enc, &params, &x2);
        let k = rng.random_range(1..=n.min(3));
        let c1 = local_kmeans(g1.view(), k, 10, 3, &mut rng).unwrap();
        let c2 = local_kmeans(g2.view(), k, 10, 3, &mut rng).unwrap();
        let tg = Temperature::new(rng.random_range(0.2..0.6)).unwrap();
        let lambda = rng.random_range(0.1..1.0);
        let cld = |p: &[f64]| {
            let (a1, b1) = embed(&enc, p, &x1);
            let (a2, b2) = embed(&enc, p, &x2);
            total_cld_loss(a1.view(), a2.view(), keys.view(), negs.view(), b1.view(), b2.view(), (&c1, &c2), lambda, tau, tg)
                .unwrap()
        };
        let l = cld(&params);
        let grads = analytic(&enc, &params, &[(&x1, l.d_q1, Some(l.d_g1)), (&x2, l.d_q2, Some(l.d_g2))]);
        let e = max_rel_error(&grads, |p| cld(p).total, &params);
        ensure!(e < 1e-4, "config {cfg} total_cld_loss: max relative error {e:e}");
        worst = worst.max(e);

        // geometric loss over two query branches
        let geo = |p: &[f64]| {
            let (a, _) = embed(&enc, p, &x1);
            let (b, _) = embed(&enc, p, &x2);
            geo_loss(a.view(), b.view(), keys.view(), negs.view(), w, tau).unwrap()
        };
        let l = geo(&params);
        let grads = analytic(&enc, &params, &[(&x1, l.d_first, None), (&x2, l.d_second, None)]);
        let e = max_rel_error(&grads, |p| geo(p).loss, &params);
        ensure!(e < 1e-4, "config {cfg} geo_loss: max relative error {e:e}");
        worst = worst.max(e);

        // mixture loss on input-space mixtures
        let mixed = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(u, v)| u.iter().zip(v).map(|(s, t)| w * s + (1.0 - w) * t).collect()).collect()
        };
        let (xm, xmp) = (mixed(&x2, &xk), mixed(&x2, &x1));
        let mix = |p: &[f64]| {
            let (a, _) = embed(&enc, p, &xm);
            let (b, _) = embed(&enc, p, &xmp);
            mixture_loss(a.view(), b.view(), keys.view(), negs.view(), w, tau).unwrap()
        };
        let l = mix(&params);
        let grads = analytic(&enc, &params, &[(&xm, l.d_first, None), (&xmp, l.d_second, None)]);
        let e = max_rel_error(&grads, |p| mix(p).loss, &params);
        ensure!(e < 1e-4, "config {cfg} mixture_loss: max relative error {e:e}");
        worst = worst.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("{configs} configs x 4 losses, max relative error {worst:.1e}"))
}
