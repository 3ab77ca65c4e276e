//! Criteria 4-6: queue and momentum-encoder mechanics, k-means, kNN.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use wildssl::cld::{cld_step, local_kmeans, CldConfig};
use wildssl::contrastive::{moco_step, FeatureQueue, Learner, StepParams, Temperature};
use wildssl::encoder::{EncoderSpec, EncoderState, InputNorm};
use wildssl::image::Image;
use wildssl::mixgeo::{geo_step, mixture_step};
use wildssl::optim::{Sgd, SgdConfig};
use wildssl::rng::{self, Rng};
use wildssl::trainer::{knn_monitor, knn_predict};

use crate::oracles::unit_rows;
use crate::{ensure, Outcome};

fn queue_fifo() -> Outcome {
    let mut rng = rng::stream(404, &[1]);
    let (cap, dim) = (37, 5);
    let mut q = FeatureQueue::new(cap, dim).unwrap();
    let mut oracle: VecDeque<Vec<f64>> = VecDeque::new();
    let mut pushed = 0usize;
    for push in 0..1000 {
        let n = rng.random_range(1..=cap);
        let keys = unit_rows(n, dim, &mut rng);
        q.push(keys.view()).unwrap();
        for row in keys.rows() {
            oracle.push_back(row.to_vec());
            if oracle.len() > cap {
                oracle.pop_front();
            }
        }
        pushed += n;
        ensure!(q.capacity() == cap, "push {push}: capacity changed to {}", q.capacity());
        ensure!(q.len() == oracle.len(), "push {push}: length {} vs {}", q.len(), oracle.len());
        ensure!(q.write_ptr() == pushed % cap, "push {push}: write pointer {}", q.write_ptr());
        let ordered = q.ordered();
        let same = ordered.rows().into_iter().zip(&oracle).all(|(a, b)| a.iter().eq(b.iter()));
        ensure!(same && ordered.nrows() == oracle.len(), "push {push}: contents differ from FIFO oracle");
    }
    Ok(format!("queue FIFO over 1000 pushes ({pushed} keys, capacity {cap})"))
}

fn image(rng: &mut Rng) -> Image {
    Image::from_planar(4, 4, (0..48).map(|_| rng.random_range(0.0..255.0f32)).collect()).unwrap()
}

fn momentum_encoder() -> Outcome {
    let mut rng = rng::stream(404, &[2]);
    let m = 0.999;
    let state = EncoderState::<f64>::new(EncoderSpec::mlp(48, 8, 4), 9).unwrap();
    let n = state.encoder.param_count();
    let opt = Sgd::new(
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        n,
    );
    let mut learner = Learner::new(state, FeatureQueue::new(16, 4).unwrap(), opt, InputNorm::default());
    let key0 = learner.state.key.clone();
    let params = StepParams {
        lr: 0.5,
        momentum: m,
        tau: Temperature::new(0.2).unwrap(),
    };
    let cld = CldConfig {
        k: 2,
        ..CldConfig::default()
    };
    let mut queries: Vec<Vec<f64>> = Vec::new();
    let mut worst = 0.0f64;
    for step in 0..50u64 {
        let views: Vec<Vec<Image>> = (0..3).map(|_| (0..4).map(|_| image(&mut rng)).collect()).collect();
        let r: Vec<Vec<&Image>> = views.iter().map(|v| v.iter().collect()).collect();
        let before_key = learner.state.key.clone();
        let before_query = learner.state.query.clone();
        match step % 4 {
            0 => moco_step(&mut learner, &r[0], &r[1], params).map(|_| ()),
            1 => cld_step(&mut learner, (&r[0], &r[1], &r[2]), &cld, params, step).map(|_| ()),
            2 => geo_step(&mut learner, (&r[0], &r[1], &r[2]), 0.9, params).map(|_| ()),
            _ => mixture_step(&mut learner, (&r[0], &r[1], &r[2]), 0.4, params).map(|_| ()),
        }
        .map_err(|e| format!("step {step}: {e}"))?;
        let query = &learner.state.query;
        ensure!(query != &before_query, "step {step}: query encoder did not move");
        // anything beyond the EMA would be an optimizer update on the key encoder
        for i in 0..n {
            let ema = m * before_key[i] + (1.0 - m) * query[i];
            ensure!(
                learner.state.key[i] - ema == 0.0,
                "step {step}: key parameter {i} differs from its EMA by {:e}",
                learner.state.key[i] - ema
            );
        }
        queries.push(query.clone());
        let t = queries.len() as i32;
        for i in 0..n {
            let mut closed = m.powi(t) * key0[i];
            for (s, q) in queries.iter().enumerate() {
                closed += (1.0 - m) * m.powi(t - 1 - s as i32) * q[i];
            }
            let e = (closed - learner.state.key[i]).abs();
            worst = worst.max(e);
            ensure!(e < 1e-8, "step {step}: key parameter {i} is {e:e} from the closed-form EMA");
        }
    }
    ensure!(learner.opt.velocity.len() == n, "optimizer holds {} parameters", learner.opt.velocity.len());
    Ok(format!("optimizer delta on key encoder 0 over 50 steps, closed-form EMA error {worst:.1e}"))
}

pub fn moco_mechanics() -> Outcome {
    let a = queue_fifo()?;
    let b = momentum_encoder()?;
    Ok(format!("{a}; {b}"))
}

/// Inertia of `assignments` with each centroid at its cluster's normalized sum.
fn best_inertia_for(x: ArrayView2<f64>, assignments: &[usize], k: usize) -> f64 {
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        let mut row = sums.row_mut(a);
        row += &x.row(i);
        counts[a] += 1;
    }
    (0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| 2.0 * counts[c] as f64 - 2.0 * sums.row(c).dot(&sums.row(c)).sqrt())
        .sum()
}

fn exhaustive_optimum(x: ArrayView2<f64>, k: usize) -> f64 {
    let n = x.nrows();
    let mut a = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(best_inertia_for(x, &a, k));
        let mut i = 0;
        while i < n {
            a[i] += 1;
            if a[i] < k {
                break;
            }
            a[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn direct_inertia(x: ArrayView2<f64>, centroids: ArrayView2<f64>, assignments: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        let d = &x.row(i) - &centroids.row(a);
        total += d.dot(&d);
    }
    total
}

pub fn kmeans() -> Outcome {
    let mut rng = rng::stream(505, &[]);
    for inst in 0..100 {
        let n = rng.random_range(8..=64);
        let d = rng.random_range(2..=8);
        let k = rng.random_range(2..=6);
        let x = unit_rows(n, d, &mut rng);
        let r = local_kmeans(x.view(), k, 10, 4, &mut rng).unwrap();
        ensure!(!r.trace.is_empty(), "instance {inst}: empty inertia trace");
        for w in r.trace.windows(2) {
            ensure!(w[1] <= w[0] + 1e-12, "instance {inst}: inertia rose from {} to {}", w[0], w[1]);
        }
        let direct = direct_inertia(x.view(), r.centroids.view(), &r.assignments);
        ensure!((direct - r.inertia).abs() < 1e-9, "instance {inst}: reported inertia {} vs {direct}", r.inertia);
        ensure!(r.inertia <= r.trace[0] + 1e-12, "instance {inst}: final inertia above the first iteration");
    }
    let mut exhaustive = 0;
    for n in 1..=8 {
        for k in 1..=3usize {
            for rep in 0..6 {
                let d = rng.random_range(2..=4);
                let x = unit_rows(n, d, &mut rng);
                let r = local_kmeans(x.view(), k, 10, 10, &mut rng).unwrap();
                let opt = exhaustive_optimum(x.view(), k);
                let mine = best_inertia_for(x.view(), &r.assignments, k);
                ensure!(
                    (mine - opt).abs() < 1e-9 && (r.inertia - opt).abs() < 1e-9,
                    "N={n} k={k} rep {rep}: inertia {} vs exhaustive optimum {opt}",
                    r.inertia
                );
                exhaustive += 1;
            }
        }
    }
    Ok(format!("100 instances non-increasing; {exhaustive} instances with N<=8, k<=3 match exhaustive optimum"))
}

/// Top-k by similarity (ties to the lower index), votes `exp(s/t)`, ties to the lower class.
fn knn_oracle(train: ArrayView2<f64>, labels: &[usize], e: ArrayView1<f64>, k: usize, t: f64) -> usize {
    let mut scored: Vec<(f64, usize)> = (0..train.nrows()).map(|i| (train.row(i).dot(&e), i)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let classes = labels.iter().max().unwrap() + 1;
    let mut votes = vec![0.0; classes];
    for &(s, i) in &scored[..k] {
        votes[labels[i]] += (s / t).exp();
    }
    let mut best = 0;
    for c in 1..classes {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best
}

pub fn knn() -> Outcome {
    let (k, t) = (20, 0.02);
    let mut rng = rng::stream(606, &[]);

    // two tight clusters around opposite poles
    let dim = 8;
    let mut cluster = |n: usize, sign: f64| -> Array2<f64> {
        let mut x = unit_rows(n, dim, &mut rng) * 0.1;
        x.column_mut(0).mapv_inplace(|v| v + sign);
        for mut r in x.rows_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        x
    };
    let train = ndarray::concatenate![ndarray::Axis(0), cluster(30, 1.0), cluster(30, -1.0)];
    let eval = ndarray::concatenate![ndarray::Axis(0), cluster(20, 1.0), cluster(20, -1.0)];
    let tl: Vec<usize> = (0..60).map(|i| usize::from(i >= 30)).collect();
    let el: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
    let acc = knn_monitor(train.view(), &tl, eval.view(), &el, k, t).unwrap();
    ensure!(acc == 100.0, "separable data scored {acc}%");

    for inst in 0..50 {
        let dim = rng.random_range(2..=10);
        let n = rng.random_range(k..=80);
        let classes = rng.random_range(2..=5);
        let train = unit_rows(n, dim, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let eval = unit_rows(rng.random_range(1..=30), dim, &mut rng);
        let preds = knn_predict(train.view(), &labels, eval.view(), k, t).unwrap();
        for (j, &p) in preds.iter().enumerate() {
            let want = knn_oracle(train.view(), &labels, eval.row(j), k, t);
            ensure!(p == want, "instance {inst} eval row {j}: predicted {p}, oracle {want}");
        }
    }
    Ok(format!("separable data 100% at k={k} t={t}; 50 instances match brute force"))
}
