#![allow(dead_code)]

pub mod cli;
pub mod table1;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ood_audit::evaldump::{EvalDump, LinearHead, Role};
use ood_audit::metrics::MetricRow;
use ood_audit::scores::{Direction, ScoreVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| -> f64 { StandardNormal.sample(&mut *rng) })
}

/// Dump whose logits come from a random head applied to random features.
pub fn random_dump(role: Role, n: usize, k: usize, d: usize, seed: u64) -> EvalDump {
    let mut r = rng(seed);
    let features = gaussian(&mut r, n, d);
    let head = LinearHead::new(gaussian(&mut r, k, d), DVector::from_fn(k, |_, _| -> f64 { StandardNormal.sample(&mut r) }));
    let features = features.map(|x| x as f32 as f64);
    let logits = head.apply(&features);
    let labels = role
        .requires_labels()
        .then(|| (0..n).map(|_| r.random_range(0..k as i32)).collect());
    EvalDump::new(format!("rand{seed}"), role, labels, logits, features).with_head(head)
}

pub fn ood(values: Vec<f64>) -> ScoreVector {
    ScoreVector::new("s", Direction::OodLarger, values)
}

/// Scores on a coarse grid so that ties are common.
pub fn tied_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..12);
    (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect()
}

pub fn continuous_scores(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            shift + z
        })
        .collect()
}

/// Pr(ood > id) + ½ Pr(ood = id) over all pairs.
pub fn auroc_brute(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &o in ood {
        for &i in id {
            if o > i {
                s += 1.0;
            } else if o == i {
                s += 0.5;
            }
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// The ID-acceptance threshold is the interpolated 95th percentile of the
/// ID scores (rank `0.95·(n−1)`, split into integer and hundredths parts).
/// Every distinct pooled score is swept as a candidate threshold in
/// ascending order; the answer is the OOD acceptance at the last candidate
/// not above the operating threshold.
pub fn fpr95_sweep(id: &[f64], ood: &[f64]) -> f64 {
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank100 = 95 * (n - 1);
    let lo = rank100 / 100;
    let rem = rank100 % 100;
    let tau = if rem == 0 {
        sorted[lo]
    } else {
        sorted[lo] + (rem as f64 / 100.0) * (sorted[lo + 1] - sorted[lo])
    };
    let mut candidates: Vec<f64> = id.iter().chain(ood).copied().collect();
    candidates.push(tau);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut best = 0.0;
    for t in candidates {
        if t > tau {
            break;
        }
        let id_acc = id.iter().filter(|&&s| s <= t).count() as f64 / n as f64;
        let ood_acc = ood.iter().filter(|&&s| s <= t).count() as f64 / ood.len() as f64;
        assert!(id_acc <= 1.0);
        best = ood_acc;
    }
    best
}

/// Table 1 of the benchmark: (dataset, noise) settings, then per method the
/// five metrics for each setting in order ACC, near AUROC, near FPR95, far
/// AUROC, far FPR95.
pub const TABLE1_SETTINGS: [(&str, &str); 7] = [
    ("CIFAR-10", "sym 0.2"),
    ("CIFAR-10", "sym 0.5"),
    ("CIFAR-10", "sym 0.8"),
    ("CIFAR-10", "sym 0.9"),
    ("CIFAR-10", "asym 0.4"),
    ("CIFAR-100", "sym 0.2"),
    ("CIFAR-100", "sym 0.5"),
];

pub fn rows_from_table(table: &[(&str, [[f64; 5]; 7])]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (method, cols) in table {
        for ((dataset, noise), v) in TABLE1_SETTINGS.iter().zip(cols) {
            let mut r = MetricRow::new(method, dataset, noise, "energy");
            r.acc = Some(v[0]);
            r.near_auroc = Some(v[1]);
            r.near_fpr95 = Some(v[2]);
            r.far_auroc = Some(v[3]);
            r.far_fpr95 = Some(v[4]);
            rows.push(r);
        }
    }
    rows
}

/// Row of ten logits: `top` (plus noise) at `hot`, standard normal elsewhere.
fn peaked_row(r: &mut ChaCha8Rng, hot: usize, top: f64) -> Vec<f64> {
    (0..10)
        .map(|j| {
            let z: f64 = StandardNormal.sample(&mut *r);
            if j == hot {
                top + 0.5 * z
            } else {
                z
            }
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

/// ID test set in which the low-confidence mistakes come from the same
/// generator as the OOD samples, next to two far-OOD dumps.
///
/// ID layout: 1500 confident correct, 1000 moderately confident correct,
/// 500 confident wrong, 1000 OOD-like wrong. OOD: 1800 + 1200 samples.
pub fn collapse_fixture(seed: u64) -> (EvalDump, Vec<EvalDump>) {
    collapse_fixture_scaled(seed, 1)
}

/// Same layout with every count multiplied by `scale`.
pub fn collapse_fixture_scaled(seed: u64, scale: usize) -> (EvalDump, Vec<EvalDump>) {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut push = |r: &mut ChaCha8Rng, top: f64, correct: bool| {
        let y = r.random_range(0..10usize);
        let hot = if correct { y } else { (y + 1 + r.random_range(0..9usize)) % 10 };
        rows.extend(peaked_row(r, hot, top));
        labels.push(y as i32);
    };
    for _ in 0..1500 * scale {
        push(&mut r, 10.0, true);
    }
    for _ in 0..1000 * scale {
        push(&mut r, 6.0, true);
    }
    for _ in 0..500 * scale {
        push(&mut r, 10.0, false);
    }
    let n = labels.len();
    let mut id_logits = DMatrix::from_row_slice(n, 10, &rows);
    let ood_like = |r: &mut ChaCha8Rng, m: usize| DMatrix::from_fn(m, 10, |_, _| -> f64 { StandardNormal.sample(&mut *r) });
    let n_like = 1000 * scale;
    let wrong = ood_like(&mut r, n_like);
    let mut wrong_labels = Vec::new();
    for i in 0..n_like {
        let row: Vec<f64> = wrong.row(i).iter().copied().collect();
        wrong_labels.push(((argmax(&row) + 1) % 10) as i32);
    }
    id_logits = DMatrix::from_fn(n + n_like, 10, |i, j| if i < n { id_logits[(i, j)] } else { wrong[(i - n, j)] });
    labels.extend(wrong_labels);
    let total = labels.len();
    let id = EvalDump::new("id", Role::IdTest, Some(labels), id_logits, DMatrix::zeros(total, 1));
    let oods = [1800 * scale, 1200 * scale]
        .iter()
        .enumerate()
        .map(|(k, &m)| EvalDump::new(format!("far{k}"), Role::Ood, None, ood_like(&mut r, m), DMatrix::zeros(m, 1)))
        .collect();
    (id, oods)
}

/// Haar-ish orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian(rng, d, d).qr().q()
}

/// Uniform sample of the unit `m`-cube, padded with zeros to `d` columns
/// and rotated at random.
pub fn embedded_cube(m: usize, d: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, d, |_, j| if j < m { r.random::<f64>() } else { 0.0 });
    let q = random_rotation(&mut r, d);
    x * q
}

/// Points on a circle of radius 3 inside the first two of `d` coordinates, rotated.
pub fn embedded_circle(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let t = r.random_range(0.0..std::f64::consts::TAU);
        x[(i, 0)] = 3.0 * t.cos();
        x[(i, 1)] = 3.0 * t.sin();
    }
    let q = random_rotation(&mut r, d);
    x * q
}

/// Largest relative gap between analytic and central-difference gradients,
/// for the host loss, the separation loss, and the weighted total.
pub fn gradient_gaps(seed: u64) -> [f64; 3] {
    use ood_audit::vmr::{objective, EnergyLogistic, MlpModel};

    let mut r = rng(seed);
    let (d, h, k, n, m) = (4, 6, 3, 8, 6);
    let mut model = MlpModel::init(d, h, k, &mut r);
    let mut x = gaussian(&mut r, n, d);
    // redraw until no pre-activation sits within the difference step of a kink
    loop {
        let theta: Vec<f64> = (0..model.n_params())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                0.7 * z
            })
            .collect();
        model.set_flat(&theta);
        let act = model.forward(&x);
        let margin = act.pre1.iter().chain(act.pre2.iter()).fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if margin > 1e-4 {
            break;
        }
        x = gaussian(&mut r, n, d);
    }
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let v = gaussian(&mut r, m, h).map(|z| z.abs());
    let logistic = EnergyLogistic { a: r.random_range(0.5..1.5), c: r.random_range(-0.5..0.5) };
    let lambda = r.random_range(0.05..1.0);

    let theta = model.to_flat();
    let host = objective(&model, logistic, &x, &y, None, 0.0).unwrap();
    let full = objective(&model, logistic, &x, &y, Some(&v), lambda).unwrap();
    let unit = objective(&model, logistic, &x, &y, Some(&v), 1.0).unwrap();

    let mut analytic = [host.grad.to_flat(), unit.grad.to_flat(), full.grad.to_flat()];
    for (i, &hg) in host.grad.to_flat().iter().enumerate() {
        analytic[1][i] -= hg;
    }
    analytic[1].extend([unit.grad_logistic.a, unit.grad_logistic.c]);
    analytic[2].extend([full.grad_logistic.a, full.grad_logistic.c]);

    let eps = 1e-5;
    let mut numeric: [Vec<f64>; 3] = Default::default();
    let eval = |t: &[f64], lg: EnergyLogistic| -> [f64; 3] {
        let mut mm = model.clone();
        mm.set_flat(t);
        let o = objective(&mm, lg, &x, &y, Some(&v), lambda).unwrap();
        [o.loss_host, o.loss_vos, o.total]
    };
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] += eps;
        let mut q = theta.clone();
        q[i] -= eps;
        let (fp, fq) = (eval(&p, logistic), eval(&q, logistic));
        for c in 0..3 {
            numeric[c].push((fp[c] - fq[c]) / (2.0 * eps));
        }
    }
    for which in 0..2 {
        let bump = |s: f64| {
            let mut lg = logistic;
            if which == 0 {
                lg.a += s;
            } else {
                lg.c += s;
            }
            lg
        };
        let (fp, fq) = (eval(&theta, bump(eps)), eval(&theta, bump(-eps)));
        for c in 1..3 {
            numeric[c].push((fp[c] - fq[c]) / (2.0 * eps));
        }
    }
    let gap = |a: &[f64], b: &[f64]| {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        diff / scale.max(1e-12)
    };
    [gap(&analytic[0], &numeric[0]), gap(&analytic[1], &numeric[1]), gap(&analytic[2], &numeric[2])]
}

/// Shared covariance via explicit sums, inverted by LU.
pub fn mahalanobis_oracle(fit: &EvalDump, shrinkage: f64, x: &[f64]) -> f64 {
    let labels = fit.labels.as_ref().unwrap();
    let (n, d) = fit.features.shape();
    let k = fit.n_classes();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for i in 0..n {
        let y = labels[i] as usize;
        counts[y] += 1.0;
        for j in 0..d {
            means[y][j] += fit.features[(i, j)];
        }
    }
    for c in 0..k {
        for j in 0..d {
            means[c][j] /= counts[c];
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let y = labels[i] as usize;
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (fit.features[(i, a)] - means[y][a]) * (fit.features[(i, b)] - means[y][b]);
            }
        }
    }
    cov /= n as f64;
    for a in 0..d {
        cov[(a, a)] += shrinkage;
    }
    let inv = cov.lu().try_inverse().unwrap();
    (0..k)
        .map(|c| {
            let diff = DVector::from_fn(d, |j, _| x[j] - means[c][j]);
            diff.dot(&(&inv * &diff))
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn knn_oracle(bank: &DMatrix<f64>, q: &[f64], k: usize) -> f64 {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let q = unit(q.to_vec());
    let mut d: Vec<f64> = (0..bank.nrows())
        .map(|i| {
            let b = unit(bank.row(i).iter().copied().collect());
            b.iter().zip(&q).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt()
        })
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[k - 1]
}
