#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use kdistill::cli::config::RunConfig;
use kdistill::cli::{load_splits, Splits};
use kdistill::data::fixture::{write_fixture, FixtureSpec};
use kdistill::training::{Action, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    values(t)[0]
}

/// Relative error between the autograd gradient of `f` at `x` and central
/// finite differences, `‖g - fd‖ / max(‖g‖, ‖fd‖)`.
pub fn gradient_error<F>(x: &[f64], shape: &[usize], f: F) -> f64
where
    F: Fn(&Tensor) -> kdistill::Result<Tensor>,
{
    let var = Var::from_tensor(&tensor(x.to_vec(), shape)).unwrap();
    let loss = f(var.as_tensor()).unwrap();
    let grads = loss.backward().unwrap();
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => values(g),
        None => vec![0.0; x.len()],
    };
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = scalar(&f(&tensor(probe.clone(), shape)).unwrap());
        probe[i] = x[i] - h;
        let down = scalar(&f(&tensor(probe.clone(), shape)).unwrap());
        probe[i] = x[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Whether the gradient that reaches `input` through `f` is identically zero.
pub fn gradient_is_zero<F>(input: &Tensor, f: F) -> bool
where
    F: Fn(&Tensor) -> kdistill::Result<Tensor>,
{
    let var = Var::from_tensor(input).unwrap();
    let grads = f(var.as_tensor()).unwrap().backward().unwrap();
    grads.get(var.as_tensor()).map_or(true, |g| values(g).iter().all(|&v| v == 0.0))
}

/// `R[b][k][k'] = Σ_hw f[b,k,hw] f[b,k',hw]` by explicit loops.
pub fn gram_loop(f: &[f64], b: usize, k: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * k * k];
    for n in 0..b {
        for i in 0..k {
            for j in 0..k {
                let mut s = 0.0;
                for p in 0..hw {
                    s += f[(n * k + i) * hw + p] * f[(n * k + j) * hw + p];
                }
                out[(n * k + i) * k + j] = s;
            }
        }
    }
    out
}

fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relational loss over all ordered pairs and triples, written out directly.
pub fn drkd_brute(t: &[Vec<f64>], s: &[Vec<f64>], lambda_d: f64, lambda_a: f64, delta: f64) -> f64 {
    let b = t.len();
    let dist = |e: &[Vec<f64>]| {
        let mut d = vec![vec![0.0; b]; b];
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    d[i][j] = dot(&sub(&e[i], &e[j]), &sub(&e[i], &e[j])).sqrt();
                    total += d[i][j];
                }
            }
        }
        let mu = total / (b * (b - 1)) as f64;
        d.iter().map(|r| r.iter().map(|v| v / mu).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let (dt, ds) = (dist(t), dist(s));
    let mut pair = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                pair += huber(ds[i][j] - dt[i][j], delta);
            }
        }
    }
    let mut loss = lambda_d * pair / (b * (b - 1)) as f64;
    if b >= 3 {
        let cos = |e: &[Vec<f64>], i: usize, j: usize, k: usize| {
            let (u, v) = (sub(&e[i], &e[j]), sub(&e[k], &e[j]));
            dot(&u, &v) / (dot(&u, &u).sqrt() * dot(&v, &v).sqrt())
        };
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..b {
            for j in 0..b {
                for k in 0..b {
                    if i != j && j != k && i != k {
                        sum += huber(cos(s, i, j, k) - cos(t, i, j, k), delta);
                        count += 1;
                    }
                }
            }
        }
        loss += lambda_a * sum / count as f64;
    }
    loss
}

pub fn ref_accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(r, &y)| first_max(r) == y).count();
    hits as f64 / labels.len() as f64
}

fn first_max(r: &[f64]) -> usize {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    r.iter().position(|&v| v == m).unwrap()
}

pub fn ref_balanced_accuracy(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !members.is_empty() {
            let hit = members.iter().filter(|&&i| first_max(&scores[i]) == c).count();
            recalls.push(hit as f64 / members.len() as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Mann-Whitney estimate of the one-vs-rest AUC, ties counting one half.
pub fn ref_auc(scores: &[Vec<f64>], labels: &[usize], c: usize) -> Option<f64> {
    let pos: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| scores[i][c]).collect();
    let neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] != c).map(|i| scores[i][c]).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut u = 0.0;
    for p in &pos {
        for n in &neg {
            u += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(u / (pos.len() * neg.len()) as f64)
}

/// Precision at the rank of each positive, ties broken by original index.
pub fn ref_average_precision(scores: &[Vec<f64>], labels: &[usize], c: usize) -> Option<f64> {
    let mut ranked: Vec<(f64, usize)> = scores.iter().enumerate().map(|(i, r)| (r[c], i)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let positives = labels.iter().filter(|&&y| y == c).count();
    if positives == 0 {
        return None;
    }
    let mut seen = 0.0;
    let mut total = 0.0;
    for (rank, (_, i)) in ranked.iter().enumerate() {
        if labels[*i] == c {
            seen += 1.0;
            total += seen / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

pub fn macro_mean(v: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let present: Vec<f64> = v.into_iter().flatten().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Random score matrix whose labels cover every class; every other matrix is
/// quantised to produce ties.
pub fn random_scores(rng: &mut ChaCha8Rng, n: usize, classes: usize, ties: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
    let scores = (0..n)
        .map(|_| {
            (0..classes)
                .map(|_| {
                    let v: f64 = rng.random();
                    if ties {
                        (v * 5.0).round() / 5.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    (scores, labels)
}

/// Learning-rate and action trace of a loss sequence under plateau
/// scheduling, following the rules literally.
pub fn simulate_schedule(initial: f64, losses: &[f64], lr0: f64, cfg: &ScheduleConfig) -> Vec<(f64, Action)> {
    let mut best = initial;
    let mut waited = 0;
    let mut lr = lr0;
    let mut out = Vec::new();
    for &l in losses {
        let action = if l < best - 1e-6 {
            best = l;
            waited = 0;
            Action::Continue
        } else {
            waited += 1;
            if waited >= cfg.early_stop_patience {
                Action::Stop
            } else if waited % cfg.lr_patience == 0 {
                lr *= cfg.lr_factor;
                Action::ReduceLr
            } else {
                Action::Continue
            }
        };
        out.push((lr, action));
        if action == Action::Stop {
            break;
        }
    }
    out
}

/// The 8-class smoke corpus: 240 images split 160/40/40, written as PNGs
/// under `root` and loaded back for the toy backbones.
pub fn smoke_fixture(root: &Path) -> (RunConfig, Splits) {
    let spec = FixtureSpec { per_class: vec![30], ..FixtureSpec::default() };
    write_fixture(root, &spec).unwrap();
    let mut cfg = RunConfig::defaults(true);
    cfg.dataset_root = root.to_path_buf();
    cfg.split.test_fraction = 1.0 / 6.0;
    let input = cfg.teacher.spec(spec.classes).unwrap().input_size;
    let splits = load_splits(&cfg, input).unwrap();
    (cfg, splits)
}

/// A small corpus for quick training tests.
pub fn small_fixture(root: &Path, classes: usize, per_class: usize) -> (RunConfig, Splits) {
    let spec = FixtureSpec { classes, per_class: vec![per_class], ..FixtureSpec::default() };
    write_fixture(root, &spec).unwrap();
    let mut cfg = RunConfig::defaults(true);
    cfg.dataset_root = root.to_path_buf();
    cfg.split.test_fraction = 0.2;
    let input = cfg.teacher.spec(classes).unwrap().input_size;
    let splits = load_splits(&cfg, input).unwrap();
    (cfg, splits)
}
