//! Independent reference computations checked against the library.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use specshape::circulant::{circulant_spectrum, ChannelLayout, FilterBank};
use specshape::classunlearn::{fit_threshold, reweight_distribution, solve_beta, tilt_distribution};
use specshape::linop::Padding;
use specshape::lotos::{lotos_loss, EnsembleVectors, LotosConfig};
use specshape::net::{log_softmax, Activation, Layer, Sample, TinyNet};
use specshape::rng::{gaussian_vec, seeded};
use specshape::unlearn::{auc, logistic_model, LogisticInstance};
use specshape::{power_qr, Operator, PowerQrConfig};

/// Explicitly padded signal, built the way an array library would.
fn pad(signal: &[f64], before: usize, after: usize, mode: Padding) -> Vec<Option<f64>> {
    let n = signal.len() as isize;
    (-(before as isize)..n + after as isize)
        .map(|i| {
            if (0..n).contains(&i) {
                return Some(signal[i as usize]);
            }
            match mode {
                Padding::Zeros => None,
                Padding::Circular => Some(signal[i.rem_euclid(n) as usize]),
                Padding::Replicate => Some(signal[if i < 0 { 0 } else { n as usize - 1 }]),
                Padding::Reflect => {
                    // mirror without repeating the edge sample, bouncing as often as needed
                    let mut j = i;
                    while !(0..n).contains(&j) {
                        j = if j < 0 { -j } else { 2 * (n - 1) - j };
                    }
                    Some(signal[j as usize])
                }
            }
        })
        .collect()
}

/// Dense matrix of a single-channel 1-D cross-correlation with "same" padding.
fn naive_conv_matrix(w: &[f64], n: usize, stride: usize, mode: Padding) -> DMatrix<f64> {
    let k = w.len();
    let lead = k / 2;
    let out = (n - 1) / stride + 1;
    let mut m = DMatrix::zeros(out, n);
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let p = pad(&e, lead, k, mode);
        for o in 0..out {
            let start = o * stride;
            m[(o, col)] = (0..k).map(|t| w[t] * p[start + t].unwrap_or(0.0)).sum();
        }
    }
    m
}

#[test]
fn conv_materialization_matches_padded_reference() {
    let mut rng = seeded(11);
    for mode in Padding::ALL {
        for &(n, k, s) in &[(7, 3, 1), (8, 3, 2), (9, 5, 1), (6, 2, 1), (10, 4, 3), (5, 5, 1)] {
            let w = gaussian_vec(&mut rng, k);
            let op = Operator::conv1d(1, 1, n, k, s, mode, w.clone()).unwrap();
            let got = op.materialize().unwrap();
            let want = naive_conv_matrix(&w, n, s, mode);
            assert!((got - want).abs().max() < 1e-14, "{mode:?} n={n} k={k} s={s}");
        }
    }
}

#[test]
fn conv2d_separable_kernel_is_kronecker_product() {
    // A rank-one kernel a bᵀ on an h×w grid acts as rows ⊗ columns.
    let mut rng = seeded(12);
    for mode in Padding::ALL {
        let (h, w) = (5, 6);
        let a = gaussian_vec(&mut rng, 3);
        let b = gaussian_vec(&mut rng, 2);
        let kernel: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        let op = Operator::conv2d(1, 1, (h, w), (3, 2), (2, 1), mode, kernel).unwrap();
        let want = naive_conv_matrix(&a, h, 2, mode).kronecker(&naive_conv_matrix(&b, w, 1, mode));
        assert!((op.materialize().unwrap() - want).abs().max() < 1e-13, "{mode:?}");
    }
}

#[test]
fn circulant_values_match_direct_dft() {
    let mut rng = seeded(13);
    for trial in 0..40 {
        let n = rng.random_range(3..=32);
        let k = rng.random_range(1..=n.min(7));
        let m = rng.random_range(1..=4);
        let filters: Vec<Vec<f64>> = (0..m).map(|_| gaussian_vec(&mut rng, k)).collect();
        let fb = FilterBank::new(filters.clone(), n).unwrap();
        let got = circulant_spectrum(&fb);
        for j in 0..n {
            let mut sq = 0.0;
            for f in &filters {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in f.iter().enumerate() {
                    let ang = 2.0 * std::f64::consts::PI * (j * t) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                sq += re * re + im * im;
            }
            assert!((got[j] - sq.sqrt()).abs() < 1e-10, "trial {trial} root {j}");
        }
    }
}

#[test]
fn circulant_fan_in_and_fan_out_share_values() {
    let mut rng = seeded(14);
    let fb = FilterBank::new((0..3).map(|_| gaussian_vec(&mut rng, 4)).collect(), 12).unwrap();
    let sv = |layout| {
        let m = fb.to_operator(layout).unwrap().materialize().unwrap();
        let mut s: Vec<f64> = SymmetricEigen::new(m.transpose() * &m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s.truncate(12);
        s
    };
    let (a, b) = (sv(ChannelLayout::FanOut), sv(ChannelLayout::FanIn));
    let mut c = circulant_spectrum(&fb);
    c.sort_by(|a, b| b.total_cmp(a));
    for i in 0..12 {
        assert!((a[i] - b[i]).abs() < 1e-10 && (a[i] - c[i]).abs() < 1e-10);
    }
}

#[test]
fn power_qr_matches_gram_eigenvalues() {
    let mut rng = seeded(15);
    for _ in 0..10 {
        let (r, c) = (rng.random_range(4..20), rng.random_range(4..20));
        let w = gaussian_vec(&mut rng, r * c);
        let op = Operator::dense(r, c, w).unwrap();
        let m = op.materialize().unwrap();
        let eig = SymmetricEigen::new(m.transpose() * &m);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let k = 3.min(r).min(c);
        let s = power_qr(&op, &PowerQrConfig::new(k, 5000).with_tol(1e-14), 1).unwrap();
        for i in 0..k {
            assert!((s.values[i] - ev[i]).abs() <= 1e-6 * ev[i], "{} vs {}", s.values[i], ev[i]);
        }
    }
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Moves a simplex point along the segment towards the best- or worst-scoring
/// vertex until its first moment equals `c` exactly.
fn repair(q: &mut [f64], s: &[f64], c: f64) {
    let m: f64 = q.iter().zip(s).map(|(a, b)| a * b).sum();
    let pick = |better: fn(f64, f64) -> bool| {
        (0..s.len()).fold(0, |best, i| if better(s[i], s[best]) { i } else { best })
    };
    let v = if m < c { pick(|a, b| a > b) } else { pick(|a, b| a < b) };
    let t = (c - m) / (s[v] - m);
    for (i, qi) in q.iter_mut().enumerate() {
        *qi = (1.0 - t) * *qi + if i == v { t } else { 0.0 };
    }
}

#[test]
fn tilt_is_kl_projection_against_sampled_points() {
    let mut rng = seeded(16);
    for _ in 0..5 {
        let k = 4;
        let p: Vec<f64> = {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / t).collect()
        };
        let y_f = 0;
        let s: Vec<f64> = (0..k - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let c = lo + (hi - lo) * rng.random_range(0.2..0.8);
        let (beta, _) = solve_beta(&p, y_f, &s, c).unwrap();
        let q = tilt_distribution(&p, y_f, &s, beta).unwrap().probs;
        let pt = reweight_distribution(&p, y_f).unwrap();
        let best = kl(&q[1..], &pt[1..]);
        for _ in 0..200_000 {
            let e: Vec<f64> = (0..k - 1).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let t: f64 = e.iter().sum();
            let mut cand: Vec<f64> = e.iter().map(|v| v / t).collect();
            repair(&mut cand, &s, c);
            assert!(kl(&cand, &pt[1..]) >= best - 1e-6);
        }
    }
}

/// Accuracy of every (cut, orientation) pair, including cuts at and between all values.
fn sweep(pos: &[f64], neg: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cuts.sort_by(f64::total_cmp);
    let mut cand = vec![cuts[0] - 1.0, cuts[cuts.len() - 1] + 1.0];
    for w in cuts.windows(2) {
        cand.push(0.5 * (w[0] + w[1]));
    }
    cand.extend(cuts.iter().copied());
    let n = (pos.len() + neg.len()) as f64;
    let mut best: f64 = 0.0;
    for t in cand {
        for above in [true, false] {
            let ok = pos.iter().filter(|&&v| (v > t) == above).count() + neg.iter().filter(|&&v| (v > t) != above).count();
            best = best.max(ok as f64 / n);
        }
    }
    best
}

#[test]
fn threshold_matches_exhaustive_sweep() {
    let mut rng = seeded(17);
    for _ in 0..200 {
        let np = rng.random_range(1..30);
        let nn = rng.random_range(1..30);
        let shift = rng.random_range(-2.0..2.0);
        // quantized values force ties
        let pos: Vec<f64> = (0..np).map(|_| (rng.random_range(-3.0..3.0f64) * 4.0).round() / 4.0 + shift).collect();
        let neg: Vec<f64> = (0..nn).map(|_| (rng.random_range(-3.0..3.0f64) * 4.0).round() / 4.0).collect();
        let t = fit_threshold(&pos, &neg).unwrap();
        assert_eq!(t.accuracy, sweep(&pos, &neg));
        let ok = pos.iter().filter(|&&v| t.predict(v)).count() + neg.iter().filter(|&&v| !t.predict(v)).count();
        assert_eq!(ok as f64 / (np + nn) as f64, t.accuracy);
    }
}

#[test]
fn auc_matches_rank_sum() {
    let mut rng = seeded(18);
    for _ in 0..50 {
        let a: Vec<f64> = (0..rng.random_range(1..40)).map(|_| (rng.random_range(0.0..5.0f64)).round()).collect();
        let b: Vec<f64> = (0..rng.random_range(1..40)).map(|_| (rng.random_range(0.0..5.0f64)).round()).collect();
        let mut all: Vec<(f64, bool)> = a.iter().map(|v| (*v, true)).chain(b.iter().map(|v| (*v, false))).collect();
        all.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < all.len() {
            let mut j = i;
            while j < all.len() && all[j].0 == all[i].0 {
                j += 1;
            }
            let mid = (i + 1 + j) as f64 / 2.0;
            rank_sum += all[i..j].iter().filter(|e| e.1).count() as f64 * mid;
            i = j;
        }
        let na = a.len() as f64;
        let want = (rank_sum - na * (na + 1.0) / 2.0) / (na * b.len() as f64);
        assert!((auc(&a, &b) - want).abs() < 1e-12);
    }
}

#[test]
fn logistic_smoothness_bounds_the_hessian() {
    let mut rng = seeded(19);
    let xs: Vec<Vec<f64>> = (0..6).map(|_| gaussian_vec(&mut rng, 2)).collect();
    let ys = vec![0, 1, 2, 0, 1, 2];
    let inst = LogisticInstance::fit(xs.clone(), ys.clone(), 3, 0, 0.5, 200).unwrap();
    let extra = gaussian_vec(&mut rng, 2);
    let beta = inst.smoothness(&extra);
    let mut all = xs.clone();
    all.push(extra);
    let mut labels = ys.clone();
    labels.push(1);
    let total = |theta: &[f64]| -> f64 {
        let mut net = logistic_model(2, 3).unwrap();
        net.set_params(&[theta.to_vec()]).unwrap();
        all.iter().zip(&labels).map(|(x, &y)| -log_softmax(&net.logits(x).unwrap())[y]).sum()
    };
    for _ in 0..5 {
        let theta = gaussian_vec(&mut rng, 9);
        let h = 1e-4;
        let hess = DMatrix::from_fn(9, 9, |i, j| {
            let mut t = theta.clone();
            let mut f = |di: f64, dj: f64| {
                t.copy_from_slice(&theta);
                t[i] += di;
                t[j] += dj;
                total(&t)
            };
            (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h)
        });
        let top = SymmetricEigen::new(0.5 * (&hess + hess.transpose())).eigenvalues.max();
        assert!(top <= beta * (1.0 + 1e-3), "{top} > {beta}");
    }
}

fn conv_model(seed: u64) -> TinyNet {
    let mut rng = seeded(seed);
    let c = Operator::affine(
        Operator::conv1d(1, 1, 6, 3, 1, Padding::Circular, gaussian_vec(&mut rng, 3)).unwrap(),
        gaussian_vec(&mut rng, 6),
    )
    .unwrap();
    let d = Operator::affine(Operator::dense(3, 6, gaussian_vec(&mut rng, 18)).unwrap(), vec![0.0; 3]).unwrap();
    TinyNet::new(vec![Layer::new("conv", c, Activation::Relu), Layer::new("head", d, Activation::Identity)]).unwrap()
}

#[test]
fn lotos_gradient_matches_finite_differences() {
    let ens = vec![conv_model(1), conv_model(2), conv_model(3)];
    let mut rng = seeded(4);
    let batch: Vec<Sample> = (0..4).map(|i| Sample::hard(gaussian_vec(&mut rng, 6), i % 3)).collect();
    let cfg = LotosConfig { k: 2, weights: vec![0.6, 0.4], mal: 0.1, lambda: 0.7, layers: vec!["conv".into()] };
    let vecs: EnsembleVectors = ens
        .iter()
        .map(|m| vec![specshape::lotos::top_vectors(&m.layers[0].op, 2, 0).unwrap()])
        .collect();
    let base = lotos_loss(&ens, &batch, &cfg, &vecs).unwrap();
    let h = 1e-6;
    for m in 0..ens.len() {
        for layer in 0..2 {
            let p = ens[m].layers[layer].op.params();
            for i in 0..p.len() {
                let eval = |d: f64| {
                    let mut e = ens.clone();
                    let mut q = p.clone();
                    q[i] += d;
                    e[m].layers[layer].op.set_params(&q).unwrap();
                    lotos_loss(&e, &batch, &cfg, &vecs).unwrap().loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = base.grads[m][layer][i];
                assert!((fd - g).abs() < 1e-5 * (1.0 + g.abs()), "model {m} layer {layer} param {i}: {fd} vs {g}");
            }
        }
    }
}
