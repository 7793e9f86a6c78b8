//! Independent oracles for closed-form quantities.

use hetres_core::analysis::{decorrelate_state, participation_ratio, participation_ratio_from_singular, task_state_overlap};
use hetres_core::dynamics::{background_voltage, simulate_lif, LifParams, StateMatrix};
use hetres_core::energy::{atp_cost, emulation_bias, min_cost_frontier, rate_cost, AtpInputs, FlopConstants};
use hetres_core::readout::{fit_ridge, r_squared, score};
use hetres_core::seed;
use hetres_core::topology::{CsrMatrix, Network, NetworkSpec, TauProfile};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian elimination with partial pivoting on `A β = b`.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

#[test]
fn ridge_matches_normal_equations() {
    let mut rng = seed::rng(11);
    let (samples, width) = (200, 5);
    let dim = width + 1;
    let x: Vec<f64> = (0..samples)
        .flat_map(|_| {
            let mut row: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
            row.push(1.0);
            row
        })
        .collect();
    let y: Vec<f64> = (0..samples).map(|_| StandardNormal.sample(&mut rng)).collect();
    let lambda = 1e-6;
    let mut a = vec![vec![0.0; dim]; dim];
    let mut b = vec![0.0; dim];
    for s in 0..samples {
        let row = &x[s * dim..(s + 1) * dim];
        for i in 0..dim {
            b[i] += row[i] * y[s];
            for j in 0..dim {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += lambda;
    }
    let oracle = gauss_solve(a, b);
    let fit = fit_ridge(&x, dim, &y, lambda).unwrap();
    let num: f64 = fit.beta.iter().zip(&oracle).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let den: f64 = oracle.iter().map(|q| q * q).sum::<f64>().sqrt();
    assert!(num / den < 1e-8, "relative error {}", num / den);
    assert!(!fit.eigen_fallback);
}

#[test]
fn in_span_target_is_recovered() {
    let mut rng = seed::rng(3);
    let (samples, width) = (500, 4);
    let x: Vec<f64> = (0..samples)
        .flat_map(|_| {
            let mut row: Vec<f64> = (0..width).map(|_| rng.random_range(0.0..1.0)).collect();
            row.push(1.0);
            row
        })
        .collect();
    let y: Vec<f64> = x.chunks(width + 1).map(|r| r[0]).collect();
    let fit = fit_ridge(&x[..400 * 5], 5, &y[..400], 1e-6).unwrap();
    assert!(score(&fit, &x[400 * 5..], &y[400..]).unwrap() >= 1.0 - 1e-4);
}

#[test]
fn white_noise_prediction_scores_one_minus_q() {
    let mut rng = seed::rng(5);
    let n = 10_000;
    let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.05).sin() + 0.3 * (i as f64 * 0.013).cos()).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let q = 0.25;
    let y_hat: Vec<f64> = y.iter().map(|v| v + (q * var).sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let s = r_squared(&y, &y_hat).unwrap();
    // Sampling sd of the noise power estimate is q·√(2/n) ≈ 0.0035.
    assert!((s - (1.0 - q)).abs() < 0.015, "score {s}");
}

fn rows_to_state(rows: &[Vec<f64>]) -> StateMatrix {
    let l = rows[0].len();
    let data: Vec<f64> = (0..l).flat_map(|s| rows.iter().map(move |r| r[s])).collect();
    StateMatrix::new(rows.len(), 0.01, 0.0, data).unwrap()
}

#[test]
fn overlap_energy_split() {
    let l = 2000;
    let tau = 2.0 * std::f64::consts::PI;
    let wave = |f: f64, ph: f64| -> Vec<f64> { (0..l).map(|i| (tau * f * i as f64 / l as f64 + ph).sin()).collect() };
    let rows = vec![wave(3.0, 0.0), wave(5.0, 0.4), wave(8.0, 1.1)];
    let comps = decorrelate_state(&rows_to_state(&rows), 0.999).unwrap();
    assert_eq!(comps.count(), 3);
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let inside = unit(comps.component(1));
    let outside = unit(&wave(13.0, 0.0));
    for q in [0.0f64, 0.1, 0.37, 0.5, 0.9, 1.0] {
        let y: Vec<f64> = inside.iter().zip(&outside).map(|(a, b)| q.sqrt() * a + (1.0 - q).sqrt() * b).collect();
        let o = task_state_overlap(&y, &comps).unwrap();
        assert!((o - q).abs() < 1e-6, "q={q} overlap={o}");
    }
}

#[test]
fn participation_ratio_of_constructed_spectrum() {
    assert!((participation_ratio_from_singular(&[2.0, 1.0]) - 25.0 / 17.0).abs() < 1e-12);
    // Two orthogonal centered rows with norms 2 and 1.
    let l = 1000;
    let s: Vec<f64> = (0..l).map(|i| (2.0 * std::f64::consts::PI * 4.0 * i as f64 / l as f64).sin()).collect();
    let c: Vec<f64> = (0..l).map(|i| (2.0 * std::f64::consts::PI * 4.0 * i as f64 / l as f64).cos()).collect();
    let x = rows_to_state(&[s.iter().map(|v| 2.0 * v).collect(), c]);
    assert!((participation_ratio(&x).unwrap() - 25.0 / 17.0).abs() < 1e-9);
}

#[test]
fn rate_cost_matches_arithmetic() {
    let c = rate_cost(250, 3, 0.1, 503_800, true, &FlopConstants::default());
    assert_eq!(c.memory_words, 7503.0);
    assert_eq!(c.flops, 7_557_000_000.0);
}

#[test]
fn atp_cost_matches_arithmetic() {
    let r = atp_cost(&AtpInputs::new(100, 0.1, 5.0, 1.0, 1.0)).unwrap();
    // Resting 4.44e10, spikes 6e10, synaptic 163.4e3·1000·5 = 8.17e8.
    let rate = 4.44e10 + 6e10 + 8.17e8;
    let total = 4.0 / 3.0 * rate;
    assert!((r.total - total).abs() <= 1e-12 * total);
    assert_eq!(r.static_cost, 4.44e10);
    assert!((r.dynamic - (total - 4.44e10)).abs() <= 1e-12 * total);
}

#[test]
fn emulation_bias_drives_target_rate() {
    let (v_thr, tau_m, nu) = (0.01, 0.01, 100.0);
    let v_bg = emulation_bias(nu, v_thr, tau_m).unwrap();
    assert!((v_bg - 0.015819767068693265).abs() < 1e-15);
    // Refractory-free LIF, exact exponential update on a fine grid.
    let dt = 1e-7;
    let decay = (-dt / tau_m).exp();
    let (mut v, mut spikes, mut t) = (0.0f64, 0usize, 0.0);
    while t < 1.0 {
        v = v_bg + (v - v_bg) * decay;
        t += dt;
        if v >= v_thr {
            spikes += 1;
            v = 0.0;
        }
    }
    assert!((spikes as f64 - nu).abs() <= 0.02 * nu, "{spikes} spikes");
}

#[test]
fn background_voltage_sets_isolated_rate() {
    let spec = NetworkSpec { n: 40, h: 10.0, profile: TauProfile::Lognormal, ..Default::default() };
    let sampled = Network::build(&spec).unwrap();
    let iso = NetworkSpec { p: 0.0, j: 0.0, j_u: 0.0, j_n: 0.0, k: 1, ..spec.clone() };
    let net = Network::from_parts(iso, CsrMatrix::empty(40, 40), vec![0.0; 40], sampled.tau.clone()).unwrap();
    let params = LifParams::default().with_background_rate(5.0, &net.tau).unwrap();
    let dt = 1e-4;
    let raster = simulate_lif(&net, None, &params, (20.0 / dt) as usize, dt, 0).unwrap();
    for (i, r) in raster.rates().iter().enumerate() {
        assert!((r - 5.0).abs() <= 0.25, "neuron {i} (tau {}) fires at {r}", net.tau[i]);
    }
    let lp = LifParams::default();
    assert!(background_voltage(5.0, 1.0, &lp).unwrap() > lp.v_thr);
    assert!(background_voltage(1e-6, 1.0, &lp).unwrap() - lp.v_thr < 1e-6);
}

#[test]
fn frontier_matches_exhaustive_scan() {
    let mut rng = seed::rng(99);
    let records: Vec<(f64, f64)> =
        (0..1000).map(|_| (rng.random_range(-0.5..1.0), rng.random_range(1.0..100.0))).collect();
    let bins = 20;
    let f = min_cost_frontier(&records, bins);
    let lo = records.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let mut expected = Vec::new();
    for b in 0..bins {
        let w = (hi - lo) / bins as f64;
        let (a, z) = (lo + b as f64 * w, lo + (b + 1) as f64 * w);
        let inside = |s: f64| s >= a && (s < z || b == bins - 1);
        let members: Vec<f64> = records.iter().filter(|r| inside(r.0)).map(|r| r.1).collect();
        if let Some(m) = members.iter().copied().reduce(f64::min) {
            expected.push((b, m, members.len()));
        }
    }
    let got: Vec<(usize, f64, usize)> = f.iter().map(|p| (p.bin, p.min_cost, p.count)).collect();
    assert_eq!(got, expected);
}
