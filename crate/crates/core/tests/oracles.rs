use std::f64::consts::PI;

use dualview_core::dataset::{Dataset, Factor};
use dualview_core::impute::impute_knn;
use dualview_core::mds::{distance_from_points, geodesic_distances, knn_graph, Disconnection};
use dualview_core::multitest::{
    discovery_rates, multi_t_test, permutation_null, two_sample_t, PermutationSpec, Variant,
};
use dualview_core::nulls::{expected_projection_content, Conditioning, NullSpec};
use dualview_core::special::{student_t_cdf, student_t_two_sided};
use dualview_core::svd::IndexSet;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Shortest path by enumerating every simple path.
fn brute_force_shortest(weights: &DMatrix<f64>, from: usize, to: usize) -> f64 {
    fn walk(w: &DMatrix<f64>, at: usize, to: usize, seen: &mut Vec<bool>, len: f64, best: &mut f64) {
        if at == to {
            *best = best.min(len);
            return;
        }
        for next in 0..w.ncols() {
            if !seen[next] && w[(at, next)].is_finite() {
                seen[next] = true;
                walk(w, next, to, seen, len + w[(at, next)], best);
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; weights.ncols()];
    seen[from] = true;
    let mut best = f64::INFINITY;
    walk(weights, from, to, &mut seen, 0.0, &mut best);
    best
}

#[test]
fn semicircle_geodesic_matches_brute_force() {
    let n = 5;
    let x = DMatrix::from_fn(2, n, |i, k| {
        let theta = PI * k as f64 / (n - 1) as f64;
        if i == 0 {
            theta.cos()
        } else {
            theta.sin()
        }
    });
    let d = distance_from_points(&x).unwrap();
    for k in 2..n {
        // Independent neighbor graph: each point links to its k closest.
        let mut w = DMatrix::from_element(n, n, f64::INFINITY);
        for a in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
            others.sort_by(|&i, &j| d.matrix()[(a, i)].total_cmp(&d.matrix()[(a, j)]).then(i.cmp(&j)));
            for &b in &others[..k] {
                let len = d.matrix()[(a, b)].sqrt();
                w[(a, b)] = len;
                w[(b, a)] = len;
            }
        }
        let g = knn_graph(&d, k, Disconnection::Fail).unwrap();
        let geo = geodesic_distances(&g).unwrap();
        for a in 0..n {
            for b in 0..n {
                let expected = if a == b { 0.0 } else { brute_force_shortest(&w, a, b) };
                let got = geo.matrix()[(a, b)].sqrt();
                assert!((got - expected).abs() < 1e-12, "k={k} ({a},{b}): {got} vs {expected}");
            }
        }
    }
    // With two neighbors the endpoint's second-nearest point is two steps
    // along the arc, so the shortest endpoint path uses two 90° chords.
    let g = knn_graph(&d, 2, Disconnection::Fail).unwrap();
    let end = geodesic_distances(&g).unwrap().matrix()[(0, n - 1)].sqrt();
    assert!((end - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    assert!(end > 2.0);
    // One neighbor each leaves the arc in pieces.
    assert!(knn_graph(&d, 1, Disconnection::Fail).is_err());
}

#[test]
fn knn_imputation_beats_variable_means_on_rank_one_data() {
    let (p, n) = (50, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..3.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let truth = DMatrix::from_fn(p, n, |j, k| u[j] * v[k]);
    let mut mask = DMatrix::from_element(p, n, false);
    let mut masked = 0;
    while masked < p * n / 20 {
        let (j, k) = (rng.random_range(0..p), rng.random_range(0..n));
        if !mask[(j, k)] {
            mask[(j, k)] = true;
            masked += 1;
        }
    }
    let vids = (0..p).map(|j| format!("g{j}")).collect();
    let sids = (0..n).map(|k| format!("s{k}")).collect();
    let d = Dataset::new(truth.clone(), mask.clone(), vids, sids).unwrap();
    let imputed = impute_knn(&d, 10).unwrap().dataset;

    let mut knn_err = 0.0;
    let mut mean_err = 0.0;
    for j in 0..p {
        let observed: Vec<f64> = (0..n).filter(|&k| !mask[(j, k)]).map(|k| truth[(j, k)]).collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        for k in (0..n).filter(|&k| mask[(j, k)]) {
            knn_err += (imputed.values()[(j, k)] - truth[(j, k)]).powi(2);
            mean_err += (mean - truth[(j, k)]).powi(2);
        }
    }
    assert!(knn_err < mean_err, "knn {knn_err} vs mean {mean_err}");
}

#[test]
fn t_distribution_matches_closed_form_and_reference() {
    // df = 4: F(t) = 1/2 + (3/8)·s·(1 − s²/12) with s = t/√(1 + t²/4).
    for &t in &[-6.0f64, -1.549_193_338_482_966_6, -0.3, 0.0, 0.8, 2.5, 11.0] {
        let s = t / (1.0 + t * t / 4.0).sqrt();
        let closed = 0.5 + 0.375 * s * (1.0 - s * s / 12.0);
        assert!((student_t_cdf(t, 4.0) - closed).abs() < 1e-13, "t={t}");
    }
    for &df in &[1.0, 2.5, 4.0, 9.0, 30.0, 148.0] {
        let reference = StudentsT::new(0.0, 1.0, df).unwrap();
        for &t in &[-20.0, -3.0, -1.0, -0.1, 0.5, 2.0, 7.5] {
            let ours = student_t_two_sided(t, df);
            let theirs = 2.0 * reference.cdf(-f64::abs(t));
            assert!((ours - theirs).abs() < 1e-10, "df={df} t={t}: {ours} vs {theirs}");
        }
    }
    let hand = two_sample_t(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], Variant::Pooled, 0).unwrap();
    assert_eq!(hand.df, 4.0);
    assert!((hand.t + 2.0 / (2.5f64 * 2.0 / 3.0).sqrt()).abs() < 1e-14);
}

#[test]
fn null_content_shrinks_as_variables_grow() {
    let s = IndexSet::leading(3).unwrap();
    let mut last = f64::INFINITY;
    for p in [100, 400, 1600, 6400] {
        let mut spec = NullSpec::new(p, 40, 5);
        spec.conditioning = Conditioning::Standardized;
        spec.trials = 8;
        let est = expected_projection_content(&spec, &s).unwrap();
        // Random spectra flatten toward the uniform share 3/(N−1) as p grows.
        assert!(est.mean < last, "p={p}: {} >= {last}", est.mean);
        assert!(est.mean > 3.0 / 39.0);
        last = est.mean;
    }
}

#[test]
fn discovery_rates_from_the_outcome_table() {
    // 6 nulls (2 rejected), 4 alternatives (3 rejected).
    let is_null = [true, true, true, true, true, true, false, false, false, false];
    let rejected = [true, false, true, false, false, false, true, true, true, false];
    let (c, r) = discovery_rates(&is_null, &rejected).unwrap();
    assert_eq!((c.U, c.V, c.T, c.S), (4, 2, 1, 3));
    assert_eq!((c.m(), c.m0(), c.r()), (10, 6, 5));
    assert_eq!(r.fdr_est, 0.4);
    assert_eq!(r.fndr, 0.2);
    assert_eq!(r.fnr, Some(0.25));
    assert_eq!(r.fpr, Some(2.0 / 6.0));
}

#[test]
fn permutation_p_values_track_parametric_ones() {
    let (p, n) = (30, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    for k in 0..8 {
        for j in 0..5 {
            x[(j, k)] += 3.0;
        }
    }
    let labels: Vec<&str> = (0..n).map(|k| if k < 8 { "a" } else { "b" }).collect();
    let factor = Factor::from_labels("g", &labels).unwrap();
    let d = Dataset::from_matrix(x).unwrap();
    let spec = PermutationSpec { trials: 999, seed: 4 };
    let perm = permutation_null(&d, &factor, "a", "b", Variant::Pooled, 0, spec).unwrap();
    let param = multi_t_test(&d, &factor, "a", "b", Variant::Pooled, 0).unwrap();
    assert_eq!(perm, permutation_null(&d, &factor, "a", "b", Variant::Pooled, 0, spec).unwrap());
    for (j, (&pp, row)) in perm.iter().zip(&param.rows).enumerate() {
        assert!(pp >= 1.0 / 1000.0 && pp <= 1.0);
        if j < 5 {
            assert!(pp < 0.01, "planted variable {j}: {pp}");
        }
        // Monte-Carlo error of a 999-draw estimate is at most ~0.016.
        assert!((pp - row.p).abs() < 0.08, "variable {j}: {pp} vs {}", row.p);
    }
}
