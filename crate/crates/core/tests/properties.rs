mod common;

use common::*;
use omnic::align::{nearest_class, symmetric_info_nce};
use omnic::autodiff::Tape;
use omnic::eval::{alignment_metric, knn_classify, normalize_rows, principal_axes, uniformity_metric};
use omnic::pretrain::{nt_xent_loss, stacked_pairing, OptimizerConfig};
use omnic::Tensor;
use proptest::prelude::*;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
        .prop_filter("non-degenerate rows", |r| r.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3))
}

fn nt_xent(r: &[Vec<f64>], tau: f64) -> f64 {
    let tape = Tape::<f64>::new();
    let z = tape.var(Tensor::from_vec(&[r.len(), r[0].len()], flatten(r)).unwrap());
    nt_xent_loss(z, &stacked_pairing(r.len() / 2), tau).unwrap().item()
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, f64)> {
    (1usize..=8, 1usize..=32, prop::sample::select(vec![0.05, 0.5, 1.0]))
        .prop_flat_map(|(n, p, tau)| (rows(2 * n, p), Just(tau)))
}

/// Random orthogonal matrix from a product of Householder reflections.
fn orthogonal(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = vs[0].len();
    let mut q: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for v in vs {
        let u = unit(v);
        for row in q.iter_mut() {
            let proj = dot(row, &u);
            row.iter_mut().zip(&u).for_each(|(x, ui)| *x -= 2.0 * proj * ui);
        }
    }
    q
}

fn apply(rows: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| q.iter().map(|qr| dot(r, qr)).collect()).collect()
}

fn units(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    rows(n, d).prop_map(|r| r.iter().map(|v| unit(v)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn nt_xent_matches_oracle((r, tau) in batch()) {
        let got = nt_xent(&r, tau);
        let want = nt_xent_oracle(&r, tau);
        prop_assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        if r.len() == 2 {
            prop_assert!(got.abs() < 1e-7);
        }
    }

    #[test]
    fn nt_xent_is_rotation_and_scale_invariant(
        (r, tau) in batch(),
        refl in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 3),
        scales in prop::collection::vec(0.1f64..10.0, 16),
    ) {
        let d = r[0].len();
        prop_assume!(d >= 4);
        let refl: Vec<Vec<f64>> = refl.iter().map(|v| {
            let mut full = v.clone();
            full.resize(d, 0.3);
            full
        }).collect();
        let rotated = apply(&r, &orthogonal(&refl));
        let scaled: Vec<Vec<f64>> = r.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
        let base = nt_xent(&r, tau);
        prop_assert!((nt_xent(&rotated, tau) - base).abs() < 1e-8);
        prop_assert!((nt_xent(&scaled, tau) - base).abs() < 1e-8);
    }

    #[test]
    fn backward_is_additive(a in rows(3, 4), b in rows(3, 4)) {
        let grad = |which: u8| {
            let tape = Tape::<f64>::new();
            let x = tape.var(Tensor::from_vec(&[3, 4], flatten(&a)).unwrap());
            let w = tape.constant(Tensor::from_vec(&[3, 4], flatten(&b)).unwrap());
            let f1 = x.l2_normalize().mul(w).unwrap().sum();
            let f2 = x.softmax().unwrap().mul(w).unwrap().sum().scale(3.0);
            let out = match which { 0 => f1, 1 => f2, _ => f1.add(f2).unwrap() };
            tape.backward(out).unwrap().get_or_zeros(x).data().to_vec()
        };
        let (g1, g2, g12) = (grad(0), grad(1), grad(2));
        for k in 0..g12.len() {
            prop_assert!((g12[k] - g1[k] - g2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn learning_rate_schedule_shape(
        base in 1e-5f64..1e-2, frac in 0.0f64..1.0, warm in 0usize..6, extra in 1usize..20, spe in 1usize..8,
    ) {
        let cfg = OptimizerConfig::new(base, base * frac, 0.1, warm, warm + extra);
        let total = cfg.epochs * spe;
        let lrs: Vec<f64> = (0..=total).map(|s| cfg.lr_at_step(s, spe)).collect();
        for &lr in &lrs {
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
        }
        let w = warm * spe;
        for s in 1..=w {
            prop_assert!(lrs[s] >= lrs[s - 1]);
        }
        // continuous at the end of warmup and non-increasing after it
        prop_assert!((lrs[w] - base).abs() < 1e-12 * base.max(1.0));
        if w > 0 {
            prop_assert!((lrs[w] - lrs[w - 1]) <= base / w as f64 + 1e-15);
        }
        for s in w + 1..=total {
            prop_assert!(lrs[s] <= lrs[s - 1] + 1e-15);
        }
        prop_assert!((lrs[total] - cfg.min_lr).abs() < 1e-12);
    }

    #[test]
    fn knn_ignores_row_scale(
        train in rows(24, 6), queries in rows(5, 6), k in 1usize..30,
        s_train in prop::collection::vec(0.1f64..10.0, 24), s_query in prop::collection::vec(0.1f64..10.0, 5),
    ) {
        let labels: Vec<u32> = (0..24).map(|i| (i % 3) as u32).collect();
        let t = |r: &[Vec<f64>]| Tensor::from_vec(&[r.len(), 6], flatten(r)).unwrap();
        let scale = |r: &[Vec<f64>], s: &[f64]| -> Vec<Vec<f64>> {
            r.iter().zip(s).map(|(v, c)| v.iter().map(|x| x * c).collect()).collect()
        };
        let a = knn_classify(&t(&train), &labels, &t(&queries), k, 0.07).unwrap();
        let b = knn_classify(&t(&scale(&train, &s_train)), &labels, &t(&scale(&queries, &s_query)), k, 0.07).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_shot_ignores_row_scale(
        queries in rows(6, 5), classes in rows(4, 5), sq in 0.1f32..10.0, sc in prop::collection::vec(0.1f32..10.0, 4),
    ) {
        let q: Vec<f32> = flatten(&queries).iter().map(|&x| x as f32).collect();
        let c: Vec<f32> = flatten(&classes).iter().map(|&x| x as f32).collect();
        let qs: Vec<f32> = q.iter().map(|x| x * sq).collect();
        let cs: Vec<f32> = c.chunks(5).zip(&sc).flat_map(|(r, s)| r.iter().map(move |x| x * s)).collect();
        let t = |n: usize, v: Vec<f32>| Tensor::from_vec(&[n, 5], v).unwrap();
        for qr in &queries {
            let mut cos: Vec<f64> = classes.iter().map(|c| dot(&unit(qr), &unit(c))).collect();
            cos.sort_by(|x, y| y.total_cmp(x));
            prop_assume!(cos[0] - cos[1] > 1e-4);
        }
        let a = nearest_class(&t(6, q), &t(4, c)).unwrap();
        let b = nearest_class(&t(6, qs), &t(4, cs)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn info_nce_matches_oracle(
        (a, b) in (2usize..10, 1usize..16).prop_flat_map(|(m, q)| (rows(m, q), rows(m, q))),
        scale in 1.0f64..100.0,
    ) {
        let tape = Tape::<f64>::new();
        let (m, q) = (a.len(), a[0].len());
        let za = tape.var(Tensor::from_vec(&[m, q], flatten(&a)).unwrap());
        let zb = tape.var(Tensor::from_vec(&[m, q], flatten(&b)).unwrap());
        let ls = tape.var(Tensor::scalar(scale.ln()));
        let got = symmetric_info_nce(za, zb, ls).unwrap().item();
        prop_assert!((got - info_nce_oracle(&a, &b, scale)).abs() < 1e-9);
    }

    #[test]
    fn metrics_match_oracles((a, b) in (2usize..64, 1usize..12).prop_flat_map(|(n, d)| (units(n, d), units(n, d)))) {
        let t = |r: &[Vec<f64>]| Tensor::from_vec(&[r.len(), r[0].len()], flatten(r)).unwrap();
        prop_assert!((alignment_metric(&t(&a), &t(&b)).unwrap() - alignment_oracle(&a, &b)).abs() < 1e-9);
        prop_assert!((uniformity_metric(&t(&a)).unwrap() - uniformity_oracle(&a)).abs() < 1e-9);
        prop_assert_eq!(alignment_metric(&t(&a), &t(&a)).unwrap(), 0.0);
    }

    #[test]
    fn pca_axes_are_orthonormal_and_sorted(x in rows(20, 5)) {
        let t = Tensor::from_vec(&[20, 5], flatten(&x)).unwrap();
        let (values, axes) = principal_axes(&t).unwrap();
        for w in values.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for (i, a) in axes.iter().enumerate() {
            for (j, b) in axes.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot(a, b) - want).abs() < 1e-9);
            }
            let lead = a.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            prop_assert!(lead > 0.0);
        }
        // variance along each axis equals its eigenvalue
        let mean: Vec<f64> = (0..5).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / 20.0).collect();
        for (v, a) in values.iter().zip(&axes) {
            let proj: Vec<f64> = x.iter().map(|r| r.iter().zip(&mean).zip(a).map(|((p, m), c)| (p - m) * c).sum()).collect();
            let var = proj.iter().map(|p| p * p).sum::<f64>() / 19.0;
            prop_assert!((var - v).abs() < 1e-9);
        }
    }
}

#[test]
fn metric_anchors() {
    let x = normalize_rows(&Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -3.0, 0.5, 0.0, 1.0]).unwrap());
    assert_eq!(alignment_metric(&x, &x).unwrap(), 0.0);
    let antipodal = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
    assert_eq!(uniformity_metric(&antipodal).unwrap(), -8.0);
}
