use proptest::prelude::*;
use solfgr_core::banded::{sturm_count, tridiagonal_eigenvalue, BandMatrix};
use solfgr_core::model::{bilinear, sphere_area, Nonlinearity, RadialGrid, SpinorField};
use solfgr_core::C64;

fn nonlinearity() -> impl Strategy<Value = Nonlinearity> {
    prop_oneof![
        (1usize..4).prop_map(|k| Nonlinearity::PurePower { p: (2 * k + 1) as f64 }),
        (0.1f64..2.0, 0.0f64..0.5).prop_map(|(a, b)| Nonlinearity::CubicQuintic { a, b }),
        (0.1f64..3.0).prop_map(|kappa| Nonlinearity::Saturable { kappa }),
    ]
}

/// Composite Simpson rule, independent of the closed-form primitive.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 400;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

proptest! {
    #[test]
    fn derivatives_match_differences(spec in nonlinearity(), s in 0.05f64..3.0, k in 0usize..3) {
        let h = 1e-4 * (1.0 + s);
        let fd = (spec.derivative(s + h, k) - spec.derivative(s - h, k)) / (2.0 * h);
        let exact = spec.derivative(s, k + 1);
        prop_assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "{fd} vs {exact}");
    }

    #[test]
    fn secant_is_mean_of_beta(spec in nonlinearity(), s0 in 0.0f64..2.0, ds in -1.0f64..1.0) {
        let s1 = (s0 + ds).max(0.0);
        prop_assume!((s1 - s0).abs() > 1e-3);
        let mean = simpson(|s| spec.beta(s), s0, s1) / (s1 - s0);
        prop_assert!((spec.secant(s0, s1) - mean).abs() <= 1e-8 * (1.0 + mean.abs()));
    }

    #[test]
    fn band_lu_solves(n in 3usize..60, seed in any::<u64>()) {
        let mut state = seed | 1;
        let mut rnd = || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5 };
        let mut a = BandMatrix::<f64>::zeros(n, 2, 1);
        for i in 0..n {
            for j in i.saturating_sub(2)..(i + 2).min(n) {
                a.set(i, j, rnd());
            }
        }
        let x: Vec<f64> = (0..n).map(|_| rnd()).collect();
        let b = a.matvec(&x);
        let lu = a.clone().factor();
        prop_assume!(lu.relative_min_pivot() > 1e-6);
        let y = lu.solve(&b);
        let r = a.matvec(&y);
        let err = r.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-9 * (1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max)));
    }

    #[test]
    fn sturm_counts_bracket_bisection(diag in prop::collection::vec(-3.0f64..3.0, 2..30), off_seed in 0.1f64..1.0, k_frac in 0.0f64..1.0) {
        let n = diag.len();
        let off: Vec<f64> = (0..n - 1).map(|i| off_seed * (1.0 + i as f64).sin()).collect();
        let k = ((n - 1) as f64 * k_frac) as usize;
        let e = tridiagonal_eigenvalue(&diag, &off, k, 1e-13);
        prop_assert!(sturm_count(&diag, &off, e - 1e-8) <= k);
        prop_assert!(sturm_count(&diag, &off, e + 1e-8) > k);
    }

    #[test]
    fn laplacian_is_symmetric_in_the_weights(dim in 3usize..7, m in 20usize..120, seed in any::<u64>()) {
        let grid = RadialGrid::new(dim, 10.0, m).unwrap();
        let n = grid.len();
        let mut state = seed | 1;
        let mut rnd = || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; (state >> 11) as f64 / (1u64 << 53) as f64 };
        let u: Vec<f64> = (0..n).map(|_| rnd()).collect();
        let v: Vec<f64> = (0..n).map(|_| rnd()).collect();
        let w = grid.weights();
        let (lu, lv) = (grid.laplacian(&u), grid.laplacian(&v));
        let a: f64 = (0..n).map(|j| w[j] * u[j] * lv[j]).sum();
        let b: f64 = (0..n).map(|j| w[j] * v[j] * lu[j]).sum();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()), "{a} vs {b}");
        // ⟨u, -Δu⟩ ≥ 0
        let q: f64 = (0..n).map(|j| -w[j] * u[j] * lu[j]).sum();
        prop_assert!(q >= -1e-10 * a.abs());
    }

    #[test]
    fn spinor_algebra(vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 6..40)) {
        let n = vals.len() / 2;
        let grid = RadialGrid::new(3, 5.0, n + 1).unwrap();
        let mut f = SpinorField::zeros(n);
        let mut g = SpinorField::zeros(n);
        for j in 0..n {
            f.a[j] = C64::new(vals[j].0, vals[j].1);
            f.b[j] = C64::new(vals[n + j].1, vals[n + j].0);
            g.a[j] = C64::new(vals[n + j].0, -vals[j].1);
            g.b[j] = C64::new(vals[j].0, vals[n + j].1);
        }
        prop_assert_eq!(f.sigma1().sigma1(), f.clone());
        prop_assert_eq!(f.sigma3().sigma3(), f.clone());
        prop_assert!((bilinear(&grid, &f, &g) - bilinear(&grid, &g, &f)).norm() <= 1e-14);
        // σ3 is symmetric and σ1σ3 = -σ3σ1 under the bilinear pairing
        prop_assert!((bilinear(&grid, &f.sigma3(), &g) - bilinear(&grid, &f, &g.sigma3())).norm() <= 1e-14);
        prop_assert_eq!(f.sigma1().sigma3(), f.sigma3().sigma1().scale_re(-1.0));
    }
}

#[test]
fn weights_integrate_the_ball() {
    for dim in 3..7 {
        let grid = RadialGrid::new(dim, 2.0, 4000).unwrap();
        let ones = vec![1.0; grid.len()];
        let want = sphere_area(dim) * 2f64.powi(dim as i32) / dim as f64;
        let got = grid.integrate(&ones);
        assert!((got - want).abs() < 5e-3 * want, "d = {dim}: {got} vs {want}");
    }
}
