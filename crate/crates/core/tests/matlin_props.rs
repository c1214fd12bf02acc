use approx::assert_relative_eq;
use hawkes_scaling::matlin::{block_inverse_2x2, build_admissible, real_schur, spectral_radius, spectral_radius_general, Mat};
use hawkes_scaling::{Matrix, C64};
use proptest::prelude::*;

/// Roots of the monic characteristic polynomial by Durand–Kerner.
fn char_poly_roots(a: &Matrix) -> Vec<C64> {
    let d = a.rows();
    let coeffs: Vec<f64> = match d {
        1 => vec![-a[(0, 0)]],
        2 => vec![-a.trace(), a.det()],
        3 => {
            let m = |i: usize, j: usize| a[(i, i)] * a[(j, j)] - a[(i, j)] * a[(j, i)];
            vec![-a.trace(), m(0, 1) + m(0, 2) + m(1, 2), -a.det()]
        }
        _ => unreachable!(),
    };
    let p = |z: C64| coeffs.iter().fold(C64::new(1.0, 0.0), |acc, c| acc * z + c);
    let scale = 1.0 + coeffs.iter().map(|c| c.abs()).fold(0.0, f64::max);
    let mut roots: Vec<C64> = (0..d).map(|k| C64::from_polar(scale, 0.4 + 2.0 * std::f64::consts::PI * k as f64 / d as f64)).collect();
    for _ in 0..2000 {
        for i in 0..d {
            let mut den = C64::new(1.0, 0.0);
            for j in 0..d {
                if i != j {
                    den *= roots[i] - roots[j];
                }
            }
            let r = roots[i];
            roots[i] = r - p(r) / den;
        }
    }
    roots
}

fn nonneg_matrix(d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0.0f64..2.0, d * d).prop_map(move |v| Mat::new(d, d, v).unwrap())
}

fn any_matrix(d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, d * d).prop_map(move |v| Mat::new(d, d, v).unwrap())
}

fn gauss_inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..2 * n).map(|j| if j < n { a[(i, j)] } else if j - n == i { 1.0 } else { 0.0 }).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let row = m[c].clone();
                for (x, y) in m[r].iter_mut().zip(row) {
                    *x -= f * y;
                }
            }
        }
    }
    Mat::from_rows(&m.iter().map(|r| r[n..].to_vec()).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_radius_matches_characteristic_roots(a in (1usize..=3).prop_flat_map(nonneg_matrix)) {
        let rho = spectral_radius(&a, 1e-12).unwrap();
        let oracle = char_poly_roots(&a).iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!((rho - oracle).abs() <= 1e-8 * (1.0 + oracle), "{rho} vs {oracle}");
        let general = spectral_radius_general(&a).unwrap();
        prop_assert!((general - oracle).abs() <= 1e-8 * (1.0 + oracle));
    }

    #[test]
    fn schur_reconstructs(a in (1usize..=4).prop_flat_map(any_matrix)) {
        let (q, u) = real_schur(&a, 1e-12).unwrap();
        let rec = &(&q * &u) * &q.transpose();
        let tol = 1e-10;
        prop_assert!((&a - &rec).norm_inf() <= tol * a.norm_inf().max(1e-300));
        let d = a.rows();
        prop_assert!((&(&q.transpose() * &q) - &Matrix::identity(d)).norm_inf() <= tol);
        for i in 0..d {
            for j in 0..i {
                if j + 1 < i {
                    prop_assert!(u[(i, j)] == 0.0);
                }
            }
        }
    }

    #[test]
    fn block_inverse_agrees_with_elimination(p in 1usize..=3, q in 1usize..=3, vals in prop::collection::vec(-1.0f64..1.0, 36)) {
        let n = p + q;
        let mut a = Mat::new(n, n, vals[..n * n].to_vec()).unwrap();
        for i in 0..n {
            a[(i, i)] += n as f64 + 1.0;
        }
        let inv = block_inverse_2x2(&a.block(0, p, 0, p), &a.block(0, p, p, n), &a.block(p, n, 0, p), &a.block(p, n, p, n)).unwrap();
        let oracle = gauss_inverse(&a);
        prop_assert!((&inv - &oracle).max_abs() <= 1e-10);
    }

    #[test]
    fn admissible_structures_verify(a in (1usize..=4).prop_flat_map(|d| prop::collection::vec(0.05f64..2.0, d * d).prop_map(move |v| Mat::new(d, d, v).unwrap()))) {
        let rho = spectral_radius(&a, 1e-12).unwrap();
        let k = a.scale(1.0 / rho);
        let s = build_admissible(&k, 1e-8).unwrap();
        prop_assert!(s.verify(1e-8).is_ok());
        prop_assert_eq!(s.ell, 1);
        let u_ii = s.u.block(0, s.ell, 0, s.ell);
        prop_assert!((&u_ii - &Matrix::identity(s.ell)).max_abs() == 0.0);
    }
}

#[test]
fn generic_scalar_f32() {
    let a: Mat<f32> = Mat::from_rows(&[vec![0.5, 0.25], vec![0.25, 0.5]]);
    let rho = spectral_radius(&a, 1e-6).unwrap();
    assert_relative_eq!(rho, 0.75, epsilon = 1e-5);
    let inv = a.inverse().unwrap();
    let id = &a * &inv;
    assert_relative_eq!(id[(0, 0)], 1.0, epsilon = 1e-5);
    assert_relative_eq!(id[(0, 1)], 0.0, epsilon = 1e-5);
}
