use bsn_core::givens::{
    angle_count, decompose, orthonormality_error, reconstruct, sparsity_pattern, GivensAngles,
};
use bsn_core::spd::{spd_logm, sym_expm, tangent_project, SpdMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (2usize..7).prop_flat_map(|p| (Just(p), 1..p))
}

fn angles(max: f64) -> impl Strategy<Value = GivensAngles> {
    shape().prop_flat_map(move |(p, d)| {
        let k = angle_count(p, d).unwrap();
        prop::collection::vec(-max..max, k)
            .prop_map(move |v| GivensAngles::new(p, d, v).unwrap())
    })
}

fn spd(p: usize) -> impl Strategy<Value = SpdMatrix> {
    prop::collection::vec(-1.0..1.0f64, p * p).prop_map(move |v| {
        let b = DMatrix::from_vec(p, p, v);
        SpdMatrix::new(&b * b.transpose() + DMatrix::identity(p, p) * 0.5).unwrap()
    })
}

fn spd_pair() -> impl Strategy<Value = (SpdMatrix, SpdMatrix, DVector<f64>)> {
    (2usize..6).prop_flat_map(|p| {
        (spd(p), spd(p), prop::collection::vec(-1.0..1.0f64, p).prop_map(DVector::from_vec))
    })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reconstruction_is_orthonormal(a in angles(1.57)) {
        prop_assert!(orthonormality_error(reconstruct(&a).matrix()) < 1e-12);
    }

    #[test]
    fn decomposition_inverts_reconstruction(a in angles(1.2)) {
        let back = decompose(&reconstruct(&a)).unwrap();
        for (x, y) in a.values().iter().zip(back.values()) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_angles_force_flagged_zeros(a in angles(1.5), keep in prop::collection::vec(any::<bool>(), 15)) {
        let values: Vec<f64> = a.values().iter().enumerate()
            .map(|(i, v)| if keep[i % keep.len()] { *v } else { 0.0 })
            .collect();
        let mask: Vec<bool> = values.iter().map(|v| *v == 0.0).collect();
        let sparse = GivensAngles::new(a.p(), a.d(), values).unwrap();
        let gamma = reconstruct(&sparse);
        let pattern = sparsity_pattern(&mask, a.p(), a.d()).unwrap();
        for r in 0..a.p() {
            for c in 0..a.d() {
                if pattern.is_zero(r, c) {
                    prop_assert!(gamma.matrix()[(r, c)].abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn log_and_exp_are_inverse((m, _, _) in spd_pair()) {
        let back = sym_expm(&spd_logm(&m).unwrap()).unwrap();
        prop_assert!(max_abs(&(back.matrix() - m.matrix())) < 1e-10 * max_abs(m.matrix()).max(1.0));
    }

    #[test]
    fn tangent_at_reference_vanishes((m, _, _) in spd_pair()) {
        prop_assert!(max_abs(tangent_project(&m, &m).unwrap().matrix()) < 1e-10);
    }

    #[test]
    fn tangent_is_equivariant_under_rotation((m, r, v) in spd_pair()) {
        prop_assume!(v.norm() > 0.1);
        let p = v.len();
        let q = DMatrix::identity(p, p) - &v * v.transpose() * (2.0 / v.norm_squared());
        let rotate = |s: &SpdMatrix| {
            let x = &q * s.matrix() * q.transpose();
            SpdMatrix::new((&x + x.transpose()) * 0.5).unwrap()
        };
        let lhs = tangent_project(&rotate(&m), &rotate(&r)).unwrap().into_matrix();
        let rhs = &q * tangent_project(&m, &r).unwrap().matrix() * q.transpose();
        prop_assert!(max_abs(&(lhs - rhs)) < 1e-9);
    }
}
