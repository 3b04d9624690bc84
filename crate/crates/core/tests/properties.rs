use bagofpaths::{
    kernel, occurrence_betweenness, presence_betweenness, validate_weight_matrix, Framework, KernelMethod,
    PathWeightTables, WeightMatrix,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

// random non-negative matrix rescaled to the requested spectral radius
fn weights(n: usize) -> impl Strategy<Value = WeightMatrix> {
    (
        prop::collection::vec(prop_oneof![Just(0.0), 0.05f64..1.0], n * n),
        0.1f64..0.9,
    )
        .prop_filter_map("no usable matrix", move |(entries, rho)| {
            let m = DMatrix::from_row_slice(n, n, &entries);
            let r = bagofpaths::spectral_radius(&m).ok()?;
            if r < 0.05 {
                return None;
            }
            validate_weight_matrix(m * (rho / r)).ok()
        })
}

fn tables() -> impl Strategy<Value = PathWeightTables> {
    (2usize..=7)
        .prop_flat_map(weights)
        .prop_filter_map("ill-conditioned", |w| PathWeightTables::new(&w).ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hitting_diagonal_is_one(t in tables()) {
        for i in 0..t.n() {
            prop_assert!((t.zh(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn visiting_and_avoiding_partition_paths(t in tables()) {
        for i in 0..t.n() {
            let sum = t.z_plus_node(i).unwrap() + t.z_minus_node(i).unwrap().values();
            prop_assert!((&sum - t.fundamental()).amax() <= 1e-12 * t.fundamental().amax());
            let sum = t.zh_plus_node(i).unwrap() + t.zh_minus_node(i).unwrap().values();
            prop_assert!((&sum - t.hitting()).amax() <= 1e-12 * t.hitting().amax());
        }
    }

    #[test]
    fn betweenness_bounds(t in tables()) {
        for fw in [Framework::Regular, Framework::Hitting] {
            let p = presence_betweenness(&t, fw);
            let o = occurrence_betweenness(&t, fw);
            for i in 0..t.n() {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p[i]), "presence {}", p[i]);
                prop_assert!(o[i] >= p[i] - 1e-12, "occurrence {} < presence {}", o[i], p[i]);
            }
        }
    }

    #[test]
    fn kernels_are_symmetric(t in tables()) {
        for m in KernelMethod::KERNELS {
            let k = match kernel(&t, m, None) {
                Ok(k) => k,
                // a node present on every path has no variance to normalize by
                Err(bagofpaths::Error::DegenerateVariance { .. }) => continue,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert!((&k.values - k.values.transpose()).amax() <= 1e-12 * k.values.amax().max(1e-300));
            if m.parts().unwrap().2 {
                for i in 0..t.n() {
                    prop_assert!((k.values[(i, i)] - 1.0).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn spectral_radius_at_or_above_one_is_rejected(n in 2usize..6, scale in 1.0f64..3.0) {
        // a scaled cycle has spectral radius exactly `scale`
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, (i + 1) % n)] = scale;
        }
        prop_assert!(validate_weight_matrix(m).is_err());
    }
}
