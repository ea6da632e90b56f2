use std::sync::Arc;

use drstrat_core::ambiguity::transport::wasserstein_cost;
use drstrat_core::ambiguity::{wasserstein1_distance_1d, AmbiguitySet};
use drstrat_core::dist::{Grid, Pmf};
use proptest::prelude::*;

fn pmf_on(grid: &Arc<Grid>, weights: &[f64]) -> Pmf {
    Pmf::from_weights(grid.clone(), weights.iter().map(|w| w + 1e-3).collect()).unwrap()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

proptest! {
    #[test]
    fn wasserstein1_is_a_metric(a in weights(6), b in weights(6), c in weights(6)) {
        let grid = Grid::new(vec![0.0, 0.3, 1.0, 1.2, 2.5, 4.0]).unwrap();
        let (p, q, r) = (pmf_on(&grid, &a), pmf_on(&grid, &b), pmf_on(&grid, &c));
        let d = |u: &Pmf, v: &Pmf| wasserstein1_distance_1d(u, v).unwrap();
        prop_assert!(d(&p, &p).abs() < 1e-15);
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-12);
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
        let lp = wasserstein_cost(p.mass(), q.mass(), grid.points(), 1.0);
        prop_assert!((d(&p, &q) - lp).abs() < 1e-9);
    }

    #[test]
    fn projections_land_in_the_set_and_fix_members(a in weights(5), b in weights(5)) {
        let grid = Grid::new(vec![0.0, 1.0, 1.5, 3.0, 3.2]).unwrap();
        let nominal = pmf_on(&grid, &a);
        let target = pmf_on(&grid, &b);
        let sets = [
            AmbiguitySet::l2(nominal.clone(), 0.1).unwrap(),
            AmbiguitySet::wasserstein1(nominal.clone(), 0.2).unwrap(),
            AmbiguitySet::moment(nominal.clone(), 0.05, 0.8, 1.2).unwrap(),
        ];
        for set in &sets {
            let p = set.project(&target).unwrap();
            prop_assert!(set.contains(&p, 1e-8).unwrap(), "{} projection left the set", set.family());
            prop_assert!(set.contains(&nominal, 0.0).unwrap());
            let again = set.project(&nominal).unwrap();
            let moved = again.mass().iter().zip(nominal.mass()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            prop_assert!(moved < 1e-9, "{} moved a member by {}", set.family(), moved);
        }
    }
}
