use locogan::geometry::{
    latent_size_for_target, resample_grid, stack_output_size, stack_sizes, FootprintMap, Grid, LayerSpec,
};
use locogan::model::NetworkConfig;
use ndarray::Array3;
use proptest::prelude::*;

fn reference_stack() -> Vec<LayerSpec> {
    NetworkConfig::reference_generator(20, 2).layers
}

/// Latent sets per output pixel by pushing index sets through each layer:
/// input `i` of a transposed layer reaches outputs `i·s − p + t`, `t < k`.
fn brute_force_footprints(layers: &[LayerSpec], n: usize) -> Vec<Vec<usize>> {
    let sizes = stack_sizes(n, layers).unwrap();
    let mut sets: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for (l, layer) in layers.iter().enumerate() {
        let out = sizes[l + 1];
        let mut next = vec![Vec::new(); out];
        for (i, set) in sets.iter().enumerate() {
            for t in 0..layer.kernel {
                let o = (i * layer.stride + t) as i64 - layer.padding as i64;
                if (0..out as i64).contains(&o) {
                    next[o as usize].extend(set);
                }
            }
        }
        for s in &mut next {
            s.sort_unstable();
            s.dedup();
        }
        sets = next;
    }
    sets
}

#[test]
fn reference_stack_intervals_match_index_propagation() {
    let fp = FootprintMap::new(&reference_stack()).unwrap();
    for n in [4, 7, 10] {
        let oracle = brute_force_footprints(&reference_stack(), n);
        let analytic = fp.intervals(n).unwrap();
        for (j, (set, &(lo, hi))) in oracle.iter().zip(&analytic).enumerate() {
            assert_eq!(set, &(lo..=hi).collect::<Vec<_>>(), "n = {n}, output pixel {j}");
        }
    }
}

#[test]
fn reference_stack_output_pixels_are_edge_independent() {
    // A pixel's footprint, read relative to its owner, is the same in a small
    // latent as deep inside a large one; so no output pixel sees the border.
    let fp = FootprintMap::new(&reference_stack()).unwrap();
    let big = fp.intervals(40).unwrap();
    for n in 4..12 {
        let small = fp.intervals(n).unwrap();
        for (j, &(lo, hi)) in small.iter().enumerate() {
            let shifted = big[j + 16 * 14];
            assert_eq!((lo + 14, hi + 14), shifted, "n = {n}, pixel {j}");
        }
    }
    assert_eq!(fp.margin(), 2);
}

#[test]
fn footprints_need_kernel_at_least_stride() {
    assert!(FootprintMap::new(&[LayerSpec::transposed(1, 1, 1, 2, 0)]).is_err());
}

#[test]
fn shape_law_over_the_acceptance_range() {
    for n in 4..=32usize {
        assert_eq!(stack_output_size(n, &reference_stack()).unwrap(), 16 * n - 63);
    }
}

fn arbitrary_stack() -> impl Strategy<Value = Vec<LayerSpec>> {
    prop::collection::vec((1usize..4, 0usize..3), 1..4).prop_map(|layers| {
        layers
            .into_iter()
            .map(|(s, extra)| LayerSpec::transposed(1, 1, s + extra, s, (s + extra - 1) / 2))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn intervals_agree_with_propagation(layers in arbitrary_stack(), n in 3usize..9) {
        prop_assume!(stack_sizes(n, &layers).is_ok());
        let fp = FootprintMap::new(&layers).unwrap();
        let oracle = brute_force_footprints(&layers, n);
        for (set, (lo, hi)) in oracle.iter().zip(fp.intervals(n).unwrap()) {
            prop_assert_eq!(set, &(lo..=hi).collect::<Vec<_>>());
        }
    }

    #[test]
    fn solver_returns_the_smallest_covering_latent(target in 1usize..700) {
        let (n, offset) = latent_size_for_target(target, &reference_stack()).unwrap();
        let raw = 16 * n - 63;
        prop_assert!(raw >= target);
        prop_assert!(n == 4 || 16 * (n - 1) - 63 < target);
        prop_assert_eq!(offset, (raw - target) / 2);
    }

    #[test]
    fn resampling_keeps_constants(c in -5.0f64..5.0, h in 1usize..9, w in 1usize..9, th in 1usize..12, tw in 1usize..12) {
        let g = Grid::new(Array3::from_elem((2, h, w), c));
        let r = resample_grid(&g, th, tw);
        prop_assert_eq!(r.values().dim(), (2, th, tw));
        prop_assert!(r.values().iter().all(|&v| (v - c).abs() <= 1e-12 * c.abs().max(1.0)));
        prop_assert_eq!(resample_grid(&g, h, w), g);
    }
}
