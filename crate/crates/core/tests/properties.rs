use std::collections::BTreeSet;

use cordwarp::centerline::{mad_acd, DirectionCovariance};
use cordwarp::correct::project_diffeomorphic;
use cordwarp::nifti::{decode, encode};
use cordwarp::pipeline::fsl::{read_scheme, write_scheme};
use cordwarp::pipeline::montage::{shuffled, tile, GrayImage};
use cordwarp::sim::{distort_ped, DisplacementField};
use cordwarp::volume::{AcquisitionScheme, Grid, PedSign, Volume};
use proptest::prelude::*;

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-3).then(|| v.map(|x| x / n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Signal kept two voxels away from both ends, so a shift below two voxels
    // never pushes mass off the line.
    #[test]
    fn constant_shift_preserves_line_sums(
        line in prop::collection::vec(0.0f64..100.0, 12),
        shift in -1.9f64..1.9,
        backward in any::<bool>(),
    ) {
        let grid = Grid::new([1, 16, 1], [1.0; 3]).unwrap();
        let mut data = vec![0.0; 16];
        data[2..14].copy_from_slice(&line);
        let truth = Volume::new(grid.clone(), data).unwrap();
        let f = DisplacementField::constant(grid, 1, shift);
        let sign = if backward { PedSign::Backward } else { PedSign::Forward };
        let out = distort_ped(&truth, &f, sign).unwrap();
        let (a, b): (f64, f64) = (truth.data().iter().sum(), out.data().iter().sum());
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn projection_bounds_steps_and_keeps_mean(
        line in prop::collection::vec(-5.0f64..5.0, 2..20),
        floor in 0.05f64..0.9,
    ) {
        let n = line.len();
        let grid = Grid::new([1, n, 1], [1.0; 3]).unwrap();
        let mut b = line.clone();
        project_diffeomorphic(&mut b, &grid, 1, floor);
        for w in b.windows(2) {
            prop_assert!((w[1] - w[0]).abs() <= 1.0 - floor + 1e-12);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&b) - mean(&line)).abs() < 1e-9);
        let mut again = b.clone();
        project_diffeomorphic(&mut again, &grid, 1, floor);
        for (x, y) in again.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mad_and_acd_stay_in_range(dirs in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..40)) {
        let units: Vec<[f64; 3]> = dirs.into_iter().filter_map(unit).collect();
        prop_assume!(!units.is_empty());
        let mut m = [[0.0; 3]; 3];
        for u in &units {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += u[i] * u[j] / units.len() as f64;
                }
            }
        }
        let (mad, acd) = mad_acd(&DirectionCovariance { m, voxels: units.len(), label: None });
        prop_assert!((0.0..=90.0).contains(&mad), "{mad}");
        prop_assert!(acd >= 1.0 / 3.0 - 1e-9 && acd <= 1.0 + 1e-9, "{acd}");
    }

    #[test]
    fn tile_width_is_panels_plus_separators(sizes in prop::collection::vec((1usize..30, 1usize..30), 1..8)) {
        let panels: Vec<GrayImage> = sizes.iter().map(|&(w, h)| GrayImage::new(w, h)).collect();
        let t = tile(&panels);
        prop_assert_eq!(t.width, sizes.iter().map(|s| s.0).sum::<usize>() + sizes.len() - 1);
        prop_assert_eq!(t.height, sizes.iter().map(|s| s.1).max().unwrap());
    }

    #[test]
    fn shuffle_is_a_permutation(n in 1usize..12, seed in any::<u64>(), case in 0usize..50) {
        let methods: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
        let order = shuffled(&methods, seed, case);
        prop_assert_eq!(order.len(), n);
        prop_assert_eq!(order.iter().collect::<BTreeSet<_>>(), methods.iter().collect::<BTreeSet<_>>());
        prop_assert_eq!(shuffled(&methods, seed, case), order);
    }

    #[test]
    fn fsl_scheme_round_trips(entries in prop::collection::vec((0u32..4, prop::array::uniform3(-1.0f64..1.0)), 1..20)) {
        let mut bvalues = Vec::new();
        let mut dirs = Vec::new();
        for (k, d) in entries {
            match (k, unit(d)) {
                (0, _) | (_, None) => {
                    bvalues.push(0.0);
                    dirs.push([0.0; 3]);
                }
                (k, Some(u)) => {
                    bvalues.push(500.0 * k as f64);
                    dirs.push(u);
                }
            }
        }
        let s = AcquisitionScheme::new(bvalues, dirs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("bval"), dir.path().join("bvec"));
        write_scheme(&s, &a, &b).unwrap();
        prop_assert_eq!(read_scheme(&a, &b).unwrap(), s);
    }

    #[test]
    fn nifti_round_trips_float32_values(
        dims in prop::array::uniform3(1usize..6),
        nvol in 1usize..3,
        spacing in prop::array::uniform3(0.25f64..4.0),
        seed in any::<u32>(),
        backward in any::<bool>(),
    ) {
        let spacing = spacing.map(|s| s as f32 as f64);
        let grid = Grid::new(dims, spacing).unwrap();
        let n = grid.len() * nvol;
        let data: Vec<f64> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 10_000) as f32 as f64 * 0.37f32 as f64).collect();
        let mut v = Volume::new_4d(grid, nvol, data).unwrap();
        v.ped_sign = if backward { PedSign::Backward } else { PedSign::Forward };
        let (_, back) = decode(&encode(&v, None).unwrap()).unwrap();
        prop_assert_eq!(back.grid().dims, v.grid().dims);
        prop_assert_eq!(back.grid().spacing, v.grid().spacing);
        prop_assert_eq!(back.nvol(), nvol);
        prop_assert_eq!(back.ped_sign, v.ped_sign);
        for (x, y) in back.data().iter().zip(v.data()) {
            prop_assert_eq!(*x as f32, *y as f32);
        }
    }
}
