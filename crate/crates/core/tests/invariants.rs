use coronet_core::aso::violation_ratio;
use coronet_core::field::{init_params, EncoderConfig, FieldConfig, NeuralField};
use coronet_core::frequency::FrequencyConfig;
use coronet_core::geometry::{BinaryVolume, GridSpec, ProjectionGeometry, VolumeGrid};
use coronet_core::hash_encoding::HashEncoderConfig;
use coronet_core::metrics::{cl_dice, overlap_metrics, re_mse};
use coronet_core::projector::{backproject, forward_project, ProjectionImage, ProjectorConfig};
use coronet_core::ExecConfig;
use proptest::prelude::*;

fn mask(dims: [usize; 3], bits: &[bool]) -> BinaryVolume {
    let grid = GridSpec::new(dims, [1.0; 3]).unwrap();
    VolumeGrid::new(grid, bits.iter().take(grid.len()).map(|&b| b as u8).collect()).unwrap()
}

fn view(primary: f64, secondary: f64) -> ProjectionGeometry {
    ProjectionGeometry { dsd: 1000.0, dso: 750.0, primary_deg: primary, secondary_deg: secondary, det_u: 12, det_v: 10, du: 1.7, dv: 1.9 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_metrics_are_bounded_and_symmetric(a in prop::collection::vec(any::<bool>(), 120), b in prop::collection::vec(any::<bool>(), 120)) {
        let (ma, mb) = (mask([6, 5, 4], &a), mask([6, 5, 4], &b));
        let (d, i) = overlap_metrics(&ma, &mb).unwrap();
        let (d2, i2) = overlap_metrics(&mb, &ma).unwrap();
        prop_assert_eq!((d, i), (d2, i2));
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
        prop_assert!(i <= d);
        prop_assert!((i - d / (2.0 - d)).abs() <= 4.0 * f64::EPSILON);
        let sym = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / 120.0;
        prop_assert_eq!(re_mse(&ma.to_real::<f64>(), &mb.to_real::<f64>()).unwrap(), sym);
    }

    #[test]
    fn cl_dice_is_bounded(a in prop::collection::vec(any::<bool>(), 512), b in prop::collection::vec(any::<bool>(), 512)) {
        let (ma, mb) = (mask([8, 8, 8], &a), mask([8, 8, 8], &b));
        if let Some(c) = cl_dice(&ma, &mb).unwrap() {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn violation_ratios_of_a_pair_sum_to_one(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        match (violation_ratio(&a, &b), violation_ratio(&b, &a)) {
            (Some(x), Some(y)) => {
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert!((x + y - 1.0).abs() < 1e-9);
            }
            (x, y) => prop_assert!(x.is_none() && y.is_none()),
        }
    }

    #[test]
    fn projection_is_linear_and_nonnegative(
        x in prop::collection::vec(0.0f64..1.0, 216),
        y in prop::collection::vec(0.0f64..1.0, 216),
        s in -3.0f64..3.0,
        angles in (-40.0f64..40.0, -8.0f64..40.0),
    ) {
        let grid = GridSpec::cubic(6, 2.5).unwrap();
        let g = [view(angles.0, angles.1)];
        let (cfg, exec) = (ProjectorConfig::default(), ExecConfig::default());
        let vx = VolumeGrid::new(grid, x.clone()).unwrap();
        let vy = VolumeGrid::new(grid, y.clone()).unwrap();
        let vz = VolumeGrid::new(grid, x.iter().zip(&y).map(|(a, b)| a + s * b).collect()).unwrap();
        let (px, py, pz) = (
            forward_project(&vx, &g, &cfg, &exec).unwrap(),
            forward_project(&vy, &g, &cfg, &exec).unwrap(),
            forward_project(&vz, &g, &cfg, &exec).unwrap(),
        );
        prop_assert!(px[0].data.iter().all(|v| *v >= 0.0));
        for ((a, b), c) in px[0].data.iter().zip(&py[0].data).zip(&pz[0].data) {
            prop_assert!((a + s * b - c).abs() <= 1e-9 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn backprojection_is_the_adjoint(
        x in prop::collection::vec(-1.0f64..1.0, 216),
        r in prop::collection::vec(-1.0f64..1.0, 120),
        angles in (-40.0f64..40.0, -8.0f64..40.0),
    ) {
        let grid = GridSpec::cubic(6, 2.5).unwrap();
        let g = view(angles.0, angles.1);
        let (cfg, exec) = (ProjectorConfig::default(), ExecConfig::default());
        let vx = VolumeGrid::new(grid, x.clone()).unwrap();
        let ax = forward_project(&vx, &[g], &cfg, &exec).unwrap();
        let atr = backproject(&[ProjectionImage { view_id: 0, geometry: g, data: r.clone() }], &grid, &cfg, &exec).unwrap();
        let lhs: f64 = ax[0].data.iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&atr.data).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn field_occupancy_lies_in_unit_interval(seed in any::<u64>(), hash in any::<bool>()) {
        let grid = GridSpec::new([5, 4, 3], [1.0, 1.2, 0.8]).unwrap();
        let enc = if hash {
            EncoderConfig::Hash(HashEncoderConfig { levels: 3, log2_table_size: 8, features: 2, base_resolution: 2, growth: 1.5, input_dim: 3 })
        } else {
            EncoderConfig::Frequency(FrequencyConfig { frequencies: 4 })
        };
        let cfg = FieldConfig::new(enc, 4, 8);
        let field = NeuralField::new(cfg, grid).unwrap();
        let mut p = init_params::<f64>(&cfg, seed);
        p.theta.iter_mut().for_each(|t| *t *= 1e4);
        let vol = field.render(&p, &ExecConfig::default()).unwrap();
        prop_assert!(vol.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
