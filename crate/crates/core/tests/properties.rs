use approx::assert_relative_eq;
use proptest::prelude::*;

use ncmn::config::{parse_config, ExperimentConfig};
use ncmn::diagnostics::feature_correlation;
use ncmn::training::{cosine_lr, NoiseType, ScheduleConfig};
use ncmn::Tensor;

proptest! {
    #[test]
    fn config_echo_is_a_fixed_point(
        sigma in 0.0f64..2.0,
        half_depth in 1usize..6,
        width in 1usize..4,
        noise in 0usize..6,
        epochs in 0usize..50,
        seeds in proptest::collection::vec(0u64..1000, 1..4),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.model.noise.sigma = sigma;
        cfg.model.depth = 2 * half_depth + 1;
        cfg.model.width = width;
        cfg.model.noise_type = NoiseType::ALL[noise];
        cfg.train.epochs = epochs;
        cfg.seeds = seeds;
        let echo = cfg.echo();
        let back = parse_config(&echo).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.echo(), echo);
    }

    #[test]
    fn correlation_is_bounded(data in proptest::collection::vec(-5.0f64..5.0, 24)) {
        let t = Tensor::new(&[8, 3], data).unwrap();
        let fc = feature_correlation(&t).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&fc.mean_abs));
        for v in &fc.matrix {
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_is_monotone(total in 1usize..500, base in 1e-4f64..1.0) {
        let s = ScheduleConfig { total_steps: total, base_lr: base };
        assert_relative_eq!(cosine_lr(0, &s).unwrap(), base);
        assert_relative_eq!(cosine_lr(total, &s).unwrap(), 0.0, epsilon = 1e-15);
        let lrs: Vec<f64> = (0..=total).map(|t| cosine_lr(t, &s).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
