//! Property tests for the spec-level invariants that hold over arbitrary
//! inputs rather than hand-picked cases.

use proptest::prelude::*;

use djscc_core::channel::power_normalize;
use djscc_core::data::{self, ImageBatch};
use djscc_core::layers;
use djscc_core::metrics::{ms_ssim, MsSsimConfig};
use djscc_core::tape::Tape;
use djscc_core::tensor::Tensor;

fn finite_latent(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len).prop_filter("not all zero", |v| {
        v.iter().any(|x| x.abs() > 1e-6)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// power_normalize leaves every block at mean power 1 within 1e-9.
    #[test]
    fn normalized_blocks_have_unit_power(data in finite_latent(24)) {
        let x = Tensor::new(vec![3, 8], data).unwrap();
        let y = power_normalize(&x).unwrap();
        for row in 0..3 {
            let p: f64 = y.data[row * 8..(row + 1) * 8].iter().map(|v| v * v).sum::<f64>() / 8.0;
            prop_assert!((p - 1.0).abs() < 1e-9, "row power {p}");
        }
    }

    /// Elementwise ops broadcast symmetrically: a + b == b + a, a * b == b * a.
    #[test]
    fn broadcast_arithmetic_commutes(
        a in prop::collection::vec(-10.0f64..10.0, 12),
        b in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        let mut t = Tape::new();
        let av = t.constant(a.clone(), vec![3, 4]);
        let bv = t.constant(b.clone(), vec![4]);
        let ab = t.add(av, bv).unwrap();
        let ba = t.add(bv, av).unwrap();
        prop_assert_eq!(t.data(ab), t.data(ba));
        let m1 = t.mul(av, bv).unwrap();
        let m2 = t.mul(bv, av).unwrap();
        prop_assert_eq!(t.data(m1), t.data(m2));
    }

    /// The exact GDN inverse undoes the forward map for positive betas.
    #[test]
    fn gdn_roundtrips_through_exact_inverse(
        data in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 3),
        beta_eff in 0.1f64..2.0,
        gamma_eff in 0.01f64..0.5,
    ) {
        let x = Tensor::new(vec![1, 2, 3, 3], data).unwrap();
        let beta = Tensor::filled(&[2], layers::positive_map_inv(beta_eff));
        let mut gamma = Tensor::filled(&[2, 2], -40.0);
        for i in 0..2 {
            gamma.data[i * 2 + i] = layers::positive_map_inv(gamma_eff);
        }
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let bv = t.leaf(&beta);
        let gv = t.leaf(&gamma);
        let y = layers::gdn(&mut t, xv, bv, gv).unwrap();
        let y_t = Tensor::new(x.shape.clone(), t.data(y).to_vec()).unwrap();
        let back = layers::gdn_invert(&y_t, &beta, &gamma, 1e-13).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            let rel = (a - b).abs() / b.abs().max(1e-8);
            prop_assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    /// MS-SSIM is symmetric in its arguments.
    #[test]
    fn ms_ssim_is_symmetric(seed_a in 0u64..5000, seed_b in 0u64..5000) {
        let a = data::synth_dataset(1, 16, seed_a).unwrap().image(0);
        let b = data::synth_dataset(1, 16, seed_b).unwrap().image(0);
        let cfg = MsSsimConfig::default();
        let ab = ms_ssim(&a, &b, &cfg).unwrap();
        let ba = ms_ssim(&b, &a, &cfg).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    /// Every synthetic batch satisfies the image-batch invariants.
    #[test]
    fn synth_batches_are_valid(n in 1usize..6, seed in 0u64..10_000) {
        let batch = data::synth_dataset(n, 16, seed).unwrap();
        prop_assert_eq!(batch.len(), n);
        prop_assert!(batch.data.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // reconstructing through the constructor revalidates the invariants
        let again = ImageBatch::new(batch.data.clone(), batch.provenance.clone());
        prop_assert!(again.is_ok());
    }

    /// PNG save -> load differs from the source by at most one quantization
    /// step per channel.
    #[test]
    fn png_roundtrip_within_one_step(seed in 0u64..10_000) {
        let dir = std::env::temp_dir().join(format!("djscc-prop-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = data::synth_dataset(1, 8, seed).unwrap().image(0);
        let path = dir.join(format!("p{seed}.png"));
        data::save_image(&img, &path).unwrap();
        let back = data::load_image(&path).unwrap();
        std::fs::remove_file(&path).ok();
        for (a, b) in back.data.data.iter().zip(&img.data) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }
}
