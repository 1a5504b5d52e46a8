use illumsplat::illumination::{classify_means, estimate_prior, spatial_curve, tone, IcLabel};
use illumsplat::image::Image;
use illumsplat::losses::{color_loss, depth_loss, exposure_loss, total_loss, tv, LossWeights};
use illumsplat::metrics::{psnr, ssim};
use proptest::prelude::*;

fn image(w: usize, h: usize, ch: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, w * h * ch).prop_map(move |d| Image::from_vec(w, h, ch, d))
}

fn mask(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(prop::bool::weighted(0.8), w * h)
        .prop_filter("mask selects something", |m| m.iter().any(|b| *b))
        .prop_map(move |m| Image::from_vec(w, h, 1, m.into_iter().map(|b| b as u8 as f64).collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn curve_is_monotone_and_stays_in_range(delta in -1.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let out = spatial_curve(&Image::from_vec(2, 1, 1, vec![lo, hi]), delta);
        prop_assert!(out.data[0] <= out.data[1] + 1e-15);
        prop_assert!(out.data.iter().all(|v| (-1e-15..=1.0 + 1e-15).contains(v)));
    }

    #[test]
    fn tone_is_affine(c in prop::array::uniform3(0.0f64..1.0), beta in 0.0f64..1.0, gamma in 0.0f64..1.0) {
        let t = tone(c, beta, gamma);
        for k in 0..3 {
            prop_assert!((t[k] - (beta * c[k] + gamma)).abs() < 1e-15);
        }
    }

    #[test]
    fn label_is_bright_iff_image_mean_exceeds_prior(img in image(12, 9, 3)) {
        let prior = estimate_prior(&img);
        let label = classify_means(img.mean(), prior.mean);
        prop_assert_eq!(label == IcLabel::Bright, img.mean() > prior.mean);
        prop_assert_eq!(classify_means(prior.mean, prior.mean), IcLabel::Dark);
    }

    #[test]
    fn losses_are_nonnegative(pred in image(10, 8, 3), gt in image(10, 8, 3), m in mask(10, 8)) {
        let w = LossWeights::default();
        prop_assert!(tv(&pred).unwrap().value >= 0.0);
        let c = color_loss(&pred, &gt, &m, &w).unwrap().value;
        prop_assert!(c >= 0.0);
        let e = exposure_loss(&pred, &w).unwrap().value;
        prop_assert!(e >= 0.0);
        let d_pred = pred.gray().map(|v| v + 0.1);
        let d_gt = gt.gray().map(|v| v + 0.1);
        let d = depth_loss(&d_pred, &d_gt, &m, &w).unwrap().value;
        prop_assert!(d >= 0.0);
        prop_assert_eq!(total_loss(c, d, Some(e)).total, c + d + e);
    }

    #[test]
    fn color_loss_vanishes_only_on_masked_agreement(pred in image(6, 6, 3), m in mask(6, 6)) {
        let w = LossWeights { lambda_tv: 0.0, ..LossWeights::default() };
        prop_assert_eq!(color_loss(&pred, &pred, &m, &w).unwrap().value, 0.0);
        // differences under a zero mask are invisible
        let mut other = pred.clone();
        for p in 0..36 {
            if m.data[p] < 0.5 {
                other.data[p * 3] = 1.0 - other.data[p * 3];
            }
        }
        prop_assert_eq!(color_loss(&other, &pred, &m, &w).unwrap().value, 0.0);
    }

    #[test]
    fn exposure_gradient_matches_finite_differences(img in image(5, 4, 3), i in 0usize..60) {
        let w = LossWeights { pool_window: 3, ..LossWeights::default() };
        let g = exposure_loss(&img, &w).unwrap().grad.data[i];
        let h = 1e-6;
        let mut a = img.clone();
        a.data[i] += h;
        let mut b = img.clone();
        b.data[i] -= h;
        let fd = (exposure_loss(&a, &w).unwrap().value - exposure_loss(&b, &w).unwrap().value) / (2.0 * h);
        prop_assert!((g - fd).abs() < 1e-8, "{} vs {}", g, fd);
    }

    #[test]
    fn psnr_is_symmetric(a in image(8, 8, 3), b in image(8, 8, 3)) {
        prop_assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image(12, 12, 3), b in image(12, 12, 3)) {
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
    }
}

#[test]
fn constant_offset_psnr() {
    let a = Image::filled(8, 8, 3, 0.3);
    let b = Image::filled(8, 8, 3, 0.4);
    assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
}
