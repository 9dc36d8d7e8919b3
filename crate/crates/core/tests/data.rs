use proptest::prelude::*;
use skd::data::*;
use skd::metrics::{psnr, ssim};
use skd::tensor::Tensor;

fn spec(count: usize, patch: usize) -> CorpusSpec {
    CorpusSpec {
        count,
        patch_size: patch,
        ..CorpusSpec::default()
    }
}

#[test]
fn corpus_is_deterministic_and_thread_independent() {
    let s = CorpusSpec {
        channels: 3,
        ..spec(12, 16)
    };
    let a = make_clean_corpus(&s).unwrap();
    let b = make_clean_corpus(&s).unwrap();
    let c = make_clean_corpus_parallel(&s, 4).unwrap();
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert!(x.bits_eq(y) && x.bits_eq(z));
    }
}

#[test]
fn corpus_mean_is_calibrated() {
    let imgs = make_clean_corpus_parallel(&spec(1000, 16), 4).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let m = img.mean();
        assert!(m > 0.2 && m < 0.8, "image {i} mean {m}");
    }
}

#[test]
fn degradation_is_seeded() {
    let img = clean_image(&spec(1, 32), 0);
    let p = Degradation::default();
    for task in Task::ALL {
        let a = degrade(&img, task, &p, 9).unwrap();
        assert!(a.bits_eq(&degrade(&img, task, &p, 9).unwrap()));
        assert!(
            psnr(&img, &a, 1.0).unwrap() < 100.0,
            "{task} changed nothing"
        );
    }
}

#[test]
fn psnr_decreases_with_strength() {
    let grid = |task: Task, k: f64| match task {
        Task::Denoise => Degradation {
            noise_sigma: 0.02 * k,
            ..Degradation::default()
        },
        Task::Deblur => Degradation {
            blur_sigma: 0.5 * k,
            ..Degradation::default()
        },
        Task::Derain => Degradation {
            rain_density: 0.005 * k,
            ..Degradation::default()
        },
    };
    for index in 0..8 {
        let img = clean_image(&spec(8, 32), index);
        for task in Task::ALL {
            let mut last = f64::INFINITY;
            for k in 1..=5 {
                let d = degrade(&img, task, &grid(task, k as f64), 42 + index as u64).unwrap();
                let p = psnr(&img, &d, 1.0).unwrap();
                assert!(
                    p.is_finite() && p < last,
                    "{task} image {index} step {k}: {p} !< {last}"
                );
                last = p;
            }
        }
    }
}

#[test]
fn strong_noise_drops_ssim() {
    let img = clean_image(&spec(1, 32), 3);
    let noisy = degrade(
        &img,
        Task::Denoise,
        &Degradation {
            noise_sigma: 0.5,
            ..Degradation::default()
        },
        1,
    )
    .unwrap();
    assert!(ssim(&img, &noisy, 1.0).unwrap() < 0.9);
}

#[test]
fn samples_are_normalized() {
    for task in Task::ALL {
        let samples = make_samples(&spec(4, 16), task, 2).unwrap();
        for s in &samples {
            assert_eq!(s.clean.shape(), s.degraded.shape());
            for v in s.clean.data().iter().chain(s.degraded.data()) {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }
}

#[test]
fn normalize_roundtrip_on_dyadic_values() {
    let vals: Vec<f64> = (0..=256).map(|k| k as f64 / 256.0).collect();
    let t = Tensor::<f64>::from_f64(&[vals.len()], &vals).unwrap();
    assert!(denormalize(&normalize(&t).unwrap()).unwrap().bits_eq(&t));
}

#[test]
fn batches_are_reproducible_and_drop_remainder() {
    let a: Vec<_> = batch_iter(17, 8, 3).unwrap().take(6).collect();
    let b: Vec<_> = batch_iter(17, 8, 3).unwrap().take(6).collect();
    assert_eq!(a, b);
    let it = batch_iter(17, 8, 3).unwrap();
    assert_eq!(it.batches_per_epoch(), 2);
    for epoch in a.chunks(2) {
        let mut seen: Vec<usize> = epoch.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16);
    }
    assert_ne!(a[0..2], a[2..4], "epochs reshuffle");
}

#[test]
fn pnm_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    for c in [1, 3] {
        let vals: Vec<f64> = (0..c * 6 * 5)
            .map(|i| ((i * 37) % 256) as f64 / 255.0)
            .collect();
        let img = Tensor::<f64>::from_f64(&[c, 6, 5], &vals).unwrap();
        let path = dir.path().join(format!("img{c}.pnm"));
        write_pnm(&path, &img).unwrap();
        assert!(read_pnm(&path).unwrap().bits_eq(&img));
    }
    let bad = dir.path().join("bad.pgm");
    std::fs::write(&bad, b"P2\n1 1\n255\n0").unwrap();
    assert!(read_pnm(&bad).is_err());
    std::fs::write(&bad, b"P5\n4 4\n255\n\x00\x01").unwrap();
    assert!(read_pnm(&bad).is_err());
}

proptest! {
    #[test]
    fn degraded_stays_in_unit_range(seed in 0u64..1000, idx in 0usize..50, s in 0.0f64..1.0) {
        let img = clean_image(&CorpusSpec { base_seed: seed, ..spec(1, 16) }, idx);
        let p = Degradation { noise_sigma: s, blur_sigma: 3.0 * s, rain_density: 0.05 * s, ..Degradation::default() };
        for task in Task::ALL {
            let d = degrade(&img, task, &p, seed).unwrap();
            prop_assert!(d.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let n = normalize(&d).unwrap();
            prop_assert!(n.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn normalize_roundtrip_close(x in 0.0f64..=1.0) {
        let t = Tensor::<f64>::from_f64(&[1], &[x]).unwrap();
        let back = denormalize(&normalize(&t).unwrap()).unwrap().item();
        prop_assert!((back - x).abs() <= f64::EPSILON);
    }
}
