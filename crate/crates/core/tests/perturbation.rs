use fairsa_core::fixtures::default_corpus;
use fairsa_core::perturb::{apply, make_ladder, PerturbationKind, PerturbationSpec};
use image::RgbImage;

fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let mse = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.as_raw().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Checked on the smooth (untextured) fixtures. Periodic texture near the
/// box-kernel length makes motion blur non-monotone, as any box filter is.
#[test]
fn degradation_is_monotone_on_fixtures() {
    let corpus = default_corpus(21);
    let textured = corpus.attribute_names.iter().position(|a| a == "Textured").unwrap();
    for kind in [
        PerturbationKind::GaussianBlur,
        PerturbationKind::MotionBlur,
        PerturbationKind::SpeckleNoise,
        PerturbationKind::JpegCompression,
    ] {
        let levels = make_ladder(&PerturbationSpec::with_default_bounds(kind, 6, 3)).unwrap().levels;
        let smooth = (0..corpus.len()).filter(|&i| !corpus.attributes[i][textured]);
        for (image, id) in smooth.map(|i| (&corpus.images[i], &corpus.ids[i])) {
            let mut last = f64::INFINITY;
            for &delta in &levels {
                let p = psnr(image, &apply(image, kind, delta, 3, id).unwrap());
                assert!(p <= last, "{kind} on {id}: PSNR rose to {p} at {delta} (was {last})");
                last = p;
            }
        }
    }
}

#[test]
fn outputs_are_deterministic_across_threads() {
    let corpus = default_corpus(4);
    let jobs: Vec<(usize, PerturbationKind, f64)> = PerturbationKind::ALL
        .iter()
        .flat_map(|&k| {
            let (lo, hi) = k.valid_range();
            [(0, k, hi), (1, k, lo + (hi - lo) * 0.37)]
        })
        .collect();
    let run = || -> Vec<RgbImage> {
        jobs.iter()
            .map(|&(i, k, d)| apply(&corpus.images[i], k, d, 8, &corpus.ids[i]).unwrap())
            .collect()
    };
    let sequential = run();
    let threaded: Vec<Vec<RgbImage>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3).map(|_| s.spawn(run)).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for t in threaded {
        assert_eq!(t, sequential);
    }
}

#[test]
fn every_kind_changes_a_textured_image_at_its_upper_bound() {
    let corpus = default_corpus(2);
    for kind in PerturbationKind::ALL {
        let (_, hi) = kind.valid_range();
        let out = apply(&corpus.images[0], kind, hi, 0, &corpus.ids[0]).unwrap();
        assert_ne!(out, corpus.images[0], "{kind}");
        assert_eq!(out.dimensions(), corpus.images[0].dimensions());
    }
}
