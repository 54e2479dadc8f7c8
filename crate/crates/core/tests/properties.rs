use flowdeblur::blur::{apply_blur, apply_blur_adjoint, BlurParams};
use flowdeblur::evalkit::{epe, psnr};
use flowdeblur::flow::{compose_flow, compute_edge_map};
use flowdeblur::image::{diff_x, diff_x_adjoint, diff_y, diff_y_adjoint, sample_bilinear};
use flowdeblur::io::{decode_flo, decode_pnm, encode_flo, encode_pnm};
use flowdeblur::latent::dual_update_spatial;
use flowdeblur::refine::{spatiotemporal_filter, OcclusionMap};
use flowdeblur::{FlowField, Image, SequenceState};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn image(w: usize, h: usize, c: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, w * h * c).prop_map(move |d| Image::from_planar(w, h, c, d).unwrap())
}

fn flow(w: usize, h: usize, mag: f64) -> impl Strategy<Value = FlowField> {
    (
        prop::collection::vec(-mag..mag, w * h),
        prop::collection::vec(-mag..mag, w * h),
    )
        .prop_map(move |(u, v)| FlowField::from_parts(w, h, u, v).unwrap())
}

/// Image, two flows and blur parameters on a shared random size.
fn blur_case() -> impl Strategy<Value = (Image, Image, FlowField, FlowField, BlurParams)> {
    (2usize..12, 2usize..12, prop::sample::select(vec![1usize, 3]))
        .prop_flat_map(|(w, h, c)| {
            (
                image(w, h, c),
                image(w, h, c),
                flow(w, h, 5.0),
                flow(w, h, 5.0),
                0.05f64..=1.0,
                2usize..8,
            )
        })
        .prop_map(|(a, b, f, g, tau, s)| (a, b, f, g, BlurParams::new(tau, s).unwrap()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blur_is_a_convex_combination((l, _, f, b, bp) in blur_case()) {
        let out = apply_blur(&l, &f, &b, bp).unwrap();
        let lo = l.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = l.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn blur_adjoint_identity((l, r, f, b, bp) in blur_case()) {
        let kl = apply_blur(&l, &f, &b, bp).unwrap();
        let ktr = apply_blur_adjoint(&r, &f, &b, bp).unwrap();
        let (lhs, rhs) = (dot(kl.data(), r.data()), dot(l.data(), ktr.data()));
        prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()).max(1e-12));
    }

    #[test]
    fn derivative_adjoints(a in image(7, 5, 1), b in image(7, 5, 1)) {
        let mut t = vec![0.0; 35];
        let mut s = vec![0.0; 35];
        diff_x(a.data(), 7, 5, &mut t);
        diff_x_adjoint(b.data(), 7, 5, &mut s);
        prop_assert!((dot(&t, b.data()) - dot(a.data(), &s)).abs() <= 1e-10);
        diff_y(a.data(), 7, 5, &mut t);
        diff_y_adjoint(b.data(), 7, 5, &mut s);
        prop_assert!((dot(&t, b.data()) - dot(a.data(), &s)).abs() <= 1e-10);
    }

    #[test]
    fn sampling_is_linear(a in image(6, 6, 3), b in image(6, 6, 3), x in -2.0f64..8.0, y in -2.0f64..8.0, s in -3.0f64..3.0) {
        let mix = a.with_data(a.data().iter().zip(b.data()).map(|(p, q)| s * p + q).collect());
        let (pa, pb, pm) = (sample_bilinear(&a, x, y), sample_bilinear(&b, x, y), sample_bilinear(&mix, x, y));
        for c in 0..3 {
            prop_assert!((pm[c] - (s * pa[c] + pb[c])).abs() <= 1e-12);
        }
    }

    #[test]
    fn epe_is_a_mean_distance(a in flow(5, 4, 6.0), b in flow(5, 4, 6.0)) {
        let ab = epe(&a, &b, None).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, epe(&b, &a, None).unwrap());
        prop_assert_eq!(epe(&a, &a, None).unwrap(), 0.0);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn compose_with_zero_is_identity(a in flow(6, 5, 4.0)) {
        prop_assert_eq!(compose_flow(&a, &FlowField::zeros(6, 5)).unwrap(), a);
    }

    #[test]
    fn edge_map_bounded(l in image(8, 8, 3), nu in 0.1f64..50.0) {
        let e = compute_edge_map(&l, nu, 25.0 / 255.0);
        for &g in &e.g {
            prop_assert!(g > 0.0 && g <= nu);
        }
    }

    #[test]
    fn spatial_dual_is_projected(l in image(6, 5, 1), s0 in prop::collection::vec(-1.0f64..1.0, 60), eta in 0.01f64..10.0) {
        let s = dual_update_spatial(&s0, &l, eta).unwrap();
        prop_assert!(s.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn filter_stays_inside_the_stack(frames in prop::collection::vec(image(8, 6, 1), 3), f in flow(8, 6, 2.0), b in flow(8, 6, 2.0)) {
        let mut state = SequenceState::from_blurry(frames.clone(), 0.8).unwrap();
        for i in 0..3 {
            state.fwd[i] = f.clone();
            state.bwd[i] = b.clone();
        }
        let occ = OcclusionMap::from_state(&state, 2, 1.0).unwrap();
        let out = spatiotemporal_filter(&state, &occ, 25.0 / 255.0, 2).unwrap();
        // samples come from warped neighbourhoods, so the bound is the whole stack
        let lo = frames.iter().flat_map(|f| f.data()).copied().fold(f64::INFINITY, f64::min);
        let hi = frames.iter().flat_map(|f| f.data()).copied().fold(f64::NEG_INFINITY, f64::max);
        for o in &out {
            prop_assert!(o.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn flo_round_trip(w in 1usize..6, h in 1usize..6, seed in prop::collection::vec(-1e4f32..1e4, 72)) {
        let u: Vec<f64> = seed[..w * h].iter().map(|&x| x as f64).collect();
        let v: Vec<f64> = seed[36..36 + w * h].iter().map(|&x| x as f64).collect();
        let f = FlowField::from_parts(w, h, u, v).unwrap();
        prop_assert_eq!(decode_flo(&encode_flo(&f)).unwrap(), f);
    }

    #[test]
    fn pnm_round_trip(c in prop::sample::select(vec![1usize, 3]), bytes in prop::collection::vec(any::<u8>(), 4 * 3 * 3)) {
        let n = 4 * 3 * c;
        let img = Image::from_fn(4, 3, c, |x, y, ch| bytes[(ch * 12 + y * 4 + x) % n] as f64 / 255.0);
        prop_assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
    }
}

#[test]
fn psnr_falls_with_noise_amplitude() {
    let reference = Image::from_fn(16, 16, 1, |x, y, _| ((x * 3 + y * 5) % 17) as f64 / 20.0 + 0.1);
    let noise: Vec<f64> = (0..256).map(|k| if (k * 7919) % 13 < 6 { 1.0 } else { -1.0 }).collect();
    let scores: Vec<f64> = [0.01, 0.03, 0.09]
        .iter()
        .map(|a| {
            let noisy = reference.with_data(reference.data().iter().zip(&noise).map(|(r, n)| r + a * n).collect());
            psnr(&noisy, &reference).unwrap()
        })
        .collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}
