//! Property tests for the structural invariants: filter moment identities,
//! shift equivariance, padding inverses, transform round trips, and the
//! container format.

use proptest::prelude::*;

use gridcorr::graph::Graph;
use gridcorr::io::{read_record, write_record, AnyTensor};
use gridcorr::stencil::{build_kernel, SymmetricFilterParams};
use gridcorr::tensor::{crop, pad_periodic, Tensor};

fn params_strategy() -> impl Strategy<Value = [f64; 7]> {
    prop::array::uniform7(-1.0f64..1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn structural_moments_vanish_exactly(a in params_strategy()) {
        let k = build_kernel(&SymmetricFilterParams { a });
        prop_assert_eq!(k.moment(0, 0), 0.0);
        prop_assert_eq!(k.moment(0, 1), 0.0);
        prop_assert_eq!(k.moment(0, 2), 0.0);
        prop_assert_eq!(k.moment(2, 0), 0.0);
        prop_assert_eq!(k.moment(0, 3), -12.0 * a[6]);
        prop_assert_eq!(k.moment(3, 0), -16.0 * a[2] - 2.0 * a[5]);
    }

    #[test]
    fn kernel_total_sum_is_exactly_zero(a in params_strategy()) {
        let k = build_kernel(&SymmetricFilterParams { a });
        // centre cell is structurally zero and rows cancel pairwise
        prop_assert_eq!(k.at(0, 0), 0.0);
        prop_assert_eq!(k.moment(0, 0), 0.0);
    }

    #[test]
    fn derivative_annihilates_constants_exactly(
        a in params_strategy(),
        c in -10.0f64..10.0,
        n in 8usize..24,
    ) {
        let k = build_kernel(&SymmetricFilterParams { a });
        let mut g = Graph::<f64>::new();
        let kv = g.constant(Tensor::from_vec(&[5, 5], k.entries().to_vec()).unwrap());
        let f = g.constant(Tensor::from_fn(&[n, n], |_| c));
        let d = gridcorr::stencil::derivative_x(&mut g, f, kv, 0.37).unwrap();
        prop_assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_correlation_is_shift_equivariant(
        a in params_strategy(),
        seed in 0u64..1000,
        sy in 0usize..8,
        sx in 0usize..8,
    ) {
        let n = 8;
        let base = Tensor::<f64>::from_fn(&[n, n], |ix| {
            (((ix[0] * 31 + ix[1] * 17) as f64) + seed as f64 * 0.13).sin()
        });
        let shifted = Tensor::<f64>::from_fn(&[n, n], |ix| {
            base.data()[((ix[0] + sy) % n) * n + (ix[1] + sx) % n]
        });
        let k = build_kernel(&SymmetricFilterParams { a });
        let mut g = Graph::<f64>::new();
        let kv = g.constant(Tensor::from_vec(&[5, 5], k.entries().to_vec()).unwrap());
        let f0 = g.constant(base);
        let f1 = g.constant(shifted);
        let o0 = g.cross_correlate2d(f0, kv).unwrap();
        let o1 = g.cross_correlate2d(f1, kv).unwrap();
        for i in 0..n {
            for j in 0..n {
                let x = g.value(o0).data()[((i + sy) % n) * n + (j + sx) % n];
                let y = g.value(o1).data()[i * n + j];
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn pad_then_crop_recovers_input(
        h in 5usize..20,
        w in 5usize..20,
        width in 0usize..5,
        seed in 0u64..100,
    ) {
        let width = width.min(h.min(w));
        let t = Tensor::<f64>::from_fn(&[h, w], |ix| {
            ((ix[0] * 7 + ix[1] * 3 + seed as usize) as f64).sin()
        });
        let p = pad_periodic(&t, width).unwrap();
        prop_assert_eq!(p.shape(), &[h + 2 * width, w + 2 * width]);
        prop_assert_eq!(crop(&p, width).unwrap(), t);
    }

    #[test]
    fn fft_round_trip_is_tight(n in prop::sample::select(vec![8usize, 12, 16, 25, 32]), seed in 0u64..50) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[n, n], |ix| {
            ((ix[0] * 13 + ix[1] * 7 + seed as usize) as f64 * 0.61).sin()
        }));
        let z = g.fft2(x).unwrap();
        let back = g.ifft2(z).unwrap();
        let worst = g
            .value(back)
            .data()
            .iter()
            .zip(g.value(x).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        prop_assert!(worst < 1e-12, "round trip error {}", worst);
    }

    #[test]
    fn gct1_round_trip_any_dtype(
        dims in prop::collection::vec(1usize..6, 1..4),
        dtype in 0u8..3,
        seed in 0u64..1000,
    ) {
        let numel: usize = dims.iter().product();
        let gen = |i: usize| ((i as f64) + seed as f64 * 0.7).sin() * 1e3;
        let tensor = match dtype {
            0 => {
                let data: Vec<f32> = (0..numel).map(|i| gen(i) as f32).collect();
                AnyTensor::F32(Tensor::from_vec(&dims, data).unwrap())
            }
            1 => {
                let data: Vec<f64> = (0..numel).map(gen).collect();
                AnyTensor::F64(Tensor::from_vec(&dims, data).unwrap())
            }
            _ => {
                let data: Vec<f64> = (0..numel * 2).map(gen).collect();
                AnyTensor::Complex128(Tensor::from_vec_complex(&dims, data).unwrap())
            }
        };
        let meta = serde_json::json!({"seed": seed, "dims": dims});
        let mut buf = Vec::new();
        write_record(&mut buf, &tensor, &meta).unwrap();
        let rec = read_record(&mut &buf[..]).unwrap().unwrap();
        prop_assert_eq!(rec.tensor, tensor);
        prop_assert_eq!(rec.metadata["seed"].as_u64().unwrap(), seed);
    }
}

#[test]
fn spectral_truncation_is_idempotent_across_modes() {
    for n in [16usize, 25, 32] {
        for modes in [2usize, 4, 7] {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_fn(&[2, n, n], |ix| {
                ((ix[1] * 5 + ix[2] * 3) as f64 * 0.7).cos()
            }));
            let z = g.fft2(x).unwrap();
            let once = gridcorr::graph::truncate_modes(g.value(z), modes).unwrap();
            let twice = gridcorr::graph::truncate_modes(&once, modes).unwrap();
            assert_eq!(once, twice);
        }
    }
}
