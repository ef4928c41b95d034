use proptest::prelude::*;
use vfpt::io;
use vfpt::prompt::PromptConfig;
use vfpt::selftest::naive_fourier2d_real;
use vfpt::spectral::{
    fft, fourier1d_real, fourier1d_real_adjoint, fourier2d_real, fourier2d_real_adjoint, fourier2d_real_seq_first,
    ifft, Axis, ComplexBuffer,
};
use vfpt::tensor::Tensor;
use vfpt::training::cosine_lr;

fn buffer(max: usize) -> impl Strategy<Value = ComplexBuffer> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
            .prop_map(|(re, im)| ComplexBuffer::new(re, im).unwrap())
    })
}

fn block(max_m: usize, max_d: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_m, 1..=max_d).prop_flat_map(|(m, d)| {
        prop::collection::vec(-5.0f64..5.0, m * d).prop_map(move |v| Tensor::new(vec![m, d], v).unwrap())
    })
}

fn block_pair(max_m: usize, max_d: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=max_m, 1..=max_d).prop_flat_map(|(m, d)| {
        (
            prop::collection::vec(-5.0f64..5.0, m * d),
            prop::collection::vec(-5.0f64..5.0, m * d),
        )
            .prop_map(move |(a, b)| (Tensor::new(vec![m, d], a).unwrap(), Tensor::new(vec![m, d], b).unwrap()))
    })
}

proptest! {
    #[test]
    fn parseval(x in buffer(96)) {
        let n = x.len() as f64;
        let (ex, ey) = (x.energy(), fft(&x).energy() / n);
        prop_assert!((ex - ey).abs() <= 1e-9 * ex.max(1.0));
    }

    #[test]
    fn inverse_round_trip(x in buffer(96)) {
        prop_assert!(ifft(&fft(&x)).max_abs_diff(&x) <= 1e-10);
    }

    #[test]
    fn fft_is_linear(pair in (1usize..64).prop_flat_map(|n| (
        prop::collection::vec(-1.0f64..1.0, 4 * n), -3.0f64..3.0, -3.0f64..3.0))) {
        let (v, a, b) = pair;
        let n = v.len() / 4;
        let x = ComplexBuffer::new(v[..n].to_vec(), v[n..2 * n].to_vec()).unwrap();
        let y = ComplexBuffer::new(v[2 * n..3 * n].to_vec(), v[3 * n..].to_vec()).unwrap();
        let comb = |p: &ComplexBuffer, q: &ComplexBuffer| ComplexBuffer::new(
            p.re.iter().zip(&q.re).map(|(s, t)| a * s + b * t).collect(),
            p.im.iter().zip(&q.im).map(|(s, t)| a * s + b * t).collect(),
        ).unwrap();
        let lhs = fft(&comb(&x, &y));
        let rhs = comb(&fft(&x), &fft(&y));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn fourier2d_matches_double_sum_and_commutes(p in block(12, 40)) {
        let f = fourier2d_real(&p);
        prop_assert!(f.max_abs_diff(&naive_fourier2d_real(&p)) <= 1e-10);
        prop_assert!(f.max_abs_diff(&fourier2d_real_seq_first(&p)) <= 1e-10);
    }

    #[test]
    fn adjoint_dot_product((x, y) in block_pair(12, 40)) {
        let pairs = [
            (fourier2d_real(&x), fourier2d_real_adjoint(&y)),
            (fourier1d_real(&x, Axis::Sequence), fourier1d_real_adjoint(&y, Axis::Sequence)),
            (fourier1d_real(&x, Axis::Hidden), fourier1d_real_adjoint(&y, Axis::Hidden)),
        ];
        for (fx, fty) in pairs {
            let (lhs, rhs) = (fx.dot(&y), x.dot(&fty));
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..5, 1..4), any::<u64>()), 0..6)
    ) {
        let named: Vec<(String, Tensor)> = tensors
            .iter()
            .enumerate()
            .map(|(i, (shape, bits))| {
                let t = Tensor::from_fn(shape, |j| f64::from_bits(bits.wrapping_mul(j as u64 + 1) ^ j as u64));
                (format!("t{i}.weight"), t)
            })
            .collect();
        let back = io::decode(&io::encode(&named).unwrap()).unwrap();
        prop_assert_eq!(back.len(), named.len());
        for ((na, a), (nb, b)) in named.iter().zip(&back) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert_eq!(a.checksum(), b.checksum());
        }
    }

    #[test]
    fn truncation_is_always_a_format_error(cut in 0usize..200) {
        let named = vec![("a".to_string(), Tensor::from_fn(&[3, 4], |i| i as f64)),
                         ("bb".to_string(), Tensor::from_fn(&[5], |i| -(i as f64)))];
        let bytes = io::encode(&named).unwrap();
        prop_assume!(cut < bytes.len());
        let is_format = matches!(io::decode(&bytes[..cut]), Err(vfpt::Error::Format { .. }));
        prop_assert!(is_format);
    }

    #[test]
    fn fourier_count_is_monotone(m in 0usize..40, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let c = |alpha| PromptConfig { length: m, alpha, ..PromptConfig::default() }.fourier_count();
        prop_assert!(c(lo) <= c(hi) && c(hi) <= m);
        prop_assert_eq!(c(0.0), 0);
        prop_assert_eq!(c(1.0), m);
    }

    #[test]
    fn cosine_schedule_stays_in_range(total in 1usize..500, warm in 0usize..100, step in 0usize..600) {
        let lr = cosine_lr(step.min(total), total, 0.3, warm.min(total));
        prop_assert!((0.0..=0.3 + 1e-15).contains(&lr));
    }
}
