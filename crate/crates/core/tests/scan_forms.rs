use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmflow::ssm::{
    apply_kernel, kernel_form, scan_parallel, scan_sequential, selective_params, LinearMap, SelectiveProjections,
    StaticSsm,
};
use ssmflow::{Tape, Tensor64};

fn static_instance(seed: u64) -> (StaticSsm<f64>, Tensor64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..6);
    let l = rng.gen_range(1..48);
    let d = rng.gen_range(1..4);
    let a = (0..n).map(|_| -rng.gen_range(0.05..3.0)).collect();
    let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ssm = StaticSsm::new(a, b, c, rng.gen_range(1e-3..0.5)).unwrap();
    let x = Tensor64::randn(&[l, d], 1.0, &mut rng).unwrap();
    (ssm, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn static_forms_agree(seed in any::<u64>()) {
        let (ssm, x) = static_instance(seed);
        let p = ssm.steps(x.shape()[0], x.shape()[1]).unwrap();
        let seq = scan_sequential(&p, &x).unwrap();
        let ker = apply_kernel(&kernel_form(&p).unwrap(), &x).unwrap();
        let par = scan_parallel(&p, &x).unwrap();
        prop_assert!(seq.max_abs_diff(&ker) < 1e-10);
        prop_assert!(seq.max_abs_diff(&par) < 1e-10);
    }

    #[test]
    fn selective_forms_agree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d, n) = (rng.gen_range(1..32), rng.gen_range(1..5), rng.gen_range(1..5));
        let map = |o: usize, rng: &mut ChaCha8Rng| {
            LinearMap::new(Tensor64::randn(&[d, o], 0.5, rng).unwrap(), Tensor64::randn(&[o], 0.5, rng).unwrap()).unwrap()
        };
        let proj = SelectiveProjections { s_b: map(n, &mut rng), s_c: map(n, &mut rng), s_delta: map(d, &mut rng) };
        let x = Tensor64::randn(&[l, d], 1.0, &mut rng).unwrap();
        let a = Tensor64::uniform(&[d, n], -2.0, -0.1, &mut rng).unwrap();
        let sp = selective_params(&x, &proj).unwrap();
        let steps = sp.discretize(&a).unwrap();
        let seq = scan_sequential(&steps, &x).unwrap();
        let par = scan_parallel(&steps, &x).unwrap();
        prop_assert!(seq.max_abs_diff(&par) < 1e-10);

        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .selective_scan(tape.constant(sp.delta.clone()), tape.constant(a), tape.constant(sp.b.clone()), tape.constant(sp.c.clone()), None)
            .unwrap();
        prop_assert!(seq.max_abs_diff(&y.value()) < 1e-10);
    }

    /// With |Ā| < 1 and bounded input, the state stays within
    /// max|B̄ x| / (1 − max|Ā|).
    #[test]
    fn state_is_bounded(seed in any::<u64>()) {
        let (ssm, x) = static_instance(seed);
        let disc = ssm.discretize().unwrap();
        let amax = disc.a_bar.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bmax = disc.b_bar.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let xmax = x.max_abs();
        let bound = bmax * xmax / (1.0 - amax);
        let p = ssm.steps(x.shape()[0], x.shape()[1]).unwrap();
        let (_, h) = ssmflow::ssm::scan_sequential_from(&p, &x, None).unwrap();
        prop_assert!(h.iter().all(|v| v.abs() <= bound * (1.0 + 1e-9)));
    }
}

#[test]
fn parallel_result_independent_of_workers() {
    let (ssm, x) = static_instance(11);
    let p = ssm.steps(x.shape()[0], x.shape()[1]).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| scan_parallel(&p, &x).unwrap())
    };
    assert_eq!(run(1), run(3));
}
