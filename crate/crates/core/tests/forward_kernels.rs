use proptest::prelude::*;

use sparkattn::oracle::{attention_ref, tensor_error};
use sparkattn::workload::{normal_half, Workload};
use sparkattn::{forward_fused, forward_traditional, AccMode, AttnConfig, Error, Half, Tensor};

fn swap_rows(t: &Tensor<Half>, d: usize, perm: &[usize]) -> Tensor<Half> {
    let mut out = t.clone();
    let n = perm.len();
    let heads = t.len() / (n * d);
    for hd in 0..heads {
        for (dst, &src) in perm.iter().enumerate() {
            let base = hd * n * d;
            out.as_mut_slice()[base + dst * d..base + (dst + 1) * d]
                .copy_from_slice(&t.as_slice()[base + src * d..base + (src + 1) * d]);
        }
    }
    out
}

#[test]
fn single_tile_matches_reference() {
    for acc in [AccMode::Fp16, AccMode::Fp32] {
        let cfg = AttnConfig::new(1, 1, 64, 64).with_acc(acc);
        let w = Workload::generate(&cfg, 3);
        let out = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
        let r = attention_ref(&w.q.to_f64(), &w.k.to_f64(), &w.v.to_f64(), &cfg).unwrap();
        let m = tensor_error(&out.o.to_f64(), &r.o).unwrap();
        let lse = tensor_error(&out.lse.map(|x| x as f64), &r.lse).unwrap();
        assert!(m.max_abs < 2e-2, "{acc}: {m:?}");
        assert!(lse.max_rel < 1e-2, "{acc}: {lse:?}");
    }
}

#[test]
fn tiny_head_dim_runs_through_padding() {
    let cfg = AttnConfig::new(1, 1, 8, 4).with_causal(true);
    let w = Workload::generate(&cfg, 4);
    let out = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
    let r = attention_ref(&w.q.to_f64(), &w.k.to_f64(), &w.v.to_f64(), &cfg).unwrap();
    assert!(tensor_error(&out.o.to_f64(), &r.o).unwrap().max_abs < 2e-3);
    // first row attends only to key 0
    assert_eq!(&out.o.as_slice()[..4], &w.v.as_slice()[..4]);
}

#[test]
fn traditional_agrees_with_fused() {
    for (acc, tol) in [(AccMode::Fp32, 2e-3), (AccMode::Fp16, 4e-2)] {
        for causal in [false, true] {
            let cfg = AttnConfig::new(1, 2, 128, 64).with_acc(acc).with_causal(causal).with_dropout(0.1, 9);
            let w = Workload::generate(&cfg, 5);
            let f = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
            let t = forward_traditional(&w.q, &w.k, &w.v, &cfg).unwrap();
            let r = attention_ref(&w.q.to_f64(), &w.k.to_f64(), &w.v.to_f64(), &cfg).unwrap();
            let ef = tensor_error(&f.o.to_f64(), &r.o).unwrap();
            let et = tensor_error(&t.o.to_f64(), &r.o).unwrap();
            assert!(et.mean_rel <= 2.0 * tol, "{acc} causal={causal}: {et:?}");
            assert!(ef.mean_rel <= 2.0 * tol, "{acc} causal={causal}: {ef:?}");
            assert_eq!(f.mask_digest, t.mask_digest);
        }
    }
}

#[test]
fn causal_rows_ignore_future_keys() {
    let cfg = AttnConfig::new(1, 1, 64, 32).with_tiles(16, 16).with_causal(true).with_acc(AccMode::Fp16);
    let w = Workload::generate(&cfg, 6);
    let base = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
    let cut = 37;
    let (noise_k, noise_v) = (normal_half(&cfg.qkv_shape(), 99, 0), normal_half(&cfg.qkv_shape(), 99, 1));
    let mut k2 = w.k.clone();
    let mut v2 = w.v.clone();
    for i in cut * 32..64 * 32 {
        k2.as_mut_slice()[i] = noise_k.as_slice()[i];
        v2.as_mut_slice()[i] = noise_v.as_slice()[i];
    }
    let pert = forward_fused(&w.q, &k2, &v2, &cfg).unwrap();
    assert_eq!(&base.o.as_slice()[..cut * 32], &pert.o.as_slice()[..cut * 32]);
    assert_eq!(&base.lse.as_slice()[..cut], &pert.lse.as_slice()[..cut]);
    assert_ne!(&base.o.as_slice()[cut * 32..], &pert.o.as_slice()[cut * 32..]);
}

#[test]
fn query_row_permutation_permutes_output() {
    let cfg = AttnConfig::new(1, 2, 64, 16).with_tiles(16, 32);
    let w = Workload::generate(&cfg, 7);
    let perm: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % 64).collect();
    let a = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
    let b = forward_fused(&swap_rows(&w.q, 16, &perm), &w.k, &w.v, &cfg).unwrap();
    assert_eq!(b.o, swap_rows(&a.o, 16, &perm));
}

#[test]
fn constant_values_pass_through() {
    // binary16 accumulation adds rounding of the running O on top of the
    // normalization error
    for (acc, tol) in [(AccMode::Fp32, 1e-3), (AccMode::Fp16, 1e-2)] {
        let cfg = AttnConfig::new(1, 1, 128, 64).with_tiles(32, 32).with_acc(acc);
        let w = Workload::generate(&cfg, 8);
        let row: Vec<f32> = (0..64).map(|c| (c as f32 - 30.0) * 0.125).collect();
        let v = Tensor::from_vec(&cfg.qkv_shape(), (0..128 * 64).map(|i| Half::from_f32(row[i % 64])).collect()).unwrap();
        let out = forward_fused(&w.q, &w.k, &v, &cfg).unwrap();
        for (i, x) in out.o.as_slice().iter().enumerate() {
            let want = row[i % 64];
            assert!((x.to_f32() - want).abs() <= tol * want.abs().max(1.0), "{acc} {i}: {x} vs {want}");
        }
    }
}

#[test]
fn fused_is_deterministic_across_runs() {
    let cfg = AttnConfig::new(2, 2, 64, 32).with_dropout(0.2, 1).with_acc(AccMode::Fp16);
    let w = Workload::generate(&cfg, 9);
    let a = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
    let b = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
    assert_eq!(a.o, b.o);
    assert_eq!(a.lse, b.lse);
    assert_eq!(a.traffic, b.traffic);
    assert_eq!(a.mask_digest, b.mask_digest);
}

#[test]
fn precondition_errors() {
    let cfg = AttnConfig::new(1, 1, 100, 64);
    let t = Tensor::zeros(&cfg.qkv_shape());
    let err = forward_fused(&t, &t, &t, &cfg).unwrap_err();
    assert!(err.to_string().contains("not a multiple of tile size"), "{err}");

    let cfg = AttnConfig::new(1, 1, 64, 64);
    let short = Tensor::zeros(&[1, 1, 32, 64]);
    let ok = Tensor::zeros(&cfg.qkv_shape());
    assert!(matches!(forward_fused(&ok, &short, &ok, &cfg), Err(Error::Shape(_))));

    let mut nan = ok.clone();
    nan.as_mut_slice()[5] = Half::NAN;
    assert!(matches!(forward_fused(&nan, &ok, &ok, &cfg), Err(Error::NanScore { row: 0 })));
}

#[test]
fn counters_show_the_accumulator_trade_off() {
    let cfg = AttnConfig::new(1, 1, 128, 64);
    let w = Workload::generate(&cfg, 10);
    let h = forward_fused(&w.q, &w.k, &w.v, &cfg.clone().with_acc(AccMode::Fp16)).unwrap().traffic;
    let s = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap().traffic;
    assert!(h.convert_events > 0 && h.shuffle_events == 0);
    assert!(s.shuffle_events > 0 && s.convert_events == 0);
    assert_eq!(h.layout_shuffle_events, 0);
    assert!(s.layout_shuffle_events > 0 && s.layout_convert_events > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Without dropout every output row is a convex combination of V rows.
    #[test]
    fn output_within_value_hull(seed in 0u64..1000, causal: bool, fp16: bool) {
        let acc = if fp16 { AccMode::Fp16 } else { AccMode::Fp32 };
        let cfg = AttnConfig::new(1, 1, 32, 8).with_tiles(8, 16).with_causal(causal).with_acc(acc);
        let w = Workload::generate(&cfg, seed);
        let out = forward_fused(&w.q, &w.k, &w.v, &cfg).unwrap();
        let v = w.v.to_f32();
        for c in 0..8 {
            let col: Vec<f32> = (0..32).map(|j| v.as_slice()[j * 8 + c]).collect();
            let (lo, hi) = col.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            let slack = 1e-2 * (hi - lo).max(1.0);
            for i in 0..32 {
                let x = out.o.as_slice()[i * 8 + c].to_f32();
                prop_assert!(x >= lo - slack && x <= hi + slack, "row {i} col {c}: {x} not in [{lo}, {hi}]");
            }
        }
    }
}
