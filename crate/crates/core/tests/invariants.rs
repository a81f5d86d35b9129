use indexmap::IndexMap;
use proptest::prelude::*;

use stc_core::analysis::{lif_unroll_oracle, shuffle_permutations, simulate_lif, simulate_stc, stc_unroll_oracle};
use stc_core::data::{load_npy, save_npy, NpyDtype};
use stc_core::prednet::{load_checkpoint, save_checkpoint, TensorDtype};
use stc_core::{Tape, Tensor};

fn tensor(max_rank: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..=max_rank).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(-1e3f64..1e3, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lif_closed_form_matches_simulation(
        x in prop::collection::vec(-1.0f64..3.0, 1..50),
        alpha in 0.0f64..1.0,
        vth in 0.1f64..3.0,
        v0 in -1.0f64..1.0,
    ) {
        let trace = simulate_lif(&x, alpha, vth, v0).unwrap();
        let closed = lif_unroll_oracle(&trace, alpha, vth).unwrap();
        prop_assert!((closed - trace.final_v().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn stc_closed_form_matches_simulation(
        steps in prop::collection::vec((-1.0f64..3.0, -0.999f64..0.999, -0.999f64..0.999), 1..50),
        vth in 0.3f64..2.0,
        v0 in -0.3f64..0.3,
    ) {
        let x: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let b: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let g: Vec<f64> = steps.iter().map(|s| s.2).collect();
        let trace = simulate_stc(&x, &b, &g, vth, v0).unwrap();
        let closed = stc_unroll_oracle(&trace, vth).unwrap();
        let sim = trace.final_v().unwrap();
        prop_assert!((closed - sim).abs() < 1e-9 * sim.abs().max(1.0));
    }

    #[test]
    fn detach_keeps_values_and_cuts_one_edge(x in tensor(3)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone()).unwrap();
        let d = tape.detach(v).unwrap();
        prop_assert_eq!(tape.value(d), &x);
        // sum(detach(x) * x) has gradient detach(x) only.
        let p = tape.mul(d, v).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        prop_assert_eq!(g.wrt(&tape, v), x);
    }

    #[test]
    fn checkpoint_round_trips(ts in prop::collection::vec(tensor(4), 0..5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let map: IndexMap<String, Tensor> = ts.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect();
        save_checkpoint(&path, "m", &map, TensorDtype::F64).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.meta, "m");
        prop_assert_eq!(back.tensors, map);
    }

    #[test]
    fn npy_round_trips(t in tensor(5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        save_npy(&path, &t, NpyDtype::F64).unwrap();
        prop_assert_eq!(load_npy(&path, false).unwrap(), t);
    }

    #[test]
    fn shuffles_are_never_identity(n in 1usize..20, t_in in 2usize..8, seed in any::<u64>()) {
        let perms = shuffle_permutations(n, t_in, seed).unwrap();
        prop_assert_eq!(perms.len(), n);
        for p in perms {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..t_in).collect::<Vec<_>>());
            prop_assert!(p.iter().enumerate().any(|(i, &j)| i != j));
        }
    }
}
