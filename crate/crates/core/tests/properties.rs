use ca_core::amendment::{alpha, amend};
use ca_core::autodiff::{Graph, Tensor};
use ca_core::detect::{energy_of, score_energy, score_msp, score_odin};
use ca_core::distill::{binary_classify, kl_loss};
use ca_core::metrics::{auroc, detection_error};
use ca_core::network::Mlp;
use proptest::prelude::*;

fn prob_vec(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("non-zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn net_and_input() -> impl Strategy<Value = (Mlp, Tensor)> {
    (2usize..6, 2usize..8, 2usize..5, any::<u64>(), 1usize..6).prop_flat_map(
        |(d, h, k, seed, n)| {
            prop::collection::vec(-4.0f64..4.0, d * n).prop_map(move |x| {
                (
                    Mlp::new(&[d, h, k], seed).unwrap(),
                    Tensor::matrix(n, d, x).unwrap(),
                )
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_non_negative(p in prob_vec(2..=8), q in prob_vec(2..=8)) {
        let k = p.len().min(q.len());
        let renorm = |v: &[f64]| { let s: f64 = v[..k].iter().sum(); v[..k].iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (renorm(&p), renorm(&q));
        if p.iter().chain(&q).all(|v| v.is_finite()) {
            prop_assert!(kl_loss(&p, &q).unwrap() >= -1e-15);
            prop_assert!(kl_loss(&p, &p).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn amended_target_keeps_uniform_floor(p in prob_vec(2..=10), t in 0usize..=500, a in 0.0f64..50.0) {
        let q = amend(&p, t, a, 500).unwrap();
        let w = alpha(t, a, 500).unwrap();
        let floor = (1.0 - w) / p.len() as f64;
        prop_assert!(q.iter().all(|&v| v >= floor - 1e-15));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_is_monotone_in_t_and_antitone_in_a(t in 0usize..1000, a in 0.0f64..30.0, da in 0.0f64..30.0) {
        prop_assert!(alpha(t, a, 1000).unwrap() <= alpha(t + 1, a, 1000).unwrap());
        prop_assert!(alpha(t, a + da, 1000).unwrap() <= alpha(t, a, 1000).unwrap());
    }

    #[test]
    fn energy_drops_when_a_logit_rises(
        logits in prop::collection::vec(-20.0f64..20.0, 2..10),
        i in any::<prop::sample::Index>(),
        bump in 1e-3f64..5.0,
        tau in 0.1f64..10.0,
    ) {
        // A logit far below the max can vanish in f64, so only the max must move.
        let mut up = logits.clone();
        up[i.index(logits.len())] += bump;
        prop_assert!(energy_of(&up, tau) <= energy_of(&logits, tau));
        let top = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        let mut up = logits.clone();
        up[top] += bump;
        prop_assert!(energy_of(&up, tau) < energy_of(&logits, tau));
    }

    #[test]
    fn energy_shift_by_constant(logits in prop::collection::vec(-20.0f64..20.0, 2..10), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let diff = energy_of(&shifted, 1.0) - energy_of(&logits, 1.0);
        prop_assert!((diff + c).abs() < 1e-9);
    }

    #[test]
    fn auroc_invariant_under_monotone_map(
        scores in prop::collection::vec(-5.0f64..5.0, 4..60),
        flags in prop::collection::vec(any::<bool>(), 4..60),
    ) {
        let n = scores.len().min(flags.len());
        let mut is_ood = flags[..n].to_vec();
        is_ood[0] = true;
        is_ood[1] = false;
        let s = &scores[..n];
        let mapped: Vec<f64> = s.iter().map(|v| (v * 0.7).exp()).collect();
        let (a, b) = (auroc(s, &is_ood).unwrap(), auroc(&mapped, &is_ood).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&flipped, &is_ood).unwrap() - (1.0 - a)).abs() < 1e-12);
        let e = detection_error(s, &is_ood).unwrap();
        prop_assert!((0.0..=0.5).contains(&e));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn odin_without_perturbation_is_msp((net, x) in net_and_input()) {
        let odin = score_odin(&net, &x, 1.0, 0.0).unwrap();
        let msp = score_msp(&net, &x).unwrap();
        prop_assert_eq!(
            odin.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            msp.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn energy_scores_match_row_formula((net, x) in net_and_input(), tau in 0.5f64..4.0) {
        let logits = net.logits(&x).unwrap();
        let s = score_energy(&net, &x, tau).unwrap();
        for (i, v) in s.iter().enumerate() {
            prop_assert_eq!(*v, energy_of(logits.row(i), tau));
        }
    }

    #[test]
    fn binary_outputs_partition_unity((net, x) in net_and_input()) {
        let k = net.classes() as f64;
        for (p_id, p_ood) in binary_classify(&net, &x).unwrap() {
            prop_assert_eq!(p_id + p_ood, 1.0);
            prop_assert!(p_id >= 1.0 / k - 1e-15 && p_id <= 1.0);
        }
    }

    /// Composite graph of every op against central differences.
    #[test]
    fn graph_ops_match_finite_differences(v in prop::collection::vec(0.2f64..2.0, 6)) {
        let f = |vals: &[f64], grad: bool| {
            let mut g = Graph::new();
            let t = Tensor::matrix(2, 3, vals.to_vec()).unwrap();
            let a = g.leaf(if grad { t.requires_grad() } else { t });
            let w = g.constant(Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]).unwrap());
            let m = g.matmul(a, w).unwrap();
            let sm = g.softmax(m).unwrap();
            let ls = g.log_softmax(m).unwrap();
            let e = g.exp(a).unwrap();
            let l = g.log(e).unwrap();
            let sq = g.square(l).unwrap();
            let r = g.relu(m).unwrap();
            let p = g.mul(sm, ls).unwrap();
            let s1 = g.sum(p).unwrap();
            let s2 = g.mean(sq).unwrap();
            let s3 = g.sum(r).unwrap();
            let t1 = g.add(s1, s2).unwrap();
            let t2 = g.sub(t1, s3).unwrap();
            let out = g.scale(t2, 0.5).unwrap();
            let value = g.value(out).unwrap().item();
            let grads = if grad { g.gradients(out, &[a]).unwrap().remove(0) } else { vec![] };
            (value, grads)
        };
        let (_, grad) = f(&v, true);
        for i in 0..v.len() {
            let h = 1e-6;
            let (mut p, mut m) = (v.clone(), v.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p, false).0 - f(&m, false).0) / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {}: {} vs {}", i, fd, grad[i]);
        }
    }
}
