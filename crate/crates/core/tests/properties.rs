use mantis_core::analysis::{build_transfer_matrix, deviation_bound_check, kernel_perturbation, numerical_rank, RANK_TOL};
use mantis_core::geometry::{farthest_point_sample, knn_patches, PointCloud, SeedRule};
use mantis_core::saa::{modulate_operators, perturbation_matrix, soft_threshold_scalar, AdapterParams, OperatorMask, SaaConfig};
use mantis_core::serialization::{
    hilbert_code_3d, hilbert_decode_3d, morton_code_3d, morton_decode_3d, quantize, serialize_keypoints, CurveKind,
};
use mantis_core::ssm::{block_forward, selective_scan, AdapterInput, BackboneParams, BlockDims, DiscreteOps};
use mantis_core::{Mat, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..max)
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Greedy FPS written directly from its definition: distance to the selected
/// set recomputed from scratch every round.
fn fps_oracle(pts: &[[f64; 3]], n: usize, first: usize) -> Vec<usize> {
    let mut sel = vec![first];
    while sel.len() < n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, p) in pts.iter().enumerate() {
            if sel.contains(&j) {
                continue;
            }
            let dmin = sel.iter().map(|&s| d2(p, &pts[s])).fold(f64::INFINITY, f64::min);
            if dmin > best.0 {
                best = (dmin, j);
            }
        }
        sel.push(best.1);
    }
    sel
}

fn random_ops(rng: &mut ChaCha8Rng, n: usize, ch: usize, st: usize, contractive: f64) -> Vec<DiscreteOps> {
    (0..n)
        .map(|_| DiscreteOps {
            channels: ch,
            state: st,
            a_hat: (0..ch * st).map(|_| rng.random_range(-contractive..contractive)).collect(),
            b_hat: (0..ch * st).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..ch * st).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fps_matches_brute_force(pts in cloud_strategy(2, 60), frac in 0.05f64..1.0, seed in 0usize..1000) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let n = ((pts.len() as f64 * frac).ceil() as usize).clamp(1, pts.len());
        let first = seed % pts.len();
        let kp = farthest_point_sample(&cloud, n, SeedRule::Index(first)).unwrap();
        prop_assert_eq!(&kp.indices, &fps_oracle(&pts, n, first));
        let mut uniq = kp.indices.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n);
    }

    #[test]
    fn knn_matches_full_sort(pts in cloud_strategy(4, 60), k_frac in 0.0f64..1.0) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let k = 1 + ((pts.len() - 1) as f64 * k_frac) as usize;
        let centers = farthest_point_sample(&cloud, 3.min(pts.len()), SeedRule::default()).unwrap();
        let ps = knn_patches(&cloud, &centers, k).unwrap();
        for (ci, c) in centers.coords.iter().enumerate() {
            let mut all: Vec<usize> = (0..pts.len()).collect();
            all.sort_by(|&a, &b| d2(&pts[a], c).total_cmp(&d2(&pts[b], c)).then(a.cmp(&b)));
            prop_assert_eq!(&ps.neighbor_indices[ci], &all[..k].to_vec());
            for (j, &idx) in ps.neighbor_indices[ci].iter().enumerate() {
                let rel = ps.neighborhoods[ci][j];
                for a in 0..3 {
                    prop_assert!((rel[a] - (pts[idx][a] - c[a])).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn morton_is_bit_interleaving(x in 0u32..1024, y in 0u32..1024, z in 0u32..1024) {
        let mut expect = 0u64;
        for i in 0..10 {
            expect |= (((x >> i) & 1) as u64) << (3 * i + 2);
            expect |= (((y >> i) & 1) as u64) << (3 * i + 1);
            expect |= (((z >> i) & 1) as u64) << (3 * i);
        }
        prop_assert_eq!(morton_code_3d([x, y, z], 10).unwrap(), expect);
        prop_assert_eq!(morton_decode_3d(expect, 10).unwrap(), [x, y, z]);
    }

    #[test]
    fn hilbert_round_trips_and_steps_to_neighbours(bits in 1u32..12, raw in any::<u64>()) {
        let cells = 1u64 << (3 * bits);
        let code = raw % (cells - 1);
        let p = hilbert_decode_3d(code, bits).unwrap();
        let q = hilbert_decode_3d(code + 1, bits).unwrap();
        prop_assert_eq!(hilbert_code_3d(p, bits).unwrap(), code);
        let l1: u32 = (0..3).map(|k| p[k].abs_diff(q[k])).sum();
        prop_assert_eq!(l1, 1);
    }

    #[test]
    fn curve_orders_are_sorted_permutations(pts in cloud_strategy(2, 40), curve in 0usize..5) {
        let cloud = PointCloud::new(pts).unwrap();
        let kp = farthest_point_sample(&cloud, cloud.len(), SeedRule::default()).unwrap();
        let kind = [CurveKind::Hilbert, CurveKind::TransHilbert, CurveKind::ZOrder, CurveKind::TransZOrder, CurveKind::Random(3)][curve];
        let s = serialize_keypoints(&kp, kind, 10).unwrap();
        let mut seen = s.order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..kp.len()).collect::<Vec<_>>());
        if !matches!(kind, CurveKind::Random(_)) {
            prop_assert!(s.codes.windows(2).all(|w| w[0] <= w[1]));
            for (t, &i) in s.order.iter().enumerate() {
                prop_assert_eq!(kind.code(quantize(&kp.coords[i], 10).unwrap(), 10).unwrap(), s.codes[t]);
            }
        }
        let pos = s.positions();
        for (t, &i) in s.order.iter().enumerate() {
            prop_assert_eq!(pos[i], t);
        }
    }

    #[test]
    fn trans_curves_permute_axes(x in 0u32..1024, y in 0u32..1024, z in 0u32..1024) {
        prop_assert_eq!(CurveKind::TransHilbert.code([x, y, z], 10).unwrap(), hilbert_code_3d([z, x, y], 10).unwrap());
        prop_assert_eq!(CurveKind::TransZOrder.code([x, y, z], 10).unwrap(), morton_code_3d([z, x, y], 10).unwrap());
    }

    #[test]
    fn soft_threshold_is_the_prox_minimizer(q in -5.0f64..5.0, lambda in 1e-3f64..3.0) {
        let v = soft_threshold_scalar(q, lambda);
        let obj = |v: f64| 0.5 * (q - v).powi(2) + lambda * v.abs();
        let h = 1e-3;
        let grid_min = (-6000..=6000).map(|i| obj(i as f64 * h)).fold(f64::INFINITY, f64::min);
        // objective is 1-strongly convex; the grid can undershoot the optimum by at most h²/2
        prop_assert!(obj(v) <= grid_min + 1e-12);
        prop_assert!(grid_min <= obj(v) + 0.5 * h * h + 1e-12);
    }

    #[test]
    fn scan_equals_transfer_matrix(seed in any::<u64>(), n in 1usize..24, ch in 1usize..5, st in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = random_ops(&mut rng, n, ch, st, 1.2);
        let x = random_mat(&mut rng, n, ch);
        let (y, _) = selective_scan(&x, &ops).unwrap();
        let tm = build_transfer_matrix(&ops).unwrap();
        let y2 = tm.apply(&x).unwrap();
        let scale = 1.0 + y.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(y.max_abs_diff(&y2) <= 1e-12 * scale);
        // the kernel is block-diagonal in channels
        for t in 0..n {
            for i in 0..=t {
                let w = tm.block(t, i).unwrap();
                for r in 0..ch {
                    for c in 0..ch {
                        if r != c {
                            prop_assert_eq!(w[r * ch + c], 0.0);
                        }
                    }
                }
            }
            for i in t + 1..n {
                prop_assert!(tm.block(t, i).is_none());
            }
        }
    }

    #[test]
    fn zero_control_leaves_operators_untouched(seed in any::<u64>(), ns in 1usize..6, r in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 3 * ns + 1;
        let theta: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let um: Vec<f64> = (0..m * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vm: Vec<f64> = (0..r * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = modulate_operators(&theta, &vec![0.0; r], &um, &vm, &OperatorMask::default());
        prop_assert_eq!(out, theta);
    }

    #[test]
    fn perturbation_rank_is_bounded_by_support(seed in any::<u64>(), ns in 1usize..6, r in 1usize..8, keep in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 3 * ns + 1;
        let u: Vec<f64> = (0..r).map(|_| if rng.random::<f64>() < keep { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        let um: Vec<f64> = (0..m * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vm: Vec<f64> = (0..r * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let support = u.iter().filter(|v| **v != 0.0).count();
        let rank = numerical_rank(&perturbation_matrix(&u, &um, &vm, m), m, m, RANK_TOL);
        prop_assert!(rank <= support.min(m));
    }

    #[test]
    fn deviation_bound_holds_on_contractive_systems(seed in any::<u64>(), n in 1usize..30, ch in 1usize..4, st in 1usize..4, rho in 0.05f64..0.95, eps in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frozen = random_ops(&mut rng, n, ch, st, rho);
        let adapted: Vec<DiscreteOps> = frozen
            .iter()
            .map(|o| {
                let mut a = o.clone();
                a.a_hat.iter_mut().for_each(|v| *v += rng.random_range(-eps..eps));
                a.b_hat.iter_mut().for_each(|v| *v += rng.random_range(-eps..eps));
                a
            })
            .collect();
        let x = random_mat(&mut rng, n, ch);
        let (_, h0) = selective_scan(&x, &frozen).unwrap();
        let (_, h1) = selective_scan(&x, &adapted).unwrap();
        let rep = deviation_bound_check(&h0, &h1, &frozen, &adapted, &x).unwrap();
        prop_assert!(rep.precondition_met);
        prop_assert!(rep.pass, "violations {}", rep.violations);
    }

    #[test]
    fn kernel_perturbation_vanishes_without_control(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = random_ops(&mut rng, n, 2, 3, 0.9);
        let tm = build_transfer_matrix(&ops).unwrap();
        let m = 10;
        let kp = kernel_perturbation(&tm, &tm, &vec![vec![0.0; 4]; n], &vec![0.5; m * 4], &vec![0.5; 4 * m], m).unwrap();
        prop_assert_eq!(kp.max_abs_delta, 0.0);
        prop_assert!(kp.rank.iter().all(|&r| r == 0));
        prop_assert!(kp.rank_bound_holds());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Changing tokens from step `k` on never changes outputs before `k`,
    /// with the adapter reading `h_{t−1}` included.
    #[test]
    fn adapted_block_is_causal(seed in any::<u64>(), n in 2usize..16, cut_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ns) = (6, 3);
        let mut store = ParamStore::new();
        let bp = BackboneParams::init(&mut store, "b", BlockDims::new(d, 2, ns, 3), &mut rng);
        let ap = AdapterParams::init(&mut store, "a", SaaConfig::for_backbone(d, ns, 5, 4), &mut rng);
        store.value_mut(ap.u).iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        let e: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = random_mat(&mut rng, n, d);
        let cut = 1 + ((n - 1) as f64 * cut_frac) as usize;
        let mut z2 = z.clone();
        for t in cut..n {
            for c in 0..d {
                z2.set(t, c, rng.random_range(-1.0..1.0));
            }
        }
        let ad = Some(AdapterInput { params: &ap, e: &e, force_zero: false });
        let (y1, _) = block_forward(&z, &store, &bp, ad, "p").unwrap();
        let (y2, _) = block_forward(&z2, &store, &bp, ad, "p").unwrap();
        for t in 0..cut {
            prop_assert_eq!(y1.row(t), y2.row(t));
        }
    }
}

#[test]
fn morton_and_hilbert_reject_out_of_range_cells() {
    assert!(morton_code_3d([1024, 0, 0], 10).is_err());
    assert!(hilbert_code_3d([0, 8, 0], 3).is_err());
    assert!(hilbert_decode_3d(512, 3).is_err());
}
