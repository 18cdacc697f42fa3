use proptest::prelude::*;

use mmgr::backbone::AttentionMaps;
use mmgr::eval::{history_tokens, Metric};
use mmgr::pid::normalized_pid;
use mmgr::rq::{quantize, resolve_collisions, CodebookStack, ItemIdentifier, UnifiedVocabulary, EOS, MASK};
use mmgr::saliency::{apply_mask, mask_count, saliency_scores, SaliencyProfile};
use mmgr::synergy::{synergy_value, unimodal_view, DEFAULT_TAU};
use mmgr::Modality;

fn row_stochastic(heads: usize, n: usize, raw: &[f64]) -> Vec<f64> {
    let mut w = raw[..heads * n * n].to_vec();
    for row in w.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    w
}

fn maps_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..4, 1usize..8).prop_flat_map(|(h, n)| (Just(h), Just(n), prop::collection::vec(0.01f64..1.0, h * n * n)))
}

fn profile_strategy() -> impl Strategy<Value = SaliencyProfile> {
    (2usize..20).prop_flat_map(|n| {
        (prop::collection::vec(0u8..3, n - 2), prop::collection::vec(0u8..6, n)).prop_map(move |(kinds, coarse)| {
            let mut text = vec![0];
            let mut vision = Vec::new();
            for (i, k) in kinds.iter().enumerate() {
                match k {
                    0 => text.push(i + 1),
                    1 => vision.push(i + 1),
                    _ => {}
                }
            }
            vision.push(n - 1);
            let scores: Vec<f64> = coarse.iter().map(|&c| f64::from(c) / 8.0).collect();
            let mean = |s: &[usize]| s.iter().map(|&i| scores[i]).sum::<f64>() / s.len() as f64;
            let (lt, lv) = (mean(&text), mean(&vision));
            SaliencyProfile {
                dominant: if lv > lt { Modality::Vision } else { Modality::Text },
                text_density: lt,
                vision_density: lv,
                scores,
                text_positions: text,
                vision_positions: vision,
            }
        })
    })
}

proptest! {
    #[test]
    fn saliency_is_a_distribution((h, n, raw) in maps_strategy()) {
        let maps = AttentionMaps::new(h, n, row_stochastic(h, n, &raw)).unwrap();
        let s = saliency_scores(&maps, &vec![false; n]).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn saliency_permutes_with_positions((h, n, raw) in maps_strategy(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let w = row_stochastic(h, n, &raw);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        // Position i of the permuted sequence is position perm[i] of the original.
        let mut pw = vec![0.0; w.len()];
        for hh in 0..h {
            for q in 0..n {
                for k in 0..n {
                    pw[(hh * n + q) * n + k] = w[(hh * n + perm[q]) * n + perm[k]];
                }
            }
        }
        let s = saliency_scores(&AttentionMaps::new(h, n, w).unwrap(), &vec![false; n]).unwrap();
        let ps = saliency_scores(&AttentionMaps::new(h, n, pw).unwrap(), &vec![false; n]).unwrap();
        for i in 0..n {
            prop_assert!((ps[i] - s[perm[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_nest_as_ratio_grows(p in profile_strategy(), a in 0usize..=10, b in 0usize..=10) {
        let (lo, hi) = (a.min(b) as f64 / 10.0, a.max(b) as f64 / 10.0);
        let tokens: Vec<u32> = (0..p.scores.len() as u32).map(|i| 10 + i).collect();
        let small = apply_mask(&tokens, &p, lo).unwrap();
        let big = apply_mask(&tokens, &p, hi).unwrap();
        prop_assert!(small.masked.iter().all(|i| big.masked.contains(i)));
        prop_assert_eq!(big.masked.len(), mask_count(hi, p.positions(p.dominant).len()));
        prop_assert!(big.tokens.iter().enumerate().all(|(i, &t)| (t == MASK) == big.masked.contains(&i)));
    }

    #[test]
    fn mask_count_is_integer_ceiling(num in 0usize..=10, n in 0usize..200) {
        prop_assert_eq!(mask_count(num as f64 / 10.0, n), (num * n).div_ceil(10));
    }

    #[test]
    fn synergy_loss_is_monotone(so in -1.0f64..1.0, su in -1.0f64..1.0, d in 0.0f64..0.5) {
        let base = synergy_value(so, su, DEFAULT_TAU);
        prop_assert!(base > 0.0);
        prop_assert!(synergy_value(so + d, su, DEFAULT_TAU) <= base);
        prop_assert!(synergy_value(so, su + d, DEFAULT_TAU) >= base);
    }

    #[test]
    fn pid_is_scale_free(pt in 0.0f64..1.0, pv in 0.0f64..1.0, pj in 1e-3f64..1.0, c in 0.01f64..100.0) {
        let a = normalized_pid(pt, pv, pj).unwrap();
        let b = normalized_pid(pt * c, pv * c, pj * c).unwrap();
        for (x, y) in [(a.s, b.s), (a.r, b.r), (a.u_t, b.u_t), (a.u_v, b.u_v)] {
            prop_assert!(x >= 0.0 && (x - y).abs() < 1e-12);
        }
        prop_assert_eq!(a.sub_additive, b.sub_additive);
    }

    #[test]
    fn metrics_are_bounded_and_ordered(ranks in prop::collection::vec(prop::option::of(1usize..30), 1..50), k in 1usize..30) {
        let hr = Metric::Hr(k).mean(&ranks);
        let nd = Metric::Ndcg(k).mean(&ranks);
        prop_assert!((0.0..=1.0).contains(&hr) && nd >= 0.0 && nd <= hr + 1e-15);
        prop_assert!(Metric::Hr(k + 1).mean(&ranks) >= hr);
    }

    #[test]
    fn residuals_shrink_with_a_zero_codeword(
        levels in prop::collection::vec(prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6), 1..4),
        z in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let levels: Vec<Vec<Vec<f64>>> = levels.into_iter().map(|mut b| { b.push(vec![0.0; 3]); b }).collect();
        let k = levels.iter().map(Vec::len).min().unwrap();
        let levels: Vec<Vec<Vec<f64>>> = levels.into_iter().map(|mut b| { b.truncate(k - 1); b.push(vec![0.0; 3]); b }).collect();
        let stack = CodebookStack::new(Modality::Vision, levels).unwrap();
        let q = quantize(&z, &stack).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut prev = norm(&z);
        for r in &q.residuals[1..] {
            prop_assert!(norm(r) <= prev + 1e-12);
            prev = norm(r);
        }
    }

    #[test]
    fn history_fits_and_ends_with_eos(len in 0usize..12, max_len in 1usize..30) {
        let vocab = UnifiedVocabulary::new(2, 4);
        let items: Vec<ItemIdentifier> = (0..12)
            .map(|i| ItemIdentifier::from_codes(format!("x{i}"), vec![i % 4, i / 4], vec![(i + 1) % 4, 0], None, &vocab).unwrap())
            .collect();
        let map = resolve_collisions(&items, &vocab).unwrap();
        let hist: Vec<usize> = (0..len).collect();
        let toks = history_tokens(&map, &hist, max_len);
        prop_assert!(toks.len() <= max_len.max(1));
        prop_assert_eq!(*toks.last().unwrap(), EOS);
        prop_assert_eq!((toks.len() - 1) % 4, 0);
        for m in Modality::BOTH {
            let u = unimodal_view(&toks, map.vocab(), m);
            prop_assert!(u.iter().all(|&t| map.vocab().modality_of(t) != Some(m.other())));
            prop_assert_eq!(u.len(), 1 + (toks.len() - 1) / 2);
        }
    }
}
