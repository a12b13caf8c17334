use moth_core::layout::{build_mask, SpanKind, SpanLayout};
use moth_core::metrics::{ade, dtw, dtw_raw};
use moth_core::quat::{self, Quat};
use moth_core::waypoint::{dequantize, quantize};
use proptest::prelude::*;

fn quat_strategy() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| quat::norm(q) > 1e-3)
}

fn path(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max)
}

fn layout() -> impl Strategy<Value = SpanLayout> {
    (1usize..4, 1usize..4, 1usize..4, any::<[bool; 3]>()).prop_map(|(i, t, h, [a, b, c])| SpanLayout {
        n_img: i,
        n_txt: t,
        horizon: h,
        traj3d: a,
        mano: b,
        action: c,
    })
}

proptest! {
    #[test]
    fn canonical_form_is_unit_and_sign_free(q in quat_strategy()) {
        let c = quat::canonicalize(&q).unwrap();
        prop_assert!(quat::is_canonical(&c, 1e-12));
        prop_assert_eq!(c, quat::canonicalize(&q.map(|x| -x)).unwrap());
        let again = quat::canonicalize(&c).unwrap();
        prop_assert!(c.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn rot_error_is_a_symmetric_bounded_angle(p in quat_strategy(), g in quat_strategy()) {
        let e = quat::rot_error(&p, &g).unwrap();
        prop_assert!((0.0..=180.0).contains(&e));
        prop_assert!((e - quat::rot_error(&g, &p).unwrap()).abs() < 1e-9);
        prop_assert_eq!(e, quat::rot_error(&p.map(|x| -x), &g).unwrap());
        prop_assert_eq!(quat::rot_error(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn rot_error_obeys_triangle_inequality(a in quat_strategy(), b in quat_strategy(), c in quat_strategy()) {
        let ab = quat::rot_error(&a, &b).unwrap();
        let bc = quat::rot_error(&b, &c).unwrap();
        let ac = quat::rot_error(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn quantize_round_trip_within_half_bin(v in -2.0f64..2.0, bins in 2usize..300) {
        let (lo, hi) = (-1.5, 1.5);
        let b = quantize(v, lo, hi, bins).unwrap();
        prop_assert!(b < bins);
        let back = dequantize(b, lo, hi, bins).unwrap();
        let half = (hi - lo) / bins as f64 / 2.0;
        let clamped = v.clamp(lo, hi);
        prop_assert!((back - clamped).abs() <= half + 1e-12);
    }

    #[test]
    fn distances_are_nonnegative_and_zero_on_self(a in path(12)) {
        prop_assert_eq!(ade(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        let shifted: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + 0.1, p[1], p[2]]).collect();
        prop_assert!(ade(&a, &shifted).unwrap() > 0.0);
    }

    #[test]
    fn dtw_never_exceeds_ade(a in path(10), seed in any::<u64>()) {
        let b: Vec<[f64; 3]> = a
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let k = ((seed >> (i % 60)) & 7) as f64 * 0.05;
                [p[0] + k, p[1] - k, p[2]]
            })
            .collect();
        prop_assert!(dtw(&a, &b).unwrap() <= ade(&a, &b).unwrap() + 1e-12);
        prop_assert!((dtw(&a, &b).unwrap() - dtw(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dtw_path_length_is_bounded(a in path(9), b in path(9)) {
        let (cost, len) = dtw_raw(&a, &b).unwrap();
        prop_assert!(cost >= 0.0);
        prop_assert!(len >= a.len().max(b.len()));
        prop_assert!(len < a.len() + b.len());
    }

    #[test]
    fn mask_is_reflexive_and_never_looks_ahead_across_spans(l in layout()) {
        let m = build_mask(&l).unwrap();
        prop_assert_eq!(m.size(), l.total());
        for q in 0..l.total() {
            prop_assert!(m.allows(q, q));
            let qk = l.kind_at(q).unwrap();
            for k in 0..l.total() {
                let kk = l.kind_at(k).unwrap();
                if kk > qk.max(SpanKind::Txt) {
                    prop_assert!(!m.allows(q, k));
                }
                if qk == SpanKind::Action || kk < qk || kk.max(qk) <= SpanKind::Txt {
                    prop_assert!(m.allows(q, k));
                }
            }
        }
    }
}
