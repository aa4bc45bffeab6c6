//! Property-based invariants across the codec, filter, and statistics paths.

use proptest::prelude::*;

use scent_core::codec::{
    parse_mac_frame, serialize_mac_frame, Addr, Dissected, FcsStatus, FrameType, MacFrame, RawFrame,
};
use scent_core::features::Moments;
use scent_core::filter::{eval_filter, parse_filter, CmpOp, Field, FilterExpr, ALL_FIELDS};

fn arb_addr() -> impl Strategy<Value = Addr> {
    prop_oneof![
        any::<u16>().prop_map(Addr::Short),
        any::<u64>().prop_map(Addr::Extended),
    ]
}

prop_compose! {
    fn arb_frame()(
        type_bits in 0u8..4,
        security_enabled in any::<bool>(),
        frame_pending in any::<bool>(),
        ack_request in any::<bool>(),
        frame_version in 0u8..2,
        seq_no in any::<u8>(),
        dst in proptest::option::of(arb_addr()),
        src in proptest::option::of(arb_addr()),
        dst_pan_val in any::<u16>(),
        src_pan_val in any::<u16>(),
        compress in any::<bool>(),
        payload in proptest::collection::vec(any::<u8>(), 0..80),
    ) -> MacFrame {
        let panid_compression = dst.is_some() && src.is_some() && compress;
        MacFrame {
            frame_type: FrameType::from_bits(type_bits),
            security_enabled,
            frame_pending,
            ack_request,
            panid_compression,
            frame_version,
            seq_no,
            dst_pan: dst.as_ref().map(|_| dst_pan_val),
            dst_addr: dst,
            src_pan: if src.is_some() && !panid_compression { Some(src_pan_val) } else { None },
            src_addr: src,
            payload,
            fcs: None,
            fcs_ok: FcsStatus::Absent,
        }
    }
}

fn arb_field() -> impl Strategy<Value = Field> {
    (0..ALL_FIELDS.len()).prop_map(|i| ALL_FIELDS[i])
}

fn arb_cmp_op() -> impl Strategy<Value = CmpOp> {
    prop_oneof![
        Just(CmpOp::Eq),
        Just(CmpOp::Ne),
        Just(CmpOp::Lt),
        Just(CmpOp::Le),
        Just(CmpOp::Gt),
        Just(CmpOp::Ge),
    ]
}

fn arb_filter() -> impl Strategy<Value = FilterExpr> {
    let leaf = prop_oneof![
        arb_field().prop_map(FilterExpr::Exists),
        (arb_field(), arb_cmp_op()).prop_flat_map(|(field, op)| {
            // keep literals inside the field's width so Display output re-parses
            let max = if field.width() >= 64 {
                u64::MAX
            } else {
                (1u64 << field.width()) - 1
            };
            (0..=max).prop_map(move |lit| FilterExpr::Compare(field, op, lit))
        }),
    ];
    leaf.prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| FilterExpr::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone())
                .prop_map(|(a, b)| FilterExpr::Or(Box::new(a), Box::new(b))),
            inner.prop_map(|e| FilterExpr::Not(Box::new(e))),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trip(frame in arb_frame(), ts in any::<u64>()) {
        let bytes = serialize_mac_frame(&frame, true).unwrap();
        let parsed = parse_mac_frame(&RawFrame::new(bytes, ts), true).unwrap();
        prop_assert_eq!(parsed.frame_type, frame.frame_type);
        prop_assert_eq!(parsed.seq_no, frame.seq_no);
        prop_assert_eq!(parsed.dst_pan, frame.dst_pan);
        prop_assert_eq!(&parsed.dst_addr, &frame.dst_addr);
        prop_assert_eq!(parsed.src_pan, frame.src_pan);
        prop_assert_eq!(&parsed.src_addr, &frame.src_addr);
        prop_assert_eq!(&parsed.payload, &frame.payload);
        prop_assert_eq!(parsed.fcs_ok, FcsStatus::Valid);
    }

    #[test]
    fn parser_total_on_arbitrary_bytes(
        bytes in proptest::collection::vec(any::<u8>(), 0..=127),
        fcs_present in any::<bool>(),
    ) {
        let _ = parse_mac_frame(&RawFrame::new(bytes, 0), fcs_present);
    }

    #[test]
    fn filter_display_reparses(expr in arb_filter()) {
        let text = expr.to_string();
        let reparsed = parse_filter(&text).unwrap();
        prop_assert_eq!(reparsed, expr);
    }

    #[test]
    fn filter_de_morgan(a in arb_filter(), b in arb_filter(), frame in arb_frame()) {
        let bytes = serialize_mac_frame(&frame, true).unwrap();
        let d = Dissected::dissect(RawFrame::new(bytes, 0), true);
        let not_and = FilterExpr::Not(Box::new(FilterExpr::And(
            Box::new(a.clone()),
            Box::new(b.clone()),
        )));
        let or_nots = FilterExpr::Or(
            Box::new(FilterExpr::Not(Box::new(a))),
            Box::new(FilterExpr::Not(Box::new(b))),
        );
        prop_assert_eq!(eval_filter(&not_and, &d), eval_filter(&or_nots, &d));
    }

    #[test]
    fn welford_matches_two_pass(xs in proptest::collection::vec(-1e6f64..1e6, 1..200)) {
        let mut m = Moments::default();
        for &x in &xs {
            m.update(x);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        prop_assert!((m.mean().unwrap() - mean).abs() <= 1e-9 * mean.abs().max(1.0));
        if xs.len() > 1 {
            let m2 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
            let std = (m2 / (n - 1.0)).sqrt();
            prop_assert!((m.std().unwrap() - std).abs() <= 1e-9 * std.max(1.0));
        }
    }
}
