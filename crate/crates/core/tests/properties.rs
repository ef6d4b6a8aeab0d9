use proptest::prelude::*;

use vexel_core::codec::{
    denormalize_continuous, normalize_continuous, Codec, ElementToken, SvgMatrix,
};
use vexel_core::normalize::{quantize_precision, reshape_primitives};
use vexel_core::raster::rasterize;
use vexel_core::svg::{
    parse_svg, serialize_svg, Color, CoordMode, Document, Element, PathCommand, Point, Shape,
};

fn coord() -> impl Strategy<Value = f64> {
    (0i32..=12800).prop_map(|v| f64::from(v) / 100.0)
}

fn point() -> impl Strategy<Value = Point> {
    (coord(), coord()).prop_map(|(x, y)| Point::new(x, y))
}

fn command() -> impl Strategy<Value = PathCommand> {
    prop_oneof![
        point().prop_map(PathCommand::Move),
        point().prop_map(PathCommand::Line),
        point().prop_map(PathCommand::Line),
        (point(), point(), point()).prop_map(|(a, b, c)| PathCommand::Cubic(a, b, c)),
        (point(), point()).prop_map(|(a, b)| PathCommand::Quad(a, b)),
        (
            coord(),
            coord(),
            0i32..36000,
            any::<bool>(),
            any::<bool>(),
            point()
        )
            .prop_map(|(rx, ry, rot, large_arc, sweep, to)| PathCommand::Arc {
                rx,
                ry,
                rotation: f64::from(rot) / 100.0,
                large_arc,
                sweep,
                to
            }),
        Just(PathCommand::Close),
    ]
}

fn shape() -> impl Strategy<Value = Shape> {
    prop_oneof![
        (coord(), coord(), coord()).prop_map(|(cx, cy, r)| Shape::Circle { cx, cy, r }),
        (coord(), coord(), coord(), coord()).prop_map(|(cx, cy, rx, ry)| Shape::Ellipse {
            cx,
            cy,
            rx,
            ry
        }),
        (coord(), coord(), coord(), coord(), coord(), coord()).prop_map(
            |(x, y, rx, ry, width, height)| Shape::Rect {
                x,
                y,
                rx,
                ry,
                width,
                height
            }
        ),
        (point(), prop::collection::vec(command(), 0..8)).prop_map(|(start, rest)| {
            // every subpath opens with a move, as the parser guarantees
            let mut cmds = vec![PathCommand::Move(start)];
            let mut sub_start = start;
            for c in rest {
                match c {
                    PathCommand::Move(p) => sub_start = p,
                    PathCommand::Close => {}
                    _ if cmds.last() == Some(&PathCommand::Close) => {
                        cmds.push(PathCommand::Move(sub_start))
                    }
                    _ => {}
                }
                cmds.push(c);
            }
            Shape::Path(cmds)
        }),
    ]
}

fn element() -> impl Strategy<Value = Element> {
    (shape(), prop::option::of(any::<[u8; 3]>()), 1u32..=1000).prop_map(|(s, fill, op)| {
        let mut el = Element::new(s).with_opacity(f64::from(op) / 1000.0);
        if let Some([r, g, b]) = fill {
            if [r, g, b] != [0, 0, 0] {
                el = el.with_fill(Color::from_rgb8(r, g, b));
            }
        }
        el
    })
}

fn document() -> impl Strategy<Value = Document> {
    prop::collection::vec(element(), 0..6).prop_map(|els| Document::with_elements(128, els))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn framing_holds_and_decode_inverts(doc in document()) {
        let codec = Codec::new(64, 128);
        let m = codec.encode(&doc).unwrap();
        prop_assert_eq!(m.len(), 64);
        prop_assert_eq!(m.rows[0][0], ElementToken::Sos as u8 as f64);
        let eos = m.eos_position().unwrap();
        prop_assert_eq!(
            m.rows.iter().filter(|r| r[0] == ElementToken::Eos as u8 as f64).count(),
            1
        );
        for row in &m.rows[eos + 1..] {
            prop_assert_eq!(row[0], ElementToken::Pad as u8 as f64);
            prop_assert!(row[1..].iter().all(|v| *v == 0.0));
        }
        for row in &m.rows[1..eos] {
            let rho = row[0];
            prop_assert!(rho != 0.0 && rho != 1.0 && rho != 5.0);
        }
        prop_assert_eq!(codec.decode(&m).unwrap(), doc);
    }

    #[test]
    fn path_rows_chain_current_point(doc in document()) {
        let m = Codec::new(64, 128).encode(&doc).unwrap();
        let mut pen: Option<(f64, f64)> = None;
        let mut start = (0.0, 0.0);
        for row in &m.rows {
            if row[0] != 2.0 {
                pen = None;
                continue;
            }
            let tau = row[1];
            if tau == 6.0 {
                // close rows carry the subpath start in every slot
                for k in 0..4 {
                    prop_assert_eq!((row[2 + 2 * k], row[3 + 2 * k]), start);
                }
            } else if tau == 1.0 && pen.is_none_or(|p| p != (row[2], row[3])) {
                // first move of a new path element
                prop_assert_eq!((row[2], row[3]), (row[8], row[9]));
            } else if let Some(p) = pen {
                prop_assert_eq!(p, (row[2], row[3]));
            }
            if tau == 1.0 {
                start = (row[8], row[9]);
            }
            pen = Some(if tau == 6.0 { start } else { (row[8], row[9]) });
        }
    }

    #[test]
    fn continuous_normalization_is_affine_bijection(doc in document()) {
        let m = Codec::new(64, 128).encode(&doc).unwrap();
        let m = SvgMatrix {
            rows: m
                .rows
                .into_iter()
                .map(|mut r| {
                    for c in &mut r[2..10] {
                        *c = c.clamp(0.0, 128.0);
                    }
                    r
                })
                .collect(),
        };
        let back = denormalize_continuous(&normalize_continuous(&m, 128), 128);
        for (a, b) in m.rows.iter().zip(&back.rows) {
            for k in 0..a.len() {
                prop_assert!((a[k] - b[k]).abs() <= 1e-12, "{} vs {}", a[k], b[k]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn serializer_round_trips(doc in document()) {
        for mode in [CoordMode::Absolute, CoordMode::Relative] {
            let text = serialize_svg(&doc, mode);
            prop_assert_eq!(parse_svg(&text).unwrap(), doc.clone());
        }
    }

    #[test]
    fn unquantized_relative_output_is_exact(
        doc in document(),
        jitter in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let f = |v: f64| v / 3.0 + jitter[(v as usize) % jitter.len()].abs();
        let els = doc
            .elements
            .iter()
            .map(|el| Element { shape: el.shape.map_lengths(&f), ..el.clone() })
            .collect();
        let doc = Document::with_elements(128, els);
        let text = serialize_svg(&doc, CoordMode::Relative);
        prop_assert_eq!(parse_svg(&text).unwrap(), doc);
    }

    #[test]
    fn passes_are_idempotent(doc in document()) {
        let r = reshape_primitives(&doc);
        prop_assert_eq!(reshape_primitives(&r), r.clone());
        let q = quantize_precision(&r, 2);
        prop_assert_eq!(quantize_precision(&q, 2), q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rasterization_is_deterministic(doc in document()) {
        prop_assert_eq!(rasterize(&doc, 64), rasterize(&doc, 64));
    }
}
