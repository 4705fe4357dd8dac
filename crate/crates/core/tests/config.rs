use ascan_core::config::{
    build_preset, classify_symmetry, has_errors, load_spec, parse_layout, render_layout, spec_from_toml, spec_hash,
    validate, BlockKind, HeadSpec, Severity, Symmetry, PRESET_NAMES,
};
use ascan_core::Error;
use proptest::prelude::*;
use BlockKind::{C, T};

#[test]
fn parses_published_layouts() {
    assert_eq!(parse_layout("CC-CCCT-CCTT-CTTT").unwrap(), vec![vec![C, C], vec![C, C, C, T], vec![C, C, T, T], vec![C, T, T, T]]);
    assert_eq!(parse_layout("C").unwrap(), vec![vec![C]]);
    assert_eq!(
        parse_layout("CC-TTTT-TTTT-TTTT").unwrap(),
        vec![vec![C, C], vec![T, T, T, T], vec![T, T, T, T], vec![T, T, T, T]]
    );
}

#[test]
fn parse_errors_report_columns() {
    for (text, col) in [("", 1), ("CC--CT", 4), ("CCXT", 3), ("CC-", 4)] {
        match parse_layout(text) {
            Err(Error::Parse { column, .. }) => assert_eq!(column, col, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn symmetry_of_published_groups() {
    assert_eq!(classify_symmetry(&parse_layout("CC-CCCT-CCTT-CTTT").unwrap()), Symmetry::Asymmetric);
    assert_eq!(classify_symmetry(&parse_layout("CC-CCTT-CCTT-CCTT").unwrap()), Symmetry::Symmetric);
    assert_eq!(classify_symmetry(&parse_layout("TTTT").unwrap()), Symmetry::Symmetric);
}

#[test]
fn preset_shapes() {
    let t = build_preset("ascan-t").unwrap();
    assert_eq!(t.stages.iter().map(|s| s.out_channels).collect::<Vec<_>>(), vec![96, 192, 384, 768]);
    assert_eq!(t.stem.out_channels, 64);
    let u = build_preset("unet-t2i").unwrap();
    assert_eq!(u.stages.iter().map(|s| s.out_channels).collect::<Vec<_>>(), vec![320, 640, 1280]);
    assert_eq!(u.stages.iter().map(|s| s.num_heads.unwrap()).collect::<Vec<_>>(), vec![5, 10, 20]);
    let b = build_preset("ascan-b").unwrap();
    let s3 = &b.stages[2];
    assert_eq!((s3.out_channels, s3.entry_stride), (384, 2));
    assert_eq!(s3.blocks.iter().filter(|k| k.is_conv()).count(), 7);
    assert_eq!(s3.blocks.iter().filter(|k| k.is_attention()).count(), 7);
    assert!(matches!(u.head, HeadSpec::Unet(_)));
    assert!(build_preset("ASCAN-T").is_ok());
    assert!(build_preset("nope").is_err());
}

#[test]
fn validation_examples() {
    assert!(validate(&build_preset("c1").unwrap()).is_empty());
    let t4 = validate(&build_preset("t4").unwrap());
    assert!(t4.iter().any(|d| d.severity == Severity::Warning && d.message.contains("transformer in first stage")));
    assert!(!has_errors(&t4));
    let mut u = build_preset("unet-class-cond").unwrap();
    u.up_stages[0].out_channels += 1;
    let diags = validate(&u);
    assert!(has_errors(&diags));
    assert!(diags.iter().any(|d| d.message.contains("mirror violation")));
    for name in PRESET_NAMES {
        assert!(!has_errors(&validate(&build_preset(name).unwrap())), "{name}");
    }
}

#[test]
fn toml_file_round_trip_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.toml");
    std::fs::write(&path, "preset = \"ascan-t\"\nlayout = \"CC-CCTT-CCTT-CCTT\"\n").unwrap();
    let spec = load_spec(&path).unwrap();
    assert_eq!(render_layout(&spec.layout()), "CC-CCTT-CCTT-CCTT");
    assert_eq!(spec.layout(), build_preset("c10").unwrap().layout());
    let full = ascan_core::config::canonical_toml(&spec).unwrap();
    let again = spec_from_toml(&full).unwrap();
    assert_eq!(again, spec);
    assert_eq!(spec_hash(&again).unwrap(), spec_hash(&spec).unwrap());
    assert_ne!(spec_hash(&spec).unwrap(), spec_hash(&build_preset("ascan-t").unwrap()).unwrap());
}

fn layout_strategy() -> impl Strategy<Value = Vec<Vec<BlockKind>>> {
    prop::collection::vec(prop::collection::vec(prop_oneof![Just(C), Just(T)], 1..8), 1..6)
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(layout in layout_strategy()) {
        let text = render_layout(&layout);
        prop_assert_eq!(parse_layout(&text).unwrap(), layout.clone());
        prop_assert_eq!(render_layout(&parse_layout(&text).unwrap()), text);
    }
}
