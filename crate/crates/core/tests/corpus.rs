//! Whole-corpus checks: every pipeline stage against the rasterizer, the
//! serializer round trip, and the matrix codec round trip.

use std::fs;
use std::path::PathBuf;

use vexel_core::codec::Codec;
use vexel_core::normalize::{normalize_stages, DocStats, NormalizeOptions};
use vexel_core::raster::{raster_diff, rasterize};
use vexel_core::svg::{parse_svg, serialize_svg, CoordMode, Document};

fn corpus() -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus");
    let mut files: Vec<_> = fs::read_dir(&dir)
        .expect("fixture corpus")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap();
            (p.file_name().unwrap().to_string_lossy().into_owned(), text)
        })
        .collect()
}

fn diff(a: &Document, b: &Document) -> f64 {
    raster_diff(&rasterize(a, 128), &rasterize(b, 128)).unwrap()
}

#[test]
fn corpus_is_large_enough() {
    assert!(corpus().len() >= 50);
}

#[test]
fn stages_are_lossless_and_shrink() {
    let mut bytes_before = 0;
    let mut bytes_after = 0;
    for (name, text) in corpus() {
        let doc = parse_svg(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let st = normalize_stages(&doc, NormalizeOptions::default());
        assert_eq!(diff(&doc, &st.cleaned), 0.0, "{name}: clean");
        assert_eq!(diff(&st.cleaned, &st.reshaped), 0.0, "{name}: reshape");
        assert_eq!(diff(&st.reshaped, &st.resized), 0.0, "{name}: resize");
        let q = diff(&st.resized, &st.quantized);
        assert!(q < 1e-3, "{name}: quantize diff {q}");
        assert!(st.quantized.is_canonical(), "{name}");

        let before = DocStats::of(&doc, text.len());
        let out = serialize_svg(&st.quantized, CoordMode::Relative);
        let after = DocStats::of(&st.quantized, out.len());
        assert!(after.total() < before.total(), "{name}: element count");
        // cleaning only removes; reshaping then trades kinds for paths
        let cleaned = DocStats::of(&st.cleaned, 0);
        for (kind, n) in &cleaned.counts {
            assert!(*n <= before.counts[kind], "{name}: {kind}");
        }
        bytes_before += before.bytes;
        bytes_after += after.bytes;
    }
    assert!(
        bytes_after < bytes_before,
        "{bytes_after} >= {bytes_before}"
    );
}

#[test]
fn serializer_round_trips_normalized_corpus() {
    for (name, text) in corpus() {
        let doc = parse_svg(&text).unwrap();
        let norm = normalize_stages(&doc, NormalizeOptions::default()).quantized;
        for mode in [CoordMode::Absolute, CoordMode::Relative] {
            let back = parse_svg(&serialize_svg(&norm, mode)).unwrap();
            assert_eq!(back, norm, "{name} {mode:?}");
        }
        let abs = parse_svg(&serialize_svg(&doc, CoordMode::Absolute)).unwrap();
        let rel = parse_svg(&serialize_svg(&doc, CoordMode::Relative)).unwrap();
        assert_eq!(rasterize(&abs, 128), rasterize(&rel, 128), "{name}");
    }
}

#[test]
fn codec_round_trips_normalized_corpus() {
    let codec = Codec::default();
    for (name, text) in corpus() {
        let norm =
            normalize_stages(&parse_svg(&text).unwrap(), NormalizeOptions::default()).quantized;
        let m = codec.encode(&norm).unwrap();
        assert_eq!(codec.decode(&m).unwrap(), norm, "{name}");
        let mut bytes = Vec::new();
        m.write_mat(&mut bytes).unwrap();
        let back = vexel_core::codec::SvgMatrix::read_mat(bytes.as_slice()).unwrap();
        assert_eq!(codec.decode(&back).unwrap(), norm, "{name} via .mat");
    }
}
