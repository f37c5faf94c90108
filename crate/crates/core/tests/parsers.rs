//! Every parser on the checked-in fuzz seeds, plus randomized round trips.

use std::fs;
use std::path::PathBuf;

use chestssl::checkpoint::parse_metadata;
use chestssl::config::RunConfig;
use chestssl::data::parse_manifest;
use chestssl::evaluate::parse_report_csv;
use chestssl::tensor_io::{decode, decode_features, encode_f64};
use proptest::prelude::*;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn manifest_seeds_parse_and_roundtrip() {
    for (path, bytes) in seeds("manifest") {
        let m = parse_manifest(text(&bytes), "seed", None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = parse_manifest(&m.to_csv(), "seed", None).unwrap();
        assert_eq!(again.records, m.records);
    }
}

#[test]
fn tensor_seeds_decode() {
    for (path, bytes) in seeds("tensor_blob") {
        let blob = decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(blob.shape.iter().product::<usize>(), blob.data.len());
    }
    for (path, bytes) in seeds("feature_cache") {
        let f = decode_features(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(f.nrows() >= 1);
    }
}

#[test]
fn checkpoint_meta_seeds_parse() {
    for (path, bytes) in seeds("checkpoint_meta") {
        let meta = parse_metadata(text(&bytes)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(parse_metadata(&meta.to_text()).unwrap(), meta);
    }
}

#[test]
fn config_seeds_parse_and_validate() {
    for (path, bytes) in seeds("run_config") {
        let cfg = RunConfig::parse(text(&bytes)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }
}

#[test]
fn report_seeds_parse() {
    for (path, bytes) in seeds("report_csv") {
        parse_report_csv(text(&bytes)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

fn field() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "1", "0", " ", "/", ".", "x", "train", "val", "é"]),
        0..4,
    )
    .prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn manifest_parser_roundtrips(rows in prop::collection::vec((field(), field(), field(), field()), 0..8)) {
        let mut text = String::from("image_path,label,patient_id,split\n");
        for (a, b, c, d) in &rows {
            text.push_str(&format!("{a},{b},{c},{d}\n"));
        }
        if let Ok(m) = parse_manifest(&text, "p", None) {
            let again = parse_manifest(&m.to_csv(), "p", None).unwrap();
            prop_assert_eq!(again.records, m.records);
        }
    }

    #[test]
    fn f64_blobs_reencode_identically(bytes in prop::collection::vec(any::<u8>(), 0..80)) {
        let mut data = b"CXTB\x01\x01\x01\x00".to_vec();
        data.extend_from_slice(&((bytes.len() / 8) as u64).to_le_bytes());
        data.extend_from_slice(&bytes[..bytes.len() / 8 * 8]);
        let blob = decode(&data).unwrap();
        prop_assert_eq!(encode_f64(&blob.into_f64()), data);
    }

    #[test]
    fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode(&bytes);
        let _ = decode_features(&bytes);
        let s = String::from_utf8_lossy(&bytes);
        let _ = parse_manifest(&s, "p", None);
        let _ = parse_metadata(&s);
        let _ = parse_report_csv(&s);
        if let Ok(cfg) = RunConfig::parse(&s) {
            let _ = cfg.validate();
        }
    }

    #[test]
    fn metadata_lines_never_panic(lines in prop::collection::vec(
        (prop::sample::select(vec!["format", "epoch", "step", "architecture", "hidden_size", "output_size", "config_digest", "loss", "x"]),
         prop::sample::select(vec!["chestssl-checkpoint/1", "1", "0", "-1", "tiny_cnn", "3 0.5", "1 nan", "", "99999999999"])),
        0..12)) {
        let text: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        if let Ok(meta) = parse_metadata(&text) {
            prop_assert_eq!(parse_metadata(&meta.to_text()).unwrap(), meta);
        }
    }
}
