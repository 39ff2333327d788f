use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use relbias_core::io::{
    load_dataset, read_table, sg_table, write_dataset, write_table, zs_table, LogitTable,
    TableValues,
};
use relbias_core::{Dataset, RelationLabelSpace, RelationSample, RelbiasError};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/three_k2")
}

#[test]
fn three_sample_fixture_loads() {
    let ds = load_dataset(&fixture().join("manifest.json")).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.k(), 2);
    assert_eq!(ds.space().name(1), "on");
    let ids: Vec<&str> = ds.samples().iter().map(|s| s.sample_id.as_str()).collect();
    assert_eq!(ids, ["p001", "p002", "p003"]);
    assert_eq!(ds.samples()[0].zs_logits, vec![2.0, -1.25]);
    assert_eq!(ds.samples()[2].sg_logits, vec![-0.5, -1.0, 4.0]);
    assert_eq!(ds.inventory().unwrap().len(), 1);
}

#[test]
fn fixture_round_trips_to_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_dataset(&fixture().join("manifest.json")).unwrap();
    let manifest = write_dataset(&ds, dir.path(), "", "manifest.json").unwrap();
    for name in [
        "zs_logits.tsv",
        "sg_logits.tsv",
        "train_triplets.tsv",
        "manifest.json",
    ] {
        let original = fs::read(fixture().join(name)).unwrap();
        let rewritten = fs::read(dir.path().join(name)).unwrap();
        assert_eq!(original, rewritten, "{name} differs");
    }
    assert_eq!(load_dataset(&manifest).unwrap(), ds);
}

fn write_manifest(dir: &Path, zs: &str, sg: &str) -> PathBuf {
    fs::write(dir.join("zs.tsv"), zs).unwrap();
    fs::write(dir.join("sg.tsv"), sg).unwrap();
    let manifest = dir.join("m.json");
    fs::write(
        &manifest,
        r#"{"zs_logits": "zs.tsv", "sg_logits": "sg.tsv"}"#,
    )
    .unwrap();
    manifest
}

fn header(k: usize, background: bool) -> String {
    let mut t = LogitTable::new(k, background, TableValues::Logits);
    t.rows.clear();
    t.render()
}

#[test]
fn empty_tables_give_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), &header(50, false), &header(50, true));
    let ds = load_dataset(&m).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.k(), 50);
}

const ZS_HEAD: &str = "#relbias-logits v1\tk=2\tbackground=0\nsample_id\timage_id\tsubject_class\tobject_class\tgt_label\tl1\tl2\n";
const SG_HEAD: &str =
    "#relbias-logits v1\tk=2\tbackground=1\nsample_id\timage_id\tsubject_class\tobject_class\tgt_label\tl0\tl1\tl2\n";

#[test]
fn nan_logit_is_reported_with_its_sample() {
    let dir = tempfile::tempdir().unwrap();
    let zs = format!("{ZS_HEAD}a\ti\t0\t1\t1\t0.1\t0.2\n");
    let sg = format!("{SG_HEAD}a\ti\t0\t1\t1\t0.0\tNaN\t0.2\n");
    let err = load_dataset(&write_manifest(dir.path(), &zs, &sg)).unwrap_err();
    assert!(
        err.to_string().contains("non-finite logit at sample_id a"),
        "{err}"
    );
}

#[test]
fn ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    let row_zs = "a\ti\t0\t1\t1\t0.1\t0.2\n";
    let row_sg = "a\ti\t0\t1\t1\t0.0\t0.1\t0.2\n";

    let orphan = format!("{SG_HEAD}{row_sg}b\ti\t0\t1\t1\t0.0\t0.1\t0.2\n");
    let err = load_dataset(&write_manifest(
        dir.path(),
        &format!("{ZS_HEAD}{row_zs}"),
        &orphan,
    ))
    .unwrap_err();
    assert!(matches!(err, RelbiasError::Orphan { .. }), "{err}");

    let dup = format!("{ZS_HEAD}{row_zs}{row_zs}");
    let err = load_dataset(&write_manifest(
        dir.path(),
        &dup,
        &format!("{SG_HEAD}{row_sg}"),
    ))
    .unwrap_err();
    assert!(matches!(err, RelbiasError::DuplicateSample(_)), "{err}");

    let narrow = format!("{ZS_HEAD}a\ti\t0\t1\t1\t0.1\n");
    let err = load_dataset(&write_manifest(
        dir.path(),
        &narrow,
        &format!("{SG_HEAD}{row_sg}"),
    ))
    .unwrap_err();
    assert!(matches!(err, RelbiasError::Dimension { .. }), "{err}");

    let bad_label = format!("{ZS_HEAD}a\ti\t0\t1\t3\t0.1\t0.2\n");
    let bad_label_sg = format!("{SG_HEAD}a\ti\t0\t1\t3\t0.0\t0.1\t0.2\n");
    assert!(load_dataset(&write_manifest(dir.path(), &bad_label, &bad_label_sg)).is_err());

    let err = load_dataset(&dir.path().join("missing.json")).unwrap_err();
    assert!(matches!(err, RelbiasError::Io { .. }), "{err}");
}

fn sample(id: &str, label: usize) -> RelationSample {
    RelationSample {
        sample_id: id.into(),
        image_id: "img".into(),
        subject_class: 0,
        object_class: 0,
        gt_label: label,
        zs_logits: vec![0.0; 2],
        sg_logits: vec![0.0; 3],
    }
}

fn dataset(labels: &[usize]) -> Dataset {
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| sample(&format!("s{i}"), y))
        .collect();
    Dataset::new(RelationLabelSpace::new(2, None).unwrap(), samples, None).unwrap()
}

#[test]
fn filter_keeps_non_background_in_order() {
    let ds = dataset(&[0, 1, 0, 2]).filter_nonbackground();
    let ids: Vec<&str> = ds.samples().iter().map(|s| s.sample_id.as_str()).collect();
    assert_eq!(ids, ["s1", "s3"]);
    assert!(dataset(&[0, 0, 0]).filter_nonbackground().is_empty());
}

#[test]
fn filter_on_a_hundred_samples() {
    // 37 of 100 labels are non-background.
    let labels: Vec<usize> = (0..100)
        .map(|i| if (i * 37) % 100 < 37 { 1 + i % 2 } else { 0 })
        .collect();
    let expected: Vec<usize> = labels.iter().copied().filter(|y| *y != 0).collect();
    assert_eq!(expected.len(), 37);
    let kept = dataset(&labels).filter_nonbackground();
    let got: Vec<usize> = kept.samples().iter().map(|s| s.gt_label).collect();
    assert_eq!(got, expected);
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec((0usize..=3, prop::collection::vec(-5.0f64..5.0, 7)), 0..30).prop_map(
        |rows| {
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(i, (y, v))| RelationSample {
                    sample_id: format!("id{i:03}"),
                    image_id: format!("img{}", i / 4),
                    subject_class: (i % 5) as u32,
                    object_class: (i % 3) as u32,
                    gt_label: y,
                    zs_logits: v[..3].to_vec(),
                    sg_logits: v[3..].to_vec(),
                })
                .collect();
            Dataset::new(RelationLabelSpace::new(3, None).unwrap(), samples, None).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_is_idempotent(ds in arb_dataset()) {
        let once = ds.filter_nonbackground();
        prop_assert_eq!(once.filter_nonbackground(), once);
    }

    #[test]
    fn join_ignores_row_order(ds in arb_dataset(), seed_a in any::<u64>(), seed_b in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut zs = zs_table(&ds);
        let mut sg = sg_table(&ds);
        shuffle(&mut zs.rows, seed_a);
        shuffle(&mut sg.rows, seed_b);
        write_table(&dir.path().join("zs.tsv"), &zs).unwrap();
        write_table(&dir.path().join("sg.tsv"), &sg).unwrap();
        let m = dir.path().join("m.json");
        fs::write(&m, r#"{"zs_logits": "zs.tsv", "sg_logits": "sg.tsv"}"#).unwrap();
        prop_assert_eq!(load_dataset(&m).unwrap(), ds);
    }

    #[test]
    fn tables_round_trip_exactly(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zs.tsv");
        let table = zs_table(&ds);
        write_table(&path, &table).unwrap();
        let back = read_table(&path).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(back.render(), fs::read_to_string(&path).unwrap());
    }
}

/// Fisher-Yates driven by a splitmix sequence.
fn shuffle<T>(xs: &mut [T], mut seed: u64) {
    let mut next = || {
        seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = seed;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    for i in (1..xs.len()).rev() {
        let j = (next() % (i as u64 + 1)) as usize;
        xs.swap(i, j);
    }
}
