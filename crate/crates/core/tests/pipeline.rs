use stbalance::config::RunConfig;
use stbalance::data::{load_series, LoadOptions, SeriesFormat};
use stbalance::experiment::{load_dataset, synthesize, write_synth};
use stbalance::train::{window_shape, Split};

fn small() -> RunConfig {
    RunConfig::load(None, &["synth.nodes=6".into(), "synth.days=2".into(), "model.embedding.rank=3".into()]).unwrap()
}

#[test]
fn synthetic_files_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let synth = synthesize(&cfg).unwrap();
    let files = write_synth(dir.path(), &synth).unwrap();
    assert_eq!(files.len(), 5);

    let csv = load_series(&dir.path().join("series.csv"), SeriesFormat::LongCsv, LoadOptions::default()).unwrap();
    assert_eq!(csv.values(), synth.series.values());
    assert_eq!(csv.timestamp(0), synth.series.timestamp(0));
    assert_eq!(csv.steps_per_day(), Some(288));

    let stb = load_series(&dir.path().join("series.stb"), SeriesFormat::Container, LoadOptions::default()).unwrap();
    assert_eq!(stb.values(), synth.series.values());
    assert_eq!(stb.timestamp(0), None);

    let p = |f: &str| dir.path().join(f).display().to_string();
    let from_files = RunConfig::load(
        None,
        &[
            "synth.nodes=6".into(),
            "model.embedding.rank=3".into(),
            format!("data.series=\"{}\"", p("series.stb")),
            format!("data.graphs=[\"{}\", \"{}\"]", p("graph_distance.csv"), p("graph_binary.csv")),
            "data.start_timestamp=1704067200".into(),
            "data.step_seconds=300".into(),
        ],
    )
    .unwrap();
    let a = load_dataset(&cfg).unwrap();
    let b = load_dataset(&from_files).unwrap();
    assert_eq!(a.raw.values(), b.raw.values());
    assert_eq!(a.dims(true), b.dims(true));
    assert_eq!(a.graphs[0].edges(), b.graphs[0].edges());
    assert_eq!(a.graphs[1].edges(), b.graphs[1].edges());
}

#[test]
fn splits_are_chronological_and_targets_stay_inside() {
    let cfg = small();
    let data = load_dataset(&cfg).unwrap();
    let (tr, va, te) = (data.range(Split::Train), data.range(Split::Val), data.range(Split::Test));
    let ts = |t: usize| data.raw.timestamp(t).unwrap();
    assert!(ts(tr.end - 1) < ts(va.start) && ts(va.end - 1) < ts(te.start));
    let shape = window_shape(&cfg.model, 1, 0);
    for split in [Split::Train, Split::Val, Split::Test] {
        let r = data.range(split);
        let w = data.windows(shape, split, 0).unwrap();
        for &e in w.ends() {
            assert!(e >= r.start && e + shape.t_out <= r.end, "{split:?} window at {e}");
        }
    }
}

#[test]
fn partial_time_axis_is_rejected_with_its_key() {
    let err = RunConfig::load(None, &["data.step_seconds=300".into()]).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("data.step_seconds"), "{err}");
}

#[test]
fn graph_file_count_must_match_fusion_graphs() {
    let err = RunConfig::load(None, &["data.series=\"x.csv\"".into(), "data.graphs=[\"g.csv\"]".into()]).unwrap_err();
    assert!(err.to_string().contains("data.graphs"), "{err}");
}

#[test]
fn missing_series_file_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv").display().to_string();
    let cfg = RunConfig::load(
        None,
        &[format!("data.series=\"{missing}\""), "data.graphs=[\"a.csv\", \"b.csv\"]".into()],
    )
    .unwrap();
    let err = load_dataset(&cfg).unwrap_err();
    assert!(err.to_string().contains("nope.csv"), "{err}");
}
