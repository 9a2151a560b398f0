use stb_tensor::{Adam, ParamStore, Tensor};
use stbalance::batch::Batch;
use stbalance::checkpoint::{load_checkpoint, save_checkpoint};
use stbalance::config::RunConfig;
use stbalance::data::{synth_generate, SeriesTensor, SplitSpec, SynthProfile};
use stbalance::experiment::restore_model;
use stbalance::fusion::FusionConfig;
use stbalance::graph::SparseGraph;
use stbalance::model::{EmbeddingConfig, ModelConfig, StBalance};
use stbalance::temporal::TemporalConfig;
use stbalance::train::{batch_gradient, evaluate, predict_windows, train, window_shape, Dataset, Split, TrainConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        temporal: TemporalConfig {
            t_short: 8,
            t_long: 32,
            t_out: 3,
            patch_len: 8,
            d_p: 4,
            d_x: 4,
            d_model: 4,
            heads: 2,
            ..TemporalConfig::default()
        },
        fusion: FusionConfig { d_s: 4, d_m: 4, gate_tokens: 2, ..FusionConfig::default() },
        embedding: EmbeddingConfig { rank: 3, ..EmbeddingConfig::default() },
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig { epochs: 2, stride: 6, eval_stride: 6, batch_size: 8, ..TrainConfig::default() }
}

fn dataset(per_node: bool) -> Dataset {
    let s = synth_generate(5, 2, 5, 3, &SynthProfile::default()).unwrap();
    Dataset::new(s.series, vec![s.distance_graph, s.binary_graph], &SplitSpec::default(), per_node, 0).unwrap()
}

fn run_config(model: &ModelConfig, tc: &TrainConfig) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = model.clone();
    cfg.train = tc.clone();
    cfg
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let data = dataset(false);
    let cfg = small_model();
    let tc = TrainConfig { lr: 0.0, epochs: 1, ..quick_train() };
    let mut init = ParamStore::new();
    StBalance::new(&mut init, &cfg, data.dims(true), &data.graphs, tc.seed).unwrap();
    let out = train(&cfg, &data, &tc, 32).unwrap();
    assert_eq!(out.store.flatten(), init.flatten());
}

#[test]
fn training_is_reproducible_and_thread_count_independent() {
    let data = dataset(false);
    let cfg = small_model();
    let tc = quick_train();
    let a = train(&cfg, &data, &tc, 32).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| train(&cfg, &data, &tc, 32).unwrap());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.store.flatten(), b.store.flatten());
    let other = train(&cfg, &data, &TrainConfig { seed: tc.seed + 1, ..tc.clone() }, 32).unwrap();
    assert_ne!(a.store.flatten(), other.store.flatten());
}

#[test]
fn overfits_a_single_window() {
    let data = dataset(false);
    let mut cfg = small_model();
    cfg.embedding.refine = false;
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, data.dims(true), &data.graphs, 1).unwrap();
    let w = data.windows(window_shape(&cfg, 1, 0), Split::Train, 32).unwrap();
    let pairs = vec![w.get(10)];
    let mut adam = Adam::new(store.num_scalars(), 1e-2);
    let first = batch_gradient(&model, &store, &pairs, None, 4).unwrap().0;
    let mut last = first;
    for _ in 0..300 {
        let (loss, grads) = batch_gradient(&model, &store, &pairs, None, 4).unwrap();
        let mut flat = store.flatten();
        adam.step(&mut flat, &grads);
        store.assign_flat(&flat).unwrap();
        last = loss;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn chunked_gradient_equals_whole_batch_gradient() {
    let data = dataset(false);
    let cfg = small_model();
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, data.dims(true), &data.graphs, 1).unwrap();
    let w = data.windows(window_shape(&cfg, 3, 0), Split::Train, 32).unwrap();
    let pairs: Vec<_> = (0..6).map(|i| w.get(i)).collect();
    let (l1, g1) = batch_gradient(&model, &store, &pairs, None, 1).unwrap();
    let (l6, g6) = batch_gradient(&model, &store, &pairs, None, 6).unwrap();
    assert!((l1 - l6).abs() < 1e-12);
    let worst = g1.iter().zip(&g6).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn constant_series_has_exact_baselines() {
    let n = 4;
    let steps = 288;
    let values: Vec<f64> = (0..n).flat_map(|node| std::iter::repeat_n(10.0 * (node + 1) as f64, steps)).collect();
    let series = SeriesTensor::new(Tensor::new(vec![n, steps, 1], values).unwrap())
        .unwrap()
        .with_time(1_704_067_200, 300)
        .unwrap();
    let ring: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    let g = SparseGraph::undirected(n, &ring).unwrap();
    let data = Dataset::new(series, vec![g.clone(), g], &SplitSpec::default(), true, 0).unwrap();
    assert_eq!(data.normalizer.flagged.len(), n);
    let cfg = small_model();
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, data.dims(true), &data.graphs, 0).unwrap();
    let report = evaluate(&model, &store, &data, Split::Test, 1, 32).unwrap();
    assert_eq!(report.hl.mae, 0.0);
    assert_eq!(report.climatology.mae, 0.0);
    assert!(report.overall.undefined.contains(&"pnse"));
    assert!(report.overall.pnse.is_nan());
}

#[test]
fn predictions_are_denormalised_per_node() {
    let data = dataset(true);
    let cfg = small_model();
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, data.dims(true), &data.graphs, 0).unwrap();
    store.assign_flat(&vec![0.0; store.num_scalars()]).unwrap();
    store.set(model.fusion.head.b, Tensor::from_vec(vec![0.0, 1.0, -2.0])).unwrap();
    let w = data.windows(window_shape(&cfg, 10, 0), Split::Test, 32).unwrap();
    let p = predict_windows(&model, &store, &w, &data).unwrap();
    let nrm = &data.normalizer;
    for s in 0..w.len() {
        for node in 0..5 {
            for (h, z) in [0.0, 1.0, -2.0].iter().enumerate() {
                let got = p.predictions.data()[(s * 5 + node) * 3 + h];
                let expect = nrm.mean[node] + nrm.std[node] * z;
                assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
                let target = p.targets.data()[(s * 5 + node) * 3 + h];
                assert_eq!(target, data.raw.at(node, w.ends()[s] + h, 0));
            }
        }
    }
}

#[test]
fn checkpoint_roundtrip_restores_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(false);
    let model_cfg = small_model();
    let tc = quick_train();
    let cfg = run_config(&model_cfg, &tc);
    let out = train(&model_cfg, &data, &tc, 32).unwrap();
    let weights = dir.path().join("model.stb");
    save_checkpoint(&weights, &out.store, &cfg, &data.normalizer).unwrap();
    let (model, store, manifest) = restore_model(&cfg, &data, &weights).unwrap();
    assert_eq!(store.flatten(), out.store.flatten());
    assert_eq!(manifest.config_hash, cfg.hash());
    let w = data.windows(window_shape(&model_cfg, 6, 0), Split::Test, 32).unwrap();
    let batch = Batch::from_pairs(&[w.get(0)]).unwrap();
    assert_eq!(model.predict(&store, &batch).unwrap(), out.model.predict(&out.store, &batch).unwrap());

    // A different rank changes the layout.
    let mut other = cfg.clone();
    other.model.embedding.rank = 2;
    let mut store2 = ParamStore::new();
    StBalance::new(&mut store2, &other.model, data.dims(true), &data.graphs, 0).unwrap();
    assert!(load_checkpoint(&weights, &mut store2, &other).unwrap_err().is_validation());

    // Truncated weights are reported with a byte offset.
    let bytes = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &bytes[..bytes.len() - 8]).unwrap();
    let err = restore_model(&cfg, &data, &weights).unwrap_err();
    assert!(err.to_string().contains("byte"), "{err}");
}

#[test]
fn report_files_have_fixed_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(false);
    let cfg = small_model();
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, data.dims(true), &data.graphs, 0).unwrap();
    let report = evaluate(&model, &store, &data, Split::Test, 4, 32).unwrap();
    let m = dir.path().join("metrics.csv");
    report.write_metrics(&m).unwrap();
    let text = std::fs::read_to_string(&m).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "horizon,mae,rmse,pcc,r2,kge,mnse,pnse");
    assert_eq!(lines.len(), 1 + 1 + 3);
    assert!(lines[1].starts_with("all,"));
    let b = dir.path().join("baselines.csv");
    report.write_baselines(&b).unwrap();
    let text = std::fs::read_to_string(&b).unwrap();
    let methods: Vec<_> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["st_balance", "hl", "climatology"]);
}

#[test]
fn empty_split_is_a_validation_error() {
    let data = dataset(false);
    let mut cfg = small_model();
    cfg.temporal.t_long = 512;
    cfg.temporal.patch_len = 8;
    let err = train(&cfg, &data, &quick_train(), 512).unwrap_err();
    assert!(err.is_validation(), "{err}");
}
