mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stb_tensor::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor};
use stbalance::fusion::{FusionConfig, StFusion};
use stbalance::graph::{negative_sample, ReconstructionTerms};
use stbalance::model::{DataDims, EmbeddingConfig, ModelConfig, StBalance};
use stbalance::temporal::TemporalConfig;

fn model_cfg(layers: usize, graphs: usize) -> ModelConfig {
    ModelConfig {
        temporal: TemporalConfig {
            t_short: 8,
            t_long: 32,
            t_out: 2,
            patch_len: 8,
            d_p: 4,
            d_x: 4,
            d_model: 4,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            use_long: true,
            calendar: true,
        },
        fusion: FusionConfig {
            layers,
            graphs,
            d_s: 4,
            d_m: 4,
            gate_tokens: 2,
            sf_depth: 1,
            mf_depth: 1,
            head_skip: true,
        },
        embedding: EmbeddingConfig { rank: 2, ..EmbeddingConfig::default() },
    }
}

fn fusion_only(cfg: &FusionConfig, seed: u64) -> (ParamStore, StFusion) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = StFusion::new(&mut store, cfg, 3, 4, 2, &mut rng).unwrap();
    (store, f)
}

#[test]
fn zero_parameters_forecast_the_head_bias() {
    let (series, graphs) = common::toy(5, 1);
    let cfg = model_cfg(2, 2);
    let dims = DataDims { n_nodes: 5, n_features: 1, steps_per_day: series.steps_per_day() };
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, dims, &graphs, 3).unwrap();
    store.assign_flat(&vec![0.0; store.num_scalars()]).unwrap();
    store.set(model.fusion.head.b, Tensor::from_vec(vec![0.25, -1.5])).unwrap();
    let batch = common::batch(&series, 8, 32, 2, 3);
    let y = model.predict(&store, &batch).unwrap();
    assert_eq!(y.shape(), &[3, 5, 2]);
    for pair in y.data().chunks(2) {
        assert_eq!(pair, &[0.25, -1.5]);
    }
}

#[test]
fn parameter_count_matches_configuration() {
    let (series, graphs) = common::toy(5, 1);
    for (layers, j) in [(1, 1), (1, 2), (2, 1), (3, 2)] {
        let cfg = model_cfg(layers, j);
        let dims = DataDims { n_nodes: 5, n_features: 1, steps_per_day: series.steps_per_day() };
        let mut store = ParamStore::new();
        StBalance::new(&mut store, &cfg, dims, &graphs[..j], 0).unwrap();
        assert_eq!(store.num_scalars(), StBalance::expected_params(&cfg, dims), "L={layers} J={j}");
        assert_eq!(
            store.iter().filter(|(_, n, _)| n.contains(".gate.")).count() > 0,
            layers > 1,
            "gates exist on all but the last layer"
        );
    }
}

#[test]
fn single_graph_stack_runs_without_gates() {
    let (series, graphs) = common::toy(4, 2);
    let cfg = model_cfg(1, 1);
    let dims = DataDims { n_nodes: 4, n_features: 1, steps_per_day: series.steps_per_day() };
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, dims, &graphs[..1], 3).unwrap();
    assert!(model.fusion.layers[0].gate.is_none());
    let y = model.predict(&store, &common::batch(&series, 8, 32, 2, 2)).unwrap();
    assert!(y.is_finite());
    assert_eq!(y.shape(), &[2, 4, 2]);
}

#[test]
fn gate_saturates_to_passthrough_and_zero() {
    let cfg = FusionConfig { layers: 2, graphs: 1, d_s: 4, d_m: 4, gate_tokens: 2, ..FusionConfig::default() };
    let (mut store, f) = fusion_only(&cfg, 1);
    let gate = f.layers[0].gate.clone().unwrap();
    let s_val = Tensor::new(vec![1, 3, 4], (0..12).map(|i| i as f64 - 5.0).collect()).unwrap();
    let g_val = Tensor::new(vec![1, 3, 4], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
    for (bias, expect_scale) in [(60.0, 1.0), (-60.0, 0.0)] {
        gate.fc.zero(&mut store);
        store.set(gate.fc.b, Tensor::full(&[4], bias)).unwrap();
        let mut g = Graph::with_params(&store);
        let s = g.constant(s_val.clone());
        let sp = g.constant(g_val.clone());
        let out = f.feedback_update(&mut g, s, sp, 0).unwrap();
        for (o, v) in g.value(out).data().iter().zip(s_val.data()) {
            assert!((o - expect_scale * v).abs() < 1e-12, "bias {bias}: {o} vs {v}");
        }
    }
    let mut g = Graph::with_params(&store);
    let s = g.constant(s_val.clone());
    assert!(f.feedback_update(&mut g, s, s, 1).unwrap_err().is_validation());
}

#[test]
fn gate_does_not_mix_nodes() {
    let cfg = FusionConfig { layers: 2, graphs: 1, d_s: 4, d_m: 4, gate_tokens: 2, ..FusionConfig::default() };
    let (store, f) = fusion_only(&cfg, 2);
    let s_val = Tensor::new(vec![2, 3, 4], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let base: Vec<f64> = (0..24).map(|i| (i as f64 * 0.11).cos()).collect();
    let mut bumped = base.clone();
    for v in &mut bumped[4..8] {
        *v += 3.0; // node 1 of sample 0
    }
    let run = |sp: Vec<f64>| {
        let mut g = Graph::with_params(&store);
        let s = g.constant(s_val.clone());
        let sp = g.constant(Tensor::new(vec![2, 3, 4], sp).unwrap());
        let out = f.feedback_update(&mut g, s, sp, 0).unwrap();
        g.value(out).clone()
    };
    let (a, b) = (run(base), run(bumped));
    for row in 0..6 {
        let same = a.data()[row * 4..row * 4 + 4] == b.data()[row * 4..row * 4 + 4];
        assert_eq!(same, row != 1, "row {row}");
    }
}

#[test]
fn identical_graph_branches_give_identical_spatial_states() {
    let cfg = FusionConfig { layers: 2, graphs: 2, d_s: 4, d_m: 4, gate_tokens: 2, ..FusionConfig::default() };
    let (mut store, f) = fusion_only(&cfg, 4);
    // Tie the per-graph maps together.
    let copy = |store: &mut ParamStore, from: &str, to: &str| {
        let v = store.get(store.id(from).unwrap()).clone();
        let id = store.id(to).unwrap();
        store.set(id, v).unwrap();
    };
    for suffix in ["w", "b"] {
        copy(&mut store, &format!("fusion.phi0.{suffix}"), &format!("fusion.phi1.{suffix}"));
        for i in 0..2 {
            copy(&mut store, &format!("fusion.{i}.sf_head0.{suffix}"), &format!("fusion.{i}.sf_head1.{suffix}"));
        }
    }
    let mut g = Graph::with_params(&store);
    let h = g.constant(Tensor::new(vec![5, 3], (0..15).map(|i| (i as f64).sin()).collect()).unwrap());
    let x = g.constant(Tensor::new(vec![2, 5, 4], (0..40).map(|i| (i as f64 * 0.2).cos()).collect()).unwrap());
    let mut state = f.init_fusion(&mut g, h, 2, 2).unwrap();
    assert_eq!(g.value(state.spatial[0]), g.value(state.spatial[1]));
    for i in 0..2 {
        let s0 = f.single_fusion(&mut g, x, state.spatial[0], state.fused, i, 0).unwrap();
        let s1 = f.single_fusion(&mut g, x, state.spatial[1], state.fused, i, 1).unwrap();
        assert_eq!(g.value(s0), g.value(s1));
        state.fused = f.multi_fusion(&mut g, &[s0, s1], i).unwrap();
        if i == 0 {
            state.spatial[0] = f.feedback_update(&mut g, s0, state.spatial[0], i).unwrap();
            state.spatial[1] = f.feedback_update(&mut g, s1, state.spatial[1], i).unwrap();
        }
    }
}

#[test]
fn multi_fusion_validates_inputs() {
    let cfg = FusionConfig { layers: 1, graphs: 2, d_s: 4, d_m: 4, gate_tokens: 2, ..FusionConfig::default() };
    let (store, f) = fusion_only(&cfg, 0);
    let mut g = Graph::with_params(&store);
    let a = g.constant(Tensor::zeros(&[1, 3, 4]));
    let b = g.constant(Tensor::zeros(&[1, 2, 4]));
    assert!(f.multi_fusion(&mut g, &[a], 0).is_err());
    assert!(f.multi_fusion(&mut g, &[a, b], 0).is_err());
    let h = g.constant(Tensor::zeros(&[3, 3]));
    assert!(f.init_fusion(&mut g, h, 1, 1).is_err());
}

#[test]
fn full_objective_gradient_on_four_nodes() {
    let (series, graphs) = common::toy(4, 6);
    let batch = common::batch(&series, 8, 32, 2, 2);
    let negatives = negative_sample(&graphs[0], 1, 0).unwrap();
    let terms = ReconstructionTerms::new(&graphs[0], &negatives, 1.0).unwrap();
    for layers in [1, 3] {
        let cfg = model_cfg(layers, 2);
        let dims = DataDims { n_nodes: 4, n_features: 1, steps_per_day: series.steps_per_day() };
        let mut store = ParamStore::new();
        let model = StBalance::new(&mut store, &cfg, dims, &graphs, 11).unwrap();
        let report = grad_check(&store, &GradCheckOptions::default(), |g: &mut Graph| {
            model.loss(g, &batch, Some(&terms))
        })
        .unwrap();
        assert!(report.min_kink_distance > 1e-4, "L={layers}: {}", report.min_kink_distance);
        assert!(report.max_rel_error < 1e-4, "L={layers}: {} in {}", report.max_rel_error, report.worst);
    }
}

#[test]
fn no_activation_scales_with_node_count_squared() {
    // Odd N so that no configured width coincides with it.
    let n = 7;
    let (series, graphs) = common::toy(n, 9);
    let batch = common::batch(&series, 8, 32, 2, 2);
    let negatives = negative_sample(&graphs[0], 3, 0).unwrap();
    let terms = ReconstructionTerms::new(&graphs[0], &negatives, 1.0).unwrap();
    let cfg = model_cfg(2, 2);
    let dims = DataDims { n_nodes: n, n_features: 1, steps_per_day: series.steps_per_day() };
    let mut store = ParamStore::new();
    let model = StBalance::new(&mut store, &cfg, dims, &graphs, 0).unwrap();
    let mut g = Graph::with_params(&store);
    model.loss(&mut g, &batch, Some(&terms)).unwrap();
    for shape in g.recorded_shapes() {
        let node_axes = shape.iter().filter(|&&d| d == n || d % n == 0 && d != 0 && d / n >= n).count();
        assert!(node_axes <= 1, "activation {shape:?} has an N x N footprint");
        assert!(shape.iter().product::<usize>() < 2 * 8 * 32 * n, "activation {shape:?} is unexpectedly large");
    }
}
