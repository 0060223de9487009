use favit::attnmap;
use favit::fasa::{FasaConfig, Fusion};
use favit::flops::{self, formula_macs, Mechanism, SweepOptions, SweepTarget};
use favit::model::{self, load_variant, ForwardOptions, ModelParams, VariantSpec};
use favit::{Initializer, Tape, Tensor};

/// Parameter count written out from the layer shapes.
fn analytic_params(spec: &VariantSpec) -> usize {
    let c1 = spec.stages[0].channels;
    let mut total = 49 * spec.in_channels * c1 + c1 + 4 * c1 * c1 + c1;
    let mut prev = c1;
    for (s, st) in spec.stages.iter().enumerate() {
        let c = st.channels;
        let g = st.dilations.len();
        if s > 0 {
            total += 4 * prev * c + c;
        }
        let block = 4 * c + 3 * c * c / g + c * c + 2 * st.mlp_ratio * c * c;
        total += st.blocks * block + 2 * c;
        prev = c;
    }
    total + prev * spec.num_classes + spec.num_classes
}

#[test]
fn parameter_counts_match_layer_arithmetic() {
    for name in model::VARIANT_NAMES {
        let spec = load_variant(name).unwrap();
        let m = ModelParams::build(&spec, 1).unwrap();
        assert_eq!(model::count_params(&m), analytic_params(&spec), "{name}");
    }
}

#[test]
fn unknown_variant_and_bad_config_fail() {
    assert!(matches!(
        load_variant("BX"),
        Err(favit::Error::UnknownVariant(_))
    ));
    let mut spec = load_variant("B0").unwrap();
    spec.stages[1].dilations = vec![1, 3, 5];
    assert!(spec.validate().is_err());
    spec = load_variant("B0").unwrap();
    spec.stages.pop();
    assert!(spec.validate().is_err());
}

#[test]
fn weights_survive_a_file_round_trip() {
    let spec = load_variant("B0").unwrap();
    let a = ModelParams::build(&spec, 5).unwrap();
    let mut b = ModelParams::build(&spec, 6).unwrap();
    assert!(!a.store.bit_identical(&b.store));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b0.favt");
    a.store.save(&path).unwrap();
    b.store.load_values(&path).unwrap();
    assert!(a.store.bit_identical(&b.store));
}

#[test]
fn pyramid_extents_and_logits() {
    let spec = load_variant("B0").unwrap().with_classes(7);
    let m = ModelParams::build(&spec, 2).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Initializer::new(0).normal(&[2, 64, 96, 3]));
    let out = model::favit_forward(&mut tape, &m, x, &ForwardOptions::default()).unwrap();
    let shapes: Vec<_> = out
        .pyramid
        .iter()
        .map(|&v| tape.shape(v).to_vec())
        .collect();
    assert_eq!(
        shapes,
        vec![
            vec![2, 16, 24, 32],
            vec![2, 8, 12, 64],
            vec![2, 4, 6, 128],
            vec![2, 2, 3, 256]
        ]
    );
    assert_eq!(tape.shape(out.logits.unwrap()), &[2, 7]);
}

#[test]
fn single_window_costs_match_the_formula_exactly() {
    for (m, c) in [(3usize, 4usize), (5, 6), (7, 8)] {
        let cfg = FasaConfig::new(c, vec![1], 1, m, Fusion::Max).unwrap();
        let measured = flops::measure_mechanism(Mechanism::Fasa, &cfg, m, 0).unwrap();
        let n = (m * m) as u64;
        assert_eq!(
            measured as u128,
            formula_macs(Mechanism::Fasa, n, c as u64, m as u64).unwrap()
        );
        let dense = flops::measure_mechanism(Mechanism::DenseSa, &cfg, m, 0).unwrap();
        assert_eq!(
            dense as u128,
            formula_macs(Mechanism::DenseSa, n, c as u64, 0).unwrap()
        );
    }
}

#[test]
fn divisible_single_group_layers_hit_the_bound() {
    // G = 1, D = 1: every sample is in bounds, so the bound is attained
    let cfg = FasaConfig::new(8, vec![1], 2, 7, Fusion::Mean).unwrap();
    let measured = flops::measure_mechanism(Mechanism::Fasa, &cfg, 28, 0).unwrap();
    assert_eq!(
        measured as u128,
        formula_macs(Mechanism::Fasa, 784, 8, 7).unwrap()
    );
    let window = flops::measure_mechanism(Mechanism::WindowSa, &cfg, 28, 0).unwrap();
    assert_eq!(
        window as u128,
        formula_macs(Mechanism::WindowSa, 784, 8, 7).unwrap()
    );
}

#[test]
fn grouped_layers_stay_below_the_bound() {
    let cfg = FasaConfig::new(32, vec![1, 8], 1, 7, Fusion::Max).unwrap();
    for side in [7, 14, 56] {
        let measured = flops::measure_mechanism(Mechanism::Fasa, &cfg, side, 0).unwrap();
        let bound = formula_macs(Mechanism::Fasa, (side * side) as u64, 32, 7).unwrap();
        assert!((measured as u128) <= bound, "side {side}");
    }
}

#[test]
fn sweep_sorts_sizes_and_rejects_bad_ones() {
    let cfg = FasaConfig::new(8, vec![1], 1, 2, Fusion::Max).unwrap();
    let target = SweepTarget::Mechanism {
        mechanism: Mechanism::Fasa,
        config: cfg,
    };
    let opts = SweepOptions {
        repeats: 0,
        ..SweepOptions::default()
    };
    let rows = flops::sweep(&target, &[64, 32], &opts).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.size).collect::<Vec<_>>(),
        vec![32, 64]
    );
    assert!(rows.iter().all(|r| r.wall_seconds == 0.0));
    assert!(flops::sweep(&target, &[], &opts).is_err());
    assert!(flops::sweep(&target, &[30], &opts).is_err());
}

#[test]
fn variant_macs_stay_below_the_analytic_total() {
    let spec = load_variant("B0").unwrap();
    let m = ModelParams::build(&spec, 0).unwrap();
    let measured = flops::measure_variant(&m, 64, 0).unwrap();
    let bound = flops::variant_formula_macs(&spec, 64).unwrap();
    assert!((measured as u128) <= bound);
    assert!(measured as f64 > 0.8 * bound as f64);
}

fn tiny_spec(fusion: Fusion) -> VariantSpec {
    let mut spec = load_variant("B0")
        .unwrap()
        .with_fusion(fusion)
        .with_classes(2);
    for st in &mut spec.stages {
        st.blocks = 1;
    }
    spec
}

#[test]
fn span_maps_conserve_attention_mass() {
    for fusion in [Fusion::Max, Fusion::Mean] {
        let m = ModelParams::build(&tiny_spec(fusion), 4).unwrap();
        let img = Initializer::new(1).normal(&[1, 224, 224, 3]);
        let spans = attnmap::stage_spans(&m, 1, (20, 33), img).unwrap();
        assert_eq!(spans.len(), 2);
        for s in &spans {
            assert!((s.total() - 1.0).abs() < 1e-12, "{fusion}: {}", s.total());
            assert!((s.key_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // coarse group: samples sit on the stride-8 lattice of each 49-window
        let coarse = spans[1].support();
        assert!(coarse
            .iter()
            .all(|&(r, c)| (r % 49) % 8 == 0 && (c % 49) % 8 == 0));
        let (min_c, max_c) = coarse
            .iter()
            .fold((usize::MAX, 0), |(a, b), &(_, c)| (a.min(c), b.max(c)));
        assert!(max_c - min_c >= 48);
    }
}

#[test]
fn single_window_span_covers_the_whole_grid() {
    // 4th stage of a 224 input is 7x7: one window, every position sampled
    let m = ModelParams::build(&tiny_spec(Fusion::Mean), 4).unwrap();
    let img = Initializer::new(2).normal(&[1, 224, 224, 3]);
    let spans = attnmap::stage_spans(&m, 4, (3, 3), img).unwrap();
    assert_eq!(spans.len(), 1);
    assert_eq!(spans[0].support().len(), 49);
    assert_eq!(spans[0].padding_mass, 0.0);
    let gray = spans[0].to_gray();
    assert_eq!(*gray.iter().max().unwrap(), 255);
}

#[test]
fn out_of_range_queries_are_rejected() {
    let m = ModelParams::build(&tiny_spec(Fusion::Max), 4).unwrap();
    let img = Tensor::zeros(&[1, 64, 64, 3]);
    assert!(attnmap::stage_spans(&m, 1, (16, 0), img.clone()).is_err());
    assert!(attnmap::stage_spans(&m, 5, (0, 0), img).is_err());
}
