use favit::check::random_case;
use favit::fasa::{
    self, dilated_sample, partition_windows, FasaConfig, FasaParams, Fusion, WindowGrid,
};
use favit::oracle;
use favit::{IndexGrid, Initializer, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn ramp(h: usize, w: usize) -> Tensor {
    Tensor::new(&[h, w, 1], (0..h * w).map(|v| v as f64).collect()).unwrap()
}

#[test]
fn five_by_five_partition_with_side_three() {
    let (grid, windows) = partition_windows(&ramp(5, 5), 3, 2).unwrap();
    assert_eq!((grid.down, grid.across, windows.len()), (2, 2, 4));
    // window 1 covers columns 3..6 of rows 0..3; column 5 is padding
    assert_eq!(
        windows[1].data(),
        &[3.0, 4.0, 0.0, 8.0, 9.0, 0.0, 13.0, 14.0, 0.0]
    );
    // window 3 holds the bottom-right corner only
    assert_eq!(
        windows[3].data(),
        &[18.0, 19.0, 0.0, 23.0, 24.0, 0.0, 0.0, 0.0, 0.0]
    );
    let (idx, samples) = dilated_sample(&windows[0], 2, 2).unwrap();
    assert_eq!(idx.offsets(), &[(0, 0), (0, 2), (2, 0), (2, 2)]);
    assert_eq!(samples.data(), &[0.0, 2.0, 10.0, 12.0]);
}

#[test]
fn indivisible_maps_get_ceiling_window_counts() {
    let g = WindowGrid::new(56, 56, 49, 7).unwrap();
    assert_eq!(g.count(), 4);
    assert_eq!(g.locate(3, (6, 6)), Some((55, 55)));
    assert_eq!(g.locate(3, (7, 0)), None);
    assert_eq!(WindowGrid::new(14, 7, 7, 7).unwrap().count(), 2);
}

#[test]
fn dilated_grid_is_row_major() {
    let g = IndexGrid::dilated(49, 7, 8).unwrap();
    assert_eq!(g.len(), 49);
    assert_eq!(g.offsets()[1], (0, 8));
    assert_eq!(g.offsets()[48], (48, 48));
    assert!(IndexGrid::new(3, 3, vec![(1, 0), (0, 1)]).is_err());
}

#[test]
fn mismatched_sampling_is_rejected() {
    let err = dilated_sample(&Tensor::zeros(&[4, 4, 1]), 3, 2)
        .unwrap_err()
        .to_string();
    assert!(err.contains("S=4"), "{err}");
}

#[test]
fn channel_count_and_group_divisibility_are_validated() {
    let cfg = FasaConfig::new(4, vec![1, 2], 1, 2, Fusion::Max).unwrap();
    let mut store = ParamStore::new();
    let params = FasaParams::register(&mut store, "a", &cfg, &mut Initializer::new(0)).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 6]));
    assert!(fasa::fasa_forward(&mut tape, &store, &params, &cfg, x, false).is_err());
    assert!(FasaConfig::new(6, vec![1, 2, 3, 4], 1, 2, Fusion::Max).is_err());
}

#[test]
fn padded_maps_match_the_scalar_reference() {
    // map sides that no window side divides
    for seed in 0..20 {
        let case = random_case(1000 + seed, false, None);
        let (store, params, x) = case.materialize().unwrap();
        let want = oracle::brute_force_fasa(&x, &case.cfg, &store, &params).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, _) = fasa::fasa_forward(&mut tape, &store, &params, &case.cfg, xv, false).unwrap();
        assert!(tape.value(y).max_abs_diff(&want) < 1e-10, "{:?}", case);
    }
}

#[test]
fn b0_stage_one_layer_runs_with_padding() {
    let cfg = FasaConfig::new(32, vec![1, 8], 1, 7, Fusion::Max).unwrap();
    let mut store = ParamStore::new();
    let mut init = Initializer::new(9);
    let params = FasaParams::register(&mut store, "s1", &cfg, &mut init).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(init.normal(&[1, 56, 56, 32]));
    let (y, traces) = fasa::fasa_forward(&mut tape, &store, &params, &cfg, x, true).unwrap();
    assert_eq!(tape.shape(y), &[1, 56, 56, 32]);
    assert_eq!(traces[0].window_count(), 64);
    assert_eq!(traces[1].window_count(), 4);
    assert_eq!(traces[1].fused_keys.shape(), &[49, 16]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_group_sees_exactly_m_squared_keys(seed in any::<u64>()) {
        let case = random_case(seed, false, None);
        let (store, params, x) = case.materialize().unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, traces) = fasa::fasa_forward(&mut tape, &store, &params, &case.cfg, xv, true).unwrap();
        prop_assert_eq!(tape.shape(y), &[case.batch, case.h, case.w, case.cfg.channels][..]);
        let m2 = case.cfg.sample_side * case.cfg.sample_side;
        for tr in &traces {
            prop_assert_eq!(tr.fused_keys.shape(), &[case.batch * m2, case.cfg.group_channels()][..]);
            prop_assert_eq!(tr.sample_grid.len(), m2);
            for j in 0..tr.window_count() {
                prop_assert!(tr.sampled_grid(j).len() <= m2);
            }
        }
    }

    #[test]
    fn argmax_names_a_real_window(seed in any::<u64>()) {
        let case = random_case(seed, false, Some(Fusion::Max));
        let (store, params, x) = case.materialize().unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (_, traces) = fasa::fasa_forward(&mut tape, &store, &params, &case.cfg, xv, true).unwrap();
        for tr in &traces {
            let arg = tr.key_argmax.as_ref().unwrap();
            prop_assert!(arg.iter().all(|&j| (j as usize) < tr.window_count()));
        }
    }

    #[test]
    fn batch_items_are_independent(seed in any::<u64>()) {
        let mut case = random_case(seed, false, None);
        case.batch = 2;
        let (store, params, x) = case.materialize().unwrap();
        let per = x.numel() / 2;
        let run = |t: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(t);
            let (y, _) = fasa::fasa_forward(&mut tape, &store, &params, &case.cfg, xv, false).unwrap();
            tape.value(y).clone()
        };
        let both = run(x.clone());
        let first = run(Tensor::new(&[1, case.h, case.w, case.cfg.channels], x.data()[..per].to_vec()).unwrap());
        prop_assert!(both.data()[..per].iter().zip(first.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
