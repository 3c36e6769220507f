use adaptseg::adapters::{attach, Preset};
use adaptseg::autodiff::{Graph, Tensor, LAYERNORM_EPS};
use adaptseg::model::{ClickPrompt, ModelConfig, SegModel, Segmenter};
use proptest::prelude::*;

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-30.0f64..30.0, r * c),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, c, data) in rows(6, 12)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![r, c], data).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layernorm_standardizes_rows((r, c, data) in rows(6, 12)) {
        let var_of = |row: &[f64]| {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            (m, row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64)
        };
        let input_vars: Vec<f64> = data.chunks(c).map(|row| var_of(row).1).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![r, c], data).unwrap());
        let gamma = g.input(Tensor::new(vec![c], vec![1.0; c]).unwrap());
        let beta = g.input(Tensor::zeros(&[c]));
        let y = g.layernorm(x, gamma, beta).unwrap();
        for (row, v_in) in g.value(y).chunks(c).zip(input_vars) {
            let (m, var) = var_of(row);
            prop_assert!(m.abs() < 1e-5);
            let want = v_in / (v_in + LAYERNORM_EPS);
            prop_assert!((var - want).abs() < 1e-4, "var {} want {}", var, want);
        }
    }

    #[test]
    fn transpose_twice_is_identity(data in prop::collection::vec(-5.0f64..5.0, 24)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let t = g.transpose(x, 0, 2).unwrap();
        prop_assert_eq!(g.shape(t), &[4, 3, 2]);
        let back = g.transpose(t, 0, 2).unwrap();
        prop_assert_eq!(g.value(back), &data[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_shapes_hold_across_configs(
        patch in prop::sample::select(vec![2usize, 4]),
        grid in prop::sample::select(vec![2usize, 4, 6]),
        heads in prop::sample::select(vec![1usize, 2, 4]),
        depth in 1usize..=3,
        window in prop::sample::select(vec![0usize, 2, 3]),
        mask_downscale in prop::sample::select(vec![1usize, 2]),
        preset in prop::sample::select(Preset::ALL.to_vec()),
        n_clicks in 1usize..4,
    ) {
        let size = patch * grid;
        prop_assume!(size % mask_downscale == 0);
        prop_assume!((size / mask_downscale) % grid == 0);
        let cfg = ModelConfig {
            image_size: size,
            patch_size: patch,
            embed_dim: 16,
            depth,
            num_heads: heads,
            window_size: window,
            global_attn_every: depth,
            decoder_dim: 16,
            mask_downscale,
            ..ModelConfig::compact()
        };
        prop_assume!(cfg.validate().is_ok());
        let mut model = SegModel::new(cfg, 3).unwrap();
        attach(&mut model, preset.spec(), 3).unwrap();
        let clicks: Vec<_> = (0..n_clicks).map(|i| ClickPrompt::positive(i % size, (i * 3) % size)).collect();
        let img = Tensor::zeros(&[size, size, 1]);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &img, &clicks).unwrap();
        prop_assert_eq!(g.shape(out.encoder.grid), &[grid, grid, 16]);
        prop_assert_eq!(out.encoder.block_outputs.len(), depth);
        let low = size / mask_downscale;
        prop_assert_eq!(g.shape(out.decoder.low_res_logits), &[low, low]);
        let p = model.predict(&img, &clicks).unwrap();
        prop_assert_eq!(p.prob_map.shape(), [size, size]);
        prop_assert!((0.0..=1.0).contains(&p.iou_estimate));
    }
}
