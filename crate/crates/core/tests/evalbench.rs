use ovv_core::dataset::{generate_dataset, DataConfig, Dataset};
use ovv_core::evalbench::{
    average_logits, compare_methods, count_flops, evaluate, evaluate_offsets, sweep, sweep_csv, train_sweep, view_logits, Method, SweepConfig,
};
use ovv_core::model::{Aggregation, Model, ModelConfig};
use ovv_core::sampler::SamplerConfig;
use ovv_core::synth::SynthConfig;
use ovv_core::tokenizer::TubeDims;
use ovv_core::trainer::{accuracy, TrainConfig};
use ovv_core::Error;
use proptest::prelude::*;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        frames: 4,
        height: 16,
        width: 16,
        tube: TubeDims::new(2, 4, 4),
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_hidden: 16,
        num_classes: 3,
        oam_layers: Some(vec![]),
        aggregation: Aggregation::HeatmapWeighted,
        use_identity_embedding: true,
        max_tracks: 4,
    }
}

/// Eight-frame sources for a four-frame model: stride 2.
fn tiny_data() -> Dataset {
    let synth = SynthConfig {
        t_frames: 8,
        height: 16,
        width: 16,
        num_classes: 3,
        sprite_size: 4,
        ..SynthConfig::default()
    };
    let data = DataConfig {
        train_videos: 12,
        val_videos: 10,
        seed: 5,
        ..DataConfig::default()
    };
    generate_dataset(&synth, &data).unwrap()
}

fn trained_model() -> Model<f32> {
    let mut m = Model::new(tiny_cfg(), 3).unwrap();
    m.params.perturb(3, 0.5);
    m
}

#[test]
fn block_example_and_zero_tokens() {
    let cfg = ModelConfig {
        dim: 64,
        mlp_hidden: 256,
        depth: 1,
        heads: 4,
        oam_layers: Some(vec![]),
        ..ModelConfig::default()
    };
    let r = count_flops(&cfg, 100, 0);
    assert_eq!(r.blocks[0].attention(), 5_836_800);
    assert_eq!(r.blocks[0].mlp, 6_553_600);
    assert_eq!(r.total, 12_390_400);
    let z = count_flops(&cfg, 0, 0);
    assert_eq!((z.attention, z.mlp, z.pooling, z.total), (0, 0, 0, 0));
}

#[test]
fn halving_tokens_quarters_the_quadratic_terms() {
    let cfg = ModelConfig::default();
    let full = count_flops(&cfg, 64, 0);
    let half = count_flops(&cfg, 32, 0);
    for (f, h) in full.blocks.iter().zip(&half.blocks) {
        assert_eq!(4 * h.scores, f.scores);
        assert_eq!(4 * h.weighted_sum, f.weighted_sum);
    }
}

proptest! {
    #[test]
    fn flops_grow_with_tokens_and_parts_add_up(n in 0usize..2000, m in 0usize..24, oam in any::<bool>()) {
        let cfg = ModelConfig { oam_layers: if oam { None } else { Some(vec![]) }, ..ModelConfig::default() };
        let a = count_flops(&cfg, n, m);
        let b = count_flops(&cfg, n + 1, m);
        prop_assert!(b.total > a.total);
        prop_assert_eq!(a.total, a.attention + a.mlp + a.pooling);
        prop_assert_eq!(a.total, a.blocks.iter().map(|x| x.total()).sum::<u64>());
    }
}

#[test]
fn one_view_equals_plain_forward_accuracy() {
    let ds = tiny_data();
    let model = trained_model();
    let s = SamplerConfig::object_guided(50.0, 1);
    let examples: Vec<_> = ds.val.iter().map(|x| x.prepare_at::<f32>(&model.cfg, 0.0).unwrap()).collect();
    let plain = accuracy(&model, &examples, &s).unwrap();
    assert_eq!(evaluate(&model, &ds.val, &s, 1).unwrap().accuracy, plain);
}

#[test]
fn view_logits_are_averaged_elementwise() {
    let ds = tiny_data();
    let model = trained_model();
    let s = SamplerConfig::default();
    let res = evaluate(&model, &ds.val, &s, 2).unwrap();
    for (sample, avg) in ds.val.iter().zip(&res.logits) {
        let per = view_logits(&model, sample, &s, &[0.0, 1.0]).unwrap();
        assert_ne!(per[0], per[1]);
        for c in 0..avg.len() {
            assert_eq!(avg[c], (per[0][c] + per[1][c]) / 2.0);
        }
    }
}

#[test]
fn identical_views_match_a_single_view() {
    let ds = tiny_data();
    let model = trained_model();
    let s = SamplerConfig::uniform(50.0, 4);
    let one = evaluate(&model, &ds.val, &s, 1).unwrap();
    let two = evaluate_offsets(&model, &ds.val, &s, &[0.0, 0.0]).unwrap();
    assert_eq!(one.accuracy, two.accuracy);
    assert_eq!(one.predictions, two.predictions);
    let l = vec![0.3, -1.0, 2.0];
    assert_eq!(average_logits(&[l.clone(), l.clone()]), l);
}

fn sweep_cfg(dir: &std::path::Path) -> SweepConfig {
    SweepConfig {
        ratios: vec![0.2, 0.4, 0.5, 0.6, 0.8],
        oam_ratios: vec![1.0],
        views: vec![1],
        methods: vec![Method::Ogs],
        seeds: vec![0],
        checkpoint_dir: dir.to_path_buf(),
        train_missing: true,
        single_model: false,
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn sweep_rows_match_ratios_and_flop_counts() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_cfg(dir.path());
    train_sweep(&tiny_cfg(), &quick_train(), &cfg, &ds, |_, _, _, _| {}).unwrap();
    let rows = sweep(&cfg, &ds).unwrap();
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv.lines().next().unwrap(), "method,keep_ratio,X,Y,views,tokens,accuracy,flops");
    let n = 2 * 4 * 4;
    for r in &rows {
        assert_eq!(r.keep_ratio, r.tokens as f64 / n as f64);
        assert_eq!(r.flops, count_flops(&tiny_cfg(), r.tokens, 0).total);
    }
    // keep ratio reports what the sampler kept: round(X% of 32) + round(Y% of 32)
    assert_eq!(rows[0].tokens, 3 + 3);
    assert_eq!(sweep_csv(&sweep(&cfg, &ds).unwrap()), csv);
}

#[test]
fn missing_checkpoint_names_the_ratio() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let err = sweep(&sweep_cfg(dir.path()), &ds).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint { ratio, .. } if ratio == 0.2));
    assert!(err.to_string().contains("0.2"), "{err}");
}

#[test]
fn four_way_comparison_matches_budgets() {
    let ds = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        ratios: vec![0.5, 1.0],
        methods: Method::ALL.to_vec(),
        ..sweep_cfg(dir.path())
    };
    let base = ModelConfig {
        oam_layers: None,
        ..tiny_cfg()
    };
    train_sweep(&base, &quick_train(), &cfg, &ds, |_, _, _, _| {}).unwrap();
    let rows = sweep(&cfg, &ds).unwrap();
    let baseline: Vec<_> = rows.iter().filter(|r| r.method == Method::BaselineFull).collect();
    assert_eq!(baseline.len(), 1);
    assert_eq!(baseline[0].keep_ratio, 1.0);
    let tok = |m: Method| rows.iter().find(|r| r.method == m).unwrap().tokens;
    assert_eq!(tok(Method::Ogs), tok(Method::UniformDrop));
    let oam = rows.iter().find(|r| r.method == Method::OgsOam).unwrap();
    assert!(oam.flops > baseline[0].flops);
    let table = compare_methods(&rows);
    assert!(table.starts_with("keep_ratio\tbaseline-full\tuniform-drop\togs\togs+oam\n"));
    assert_eq!(table.lines().count(), 3);
}
