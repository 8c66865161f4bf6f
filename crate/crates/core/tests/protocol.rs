//! Episode protocol on generated rooms: fold splits, the fixed test
//! episode order, and episode well-formedness.

use protoseg_core::data::ClassTable;
use protoseg_core::derive_rng;
use protoseg_core::episode::{
    build_test_episodes, combinations, make_fold_split, sample_training_episode, EpisodeConfig,
};
use protoseg_core::synth::{generate_blocks, BlockingConfig, GeneratorConfig};

fn pool(scenes: usize, seed: u64) -> (ClassTable, Vec<protoseg_core::data::PointCloudBlock>) {
    let gen = GeneratorConfig { points_per_scene: 12_000, ..GeneratorConfig::indoor() };
    let blocking = BlockingConfig { num_points: 128, ..BlockingConfig::default() };
    let blocks = generate_blocks(&gen, &blocking, scenes, seed).unwrap();
    (gen.class_table(), blocks.into_iter().map(|b| b.block).collect())
}

#[test]
fn folds_halve_twelve_and_twenty_classes() {
    for (n, half) in [(12, 6), (20, 10)] {
        let table = ClassTable::new((1..=n).map(|i| format!("class{i}")));
        let a = make_fold_split(&table, 0).unwrap();
        let b = make_fold_split(&table, 1).unwrap();
        assert_eq!((a.seen.len(), a.unseen.len()), (half, half));
        assert_eq!(a.seen, b.unseen);
        assert_eq!(a.unseen, b.seen);
        let mut all: Vec<usize> = a.seen.iter().chain(&a.unseen).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (1..=n).collect::<Vec<_>>());
    }
}

#[test]
fn test_episodes_cycle_through_sorted_combinations() {
    let (table, blocks) = pool(6, 3);
    let split = make_fold_split(&table, 0).unwrap();
    for ways in [1, 2] {
        let cfg = EpisodeConfig { ways, shots: 1, queries: 1, min_class_points: 10 };
        let episodes = build_test_episodes(&blocks, &split, &cfg, 100, &mut derive_rng(4, 0)).unwrap();
        assert_eq!(episodes.len(), 100);
        let combos = combinations(&split.unseen, ways);
        assert!(combos.windows(2).all(|w| w[0] < w[1]));
        for (j, ep) in episodes.iter().enumerate() {
            assert_eq!(ep.class_map, combos[j % combos.len()]);
        }
    }
}

#[test]
fn episodes_are_well_formed() {
    let (table, blocks) = pool(6, 5);
    let split = make_fold_split(&table, 1).unwrap();
    let cfg = EpisodeConfig { ways: 2, shots: 2, queries: 1, min_class_points: 10 };
    let mut rng = derive_rng(9, 0);
    for _ in 0..30 {
        let ep = sample_training_episode(&blocks, &split, &cfg, &mut rng).unwrap();
        assert_eq!(ep.ways(), 2);
        assert_eq!(ep.shots(), 2);
        assert!(ep.class_map.iter().all(|c| split.seen.contains(c)));
        assert_ne!(ep.class_map[0], ep.class_map[1]);
        for (c, shots) in ep.support.iter().enumerate() {
            for s in shots {
                let want: Vec<bool> = s.block.labels.iter().map(|&l| l == ep.class_map[c]).collect();
                assert_eq!(s.mask, want);
                assert!(s.mask.iter().filter(|&&m| m).count() >= cfg.min_class_points);
            }
        }
        let mut sources = ep.sources();
        sources.sort_unstable();
        sources.dedup();
        assert_eq!(sources.len(), ep.sources().len(), "blocks reused within an episode");
        for q in &ep.queries {
            for (&l, &m) in q.block.labels.iter().zip(&q.mask) {
                assert_eq!(ep.global_class(m), if ep.class_map.contains(&l) { l } else { 0 });
            }
        }
    }
}
