//! Randomised checks of the shard partitioner.

use proptest::prelude::*;

use fedmrl::data::{client_stats, partition, synth_gaussian_mixture, PartitionPlan};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_covers_every_sample_once(
        eta in 0.0f64..=1.0,
        clients in 2usize..12,
        classes in 2usize..5,
        per_class in 20usize..120,
        shards in 1usize..50,
        seed in any::<u64>(),
    ) {
        let data = synth_gaussian_mixture(classes, per_class, 2, 2.0, seed).unwrap();
        let mut plan = PartitionPlan::new(eta, clients, seed);
        plan.shards_per_class = shards;
        if classes * shards.min(per_class) < clients {
            // Fewer shards than clients: someone would be left empty.
            let rejected = matches!(partition(&data, &plan), Err(fedmrl::Error::Input(_)));
            prop_assert!(rejected);
            return Ok(());
        }
        let parts = partition(&data, &plan).unwrap();
        prop_assert_eq!(parts.len(), clients);

        let key = |d: &fedmrl::data::LabeledDataset, i: usize| {
            (d.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), d.labels()[i])
        };
        let mut all: Vec<_> = (0..data.len()).map(|i| key(&data, i)).collect();
        let mut union: Vec<_> = parts.iter().flat_map(|p| (0..p.len()).map(move |i| key(p, i))).collect();
        all.sort();
        union.sort();
        prop_assert_eq!(union, all);

        let stats = client_stats(&parts).unwrap();
        let total: f64 = stats.iter().map(|s| s.proportion).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(stats.iter().all(|s| s.entropy >= 0.0 && s.entropy <= (classes as f64).ln() + 1e-12));
    }

    #[test]
    fn same_seed_same_partition(eta in 0.0f64..=1.0, seed in any::<u64>()) {
        let data = synth_gaussian_mixture(3, 50, 2, 2.0, 1).unwrap();
        let plan = PartitionPlan::new(eta, 4, seed);
        prop_assert_eq!(partition(&data, &plan).unwrap(), partition(&data, &plan).unwrap());
    }
}
