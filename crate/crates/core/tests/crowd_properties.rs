use proptest::prelude::*;
use wingbeat_core::crowdsource::*;

fn votes() -> impl Strategy<Value = Vec<VolunteerVote>> {
    prop::collection::vec((0u8..5, 0u8..6, any::<bool>(), 0i64..5), 0..80).prop_map(|v| {
        v.into_iter()
            .map(|(c, who, yes, at)| VolunteerVote {
                clip_id: format!("rec_{}", c as u32 * 100),
                volunteer_id: format!("v{who}"),
                says_mosquito: yes,
                cast_at_ms: at,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aggregation_is_order_invariant(v in votes(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let cfg = AggregationConfig::default();
        let mut shuffled = v.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(aggregate_votes(&v, &cfg).unwrap(), aggregate_votes(&shuffled, &cfg).unwrap());
    }

    #[test]
    fn labels_follow_the_rule(v in votes(), min_votes in 1usize..5) {
        let cfg = AggregationConfig { min_votes, yes_threshold: 0.5 };
        let labels = aggregate_votes(&v, &cfg).unwrap();
        prop_assert!(labels.windows(2).all(|w| w[0].clip_id < w[1].clip_id));
        for l in labels {
            prop_assert!((0.0..=1.0).contains(&l.confidence));
            let expected = if l.n_votes < min_votes || l.confidence == 0.5 {
                CrowdLabel::Undecided
            } else if l.confidence > 0.5 {
                CrowdLabel::Mosquito
            } else {
                CrowdLabel::Background
            };
            prop_assert_eq!(l.label, expected);
        }
    }

    #[test]
    fn one_vote_per_volunteer_and_clip(v in votes()) {
        let d = dedupe_votes(&v);
        let mut keys: Vec<_> = d.iter().map(|x| (x.clip_id.clone(), x.volunteer_id.clone())).collect();
        let n = keys.len();
        keys.dedup();
        prop_assert_eq!(keys.len(), n);
        for kept in &d {
            prop_assert!(v.iter()
                .filter(|x| x.clip_id == kept.clip_id && x.volunteer_id == kept.volunteer_id)
                .all(|x| x.cast_at_ms <= kept.cast_at_ms));
        }
    }
}
