use freqkv_core::cache::{expected_compressions, CachePolicyConfig, FreqKvCache, KvCache};
use freqkv_core::KvTensor;
use proptest::prelude::*;

fn token_rows(start: usize, count: usize, heads: usize, dim: usize) -> KvTensor {
    KvTensor::from_fn(count, heads, dim, |r, h, c| {
        let t = (start + r) as f32;
        (t * 0.013 + h as f32 * 0.7 + c as f32 * 0.31).sin()
    })
}

fn feed_one_by_one(cache: &mut FreqKvCache, tokens: usize) -> Vec<usize> {
    let mut triggers = Vec::new();
    for t in 0..tokens {
        let rows = token_rows(t, 1, cache.kv_heads(), cache.head_dim());
        for e in cache.append(&rows, &rows).unwrap() {
            triggers.push(e.tokens_seen);
        }
    }
    triggers
}

fn tiny(window: usize, gamma: f64, sinks: usize) -> FreqKvCache {
    FreqKvCache::new(CachePolicyConfig::new(window, gamma, sinks).unwrap(), 1, 2).unwrap()
}

#[test]
fn count_law_holds_across_twenty_windows() {
    for (n, gamma, s) in [(16, 0.5, 2), (32, 0.25, 4), (20, 0.75, 0), (64, 0.5, 4)] {
        let mut cache = tiny(n, gamma, s);
        for t in 1..=20 * n {
            let rows = token_rows(t, 1, 1, 2);
            cache.append(&rows, &rows).unwrap();
            assert_eq!(
                cache.compression_count(),
                expected_compressions(t, cache.config()),
                "N={n} gamma={gamma} S={s} T={t}"
            );
            assert!(cache.rows() <= n);
        }
    }
}

#[test]
fn default_scale_trigger_points() {
    let mut cache = FreqKvCache::new(CachePolicyConfig::llama2(), 1, 2).unwrap();
    let triggers = feed_one_by_one(&mut cache, 8192);
    assert_eq!(triggers, vec![4096, 6142, 8188]);
    assert_eq!(cache.compression_count(), 3);
}

#[test]
fn default_scale_counts_at_long_lengths() {
    let cfg = CachePolicyConfig::llama2();
    let expected = [(4096, 0), (8192, 3), (12288, 5), (16384, 7), (32768, 15), (65536, 31), (131072, 63), (262144, 127)];
    for (t, count) in expected {
        assert_eq!(expected_compressions(t, &cfg), count, "T={t}");
    }
    // Simulate the longest one: the closed form and the scheduler must agree.
    let mut cache = FreqKvCache::new(cfg, 1, 2).unwrap();
    let chunk = 4000;
    let mut seen = 0;
    while seen < 262_144 {
        let take = chunk.min(262_144 - seen);
        let rows = token_rows(seen, take, 1, 2);
        cache.append(&rows, &rows).unwrap();
        seen += take;
        assert!(cache.rows() <= 4096);
    }
    assert_eq!(cache.compression_count(), 127);
}

#[test]
fn memory_stays_within_window() {
    let mut cache = tiny(32, 0.5, 4);
    let mut max_rows = 0;
    for t in 0..64 * 32 {
        let rows = token_rows(t, 1, 1, 2);
        cache.append(&rows, &rows).unwrap();
        max_rows = max_rows.max(cache.rows());
        let view = cache.view();
        assert_eq!(view.rows(), cache.rows());
    }
    assert_eq!(max_rows, 32);
}

#[test]
fn sinks_never_change() {
    let mut cache = tiny(16, 0.5, 3);
    let first = token_rows(0, 3, 1, 2);
    feed_one_by_one(&mut cache, 200);
    let (sk, sv) = cache.sinks();
    assert_eq!(sk.as_slice(), first.as_slice());
    assert_eq!(sv.as_slice(), first.as_slice());
}

#[test]
fn first_compression_layout_and_positions() {
    let cfg = CachePolicyConfig::new(16, 0.5, 2).unwrap();
    let (s, l) = (cfg.sinks, cfg.retain());
    let mut cache = FreqKvCache::new(cfg, 1, 2).unwrap();
    feed_one_by_one(&mut cache, 16);
    assert_eq!(cache.compression_count(), 0);
    feed_one_by_one_from(&mut cache, 16, 1);
    assert_eq!(cache.compression_count(), 1);
    let view = cache.view();
    assert_eq!(view.region_lengths(), vec![s, l, 1]);
    // The token just admitted sits at position S + L.
    assert_eq!(view.positions().end - 1, s + l);
    assert_eq!(view.max_position(0), Some(s + l));
    assert_eq!(view.next_position, s + l + 1);
}

fn feed_one_by_one_from(cache: &mut FreqKvCache, start: usize, count: usize) {
    for t in start..start + count {
        let rows = token_rows(t, 1, 1, 2);
        cache.append(&rows, &rows).unwrap();
    }
}

#[test]
fn older_tokens_are_compressed_more_often() {
    let mut cache = tiny(16, 0.5, 2);
    feed_one_by_one(&mut cache, 100);
    let range = cache.source_token_range().unwrap();
    assert_eq!(range.start, 2);
    let applied: Vec<usize> = range.clone().map(|t| cache.compressions_applied(t)).collect();
    assert!(applied.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(applied[0], cache.compression_count());
    assert_eq!(*applied.last().unwrap(), 1);
    // Sinks and the live incoming rows are never transformed.
    assert_eq!(cache.compressions_applied(0), 0);
    assert_eq!(cache.compressions_applied(99), 0);
}

#[test]
fn identity_ratio_grows_without_compressing_content() {
    let mut cache = tiny(8, 1.0, 2);
    let all = token_rows(0, 30, 1, 2);
    feed_one_by_one(&mut cache, 30);
    assert_eq!(cache.rows(), 30);
    assert_eq!(cache.compression_count(), 22);
    assert_eq!(cache.rope_limit(), None);
    let view = cache.view();
    let stored: Vec<f32> = view.key_rows().flatten().copied().collect();
    for (a, b) in stored.iter().zip(all.as_slice()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn dump_restore_continues_identically() {
    let mut a = tiny(16, 0.5, 2);
    feed_one_by_one(&mut a, 40);
    let mut buf = Vec::new();
    a.dump(&mut buf).unwrap();
    let mut b = FreqKvCache::restore(buf.as_slice()).unwrap();
    assert_eq!(a, b);
    feed_one_by_one_from(&mut a, 40, 25);
    feed_one_by_one_from(&mut b, 40, 25);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunking_does_not_change_state(
        n in 8usize..40,
        gamma in 0.1f64..0.9,
        sink_frac in 0.0f64..0.4,
        total in 1usize..200,
        cuts in prop::collection::vec(1usize..30, 1..20),
    ) {
        let s = (sink_frac * n as f64) as usize;
        let cfg = match CachePolicyConfig::new(n, gamma, s) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        let mut single = FreqKvCache::new(cfg, 1, 2).unwrap();
        let mut chunked = FreqKvCache::new(cfg, 1, 2).unwrap();
        let mut single_events = Vec::new();
        for t in 0..total {
            let r = token_rows(t, 1, 1, 2);
            single_events.extend(single.append(&r, &r).unwrap());
        }
        let mut chunked_events = Vec::new();
        let mut done = 0;
        let mut i = 0;
        while done < total {
            let take = cuts[i % cuts.len()].min(total - done);
            let r = token_rows(done, take, 1, 2);
            chunked_events.extend(chunked.append(&r, &r).unwrap());
            done += take;
            i += 1;
        }
        prop_assert_eq!(single_events, chunked_events);
        prop_assert_eq!(single, chunked);
    }

    #[test]
    fn closed_form_matches_simulation(
        n in 4usize..30,
        gamma in 0.05f64..1.0,
        s in 0usize..4,
        total in 0usize..300,
    ) {
        let cfg = match CachePolicyConfig::new(n, gamma, s) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        let mut cache = FreqKvCache::new(cfg, 1, 2).unwrap();
        if total > 0 {
            let r = token_rows(0, total, 1, 2);
            cache.append(&r, &r).unwrap();
        }
        prop_assert_eq!(cache.compression_count(), expected_compressions(total, &cfg));
        prop_assert!(cache.rows() <= n);
        prop_assert_eq!(cache.tokens_seen(), total);
    }
}
