//! Stats JSON: `{channel: {mean, std, count}}`. Keys are written sorted
//! and read back sorted, so the file is canonical; lookups everywhere else
//! are by name, never by position.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::stats::ChannelStats;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    mean: f64,
    std: f64,
    count: u64,
}

pub fn write_stats_json(stats: &ChannelStats) -> String {
    let map: BTreeMap<&str, Entry> = stats
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            (
                name.as_str(),
                Entry {
                    mean: stats.mean[i],
                    std: stats.std[i],
                    count: stats.count,
                },
            )
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&map).expect("stats serialize");
    s.push('\n');
    s
}

pub fn read_stats_json(text: &str) -> Result<ChannelStats, IoError> {
    let map: BTreeMap<String, Entry> = serde_json::from_str(text)?;
    if map.is_empty() {
        return Err(IoError::Format("stats: no channels".into()));
    }
    let counts: Vec<u64> = map.values().map(|e| e.count).collect();
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(IoError::Format(
            "stats: channels disagree on the sample count".into(),
        ));
    }
    let mut names = Vec::with_capacity(map.len());
    let mut mean = Vec::with_capacity(map.len());
    let mut std = Vec::with_capacity(map.len());
    for (name, e) in &map {
        if !(e.std > 0.0) {
            return Err(IoError::Format(format!(
                "stats: channel {name:?} has non-positive std {}",
                e.std
            )));
        }
        names.push(name.clone());
        mean.push(e.mean);
        std.push(e.std);
    }
    Ok(ChannelStats {
        names,
        mean,
        std,
        count: counts[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_stats(seed: u64) -> ChannelStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(1..8);
        // Sorted names give the canonical on-disk order directly.
        let names: Vec<String> = (0..c).map(|i| format!("ch{i:02}")).collect();
        ChannelStats {
            names,
            mean: (0..c).map(|_| rng.gen::<f64>() * 200.0 - 100.0).collect(),
            std: (0..c).map(|_| rng.gen::<f64>() * 9.0 + 1e-3).collect(),
            count: rng.gen_range(1..1_000_000),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_for_canonical_order() {
        for seed in 0..50 {
            let stats = random_stats(seed);
            let back = read_stats_json(&write_stats_json(&stats)).unwrap();
            assert_eq!(stats.names, back.names, "seed {seed}");
            assert_eq!(stats.mean, back.mean);
            assert_eq!(stats.std, back.std);
            assert_eq!(stats.count, back.count);
        }
    }

    #[test]
    fn unsorted_names_land_in_canonical_order_with_values_attached() {
        let stats = ChannelStats {
            names: vec!["v10".into(), "t2m".into()],
            mean: vec![1.5, 280.0],
            std: vec![2.0, 10.0],
            count: 42,
        };
        let back = read_stats_json(&write_stats_json(&stats)).unwrap();
        assert_eq!(back.names, vec!["t2m".to_string(), "v10".to_string()]);
        assert_eq!(back.lookup("t2m").unwrap(), (280.0, 10.0));
        assert_eq!(back.lookup("v10").unwrap(), (1.5, 2.0));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(read_stats_json("{}").is_err());
        let text = r#"{"a": {"mean": 0.0, "std": 1.0, "count": 3},
                       "b": {"mean": 0.0, "std": 1.0, "count": 4}}"#;
        assert!(read_stats_json(text)
            .unwrap_err()
            .to_string()
            .contains("sample count"));
        let text = r#"{"a": {"mean": 0.0, "std": 0.0, "count": 3}}"#;
        assert!(read_stats_json(text)
            .unwrap_err()
            .to_string()
            .contains("non-positive std"));
    }
}
