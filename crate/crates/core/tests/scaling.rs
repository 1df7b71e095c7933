//! Kept in its own binary so no other test competes for the CPU.

use std::time::{Duration, Instant};

use prl::data::{generate_prompts, Behavior, RewardConfig, Session};

fn behavior(purchase: bool) -> Behavior {
    if purchase {
        Behavior::Purchase
    } else {
        Behavior::Click
    }
}

fn long_sessions(count: usize, len: usize) -> Vec<Session> {
    (0..count)
        .map(|i| {
            let items = (0..len).map(|j| 1 + ((i * 31 + j * 7) % 500) as u32).collect();
            let behaviors = (0..len).map(|j| behavior(j % 5 == 0)).collect();
            Session::new(i.to_string(), items, behaviors).unwrap()
        })
        .collect()
}

fn fastest(sessions: &[Session], config: &RewardConfig) -> Duration {
    (0..25)
        .map(|_| {
            let start = Instant::now();
            let prompts = generate_prompts(sessions, config).unwrap();
            let elapsed = start.elapsed();
            assert!(!prompts.is_empty());
            elapsed
        })
        .min()
        .unwrap()
}

#[test]
fn prompt_generation_time_is_linear_in_session_length() {
    let config = RewardConfig::default();
    let short = fastest(&long_sessions(20, 1000), &config);
    let long = fastest(&long_sessions(20, 2000), &config);
    let ratio = long.as_secs_f64() / short.as_secs_f64();
    assert!(ratio < 3.0, "doubling session length scaled time by {ratio:.2}");
}
