//! Token-bucket rate limiter driven by the tokio clock, so tests can pause
//! and step virtual time.

use std::time::Duration;
use tokio::sync::Mutex;
use tokio::time::Instant;

/// Sustained-rate limiter with bounded burst. The bucket starts full
/// (allowing an initial burst of `burst` requests) and refills at
/// `requests_per_minute / 60` tokens per second, capped at `burst`.
/// Over any 60-second window the admitted request count is therefore at
/// most requests-per-minute + burst.
pub struct TokenBucket {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<BucketState>,
}

struct BucketState {
    tokens: f64,
    last_refill: Instant,
}

impl TokenBucket {
    pub fn new(requests_per_minute: u32, burst: usize) -> TokenBucket {
        let capacity = burst.max(1) as f64;
        TokenBucket {
            capacity,
            refill_per_sec: f64::from(requests_per_minute) / 60.0,
            state: Mutex::new(BucketState {
                tokens: capacity,
                last_refill: Instant::now(),
            }),
        }
    }

    /// Waits until a token is available and consumes it.
    pub async fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().await;
                let now = Instant::now();
                let elapsed = now.duration_since(state.last_refill).as_secs_f64();
                state.tokens = (state.tokens + elapsed * self.refill_per_sec).min(self.capacity);
                state.last_refill = now;
                if state.tokens >= 1.0 {
                    state.tokens -= 1.0;
                    return;
                }
                // Sleep until the deficit refills; re-check afterwards since
                // another waiter may have claimed the token first.
                Duration::from_secs_f64((1.0 - state.tokens) / self.refill_per_sec)
            };
            tokio::time::sleep(wait).await;
        }
    }
}
