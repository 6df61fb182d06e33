use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// Supplies photon counts to READCNT, one per read.
#[derive(Debug, Clone)]
pub struct DetectionScript {
    source: Source,
}

#[derive(Debug, Clone)]
enum Source {
    Scripted { counts: Vec<i32>, cycle: bool },
    Poisson { rng: ChaCha8Rng, dist: Poisson<f64> },
}

impl DetectionScript {
    /// Counts in order; running past the end is an error.
    pub fn scripted(counts: Vec<i32>) -> Self {
        DetectionScript {
            source: Source::Scripted { counts, cycle: false },
        }
    }

    /// Counts in order, starting over at the end.
    pub fn cycled(counts: Vec<i32>) -> Self {
        DetectionScript {
            source: Source::Scripted { counts, cycle: true },
        }
    }

    /// Poisson-distributed counts from a seeded generator.
    pub fn poisson(seed: u64, mean: f64) -> Result<Self, String> {
        let dist = Poisson::new(mean).map_err(|e| format!("poisson mean {mean}: {e}"))?;
        Ok(DetectionScript {
            source: Source::Poisson {
                rng: ChaCha8Rng::seed_from_u64(seed),
                dist,
            },
        })
    }

    /// Count for the `n`th read, or `None` when the script has run out.
    pub fn next(&mut self, n: u64) -> Option<i32> {
        match &mut self.source {
            Source::Scripted { counts, cycle } => {
                if counts.is_empty() {
                    return None;
                }
                let n = n as usize;
                if *cycle {
                    Some(counts[n % counts.len()])
                } else {
                    counts.get(n).copied()
                }
            }
            Source::Poisson { rng, dist } => Some(dist.sample(rng).min(i32::MAX as f64) as i32),
        }
    }
}
