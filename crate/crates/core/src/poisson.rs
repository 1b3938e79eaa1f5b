//! Unit-rate Poisson epoch streams.
//!
//! Each path is keyed by `(master seed, replication, process)` and draws its
//! exponential gaps from a ChaCha stream, so the epoch sequence depends only
//! on the key and never on the order in which solvers query it. Epochs are
//! generated lazily and kept, which lets the exact solver and every
//! fixed-step variant of one replication read the same path.

use std::io::{self, Write};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RteError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub replication: u64,
    pub process: u32,
}

#[derive(Clone, Debug)]
pub struct PoissonPath {
    id: StreamId,
    epochs: Vec<f64>,
    rng: ChaCha8Rng,
    /// Index hint from the previous query; solver queries are mostly monotone.
    cursor: usize,
}

fn stream_key(master_seed: u64, replication: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&replication.to_le_bytes());
    key[16..24].copy_from_slice(b"rte-pois");
    key
}

impl PoissonPath {
    pub fn new(master_seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::from_seed(stream_key(master_seed, id.replication));
        rng.set_stream(u64::from(id.process));
        PoissonPath {
            id,
            epochs: Vec::new(),
            rng,
            cursor: 0,
        }
    }

    /// A path whose first epochs are given explicitly; later epochs continue
    /// from the keyed stream after the last prefix epoch.
    pub fn with_prefix(prefix: Vec<f64>, master_seed: u64, id: StreamId) -> Result<Self> {
        let mut prev = 0.0;
        for &e in &prefix {
            if !(e.is_finite() && e > prev) {
                return Err(RteError::Query(format!(
                    "epoch prefix must be positive and strictly increasing, got {prefix:?}"
                )));
            }
            prev = e;
        }
        let mut path = PoissonPath::new(master_seed, id);
        path.epochs = prefix;
        Ok(path)
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Epochs generated so far.
    pub fn epochs(&self) -> &[f64] {
        &self.epochs
    }

    /// Uniform on the open interval (0, 1).
    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    fn push_epoch(&mut self) {
        let last = self.epochs.last().copied().unwrap_or(0.0);
        let gap = -self.uniform().ln();
        let mut next = last + gap;
        if next <= last {
            next = last.next_up();
        }
        self.epochs.push(next);
    }

    fn extend_past(&mut self, u: f64) {
        while self.epochs.last().is_none_or(|&e| e <= u) {
            self.push_epoch();
        }
    }

    fn check(u: f64) -> Result<()> {
        if u.is_finite() && u >= 0.0 {
            Ok(())
        } else {
            Err(RteError::Query(format!("query time must be finite and >= 0, got {u}")))
        }
    }

    /// Index of the first epoch strictly greater than `u`, which is the count
    /// of epochs `<= u`. Requires `extend_past(u)` first.
    fn locate(&mut self, u: f64) -> usize {
        let e = &self.epochs;
        let mut i = self.cursor.min(e.len());
        if i > 0 && e[i - 1] > u {
            i = e.partition_point(|&s| s <= u);
        } else {
            let mut steps = 0;
            while e[i] <= u {
                i += 1;
                steps += 1;
                if steps == 16 {
                    i += e[i..].partition_point(|&s| s <= u);
                    break;
                }
            }
        }
        self.cursor = i;
        i
    }

    /// `#{i : S_i <= u}`.
    pub fn count_at(&mut self, u: f64) -> Result<u64> {
        Self::check(u)?;
        self.extend_past(u);
        Ok(self.locate(u) as u64)
    }

    /// `count_at(b) - count_at(a)`.
    pub fn increment(&mut self, a: f64, b: f64) -> Result<u64> {
        Self::check(a)?;
        Self::check(b)?;
        if a > b {
            return Err(RteError::Query(format!("increment over reversed interval ({a}, {b})")));
        }
        if a == b {
            return Ok(0);
        }
        let lo = self.count_at(a)?;
        let hi = self.count_at(b)?;
        Ok(hi - lo)
    }

    /// Smallest epoch strictly greater than `u`.
    ///
    /// # Panics
    /// If `u` is negative or not finite.
    pub fn next_epoch_after(&mut self, u: f64) -> f64 {
        assert!(u.is_finite() && u >= 0.0, "next_epoch_after({u})");
        self.extend_past(u);
        let i = self.locate(u);
        self.epochs[i]
    }
}

/// One Poisson path per driving process, all for the same replication.
#[derive(Clone, Debug)]
pub struct PathBundle {
    master_seed: u64,
    replication: u64,
    paths: Vec<PoissonPath>,
}

impl PathBundle {
    pub fn new(master_seed: u64, replication: u64, processes: usize) -> Self {
        let paths = (0..processes)
            .map(|k| {
                PoissonPath::new(
                    master_seed,
                    StreamId {
                        replication,
                        process: k as u32,
                    },
                )
            })
            .collect();
        PathBundle {
            master_seed,
            replication,
            paths,
        }
    }

    pub fn from_paths(master_seed: u64, replication: u64, paths: Vec<PoissonPath>) -> Self {
        PathBundle {
            master_seed,
            replication,
            paths,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn replication(&self) -> u64 {
        self.replication
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn path(&mut self, k: usize) -> &mut PoissonPath {
        &mut self.paths[k]
    }

    pub fn paths(&self) -> &[PoissonPath] {
        &self.paths
    }

    /// Writes every generated epoch as `stream_id,index,epoch` rows, where
    /// the stream id reads `<replication>:<process>`.
    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "stream_id,index,epoch")?;
        for path in &self.paths {
            let id = path.id();
            for (i, e) in path.epochs().iter().enumerate() {
                writeln!(w, "{}:{},{},{}", id.replication, id.process, i, e)?;
            }
        }
        Ok(())
    }
}
