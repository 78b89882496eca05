//! Bounded replay memory filled by reservoir sampling, optionally gated by a
//! Gaussian over the epoch index (intermediary reservoir sampling).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ReplayBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub input: Vec<f64>,
    pub label: usize,
    pub zeta1: Vec<f64>,
    pub zeta2: Vec<f64>,
    /// 1-based task the sample came from.
    pub task_id: usize,
    /// 0-based epoch of the task at which it was stored.
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferStrategy {
    #[default]
    Reservoir,
    Irs,
}

impl std::str::FromStr for BufferStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reservoir" => Ok(Self::Reservoir),
            "irs" => Ok(Self::Irs),
            other => Err(Error::Config(format!(
                "unknown buffer strategy {other:?}, expected reservoir or irs"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrsConfig {
    pub sigma: f64,
    pub epochs_per_task: usize,
}

impl IrsConfig {
    /// `sigma = E/6`, so ±3σ spans the task.
    pub fn new(epochs_per_task: usize) -> Self {
        Self {
            sigma: epochs_per_task as f64 / 6.0,
            epochs_per_task,
        }
    }

    pub fn with_sigma(epochs_per_task: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("irs sigma must be positive, got {sigma}")));
        }
        if epochs_per_task == 0 {
            return Err(Error::Config("epochs_per_task must be >= 1".into()));
        }
        Ok(Self {
            sigma,
            epochs_per_task,
        })
    }
}

/// `(1/(σ√2π))·exp(−(ep − E/2)²/(2σ²))`, clamped to `[0, 1]`.
pub fn gate_probability(epoch: usize, cfg: &IrsConfig) -> f64 {
    let mean = cfg.epochs_per_task as f64 / 2.0;
    let s = cfg.sigma;
    let dev = epoch as f64 - mean;
    let p = (-(dev * dev) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    num_classes: usize,
    entries: Vec<BufferEntry>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize, num_classes: usize) -> Self {
        Self {
            capacity,
            dim,
            num_classes,
            entries: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of samples that reached the reservoir step.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Row-major inputs of every stored entry.
    pub fn inputs(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.input.iter().copied()).collect()
    }

    fn check(&self, e: &BufferEntry) -> Result<()> {
        if e.input.len() != self.dim {
            return Err(Error::Dimension {
                op: "buffer input",
                left: vec![self.dim],
                right: vec![e.input.len()],
            });
        }
        if e.zeta1.len() != self.num_classes || e.zeta2.len() != self.num_classes {
            return Err(Error::Dimension {
                op: "buffer logits",
                left: vec![self.num_classes],
                right: vec![e.zeta1.len(), e.zeta2.len()],
            });
        }
        if e.label >= self.num_classes {
            return Err(Error::Label {
                row: 0,
                label: e.label,
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Classic reservoir step. Appends while below capacity; afterwards
    /// replaces slot `j ~ U[0, N]` when `j < capacity`.
    pub fn reservoir_insert(&mut self, e: BufferEntry, rng: &mut impl Rng) -> Result<bool> {
        self.check(&e)?;
        let n = self.seen;
        self.seen += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(e);
            return Ok(true);
        }
        if self.capacity == 0 {
            return Ok(false);
        }
        let j = rng.random_range(0..=n);
        if j < self.capacity as u64 {
            self.entries[j as usize] = e;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Gated reservoir step. Offers rejected by the gate leave the buffer
    /// and the seen count untouched. A gate of exactly 1 (or 0) consumes no
    /// randomness.
    pub fn irs_insert(
        &mut self,
        e: BufferEntry,
        epoch: usize,
        cfg: &IrsConfig,
        rng: &mut impl Rng,
    ) -> Result<bool> {
        self.check(&e)?;
        let p = gate_probability(epoch, cfg);
        let pass = if p >= 1.0 {
            true
        } else if p <= 0.0 {
            false
        } else {
            rng.random::<f64>() < p
        };
        if pass {
            self.reservoir_insert(e, rng)
        } else {
            Ok(false)
        }
    }

    /// Offers `e` under `strategy`; `irs` is required for [`BufferStrategy::Irs`].
    pub fn offer(
        &mut self,
        e: BufferEntry,
        strategy: BufferStrategy,
        irs: Option<&IrsConfig>,
        rng: &mut impl Rng,
    ) -> Result<bool> {
        match (strategy, irs) {
            (BufferStrategy::Reservoir, _) => self.reservoir_insert(e, rng),
            (BufferStrategy::Irs, Some(cfg)) => {
                let epoch = e.epoch;
                self.irs_insert(e, epoch, cfg, rng)
            }
            (BufferStrategy::Irs, None) => {
                Err(Error::Config("irs strategy needs an IrsConfig".into()))
            }
        }
    }

    /// Up to `k` distinct entries, uniformly without replacement, in random
    /// order.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<&BufferEntry>> {
        if self.entries.is_empty() {
            return Err(Error::ReplayUnavailable);
        }
        let k = k.min(self.entries.len());
        Ok(rand::seq::index::sample(rng, self.entries.len(), k)
            .into_iter()
            .map(|i| &self.entries[i])
            .collect())
    }

    /// [`Self::sample`] packed into a loss-ready batch.
    pub fn sample_batch(&self, k: usize, rng: &mut impl Rng) -> Result<ReplayBatch> {
        let picked = self.sample(k, rng)?;
        Ok(self.pack(&picked))
    }

    fn pack(&self, entries: &[&BufferEntry]) -> ReplayBatch {
        let mut batch = ReplayBatch {
            dim: self.dim,
            num_classes: self.num_classes,
            inputs: Vec::with_capacity(entries.len() * self.dim),
            labels: Vec::with_capacity(entries.len()),
            zeta1: Vec::with_capacity(entries.len() * self.num_classes),
            zeta2: Vec::with_capacity(entries.len() * self.num_classes),
        };
        for e in entries {
            batch.inputs.extend_from_slice(&e.input);
            batch.labels.push(e.label);
            batch.zeta1.extend_from_slice(&e.zeta1);
            batch.zeta2.extend_from_slice(&e.zeta2);
        }
        batch
    }

    /// Count of stored entries per epoch of origin, indexed by epoch.
    pub fn epoch_histogram(&self) -> Vec<usize> {
        let len = self.entries.iter().map(|e| e.epoch + 1).max().unwrap_or(0);
        let mut h = vec![0; len];
        for e in &self.entries {
            h[e.epoch] += 1;
        }
        h
    }

    /// Count of stored entries per task, indexed by `task_id − 1`.
    pub fn task_histogram(&self) -> Vec<usize> {
        let len = self.entries.iter().map(|e| e.task_id).max().unwrap_or(0);
        let mut h = vec![0; len];
        for e in &self.entries {
            h[e.task_id - 1] += 1;
        }
        h
    }

    pub fn snapshot(&self) -> Vec<u8> {
        snapshot::encode(self)
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        snapshot::decode(bytes)
    }
}

mod snapshot {
    //! Layout (little-endian): `b"DBRB"`, `u32` version, `u64` capacity,
    //! `u64` seen, `u32` dim D, `u32` classes C, `u64` entry count, then per
    //! entry: D × `f64` input, `u32` label, C × `f64` ζ1, C × `f64` ζ2,
    //! `u32` task id, `u32` epoch.

    use super::*;

    const MAGIC: &[u8; 4] = b"DBRB";
    const VERSION: u32 = 1;
    const HEADER: usize = 4 + 4 + 8 + 8 + 4 + 4 + 8;

    fn record_size(dim: usize, classes: usize) -> Option<usize> {
        dim.checked_add(classes.checked_mul(2)?)?
            .checked_mul(8)?
            .checked_add(12)
    }

    pub(super) fn encode(b: &ReplayBuffer) -> Vec<u8> {
        let rec = record_size(b.dim, b.num_classes).unwrap_or(0);
        let mut out = Vec::with_capacity(HEADER + rec * b.entries.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(b.capacity as u64).to_le_bytes());
        out.extend_from_slice(&b.seen.to_le_bytes());
        out.extend_from_slice(&(b.dim as u32).to_le_bytes());
        out.extend_from_slice(&(b.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(b.entries.len() as u64).to_le_bytes());
        for e in &b.entries {
            e.input.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(&(e.label as u32).to_le_bytes());
            e.zeta1.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            e.zeta2.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(&(e.task_id as u32).to_le_bytes());
            out.extend_from_slice(&(e.epoch as u32).to_le_bytes());
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take<const N: usize>(&mut self) -> [u8; N] {
            let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("length");
            self.pos += N;
            out
        }

        fn u32(&mut self) -> u32 {
            u32::from_le_bytes(self.take())
        }

        fn u64(&mut self) -> u64 {
            u64::from_le_bytes(self.take())
        }

        fn f64s(&mut self, n: usize) -> Vec<f64> {
            (0..n).map(|_| f64::from_le_bytes(self.take())).collect()
        }
    }

    fn bad(reason: impl Into<String>) -> Error {
        Error::Decode(reason.into())
    }

    pub(super) fn decode(bytes: &[u8]) -> Result<ReplayBuffer> {
        if bytes.len() < HEADER {
            return Err(bad(format!("snapshot has {} bytes, header needs {HEADER}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("not a buffer snapshot"));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32();
        if version != VERSION {
            return Err(bad(format!("unsupported snapshot version {version}")));
        }
        let capacity = usize::try_from(r.u64()).map_err(|_| bad("capacity overflows"))?;
        let seen = r.u64();
        let dim = r.u32() as usize;
        let classes = r.u32() as usize;
        let count = usize::try_from(r.u64()).map_err(|_| bad("entry count overflows"))?;
        if count > capacity {
            return Err(bad(format!("{count} entries exceed capacity {capacity}")));
        }
        if count as u64 > seen {
            return Err(bad(format!("{count} entries but only {seen} seen")));
        }
        let body = record_size(dim, classes)
            .and_then(|rec| rec.checked_mul(count))
            .ok_or_else(|| bad("record sizes overflow"))?;
        if bytes.len() - HEADER != body {
            return Err(bad(format!(
                "expected {body} bytes of entries, found {}",
                bytes.len() - HEADER
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let input = r.f64s(dim);
            let label = r.u32() as usize;
            let zeta1 = r.f64s(classes);
            let zeta2 = r.f64s(classes);
            let task_id = r.u32() as usize;
            let epoch = r.u32() as usize;
            if label >= classes {
                return Err(bad(format!("entry {i}: label {label} >= {classes} classes")));
            }
            if task_id == 0 {
                return Err(bad(format!("entry {i}: task id must be >= 1")));
            }
            entries.push(BufferEntry {
                input,
                label,
                zeta1,
                zeta2,
                task_id,
                epoch,
            });
        }
        Ok(ReplayBuffer {
            capacity,
            dim,
            num_classes: classes,
            entries,
            seen,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: usize, epoch: usize) -> BufferEntry {
        BufferEntry {
            input: vec![id as f64, 0.5],
            label: id % 3,
            zeta1: vec![0.1, 0.2, id as f64],
            zeta2: vec![-0.1, 0.0, 1.0],
            task_id: 1 + id % 2,
            epoch,
        }
    }

    #[test]
    fn first_offers_fill_the_buffer() {
        let mut b = ReplayBuffer::new(2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.reservoir_insert(entry(0, 0), &mut rng).unwrap());
        assert!(b.reservoir_insert(entry(1, 0), &mut rng).unwrap());
        assert_eq!(b.len(), 2);
        for i in 2..50 {
            b.reservoir_insert(entry(i, 0), &mut rng).unwrap();
            assert_eq!(b.len(), 2);
        }
        assert_eq!(b.seen(), 50);
    }

    #[test]
    fn zero_capacity_counts_but_never_stores() {
        let mut b = ReplayBuffer::new(0, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..10 {
            assert!(!b.reservoir_insert(entry(i, 0), &mut rng).unwrap());
        }
        assert_eq!((b.len(), b.seen()), (0, 10));
    }

    #[test]
    fn malformed_entries_are_rejected() {
        let mut b = ReplayBuffer::new(4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut e = entry(0, 0);
        e.zeta2.pop();
        assert!(b.reservoir_insert(e, &mut rng).is_err());
        let mut e = entry(0, 0);
        e.label = 3;
        assert!(matches!(b.reservoir_insert(e, &mut rng), Err(Error::Label { .. })));
        assert_eq!(b.seen(), 0);
    }

    #[test]
    fn reservoir_inclusion_is_uniform() {
        let (cap, stream, trials) = (10, 100, 10_000);
        let mut counts = vec![0u32; stream];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..trials {
            let mut b = ReplayBuffer::new(cap, 2, 3);
            for i in 0..stream {
                b.reservoir_insert(entry(i, 0), &mut rng).unwrap();
            }
            for e in b.entries() {
                counts[e.input[0] as usize] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.10).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn gate_values() {
        let cfg = IrsConfig::new(50);
        assert!((gate_probability(25, &cfg) - 0.047873).abs() < 1e-5);
        let edge = gate_probability(0, &cfg);
        assert!((edge - 0.047873 * (-625.0f64 / (2.0 * cfg.sigma * cfg.sigma)).exp()).abs() < 1e-9);
        assert!((edge - 5.3e-4).abs() < 1e-5);
        let narrow = IrsConfig::with_sigma(50, 0.2).unwrap();
        assert_eq!(gate_probability(25, &narrow), 1.0);
        assert!(IrsConfig::with_sigma(50, 0.0).is_err());
    }

    #[test]
    fn far_epochs_are_rejected() {
        let cfg = IrsConfig::with_sigma(30, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ReplayBuffer::new(10_000, 2, 3);
        let mut accepted = 0;
        for i in 0..10_000 {
            if b.irs_insert(entry(i, 0), 0, &cfg, &mut rng).unwrap() {
                accepted += 1;
            }
        }
        assert!((accepted as f64 / 10_000.0) < 1e-3);
        assert_eq!(b.seen(), accepted);
    }

    #[test]
    fn open_gate_matches_reservoir_bit_for_bit() {
        let cfg = IrsConfig::with_sigma(10, 0.05).unwrap();
        assert_eq!(gate_probability(5, &cfg), 1.0);
        let mut a = ReplayBuffer::new(7, 2, 3);
        let mut b = ReplayBuffer::new(7, 2, 3);
        let mut ra = ChaCha8Rng::seed_from_u64(9);
        let mut rb = ChaCha8Rng::seed_from_u64(9);
        for i in 0..300 {
            let x = a.reservoir_insert(entry(i, 5), &mut ra).unwrap();
            let y = b.irs_insert(entry(i, 5), 5, &cfg, &mut rb).unwrap();
            assert_eq!(x, y);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let empty = ReplayBuffer::new(5, 2, 3);
        assert!(matches!(empty.sample(3, &mut rng), Err(Error::ReplayUnavailable)));

        let mut b = ReplayBuffer::new(5, 2, 3);
        for i in 0..5 {
            b.reservoir_insert(entry(i, 0), &mut rng).unwrap();
        }
        assert!(b.sample(0, &mut rng).unwrap().is_empty());
        let mut all: Vec<usize> = b
            .sample(32, &mut rng)
            .unwrap()
            .iter()
            .map(|e| e.input[0] as usize)
            .collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);

        let mut counts = [0u32; 5];
        for _ in 0..10_000 {
            counts[b.sample(1, &mut rng).unwrap()[0].input[0] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() <= 0.02);
        }

        let batch = b.sample_batch(3, &mut rng).unwrap();
        assert_eq!((batch.len(), batch.inputs.len(), batch.zeta2.len()), (3, 6, 9));
    }

    #[test]
    fn histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = ReplayBuffer::new(5, 2, 3);
        for (i, ep) in [(0, 2), (1, 2), (2, 0)] {
            b.reservoir_insert(entry(i, ep), &mut rng).unwrap();
        }
        assert_eq!(b.epoch_histogram(), vec![1, 0, 2]);
        assert_eq!(b.task_histogram(), vec![2, 1]);
        assert!(ReplayBuffer::new(3, 2, 3).epoch_histogram().is_empty());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let empty = ReplayBuffer::new(4, 2, 3);
        assert_eq!(ReplayBuffer::restore(&empty.snapshot()).unwrap(), empty);
        let mut b = ReplayBuffer::new(4, 2, 3);
        for i in 0..20 {
            b.reservoir_insert(entry(i, i % 7), &mut rng).unwrap();
        }
        assert_eq!(ReplayBuffer::restore(&b.snapshot()).unwrap(), b);
    }

    #[test]
    fn corrupted_snapshots_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = ReplayBuffer::new(4, 2, 3);
        for i in 0..3 {
            b.reservoir_insert(entry(i, 1), &mut rng).unwrap();
        }
        let good = b.snapshot();
        // Entry count lives at bytes 32..40.
        for count in [0u64, 2, 4, 5, u64::MAX] {
            let mut bytes = good.clone();
            bytes[32..40].copy_from_slice(&count.to_le_bytes());
            assert!(matches!(ReplayBuffer::restore(&bytes), Err(Error::Decode(_))), "{count}");
        }
        for cut in 0..good.len() {
            assert!(ReplayBuffer::restore(&good[..cut]).is_err());
        }
        let mut bytes = good.clone();
        bytes[0] = b'X';
        assert!(ReplayBuffer::restore(&bytes).is_err());
        let mut bytes = good;
        bytes.push(0);
        assert!(ReplayBuffer::restore(&bytes).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn capacity_is_never_exceeded(cap in 0usize..20, offers in 0usize..200, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut b = ReplayBuffer::new(cap, 2, 3);
                for i in 0..offers {
                    b.reservoir_insert(entry(i, 0), &mut rng).unwrap();
                    prop_assert!(b.len() <= cap);
                }
                prop_assert_eq!(b.len(), cap.min(offers));
                prop_assert_eq!(b.seen(), offers as u64);
            }

            #[test]
            fn gate_is_a_probability(epoch in 0usize..100, e in 1usize..100, sigma in 0.01f64..100.0) {
                let p = gate_probability(epoch, &IrsConfig::with_sigma(e, sigma).unwrap());
                prop_assert!((0.0..=1.0).contains(&p));
            }

            #[test]
            fn snapshots_round_trip(cap in 0usize..10, offers in 0usize..30, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut b = ReplayBuffer::new(cap, 2, 3);
                for i in 0..offers {
                    b.reservoir_insert(entry(i, i % 4), &mut rng).unwrap();
                }
                prop_assert_eq!(ReplayBuffer::restore(&b.snapshot()).unwrap(), b);
            }
        }
    }
}
