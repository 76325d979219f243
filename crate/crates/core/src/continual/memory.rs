//! Bounded episodic memory with reservoir eviction.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionRecord, Provenance};
use crate::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 1000;
const MEMORY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub image_id: String,
    pub caption: CaptionRecord,
    pub write_step: u64,
}

impl Experience {
    /// Predictions are not training targets and are refused.
    pub fn new(caption: CaptionRecord, write_step: u64) -> Result<Self> {
        if caption.provenance == Provenance::Predicted {
            return Err(Error::Argument(format!("caption {} is a model prediction", caption.caption_id)));
        }
        Ok(Experience {
            image_id: caption.image_id.clone(),
            caption,
            write_step,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    v: u32,
    capacity: usize,
    seen_count: u64,
    seed: u64,
    /// Position in the eviction random stream, as a decimal string.
    rng_pos: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    capacity: usize,
    entries: Vec<Experience>,
    seen_count: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayMemory {
            capacity,
            entries: Vec::new(),
            seen_count: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Experience] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    /// Reservoir write. The random stream position is persisted, so a
    /// memory reloaded from disk continues exactly as if never saved.
    pub fn write(&mut self, e: Experience) {
        self.seen_count += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(e);
            return;
        }
        let j = self.rng.gen_range(0..self.seen_count);
        if (j as usize) < self.capacity {
            self.entries[j as usize] = e;
        }
    }

    /// Uniform sample without replacement, or with replacement when
    /// `batch_size` exceeds the number of entries. Empty memory yields nothing.
    pub fn sample(&self, batch_size: usize, seed: u64) -> Vec<Experience> {
        let n = self.entries.len();
        if n == 0 || batch_size == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if batch_size <= n {
            sample(&mut rng, n, batch_size)
                .into_iter()
                .map(|i| self.entries[i].clone())
                .collect()
        } else {
            (0..batch_size).map(|_| self.entries[rng.gen_range(0..n)].clone()).collect()
        }
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            v: MEMORY_FORMAT_VERSION,
            capacity: self.capacity,
            seen_count: self.seen_count,
            seed: self.seed,
            rng_pos: self.rng.get_word_pos().to_string(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("experience serializes"));
            out.push('\n');
        }
        out
    }

    /// Parse the header line followed by one experience per line.
    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let (hline, htext) = lines.next().ok_or_else(|| parse_err(1, "missing memory header".into()))?;
        let header: Header = serde_json::from_str(htext).map_err(|e| parse_err(hline + 1, e.to_string()))?;
        if header.v != MEMORY_FORMAT_VERSION {
            return Err(parse_err(hline + 1, format!("unsupported memory version {}", header.v)));
        }
        let mut entries = Vec::new();
        for (i, l) in lines {
            let mut e: Experience = serde_json::from_str(l).map_err(|err| parse_err(i + 1, err.to_string()))?;
            e.caption.retokenize();
            e.caption.check().map_err(|err| parse_err(i + 1, err.to_string()))?;
            entries.push(e);
        }
        if entries.len() > header.capacity || entries.len() as u64 > header.seen_count {
            return Err(parse_err(
                hline + 1,
                format!("{} entries exceed capacity {} or seen count {}", entries.len(), header.capacity, header.seen_count),
            ));
        }
        let pos: u128 = header
            .rng_pos
            .parse()
            .map_err(|_| parse_err(hline + 1, format!("bad rng_pos {:?}", header.rng_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(header.seed);
        rng.set_word_pos(pos);
        Ok(ReplayMemory {
            capacity: header.capacity,
            entries,
            seen_count: header.seen_count,
            seed: header.seed,
            rng,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

pub fn memory_write(mut mem: ReplayMemory, e: Experience) -> ReplayMemory {
    mem.write(e);
    mem
}

pub fn memory_sample(mem: &ReplayMemory, batch_size: usize, seed: u64) -> Vec<Experience> {
    mem.sample(batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(i: usize) -> Experience {
        let c = CaptionRecord::new(format!("c{i}"), format!("i{i}"), "a dog", Provenance::GroundTruth);
        Experience::new(c, i as u64).unwrap()
    }

    #[test]
    fn under_capacity_keeps_all() {
        let mut m = ReplayMemory::new(10, 0);
        (0..5).for_each(|i| m.write(exp(i)));
        assert_eq!(m.len(), 5);
        assert_eq!(m.entries().iter().map(|e| e.write_step).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn capacity_bound() {
        let mut m = ReplayMemory::new(10, 0);
        (0..1000).for_each(|i| m.write(exp(i)));
        assert_eq!(m.len(), 10);
        assert_eq!(m.seen_count(), 1000);
        let mut zero = ReplayMemory::new(0, 0);
        zero.write(exp(0));
        assert!(zero.is_empty());
    }

    #[test]
    fn predictions_refused() {
        let c = CaptionRecord::new("p", "i", "a dog", Provenance::Predicted);
        assert!(Experience::new(c, 0).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let mut m = ReplayMemory::new(10, 0);
        assert!(m.sample(3, 0).is_empty());
        m.write(exp(7));
        assert_eq!(m.sample(1, 0), vec![exp(7)]);
        assert_eq!(m.sample(3, 0).len(), 3);
        (0..4).for_each(|i| m.write(exp(i)));
        let mut perm: Vec<u64> = m.sample(5, 9).iter().map(|e| e.write_step).collect();
        perm.sort();
        assert_eq!(perm, vec![0, 1, 2, 3, 7]);
    }

    #[test]
    fn persistence_continues_identically() {
        let mut a = ReplayMemory::new(5, 42);
        (0..20).for_each(|i| a.write(exp(i)));
        let mut b = ReplayMemory::parse_jsonl(&a.to_jsonl()).unwrap();
        assert_eq!(a, b);
        for i in 20..60 {
            a.write(exp(i));
            b.write(exp(i));
        }
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_memory_reports_line() {
        let mut a = ReplayMemory::new(5, 42);
        (0..3).for_each(|i| a.write(exp(i)));
        let mut text = a.to_jsonl();
        text.push_str("{not json\n");
        assert!(matches!(ReplayMemory::parse_jsonl(&text), Err(Error::Parse { line: 5, .. })));
        assert!(matches!(ReplayMemory::parse_jsonl(""), Err(Error::Parse { line: 1, .. })));
    }
}
