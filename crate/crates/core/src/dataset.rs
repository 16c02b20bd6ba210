//! In-memory scans with their reports, loaded from disk or rendered directly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthcohort::{
    gen_cohort, render_scan, CohortConfig, CohortManifest, Diagnosis, ManifestEntry, Split, SubjectRecord, Volume3D,
};
use crate::textkit::{build_vocab, class_prompt, render_report, Report, Vocab};

#[derive(Debug, Clone)]
pub struct Scan {
    /// Position in the cohort manifest; stable across splits.
    pub key: usize,
    pub scan_id: String,
    pub record: SubjectRecord,
    pub volume: Volume3D,
    pub report: String,
}

impl Scan {
    pub fn diagnosis(&self) -> Diagnosis {
        self.record.diagnosis
    }

    pub fn mmse(&self) -> u32 {
        self.record.mmse
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scans: Vec<Scan>,
}

fn keep(entry: &ManifestEntry, split: Split, classes: &[Diagnosis]) -> bool {
    entry.split == split && classes.contains(&entry.record.diagnosis)
}

impl Dataset {
    /// Read one split from a cohort written by `write_cohort`.
    pub fn load(manifest: &CohortManifest, base: &Path, split: Split, classes: &[Diagnosis]) -> Result<Self> {
        let mut scans = Vec::new();
        for (key, entry) in manifest.entries.iter().enumerate() {
            if !keep(entry, split, classes) {
                continue;
            }
            scans.push(Scan {
                key,
                scan_id: entry.scan_id.clone(),
                record: entry.record.clone(),
                volume: manifest.load_volume(base, entry)?,
                report: manifest.load_report(base, entry)?,
            });
        }
        Ok(Self { scans })
    }

    /// Render one split directly from a cohort config, without touching disk.
    pub fn generate(config: &CohortConfig, split: Split, classes: &[Diagnosis]) -> Result<Self> {
        let manifest = gen_cohort(config)?;
        let mut scans = Vec::new();
        for (key, entry) in manifest.entries.iter().enumerate() {
            if !keep(entry, split, classes) {
                continue;
            }
            scans.push(Scan {
                key,
                scan_id: entry.scan_id.clone(),
                record: entry.record.clone(),
                volume: render_scan(&entry.record, &config.grid, entry.scan_index)?,
                report: render_report(&entry.record).text,
            });
        }
        Ok(Self { scans })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Seeded random subset of `n` scans, kept in manifest order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::invalid(format!(
                "requested {n} scans from a split of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        Ok(Self {
            scans: idx.into_iter().map(|i| self.scans[i].clone()).collect(),
        })
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.scans {
            c[s.diagnosis().index()] += 1;
        }
        c
    }
}

/// Vocabulary over the training reports plus every class prompt.
pub fn corpus_vocab(train: &Dataset) -> Result<Vocab> {
    let mut corpus: Vec<Report> = Diagnosis::ALL.iter().map(|&d| class_prompt(d)).collect();
    corpus.extend(train.scans.iter().map(|s| Report {
        text: s.report.clone(),
        source_subject: s.record.subject_id.clone(),
    }));
    build_vocab(&corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::Grid;

    fn small() -> CohortConfig {
        let mut c = CohortConfig::desk(4);
        c.subjects_per_class = [6, 6, 6];
        c.grid = Grid {
            dims: [8, 8, 8],
            patch: [4, 4, 4],
        };
        c
    }

    #[test]
    fn generate_matches_disk_roundtrip() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        crate::synthcohort::write_cohort(&cfg, dir.path()).unwrap();
        let (manifest, base) = CohortManifest::load(dir.path()).unwrap();
        for split in Split::ALL {
            let a = Dataset::load(&manifest, &base, split, &Diagnosis::ALL).unwrap();
            let b = Dataset::generate(&cfg, split, &Diagnosis::ALL).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.scans.iter().zip(&b.scans) {
                assert_eq!(x.key, y.key);
                assert_eq!(x.volume, y.volume);
                assert_eq!(x.report, y.report);
            }
        }
    }

    #[test]
    fn class_filter_and_subset() {
        let cfg = small();
        let d = Dataset::generate(&cfg, Split::Train, &[Diagnosis::NC, Diagnosis::AD]).unwrap();
        assert_eq!(d.class_counts(), [4, 0, 4]);
        let s = d.subset(3, 1).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.scans.windows(2).all(|w| w[0].key < w[1].key));
        assert!(d.subset(99, 1).is_err());
    }

    #[test]
    fn vocab_covers_prompts_and_reports() {
        let d = Dataset::generate(&small(), Split::Train, &Diagnosis::ALL).unwrap();
        let v = corpus_vocab(&d).unwrap();
        for t in ["nc", "mci", "ad", "hippocampal", "mm3"] {
            assert!(v.contains(t), "{t}");
        }
    }
}
