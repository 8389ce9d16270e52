//! Tab-separated dataset manifests and seeded train/test/val splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub subject_id: String,
    pub dataset_tag: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

/// Train/test/val proportions in percent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: usize,
    pub test: usize,
    pub val: usize,
}

impl SplitRatio {
    pub const FORTY_THIRTY_THIRTY: Self = Self {
        train: 40,
        test: 30,
        val: 30,
    };
    pub const SIXTY_TWENTY_TWENTY: Self = Self {
        train: 60,
        test: 20,
        val: 20,
    };
}

impl FromStr for SplitRatio {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "40-30-30" => Ok(Self::FORTY_THIRTY_THIRTY),
            "60-20-20" => Ok(Self::SIXTY_TWENTY_TWENTY),
            other => Err(format!("unknown split ratio `{other}` (use 40-30-30 or 60-20-20)")),
        }
    }
}

fn check_field(field: &str, what: &str) -> std::result::Result<(), String> {
    if field.is_empty() {
        return Err(format!("empty {what}"));
    }
    if field.contains(['\t', '\n', '\r']) {
        return Err(format!("{what} contains a tab or newline"));
    }
    Ok(())
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, which: Split) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| r.split == which).cloned().collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.image_path.display(),
                r.mask_path.display(),
                r.subject_id,
                r.dataset_tag,
                r.split
            ));
        }
        out
    }

    /// Parses manifest text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Manifest> {
        let err = |line: usize, detail: String| Error::Manifest {
            path: source.to_path_buf(),
            line,
            detail,
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(err(line_no, format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            for (f, what) in fields.iter().zip(["image path", "mask path", "subject id", "dataset tag", "split"]) {
                check_field(f, what).map_err(|d| err(line_no, d))?;
            }
            let split = fields[4].parse().map_err(|d| err(line_no, d))?;
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            records.push(Record {
                image_path: resolve(fields[0]),
                mask_path: resolve(fields[1]),
                subject_id: fields[2].to_string(),
                dataset_tag: fields[3].to_string(),
                split,
            });
        }
        Ok(Manifest { records })
    }

    /// Reads a manifest file and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| {
            let valid = &e.as_bytes()[..e.utf8_error().valid_up_to()];
            Error::Manifest {
                path: path.to_path_buf(),
                line: valid.iter().filter(|&&b| b == b'\n').count() + 1,
                detail: "not valid UTF-8".into(),
            }
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base, path)?;
        for (i, r) in m.records.iter().enumerate() {
            for p in [&r.image_path, &r.mask_path] {
                if !p.is_file() {
                    return Err(Error::Manifest {
                        path: path.to_path_buf(),
                        line: i + 1,
                        detail: format!("missing file {}", p.display()),
                    });
                }
            }
        }
        Ok(m)
    }

    /// Writes the manifest with paths relative to its directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = Manifest {
            records: self
                .records
                .iter()
                .map(|r| Record {
                    image_path: r.image_path.strip_prefix(base).unwrap_or(&r.image_path).to_path_buf(),
                    mask_path: r.mask_path.strip_prefix(base).unwrap_or(&r.mask_path).to_path_buf(),
                    ..r.clone()
                })
                .collect(),
        };
        fs::write(path, rel.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded, subject-aware partition. Records are grouped by subject (each
/// record is its own group when all subjects are distinct), groups are
/// shuffled, and whole groups fill train, then test, then val, against
/// targets rounded from the ratio.
pub fn assign_splits(manifest: &Manifest, ratio: SplitRatio, seed: u64) -> Result<Manifest> {
    let n = manifest.len();
    if n < 10 {
        return Err(Error::Invalid(format!("splitting needs at least 10 records, got {n}")));
    }
    let total = ratio.train + ratio.test + ratio.val;
    let train_target = (n * ratio.train + total / 2) / total;
    let test_target = (n * ratio.test + total / 2) / total;

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry(r.subject_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut out = manifest.clone();
    let (mut n_train, mut n_test) = (0, 0);
    for group in order {
        let split = if n_train < train_target {
            n_train += group.len();
            Split::Train
        } else if n_test < test_target {
            n_test += group.len();
            Split::Test
        } else {
            Split::Val
        };
        for i in group {
            out.records[i].split = split;
        }
    }
    Ok(out)
}

pub fn split_40_30_30(manifest: &Manifest, seed: u64) -> Result<Manifest> {
    assign_splits(manifest, SplitRatio::FORTY_THIRTY_THIRTY, seed)
}

pub fn split_60_20_20(manifest: &Manifest, seed: u64) -> Result<Manifest> {
    assign_splits(manifest, SplitRatio::SIXTY_TWENTY_TWENTY, seed)
}
