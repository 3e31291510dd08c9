//! Writer-disjoint k-fold splits and per-writer page splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FragmentRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Val, Part::Test];
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        })
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            other => Err(Error::data(format!("unknown split part {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    KfoldWriterDisjoint,
    PageIdentification,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::KfoldWriterDisjoint => "kfold",
            SplitKind::PageIdentification => "identification",
        })
    }
}

/// Assignment of every fragment to one part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub assignments: BTreeMap<String, Part>,
}

impl SplitSpec {
    pub fn part_of(&self, fragment_id: &str) -> Option<Part> {
        self.assignments.get(fragment_id).copied()
    }

    /// Records assigned to `part`, in input order.
    pub fn select<'a>(&self, records: &'a [FragmentRecord], part: Part) -> Vec<&'a FragmentRecord> {
        records
            .iter()
            .filter(|r| self.part_of(&r.fragment_id) == Some(part))
            .collect()
    }

    pub fn count(&self, part: Part) -> usize {
        self.assignments.values().filter(|&&p| p == part).count()
    }

    /// `fragment_id<TAB>part` lines sorted by id, with a header row.
    pub fn to_text(&self) -> String {
        let mut out = format!("# kind={}\nfragment_id\tpart\n", self.kind);
        for (id, part) in &self.assignments {
            out.push_str(&format!("{id}\t{part}\n"));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kind = SplitKind::PageIdentification;
        let mut assignments = BTreeMap::new();
        let mut header_seen = false;
        for line in text.lines() {
            if let Some(k) = line.strip_prefix("# kind=") {
                kind = match k {
                    "kfold" => SplitKind::KfoldWriterDisjoint,
                    "identification" => SplitKind::PageIdentification,
                    other => return Err(Error::format(origin, format!("unknown split kind {other:?}"))),
                };
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line != "fragment_id\tpart" {
                    return Err(Error::format(origin, "missing `fragment_id<TAB>part` header"));
                }
                header_seen = true;
                continue;
            }
            let (id, part) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(origin, format!("malformed split line {line:?}")))?;
            if assignments.insert(id.to_string(), part.parse()?).is_some() {
                return Err(Error::format(origin, format!("fragment {id} assigned twice")));
            }
        }
        Ok(SplitSpec { kind, assignments })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SplitSpec::parse(&text, path)
    }
}

/// The four writer groups of the PapyRow cross-validation protocol.
pub fn papyrow_folds() -> Vec<Vec<String>> {
    [
        ["Aparhasios", "Ieremias", "Konstantinos", "Kyros", "Philotheos"],
        ["Amais", "Dios", "Hermauos", "Kollouthos", "Menas"],
        ["Daueit", "Dioscorus", "Theodosius", "Pilatos", "Victor"],
        ["Abraamios", "Andreas", "Anouphis", "Isak", "Psates"],
    ]
    .iter()
    .map(|f| f.iter().map(|s| s.to_string()).collect())
    .collect()
}

/// Name used for fold membership: trailing digits are dropped, so
/// `Kyros1`/`Kyros2` and `Victor1`/`Victor2`/`Victor3` count as one scribe.
pub fn canonical_writer(name: &str) -> &str {
    let trimmed = name.trim_end_matches(|c: char| c.is_ascii_digit());
    if trimmed.is_empty() {
        name
    } else {
        trimmed
    }
}

/// Parses fold lists, one fold per line with comma-separated writer names.
pub fn parse_folds(text: &str) -> Result<Vec<Vec<String>>> {
    let folds: Vec<Vec<String>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let names = l.split_once('\t').map_or(l, |(_, rest)| rest);
            names
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .collect();
    if folds.len() < 2 {
        return Err(Error::config(format!("k-fold splitting needs at least 2 folds, got {}", folds.len())));
    }
    Ok(folds)
}

/// One `(train, test)` split per fold: fold `i` trains, all others test.
pub fn make_kfold_splits(records: &[FragmentRecord], folds: &[Vec<String>]) -> Result<Vec<SplitSpec>> {
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, fold) in folds.iter().enumerate() {
        for name in fold {
            if let Some(prev) = fold_of.insert(canonical_writer(name), i) {
                if prev != i {
                    return Err(Error::config(format!("writer {name} is listed in folds {} and {}", prev + 1, i + 1)));
                }
            }
        }
    }
    let unmatched: BTreeSet<&str> = records
        .iter()
        .map(|r| r.writer_id.as_str())
        .filter(|w| !fold_of.contains_key(canonical_writer(w)))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::data(format!(
            "writers not covered by any fold: {}",
            unmatched.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let splits: Vec<SplitSpec> = (0..folds.len())
        .map(|i| SplitSpec {
            kind: SplitKind::KfoldWriterDisjoint,
            assignments: records
                .iter()
                .map(|r| {
                    let part = if fold_of[canonical_writer(&r.writer_id)] == i {
                        Part::Train
                    } else {
                        Part::Test
                    };
                    (r.fragment_id.clone(), part)
                })
                .collect(),
        })
        .collect();
    for s in &splits {
        let writers = |part| -> BTreeSet<&str> {
            s.select(records, part)
                .into_iter()
                .map(|r| canonical_writer(&r.writer_id))
                .collect()
        };
        assert!(writers(Part::Train).is_disjoint(&writers(Part::Test)));
    }
    Ok(splits)
}

/// Largest-remainder apportionment of `total` items to `fractions`.
///
/// Ties in the remainder go to the earlier part. When `total` is at least
/// the number of parts, empty parts borrow one item from the largest part.
pub fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let sum: f64 = fractions.iter().sum();
    let exact: Vec<f64> = fractions.iter().map(|f| f / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    if total >= fractions.len() {
        for i in 0..counts.len() {
            if counts[i] == 0 {
                let donor = (0..counts.len()).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Splits each writer's pages into train/val/test by `fractions`; all
/// fragments of a page share its part.
///
/// Writers are visited in sorted order and their sorted pages shuffled with
/// one generator seeded by `seed`. A writer with a single page puts it in
/// train; the warnings list names such writers.
pub fn make_identification_split(
    records: &[FragmentRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(SplitSpec, Vec<String>)> {
    if fractions.iter().any(|&f| !(f >= 0.0)) || fractions.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config(format!("invalid split fractions {fractions:?}")));
    }
    let mut pages: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        pages.entry(&r.writer_id).or_default().insert(&r.page_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut page_part: BTreeMap<(&str, &str), Part> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (writer, set) in &pages {
        let mut list: Vec<&str> = set.iter().copied().collect();
        list.shuffle(&mut rng);
        if list.len() == 1 {
            let msg = format!("writer {writer} has a single page; it goes to train");
            log::warn!("{msg}");
            warnings.push(msg);
            page_part.insert((writer, list[0]), Part::Train);
            continue;
        }
        let counts = apportion(list.len(), &fractions);
        let mut it = list.into_iter();
        for (part, n) in Part::ALL.into_iter().zip(counts) {
            for page in it.by_ref().take(n) {
                page_part.insert((writer, page), part);
            }
        }
    }
    let assignments = records
        .iter()
        .map(|r| (r.fragment_id.clone(), page_part[&(r.writer_id.as_str(), r.page_id.as_str())]))
        .collect();
    Ok((
        SplitSpec {
            kind: SplitKind::PageIdentification,
            assignments,
        },
        warnings,
    ))
}
