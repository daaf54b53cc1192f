//! Interaction log ingestion, leave-one-out splits and fixed-length batching.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticConfig};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::schema::{BehaviorSchema, Catalog, Interaction, UserSequence};
use crate::{Error, Result};

/// Reads the tab-separated interaction log and an optional catalog file.
///
/// Without a catalog file the catalog is inferred from the log; item ids
/// that never occur get category 0. Users appear in order of first
/// occurrence and each sequence is stably sorted by timestamp.
pub fn load_interactions(path: &Path, schema: &BehaviorSchema, catalog_path: Option<&Path>) -> Result<(Catalog, Vec<UserSequence>)> {
    let text = read(path)?;
    let declared = catalog_path.map(load_catalog).transpose()?;

    let mut users: HashMap<String, u32> = HashMap::new();
    let mut sequences: Vec<UserSequence> = Vec::new();
    let mut inferred: Vec<Option<usize>> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(path, line_no, format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let item: usize = parse_uint(path, line_no, "item_id", fields[1])?;
        let category: usize = parse_uint(path, line_no, "category_id", fields[2])?;
        let behavior = schema.id_of(fields[3]).ok_or_else(|| Error::UnknownBehavior {
            path: path.to_path_buf(),
            line: line_no,
            name: fields[3].to_string(),
        })?;
        let timestamp: u64 = parse_uint(path, line_no, "timestamp", fields[4])?;

        match &declared {
            Some(cat) => match cat.category_of(item) {
                None => return Err(parse_err(path, line_no, format!("item {item} is not in the catalog"))),
                Some(c) if c != category => {
                    return Err(parse_err(path, line_no, format!("item {item} has category {c} in the catalog, {category} here")))
                }
                Some(_) => {}
            },
            None => {
                if inferred.len() <= item {
                    inferred.resize(item + 1, None);
                }
                match inferred[item] {
                    Some(c) if c != category => {
                        return Err(parse_err(path, line_no, format!("item {item} seen with categories {c} and {category}")))
                    }
                    _ => inferred[item] = Some(category),
                }
            }
        }

        let user = fields[0].to_string();
        let next = users.len() as u32;
        let uid = *users.entry(user.clone()).or_insert(next);
        if uid == next {
            sequences.push(UserSequence { user: uid, external_id: user, interactions: Vec::new() });
        }
        sequences[uid as usize].interactions.push(Interaction { user: uid, item, category, behavior, timestamp });
    }

    for seq in &mut sequences {
        seq.sort();
    }

    let catalog = match declared {
        Some(c) => c,
        None => {
            let category_of: Vec<usize> = inferred.iter().map(|c| c.unwrap_or(0)).collect();
            let count = category_of.iter().copied().max().map_or(1, |m| m + 1);
            Catalog::new(category_of, count)?
        }
    };
    Ok((catalog, sequences))
}

/// Reads `item_id \t category_id` rows; ids not listed get category 0.
pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let text = read(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(path, lineno + 1, format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        let item: usize = parse_uint(path, lineno + 1, "item_id", fields[0])?;
        let category: usize = parse_uint(path, lineno + 1, "category_id", fields[1])?;
        pairs.push((item, category));
    }
    let n = pairs.iter().map(|&(i, _)| i + 1).max().unwrap_or(0);
    let mut category_of = vec![0; n];
    for (i, c) in pairs {
        category_of[i] = c;
    }
    let count = category_of.iter().copied().max().map_or(1, |m| m + 1);
    Catalog::new(category_of, count)
}

pub fn write_interactions(path: &Path, schema: &BehaviorSchema, sequences: &[UserSequence]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# user_id\titem_id\tcategory_id\tbehavior\ttimestamp").expect("vec write");
    for seq in sequences {
        for it in &seq.interactions {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", seq.external_id, it.item, it.category, schema.name(it.behavior), it.timestamp)
                .expect("vec write");
        }
    }
    write(path, &out)
}

pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut out = Vec::new();
    for (item, c) in catalog.categories().iter().enumerate() {
        writeln!(out, "{item}\t{c}").expect("vec write");
    }
    write(path, &out)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn parse_err(path: &Path, line: usize, message: String) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message }
}

fn parse_uint<N: std::str::FromStr>(path: &Path, line: usize, what: &str, field: &str) -> Result<N> {
    field.trim().parse().map_err(|_| parse_err(path, line, format!("{what} `{field}` is not a non-negative integer")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    /// Users with fewer interactions only contribute training data.
    pub min_length: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { min_length: 3 }
    }
}

/// A held-out next interaction and the history that precedes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub history: UserSequence,
    pub target: Interaction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<UserSequence>,
    pub val: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

/// Leave-one-out: last interaction is the test target, second-to-last the
/// validation target, and the rest is training.
pub fn make_splits(sequences: &[UserSequence], spec: SplitSpec) -> Splits {
    let min_length = spec.min_length.max(2);
    let mut splits = Splits::default();
    for seq in sequences {
        let n = seq.len();
        if n < min_length {
            splits.train.push(seq.clone());
            continue;
        }
        splits.train.push(seq.prefix(n - 2));
        splits.val.push(EvalCase { history: seq.prefix(n - 2), target: seq.interactions[n - 2] });
        splits.test.push(EvalCase { history: seq.prefix(n - 1), target: seq.interactions[n - 1] });
    }
    splits
}

/// Next-step training target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub item: usize,
    pub behavior: usize,
}

/// Left-padded `(rows, len)` matrices, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub users: Vec<u32>,
    pub items: Vec<usize>,
    pub behaviors: Vec<usize>,
    pub categories: Vec<usize>,
    pub timestamps: Vec<u64>,
    pub valid: Vec<bool>,
    pub targets: Vec<Option<Target>>,
}

/// One padded sequence of a [`Batch`].
#[derive(Clone, Copy, Debug)]
pub struct Row<'a> {
    pub items: &'a [usize],
    pub behaviors: &'a [usize],
    pub categories: &'a [usize],
    pub timestamps: &'a [u64],
    pub valid: &'a [bool],
    pub targets: &'a [Option<Target>],
}

impl Row<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of leading pad slots.
    pub fn pad(&self) -> usize {
        self.valid.iter().take_while(|v| !**v).count()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.users.len()
    }

    pub fn row(&self, r: usize) -> Row<'_> {
        let s = r * self.len..(r + 1) * self.len;
        Row {
            items: &self.items[s.clone()],
            behaviors: &self.behaviors[s.clone()],
            categories: &self.categories[s.clone()],
            timestamps: &self.timestamps[s.clone()],
            valid: &self.valid[s.clone()],
            targets: &self.targets[s],
        }
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// Packs sequences, keeping the most recent `len` interactions of each.
    pub fn from_sequences(sequences: &[&UserSequence], len: usize) -> Batch {
        assert!(len >= 1, "sequence length must be positive");
        let rows = sequences.len();
        let mut b = Batch {
            len,
            users: Vec::with_capacity(rows),
            items: vec![0; rows * len],
            behaviors: vec![0; rows * len],
            categories: vec![0; rows * len],
            timestamps: vec![0; rows * len],
            valid: vec![false; rows * len],
            targets: vec![None; rows * len],
        };
        for (r, seq) in sequences.iter().enumerate() {
            b.users.push(seq.user);
            let kept = &seq.interactions[seq.len().saturating_sub(len)..];
            let pad = len - kept.len();
            for (k, it) in kept.iter().enumerate() {
                let p = r * len + pad + k;
                b.items[p] = it.item;
                b.behaviors[p] = it.behavior;
                b.categories[p] = it.category;
                b.timestamps[p] = it.timestamp;
                b.valid[p] = true;
                if let Some(next) = kept.get(k + 1) {
                    b.targets[p] = Some(Target { item: next.item, behavior: next.behavior });
                }
            }
        }
        b
    }
}

/// Splits `sequences` into consecutive batches of at most `batch_size` rows.
pub fn batch_sequences<'a>(sequences: &'a [UserSequence], len: usize, batch_size: usize) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size >= 1);
    sequences.chunks(batch_size).map(move |chunk| {
        let refs: Vec<&UserSequence> = chunk.iter().collect();
        Batch::from_sequences(&refs, len)
    })
}
