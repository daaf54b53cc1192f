//! Behaviors, interactions, sequences and the item catalog.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Position of a behavior on the funnel: browsing versus committing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intensity {
    Exploration = 0,
    Commitment = 1,
}

impl Intensity {
    pub fn bit(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Behavior {
    pub id: usize,
    pub name: String,
}

/// Behavior vocabulary with its intensity partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorSchema {
    behaviors: Vec<Behavior>,
    intensity: Vec<Intensity>,
}

impl BehaviorSchema {
    /// Ids are assigned in the given order.
    pub fn new<S: AsRef<str>>(entries: &[(S, Intensity)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Schema("at least one behavior is required".into()));
        }
        let mut seen = HashSet::new();
        let mut behaviors = Vec::with_capacity(entries.len());
        let mut intensity = Vec::with_capacity(entries.len());
        for (id, (name, level)) in entries.iter().enumerate() {
            let name = name.as_ref();
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid behavior name {name:?}")));
            }
            if !seen.insert(name.to_string()) {
                return Err(Error::Schema(format!("duplicate behavior name `{name}`")));
            }
            behaviors.push(Behavior { id, name: name.to_string() });
            intensity.push(*level);
        }
        Ok(BehaviorSchema { behaviors, intensity })
    }

    /// `view`, `click` (exploration); `cart`, `purchase` (commitment).
    pub fn ecommerce() -> Self {
        use Intensity::*;
        Self::new(&[("view", Exploration), ("click", Exploration), ("cart", Commitment), ("purchase", Commitment)]).expect("static schema")
    }

    /// Six-behavior insurance funnel. Where `search` falls is a choice the
    /// caller makes.
    pub fn insurance(search_is_commitment: bool) -> Self {
        use Intensity::*;
        let search = if search_is_commitment { Commitment } else { Exploration };
        Self::new(&[
            ("expose", Exploration),
            ("click", Exploration),
            ("search", search),
            ("cart", Commitment),
            ("consult", Commitment),
            ("purchase", Commitment),
        ])
        .expect("static schema")
    }

    /// Parses `name:0,name:1,...` where the digit is the intensity bit.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, bit) = part.split_once(':').ok_or_else(|| Error::Schema(format!("expected name:intensity, got `{part}`")))?;
            let level = match bit.trim() {
                "0" => Intensity::Exploration,
                "1" => Intensity::Commitment,
                other => return Err(Error::Schema(format!("intensity must be 0 or 1, got `{other}`"))),
            };
            entries.push((name.trim().to_string(), level));
        }
        Self::new(&entries)
    }

    /// Inverse of [`BehaviorSchema::parse`].
    pub fn to_spec_string(&self) -> String {
        self.behaviors.iter().map(|b| format!("{}:{}", b.name, self.intensity[b.id].bit())).collect::<Vec<_>>().join(",")
    }

    pub fn len(&self) -> usize {
        self.behaviors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behaviors.is_empty()
    }

    pub fn behaviors(&self) -> &[Behavior] {
        &self.behaviors
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.behaviors.iter().position(|b| b.name == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.behaviors[id].name
    }

    pub fn intensity(&self, id: usize) -> Intensity {
        self.intensity[id]
    }

    pub fn is_commitment(&self, id: usize) -> bool {
        self.intensity[id] == Intensity::Commitment
    }

    /// Intensity bit per behavior id.
    pub fn intensity_bits(&self) -> Vec<u8> {
        self.intensity.iter().map(|i| i.bit()).collect()
    }

    /// True when every behavior sits in the same stratum.
    pub fn is_degenerate(&self) -> bool {
        self.intensity.iter().all(|&i| i == self.intensity[0])
    }

    /// Copy of the schema where only `purchase` is a commitment behavior.
    pub fn purchase_only(&self) -> Self {
        let intensity =
            self.behaviors.iter().map(|b| if b.name == "purchase" { Intensity::Commitment } else { Intensity::Exploration }).collect();
        BehaviorSchema { behaviors: self.behaviors.clone(), intensity }
    }
}

/// One `(item, behavior, time)` event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    /// Dense index of the owning user.
    pub user: u32,
    pub item: usize,
    pub category: usize,
    pub behavior: usize,
    /// Seconds since the epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u32,
    /// Identifier as it appears in the input file.
    pub external_id: String,
    pub interactions: Vec<Interaction>,
}

impl UserSequence {
    pub fn new(user: u32, external_id: impl Into<String>, mut interactions: Vec<Interaction>) -> Self {
        interactions.sort_by_key(|i| i.timestamp);
        UserSequence { user, external_id: external_id.into(), interactions }
    }

    /// Stable sort by timestamp; ties keep input order.
    pub fn sort(&mut self) {
        self.interactions.sort_by_key(|i| i.timestamp);
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Prefix of the first `n` interactions.
    pub fn prefix(&self, n: usize) -> UserSequence {
        UserSequence {
            user: self.user,
            external_id: self.external_id.clone(),
            interactions: self.interactions[..n.min(self.len())].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    category_of: Vec<usize>,
    category_count: usize,
}

impl Catalog {
    /// `category_count` must exceed every entry of `category_of`.
    pub fn new(category_of: Vec<usize>, category_count: usize) -> Result<Self> {
        if let Some((item, &c)) = category_of.iter().enumerate().find(|(_, &c)| c >= category_count) {
            return Err(Error::Schema(format!("item {item} has category {c} >= {category_count}")));
        }
        Ok(Catalog { category_of, category_count })
    }

    pub fn item_count(&self) -> usize {
        self.category_of.len()
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    pub fn category_of(&self, item: usize) -> Option<usize> {
        self.category_of.get(item).copied()
    }

    pub fn categories(&self) -> &[usize] {
        &self.category_of
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    UnknownBehavior { user: String, position: usize, behavior: usize },
    UnknownItem { user: String, position: usize, item: usize },
    CategoryMismatch { user: String, position: usize, item: usize, category: usize },
    NonMonotoneTimestamp { user: String, position: usize, previous: u64, timestamp: u64 },
    ForeignInteraction { user: String, position: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownBehavior { user, position, behavior } => {
                write!(f, "user {user} position {position}: unknown behavior id {behavior}")
            }
            Violation::UnknownItem { user, position, item } => {
                write!(f, "user {user} position {position}: item {item} not in catalog")
            }
            Violation::CategoryMismatch { user, position, item, category } => {
                write!(f, "user {user} position {position}: item {item} recorded with category {category}")
            }
            Violation::NonMonotoneTimestamp { user, position, previous, timestamp } => {
                write!(f, "user {user} position {position}: timestamp {timestamp} precedes {previous}")
            }
            Violation::ForeignInteraction { user, position } => {
                write!(f, "user {user} position {position}: interaction belongs to another user")
            }
        }
    }
}

/// Collects every consistency problem; an empty list means the data is usable.
pub fn validate_schema(schema: &BehaviorSchema, catalog: &Catalog, sequences: &[UserSequence]) -> Vec<Violation> {
    let mut out = Vec::new();
    for seq in sequences {
        let user = &seq.external_id;
        let mut previous: Option<u64> = None;
        for (position, it) in seq.interactions.iter().enumerate() {
            if it.user != seq.user {
                out.push(Violation::ForeignInteraction { user: user.clone(), position });
            }
            if it.behavior >= schema.len() {
                out.push(Violation::UnknownBehavior { user: user.clone(), position, behavior: it.behavior });
            }
            match catalog.category_of(it.item) {
                None => out.push(Violation::UnknownItem { user: user.clone(), position, item: it.item }),
                Some(c) if c != it.category => {
                    out.push(Violation::CategoryMismatch { user: user.clone(), position, item: it.item, category: it.category })
                }
                Some(_) => {}
            }
            if let Some(p) = previous {
                if it.timestamp < p {
                    out.push(Violation::NonMonotoneTimestamp { user: user.clone(), position, previous: p, timestamp: it.timestamp });
                }
            }
            previous = Some(it.timestamp);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(item: usize, behavior: usize, t: u64) -> Interaction {
        Interaction { user: 0, item, category: item % 2, behavior, timestamp: t }
    }

    fn catalog() -> Catalog {
        Catalog::new((0..10).map(|i| i % 2).collect(), 2).unwrap()
    }

    #[test]
    fn consistent_data_has_no_violations() {
        let schema = BehaviorSchema::parse("view:0,click:0,buy:1").unwrap();
        let seq = UserSequence::new(0, "u", vec![ev(1, 0, 1), ev(2, 1, 2), ev(3, 2, 2)]);
        assert!(validate_schema(&schema, &catalog(), &[seq]).is_empty());
    }

    #[test]
    fn out_of_range_behavior_is_reported_once() {
        let schema = BehaviorSchema::ecommerce();
        let seq = UserSequence { user: 0, external_id: "u".into(), interactions: vec![ev(1, 0, 1), ev(2, 7, 2)] };
        let report = validate_schema(&schema, &catalog(), &[seq]);
        assert_eq!(report, vec![Violation::UnknownBehavior { user: "u".into(), position: 1, behavior: 7 }]);
    }

    #[test]
    fn decreasing_timestamps_are_reported() {
        let schema = BehaviorSchema::ecommerce();
        let seq = UserSequence { user: 0, external_id: "u".into(), interactions: vec![ev(1, 0, 5), ev(2, 0, 3)] };
        let report = validate_schema(&schema, &catalog(), &[seq]);
        assert_eq!(report.len(), 1);
        assert!(matches!(report[0], Violation::NonMonotoneTimestamp { position: 1, .. }));
    }

    #[test]
    fn unknown_item_is_reported() {
        let schema = BehaviorSchema::ecommerce();
        let seq = UserSequence::new(0, "u", vec![ev(42, 0, 5)]);
        let report = validate_schema(&schema, &catalog(), &[seq]);
        assert!(matches!(report[0], Violation::UnknownItem { item: 42, .. }));
    }

    #[test]
    fn schema_rejects_duplicates() {
        assert!(BehaviorSchema::parse("a:0,a:1").is_err());
        assert!(BehaviorSchema::parse("a:2").is_err());
    }

    #[test]
    fn default_partitions() {
        let s = BehaviorSchema::ecommerce();
        assert_eq!(s.intensity_bits(), vec![0, 0, 1, 1]);
        assert!(!s.is_degenerate());
        assert_eq!(s.purchase_only().intensity_bits(), vec![0, 0, 0, 1]);
        assert_eq!(BehaviorSchema::insurance(true).intensity_bits(), vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(BehaviorSchema::insurance(false).intensity_bits(), vec![0, 0, 0, 1, 1, 1]);
        assert!(BehaviorSchema::parse("click:0").unwrap().is_degenerate());
        let round = BehaviorSchema::parse(&s.to_spec_string()).unwrap();
        assert_eq!(round, s);
    }

    proptest! {
        #[test]
        fn intensity_is_total(bits in proptest::collection::vec(0u8..2, 1..8)) {
            let spec: Vec<String> = bits.iter().enumerate().map(|(i, b)| format!("b{i}:{b}")).collect();
            let schema = BehaviorSchema::parse(&spec.join(",")).unwrap();
            for (id, &bit) in bits.iter().enumerate() {
                prop_assert_eq!(schema.intensity(id).bit(), bit);
            }
        }

        #[test]
        fn sorting_is_idempotent(ts in proptest::collection::vec(0u64..20, 0..30)) {
            let events = ts.iter().enumerate().map(|(k, &t)| ev(k % 10, 0, t)).collect();
            let mut seq = UserSequence::new(0, "u", events);
            let once = seq.clone();
            seq.sort();
            prop_assert_eq!(seq, once);
        }
    }
}
