//! Synthetic funnel data with a planted cart-to-purchase conversion.
//!
//! Users browse items from a couple of preferred categories. Clicks tend to
//! revisit recently viewed items and carts tend to revisit recently clicked
//! ones. After a cart of item `v`, a purchase of `v` is scheduled with
//! probability `p_convert` somewhere in the next `conversion_window` steps.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;

use crate::schema::{BehaviorSchema, Catalog, Interaction, UserSequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub user_count: usize,
    pub item_count: usize,
    pub category_count: usize,
    pub mean_sequence_length: f64,
    pub p_convert: f64,
    /// Steps after a cart within which the planted purchase lands.
    pub conversion_window: usize,
    /// Seconds.
    pub mean_inter_event_gap: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            user_count: 1000,
            item_count: 500,
            category_count: 20,
            mean_sequence_length: 20.0,
            p_convert: 0.8,
            conversion_window: 3,
            mean_inter_event_gap: 3600.0,
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.user_count == 0 || self.item_count == 0 || self.category_count == 0 {
            return bad("synthetic counts must be at least 1");
        }
        if self.category_count > self.item_count {
            return bad("synthetic category_count cannot exceed item_count");
        }
        if !(0.0..=1.0).contains(&self.p_convert) {
            return bad("p_convert must lie in [0, 1]");
        }
        if self.conversion_window == 0 {
            return bad("conversion_window must be at least 1");
        }
        if self.mean_sequence_length.is_nan() || self.mean_sequence_length < 2.0 {
            return bad("mean_sequence_length must be at least 2");
        }
        if self.mean_inter_event_gap.is_nan() || self.mean_inter_event_gap <= 0.0 {
            return bad("mean_inter_event_gap must be positive");
        }
        Ok(())
    }
}

const VIEW: usize = 0;
const CLICK: usize = 1;
const CART: usize = 2;
const PURCHASE: usize = 3;
const RECENT: usize = 5;
const START_TIME: u64 = 1_600_000_000;

/// Generates a catalog and user sequences under [`BehaviorSchema::ecommerce`].
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Catalog, Vec<UserSequence>)> {
    config.validate()?;
    debug_assert_eq!(BehaviorSchema::ecommerce().id_of("purchase"), Some(PURCHASE));
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let mut category_of: Vec<usize> =
        (0..config.item_count).map(|i| if i < config.category_count { i } else { rng.random_range(0..config.category_count) }).collect();
    // keep ids of a category from clustering at the front
    let n = category_of.len();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        category_of.swap(i, j);
    }
    let catalog = Catalog::new(category_of.clone(), config.category_count)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.category_count];
    for (item, &c) in category_of.iter().enumerate() {
        members[c].push(item);
    }
    let popularity: Vec<WeightedIndex<f64>> =
        members.iter().map(|m| WeightedIndex::new((0..m.len()).map(|k| 1.0 / ((k + 1) as f64).powf(0.8))).expect("non-empty")).collect();

    let gap = Exp::new(1.0 / config.mean_inter_event_gap).expect("positive rate");
    let lo = ((config.mean_sequence_length * 0.5).ceil() as usize).max(2);
    let hi = ((config.mean_sequence_length * 1.5).floor() as usize).max(lo);

    let mut sequences = Vec::with_capacity(config.user_count);
    for u in 0..config.user_count {
        let organic_target = rng.random_range(lo..=hi);
        let first = rng.random_range(0..config.category_count);
        let second =
            if config.category_count > 1 { (first + rng.random_range(1..config.category_count)) % config.category_count } else { first };
        let pick_pref = |rng: &mut ChaCha8Rng| {
            let c = if rng.random::<f64>() < 0.7 { first } else { second };
            members[c][popularity[c].sample(rng)]
        };

        let mut t = START_TIME + rng.random_range(0..30 * 86_400);
        let mut events = Vec::new();
        let mut recent_views: Vec<usize> = Vec::new();
        let mut recent_clicks: Vec<usize> = Vec::new();
        let mut pending: Vec<(usize, usize)> = Vec::new();
        let mut organic = 0;

        while organic < organic_target || !pending.is_empty() {
            let step = events.len();
            let due = pending
                .iter()
                .enumerate()
                .filter(|(_, &(d, _))| d <= step || organic >= organic_target)
                .min_by_key(|(k, &(d, _))| (d, *k))
                .map(|(k, _)| k);
            let (item, behavior) = if let Some(k) = due {
                let (_, item) = pending.remove(k);
                (item, PURCHASE)
            } else {
                organic += 1;
                let r: f64 = rng.random();
                if r < 0.5 {
                    (pick_pref(&mut rng), VIEW)
                } else if r < 0.8 {
                    let item = match recent_views.choose(&mut rng) {
                        Some(&v) if rng.random::<f64>() < 0.6 => v,
                        _ => pick_pref(&mut rng),
                    };
                    (item, CLICK)
                } else if r < 0.95 {
                    let item = match recent_clicks.choose(&mut rng) {
                        Some(&v) if rng.random::<f64>() < 0.7 => v,
                        _ => pick_pref(&mut rng),
                    };
                    if rng.random::<f64>() < config.p_convert {
                        let delay = rng.random_range(1..=config.conversion_window);
                        pending.push((step + delay, item));
                    }
                    (item, CART)
                } else {
                    (pick_pref(&mut rng), PURCHASE)
                }
            };
            match behavior {
                VIEW => push_recent(&mut recent_views, item),
                CLICK => push_recent(&mut recent_clicks, item),
                _ => {}
            }
            if !events.is_empty() {
                t += (gap.sample(&mut rng) as u64).max(1);
            }
            events.push(Interaction { user: u as u32, item, category: category_of[item], behavior, timestamp: t });
        }
        sequences.push(UserSequence { user: u as u32, external_id: format!("u{u}"), interactions: events });
    }
    Ok((catalog, sequences))
}

fn push_recent(buf: &mut Vec<usize>, item: usize) {
    if buf.len() == RECENT {
        buf.remove(0);
    }
    buf.push(item);
}
