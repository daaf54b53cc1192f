//! Finite-difference check of the whole model on a tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::Batch;
use crate::model::{Model, ModelConfig, NegativeSampler, Vocab};
use crate::numerics::init::named_rng;
use crate::numerics::{grad_check, sample_coordinates, ParameterStore, Tensor};
use crate::schema::{BehaviorSchema, Interaction, UserSequence};
use crate::Result;

/// `L = 8, d = 16`, two heads, one layer, both biases on.
pub fn tiny_config() -> ModelConfig {
    ModelConfig { d: 16, heads: 2, layers: 1, max_len: 8, init_std: 0.3, ..ModelConfig::default() }
}

pub fn tiny_vocab() -> Vocab {
    Vocab { items: 20, behaviors: 4, categories: 4 }
}

/// Random sequences over `vocab`, lengths 2..=`max_len` + 2 (so some are truncated).
pub fn random_sequences(vocab: Vocab, count: usize, max_len: usize, rng: &mut impl Rng) -> Vec<UserSequence> {
    (0..count)
        .map(|u| {
            let n = rng.random_range(2..=max_len + 2);
            let mut t = 0u64;
            let events = (0..n)
                .map(|_| {
                    t += rng.random_range(0..200_000);
                    let item = rng.random_range(0..vocab.items);
                    Interaction {
                        user: u as u32,
                        item,
                        category: item % vocab.categories,
                        behavior: rng.random_range(0..vocab.behaviors),
                        timestamp: t,
                    }
                })
                .collect();
            UserSequence::new(u as u32, format!("u{u}"), events)
        })
        .collect()
}

/// Moves every parameter off its initial value so that zero-initialized gates
/// and tables carry gradient.
pub fn jitter(store: &mut ParameterStore<f64>, std: f64, rng: &mut impl Rng) {
    let noise = Normal::new(0.0, std).expect("valid std");
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed");
        for x in t.data_mut() {
            *x += noise.sample(rng);
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub parameters: usize,
}

/// Five-point finite differences against the tape on the tiny model in 64-bit.
pub fn grad_check_tiny(seed: u64, coordinates: usize, step: f64) -> Result<GradCheckReport> {
    let schema = BehaviorSchema::ecommerce();
    let mut model = Model::<f64>::new(tiny_config(), tiny_vocab(), &schema, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter(&mut model.params, 0.2, &mut rng);
    for l in 0..model.config.layers {
        model.params.insert(format!("layer{l}.integrate.beta"), Tensor::scalar(0.8));
        model.params.insert(format!("layer{l}.integrate.gamma"), Tensor::scalar(0.6));
    }
    let seqs = random_sequences(model.vocab, 3, model.config.max_len, &mut rng);
    let refs: Vec<&UserSequence> = seqs.iter().collect();
    let batch = Batch::from_sequences(&refs, model.config.max_len);
    let candidates = NegativeSampler::new(named_rng(seed, "gradcheck.negatives"), 6).for_batch(&batch, model.vocab.items)?;

    let mut store = model.params.clone();
    let coords = sample_coordinates(&store, coordinates, &mut rng);
    let f = |s: &ParameterStore<f64>| {
        let (loss, grads) = model.loss_and_grads(s, &batch, candidates.clone(), None);
        (loss, grads)
    };
    let err = grad_check(&mut store, f, &coords, step)?;
    Ok(GradCheckReport { max_relative_error: err, coordinates: coords.len(), parameters: store.len() })
}
