//! Adversarial party updates: pure Gaussian noise vectors and random local
//! updates (a real gradient computed at a random parameter point).

use super::model::{mean_gradient, Example, GroundTruth, ModelParams, Pool};
use crate::harness::config::{PartyBehavior, TaskModel};
use crate::seedmix;
use crate::update::PartyId;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Batch size used by the random-update adversary's gradient draw.
const RANDOM_UPDATE_BATCH: usize = 32;

/// Produce an adversarial update of dimension `k` for the given round.
/// Draws come from the (seed, party, round) stream, so a replay is
/// bit-identical and independent of any other stream.
///
/// Gaussian adversaries submit scale * N(0, I); random-update adversaries
/// compute the task gradient at a uniform random parameter point over a
/// fresh batch from the data distribution, scaled.
pub fn adversary_update(
    behavior: &PartyBehavior,
    k: usize,
    seed: u64,
    party: PartyId,
    round: u64,
    model: &TaskModel,
    truth: &GroundTruth,
) -> DVector<f64> {
    let mut rng = seedmix::stream(seed, "adversary", party.0 as u64, round);
    match behavior {
        PartyBehavior::Genuine { .. } => {
            unreachable!("genuine parties do not produce adversarial updates")
        }
        PartyBehavior::GaussianAdversary { scale } => DVector::from_fn(k, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        }),
        PartyBehavior::RandomUpdateAdversary { scale } => {
            let flat = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let params = ModelParams::from_flat(model, &flat);
            let batch_seed = rng.random::<u64>();
            let pool = Pool::generate(model, truth, RANDOM_UPDATE_BATCH, batch_seed);
            let batch: Vec<Example> = pool.test_view(model, truth);
            let refs: Vec<&Example> = batch.iter().collect();
            mean_gradient(&params, &refs) * *scale
        }
    }
}
