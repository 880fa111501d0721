//! The one-round and multi-round federation loops.

use super::adversary::adversary_update;
use super::data::generate_overlapping_data;
use super::model::{
    evaluate, fit_local, mean_gradient, Example, GroundTruth, ModelParams, Pool,
};
use super::{RoundLog, SimError};
use crate::aggregator::{aggregate, NoiseState};
use crate::harness::config::{
    BatchMode, FederationConfig, LearningRate, ParticipationRule, PartyBehavior, TaskMode,
};
use crate::seedmix;
use crate::update::{PartyId, UpdateMatrix};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

/// Local-fit budget for one-round parameter estimation.
const LOCAL_FIT_STEPS: usize = 500;
const LOCAL_FIT_TOL: f64 = 1e-6;

/// Finished run: the aggregated model, per-round logs, and the final test
/// metric.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_model: ModelParams,
    pub rounds: Vec<RoundLog>,
    pub final_metric: f64,
}

/// Mean gradient of the party's local data at `w`, over the full batch or a
/// seeded minibatch.
pub fn genuine_update(
    data: &[Example],
    params: &ModelParams,
    batch: &BatchMode,
    seed: u64,
    party: PartyId,
    round: u64,
) -> Result<DVector<f64>, SimError> {
    if data.is_empty() {
        return Err(SimError::EmptyBatch(party));
    }
    match batch {
        BatchMode::Full => {
            let refs: Vec<&Example> = data.iter().collect();
            Ok(mean_gradient(params, &refs))
        }
        BatchMode::Minibatch { size } => {
            let size = (*size).min(data.len()).max(1);
            let mut rng = seedmix::stream(seed, "batch", party.0 as u64, round);
            let mut indices: Vec<usize> = (0..data.len()).collect();
            indices.shuffle(&mut rng);
            let refs: Vec<&Example> = indices[..size].iter().map(|&i| &data[i]).collect();
            Ok(mean_gradient(params, &refs))
        }
    }
}

/// Everything derived from the config and seed before any round runs.
struct Federation {
    truth: GroundTruth,
    test: Vec<Example>,
    /// Genuine parties' materialized local datasets.
    datasets: BTreeMap<PartyId, Vec<Example>>,
    all_ids: Vec<PartyId>,
}

fn setup(cfg: &FederationConfig, seed: u64) -> Result<Federation, SimError> {
    let model = &cfg.task.model;
    let truth = GroundTruth::generate(model, seed);
    let pool = Pool::generate(model, &truth, cfg.data.pool_size, seed);
    let test_pool = Pool::generate(model, &truth, cfg.data.test_size, seedmix::mix(seed, "test", 0, 0));
    let test = test_pool.test_view(model, &truth);

    let genuine_sizes: Vec<(PartyId, usize)> = cfg
        .parties
        .iter()
        .filter_map(|p| match p.behavior {
            PartyBehavior::Genuine { sample_size } => Some((p.id, sample_size)),
            _ => None,
        })
        .collect();
    let assignment =
        generate_overlapping_data(cfg.data.pool_size, &genuine_sizes, &cfg.data.overlap, seed)?;

    // Examples held by more than one party form the common block; their
    // labels are shared verbatim across holders.
    let mut seen = std::collections::BTreeSet::new();
    let mut shared = std::collections::BTreeSet::new();
    for indices in assignment.values() {
        for &e in indices {
            if !seen.insert(e) {
                shared.insert(e);
            }
        }
    }

    let (lo, hi) = cfg.data.noise_level_range;
    let mut datasets = BTreeMap::new();
    for p in &cfg.parties {
        if let PartyBehavior::Genuine { .. } = p.behavior {
            let level = p.noise_level.unwrap_or_else(|| {
                let mut rng = seedmix::stream(seed, "noise-level", p.id.0 as u64, 0);
                (rng.random::<f64>() * (hi.ln() - lo.ln()) + lo.ln()).exp()
            });
            let view =
                pool.party_view(model, &truth, &assignment[&p.id], &shared, level, seed, p.id);
            datasets.insert(p.id, view);
        }
    }

    let mut all_ids: Vec<PartyId> = cfg.parties.iter().map(|p| p.id).collect();
    all_ids.sort();
    Ok(Federation {
        truth,
        test,
        datasets,
        all_ids,
    })
}

/// Participants of one round under the participation rule, in id order.
fn sample_participants(
    rule: &ParticipationRule,
    all_ids: &[PartyId],
    seed: u64,
    round: u64,
) -> Vec<PartyId> {
    match rule {
        ParticipationRule::Full => all_ids.to_vec(),
        ParticipationRule::RandomSubset { k } => {
            let mut rng = seedmix::stream(seed, "participation", round, 0);
            let mut pool: Vec<PartyId> = all_ids.to_vec();
            pool.shuffle(&mut rng);
            let mut chosen: Vec<PartyId> = pool[..(*k).min(all_ids.len())].to_vec();
            chosen.sort();
            chosen
        }
    }
}

fn eta_at(schedule: &LearningRate, round: usize) -> f64 {
    match schedule {
        LearningRate::Constant { eta } => *eta,
        LearningRate::InvT { eta } => eta / (1.0 + round as f64),
    }
}

/// One-round parameter estimation: each genuine party fits its local model
/// to convergence, adversaries emit matching-length noise, and the chosen
/// aggregator combines the parameter vectors once.
pub fn run_one_round_estimation(cfg: &FederationConfig, seed: u64) -> Result<RunOutput, SimError> {
    let fed = setup(cfg, seed)?;
    let model = &cfg.task.model;
    let k = ModelParams::flat_dim(model);
    let eta = eta_at(&cfg.task.learning_rate, 0);

    let participants = sample_participants(&cfg.participation, &fed.all_ids, seed, 0);
    let mut columns = Vec::with_capacity(participants.len());
    let mut diverged = Vec::new();
    for &id in &participants {
        let spec = cfg.parties.iter().find(|p| p.id == id).expect("known id");
        let column = match &spec.behavior {
            PartyBehavior::Genuine { .. } => {
                let data = &fed.datasets[&id];
                let (fitted, ok) = fit_local(model, data, LOCAL_FIT_STEPS, eta, LOCAL_FIT_TOL)?;
                if !ok {
                    diverged.push(id);
                }
                fitted.to_flat()
            }
            behavior => adversary_update(behavior, k, seed, id, 0, model, &fed.truth),
        };
        columns.push(column);
    }

    let x = UpdateMatrix::from_columns(0, participants.clone(), &columns)
        .map_err(|source| SimError::Aggregation { round: 0, source })?;
    let mut state = NoiseState::for_kind(
        &cfg.aggregator,
        cfg.run.state_window,
        seedmix::mix(seed, "agg-init", 0, 0),
    );
    let result = aggregate(&cfg.aggregator, &x, &mut state)
        .map_err(|source| SimError::Aggregation { round: 0, source })?;

    let final_model = ModelParams::from_flat(model, &result.consensus);
    if !final_model.is_finite() {
        return Err(SimError::NonFiniteModel { round: 0 });
    }
    let metric = evaluate(&final_model, &fed.test);
    let log = RoundLog {
        round: 0,
        update_norms: participants
            .iter()
            .zip(&columns)
            .map(|(&p, c)| (p, c.norm()))
            .collect(),
        weights: result
            .weights
            .map(|w| participants.iter().copied().zip(w).collect())
            .unwrap_or_default(),
        metric,
        wallclock_ms: 0,
        diverged,
    };
    Ok(RunOutput {
        final_model,
        rounds: vec![log],
        final_metric: metric,
    })
}

/// Multi-round distributed SGD: per round, sample participants, gather
/// genuine gradients and adversary vectors, aggregate with the carried
/// noise state, and step the global model.
pub fn run_multi_round_sgd(cfg: &FederationConfig, seed: u64) -> Result<RunOutput, SimError> {
    let fed = setup(cfg, seed)?;
    let model = &cfg.task.model;
    let k = ModelParams::flat_dim(model);

    let mut params = ModelParams::zeros(model);
    let mut flat = params.to_flat();
    let mut state = NoiseState::for_kind(
        &cfg.aggregator,
        cfg.run.state_window,
        seedmix::mix(seed, "agg-init", 0, 0),
    );
    let mut rounds = Vec::with_capacity(cfg.task.rounds);
    let mut metric = f64::NAN;

    for round in 0..cfg.task.rounds {
        let participants = sample_participants(&cfg.participation, &fed.all_ids, seed, round as u64);
        let mut columns = Vec::with_capacity(participants.len());
        for &id in &participants {
            let spec = cfg.parties.iter().find(|p| p.id == id).expect("known id");
            let column = match &spec.behavior {
                PartyBehavior::Genuine { .. } => genuine_update(
                    &fed.datasets[&id],
                    &params,
                    &cfg.task.batch,
                    seed,
                    id,
                    round as u64,
                )?,
                behavior => {
                    adversary_update(behavior, k, seed, id, round as u64, model, &fed.truth)
                }
            };
            columns.push(column);
        }

        let x = UpdateMatrix::from_columns(round as u64, participants.clone(), &columns)
            .map_err(|source| SimError::Aggregation { round, source })?;
        if cfg.run.reset_state_each_round {
            state = NoiseState::for_kind(
                &cfg.aggregator,
                cfg.run.state_window,
                seedmix::mix(seed, "agg-init", 0, 0),
            );
        }
        let result = aggregate(&cfg.aggregator, &x, &mut state)
            .map_err(|source| SimError::Aggregation { round, source })?;

        let eta = eta_at(&cfg.task.learning_rate, round);
        flat -= result.consensus * eta;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteModel { round });
        }
        params = ModelParams::from_flat(model, &flat);
        metric = evaluate(&params, &fed.test);
        rounds.push(RoundLog {
            round,
            update_norms: participants
                .iter()
                .zip(&columns)
                .map(|(&p, c)| (p, c.norm()))
                .collect(),
            weights: result
                .weights
                .map(|w| participants.iter().copied().zip(w).collect())
                .unwrap_or_default(),
            metric,
            wallclock_ms: 0,
            diverged: Vec::new(),
        });
    }

    Ok(RunOutput {
        final_model: params,
        rounds,
        final_metric: metric,
    })
}

/// Dispatch on the configured task mode.
pub fn run(cfg: &FederationConfig, seed: u64) -> Result<RunOutput, SimError> {
    match cfg.task.mode {
        TaskMode::MultiRoundSgd => run_multi_round_sgd(cfg, seed),
        TaskMode::OneRound => run_one_round_estimation(cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::AggregatorKind;
    use crate::harness::config::{
        DataConfig, FederationConfig, OverlapDesign, PartySpec, RunConfig, TaskModel, TaskSpec,
    };
    use approx::assert_relative_eq;

    fn base_linear_config(parties: Vec<PartySpec>, aggregator: AggregatorKind) -> FederationConfig {
        FederationConfig {
            task: TaskSpec {
                model: TaskModel::LinearRegression {
                    dim: 5,
                    label_noise: 0.5,
                    feature_scale: 1.0,
                },
                batch: BatchMode::Full,
                rounds: 30,
                learning_rate: LearningRate::Constant { eta: 0.1 },
                mode: TaskMode::MultiRoundSgd,
            },
            data: DataConfig {
                pool_size: 400,
                test_size: 200,
                overlap: OverlapDesign::Disjoint,
                noise_level_range: (1.0, 1.0),
            },
            parties,
            participation: ParticipationRule::Full,
            aggregator,
            run: RunConfig {
                seeds: vec![1],
                out_dir: None,
                state_window: 10,
                reset_state_each_round: false,
            },
        }
    }

    fn genuine(id: u32, sample_size: usize) -> PartySpec {
        PartySpec {
            id: PartyId(id),
            behavior: PartyBehavior::Genuine { sample_size },
            noise_level: None,
        }
    }

    #[test]
    fn federation_of_one_matches_centralized_sgd() {
        let cfg = base_linear_config(
            vec![genuine(0, 50)],
            AggregatorKind::UniformAvg {
                sample_weights: None,
            },
        );
        let out = run_multi_round_sgd(&cfg, 7).unwrap();

        // Centralized SGD on the same data stream.
        let fed = setup(&cfg, 7).unwrap();
        let data = &fed.datasets[&PartyId(0)];
        let refs: Vec<&Example> = data.iter().collect();
        let mut flat = DVector::zeros(5);
        for _ in 0..30 {
            let params = ModelParams::from_flat(&cfg.task.model, &flat);
            let grad = mean_gradient(&params, &refs);
            flat -= grad * 0.1;
        }
        let ModelParams::Linear(w) = out.final_model else {
            panic!()
        };
        assert_relative_eq!((w - flat).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_data_makes_all_aggregators_agree() {
        // All parties share the same local data (full overlap), so every
        // aggregator sees identical columns and must produce the same
        // trajectory.
        let parties: Vec<PartySpec> = (0..3).map(|i| genuine(i, 60)).collect();
        let kinds = [
            AggregatorKind::UniformAvg {
                sample_weights: None,
            },
            AggregatorKind::CoordMedian,
            AggregatorKind::from_name("geom_median").unwrap(),
            AggregatorKind::from_name("ivar_mle").unwrap(),
            AggregatorKind::from_name("icov_vb").unwrap(),
        ];
        let mut finals = Vec::new();
        for kind in kinds {
            let mut cfg = base_linear_config(parties.clone(), kind);
            cfg.data.overlap = OverlapDesign::SharedBlock { shared: 60 };
            cfg.task.rounds = 10;
            // Identical noise level so the shared examples carry the same
            // labels for every party.
            for p in &mut cfg.parties {
                p.noise_level = Some(1.0);
            }
            let out = run_multi_round_sgd(&cfg, 3).unwrap();
            finals.push(out.final_model.to_flat());
        }
        for w in &finals[1..] {
            assert_relative_eq!((w - &finals[0]).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn participation_subset_is_exact_and_uniform() {
        let all: Vec<PartyId> = (0..10).map(PartyId).collect();
        let rule = ParticipationRule::RandomSubset { k: 3 };
        let mut counts = BTreeMap::new();
        let rounds = 1000u64;
        for r in 0..rounds {
            let chosen = sample_participants(&rule, &all, 99, r);
            assert_eq!(chosen.len(), 3);
            let distinct: std::collections::BTreeSet<_> = chosen.iter().collect();
            assert_eq!(distinct.len(), 3);
            for p in chosen {
                *counts.entry(p).or_insert(0usize) += 1;
            }
        }
        // Empirical frequency k/J = 0.3 within 5 percentage points.
        for (_, c) in counts {
            let freq = c as f64 / rounds as f64;
            assert!((freq - 0.3).abs() < 0.05, "frequency {freq}");
        }
    }

    #[test]
    fn one_round_identical_data_matches_single_fit() {
        let parties: Vec<PartySpec> = (0..3).map(|i| genuine(i, 60)).collect();
        for name in ["uniform_avg", "coord_median", "ivar_mle"] {
            let mut cfg =
                base_linear_config(parties.clone(), AggregatorKind::from_name(name).unwrap());
            cfg.task.mode = TaskMode::OneRound;
            cfg.data.overlap = OverlapDesign::SharedBlock { shared: 60 };
            for p in &mut cfg.parties {
                p.noise_level = Some(1.0);
            }
            let out = run_one_round_estimation(&cfg, 11).unwrap();

            let fed = setup(&cfg, 11).unwrap();
            let (single, _) = fit_local(
                &cfg.task.model,
                &fed.datasets[&PartyId(0)],
                LOCAL_FIT_STEPS,
                0.1,
                LOCAL_FIT_TOL,
            )
            .unwrap();
            let gap = (out.final_model.to_flat() - single.to_flat()).norm();
            assert!(gap < 1e-9, "{name}: aggregated fit differs by {gap}");
        }
    }

    #[test]
    fn adversary_dominated_mean_underperforms_clean_mean() {
        let model = TaskModel::LogisticRegression {
            dim: 8,
            classes: 2,
            class_spread: 1.5,
            label_flip_rate: 0.02,
        };
        let mut clean_parties: Vec<PartySpec> = (0..5).map(|i| genuine(i, 80)).collect();
        let mut cfg = base_linear_config(
            clean_parties.clone(),
            AggregatorKind::UniformAvg {
                sample_weights: None,
            },
        );
        cfg.task.model = model.clone();
        cfg.task.mode = TaskMode::OneRound;
        cfg.task.learning_rate = LearningRate::Constant { eta: 0.5 };
        cfg.data.pool_size = 500;
        let clean = run_one_round_estimation(&cfg, 21).unwrap();

        for i in 5..15 {
            clean_parties.push(PartySpec {
                id: PartyId(i),
                behavior: PartyBehavior::GaussianAdversary { scale: 1.0 },
                noise_level: None,
            });
        }
        let mut noisy_cfg = cfg.clone();
        noisy_cfg.parties = clean_parties;
        let noisy = run_one_round_estimation(&noisy_cfg, 21).unwrap();
        assert!(
            noisy.final_metric < clean.final_metric,
            "noisy {} vs clean {}",
            noisy.final_metric,
            clean.final_metric
        );
    }

    #[test]
    fn non_finite_abort_carries_round_index() {
        let mut cfg = base_linear_config(
            vec![genuine(0, 40)],
            AggregatorKind::UniformAvg {
                sample_weights: None,
            },
        );
        // A wildly unstable step size makes full-batch gradient descent
        // diverge to infinity.
        cfg.task.learning_rate = LearningRate::Constant { eta: 1e6 };
        cfg.task.rounds = 400;
        match run_multi_round_sgd(&cfg, 5) {
            Err(SimError::NonFiniteModel { .. }) => {}
            other => panic!("expected NonFiniteModel, got {other:?}"),
        }
    }
}
