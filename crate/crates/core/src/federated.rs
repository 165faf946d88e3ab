//! Rounds of local training, increment upload and averaged aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hashing::IndexMaps;
use crate::model::{forward_loss_grad, Batch, ModelSpec};
use crate::optim::OptState;
use crate::params::{RealParams, RoundIncrement};
use crate::rng::{mix_seed, Xoshiro256StarStar};
use crate::schema::ParameterSchema;
use crate::transport::wire;

const CLIENT_STREAM: u64 = 0xc11e;

/// Data-order seed of client `client_id` under `master_seed`.
pub fn client_data_seed(master_seed: u64, client_id: u64) -> u64 {
    mix_seed(master_seed, &[CLIENT_STREAM, client_id])
}

/// Everything a participant owns. Never shared between clients.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u64,
    pub params: RealParams,
    pub data: Batch,
    pub optimizer: OptState<f32>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub data_seed: u64,
    /// Mean minibatch loss of the most recent round.
    pub last_loss: f64,
}

/// The model contract every participant agrees on.
#[derive(Debug, Clone)]
pub struct SharedModel {
    pub spec: ModelSpec,
    pub schema: ParameterSchema,
    pub maps: IndexMaps,
}

impl SharedModel {
    pub fn new(spec: ModelSpec, schema: ParameterSchema) -> Self {
        let maps = IndexMaps::for_schema(&schema);
        Self { spec, schema, maps }
    }
}

/// Runs `epochs` passes over `data` starting at `params`. The example order
/// of epoch `e` in round `t` is a Fisher-Yates permutation seeded with
/// `mix_seed(data_seed, [t, e])`; each epoch takes `ceil(n / batch_size)`
/// steps, the last one possibly partial. Returns the mean step loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    model: &SharedModel,
    params: &mut RealParams,
    optimizer: &mut OptState<f32>,
    data: &Batch,
    batch_size: usize,
    epochs: usize,
    data_seed: u64,
    round: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("client dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for epoch in 0..epochs {
        let mut rng = Xoshiro256StarStar::seed_from_u64(mix_seed(data_seed, &[round, epoch as u64]));
        let order = rng.permutation(data.len());
        for chunk in order.chunks(batch_size) {
            let batch = data.select(chunk);
            let lg = forward_loss_grad(&model.spec, params, &model.maps, &batch)?;
            optimizer.step(params, &lg.grad, round)?;
            loss_sum += lg.loss;
            steps += 1;
        }
    }
    Ok(if steps == 0 { 0.0 } else { loss_sum / steps as f64 })
}

/// One client's round: overwrite local params with the global ones, train
/// for the configured epochs, and report `local - global`.
pub fn local_train(
    model: &SharedModel,
    client: &mut ClientState,
    global: &RealParams,
    round: u64,
) -> Result<RoundIncrement> {
    if global.digest() != model.schema.digest() {
        return Err(Error::IncompatibleParameters {
            expected: model.schema.digest(),
            actual: global.digest(),
        });
    }
    client.params = global.clone();
    client.last_loss = train_epochs(
        model,
        &mut client.params,
        &mut client.optimizer,
        &client.data,
        client.batch_size,
        client.local_epochs,
        client.data_seed,
        round,
    )?;
    Ok(RoundIncrement {
        round,
        client_id: client.client_id,
        deltas: client.params.difference(global)?,
    })
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: u64,
    pub params: RealParams,
    pub schema: ParameterSchema,
    pub cumulative_uploaded_bytes: u64,
}

impl GlobalState {
    pub fn new(schema: ParameterSchema, params: RealParams) -> Result<Self> {
        params.ensure_compatible(schema.digest())?;
        Ok(Self {
            round: 0,
            params,
            schema,
            cumulative_uploaded_bytes: 0,
        })
    }
}

/// Elementwise unweighted mean of the increments, summed in the given order
/// with 64-bit accumulators and rounded once to `f32`.
pub fn mean_increment(schema: &ParameterSchema, increments: &[&RoundIncrement]) -> Result<RealParams> {
    if increments.is_empty() {
        return Err(Error::Config("no increments to average".into()));
    }
    let c = increments.len() as f64;
    let layers = schema
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut acc = vec![0.0f64; layer.real_size];
            for inc in increments {
                for (a, &d) in acc.iter_mut().zip(&inc.deltas.layers()[l]) {
                    *a += d as f64;
                }
            }
            acc.into_iter().map(|a| (a / c) as f32).collect()
        })
        .collect();
    RealParams::from_layers(schema, layers)
}

/// Validates one complete round of increments (one per client
/// `0..num_clients`), averages them in ascending client-id order and applies
/// the mean to the global parameters.
pub fn aggregate(state: &mut GlobalState, increments: Vec<RoundIncrement>, num_clients: usize) -> Result<()> {
    let digest = state.schema.digest();
    let mut by_client = BTreeMap::new();
    for inc in increments {
        if inc.schema_digest() != digest {
            return Err(Error::RejectedIncrement {
                client_id: inc.client_id,
                expected: digest,
                actual: inc.schema_digest(),
            });
        }
        if inc.round != state.round {
            return Err(Error::StaleIncrement {
                client_id: inc.client_id,
                expected: state.round,
                got: inc.round,
            });
        }
        if inc.client_id >= num_clients as u64 {
            return Err(Error::Protocol(format!("unknown client id {}", inc.client_id)));
        }
        let id = inc.client_id;
        if by_client.insert(id, inc).is_some() {
            return Err(Error::DuplicateIncrement(id));
        }
    }
    let missing: Vec<u64> = (0..num_clients as u64).filter(|i| !by_client.contains_key(i)).collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteRound {
            round: state.round,
            missing,
        });
    }
    let ordered: Vec<&RoundIncrement> = by_client.values().collect();
    let mean = mean_increment(&state.schema, &ordered)?;
    state.params.add(&mean)?;
    let uploaded: usize = ordered
        .iter()
        .map(|inc| wire::encoded_len_for(inc.deltas.layers().iter().map(Vec::len)))
        .sum();
    state.cumulative_uploaded_bytes += uploaded as u64;
    state.round += 1;
    Ok(())
}

/// Centralized counterpart of a federated round: train on all data for
/// `epochs`, then commit `start + (trained - start)` through the same
/// increment arithmetic a one-client aggregation applies.
#[allow(clippy::too_many_arguments)]
pub fn centralized_round(
    model: &SharedModel,
    params: &mut RealParams,
    optimizer: &mut OptState<f32>,
    data: &Batch,
    batch_size: usize,
    epochs: usize,
    data_seed: u64,
    round: u64,
) -> Result<f64> {
    let mut local = params.clone();
    let loss = train_epochs(model, &mut local, optimizer, data, batch_size, epochs, data_seed, round)?;
    let inc = RoundIncrement {
        round,
        client_id: 0,
        deltas: local.difference(params)?,
    };
    let mean = mean_increment(&model.schema, &[&inc])?;
    params.add(&mean)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::optim::OptimizerConfig;
    use crate::schema::{build_schema, Gamma, LayerSpec};

    fn one_param_state() -> GlobalState {
        let s = build_schema(&[LayerSpec::new("b", &[1], true)], Gamma::ONE, 0).unwrap();
        let p = RealParams::from_layers(&s, vec![vec![1.0]]).unwrap();
        GlobalState::new(s, p).unwrap()
    }

    fn inc(state: &GlobalState, client: u64, v: f32) -> RoundIncrement {
        RoundIncrement {
            round: state.round,
            client_id: client,
            deltas: RealParams::from_layers(&state.schema, vec![vec![v]]).unwrap(),
        }
    }

    #[test]
    fn two_client_average() {
        let mut st = one_param_state();
        let incs = vec![inc(&st, 1, 4.0), inc(&st, 0, 2.0)];
        aggregate(&mut st, incs, 2).unwrap();
        assert_eq!(st.params.layers()[0], vec![4.0]);
        assert_eq!(st.round, 1);
        assert_eq!(st.cumulative_uploaded_bytes, 2 * (40 + 8 + 4));
    }

    #[test]
    fn zero_increments_leave_params_bitwise() {
        let mut st = one_param_state();
        let before = st.params.clone();
        let incs = vec![inc(&st, 0, 0.0), inc(&st, 1, 0.0), inc(&st, 2, 0.0)];
        aggregate(&mut st, incs, 3).unwrap();
        assert!(st.params.bitwise_eq(&before));
    }

    #[test]
    fn aggregation_errors() {
        let mut st = one_param_state();
        let incs = vec![inc(&st, 0, 1.0)];
        let err = aggregate(&mut st, incs, 2).unwrap_err();
        assert!(matches!(err, Error::IncompleteRound { ref missing, .. } if missing == &vec![1]));

        let mut stale = inc(&st, 0, 1.0);
        stale.round = 7;
        assert!(matches!(
            aggregate(&mut st, vec![stale], 1),
            Err(Error::StaleIncrement { client_id: 0, .. })
        ));

        let other = build_schema(&[LayerSpec::new("b", &[1], true)], Gamma::ONE, 1).unwrap();
        let foreign = RoundIncrement {
            round: 0,
            client_id: 1,
            deltas: RealParams::from_layers(&other, vec![vec![1.0]]).unwrap(),
        };
        let incs = vec![inc(&st, 0, 1.0), foreign];
        assert!(matches!(
            aggregate(&mut st, incs, 2),
            Err(Error::RejectedIncrement { client_id: 1, .. })
        ));

        let incs = vec![inc(&st, 0, 1.0), inc(&st, 0, 2.0)];
        assert!(matches!(aggregate(&mut st, incs, 2), Err(Error::DuplicateIncrement(0))));
        assert_eq!(st.round, 0);
        assert_eq!(st.params.layers()[0], vec![1.0]);
    }

    #[test]
    fn zero_learning_rate_gives_zero_increment() {
        let spec = ModelSpec::linear(4, 3);
        let schema = build_schema(&spec.layer_specs(), Gamma::new(1, 2).unwrap(), 3).unwrap();
        let model = SharedModel::new(spec, schema.clone());
        let global = init_params(&schema, 3);
        let data = Batch::new(4, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], vec![0, 2]).unwrap();
        let mut client = ClientState {
            client_id: 0,
            params: RealParams::zeros(&schema),
            data,
            optimizer: OptState::new(OptimizerConfig::sgd(0.0), &schema),
            local_epochs: 3,
            batch_size: 1,
            data_seed: 5,
            last_loss: 0.0,
        };
        let inc = local_train(&model, &mut client, &global, 0).unwrap();
        assert!(inc.deltas.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let spec = ModelSpec::linear(4, 3);
        let schema = build_schema(&spec.layer_specs(), Gamma::ONE, 3).unwrap();
        let model = SharedModel::new(spec, schema.clone());
        let mut params = RealParams::zeros(&schema);
        let mut opt = OptState::new(OptimizerConfig::sgd(0.1), &schema);
        let empty = Batch {
            input_dim: 4,
            features: vec![],
            labels: vec![],
        };
        let err = train_epochs(&model, &mut params, &mut opt, &empty, 4, 1, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
