//! Self-checks runnable from the command line (`hashfed verify`).
//!
//! Each check compares the engine against an independent route: central
//! finite differences for gradients, an explicit indicator double loop for
//! the scatter, a centralized run for the one-client federation, and so on.

use std::time::Instant;

use crate::error::Result;
use crate::experiment::{self, RunConfig};
use crate::federated::mean_increment;
use crate::hashing::{expand, make_index_map, scatter_grad, IndexMaps};
use crate::model::{forward_loss_grad, init_params, Batch, ModelSpec};
use crate::params::{Params, RealParams, RoundIncrement};
use crate::rng::Xoshiro256StarStar;
use crate::schema::{build_schema, Gamma};
use crate::transport::wire::{params_message_len, WireMessage};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

fn outcome(name: &'static str, start: Instant, r: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        secs: start.elapsed().as_secs_f64(),
    }
}

pub fn gammas() -> [Gamma; 4] {
    [
        Gamma::ONE,
        Gamma::new(1, 2).unwrap(),
        Gamma::new(1, 4).unwrap(),
        Gamma::new(1, 8).unwrap(),
    ]
}

fn random_batch(rng: &mut Xoshiro256StarStar, n: usize, dim: usize, classes: usize) -> Batch {
    let features = (0..n * dim).map(|_| rng.next_f64() as f32).collect();
    let labels = (0..n).map(|_| rng.below(classes as u64) as u32).collect();
    Batch::new(dim, features, labels).unwrap()
}

/// Max relative error between analytic and central-difference gradients
/// over every real coordinate, 64-bit arithmetic, step `h`.
pub fn gradient_error(spec: &ModelSpec, gamma: Gamma, seed: u64, h: f64) -> Result<f64> {
    let schema = build_schema(&spec.layer_specs(), gamma, seed)?;
    let maps = IndexMaps::for_schema(&schema);
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ 0x9e7);
    let batch = random_batch(&mut rng, 4, spec.input_dim, spec.num_classes);
    let mut params: Params<f64> = init_params(&schema, seed).cast();
    for layer in params.layers_mut() {
        for x in layer.iter_mut() {
            *x += (rng.next_f64() - 0.5) * 0.2;
        }
    }
    let analytic = forward_loss_grad(spec, &params, &maps, &batch)?.grad;
    let mut worst = 0.0f64;
    for l in 0..params.layers().len() {
        for k in 0..params.layers()[l].len() {
            let orig = params.layers()[l][k];
            params.layers_mut()[l][k] = orig + h;
            let up = forward_loss_grad(spec, &params, &maps, &batch)?.loss;
            params.layers_mut()[l][k] = orig - h;
            let down = forward_loss_grad(spec, &params, &maps, &batch)?.loss;
            params.layers_mut()[l][k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.layers()[l][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub fn check_gradients() -> CheckOutcome {
    let start = Instant::now();
    let r = (|| {
        let mut worst = 0.0f64;
        for spec in [ModelSpec::linear(6, 4), ModelSpec::mlp(6, 5, 4)] {
            for gamma in gammas() {
                for seed in 0..10 {
                    worst = worst.max(gradient_error(&spec, gamma, seed, 1e-5)?);
                }
            }
        }
        Ok((worst <= 1e-4, format!("max relative error {worst:.2e}")))
    })();
    outcome("gradient-vs-finite-differences", start, r)
}

pub fn check_scatter_brute_force() -> CheckOutcome {
    let start = Instant::now();
    let mut rng = Xoshiro256StarStar::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..100 {
        let t = 1 + rng.below(256) as usize;
        let gamma = gammas()[rng.below(4) as usize];
        let map = make_index_map(t, gamma, rng.next_u64());
        let g: Vec<f64> = (0..t).map(|_| rng.next_f64() - 0.5).collect();
        let fast = scatter_grad(&g, &map).unwrap();
        let slow: Vec<f64> = (0..map.real_size())
            .map(|k| {
                let mut acc = 0.0f64;
                for (p, &gp) in g.iter().enumerate() {
                    if map.indices()[p] as usize == k {
                        acc += gp;
                    }
                }
                acc
            })
            .collect();
        if fast.iter().zip(&slow).any(|(a, b)| a.to_bits() != b.to_bits()) {
            failures += 1;
        }
    }
    outcome(
        "scatter-vs-indicator-loop",
        start,
        Ok((failures == 0, format!("{failures}/100 mismatches"))),
    )
}

pub fn check_commutation() -> CheckOutcome {
    let start = Instant::now();
    let mut rng = Xoshiro256StarStar::seed_from_u64(4);
    let mut failures = 0;
    for case in 0..100u64 {
        let spec = ModelSpec::mlp(
            1 + rng.below(12) as usize,
            1 + rng.below(8) as usize,
            2 + rng.below(5) as usize,
        );
        let gamma = gammas()[rng.below(4) as usize];
        let schema = build_schema(&spec.layer_specs(), gamma, case).unwrap();
        let maps = IndexMaps::for_schema(&schema);
        let c = 1 + rng.below(6);
        let incs: Vec<RoundIncrement> = (0..c)
            .map(|i| {
                let mut d = RealParams::zeros(&schema);
                d.layers_mut()
                    .iter_mut()
                    .flatten()
                    .for_each(|x| *x = (rng.next_f64() - 0.5) as f32);
                RoundIncrement {
                    round: 0,
                    client_id: i,
                    deltas: d,
                }
            })
            .collect();
        let refs: Vec<&RoundIncrement> = incs.iter().collect();
        let mean = mean_increment(&schema, &refs).unwrap();
        let lhs = maps.expand_all(&mean).unwrap();
        let views: Vec<Vec<Vec<f32>>> = incs.iter().map(|i| maps.expand_all(&i.deltas).unwrap()).collect();
        let ok = lhs.iter().enumerate().all(|(l, layer)| {
            layer.iter().enumerate().all(|(p, &v)| {
                let acc: f64 = views.iter().map(|view| view[l][p] as f64).sum();
                ((acc / c as f64) as f32).to_bits() == v.to_bits()
            })
        });
        failures += (!ok) as usize;
    }
    outcome(
        "aggregate-commutes-with-expand",
        start,
        Ok((failures == 0, format!("{failures}/100 mismatches"))),
    )
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig {
        rounds: 3,
        clients: 1,
        local_epochs: 2,
        batch_size: 32,
        gamma: Gamma::new(1, 4).unwrap(),
        ..RunConfig::default()
    };
    cfg.data.n = 600;
    cfg
}

pub fn check_single_client_equivalence() -> CheckOutcome {
    let start = Instant::now();
    let r = (|| {
        let cfg = tiny_config();
        let fed = experiment::run_federated(&cfg)?;
        let cen = experiment::run_centralized(&cfg)?;
        let same_params = fed.final_params.bitwise_eq(&cen.final_params);
        let same_metrics = fed
            .metrics
            .iter()
            .zip(&cen.metrics)
            .all(|(a, b)| a.acc.to_bits() == b.acc.to_bits() && a.loss.to_bits() == b.loss.to_bits());
        Ok((
            same_params && same_metrics,
            format!("params equal: {same_params}, metrics equal: {same_metrics}"),
        ))
    })();
    outcome("one-client-federation-equals-centralized", start, r)
}

pub fn check_accounting() -> CheckOutcome {
    let start = Instant::now();
    let r = (|| {
        let mut detail = String::new();
        let mut ok = true;
        for spec in [ModelSpec::linear(64, 10), ModelSpec::mlp(64, 32, 10)] {
            for gamma in gammas() {
                let schema = build_schema(&spec.layer_specs(), gamma, 0)?;
                let expected: usize = schema
                    .layers()
                    .iter()
                    .map(|l| {
                        if l.compressed {
                            gamma.scale_ceil(l.virtual_size as u64) as usize
                        } else {
                            l.virtual_size
                        }
                    })
                    .sum();
                let msg = WireMessage::global(0, &RealParams::zeros(&schema));
                let wire = msg.encode().len();
                let formula = 40 + 8 * schema.layers().len() + 4 * expected;
                ok &= schema.total_real() == expected && wire == formula && params_message_len(&schema) == wire;
                detail = format!("last: {} real params, {wire} bytes per upload", schema.total_real());
            }
        }
        Ok((ok, detail))
    })();
    outcome("compression-accounting", start, r)
}

pub fn check_determinism() -> CheckOutcome {
    let start = Instant::now();
    let r = (|| {
        let mut cfg = tiny_config();
        cfg.clients = 2;
        let a = experiment::run_federated(&cfg)?.csv();
        let b = experiment::run_federated(&cfg)?.csv();
        Ok((a == b, format!("{} CSV bytes", a.len())))
    })();
    outcome("rerun-reproduces-metrics", start, r)
}

pub fn check_seed_sensitivity() -> CheckOutcome {
    let start = Instant::now();
    let gamma = Gamma::new(1, 4).unwrap();
    let mut worst = 1.0f64;
    for seed in 0..50u64 {
        let a = make_index_map(512, gamma, seed);
        let b = make_index_map(512, gamma, seed + 7919);
        let real: Vec<f32> = (0..a.real_size()).map(|i| i as f32).collect();
        let (va, vb) = (expand(&real, &a).unwrap(), expand(&real, &b).unwrap());
        let frac = va.iter().zip(&vb).filter(|(x, y)| x != y).count() as f64 / va.len() as f64;
        worst = worst.min(frac);
    }
    outcome(
        "wrong-seed-expansion-disagrees",
        start,
        Ok((worst >= 0.25, format!("min disagreement {:.3}", worst))),
    )
}

/// All checks, in a fixed order.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check_gradients(),
        check_scatter_brute_force(),
        check_commutation(),
        check_single_client_equivalence(),
        check_accounting(),
        check_seed_sensitivity(),
        check_determinism(),
    ]
}
