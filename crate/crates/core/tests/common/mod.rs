#![allow(dead_code)]

pub mod cli;
pub mod gradsuite;
pub mod oracles;

use irisseg::backbone::{BackboneConfig, FpnConfig};
use irisseg::detection::HeadConfig;
use irisseg::model::ModelConfig;
use irisseg_tensor::{Bound, ParamStore, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude both gradients count as zero and must agree absolutely.
pub const ZERO_FLOOR: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stats {
    /// Largest relative error among compared entries.
    pub worst: f64,
    pub checked: usize,
    /// Entries within `H` of a ReLU or max kink: the one-sided slopes
    /// differ, so no derivative exists there and nothing is compared.
    pub kinks: usize,
}

impl Stats {
    pub fn merge(self, o: Stats) -> Stats {
        Stats {
            worst: self.worst.max(o.worst),
            checked: self.checked + o.checked,
            kinks: self.kinks + o.kinks,
        }
    }
}

pub type Check = Result<Stats, String>;

fn relative(a: f64, b: f64) -> Option<f64> {
    let denom = a.abs().max(b.abs());
    if denom < ZERO_FLOOR {
        ((a - b).abs() <= ABS_TOL).then_some(0.0)
    } else {
        let rel = (a - b).abs() / denom;
        (rel <= REL_TOL).then_some(rel)
    }
}

/// Central differences on every named tensor of `store` (at most `limit`
/// randomly chosen entries per tensor) against tape gradients of `build`.
pub fn check_store<F>(store: &ParamStore, build: F, limit: Option<usize>, seed: u64) -> Check
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, |_| false);
        let loss = build(&mut tape, &b);
        tape.value(loss).item()
    };
    let at = |name: &str, i: usize, delta: f64| {
        let mut s = store.clone();
        s.get_mut(name).unwrap().data_mut()[i] += delta;
        eval(&s)
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| true);
    let loss = build(&mut tape, &bound);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let centre = tape.value(loss).item();
    let mut r = rng(seed);
    let mut stats = Stats::default();
    for (name, t) in store.iter() {
        let n = t.numel();
        let analytic = tape
            .grad(bound.get(name))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match limit {
            Some(k) if k < n => sample(&mut r, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let (plus, minus) = (at(name, i, H), at(name, i, -H));
            let numeric = (plus - minus) / (2.0 * H);
            match relative(analytic[i], numeric) {
                Some(rel) => {
                    stats.worst = stats.worst.max(rel);
                    stats.checked += 1;
                }
                None => {
                    let right = (plus - centre) / H;
                    let left = (centre - minus) / H;
                    if relative(left, right).is_none() && relative(analytic[i], left).or(relative(analytic[i], right)).is_some() {
                        stats.kinks += 1;
                    } else {
                        return Err(format!(
                            "{name}[{i}]: analytic {} numeric {numeric} (left {left}, right {right})",
                            analytic[i]
                        ));
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Gradient check with the inputs as anonymous leaves.
pub fn check_inputs<F>(inputs: &[Tensor], build: F) -> Check
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("x{i:02}"), t.clone());
    }
    check_store(
        &store,
        |tape, b| {
            let vars: Vec<Var> = b.iter().map(|(_, v)| v).collect();
            build(tape, &vars)
        },
        None,
        0,
    )
}

/// `sum(y * w)` for a fixed random `w`, so every output element carries its
/// own gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = rand_tensor(tape.shape(y), &mut rng(seed ^ 0x5eed));
    let wv = tape.constant(w);
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}

/// A detector small enough for finite differences over its parameters.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stage_channels: [3, 3, 4, 4, 4],
            ..Default::default()
        },
        fpn: FpnConfig {
            channels: 3,
            top_down: true,
        },
        head: HeadConfig {
            fc_dim: 4,
            mask_channels: 2,
        },
        anchor_levels: vec![(8, 24.0), (16, 48.0)],
        rpn_batch: 16,
        train_proposals: 10,
        ..Default::default()
    }
}
