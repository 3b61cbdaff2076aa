//! Scale optimization on the mis-scaled random ReLU network, compared with a
//! cloud of randomly drawn rescalings.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_random_network, gen_random_stream};
use crate::error::{Error, Result};
use crate::network::{forward_original, forward_rounding, NetworkSpec};
use crate::scale_opt::{comp_loss, error_loss, optimize, Distance, LogScales, Surrogate, TradeoffConfig};
use crate::tensor::{DenseVector, OpLedger};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomNetConfig {
    pub seed: u64,
    pub train_frames: usize,
    pub eval_frames: usize,
    pub lambdas: Vec<f64>,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub surrogate: Surrogate,
    pub random_samples: usize,
    /// Random rescalings draw each `log2 k_l` uniformly from this range.
    pub log2_k_range: (f64, f64),
    /// Evaluate the trajectory every this many steps.
    pub checkpoint_every: usize,
}

impl Default for RandomNetConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            train_frames: 2000,
            eval_frames: 500,
            lambdas: vec![1e-6, 1e-5, 1e-4, 1e-3],
            eta: 0.1,
            epochs: 20,
            batch_size: 32,
            surrogate: Surrogate::StraightThrough,
            random_samples: 1000,
            log2_k_range: (-4.0, 6.0),
            checkpoint_every: 10,
        }
    }
}

/// Mean output error and mean additions per frame of a rounding network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub error: f64,
    pub comp: f64,
}

impl TradeoffPoint {
    /// No worse in both coordinates and better in one.
    pub fn dominates(&self, other: &TradeoffPoint) -> bool {
        self.error <= other.error
            && self.comp <= other.comp
            && (self.error < other.error || self.comp < other.comp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRun {
    pub lambda: f64,
    /// `(step, point)` along the optimization, starting at step 0.
    pub trajectory: Vec<(usize, TradeoffPoint)>,
    pub final_k: Vec<f64>,
    pub final_point: TradeoffPoint,
    /// Random rescalings that dominate the final point.
    pub dominated_by: usize,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomNetResult {
    pub initial: TradeoffPoint,
    pub cloud: Vec<(Vec<f64>, TradeoffPoint)>,
    pub runs: Vec<LambdaRun>,
}

/// Rounding-network error and computation of `net` under `scales`,
/// averaged over `frames` with precomputed original outputs `targets`.
pub fn evaluate_scales(
    net: &NetworkSpec,
    scales: &LogScales,
    frames: &[DenseVector],
    targets: &[DenseVector],
    distance: Distance,
) -> Result<TradeoffPoint> {
    let scaled = scales.apply(net)?;
    let (err, comp) = frames
        .iter()
        .zip(targets)
        .map(|(x, y)| {
            let pass = forward_rounding(&scaled, x, &mut OpLedger::default())?;
            Ok((error_loss(&pass.output, y, distance)?, comp_loss(&pass.activity)))
        })
        .try_fold((0.0, 0.0), |(e, c), r: Result<(f64, f64)>| {
            r.map(|(de, dc)| (e + de, c + dc))
        })?;
    let n = frames.len().max(1) as f64;
    Ok(TradeoffPoint {
        error: err / n,
        comp: comp / n,
    })
}

pub fn run_random_net(cfg: &RandomNetConfig) -> Result<RandomNetResult> {
    if cfg.lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda list".into()));
    }
    if cfg.log2_k_range.0 >= cfg.log2_k_range.1 || cfg.checkpoint_every == 0 {
        return Err(Error::InvalidArgument("bad sampling range or checkpoint interval".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = gen_random_network(&mut rng);
    let width = net.input_width();
    let train = gen_random_stream(&mut rng, cfg.train_frames, width, 0.0)?;
    let eval = gen_random_stream(&mut rng, cfg.eval_frames, width, 0.0)?;
    let targets: Vec<DenseVector> = eval
        .frames()
        .iter()
        .map(|x| forward_original(&net, x, &mut OpLedger::default()).map(|p| p.output))
        .collect::<Result<_>>()?;
    let distance = Distance::for_output(net.output_activation());
    let point = |ks: &LogScales| evaluate_scales(&net, ks, eval.frames(), &targets, distance);

    let (lo, hi) = cfg.log2_k_range;
    let draws: Vec<Vec<f64>> = (0..cfg.random_samples)
        .map(|_| (0..net.depth()).map(|_| rng.random_range(lo..hi).exp2()).collect())
        .collect();
    let cloud: Vec<(Vec<f64>, TradeoffPoint)> = draws
        .into_par_iter()
        .map(|ks| {
            let p = point(&LogScales::from_layer_scales(&ks)?)?;
            Ok((ks, p))
        })
        .collect::<Result<_>>()?;

    let initial = point(&LogScales::from_net(&net))?;
    let runs = cfg
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let tcfg = TradeoffConfig {
                lambda,
                eta: cfg.eta,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                surrogate: cfg.surrogate,
                seed: cfg.seed.wrapping_add(i as u64 + 1),
                ..TradeoffConfig::default()
            };
            let (trace, scales, diverged) = match optimize(&net, train.frames(), &tcfg) {
                Ok(o) => (o.trace, o.scales, None),
                Err(e @ Error::Diverged { .. }) => (Vec::new(), LogScales::from_net(&net), Some(e.to_string())),
                Err(e) => return Err(e),
            };
            let mut trajectory = Vec::new();
            for row in trace.iter().step_by(cfg.checkpoint_every) {
                trajectory.push((row.step, point(&LogScales::from_layer_scales(&row.k)?)?));
            }
            let final_point = point(&scales)?;
            trajectory.push((trace.len(), final_point));
            let dominated_by = cloud.iter().filter(|(_, p)| p.dominates(&final_point)).count();
            Ok(LambdaRun {
                lambda,
                trajectory,
                final_k: scales.layer_k(),
                final_point,
                dominated_by,
                diverged,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RandomNetResult {
        initial,
        cloud,
        runs,
    })
}

/// `lambda,step,error,kflops` rows for every trajectory.
pub fn write_trajectories_csv<W: Write>(result: &RandomNetResult, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lambda", "step", "error", "kflops"])?;
    for run in &result.runs {
        for (step, p) in &run.trajectory {
            out.write_record([
                run.lambda.to_string(),
                step.to_string(),
                p.error.to_string(),
                (p.comp / 1000.0).to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `sample_id,error,kflops,k0,k1,...` rows for the random cloud.
pub fn write_cloud_csv<W: Write>(result: &RandomNetResult, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let depth = result.cloud.first().map_or(0, |(k, _)| k.len());
    let mut header = vec!["sample_id".to_string(), "error".into(), "kflops".into()];
    header.extend((0..depth).map(|l| format!("k{l}")));
    out.write_record(&header)?;
    for (i, (ks, p)) in result.cloud.iter().enumerate() {
        let mut rec = vec![i.to_string(), p.error.to_string(), (p.comp / 1000.0).to_string()];
        rec.extend(ks.iter().map(|k| k.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domination() {
        let a = TradeoffPoint { error: 1.0, comp: 1.0 };
        let b = TradeoffPoint { error: 1.0, comp: 2.0 };
        assert!(a.dominates(&b));
        assert!(!b.dominates(&a));
        assert!(!a.dominates(&a));
    }

    #[test]
    fn small_run_is_deterministic() {
        let cfg = RandomNetConfig {
            train_frames: 64,
            eval_frames: 32,
            lambdas: vec![1e-3],
            epochs: 2,
            random_samples: 20,
            ..RandomNetConfig::default()
        };
        let a = run_random_net(&cfg).unwrap();
        let b = run_random_net(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cloud.len(), 20);
        assert_eq!(a.runs[0].trajectory.first().unwrap().1, a.initial);
        let mut buf = Vec::new();
        write_trajectories_csv(&a, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("lambda,step,error,kflops\n"));
        let mut buf = Vec::new();
        write_cloud_csv(&a, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("sample_id,error,kflops,k0,k1,k2\n"));
    }
}
