//! Error/computation tradeoff of a pre-trained MNIST classifier on shuffled
//! and temporally ordered test streams.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{
    energy, flops_dense, flops_rounding, flops_sigma_delta, flops_sparse, ledger_for_events,
    ledger_for_original, EnergyMode, EnergyTable, ReportRow,
};
use crate::data::{load_idx, mean_adjacent_distance, temporal_reshuffle, FrameDataset};
use crate::error::{Error, Result};
use crate::network::{
    forward_original, forward_rounding, forward_sigma_delta, read_network, write_network, NetworkSpec,
    SigmaDeltaRuntime,
};
use crate::scale_opt::{optimize, LogScales, Surrogate, TradeoffConfig};
use crate::tensor::{DenseVector, OpLedger};

use super::mlp::{train_mlp, MlpConfig, MlpReport};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte.gz";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte.gz";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte.gz";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte.gz";

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}

/// Loads the training and test splits from `dir`, accepting `.gz` or plain names.
pub fn load_mnist(dir: &Path) -> Result<(FrameDataset, FrameDataset)> {
    let pick = |name: &str| -> PathBuf {
        let gz = dir.join(name);
        if gz.exists() {
            gz
        } else {
            dir.join(name.trim_end_matches(".gz"))
        }
    };
    let train = load_idx(&pick(TRAIN_IMAGES), &pick(TRAIN_LABELS))?;
    let test = load_idx(&pick(TEST_IMAGES), &pick(TEST_LABELS))?;
    Ok((train, test))
}

pub fn save_net(net: &NetworkSpec, path: &Path) -> Result<()> {
    write_network(net, BufWriter::new(File::create(path)?))
}

pub fn load_net(path: &Path) -> Result<NetworkSpec> {
    read_network(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnistConfig {
    pub mnist_dir: PathBuf,
    /// Pre-trained network; trained from scratch when absent.
    pub net: Option<PathBuf>,
    pub mlp: MlpConfig,
    pub lambdas: Vec<f64>,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub surrogate: Surrogate,
    pub buffer_size: usize,
    pub seed: u64,
}

impl Default for MnistConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            net: None,
            mlp: MlpConfig::default(),
            lambdas: log_space(1e-10, 1e-5, 10),
            eta: 1.0,
            epochs: 3,
            batch_size: 32,
            surrogate: Surrogate::StraightThrough,
            buffer_size: crate::data::DEFAULT_BUFFER_SIZE,
            seed: 7,
        }
    }
}

/// One net type on one ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetEval {
    /// Mean operations per test frame (dense count for the original net).
    pub flops: f64,
    pub flops_sparse: Option<f64>,
    /// Classification error in percent.
    pub error_train: f64,
    pub error_test: f64,
    pub energy_nj: f64,
    pub energy_nj_sparse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingEval {
    pub original: NetEval,
    pub round: NetEval,
    pub sigma_delta: NetEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingEval {
    pub setting: String,
    pub lambda: Option<f64>,
    pub k: Vec<f64>,
    pub diverged: Option<String>,
    pub mnist: OrderingEval,
    pub temporal: OrderingEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnistResult {
    pub test_accuracy: f64,
    pub mlp: Option<MlpReport>,
    pub adjacent_distance_shuffled: f64,
    pub adjacent_distance_temporal: f64,
    pub settings: Vec<SettingEval>,
}

struct Split<'a> {
    train: &'a FrameDataset,
    test: &'a FrameDataset,
}

fn error_percent(predictions: &[usize], labels: &[u8]) -> f64 {
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p != **l as usize)
        .count();
    100.0 * wrong as f64 / labels.len().max(1) as f64
}

fn argmax(v: &DenseVector) -> usize {
    v.argmax().unwrap_or(0)
}

fn labels(ds: &FrameDataset) -> &[u8] {
    ds.labels().expect("MNIST splits are labelled")
}

/// Predictions and mean per-frame op count of a stateless executor.
fn stateless<F>(ds: &FrameDataset, run: F) -> Result<(Vec<usize>, f64)>
where
    F: Fn(&[f64]) -> Result<(DenseVector, u64)> + Sync,
{
    let out: Vec<(DenseVector, u64)> = ds.frames().par_iter().map(|x| run(x)).collect::<Result<_>>()?;
    let n = out.len().max(1) as f64;
    let ops = out.iter().map(|o| o.1 as f64).sum::<f64>() / n;
    Ok((out.iter().map(|o| argmax(&o.0)).collect(), ops))
}

fn sigma_delta_stream(net: &NetworkSpec, ds: &FrameDataset) -> Result<(Vec<usize>, f64)> {
    let mut rt = SigmaDeltaRuntime::new(net);
    let mut preds = Vec::with_capacity(ds.len());
    let mut flops = 0u64;
    for x in ds.frames() {
        let pass = forward_sigma_delta(net, &mut rt, x, &mut OpLedger::default())?;
        flops += flops_sigma_delta(&pass.activity);
        preds.push(argmax(&pass.output));
    }
    Ok((preds, flops as f64 / ds.len().max(1) as f64))
}

fn nj(ledger: &OpLedger) -> f64 {
    energy(ledger, &EnergyTable::default(), EnergyMode::Int32) * 1e9
}

fn evaluate_ordering(net: &NetworkSpec, split: &Split, original: &NetEval) -> Result<OrderingEval> {
    let (round_train, _) = stateless(split.train, |x| {
        let p = forward_rounding(net, x, &mut OpLedger::default())?;
        Ok((p.output, 0))
    })?;
    let (round_test, round_flops) = stateless(split.test, |x| {
        let p = forward_rounding(net, x, &mut OpLedger::default())?;
        Ok((p.output, flops_rounding(&p.activity)))
    })?;
    let (sd_train, _) = sigma_delta_stream(net, split.train)?;
    let (sd_test, sd_flops) = sigma_delta_stream(net, split.test)?;
    let events = |f: f64| nj(&ledger_for_events(f.round() as u64));
    Ok(OrderingEval {
        original: original.clone(),
        round: NetEval {
            flops: round_flops,
            flops_sparse: None,
            error_train: error_percent(&round_train, labels(split.train)),
            error_test: error_percent(&round_test, labels(split.test)),
            energy_nj: events(round_flops),
            energy_nj_sparse: None,
        },
        sigma_delta: NetEval {
            flops: sd_flops,
            flops_sparse: None,
            error_train: error_percent(&sd_train, labels(split.train)),
            error_test: error_percent(&sd_test, labels(split.test)),
            energy_nj: events(sd_flops),
            energy_nj_sparse: None,
        },
    })
}

fn evaluate_original(net: &NetworkSpec, split: &Split) -> Result<NetEval> {
    let run = |x: &[f64]| {
        let p = forward_original(net, x, &mut OpLedger::default())?;
        Ok((p.output, flops_sparse(&p.activity)))
    };
    let (train, _) = stateless(split.train, run)?;
    let (test, sparse) = stateless(split.test, run)?;
    let dense = flops_dense(&net.dims())? as f64;
    Ok(NetEval {
        flops: dense,
        flops_sparse: Some(sparse),
        error_train: error_percent(&train, labels(split.train)),
        error_test: error_percent(&test, labels(split.test)),
        energy_nj: nj(&ledger_for_original(dense as u64)),
        energy_nj_sparse: Some(nj(&ledger_for_original(sparse.round() as u64))),
    })
}

/// Loads or trains the classifier named by `cfg`.
pub fn obtain_net(cfg: &MnistConfig, train: &FrameDataset) -> Result<(NetworkSpec, Option<MlpReport>)> {
    match &cfg.net {
        Some(path) if path.exists() => Ok((load_net(path)?, None)),
        path => {
            let (net, report) = train_mlp(train, &cfg.mlp)?;
            if let Some(path) = path {
                save_net(&net, path)?;
            }
            Ok((net, Some(report)))
        }
    }
}

pub fn run_mnist(cfg: &MnistConfig) -> Result<MnistResult> {
    if cfg.lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda list".into()));
    }
    let (train, test) = load_mnist(&cfg.mnist_dir)?;
    let (net, mlp) = obtain_net(cfg, &train)?;
    if net.input_width() != train.width() {
        return Err(Error::InvalidNetwork(format!(
            "network expects {} inputs, data has {}",
            net.input_width(),
            train.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let temporal_train = temporal_reshuffle(&train, cfg.buffer_size, &mut rng)?;
    let temporal_test = temporal_reshuffle(&test, cfg.buffer_size, &mut rng)?;
    let shuffled = Split {
        train: &train,
        test: &test,
    };
    let temporal = Split {
        train: &temporal_train,
        test: &temporal_test,
    };

    let original = evaluate_original(&net, &shuffled)?;
    let test_accuracy = 1.0 - original.error_test / 100.0;
    let evaluate = |setting: String, lambda, scales: &LogScales, diverged| -> Result<SettingEval> {
        let scaled = scales.apply(&net)?;
        Ok(SettingEval {
            setting,
            lambda,
            k: scales.layer_k(),
            diverged,
            mnist: evaluate_ordering(&scaled, &shuffled, &original)?,
            temporal: evaluate_ordering(&scaled, &temporal, &original)?,
        })
    };

    let unit = LogScales::from_net(&net);
    let mut settings = vec![evaluate("Unoptimized".into(), None, &unit, None)?];
    for (i, &lambda) in cfg.lambdas.iter().enumerate() {
        let tcfg = TradeoffConfig {
            lambda,
            eta: cfg.eta,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            surrogate: cfg.surrogate,
            seed: cfg.seed.wrapping_add(100 + i as u64),
            ..TradeoffConfig::default()
        };
        let (scales, diverged) = match optimize(&net, train.frames(), &tcfg) {
            Ok(o) => (o.scales, None),
            Err(e @ Error::Diverged { .. }) => (unit.clone(), Some(e.to_string())),
            Err(e) => return Err(e),
        };
        settings.push(evaluate(format!("lambda={lambda:.3e}"), Some(lambda), &scales, diverged)?);
    }

    Ok(MnistResult {
        test_accuracy,
        mlp,
        adjacent_distance_shuffled: mean_adjacent_distance(test.frames()),
        adjacent_distance_temporal: mean_adjacent_distance(temporal_test.frames()),
        settings,
    })
}

/// The results table, one row per setting, net type and ordering.
pub fn report_rows(result: &MnistResult) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for s in &result.settings {
        for (dataset, ord) in [("mnist", &s.mnist), ("temporal_mnist", &s.temporal)] {
            for (net_type, e) in [
                ("original", &ord.original),
                ("round", &ord.round),
                ("sigma_delta", &ord.sigma_delta),
            ] {
                let original = net_type == "original";
                rows.push(ReportRow {
                    setting: s.setting.clone(),
                    net_type: net_type.into(),
                    dataset: dataset.into(),
                    kflops_dense: original.then_some(e.flops / 1000.0),
                    kflops_sparse: e.flops_sparse.map(|f| f / 1000.0),
                    kflops: e.flops / 1000.0,
                    class_error_train: e.error_train,
                    class_error_test: e.error_test,
                    energy_nj: e.energy_nj,
                    energy_nj_sparse: e.energy_nj_sparse,
                });
            }
        }
    }
    rows
}
