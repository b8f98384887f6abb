//! End-to-end experiment protocol: nested-dropout training runs,
//! truncated k-sweep evaluation, brain-damage and oracle baselines,
//! capacity selection, layerwise application, and CSV curve emission.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::data::{load_cifar10, load_mnist_idx, subtract_train_mean, write_mnist_idx, Dataset};
use crate::error::{Error, Result};
use crate::network::{physically_truncate, EvalMask, LayerParams, LayerSpec, Network, NetworkSpec};
use crate::solver::{train_loop, SolverConfig, TrainState};

/// Network section of the experiment config: either a named preset or an
/// explicit architecture.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv1_filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

impl NetworkConfig {
    pub fn build(&self) -> Result<NetworkSpec> {
        match (&self.preset, &self.layers) {
            (Some(name), None) => NetworkSpec::preset(name, self.conv1_filters),
            (None, Some(layers)) => {
                let input_shape = self.input_shape.ok_or_else(|| {
                    Error::Config("network.input_shape is required with explicit layers".into())
                })?;
                let spec = NetworkSpec {
                    input_shape,
                    layers: layers.clone(),
                };
                spec.output_shapes()?;
                Ok(spec)
            }
            (Some(_), Some(_)) => Err(Error::Config(
                "network: give either 'preset' or 'layers', not both".into(),
            )),
            (None, None) => Err(Error::Config(
                "network: one of 'preset' or 'layers' is required".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "format")]
pub enum DatasetConfig {
    #[serde(rename = "mnist-idx")]
    MnistIdx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_subset: Option<usize>,
    },
    #[serde(rename = "cifar10")]
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_subset: Option<usize>,
    },
    /// Procedurally generated digit glyphs written to and read back from
    /// IDX files, for fully self-contained runs.
    #[serde(rename = "synthetic")]
    Synthetic {
        n_train: usize,
        n_test: usize,
        seed: u64,
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eval_subset: Option<usize>,
    },
}

impl DatasetConfig {
    pub fn eval_subset(&self) -> Option<usize> {
        match self {
            DatasetConfig::MnistIdx { eval_subset, .. }
            | DatasetConfig::Cifar10 { eval_subset, .. }
            | DatasetConfig::Synthetic { eval_subset, .. } => *eval_subset,
        }
    }

    /// Load `(train, test)` with preprocessing applied.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::MnistIdx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subset,
                ..
            } => {
                let mut train = load_mnist_idx(train_images, train_labels)?;
                let test = load_mnist_idx(test_images, test_labels)?;
                if let Some(n) = train_subset {
                    train = train.take(*n)?;
                }
                Ok((train, test))
            }
            DatasetConfig::Cifar10 {
                train_files,
                test_files,
                train_subset,
                ..
            } => {
                let mut train = load_cifar10(train_files)?;
                let mut test = load_cifar10(test_files)?;
                if let Some(n) = train_subset {
                    train = train.take(*n)?;
                }
                subtract_train_mean(&mut train, &mut [&mut test])?;
                Ok((train, test))
            }
            DatasetConfig::Synthetic {
                n_train,
                n_test,
                seed,
                dir,
                ..
            } => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let paths = [
                    dir.join("train-images.idx"),
                    dir.join("train-labels.idx"),
                    dir.join("test-images.idx"),
                    dir.join("test-labels.idx"),
                ];
                if !paths.iter().all(|p| p.exists()) {
                    let (ti, tl) = crate::data::synth::generate(*n_train, *seed);
                    write_mnist_idx(&ti, &tl, 28, 28, &paths[0], &paths[1])?;
                    let (ei, el) = crate::data::synth::generate(*n_test, seed.wrapping_add(1));
                    write_mnist_idx(&ei, &el, 28, 28, &paths[2], &paths[3])?;
                }
                let train = load_mnist_idx(&paths[0], &paths[1])?;
                let test = load_mnist_idx(&paths[2], &paths[3])?;
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NdConfig {
    /// Index of the conv layer whose output gets nested dropout.
    pub layer: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LayerwiseConfig {
    /// Conv layer indices to size, in order.
    pub layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub dataset: DatasetConfig,
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nested_dropout: Option<NdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layerwise: Option<LayerwiseConfig>,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The conv layer under study: the nested-dropout placement when
    /// configured, else the first conv layer.
    pub fn target_layer(&self, spec: &NetworkSpec) -> Result<usize> {
        if let Some(nd) = &self.nested_dropout {
            return Ok(nd.layer);
        }
        spec.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Conv { .. }))
            .ok_or_else(|| Error::Config("network has no conv layer".into()))
    }
}

/// One capacity-curve row: kept filters, accuracy, source checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub k: usize,
    pub accuracy: f64,
    pub checkpoint: String,
}

/// Accuracy as a function of kept filter count; `k` strictly increasing.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CapacityCurve {
    pub rows: Vec<CurveRow>,
}

impl CapacityCurve {
    pub fn validate(&self) -> Result<()> {
        for pair in self.rows.windows(2) {
            if pair[1].k <= pair[0].k {
                return Err(Error::InvalidInput(format!(
                    "curve k values must be strictly increasing, got {} after {}",
                    pair[1].k, pair[0].k
                )));
            }
        }
        for row in &self.rows {
            if !(0.0..=1.0).contains(&row.accuracy) {
                return Err(Error::InvalidInput(format!(
                    "accuracy {} out of [0, 1] at k={}",
                    row.accuracy, row.k
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,accuracy,checkpoint\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.k, row.accuracy, row.checkpoint));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "k,accuracy,checkpoint")) => {}
            Some((_, other)) => {
                return Err(Error::CsvParse {
                    line: 1,
                    reason: format!("bad header '{other}'"),
                })
            }
            None => {
                return Err(Error::CsvParse {
                    line: 1,
                    reason: "empty file".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            fn parse<'a>(s: Option<&'a str>, line: usize, what: &str) -> Result<&'a str> {
                s.ok_or(Error::CsvParse {
                    line,
                    reason: format!("missing {what}"),
                })
            }
            let k = parse(parts.next(), idx + 1, "k")?
                .parse::<usize>()
                .map_err(|e| Error::CsvParse {
                    line: idx + 1,
                    reason: format!("bad k: {e}"),
                })?;
            let accuracy = parse(parts.next(), idx + 1, "accuracy")?
                .parse::<f64>()
                .map_err(|e| Error::CsvParse {
                    line: idx + 1,
                    reason: format!("bad accuracy: {e}"),
                })?;
            let checkpoint = parse(parts.next(), idx + 1, "checkpoint")?.to_string();
            rows.push(CurveRow {
                k,
                accuracy,
                checkpoint,
            });
        }
        let curve = CapacityCurve { rows };
        curve.validate()?;
        Ok(curve)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Smallest `k` whose accuracy is within `epsilon` of the curve maximum.
pub fn select_capacity(curve: &CapacityCurve, epsilon: f64) -> Result<usize> {
    if curve.rows.is_empty() {
        return Err(Error::InvalidInput("empty capacity curve".into()));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidInput("epsilon must be >= 0".into()));
    }
    let max = curve
        .rows
        .iter()
        .map(|r| r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    curve
        .rows
        .iter()
        .find(|r| r.accuracy >= max - epsilon)
        .map(|r| r.k)
        .ok_or_else(|| Error::InvalidInput("no row within epsilon of max".into()))
}

/// Result of `cmd_train`.
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub sweep_checkpoints: usize,
    pub total_iters: usize,
    pub final_loss: Option<f32>,
}

fn build_network(config: &ExperimentConfig, with_nd: bool) -> Result<Network> {
    let spec = config.network.build()?;
    let nd = if with_nd {
        config.nested_dropout.as_ref().map(|c| (c.layer, c.rho))
    } else {
        None
    };
    let mut rng = init_rng(config.solver.rng_seed);
    Network::init(spec, nd, &mut rng)
}

fn init_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Train per the config (nested dropout attached when configured),
/// writing checkpoints and the training log into the run directory.
pub fn cmd_train(config: &ExperimentConfig, run_dir: &Path) -> Result<TrainSummary> {
    config.solver.validate()?;
    let (train, _test) = config.dataset.load()?;
    let net = build_network(config, true)?;
    let mut state = TrainState::new(net, config.solver.rng_seed);
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.json");
    let cfg_json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("cannot encode config: {e}")))?;
    fs::write(&cfg_path, cfg_json).map_err(|e| Error::io(&cfg_path, e))?;

    let outcome = train_loop(&mut state, &train, &config.solver, Some(run_dir))?;
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        sweep_checkpoints: outcome.sweep_checkpoints.len(),
        total_iters: state.iter,
        final_loss: outcome.log.last().map(|r| r.loss),
    })
}

fn network_from_checkpoint(path: &Path) -> Result<Network> {
    let ckpt = load_checkpoint(path)?;
    Network::new(ckpt.spec, ckpt.params, ckpt.nd)
}

/// Sweep checkpoints of a run directory, sorted by sweep index.
pub fn sweep_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name
            .strip_prefix("sweep_")
            .and_then(|s| s.strip_suffix(".ckpt"))
        {
            if let Ok(k) = num.parse::<usize>() {
                out.push((k, entry.path()));
            }
        }
    }
    out.sort_by_key(|(k, _)| *k);
    Ok(out)
}

/// Truncated-evaluation sweep over a nested-dropout run: one row per
/// sweep checkpoint `k < n` evaluated with a prefix mask keeping the
/// first `k` filters, plus a final full-evaluation row at `k = n` from
/// the final checkpoint.
pub fn cmd_k_sweep(run_dir: &Path, eval: &Dataset) -> Result<CapacityCurve> {
    let ckpts = sweep_checkpoints(run_dir)?;
    let final_path = run_dir.join("final.ckpt");
    if !final_path.exists() {
        return Err(Error::ProtocolViolation(format!(
            "no final checkpoint in {}",
            run_dir.display()
        )));
    }
    let final_net = network_from_checkpoint(&final_path)?;
    let att = final_net.nd.as_ref().ok_or_else(|| {
        Error::ProtocolViolation("k-sweep needs a nested-dropout run".into())
    })?;
    let (layer, n) = (att.layer, att.state.n);

    let mut rows = Vec::new();
    for (i, (k, path)) in ckpts.iter().enumerate() {
        if *k != i + 1 {
            return Err(Error::ProtocolViolation(format!(
                "missing sweep checkpoint for k={}",
                i + 1
            )));
        }
        if *k >= n {
            continue;
        }
        let net = network_from_checkpoint(path)?;
        let mask = EvalMask::prefix(layer, *k, n)?;
        let accuracy = net.accuracy(&eval.images, &eval.labels, Some(&mask))?;
        rows.push(CurveRow {
            k: *k,
            accuracy,
            checkpoint: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        });
    }
    let accuracy = final_net.accuracy(&eval.images, &eval.labels, None)?;
    rows.push(CurveRow {
        k: n,
        accuracy,
        checkpoint: "final.ckpt".into(),
    });
    let curve = CapacityCurve { rows };
    curve.validate()?;
    Ok(curve)
}

/// Filter ordering for the brain-damage baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterOrder {
    /// As trained (index order) — the default; no inherent ordering
    /// exists without nested dropout.
    Trained,
    /// Descending L2 norm of each filter's weights.
    Norm,
}

/// Brain-damage baseline: evaluate the final checkpoint of a run trained
/// without nested dropout, masking all but the first `k` filters (in the
/// chosen order) for `k = 1..=n`.
pub fn cmd_brain_damage(
    run_dir: &Path,
    eval: &Dataset,
    layer: usize,
    order: FilterOrder,
) -> Result<CapacityCurve> {
    let final_path = run_dir.join("final.ckpt");
    let net = network_from_checkpoint(&final_path)?;
    if net.nd.is_some() {
        return Err(Error::ProtocolViolation(
            "brain-damage baseline must come from a run without nested dropout".into(),
        ));
    }
    let LayerParams::Conv(cp) = &net.params[layer] else {
        return Err(Error::Config(format!("layer {layer} is not a conv layer")));
    };
    let n = cp.n_out();

    // rank[i] gives the i-th filter in the chosen order
    let rank: Vec<usize> = match order {
        FilterOrder::Trained => (0..n).collect(),
        FilterOrder::Norm => {
            let row = cp.weights.len() / n;
            let mut norms: Vec<(usize, f64)> = (0..n)
                .map(|f| {
                    let s: f64 = cp.weights.data()[f * row..(f + 1) * row]
                        .iter()
                        .map(|&v| (v as f64) * (v as f64))
                        .sum();
                    (f, s)
                })
                .collect();
            norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            norms.into_iter().map(|(f, _)| f).collect()
        }
    };

    let mut rows = Vec::new();
    for k in 1..=n {
        let mut kept = vec![false; n];
        for &f in &rank[..k] {
            kept[f] = true;
        }
        let mask = EvalMask { layer, kept };
        let accuracy = net.accuracy(&eval.images, &eval.labels, Some(&mask))?;
        rows.push(CurveRow {
            k,
            accuracy,
            checkpoint: "final.ckpt".into(),
        });
    }
    let curve = CapacityCurve { rows };
    curve.validate()?;
    Ok(curve)
}

pub struct OracleOutcome {
    pub curve: CapacityCurve,
    /// Sum of training iterations over all oracle networks.
    pub total_iters: usize,
    /// Iterations of the single nested-dropout run being compared.
    pub nested_iters: usize,
}

/// Oracle baseline: train one full network per candidate width (no
/// nested dropout), evaluate each, and account total iteration cost.
pub fn cmd_oracle(
    config: &ExperimentConfig,
    k_list: &[usize],
    per_run_iters: Option<usize>,
    out_dir: &Path,
) -> Result<OracleOutcome> {
    if k_list.is_empty() {
        return Err(Error::InvalidInput("oracle k_list is empty".into()));
    }
    let mut sorted = k_list.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let base_spec = config.network.build()?;
    let layer = config.target_layer(&base_spec)?;
    let (train, test) = config.dataset.load()?;
    let eval = match config.dataset.eval_subset() {
        Some(n) => test.take(n)?,
        None => test,
    };

    let mut solver = config.solver.clone();
    if let Some(iters) = per_run_iters {
        solver.max_iters = iters;
    }

    let mut rows = Vec::new();
    let mut total_iters = 0usize;
    for &k in &sorted {
        let mut spec = base_spec.clone();
        let LayerSpec::Conv { out_channels, .. } = &mut spec.layers[layer] else {
            return Err(Error::Config(format!("layer {layer} is not a conv layer")));
        };
        *out_channels = k;
        spec.output_shapes()?;

        let mut rng = init_rng(solver.rng_seed);
        let net = Network::init(spec, None, &mut rng)?;
        let mut state = TrainState::new(net, solver.rng_seed);
        let run_dir = out_dir.join(format!("oracle_k{k:03}"));
        train_loop(&mut state, &train, &solver, Some(&run_dir))?;
        total_iters += state.iter;
        let accuracy = state.net.accuracy(&eval.images, &eval.labels, None)?;
        rows.push(CurveRow {
            k,
            accuracy,
            checkpoint: format!("oracle_k{k:03}/final.ckpt"),
        });
    }
    let curve = CapacityCurve { rows };
    curve.validate()?;
    Ok(OracleOutcome {
        curve,
        total_iters,
        nested_iters: config.solver.max_iters,
    })
}

pub struct LayerStep {
    pub layer: usize,
    pub k_star: usize,
    pub curve: CapacityCurve,
    pub run_dir: PathBuf,
}

pub struct LayerwiseOutcome {
    pub steps: Vec<LayerStep>,
    /// (filters before, filters after) summed over the sized layers.
    pub filters_before: usize,
    pub filters_after: usize,
    pub params_before: usize,
    pub params_after: usize,
}

fn count_params(net: &Network) -> usize {
    net.params
        .iter()
        .flat_map(|p| p.tensors())
        .map(|t| t.len())
        .sum()
}

/// Layerwise capacity discovery: for each target layer in order, train
/// with nested dropout on that layer, k-sweep, select the capacity, then
/// rebuild the network physically truncated to the selected width (first
/// `k*` trained filters carried over as initialization) and move on.
pub fn cmd_layerwise(config: &ExperimentConfig, epsilon: f64) -> Result<LayerwiseOutcome> {
    let lw = config
        .layerwise
        .as_ref()
        .ok_or_else(|| Error::Config("layerwise section missing from config".into()))?;
    if lw.layers.is_empty() {
        return Err(Error::Config("layerwise.layers is empty".into()));
    }
    let rho = lw
        .rho
        .or(config.nested_dropout.as_ref().map(|c| c.rho))
        .unwrap_or(0.1);

    let (train, test) = config.dataset.load()?;
    let eval = match config.dataset.eval_subset() {
        Some(n) => test.take(n)?,
        None => test,
    };

    let mut rng = init_rng(config.solver.rng_seed);
    let mut current = Network::init(config.network.build()?, None, &mut rng)?;
    let params_before = count_params(&current);
    let mut filters_before = 0usize;
    let mut filters_after = 0usize;
    let mut steps = Vec::new();

    for &layer in &lw.layers {
        let LayerSpec::Conv { out_channels, .. } = current.spec.layers[layer] else {
            return Err(Error::Config(format!("layer {layer} is not a conv layer")));
        };
        filters_before += out_channels;

        let mut net = current.clone();
        net.nd = Some(crate::network::NdAttachment {
            layer,
            state: crate::nested::NestedDropoutState::new(out_channels, rho)?,
        });
        let run_dir = config.output.dir.join(format!("layerwise_l{layer}"));
        let mut state = TrainState::new(net, config.solver.rng_seed);
        train_loop(&mut state, &train, &config.solver, Some(&run_dir))?;

        let curve = cmd_k_sweep(&run_dir, &eval)?;
        curve.write(&run_dir.join("k_sweep.csv"))?;
        let k_star = select_capacity(&curve, epsilon)?;
        filters_after += k_star;

        let trained = network_from_checkpoint(&run_dir.join("final.ckpt"))?;
        current = physically_truncate(&trained, layer, k_star)?;
        steps.push(LayerStep {
            layer,
            k_star,
            curve,
            run_dir,
        });
    }

    let params_after = count_params(&current);
    Ok(LayerwiseOutcome {
        steps,
        filters_before,
        filters_after,
        params_before,
        params_after,
    })
}
