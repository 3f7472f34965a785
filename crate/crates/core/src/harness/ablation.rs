//! One-axis ablation grids over generator and training settings.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::DataSplits;
use super::model::MlpSpec;
use super::train::{train_with_search, LrTrial, McncSetup, TrainConfig};
use crate::autodiff::Activation;
use crate::coverage::{train_generator_sw, SwTrainOptions};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, InitKind};
use crate::reparam::{ChunkScope, LayerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Activation,
    InputFrequency,
    /// Task-network hidden width at a fixed trainable budget.
    HiddenSize,
    GeneratorWidth,
    /// Number of generator layers, hidden plus output.
    GeneratorDepth,
    Init,
    /// `(k, d)` pairs at a fixed compression rate.
    FixedRateKd,
    RandomVsTrained,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::Activation,
        AblationAxis::InputFrequency,
        AblationAxis::HiddenSize,
        AblationAxis::GeneratorWidth,
        AblationAxis::GeneratorDepth,
        AblationAxis::Init,
        AblationAxis::FixedRateKd,
        AblationAxis::RandomVsTrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Activation => "activation",
            AblationAxis::InputFrequency => "input_frequency",
            AblationAxis::HiddenSize => "hidden_size",
            AblationAxis::GeneratorWidth => "generator_width",
            AblationAxis::GeneratorDepth => "generator_depth",
            AblationAxis::Init => "init",
            AblationAxis::FixedRateKd => "fixed_rate_kd",
            AblationAxis::RandomVsTrained => "random_vs_trained",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSource {
    Random,
    /// Random init followed by sliced-W₂ training towards the sphere.
    Trained,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "value", rename_all = "snake_case")]
pub enum AxisValue {
    Activation(Activation),
    InputFrequency(f64),
    HiddenSize(usize),
    GeneratorWidth(usize),
    GeneratorDepth(usize),
    Init { kind: InitKind, scale: f64 },
    FixedRateKd { k: usize, d: usize },
    RandomVsTrained(GeneratorSource),
}

impl AxisValue {
    pub fn axis(&self) -> AblationAxis {
        match self {
            AxisValue::Activation(_) => AblationAxis::Activation,
            AxisValue::InputFrequency(_) => AblationAxis::InputFrequency,
            AxisValue::HiddenSize(_) => AblationAxis::HiddenSize,
            AxisValue::GeneratorWidth(_) => AblationAxis::GeneratorWidth,
            AxisValue::GeneratorDepth(_) => AblationAxis::GeneratorDepth,
            AxisValue::Init { .. } => AblationAxis::Init,
            AxisValue::FixedRateKd { .. } => AblationAxis::FixedRateKd,
            AxisValue::RandomVsTrained(_) => AblationAxis::RandomVsTrained,
        }
    }

    /// Parses one value of `axis`: `sine`, `4.5`, `256`, `normal:0.5`,
    /// `31:16000`, `trained`.
    pub fn parse(axis: AblationAxis, s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("bad {axis} value {s:?}"));
        let int = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        Ok(match axis {
            AblationAxis::Activation => AxisValue::Activation(s.parse()?),
            AblationAxis::InputFrequency => AxisValue::InputFrequency(s.parse().map_err(|_| bad())?),
            AblationAxis::HiddenSize => AxisValue::HiddenSize(int(s)?),
            AblationAxis::GeneratorWidth => AxisValue::GeneratorWidth(int(s)?),
            AblationAxis::GeneratorDepth => AxisValue::GeneratorDepth(int(s)?),
            AblationAxis::Init => {
                let (kind, scale) = s.split_once(':').unwrap_or((s, "1"));
                let kind = match kind {
                    "uniform" => InitKind::Uniform,
                    "normal" => InitKind::Normal,
                    _ => return Err(bad()),
                };
                AxisValue::Init {
                    kind,
                    scale: scale.parse().map_err(|_| bad())?,
                }
            }
            AblationAxis::FixedRateKd => {
                let (k, d) = s.split_once([':', '/']).ok_or_else(bad)?;
                AxisValue::FixedRateKd { k: int(k)?, d: int(d)? }
            }
            AblationAxis::RandomVsTrained => AxisValue::RandomVsTrained(match s {
                "random" => GeneratorSource::Random,
                "trained" => GeneratorSource::Trained,
                _ => return Err(bad()),
            }),
        })
    }

    pub fn parse_list(axis: AblationAxis, list: &str) -> Result<Vec<Self>> {
        list.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| Self::parse(axis, p))
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            AxisValue::Activation(a) => a.name().to_string(),
            AxisValue::InputFrequency(f) => f.to_string(),
            AxisValue::HiddenSize(n) | AxisValue::GeneratorWidth(n) | AxisValue::GeneratorDepth(n) => n.to_string(),
            AxisValue::Init { kind, scale } => format!("{kind}:{scale}"),
            AxisValue::FixedRateKd { k, d } => format!("{k}:{d}"),
            AxisValue::RandomVsTrained(GeneratorSource::Random) => "random".into(),
            AxisValue::RandomVsTrained(GeneratorSource::Trained) => "trained".into(),
        }
    }

    fn sort_key(&self) -> (f64, String) {
        match *self {
            AxisValue::InputFrequency(f) => (f, String::new()),
            AxisValue::HiddenSize(n) | AxisValue::GeneratorWidth(n) | AxisValue::GeneratorDepth(n) => {
                (n as f64, String::new())
            }
            AxisValue::Init { scale, .. } => (scale, self.label()),
            AxisValue::FixedRateKd { k, d } => (k as f64 + d as f64 * 1e-9, String::new()),
            _ => (0.0, self.label()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub values: Vec<AxisValue>,
    pub repeats: usize,
    pub base: TrainConfig,
    pub mlp: MlpSpec,
    /// Generator every value is applied to. Repeat `r` uses seed `seed + r`.
    pub generator: GeneratorConfig,
    pub scope: ChunkScope,
    pub compress_biases: bool,
    /// Settings for `trained` generators.
    pub sw_training: SwTrainOptions,
    /// Run cells on the rayon pool. Each cell is single-threaded, so the
    /// results do not depend on this.
    pub parallel: bool,
}

impl AblationSpec {
    /// The MNIST protocol: 784-256-256-10 at 0.2%, three repeats, Adam with
    /// a learning-rate search, 30 epochs of batch 128.
    pub fn mnist(axis: AblationAxis, values: Vec<AxisValue>) -> Self {
        let setup = McncSetup::ablation_default(0);
        Self {
            axis,
            values,
            repeats: 3,
            base: TrainConfig::default(),
            mlp: MlpSpec::mnist(),
            generator: setup.generator,
            scope: setup.scope,
            compress_biases: setup.compress_biases,
            sw_training: SwTrainOptions {
                steps: 100,
                ..SwTrainOptions::default()
            },
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("ablation needs at least one value".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("ablation needs at least one repeat".into()));
        }
        if let Some(v) = self.values.iter().find(|v| v.axis() != self.axis) {
            return Err(Error::Config(format!(
                "value {} does not belong to axis {}",
                v.label(),
                self.axis
            )));
        }
        self.base.validate()?;
        self.generator.validate()
    }

    /// Task network, compression setup and generator source for one cell.
    fn cell_setup(&self, value: &AxisValue, repeat: usize) -> Result<(MlpSpec, McncSetup, GeneratorSource)> {
        let mut generator = GeneratorConfig {
            seed: self.generator.seed.wrapping_add(repeat as u64),
            ..self.generator.clone()
        };
        let mut mlp = self.mlp.clone();
        let mut source = GeneratorSource::Random;
        match *value {
            AxisValue::Activation(a) => generator.activation = a,
            AxisValue::InputFrequency(f) => generator.input_frequency = f,
            AxisValue::HiddenSize(h) => {
                // Keep the number of chunks of the reference network.
                let reference = self.budget_params(&self.mlp);
                let n_chunks = reference.div_ceil(generator.d);
                let mut widths = vec![self.mlp.n_inputs()];
                widths.extend(std::iter::repeat_n(h, self.mlp.widths.len() - 2));
                widths.push(self.mlp.n_classes());
                mlp = MlpSpec::new(widths)?;
                generator.d = self.budget_params(&mlp).div_ceil(n_chunks);
            }
            AxisValue::GeneratorWidth(w) => {
                generator.hidden_widths = vec![w; generator.hidden_widths.len().max(1)];
            }
            AxisValue::GeneratorDepth(depth) => {
                let w = generator.hidden_widths.first().copied().unwrap_or(1000);
                generator.hidden_widths = vec![w; depth.saturating_sub(1)];
            }
            AxisValue::Init { kind, scale } => {
                generator.init = kind;
                generator.init_scale = scale;
            }
            AxisValue::FixedRateKd { k, d } => {
                generator.k = k;
                generator.d = d;
            }
            AxisValue::RandomVsTrained(s) => source = s,
        }
        let mut setup = McncSetup::new(generator).with_scope(self.scope);
        setup.compress_biases = self.compress_biases;
        Ok((mlp, setup, source))
    }

    fn budget_params(&self, mlp: &MlpSpec) -> usize {
        let bias = if self.compress_biases {
            LayerKind::Compressed
        } else {
            LayerKind::Direct
        };
        mlp.layer_table(LayerKind::Compressed, bias)
            .iter()
            .filter(|l| l.kind == LayerKind::Compressed)
            .map(|l| l.numel())
            .sum()
    }
}

/// One (value, repeat) training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: String,
    pub repeat: usize,
    pub seed: u64,
    pub best_lr: Option<f64>,
    pub accuracy: Option<f64>,
    pub trainable_params: Option<usize>,
    pub trials: Vec<LrTrial>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    /// Mean and sample standard deviation over successful repeats.
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub per_seed_accuracy: Vec<Option<f64>>,
    pub best_lrs: Vec<Option<f64>>,
    pub trainable_params: Option<usize>,
    pub failed_cells: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub spec: AblationSpec,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == label)
    }
}

fn run_cell(spec: &AblationSpec, data: &DataSplits, value: &AxisValue, repeat: usize) -> AblationCell {
    let seed = spec.base.seed.wrapping_add(repeat as u64);
    let mut cell = AblationCell {
        value: value.label(),
        repeat,
        seed,
        best_lr: None,
        accuracy: None,
        trainable_params: None,
        trials: vec![],
        error: None,
    };
    let outcome = (|| -> Result<_> {
        let (mlp, mut setup, source) = spec.cell_setup(value, repeat)?;
        if source == GeneratorSource::Trained {
            let gen = Generator::build(&setup.generator)?;
            let opts = SwTrainOptions {
                seed: seed ^ 0x5157_7261_696e,
                ..spec.sw_training.clone()
            };
            setup.generator_override = Some(train_generator_sw(&gen, &opts)?);
        }
        let cfg = TrainConfig {
            seed,
            ..spec.base.clone()
        };
        train_with_search(&mlp, Some(&setup), data, &cfg)
    })();
    match outcome {
        Ok((best, trials)) => {
            cell.best_lr = Some(best.lr);
            cell.accuracy = Some(best.test_accuracy);
            cell.trainable_params = Some(best.trainable_params);
            cell.trials = trials;
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Trains every (value, repeat) cell with a learning-rate search, keeps the
/// best rate per cell, and aggregates per value. Failed cells are recorded
/// and the grid continues.
pub fn run_ablation(spec: &AblationSpec, data: &DataSplits) -> Result<AblationTable> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.repeats).map(move |r| (v, r)))
        .collect();
    let run = |&(v, r): &(usize, usize)| run_cell(spec, data, &spec.values[v], r);
    let cells: Vec<AblationCell> = if spec.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut order: Vec<usize> = (0..spec.values.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (spec.values[a].sort_key(), spec.values[b].sort_key());
        ka.0.total_cmp(&kb.0).then_with(|| ka.1.cmp(&kb.1))
    });
    let rows = order
        .into_iter()
        .map(|v| {
            let mine = &cells[v * spec.repeats..(v + 1) * spec.repeats];
            let accs: Vec<f64> = mine.iter().filter_map(|c| c.accuracy).collect();
            let stats = mean_std(&accs);
            AblationRow {
                axis: spec.axis,
                value: spec.values[v].label(),
                mean_accuracy: stats.map(|s| s.0),
                std_accuracy: stats.map(|s| s.1),
                per_seed_accuracy: mine.iter().map(|c| c.accuracy).collect(),
                best_lrs: mine.iter().map(|c| c.best_lr).collect(),
                trainable_params: mine.iter().find_map(|c| c.trainable_params),
                failed_cells: mine.iter().filter(|c| c.error.is_some()).count(),
            }
        })
        .collect();
    Ok(AblationTable {
        spec: spec.clone(),
        rows,
        cells,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn join_opts(vs: &[Option<f64>]) -> String {
    vs.iter().map(|v| fmt_opt(*v)).collect::<Vec<_>>().join(";")
}

/// One CSV row per value: `axis,value,mean_accuracy,std_accuracy,
/// per_seed_accuracy,best_lrs,trainable_params,failed_cells`, with
/// per-seed lists joined by `;`.
pub fn write_ablation_csv<W: Write>(table: &AblationTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record([
        "axis",
        "value",
        "mean_accuracy",
        "std_accuracy",
        "per_seed_accuracy",
        "best_lrs",
        "trainable_params",
        "failed_cells",
    ])
    .map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            r.axis.name().to_string(),
            r.value.clone(),
            fmt_opt(r.mean_accuracy),
            fmt_opt(r.std_accuracy),
            join_opts(&r.per_seed_accuracy),
            join_opts(&r.best_lrs),
            r.trainable_params.map_or_else(String::new, |n| n.to_string()),
            r.failed_cells.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(())
}

/// Spec, rows and every cell with its learning-rate trials.
pub fn write_ablation_json<W: Write>(table: &AblationTable, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, table)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synthetic_splits;

    fn tiny(axis: AblationAxis, values: &str) -> AblationSpec {
        let mut spec = AblationSpec::mnist(axis, AxisValue::parse_list(axis, values).unwrap());
        spec.mlp = MlpSpec::new(vec![4, 6, 3]).unwrap();
        spec.generator = GeneratorConfig::new(1, 2, 20).with_hidden(vec![8]);
        spec.repeats = 2;
        spec.base.epochs = 2;
        spec.base.batch_size = 16;
        spec.base.lr_search = vec![0.05, 1e300];
        spec.base.optimizer = crate::harness::optim::OptimizerKind::Sgd;
        spec.sw_training.steps = 3;
        spec.sw_training.batch = 16;
        spec
    }

    #[test]
    fn rows_sorted_and_divergent_rates_recorded() {
        let data = synthetic_splits(48, 24, 4, 3, 2).unwrap();
        let t = run_ablation(&tiny(AblationAxis::InputFrequency, "4.0,1.0"), &data).unwrap();
        let labels: Vec<&str> = t.rows.iter().map(|r| r.value.as_str()).collect();
        assert_eq!(labels, ["1", "4"]);
        for c in &t.cells {
            assert_eq!(c.best_lr, Some(0.05));
            assert!(c.trials[1].error.is_some());
        }
        assert!(t
            .rows
            .iter()
            .all(|r| r.per_seed_accuracy.len() == 2 && r.failed_cells == 0));
    }

    #[test]
    fn failed_cells_do_not_stop_the_grid() {
        let data = synthetic_splits(48, 24, 4, 3, 2).unwrap();
        let mut spec = tiny(AblationAxis::FixedRateKd, "2:20,0:20");
        spec.parallel = false;
        let t = run_ablation(&spec, &data).unwrap();
        assert_eq!(t.row("0:20").unwrap().failed_cells, 2);
        assert!(t.row("2:20").unwrap().mean_accuracy.is_some());
        let mut csv = vec![];
        write_ablation_csv(&t, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn hidden_size_keeps_chunk_count() {
        let spec = tiny(AblationAxis::HiddenSize, "3,12");
        let reference = spec.budget_params(&spec.mlp).div_ceil(spec.generator.d);
        for v in &spec.values {
            let (mlp, setup, _) = spec.cell_setup(v, 0).unwrap();
            let p = spec.budget_params(&mlp);
            assert!(p.div_ceil(setup.generator.d) <= reference);
        }
    }

    #[test]
    fn parse_values() {
        assert_eq!(
            AxisValue::parse(AblationAxis::FixedRateKd, "31:16000").unwrap(),
            AxisValue::FixedRateKd { k: 31, d: 16000 }
        );
        assert!(AxisValue::parse(AblationAxis::Init, "he:1").is_err());
        assert_eq!(
            "random-vs-trained".parse::<AblationAxis>().unwrap(),
            AblationAxis::RandomVsTrained
        );
        assert_eq!(mean_std(&[1.0, 3.0]), Some((2.0, 2f64.sqrt())));
    }
}
