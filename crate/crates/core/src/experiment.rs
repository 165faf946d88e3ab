//! Experiment descriptions, the three training manners, and their outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DataConfig, GlyphDataset, PartitionKind, GLYPH_SIDE, NUM_GLYPHS};
use crate::error::{Error, Result};
use crate::federated::{self, client_data_seed, ClientState, GlobalState, SharedModel};
use crate::model::{evaluate, init_params, Batch, ModelSpec};
use crate::optim::{OptState, OptimizerConfig};
use crate::params::RealParams;
use crate::schema::{build_schema, Gamma, ParameterSchema};
use crate::transport::{self, Channel, TransportConfig, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Centralized,
    Federated,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Centralized => "centralized",
            Mode::Federated => "federated",
        }
    }
}

/// A block of rounds trained on its own generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub rounds: u64,
    #[serde(default)]
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default = "default_gamma")]
    pub gamma: Gamma,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_partition")]
    pub partition: PartitionKind,
    /// Client whose shard the `single` manner trains on.
    #[serde(default)]
    pub single_client: usize,
    /// Record wall-clock seconds in the metrics; off by default so that
    /// metrics files are reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
    /// Optional multi-phase schedule; replaces `rounds`/`data` when set.
    #[serde(default)]
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_mode() -> Mode {
    Mode::Federated
}
fn default_model() -> ModelSpec {
    ModelSpec::mlp(GLYPH_SIDE * GLYPH_SIDE, 32, NUM_GLYPHS)
}
fn default_gamma() -> Gamma {
    Gamma::ONE
}
fn default_clients() -> usize {
    5
}
fn default_local_epochs() -> usize {
    3
}
fn default_batch_size() -> usize {
    64
}
fn default_rounds() -> u64 {
    30
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adadelta(1.0)
}
fn default_partition() -> PartitionKind {
    PartitionKind::Uniform
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            model: default_model(),
            gamma: default_gamma(),
            clients: default_clients(),
            local_epochs: default_local_epochs(),
            batch_size: default_batch_size(),
            rounds: default_rounds(),
            optimizer: default_optimizer(),
            seed: 0,
            transport: TransportConfig::Memory,
            data: DataConfig::default(),
            partition: default_partition(),
            single_client: 0,
            timing: false,
            phases: Vec::new(),
            output: None,
        }
    }
}

impl RunConfig {
    /// Parses a TOML config and applies `key=value` overrides (dotted keys
    /// address nested tables). Override values are read as TOML literals
    /// when they parse as one and as strings otherwise.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_override(raw))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn phases(&self) -> Vec<Phase> {
        if self.phases.is_empty() {
            vec![Phase {
                rounds: self.rounds,
                data: self.data.clone(),
            }]
        } else {
            self.phases.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        self.model.validate()?;
        if self.model.input_dim != GLYPH_SIDE * GLYPH_SIDE {
            return field("model.input_dim", "the glyph task has 64 inputs");
        }
        if self.model.num_classes != NUM_GLYPHS {
            return field("model.num_classes", "the glyph task has 10 classes");
        }
        if self.clients == 0 {
            return field("clients", "must be at least 1");
        }
        if self.local_epochs == 0 {
            return field("local_epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be at least 1");
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return field("optimizer.lr", "must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.optimizer.rho) || self.optimizer.eps <= 0.0 {
            return field("optimizer", "rho must lie in [0, 1) and eps must be positive");
        }
        if self.single_client >= self.clients {
            return field("single_client", "must be below `clients`");
        }
        if let PartitionKind::LabelSkew { alpha } = self.partition {
            if alpha.is_nan() || alpha <= 0.0 {
                return field("partition.alpha", "must be positive");
            }
        }
        for (i, phase) in self.phases().iter().enumerate() {
            phase
                .data
                .validate()
                .map_err(|e| Error::Config(format!("phase {i}: {e}")))?;
            let n = phase.data.n;
            if n - n / 5 < self.clients {
                return field("data.n", "the training split must hold at least one example per client");
            }
        }
        if let TransportConfig::Socket { addr } = &self.transport {
            if addr.parse::<std::net::SocketAddr>().is_err() {
                return field("transport.addr", "not a socket address");
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<ParameterSchema> {
        build_schema(&self.model.layer_specs(), self.gamma, self.seed)
    }
}

fn parse_override(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// One row per completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub bytes: u64,
    pub acc: f64,
    pub loss: f64,
    pub secs: f64,
}

pub const CSV_HEADER: &str = "round,bytes,acc,loss,secs";

pub fn metrics_csv(rows: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6},{:.3}", r.round, r.bytes, r.acc, r.loss, r.secs).unwrap();
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!(
            "unexpected metrics header `{}`",
            header.join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub mode: Mode,
    pub schema: ParameterSchema,
    pub final_params: RealParams,
    pub metrics: Vec<MetricsRecord>,
}

impl RunArtifacts {
    pub fn csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.acc)
    }

    /// Writes `<mode>.csv` and `<mode>.params` (a GLOBAL_PARAMS message)
    /// into `dir`, which must already exist.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.write_named(dir, self.mode.as_str())
    }

    pub fn write_named(&self, dir: &Path, stem: &str) -> Result<()> {
        ensure_output_dir(dir)?;
        transport::fs::write_atomic(&dir.join(format!("{stem}.csv")), self.csv().as_bytes())?;
        let msg = WireMessage::global(self.metrics.len() as u64, &self.final_params);
        transport::fs::write_atomic(&dir.join(format!("{stem}.params")), &msg.encode())?;
        Ok(())
    }
}

pub fn ensure_output_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "output directory does not exist: {}",
            dir.display()
        )));
    }
    Ok(())
}

struct PhaseData {
    eval: Batch,
    train: Batch,
    shards: Vec<Batch>,
}

impl PhaseData {
    fn build(cfg: &RunConfig, data_cfg: &DataConfig) -> Result<Self> {
        let ds: GlyphDataset = data::generate(
            data_cfg.n,
            data::data_seed(cfg.seed, data_cfg),
            data_cfg.p_flip,
            data_cfg.max_shift,
        );
        let train = ds.train_split();
        let split_seed = crate::rng::mix_seed(cfg.seed, &[0x5b11]);
        let partition = match cfg.partition {
            PartitionKind::Uniform => data::split_uniform(train.len(), cfg.clients, split_seed)?,
            PartitionKind::LabelSkew { alpha } => {
                data::split_label_skew(&train.labels, cfg.clients, alpha, split_seed)?
            }
        };
        let shards = partition.shards.iter().map(|s| train.select(s)).collect();
        Ok(Self {
            eval: ds.eval_split(),
            train,
            shards,
        })
    }
}

struct Setup {
    model: SharedModel,
    init: RealParams,
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schema = cfg.schema()?;
        let init = init_params(&schema, cfg.seed);
        Ok(Self {
            model: SharedModel::new(cfg.model.clone(), schema),
            init,
        })
    }
}

fn elapsed(cfg: &RunConfig, start: Instant) -> f64 {
    if cfg.timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// Trains one participant on `shard_of(phase)` with no communication; the
/// `single` and `centralized` manners.
fn run_local(cfg: &RunConfig, mode: Mode, client: usize, pick: impl Fn(&PhaseData) -> &Batch) -> Result<RunArtifacts> {
    let setup = Setup::new(cfg)?;
    let start = Instant::now();
    let mut params = setup.init.clone();
    let mut opt = OptState::new(cfg.optimizer.clone(), &setup.model.schema);
    let seed = client_data_seed(cfg.seed, client as u64);
    let mut metrics = Vec::new();
    let mut round = 0u64;
    for phase in cfg.phases() {
        let pd = PhaseData::build(cfg, &phase.data)?;
        for _ in 0..phase.rounds {
            let loss = federated::centralized_round(
                &setup.model,
                &mut params,
                &mut opt,
                pick(&pd),
                cfg.batch_size,
                cfg.local_epochs,
                seed,
                round,
            )?;
            round += 1;
            let acc = evaluate(&setup.model.spec, &params, &setup.model.maps, &pd.eval)?;
            metrics.push(MetricsRecord {
                round,
                bytes: 0,
                acc,
                loss,
                secs: elapsed(cfg, start),
            });
            log::info!("{} round {round}: acc={acc:.4} loss={loss:.4}", mode.as_str());
        }
    }
    Ok(RunArtifacts {
        mode,
        schema: setup.model.schema,
        final_params: params,
        metrics,
    })
}

/// Trains on the union of all client shards.
pub fn run_centralized(cfg: &RunConfig) -> Result<RunArtifacts> {
    run_local(cfg, Mode::Centralized, 0, |pd| &pd.train)
}

/// Trains on one client's shard only.
pub fn run_single(cfg: &RunConfig, client: usize) -> Result<RunArtifacts> {
    if client >= cfg.clients {
        return Err(Error::Config(format!("client {client} does not exist")));
    }
    run_local(cfg, Mode::Single, client, move |pd| &pd.shards[client])
}

/// Synchronous federated training: broadcast, local training on every
/// client, increment upload, averaged aggregation, global evaluation.
pub fn run_federated(cfg: &RunConfig) -> Result<RunArtifacts> {
    let setup = Setup::new(cfg)?;
    let channel = Channel::open(&cfg.transport)?;
    run_federated_on(cfg, &setup, &channel)
}

fn run_federated_on(cfg: &RunConfig, setup: &Setup, channel: &Channel) -> Result<RunArtifacts> {
    let start = Instant::now();
    let model = &setup.model;
    let schema = &model.schema;
    let mut state = GlobalState::new(schema.clone(), setup.init.clone())?;
    let mut clients: Vec<ClientState> = (0..cfg.clients)
        .map(|i| ClientState {
            client_id: i as u64,
            params: setup.init.clone(),
            data: Batch {
                input_dim: cfg.model.input_dim,
                features: Vec::new(),
                labels: Vec::new(),
            },
            optimizer: OptState::new(cfg.optimizer.clone(), schema),
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            data_seed: client_data_seed(cfg.seed, i as u64),
            last_loss: 0.0,
        })
        .collect();
    let work = |client: &mut ClientState, global: WireMessage| -> Result<WireMessage> {
        let params = global.to_params(schema)?;
        let inc = federated::local_train(model, client, &params, global.round)?;
        Ok(WireMessage::increment(&inc))
    };

    let mut metrics = Vec::new();
    for phase in cfg.phases() {
        let pd = PhaseData::build(cfg, &phase.data)?;
        for (client, shard) in clients.iter_mut().zip(pd.shards) {
            client.data = shard;
        }
        for _ in 0..phase.rounds {
            let global = WireMessage::global(state.round, &state.params);
            let uploads = channel.exchange_round(&global, &mut clients, &work)?;
            let increments = uploads
                .iter()
                .map(|m| m.to_increment(schema))
                .collect::<Result<Vec<_>>>()?;
            federated::aggregate(&mut state, increments, cfg.clients)?;
            let acc = evaluate(&model.spec, &state.params, &model.maps, &pd.eval)?;
            let loss = clients.iter().map(|c| c.last_loss).sum::<f64>() / clients.len() as f64;
            metrics.push(MetricsRecord {
                round: state.round,
                bytes: state.cumulative_uploaded_bytes,
                acc,
                loss,
                secs: elapsed(cfg, start),
            });
            log::info!(
                "federated round {}: acc={acc:.4} loss={loss:.4} uploaded={}",
                state.round,
                state.cumulative_uploaded_bytes
            );
        }
    }
    Ok(RunArtifacts {
        mode: Mode::Federated,
        schema: schema.clone(),
        final_params: state.params,
        metrics,
    })
}

/// Runs the manner named by `cfg.mode`.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    match cfg.mode {
        Mode::Single => run_single(cfg, cfg.single_client),
        Mode::Centralized => run_centralized(cfg),
        Mode::Federated => run_federated(cfg),
    }
}

/// Final accuracies of the three manners, all read back from metrics CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Per-client single-manner accuracies.
    pub single: Vec<f64>,
    pub centralized: f64,
    pub federated: f64,
}

fn final_acc_from_csv(csv: &str) -> Result<f64> {
    parse_metrics_csv(csv)?
        .last()
        .map(|r| r.acc)
        .ok_or_else(|| Error::Config("metrics file has no rows".into()))
}

impl Summary {
    pub fn from_csvs(single: &[String], centralized: &str, federated: &str) -> Result<Self> {
        Ok(Self {
            single: single.iter().map(|s| final_acc_from_csv(s)).collect::<Result<_>>()?,
            centralized: final_acc_from_csv(centralized)?,
            federated: final_acc_from_csv(federated)?,
        })
    }

    pub fn single_mean(&self) -> f64 {
        self.single.iter().sum::<f64>() / self.single.len().max(1) as f64
    }

    /// `|Acc_FED - Acc_SUM|`.
    pub fn gap(&self) -> f64 {
        (self.federated - self.centralized).abs()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "manner       accuracy").unwrap();
        for (i, a) in self.single.iter().enumerate() {
            writeln!(s, "single[{i}]    {:.4}", a).unwrap();
        }
        writeln!(s, "single(mean) {:.4}", self.single_mean()).unwrap();
        writeln!(s, "centralized  {:.4}", self.centralized).unwrap();
        writeln!(s, "federated    {:.4}", self.federated).unwrap();
        writeln!(s, "gap |FED-SUM| {:.4}", self.gap()).unwrap();
        s
    }
}

/// Every manner under one config: single on each client, centralized, and
/// federated.
pub struct Comparison {
    pub single: Vec<RunArtifacts>,
    pub centralized: RunArtifacts,
    pub federated: RunArtifacts,
}

impl Comparison {
    pub fn run(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            single: (0..cfg.clients).map(|i| run_single(cfg, i)).collect::<Result<_>>()?,
            centralized: run_centralized(cfg)?,
            federated: run_federated(cfg)?,
        })
    }

    pub fn summary(&self) -> Result<Summary> {
        let single: Vec<String> = self.single.iter().map(RunArtifacts::csv).collect();
        Summary::from_csvs(&single, &self.centralized.csv(), &self.federated.csv())
    }
}

/// One line of a compression sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma: Gamma,
    pub virtual_params: usize,
    pub real_params: usize,
    /// `C * (40 + 8L + 4 * real_params)`.
    pub bytes_per_round: u64,
    pub reduction_pct: f64,
    pub final_acc: f64,
    pub metrics: Vec<MetricsRecord>,
}

/// Parameter-count reduction relative to the uncompressed model, in percent.
pub fn reduction_pct(schema: &ParameterSchema) -> f64 {
    100.0 * (1.0 - schema.total_real() as f64 / schema.total_virtual() as f64)
}

pub fn bytes_per_round(schema: &ParameterSchema, clients: usize) -> u64 {
    (clients * transport::wire::params_message_len(schema)) as u64
}

/// Runs the federated manner once per compression ratio.
pub fn sweep_gamma(cfg: &RunConfig, gammas: &[Gamma]) -> Result<Vec<SweepRow>> {
    gammas
        .iter()
        .map(|&gamma| {
            let mut c = cfg.clone();
            c.gamma = gamma;
            c.mode = Mode::Federated;
            let schema = c.schema()?;
            let run = run_federated(&c)?;
            Ok(SweepRow {
                gamma,
                virtual_params: schema.total_virtual(),
                real_params: schema.total_real(),
                bytes_per_round: bytes_per_round(&schema, c.clients),
                reduction_pct: reduction_pct(&schema),
                final_acc: run.final_accuracy().unwrap_or(f64::NAN),
                metrics: run.metrics,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,virtual_params,real_params,bytes_per_round,reduction_pct,final_acc\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.2},{:.6}",
            r.gamma, r.virtual_params, r.real_params, r.bytes_per_round, r.reduction_pct, r.final_acc
        )
        .unwrap();
    }
    out
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:>6} {:>10} {:>10} {:>14} {:>10} {:>9}\n",
        "gamma", "virtual", "real", "bytes/round", "reduction", "accuracy"
    );
    for r in rows {
        writeln!(
            out,
            "{:>6} {:>10} {:>10} {:>14} {:>9.2}% {:>9.4}",
            r.gamma.to_string(),
            r.virtual_params,
            r.real_params,
            r.bytes_per_round,
            r.reduction_pct,
            r.final_acc
        )
        .unwrap();
    }
    out
}

/// Merges runs on the uploaded-bytes axis: one row per distinct byte count,
/// columns `bytes` then `<label>_round,<label>_acc,<label>_loss,<label>_secs`
/// per run, empty where a run has no point at that byte count.
pub fn curve_csv(runs: &[(String, Vec<MetricsRecord>)]) -> String {
    let mut out = String::from("bytes");
    for (label, _) in runs {
        write!(out, ",{label}_round,{label}_acc,{label}_loss,{label}_secs").unwrap();
    }
    out.push('\n');
    let mut budgets: Vec<u64> = runs.iter().flat_map(|(_, m)| m.iter().map(|r| r.bytes)).collect();
    budgets.sort_unstable();
    budgets.dedup();
    for b in budgets {
        write!(out, "{b}").unwrap();
        for (_, rows) in runs {
            match rows.iter().find(|r| r.bytes == b) {
                Some(r) => write!(out, ",{},{:.6},{:.6},{:.3}", r.round, r.acc, r.loss, r.secs).unwrap(),
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Cumulative uploaded bytes at the first round whose accuracy reaches
/// `threshold`.
pub fn bytes_to_reach(rows: &[MetricsRecord], threshold: f64) -> Option<u64> {
    rows.iter().find(|r| r.acc >= threshold).map(|r| r.bytes)
}
