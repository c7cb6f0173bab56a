//! Command implementations behind the binary's subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use relmem::rmc::GateStyle;
use relmem::tasks::{
    encode_memorization, encode_nth_farthest, gen_memorization, gen_nth_farthest,
    NthFarthestEpisode, SeqSample,
};
use relmem::tensor::Tensor;
use relmem::trainer::{
    grad_check_model, train, GradCheckTarget, MetricsRow, ModelKind, TaskKind, TaskParams,
    TrainConfig,
};

use crate::checkpoint::Checkpoint;

pub fn parse_task(name: &str) -> Result<TaskKind> {
    match name.replace('-', "_").as_str() {
        "nth_farthest" => Ok(TaskKind::NthFarthest),
        "copy" => Ok(TaskKind::Copy),
        "reverse" => Ok(TaskKind::Reverse),
        "double" => Ok(TaskKind::Double),
        other => bail!("unknown task {other:?} (expected nth-farthest, copy, reverse, double)"),
    }
}

pub fn parse_model(name: &str) -> Result<ModelKind> {
    match name {
        "rmc" => Ok(ModelKind::Rmc),
        "lstm" => Ok(ModelKind::Lstm),
        other => bail!("unknown model {other:?} (expected rmc or lstm)"),
    }
}

pub fn parse_gate_style(name: &str) -> Result<GateStyle> {
    match name {
        "unit" => Ok(GateStyle::Unit),
        "memory" => Ok(GateStyle::Memory),
        other => bail!("unknown gate style {other:?} (expected unit or memory)"),
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,batch_accuracy,best_batch_accuracy,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.batch_accuracy, r.best_batch_accuracy, r.wall_seconds
        ));
    }
    out
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config: TrainConfig = serde_json::from_str(&text).context("parsing config json")?;
    Ok(config)
}

/// Validates, trains, and writes metrics.csv, checkpoint.json, and
/// resolved-config.json. Nothing is created until the config validates.
pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<()> {
    let mut config = load_config(config_path)?;
    config.resolve().map_err(|e| anyhow!("invalid config: {e}"))?;
    run_training(&config, out_dir)
}

fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(
        out_dir.join("resolved-config.json"),
        serde_json::to_string_pretty(config)? + "\n",
    )?;
    let (history, trainer) = train(config.clone()).map_err(|e| anyhow!("training failed: {e}"))?;
    fs::write(out_dir.join("metrics.csv"), metrics_csv(&history))?;
    Checkpoint::from_trainer(&trainer).save(&out_dir.join("checkpoint.json"))?;
    Ok(())
}

/// Prints `accuracy=<fraction>` for the checkpointed model on freshly
/// generated evaluation batches.
pub fn cmd_eval(
    checkpoint_path: &Path,
    batches: usize,
    task_override: Option<&str>,
    out: &mut dyn Write,
) -> Result<f64> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    if let Some(task) = task_override {
        let requested = parse_task(task)?;
        if requested != ckpt.config.task {
            bail!(
                "task mismatch: checkpoint was trained on {:?}, asked to evaluate {requested:?}",
                ckpt.config.task
            );
        }
    }
    if batches == 0 {
        bail!("batches must be >= 1");
    }
    let trainer = ckpt.to_trainer()?;
    let accuracy = trainer
        .evaluate(batches)
        .map_err(|e| anyhow!("evaluation failed: {e}"))?;
    writeln!(out, "accuracy={accuracy}")?;
    Ok(accuracy)
}

/// Writes `count` JSONL task instances; same seed, same bytes.
pub fn cmd_gen(
    task: TaskKind,
    count: usize,
    seed: u64,
    dims: &TaskParams,
    out_path: &Path,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = String::new();
    for _ in 0..count {
        let line = match task.memorization() {
            None => {
                serde_json::to_string(&gen_nth_farthest(&mut rng, dims.dim, dims.seq_len))?
            }
            Some(kind) => serde_json::to_string(&gen_memorization(
                &mut rng,
                kind,
                dims.vocab_size,
                dims.length,
            ))?,
        };
        lines.push_str(&line);
        lines.push('\n');
    }
    fs::write(out_path, lines)
        .with_context(|| format!("writing {}", out_path.display()))?;
    Ok(())
}

#[derive(Serialize)]
#[serde(untagged)]
enum EpisodeMeta {
    NthFarthest {
        task: TaskKind,
        n: usize,
        m: usize,
        labels: Vec<usize>,
        seq_len: usize,
    },
    Memorization {
        task: TaskKind,
        input_tokens: Vec<usize>,
        target_tokens: Vec<usize>,
    },
}

#[derive(Serialize)]
struct AttentionDump {
    episode: EpisodeMeta,
    /// [timestep][block][head][row][column], every row summing to one.
    weights: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Runs one stored episode through a relational checkpoint and writes the
/// per-timestep, per-block, per-head attention matrices with the episode
/// metadata needed to line the weights up against the inputs.
pub fn cmd_dump_attention(
    checkpoint_path: &Path,
    episode_path: &Path,
    out_path: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    if ckpt.config.model != ModelKind::Rmc {
        bail!("no attention to dump: checkpoint model is {:?}", ckpt.config.model);
    }
    let text = fs::read_to_string(episode_path)
        .with_context(|| format!("reading episode {}", episode_path.display()))?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| anyhow!("episode file {} is empty", episode_path.display()))?;

    let tp = &ckpt.config.task_params;
    let (inputs, meta) = match ckpt.config.task.memorization() {
        None => {
            let ep: NthFarthestEpisode =
                serde_json::from_str(first).context("parsing nth-farthest episode")?;
            if ep.vectors.len() != tp.seq_len || ep.vectors[0].len() != tp.dim {
                bail!(
                    "episode shape {}x{} does not match checkpoint task ({}x{})",
                    ep.vectors.len(),
                    ep.vectors[0].len(),
                    tp.seq_len,
                    tp.dim
                );
            }
            let (inputs, _) = encode_nth_farthest(&ep);
            let meta = EpisodeMeta::NthFarthest {
                task: ckpt.config.task,
                n: ep.n,
                m: ep.m,
                labels: ep.labels.clone(),
                seq_len: tp.seq_len,
            };
            (inputs, meta)
        }
        Some(kind) => {
            let sample: SeqSample =
                serde_json::from_str(first).context("parsing memorization sample")?;
            if sample.kind != kind {
                bail!(
                    "episode kind {:?} does not match checkpoint task {:?}",
                    sample.kind,
                    ckpt.config.task
                );
            }
            if sample.input_tokens.iter().any(|&t| t >= tp.vocab_size) {
                bail!("episode tokens exceed checkpoint vocabulary {}", tp.vocab_size);
            }
            let enc = encode_memorization(&sample, tp.vocab_size);
            let meta = EpisodeMeta::Memorization {
                task: ckpt.config.task,
                input_tokens: sample.input_tokens.clone(),
                target_tokens: sample.target_tokens.clone(),
            };
            (enc.inputs, meta)
        }
    };

    let trainer = ckpt.to_trainer()?;
    let traces = trainer
        .trace_episode(&inputs)
        .map_err(|e| anyhow!("tracing failed: {e}"))?;
    let dump = AttentionDump {
        episode: meta,
        weights: traces
            .iter()
            .map(|t| {
                t.weights
                    .iter()
                    .map(|heads| heads.iter().map(tensor_rows).collect())
                    .collect()
            })
            .collect(),
    };
    fs::write(out_path, serde_json::to_string_pretty(&dump)? + "\n")
        .with_context(|| format!("writing {}", out_path.display()))?;
    Ok(())
}

/// Prints the max relative error of reverse-mode gradients against finite
/// differences; the process exit code reflects the tolerance test.
pub fn cmd_gradcheck(
    model: ModelKind,
    gate_style: GateStyle,
    blocks: usize,
    eps: f64,
    tol: f64,
    out: &mut dyn Write,
) -> Result<bool> {
    let target = match model {
        ModelKind::Rmc => GradCheckTarget::small_rmc(gate_style, blocks),
        ModelKind::Lstm => GradCheckTarget::small_lstm(),
    };
    let report =
        grad_check_model(&target, eps, tol).map_err(|e| anyhow!("grad check failed: {e}"))?;
    writeln!(
        out,
        "max_rel_error={} params={} pass={}",
        report.max_rel_error, report.param_count, report.pass
    )?;
    Ok(report.pass)
}

#[derive(serde::Deserialize)]
struct SweepSpec {
    base: Value,
    /// Dotted config paths to lists of values, e.g. "rmc.mem_slots": [2, 4].
    grid: BTreeMap<String, Vec<Value>>,
}

fn set_dotted(target: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = target;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("sweep path {path}: {part} is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split never yields zero parts")
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cartesian grid over the listed config fields; one fully independent
/// training run per point, each in its own subdirectory.
pub fn cmd_sweep(spec_path: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading sweep spec {}", spec_path.display()))?;
    let spec: SweepSpec = serde_json::from_str(&text).context("parsing sweep spec")?;
    if spec.grid.is_empty() {
        bail!("sweep grid is empty");
    }
    for (field, values) in &spec.grid {
        if values.is_empty() {
            bail!("sweep grid for {field} lists no values");
        }
    }

    let fields: Vec<&String> = spec.grid.keys().collect();
    let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
    for field in &fields {
        let n = spec.grid[*field].len();
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |i| {
                    let mut c = prefix.clone();
                    c.push(i);
                    c
                })
            })
            .collect();
    }

    // validate every point before any run starts
    let mut points = Vec::with_capacity(combos.len());
    for combo in &combos {
        let mut json = spec.base.clone();
        let mut label_parts = Vec::with_capacity(fields.len());
        for (slot, field) in fields.iter().enumerate() {
            let value = spec.grid[*field][combo[slot]].clone();
            label_parts.push(format!("{field}={}", value_label(&value)));
            set_dotted(&mut json, field, value)?;
        }
        let label = label_parts.join(",");
        let mut config: TrainConfig =
            serde_json::from_value(json).context("sweep point is not a valid config")?;
        config
            .resolve()
            .map_err(|e| anyhow!("invalid sweep point {label}: {e}"))?;
        points.push((label, config));
    }

    writeln!(out, "sweep: {} points", points.len())?;
    for (label, config) in &points {
        writeln!(out, "running {label}")?;
        run_training(config, &out_dir.join(label))?;
    }
    Ok(())
}
