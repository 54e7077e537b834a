use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sacq::harness::ablation::{run_suite, validation_set, Suite};
use sacq::harness::data::{generate_dataset, generate_scene, read_dataset, write_dataset, Split, SyntheticScene};
use sacq::harness::eval::evaluate_ap;
use sacq::harness::export::export_attention_heatmaps;
use sacq::harness::train::{train, ExperimentConfig};
use sacq::model::{checkpoint, Detector, Predictions};
use sacq::qa::{qa_apply, QaConfig};
use sacq::tensor::read_tensor_file;
use sacq::{Error, Result};

#[derive(Parser)]
#[command(name = "sacq", version, about = "Content-query detector toolkit on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (tensor files plus targets.jsonl).
    GenData(GenDataArgs),
    /// Train a detector; writes metrics.jsonl and checkpoint/.
    Train(TrainArgs),
    /// Score a checkpoint with COCO-style AP.
    Eval(EvalArgs),
    /// Apply query aggregation to predictions read from JSON.
    Merge(MergeArgs),
    /// Write global attention heatmaps for one image.
    ExportAttn(ExportArgs),
    /// Run an ablation suite and write a CSV.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value = "train", value_parser = ["train", "val"])]
    split: String,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sacq_global: Option<bool>,
    #[arg(long)]
    sacq_local: Option<bool>,
    /// Enables or disables query aggregation.
    #[arg(long)]
    qa: Option<bool>,
}

impl ModelFlags {
    fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(v) = self.steps {
            c.train.steps = v;
        }
        if let Some(v) = self.batch {
            c.train.batch = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.sacq_global {
            c.model.sacq_global = v;
        }
        if let Some(v) = self.sacq_local {
            c.model.sacq_local = v;
        }
        if let Some(v) = self.qa {
            c.qa.enabled = v;
            c.qa.apply_at_inference = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: ModelFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory from gen-data; otherwise a validation split is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    qa: Option<bool>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    common: Common,
    /// JSON `{"probs": [[...]], "boxes": [[cx, cy, w, h], ...]}`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tc: Option<f64>,
    #[arg(long)]
    tb: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint; a freshly initialized model is used otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image tensor file; otherwise validation scene `--index` is generated.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: ModelFlags,
    #[arg(long, default_value = "sacq")]
    suite: String,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long, default_value_t = 3)]
    runs: u64,
    /// Validation scenes per configuration.
    #[arg(long, default_value_t = 200)]
    val: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
struct MergeInput {
    probs: Vec<Vec<f64>>,
    boxes: Vec<[f64; 4]>,
}

#[derive(Serialize)]
struct MergeOutput {
    groups: Vec<Vec<usize>>,
    merged: MergedSet,
}

#[derive(Serialize)]
struct MergedSet {
    probs: Vec<Vec<f64>>,
    boxes: Vec<Vec<f64>>,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, format!("{text}\n"))?;
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let c = a.common.load()?;
    c.data.validate()?;
    let split = if a.split == "val" { Split::Val } else { Split::Train };
    let scenes = generate_dataset(a.n, c.train.seed, split, &c.data);
    write_dataset(&a.out, &scenes)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut c = a.common.load()?;
    a.flags.apply(&mut c);
    let trainer = train(c, Some(&a.out))?;
    eprintln!("trained {} steps into {}", trainer.step, a.out.display());
    Ok(())
}

/// Detector plus the experiment it was trained under, when recorded.
fn load_checkpoint(dir: &Path) -> Result<(Detector, Option<ExperimentConfig>)> {
    let (detector, manifest) = checkpoint::load(dir)?;
    let experiment = match manifest.extra.get("experiment") {
        Some(v) => Some(serde_json::from_value(v.clone())?),
        None => None,
    };
    Ok((detector, experiment))
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (detector, experiment) = load_checkpoint(&a.checkpoint)?;
    let mut c = match (&a.common.config, experiment) {
        (None, Some(e)) => e,
        _ => a.common.load()?,
    };
    if let Some(s) = a.common.seed {
        c.train.seed = s;
    }
    if let Some(v) = a.qa {
        c.qa.enabled = v;
        c.qa.apply_at_inference = v;
    }
    let scenes: Vec<SyntheticScene> = match &a.data {
        Some(dir) => read_dataset(dir)?,
        None => validation_set(&c, a.n, c.train.seed),
    };
    let report = evaluate_ap(&detector, &scenes, &c.qa)?;
    emit(&serde_json::to_string_pretty(&report)?, a.out.as_deref())
}

fn merge_cmd(a: &MergeArgs) -> Result<()> {
    let mut qa = match &a.common.config {
        Some(_) => a.common.load()?.qa,
        None => QaConfig::default(),
    };
    if let Some(v) = a.tc {
        qa.t_c = v;
    }
    if let Some(v) = a.tb {
        qa.t_b = v;
    }
    let input: MergeInput = serde_json::from_str(&fs::read_to_string(&a.input)?)?;
    let q = input.probs.len();
    let m = input.probs.first().map_or(0, Vec::len);
    if input.boxes.len() != q || input.probs.iter().any(|r| r.len() != m) {
        return Err(Error::Config("probs must be a q × m table and boxes must hold q rows".into()));
    }
    let pred = Predictions {
        q,
        m,
        logits: vec![0.0; q * m],
        probs: input.probs.concat(),
        boxes: input.boxes.concat(),
    };
    let plan = qa_apply(&pred, &qa)?;
    let merged = MergedSet {
        probs: plan.merged.probs.chunks(m.max(1)).map(<[f64]>::to_vec).collect(),
        boxes: plan.merged.boxes.chunks(4).map(<[f64]>::to_vec).collect(),
    };
    let out = MergeOutput {
        groups: plan.groups,
        merged,
    };
    emit(&serde_json::to_string_pretty(&out)?, a.out.as_deref())
}

fn export_cmd(a: &ExportArgs) -> Result<()> {
    let c = a.common.load()?;
    let detector = match &a.checkpoint {
        Some(dir) => load_checkpoint(dir)?.0,
        None => Detector::new(c.model.clone(), c.train.seed, c.train.precision)?,
    };
    let image = match &a.image {
        Some(p) => read_tensor_file(p)?,
        None => generate_scene(c.train.seed, Split::Val, a.index, &c.data).image,
    };
    let files = export_attention_heatmaps(&detector, &image, &a.out)?;
    eprintln!("wrote {} heatmaps to {}", files.len(), a.out.display());
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let mut c = a.common.load()?;
    a.flags.apply(&mut c);
    let suite: Suite = a.suite.parse()?;
    if a.runs == 0 {
        return Err(Error::Config("--runs must be positive".into()));
    }
    let seeds: Vec<u64> = (0..a.runs).map(|k| c.train.seed + k).collect();
    let val = validation_set(&c, a.val, c.train.seed);
    let mut out = std::io::BufWriter::new(fs::File::create(&a.out)?);
    run_suite(suite, &c, &seeds, &val, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Merge(a) => merge_cmd(a),
        Command::ExportAttn(a) => export_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors count as configuration errors
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
