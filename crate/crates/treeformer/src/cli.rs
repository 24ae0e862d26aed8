//! Command-line interface: dataset generation, training, evaluation,
//! gradient checking, complexity profiling, chart inspection, and sweeps.
//! Every failure path prints a single `error: ...` line and exits nonzero.

use crate::checkpoint;
use crate::config::{RunConfig, Task};
use crate::data;
use crate::encoder::{encode_sequential, EncodeHooks};
use crate::error::{Error, Result};
use crate::model::{self, ParamSet};
use crate::preencoder::pre_encode;
use crate::profiler::{self, Schedule};
use crate::tensor::tape::Tape;
use crate::train::{self, TaskData, TrainOutcome};
use clap::{Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "treeformer", about = "Chart encoder lab: train, profile, and inspect")]
pub struct Cli {
    /// flat key = value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// maximum phrase length materialized in the chart (H)
    #[arg(long, global = true)]
    pub height: Option<usize>,
    /// pre-encoder self-attention layers (L)
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    #[arg(long = "length-penalty", global = true)]
    pub length_penalty: Option<f64>,
    /// output path (file or directory depending on the subcommand)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// overwrite existing outputs
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SweepAxis {
    Height,
    Depth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfSchedule {
    Sequential,
    Parallel,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Write train/val dataset files for the configured task
    Gen,
    /// Train a model and save the best-by-validation checkpoint
    Train {
        /// directory with pre-generated dataset files (default: generate in memory)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// End-to-end finite-difference gradient check on a tiny model
    Gradcheck {
        /// model precision under test
        #[arg(long, default_value_t = 32)]
        bits: u32,
        /// corrupt one backward pass to prove the check can fail
        #[arg(long)]
        mutate: bool,
    },
    /// Op-count and wall-time sweep, CSV output
    Profile {
        /// sequence lengths, comma separated
        #[arg(long, default_value = "16,32,64,128")]
        sizes: String,
        /// chart heights, comma separated
        #[arg(long, default_value = "8")]
        heights: String,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = ProfSchedule::Parallel)]
        schedule: ProfSchedule,
    },
    /// Dump the chart for one sentence: per-cell best split and weights
    Inspect {
        checkpoint: PathBuf,
        /// bracket string for dyck (e.g. "([])") or space-separated token ids
        sentence: String,
    },
    /// Train once per axis value and tabulate the resulting metric
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// comma-separated values for the axis
        #[arg(long)]
        values: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = &cli.config {
        run.apply_file(path)?;
    }
    apply_flag_overrides(cli, &mut run);
    run.validate()?;
    Ok(run)
}

fn apply_flag_overrides(cli: &Cli, run: &mut RunConfig) {
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    if let Some(h) = cli.height {
        run.height = h;
    }
    if let Some(l) = cli.depth {
        run.depth = l;
    }
    if let Some(b) = cli.beam {
        run.beam = b;
    }
    if let Some(p) = cli.length_penalty {
        run.length_penalty = p;
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

fn echo_pairs(run: &RunConfig) -> Vec<(String, String)> {
    run.echo()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn dataset_rows(data: &TaskData, split_val: bool) -> Vec<(Vec<usize>, Vec<usize>)> {
    match data {
        TaskData::Cls { train, val } => {
            let set = if split_val { val } else { train };
            set.iter().map(|e| (e.tokens.clone(), vec![e.label])).collect()
        }
        TaskData::Seq { train, val } => {
            let set = if split_val { val } else { train };
            set.iter()
                .map(|e| (e.source.clone(), e.target[1..e.target.len() - 1].to_vec()))
                .collect()
        }
    }
}

fn dataset_paths(dir: &Path, run: &RunConfig) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}.train.tsv", run.task)),
        dir.join(format!("{}.val.tsv", run.task)),
    )
}

fn cmd_gen(cli: &Cli, run: &RunConfig) -> Result<()> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    if !dir.is_dir() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let (train_path, val_path) = dataset_paths(&dir, run);
    refuse_overwrite(&train_path, cli.force)?;
    refuse_overwrite(&val_path, cli.force)?;
    let data = train::make_data(run);
    let header = echo_pairs(run);
    data::write_dataset(&train_path, &header, &dataset_rows(&data, false))?;
    data::write_dataset(&val_path, &header, &dataset_rows(&data, true))?;
    println!("wrote {} and {}", train_path.display(), val_path.display());
    Ok(())
}

fn load_task_data(run: &RunConfig, dir: Option<&Path>) -> Result<TaskData> {
    match dir {
        None => Ok(train::make_data(run)),
        Some(dir) => {
            let (train_path, val_path) = dataset_paths(dir, run);
            let (_, train_rows) = data::read_dataset(&train_path)?;
            let (_, val_rows) = data::read_dataset(&val_path)?;
            train::task_data_from_rows(run, train_rows, val_rows)
        }
    }
}

fn save_checkpoint(
    path: &Path,
    run: &RunConfig,
    out: &TrainOutcome<f32>,
) -> Result<()> {
    let mut echo = run.echo();
    let _ = writeln!(echo, "# best_step = {}", out.best_step);
    let _ = writeln!(echo, "# best_metric = {}", out.best_metric);
    checkpoint::save(path, &echo, &out.params)
}

fn cmd_train(cli: &Cli, run: &RunConfig, data_dir: Option<&Path>) -> Result<()> {
    let out_path = cli.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    refuse_overwrite(&out_path, cli.force)?;
    let data = load_task_data(run, data_dir)?;
    let outcome: TrainOutcome<f32> = train::train(run, &data, |e| {
        println!(
            "step={} train_loss={:.4} val_metric={:.4}",
            e.step, e.train_loss, e.val_metric
        );
    })?;
    save_checkpoint(&out_path, run, &outcome)?;
    println!(
        "best_step={} best_metric={:.4} checkpoint={}",
        outcome.best_step,
        outcome.best_metric,
        out_path.display()
    );
    if outcome.diverged {
        return Err(Error::Numeric(
            "training diverged (non-finite loss); last good checkpoint retained".into(),
        ));
    }
    Ok(())
}

fn load_checkpoint_config(path: &Path) -> Result<(RunConfig, ParamSet<f32>)> {
    let (echo, named) = checkpoint::load(path)?;
    let run = RunConfig::from_echo(&echo)?;
    let params = model::params_from_named::<f32>(&run, named)?;
    Ok((run, params))
}

fn cmd_eval(cli: &Cli, ckpt: &Path, data_dir: Option<&Path>) -> Result<()> {
    let (mut run, params) = load_checkpoint_config(ckpt)?;
    // decoding and seed flags may be overridden; model shape comes from the
    // checkpoint alone
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    let beam = cli.beam.unwrap_or(run.beam);
    let penalty = cli.length_penalty.unwrap_or(run.length_penalty);
    let data = load_task_data(&run, data_dir)?;
    let metric = train::evaluate(&run, &params, &data, beam, penalty)?;
    println!("val_metric={metric:.4}");
    Ok(())
}

fn gradcheck_run(cli: &Cli) -> Result<RunConfig> {
    // tiny by construction; config/flags may adjust task, seed, H, and L
    let mut run = RunConfig::default();
    if let Some(path) = &cli.config {
        run.apply_file(path)?;
    }
    run.d = 8;
    run.n_heads = 2;
    run.d_ffn = 16;
    run.height = run.height.min(4);
    run.depth = run.depth.min(1);
    run.depth_dec = run.depth_dec.min(1);
    run.min_len = if run.task == Task::Dyck { 4 } else { 2 };
    run.max_len = 6;
    run.max_output_length = 8;
    run.dropout = 0.0;
    apply_flag_overrides(cli, &mut run);
    run.height = run.height.clamp(1, 4);
    run.depth = run.depth.min(1);
    run.validate()?;
    Ok(run)
}

fn cmd_gradcheck(cli: &Cli, bits: u32, mutate: bool) -> Result<()> {
    let run = gradcheck_run(cli)?;
    let (report, tol) = match bits {
        32 => (
            model::gradcheck_model::<f32, f64>(&run, run.seed, 1e-4, 1e-6, mutate)?,
            1e-3,
        ),
        // 64-bit: step 1e-5 keeps central-difference roundoff (eps * |loss| / 2h)
        // well under the 1e-6 tolerance; the floor masks only elements where
        // both gradients are below 1e-3, where agreement is absolute anyway
        64 => (
            model::gradcheck_model::<f64, f64>(&run, run.seed, 1e-5, 1e-3, mutate)?,
            1e-6,
        ),
        other => {
            return Err(Error::Config(format!("--bits must be 32 or 64, got {other}")))
        }
    };
    for e in &report.entries {
        println!("{}: max_rel_err = {:.3e}", e.name, e.max_rel_err);
    }
    if report.passes(tol) {
        println!("PASS (max {:.3e} <= tol {tol:.0e})", report.max_rel_err());
        Ok(())
    } else {
        println!("FAIL (max {:.3e} > tol {tol:.0e})", report.max_rel_err());
        Err(Error::GradCheck(format!(
            "max relative error {:.3e} exceeds tolerance {tol:.0e}",
            report.max_rel_err()
        )))
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad {what} value {t:?}")))
        })
        .collect()
}

fn cmd_profile(
    cli: &Cli,
    run: &RunConfig,
    sizes: &str,
    heights: &str,
    dim: usize,
    reps: usize,
    schedule: ProfSchedule,
) -> Result<()> {
    let sizes = parse_list(sizes, "--sizes")?;
    let heights = parse_list(heights, "--heights")?;
    if sizes.is_empty() || heights.is_empty() {
        return Err(Error::Config("profile needs at least one size and height".into()));
    }
    let sched = match schedule {
        ProfSchedule::Sequential => Schedule::Sequential,
        ProfSchedule::Parallel => Schedule::LevelParallel,
    };
    let mut csv = String::new();
    csv.push_str(profiler::CSV_HEADER);
    csv.push('\n');
    for &n in &sizes {
        for &h in &heights {
            let rec = profiler::profile_run(n, h, dim, run.seed, reps, sched)?;
            csv.push_str(&rec.csv_row());
            csv.push('\n');
        }
    }
    match &cli.out {
        Some(path) => {
            refuse_overwrite(path, cli.force)?;
            std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn tokenize(run: &RunConfig, sentence: &str) -> Result<Vec<usize>> {
    let vocab = run.vocab_size();
    let tokens: Vec<usize> = if run.task == Task::Dyck
        && sentence.chars().all(|c| "()[] \t".contains(c))
    {
        sentence
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '(' => data::OPEN_PAREN,
                ')' => data::CLOSE_PAREN,
                '[' => data::OPEN_SQUARE,
                _ => data::CLOSE_SQUARE,
            })
            .collect()
    } else {
        sentence
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Dataset(format!("cannot tokenize {t:?}")))
            })
            .collect::<Result<_>>()?
    };
    if tokens.is_empty() {
        return Err(Error::EmptyInput("sentence"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Dataset(format!(
            "token id {t} outside the checkpoint vocabulary of {vocab}"
        )));
    }
    Ok(tokens)
}

fn cmd_inspect(ckpt: &Path, sentence: &str) -> Result<()> {
    let (run, params) = load_checkpoint_config(ckpt)?;
    let tokens = tokenize(&run, sentence)?;
    if tokens.len() > run.max_len {
        return Err(Error::Contract(format!(
            "input length {} exceeds the configured maximum {}",
            tokens.len(),
            run.max_len
        )));
    }
    let mut tape = Tape::<f32>::new();
    let (_, bound) = model::bind(&mut tape, &params, &run, false)?;
    let pre_cfg = model::pre_config(&run);
    let mat = pre_encode(&mut tape, &tokens, &pre_cfg, &bound.pre, &mut crate::layers::DropoutCtx::disabled())?;
    let rows: Vec<_> = (0..tokens.len()).map(|i| tape.slice_row(mat, i)).collect();
    let mut trace = Vec::new();
    let hooks = EncodeHooks {
        counters: None,
        trace: Some(&mut trace),
        dropout_rng: None,
    };
    let chart = encode_sequential(&mut tape, &rows, model::tf_config(&run), &bound.enc, hooks)?;
    let weights: std::collections::HashMap<_, _> = trace.into_iter().collect();
    println!("chart for {} tokens, height {}", tokens.len(), chart.height());
    for h in (2..=chart.height()).rev() {
        for span in chart.cells_of_length(h)? {
            let w = &weights[&span];
            let best = w
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let pretty: Vec<String> = w.iter().map(|x| format!("{x:.3}")).collect();
            println!(
                "[{},{}] best split after {}, weights [{}]",
                span.start,
                span.end,
                span.start + best,
                pretty.join(", ")
            );
        }
    }
    for span in chart.cells_of_length(1)? {
        println!("[{},{}] token {}", span.start, span.end, tokens[span.start]);
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, base: &RunConfig, axis: SweepAxis, values: &str) -> Result<()> {
    let values = parse_list(values, "--values")?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("sweep"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let axis_name = match axis {
        SweepAxis::Height => "height",
        SweepAxis::Depth => "depth",
    };
    println!("{axis_name}\tval_metric\tcheckpoint");
    for &v in &values {
        let mut run = base.clone();
        match axis {
            SweepAxis::Height => run.height = v,
            SweepAxis::Depth => run.depth = v,
        }
        run.validate()?;
        let ckpt = dir.join(format!("{axis_name}_{v}.ckpt"));
        refuse_overwrite(&ckpt, cli.force)?;
        let data = train::make_data(&run);
        let outcome: TrainOutcome<f32> = train::train(&run, &data, |_| {})?;
        save_checkpoint(&ckpt, &run, &outcome)?;
        println!("{v}\t{:.4}\t{}", outcome.best_metric, ckpt.display());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Gen => {
            let run = load_config(&cli)?;
            cmd_gen(&cli, &run)
        }
        Cmd::Train { data } => {
            let run = load_config(&cli)?;
            cmd_train(&cli, &run, data.as_deref())
        }
        Cmd::Eval { checkpoint, data } => cmd_eval(&cli, checkpoint, data.as_deref()),
        Cmd::Gradcheck { bits, mutate } => cmd_gradcheck(&cli, *bits, *mutate),
        Cmd::Profile { sizes, heights, dim, reps, schedule } => {
            let run = load_config(&cli)?;
            cmd_profile(&cli, &run, sizes, heights, *dim, *reps, *schedule)
        }
        Cmd::Inspect { checkpoint, sentence } => cmd_inspect(checkpoint, sentence),
        Cmd::Sweep { axis, values } => {
            let run = load_config(&cli)?;
            cmd_sweep(&cli, &run, *axis, values)
        }
    }
}
