//! `adaptod` command-line driver: dataset generation, two-stage training and
//! streaming evaluation on the synthetic long-tailed benchmark.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptod::doda::{AdaptationEvent, StateSnapshot};
use adaptod::nn::{Checkpoint, EpochLog};
use adaptod::pipeline::{
    adapt_eval, alpha_sweep, head_tail, log_histogram, train_on, Dataset, Detector, Histogram,
    LogitSets, RunConfig,
};
use adaptod::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "adaptod", version, about = "Long-tailed OOD detection with test-time outlier adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ID train/test, outlier and true-OOD sample files.
    Generate(GenerateArgs),
    /// Pre-train with cross-entropy, then fine-tune with the dual-normalized energy loss.
    Train(TrainArgs),
    /// Stream the test set once per adaptation mode and report metrics.
    AdaptEval(EvalArgs),
    /// Evaluate head-class and tail-class ID samples against OOD separately.
    HeadTail(EvalArgs),
    /// DODA AUROC across a grid of filter multipliers.
    AlphaSweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct DataFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    class_scale: Option<f64>,
    #[arg(long)]
    outlier_scale: Option<f64>,
    #[arg(long)]
    n_test_per_class: Option<usize>,
    #[arg(long)]
    n_outliers: Option<usize>,
    #[arg(long)]
    n_true_ood: Option<usize>,
    #[arg(long)]
    shift: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    epochs_finetune: Option<usize>,
    #[arg(long)]
    lr_pretrain: Option<f64>,
    #[arg(long)]
    lr_finetune: Option<f64>,
    #[arg(long)]
    batch_pretrain: Option<usize>,
    #[arg(long)]
    b_in: Option<usize>,
    #[arg(long)]
    b_out: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    dne_weight: Option<f64>,
    /// Update every layer during fine-tuning instead of the last one only.
    #[arg(long)]
    finetune_all_layers: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `generate`; used with `--model`.
    #[arg(long, requires = "model", conflicts_with = "logits")]
    data: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    /// Directory of `<set>.logits.csv` files, instead of `--data` and `--model`.
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Start adaptation from a saved state snapshot instead of fitting one.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    virtual_count: Option<u64>,
    /// Label-assisted fractions for the sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    label_fractions: Option<Vec<f64>>,
    /// Use an all-zero initial outlier distribution.
    #[arg(long)]
    zero_init: bool,
    #[arg(long)]
    ood_fraction: Option<f64>,
    /// Write the per-sample DODA event log.
    #[arg(long)]
    events: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Filter multipliers, comma separated.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, f: &DataFlags) {
    let d = &mut cfg.data;
    set(&mut d.k, f.k);
    set(&mut d.n_max, f.n_max);
    set(&mut d.rho, f.rho);
    set(&mut d.d, f.d);
    set(&mut d.class_scale, f.class_scale);
    set(&mut d.outlier_scale, f.outlier_scale);
    set(&mut d.n_test_per_class, f.n_test_per_class);
    set(&mut d.n_outliers, f.n_outliers);
    set(&mut d.n_true_ood, f.n_true_ood);
    set(&mut d.shift, f.shift);
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalArgs) {
    set(&mut cfg.doda.alpha, a.alpha);
    set(&mut cfg.doda.virtual_count, a.virtual_count);
    set(&mut cfg.doda.label_fractions, a.label_fractions.clone());
    set(&mut cfg.stream.ood_fraction, a.ood_fraction);
    cfg.doda.zero_init |= a.zero_init;
    cfg.stream.record_events |= a.events;
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn finish(out: &Path, command: &str, cfg: &RunConfig, inputs: Vec<String>, mut outputs: Vec<String>) -> Result<()> {
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command,
        config: cfg,
        inputs,
        outputs,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_data(&mut cfg, &args.data);
    let cfg = cfg.synced();
    cfg.validate()?;
    let out = &args.common.out;
    let ds = Dataset::generate(&cfg.data, cfg.seed)?;
    ds.save(out, cfg.data.shift)?;
    write_json(&out.join("config.json"), &cfg)?;
    eprintln!(
        "wrote {} train, {} test, {} outlier and {} true-OOD samples to {}",
        ds.id_train.len(),
        ds.id_test.len(),
        ds.outliers.len(),
        ds.true_ood.len(),
        out.display()
    );
    Ok(())
}

fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("stage,epoch,steps,total,ce,dne_c,dne_s\n");
    for e in log {
        let l = &e.loss;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", e.stage, e.epoch, e.steps, l.total, l.ce, l.dne_c, l.dne_s);
    }
    s
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.hidden, args.hidden);
    let t = &mut cfg.train;
    set(&mut t.epochs_pretrain, args.epochs_pretrain);
    set(&mut t.epochs_finetune, args.epochs_finetune);
    set(&mut t.lr_pretrain, args.lr_pretrain);
    set(&mut t.lr_finetune, args.lr_finetune);
    set(&mut t.batch_pretrain, args.batch_pretrain);
    set(&mut t.b_in, args.b_in);
    set(&mut t.b_out, args.b_out);
    set(&mut t.momentum, args.momentum);
    set(&mut t.dne_weight, args.dne_weight);
    t.finetune_all_layers |= args.finetune_all_layers;
    let cfg = cfg.synced();
    cfg.train.validate()?;

    let ds = Dataset::load(&args.data)?;
    let outcome = train_on(&ds, &cfg)?;
    let out = &args.common.out;
    create_dir(out)?;
    Checkpoint::capture(&outcome.model, cfg.seed, outcome.stage).save(&out.join("model.json"))?;
    write_text(&out.join("loss_log.csv"), &loss_csv(&outcome.log))?;
    let mut outputs = vec!["model.json".to_string(), "loss_log.csv".to_string()];
    let names = LogitSets::from_model(&outcome.model, &ds)?.save(&out.join("logits"))?;
    outputs.extend(names.into_iter().map(|n| format!("logits/{n}")));
    finish(out, "train", &cfg, vec![display(&args.data)], outputs)?;
    if let Some(last) = outcome.log.last() {
        eprintln!("trained to stage {}; last epoch loss {}", outcome.stage, last.loss.total);
    }
    Ok(())
}

struct EvalInputs {
    cfg: RunConfig,
    sets: LogitSets,
    detector: Detector,
    inputs: Vec<String>,
}

fn eval_inputs(args: &EvalArgs) -> Result<EvalInputs> {
    let mut cfg = load_config(&args.common)?;
    apply_eval(&mut cfg, args);
    let cfg = cfg.synced();
    cfg.validate()?;
    let mut inputs = Vec::new();
    let sets = match (&args.logits, &args.data, &args.model) {
        (Some(dir), _, _) => {
            inputs.push(display(dir));
            LogitSets::load(dir)?
        }
        (None, Some(data), Some(model)) => {
            inputs.push(display(data));
            inputs.push(display(model));
            let ds = Dataset::load(data)?;
            let model = Checkpoint::load(model)?.to_model()?;
            LogitSets::from_model(&model, &ds)?
        }
        _ => return Err(Error::Config("pass either --logits or both --data and --model".into())),
    };
    let detector = match &args.resume {
        Some(path) => {
            inputs.push(display(path));
            let (init, stats) = StateSnapshot::load(path)?.restore()?;
            if init.k() != sets.k {
                return Err(Error::Config(format!(
                    "snapshot has k = {} but the logits have k = {}",
                    init.k(),
                    sets.k
                )));
            }
            Detector { stats, init }
        }
        None => Detector::fit(&sets, &cfg.doda)?,
    };
    Ok(EvalInputs {
        cfg,
        sets,
        detector,
        inputs,
    })
}

fn events_csv(events: &[AdaptationEvent]) -> String {
    let mut s = String::from("sample_index,accepted,global_energy,calibrated_score\n");
    for e in events {
        let _ = writeln!(s, "{},{},{},{}", e.sample_index, e.accepted, e.global_energy, e.calibrated_score);
    }
    s
}

fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("bin,ln_lo,ln_hi");
    for (name, _) in &h.populations {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    for b in 0..h.edges.len() - 1 {
        let _ = write!(s, "{b},{},{}", h.edges[b], h.edges[b + 1]);
        for (_, counts) in &h.populations {
            let _ = write!(s, ",{}", counts[b]);
        }
        s.push('\n');
    }
    s
}

fn histogram_svg(h: &Histogram) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
    let bins = h.edges.len() - 1;
    let fractions: Vec<Vec<f64>> = h
        .populations
        .iter()
        .map(|(_, c)| {
            let n = c.iter().sum::<usize>().max(1) as f64;
            c.iter().map(|&x| x as f64 / n).collect()
        })
        .collect();
    let peak = fractions.iter().flatten().fold(0.0f64, |a, &b| a.max(b)).max(1e-12);
    let bw = (W - 2.0 * PAD) / bins as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/>"#,
        y = H - PAD,
        x = W - PAD
    );
    for (p, frac) in fractions.iter().enumerate() {
        let color = COLORS[p % COLORS.len()];
        for (b, f) in frac.iter().enumerate().filter(|(_, f)| **f > 0.0) {
            let height = (H - 2.0 * PAD) * f / peak;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{height:.2}" fill="{color}" fill-opacity="0.35"/>"#,
                PAD + bw * b as f64,
                H - PAD - height
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 90.0,
            PAD + 14.0 * p as f64,
            h.populations[p].0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}">ln score {:.2}</text><text x="{}" y="{}" text-anchor="end">{:.2}</text>"#,
        H - PAD + 16.0,
        h.edges[0],
        W - PAD,
        H - PAD + 16.0,
        h.edges[bins]
    );
    s.push_str("</svg>\n");
    s
}

fn cmd_adapt_eval(args: EvalArgs) -> Result<()> {
    let EvalInputs {
        cfg,
        sets,
        detector,
        inputs,
    } = eval_inputs(&args)?;
    let items = sets.test_stream(&cfg)?;
    let run = adapt_eval(&detector, items, &cfg)?;
    let out = &args.common.out;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &run.report)?;
    let mut outputs = vec!["metrics.json".to_string()];
    if cfg.stream.record_events {
        write_text(&out.join("events.csv"), &events_csv(&run.doda_outcome.events))?;
        outputs.push("events.csv".into());
    }
    StateSnapshot::capture(&run.doda_outcome.state, &detector.stats).save(&out.join("doda_state.json"))?;
    outputs.push("doda_state.json".into());

    let score_all = |state: &adaptod::doda::OutlierDistribution, rows: &[adaptod::energy::LogitVector]| {
        rows.iter().map(|l| state.score(l)).collect::<Result<Vec<_>>>()
    };
    let id = score_all(&run.doda_outcome.state, &sets.id_test)?;
    let outlier_init = score_all(&detector.init, &sets.outliers)?;
    let true_ood = score_all(&detector.init, &sets.true_ood)?;
    let adapted = score_all(&run.doda_outcome.state, &sets.true_ood)?;
    let hist = log_histogram(
        &[
            ("id", &id),
            ("outlier-init", &outlier_init),
            ("true-ood", &true_ood),
            ("adapted", &adapted),
        ],
        50,
    )?;
    write_text(&out.join("histogram.csv"), &histogram_csv(&hist))?;
    write_text(&out.join("histogram.svg"), &histogram_svg(&hist))?;
    outputs.extend(["histogram.csv".to_string(), "histogram.svg".to_string()]);
    finish(out, "adapt-eval", &cfg, inputs, outputs)?;
    let r = &run.report;
    eprintln!(
        "AUROC no-TTA {:.4}  DODA {:.4}  oracle {:.4}  ({} of {} samples adapted)",
        r.no_tta.report.auroc, r.doda.report.auroc, r.oracle.report.auroc, r.doda.accepted, r.stream_len
    );
    Ok(())
}

fn cmd_head_tail(args: EvalArgs) -> Result<()> {
    let EvalInputs {
        cfg,
        sets,
        detector,
        inputs,
    } = eval_inputs(&args)?;
    let items = sets.test_stream(&cfg)?;
    let report = head_tail(&detector, &items, sets.k)?;
    let out = &args.common.out;
    create_dir(out)?;
    write_json(&out.join("headtail.json"), &report)?;
    finish(out, "head-tail", &cfg, inputs, vec!["headtail.json".into()])?;
    eprintln!(
        "AUROC head {:.4}  tail {:.4}",
        report.head.report.auroc, report.tail.report.auroc
    );
    Ok(())
}

fn cmd_alpha_sweep(args: SweepArgs) -> Result<()> {
    let EvalInputs {
        mut cfg,
        sets,
        detector,
        inputs,
    } = eval_inputs(&args.eval)?;
    set(&mut cfg.alpha_grid, args.alphas);
    let items = sets.test_stream(&cfg)?;
    let points = alpha_sweep(&detector, &items, &cfg.alpha_grid)?;
    let mut csv = String::from("alpha,auroc\n");
    for p in &points {
        let _ = writeln!(csv, "{},{}", p.alpha, p.auroc);
    }
    let out = &args.eval.common.out;
    create_dir(out)?;
    write_text(&out.join("alpha_sweep.csv"), &csv)?;
    finish(out, "alpha-sweep", &cfg, inputs, vec!["alpha_sweep.csv".into()])
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::InvalidSpec(_) => 2,
        Error::Range(_) | Error::Diverged { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::AdaptEval(a) => cmd_adapt_eval(a),
        Command::HeadTail(a) => cmd_head_tail(a),
        Command::AlphaSweep(a) => cmd_alpha_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
