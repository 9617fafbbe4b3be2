//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use ctas_core::data::{self, Action, Ctas};
use ctas_core::evaluation::{self, EvalOptions, GenEvalOptions, SweepGrid, DEFAULT_PREFIXES};
use ctas_core::generation::{self, GenRequest, SampleMode, Termination};
use ctas_core::model::{Model, ModelError};
use ctas_core::numerics::{finite_difference_check, GradCheckOptions, NumericError};
use ctas_core::objectives;
use ctas_core::synth::{self, SynthSpec};
use ctas_core::training::{self, Checkpoint, Trainer, BEST_CHECKPOINT, FINAL_CHECKPOINT, TRAIN_LOG};

use crate::config::RunConfig;
use crate::error::{CliResult, Code, Failure, WithCode};
use crate::{
    AblateArgs, EvalArgs, GenerateArgs, GradcheckArgs, ModelOverrides, SweepArgs, SynthArgs, TrainArgs,
};

pub const TRAIN_SPLIT: &str = "train.jsonl";
pub const TEST_SPLIT: &str = "test.jsonl";
pub const RUN_CONFIG: &str = "run.json";

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::msg(Code::Io, format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::msg(Code::Io, format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => {
            fs::create_dir_all(parent).map_err(|e| Failure::msg(Code::Io, format!("{}: {e}", parent.display())))
        }
        None => Ok(()),
    }
}

fn load_config(path: Option<&Path>, over: &ModelOverrides) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    over.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn data_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Failure::msg(Code::Usage, "no corpus given: pass --data or set \"data\" in the config"))
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::msg(Code::Io, format!("cannot read spec {}: {e}", path.display())))?;
            SynthSpec::from_json(&text)?
        }
        None => SynthSpec::two_goal_demo(2000, 0),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.num_sequences {
        spec.num_sequences = n;
    }
    let (corpus, vocab) = synth::generate(&spec)?;
    ensure_parent(&args.out)?;
    data::write_corpus(&args.out, &corpus, &vocab)?;
    println!("wrote {} sequences to {}", corpus.len(), args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let data = data_path(&args.data, &cfg)?;
    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| Failure::msg(Code::Io, format!("{}: {e}", out.display())))?;

    let resume = args.resume && out.join(FINAL_CHECKPOINT).is_file();
    let (mut trainer, augmented) = if resume {
        let ck = Checkpoint::load(out)?;
        let train_raw = data::load_corpus_with_vocab(out.join(TRAIN_SPLIT), &ck.model.vocab)?;
        let eos = ck.model.vocab.eos();
        let augmented = train_raw
            .iter()
            .map(|s| data::append_eos(s, eos, ck.prep.eos_gap))
            .collect::<Result<Vec<_>, _>>()?;
        let mut trainer = Trainer::from_checkpoint(ck)?;
        trainer.config.epochs = cfg.train.epochs;
        log::info!("resuming at epoch {} of {}", trainer.epoch, trainer.config.epochs);
        (trainer, augmented)
    } else {
        let (corpus, vocab) = data::load_corpus(&data)?;
        let (train_raw, test) = data::split_by_goal(&corpus, cfg.split.train_fraction, cfg.split_seed(), &vocab)?;
        data::write_corpus(out.join(TRAIN_SPLIT), &train_raw, &vocab)?;
        data::write_corpus(out.join(TEST_SPLIT), &test, &vocab)?;
        write_text(&out.join(RUN_CONFIG), &serde_json::to_string_pretty(&cfg).expect("config serialization"))?;
        for stale in [FINAL_CHECKPOINT, BEST_CHECKPOINT, TRAIN_LOG] {
            let _ = fs::remove_file(out.join(stale));
        }
        let (model, augmented, prep) = training::prepare(&train_raw, vocab, &cfg.model, &cfg.train)?;
        log::info!(
            "{} train / {} test sequences, {} marks, {} clusters, max_len {}",
            train_raw.len(),
            test.len(),
            model.vocab.num_marks(),
            model.config.num_clusters,
            model.max_len()
        );
        (Trainer::new(model, cfg.train.clone(), prep)?, augmented)
    };
    let logs = trainer.fit(&augmented, Some(out), |e| {
        log::info!(
            "epoch {:>3} nll {:.4} goal_ce {:.4} margin_goal {:.4} margin_action {:.4} total {:.4}",
            e.epoch,
            e.nll,
            e.goal_ce,
            e.margin_goal,
            e.margin_action,
            e.total
        )
    })?;
    match logs.last() {
        Some(last) => println!("trained to epoch {} (total loss {:.5}); checkpoint in {}", last.epoch, last.total, out.display()),
        None => println!("nothing to do: already at epoch {}", trainer.epoch),
    }
    Ok(())
}

fn parse_prefixes(flag: &Option<Vec<f64>>) -> Vec<f64> {
    flag.clone().unwrap_or_else(|| DEFAULT_PREFIXES.to_vec())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let data = match &args.data {
        Some(p) => p.clone(),
        None if args.ckpt.join(TEST_SPLIT).is_file() => args.ckpt.join(TEST_SPLIT),
        None => return Err(Failure::msg(Code::Usage, "no test corpus: pass --data")),
    };
    let test = data::load_corpus_with_vocab(&data, &ck.model.vocab)?;
    let prefixes = parse_prefixes(&args.prefixes);
    let generation = if args.generate {
        Some(GenEvalOptions {
            seed: args.seed,
            mode: if args.greedy { SampleMode::Greedy } else { SampleMode::Stochastic },
            max_len: args.max_len.unwrap_or(ck.prep.gen_max_len),
            eos_gap: ck.prep.eos_gap,
        })
    } else {
        None
    };
    let config = json!({
        "model": ck.model.config,
        "train": ck.train_config,
        "epoch": ck.epoch,
        "prefixes": prefixes,
        "generation": generation.as_ref().map(|g| json!({
            "seed": g.seed, "mode": g.mode, "max_len": g.max_len, "eos_gap": g.eos_gap,
        })),
    });
    let opts = EvalOptions { prefixes, generation, seed: args.seed, config };
    let report = evaluation::evaluate(&ck.model, &test, &opts)?;
    write_text(&args.report, &serde_json::to_string_pretty(&report).expect("report serialization"))?;
    let gpa: Vec<String> = report.gpa_at.iter().map(|(k, v)| format!("gpa@{k} {v:.4}")).collect();
    let mut line = format!("sequences {} apa {:.4} mae {:.4} {}", report.sequences, report.apa, report.mae, gpa.join(" "));
    if let (Some(cl), Some(apa), Some(mae)) = (report.cl, report.gen_apa, report.gen_mae) {
        line.push_str(&format!(" cl {cl:.4} gen_apa {apa:.4} gen_mae {mae:.4}"));
    }
    println!("{line}");
    Ok(())
}

#[derive(Serialize)]
struct GenSidecar {
    id: String,
    goal: String,
    length: usize,
    reason: Termination,
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let model = &ck.model;
    let goal = model.vocab.goal_id(&args.goal)?;
    let mark = model.vocab.mark_id(&args.first_mark)?;
    if mark == model.vocab.eos() {
        return Err(Failure::msg(Code::Data, "the first action cannot be EOS"));
    }
    if args.count == 0 {
        return Err(Failure::msg(Code::Usage, "--count must be positive"));
    }
    let eos = model.vocab.eos();
    let mut sequences = Vec::with_capacity(args.count);
    let mut sidecar = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let req = GenRequest {
            goal,
            first: Action::new(mark, args.first_t),
            max_len: args.max_len.unwrap_or(ck.prep.gen_max_len),
            seed: args.seed.wrapping_add(i as u64),
            mode: if args.greedy { SampleMode::Greedy } else { SampleMode::Stochastic },
            eos_gap: ck.prep.eos_gap,
        };
        let out = generation::generate(model, &req, format!("gen{i:05}"))?;
        let actions = out.actions(eos).to_vec();
        sidecar.push(GenSidecar {
            id: out.sequence.id.clone(),
            goal: args.goal.clone(),
            length: actions.len(),
            reason: out.reason,
        });
        sequences.push(Ctas { id: out.sequence.id, goal, actions });
    }
    ensure_parent(&args.out)?;
    data::write_corpus(&args.out, &sequences, &model.vocab)?;
    let side = sidecar_path(&args.out);
    write_text(&side, &serde_json::to_string_pretty(&sidecar).expect("sidecar serialization"))?;
    println!("wrote {} sequences to {} (reasons in {})", sequences.len(), args.out.display(), side.display());
    Ok(())
}

/// `gen.jsonl` → `gen.reasons.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("reasons.json")
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let (corpus, vocab) = match &cfg.data {
        Some(p) => data::load_corpus(p)?,
        None => synth::generate(&SynthSpec::two_goal_demo(40, cfg.train.seed))?,
    };
    let (model, augmented, _) = training::prepare(&corpus, vocab, &cfg.model, &cfg.train)?;
    let seq = augmented
        .iter()
        .filter(|s| s.len() <= model.max_len())
        .max_by_key(|s| s.len())
        .cloned()
        .ok_or_else(|| Failure::msg(Code::Data, "corpus has no usable sequence"))?;
    let w = cfg.train.loss_weights();
    let report = finite_difference_check(
        |store, tape| {
            let m = Model { params: store.clone(), ..model.clone() };
            let p = store.bind(tape)?;
            objectives::total_loss(&m, tape, &p, std::slice::from_ref(&seq), &w).map_err(|e| match e {
                ModelError::Numeric(n) => n,
                other => NumericError::Contract(other.to_string()),
            })
        },
        &model.params,
        GradCheckOptions::default(),
    )
    .code(Code::Model)?;
    let worst = report.worst().map(|c| c.name.clone()).unwrap_or_default();
    println!(
        "checked {} coordinates on a {}-action sequence: max relative error {:.3e} (tol {:e}, worst {worst})",
        report.checked,
        seq.len(),
        report.max_rel_error,
        args.tol
    );
    if !report.passes(args.tol) {
        return Err(Failure::msg(
            Code::Gradcheck,
            format!("max relative error {:.3e} exceeds {:e} in {worst}", report.max_rel_error, args.tol),
        ));
    }
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let data = data_path(&args.data, &cfg)?;
    let text = fs::read_to_string(&args.grid)
        .map_err(|e| Failure::msg(Code::Io, format!("cannot read grid {}: {e}", args.grid.display())))?;
    let grid: SweepGrid = serde_json::from_str(&text).code(Code::Config)?;
    let (corpus, vocab) = data::load_corpus(&data)?;
    let (train_raw, test) = data::split_by_goal(&corpus, cfg.split.train_fraction, cfg.split_seed(), &vocab)?;
    let rows = evaluation::sensitivity_sweep(&train_raw, &test, &vocab, &cfg.model, &cfg.train, &grid, &cfg.eval.prefixes);
    write_text(&args.out, &evaluation::sweep_csv(&rows, &cfg.eval.prefixes))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("wrote {} sweep rows ({failed} failed) to {}", rows.len(), args.out.display());
    Ok(())
}

pub fn ablate_delete(args: &AblateArgs) -> CliResult<()> {
    let (corpus, vocab) = data::load_corpus(&args.data)?;
    let thinned = data::delete_random(&corpus, args.fraction, args.seed)?;
    ensure_parent(&args.out)?;
    data::write_corpus(&args.out, &thinned, &vocab)?;
    let before: usize = corpus.iter().map(Ctas::len).sum();
    let after: usize = thinned.iter().map(Ctas::len).sum();
    println!(
        "kept {} of {} sequences and {after} of {before} actions; wrote {}",
        thinned.len(),
        corpus.len(),
        args.out.display()
    );
    Ok(())
}
