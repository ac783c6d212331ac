use std::path::{Path, PathBuf};

use serde::Serialize;

use signbench::dataio::keypoints::read_keypoints;
use signbench::dataio::lip::read_lip;
use signbench::dataio::subtitles::{parse_subtitles, write_subtitles, Cue, SubtitleFormat};
use signbench::dataio::synth::{SynthConfig, SynthCorpus};
use signbench::decoder::decoding::Search;
use signbench::decoder::tokenizer::Tokenizer;
use signbench::islr::IslrMetrics;
use signbench::metrics::{slt_scores, ssa_scores, EvalReport};
use signbench::model::SignModel;
use signbench::pipeline::{align, translate, AlignConfig, CueReport};
use signbench::ssa::cue_frames;
use signbench::tensor::{load_checkpoint, save_checkpoint, Init};
use signbench::training::{
    run_curriculum, run_finetune, train_islr, IslrData, IslrModels, TaskData, TrainLog, Trainer,
};

use crate::config::{self, Loaded, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{Cli, Command, EvalTask, Preset};

pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::SynthData {
            classes,
            samples,
            isolated_per_class,
            out,
        } => synth_data(seed.unwrap_or(0), classes as usize, samples as usize, isolated_per_class as usize, &out),
        Command::PrintConfig { preset } => {
            let cfg = match preset {
                Preset::Toy => RunConfig::toy(),
                Preset::Paper => RunConfig::default(),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::TrainIslr { config, out } => cmd_train_islr(&load_training(config.as_deref(), seed)?, config.as_deref(), &out),
        Command::Pretrain { config, out } => cmd_pretrain(&load_training(config.as_deref(), seed)?, config.as_deref(), &out),
        Command::Finetune { config, out } => cmd_finetune(&load_training(config.as_deref(), seed)?, config.as_deref(), &out),
        Command::Translate {
            checkpoint,
            config,
            tokenizer,
            keypoints,
            lip,
            start,
            end,
            lang,
            beam,
            debug,
        } => {
            let (model, tok) = load_model(&checkpoint, config.as_deref(), tokenizer.as_deref())?;
            let clip = read_keypoints(&keypoints)?;
            let lips = read_lip(&lip)?;
            if start > end || end >= clip.frames {
                return Err(CliError::usage(format!(
                    "span {start}-{end} is outside the {}-frame video",
                    clip.frames
                )));
            }
            if !tok.langs().iter().any(|l| l == &lang) {
                return Err(CliError::usage(format!(
                    "unknown language {lang:?}; the tokenizer knows {}",
                    tok.langs().join(", ")
                )));
            }
            let t = translate(&model, &tok, &clip, &lips, (start, end), &lang, search(beam))?;
            if debug {
                eprintln!("window origin: {}", t.origin);
                eprintln!("prompt: {}", tok.render(&t.prompt));
                eprintln!("prompt ids: {:?}", t.prompt);
                eprintln!("output ids: {:?}", t.tokens);
            }
            println!("{}", t.text);
            Ok(())
        }
        Command::Align {
            checkpoint,
            config,
            tokenizer,
            keypoints,
            lip,
            subs,
            out,
            report,
            beam,
            beta,
            debug,
        } => {
            let in_fmt = SubtitleFormat::from_path(&subs).map_err(|e| CliError::usage(e.to_string()))?;
            let out_fmt = SubtitleFormat::from_path(&out).map_err(|e| CliError::usage(e.to_string()))?;
            let (model, tok) = load_model(&checkpoint, config.as_deref(), tokenizer.as_deref())?;
            let clip = read_keypoints(&keypoints)?;
            let lips = read_lip(&lip)?;
            let audio = parse_subtitles(&subs, in_fmt)?;
            let cfg = AlignConfig {
                beta,
                search: search(beam),
            };
            let a = align(&model, &tok, &clip, &lips, &audio, &cfg)?;
            if debug {
                for r in &a.report {
                    eprintln!("cue {}: decoded {:?} resolved {:?}", r.cue_index, r.predicted, r.resolved);
                }
            }
            write_subtitles(&out, &a.cues, out_fmt)?;
            let report_path = report.unwrap_or_else(|| out.with_extension("json"));
            write_json(
                &report_path,
                &AlignReport {
                    cues: &a.cues,
                    report: &a.report,
                    warnings: &a.warnings,
                },
            )?;
            let mut m = RunManifest::new("align", config.as_deref(), &[], seed.unwrap_or(0), config::env_vars());
            m.add_inputs(&[], &[&checkpoint, &keypoints, &lip, &subs])?;
            m.write(&out, &out.with_extension("run.json"))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Evaluate {
            pred,
            truth,
            task,
            fps,
            frames,
            out,
        } => {
            let report = evaluate(&pred, &truth, task, fps, frames)?;
            let s = serde_json::to_string_pretty(&report)?;
            println!("{s}");
            if let Some(o) = out {
                std::fs::write(&o, format!("{s}\n"))?;
                let mut m = RunManifest::new("evaluate", None, &[], seed.unwrap_or(0), config::env_vars());
                m.add_inputs(&[], &[&pred, &truth])?;
                m.write(&o, &o.with_extension("run.json"))?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct AlignReport<'a> {
    cues: &'a [Cue],
    report: &'a [CueReport],
    warnings: &'a [String],
}

#[derive(Serialize)]
struct IslrSummary {
    steps: usize,
    final_loss: Option<f64>,
    pose: IslrMetrics,
    lip: IslrMetrics,
    fused: IslrMetrics,
}

fn search(beam: usize) -> Search {
    if beam <= 1 {
        Search::Greedy
    } else {
        Search::Beam(beam)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn synth_data(seed: u64, classes: usize, samples: usize, isolated: usize, out: &Path) -> CliResult<()> {
    let cfg = SynthConfig {
        seed,
        n_classes: classes,
        n_samples: samples,
        isolated_per_class: isolated,
        ..SynthConfig::default()
    };
    let corpus = SynthCorpus::generate(&cfg).map_err(|e| match e {
        signbench::Error::Config(m) => CliError::usage(m),
        e => e.into(),
    })?;
    std::fs::create_dir_all(out)?;
    corpus.write(out)?;
    let mut m = RunManifest::new("synth-data", None, &[], seed, config::env_vars());
    m.write(out, &out.join("run.json"))?;
    println!("{}", out.join("manifest.json").display());
    Ok(())
}

fn load_training(path: Option<&Path>, seed: Option<u64>) -> CliResult<Loaded> {
    let mut l = config::load(path, config::env_vars())?;
    if let Some(s) = seed {
        l.config.train.seed = s;
        l.config.islr.seed = s;
    }
    Ok(l)
}

fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))
}

fn tokenizer_for<'a>(cfg: &RunConfig, corpus: impl IntoIterator<Item = &'a str>) -> CliResult<Tokenizer> {
    if let Some(p) = &cfg.tokenizer.path {
        return Ok(Tokenizer::load(p)?);
    }
    let langs: Vec<&str> = cfg.tokenizer.langs.iter().map(String::as_str).collect();
    Ok(Tokenizer::train(corpus, cfg.tokenizer.vocab_size, &langs)?)
}

fn load_task_data(cfg: &RunConfig) -> CliResult<TaskData> {
    let mut data = TaskData::from_manifest(
        &cfg.data.manifest,
        cfg.data.split,
        &cfg.data.filter,
        cfg.model.backbone.lip_dim,
    )?;
    if let Some(n) = cfg.data.max_samples {
        data.truncate(n);
    }
    if data.slt.is_empty() {
        return Err(CliError::data(format!(
            "{} has no admissible sentences",
            cfg.data.manifest.display()
        )));
    }
    Ok(data)
}

/// Resolved config, tokenizer and manifest shared by the training commands.
fn finish_training(
    loaded: &Loaded,
    command: &str,
    config_path: Option<&Path>,
    seed: u64,
    tok: &Tokenizer,
    inputs: &[&Path],
    out: &Path,
) -> CliResult<()> {
    write_json(&out.join("config.json"), &loaded.config)?;
    tok.save(&out.join("tokenizer.json"))?;
    let mut m = RunManifest::new(command, config_path, &loaded.source, seed, loaded.env.clone());
    m.add_inputs(&loaded.source, inputs)?;
    m.write(out, &out.join("run.json"))
}

fn cmd_train_islr(loaded: &Loaded, config_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = &loaded.config;
    let data = IslrData::from_manifest(&cfg.data.islr_manifest, &cfg.data.vocab, cfg.data.split, cfg.model.backbone.lip_dim)?;
    if data.is_empty() {
        return Err(CliError::data(format!("{} has no clips", cfg.data.islr_manifest.display())));
    }
    prepare_out(out)?;
    let tok = tokenizer_for(cfg, data.glosses.iter().map(String::as_str))?;
    let models = IslrModels::new(
        &mut Init::new(cfg.islr.seed),
        &cfg.model.backbone,
        &cfg.islr,
        data.glosses.len(),
        tok.vocab_size(),
    )?;
    let report = train_islr(&models, &data, &tok, &cfg.islr)?;
    save_checkpoint(&out.join("islr.ckpt"), &models.params())?;
    write_json(&out.join("islr_report.json"), &report)?;
    finish_training(
        loaded,
        "train-islr",
        config_path,
        cfg.islr.seed,
        &tok,
        &[&cfg.data.islr_manifest, &cfg.data.vocab],
        out,
    )?;
    let summary = IslrSummary {
        steps: report.steps,
        final_loss: report.losses.last().copied(),
        pose: report.pose,
        lip: report.lip,
        fused: report.fused,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn fresh_log(out: &Path) -> CliResult<TrainLog> {
    let p = out.join("train.jsonl");
    if p.exists() {
        std::fs::remove_file(&p)?;
    }
    Ok(TrainLog::to_file(&p)?)
}

fn cmd_pretrain(loaded: &Loaded, config_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = &loaded.config;
    let backbone = cfg
        .backbone_checkpoint
        .clone()
        .ok_or_else(|| CliError::config("pretraining needs backbone_checkpoint"))?;
    if !backbone.exists() {
        return Err(CliError::data(format!("missing backbone checkpoint {}", backbone.display())));
    }
    let data = load_task_data(cfg)?;
    prepare_out(out)?;
    let tok = tokenizer_for(cfg, data.sentences())?;
    let model = SignModel::new(&mut Init::new(cfg.train.seed), &cfg.model, tok.vocab_size())?;
    let mut trainer = Trainer::new(&model, &tok, &data, cfg.train.clone(), fresh_log(out)?)?;
    let reports = run_curriculum(&mut trainer, &backbone, Some(out))?;
    write_json(&out.join("report.json"), &reports)?;
    finish_training(loaded, "pretrain", config_path, cfg.train.seed, &tok, &[&cfg.data.manifest, &backbone], out)?;
    println!("{}", out.join("stage3.ckpt").display());
    Ok(())
}

fn cmd_finetune(loaded: &Loaded, config_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = &loaded.config;
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::config("finetuning needs checkpoint, a pretraining checkpoint"))?;
    if !ckpt.exists() {
        return Err(CliError::data(format!("missing pretraining checkpoint {}", ckpt.display())));
    }
    let tok_path = cfg.tokenizer.path.clone().unwrap_or_else(|| sibling(&ckpt, "tokenizer.json"));
    let tok = Tokenizer::load(&tok_path)?;
    let data = load_task_data(cfg)?;
    prepare_out(out)?;
    let model = SignModel::new(&mut Init::new(cfg.train.seed), &cfg.model, tok.vocab_size())?;
    let mut trainer = Trainer::new(&model, &tok, &data, cfg.train.clone(), fresh_log(out)?)?;
    let report = run_finetune(&mut trainer, &ckpt, Some(out))?;
    write_json(&out.join("report.json"), &[report])?;
    finish_training(loaded, "finetune", config_path, cfg.train.seed, &tok, &[&cfg.data.manifest, &ckpt], out)?;
    println!("{}", out.join("finetune.ckpt").display());
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_model(checkpoint: &Path, config: Option<&Path>, tokenizer: Option<&Path>) -> CliResult<(SignModel, Tokenizer)> {
    if !checkpoint.exists() {
        return Err(CliError::data(format!("missing checkpoint {}", checkpoint.display())));
    }
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| sibling(checkpoint, "config.json"));
    let cfg = config::load(Some(&cfg_path), config::env_vars())?.config;
    let tok_path = tokenizer.map(Path::to_path_buf).unwrap_or_else(|| sibling(checkpoint, "tokenizer.json"));
    let tok = Tokenizer::load(&tok_path)?;
    let model = SignModel::new(&mut Init::new(0), &cfg.model, tok.vocab_size())?;
    load_checkpoint(checkpoint, &model.all_params())?;
    Ok((model, tok))
}

fn read_sentences(path: &Path) -> CliResult<Vec<String>> {
    match SubtitleFormat::from_path(path) {
        Ok(f) => Ok(parse_subtitles(path, f)?.into_iter().map(|c| c.text).collect()),
        Err(_) => {
            let s = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            Ok(s.lines().map(str::to_string).collect())
        }
    }
}

fn read_cues(path: &Path) -> CliResult<Vec<Cue>> {
    let f = SubtitleFormat::from_path(path).map_err(|e| CliError::usage(e.to_string()))?;
    Ok(parse_subtitles(path, f)?)
}

fn evaluate(pred: &Path, truth: &Path, task: EvalTask, fps: f64, frames: Option<usize>) -> CliResult<EvalReport> {
    let pairing = |p: usize, t: usize| {
        CliError::data(format!(
            "cannot pair {p} predictions with {t} references; counts must match"
        ))
    };
    match task {
        EvalTask::Slt => {
            let (h, r) = (read_sentences(pred)?, read_sentences(truth)?);
            if h.len() != r.len() {
                return Err(pairing(h.len(), r.len()));
            }
            Ok(EvalReport {
                slt: Some(slt_scores(&h, &r)?),
                ssa: None,
            })
        }
        EvalTask::Ssa => {
            let (p, t) = (read_cues(pred)?, read_cues(truth)?);
            if p.len() != t.len() {
                return Err(pairing(p.len(), t.len()));
            }
            let span = |c: &Cue| cue_frames(c.start, c.end, fps);
            let pi: Vec<Option<(usize, usize)>> = p.iter().map(|c| Some(span(c))).collect();
            let ti: Vec<(usize, usize)> = t.iter().map(span).collect();
            let last = pi.iter().flatten().chain(&ti).map(|s| s.1 + 1).max().unwrap_or(0);
            let n = frames.unwrap_or(last);
            if n == 0 {
                return Err(CliError::data("no frames to score"));
            }
            Ok(EvalReport {
                slt: None,
                ssa: Some(ssa_scores(&pi, &ti, n)?),
            })
        }
    }
}
