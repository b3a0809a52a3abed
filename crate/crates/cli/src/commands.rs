use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rdcd_core::config::RunConfig;
use rdcd_core::encoder::{load_checkpoint, save_checkpoint, EncoderParams, Head};
use rdcd_core::evaluator::{evaluate as run_eval, extract_descriptors, similarity_gap, spectrum, SpectrumReport};
use rdcd_core::losses::HnMode;
use rdcd_core::synthdata::{generate_corpus, load_corpus, save_corpus, split_ids, CopyCorpus};
use rdcd_core::trainer::{distill_student, pretrain_teacher, RelMode, TrainReport};
use serde::Serialize;

use crate::config::{config_hash, to_toml};
use crate::error::{CliError, CliResult};
use crate::{Ablation, DiagnoseArgs, DistillArgs, EvalArgs, HeadArg, LossMode, RelArg, SetArg};

pub struct Context {
    pub cfg: RunConfig,
    pub force: bool,
}

impl Context {
    fn run_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    fn echo(&self) -> CliResult<serde_json::Value> {
        serde_json::to_value(&self.cfg).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Creates `dir`, refusing to reuse a non-empty one unless forced.
    fn prepare(&self, dir: &Path) -> CliResult<()> {
        if dir.is_dir() && fs::read_dir(dir)?.next().is_some() {
            if !self.force {
                return Err(CliError::Exists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), to_toml(&self.cfg)?)?;
        Ok(())
    }

    fn corpus(&self) -> CliResult<CopyCorpus> {
        let dir = self.run_dir().join("corpus");
        require(&dir.join("meta.json"))?;
        Ok(load_corpus(&dir)?)
    }

    fn encoder(&self, stage: &str, explicit: Option<&Path>) -> CliResult<EncoderParams> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => self.run_dir().join(stage).join("checkpoint.json"),
        };
        require(&path)?;
        Ok(load_checkpoint(&path)?.params)
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Echoed<'a, T: Serialize> {
    config_echo: serde_json::Value,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Timing {
    wall_time_secs: f64,
}

fn write_training(ctx: &Context, dir: &Path, role: &str, params: &EncoderParams, report: &TrainReport) -> CliResult<()> {
    save_checkpoint(&dir.join("checkpoint.json"), role, params)?;
    write_json(
        &dir.join("report.json"),
        &Echoed {
            config_echo: ctx.echo()?,
            body: report,
        },
    )?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    // wall time is kept apart so the other files stay byte-reproducible
    write_json(
        &dir.join("timing.json"),
        &Timing {
            wall_time_secs: report.wall_time_secs,
        },
    )?;
    if let Some(last) = report.epochs.last() {
        info!("{role}: {} epochs, final loss {:.6}", report.epochs.len(), last.loss_total);
    }
    match &report.diverged {
        Some(msg) => Err(CliError::Numeric(format!("{role} training stopped early ({msg})"))),
        None => Ok(()),
    }
}

pub fn gen_data(ctx: Context) -> CliResult<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let dir = ctx.run_dir().join("corpus");
    ctx.prepare(&dir)?;
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    save_corpus(&dir, &corpus, Some(config_hash(cfg)?))?;
    info!(
        "corpus: {} train, {} references, {} queries, {} background -> {}",
        corpus.train.len(),
        corpus.references.len(),
        corpus.queries.len(),
        corpus.background.len(),
        dir.display()
    );
    Ok(())
}

pub fn train_teacher(ctx: Context) -> CliResult<()> {
    ctx.cfg.validate()?;
    let corpus = ctx.corpus()?;
    let dir = ctx.run_dir().join("teacher");
    ctx.prepare(&dir)?;
    let (params, report) = pretrain_teacher(&corpus, &ctx.cfg.model, &ctx.cfg.teacher)?;
    write_training(&ctx, &dir, "teacher", &params, &report)
}

pub fn distill(mut ctx: Context, args: &DistillArgs) -> CliResult<()> {
    let s = &mut ctx.cfg.student;
    for a in &args.ablate {
        match a {
            Ablation::NoHn => s.weights.lambda_hn = 0.0,
            Ablation::NoRel => s.weights.lambda_rel = 0.0,
            Ablation::NoCon => s.weights.lambda_con = 0.0,
        }
    }
    if let Some(m) = args.loss_mode {
        s.hn_mode = match m {
            LossMode::Hardest => HnMode::Hardest,
            LossMode::Literal => HnMode::Literal,
        };
    }
    if let Some(r) = args.rel {
        s.rel_mode = match r {
            RelArg::Rsd => RelMode::Rsd,
            RelArg::Fkd => RelMode::Fkd,
        };
    }
    validate_name(&args.name)?;
    ctx.cfg.validate()?;
    let corpus = ctx.corpus()?;
    let teacher = ctx.encoder("teacher", None)?;
    let dir = ctx.run_dir().join(&args.name);
    ctx.prepare(&dir)?;
    let (params, report) = distill_student(&corpus, &teacher, &ctx.cfg.model, &ctx.cfg.student)?;
    write_training(&ctx, &dir, "student", &params, &report)
}

fn validate_name(name: &str) -> CliResult<()> {
    let reserved = ["corpus", "teacher", "eval", "diagnose"];
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') || reserved.contains(&name) {
        return Err(CliError::Config(format!("invalid output name {name:?}")));
    }
    Ok(())
}

fn head(arg: Option<HeadArg>, default: Head) -> Head {
    match arg {
        Some(HeadArg::Projector) => Head::Projector,
        Some(HeadArg::Matcher) => Head::Matcher,
        None => default,
    }
}

/// `<run>/<kind>/<stage>`; an explicit checkpoint keeps the `--stage` label.
fn stage_dir(ctx: &Context, kind: &str, stage: &str) -> CliResult<PathBuf> {
    if stage != "teacher" {
        validate_name(stage)?;
    }
    Ok(ctx.run_dir().join(kind).join(stage))
}

pub fn evaluate(mut ctx: Context, args: &EvalArgs) -> CliResult<()> {
    let e = &mut ctx.cfg.eval;
    e.head = head(args.head, e.head);
    if args.pca.is_some() {
        e.pca_dim = args.pca;
    }
    e.score_normalize |= args.score_normalize;
    ctx.cfg.validate()?;
    let corpus = ctx.corpus()?;
    let params = ctx.encoder(&args.stage, args.checkpoint.as_deref())?;
    let dir = stage_dir(&ctx, "eval", &args.stage)?;
    ctx.prepare(&dir)?;
    let ev = run_eval(&params, &corpus, &ctx.cfg.eval, ctx.echo()?)?;
    write_json(&dir.join("report.json"), &ev.report)?;
    fs::write(dir.join("pairs.csv"), ev.pairs.to_csv())?;
    fs::write(dir.join("spectrum.csv"), ev.spectrum.to_csv())?;
    fs::write(dir.join("gap.csv"), ev.gap.to_csv())?;
    let r = &ev.report;
    match r.uap_sn {
        Some(sn) => info!("uAP {:.4} uAP_SN {sn:.4} mAP {:.4} rpr {:.3}", r.uap, r.map, r.rpr),
        None => info!("uAP {:.4} mAP {:.4} rpr {:.3}", r.uap, r.map, r.rpr),
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    config_echo: serde_json::Value,
    set: &'static str,
    head: Head,
    #[serde(flatten)]
    spectrum: &'a SpectrumReport,
    mean_gap: f64,
}

pub fn diagnose(mut ctx: Context, args: &DiagnoseArgs) -> CliResult<()> {
    ctx.cfg.eval.head = head(args.head, ctx.cfg.eval.head);
    ctx.cfg.validate()?;
    let corpus = ctx.corpus()?;
    let params = ctx.encoder(&args.stage, args.checkpoint.as_deref())?;
    let dir = stage_dir(&ctx, "diagnose", &args.stage)?;
    ctx.prepare(&dir)?;
    let h = ctx.cfg.eval.head;
    let q = extract_descriptors(&params, split_ids(&corpus.queries), &corpus.query_matrix(), h)?;
    let r = extract_descriptors(&params, split_ids(&corpus.references), &corpus.reference_matrix(), h)?;
    let (set, spec) = match args.set {
        SetArg::References => ("references", spectrum(&r, ctx.cfg.eval.rank_tol)?),
        SetArg::Queries => ("queries", spectrum(&q, ctx.cfg.eval.rank_tol)?),
    };
    let gap = similarity_gap(&q, &r, &corpus.ground_truth)?;
    write_json(
        &dir.join("diagnose.json"),
        &DiagnoseReport {
            config_echo: ctx.echo()?,
            set,
            head: h,
            spectrum: &spec,
            mean_gap: gap.mean,
        },
    )?;
    fs::write(dir.join("spectrum.csv"), spec.to_csv())?;
    fs::write(dir.join("gap.csv"), gap.to_csv())?;
    info!("rank {}/{} (rpr {:.3}), mean gap {:.4}", spec.rank, r.dim(), spec.rpr, gap.mean);
    Ok(())
}
