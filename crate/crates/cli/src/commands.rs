use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ctrlfuse_core::checkpoint::{Checkpoint, RngState};
use ctrlfuse_core::gradsuite;
use ctrlfuse_core::image_io;
use ctrlfuse_core::metrics::{self, Aggregate, MetricReport, MetricRow, Plane};
use ctrlfuse_core::model::{luma, CtrlFuse, ModelConfig, PromptMask};
use ctrlfuse_core::synth;
use ctrlfuse_core::tensor::Tensor;
use ctrlfuse_core::train::{self, TrainConfig};

use crate::args::{Cli, Command, EvalArgs, FuseArgs, GradcheckArgs, ServeArgs, SynthArgs, TrainArgs};
use crate::service::{self, ServiceState};

pub const CKPT_DIR_ENV: &str = "CTRLFUSE_CKPT_DIR";
pub const DEFAULT_CKPT: &str = "ctrlfuse.cfck";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn ckpt_root() -> Option<PathBuf> {
    std::env::var_os(CKPT_DIR_ENV).map(PathBuf::from)
}

/// Resolves `--ckpt`: an existing path wins, then `<id>` or `<id>.cfck`
/// under the checkpoint root. Without `--ckpt` the default file under the
/// root is used.
pub fn resolve_ckpt(arg: Option<&str>) -> Result<PathBuf> {
    let root = ckpt_root();
    let Some(arg) = arg else {
        return match root {
            Some(r) => Ok(r.join(DEFAULT_CKPT)),
            None => bail!("no checkpoint given: pass --ckpt or set {CKPT_DIR_ENV}"),
        };
    };
    let direct = PathBuf::from(arg);
    if direct.is_file() {
        return Ok(direct);
    }
    if let Some(r) = root {
        for cand in [r.join(arg), r.join(format!("{arg}.cfck"))] {
            if cand.is_file() {
                return Ok(cand);
            }
        }
    }
    bail!("checkpoint {arg:?} not found")
}

/// Checkpoint id as exposed by the service: the file stem.
pub fn ckpt_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

pub fn load_model(path: &Path) -> Result<CtrlFuse> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    ck.to_model()
        .with_context(|| format!("loading weights from {}", path.display()))
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let scenes = synth::synth_generate(a.count, a.size, a.seed)?;
    synth::write_dataset(&a.out, &scenes, a.size, a.seed)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let scenes = match &a.data {
        Some(dir) => synth::read_dataset(dir).with_context(|| format!("reading {}", dir.display()))?,
        None => synth::synth_generate(a.count, a.size, a.seed)?,
    };
    let out = match a.out {
        Some(p) => p,
        None => ckpt_root().unwrap_or_default().join(DEFAULT_CKPT),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        ablation: a.ablation,
        ..TrainConfig::desk(a.seed)
    };
    let mut model = CtrlFuse::new(ModelConfig::desk(a.seed))?;
    let start = Instant::now();
    let outcome = train::train(&mut model, &cfg, &scenes, |l| {
        println!(
            "epoch {:>3}  total {:.6}  fusion {:.6}  seg {:.6}",
            l.epoch, l.loss.total, l.loss.fusion_total, l.loss.seg_total
        );
    })?;
    if outcome.frozen_checksum_before != outcome.frozen_checksum_after {
        bail!("frozen weights changed during training");
    }
    let rng = RngState {
        seed: cfg.seed,
        word_pos: outcome.rng_word_pos.to_string(),
    };
    Checkpoint::from_model(&model, Some(&cfg), Some(rng)).save(&out)?;
    let log_path = out.with_extension("log.jsonl");
    fs::write(&log_path, train::log_to_jsonl(&outcome.log)?)?;
    println!(
        "{} steps in {:.1}s; checkpoint {}; log {}",
        outcome.steps,
        start.elapsed().as_secs_f64(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn read_image(path: &Path, channels: usize) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    image_io::decode_png_channels(&bytes, channels).with_context(|| format!("decoding {}", path.display()))
}

fn read_mask(path: &Path) -> Result<PromptMask> {
    Ok(PromptMask::new(&read_image(path, 1)?)?)
}

fn fuse_cmd(a: FuseArgs) -> Result<()> {
    let path = resolve_ckpt(a.ckpt.as_deref())?;
    let model = load_model(&path)?;
    let ir = read_image(&a.ir, 1)?;
    let vis = read_image(&a.vis, 3)?;
    let mask = a.mask.as_deref().map(read_mask).transpose()?;
    let out = model.infer_with(&ir, &vis, mask.as_ref(), a.alpha, a.ablation)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    image_io::write_png(&a.out, &out.fused)?;
    if a.masks {
        let stem = ckpt_id(&a.out);
        for (suffix, t) in [("m_ir", &out.m_ir), ("m_vis", &out.m_vis), ("seg", &out.seg)] {
            image_io::write_png(&a.out.with_file_name(format!("{stem}_{suffix}.png")), t)?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// A visible image as scored: gray files are used as-is, RGB through luma.
fn vis_plane(t: &Tensor) -> Tensor {
    if t.shape()[0] == 1 {
        t.clone()
    } else {
        luma(t)
    }
}

fn to_rgb(t: &Tensor) -> Result<Tensor> {
    if t.shape()[0] == 3 {
        return Ok(t.clone());
    }
    let (_, h, w) = t.chw();
    Ok(Tensor::new(&[3, h, w], t.data().repeat(3))?)
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            ids.push(ckpt_id(&p));
        }
    }
    ids.sort();
    Ok(ids)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = match (&a.fused, &a.ckpt) {
        (Some(_), _) => None,
        (None, ck) => Some(load_model(&resolve_ckpt(ck.as_deref())?)?),
    };
    let ids = png_ids(&a.data.join("ir"))?;
    if ids.is_empty() {
        bail!("no PNG files under {}", a.data.join("ir").display());
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let file = format!("{id}.png");
        let ir = read_image(&a.data.join("ir").join(&file), 1)?;
        let vis = image_io::decode_png(&fs::read(a.data.join("vis").join(&file))?)
            .with_context(|| format!("decoding vis/{file}"))?;
        let fused = match (&model, &a.fused) {
            (Some(m), _) => {
                let mask = a.mask.as_ref().map(|d| read_mask(&d.join(&file))).transpose()?;
                m.infer_with(&ir, &to_rgb(&vis)?, mask.as_ref(), a.alpha, a.ablation)?
                    .fused
            }
            (None, Some(dir)) => read_image(&dir.join(&file), 1)?,
            (None, None) => unreachable!("a model is loaded whenever --fused is absent"),
        };
        let vy = vis_plane(&vis);
        let report = MetricReport::evaluate(&Plane::of(&fused)?, &Plane::of(&ir)?, &Plane::of(&vy)?)
            .with_context(|| format!("scoring {id}"))?;
        rows.push(MetricRow {
            image_id: id.clone(),
            report,
        });
    }
    fs::create_dir_all(&a.out)?;
    metrics::write_csv(fs::File::create(a.out.join("metrics.csv"))?, &rows)?;
    let summary = serde_json::to_string_pretty(&Aggregate::of(&rows))?;
    fs::write(a.out.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cases: Vec<_> = gradsuite::registry()
        .into_iter()
        .filter(|c| a.filter.as_deref().map_or(true, |f| c.name.contains(f)))
        .collect();
    if cases.is_empty() {
        bail!("no gradient case matches {:?}", a.filter.unwrap_or_default());
    }
    let start = Instant::now();
    let results = gradsuite::run_suite(&cases, a.seeds)?;
    print!("{}", gradsuite::format_table(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} cases, {failed} failed, {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!("{failed} gradient cases failed");
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let path = resolve_ckpt(a.ckpt.as_deref())?;
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    let state = ServiceState::loading();
    let loader = Arc::clone(&state);
    let id = ckpt_id(&path);
    std::thread::spawn(move || match load_model(&path) {
        Ok(model) => {
            log::info!("checkpoint {id} ready");
            loader.install(id, model);
        }
        Err(e) => {
            log::error!("{e:#}");
            std::process::exit(1);
        }
    });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, service::router(state)).await?;
        Ok(())
    })
}
