//! Subcommand bodies. Each writes into `<out_dir>/<command>-<config hash>`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use midetr::checkpoint::{self, Manifest};
use midetr::decoder::{DecoderConfig, HeadMask, MiDecoder};
use midetr::model::{MiDetr, ParamBreakdown};
use midetr::params::{ParamStore, Scope};
use midetr::rng::{stream_rng, Stream};
use midetr::synth::ablation::{
    ablate_heads as run_head_ablation, all_head_subsets, component_variants, fusion_variants,
    head_number_variants, single_and_full, train_variants, AblationRow,
};
use midetr::synth::{evaluate_ap, export_queries as run_export, scene_at, train_from, TrainTrace};
use midetr::verify::{self, GradScope};
use serde::Serialize;
use serde_json::json;

use crate::config::{config_hash, RunConfig};
use crate::error::CliError;

fn run_dir(cfg: &RunConfig, command: &str, args: &[String]) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir.join(format!("{command}-{}", config_hash(cfg, command, args)));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

/// The only file carrying wall-clock data.
fn write_manifest(dir: &Path, command: &str, extra: serde_json::Value) -> Result<(), CliError> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": secs,
    });
    if let (Some(m), serde_json::Value::Object(extra)) = (m.as_object_mut(), extra) {
        m.extend(extra);
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn arg(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn gradcheck(cfg: &RunConfig, scope: GradScope) -> Result<(), CliError> {
    let dir = run_dir(cfg, "gradcheck", &[format!("{scope:?}")])?;
    let reports = verify::run(scope)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<48} max_rel_error {:.3e} over {:>6} {}",
            r.target,
            r.max_rel_error,
            r.checked,
            if r.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed);
    }
    write_json(&dir.join("gradcheck.json"), &reports)?;
    write_manifest(&dir, "gradcheck", json!({ "scope": scope, "tolerance": verify::TOLERANCE }))?;
    if failed > 0 {
        return Err(CliError::Verification(format!(
            "{failed} of {} targets exceed relative error {:e}",
            reports.len(),
            verify::TOLERANCE
        )));
    }
    println!("all {} targets below {:e}", reports.len(), verify::TOLERANCE);
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let args: Vec<String> = resume.map(arg).into_iter().collect();
    let dir = run_dir(cfg, "train", &args)?;
    let (mut model, start) = match resume {
        Some(p) => {
            let (model, man) = checkpoint::load(p)?;
            if man.model != cfg.model || man.scene != cfg.scene {
                return Err(CliError::Config(
                    "checkpoint model or scene config differs from the run config".into(),
                ));
            }
            (model, man.steps_done)
        }
        None => (MiDetr::new(&cfg.model, cfg.train.seed)?, 0),
    };
    let mut log = BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?);
    let mut trace = TrainTrace::default();
    train_from(&mut model, &cfg.train, &cfg.scene, start, &mut trace, Some(&mut log))?;
    log.flush()?;
    let manifest = Manifest {
        model: cfg.model,
        scene: cfg.scene,
        train: cfg.train,
        steps_done: cfg.train.steps.max(start),
    };
    checkpoint::save(&dir.join("checkpoint.bin"), &model, &manifest)?;
    if !trace.evals.is_empty() {
        write_json(&dir.join("evals.json"), &trace.evals)?;
    }
    let report = evaluate_ap(&model, &cfg.scene, &cfg.train.eval, &model.full_mask())?;
    write_json(&dir.join("eval.json"), &report)?;
    write_manifest(&dir, "train", json!({ "resumed_from": args, "start_step": start }))?;
    println!(
        "{}",
        json!({ "run_dir": dir, "steps": manifest.steps_done, "ap50": report.ap50 })
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, mask: Option<HeadMask>) -> Result<(), CliError> {
    let (model, man) = checkpoint::load(ckpt)?;
    let mask = mask.unwrap_or_else(|| model.full_mask());
    if mask.len() != model.cfg.heads {
        return Err(CliError::Config(format!(
            "mask {} has {} heads, model has {}",
            mask.label(),
            mask.len(),
            model.cfg.heads
        )));
    }
    let dir = run_dir(cfg, "eval", &[arg(ckpt), mask.label()])?;
    let report = evaluate_ap(&model, &man.scene, &cfg.train.eval, &mask)?;
    write_json(&dir.join("eval.json"), &report)?;
    write_manifest(&dir, "eval", json!({ "checkpoint": arg(ckpt), "mask": mask.label() }))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn write_table(path: &Path, key: &str, with_seed: bool, rows: &[AblationRow], n_classes: usize) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![key.to_string()];
    if with_seed {
        header.push("seed".into());
    }
    header.push("ap50".into());
    header.extend((0..n_classes).map(|c| format!("ap50_class{c}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.label.clone()];
        if with_seed {
            rec.push(r.seed.to_string());
        }
        rec.push(format!("{:.6}", r.report.ap50));
        rec.extend(
            r.report
                .per_class_ap50
                .iter()
                .map(|a| a.map_or(String::new(), |v| format!("{v:.6}"))),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ablate_heads(cfg: &RunConfig, ckpt: &Path, all_subsets: bool) -> Result<(), CliError> {
    let (model, man) = checkpoint::load(ckpt)?;
    let m = model.cfg.heads;
    let masks = if all_subsets { all_head_subsets(m) } else { single_and_full(m) };
    let dir = run_dir(cfg, "ablate-heads", &[arg(ckpt), all_subsets.to_string()])?;
    let rows = run_head_ablation(&model, &man.scene, &cfg.train.eval, &masks, man.train.seed)?;
    let path = dir.join("heads.csv");
    write_table(&path, "mask", false, &rows, model.cfg.n_classes)?;
    write_manifest(&dir, "ablate", json!({ "protocol": "heads", "checkpoint": arg(ckpt) }))?;
    for r in &rows {
        println!("{} ap50 {:.4}", r.label, r.report.ap50);
    }
    println!("{}", path.display());
    Ok(())
}

pub fn ablate_trained(cfg: &RunConfig, protocol: &str, seeds: &[u64], ms: &[usize]) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    let variants = match protocol {
        "head-number" => head_number_variants(&cfg.model, ms),
        "components" => component_variants(&cfg.model, cfg.model.heads),
        "fusion" => fusion_variants(&cfg.model),
        other => return Err(CliError::Config(format!("unknown protocol {other}"))),
    };
    for v in &variants {
        v.model.validate()?;
    }
    let mut args: Vec<String> = seeds.iter().map(u64::to_string).collect();
    if protocol == "head-number" {
        args.extend(ms.iter().map(|m| format!("M{m}")));
    }
    let dir = run_dir(cfg, &format!("ablate-{protocol}"), &args)?;
    let rows = train_variants(&variants, seeds, &cfg.train, &cfg.scene)?;
    let path = dir.join(format!("{}.csv", protocol.replace('-', "_")));
    write_table(&path, "variant", true, &rows, cfg.model.n_classes)?;
    let mut means = Vec::new();
    for v in &variants {
        let aps: Vec<f64> = rows.iter().filter(|r| r.label == v.name).map(|r| r.report.ap50).collect();
        let mean = aps.iter().sum::<f64>() / aps.len() as f64;
        println!("{:<12} mean ap50 {:.4} over {} seeds", v.name, mean, aps.len());
        means.push(json!({ "variant": v.name, "mean_ap50": mean, "per_seed": aps }));
    }
    write_json(&dir.join("summary.json"), &means)?;
    write_manifest(&dir, "ablate", json!({ "protocol": protocol, "seeds": seeds }))?;
    println!("{}", path.display());
    Ok(())
}

fn decoder_registry_count(cfg: &DecoderConfig) -> Result<usize, CliError> {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(0, Stream::Init, 0);
    MiDecoder::new(&mut Scope::root(&mut store, &mut rng).child("decoder"), cfg)?;
    Ok(store.numel())
}

#[derive(Serialize)]
struct DecoderCount {
    layers: usize,
    heads: usize,
    lite: bool,
    closed_form: usize,
    registry: usize,
}

fn decoder_count(cfg: DecoderConfig) -> Result<DecoderCount, CliError> {
    Ok(DecoderCount {
        layers: cfg.layers,
        heads: cfg.heads,
        lite: cfg.lite,
        closed_form: cfg.param_count(),
        registry: decoder_registry_count(&cfg)?,
    })
}

pub fn paramcount(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = run_dir(cfg, "paramcount", &[])?;
    let closed = cfg.model.param_breakdown();
    let model = MiDetr::new(&cfg.model, cfg.train.seed)?;
    let registry = ParamBreakdown::from_registry(&model.store);

    let dec = cfg.model.decoder();
    let mi = decoder_count(DecoderConfig { lite: false, ..dec })?;
    let lite = decoder_count(DecoderConfig { lite: true, ..dec })?;
    // Depth against width at a fixed model dimension.
    let wide = decoder_count(DecoderConfig { layers: 6, heads: 2, lite: false, ..dec })?;
    let deep = decoder_count(DecoderConfig { layers: 12, heads: 1, lite: false, ..dec })?;

    let mut mismatches = Vec::new();
    if closed != registry {
        mismatches.push(format!("model breakdown: closed form {closed:?} vs registry {registry:?}"));
    }
    for c in [&mi, &lite, &wide, &deep] {
        if c.closed_form != c.registry {
            mismatches.push(format!(
                "decoder L={} M={} lite={}: {} vs {}",
                c.layers, c.heads, c.lite, c.closed_form, c.registry
            ));
        }
    }
    let out = json!({
        "decoder_params": closed.decoder,
        "total_params": closed.total(),
        "breakdown": { "closed_form": closed, "registry": registry },
        "lite": {
            "mi": mi,
            "lite": lite,
            "difference": mi.closed_form as i64 - lite.closed_form as i64,
        },
        "depth_vs_heads": {
            "six_layers_two_heads": wide,
            "twelve_layers_one_head": deep,
            "six_by_two_is_smaller": wide.closed_form < deep.closed_form,
        },
        "consistent": mismatches.is_empty(),
    });
    write_json(&dir.join("paramcount.json"), &out)?;
    write_manifest(&dir, "paramcount", json!({}))?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    if !mismatches.is_empty() {
        return Err(CliError::Verification(mismatches.join("; ")));
    }
    Ok(())
}

pub fn export_queries(
    cfg: &RunConfig,
    ckpt: &Path,
    scene_seed: u64,
    scene_index: u64,
    layer: Option<usize>,
    top_k: usize,
) -> Result<(), CliError> {
    let (model, man) = checkpoint::load(ckpt)?;
    let l = model.cfg.dec_layers;
    let layer = layer.unwrap_or(l);
    if layer == 0 || layer > l {
        return Err(CliError::Config(format!("--layer {layer} outside 1..={l}")));
    }
    let dir = run_dir(
        cfg,
        "export-queries",
        &[arg(ckpt), scene_seed.to_string(), scene_index.to_string(), layer.to_string(), top_k.to_string()],
    )?;
    let scene = scene_at(scene_seed, Stream::Eval, scene_index, &man.scene);
    let ex = run_export(&model, &scene, layer - 1, top_k)?;
    let c = model.cfg.dim;
    let mut files = Vec::new();
    for h in &ex.heads {
        let name = format!("head{}.csv", h.head + 1);
        let mut w = csv::Writer::from_path(dir.join(&name))?;
        let mut header = vec!["query".to_string(), "score".into(), "pc1".into(), "pc2".into()];
        header.extend((0..c).map(|d| format!("e{d}")));
        w.write_record(&header)?;
        for (i, v) in h.vectors.iter().enumerate() {
            let mut rec = vec![h.indices[i].to_string(), format!("{:.9}", h.scores[i])];
            rec.extend(h.pca.projection[i].iter().map(|x| format!("{x:.9}")));
            rec.extend(v.iter().map(|x| format!("{x:.9}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        files.push(name);
    }
    let heads: Vec<_> = ex
        .heads
        .iter()
        .zip(&files)
        .map(|(h, f)| {
            json!({
                "head": h.head + 1,
                "file": f,
                "queries": h.indices,
                "scores": h.scores,
                "pca_mean": h.pca.mean,
                "pca_components": h.pca.components,
                "pca_eigenvalues": h.pca.eigenvalues,
            })
        })
        .collect();
    let bundle = json!({
        "layer": layer,
        "top_k": top_k,
        "dim": c,
        "scene": { "seed": scene_seed, "index": scene_index, "objects": scene.gt.len() },
        "pre_fusion": true,
        "heads": heads,
    });
    write_json(&dir.join("export.json"), &bundle)?;
    write_manifest(&dir, "export-queries", json!({ "checkpoint": arg(ckpt) }))?;
    println!("{}", dir.display());
    Ok(())
}
