use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use far_core::budget::{budget_curve, token_context_length, write_budget_csv, ContextMode};
use far_core::data::{dump_pgm, generate_dataset, Dataset, WorldSpec};
use far_core::eval::{
    ablation_suite, run_protocol, write_ablation_csv, write_metrics_csv, AblationConfig, AblationKind, EvalProtocol,
};
use far_core::inference::{predict, write_timing_csv, CacheMode, SamplerConfig};
use far_core::masking::{frame_mask, AttentionLayout, AttentionPolicy};
use far_core::model::{checkpoint_dtype, read_checkpoint, save_checkpoint, FarModel, ModelConfig};
use far_core::par::Execution;
use far_core::training::{train, TrainConfig, Video};
use far_core::{DType, Scalar};

use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::{
    AblateArgs, AblationArg, BudgetArgs, BudgetMode, CacheArg, Cli, Command, EvalArgs, GenDataArgs, MaskdumpArgs,
    SampleArgs, SamplerArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Budget(a) => budget(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Maskdump(a) => maskdump(a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn config_or_default<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    cli.config.as_deref().map(read_json).transpose().map(Option::unwrap_or_default)
}

fn run_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `<file>.manifest.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn to_value(v: &impl Serialize) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let spec: WorldSpec = match (&a.spec, &cli.config) {
        (Some(p), _) | (None, Some(p)) => read_json(p)?,
        (None, None) => WorldSpec::default(),
    };
    let seed = cli.seed.unwrap_or(0);
    let ds = generate_dataset(&spec, a.episodes, seed, Execution::Parallel)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        run_dir(parent)?;
    }
    ds.write(&a.out)?;
    let mut m = Manifest::new("gen-data", to_value(&spec)?).seed("data", seed).dtype(DType::F32);
    m.output(a.out.display().to_string());
    if let (Some(dir), Some(ep)) = (&a.pgm, ds.episodes.first()) {
        let n = dump_pgm(&ep.frames, dir, "episode0")?;
        m.output(format!("{} ({n} pgm files)", dir.display()));
    }
    m.write(&sidecar(&a.out))?;
    println!("wrote {} episodes of {} frames to {}", a.episodes, spec.episode_length, a.out.display());
    Ok(())
}

fn videos<F: Scalar>(ds: &Dataset) -> Vec<Video<F>> {
    ds.episodes.iter().map(Video::from_episode).collect()
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = config_or_default(cli)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let dtype = cli.dtype.map(DType::from).unwrap_or(DType::F32);
    let ds = Dataset::read(&a.data)?;
    run_dir(&a.out)?;
    match dtype {
        DType::F32 => train_as::<f32>(&cfg, &ds, &a.out)?,
        DType::F64 => train_as::<f64>(&cfg, &ds, &a.out)?,
    }
    let mut m = Manifest::new("train", to_value(&cfg)?)
        .seed("train", cfg.seed)
        .seed("init", cfg.seed)
        .dtype(dtype);
    for o in ["model.farc", "train_log.csv", "config.json"] {
        m.output(o);
    }
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")
        .map_err(|e| CliError::io(a.out.join("config.json"), e))?;
    m.write(&a.out.join("manifest.json"))
}

fn train_as<F: Scalar>(cfg: &TrainConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let vids = videos::<F>(ds);
    let mut model = FarModel::<F>::new(cfg.model.clone(), cfg.seed)?.with_execution(cfg.execution);
    let log_path = out.join("train_log.csv");
    let mut log = create(&log_path)?;
    let summary = train(&mut model, &vids, cfg, Some(&mut log))?;
    finish(log, &log_path)?;
    save_checkpoint(&model, &out.join("model.farc"))?;
    let last = summary.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps in {:.1}s, final loss {last:.6}",
        summary.losses.len(),
        summary.seconds
    );
    Ok(())
}

fn sampler_config(a: &SamplerArgs, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps: a.steps,
        guidance: a.guidance,
        cache_mode: match a.cache {
            CacheArg::None => CacheMode::None,
            CacheArg::Kv => CacheMode::Kv,
            CacheArg::Multilevel => CacheMode::Multilevel,
        },
        short_window: a.short_window,
        context_noise: a.context_noise,
        seed,
    }
}

/// Reads a checkpoint and checks it against a requested dtype.
fn checkpoint(cli: &Cli, path: &Path) -> Result<(Vec<u8>, DType)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let dtype = checkpoint_dtype(&bytes)?;
    if let Some(want) = cli.dtype.map(DType::from) {
        if want != dtype {
            return Err(CliError::Usage(format!(
                "checkpoint {} holds {dtype:?} parameters but --dtype asks for {want:?}",
                path.display()
            )));
        }
    }
    Ok((bytes, dtype))
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let (bytes, dtype) = checkpoint(cli, &a.ckpt)?;
    let seed = cli.seed.unwrap_or(0);
    let sampler = sampler_config(&a.sampler, seed);
    let ds = Dataset::read(&a.context)?;
    let ep = ds
        .episodes
        .get(a.episode)
        .ok_or_else(|| CliError::Usage(format!("dataset has no episode {}", a.episode)))?;
    if a.context_frames > ep.len() {
        return Err(CliError::Usage(format!(
            "episode {} has {} frames, {} requested as context",
            a.episode,
            ep.len(),
            a.context_frames
        )));
    }
    run_dir(&a.out)?;
    let shape = match dtype {
        DType::F32 => sample_as::<f32>(&bytes, ep, a, &sampler)?,
        DType::F64 => sample_as::<f64>(&bytes, ep, a, &sampler)?,
    };
    let mut m = Manifest::new("sample", to_value(&sampler)?).seed("sample", seed).dtype(dtype);
    m.output(format!("latents.f32 [{}x{}x{}x{}] little-endian", a.frames, shape[0], shape[1], shape[2]));
    m.output("pred_f{t}_c{c}.pgm");
    m.write(&a.out.join("manifest.json"))?;
    println!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn sample_as<F: Scalar>(
    bytes: &[u8],
    ep: &far_core::data::Episode,
    a: &SampleArgs,
    sampler: &SamplerConfig,
) -> Result<[usize; 3]> {
    let model = read_checkpoint::<F>(bytes)?;
    let cfg = model.config();
    let context = ep.frames_as::<F>(0, a.context_frames);
    // Recorded actions where the episode has them, "stay" past its end.
    let actions: Option<Vec<usize>> = (cfg.num_actions > 0).then(|| {
        let ids = ep.action_ids();
        (0..a.context_frames + a.frames)
            .map(|i| ids.get(i).copied().unwrap_or(0))
            .collect()
    });
    let roll = predict(&model, &context, actions.as_deref(), None, a.frames, sampler)?;
    dump_pgm(&roll.frames, &a.out, "pred")?;
    let path = a.out.join("latents.f32");
    let mut w = create(&path)?;
    for f in &roll.frames {
        for v in f.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(|e| CliError::io(&path, e))?;
        }
    }
    finish(w, &path)?;
    Ok(cfg.latent.shape())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (bytes, dtype) = checkpoint(cli, &a.ckpt)?;
    let seed = cli.seed.unwrap_or(0);
    let protocol = match &cli.config {
        Some(p) => read_json::<EvalProtocol>(p)?,
        None => EvalProtocol {
            c: a.c,
            p: a.p,
            trajectories: a.trajectories,
            best_of: !a.mean,
            sampler: sampler_config(&a.sampler, seed),
            ..EvalProtocol::default()
        },
    };
    let ds = Dataset::read(&a.data)?;
    run_dir(&a.out)?;
    let csv = a.out.join("metrics.csv");
    let res = match dtype {
        DType::F32 => run_protocol(&read_checkpoint::<f32>(&bytes)?, &videos(&ds), &protocol)?,
        DType::F64 => run_protocol(&read_checkpoint::<f64>(&bytes)?, &videos(&ds), &protocol)?,
    };
    let mut w = create(&csv)?;
    write_metrics_csv(&res, &mut w)?;
    finish(w, &csv)?;
    let mut m = Manifest::new("eval", to_value(&protocol)?)
        .seed("sample", protocol.sampler.seed)
        .dtype(dtype);
    m.output("metrics.csv");
    m.write(&a.out.join("manifest.json"))?;
    match (res.mean_psnr, res.mean_ssim) {
        (Some(p), Some(s)) => println!("mean psnr {p:.3} dB, mean ssim {s:.4} over {} videos", res.videos.len()),
        _ => println!("nothing to score (p = 0)"),
    }
    Ok(())
}

fn budget(cli: &Cli, a: &BudgetArgs) -> Result<()> {
    let model: ModelConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::preset(&a.preset)?,
    };
    let modes: &[ContextMode] = match a.mode {
        BudgetMode::Uniform => &[ContextMode::Uniform],
        BudgetMode::LongShort => &[ContextMode::LongShort],
        BudgetMode::Both => &[ContextMode::Uniform, ContextMode::LongShort],
    };
    let dtype = cli.dtype.map(DType::from).unwrap_or(DType::F32);
    let rows = budget_curve(a.frames_max, a.frame_step, modes, &model, a.window, dtype)?;
    if let Some(parent) = a.csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        run_dir(parent)?;
    }
    let mut w = create(&a.csv)?;
    write_budget_csv(&rows, &mut w)?;
    finish(w, &a.csv)?;
    let mut m = Manifest::new("budget", to_value(&model)?).dtype(dtype);
    m.output(a.csv.display().to_string());
    m.write(&sidecar(&a.csv))?;
    let (ts, tl) = (model.tpf_short(), model.tpf_long());
    println!(
        "128 frames: uniform {} tokens, long-short (n={}) {} tokens",
        token_context_length(128, ContextMode::Uniform, ts, tl, a.window),
        a.window,
        token_context_length(128, ContextMode::LongShort, ts, tl, a.window)
    );
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let mut cfg: AblationConfig = config_or_default(cli)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.protocol.sampler.seed = s;
        cfg.timing.seed = s;
    }
    let kind = match a.which {
        AblationArg::Scc => AblationKind::Scc,
        AblationArg::Window => AblationKind::Window,
        AblationArg::Kernel => AblationKind::Kernel,
        AblationArg::Cache => AblationKind::Cache,
    };
    let dtype = cli.dtype.map(DType::from).unwrap_or(DType::F32);
    let train_ds = Dataset::read(&a.data)?;
    let val_ds = a.val_data.as_deref().map(Dataset::read).transpose()?;
    let val_ds = val_ds.as_ref().unwrap_or(&train_ds);
    run_dir(&a.out)?;
    let report = match dtype {
        DType::F32 => ablation_suite(kind, &cfg, &videos::<f32>(&train_ds), &videos::<f32>(val_ds))?,
        DType::F64 => ablation_suite(kind, &cfg, &videos::<f64>(&train_ds), &videos::<f64>(val_ds))?,
    };
    let mut m = Manifest::new("ablate", to_value(&cfg)?)
        .seed("train", cfg.train.seed)
        .seed("sample", cfg.protocol.sampler.seed)
        .dtype(dtype);
    let csv = a.out.join("ablation.csv");
    let mut w = create(&csv)?;
    write_ablation_csv(&report, &mut w)?;
    finish(w, &csv)?;
    m.output("ablation.csv");
    let summary = a.out.join("summary.txt");
    fs::write(&summary, report.summary.join("\n") + "\n").map_err(|e| CliError::io(&summary, e))?;
    m.output("summary.txt");
    if !report.timing.is_empty() {
        let path = a.out.join("timing.csv");
        let mut w = create(&path)?;
        write_timing_csv(&report.timing, &mut w)?;
        finish(w, &path)?;
        m.output("timing.csv");
    }
    m.write(&a.out.join("manifest.json"))?;
    for line in &report.summary {
        println!("{line}");
    }
    Ok(())
}

/// Grayscale PGM of a mask, each token `scale` pixels wide, white where attention is allowed.
fn mask_pgm(mask: &far_core::masking::Mask, scale: usize) -> Vec<u8> {
    let s = scale.max(1);
    let (w, h) = (mask.cols * s, mask.rows * s);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(if mask.get(y / s, x / s) { 255 } else { 0 });
        }
    }
    out
}

fn maskdump(a: &MaskdumpArgs) -> Result<()> {
    let layout = AttentionLayout::long_short(0, a.long_frames, a.tpf_long, a.frames, a.tpf);
    layout.validate()?;
    let policy = if a.full {
        AttentionPolicy::Full
    } else {
        AttentionPolicy::FrameCausal
    };
    let mask = frame_mask(&layout.frame_index, &layout.frame_index, policy);
    run_dir(&a.out)?;
    let path = a.out.join("mask.pgm");
    fs::write(&path, mask_pgm(&mask, a.scale)).map_err(|e| CliError::io(&path, e))?;
    let config = serde_json::json!({
        "frames": a.frames,
        "tpf": a.tpf,
        "long_frames": a.long_frames,
        "tpf_long": a.tpf_long,
        "policy": policy,
        "scale": a.scale,
    });
    let mut m = Manifest::new("maskdump", config);
    m.output("mask.pgm");
    m.write(&a.out.join("manifest.json"))?;
    println!("{}x{} mask written to {}", mask.rows, mask.cols, path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use far_core::masking::build_causal_frame_mask;

    #[test]
    fn scaled_mask_image() {
        let m = build_causal_frame_mask(1, 2);
        let img = mask_pgm(&m, 2);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px, &[255, 255, 0, 0, 255, 255, 0, 0, 255, 255, 255, 255, 255, 255, 255, 255]);
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("a/b.csv")), PathBuf::from("a/b.csv.manifest.json"));
    }
}
