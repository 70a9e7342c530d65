use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use segadapt::adapt::{automated_prompts, log_csv, run_adaptation, supervised_pretrain, TrainPrompt};
use segadapt::archive::{apply_adapter_checkpoint, model_to_archive, Archive};
use segadapt::data::{
    load_dataset, make_toy_domain_with, split, write_mask_dirs, DatasetManifest, Sample, ToyDomainConfig,
    ToyKind,
};
use segadapt::eval::{cross_prompt_matrix, evaluate, EvalReport, GroundTruthOracle, Segmenter};
use segadapt::exec::Exec;
use segadapt::lora::AdaptedModel;
use segadapt::model::{BackendConfig, PromptableModel, ToyModel};
use segadapt::prompts::{
    prompts_from_masks, write_prompt_records, AutoMaskThresholds, PromptKind, PromptSource,
};
use segadapt::seed::derive_rng_for;

use crate::config::ExperimentConfig;

/// Summary written next to every adaptation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub weak_sup: String,
    pub best_epoch: usize,
    /// Held-out mIoU before adaptation and after each epoch.
    pub heldout_miou: Vec<f64>,
    pub direct: EvalReport,
    pub adapted: EvalReport,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        format!(
            "run {}\nweak supervision: {}\ntest prompt: {}\ndirect mIoU: {:.4}\nadapted mIoU: {:.4} (epoch {})\n",
            self.run,
            self.weak_sup,
            self.adapted.test_prompt,
            self.direct.miou,
            self.adapted.miou,
            self.best_epoch
        )
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Samples resized to the backend input when their frame differs.
fn fit_to_backend(samples: Vec<Sample>, size: usize) -> Result<Vec<Sample>> {
    samples
        .into_iter()
        .map(|s| {
            if s.frame()? == (size, size) {
                Ok(s)
            } else {
                s.resized(size).map_err(Into::into)
            }
        })
        .collect()
}

fn load_split(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let samples =
        load_dataset(&cfg.dataset).with_context(|| format!("cannot load dataset `{}`", cfg.dataset.name))?;
    let samples = fit_to_backend(samples, cfg.backend.input_size)?;
    Ok(split(&samples, cfg.dataset.split_ratio, cfg.dataset.seed)?)
}

fn build_backend(backend: &BackendConfig) -> Result<ToyModel> {
    if let Some(p) = &backend.pretrained_weights_path {
        if !p.exists() {
            bail!("pretrained weights {} not found", p.display());
        }
    }
    Ok(backend.build()?)
}

pub fn pretrain(cfg: &ExperimentConfig, exec: Exec) -> Result<PathBuf> {
    cfg.validate()?;
    let samples = fit_to_backend(load_dataset(&cfg.dataset)?, cfg.backend.input_size)?;
    let init = build_backend(&cfg.backend)?;
    log::info!(
        "pretraining on {} samples for {} epochs",
        samples.len(),
        cfg.pretrain.epochs
    );
    let out = supervised_pretrain(init, &samples, &cfg.pretrain, exec)?;
    let dir = cfg.run_dir("pretrain");
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in out.losses.iter().enumerate() {
        let _ = writeln!(losses, "{e},{l}");
    }
    write(&dir.join("pretrain_log.csv"), losses)?;
    let weights = dir.join("base.weights");
    model_to_archive(&out.model)?.write(&weights)?;
    println!("wrote {}", weights.display());
    Ok(dir)
}

pub fn adapt(cfg: &ExperimentConfig, exec: Exec) -> Result<PathBuf> {
    cfg.validate()?;
    let (adapt_set, test_set) = load_split(cfg)?;
    let base = build_backend(&cfg.backend)?;
    let dir = cfg.run_dir("adapt");
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    log::info!(
        "adapting on {} samples, {} held out, writing to {}",
        adapt_set.len(),
        test_set.len(),
        dir.display()
    );
    let heldout = (!test_set.is_empty()).then_some(test_set.as_slice());
    let outcome = run_adaptation(&base, &adapt_set, heldout, &cfg.train, exec)?;
    write(&dir.join("log.csv"), log_csv(&outcome.log))?;
    outcome
        .checkpoint(&outcome.best, &cfg.train)
        .write(&dir.join("adapter.ckpt"))?;
    outcome
        .checkpoint(&outcome.last, &cfg.train)
        .write(&dir.join("adapter_last.ckpt"))?;

    let kind = cfg.train.prompt_type.weak_kind().unwrap_or(PromptKind::Box);
    let weak_sup = cfg.train.prompt_type.as_str().to_string();
    let score = |m: &dyn Segmenter| -> Result<EvalReport> {
        let mut r = evaluate(m, &cfg.dataset.name, &test_set, kind, cfg.train.seed, exec)?;
        r.train_weak_sup = Some(weak_sup.clone());
        Ok(r)
    };
    let report = RunReport {
        run: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        weak_sup: weak_sup.clone(),
        best_epoch: outcome.best_epoch,
        heldout_miou: outcome.heldout_miou.clone(),
        direct: score(&base)?,
        adapted: score(&outcome.best)?,
    };
    write(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write(&dir.join("report.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(dir)
}

/// Manifest entries that disagree between a checkpoint and the backend.
fn manifest_diff(archive: &Archive, base: &ToyModel) -> Vec<String> {
    let mode = archive
        .get("mode")
        .ok()
        .and_then(|m| m.parse().ok())
        .unwrap_or_default();
    let probe = AdaptedModel {
        base: base.clone(),
        adapters: Default::default(),
        mode,
        rank: 0,
    };
    let mut expected = BTreeMap::new();
    expected.insert("kind", "adapter".to_string());
    expected.insert("backend", "toy".to_string());
    expected.insert("base_checksum", probe.base_checksum_untuned());
    expected
        .into_iter()
        .filter_map(|(k, want)| {
            let found = archive.get(k).unwrap_or("<missing>");
            (found != want).then(|| format!("  {k}: checkpoint={found} backend={want}"))
        })
        .collect()
}

pub fn load_checkpoint(path: &Path, base: ToyModel) -> Result<(AdaptedModel, Option<String>)> {
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    let archive = Archive::read(path)?;
    let diff = manifest_diff(&archive, &base);
    if !diff.is_empty() {
        bail!(
            "checkpoint {} is incompatible with the configured backend:\n{}",
            path.display(),
            diff.join("\n")
        );
    }
    let weak = archive.get("weak_sup").ok().map(str::to_string);
    Ok((apply_adapter_checkpoint(base, &archive)?, weak))
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub prompt: PromptKind,
    pub cross_prompt: bool,
    pub oracle: bool,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, args: &EvaluateArgs<'_>, exec: Exec) -> Result<()> {
    cfg.validate()?;
    let (_, test_set) = load_split(cfg)?;
    if test_set.is_empty() {
        bail!("dataset `{}` has no test split", cfg.dataset.name);
    }
    let mut models: Vec<(String, Box<dyn Segmenter>)> = Vec::new();
    if args.oracle {
        models.push(("oracle".into(), Box::new(GroundTruthOracle)));
    } else {
        let base = build_backend(&cfg.backend)?;
        match args.checkpoint {
            Some(path) => {
                let (adapted, weak) = load_checkpoint(path, base.clone())?;
                if args.cross_prompt {
                    models.push(("direct".into(), Box::new(base)));
                }
                let name = weak.map_or("adapted".to_string(), |w| format!("adapted-{w}"));
                models.push((name, Box::new(adapted)));
            }
            None => models.push(("direct".into(), Box::new(base))),
        }
    }
    let out_dir = match (args.out, args.checkpoint) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(c)) => c.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => cfg.run_root().join("eval"),
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    if args.cross_prompt {
        let refs: Vec<(String, &dyn Segmenter)> =
            models.iter().map(|(n, m)| (n.clone(), m.as_ref())).collect();
        let grid = cross_prompt_matrix(
            &refs,
            &cfg.dataset.name,
            &test_set,
            &PromptKind::ALL,
            args.seed,
            exec,
        )?;
        print!("{}", grid.to_text());
        write(&out_dir.join("cross_prompt.csv"), grid.to_csv())?;
        write(&out_dir.join("cross_prompt.txt"), grid.to_text())?;
    } else {
        let (name, model) = models.last().expect("one model");
        let report = evaluate(
            model.as_ref(),
            &cfg.dataset.name,
            &test_set,
            args.prompt,
            args.seed,
            exec,
        )?;
        println!(
            "{name} {} mIoU {:.3} over {} instances",
            args.prompt, report.miou, report.instance_count
        );
        let stem = format!("eval_{}", args.prompt);
        write(&out_dir.join(format!("{stem}.json")), report.to_json()?)?;
        write(&out_dir.join(format!("{stem}.csv")), report.to_csv())?;
        write(&out_dir.join(format!("{stem}.txt")), report.to_text())?;
    }
    Ok(())
}

pub struct GenPromptsArgs<'a> {
    pub manifest: &'a Path,
    pub kind: TrainPrompt,
    pub seed: u64,
    pub out: &'a Path,
    pub backend: Option<&'a Path>,
    pub thresholds: AutoMaskThresholds,
}

/// Writes prompt records for every sample, each block preceded by a
/// `# image <id> <height> <width>` comment. Returns the number of skipped
/// instances.
pub fn gen_prompts(args: &GenPromptsArgs<'_>) -> Result<usize> {
    if !args.manifest.exists() {
        bail!("dataset manifest {} not found", args.manifest.display());
    }
    let manifest = DatasetManifest::load(args.manifest)?;
    let samples = load_dataset(&manifest)?;
    let anchor = match (args.kind, args.backend) {
        (TrainPrompt::Automated, Some(p)) => Some(build_backend(&BackendConfig::load(p)?)?),
        (TrainPrompt::Automated, None) => Some(build_backend(&BackendConfig::default())?),
        _ => None,
    };
    let mut text = String::new();
    let (mut count, mut skipped) = (0, 0);
    for s in &samples {
        let set = match (args.kind.weak_kind(), &anchor) {
            (Some(kind), _) => {
                let mut rng = derive_rng_for(args.seed, "gen-prompts", &s.id);
                prompts_from_masks(&s.instances, kind, PromptSource::WeakLabel, &mut rng)?
            }
            (None, Some(model)) => {
                let image = segadapt::model::preprocess(s.image()?, model.input_size())?;
                automated_prompts(model, &image, &args.thresholds)?
            }
            (None, None) => unreachable!("automated prompts always get a backend"),
        };
        let (h, w) = s.frame()?;
        let _ = writeln!(text, "# image {} {h} {w}", s.id);
        text.push_str(&write_prompt_records(&set.prompts)?);
        count += set.prompts.len();
        skipped += set.skipped;
    }
    write(args.out, text)?;
    if skipped > 0 {
        eprintln!(
            "warning: {skipped} instances skipped (too small for {} prompts)",
            args.kind.as_str()
        );
    }
    println!(
        "wrote {count} {} prompts for {} images to {}",
        args.kind.as_str(),
        samples.len(),
        args.out.display()
    );
    Ok(skipped)
}

pub fn make_toy_data(
    kind: ToyKind,
    count: usize,
    seed: u64,
    domain: &ToyDomainConfig,
    out: &Path,
) -> Result<PathBuf> {
    let samples = make_toy_domain_with(domain, kind, count, seed)?;
    let name = format!("toy-{}", kind.as_str());
    let manifest = write_mask_dirs(out, &name, &samples)?;
    println!("wrote {count} {} images to {}", kind.as_str(), out.display());
    Ok(manifest)
}

/// Collects `report.json` from run directories into one table.
pub fn report(runs: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let r: RunReport =
            serde_json::from_str(&text).with_context(|| format!("invalid report {}", path.display()))?;
        rows.push(r);
    }
    let mut table = format!(
        "{:<32} {:>9} {:>7} {:>8} {:>8} {:>7}\n",
        "run", "weak-sup", "prompt", "direct", "adapted", "gain"
    );
    let mut out_csv = String::from("run,weak_sup,test_prompt,direct_miou,adapted_miou,best_epoch\n");
    for r in &rows {
        let gain = 100.0 * (r.adapted.miou - r.direct.miou);
        let _ = writeln!(
            table,
            "{:<32} {:>9} {:>7} {:>8.4} {:>8.4} {:>+7.2}",
            r.run, r.weak_sup, r.adapted.test_prompt, r.direct.miou, r.adapted.miou, gain
        );
        let _ = writeln!(
            out_csv,
            "{},{},{},{},{},{}",
            r.run, r.weak_sup, r.adapted.test_prompt, r.direct.miou, r.adapted.miou, r.best_epoch
        );
    }
    print!("{table}");
    if let Some(p) = csv {
        write(p, out_csv)?;
    }
    Ok(())
}
