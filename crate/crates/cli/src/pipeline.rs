//! Subcommand implementations: artifact layout, corpus/checkpoint loading,
//! and the glue between config and the library pipeline.
//!
//! Disk layout:
//! - corpus_dir: `manifest.toml` + `<id>_{pet,ct,gt}.nii`
//! - checkpoint_dir: `pretrain.ckpt`, `{gsm,lrm}_<model_id>.ckpt`, matching
//!   `*_history.csv`, and the cached `pet_stats.toml`
//! - output_dir: `predictions/<id>_{prob,mask}.nii` + provenance sidecars,
//!   `metrics.csv`, `summary.csv`, `leaderboard.csv`, `run-<command>.log`

use std::collections::BTreeSet;
use std::fmt::Display;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use fprnet_core::cascade::{self, CascadeModel};
use fprnet_core::checkpoint::{self, Checkpoint};
use fprnet_core::metrics::{
    self, evaluate_study, rank_aggregate, Connectivity, MetricsReport, SubmissionSummary,
};
use fprnet_core::networks::{build_gsm, build_lrm};
use fprnet_core::nifti::{read_volume, write_volume, write_volume_with, DataType, Endianness};
use fprnet_core::phantom::{generate_corpus, make_corpus_with, CorpusManifest, StudyEntry};
use fprnet_core::preprocess::{
    compute_dataset_stats, crop_axial, preprocess_study, slice_pairs, window_minmax, DataStats,
    PreprocessedStudy,
};
use fprnet_core::pretrain::pretrain_encoder;
use fprnet_core::trainer::{init_params, train, EpochStats, ModuleKind, TrainSlice};
use fprnet_core::volume::{Modality, Volume3D};

use crate::config::PipelineConfig;
use crate::error::CliError;

/// Which manifest-ordered studies a command touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

// ---------------------------------------------------------------- run log

struct RunLog {
    command: &'static str,
    lines: Vec<String>,
}

impl RunLog {
    fn new(command: &'static str, config_hash: &str, seed: Option<u64>) -> Self {
        let mut lines = vec![
            format!("command={command}"),
            format!("version={}", env!("CARGO_PKG_VERSION")),
            format!("config_sha256={config_hash}"),
        ];
        if let Some(s) = seed {
            lines.push(format!("seed={s}"));
        }
        Self { command, lines }
    }

    fn put(&mut self, key: &str, value: impl Display) {
        self.lines.push(format!("{key}={value}"));
    }

    fn artifact(&mut self, path: &Path) {
        self.put("wrote", path.display());
    }

    fn finish(mut self, output_dir: &Path) -> Result<(), CliError> {
        self.lines.push("status=ok".into());
        ensure_dir(output_dir)?;
        let path = output_dir.join(format!("run-{}.log", self.command));
        fs::write(&path, self.lines.join("\n") + "\n")?;
        Ok(())
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

// ------------------------------------------------------------ corpus I/O

struct CorpusOnDisk {
    dir: PathBuf,
    manifest: CorpusManifest,
    /// Raw manifest text, hashed into the statistics cache key.
    raw: String,
}

struct LoadedStudy {
    pet: Volume3D,
    ct: Volume3D,
    gt: Volume3D,
}

impl CorpusOnDisk {
    fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.toml");
        let raw = fs::read_to_string(&path).map_err(|e| {
            CliError::Data(format!(
                "cannot read corpus manifest {}: {e}; run `fprnet phantom` first",
                path.display()
            ))
        })?;
        let manifest: CorpusManifest = toml::from_str(&raw)
            .map_err(|e| CliError::Data(format!("corpus manifest {}: {e}", path.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            raw,
        })
    }

    fn select(&self, train_count: usize, split: Split) -> Result<&[StudyEntry], CliError> {
        let entries = &self.manifest.studies;
        let n = entries.len();
        let boundary = if train_count == 0 { n } else { train_count };
        if boundary > n {
            return Err(CliError::Config(format!(
                "train.train_count {boundary} exceeds corpus size {n}"
            )));
        }
        let picked = match split {
            Split::All => entries,
            Split::Train => &entries[..boundary],
            Split::Test => &entries[boundary..],
        };
        if picked.is_empty() {
            return Err(CliError::Data(format!("the {split:?} split is empty")));
        }
        Ok(picked)
    }

    fn volume_path(&self, id: &str, kind: &str) -> PathBuf {
        self.dir.join(format!("{id}_{kind}.nii"))
    }

    fn load_study(&self, entry: &StudyEntry) -> Result<LoadedStudy, CliError> {
        Ok(LoadedStudy {
            pet: read_volume(&self.volume_path(&entry.id, "pet"), Modality::PetSuv)?,
            ct: read_volume(&self.volume_path(&entry.id, "ct"), Modality::CtHu)?,
            gt: read_volume(&self.volume_path(&entry.id, "gt"), Modality::Mask)?,
        })
    }
}

// -------------------------------------------------- PET dataset statistics

#[derive(serde::Serialize, serde::Deserialize)]
struct StatsSidecar {
    key: String,
    mean: f64,
    std: f64,
}

/// Training-split PET statistics, cached next to the checkpoints and keyed
/// by (manifest, split, window) so a changed corpus recomputes.
fn pet_stats(cfg: &PipelineConfig, corpus: &CorpusOnDisk) -> Result<DataStats, CliError> {
    let train = corpus.select(cfg.train.train_count, Split::Train)?;
    let mut hasher = Sha256::new();
    hasher.update(corpus.raw.as_bytes());
    hasher.update(format!(
        "|{}|{}|{}",
        train.len(),
        cfg.preprocess.suv_low,
        cfg.preprocess.suv_high
    ));
    let key: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    let path = cfg.paths.checkpoint_dir.join("pet_stats.toml");
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(sidecar) = toml::from_str::<StatsSidecar>(&text) {
            if sidecar.key == key {
                return Ok(DataStats {
                    mean: sidecar.mean,
                    std: sidecar.std,
                });
            }
        }
    }

    let window = cfg.preprocess.suv_window();
    let mut windowed = Vec::with_capacity(train.len());
    for entry in train {
        let pet = read_volume(&corpus.volume_path(&entry.id, "pet"), Modality::PetSuv)?;
        windowed.push(window_minmax(&pet, window)?);
    }
    let stats = compute_dataset_stats(&windowed)?;
    ensure_dir(&cfg.paths.checkpoint_dir)?;
    let sidecar = StatsSidecar {
        key,
        mean: stats.mean,
        std: stats.std,
    };
    write_text(
        &path,
        &toml::to_string(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(stats)
}

fn preprocessed_train_studies(
    cfg: &PipelineConfig,
    corpus: &CorpusOnDisk,
    stats: DataStats,
) -> Result<Vec<PreprocessedStudy>, CliError> {
    let pcfg = cfg.preprocess.core_config(Some(stats));
    corpus
        .select(cfg.train.train_count, Split::Train)?
        .iter()
        .map(|entry| {
            let s = corpus.load_study(entry)?;
            Ok(preprocess_study(&s.pet, &s.ct, Some(&s.gt), &pcfg)?)
        })
        .collect()
}

// ------------------------------------------------------------ checkpoints

fn checkpoint_stem(kind: ModuleKind, model_id: &str) -> String {
    match kind {
        ModuleKind::Gsm => format!("gsm_{model_id}"),
        ModuleKind::Lrm => format!("lrm_{model_id}"),
    }
}

fn load_required_checkpoint(path: &Path, hint: &str) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "checkpoint {} not found; {hint}",
            path.display()
        )));
    }
    Ok(checkpoint::load(path)?)
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,loss");
    if let Some(first) = history.first() {
        for (name, _) in &first.components {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for e in history {
        let _ = write!(out, "{},{},{}", e.epoch, e.lr, e.loss);
        for (_, v) in &e.components {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

// -------------------------------------------------------------- commands

pub fn cmd_phantom(cfg: &PipelineConfig, hash: &str) -> Result<(), CliError> {
    let manifest = make_corpus_with(
        &cfg.phantom.corpus_config(),
        cfg.phantom.studies,
        cfg.phantom.healthy_mix,
        cfg.phantom.seed,
    )?;
    let studies = generate_corpus(&manifest)?;

    let dir = &cfg.paths.corpus_dir;
    ensure_dir(dir)?;
    let mut log = RunLog::new("phantom", hash, Some(cfg.phantom.seed));

    let manifest_path = dir.join("manifest.toml");
    write_text(
        &manifest_path,
        &toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    log.artifact(&manifest_path);

    for s in &studies {
        for (vol, kind) in [(&s.pet, "pet"), (&s.ct, "ct"), (&s.gt, "gt")] {
            let path = dir.join(format!("{}_{kind}.nii", s.id));
            // f64 for the images so regenerated and on-disk corpora agree
            // bitwise; masks go through the u8 default.
            match vol.modality() {
                Modality::Mask => write_volume(vol, &path)?,
                _ => write_volume_with(vol, &path, DataType::F64, Endianness::Little)?,
            }
            log.artifact(&path);
        }
    }
    println!(
        "generated {} studies ({} healthy) in {}",
        studies.len(),
        studies.iter().filter(|s| s.healthy).count(),
        dir.display()
    );
    log.finish(&cfg.paths.output_dir)
}

pub fn cmd_pretrain(cfg: &PipelineConfig, hash: &str) -> Result<(), CliError> {
    let corpus = CorpusOnDisk::load(&cfg.paths.corpus_dir)?;
    let stats = pet_stats(cfg, &corpus)?;
    let studies = preprocessed_train_studies(cfg, &corpus, stats)?;
    let mut pairs = Vec::new();
    for s in &studies {
        pairs.extend(slice_pairs(s)?);
    }

    let outcome = pretrain_encoder(
        &pairs,
        &cfg.net.net_config(),
        cfg.preprocess.patch_xy,
        &cfg.pretrain.plan(),
    )?;

    ensure_dir(&cfg.paths.checkpoint_dir)?;
    let mut log = RunLog::new("pretrain", hash, Some(cfg.pretrain.seed));
    let ckpt_path = cfg.paths.checkpoint_dir.join("pretrain.ckpt");
    checkpoint::save(&ckpt_path, &outcome.graph, &outcome.full)?;
    log.artifact(&ckpt_path);
    let hist_path = cfg.paths.checkpoint_dir.join("pretrain_history.csv");
    write_text(&hist_path, &history_csv(&outcome.history))?;
    log.artifact(&hist_path);

    let last = outcome.history.last().expect("epochs > 0 ran");
    println!(
        "pretrained encoder on {} slice pairs: {} epochs, final loss {:.6}",
        pairs.len(),
        outcome.history.len(),
        last.loss
    );
    log.finish(&cfg.paths.output_dir)
}

fn gsm_train_slices(study: &PreprocessedStudy) -> Result<Vec<TrainSlice>, CliError> {
    slice_pairs(study)?
        .into_iter()
        .map(|sp| {
            Ok(TrainSlice::new(
                vec![sp.pet.clone(), sp.pet, sp.ct],
                sp.mask,
            )?)
        })
        .collect()
}

fn lrm_train_slices(
    study: &PreprocessedStudy,
    gsm: &Checkpoint,
) -> Result<Vec<TrainSlice>, CliError> {
    let (prob, binary) = cascade::infer_global(&gsm.graph, &gsm.params, study)?;
    slice_pairs(study)?
        .into_iter()
        .enumerate()
        .map(|(z, sp)| {
            Ok(TrainSlice::new(
                vec![
                    sp.pet.clone(),
                    sp.pet,
                    sp.ct,
                    prob.axial_slice(z),
                    binary.axial_slice(z),
                ],
                sp.mask,
            )?)
        })
        .collect()
}

pub fn cmd_train(cfg: &PipelineConfig, hash: &str, kind: ModuleKind) -> Result<(), CliError> {
    let corpus = CorpusOnDisk::load(&cfg.paths.corpus_dir)?;
    let stats = pet_stats(cfg, &corpus)?;
    let studies = preprocessed_train_studies(cfg, &corpus, stats)?;

    let command = match kind {
        ModuleKind::Gsm => "train-gsm",
        ModuleKind::Lrm => "train-lrm",
    };
    let mut log = RunLog::new(command, hash, Some(cfg.train.seed));

    let net_cfg = cfg.net.net_config();
    let patch = cfg.preprocess.patch_xy;
    let (graph, slices) = match kind {
        ModuleKind::Gsm => {
            let graph = build_gsm(&net_cfg, patch)?;
            let mut slices = Vec::new();
            for s in &studies {
                slices.extend(gsm_train_slices(s)?);
            }
            (graph, slices)
        }
        ModuleKind::Lrm => {
            let gsm_path = cfg.paths.checkpoint_dir.join(format!(
                "{}.ckpt",
                checkpoint_stem(ModuleKind::Gsm, &cfg.train.model_id)
            ));
            let gsm = load_required_checkpoint(&gsm_path, "run `fprnet train-gsm` first")?;
            let graph = build_lrm(&net_cfg, patch)?;
            let mut slices = Vec::new();
            for s in &studies {
                slices.extend(lrm_train_slices(s, &gsm)?);
            }
            (graph, slices)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut params = init_params(&graph, &mut rng);
    if kind == ModuleKind::Gsm && cfg.pretrain.enabled {
        let path = cfg.paths.checkpoint_dir.join("pretrain.ckpt");
        let ck = load_required_checkpoint(
            &path,
            "run `fprnet pretrain` first or set pretrain.enabled=false",
        )?;
        let loaded = checkpoint::load_by_prefix(&mut params, &ck.params, "encoder.")?;
        log.put("encoder_tensors", loaded);
    }

    let outcome = train(&graph, params, &slices, &cfg.train.plan(kind))?;

    ensure_dir(&cfg.paths.checkpoint_dir)?;
    let stem = checkpoint_stem(kind, &cfg.train.model_id);
    let ckpt_path = cfg.paths.checkpoint_dir.join(format!("{stem}.ckpt"));
    checkpoint::save(&ckpt_path, &graph, &outcome.params)?;
    log.artifact(&ckpt_path);
    let hist_path = cfg.paths.checkpoint_dir.join(format!("{stem}_history.csv"));
    write_text(&hist_path, &history_csv(&outcome.history))?;
    log.artifact(&hist_path);
    log.put("stopped_early", outcome.stopped_early);

    let last = outcome.history.last().expect("epochs > 0 ran");
    println!(
        "trained {stem} on {} slices: {} epochs, final loss {:.6}{}",
        slices.len(),
        outcome.history.len(),
        last.loss,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    log.finish(&cfg.paths.output_dir)
}

fn load_models(dir: &Path) -> Result<Vec<CascadeModel>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("checkpoint dir {}: {e}", dir.display())))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let name = entry
            .map_err(|e| CliError::Io(e.to_string()))?
            .file_name()
            .to_string_lossy()
            .into_owned();
        if let Some(id) = name
            .strip_prefix("gsm_")
            .and_then(|rest| rest.strip_suffix(".ckpt"))
        {
            ids.insert(id.to_string());
        }
    }
    if ids.is_empty() {
        return Err(CliError::Data(format!(
            "no gsm_*.ckpt in {}; run `fprnet train-gsm` first",
            dir.display()
        )));
    }
    let mut models = Vec::new();
    for id in ids {
        let gsm = checkpoint::load(&dir.join(format!("gsm_{id}.ckpt")))?;
        let lrm_path = dir.join(format!("lrm_{id}.ckpt"));
        let lrm = load_required_checkpoint(&lrm_path, "run `fprnet train-lrm` first")?;
        models.push(CascadeModel::new(
            id, gsm.graph, gsm.params, lrm.graph, lrm.params,
        )?);
    }
    Ok(models)
}

pub fn cmd_infer(cfg: &PipelineConfig, hash: &str, split: Split) -> Result<(), CliError> {
    let corpus = CorpusOnDisk::load(&cfg.paths.corpus_dir)?;
    let stats = pet_stats(cfg, &corpus)?;
    let pcfg = cfg.preprocess.core_config(Some(stats));
    let models = load_models(&cfg.paths.checkpoint_dir)?;

    let pred_dir = cfg.paths.output_dir.join("predictions");
    ensure_dir(&pred_dir)?;
    let mut log = RunLog::new("infer", hash, None);
    log.put("models", models.len());

    let entries = corpus.select(cfg.train.train_count, split)?;
    for entry in entries {
        let s = corpus.load_study(entry)?;
        let study = preprocess_study(&s.pet, &s.ct, None, &pcfg)?;
        let external = match &cfg.fusion.external_dir {
            Some(d) => {
                let path = d.join(format!("{}.nii", entry.id));
                if !path.exists() {
                    return Err(CliError::Data(format!(
                        "external probability map {} not found",
                        path.display()
                    )));
                }
                Some(read_volume(&path, Modality::Prob)?)
            }
            None => None,
        };
        let pred = cascade::segment_study(&models, external.as_ref(), cfg.fusion.w_ext, &study)?;

        let prob_path = pred_dir.join(format!("{}_prob.nii", entry.id));
        write_volume_with(&pred.prob, &prob_path, DataType::F64, Endianness::Little)?;
        log.artifact(&prob_path);
        let mask_path = pred_dir.join(format!("{}_mask.nii", entry.id));
        write_volume(&pred.binary, &mask_path)?;
        log.artifact(&mask_path);

        let mut sidecar = String::new();
        for (source, weight) in &pred.provenance {
            let _ = writeln!(sidecar, "{source}={weight}");
        }
        let prov_path = pred_dir.join(format!("{}_provenance.txt", entry.id));
        write_text(&prov_path, &sidecar)?;
        log.artifact(&prov_path);
    }
    println!(
        "wrote predictions for {} studies to {}",
        entries.len(),
        pred_dir.display()
    );
    log.finish(&cfg.paths.output_dir)
}

pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    hash: &str,
    split: Split,
    pred_dir: Option<&Path>,
) -> Result<(), CliError> {
    let corpus = CorpusOnDisk::load(&cfg.paths.corpus_dir)?;
    let connectivity = cfg.metrics.connectivity()?;
    let default_dir = cfg.paths.output_dir.join("predictions");
    let pred_dir = pred_dir.unwrap_or(&default_dir);

    let mut reports = Vec::new();
    for entry in corpus.select(cfg.train.train_count, split)? {
        let gt = read_volume(&corpus.volume_path(&entry.id, "gt"), Modality::Mask)?;
        // Predictions live on the preprocessed (cropped) grid; evaluate
        // there.
        let gt = crop_axial(&gt, cfg.preprocess.patch_xy)?;
        let mask_path = pred_dir.join(format!("{}_mask.nii", entry.id));
        if !mask_path.exists() {
            return Err(CliError::Data(format!(
                "missing prediction {}; run `fprnet infer` first",
                mask_path.display()
            )));
        }
        let pred = read_volume(&mask_path, Modality::Mask)?;
        reports.push(evaluate_study(&entry.id, &pred, &gt, connectivity)?);
    }

    let summary = metrics::summarize(&reports);
    ensure_dir(&cfg.paths.output_dir)?;
    let mut log = RunLog::new("evaluate", hash, None);

    let metrics_path = cfg.paths.output_dir.join("metrics.csv");
    write_text(&metrics_path, &metrics::reports_to_csv(&reports))?;
    log.artifact(&metrics_path);

    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let summary_csv = format!(
        "n_studies,n_healthy,mean_dice,mean_fpv_ml,mean_fnv_ml,connectivity\n{},{},{},{},{},{}\n",
        summary.n_studies,
        summary.n_healthy,
        opt(summary.mean_dice),
        summary.mean_fpv,
        opt(summary.mean_fnv),
        summary.connectivity.code()
    );
    let summary_path = cfg.paths.output_dir.join("summary.csv");
    write_text(&summary_path, &summary_csv)?;
    log.artifact(&summary_path);

    println!(
        "{} studies ({} healthy), connectivity {}",
        summary.n_studies,
        summary.n_healthy,
        summary.connectivity.code()
    );
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!("mean dice:   {}", fmt(summary.mean_dice));
    println!("mean fpv ml: {:.4}", summary.mean_fpv);
    println!("mean fnv ml: {}", fmt(summary.mean_fnv));
    log.finish(&cfg.paths.output_dir)
}

fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricsReport>, CliError> {
    let bad = |what: &str| CliError::Data(format!("submission {}: {what}", path.display()));
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read submission {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(metrics::CSV_HEADER) {
        return Err(bad(&format!("expected header `{}`", metrics::CSV_HEADER)));
    }
    let mut reports = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(&format!("row `{line}` does not have 6 fields")));
        }
        let opt_f64 = |s: &str| -> Result<Option<f64>, CliError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| bad(&format!("bad number `{s}`")))
            }
        };
        reports.push(MetricsReport {
            study_id: fields[0].to_string(),
            healthy: fields[1]
                .parse()
                .map_err(|_| bad(&format!("bad healthy flag `{}`", fields[1])))?,
            dice: opt_f64(fields[2])?,
            fpv_ml: fields[3]
                .parse()
                .map_err(|_| bad(&format!("bad number `{}`", fields[3])))?,
            fnv_ml: opt_f64(fields[4])?,
            connectivity: fields[5]
                .parse::<u8>()
                .ok()
                .and_then(Connectivity::from_code)
                .ok_or_else(|| bad(&format!("bad connectivity `{}`", fields[5])))?,
        });
    }
    Ok(reports)
}

pub fn cmd_rank(cfg: &PipelineConfig, hash: &str, submissions: &[PathBuf]) -> Result<(), CliError> {
    let mut subs = Vec::new();
    let mut seen = BTreeSet::new();
    for path in submissions {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| CliError::Data(format!("no submission id in {}", path.display())))?;
        if !seen.insert(id.clone()) {
            return Err(CliError::Data(format!("duplicate submission id `{id}`")));
        }
        let summary = metrics::summarize(&parse_metrics_csv(path)?);
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| CliError::Data(format!("submission `{id}` has no {what}")))
        };
        subs.push(SubmissionSummary {
            mean_dice: need(summary.mean_dice, "tumor studies, so no dice mean")?,
            mean_fpv: summary.mean_fpv,
            mean_fnv: need(summary.mean_fnv, "tumor studies, so no fnv mean")?,
            id,
        });
    }

    let ranked = rank_aggregate(&subs)?;
    let mut csv = String::from("position,submission,rank_dice,rank_fpv,rank_fnv,final_score\n");
    for (i, r) in ranked.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            i + 1,
            r.id,
            r.rank_dice,
            r.rank_fpv,
            r.rank_fnv,
            r.final_score
        );
        println!(
            "{:>3}. {}  score {:.4} (dice rank {}, fpv rank {}, fnv rank {})",
            i + 1,
            r.id,
            r.final_score,
            r.rank_dice,
            r.rank_fpv,
            r.rank_fnv
        );
    }
    ensure_dir(&cfg.paths.output_dir)?;
    let mut log = RunLog::new("rank", hash, None);
    let path = cfg.paths.output_dir.join("leaderboard.csv");
    write_text(&path, &csv)?;
    log.artifact(&path);
    log.finish(&cfg.paths.output_dir)
}
