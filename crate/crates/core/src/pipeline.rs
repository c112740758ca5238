//! End-to-end run on synthetic data, plus the dataset directory layout the
//! individual CLI stages share.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{sweep_csv, sweep_beta, write_detector, SweepConfig, SweepRow, VaDetector};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_report, chair_scores, emit_report, extract_mentions, intervention_report,
    split_sentences, AccuracyReport, CaptionEvalInput, ChairScores, InterventionTable, QaResult,
    Report, ReportFormat,
};
use crate::fsutil;
use crate::refine::{
    answer_override, greedy_decode, rollback_decode, ContentTokenFilter, DecodeLimits,
    DetectorJudge, OverrideOutcome, RefineOutcome,
};
use crate::scoring::{
    activation_level_summary, compute_sensitivity_map, context_similarity_analysis,
    top_k_per_layer, write_sensitivity_map, RangePolicy, SensitivityMap, SensitivityOptions,
    SimilarityOptions, SimilaritySummary, DEFAULT_BINS,
};
use crate::seed;
use crate::synth::{
    dataset_trace, generate_contrastive_dataset_salted, record_trace, ContrastivePair, Gold,
    Intervention, InterventionMode, QaRecord, Scene, SynthModel, SynthModelConfig, SynthOracle,
};
use crate::trace::{write_trace, ActivationTrace, Curation, LabeledTokens, NeuronId};

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TRACE_DIR: &str = "trace";

/// Output locations, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    pub data: PathBuf,
    pub traces: PathBuf,
    pub map: PathBuf,
    pub detector: PathBuf,
    pub reports: PathBuf,
}

impl Default for PipelinePaths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            traces: "traces".into(),
            map: "map".into(),
            detector: "detector.bin".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PipelinePaths,
    pub model: SynthModelConfig,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub k_bins: usize,
    pub range_policy: RangePolicy,
    pub curation: Curation,
    pub heatmap_top_k: usize,
    pub heatmap_clip: Option<f64>,
    pub sweep: SweepConfig,
    pub filter: ContentTokenFilter,
    pub limits: DecodeLimits,
    pub generation_scenes: usize,
    pub similarity: SimilarityOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PipelinePaths::default(),
            model: SynthModelConfig::default(),
            train_pairs: 300,
            eval_pairs: 600,
            k_bins: DEFAULT_BINS,
            range_policy: RangePolicy::UnionMinMax,
            curation: Curation::default(),
            heatmap_top_k: 100,
            heatmap_clip: Some(0.4),
            sweep: SweepConfig::default(),
            filter: ContentTokenFilter::default(),
            limits: DecodeLimits {
                max_tokens: 24,
                ..DecodeLimits::default()
            },
            generation_scenes: 50,
            similarity: SimilarityOptions::default(),
        }
    }
}

impl PipelineConfig {
    /// Load from TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
        }
    }

    /// Stage seeds all derive from `seed`; the model seed is overwritten.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.model.seed = seed::derive(self.seed, "synth-model");
        cfg.sweep.train.seed = seed::derive(self.seed, "detector");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_pairs < 10 || self.eval_pairs == 0 {
            return Err(Error::InvalidArgument(
                "need at least 10 training pairs and one evaluation pair".into(),
            ));
        }
        if self.k_bins == 0 {
            return Err(Error::InvalidArgument("k_bins must be positive".into()));
        }
        Ok(())
    }
}

/// A synthetic dataset as stored on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub model: SynthModelConfig,
    pub pairs: Vec<ContrastivePair>,
}

impl Dataset {
    pub fn generate(model: &SynthModelConfig, n_pairs: usize, salt: &str) -> Result<Self> {
        Ok(Self {
            model: model.clone(),
            pairs: generate_contrastive_dataset_salted(model, n_pairs, salt)?,
        })
    }

    pub fn records(&self) -> Vec<QaRecord> {
        self.pairs
            .iter()
            .flat_map(|p| [p.yes.clone(), p.no.clone()])
            .collect()
    }

    pub fn scenes(&self) -> BTreeMap<String, Scene> {
        self.pairs
            .iter()
            .map(|p| (p.scene.id.clone(), p.scene.clone()))
            .collect()
    }

    /// Writes `model.json`, `pairs.jsonl`, `records.jsonl` and the labeled
    /// trace into `dir`.
    pub fn write(&self, dir: &Path, model: &SynthModel) -> Result<()> {
        fsutil::write_json(&dir.join(MODEL_FILE), &self.model)?;
        fsutil::write_jsonl(&dir.join(PAIRS_FILE), &self.pairs)?;
        fsutil::write_jsonl(&dir.join(RECORDS_FILE), &self.records())?;
        write_trace(&dataset_trace(model, &self.pairs)?, &dir.join(TRACE_DIR))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            model: fsutil::read_json(&dir.join(MODEL_FILE))?,
            pairs: fsutil::read_jsonl(&dir.join(PAIRS_FILE))?,
        })
    }
}

/// Unrefined answers from the model's own head, optionally intervened.
pub fn qa_model_answers(
    model: &SynthModel,
    records: &[QaRecord],
    scenes: &BTreeMap<String, Scene>,
    intervention: Option<&Intervention>,
) -> Result<Vec<QaResult>> {
    records
        .par_iter()
        .map(|r| {
            let scene = lookup(scenes, &r.scene_id)?;
            Ok(QaResult {
                record_id: r.record_id.clone(),
                gold: r.gold,
                predicted: model.answer(r, scene, intervention)?.answer,
            })
        })
        .collect()
}

fn lookup<'a>(scenes: &'a BTreeMap<String, Scene>, id: &str) -> Result<&'a Scene> {
    scenes
        .get(id)
        .ok_or_else(|| Error::RecordMismatch(format!("no scene {id:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideRecord {
    pub record_id: String,
    pub gold: Gold,
    pub predicted: Gold,
    #[serde(flatten)]
    pub outcome: OverrideOutcome,
}

impl From<&OverrideRecord> for QaResult {
    fn from(r: &OverrideRecord) -> Self {
        QaResult {
            record_id: r.record_id.clone(),
            gold: r.gold,
            predicted: r.predicted,
        }
    }
}

pub fn qa_override(
    model: &SynthModel,
    records: &[QaRecord],
    scenes: &BTreeMap<String, Scene>,
    detector: &VaDetector,
    filter: &ContentTokenFilter,
) -> Result<Vec<OverrideRecord>> {
    records
        .par_iter()
        .map(|r| {
            let trace = record_trace(model, r, lookup(scenes, &r.scene_id)?)?;
            let outcome = answer_override(&trace, detector, filter)?;
            Ok(OverrideRecord {
                record_id: r.record_id.clone(),
                gold: r.gold,
                predicted: outcome.answer,
                outcome,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub scene_id: String,
    pub baseline_text: Vec<String>,
    pub baseline_hallucination_rate: Option<f64>,
    pub refined_hallucination_rate: Option<f64>,
    pub baseline_chair: ChairScores,
    pub refined_chair: ChairScores,
    pub refined: RefineOutcome,
}

fn caption_chair(
    model: &SynthModel,
    scene: &Scene,
    text: &[String],
    terminators: &[String],
) -> Result<ChairScores> {
    let mut sentences = split_sentences(text, terminators);
    if sentences.is_empty() {
        sentences.push(Vec::new());
    }
    let mentions = extract_mentions(&sentences, &model.object_vocabulary(), &BTreeMap::new());
    let input = CaptionEvalInput {
        sentences,
        mentioned_objects: mentions,
        ground_truth_objects: scene.grounded_concepts.clone(),
    };
    chair_scores(&input, &BTreeMap::new())
}

/// Greedy baseline and rollback-refined description of one scene.
pub fn generate_for_scene(
    model: &SynthModel,
    scene: &Scene,
    detector: &VaDetector,
    filter: &ContentTokenFilter,
    limits: &DecodeLimits,
) -> Result<GenerationRecord> {
    let oracle = SynthOracle::new(model, scene, &format!("gen/{}", scene.id))?;
    let prompt = oracle.prompt();
    let base = greedy_decode(&oracle, &prompt, limits.max_tokens)?;
    let mut judge = DetectorJudge {
        detector,
        dims: model.dims(),
        filter,
    };
    let refined = rollback_decode(&oracle, &mut judge, &prompt, limits)?;
    let base_text: Vec<String> = base.iter().map(|&t| model.token_text(t).to_string()).collect();
    Ok(GenerationRecord {
        scene_id: scene.id.clone(),
        baseline_hallucination_rate: model.hallucination_rate(&base, scene),
        refined_hallucination_rate: model.hallucination_rate(&refined.final_tokens, scene),
        baseline_chair: caption_chair(model, scene, &base_text, &limits.sentence_terminators)?,
        refined_chair: caption_chair(
            model,
            scene,
            &refined.final_text,
            &limits.sentence_terminators,
        )?,
        baseline_text: base_text,
        refined,
    })
}

/// Hallucinated concepts over emitted concepts, pooled across scenes.
pub fn pooled_hallucination_rate<'a>(
    model: &SynthModel,
    runs: impl IntoIterator<Item = (&'a [usize], &'a Scene)>,
) -> Option<f64> {
    let (mut bad, mut total) = (0usize, 0usize);
    for (tokens, scene) in runs {
        for &t in tokens {
            if model.role(t).is_concept() {
                total += 1;
                bad += usize::from(model.is_ungrounded(t, scene));
            }
        }
    }
    (total > 0).then(|| bad as f64 / total as f64)
}

/// Sums counts over captions and recomputes the ratios.
pub fn pool_chair(scores: &[ChairScores]) -> Option<ChairScores> {
    let first = scores.first()?;
    let mut acc = first.clone();
    for s in &scores[1..] {
        acc.hallucinated_objects += s.hallucinated_objects;
        acc.total_objects += s.total_objects;
        acc.hallucinated_sentences += s.hallucinated_sentences;
        acc.total_sentences += s.total_sentences;
    }
    acc.object_ratio = if acc.total_objects == 0 {
        0.0
    } else {
        acc.hallucinated_objects as f64 / acc.total_objects as f64
    };
    acc.sentence_ratio = acc.hallucinated_sentences as f64 / acc.total_sentences.max(1) as f64;
    acc.swapped_labels.c_s = acc.object_ratio;
    acc.swapped_labels.c_i = acc.sentence_ratio;
    acc.conventional_labels.c_s = acc.sentence_ratio;
    acc.conventional_labels.c_i = acc.object_ratio;
    Some(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub planted: Vec<NeuronId>,
    pub top_scored: Vec<NeuronId>,
    pub planted_recovered: usize,
    pub best_beta: f64,
    pub selected_neurons: Vec<NeuronId>,
    pub sweep: Vec<SweepRow>,
    pub baseline: AccuracyReport,
    pub refined: AccuracyReport,
    pub intervention: InterventionTable,
    pub similarity: SimilaritySummary,
    pub baseline_hallucination_rate: Option<f64>,
    pub refined_hallucination_rate: Option<f64>,
    pub baseline_chair: Option<ChairScores>,
    pub refined_chair: Option<ChairScores>,
    pub total_rollbacks: usize,
}

fn write_all_formats(report: &Report, dir: &Path, stem: &str) -> Result<()> {
    for (fmt, ext) in [
        (ReportFormat::Csv, "csv"),
        (ReportFormat::Json, "json"),
        (ReportFormat::Markdown, "md"),
    ] {
        emit_report(report, &dir.join(format!("{stem}.{ext}")), fmt)?;
    }
    Ok(())
}

/// Synthesize, score, sweep, train, refine and evaluate. Everything lands
/// in `out`, which is replaced atomically on success.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    let cfg = config.resolved();
    cfg.validate()?;
    let model = SynthModel::new(cfg.model.clone())?;
    let dims = model.dims();
    let mut summary = None;

    fsutil::write_dir_atomic(out, |root| {
        let p = &cfg.paths;
        let echo = |dir: &Path| fsutil::write_json(&dir.join(CONFIG_FILE), &cfg);
        echo(root)?;

        log::info!("synthesizing {} + {} pairs", cfg.train_pairs, cfg.eval_pairs);
        let train = Dataset::generate(&cfg.model, cfg.train_pairs, "train")?;
        let eval = Dataset::generate(&cfg.model, cfg.eval_pairs, "eval")?;
        let data_dir = root.join(&p.data);
        for (name, ds) in [("train", &train), ("eval", &eval)] {
            let d = data_dir.join(name);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            fsutil::write_json(&d.join(MODEL_FILE), &ds.model)?;
            fsutil::write_jsonl(&d.join(PAIRS_FILE), &ds.pairs)?;
            fsutil::write_jsonl(&d.join(RECORDS_FILE), &ds.records())?;
        }
        std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        echo(&data_dir)?;

        log::info!("tracing");
        let train_trace = dataset_trace(&model, &train.pairs)?;
        let traces_dir = root.join(&p.traces);
        write_trace(&train_trace, &traces_dir.join("train"))?;
        echo(&traces_dir)?;
        let traces: Vec<ActivationTrace> = vec![train_trace];

        log::info!("scoring {} neurons", dims.neurons());
        let map = compute_sensitivity_map(
            &traces,
            &SensitivityOptions {
                k_bins: cfg.k_bins,
                range_policy: cfg.range_policy,
                curation: cfg.curation,
                provenance: format!("synthetic train split, seed {}", cfg.seed),
            },
        )?;
        let map_dir = root.join(&p.map);
        write_sensitivity_map(&map, &map_dir)?;
        echo(&map_dir)?;

        let reports = root.join(&p.reports);
        std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
        echo(&reports)?;
        let heatmap = top_k_per_layer(&map, cfg.heatmap_top_k.min(dims.d_ffn), cfg.heatmap_clip)?;
        heatmap.write_csv(&reports.join("heatmap.csv"))?;

        log::info!("sweeping {} β values", cfg.sweep.grid.len());
        let sweep_cfg = SweepConfig {
            curation: cfg.curation,
            ..cfg.sweep.clone()
        };
        let sweep = sweep_beta(&map, &traces, &sweep_cfg, cfg.sweep.train.seed)?;
        fsutil::write_file_atomic(&reports.join("sweep.csv"), sweep_csv(&sweep.rows).as_bytes())?;
        let detector = sweep.best_detector.clone();
        write_detector(&detector, &root.join(&p.detector))?;
        let selected = detector.neuron_order.clone();

        let labeled = LabeledTokens::gather(&traces, cfg.curation)?;
        let levels = activation_level_summary(
            &selected.iter().map(|&n| labeled.pair(&traces, n)).collect::<Vec<_>>(),
        );
        let mut csv = String::from("layer,index,present_mean,absent_mean\n");
        for r in &levels {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.layer, r.index, r.present_mean, r.absent_mean
            ));
        }
        fsutil::write_file_atomic(&reports.join("activation_levels.csv"), csv.as_bytes())?;
        let similarity = context_similarity_analysis(&traces, &selected, cfg.similarity)?;
        fsutil::write_json(&reports.join("similarity.json"), &similarity)?;

        log::info!("answering {} evaluation questions", 2 * eval.pairs.len());
        let records = eval.records();
        let scenes = eval.scenes();
        let baseline = qa_model_answers(&model, &records, &scenes, None)?;
        let overridden = qa_override(&model, &records, &scenes, &detector, &cfg.filter)?;
        let refined: Vec<QaResult> = overridden.iter().map(QaResult::from).collect();
        fsutil::write_jsonl(&reports.join("qa_baseline.jsonl"), &baseline)?;
        fsutil::write_jsonl(&reports.join("qa_override.jsonl"), &overridden)?;
        let base_report = accuracy_report(&baseline)?;
        let refined_report = accuracy_report(&refined)?;
        write_all_formats(
            &Report::Accuracy {
                rows: vec![
                    ("baseline".into(), base_report.clone()),
                    ("override".into(), refined_report.clone()),
                ],
            },
            &reports,
            "accuracy",
        )?;

        let mut runs = Vec::new();
        for mode in [InterventionMode::Zero, InterventionMode::Double] {
            let iv = Intervention {
                neurons: selected.iter().copied().collect(),
                mode,
            };
            runs.push(qa_model_answers(&model, &records, &scenes, Some(&iv))?);
        }
        let intervention = intervention_report(&baseline, &runs[0], &runs[1])?;
        write_all_formats(&Report::Intervention(intervention.clone()), &reports, "intervention")?;

        log::info!("generating for {} scenes", cfg.generation_scenes);
        let gen_scenes: Vec<&Scene> = eval
            .pairs
            .iter()
            .map(|p| &p.scene)
            .take(cfg.generation_scenes)
            .collect();
        let generations = gen_scenes
            .par_iter()
            .map(|s| generate_for_scene(&model, s, &detector, &cfg.filter, &cfg.limits))
            .collect::<Result<Vec<_>>>()?;
        fsutil::write_jsonl(&reports.join("generation.jsonl"), &generations)?;
        let base_tokens: Vec<Vec<usize>> = generations
            .iter()
            .map(|g| {
                g.baseline_text
                    .iter()
                    .map(|t| model.token_id(t))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let baseline_chair =
            pool_chair(&generations.iter().map(|g| g.baseline_chair.clone()).collect::<Vec<_>>());
        let refined_chair =
            pool_chair(&generations.iter().map(|g| g.refined_chair.clone()).collect::<Vec<_>>());
        for (name, c) in [("chair_baseline", &baseline_chair), ("chair_refined", &refined_chair)] {
            if let Some(c) = c {
                write_all_formats(&Report::Chair(c.clone()), &reports, name)?;
            }
        }

        let top = map.top_neurons(cfg.model.planted.len());
        let s = PipelineSummary {
            seed: cfg.seed,
            planted: cfg.model.planted.iter().copied().collect(),
            planted_recovered: top.iter().filter(|n| cfg.model.planted.contains(n)).count(),
            top_scored: top,
            best_beta: sweep.best_beta,
            selected_neurons: selected,
            sweep: sweep.rows,
            baseline: base_report,
            refined: refined_report,
            intervention,
            similarity,
            baseline_hallucination_rate: pooled_hallucination_rate(
                &model,
                base_tokens.iter().map(Vec::as_slice).zip(gen_scenes.iter().copied()),
            ),
            refined_hallucination_rate: pooled_hallucination_rate(
                &model,
                generations
                    .iter()
                    .map(|g| g.refined.final_tokens.as_slice())
                    .zip(gen_scenes.iter().copied()),
            ),
            baseline_chair,
            refined_chair,
            total_rollbacks: generations.iter().map(|g| g.refined.rollback_count).sum(),
        };
        fsutil::write_json(&root.join("summary.json"), &s)?;
        summary = Some(s);
        Ok(())
    })?;
    Ok(summary.expect("pipeline closure ran"))
}

/// Neurons with map score above `beta`, as an intervention target set.
pub fn intervention_for(map: &SensitivityMap, beta: f64, mode: InterventionMode) -> Result<Intervention> {
    Ok(Intervention {
        neurons: crate::scoring::select_va_neurons(map, beta)?.into_iter().collect(),
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_configs_load() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 7\ntrain_pairs = 50\n[model]\nnoise_sigma = 0.2\n").unwrap();
        let c = PipelineConfig::load(&t).unwrap();
        assert_eq!((c.seed, c.train_pairs, c.model.noise_sigma), (7, 50, 0.2));
        assert_eq!(c.k_bins, 20);
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(PipelineConfig::load(&j).unwrap(), c);
    }

    #[test]
    fn resolved_seeds_are_stage_salted() {
        let a = PipelineConfig { seed: 1, ..Default::default() }.resolved();
        let b = PipelineConfig { seed: 2, ..Default::default() }.resolved();
        assert_ne!(a.model.seed, b.model.seed);
        assert_ne!(a.model.seed, a.sweep.train.seed);
    }

    #[test]
    fn pooled_chair_sums_counts() {
        let model = SynthModel::new(SynthModelConfig::default()).unwrap();
        let scene = Scene::new("s", crate::synth::Triplet::new("dog", "lying", "meadow"), []);
        let words = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let term = vec![".".to_string()];
        let a = caption_chair(&model, &scene, &words("dog lying meadow ."), &term).unwrap();
        let b = caption_chair(&model, &scene, &words("cat lying bed ."), &term).unwrap();
        let p = pool_chair(&[a, b]).unwrap();
        assert_eq!((p.hallucinated_objects, p.total_objects), (2, 4));
        assert_eq!(p.sentence_ratio, 0.5);
    }
}
