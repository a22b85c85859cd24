use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tricoat_core::checkpoint::Checkpoint;
use tricoat_core::cohort::{
    cluster_subtypes, compute_mmse_deltas, load_cohort, CohortPaths, CohortTable, LabelSet, SchemaConfig, Subtype,
    N_CLASSES,
};
use tricoat_core::config::Config;
use tricoat_core::explain::{
    attribute_subject, build_prompt, cohort_feature_stats, rank_salient_features, AttributionReport, LlmClient,
    PromptDocument, PromptTemplate,
};
use tricoat_core::harness::{
    build_report, make_fold_plan, read_external_predictions, score_external, score_fold_model, train_all_folds,
    AttentionMaps, ExperimentSettings, FoldModel, FoldPlan, CLINICAL_GENETICS_CSV, CLINICAL_IMAGING_CSV,
    IMAGING_GENETICS_CSV,
};
use tricoat_core::input::SubjectInput;
use tricoat_core::models::{Model, ModelKind};
use tricoat_core::synth::{generate_cohort, write_synth_output, SynthManifest, MANIFEST_FILE};
use tricoat_core::{Error, Result};

use crate::manifest::Recorder;
use crate::Common;

pub const LABELS_FILE: &str = "labels/labels.json";
pub const INGESTION_FILE: &str = "labels/ingestion_report.json";
pub const PLAN_FILE: &str = "train/fold_plan.json";
pub const METRICS_JSON: &str = "evaluate/metrics.json";
pub const METRICS_TABLE: &str = "evaluate/metrics.txt";
pub const AUDIT_FILE: &str = "explain/llm_audit.jsonl";

pub struct Context {
    pub out_dir: PathBuf,
    pub config_path: PathBuf,
    pub config: Config,
    pub schema: SchemaConfig,
    pub recorder: Recorder,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.to_string(),
        })
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    require(path, producer)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl Context {
    pub fn new(common: &Common, config: &Config) -> Result<Self> {
        Ok(Self {
            out_dir: common.out_dir.clone(),
            config_path: common.config.clone(),
            config: config.clone(),
            schema: config.schema.resolve()?,
            recorder: Recorder::new(&common.out_dir),
        })
    }

    pub fn with_config(mut self, config: &Config) -> Self {
        self.config = config.clone();
        self
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        let rel = rel.as_ref();
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.out_dir.join(rel)
        }
    }

    fn cohort_paths(&self) -> CohortPaths {
        CohortPaths::in_dir(&self.path(&self.config.data.cohort_dir))
    }

    fn finish(self, command: &str) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        self.recorder
            .finish(command, self.config.seed, config, &self.config_path)
            .map(|_| ())
    }

    fn settings(&self) -> ExperimentSettings {
        self.config.settings()
    }

    fn load_raw_cohort(&mut self) -> Result<CohortTable> {
        let paths = self.cohort_paths();
        for p in paths.all() {
            require(p, "synth")?;
            self.recorder.input(p)?;
        }
        let (cohort, report) = load_cohort(&paths, &self.schema)?;
        if !report.dropped.is_empty() {
            log::warn!("{} subjects dropped during ingestion", report.dropped.len());
        }
        Ok(cohort)
    }

    /// Cohort restricted to labelled subjects, with labels attached.
    fn load_labelled_cohort(&mut self) -> Result<CohortTable> {
        let cohort = self.load_raw_cohort()?;
        let path = self.path(LABELS_FILE);
        let labels: LabelSet = read_json(&path, "labels")?;
        self.recorder.input(&path)?;
        let subtypes = labels.subtypes();
        let ids: Vec<String> = cohort.ids().into_iter().filter(|id| subtypes.contains_key(id)).collect();
        cohort.subset(&ids).with_labels(subtypes)
    }

    fn load_plan(&mut self) -> Result<FoldPlan> {
        let path = self.path(PLAN_FILE);
        let plan = read_json(&path, "train")?;
        self.recorder.input(&path)?;
        Ok(plan)
    }

    fn load_fold_models(&mut self, kind: ModelKind, n_outer: usize) -> Result<Vec<FoldModel>> {
        (0..n_outer)
            .map(|o| {
                let path = self.path("train").join(FoldModel::file_name(kind, o));
                require(&path, "train")?;
                self.recorder.input(&path)?;
                FoldModel::from_checkpoint(&Checkpoint::load(&path)?)
            })
            .collect()
    }

    fn subjects(&self, requested: Vec<String>, cohort: &CohortTable) -> Result<Vec<String>> {
        let ids = if !requested.is_empty() {
            requested
        } else if !self.config.explain.subjects.is_empty() {
            self.config.explain.subjects.clone()
        } else {
            cohort.ids()
        };
        if let Some(bad) = ids.iter().find(|id| cohort.get(id).is_none()) {
            return Err(Error::Data(format!("subject {bad} is not in the labelled cohort")));
        }
        Ok(ids)
    }
}

pub fn synth(mut ctx: Context) -> Result<()> {
    let out = generate_cohort(&ctx.config.synth, &ctx.schema, ctx.config.seed)?;
    let dir = ctx.path(&ctx.config.data.cohort_dir);
    for p in write_synth_output(&out, &ctx.schema, &dir)? {
        ctx.recorder.output(&p)?;
    }
    log::info!("synth: {} subjects, counts {:?}", out.cohort.len(), out.manifest.counts);
    ctx.finish("synth")
}

/// Class centroids and within-class sum of squares for given assignments.
fn label_set_from(assignments: BTreeMap<String, usize>, cohort: &CohortTable, seed: u64) -> Result<LabelSet> {
    let (traj, _) = compute_mmse_deltas(cohort);
    let mut sums = [[0.0; 3]; N_CLASSES];
    let mut counts = [0usize; N_CLASSES];
    for t in &traj {
        if let Some(&c) = assignments.get(&t.subject_id) {
            counts[c] += 1;
            for k in 0..3 {
                sums[c][k] += t.deltas[k];
            }
        }
    }
    let centroids: Vec<[f64; 3]> = sums
        .iter()
        .zip(counts)
        .map(|(s, n)| s.map(|v| v / n.max(1) as f64))
        .collect();
    let inertia = traj
        .iter()
        .filter_map(|t| {
            let c = *assignments.get(&t.subject_id)?;
            Some((0..3).map(|k| (t.deltas[k] - centroids[c][k]).powi(2)).sum::<f64>())
        })
        .sum();
    Ok(LabelSet {
        assignments,
        class_names: Subtype::ALL.iter().map(|s| s.name().to_string()).collect(),
        centroids,
        inertia,
        seed,
    })
}

pub fn labels(mut ctx: Context) -> Result<()> {
    let paths = ctx.cohort_paths();
    for p in paths.all() {
        require(p, "synth")?;
        ctx.recorder.input(p)?;
    }
    let (cohort, mut report) = load_cohort(&paths, &ctx.schema)?;
    let (traj, dropped) = compute_mmse_deltas(&cohort);
    report.dropped.extend(dropped);
    let set = if ctx.config.data.planted_labels {
        let mpath = ctx.path(&ctx.config.data.cohort_dir).join(MANIFEST_FILE);
        let manifest: SynthManifest = read_json(&mpath, "synth")?;
        ctx.recorder.input(&mpath)?;
        let keep: std::collections::BTreeSet<&str> = traj.iter().map(|t| t.subject_id.as_str()).collect();
        let assignments = manifest
            .subjects
            .iter()
            .filter(|s| keep.contains(s.subject_id.as_str()))
            .map(|s| (s.subject_id.clone(), s.class.index()))
            .collect();
        label_set_from(assignments, &cohort, ctx.config.seed)?
    } else {
        cluster_subtypes(&traj, &ctx.config.labels, ctx.config.seed)?
    };
    let mut sizes = [0usize; N_CLASSES];
    for &c in set.assignments.values() {
        sizes[c] += 1;
    }
    log::info!("labels: class sizes {sizes:?} (slow, intermediate, fast)");
    for (rel, value) in [
        (LABELS_FILE, serde_json::to_value(&set).expect("labels serialize")),
        (INGESTION_FILE, serde_json::to_value(&report).expect("report serializes")),
    ] {
        let p = ctx.path(rel);
        write_json(&p, &value)?;
        ctx.recorder.output(&p)?;
    }
    ctx.finish("labels")
}

fn model_list(ctx: &Context, models: Option<Vec<ModelKind>>) -> Result<Vec<ModelKind>> {
    match models {
        Some(m) => Ok(m),
        None => ctx.config.harness.models.iter().map(|s| s.parse()).collect(),
    }
}

pub fn train(mut ctx: Context, models: Option<Vec<ModelKind>>) -> Result<()> {
    let kinds = model_list(&ctx, models)?;
    let cohort = ctx.load_labelled_cohort()?;
    let h = &ctx.config.harness;
    let plan = make_fold_plan(cohort.labels.as_ref().expect("labelled"), h.n_outer, h.n_inner, ctx.config.seed)?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }
    let plan_path = ctx.path(PLAN_FILE);
    write_json(&plan_path, &plan)?;
    ctx.recorder.output(&plan_path)?;
    let settings = ctx.settings();
    for kind in kinds {
        let start = Instant::now();
        let folds = train_all_folds(&cohort, kind, &plan, &settings)?;
        for fm in &folds {
            let path = ctx.path("train").join(FoldModel::file_name(kind, fm.meta.outer_fold));
            fm.to_checkpoint()?.save(&path)?;
            ctx.recorder.output(&path)?;
        }
        log::info!("train: {kind} done in {:.1}s", start.elapsed().as_secs_f64());
    }
    ctx.finish("train")
}

pub fn evaluate(mut ctx: Context, models: Option<Vec<ModelKind>>, external: Vec<(String, PathBuf)>) -> Result<()> {
    let kinds = model_list(&ctx, models)?;
    let cohort = ctx.load_labelled_cohort()?;
    let plan = ctx.load_plan()?;
    let mut results = Vec::new();
    let mut seconds = BTreeMap::new();
    for kind in kinds {
        let start = Instant::now();
        let folds = ctx.load_fold_models(kind, plan.outer.len())?;
        let scored = folds
            .iter()
            .map(|fm| score_fold_model(&cohort, fm))
            .collect::<Result<Vec<_>>>()?;
        seconds.insert(kind.name().to_string(), start.elapsed().as_secs_f64());
        results.push((kind.name().to_string(), scored));
    }
    for (name, rel) in external {
        let start = Instant::now();
        let path = ctx.path(&rel);
        let preds = read_external_predictions(&path)?;
        ctx.recorder.input(&path)?;
        let scored = score_external(&preds, cohort.labels.as_ref().expect("labelled"), &plan)?;
        seconds.insert(name.clone(), start.elapsed().as_secs_f64());
        results.push((name, scored));
    }
    let report = build_report(&results, &plan, ctx.config.harness.alpha, seconds)?;
    let json = ctx.path(METRICS_JSON);
    write_json(&json, &report)?;
    let table = ctx.path(METRICS_TABLE);
    write_text(&table, &report.to_table())?;
    print!("{}", report.to_table());
    ctx.recorder.output(&json)?;
    ctx.recorder.output(&table)?;
    ctx.finish("evaluate")
}

pub fn attention(mut ctx: Context) -> Result<()> {
    let cohort = ctx.load_labelled_cohort()?;
    let plan = ctx.load_plan()?;
    let folds = ctx.load_fold_models(ModelKind::Tricoat, plan.outer.len())?;
    let mut groups = Vec::new();
    for fm in &folds {
        let Model::TriCoat(model) = &fm.model else {
            return Err(Error::Data("tricoat checkpoint holds a different model".into()));
        };
        let test = tricoat_core::harness::prepare_examples(&cohort, &fm.meta.normalization, &fm.meta.test_ids)?;
        let inputs: Vec<SubjectInput> = test.into_iter().map(|e| e.input).collect();
        groups.push((model, inputs));
    }
    let maps = AttentionMaps::average(groups.iter().map(|(m, i)| (*m, i.as_slice())))?;
    let dir = ctx.path("attention");
    for p in maps.write_csvs(&cohort.feature_names, &dir)? {
        ctx.recorder.output(&p)?;
    }
    log::info!(
        "attention: averaged over {} test subjects into {CLINICAL_IMAGING_CSV}, {CLINICAL_GENETICS_CSV}, {IMAGING_GENETICS_CSV}",
        maps.n_subjects
    );
    ctx.finish("attention")
}

pub fn attribute(mut ctx: Context, subjects: Vec<String>) -> Result<()> {
    let cohort = ctx.load_labelled_cohort()?;
    let plan = ctx.load_plan()?;
    let folds = ctx.load_fold_models(ModelKind::Tricoat, plan.outer.len())?;
    let ids = ctx.subjects(subjects, &cohort)?;
    let stats = cohort_feature_stats(&cohort);
    let n_steps = ctx.config.explain.n_steps;
    let reports: Vec<AttributionReport> = {
        use rayon::prelude::*;
        ids.par_iter()
            .map(|id| {
                let fm = folds
                    .iter()
                    .find(|f| f.meta.test_ids.contains(id))
                    .ok_or_else(|| Error::Data(format!("subject {id} is in no test fold")))?;
                attribute_subject(fm, &cohort, &stats, id, n_steps)
            })
            .collect::<Result<_>>()?
    };
    for r in &reports {
        let path = ctx.path("attribute").join(format!("{}.json", r.subject_id));
        write_json(&path, r)?;
        ctx.recorder.output(&path)?;
        log::info!(
            "attribute: {} predicted {} (p = {:.2}), completeness residual {:.2e}",
            r.subject_id,
            r.predicted_class,
            r.probability,
            r.completeness_residual
        );
    }
    ctx.finish("attribute")
}

pub fn explain(mut ctx: Context, subjects: Vec<String>) -> Result<()> {
    let ids = if !subjects.is_empty() {
        subjects
    } else if !ctx.config.explain.subjects.is_empty() {
        ctx.config.explain.subjects.clone()
    } else {
        let dir = ctx.path("attribute");
        require(&dir, "attribute")?;
        let mut v: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_string))
            .collect();
        v.sort();
        v
    };
    let template = match &ctx.config.explain.template {
        Some(p) => {
            let path = ctx.path(p);
            ctx.recorder.input(&path)?;
            PromptTemplate::load(&path)?
        }
        None => PromptTemplate::default(),
    };
    let mut llm = ctx.config.llm.clone();
    if let Some(t) = &llm.stub_transcript {
        let path = ctx.path(t);
        ctx.recorder.input(&path)?;
        llm.stub_transcript = Some(path);
    }
    let client = if llm.enabled {
        Some(LlmClient::from_env(llm, ctx.path(AUDIT_FILE))?)
    } else {
        None
    };
    for id in &ids {
        let path = ctx.path("attribute").join(format!("{id}.json"));
        let report: AttributionReport = read_json(&path, "attribute")?;
        ctx.recorder.input(&path)?;
        let ranking = rank_salient_features(&report, ctx.config.explain.top_k);
        let doc = build_prompt(id, &ranking, report.predicted_class, report.probability, &template);
        let text = doc.text();
        if PromptDocument::parse_segments(&text) != doc.segments {
            return Err(Error::Data(format!("prompt for {id} does not round-trip its segments")));
        }
        let txt = ctx.path("explain").join(format!("{id}_prompt.txt"));
        write_text(&txt, &text)?;
        ctx.recorder.output(&txt)?;
        let json = ctx.path("explain").join(format!("{id}_prompt.json"));
        write_json(&json, &doc)?;
        ctx.recorder.output(&json)?;
        if let Some(client) = &client {
            let response = client.send(&text)?;
            let rpath = ctx.path("explain").join(format!("{id}_response.json"));
            write_json(&rpath, &response)?;
            ctx.recorder.output(&rpath)?;
        }
    }
    if client.is_some() {
        let audit = ctx.path(AUDIT_FILE);
        ctx.recorder.output(&audit)?;
    }
    ctx.finish("explain")
}
