use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use originality::baselines::{cluster, select_k, ModelSelectionCurve};
use originality::bucketer::{
    bucket_task, content_hash, resume_task, AuditRecord, AuditSink, BucketAssignment, CheckpointOptions, JsonlAudit,
};
use originality::codebook::BucketId;
use originality::corpus::{load_corpus, load_measures, write_corpus, TaskCorpus};
use originality::distfit::{compare_lognormal, fit_powerlaw, fit_powerlaw_at, PowerLawFit};
use originality::embed::{load_cached_embeddings, CachedEmbedder, EmbeddingCache, HashingEmbedder, HttpEmbedder};
use originality::judge::{HttpChatClient, Judge, LlmJudge, MockJudge};
use originality::report::{build_report, compare_scores, AgreementReport, NamedLabeling, NamedScores, ReportOptions};
use originality::scoring::{score_dataset, write_scores_csv};
use originality::{Error, Result};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::inputs;
use crate::{
    BaselineArgs, BucketArgs, EmbedderKind, EmbeddingSource, EvaluateArgs, FitDistArgs, IngestArgs, JudgeKind,
    ReportArgs, ScoreArgs,
};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            serde_json::to_writer_pretty(&mut w, value)?;
            w.write_all(b"\n").map_err(|e| Error::io(p, e))?;
            w.flush().map_err(|e| Error::io(p, e))
        }
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sidecar recording the configuration behind a CSV artifact.
fn write_meta(path: &Path, config_hash: &str) -> Result<()> {
    let mut meta = path.as_os_str().to_owned();
    meta.push(".meta.json");
    write_json(
        Some(Path::new(&meta)),
        &serde_json::json!({ "config_hash": config_hash }),
    )
}

fn select_tasks(corpus: Vec<TaskCorpus>, wanted: &[String]) -> Result<Vec<TaskCorpus>> {
    if wanted.is_empty() {
        return Ok(corpus);
    }
    let missing: Vec<String> = wanted
        .iter()
        .filter(|w| !corpus.iter().any(|t| &t.task_id == *w))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage {
            message: "tasks not in the corpus".into(),
            keys: missing,
        });
    }
    Ok(corpus.into_iter().filter(|t| wanted.contains(&t.task_id)).collect())
}

pub fn ingest(config: &PipelineConfig, args: IngestArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, &config.schema.columns())?;
    if let Some(out) = &args.out {
        let mut w = create(out)?;
        write_corpus(&mut w, &corpus)?;
        w.flush().map_err(|e| Error::io(out, e))?;
    }
    let tasks: Vec<_> = corpus
        .iter()
        .map(|t| {
            serde_json::json!({
                "task_id": t.task_id,
                "ideas": t.len(),
                "participants": t.participant_count,
            })
        })
        .collect();
    write_json(
        None,
        &serde_json::json!({ "config_hash": config.hash(), "tasks": tasks }),
    )
}

/// Audit sink shared by concurrently bucketed tasks.
struct SharedAudit<'a>(&'a Mutex<Option<JsonlAudit>>);

impl AuditSink for SharedAudit<'_> {
    fn record(&mut self, record: &AuditRecord) -> Result<()> {
        match self.0.lock().expect("audit lock").as_mut() {
            Some(a) => a.record(record),
            None => Ok(()),
        }
    }
}

fn checkpoint_file(dir: &Path, task: &str) -> PathBuf {
    let safe: String = task
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    dir.join(format!("{safe}.checkpoint.json"))
}

pub fn bucket(mut config: PipelineConfig, args: BucketArgs) -> Result<()> {
    if let Some(k) = args.k_c {
        config.run.k_c = k;
    }
    if let Some(s) = args.strategy {
        config.run.strategy = s;
    }
    if let Some(s) = args.seed {
        config.run.ordering_seed = s;
    }
    if let Some(m) = args.max_attempts {
        config.run.max_attempts = m;
    }
    config.run.validate()?;
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }

    // Clients are built first so a missing key fails before any work.
    let (inner, batch, cache_path): (Box<dyn originality::embed::Embedder>, _, _) = match args.embedder {
        EmbedderKind::Http => {
            let e = config
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Config("--embedder http needs an [embeddings] section".into()))?;
            let client = HttpEmbedder::new(e.endpoint.clone(), config.retry)?;
            (Box::new(client), e.batch_options(), e.cache.clone())
        }
        EmbedderKind::Hashing => (
            Box::new(HashingEmbedder::new(args.hashing_dim)),
            Default::default(),
            config.embeddings.as_ref().and_then(|e| e.cache.clone()),
        ),
    };
    let cache = match args.embedding_cache.or(cache_path) {
        Some(p) => EmbeddingCache::open(p)?,
        None => EmbeddingCache::in_memory(),
    };
    let embedder = CachedEmbedder::new(inner, cache, batch);

    let columns = config.schema.columns();
    let judge: Box<dyn Judge> = match args.judge {
        JudgeKind::Http => {
            let chat = config
                .chat
                .clone()
                .ok_or_else(|| Error::Config("--judge http needs a [chat] section".into()))?;
            let client = HttpChatClient::new(chat, config.retry)?;
            Box::new(LlmJudge::new(client, config.run.strategy, config.run.max_attempts))
        }
        JudgeKind::Mock => {
            let path = args.oracle.as_ref().expect("clap enforces --oracle");
            let oracle = inputs::read_reference(path, "oracle", &config.schema)?;
            Box::new(MockJudge::new(oracle))
        }
    };
    config.run.judge_id = judge.describe();
    config.run.embedding_model = embedder.model_id().to_string();

    let corpus = select_tasks(load_corpus(&args.corpus, &columns)?, &args.task)?;
    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let audit = Mutex::new(args.audit.as_ref().map(JsonlAudit::append).transpose()?);
    log::info!(
        "bucketing {} tasks with {} (config {})",
        corpus.len(),
        config.run.judge_id,
        config.run.hash()
    );

    let run_one = |task: &TaskCorpus| -> Result<BucketAssignment> {
        let path = args.checkpoint_dir.as_ref().map(|d| checkpoint_file(d, &task.task_id));
        let opts = CheckpointOptions {
            path: path.clone(),
            every: args.checkpoint_every,
        };
        let mut sink = SharedAudit(&audit);
        let result = match path.filter(|p| args.resume && p.exists()) {
            Some(p) => resume_task(&p, task, &config.run, &embedder, judge.as_ref(), &mut sink, &opts),
            None => bucket_task(task, &config.run, &embedder, judge.as_ref(), &mut sink, &opts),
        };
        if let Ok(a) = &result {
            log::info!("task {}: {} ideas in {} buckets", task.task_id, a.len(), a.bucket_count);
        }
        result
    };

    let results: Vec<Mutex<Option<Result<BucketAssignment>>>> = corpus.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.min(corpus.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = corpus.get(i) else { break };
                *results[i].lock().expect("result lock") = Some(run_one(task));
            });
        }
    });
    let assignments = results
        .into_iter()
        .map(|r| r.into_inner().expect("result lock").expect("every task ran"))
        .collect::<Result<Vec<_>>>()?;
    write_json(Some(&args.out), &assignments)
}

fn assignments_for(corpus: &[TaskCorpus], paths: &[PathBuf], config: &PipelineConfig) -> Result<Vec<BucketAssignment>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(inputs::read_labeling(p, "label", corpus, &config.schema)?);
    }
    Ok(all)
}

fn restrict(corpus: Vec<TaskCorpus>, assignments: &[BucketAssignment]) -> Vec<TaskCorpus> {
    let (kept, skipped): (Vec<_>, Vec<_>) = corpus
        .into_iter()
        .partition(|t| assignments.iter().any(|a| a.task_id == t.task_id));
    for t in skipped {
        log::warn!("task {} has no assignment and is left out", t.task_id);
    }
    kept
}

pub fn score(config: &PipelineConfig, args: ScoreArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, &config.schema.columns())?;
    let assignments = assignments_for(&corpus, &args.assignment, config)?;
    let corpus = restrict(corpus, &assignments);
    let scores = score_dataset(&corpus, &assignments)?;
    match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            write_scores_csv(&mut w, &scores)?;
            w.flush().map_err(|e| Error::io(p, e))?;
            write_meta(p, &config.hash())
        }
        None => write_scores_csv(std::io::stdout().lock(), &scores),
    }
}

fn emit_report(
    report: &mut AgreementReport,
    config: &PipelineConfig,
    json: Option<&Path>,
    md: Option<&Path>,
) -> Result<()> {
    report.config_hash = Some(config.hash());
    if let Some(md) = md {
        write_text(md, &report.to_markdown())?;
    }
    write_json(json, report)
}

pub fn evaluate(config: &PipelineConfig, args: EvaluateArgs) -> Result<()> {
    let options = ReportOptions {
        normalized: !args.raw,
        ..Default::default()
    };
    let mut report = if let (Some(a), Some(b)) = (&args.labels_a, &args.labels_b) {
        let corpus_path = args.corpus.as_ref().expect("clap enforces --corpus");
        let corpus = load_corpus(corpus_path, &config.schema.columns())?;
        let la = inputs::read_labeling(a, "a", &corpus, &config.schema)?;
        let lb = inputs::read_labeling(b, "b", &corpus, &config.schema)?;
        let corpus = restrict(corpus, &la);
        let labelings = [
            NamedLabeling {
                name: "a".into(),
                assignments: la,
            },
            NamedLabeling {
                name: "b".into(),
                assignments: lb,
            },
        ];
        build_report(&corpus, &labelings, &[], &[], &options)?
    } else {
        let (a, b) = (args.scores_a.as_ref().unwrap(), args.scores_b.as_ref().unwrap());
        let sa = NamedScores {
            name: "a".into(),
            scores: inputs::read_scores(a)?,
        };
        let sb = NamedScores {
            name: "b".into(),
            scores: inputs::read_scores(b)?,
        };
        AgreementReport {
            config_hash: None,
            normalized_scores: options.normalized,
            labelings: vec![],
            clustering: vec![],
            scores: vec![compare_scores(&sa, &sb, options.normalized)?],
            validity: vec![],
        }
    };
    emit_report(&mut report, config, args.out.as_deref(), args.markdown.as_deref())
}

#[derive(Serialize)]
struct TaskFit {
    task_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<PowerLawFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lognormal: Option<originality::distfit::LognormalFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn fit_sizes(task_id: Option<String>, sizes: &[u64], xmin: Option<u64>) -> TaskFit {
    let fit = match xmin {
        Some(x) => fit_powerlaw_at(sizes, x),
        None => fit_powerlaw(sizes),
    };
    match fit.and_then(|f| compare_lognormal(sizes, &f).map(|lr| (f, lr))) {
        Ok((f, lr)) => TaskFit {
            task_id,
            fit: Some(f),
            lognormal: Some(lr.lognormal),
            error: None,
        },
        Err(e) => TaskFit {
            task_id,
            fit: None,
            lognormal: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn fit_dist(config: &PipelineConfig, args: FitDistArgs) -> Result<()> {
    let fits = if let Some(path) = &args.sizes {
        let sizes = inputs::read_sizes(path)?;
        let fit = match args.xmin {
            Some(x) => fit_powerlaw_at(&sizes, x)?,
            None => fit_powerlaw(&sizes)?,
        };
        let lr = compare_lognormal(&sizes, &fit)?;
        vec![TaskFit {
            task_id: None,
            fit: Some(fit),
            lognormal: Some(lr.lognormal),
            error: None,
        }]
    } else {
        let path = args.assignment.as_ref().expect("clap enforces an input");
        let assignments = match &args.corpus {
            Some(c) => {
                let corpus = load_corpus(c, &config.schema.columns())?;
                inputs::read_labeling(path, "label", &corpus, &config.schema)?
            }
            None => inputs::read_assignments(path)?,
        };
        let mut fits: Vec<TaskFit> = assignments
            .iter()
            .map(|a| fit_sizes(Some(a.task_id.clone()), &a.bucket_sizes(), args.xmin))
            .collect();
        let pooled: Vec<u64> = assignments.iter().flat_map(|a| a.bucket_sizes()).collect();
        if assignments.len() > 1 {
            fits.push(fit_sizes(None, &pooled, args.xmin));
        }
        fits
    };
    write_json(
        args.out.as_deref(),
        &serde_json::json!({ "config_hash": config.hash(), "fits": fits }),
    )
}

#[derive(Serialize)]
struct BaselineRun<'a> {
    method: originality::baselines::Method,
    criterion: originality::baselines::Criterion,
    stride: usize,
    seed: u64,
    k: Option<usize>,
    embedding_model: &'a str,
}

pub fn baseline(config: &PipelineConfig, args: BaselineArgs) -> Result<()> {
    let corpus = select_tasks(load_corpus(&args.corpus, &config.schema.columns())?, &args.task)?;
    let hashing = HashingEmbedder::new(args.hashing_dim);
    let model_id = match args.embeddings {
        EmbeddingSource::Hashing => format!("hashing-{}", args.hashing_dim),
        EmbeddingSource::Cache => config
            .embeddings
            .as_ref()
            .map(|e| e.endpoint.model.clone())
            .ok_or_else(|| Error::Config("cached embeddings need the [embeddings] model name".into()))?,
    };
    let cache_path = args
        .embedding_cache
        .clone()
        .or_else(|| config.embeddings.as_ref().and_then(|e| e.cache.clone()));
    let run_hash = content_hash(&BaselineRun {
        method: args.method,
        criterion: args.criterion,
        stride: args.stride,
        seed: args.seed,
        k: args.k,
        embedding_model: &model_id,
    });

    let mut assignments = Vec::new();
    let mut curves: Vec<ModelSelectionCurve> = Vec::new();
    for task in &corpus {
        let texts: Vec<String> = task.ideas.iter().map(|i| i.idea_text.clone()).collect();
        let vectors: Vec<Vec<f64>> = match args.embeddings {
            EmbeddingSource::Hashing => texts.iter().map(|t| hashing.embed_one(t)).collect(),
            EmbeddingSource::Cache => {
                let path = cache_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("no embedding cache given".into()))?;
                load_cached_embeddings(path, &model_id, &texts)?
                    .into_iter()
                    .map(|e| e.values)
                    .collect()
            }
        };
        let labels = match args.k {
            Some(k) => cluster(&vectors, args.method, k, args.seed)?,
            None => {
                let (curve, labels) = select_k(&vectors, args.method, args.criterion, args.stride, args.seed)?;
                log::info!("task {}: chose K = {}", task.task_id, curve.chosen_k);
                curves.push(curve);
                labels
            }
        };
        let pairs = task
            .ideas
            .iter()
            .zip(&labels)
            .map(|(idea, l)| (idea.key(), BucketId::new(*l as u32 + 1).expect("non-zero")))
            .collect();
        let mut a = BucketAssignment::from_pairs(task.task_id.clone(), pairs)?;
        a.config_hash = Some(run_hash.clone());
        assignments.push(a);
    }
    write_json(Some(&args.out), &assignments)?;
    if let Some(curve) = &args.curve {
        let by_task: BTreeMap<&str, &ModelSelectionCurve> =
            corpus.iter().map(|t| t.task_id.as_str()).zip(curves.iter()).collect();
        write_json(Some(curve), &by_task)?;
    }
    Ok(())
}

pub fn report(config: &PipelineConfig, args: ReportArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, &config.schema.columns())?;
    let labelings = args
        .labels
        .iter()
        .map(|(name, path)| {
            Ok(NamedLabeling {
                name: name.clone(),
                assignments: inputs::read_labeling(path, name, &corpus, &config.schema)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = args
        .scores
        .iter()
        .map(|(name, path)| {
            Ok(NamedScores {
                name: name.clone(),
                scores: inputs::read_scores(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let measures = match &args.measures {
        Some(p) => load_measures(p, config.schema.measure_participant(), &args.measure_cols)?,
        None => vec![],
    };
    let options = ReportOptions {
        normalized: !args.raw,
        spearman_measures: args.spearman_measures.iter().cloned().collect(),
    };
    let mut report = build_report(&corpus, &labelings, &scores, &measures, &options)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_text(&args.out.join("bland_altman.csv"), &report.bland_altman_csv()?)?;
    write_text(&args.out.join("bucket_sizes.csv"), &report.size_counts_csv()?)?;
    emit_report(
        &mut report,
        config,
        Some(&args.out.join("report.json")),
        Some(&args.out.join("report.md")),
    )
}
