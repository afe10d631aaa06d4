use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom as _;

use rnf_core::analysis::{kpca_project, probe_model, verify_theorem_bound, write_kpca_csv, BoundVerdict, ProbeConfig, TheoremPair};
use rnf_core::checkpoint;
use rnf_core::data::{generate_synthetic, ingest_csv, split, DatasetSchema};
use rnf_core::pipeline::{
    evaluate, generate_proxy_annotations, sweep, AnnotationSource, train_baseline, train_rnf_head, train_stage_one, BaselineKind, PipelineConfig,
    RunRecord, StageOneConfig, SweepConfig, TrainLog,
};
use rnf_core::{report, rng, Dataset, MetricsRecord, Model, Partition};

use crate::config::RunConfig;
use crate::error::CliError;

fn io_error(stage: &'static str, path: &Path, source: std::io::Error) -> CliError {
    CliError::Runtime {
        stage,
        source: rnf_core::Error::Io {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn write_file(stage: &'static str, path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(stage, path, e))
}

/// Output directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
    log: fs::File,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self, CliError> {
        let path = cfg.out_root().join(cfg.run_name(command)?);
        fs::create_dir_all(&path).map_err(|e| io_error("run directory", &path, e))?;
        write_file("run directory", &path.join("config.txt"), cfg.snapshot())?;
        let log_path = path.join("run.log");
        let log = fs::File::create(&log_path).map_err(|e| io_error("run directory", &log_path, e))?;
        let mut dir = Self { path, log };
        dir.log(&format!("command {command}"));
        Ok(dir)
    }

    pub fn log(&mut self, msg: &str) {
        log::info!("{msg}");
        // Losing a log line is not worth aborting a run over.
        let _ = writeln!(self.log, "{msg}");
    }

    fn log_training(&mut self, what: &str, log: &TrainLog) {
        for e in &log.epochs {
            self.log(&format!(
                "{what} epoch {} train_loss {:.6} valid_loss {} valid_score {} skipped_anchors {}",
                e.epoch,
                e.train_loss,
                e.valid_loss.map_or("-".into(), |v| format!("{v:.6}")),
                e.valid_score.map_or("-".into(), |v| format!("{v:.6}")),
                e.skipped_anchors
            ));
        }
        self.log(&format!("{what} best epoch {}", log.best_epoch));
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Loaded data with its seeded split; continuous features standardized on train.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Partition), CliError> {
    let mut ds = match cfg.existing_path("data")? {
        Some(data) => {
            let schema_path = cfg.required_path("schema", "when `data` is set")?;
            let schema = DatasetSchema::from_path(&schema_path).map_err(CliError::at("schema"))?;
            ingest_csv(&data, &schema).map_err(CliError::at("data ingestion"))?
        }
        None => generate_synthetic(&cfg.synthetic()?).map_err(CliError::at("synthetic data"))?,
    };
    let partition = split(ds.len(), &cfg.split()?).map_err(CliError::at("split"))?;
    if cfg.standardize()? {
        ds.standardize(&partition.train).map_err(CliError::at("standardize"))?;
    }
    Ok((ds, partition))
}

fn load_model(cfg: &RunConfig, key: &str, why: &str) -> Result<Model, CliError> {
    let path = cfg.required_path(key, why)?;
    let (model, _) = checkpoint::load(&path).map_err(|e| CliError::Config(format!("`{key}`: {e}")))?;
    Ok(model)
}

fn check_width(model: &Model, ds: &Dataset, key: &str) -> Result<(), CliError> {
    if model.input_dim() != ds.feature_dim() {
        return Err(CliError::Config(format!(
            "`{key}`: checkpoint expects {} features, data has {}",
            model.input_dim(),
            ds.feature_dim()
        )));
    }
    Ok(())
}

fn record(cfg: &RunConfig, pc: &PipelineConfig, method: &str, run_id: &str, outcome: Result<MetricsRecord, String>) -> Result<RunRecord, CliError> {
    let rnf = method.starts_with("rnf");
    Ok(RunRecord {
        run_id: run_id.to_string(),
        method: method.to_string(),
        seed: cfg.seed()?,
        alpha: rnf.then_some(pc.rnf.loss.alpha),
        beta: matches!(method, "adversarial" | "eor").then_some(pc.baseline.beta),
        q: (method == "gce" || method == "rnf").then_some(pc.gce.q),
        gamma: (method == "rnf").then_some(pc.proxy.gamma),
        temperature: rnf.then_some(pc.rnf.loss.temperature),
        outcome,
    })
}

/// Saves the model, evaluates it on the test split and writes `metrics.csv`.
fn finish_model(cfg: &RunConfig, dir: &mut RunDir, pc: &PipelineConfig, method: &str, model: &Model, ds: &Dataset, p: &Partition) -> Result<(), CliError> {
    let ckpt = dir.file("model.ckpt");
    checkpoint::save(model, &cfg.digest(), &ckpt).map_err(CliError::at("checkpoint"))?;
    dir.log(&format!("checkpoint {}", ckpt.display()));
    println!("checkpoint {}", ckpt.display());
    let outcome = if ds.groups_of(&p.test).is_some() {
        Ok(evaluate(model, ds, &p.test).map_err(CliError::at("evaluation"))?)
    } else {
        dir.log("test split lacks sensitive attributes; metrics not computed");
        Err("no sensitive attribute".to_string())
    };
    let run_id = cfg.run_name(method)?;
    let rec = record(cfg, pc, method, &run_id, outcome)?;
    report::write_metrics_csv(&dir.file("metrics.csv"), std::slice::from_ref(&rec)).map_err(CliError::at("report"))?;
    if let Ok(m) = &rec.outcome {
        dir.log(&format!("test accuracy {:.4} dp {:?} delta_eo {:?}", m.accuracy, m.dp.value(), m.delta_eo.value()));
    }
    Ok(())
}

pub fn train_teacher(cfg: &RunConfig) -> Result<(), CliError> {
    stage_one(cfg, "train-teacher", "vanilla", None)
}

pub fn train_bias_amplified(cfg: &RunConfig) -> Result<(), CliError> {
    let q = cfg.pipeline()?.gce;
    stage_one(cfg, "train-bias-amplified", "gce", Some(q))
}

fn stage_one(cfg: &RunConfig, command: &str, method: &str, gce: Option<rnf_core::GceConfig>) -> Result<(), CliError> {
    let pc = cfg.pipeline()?;
    let (ds, p) = load_data(cfg)?;
    let mut dir = RunDir::create(cfg, command)?;
    let sc = StageOneConfig { gce, ..pc.stage_one.clone() };
    let (model, log) = train_stage_one(&ds, &p, &sc).map_err(CliError::at("stage one"))?;
    dir.log_training(method, &log);
    finish_model(cfg, &mut dir, &pc, method, &model, &ds, &p)
}

pub fn gen_proxy(cfg: &RunConfig) -> Result<(), CliError> {
    let pc = cfg.pipeline()?;
    let bias = load_model(cfg, "bias_model", "to generate proxy annotations")?;
    let (ds, p) = load_data(cfg)?;
    check_width(&bias, &ds, "bias_model")?;
    let mut dir = RunDir::create(cfg, "gen-proxy")?;
    let proxy = generate_proxy_annotations(&bias, &ds, &p.train, &pc.proxy).map_err(CliError::at("proxy annotation"))?;
    let mut text = String::from("index,proxy\n");
    for (&i, v) in p.train.iter().zip(&proxy) {
        let _ = writeln!(text, "{i},{v}");
    }
    let out = dir.file("proxy.csv");
    write_file("proxy annotation", &out, text)?;
    if let Some(groups) = ds.groups_of(&p.train) {
        let agree = groups.iter().zip(&proxy).filter(|(a, b)| a == b).count() as f64 / proxy.len() as f64;
        dir.log(&format!("proxy agreement with ground truth {agree:.4}"));
    }
    dir.log(&format!("proxy annotations {}", out.display()));
    println!("proxy {}", out.display());
    let outcome = evaluate(&bias, &ds, &p.test).map_err(|e| e.to_string());
    let rec = record(cfg, &pc, "gce", &cfg.run_name("gen-proxy")?, outcome)?;
    report::write_metrics_csv(&dir.file("metrics.csv"), &[rec]).map_err(CliError::at("report"))
}

fn read_proxy(path: &Path, ds: &mut Dataset) -> Result<(), CliError> {
    let bad = |m: String| CliError::Config(format!("`proxy` {}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("index,proxy") {
        return Err(bad("expected header `index,proxy`".into()));
    }
    let (mut idx, mut vals) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed = line
            .split_once(',')
            .and_then(|(i, v)| Some((i.trim().parse::<usize>().ok()?, v.trim().parse::<usize>().ok()?)));
        let (i, v) = parsed.ok_or_else(|| bad(format!("line {}: expected index,proxy", n + 2)))?;
        idx.push(i);
        vals.push(v);
    }
    ds.set_proxy(&idx, &vals).map_err(|e| bad(e.to_string()))
}

pub fn train_rnf(cfg: &RunConfig) -> Result<(), CliError> {
    let pc = cfg.pipeline()?;
    let teacher = load_model(cfg, "teacher", "for stage two")?;
    let proxy_path = cfg.existing_path("proxy")?;
    let (mut ds, p) = load_data(cfg)?;
    check_width(&teacher, &ds, "teacher")?;
    if let Some(path) = &proxy_path {
        read_proxy(path, &mut ds)?;
    }
    let available = match pc.rnf.annotation {
        AnnotationSource::GroundTruth => ds.groups_of(&p.train).is_some(),
        AnnotationSource::Proxy => ds.proxies_of(&p.train).is_some(),
        AnnotationSource::Random => true,
    };
    if !available {
        return Err(CliError::Config(format!(
            "annotation source `{}` is not available for every training sample",
            pc.rnf.annotation.name()
        )));
    }
    let mut dir = RunDir::create(cfg, "train-rnf")?;
    dir.log(&format!("annotation source {}", pc.rnf.annotation.name()));
    let (student, log) = train_rnf_head(&teacher, &ds, &p, &pc.rnf).map_err(CliError::at("stage two"))?;
    dir.log_training("rnf", &log);
    let method = match pc.rnf.annotation {
        AnnotationSource::Proxy => "rnf",
        AnnotationSource::GroundTruth => "rnf_gt",
        AnnotationSource::Random => "rnf_random",
    };
    finish_model(cfg, &mut dir, &pc, method, &student, &ds, &p)
}

pub fn train_baseline_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let pc = cfg.pipeline()?;
    let (ds, p) = load_data(cfg)?;
    let mut dir = RunDir::create(cfg, "train-baseline")?;
    let (model, log) = train_baseline(&ds, &p, &pc.baseline).map_err(CliError::at("baseline"))?;
    let method = match pc.baseline.kind {
        BaselineKind::Adversarial => "adversarial",
        BaselineKind::Eor => "eor",
    };
    dir.log_training(method, &log);
    finish_model(cfg, &mut dir, &pc, method, &model, &ds, &p)
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let pc = cfg.pipeline()?;
    let model = load_model(cfg, "model", "to evaluate")?;
    let (ds, p) = load_data(cfg)?;
    check_width(&model, &ds, "model")?;
    let mut dir = RunDir::create(cfg, "evaluate")?;
    let m = evaluate(&model, &ds, &p.test).map_err(CliError::at("evaluation"))?;
    let rec = record(cfg, &pc, "evaluate", &cfg.run_name("evaluate")?, Ok(m.clone()))?;
    let csv = report::metrics_csv(std::slice::from_ref(&rec)).map_err(CliError::at("report"))?;
    write_file("report", &dir.file("metrics.csv"), &csv)?;
    print!("{csv}");
    dir.log(&format!("evaluated {} test samples", p.test.len()));
    // Accuracy alone is not a fairness outcome.
    if !m.dp.is_defined() && !m.delta_eo.is_defined() {
        return Err(CliError::UndefinedMetric(m.undefined_flags()));
    }
    Ok(())
}

pub fn sweep_cmd(cfg: &RunConfig, svg: bool) -> Result<(), CliError> {
    let pc = cfg.pipeline()?;
    let (ds, p) = load_data(cfg)?;
    let mut dir = RunDir::create(cfg, "sweep")?;
    let sc = SweepConfig {
        method: cfg.sweep_method()?,
        grid: cfg.sweep_grid()?,
        n_seeds: cfg.sweep_seeds()?,
        base_seed: cfg.seed()?,
        pipeline: pc,
    };
    dir.log(&format!("sweep {} over {:?} with {} seeds", sc.method.name(), sc.grid, sc.n_seeds));
    let res = sweep(&ds, &p, &sc).map_err(CliError::at("sweep"))?;
    for r in &res.records {
        if let Err(e) = &r.outcome {
            dir.log(&format!("run {} failed: {e}", r.run_id));
        }
    }
    report::write_metrics_csv(&dir.file("metrics.csv"), &res.records).map_err(CliError::at("report"))?;
    report::write_curve_csv(&dir.file("curve.csv"), &res.curve).map_err(CliError::at("report"))?;
    if svg {
        report::write_curve_svg(&dir.file("curve.svg"), &res.curve).map_err(CliError::at("report"))?;
    }
    print!("{}", report::curve_csv(&res.curve).map_err(CliError::at("report"))?);
    if res.curve.iter().all(|c| c.n == 0) {
        return Err(CliError::Runtime {
            stage: "sweep",
            source: rnf_core::Error::Input("every run failed".into()),
        });
    }
    Ok(())
}

/// First `n` training indices after a seeded shuffle.
fn sample_train(p: &Partition, n: usize, seed: u64) -> Vec<usize> {
    let mut idx = p.train.clone();
    idx.shuffle(&mut rng::stream(seed, "probe-sample"));
    idx.truncate(n);
    idx
}

pub fn probe(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg, "model", "to probe")?;
    let (ds, p) = load_data(cfg)?;
    check_width(&model, &ds, "model")?;
    let mut dir = RunDir::create(cfg, "probe")?;
    let seed = cfg.seed()?;
    let idx = sample_train(&p, cfg.probe_samples()?, seed);
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| ds.samples[i].x.clone()).collect();
    let z = xs.iter().map(|x| model.encode(x)).collect::<Result<Vec<_>, _>>().map_err(CliError::at("probe"))?;
    let proj = kpca_project(&z, &cfg.kpca()?).map_err(CliError::at("kpca"))?;
    let groups: Vec<Option<usize>> = idx.iter().map(|&i| ds.samples[i].a).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.samples[i].y).collect();
    let preds = xs
        .iter()
        .map(|x| model.logits(x).map(|l| rnf_core::nn::argmax(&l)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::at("probe"))?;
    write_kpca_csv(&dir.file("kpca.csv"), &proj, &groups, &labels, &preds).map_err(CliError::at("kpca"))?;
    dir.log(&format!("kpca eigenvalues {:.6} {:.6}", proj.eigenvalues[0], proj.eigenvalues[1]));

    let groups: Option<Vec<usize>> = groups.into_iter().collect();
    let groups = groups.ok_or_else(|| CliError::Config("probing needs the sensitive attribute on every sampled row".into()))?;
    let (epochs, lr) = cfg.probe_epochs()?;
    let rep = probe_model(&model, &xs, &groups, ds.desired_label, &ProbeConfig { epochs, lr, seed }).map_err(CliError::at("probe"))?;
    let text = format!(
        "samples={}\nsensitive_accuracy={}\nmimic_agreement={}\nsimilarity={}\n",
        idx.len(),
        rep.sensitive_accuracy,
        rep.mimic_agreement,
        rep.similarity.value().map_or(String::new(), |v| v.to_string())
    );
    write_file("probe", &dir.file("probe.txt"), &text)?;
    print!("{text}");
    dir.log(&text.replace('\n', " "));
    Ok(())
}

/// Same-label test pairs across groups, soft labels from the model's own
/// desired-class probability.
fn bound_pairs(model: &Model, ds: &Dataset, p: &Partition, n: usize, seed: u64) -> Result<Vec<TheoremPair>, CliError> {
    let mut r = rng::stream(seed, "bound-pairs");
    let mut pairs = Vec::with_capacity(n);
    for y in 0..ds.num_classes {
        let of = |g| -> Vec<usize> { p.test.iter().copied().filter(|&i| ds.samples[i].y == y && ds.samples[i].a == Some(g)).collect() };
        let (mut g0, mut g1) = (of(0), of(1));
        g0.shuffle(&mut r);
        g1.shuffle(&mut r);
        for (&i, &j) in g0.iter().zip(&g1).take(n.div_ceil(ds.num_classes)) {
            let prob = |k: usize| model.predict_proba(&ds.samples[k].x).map(|v| v[ds.desired_label]);
            pairs.push(TheoremPair {
                x1: ds.samples[i].x.clone(),
                x2: ds.samples[j].x.clone(),
                p1: prob(i).map_err(CliError::at("bound"))?,
                p2: prob(j).map_err(CliError::at("bound"))?,
            });
        }
    }
    pairs.truncate(n);
    if pairs.is_empty() {
        return Err(CliError::Config("no same-label cross-group pairs in the test split".into()));
    }
    Ok(pairs)
}

pub fn verify_bound(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg, "model", "to verify the bound")?;
    let (ds, p) = load_data(cfg)?;
    check_width(&model, &ds, "model")?;
    let mut dir = RunDir::create(cfg, "verify-bound")?;
    let pairs = bound_pairs(&model, &ds, &p, cfg.bound_pairs()?, cfg.seed()?)?;
    let (inst, verdict) = verify_theorem_bound(&model, &pairs).map_err(CliError::at("bound"))?;
    let verdict = match verdict {
        BoundVerdict::Pass => "pass".to_string(),
        BoundVerdict::Fail => "fail".to_string(),
        BoundVerdict::HypothesisViolation(why) => format!("hypothesis_violation: {why}"),
    };
    let text = format!(
        "pairs={}\nepsilon_p={}\nepsilon_c={}\nepsilon_l={}\nlambda_z={}\ngap={}\nbound={}\nverdict={verdict}\n",
        inst.n_pairs, inst.epsilon_p, inst.epsilon_c, inst.epsilon_l, inst.lambda_z, inst.gap, inst.bound
    );
    write_file("bound", &dir.file("bound.txt"), &text)?;
    print!("{text}");
    dir.log(&text.replace('\n', " "));
    Ok(())
}

pub fn synth_data(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.synthetic()?;
    let ds = generate_synthetic(&spec).map_err(CliError::at("synthetic data"))?;
    let mut dir = RunDir::create(cfg, "synth-data")?;
    let data = dir.file("data.csv");
    ds.write_csv(&data).map_err(CliError::at("synthetic data"))?;
    let mut schema = String::new();
    for f in &ds.feature_names {
        let _ = writeln!(schema, "column.{f}.kind=continuous");
    }
    schema.push_str("column.y.kind=label\ndesired=1\ncolumn.a.kind=sensitive\nprivileged=1\ncolumn.proxy.kind=ignore\n");
    let schema_path = dir.file("data.schema");
    write_file("synthetic data", &schema_path, schema)?;
    dir.log(&format!("{} samples, {} features", ds.len(), ds.feature_dim()));
    println!("data {}\nschema {}", data.display(), schema_path.display());
    Ok(())
}
