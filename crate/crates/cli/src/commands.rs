use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mcat_core::adaptive::{Engine, Readout, SessionConfig};
use mcat_core::calibration::{fit_mirt, CalibrationConfig};
use mcat_core::catalog;
use mcat_core::data::{self, load_condition_scores, load_embeddings, load_item_bank, load_response_matrix, ItemBank};
use mcat_core::efa::{run_efa, DominanceRule, EfaConfig, FactorStructure};
use mcat_core::evaluation::{
    attach_reduction, build_population, run_policy, series_csv, series_svg, Policy, PolicyReport, SimulationConfig,
};
use mcat_core::fixture::{fixture_bank, fixture_structure};
use mcat_core::langmodel::{
    train, Aggregation, InputMode, QaCombine, RegressionConfig, TaskMode, TrainConfig, TrainedModel,
};
use mcat_core::linalg::Mat;
use mcat_core::synth::{generate, SynthConfig};
use serde::Serialize;

use crate::files::{self, QuestionScoreRow, QuestionScores, QUESTION_SCORES_SCHEMA};
use crate::*;

pub fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Efa(a) => efa(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
        Command::Session(a) => session(a),
        Command::Fixture(a) => fixture(a),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new("")).join(name)
}

fn synth(a: SynthArgs) -> CliResult {
    let config = SynthConfig {
        respondents: a.respondents,
        embed_dim: a.embed_dim,
        seed: a.seed,
        ..Default::default()
    };
    let corpus = generate(&config)?;
    files::write_with(&a.out_dir.join("embeddings.jsonl"), |w| {
        data::write_jsonl(w, &corpus.records).map_err(std::io::Error::other)
    })?;
    files::write_with(&a.out_dir.join("targets.jsonl"), |w| {
        data::write_jsonl(w, &corpus.targets).map_err(std::io::Error::other)
    })?;
    println!(
        "wrote {} embeddings and {} target rows to {}",
        corpus.records.len(),
        corpus.targets.len(),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    cross_validation: &'a Option<mcat_core::langmodel::CrossValidation>,
    warnings: &'a [String],
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let records = load_embeddings(files::open(&a.embeddings)?)?;
    let targets = load_condition_scores(files::open(&a.targets)?)?;
    let config = TrainConfig {
        task: match a.task {
            TaskArg::Single => TaskMode::Single,
            TaskArg::Multi => TaskMode::Multi,
        },
        aggregation: match a.agg {
            AggArg::Input => Aggregation::Input,
            AggArg::Output => Aggregation::Output,
        },
        input_mode: match a.qmode {
            QmodeArg::Lang => InputMode::QuestionPlusAnswer,
            QmodeArg::Id => InputMode::QuestionIdOnehot,
            QmodeArg::None => InputMode::AnswerOnly,
        },
        qa_combine: match a.qa_combine {
            CombineArg::Mean => QaCombine::Mean,
            CombineArg::Concat => QaCombine::Concat,
        },
        truncate_dim: a.truncate_dim,
        categories: a.categories,
        folds: a.folds,
        regression: RegressionConfig {
            epochs: a.epochs,
            seed: a.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let conditions = catalog::conditions();
    let out = train(&records, &targets, &conditions, &config)?;
    files::write_string(&a.out, &out.model.to_json())?;
    files::write_with(&sibling(&a.out, "scores.jsonl"), |w| {
        data::write_jsonl(w, &out.user_scores).map_err(std::io::Error::other)
    })?;
    let texts: HashMap<&str, &str> = catalog::QUESTIONS.iter().copied().collect();
    let qs = QuestionScores {
        schema: QUESTION_SCORES_SCHEMA.into(),
        conditions: out.model.conditions.clone(),
        questions: out
            .question_ids
            .iter()
            .enumerate()
            .map(|(q, id)| QuestionScoreRow {
                id: id.clone(),
                text: texts.get(id.as_str()).unwrap_or(&"").to_string(),
                scores: out.question_scores.row(q).iter().copied().collect(),
            })
            .collect(),
    };
    files::write_json(&sibling(&a.out, "question_scores.json"), &qs)?;
    files::write_with(&sibling(&a.out, "responses.jsonl"), |w| {
        out.responses.write_jsonl(w).map_err(std::io::Error::other)
    })?;
    files::write_json(
        &sibling(&a.out, "train_report.json"),
        &TrainReport {
            cross_validation: &out.cross_validation,
            warnings: &out.warnings,
        },
    )?;
    if let Some(cv) = &out.cross_validation {
        for (c, r) in &cv.pooled {
            println!("{c:>12}  cv r = {}", r.map_or("n/a".into(), |v| format!("{v:.3}")));
        }
    }
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn efa(a: EfaArgs) -> CliResult {
    let sets = load_condition_scores(files::open(&a.scores)?)?;
    let conditions = catalog::conditions();
    for s in &sets {
        s.validate(&conditions, true)?;
    }
    let scores = Mat::from_fn(sets.len(), conditions.len(), |i, c| {
        sets[i].scores[&conditions[c]].unwrap_or(f64::NAN)
    });
    let (ids, texts, per_question) = match &a.question_scores {
        Some(p) => {
            let qs: QuestionScores = serde_json::from_str(&files::read_string(p)?)
                .map_err(|e| CliError::Validation(format!("invalid {}: {e}", p.display())))?;
            if qs.schema != QUESTION_SCORES_SCHEMA || qs.conditions != conditions {
                return Err(CliError::Validation(format!(
                    "{}: expected schema {QUESTION_SCORES_SCHEMA} over the catalog conditions",
                    p.display()
                )));
            }
            let m = Mat::from_fn(qs.questions.len(), conditions.len(), |q, c| {
                qs.questions[q].scores.get(c).copied().unwrap_or(f64::NAN)
            });
            (
                qs.questions.iter().map(|q| q.id.clone()).collect(),
                qs.questions.iter().map(|q| q.text.clone()).collect(),
                m,
            )
        }
        None => (Vec::new(), Vec::new(), Mat::zeros(0, conditions.len())),
    };
    let config = EfaConfig {
        n_sims: a.n_sims,
        quantile: a.quantile,
        seed: a.seed,
        rule: a.rule.parse::<DominanceRule>()?,
        factors: a.factors,
    };
    let out = run_efa(&conditions, &scores, &ids, &texts, &per_question, &config)?;
    files::write_string(&a.out, &out.structure.to_json())?;
    println!("retained m = {} factors", out.structure.m);
    for (c, set) in &out.structure.dominant {
        let f: Vec<String> = set.iter().map(|k| format!("F{}", k + 1)).collect();
        println!("{c:>12}  {}", f.join(","));
    }
    for w in &out.structure.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn read_structure(path: &Path) -> CliResult<FactorStructure> {
    Ok(FactorStructure::from_json_str(&files::read_string(path)?)?)
}

fn read_bank(path: &Path) -> CliResult<ItemBank> {
    Ok(load_item_bank(files::open(path)?)?)
}

fn calibrate(a: CalibrateArgs) -> CliResult {
    let structure = read_structure(&a.structure)?;
    let mut config: CalibrationConfig = match &a.config {
        Some(p) => files::read_config(p)?,
        None => CalibrationConfig::default(),
    };
    if a.seed.is_some() {
        config.seed = a.seed;
    }
    let lookup: HashMap<String, usize> = match &a.model {
        Some(p) => {
            let model = TrainedModel::from_json_str(&files::read_string(p)?)?;
            model.discretization.0.iter().map(|(q, t)| (q.clone(), t.categories)).collect()
        }
        None => structure.question_ids.iter().map(|q| (q.clone(), a.categories)).collect(),
    };
    let responses = load_response_matrix(files::open(&a.responses)?, &lookup)?;
    let (bank, report) = fit_mirt(&responses, &structure, &config)?;
    files::write_string(&a.out, &bank.to_canonical_json())?;
    let report_path = a.report.unwrap_or_else(|| sibling(&a.out, "fit_report.json"));
    files::write_json(&report_path, &report)?;
    println!(
        "{} items, {} respondents, {} EM iterations, converged = {}, loglik = {:.4}",
        bank.len(),
        responses.n_respondents(),
        report.iterations,
        report.converged,
        report.final_loglik()
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulationFile<'a> {
    schema: &'static str,
    seed: u64,
    config: &'a SimulationConfig,
    reports: Vec<&'a PolicyReport>,
}

fn simulate(a: SimulateArgs) -> CliResult {
    let bank = read_bank(&a.bank)?;
    let structure = read_structure(&a.structure)?;
    let readout = Readout::from_structure(&structure)?;
    let config = SimulationConfig {
        runs: a.runs,
        population: a.population,
        population_seed: a.seed,
        truth_noise: a.truth_noise,
        window: a.window,
        threshold: a.threshold,
    };
    if config.runs == 0 || !(config.truth_noise >= 0.0) || config.window < 2 || !(config.threshold > 0.0) {
        return Err(CliError::Validation(
            "runs must be positive, truth noise non-negative, window at least 2 and threshold positive".into(),
        ));
    }
    let population = build_population(&bank, &readout, config.population, config.truth_noise, config.population_seed)?;
    let mut adaptive = match a.policy {
        PolicyArg::Random => None,
        _ => Some(run_policy(&bank, &readout, Policy::Adaptive, &population, &config)?),
    };
    let random = match a.policy {
        PolicyArg::Adaptive => None,
        _ => Some(run_policy(&bank, &readout, Policy::Random { seed: a.seed }, &population, &config)?),
    };
    if let (Some(ad), Some(ra)) = (adaptive.as_mut(), random.as_ref()) {
        attach_reduction(ad, ra);
    }
    let reports: Vec<&PolicyReport> = adaptive.iter().chain(random.iter()).collect();
    files::write_json(
        &a.out,
        &SimulationFile {
            schema: "mcat.simulation/v1",
            seed: a.seed,
            config: &config,
            reports: reports.clone(),
        },
    )?;
    if let Some(prefix) = &a.plot {
        files::write_string(&prefix.with_extension("csv"), &series_csv(&reports))?;
        if let (Some(ad), Some(ra)) = (&adaptive, &random) {
            files::write_string(&prefix.with_extension("svg"), &series_svg(ad, ra))?;
        }
    }
    for r in &reports {
        let name = match r.policy {
            Policy::Adaptive => "adaptive",
            Policy::Random { .. } => "random",
        };
        println!("{name:>9}: mean stabilization turn {:.2}", r.mean_stabilization());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let mut config = mcat_service::ServiceConfig::from_env(a.config.as_deref())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(v) = a.port {
        config.port = v;
    }
    if let Some(v) = a.bind {
        config.bind = v;
    }
    if let Some(v) = a.data_dir {
        config.data_dir = v;
    }
    if let Some(v) = a.bank {
        config.bank_path = v;
    }
    if let Some(v) = a.structure {
        config.structure_path = v;
    }
    if let Some(v) = a.model {
        config.model_path = Some(v);
    }
    if let Some(v) = a.embedding_url {
        config.embedding_url = Some(v);
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime
        .block_on(mcat_service::http::run(&config))
        .map_err(|e| match e.downcast::<mcat_service::ServiceError>() {
            Ok(se) => CliError::from(*se),
            Err(other) => CliError::Runtime(other.to_string()),
        })
}

fn session(a: SessionArgs) -> CliResult {
    let bank = read_bank(&a.bank)?;
    let structure = read_structure(&a.structure)?;
    let engine = Engine::new(Arc::new(bank), "local", Readout::from_structure(&structure)?)?;
    let mut config = SessionConfig::default();
    config.stopping.max_items = a.max_items;
    if let Some(m) = a.min_items {
        config.stopping.min_items = m;
    }
    let mut s = engine.start_session("terminal", config)?;
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut stdout = std::io::stdout();
    let mut interrupted = false;
    while s.is_active() {
        let q = engine.select_next(&mut s)?;
        let item = engine.bank().get(&q).expect("selected from the bank");
        let k = item.num_categories;
        let category = loop {
            print!("[{}] {} {}\n    answer 1-{k} (q to stop): ", s.administered.len() + 1, item.id, item.text);
            stdout.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
            match lines.next() {
                None => break None,
                Some(Err(e)) => return Err(CliError::Runtime(e.to_string())),
                Some(Ok(line)) => {
                    let t = line.trim();
                    if t == "q" {
                        break None;
                    }
                    match t.parse::<usize>() {
                        Ok(v) if (1..=k).contains(&v) => break Some(v),
                        _ => println!("    please enter a number from 1 to {k}"),
                    }
                }
            }
        };
        match category {
            Some(v) => engine.submit_response(&mut s, &q, v)?,
            None => {
                interrupted = true;
                break;
            }
        }
    }
    println!();
    match s.stop_reason() {
        Some(r) => println!("stopped after {} answers: {r:?}", s.administered.len()),
        None if interrupted => println!("ended early after {} answers", s.administered.len()),
        None => {}
    }
    let se = s.current().standard_errors();
    for (k, t) in s.current().theta.iter().enumerate() {
        println!("  F{}  theta = {t:+.3}  se = {:.3}", k + 1, se[k]);
    }
    if let Some(last) = s.condition_history.last() {
        for (c, v) in &last.scores {
            println!("  {c:>12}  {}", v.map_or("n/a".into(), |x| format!("{x:.3}")));
        }
    }
    if let Some(out) = &a.out {
        files::write_json(out, &s)?;
    }
    Ok(())
}

fn fixture(a: FixtureArgs) -> CliResult {
    files::write_string(&a.out_dir.join("bank.json"), &fixture_bank().to_canonical_json())?;
    files::write_string(&a.out_dir.join("structure.json"), &fixture_structure().to_json())?;
    println!("wrote bank.json and structure.json to {}", a.out_dir.display());
    Ok(())
}
