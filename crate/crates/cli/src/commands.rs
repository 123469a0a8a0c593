use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use viewroute_core::analysis::{cluster_matrix, redundancy_report, write_report_csv};
use viewroute_core::config::RunConfig;
use viewroute_core::data::{
    inputs_for, load_corpus, load_input_vectors, load_qrels, load_triplets, vectors_dir_for,
    write_corpus, write_qrels, write_triplets, Corpus, Input,
};
use viewroute_core::encoder::{
    ingest_embeddings, write_dump, Backbone, HashTokenizer, ProjectionInit, Tower,
};
use viewroute_core::eval::{bench, evaluate, load_run, save_run, synth_corpus, SynthData};
use viewroute_core::index::{load_index, save_index, Index};
use viewroute_core::model::Model;
use viewroute_core::retrieval::retrieve;
use viewroute_core::trainer::{train, DevSet, TrainData};

use crate::{
    flag_overrides, AnalyzeArgs, BenchArgs, Cli, Command, EncodeArgs, EvalArgs, IndexArgs,
    SearchArgs, SynthArgs, TrainArgs, UsageError,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub fn run(cli: &Cli) -> Result<()> {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let flags = flag_overrides(cli)?;
    let cfg =
        RunConfig::resolve(&env, cli.config.as_deref(), &flags).with_context(|| {
            match &cli.config {
                Some(p) => format!("--config {}", p.display()),
                None => "configuration".to_string(),
            }
        })?;
    eprintln!("seed: {}", cfg.seed);
    eprintln!("effective config: {}", serde_json::to_string(&cfg)?);
    match &cli.command {
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Encode(a) => cmd_encode(a),
        Command::Index(a) => cmd_index(&cfg, a),
        Command::Search(a) => cmd_search(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Bench(a) => cmd_bench(&cfg, a),
        Command::Analyze(a) => cmd_analyze(&cfg, a),
        Command::Synth(a) => cmd_synth(&cfg, a),
    }
}

fn flag(name: &str, p: &Path) -> String {
    format!("{name} {}", p.display())
}

/// Records and encoder inputs; token vectors in `<file>.vectors/` take
/// precedence over tokenizing the text.
fn load_inputs(path: &Path, name: &str, vocab_size: usize) -> Result<(Corpus, Vec<Input>)> {
    let corpus = load_corpus(path).with_context(|| flag(name, path))?;
    let vdir = vectors_dir_for(path);
    let inputs = if vdir.is_dir() {
        let vectors: HashMap<_, _> =
            load_input_vectors(&vdir).with_context(|| flag(name, &vdir))?;
        inputs_for(corpus.records(), None, Some(&vectors))
    } else {
        inputs_for(
            corpus.records(),
            Some(&HashTokenizer::new(vocab_size)),
            None,
        )
    }
    .with_context(|| flag(name, path))?;
    Ok((corpus, inputs))
}

fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_model(p: &Path) -> Result<Model> {
    Model::load(&checkpoint_file(p)).with_context(|| flag("--checkpoint", p))
}

fn with_ids(corpus: &Corpus, inputs: Vec<Input>) -> Vec<(String, Input)> {
    corpus.ids().map(str::to_string).zip(inputs).collect()
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let vocab = cfg.encoder.vocab_size;
    let (docs, doc_inputs) = load_inputs(&a.corpus, "--corpus", vocab)?;
    let (queries, query_inputs) = load_inputs(&a.queries, "--queries", vocab)?;
    let raw = load_triplets(&a.triplets).with_context(|| flag("--triplets", &a.triplets))?;
    let mut triplets = Vec::with_capacity(raw.len());
    for (i, t) in raw.iter().enumerate() {
        let find = |c: &Corpus, id: &str, what: &str| {
            c.ordinal(id).ok_or_else(|| {
                UsageError(format!(
                    "--triplets {} line {}: unknown {what} id {id:?}",
                    a.triplets.display(),
                    i + 1
                ))
            })
        };
        triplets.push((
            find(&queries, &t.query_id, "query")?,
            find(&docs, &t.pos_id, "document")?,
            find(&docs, &t.neg_id, "document")?,
        ));
    }
    let dev = match (&a.dev_queries, &a.dev_qrels) {
        (Some(q), Some(r)) => {
            let (c, inputs) = load_inputs(q, "--dev-queries", vocab)?;
            let qrels = load_qrels(r).with_context(|| flag("--dev-qrels", r))?;
            Some(DevSet {
                queries: with_ids(&c, inputs),
                qrels,
            })
        }
        _ => None,
    };
    let data = TrainData {
        doc_ids: docs.ids().map(str::to_string).collect(),
        docs: doc_inputs,
        queries: query_inputs,
        triplets,
        dev,
    };

    fs::create_dir_all(&a.out).with_context(|| flag("--out", &a.out))?;
    fs::write(a.out.join("config.json"), cfg.to_json()?)?;
    let mut model = Model::init(cfg.model(), cfg.seed)?;
    let mut log = BufWriter::new(File::create(a.out.join("train_log.jsonl"))?);
    let outcome = train(&mut model, &data, &cfg.train, &mut log)?;
    let best = Model::from_parts(cfg.model(), outcome.best)?;
    best.save(&a.out.join(CHECKPOINT_FILE))?;
    match outcome.best_dev_mrr10 {
        Some(m) => println!("best dev mrr@10={m} at step {}", outcome.best_step),
        None => println!("trained {} steps", cfg.train.total_steps),
    }
    Ok(())
}

fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (corpus, inputs) = load_inputs(&a.corpus, "--corpus", model.config.encoder.vocab_size)?;
    let tower = if a.tower == "query" {
        Tower::Query
    } else {
        Tower::Document
    };
    let matrices = model.encode_all(&with_ids(&corpus, inputs), tower)?;
    write_dump(&a.out, &matrices).with_context(|| flag("--out", &a.out))?;
    println!("encoded {} records", matrices.len());
    Ok(())
}

fn cmd_index(cfg: &RunConfig, a: &IndexArgs) -> Result<()> {
    let m =
        ingest_embeddings(&a.embeddings).with_context(|| flag("--embeddings", &a.embeddings))?;
    let index = Index::build_from_matrices(&m, cfg.index.kind, cfg.index.k, cfg.seed)?;
    save_index(&a.out, &index).with_context(|| flag("--out", &a.out))?;
    println!(
        "indexed {} vectors of {} documents in {} lists",
        index.n_vectors(),
        index.n_docs(),
        index.n_lists()
    );
    Ok(())
}

fn encode_queries(model: &Model, path: &Path) -> Result<Vec<viewroute_core::encoder::ViewMatrix>> {
    let (c, inputs) = load_inputs(path, "--queries", model.config.encoder.vocab_size)?;
    Ok(model.encode_all(&with_ids(&c, inputs), Tower::Query)?)
}

fn cmd_search(cfg: &RunConfig, a: &SearchArgs) -> Result<()> {
    let index = load_index(&a.index, None).with_context(|| flag("--index", &a.index))?;
    let model = load_model(&a.checkpoint)?;
    let queries = encode_queries(&model, &a.queries)?;
    let s = &cfg.search;
    let run = retrieve(&model, &index, &queries, s.scorer, s.top_k, s.nprobe)?;
    save_run(&a.out, &run, s.scorer.name()).with_context(|| flag("--out", &a.out))?;
    println!("searched {} queries", run.len());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let run = load_run(&a.run).with_context(|| flag("--run", &a.run))?;
    let qrels = load_qrels(&a.qrels).with_context(|| flag("--qrels", &a.qrels))?;
    let metrics = cfg.metrics().context("--metrics")?;
    let e = evaluate(&run, &qrels, &metrics);
    for (label, v) in &e.values {
        println!("{label}={v}");
    }
    println!("queries={} skipped={}", e.evaluated, e.skipped);
    if let Some(out) = &a.out {
        let values: serde_json::Map<String, serde_json::Value> = e
            .values
            .iter()
            .map(|(l, v)| (l.clone(), (*v).into()))
            .collect();
        fs::write(out, serde_json::to_string_pretty(&values)?)
            .with_context(|| flag("--out", out))?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    let index = load_index(&a.index, None).with_context(|| flag("--index", &a.index))?;
    let model = load_model(&a.checkpoint)?;
    let queries = encode_queries(&model, &a.queries)?;
    let selected = queries
        .iter()
        .map(|q| Ok(model.route(q)?.selected))
        .collect::<Result<Vec<_>>>()?;
    let r = bench(
        &index,
        &queries,
        &selected,
        cfg.search.top_k,
        cfg.search.nprobe,
        cfg.bench.reps,
    )?;
    fs::write(&a.out, serde_json::to_string_pretty(&r)?).with_context(|| flag("--out", &a.out))?;
    println!(
        "speedup={:.3} vectors_scanned_ratio={:.3} probes_ratio={:.3}",
        r.wall_clock_speedup, r.vectors_scanned_ratio, r.probes_ratio
    );
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, a: &AnalyzeArgs) -> Result<()> {
    let m =
        ingest_embeddings(&a.embeddings).with_context(|| flag("--embeddings", &a.embeddings))?;
    let (threshold, linkage) = (cfg.analysis.threshold, cfg.analysis.linkage);
    let (rows, stats) = redundancy_report(&m, threshold, linkage)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| flag("--out", &a.out))?);
    write_report_csv(&mut w, &rows)?;
    w.flush()?;
    if let Some(p) = &a.assignments {
        let mut w = BufWriter::new(File::create(p).with_context(|| flag("--assignments", p))?);
        for v in &m {
            serde_json::to_writer(&mut w, &cluster_matrix(v, threshold, linkage)?)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

/// Configuration for training on the generated data: raw token vectors go
/// through an identity-initialized projection shared by both towers.
fn synth_run_config(cfg: &RunConfig) -> RunConfig {
    let s = &cfg.synth;
    let mut c = cfg.clone();
    c.encoder.backbone = Backbone::Projection;
    c.encoder.projection_init = ProjectionInit::Identity;
    c.encoder.tied_towers = true;
    c.encoder.input_dims = s.dims;
    c.encoder.dims = s.dims;
    c.encoder.max_query_len = c.encoder.max_query_len.max(s.query_tokens);
    c.encoder.max_doc_len = c.encoder.max_doc_len.max(s.views_per_doc);
    c.router.d_k = c.router.d_k.min(s.dims);
    c.train.lr = 1e-3;
    c.train.score_scale = 20.0;
    c.train.log_every = 50;
    c
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let data = synth_corpus(&cfg.synth)?;
    let out = &a.out;
    fs::create_dir_all(out).with_context(|| flag("--out", out))?;
    let corpus = out.join("corpus.jsonl");
    write_corpus(&corpus, &data.doc_records())?;
    write_dump(&vectors_dir_for(&corpus), &data.doc_vectors()?)?;
    for (name, qs) in [
        ("train_queries", &data.train_queries),
        ("dev_queries", &data.dev_queries),
    ] {
        let p = out.join(format!("{name}.jsonl"));
        write_corpus(&p, &SynthData::query_records(qs))?;
        write_dump(&vectors_dir_for(&p), &SynthData::query_vectors(qs)?)?;
    }
    write_triplets(&out.join("triplets.tsv"), &data.triplets)?;
    write_qrels(&out.join("train.qrels"), &data.train_qrels)?;
    write_qrels(&out.join("dev.qrels"), &data.dev_qrels)?;
    fs::write(out.join("config.json"), synth_run_config(cfg).to_json()?)?;
    println!(
        "wrote {} documents, {} train and {} dev queries to {}",
        data.docs.len(),
        data.train_queries.len(),
        data.dev_queries.len(),
        out.display()
    );
    Ok(())
}
