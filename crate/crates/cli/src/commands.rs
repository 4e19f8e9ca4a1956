//! One function per subcommand. Each prints a short summary on stdout.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context as _, Result};
use pathwayforge_core::explain::FeatureVisConfig;
use pathwayforge_core::model::TrainConfig;
use pathwayforge_core::pathway::{Context, PathwayOptions};
use pathwayforge_core::pipeline::{
    attack_stage, explain_stage, export_stage, extract_stage, read_training_record, train_stage, AttackRequest,
    ExplainParams, FeatureVisCheck, ReferenceConfig, RunReport,
};
use pathwayforge_core::store::{AttackParams, DatasetInfo};
use pathwayforge_core::PathwayGraph;

use crate::args::{
    resolve_created_at, resolve_data_dir, resolve_dataset, AttackArgs, Command, ExplainArgs, ExportArgs, ExtractArgs, ReferenceArgs,
    ServeArgs, TrainArgs,
};
use crate::server::{router, DataIndex};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Extract(a) => extract(a),
        Command::Explain(a) => explain(a),
        Command::Export(a) => export(a),
        Command::Serve(a) => serve(a),
        Command::Reference(a) => reference(a),
    }
}

fn created_at(flag: Option<u64>) -> Result<u64> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let env = std::env::var("SOURCE_DATE_EPOCH").ok();
    resolve_created_at(flag, env.as_deref(), now).map_err(|e| anyhow!(e))
}

fn print_accuracy(weights: &Path, accuracy: f64) {
    println!("weights {}", weights.display());
    println!("test accuracy {accuracy:.4}");
}

fn train(a: TrainArgs) -> Result<()> {
    let reference = ReferenceConfig::frozen();
    let dataset = DatasetInfo {
        seed: a.dataset.seed.unwrap_or(reference.dataset.seed),
        num_classes: a.dataset.classes.unwrap_or(reference.dataset.num_classes),
        per_class: a.dataset.per_class.unwrap_or(reference.dataset.per_class),
    };
    let d = reference.train;
    let config = TrainConfig {
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        momentum: a.momentum.unwrap_or(d.momentum),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch.unwrap_or(d.batch_size),
        seed: a.train_seed.unwrap_or(d.seed),
    };
    let record = train_stage(&dataset, a.model_seed.unwrap_or(reference.model_seed), &config, &a.out)?;
    print_accuracy(&a.out, record.test_accuracy());
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let record = read_training_record(&a.weights)?;
    let dataset = resolve_dataset(&a.dataset, record.as_ref().map(|r| &r.dataset)).map_err(|e| anyhow!(e))?;
    let req = AttackRequest {
        weights: a.weights,
        dataset,
        original: a.original,
        target: a.target,
        epsilons: a.eps.0,
        attack: AttackParams {
            steps: a.steps,
            step_factor: a.step_factor,
            random_start: a.random_start,
            max_images: a.max_images,
        },
        created_at: created_at(a.created_at)?,
    };
    let run = attack_stage(&req, &a.out)?;
    let manifest = run.read_manifest()?;
    println!("run {}", run.root().display());
    println!("attacked images {}", manifest.attacked_images.len());
    for (e, n) in &manifest.success_counts {
        println!("eps {e} successes {n}");
    }
    Ok(())
}

fn print_graph(graph: &PathwayGraph) {
    let count = |c| graph.nodes_with_context(c).count();
    println!(
        "nodes {} (original {}, target {}, both {}, attacked {}), edges {}",
        graph.nodes.len(),
        count(Context::Original),
        count(Context::Target),
        count(Context::Both),
        count(Context::Attacked),
        graph.edges.len()
    );
}

fn extract(a: ExtractArgs) -> Result<()> {
    let options = PathwayOptions {
        benign_k: a.benign_k as usize,
        attacked_k: a.attacked_k as usize,
        baseline: a.baseline.into(),
    };
    let (graph, _) = extract_stage(&a.run, &options, a.out.as_deref())?;
    print_graph(&graph);
    Ok(())
}

fn print_feature_vis(checks: &[FeatureVisCheck]) {
    let above = checks.iter().filter(|c| c.final_objective > c.dataset_p95).count();
    println!("feature visualizations above the dataset 95th percentile: {above}/{}", checks.len());
}

fn explain(a: ExplainArgs) -> Result<()> {
    let params = ExplainParams {
        patches_per_neuron: a.patches,
        feature_vis: FeatureVisConfig {
            steps: a.fv_steps,
            step_size: a.fv_step_size,
            seed: a.fv_seed,
            max_backtracks: a.fv_backtracks,
        },
    };
    let checks = explain_stage(&a.run, &params)?;
    print_feature_vis(&checks);
    Ok(())
}

fn print_report(report: &RunReport) {
    println!("run {} ({} -> {})", report.run, report.original, report.target);
    for (e, s) in &report.strengths {
        println!(
            "eps {e} success {}/{} ({:.4}) red top30 {} red all {}",
            s.successes, s.attacked_images, s.success_rate, s.red_top30, s.red_all
        );
    }
}

fn export(a: ExportArgs) -> Result<()> {
    let report = export_stage(&a.run, a.out.as_deref())?;
    print_report(&report);
    if let Some(out) = &a.out {
        println!("published to {}", out.join(&report.run).display());
    }
    Ok(())
}

fn reference(a: ReferenceArgs) -> Result<()> {
    let r = ReferenceConfig::frozen();
    std::fs::create_dir_all(&a.work).with_context(|| format!("creating {}", a.work.display()))?;
    let weights = a.work.join("weights.pfwt");
    let record = train_stage(&r.dataset, r.model_seed, &r.train, &weights)?;
    print_accuracy(&weights, record.test_accuracy());
    let req = AttackRequest {
        weights,
        dataset: r.dataset.clone(),
        original: r.original,
        target: r.target,
        epsilons: r.epsilons.clone(),
        attack: r.attack.clone(),
        created_at: created_at(a.created_at)?,
    };
    let run = attack_stage(&req, &a.work)?;
    let (graph, _) = extract_stage(run.root(), &r.pathway, None)?;
    print_graph(&graph);
    print_feature_vis(&explain_stage(run.root(), &r.explain)?);
    print_report(&export_stage(run.root(), a.publish.as_deref())?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let env = std::env::var_os("PATHWAYFORGE_DATA").map(PathBuf::from);
    let data = resolve_data_dir(a.data, env).map_err(|e| anyhow!(e))?;
    if !data.is_dir() {
        bail!("data directory {} does not exist", data.display());
    }
    let index = DataIndex::load(&data)?.with_ui(a.ui);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("invalid address {}:{}", a.host, a.port))?;
    tracing::info!(pairs = index.pairs.len(), %addr, "serving");
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(index)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
