use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;

use trm_core::dataset::{load_challenges, load_manifest, DataMix, Split, VariantRegistry};
use trm_core::diagnostics::cosine_report;
use trm_core::model::{load_checkpoint, save_checkpoint, Checkpoint, EmbeddingMode, ModelState};
use trm_core::posttrain::{posttrain, BudgetPlan, PretrainContext, Strategy, StrategyKind};
use trm_core::training::{pretrain, OptimizerConfig, TrainRecord};
use trm_core::vote::{predict_augmented, score_pass_at_k, submission_json, TaskVotes};

use crate::artifacts::{OutputDir, ScoreRow, ScoreTable, CHECKPOINT_FILE, REGISTRY_FILE, SUBMISSION_FILE};
use crate::config::{self, EvaluateConfig, Loaded, PosttrainConfig, PretrainConfig, VoteSettings};

fn describe_optimizer(o: &OptimizerConfig) -> String {
    format!(
        "trunk lr {:e}, embedding lr {:e}, weight decay {}, warmup {}",
        o.trunk_lr, o.embedding_lr, o.weight_decay, o.warmup_steps
    )
}

fn describe_strategy(strategy: &Strategy) -> String {
    match strategy.kind {
        StrategyKind::Staged => format!("staged (embeddings only for the first {})", strategy.fraction()),
        StrategyKind::Lora => format!("lora (rank {}, alpha {})", strategy.rank(), strategy.alpha()),
        StrategyKind::Full => "full".into(),
        StrategyKind::EmbeddingsOnly => "embeddings_only".into(),
    }
}

fn load_mix(loaded: &Loaded<impl Sized>, manifest: &Path, data_root: Option<&Path>) -> Result<DataMix> {
    let manifest = loaded.local(manifest);
    let root = loaded.data_root(data_root);
    let entries = load_manifest(&manifest, root.as_deref())
        .with_context(|| format!("loading manifest {}", manifest.display()))?;
    let mix = DataMix::load(&entries)?;
    if mix.train.is_empty() {
        bail!("manifest {} yields no training pairs", manifest.display());
    }
    Ok(mix)
}

pub fn pretrain_cmd(config_path: &Path, force: bool, dry_run: bool) -> Result<()> {
    let loaded = config::load::<PretrainConfig>(config_path)?;
    let cfg = &loaded.config;
    cfg.validate()?;
    let plan = &cfg.plan;
    println!(
        "pretrain: steps {}, batch {}, augs/task {}, {}",
        plan.steps,
        plan.batch_size,
        plan.augs_per_task,
        describe_optimizer(&plan.optimizer)
    );
    println!(
        "model: D={}, layers {}, heads {}, L={}, H={}, N_sup={}, canvas {}, {:?} embeddings",
        cfg.model.hidden_dim,
        cfg.model.n_trunk_layers,
        cfg.model.n_heads,
        cfg.model.lower_cycles,
        cfg.model.higher_cycles,
        cfg.model.supervision_steps,
        cfg.model.canvas_side,
        cfg.model.embedding_mode
    );
    if dry_run {
        return Ok(());
    }
    let out = OutputDir::claim(&loaded.local(&cfg.output_dir), force)?;
    let mix = load_mix(&loaded, &cfg.manifest, cfg.data_root.as_deref())?;
    info!("{} tasks, {} training pairs, {} eval pairs", mix.train.len(), mix.pair_count(), mix.eval.len());

    out.create(&loaded.text)?;
    let mut metrics = out.metrics()?;
    let result = pretrain(&mix, &cfg.model, plan, &mut |r| metrics.append(r))?;
    save_checkpoint(&out.file(CHECKPOINT_FILE), &result.checkpoint)?;
    result.registry.save(&out.file(REGISTRY_FILE))?;
    report_last(&result.records);
    println!("wrote {}", out.path.display());
    Ok(())
}

fn report_last(records: &[TrainRecord]) {
    if let Some(r) = records.last() {
        println!(
            "step {}: loss {}, train exact {:.4}, eval exact {}",
            r.step,
            r.loss.map_or("-".into(), |l| format!("{l:.4}")),
            r.train_exact_accuracy,
            r.eval_exact_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
}

fn vote_all(
    state: &ModelState<f32>,
    registry: &VariantRegistry,
    tasks: &Split,
    vote: &VoteSettings,
) -> Result<Vec<TaskVotes>> {
    tasks
        .tasks
        .iter()
        .map(|t| {
            let predictions = predict_augmented(state, registry, t, vote.n_augs)?;
            Ok(TaskVotes::from_predictions(&predictions, vote.halting_weighted)?)
        })
        .collect()
}

fn score(votes: &[TaskVotes], solutions: &Split, vote: &VoteSettings) -> Result<ScoreTable> {
    let scores = vote
        .ks
        .iter()
        .map(|&k| {
            Ok(ScoreRow {
                k,
                pass_at_k: score_pass_at_k(votes, solutions, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable {
        n_tasks: votes.len(),
        n_augs: vote.n_augs,
        halting_weighted: vote.halting_weighted,
        scores,
    })
}

fn print_scores(table: &ScoreTable) {
    for row in &table.scores {
        println!("pass@{}: {:.4}", row.k, row.pass_at_k);
    }
}

pub fn posttrain_cmd(config_path: &Path, force: bool, dry_run: bool) -> Result<()> {
    let loaded = config::load::<PosttrainConfig>(config_path)?;
    let cfg = &loaded.config;
    cfg.validate()?;
    let plan = &cfg.plan;
    println!(
        "posttrain: strategy {}, steps {}, batch {}, augs/task {}, {}",
        describe_strategy(&cfg.strategy),
        plan.steps,
        plan.batch_size,
        plan.augs_per_task,
        describe_optimizer(&plan.optimizer)
    );
    println!("vote: {} augmentations, pass@{:?}", cfg.vote.n_augs, cfg.vote.ks);
    if dry_run {
        return Ok(());
    }
    let out = OutputDir::claim(&loaded.local(&cfg.output_dir), force)?;
    let checkpoint = load_checkpoint(&loaded.local(&cfg.checkpoint), None)?;
    let root = cfg.data_root.as_deref();
    let tasks_path = loaded.data_file(root, &cfg.tasks);
    let solutions = cfg.solutions.as_ref().map(|p| loaded.data_file(root, p));
    let tasks = load_challenges(&tasks_path, solutions.as_deref())?;
    if tasks.is_empty() {
        bail!("{} holds no tasks", tasks_path.display());
    }
    let continued = match &cfg.continued {
        Some(c) if plan.continued_pretrain_steps > 0 => {
            let registry = VariantRegistry::load(&loaded.local(&c.registry))?;
            let mix = load_mix(&loaded, &c.manifest, root)?;
            Some((registry, mix, c.plan.clone()))
        }
        _ => None,
    };
    let context = continued.as_ref().map(|(registry, mix, plan)| PretrainContext {
        registry,
        mix,
        plan: plan.clone(),
    });

    out.create(&loaded.text)?;
    let mut metrics = out.metrics()?;
    let result = posttrain(&checkpoint, &tasks, &cfg.strategy, plan, context, &mut |r| metrics.append(r))?;
    save_checkpoint(&out.file(CHECKPOINT_FILE), &result.checkpoint)?;
    result.registry.save(&out.file(REGISTRY_FILE))?;
    report_last(&result.records);

    let votes = vote_all(&result.checkpoint.state, &result.registry, &tasks, &cfg.vote)?;
    out.write_json(SUBMISSION_FILE, &submission_json(&votes))?;
    if solutions.is_some() {
        let table = score(&votes, &tasks, &cfg.vote)?;
        print_scores(&table);
        table.save(&out)?;
    }
    println!("wrote {}", out.path.display());
    Ok(())
}

pub fn evaluate_cmd(config_path: &Path, force: bool) -> Result<()> {
    let loaded = config::load::<EvaluateConfig>(config_path)?;
    let cfg = &loaded.config;
    cfg.validate()?;
    let out = OutputDir::claim(&loaded.local(&cfg.output_dir), force)?;
    let registry = VariantRegistry::load(&loaded.local(&cfg.registry))?;
    let checkpoint: Checkpoint = load_checkpoint(&loaded.local(&cfg.checkpoint), Some(registry.digest()))?;
    let root = cfg.data_root.as_deref();
    let tasks_path = loaded.data_file(root, &cfg.tasks);
    let tasks = load_challenges(&tasks_path, Some(&loaded.data_file(root, &cfg.solutions)))?;
    if tasks.is_empty() {
        bail!("{} holds no tasks", tasks_path.display());
    }
    if cfg.vote.n_augs > registry.augs_per_task() {
        bail!(
            "vote.n_augs ({}) exceeds the registry's {} augmentations per task",
            cfg.vote.n_augs,
            registry.augs_per_task()
        );
    }
    let votes = vote_all(&checkpoint.state, &registry, &tasks, &cfg.vote)?;
    let table = score(&votes, &tasks, &cfg.vote)?;

    out.create(&loaded.text)?;
    out.write_json(SUBMISSION_FILE, &submission_json(&votes))?;
    table.save(&out)?;
    print_scores(&table);
    println!("wrote {}", out.path.display());
    Ok(())
}

pub fn plan_cmd(plan: &BudgetPlan) -> Result<()> {
    let fraction = plan.compute_fraction()?;
    let denominator = 1.0 / fraction;
    if (denominator - denominator.round()).abs() < 1e-9 {
        println!("compute fraction: 1/{} ({fraction})", denominator.round());
    } else {
        println!("compute fraction: {fraction}");
    }
    println!(
        "planned steps: {} at batch {} ({}h wall, {}h reserved for inference, {} s/step)",
        plan.planned_steps, plan.batch_size, plan.wall_hours, plan.reserved_inference_hours, plan.measured_step_seconds
    );
    println!("{}", serde_json::to_string(plan)?);
    Ok(())
}

pub fn diagnose_cmd(checkpoint: &Path, registry: &Path, output: Option<&Path>, force: bool, step: u64) -> Result<()> {
    if let Some(path) = output {
        if path.exists() && !force {
            bail!("{} already exists; pass --force to overwrite", path.display());
        }
    }
    let registry = VariantRegistry::load(registry)?;
    let ckpt = load_checkpoint(checkpoint, Some(registry.digest()))?;
    let mode = ckpt.state.config.embedding_mode;
    let membership: Vec<(&str, usize)> = (0..registry.n_entries())
        .map(|row| {
            let task = registry.task_of(row);
            let embedding_row = match mode {
                EmbeddingMode::PerVariant => row,
                EmbeddingMode::Explicit => task,
            };
            (registry.task_ids()[task].as_str(), embedding_row)
        })
        .collect();
    let bases: Vec<usize> = (0..registry.n_tasks())
        .map(|t| match mode {
            EmbeddingMode::PerVariant => registry.base_index(t),
            EmbeddingMode::Explicit => t,
        })
        .collect();
    let report = cosine_report(step, &ckpt.state.params.task_embeddings, &membership, &bases)?;
    let json = serde_json::to_string(&report)?;
    println!("{json}");
    if let Some(path) = output {
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
