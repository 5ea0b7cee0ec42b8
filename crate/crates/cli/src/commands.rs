//! The five subcommands: train, eval, precompute, heatmap, gradcheck.
//! Every command is deterministic given the config file and seed — two
//! runs write byte-identical outputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use seqpe::encoder::PeTable;
use seqpe::numerics::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use seqpe::numerics::rng::{streams, StreamRng};
use seqpe::numerics::tensor::no_grad;
use seqpe::positions::{
    sample_contrastive_set, sample_ood_batch, Position, Region, SampleStrategy,
};
use seqpe::regularizers::{contrastive_loss, distill_from_embeddings};
use seqpe::tasks::{
    base_window, eval_accuracy_at_resolution, eval_perplexity, grid_train_step, lm_train_step,
};
use seqpe::{Result, SeqPeError};

use crate::build::{self, Built, TaskModel};
use crate::config::{ExtentSpec, RunConfig, TaskKind};

/// What training reported at the end, for callers that want to chain
/// straight into follow-up checks.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub metric: &'static str,
    pub extent: String,
    pub value: f64,
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Lm => "perplexity",
        TaskKind::Grid2d => "accuracy",
    }
}

/// Evaluates the model at one extent (context length or grid size).
fn eval_extent(cfg: &RunConfig, model: &TaskModel, extent: &ExtentSpec) -> Result<f64> {
    match (model, extent) {
        (TaskModel::Lm(lm), ExtentSpec::Len(l)) => {
            let corpus = build::eval_corpus(cfg)?;
            eval_perplexity(lm, &corpus, *l as usize)
        }
        (TaskModel::Grid(gc), ExtentSpec::Grid([h, w])) => eval_accuracy_at_resolution(
            gc,
            cfg.eval.seed,
            *h as usize,
            *w as usize,
            cfg.eval.samples,
        ),
        _ => Err(SeqPeError::ConfigInvalid(format!(
            "extent {} does not fit the configured task",
            extent.label()
        ))),
    }
}

/// `train`: optimize from scratch, streaming one JSON object per step to
/// `metrics.jsonl`, then write `checkpoint.bin` and `summary.json`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    let Built { params, mut model } = build::build(cfg)?;
    let mut adam = build::optimizer(cfg, &params);
    let reg = build::reg_config(cfg);
    let rng = StreamRng::new(cfg.seed);
    let mut metrics = BufWriter::new(fs::File::create(out_dir.join("metrics.jsonl"))?);
    match &mut model {
        TaskModel::Lm(lm) => {
            let corpus = build::train_corpus(cfg)?;
            for _ in 0..cfg.train.steps {
                let m =
                    lm_train_step(lm, &params, &mut adam, &corpus, cfg.train.batch, &reg, &rng)?;
                writeln!(
                    metrics,
                    "{{\"step\":{},\"l_main\":{},\"l_delta\":{},\"l_ood\":{},\"total\":{}}}",
                    m.step, m.l_main, m.l_delta, m.l_ood, m.total
                )?;
            }
        }
        TaskModel::Grid(gc) => {
            let dataset = build::train_dataset(cfg)?;
            for _ in 0..cfg.train.steps {
                let m =
                    grid_train_step(gc, &params, &mut adam, &dataset, cfg.train.batch, &reg, &rng)?;
                writeln!(
                    metrics,
                    "{{\"step\":{},\"l_main\":{},\"l_delta\":{},\"l_ood\":{},\"total\":{}}}",
                    m.step, m.l_main, m.l_delta, m.l_ood, m.total
                )?;
            }
        }
    }
    metrics.flush()?;
    build::save_checkpoint(&out_dir.join("checkpoint.bin"), cfg, &params, cfg.train.steps)?;

    let extent = cfg.train_extent_spec();
    let value = eval_extent(cfg, &model, &extent)?;
    let summary = TrainSummary {
        steps: cfg.train.steps,
        metric: metric_name(cfg.task),
        extent: extent.label(),
        value,
    };
    fs::write(
        out_dir.join("summary.json"),
        format!(
            "{{\"steps\":{},\"metric\":\"{}\",\"extent\":\"{}\",\"value\":{}}}\n",
            summary.steps, summary.metric, summary.extent, summary.value
        ),
    )?;
    println!(
        "trained {} steps; {}@{} = {}",
        summary.steps, summary.metric, summary.extent, summary.value
    );
    Ok(summary)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path, use_table: Option<&Path>) -> Result<Built> {
    let mut built = build::build(cfg)?;
    build::load_checkpoint(checkpoint, cfg, &built.params)?;
    if let Some(table_path) = use_table {
        let table = PeTable::load(table_path)?;
        built.model.provider_mut().attach_table(table)?;
    }
    Ok(built)
}

/// `eval`: measure the checkpointed model at each extent, one CSV row per
/// extent.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    use_table: Option<&Path>,
    extents: Option<Vec<ExtentSpec>>,
    out_csv: &Path,
) -> Result<()> {
    let built = load_model(cfg, checkpoint, use_table)?;
    let extents = extents.unwrap_or_else(|| cfg.eval.extents.clone());
    if extents.is_empty() {
        return Err(SeqPeError::ConfigInvalid("no evaluation extents".into()));
    }
    let mut rows = String::from("extent,metric\n");
    for e in &extents {
        let value = eval_extent(cfg, &built.model, e)?;
        rows.push_str(&format!("{},{}\n", e.label(), value));
    }
    if let Some(dir) = out_csv.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(out_csv, rows)?;
    println!(
        "evaluated {} at {} extent(s) -> {}",
        metric_name(cfg.task),
        extents.len(),
        out_csv.display()
    );
    Ok(())
}

/// `precompute`: freeze the digit encoder into a lookup table covering
/// the training extent and every configured evaluation extent.
pub fn cmd_precompute(cfg: &RunConfig, checkpoint: &Path, out_table: &Path) -> Result<()> {
    let built = load_model(cfg, checkpoint, None)?;
    let enc = built.model.provider().seq_encoder().ok_or_else(|| {
        SeqPeError::ConfigInvalid(format!(
            "mode '{}' runs no digit encoder; nothing to precompute",
            cfg.pe
        ))
    })?;
    let mut bounds = cfg.train_extent();
    for e in &cfg.eval.extents {
        for (b, &eb) in bounds.iter_mut().zip(e.bounds().iter()) {
            *b = (*b).max(eb);
        }
    }
    let table = enc.precompute_table(&Region::new(bounds.clone())?)?;
    if let Some(dir) = out_table.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    table.save(out_table)?;
    println!(
        "wrote {} position embeddings covering {:?} -> {}",
        table.region.count(),
        bounds,
        out_table.display()
    );
    Ok(())
}

fn format_matrix_csv(values: &[f64], rows: usize, cols: usize) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| values[r * cols + c].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `heatmap`: dot products between position embeddings.  The 1-D task
/// writes one `L x L` matrix; the 2-D task writes one `h x w` matrix per
/// anchor cell.
pub fn cmd_heatmap(
    cfg: &RunConfig,
    checkpoint: &Path,
    use_table: Option<&Path>,
    extent: Option<ExtentSpec>,
    anchors: Option<Vec<Position>>,
    out_dir: &Path,
) -> Result<()> {
    let built = load_model(cfg, checkpoint, use_table)?;
    let provider = built.model.provider();
    fs::create_dir_all(out_dir)?;
    let extent = extent.unwrap_or_else(|| cfg.train_extent_spec());
    match extent {
        ExtentSpec::Len(l) => {
            if l < 1 {
                return Err(SeqPeError::ConfigInvalid(format!("bad heatmap extent {l}")));
            }
            let positions: Vec<Position> = (0..l).map(|i| vec![i]).collect();
            let dots = no_grad(|| -> Result<_> {
                let e = provider.embeddings(&positions)?;
                Ok(e.matmul_nt(&e)?.to_vec())
            })?;
            let path = out_dir.join("heatmap.csv");
            fs::write(&path, format_matrix_csv(&dots, l as usize, l as usize))?;
            println!("wrote {l}x{l} dot-product matrix -> {}", path.display());
        }
        ExtentSpec::Grid([h, w]) => {
            let region = Region::new(vec![h, w])?;
            let cells: Vec<Position> = region.iter().collect();
            let anchors = anchors.unwrap_or_else(|| default_anchors(h, w));
            let embs = no_grad(|| provider.embeddings(&cells))?;
            let flat = embs.to_vec();
            let d = cfg.model.d_model;
            for a in &anchors {
                if a.len() != 2 || !region.contains(a) {
                    return Err(SeqPeError::ConfigInvalid(format!(
                        "anchor {a:?} lies outside the {h}x{w} grid"
                    )));
                }
                let ai = region.flat_index(a)?;
                let anchor_row = &flat[ai * d..(ai + 1) * d];
                let mut dots = Vec::with_capacity(cells.len());
                for c in 0..cells.len() {
                    let row = &flat[c * d..(c + 1) * d];
                    dots.push(anchor_row.iter().zip(row).map(|(x, y)| x * y).sum::<f64>());
                }
                let path = out_dir.join(format!("anchor_{}_{}.csv", a[0], a[1]));
                fs::write(&path, format_matrix_csv(&dots, h as usize, w as usize))?;
            }
            println!(
                "wrote {} anchor heatmap(s) over a {h}x{w} grid -> {}",
                anchors.len(),
                out_dir.display()
            );
        }
    }
    Ok(())
}

/// Four corners plus the center.
pub fn default_anchors(h: i64, w: i64) -> Vec<Position> {
    vec![
        vec![0, 0],
        vec![0, w - 1],
        vec![h / 2, w / 2],
        vec![h - 1, 0],
        vec![h - 1, w - 1],
    ]
}

/// `gradcheck`: finite-difference check of the full training objective on
/// a deliberately small model.
///
/// The distillation teacher embeddings are computed once, outside the
/// loss closure, and enter it as constants — the finite differences then
/// probe exactly the student-path objective the analytic pass
/// backpropagates, so a gradient leaking through the teacher side would
/// show up as a mismatch.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    seed: u64,
    sabotage: Option<(String, usize)>,
) -> Result<GradCheckReport> {
    if cfg.model.d_model > 32 {
        return Err(SeqPeError::ConfigInvalid(format!(
            "gradient checking is O(parameters x forward passes); keep model.d_model <= 32 \
             (got {})",
            cfg.model.d_model
        )));
    }
    let Built { params, model } = build::build(cfg)?;
    let rng = StreamRng::new(seed);
    let alpha = cfg.train.alpha;
    let beta = cfg.train.beta;
    let reg_region = Region::new(cfg.reg_range())?;

    // Freeze every sampled input before the closure: batches, candidate
    // sets, shifted students, and the teacher-side embeddings.
    let mut contrastive = None;
    let mut distill = None;
    if alpha > 0.0 || beta > 0.0 {
        let enc = model.provider().seq_encoder().ok_or_else(|| {
            SeqPeError::ConfigInvalid(
                "embedding regularizers need the sequential-digit encoder".into(),
            )
        })?;
        let pos_cfg = enc.config().pos;
        reg_region.check_against(&pos_cfg)?;
        if alpha > 0.0 {
            let mut crng = rng.stream(streams::CONTRASTIVE);
            let pivot: Position = reg_region
                .bounds
                .iter()
                .map(|&b| rand::Rng::gen_range(&mut crng, 0..b))
                .collect();
            let m = cfg.train.contrastive_batch.min(8);
            let set = sample_contrastive_set(
                &pos_cfg,
                &pivot,
                m,
                &reg_region,
                SampleStrategy::default_global(m),
                &mut crng,
            )?;
            contrastive = Some((pivot, set));
        }
        if beta > 0.0 {
            let mut drng = rng.stream(streams::DISTILL);
            let m = cfg.train.distill_batch.min(8);
            let (teachers, shift) = sample_ood_batch(&pos_cfg, &reg_region, m, &mut drng)?;
            let students: Vec<Position> = teachers
                .iter()
                .map(|p| p.iter().zip(&shift).map(|(a, z)| a + z).collect())
                .collect();
            let teacher_frozen = no_grad(|| enc.encode_batch(&teachers))?;
            distill = Some((students, teacher_frozen));
        }
    }

    let report = match &model {
        TaskModel::Lm(lm) => {
            let corpus = build::train_corpus(cfg)?;
            let len = cfg.positions.l_train as usize;
            let windows = corpus.sample_windows(2, len, &mut rng.stream(streams::BATCH))?;
            let positions = base_window(len);
            grad_check(
                &params,
                &GradCheckOptions {
                    samples_per_param: 4,
                    seed,
                    sabotage: sabotage.clone(),
                    ..GradCheckOptions::default()
                },
                || {
                    let mut total = lm.forward_loss(&windows, &positions)?;
                    if let Some((pivot, set)) = &contrastive {
                        let enc = lm.provider().seq_encoder().expect("checked above");
                        total = total.add(&contrastive_loss(enc, pivot, set)?.mul_scalar(alpha))?;
                    }
                    if let Some((students, teacher)) = &distill {
                        let enc = lm.provider().seq_encoder().expect("checked above");
                        let student_embs = enc.encode_batch(students)?;
                        let kl = distill_from_embeddings(
                            teacher,
                            &student_embs,
                            cfg.train.distill_heads,
                        )?;
                        total = total.add(&kl.mul_scalar(beta))?;
                    }
                    Ok(total)
                },
            )?
        }
        TaskModel::Grid(gc) => {
            let dataset = build::train_dataset(cfg)?;
            let (h, w) = gc.cfg.grid;
            let picks: Vec<&seqpe::tasks::GridSample> = {
                let mut brng = rng.stream(streams::BATCH);
                (0..2)
                    .map(|_| {
                        &dataset.samples
                            [rand::Rng::gen_range(&mut brng, 0..dataset.samples.len())]
                    })
                    .collect()
            };
            grad_check(
                &params,
                &GradCheckOptions {
                    samples_per_param: 4,
                    seed,
                    sabotage: sabotage.clone(),
                    ..GradCheckOptions::default()
                },
                || {
                    let mut total = gc.forward_loss(&picks, h, w)?;
                    if let Some((pivot, set)) = &contrastive {
                        let enc = gc.provider().seq_encoder().expect("checked above");
                        total = total.add(&contrastive_loss(enc, pivot, set)?.mul_scalar(alpha))?;
                    }
                    if let Some((students, teacher)) = &distill {
                        let enc = gc.provider().seq_encoder().expect("checked above");
                        let student_embs = enc.encode_batch(students)?;
                        let kl = distill_from_embeddings(
                            teacher,
                            &student_embs,
                            cfg.train.distill_heads,
                        )?;
                        total = total.add(&kl.mul_scalar(beta))?;
                    }
                    Ok(total)
                },
            )?
        }
    };

    // Per-module summary: worst error under each top-level parameter
    // group.
    let mut groups: Vec<(String, f64)> = Vec::new();
    for (name, err) in &report.per_param {
        let module = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(g, _)| *g == module) {
            Some((_, e)) => *e = e.max(*err),
            None => groups.push((module, *err)),
        }
    }
    for (module, err) in &groups {
        println!("  {module:<16} max rel err {err:.3e}");
    }
    println!(
        "checked {} coordinates, max rel err {:.3e}",
        report.checked, report.max_rel_err
    );
    if !report.passes(1e-4) {
        let worst = report.worst.as_ref().expect("failing check has a worst");
        return Err(SeqPeError::Numeric(format!(
            "gradient mismatch at {}[{}]: analytic {} vs numeric {} (rel err {:.3e})",
            worst.param, worst.index, worst.analytic, worst.numeric, worst.rel_err
        )));
    }
    println!("gradients verified (tolerance 1e-4)");
    Ok(report)
}
