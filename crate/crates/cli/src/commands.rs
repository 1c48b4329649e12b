//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nrreg_core::consistency::{local_consistency, CorrespondenceSet};
use nrreg_core::defgraph::DeformationGraph;
use nrreg_core::metrics::{classification_metrics, point_errors, summarize, MetricsReport};
use nrreg_core::nicp::{solve, WarpField};
use nrreg_core::scnet::{classify, ScNetInput, ScNetModel};
use nrreg_core::synth::{generate_scene, SceneSpec};
use nrreg_core::training::{label_correspondences, loss_log_csv, train as train_model, TrainingSet, GRADCHECK_STEP};
use nrreg_core::{io, par};

use crate::config::PipelineConfig;
use crate::failure::{invalid, numerical};
use crate::histogram::Histogram;

const HISTOGRAM_BINS: usize = 20;
/// Acceptance threshold for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn set_threads(n: usize) -> anyhow::Result<()> {
    if n == 0 {
        return Err(invalid("--threads must be at least 1").into());
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| invalid(format!("--threads: {e}")))?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn read_spec(path: &Path) -> anyhow::Result<SceneSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

pub fn synth(spec_path: &Path, out: &Path, count: Option<usize>, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec = read_spec(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().with_context(|| format!("scene spec {}", spec_path.display()))?;
    let Some(count) = count else {
        let scene = generate_scene(&spec)?;
        scene.write_bundle(out)?;
        println!("wrote {} ({} correspondences)", out.display(), scene.corr.len());
        return Ok(());
    };
    create_dir(out)?;
    let scenes = par::map_indexed(count, |i| {
        generate_scene(&SceneSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..spec
        })
    });
    for (i, scene) in scenes.into_iter().enumerate() {
        scene?.write_bundle(&out.join(format!("scene-{i:04}")))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

/// Correspondences of a file or bundle directory. Unlabeled bundle
/// correspondences are labeled from the bundle's ground-truth warp.
fn load_corr(path: &Path, tau_d: f64) -> anyhow::Result<CorrespondenceSet> {
    if !path.is_dir() {
        return io::read_corr_csv(path).with_context(|| format!("reading {}", path.display()));
    }
    let corr_path = path.join("corr.csv");
    let corr = io::read_corr_csv(&corr_path).with_context(|| format!("reading {}", corr_path.display()))?;
    if corr.labels().is_some() || !path.join("warp.txt").is_file() {
        return Ok(corr);
    }
    let gt = read_warp(&path.join("warp.txt"))?;
    let labels = label_correspondences(&corr, &gt, tau_d);
    Ok(corr.with_labels(labels)?)
}

fn read_warp(path: &Path) -> anyhow::Result<WarpField> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    WarpField::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn scene_dirs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if root.join("corr.csv").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("corr.csv").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(invalid(format!("{} holds no scene bundles", root.display())).into());
    }
    Ok(dirs)
}

pub fn train(cfg: &PipelineConfig, data: &Path, model_path: &Path, log: Option<&Path>) -> anyhow::Result<()> {
    let dirs = scene_dirs(data)?;
    let scenes = dirs
        .iter()
        .map(|d| load_corr(d, cfg.tau_d))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(i) = scenes.iter().position(|s| s.labels().is_none()) {
        return Err(invalid(format!("{} has neither labels nor a ground-truth warp", dirs[i].display())).into());
    }
    let set = TrainingSet::new(scenes, cfg.graph_params())?;
    let mut model = ScNetModel::new(cfg.architecture(), cfg.model_seed)?;
    println!("training on {} scenes, {} parameters", set.len(), model.param_count());
    let (epochs, optimizer) = train_model(&mut model, &set, &cfg.train(), |e| {
        println!(
            "epoch {:>3}  loss {:.6}  cls {:.6}  con {:.6}  lr {:.3e}",
            e.epoch, e.mean_loss, e.mean_cls, e.mean_con, e.lr
        );
    })?;
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(model_path, model.to_bytes(Some(&optimizer)))?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| model_path.with_file_name("loss.csv"));
    write(&log_path, loss_log_csv(&epochs))?;
    println!("wrote {} and {}", model_path.display(), log_path.display());
    Ok(())
}

fn load_model(cfg: &PipelineConfig, path: &Path) -> anyhow::Result<ScNetModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (model, _) =
        ScNetModel::load(&bytes, &cfg.architecture()).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

pub fn prune(cfg: &PipelineConfig, input: &Path, model_path: &Path, out: &Path) -> anyhow::Result<()> {
    let corr = load_corr(input, cfg.tau_d)?;
    let model = load_model(cfg, model_path)?;
    let net_input = ScNetInput::prepare(&corr, &cfg.graph_params())?;
    let scores = model.forward(&net_input).scores;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(numerical(format!("non-finite score for correspondence {i}")).into());
    }
    let keep = classify(&scores, cfg.tau_s);
    let mut kept_mask = vec![false; corr.len()];
    for &i in &keep {
        kept_mask[i] = true;
    }
    create_dir(out)?;
    let pruned = corr.clone().with_scores(scores.clone())?.subset(&keep);
    write(&out.join("corr.csv"), io::write_corr_csv(&pruned))?;
    let mut csv = String::from("index,score,kept\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(csv, "{i},{s},{}", u8::from(kept_mask[i]));
    }
    write(&out.join("scores.csv"), csv)?;
    println!("kept {} of {} correspondences", keep.len(), corr.len());
    if let Some(labels) = corr.labels() {
        let (p, r) = classification_metrics(&keep, labels);
        println!("precision {p:.4}  recall {r:.4}");
    }
    Ok(())
}

pub fn register(
    cfg: &PipelineConfig,
    corr_path: &Path,
    source_path: &Path,
    out: &Path,
    gt: Option<&Path>,
) -> anyhow::Result<()> {
    let corr = io::read_corr_csv(corr_path).with_context(|| format!("reading {}", corr_path.display()))?;
    let source = io::read_cloud(source_path).with_context(|| format!("reading {}", source_path.display()))?;
    let solution = solve(&corr, &source, &cfg.solver())?;
    create_dir(out)?;
    write(&out.join("warp.txt"), solution.field.to_text())?;
    write(&out.join("warped.ply"), io::write_ply(&solution.field.warp_cloud(&source)))?;
    let mut trace = String::from("iteration,cost\n");
    for (i, c) in solution.cost_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{c}");
    }
    write(&out.join("cost-trace.csv"), trace)?;
    println!(
        "{} iterations, cost {:.6e} -> {:.6e}",
        solution.iterations(),
        solution.cost_trace[0],
        solution.cost_trace.last().expect("trace starts with the initial cost")
    );
    if let Some(gt) = gt {
        let gt = read_warp(gt)?;
        let report = summarize(&point_errors(&source, &solution.field, &gt)?)?;
        print!("{}", report.table());
    }
    Ok(())
}

fn read_trace(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| invalid(format!("{}: bad row {}", path.display(), i + 2)).into())
        })
        .collect()
}

/// Kept indices recorded by `prune`, if present.
fn read_kept(path: &Path) -> anyhow::Result<Option<Vec<usize>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kept = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        match (cols.first().and_then(|v| v.parse::<usize>().ok()), cols.get(2).copied()) {
            (Some(i), Some("1")) => kept.push(i),
            (Some(_), Some("0")) => {}
            _ => return Err(invalid(format!("{}: bad row {}", path.display(), no + 1)).into()),
        }
    }
    Ok(Some(kept))
}

pub fn eval(scenes: &[PathBuf], results: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    if scenes.len() != results.len() {
        return Err(invalid(format!("{} --scene but {} --result arguments", scenes.len(), results.len())).into());
    }
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut all_errors = Vec::new();
    let mut errors_csv = String::from("scene,index,epe,relative_error\n");
    let mut bad_traces = Vec::new();
    for (scene, result) in scenes.iter().zip(results) {
        let name = scene.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
        let source = io::read_cloud(&scene.join("source.ply"))
            .with_context(|| format!("reading {}", scene.join("source.ply").display()))?;
        let gt = read_warp(&scene.join("warp.txt"))?;
        let est = read_warp(&result.join("warp.txt"))?;
        let errors = point_errors(&source, &est, &gt)?;
        let mut report = summarize(&errors)?;
        if let Some(kept) = read_kept(&result.join("scores.csv"))? {
            let corr = io::read_corr_csv(&scene.join("corr.csv"))?;
            if let Some(labels) = corr.labels() {
                if kept.iter().any(|&i| i >= labels.len()) {
                    return Err(invalid(format!("{}: index out of range", result.join("scores.csv").display())).into());
                }
                let (p, r) = classification_metrics(&kept, labels);
                report = report.with_classification(p, r);
            }
        }
        let trace_path = result.join("cost-trace.csv");
        if trace_path.is_file() {
            let trace = read_trace(&trace_path)?;
            if trace.windows(2).any(|w| w[1] > w[0]) {
                bad_traces.push(trace_path.display().to_string());
            }
        }
        for (i, e) in errors.iter().enumerate() {
            let re = e.relative.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(errors_csv, "{name},{i},{},{re}", e.epe);
        }
        all_errors.extend(errors.iter().map(|e| e.epe));
        println!("{name}");
        print!("{}", report.table());
        rows.push((name, report));
    }
    let pooled = MetricsReport::pooled(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>()).expect("non-empty");
    if rows.len() > 1 {
        println!("pooled");
        print!("{}", pooled.table());
    }
    let mut report_csv = format!("{}\n", MetricsReport::CSV_HEADER);
    for (name, r) in &rows {
        report_csv.push_str(&r.csv_row(name));
        report_csv.push('\n');
    }
    report_csv.push_str(&pooled.csv_row("pooled"));
    report_csv.push('\n');
    write(&out.join("report.csv"), report_csv)?;
    write(&out.join("errors.csv"), errors_csv)?;
    let hist = Histogram::new(&all_errors, HISTOGRAM_BINS);
    write(&out.join("histogram.csv"), hist.to_csv())?;
    write(&out.join("histogram.svg"), hist.to_svg("End-point error", "EPE (m)"))?;
    if !bad_traces.is_empty() {
        return Err(numerical(format!("cost trace increases in {}", bad_traces.join(", "))).into());
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> anyhow::Result<()> {
    let report = nrreg_core::training::gradient_check(seed)?;
    println!(
        "gradcheck seed {seed}: {} parameters, step {GRADCHECK_STEP:e}, max relative error {:.3e} ({}), loss {:.6}",
        report.parameters, report.max_relative_error, report.worst_tensor, report.loss
    );
    if !(report.max_relative_error < GRADCHECK_TOLERANCE) {
        return Err(numerical(format!(
            "gradient mismatch {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_relative_error
        ))
        .into());
    }
    println!("PASS");
    Ok(())
}

pub fn inspect_graph(cfg: &PipelineConfig, input: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let is_cloud = matches!(
        input.extension().and_then(|e| e.to_str()),
        Some("ply") | Some("xyz")
    );
    let (graph, consistency) = if is_cloud {
        let cloud = io::read_cloud(input).with_context(|| format!("reading {}", input.display()))?;
        let graph = DeformationGraph::build(&cloud, cfg.node_coverage, cfg.node_k, cfg.fps_start)?;
        (graph, None)
    } else {
        let corr = load_corr(input, cfg.tau_d)?;
        let graph = DeformationGraph::build(&corr.source_cloud(), cfg.node_coverage, cfg.node_k, cfg.fps_start)?;
        let lc = local_consistency(&corr, &graph, cfg.sigma_d)?;
        (graph, Some(lc))
    };
    let sizes: Vec<usize> = graph.node_to_members.iter().map(Vec::len).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
    println!("points   {}", graph.point_count());
    println!("nodes    {}", graph.node_count());
    println!("edges    {}", graph.edges.len());
    println!(
        "members  min {} / mean {:.2} / max {}",
        sizes.iter().min().unwrap_or(&0),
        mean,
        sizes.iter().max().unwrap_or(&0)
    );
    if let Some(lc) = &consistency {
        let (sum, count) = lc
            .blocks
            .iter()
            .fold((0.0, 0usize), |(s, c), b| (s + b.theta.sum(), c + b.theta.len()));
        println!("theta    mean {:.4} over {} entries", sum / count.max(1) as f64, count);
    }
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join("graph.txt"), graph.dump())?;
        if let Some(lc) = &consistency {
            write(&out.join("consistency.csv"), lc.stats_csv())?;
        }
    }
    Ok(())
}
