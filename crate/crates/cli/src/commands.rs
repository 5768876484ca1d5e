//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use ndarray::{concatenate, Array2, Axis};
use serde_json::json;

use glyphsim::analysis::{
    self, centroid_summary, loo_reports, loo_table, mean_similarity_table, model_matrix_table, paired_table,
    paired_tests, stat_tests, stats_table, summary_table, AnalysisConfig, SimilarityGrid, Table, CONSENSUS,
};
use glyphsim::corpus::{
    build_composite, load_corpus, load_prepared, save_prepared, split, CorpusManifest, GlyphImage, Role, ScriptCorpus,
    SplitLabel,
};
use glyphsim::ensemble::{embed_all, EmbeddingSet, Ensemble};
use glyphsim::explain::grad_cam_both;
use glyphsim::model::Preset;
use glyphsim::plot::{dendrogram_png, heatmap_png, overlay_png, scatter_png};
use glyphsim::rng;
use glyphsim::structure::{cluster_centroids, pca_project, script_centroids, similarity_heatmap, tsne_project, Linkage};
use glyphsim::synthetic::generate_synthetic;
use glyphsim::trainer::{train_ensemble, TrainStatus, SUMMARY_FILE};

use crate::config::{self, Loaded};
use crate::layout::{read_json, require, write_json, EmbeddingIndex, PreparedEntry, PreparedIndex, Run};
use crate::{Cli, Command, UserError};

struct Ctx {
    loaded: Loaded,
    run: Run,
}

impl Ctx {
    fn cfg(&self) -> &config::RunConfig {
        &self.loaded.config
    }

    fn seed(&self, stream: &str) -> u64 {
        rng::derive(self.cfg().seed, &[rng::label(stream)])
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let mut sets = g.sets.clone();
    if let Some(s) = g.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(p) = &g.preset {
        sets.push(format!("preset=\"{p}\""));
    }
    let loaded = config::load(g.config.as_deref(), &sets, g.out.as_deref())?;
    let ctx = Ctx { run: Run::new(loaded.out.clone()), loaded };
    std::fs::create_dir_all(&ctx.run.root).with_context(|| format!("creating {}", ctx.run.root.display()))?;
    record_invocation(&ctx, cli.command.name())?;
    match &cli.command {
        Command::Synth { dir, count } => synth(&ctx, dir.as_deref(), *count),
        Command::Prepare => prepare(&ctx),
        Command::Train { targets, force } => train(&ctx, targets, *force),
        Command::Embed { allow_partial } => embed(&ctx, *allow_partial),
        Command::Analyze => analyze(&ctx),
        Command::Cluster => cluster(&ctx),
        Command::Project { method } => project(&ctx, method),
        Command::Gradcam { glyphs, per_script, member } => gradcam(&ctx, glyphs, *per_script, *member),
        Command::Report => report(&ctx),
    }
}

/// Writes the resolved config and updates `run_manifest.json` with this
/// command's overrides.
fn record_invocation(ctx: &Ctx, command: &str) -> Result<()> {
    let l = &ctx.loaded;
    let resolved = ctx.run.root.join("config.resolved.toml");
    std::fs::write(&resolved, toml::to_string_pretty(&l.config)?)?;
    let path = ctx.run.run_manifest();
    let mut manifest: serde_json::Value = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    manifest["tool"] = json!("glyphsim");
    manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
    manifest["seed"] = json!(l.config.seed);
    manifest["preset"] = json!(l.config.preset);
    manifest["member_seeds"] = json!(l.config.train.seeds);
    manifest["resolved_config"] = json!("config.resolved.toml");
    manifest["parallel"] = json!(glyphsim::par::threads());
    if !manifest["commands"].is_object() {
        manifest["commands"] = json!({});
    }
    manifest["commands"][command] = json!({
        "config_file": l.source.as_ref().map(|p| p.display().to_string()),
        "cli_overrides": l.cli_overrides,
        "changed_from_defaults": l.changed,
    });
    write_json(&path, &manifest)
}

fn synth(ctx: &Ctx, dir: Option<&Path>, count: Option<usize>) -> Result<()> {
    let mut specs = ctx.cfg().synthetic.clone();
    if specs.is_empty() {
        bail!(UserError::new("no synthetic families configured"));
    }
    if let Some(n) = count {
        specs.iter_mut().for_each(|s| s.glyph_count = n);
    }
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| ctx.run.synthetic_dir());
    let manifest = generate_synthetic(&specs, ctx.seed("synthetic"), &dir)?;
    info!("wrote {} synthetic families to {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn manifest_path(ctx: &Ctx) -> Result<PathBuf> {
    if let Some(m) = &ctx.cfg().manifest {
        if !m.exists() {
            bail!(UserError::new(format!("corpus manifest {} does not exist", m.display())));
        }
        return Ok(m.clone());
    }
    let fallback = ctx.run.synthetic_dir().join("manifest.toml");
    if fallback.exists() {
        info!("no manifest configured; using {}", fallback.display());
        return Ok(fallback);
    }
    bail!(UserError::new(format!(
        "no corpus manifest: set `manifest` in the config, or run `glyphsim synth` to create {}",
        fallback.display()
    )))
}

fn prepare(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg();
    let manifest = CorpusManifest::load(&manifest_path(ctx)?)?;
    manifest.validate(true)?;
    let mut loaded: BTreeMap<String, ScriptCorpus> = BTreeMap::new();
    for e in manifest.entries.iter().filter(|e| e.composite.is_none()) {
        let (corpus, report) = load_corpus(&manifest, e, &cfg.preprocess)?;
        if !report.skipped.is_empty() {
            warn!("{}", report.to_text().trim_end());
        }
        let dir = ctx.run.prepared(&e.name);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("load_report.txt"), report.to_text())?;
        loaded.insert(e.name.clone(), corpus);
    }
    for e in manifest.entries.iter().filter(|e| e.composite.is_some()) {
        let parts = e.composite.as_ref().expect("filtered");
        let sources: Vec<(&ScriptCorpus, f64)> = parts.iter().map(|p| (&loaded[&p.source], p.proportion)).collect();
        let size = e.size.unwrap_or_else(|| sources.iter().map(|(c, _)| c.len()).sum());
        let seed = rng::derive(ctx.seed("composite"), &[rng::label(&e.name)]);
        let corpus = build_composite(&e.name, e.role, &sources, size, &cfg.train.augmentation, seed)?;
        loaded.insert(e.name.clone(), corpus);
    }
    let ratios = (cfg.split.train, cfg.split.val, cfg.split.test);
    let mut index = PreparedIndex { corpora: Vec::new() };
    for e in &manifest.entries {
        if e.source_only {
            continue;
        }
        let mut corpus = loaded.remove(&e.name).expect("every entry loaded");
        let is_target = corpus.role == Role::Target;
        if is_target {
            corpus = split(&corpus, ratios, ctx.seed("split"))?;
        }
        save_prepared(&corpus, &ctx.run.prepared(&e.name))?;
        info!("prepared {} ({} glyphs, {:?})", e.name, corpus.len(), corpus.role);
        index.corpora.push(PreparedEntry { name: e.name.clone(), role: corpus.role, glyphs: corpus.len(), split: is_target });
    }
    write_json(&ctx.run.prepared_dir().join("index.json"), &index)
}

fn load_corpus_named(ctx: &Ctx, name: &str) -> Result<ScriptCorpus> {
    let dir = ctx.run.prepared(name);
    require(&dir.join("corpus.json"), &format!("prepared corpus `{name}`"), "prepare")?;
    Ok(load_prepared(&dir)?)
}

/// Comparison and target scripts after config overrides.
fn roles(ctx: &Ctx) -> Result<(Vec<String>, Vec<String>)> {
    let index = ctx.run.prepared_index()?;
    let known: BTreeSet<&str> = index.corpora.iter().map(|c| c.name.as_str()).collect();
    let by_role = |r: Role| index.corpora.iter().filter(|c| c.role == r).map(|c| c.name.clone()).collect::<Vec<_>>();
    let a = &ctx.cfg().analysis;
    let comparisons = a.comparisons.clone().unwrap_or_else(|| by_role(Role::Comparison));
    let targets = a.targets.clone().unwrap_or_else(|| by_role(Role::Target));
    for n in comparisons.iter().chain(&targets) {
        if !known.contains(n.as_str()) {
            bail!(UserError::new(format!("script `{n}` is not among the prepared corpora {known:?}")));
        }
    }
    if comparisons.is_empty() || targets.is_empty() {
        bail!(UserError::new("analysis needs at least one comparison and one target script"));
    }
    Ok((comparisons, targets))
}

/// Ensemble spaces and the scripts each must embed.
fn spaces(ctx: &Ctx) -> Result<BTreeMap<String, Vec<String>>> {
    let (comparisons, targets) = roles(ctx)?;
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for t in &targets {
        let space = ctx.cfg().analysis.space.clone().unwrap_or_else(|| t.clone());
        let e = out.entry(space.clone()).or_default();
        e.extend(comparisons.iter().cloned());
        e.insert(t.clone());
        e.insert(space);
    }
    Ok(out.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect())
}

fn space_of(ctx: &Ctx, target: &str) -> String {
    ctx.cfg().analysis.space.clone().unwrap_or_else(|| target.to_string())
}

fn train(ctx: &Ctx, only: &[String], force: bool) -> Result<()> {
    let cfg = ctx.cfg();
    if cfg.preset == Preset::Paper && !force {
        bail!(UserError::new(
            "the `paper` preset trains full-size encoders (hours per model on a data-centre GPU); \
             pass --force to train it anyway, or use `--preset tiny` for a CPU-scale run"
        ));
    }
    let index = ctx.run.prepared_index()?;
    let mut targets: Vec<String> = match &cfg.analysis.space {
        Some(s) => vec![s.clone()],
        None => index.corpora.iter().filter(|c| c.role == Role::Target).map(|c| c.name.clone()).collect(),
    };
    if !only.is_empty() {
        for t in only {
            if !index.corpora.iter().any(|c| &c.name == t) {
                bail!(UserError::new(format!("unknown target `{t}`")));
            }
        }
        targets = only.to_vec();
    }
    if targets.is_empty() {
        bail!(UserError::new("no target scripts to train; mark manifest entries with role = \"target\""));
    }
    let enc_cfg = cfg.encoder();
    for t in &targets {
        let mut corpus = load_corpus_named(ctx, t)?;
        if corpus.splits.is_none() {
            corpus = split(&corpus, (cfg.split.train, cfg.split.val, cfg.split.test), ctx.seed("split"))?;
        }
        let tr = corpus.subset(SplitLabel::Train);
        let va = corpus.subset(SplitLabel::Val);
        info!("training {} members on {t}: {} train / {} val glyphs", cfg.train.seeds.len(), tr.len(), va.len());
        let dir = ctx.run.models(t);
        let (ens, records) = train_ensemble(t, &tr, &va, &enc_cfg, &cfg.train, &dir)?;
        for r in &records {
            let note = match r.status {
                TrainStatus::EarlyStopped => " (early stop)",
                _ => "",
            };
            info!("{t} model {} seed {}: best val {:.5} at epoch {}{note}", r.model_idx, r.seed, r.best_val_loss, r.best_epoch);
        }
        if ens.members.is_empty() {
            bail!("every member of the `{t}` ensemble failed to train");
        }
        if ens.is_partial() {
            warn!("ensemble {t} is partial: {} of {} members", ens.members.len(), ens.expected);
        }
    }
    Ok(())
}

fn load_ensemble(ctx: &Ctx, space: &str) -> Result<Ensemble> {
    let dir = ctx.run.models(space);
    require(&dir.join(glyphsim::ensemble::INDEX_FILE), &format!("ensemble `{space}`"), "train")?;
    Ok(Ensemble::load(&dir)?)
}

fn embed(ctx: &Ctx, allow_partial: bool) -> Result<()> {
    for (space, scripts) in spaces(ctx)? {
        let ens = load_ensemble(ctx, &space)?;
        ens.require_complete(allow_partial)?;
        let mut models = Vec::new();
        for s in &scripts {
            let corpus = load_corpus_named(ctx, s)?;
            let glyphs: Vec<&GlyphImage> = corpus.glyphs.iter().collect();
            let (members, consensus) = embed_all(&ens, &glyphs, s, ctx.cfg().embed_batch, allow_partial)?;
            models = members.iter().map(|m| m.model_id.clone()).collect();
            for set in members.iter().chain([&consensus]) {
                set.save(&ctx.run.embedding_stem(&space, s, &set.model_id))?;
            }
            info!("embedded {s} ({} glyphs) in the {space} space", corpus.len());
        }
        let index = EmbeddingIndex { space: space.clone(), scripts, models, partial: ens.is_partial() };
        write_json(&ctx.run.embeddings(&space).join("index.json"), &index)?;
    }
    Ok(())
}

type SetMap = BTreeMap<(String, String, String), EmbeddingSet>;

/// Every embedding set keyed by `(space, script, model)`, plus the member
/// model ids shared by all spaces.
fn load_sets(ctx: &Ctx) -> Result<(SetMap, Vec<String>, BTreeMap<String, Vec<String>>)> {
    let spaces = spaces(ctx)?;
    let mut sets = BTreeMap::new();
    let mut models: Option<Vec<String>> = None;
    for (space, scripts) in &spaces {
        let index = ctx.run.embedding_index(space)?;
        match &models {
            None => models = Some(index.models.clone()),
            Some(m) if *m != index.models => {
                bail!(UserError::new(format!("space `{space}` has models {:?}, expected {m:?}", index.models)))
            }
            _ => {}
        }
        for s in scripts {
            if !index.scripts.contains(s) {
                bail!(UserError::new(format!("`{s}` was not embedded in the `{space}` space; run `glyphsim embed` again")));
            }
            for m in index.models.iter().map(String::as_str).chain([CONSENSUS]) {
                let stem = ctx.run.embedding_stem(space, s, m);
                require(&stem.with_extension("emb"), &format!("embeddings of `{s}` ({m}, {space} space)"), "embed")?;
                sets.insert((space.clone(), s.clone(), m.to_string()), EmbeddingSet::load(&stem)?);
            }
        }
    }
    Ok((sets, models.unwrap_or_default(), spaces))
}

fn write_table(ctx: &Ctx, name: &str, t: &Table) -> Result<()> {
    let path = ctx.run.tables().join(name);
    t.write(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn analyze(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg();
    let (comparisons, targets) = roles(ctx)?;
    let (sets, models, spaces) = load_sets(ctx)?;
    let lookup = |t: &str, m: &str, s: &str| sets.get(&(space_of(ctx, t), s.to_string(), m.to_string()));
    let grid = SimilarityGrid::build(&comparisons, &targets, &models, lookup)?;
    let acfg = AnalysisConfig { alpha: cfg.analysis.alpha, subsample: cfg.analysis.subsample, seed: ctx.seed("analysis") };

    write_table(ctx, "mean_similarity.csv", &mean_similarity_table(&grid, None))?;
    write_table(ctx, "mean_similarity_consensus.csv", &mean_similarity_table(&grid, Some(CONSENSUS)))?;
    write_table(ctx, "model_similarity.csv", &model_matrix_table(&grid))?;
    if targets.len() >= 2 {
        let member_tests = stat_tests(&grid, &models, &acfg)?;
        let consensus_tests = stat_tests(&grid, &[CONSENSUS.to_string()], &acfg)?;
        write_table(ctx, "effect_sizes.csv", &analysis::effect_size_table(&grid, &member_tests))?;
        write_table(ctx, "statistical_tests.csv", &stats_table(&member_tests))?;
        write_table(ctx, "statistical_tests_consensus.csv", &stats_table(&consensus_tests))?;
        if models.len() >= 2 {
            write_table(ctx, "paired_model_tests.csv", &paired_table(&paired_tests(&grid)?))?;
        }
    } else {
        warn!("a single target script: skipping the pairwise target tests");
    }
    if models.len() >= 2 {
        write_table(ctx, "loo_stability.csv", &loo_table(&loo_reports(&grid)?))?;
    } else {
        warn!("a single ensemble member: skipping leave-one-out stability");
    }
    for t in &targets {
        let space = space_of(ctx, t);
        let scripts = &spaces[&space];
        let per_member: Vec<BTreeMap<String, EmbeddingSet>> = models
            .iter()
            .map(|m| {
                scripts
                    .iter()
                    .map(|s| (s.clone(), sets[&(space.clone(), s.clone(), m.clone())].clone()))
                    .collect()
            })
            .collect();
        let rows = centroid_summary(t, &per_member)?;
        write_table(ctx, &format!("similarity_summary_{t}.csv"), &summary_table(&rows))?;
    }
    Ok(())
}

/// Consensus sets of every script in one space, in script order.
fn consensus_sets<'a>(sets: &'a SetMap, space: &str, scripts: &[String]) -> Vec<&'a EmbeddingSet> {
    scripts
        .iter()
        .filter_map(|s| sets.get(&(space.to_string(), s.clone(), CONSENSUS.to_string())))
        .collect()
}

fn cluster(ctx: &Ctx) -> Result<()> {
    let (sets, _, spaces) = load_sets(ctx)?;
    for (space, scripts) in &spaces {
        let cons = consensus_sets(&sets, space, scripts);
        if cons.len() < 2 {
            warn!("space {space}: fewer than two scripts, nothing to cluster");
            continue;
        }
        let cents = script_centroids(&cons)?;
        let dir = ctx.run.figures().join(space);
        let mut order = None;
        for l in Linkage::ALL {
            let d = cluster_centroids(&cents, l)?;
            dendrogram_png(&d, &dir.join(format!("dendrogram_{l}.png")))?;
            if l == Linkage::Average {
                order = Some(d.leaf_order());
            }
        }
        let hm = similarity_heatmap(&cents, &order.expect("average linkage drawn"))?;
        heatmap_png(&hm, &format!("Centroid cosine similarity ({space} space)"), &dir.join("similarity_heatmap.png"))?;
        info!("clustered {} scripts in the {space} space", cents.len());
    }
    Ok(())
}

fn project(ctx: &Ctx, method: &str) -> Result<()> {
    let (sets, _, spaces) = load_sets(ctx)?;
    for (space, scripts) in &spaces {
        let cons = consensus_sets(&sets, space, scripts);
        let views: Vec<_> = cons.iter().map(|s| s.rows.view()).collect();
        let x: Array2<f64> = concatenate(Axis(0), &views)?;
        let ids: Vec<String> = cons.iter().flat_map(|s| s.ids.iter().map(move |i| format!("{}/{i}", s.script))).collect();
        let groups: Vec<String> = cons.iter().flat_map(|s| std::iter::repeat_n(s.script.clone(), s.len())).collect();
        let dir = ctx.run.figures().join(space);
        if method != "tsne" {
            let p = pca_project(&x, 2)?;
            scatter_png(&p, &ids, &groups, &format!("PCA of consensus embeddings ({space} space)"), &dir.join("pca.png"))?;
            info!("PCA in the {space} space: {:.1}% variance in two components", 100.0 * p.total_explained());
        }
        if method != "pca" {
            let mut tcfg = ctx.cfg().projection.tsne.clone();
            let n = x.nrows();
            let cap = ((n as f64 - 1.0) / 3.0).max(1.0);
            if tcfg.perplexity > cap {
                warn!("perplexity {} is too large for {n} points; using {cap:.1}", tcfg.perplexity);
                tcfg.perplexity = cap;
            }
            let p = tsne_project(&x, &tcfg, ctx.seed("tsne"))?;
            scatter_png(&p, &ids, &groups, &format!("t-SNE of consensus embeddings ({space} space)"), &dir.join("tsne.png"))?;
        }
    }
    Ok(())
}

fn gradcam(ctx: &Ctx, named: &[String], per_script: Option<usize>, member: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg().gradcam;
    let per_script = per_script.unwrap_or(cfg.per_script);
    let member = member.unwrap_or(cfg.member);
    let mut found = BTreeSet::new();
    for (space, scripts) in spaces(ctx)? {
        let ens = load_ensemble(ctx, &space)?;
        let enc = &ens
            .members
            .get(member)
            .ok_or_else(|| UserError::new(format!("ensemble `{space}` has no member {member}")))?
            .encoder;
        for s in &scripts {
            let corpus = load_corpus_named(ctx, s)?;
            let mut glyphs: Vec<&GlyphImage> = corpus.glyphs.iter().collect();
            glyphs.sort_by(|a, b| a.glyph_id.cmp(&b.glyph_id));
            let chosen: Vec<&GlyphImage> = if named.is_empty() {
                glyphs.into_iter().take(per_script).collect()
            } else {
                glyphs.into_iter().filter(|g| named.contains(&g.glyph_id)).collect()
            };
            for g in chosen {
                found.insert(g.glyph_id.clone());
                let intensity = g.intensity();
                for map in grad_cam_both(enc, g)? {
                    if map.degenerate {
                        warn!("{s}/{}: degenerate {} map", g.glyph_id, map.pathway);
                    }
                    let stem = g.glyph_id.trim_end_matches(".png").trim_end_matches(".jpg").replace('/', "_");
                    let path = ctx.run.gradcam().join(&space).join(s).join(format!("{stem}_{}.png", map.pathway));
                    overlay_png(&intensity, &map, &path)?;
                }
            }
        }
    }
    for n in named {
        if !found.contains(n) {
            bail!(UserError::new(format!("glyph `{n}` not found in any prepared corpus")));
        }
    }
    info!("wrote Grad-CAM overlays for {} glyphs", found.len());
    Ok(())
}

fn collect(dir: &Path, root: &Path, exts: &[&str], out: &mut Vec<String>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, root, exts, out)?;
        } else if p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)) {
            out.push(p.strip_prefix(root).unwrap_or(&p).display().to_string());
        }
    }
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let root = &ctx.run.root;
    require(&ctx.run.tables().join("mean_similarity.csv"), "analysis tables", "analyze")?;
    let index = ctx.run.prepared_index()?;
    let mut training = Vec::new();
    for c in index.corpora.iter().filter(|c| c.role == Role::Target) {
        let summary = ctx.run.models(&c.name).join(SUMMARY_FILE);
        if summary.exists() {
            let dest = ctx.run.tables().join(format!("training_summary_{}.csv", c.name));
            std::fs::copy(&summary, &dest)?;
            training.push(dest.strip_prefix(root).unwrap_or(&dest).display().to_string());
        }
    }
    let (mut tables, mut figures, mut sidecars, mut heat, mut models) = (vec![], vec![], vec![], vec![], vec![]);
    collect(&ctx.run.tables(), root, &["csv"], &mut tables)?;
    collect(&ctx.run.figures(), root, &["png"], &mut figures)?;
    collect(&ctx.run.gradcam(), root, &["png"], &mut figures)?;
    collect(&ctx.run.figures(), root, &["json"], &mut sidecars)?;
    collect(&ctx.run.gradcam(), root, &["json"], &mut sidecars)?;
    collect(&ctx.run.gradcam(), root, &["csv"], &mut heat)?;
    collect(&root.join("models"), root, &["ckpt", "json"], &mut models)?;
    let consensus_index: Vec<String> = spaces(ctx)?
        .keys()
        .map(|s| format!("embeddings/{s}/index.json"))
        .filter(|p| root.join(p).exists())
        .collect();
    let index_json = json!({
        "tool": "glyphsim",
        "version": env!("CARGO_PKG_VERSION"),
        "config": "config.resolved.toml",
        "run_manifest": "run_manifest.json",
        "training_summaries": training,
        "tables": tables,
        "figures": figures,
        "figure_data": sidecars,
        "heat_grids": heat,
        "models": models,
        "embeddings": consensus_index,
    });
    write_json(&ctx.run.index(), &index_json)?;
    let _: serde_json::Value = read_json(&ctx.run.index(), "report index", "report")?;
    info!("report index: {}", ctx.run.index().display());
    Ok(())
}
