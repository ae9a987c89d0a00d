use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ctsrec::config::RunConfig;
use ctsrec::evaluation::{candidate_set, evaluate};
use ctsrec::io::{ingest, write_interactions, Checkpoint, Dataset, IdMapping};
use ctsrec::model::{rank_by_scores, score_candidates};
use ctsrec::synthetic::{planted, PlantedConfig};
use ctsrec::training::TrainingData;
use ctsrec::{
    chronological_split, fit, top_attention, Ctbg, Interaction, MetricsReport, ModelParams, NodeRef, SplitDataset, TimeEncoder,
};
use sha2::{Digest, Sha256};

use crate::{Cli, Command};

struct Run {
    config: RunConfig,
    run_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed_init {
        config.seeds.init = s;
    }
    if let Some(s) = cli.seed_sampler {
        config.seeds.sampler = s;
    }
    if let Some(s) = cli.seed_negatives {
        config.seeds.negatives = s;
    }
    if let Some(w) = cli.workers {
        config.train.workers = w;
    }
    if let Some(m) = cli.mode {
        config.eval.mode = m;
    }
    if let Some(dir) = &cli.output_dir {
        config.paths.output_dir = dir.clone();
    }
    if let Command::Ingest { input, delimiter } = &cli.command {
        if let Some(p) = input {
            config.data.path = p.clone();
        }
        if let Some(d) = delimiter {
            config.data.delimiter = *d;
        }
    }
    config.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.train.workers)
        .build_global()
        .context("starting worker pool")?;

    let run_id = match &cli.run_id {
        Some(id) => id.clone(),
        None => run_hash(&config)?,
    };
    let ctx = Run {
        run_dir: config.paths.output_dir.join(run_id),
        config,
    };
    match cli.command {
        Command::Ingest { .. } => cmd_ingest(&ctx),
        Command::Synth { output, seed, noise } => cmd_synth(&output, seed, noise),
        Command::Train => cmd_train(&ctx),
        Command::Eval { top } => cmd_eval(&ctx, top),
        Command::ProbeTime { pairs, omega, seconds } => cmd_probe_time(&ctx, &pairs, &omega, seconds),
        Command::ExportAttention { user, offsets, at } => cmd_export_attention(&ctx, &user, &offsets, at),
        Command::Sweep => cmd_sweep(&ctx),
    }
}

/// Hash of everything that determines a trained model.
fn run_hash(config: &RunConfig) -> Result<String> {
    let mut c = config.clone();
    c.train.workers = 0;
    c.eval = Default::default();
    c.paths = Default::default();
    c.sweep = Default::default();
    let digest = Sha256::digest(c.to_toml()?.as_bytes());
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    ingest(&config.data.path, config.data.delimiter).with_context(|| format!("ingesting {}", config.data.path.display()))
}

fn cmd_ingest(ctx: &Run) -> Result<()> {
    let data = load_dataset(&ctx.config)?;
    let mut ids = Vec::new();
    data.ids.write_tsv(&mut ids)?;
    write(&ctx.run_dir, "ids.tsv", std::str::from_utf8(&ids)?)?;
    let mut dense = String::new();
    for x in &data.interactions {
        writeln!(dense, "{}\t{}\t{}", x.user, x.item, x.timestamp)?;
    }
    write(&ctx.run_dir, "interactions.tsv", &dense)?;
    let summary = format!(
        "users\t{}\nitems\t{}\ninteractions\t{}\ntime_offset\t{}\ntime_span\t{}\n",
        data.num_users(),
        data.num_items(),
        data.interactions.len(),
        data.normalizer.offset,
        data.normalizer.span
    );
    write(&ctx.run_dir, "ingest.tsv", &summary)?;
    print!("{summary}");
    eprintln!("wrote {}", ctx.run_dir.display());
    Ok(())
}

fn cmd_synth(output: &Path, seed: u64, noise: f64) -> Result<()> {
    let cfg = PlantedConfig {
        noise,
        ..PlantedConfig::default()
    };
    let data = planted(&cfg, seed)?;
    let ids = IdMapping {
        users: (0..data.num_users).map(|u| format!("u{u}")).collect(),
        items: (0..data.num_items).map(|i| format!("i{i}")).collect(),
    };
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_interactions(&mut buf, &data.interactions, &ids, '\t')?;
    fs::write(output, buf).with_context(|| format!("writing {}", output.display()))?;
    eprintln!("wrote {} interactions to {}", data.interactions.len(), output.display());
    Ok(())
}

/// Interactions re-indexed through a checkpoint's id mapping and time normalization.
fn remap(data: &Dataset, ckpt: &Checkpoint) -> Result<Vec<Interaction>> {
    let users = ckpt.ids.user_index();
    let items = ckpt.ids.item_index();
    data.interactions
        .iter()
        .map(|x| {
            let raw_u = &data.ids.users[x.user];
            let raw_i = &data.ids.items[x.item];
            let u = *users.get(raw_u.as_str()).ok_or_else(|| anyhow!("user `{raw_u}` unknown to the checkpoint"))?;
            let i = *items.get(raw_i.as_str()).ok_or_else(|| anyhow!("item `{raw_i}` unknown to the checkpoint"))?;
            Ok(Interaction::new(u, i, ckpt.normalizer.normalize(x.timestamp)))
        })
        .collect()
}

struct Graphs {
    split: SplitDataset,
    train: Ctbg,
    train_valid: Ctbg,
    full: Ctbg,
}

fn graphs(all: &[Interaction], ratios: [f64; 3], num_users: usize, num_items: usize) -> Result<Graphs> {
    let split = chronological_split(all, ratios)?;
    let train = Ctbg::build(&split.train, num_users, num_items)?;
    let mut tv = split.train.clone();
    tv.extend_from_slice(&split.valid);
    let train_valid = Ctbg::build(&tv, num_users, num_items)?;
    let full = Ctbg::build(all, num_users, num_items)?;
    Ok(Graphs {
        split,
        train,
        train_valid,
        full,
    })
}

const LOG_HEADER: &str = "epoch\tmean_loss\tvalid_recall@10\tvalid_ndcg@10\tvalid_mrr\twall_seconds\n";

fn train_model(config: &RunConfig, data: &Dataset, log: &mut String) -> Result<(ModelParams, Graphs)> {
    let all = data.normalized();
    let g = graphs(&all, config.data.ratios, data.num_users(), data.num_items())?;
    let mut params = ModelParams::init(config.model.clone(), data.num_users(), data.num_items(), config.seeds.init)?;
    let td = TrainingData {
        train_graph: &g.train,
        train: &g.split.train,
        valid_graph: Some(&g.train_valid),
        valid: &g.split.valid,
    };
    log.push_str(LOG_HEADER);
    fit(&mut params, td, &config.train, &config.eval_config(), config.seeds.train(), |l| {
        let line = l.to_record('\t');
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    Ok((params, g))
}

fn checkpoint_path(ctx: &Run) -> PathBuf {
    ctx.config.paths.checkpoint.clone().unwrap_or_else(|| ctx.run_dir.join("model.ckpt"))
}

fn cmd_train(ctx: &Run) -> Result<()> {
    let data = load_dataset(&ctx.config)?;
    let mut log = String::new();
    let (params, _) = train_model(&ctx.config, &data, &mut log)?;
    write(&ctx.run_dir, "train_log.tsv", &log)?;
    write(&ctx.run_dir, "config.toml", &ctx.config.to_toml()?)?;
    let ckpt = Checkpoint {
        params,
        ids: data.ids,
        normalizer: data.normalizer,
    };
    let path = checkpoint_path(ctx);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(&path)?;
    println!("checkpoint\t{}", path.display());
    Ok(())
}

fn load_checkpoint(ctx: &Run) -> Result<Checkpoint> {
    let path = checkpoint_path(ctx);
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {} (run `train` first)", path.display()))
}

fn mode_tag(ctx: &Run) -> String {
    ctx.config.eval.mode.to_string().replace(':', "-")
}

fn report_files(ctx: &Run, stem: &str, report: &MetricsReport) -> Result<()> {
    let tsv = format!("{}\n{}\n", report.header('\t'), report.to_record('\t'));
    write(&ctx.run_dir, &format!("{stem}.tsv"), &tsv)?;
    write(&ctx.run_dir, &format!("{stem}.txt"), &report.to_table())?;
    Ok(())
}

fn cmd_eval(ctx: &Run, top: usize) -> Result<()> {
    let ckpt = load_checkpoint(ctx)?;
    let data = load_dataset(&ctx.config)?;
    let all = remap(&data, &ckpt)?;
    let (nu, ni) = (ckpt.params.num_users, ckpt.params.num_items);
    let g = graphs(&all, ctx.config.data.ratios, nu, ni)?;
    let eval = ctx.config.eval_config();
    let report = evaluate(&ckpt.params, &g.full, &g.split.test, &eval)?;
    report_files(ctx, &format!("metrics_{}", mode_tag(ctx)), &report)?;
    print!("{}", report.to_table());
    if top > 0 {
        let mut out = String::from("user\ttimestamp\trank\titem\tscore\n");
        for x in &g.split.test {
            let cands = candidate_set(&g.full, x.user, x.timestamp, x.item, eval.mode, eval.negatives_seed)?;
            let scores = score_candidates(&ckpt.params, &g.full, x.user, x.timestamp, &cands, eval.sampler_seed)?;
            let ranked = rank_by_scores(cands.into_iter().zip(scores).collect());
            for (r, (item, s)) in ranked.into_iter().take(top).enumerate() {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{:.6}",
                    ckpt.ids.users[x.user],
                    ckpt.normalizer.denormalize(x.timestamp),
                    r + 1,
                    ckpt.ids.items[item],
                    s
                )?;
            }
        }
        write(&ctx.run_dir, &format!("ranks_{}.tsv", mode_tag(ctx)), &out)?;
    }
    Ok(())
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(':').ok_or_else(|| anyhow!("pair `{s}` is not of the form t1:t2"))?;
    let t1: f64 = a.trim().parse().with_context(|| format!("bad time `{a}`"))?;
    let t2: f64 = b.trim().parse().with_context(|| format!("bad time `{b}`"))?;
    if !(t1.is_finite() && t2.is_finite()) {
        bail!("pair `{s}` has a non-finite time");
    }
    Ok((t1, t2))
}

fn cmd_probe_time(ctx: &Run, pairs: &[String], omega: &[f64], seconds: bool) -> Result<()> {
    let pairs: Vec<(f64, f64)> = pairs.iter().map(|p| parse_pair(p)).collect::<Result<_>>()?;
    let (enc, normalizer) = if omega.is_empty() {
        let ckpt = load_checkpoint(ctx)?;
        (ckpt.params.time_encoder(), Some(ckpt.normalizer))
    } else {
        (TimeEncoder::new(omega.to_vec())?, None)
    };
    let to_model = |t: f64| -> Result<f64> {
        match (seconds, &normalizer) {
            (false, _) => Ok(t),
            (true, Some(n)) => Ok(n.normalize(t)),
            (true, None) => bail!("--seconds needs a checkpoint's time normalization"),
        }
    };
    let mut out = String::from("t1\tt2\tpsi\n");
    for (t1, t2) in pairs {
        let psi = enc.kernel(to_model(t1)?, to_model(t2)?);
        writeln!(out, "{t1}\t{t2}\t{psi:.12}")?;
    }
    write(&ctx.run_dir, "kernel.tsv", &out)?;
    print!("{out}");
    Ok(())
}

/// `+5d`, `-2h`, `30m`, `90s`, `+1w` or plain seconds.
fn parse_offset(label: &str) -> Result<f64> {
    let s = label.trim();
    let unit = s.chars().last().filter(|c| c.is_ascii_alphabetic());
    let (num, scale) = match unit {
        Some(u) => {
            let scale = match u {
                's' => 1.0,
                'm' => 60.0,
                'h' => 3600.0,
                'd' => 86_400.0,
                'w' => 604_800.0,
                _ => bail!("unknown unit `{u}` in offset `{label}` (s, m, h, d, w)"),
            };
            (&s[..s.len() - 1], scale)
        }
        None => (s, 1.0),
    };
    let v: f64 = num.parse().with_context(|| format!("bad offset `{label}`"))?;
    Ok(v * scale)
}

fn cmd_export_attention(ctx: &Run, user: &str, offsets: &[String], at: Option<f64>) -> Result<()> {
    let ckpt = load_checkpoint(ctx)?;
    if ckpt.params.config.layers == 0 {
        bail!("the checkpoint has no temporal layers, so there is no attention to export");
    }
    let data = load_dataset(&ctx.config)?;
    let all = remap(&data, &ckpt)?;
    let u = *ckpt
        .ids
        .user_index()
        .get(user)
        .ok_or_else(|| anyhow!("unknown user `{user}`"))?;
    let graph = Ctbg::build(&all, ckpt.params.num_users, ckpt.params.num_items)?;
    let base = match at {
        Some(t) => t,
        None => {
            let last = graph
                .adjacency(NodeRef::User(u))?
                .last()
                .ok_or_else(|| anyhow!("user `{user}` has no interactions; pass --at"))?;
            ckpt.normalizer.denormalize(last.timestamp)
        }
    };
    let labels: Vec<(String, f64)> = offsets
        .iter()
        .map(|o| Ok((o.clone(), parse_offset(o)?)))
        .collect::<Result<_>>()?;
    let mut out = String::from("offset\titem\thead\tweight\n");
    for (label, secs) in labels {
        let t = ckpt.normalizer.normalize(base + secs);
        match top_attention(&ckpt.params, &graph, NodeRef::User(u), t, ctx.config.seeds.sampler)? {
            Some(rec) => {
                for (h, weights) in rec.weights.iter().enumerate() {
                    for (item, w) in rec.neighbor_ids.iter().zip(weights) {
                        writeln!(out, "{label}\t{}\t{h}\t{w:.6}", ckpt.ids.items[*item])?;
                    }
                }
            }
            None => eprintln!("{label}: no neighbors before this time"),
        }
    }
    let safe: String = user.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    write(&ctx.run_dir, &format!("attention_{safe}.tsv"), &out)?;
    print!("{out}");
    Ok(())
}

fn cmd_sweep(ctx: &Run) -> Result<()> {
    if ctx.config.sweep.is_empty() {
        bail!("the config has no [sweep] value lists");
    }
    let data = load_dataset(&ctx.config)?;
    let grid = ctx.config.sweep.expand(&ctx.config);
    let mut rows: Vec<String> = Vec::new();
    let mut header = String::new();
    for (k, cfg) in grid.iter().enumerate() {
        if let Err(e) = cfg.validate() {
            eprintln!("skipping grid point {k}: {e}");
            continue;
        }
        eprintln!(
            "[{}/{}] dim={} layers={} neighbors={} heads={} lr={} l2={}",
            k + 1,
            grid.len(),
            cfg.model.dim,
            cfg.model.layers,
            cfg.model.neighbors,
            cfg.model.heads,
            cfg.train.learning_rate,
            cfg.train.l2_lambda
        );
        let mut log = String::new();
        let (params, g) = train_model(cfg, &data, &mut log)?;
        let report = evaluate(&params, &g.full, &g.split.test, &cfg.eval_config())?;
        let id = run_hash(cfg)?;
        write(&ctx.run_dir.join("sweep").join(&id), "train_log.tsv", &log)?;
        header = format!("run\tdim\tlayers\tneighbors\theads\tlearning_rate\tl2_lambda\t{}", report.header('\t'));
        rows.push(format!(
            "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            cfg.model.dim,
            cfg.model.layers,
            cfg.model.neighbors,
            cfg.model.heads,
            cfg.train.learning_rate,
            cfg.train.l2_lambda,
            report.to_record('\t')
        ));
    }
    if rows.is_empty() {
        bail!("no valid grid points");
    }
    let out = format!("{header}\n{}\n", rows.join("\n"));
    write(&ctx.run_dir, &format!("sweep_{}.tsv", mode_tag(ctx)), &out)?;
    print!("{out}");
    Ok(())
}
